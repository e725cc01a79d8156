//! The two parametric models: an x-predicting denoiser and a feature
//! classifier. Both are SiLU MLPs whose parameters live in a [`ParamStore`]
//! so they can be differentiated through the [`Graph`] tape.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::graph::{silu, Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// How a model's parameters enter a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    /// Parameter nodes: gradients are collected for this model's store.
    Train,
    /// Constants: gradients flow through the model to its inputs only.
    Frozen,
}

/// Affine layer `y = x W + b` addressed by name inside a store.
#[derive(Debug, Clone, Copy)]
struct Layer {
    w: usize,
    b: usize,
}

impl Layer {
    fn graph(&self, g: &mut Graph, params: &ParamStore, x: Var, binding: Binding) -> Result<Var> {
        let (w, b) = match binding {
            Binding::Train => (g.param(params, self.w), g.param(params, self.b)),
            Binding::Frozen => (
                g.constant(params.tensor(self.w).value.clone()),
                g.constant(params.tensor(self.b).value.clone()),
            ),
        };
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }

    fn plain(&self, params: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&params.tensor(self.w).value) + &params.tensor(self.b).value
    }

    fn fan_in(&self, params: &ParamStore) -> usize {
        params.tensor(self.w).value.nrows()
    }

    fn fan_out(&self, params: &ParamStore) -> usize {
        params.tensor(self.w).value.ncols()
    }
}

fn init_layer<R: Rng + ?Sized>(
    params: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    zero: bool,
    rng: &mut R,
) -> Result<Layer> {
    let (w, b) = if zero {
        (Array2::zeros((fan_in, fan_out)), vec![0.0; fan_out])
    } else {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng));
        let b = (0..fan_out).map(|_| dist.sample(rng)).collect();
        (w, b)
    };
    let w = params.add_matrix(&format!("{name}.w"), w)?;
    let b = params.add_vector(&format!("{name}.b"), b)?;
    Ok(Layer { w, b })
}

fn bind_layer(params: &ParamStore, name: &str) -> Result<Layer> {
    let lookup = |suffix: &str| {
        let key = format!("{name}.{suffix}");
        params
            .index_of(&key)
            .ok_or_else(|| Error::ModelKind(format!("missing tensor `{key}`")))
    };
    let layer = Layer {
        w: lookup("w")?,
        b: lookup("b")?,
    };
    let w = &params.tensor(layer.w);
    let b = &params.tensor(layer.b);
    if w.shape.len() != 2 || b.shape != vec![w.value.ncols()] {
        return Err(Error::ModelKind(format!("layer `{name}` has inconsistent shapes")));
    }
    Ok(layer)
}

fn chain_layers(params: &ParamStore, names: &[String]) -> Result<Vec<Layer>> {
    let layers: Vec<Layer> = names
        .iter()
        .map(|n| bind_layer(params, n))
        .collect::<Result<_>>()?;
    for pair in layers.windows(2) {
        if pair[0].fan_out(params) != pair[1].fan_in(params) {
            return Err(Error::ModelKind("consecutive layers do not chain".into()));
        }
    }
    Ok(layers)
}

fn check_finite(x: &Array2<f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

/// Sinusoidal features of `t` (scaled to a 1000-step clock), `dim` must be even.
pub fn time_embedding(t: &[f64], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((t.len(), dim));
    for (r, &tr) in t.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            let arg = 1000.0 * tr * freq;
            out[[r, k]] = arg.sin();
            out[[r, half + k]] = arg.cos();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserSpec {
    pub data_dim: usize,
    pub time_embed_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        DenoiserSpec {
            data_dim: 2,
            time_embed_dim: 16,
            hidden: vec![128, 128, 128],
        }
    }
}

/// `theta(z_t, t) -> x_hat`: MLP over `[z_t, embed(t)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub params: ParamStore,
    spec: DenoiserSpec,
    layers: Vec<Layer>,
}

impl PartialEq for Layer {
    fn eq(&self, other: &Self) -> bool {
        self.w == other.w && self.b == other.b
    }
}

impl Denoiser {
    /// Fresh model; the output layer is zero so the untrained model predicts 0.
    pub fn new<R: Rng + ?Sized>(spec: DenoiserSpec, rng: &mut R) -> Result<Self> {
        if spec.data_dim == 0 || spec.hidden.is_empty() || !spec.time_embed_dim.is_multiple_of(2) {
            return Err(Error::config(
                "model",
                "denoiser needs data_dim > 0, at least one hidden layer and an even time_embed_dim",
            ));
        }
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut fan_in = spec.data_dim + spec.time_embed_dim;
        for (i, &h) in spec.hidden.iter().enumerate() {
            layers.push(init_layer(&mut params, &format!("l{i}"), fan_in, h, false, rng)?);
            fan_in = h;
        }
        let last = spec.hidden.len();
        layers.push(init_layer(
            &mut params,
            &format!("l{last}"),
            fan_in,
            spec.data_dim,
            true,
            rng,
        )?);
        Ok(Denoiser {
            params,
            spec,
            layers,
        })
    }

    /// Rebuilds a denoiser from a store, inferring sizes from tensor shapes.
    pub fn from_params(params: ParamStore) -> Result<Self> {
        let n_layers = params.len() / 2;
        if n_layers < 2 || !params.len().is_multiple_of(2) {
            return Err(Error::ModelKind("denoiser needs at least two layers".into()));
        }
        let names: Vec<String> = (0..n_layers).map(|i| format!("l{i}")).collect();
        let layers = chain_layers(&params, &names)?;
        let data_dim = layers.last().expect("layers").fan_out(&params);
        let input = layers[0].fan_in(&params);
        if input <= data_dim || (input - data_dim) % 2 != 0 {
            return Err(Error::ModelKind("denoiser input width is inconsistent".into()));
        }
        let hidden = layers[..n_layers - 1]
            .iter()
            .map(|l| l.fan_out(&params))
            .collect();
        let spec = DenoiserSpec {
            data_dim,
            time_embed_dim: input - data_dim,
            hidden,
        };
        Ok(Denoiser {
            params,
            spec,
            layers,
        })
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    pub fn data_dim(&self) -> usize {
        self.spec.data_dim
    }

    fn validate(&self, z: &Array2<f64>, t: &[f64]) -> Result<()> {
        if z.ncols() != self.spec.data_dim || z.nrows() != t.len() {
            return Err(Error::Shape(format!(
                "denoiser expects B x {} inputs with B times, got {:?} and {} times",
                self.spec.data_dim,
                z.dim(),
                t.len()
            )));
        }
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain(format!("time {bad} outside [0, 1]")));
        }
        check_finite(z, "denoiser input")
    }

    /// Builds the forward pass into `g`. `z` is `B x D`, one time per row.
    pub fn forward(&self, g: &mut Graph, z: Var, t: &[f64], binding: Binding) -> Result<Var> {
        self.validate(g.value(z), t)?;
        let emb = g.constant(time_embedding(t, self.spec.time_embed_dim));
        let mut h = g.concat_cols(z, emb)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.graph(g, &self.params, h, binding)?;
            if i < last {
                h = g.silu(h);
            }
        }
        Ok(h)
    }

    /// Batched prediction without recording a graph.
    pub fn denoise_batch(&self, z: &Array2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        self.validate(z, t)?;
        let emb = time_embedding(t, self.spec.time_embed_dim);
        let mut h = ndarray::concatenate![Axis(1), *z, emb];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.plain(&self.params, &h);
            if i < last {
                h.mapv_inplace(silu);
            }
        }
        check_finite(&h, "denoiser output")?;
        Ok(h)
    }

    /// Batched prediction at a single shared time.
    pub fn denoise_at(&self, z: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        self.denoise_batch(z, &vec![t; z.nrows()])
    }

    pub fn denoise(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        let zb = Array2::from_shape_vec((1, z.len()), z.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.denoise_at(&zb, t)?.row(0).to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifierSpec {
    pub input_dim: usize,
    /// Hidden widths; the last one is the feature dimension.
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec {
            input_dim: 2,
            hidden: vec![64, 16],
            classes: 8,
        }
    }
}

/// Feature extractor (SiLU MLP) followed by a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub params: ParamStore,
    spec: ClassifierSpec,
    body: Vec<Layer>,
    head: Layer,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(spec: ClassifierSpec, rng: &mut R) -> Result<Self> {
        if spec.input_dim == 0 || spec.hidden.is_empty() || spec.classes < 2 {
            return Err(Error::config(
                "classifier",
                "classifier needs input_dim > 0, a feature layer and at least two classes",
            ));
        }
        let mut params = ParamStore::new();
        let mut body = Vec::new();
        let mut fan_in = spec.input_dim;
        for (i, &h) in spec.hidden.iter().enumerate() {
            body.push(init_layer(&mut params, &format!("l{i}"), fan_in, h, false, rng)?);
            fan_in = h;
        }
        let head = init_layer(&mut params, "head", fan_in, spec.classes, false, rng)?;
        Ok(Classifier {
            params,
            spec,
            body,
            head,
        })
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        if params.len() < 4 || !params.len().is_multiple_of(2) {
            return Err(Error::ModelKind("classifier needs a body layer and a head".into()));
        }
        let n_body = params.len() / 2 - 1;
        let mut names: Vec<String> = (0..n_body).map(|i| format!("l{i}")).collect();
        names.push("head".into());
        let mut layers = chain_layers(&params, &names)?;
        let head = layers.pop().expect("head");
        let spec = ClassifierSpec {
            input_dim: layers[0].fan_in(&params),
            hidden: layers.iter().map(|l| l.fan_out(&params)).collect(),
            classes: head.fan_out(&params),
        };
        Ok(Classifier {
            params,
            spec,
            body: layers,
            head,
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        *self.spec.hidden.last().expect("feature layer")
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    fn validate(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "classifier expects {} input columns, got {}",
                self.spec.input_dim,
                x.ncols()
            )));
        }
        check_finite(x, "classifier input")
    }

    /// Feature extractor in a graph.
    pub fn extract_graph(&self, g: &mut Graph, x: Var, binding: Binding) -> Result<Var> {
        self.validate(g.value(x))?;
        let mut h = x;
        for layer in &self.body {
            let a = layer.graph(g, &self.params, h, binding)?;
            h = g.silu(a);
        }
        Ok(h)
    }

    /// Linear head applied to features in a graph.
    pub fn head_graph(&self, g: &mut Graph, features: Var, binding: Binding) -> Result<Var> {
        self.head.graph(g, &self.params, features, binding)
    }

    pub fn extract_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.validate(x)?;
        let mut h = x.clone();
        for layer in &self.body {
            h = layer.plain(&self.params, &h);
            h.mapv_inplace(silu);
        }
        Ok(h)
    }

    pub fn logits_from_features(&self, features: &Array2<f64>) -> Array2<f64> {
        self.head.plain(&self.params, features)
    }

    pub fn classify_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.logits_from_features(&self.extract_batch(x)?))
    }

    pub fn extract(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.extract_batch(&row(x))?.row(0).to_vec())
    }

    pub fn classify(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.classify_batch(&row(x))?.row(0).to_vec())
    }

    /// Class probabilities `softmax(cls(x))`, one row per input.
    pub fn predict_proba(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(super::graph::softmax_rows(&self.classify_batch(x)?, 1.0))
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<usize>> {
        let logits = self.classify_batch(x)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| super::dist::argmax(r.as_slice().expect("contiguous row")))
            .collect())
    }
}

fn row(x: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape")
}

/// Per-row squared error `||a_i - b_i||^2`.
pub fn row_sq_dist(a: &Array2<f64>, b: &Array2<f64>) -> Array1<f64> {
    (a - b).mapv(|v| v * v).sum_axis(Axis(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> DenoiserSpec {
        DenoiserSpec {
            data_dim: 2,
            time_embed_dim: 4,
            hidden: vec![8, 8],
        }
    }

    #[test]
    fn untrained_denoiser_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Denoiser::new(DenoiserSpec::default(), &mut rng).unwrap();
        let out = m.denoise(&[0.3, -1.2], 0.7).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = Denoiser::new(small_spec(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = Denoiser::new(small_spec(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.params.flatten(), b.params.flatten());
    }

    fn perturbed(spec: DenoiserSpec, seed: u64) -> Denoiser {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Denoiser::new(spec, &mut rng).unwrap();
        let flat: Vec<f64> = m
            .params
            .flatten()
            .iter()
            .map(|v| v + rng.random_range(-0.3..0.3))
            .collect();
        m.params.assign_flat(&flat).unwrap();
        m
    }

    #[test]
    fn batched_rows_match_single_calls() {
        let m = perturbed(small_spec(), 5);
        let z = array![[0.1, 0.2], [-1.0, 0.5], [2.0, -0.3]];
        let t = [0.9, 0.4, 0.1];
        let batch = m.denoise_batch(&z, &t).unwrap();
        for (i, &ti) in t.iter().enumerate() {
            let single = m.denoise(&z.row(i).to_vec(), ti).unwrap();
            assert_eq!(batch.row(i).to_vec(), single);
        }
    }

    #[test]
    fn graph_and_plain_forward_agree() {
        let m = perturbed(small_spec(), 9);
        let z = array![[0.1, 0.2], [-1.0, 0.5]];
        let t = [0.9, 0.4];
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let out = m.forward(&mut g, zv, &t, Binding::Train).unwrap();
        assert_eq!(g.value(out), &m.denoise_batch(&z, &t).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = perturbed(small_spec(), 1);
        assert!(matches!(m.denoise(&[f64::NAN, 0.0], 0.5), Err(Error::Numeric(_))));
        assert!(matches!(m.denoise(&[0.0, 0.0], 1.5), Err(Error::Domain(_))));
        assert!(matches!(m.denoise(&[0.0], 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn denoiser_roundtrips_through_params() {
        let m = perturbed(small_spec(), 2);
        let rebuilt = Denoiser::from_params(m.params.clone()).unwrap();
        assert_eq!(rebuilt.spec(), &small_spec());
        assert_eq!(rebuilt.denoise(&[0.4, 0.1], 0.3).unwrap(), m.denoise(&[0.4, 0.1], 0.3).unwrap());
    }

    #[test]
    fn identity_extractor_is_activation() {
        let mut p = ParamStore::new();
        p.add_matrix("l0.w", Array2::eye(3)).unwrap();
        p.add_vector("l0.b", vec![0.0; 3]).unwrap();
        p.add_matrix("head.w", Array2::zeros((3, 4))).unwrap();
        p.add_vector("head.b", vec![0.0; 4]).unwrap();
        let c = Classifier::from_params(p).unwrap();
        let x = [0.5, -2.0, 1.0];
        let f = c.extract(&x).unwrap();
        for (fi, xi) in f.iter().zip(x) {
            assert_eq!(*fi, silu(xi));
        }
        assert_eq!(f, c.extract(&x).unwrap());
        let logits = c.classify(&x).unwrap();
        assert_eq!(logits, vec![0.0; 4]);
        let p = super::super::dist::softmax_t(&logits, 1.0).unwrap();
        assert!(p.probs().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(matches!(c.extract(&[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn features_are_lipschitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = Classifier::new(ClassifierSpec::default(), &mut rng).unwrap();
        let x = [0.3, -0.8];
        let delta = 1e-4;
        let f0 = c.extract(&x).unwrap();
        let f1 = c.extract(&[x[0] + delta, x[1]]).unwrap();
        let change: f64 = f0.iter().zip(&f1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(change > 0.0 && change < 100.0 * delta);
        assert_eq!(f0.len(), 16);
        assert_eq!(c.classify(&x).unwrap().len(), 8);
    }
}
