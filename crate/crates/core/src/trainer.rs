//! Optimization machinery (Adam, clipping, LR policies, EMA), the toy
//! dataset, and the base-model / classifier training loops.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffnet::{Binding, Classifier, ClassifierSpec, Denoiser, DenoiserSpec, Graph, ParamStore};
use crate::distill::pd_loss_graph;
use crate::error::{Error, Result};
use crate::sampler::forward_diffuse_batch;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrPolicy {
    Constant,
    /// Linear ramp from `lr / warmup` to `lr` over `warmup` steps, then flat.
    Warmup { warmup: usize },
    /// `lr * (1 + cos(pi * step / total)) / 2`.
    Cosine { total: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub policy: LrPolicy,
    /// Global gradient-norm clip threshold; `<= 0` disables clipping.
    pub clip: f64,
    pub ema_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimConfig {
    pub fn adam(lr: f64, policy: LrPolicy, clip: f64, ema_decay: f64) -> Self {
        OptimConfig {
            lr,
            policy,
            clip,
            ema_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match self.policy {
            LrPolicy::Constant => self.lr,
            LrPolicy::Warmup { warmup } => {
                if warmup == 0 {
                    self.lr
                } else {
                    self.lr * ((step + 1) as f64 / warmup as f64).min(1.0)
                }
            }
            LrPolicy::Cosine { total } => {
                let frac = (step as f64 / total.max(1) as f64).min(1.0);
                0.5 * self.lr * (1.0 + (PI * frac).cos())
            }
        }
    }
}

/// Adam moments, step counter and the EMA copy of the parameters.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: OptimConfig,
    m: ParamStore,
    v: ParamStore,
    step: u64,
    pub ema: ParamStore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub grad_norm: f64,
    pub lr: f64,
}

impl OptimState {
    pub fn new(params: &ParamStore, config: OptimConfig) -> Self {
        OptimState {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            ema: params.clone(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

pub fn global_norm(grads: &ParamStore) -> f64 {
    grads.l2_norm()
}

/// Rescales `grads` so its global norm is at most `threshold`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamStore, threshold: f64) -> f64 {
    let norm = global_norm(grads);
    if threshold > 0.0 && norm > threshold {
        let scale = threshold / norm;
        for i in 0..grads.len() {
            grads.value_mut(i).mapv_inplace(|g| g * scale);
        }
    }
    norm
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update(ema: &mut ParamStore, params: &ParamStore, decay: f64) -> Result<()> {
    ema.ensure_same_layout(params)?;
    for i in 0..ema.len() {
        let src = &params.tensor(i).value;
        ndarray::Zip::from(ema.value_mut(i))
            .and(src)
            .for_each(|e, &p| *e = decay * *e + (1.0 - decay) * p);
    }
    Ok(())
}

/// Clip, Adam update at the scheduled learning rate, then EMA.
pub fn optim_step(params: &mut ParamStore, grads: &ParamStore, state: &mut OptimState) -> Result<StepReport> {
    params.ensure_same_layout(grads)?;
    if !grads.all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite gradient at optimizer step {}",
            state.step
        )));
    }
    let cfg = state.config;
    let mut grads = grads.clone();
    let grad_norm = clip_global_norm(&mut grads, cfg.clip);
    let lr = cfg.lr_at(state.step);
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = &grads.tensor(i).value;
        let m = state.m.value_mut(i);
        ndarray::Zip::from(&mut *m)
            .and(g)
            .for_each(|m, &g| *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
        let v = state.v.value_mut(i);
        ndarray::Zip::from(&mut *v)
            .and(g)
            .for_each(|v, &g| *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
        let m = &state.m.tensor(i).value;
        let v = &state.v.tensor(i).value;
        ndarray::Zip::from(params.value_mut(i))
            .and(m)
            .and(v)
            .for_each(|p, &m, &v| *p -= lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps));
    }
    ema_update(&mut state.ema, params, cfg.ema_decay)?;
    Ok(StepReport { grad_norm, lr })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub classes: usize,
    pub points: usize,
    pub dim: usize,
    /// Ring radius of the class means.
    pub radius: f64,
    pub std: f64,
    /// Angular offset of the first class mean, radians.
    pub rotation: f64,
    /// Multiplier applied to every point after generation.
    pub scale: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: 8,
            points: 8192,
            dim: 2,
            radius: 1.0,
            std: 0.1,
            rotation: 0.0,
            scale: 1.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// The out-of-domain mixture: wider ring, rotated by half a class sector.
    pub fn shifted(&self) -> DatasetSpec {
        DatasetSpec {
            radius: 1.5,
            rotation: self.rotation + PI / self.classes as f64,
            seed: self.seed ^ 0x5eed_5eed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("dataset.classes", "need at least two classes"));
        }
        if self.points == 0 || !self.points.is_multiple_of(self.classes) {
            return Err(Error::config(
                "dataset.points",
                format!("{} points cannot be split evenly over {} classes", self.points, self.classes),
            ));
        }
        if self.dim < 2 {
            return Err(Error::config("dataset.dim", "points need at least two dimensions"));
        }
        if !(self.std > 0.0) || !(self.radius >= 0.0) || !(self.scale > 0.0) {
            return Err(Error::config("dataset", "std and scale must be positive, radius nonnegative"));
        }
        Ok(())
    }
}

/// Labeled Gaussian mixture with class means on a ring.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub points: Array2<f64>,
    pub labels: Vec<usize>,
    pub spec: DatasetSpec,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.spec.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Draws `batch` rows uniformly with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> (Array2<f64>, Vec<usize>) {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..self.len())).collect();
        let mut x = Array2::zeros((batch, self.dim()));
        for (r, &i) in idx.iter().enumerate() {
            x.row_mut(r).assign(&self.points.row(i));
        }
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Returns a copy with labels permuted at random (chance-level sanity data).
    pub fn with_shuffled_labels<R: Rng + ?Sized>(&self, rng: &mut R) -> ToyDataset {
        let mut out = self.clone();
        out.labels.shuffle(rng);
        out
    }
}

pub fn make_dataset(spec: &DatasetSpec) -> Result<ToyDataset> {
    use rand::SeedableRng;
    spec.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.std).expect("positive std");
    let mut points = Array2::zeros((spec.points, spec.dim));
    let mut labels = Vec::with_capacity(spec.points);
    for i in 0..spec.points {
        let c = i % spec.classes;
        let angle = spec.rotation + 2.0 * PI * c as f64 / spec.classes as f64;
        for j in 0..spec.dim {
            let mean = match j {
                0 => spec.radius * angle.cos(),
                1 => spec.radius * angle.sin(),
                _ => 0.0,
            };
            points[[i, j]] = spec.scale * (mean + noise.sample(&mut rng));
        }
        labels.push(c);
    }
    Ok(ToyDataset {
        points,
        labels,
        spec: spec.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub optim: OptimConfig,
    pub log_every: usize,
}

impl TrainConfig {
    /// Base-model defaults: warmup LR 2e-4, batch 128, clip 1.
    pub fn base_default() -> Self {
        TrainConfig {
            iterations: 20_000,
            batch: 128,
            optim: OptimConfig::adam(2e-4, LrPolicy::Warmup { warmup: 1000 }, 1.0, 0.999),
            log_every: 100,
        }
    }

    pub fn classifier_default() -> Self {
        TrainConfig {
            iterations: 3000,
            batch: 128,
            optim: OptimConfig::adam(3e-3, LrPolicy::Cosine { total: 3000 }, 1.0, 0.0),
            log_every: 100,
        }
    }
}

/// A trained model and its EMA shadow.
#[derive(Debug, Clone)]
pub struct TrainedDenoiser {
    pub model: Denoiser,
    pub ema: Denoiser,
    pub log: Vec<LossRecord>,
}

fn should_log(i: usize, total: usize, every: usize) -> bool {
    i + 1 == total || (every > 0 && i.is_multiple_of(every))
}

fn check_loss(loss: f64, what: &str, i: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} diverged at iteration {i} (loss = {loss})")))
    }
}

/// Draws `(x, t, z_t, w_t)` for one base-training batch.
fn base_batch<R: Rng + ?Sized>(
    data: &ToyDataset,
    schedule: &NoiseSchedule,
    batch: usize,
    rng: &mut R,
) -> Result<(Array2<f64>, Vec<f64>, Array2<f64>, Array1<f64>)> {
    let (x, _) = data.sample_batch(rng, batch);
    let t: Vec<f64> = (0..batch)
        .map(|_| rng.random_range(schedule.t_min..=1.0))
        .collect();
    let eps = Array2::from_shape_fn(x.raw_dim(), |_| StandardNormal.sample(rng));
    let z = forward_diffuse_batch(schedule, &x, &t, &eps)?;
    let w = t
        .iter()
        .map(|&ti| schedule.snr_weight(ti))
        .collect::<Result<Array1<f64>>>()?;
    Ok((x, t, z, w))
}

/// Weighted x-prediction regression `w_t ||theta(z_t, t) - x||^2` of one model
/// on a batch; returns `(loss, grads)`.
pub fn base_loss_and_grad(
    model: &Denoiser,
    x: &Array2<f64>,
    t: &[f64],
    z: &Array2<f64>,
    w: &Array1<f64>,
) -> Result<(f64, ParamStore)> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let pred = model.forward(&mut g, zv, t, Binding::Train)?;
    let loss = pd_loss_graph(&mut g, x, pred, w)?;
    let value = g.scalar(loss)?;
    Ok((value, g.grad(loss, &model.params)?))
}

pub fn train_base<R: Rng + ?Sized>(
    data: &ToyDataset,
    schedule: &NoiseSchedule,
    spec: DenoiserSpec,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainedDenoiser> {
    if spec.data_dim != data.dim() {
        return Err(Error::config("model.data_dim", "must equal dataset.dim"));
    }
    let mut model = Denoiser::new(spec, rng)?;
    let mut state = OptimState::new(&model.params, cfg.optim);
    let mut log = Vec::new();
    for i in 0..cfg.iterations {
        let (x, t, z, w) = base_batch(data, schedule, cfg.batch, rng)?;
        let (loss, grads) = base_loss_and_grad(&model, &x, &t, &z, &w)?;
        check_loss(loss, "base training", i)?;
        let report = optim_step(&mut model.params, &grads, &mut state)?;
        if should_log(i, cfg.iterations, cfg.log_every) {
            log.push(LossRecord {
                iteration: i,
                loss,
                grad_norm: report.grad_norm,
                lr: report.lr,
            });
        }
    }
    let ema = Denoiser::from_params(state.ema)?;
    Ok(TrainedDenoiser { model, ema, log })
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub classifier: Classifier,
    pub log: Vec<LossRecord>,
}

fn cross_entropy_and_grad(clf: &Classifier, x: &Array2<f64>, labels: &[usize]) -> Result<(f64, ParamStore)> {
    let mut onehot = Array2::zeros((labels.len(), clf.classes()));
    for (r, &l) in labels.iter().enumerate() {
        onehot[[r, l]] = 1.0;
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let feats = clf.extract_graph(&mut g, xv, Binding::Train)?;
    let logits = clf.head_graph(&mut g, feats, Binding::Train)?;
    let logp = g.log_softmax(logits, 1.0)?;
    let target = g.constant(onehot);
    let picked = g.mul(logp, target)?;
    let total = g.sum(picked);
    let loss = g.scale(total, -1.0 / labels.len() as f64);
    let value = g.scalar(loss)?;
    Ok((value, g.grad(loss, &clf.params)?))
}

/// Cross-entropy training of a fresh classifier on labeled points.
pub fn train_classifier<R: Rng + ?Sized>(
    data: &ToyDataset,
    spec: ClassifierSpec,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainedClassifier> {
    if spec.input_dim != data.dim() || spec.classes != data.spec.classes {
        return Err(Error::config(
            "classifier",
            "input_dim and classes must match the dataset",
        ));
    }
    let mut clf = Classifier::new(spec, rng)?;
    let mut state = OptimState::new(&clf.params, cfg.optim);
    let mut log = Vec::new();
    for i in 0..cfg.iterations {
        let (x, labels) = data.sample_batch(rng, cfg.batch);
        let (loss, grads) = cross_entropy_and_grad(&clf, &x, &labels)?;
        check_loss(loss, "classifier training", i)?;
        let report = optim_step(&mut clf.params, &grads, &mut state)?;
        if should_log(i, cfg.iterations, cfg.log_every) {
            log.push(LossRecord {
                iteration: i,
                loss,
                grad_norm: report.grad_norm,
                lr: report.lr,
            });
        }
    }
    Ok(TrainedClassifier {
        classifier: clf,
        log,
    })
}

/// Fraction of points whose argmax prediction equals the label.
pub fn accuracy(clf: &Classifier, data: &ToyDataset) -> Result<f64> {
    let pred = clf.predict(&data.points)?;
    let hits = pred.iter().zip(&data.labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / data.len() as f64)
}
