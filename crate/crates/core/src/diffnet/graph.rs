//! Reverse-mode automatic differentiation over batched matrices.
//!
//! A [`Graph`] is a tape: every operation evaluates eagerly and records
//! itself, so `backward` is a single reverse sweep. Values are `B x k`
//! matrices (row = example). The primitive set is closed: anything that can
//! be recorded has a backward rule, and shape mismatches are reported when
//! the node is built.

use ndarray::{Array1, Array2, Axis, Zip};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param { store: u64, index: usize },
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Array1<f64>),
    Silu(Var),
    Square(Var),
    Log(Var),
    ConcatCols(Var, Var),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    RowSum(Var),
    ColMean(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Array2<f64>,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_of(a: &Array2<f64>) -> (usize, usize) {
    (a.nrows(), a.ncols())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Row-wise `softmax(x / tau)`, computed with max subtraction.
pub(crate) fn softmax_rows(x: &Array2<f64>, tau: f64) -> Array2<f64> {
    let mut out = x.mapv(|v| v / tau);
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Row-wise `log softmax(x / tau)`.
pub(crate) fn log_softmax_rows(x: &Array2<f64>, tau: f64) -> Array2<f64> {
    let mut out = x.mapv(|v| v / tau);
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Array2<f64>, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let val = self.value(v);
        if shape_of(val) != (1, 1) {
            return Err(Error::Shape(format!(
                "expected scalar node, found {:?}",
                shape_of(val)
            )));
        }
        Ok(val[[0, 0]])
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Input, value, false)
    }

    /// An input whose gradient can be queried with [`Gradients::wrt`].
    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Input, value, true)
    }

    /// Binds tensor `index` of `store`; gradients are routed back to it.
    pub fn param(&mut self, store: &ParamStore, index: usize) -> Var {
        let value = store.tensor(index).value.clone();
        self.push(
            Op::Param {
                store: store.id(),
                index,
            },
            value,
            true,
        )
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (shape_of(self.value(a)), shape_of(self.value(b)));
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                shape_of(va),
                shape_of(vb)
            )));
        }
        let out = va.dot(vb);
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::MatMul(a, b), out, tr))
    }

    /// `a + 1 b` where `b` is a `1 x k` row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.nrows() != 1 || vb.ncols() != va.ncols() {
            return Err(Error::Shape(format!(
                "add_row: {:?} + {:?}",
                shape_of(va),
                shape_of(vb)
            )));
        }
        let out = va + vb;
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::AddRow(a, b), out, tr))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let out = self.value(a) + self.value(b);
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Add(a, b), out, tr))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let out = self.value(a) - self.value(b);
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Sub(a, b), out, tr))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let out = self.value(a) * self.value(b);
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Mul(a, b), out, tr))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let tr = self.tracked(a);
        self.push(Op::Scale(a, c), out, tr)
    }

    /// Multiplies row `i` of `a` by `weights[i]`.
    pub fn scale_rows(&mut self, a: Var, weights: Array1<f64>) -> Result<Var> {
        let va = self.value(a);
        if weights.len() != va.nrows() {
            return Err(Error::Shape(format!(
                "scale_rows: {} weights for {} rows",
                weights.len(),
                va.nrows()
            )));
        }
        let mut out = va.clone();
        for (mut row, w) in out.rows_mut().into_iter().zip(weights.iter()) {
            row.mapv_inplace(|v| v * w);
        }
        let tr = self.tracked(a);
        Ok(self.push(Op::ScaleRows(a, weights), out, tr))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(silu);
        let tr = self.tracked(a);
        self.push(Op::Silu(a), out, tr)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v * v);
        let tr = self.tracked(a);
        self.push(Op::Square(a), out, tr)
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::Domain("log of a non-positive entry".into()));
        }
        let out = va.mapv(f64::ln);
        let tr = self.tracked(a);
        Ok(self.push(Op::Log(a), out, tr))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.nrows() != vb.nrows() {
            return Err(Error::Shape(format!(
                "concat_cols: {:?} | {:?}",
                shape_of(va),
                shape_of(vb)
            )));
        }
        let out = ndarray::concatenate![Axis(1), *va, *vb];
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::ConcatCols(a, b), out, tr))
    }

    fn check_tau(tau: f64) -> Result<()> {
        if tau > 0.0 && tau.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain(format!("temperature must be > 0, got {tau}")))
        }
    }

    /// Row-wise `softmax(a / tau)`.
    pub fn softmax(&mut self, a: Var, tau: f64) -> Result<Var> {
        Self::check_tau(tau)?;
        let out = softmax_rows(self.value(a), tau);
        let tr = self.tracked(a);
        Ok(self.push(Op::Softmax(a, tau), out, tr))
    }

    /// Row-wise `log softmax(a / tau)`.
    pub fn log_softmax(&mut self, a: Var, tau: f64) -> Result<Var> {
        Self::check_tau(tau)?;
        let out = log_softmax_rows(self.value(a), tau);
        let tr = self.tracked(a);
        Ok(self.push(Op::LogSoftmax(a, tau), out, tr))
    }

    /// Sum over columns: `B x k -> B x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let tr = self.tracked(a);
        self.push(Op::RowSum(a), out, tr)
    }

    /// Mean over rows: `B x k -> 1 x k`.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.nrows() == 0 {
            return Err(Error::Argument("col_mean of an empty batch".into()));
        }
        let out = va.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let tr = self.tracked(a);
        Ok(self.push(Op::ColMean(a), out, tr))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let tr = self.tracked(a);
        self.push(Op::Sum(a), out, tr)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::Argument("mean of an empty tensor".into()));
        }
        let out = Array2::from_elem((1, 1), va.sum() / va.len() as f64);
        let tr = self.tracked(a);
        Ok(self.push(Op::Mean(a), out, tr))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.scalar(loss)?;
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input | Op::Param { .. } => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.tracked(*a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.tracked(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::AddRow(a, b) => {
                    if self.tracked(*b) {
                        acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.tracked(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.tracked(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if self.tracked(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.tracked(*b) {
                        acc(&mut grads, *b, -&g);
                    }
                    if self.tracked(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.tracked(*a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.tracked(*b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::ScaleRows(a, w) => {
                    let mut ga = g;
                    for (mut row, wi) in ga.rows_mut().into_iter().zip(w.iter()) {
                        row.mapv_inplace(|v| v * wi);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Silu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        let s = sigmoid(x);
                        *gv *= s * (1.0 + x * (1.0 - s));
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| *gv *= 2.0 * x);
                    acc(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| *gv /= x);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ka = self.value(*a).ncols();
                    if self.tracked(*a) {
                        acc(&mut grads, *a, g.slice(ndarray::s![.., ..ka]).to_owned());
                    }
                    if self.tracked(*b) {
                        acc(&mut grads, *b, g.slice(ndarray::s![.., ka..]).to_owned());
                    }
                }
                Op::Softmax(a, tau) => {
                    let s = &node.value;
                    let mut ga = g;
                    for (mut grow, srow) in ga.rows_mut().into_iter().zip(s.rows()) {
                        let dot: f64 = grow.iter().zip(srow.iter()).map(|(x, y)| x * y).sum();
                        Zip::from(&mut grow)
                            .and(&srow)
                            .for_each(|gv, &sv| *gv = sv * (*gv - dot) / tau);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a, tau) => {
                    let y = &node.value;
                    let mut ga = g;
                    for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let total: f64 = grow.sum();
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|gv, &yv| *gv = (*gv - yv.exp() * total) / tau);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowSum(a) => {
                    let k = self.value(*a).ncols();
                    let ga = g
                        .broadcast((g.nrows(), k))
                        .expect("column broadcast")
                        .to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::ColMean(a) => {
                    let (rows, cols) = shape_of(self.value(*a));
                    let ga = g.broadcast((rows, cols)).expect("row broadcast").to_owned()
                        / rows as f64;
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let dims = self.value(*a).raw_dim();
                    acc(&mut grads, *a, Array2::from_elem(dims, g[[0, 0]]));
                }
                Op::Mean(a) => {
                    let va = self.value(*a);
                    let gv = g[[0, 0]] / va.len() as f64;
                    acc(&mut grads, *a, Array2::from_elem(va.raw_dim(), gv));
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Convenience: gradient of `loss` with respect to every tensor in `store`.
    pub fn grad(&self, loss: Var, store: &ParamStore) -> Result<ParamStore> {
        self.backward(loss)?.for_store(self, store)
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a node; zero if the loss does not depend on it.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Array2<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Array2::zeros(graph.value(v).raw_dim()))
    }

    /// Accumulates the gradients of every parameter node bound to `store`.
    pub fn for_store(&self, graph: &Graph, store: &ParamStore) -> Result<ParamStore> {
        let mut out = store.zeros_like();
        for (node, g) in graph.nodes.iter().zip(&self.grads) {
            if let (Op::Param { store: id, index }, Some(g)) = (&node.op, g) {
                if *id == store.id() {
                    if out.tensor(*index).value.raw_dim() != g.raw_dim() {
                        return Err(Error::Shape("gradient shape differs from parameter".into()));
                    }
                    *out.value_mut(*index) += g;
                }
            }
        }
        Ok(out)
    }
}
