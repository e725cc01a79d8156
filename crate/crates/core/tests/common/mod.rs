//! Oracles shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rcfd_core::diffnet::{softmax_t, Binding, Classifier, ClassifierSpec, Denoiser, DenoiserSpec, Graph, ParamStore};
use rcfd_core::distill::{
    diversity_loss_graph, entropy_loss_graph, loss_cfd, loss_cfd_dual, loss_diversity, loss_entropy, loss_pd,
    loss_rcfd, pd_target, stage_loss_graph, DistillStage, KlDirection, LossKind,
};
use rcfd_core::schedule::NoiseSchedule;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small denoiser with every parameter (including the zero-initialized
/// output layer) jittered so no gradient is structurally zero.
pub fn random_denoiser(seed: u64, hidden: Vec<usize>) -> Denoiser {
    let mut r = rng(seed);
    let spec = DenoiserSpec {
        data_dim: 2,
        time_embed_dim: 4,
        hidden,
    };
    let mut m = Denoiser::new(spec, &mut r).unwrap();
    jitter(&mut m.params, &mut r, 0.5);
    m
}

pub fn random_classifier(seed: u64) -> Classifier {
    let mut r = rng(seed);
    let spec = ClassifierSpec {
        input_dim: 2,
        hidden: vec![8, 6],
        classes: 4,
    };
    let mut c = Classifier::new(spec, &mut r).unwrap();
    jitter(&mut c.params, &mut r, 0.5);
    c
}

fn jitter(p: &mut ParamStore, r: &mut ChaCha8Rng, scale: f64) {
    let flat: Vec<f64> = p.flatten().iter().map(|v| v + r.random_range(-scale..scale)).collect();
    p.assign_flat(&flat).unwrap();
}

pub fn gaussian(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(r))
}

/// Which objective a gradient check exercises.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Stage(LossKind, KlDirection),
    Entropy,
    Diversity,
}

impl Objective {
    pub fn label(self) -> String {
        match self {
            Objective::Stage(k, d) => format!("{}/{:?}", k.name(), d),
            Objective::Entropy => "entropy".into(),
            Objective::Diversity => "diversity".into(),
        }
    }
}

pub struct GradProblem {
    pub student: Denoiser,
    pub classifier: Classifier,
    pub stage: DistillStage,
    pub objective: Objective,
    pub z: Array2<f64>,
    pub t: Vec<f64>,
    pub x_teacher: Array2<f64>,
    pub weights: Array1<f64>,
}

impl GradProblem {
    pub fn random(objective: Objective, seed: u64) -> Self {
        let mut r = rng(1000 + seed);
        let kind = match objective {
            Objective::Stage(k, _) => k,
            _ => LossKind::Rcfd,
        };
        let direction = match objective {
            Objective::Stage(_, d) => d,
            _ => KlDirection::TeacherAsTarget,
        };
        let tau = r.random_range(0.7..1.0);
        let beta = if kind == LossKind::Rcfd { r.random_range(0.1..1.0) } else { 0.0 };
        let gamma = if kind == LossKind::Rcfd { r.random_range(0.0..1.0) } else { 0.0 };
        let stage = DistillStage::new(4, kind, tau, beta, gamma, 1).unwrap().with_direction(direction);
        let batch = 5;
        let times = stage.student_times();
        let t: Vec<f64> = (0..batch).map(|_| times[r.random_range(0..times.len())]).collect();
        let schedule = NoiseSchedule::default();
        GradProblem {
            student: random_denoiser(seed, vec![6, 5]),
            classifier: random_classifier(seed + 77),
            stage,
            objective,
            z: gaussian(batch, 2, &mut r),
            x_teacher: gaussian(batch, 2, &mut r),
            weights: t.iter().map(|&ti| schedule.snr_weight(ti).unwrap().min(10.0)).collect(),
            t,
        }
    }

    /// Loss and gradient from the reverse-mode tape.
    pub fn analytic(&self) -> (f64, ParamStore) {
        let mut g = Graph::new();
        let z = g.constant(self.z.clone());
        let xs = self.student.forward(&mut g, z, &self.t, Binding::Train).unwrap();
        let loss = match self.objective {
            Objective::Stage(..) => stage_loss_graph(
                &mut g,
                &self.stage,
                Some(&self.classifier),
                xs,
                &self.x_teacher,
                &self.weights,
            )
            .unwrap(),
            Objective::Entropy | Objective::Diversity => {
                let f = self.classifier.extract_graph(&mut g, xs, Binding::Frozen).unwrap();
                let logits = self.classifier.head_graph(&mut g, f, Binding::Frozen).unwrap();
                if self.objective == Objective::Entropy {
                    entropy_loss_graph(&mut g, logits).unwrap()
                } else {
                    diversity_loss_graph(&mut g, logits).unwrap()
                }
            }
        };
        let value = g.scalar(loss).unwrap();
        (value, g.grad(loss, &self.student.params).unwrap())
    }

    /// Loss recomputed with the plain value-level functions at `params`.
    pub fn value_at(&self, params: &ParamStore) -> f64 {
        let student = Denoiser::from_params(params.clone()).unwrap();
        let xs = student.denoise_batch(&self.z, &self.t).unwrap();
        let b = self.z.nrows();
        let rows = |a: &Array2<f64>| -> Vec<Vec<f64>> { a.rows().into_iter().map(|r| r.to_vec()).collect() };
        let xs_rows = rows(&xs);
        let clf = &self.classifier;
        let fs: Vec<Vec<f64>> = xs_rows.iter().map(|x| clf.extract(x).unwrap()).collect();
        let ft: Vec<Vec<f64>> = rows(&self.x_teacher).iter().map(|x| clf.extract(x).unwrap()).collect();
        let probs: Vec<_> = xs_rows.iter().map(|x| softmax_t(&clf.classify(x).unwrap(), 1.0).unwrap()).collect();
        let s = &self.stage;
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / b as f64;
        match self.objective {
            Objective::Entropy => mean(probs.iter().map(loss_entropy).collect()),
            Objective::Diversity => loss_diversity(&probs).unwrap(),
            Objective::Stage(LossKind::Pd, _) => mean(
                (0..b)
                    .map(|i| loss_pd(&self.x_teacher.row(i).to_vec(), &xs_rows[i], self.weights[i]).unwrap())
                    .collect(),
            ),
            Objective::Stage(LossKind::Cfd, d) => {
                mean((0..b).map(|i| loss_cfd(&fs[i], &ft[i], s.tau, d).unwrap()).collect())
            }
            Objective::Stage(LossKind::CfdDual, d) => {
                mean((0..b).map(|i| loss_cfd_dual(&fs[i], &ft[i], s.tau, d).unwrap()).collect())
            }
            Objective::Stage(LossKind::Rcfd, _) => loss_rcfd(&fs, &ft, &probs, s).unwrap(),
        }
    }

    /// Central-difference gradient of [`GradProblem::value_at`].
    pub fn numeric(&self, h: f64) -> ParamStore {
        let base = self.student.params.flatten();
        let mut grad = vec![0.0; base.len()];
        let mut probe = self.student.params.clone();
        for k in 0..base.len() {
            let mut x = base.clone();
            x[k] = base[k] + h;
            probe.assign_flat(&x).unwrap();
            let up = self.value_at(&probe);
            x[k] = base[k] - h;
            probe.assign_flat(&x).unwrap();
            let down = self.value_at(&probe);
            grad[k] = (up - down) / (2.0 * h);
        }
        let mut out = self.student.params.zeros_like();
        out.assign_flat(&grad).unwrap();
        out
    }
}

/// Largest per-tensor relative error `||a - n|| / max(||a||, ||n||)`.
/// Tensors whose gradients are both below `1e-8` in norm are skipped.
pub fn relative_error(analytic: &ParamStore, numeric: &ParamStore) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.tensors().iter().zip(numeric.tensors()) {
        let diff = (&a.value - &n.value).mapv(|v| v * v).sum().sqrt();
        let scale = a.value.mapv(|v| v * v).sum().sqrt().max(n.value.mapv(|v| v * v).sum().sqrt());
        if scale < 1e-8 {
            continue;
        }
        worst = worst.max(diff / scale);
    }
    worst
}

/// Runs one gradient-check trial; returns (relative error, |graph value - plain value|).
pub fn grad_check_trial(objective: Objective, seed: u64) -> (f64, f64) {
    let p = GradProblem::random(objective, seed);
    let (value, analytic) = p.analytic();
    let numeric = p.numeric(1e-5);
    let plain = p.value_at(&p.student.params);
    (relative_error(&analytic, &numeric), (value - plain).abs() / plain.abs().max(1.0))
}

pub fn all_objectives() -> Vec<Objective> {
    let mut v = vec![Objective::Stage(LossKind::Pd, KlDirection::TeacherAsTarget)];
    for d in [KlDirection::TeacherAsTarget, KlDirection::StudentAsTarget] {
        v.push(Objective::Stage(LossKind::Cfd, d));
        v.push(Objective::Stage(LossKind::CfdDual, d));
        v.push(Objective::Stage(LossKind::Rcfd, d));
    }
    v.push(Objective::Entropy);
    v.push(Objective::Diversity);
    v
}

// ---- single-jump identity ------------------------------------------------

fn coeffs(t: f64) -> (f64, f64) {
    let a = t * std::f64::consts::FRAC_PI_2;
    if t == 1.0 {
        (0.0, 1.0)
    } else {
        (a.cos(), a.sin())
    }
}

/// DDIM rollout written out independently of the sampler module.
fn step(model: &Denoiser, z: &[f64], t: f64, s: f64) -> Vec<f64> {
    let x = model.denoise(z, t).unwrap();
    let (at, st) = coeffs(t);
    let (as_, ss) = coeffs(s);
    z.iter().zip(&x).map(|(zi, xi)| as_ * xi + ss * (zi - at * xi) / st).collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n.max(1e-12)
}

/// Worst relative error over `cases` random teachers, grids and times.
pub fn single_jump_worst(cases: u64) -> f64 {
    let sch = NoiseSchedule::default();
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut r = rng(case);
        let n = [2usize, 4, 8][r.random_range(0..3)];
        let teacher = random_denoiser(case, vec![16, 16]);
        let k = r.random_range(1..=n / 2);
        let t = (2 * k) as f64 / n as f64;
        let (t1, t2) = (((2 * k - 1) as f64) / n as f64, ((2 * k - 2) as f64) / n as f64);
        let z: Vec<f64> = gaussian(1, 2, &mut r).row(0).to_vec();
        let zm = Array2::from_shape_vec((1, 2), z.clone()).unwrap();
        let target = pd_target(&teacher, &sch, &zm, &[t], n).unwrap().row(0).to_vec();
        let z1 = step(&teacher, &z, t, t1);
        let z2 = if t2 == 0.0 { teacher.denoise(&z1, t1).unwrap() } else { step(&teacher, &z1, t1, t2) };
        let (at, st) = coeffs(t);
        let (a2, s2) = coeffs(t2);
        let jump: Vec<f64> = z
            .iter()
            .zip(&target)
            .map(|(zi, xi)| a2 * xi + s2 * (zi - at * xi) / st)
            .collect();
        worst = worst.max(rel(&jump, &z2));
    }
    worst
}

