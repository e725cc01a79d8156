//! Distillation targets, losses and the progressive step-halving driver.
//!
//! Each loss exists twice: a value-level function over plain vectors (the
//! reference used in tests and reports) and a graph builder over a batch
//! (what training differentiates). The batch forms average over rows.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffnet::dist::xlogx;
use crate::diffnet::graph::softmax_rows;
use crate::diffnet::{kl_divergence, softmax_t, Binding, Classifier, Denoiser, DistVec, Graph, Var};
use crate::error::{Error, Result};
use crate::sampler::{ddim_update_batch, forward_diffuse_batch};
use crate::schedule::{is_power_of_two, NoiseSchedule};
use crate::trainer::{optim_step, LossRecord, LrPolicy, OptimConfig, OptimState, ToyDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossKind {
    Pd,
    Cfd,
    CfdDual,
    Rcfd,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Pd => "PD",
            LossKind::Cfd => "CFD",
            LossKind::CfdDual => "CFD_DUAL",
            LossKind::Rcfd => "RCFD",
        }
    }

    pub fn needs_classifier(self) -> bool {
        self != LossKind::Pd
    }
}

/// Argument order of the feature KL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(P_teacher || P_student)`.
    #[default]
    TeacherAsTarget,
    /// `KL(P_student || P_teacher)`.
    StudentAsTarget,
}

/// One halving stage `N -> N/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillStage {
    pub teacher_steps: usize,
    pub student_steps: usize,
    pub loss_kind: LossKind,
    pub tau: f64,
    pub beta: f64,
    pub gamma: f64,
    pub iterations: usize,
    pub kl_direction: KlDirection,
}

pub const DEFAULT_STAGE_ITERATIONS: usize = 2000;

impl DistillStage {
    pub fn new(teacher_steps: usize, loss_kind: LossKind, tau: f64, beta: f64, gamma: f64, iterations: usize) -> Result<Self> {
        let stage = DistillStage {
            teacher_steps,
            student_steps: teacher_steps / 2,
            loss_kind,
            tau,
            beta,
            gamma,
            iterations,
            kl_direction: KlDirection::TeacherAsTarget,
        };
        stage.validate()?;
        Ok(stage)
    }

    pub fn pd(teacher_steps: usize, iterations: usize) -> Result<Self> {
        Self::new(teacher_steps, LossKind::Pd, 1.0, 0.0, 0.0, iterations)
    }

    pub fn cfd(teacher_steps: usize, tau: f64, iterations: usize) -> Result<Self> {
        Self::new(teacher_steps, LossKind::Cfd, tau, 0.0, 0.0, iterations)
    }

    pub fn rcfd(teacher_steps: usize, tau: f64, beta: f64, gamma: f64, iterations: usize) -> Result<Self> {
        Self::new(teacher_steps, LossKind::Rcfd, tau, beta, gamma, iterations)
    }

    pub fn with_direction(mut self, direction: KlDirection) -> Self {
        self.kl_direction = direction;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.teacher_steps < 2 || !is_power_of_two(self.teacher_steps) {
            return Err(Error::config(
                "teacher_steps",
                format!("must be a power of two >= 2, got {}", self.teacher_steps),
            ));
        }
        if self.student_steps * 2 != self.teacher_steps {
            return Err(Error::config(
                "student_steps",
                format!("{} -> {} is not a halving", self.teacher_steps, self.student_steps),
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau", format!("must be > 0, got {}", self.tau)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", format!("must be >= 0, got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("gamma", format!("must lie in [0, 1], got {}", self.gamma)));
        }
        if matches!(self.loss_kind, LossKind::Cfd | LossKind::CfdDual) && self.beta != 0.0 {
            return Err(Error::config("beta", "CFD and CFD_DUAL stages take beta = 0"));
        }
        Ok(())
    }

    /// Student sampling times `{1, 1 - 2/N, ..., 2/N}` for teacher grid `N`.
    pub fn student_times(&self) -> Vec<f64> {
        let n = self.teacher_steps;
        (0..self.student_steps)
            .map(|k| (n - 2 * k) as f64 / n as f64)
            .collect()
    }
}

/// Default plan from `base_steps` down to one step: PD above 8 steps,
/// RCFD from 8 steps downward.
pub fn default_plan(base_steps: usize, iterations: usize) -> Result<Vec<DistillStage>> {
    let mut plan = Vec::new();
    let mut n = base_steps;
    while n >= 2 {
        let stage = match n {
            8 | 4 => DistillStage::rcfd(n, 0.95, 0.003, 0.75, iterations)?,
            2 => DistillStage::rcfd(n, 0.85, 0.003, 0.5, iterations)?,
            _ => DistillStage::pd(n, iterations)?,
        };
        plan.push(stage);
        n /= 2;
    }
    Ok(plan)
}

/// Checks that `plan` is a halving chain starting at `base_steps`.
pub fn validate_plan(base_steps: usize, plan: &[DistillStage]) -> Result<()> {
    let mut expected = base_steps;
    for (k, stage) in plan.iter().enumerate() {
        stage
            .validate()
            .map_err(|e| prefix_key(e, &format!("distill.stages[{k}]")))?;
        if stage.teacher_steps != expected {
            return Err(Error::config(
                format!("distill.stages[{k}].teacher_steps"),
                format!("expected {expected} (previous student steps), got {}", stage.teacher_steps),
            ));
        }
        expected = stage.student_steps;
    }
    Ok(())
}

fn prefix_key(e: Error, prefix: &str) -> Error {
    match e {
        Error::Config { key, message } => Error::Config {
            key: format!("{prefix}.{key}"),
            message,
        },
        other => other,
    }
}

/// `t - k/N`, computed on the integer grid when `t` is a grid point.
fn grid_offset(t: f64, k: usize, n: usize) -> Result<f64> {
    let scaled = t * n as f64;
    let m = scaled.round();
    let out = if (scaled - m).abs() < 1e-9 {
        (m - k as f64) / n as f64
    } else {
        t - k as f64 / n as f64
    };
    if out < -1e-12 {
        return Err(Error::Domain(format!(
            "distillation time {t} is below 2/N for N = {n}"
        )));
    }
    Ok(out.max(0.0))
}

/// Teacher target `x^T` for a batch: two teacher DDIM steps `t -> t' -> t''`
/// followed by solving the single-jump equation for the clean point.
pub fn pd_target(
    teacher: &Denoiser,
    schedule: &NoiseSchedule,
    z_t: &Array2<f64>,
    t: &[f64],
    teacher_steps: usize,
) -> Result<Array2<f64>> {
    let t1: Vec<f64> = t.iter().map(|&ti| grid_offset(ti, 1, teacher_steps)).collect::<Result<_>>()?;
    let t2: Vec<f64> = t.iter().map(|&ti| grid_offset(ti, 2, teacher_steps)).collect::<Result<_>>()?;
    let x1 = teacher.denoise_batch(z_t, t)?;
    let z1 = ddim_update_batch(schedule, z_t, &x1, t, &t1)?;
    let x2 = teacher.denoise_batch(&z1, &t1)?;
    let z2 = ddim_update_batch(schedule, &z1, &x2, &t1, &t2)?;
    let mut target = Array2::zeros(z_t.raw_dim());
    for i in 0..z_t.nrows() {
        let (alpha_t, sigma_t) = schedule.alpha_sigma(t[i])?;
        let (alpha_2, sigma_2) = schedule.alpha_sigma(t2[i])?;
        let ratio = sigma_2 / sigma_t;
        let denominator = alpha_2 - ratio * alpha_t;
        if denominator.abs() < 1e-12 {
            return Err(Error::DegenerateTarget { t: t[i], denominator });
        }
        for j in 0..z_t.ncols() {
            target[[i, j]] = (z2[[i, j]] - ratio * z_t[[i, j]]) / denominator;
        }
    }
    Ok(target)
}

/// The teacher's two-step rollout `z_{t''}` (used to check targets).
pub fn teacher_two_step(
    teacher: &Denoiser,
    schedule: &NoiseSchedule,
    z_t: &Array2<f64>,
    t: &[f64],
    teacher_steps: usize,
) -> Result<Array2<f64>> {
    let t1: Vec<f64> = t.iter().map(|&ti| grid_offset(ti, 1, teacher_steps)).collect::<Result<_>>()?;
    let t2: Vec<f64> = t.iter().map(|&ti| grid_offset(ti, 2, teacher_steps)).collect::<Result<_>>()?;
    let x1 = teacher.denoise_batch(z_t, t)?;
    let z1 = ddim_update_batch(schedule, z_t, &x1, t, &t1)?;
    let x2 = teacher.denoise_batch(&z1, &t1)?;
    ddim_update_batch(schedule, &z1, &x2, &t1, &t2)
}

/// Times `t''` matching [`pd_target`].
pub fn two_step_times(t: &[f64], teacher_steps: usize) -> Result<Vec<f64>> {
    t.iter().map(|&ti| grid_offset(ti, 2, teacher_steps)).collect()
}

// ---- value-level losses -------------------------------------------------

/// `w ||x_T - x_S||^2`.
pub fn loss_pd(x_teacher: &[f64], x_student: &[f64], weight: f64) -> Result<f64> {
    if x_teacher.len() != x_student.len() {
        return Err(Error::Shape("loss_pd: length mismatch".into()));
    }
    Ok(weight * x_teacher.iter().zip(x_student).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}

fn feature_kl(
    f_student: &[f64],
    f_teacher: &[f64],
    student_tau: f64,
    teacher_tau: f64,
    direction: KlDirection,
) -> Result<f64> {
    if f_student.len() != f_teacher.len() {
        return Err(Error::Shape(format!(
            "feature lengths {} and {}",
            f_student.len(),
            f_teacher.len()
        )));
    }
    let ps = softmax_t(f_student, student_tau)?;
    let pt = softmax_t(f_teacher, teacher_tau)?;
    match direction {
        KlDirection::TeacherAsTarget => kl_divergence(&pt, &ps),
        KlDirection::StudentAsTarget => kl_divergence(&ps, &pt),
    }
}

/// Feature KL between `softmax(F_S)` and the sharpened `softmax(F_T / tau)`.
pub fn loss_cfd(f_student: &[f64], f_teacher: &[f64], tau: f64, direction: KlDirection) -> Result<f64> {
    feature_kl(f_student, f_teacher, 1.0, tau, direction)
}

/// `tau^2 KL` with the same temperature on both sides.
pub fn loss_cfd_dual(f_student: &[f64], f_teacher: &[f64], tau: f64, direction: KlDirection) -> Result<f64> {
    Ok(tau * tau * feature_kl(f_student, f_teacher, tau, tau, direction)?)
}

/// Prediction entropy `-sum p log p`.
pub fn loss_entropy(p: &DistVec) -> f64 {
    p.entropy()
}

/// `sum p_hat log p_hat` for the batch-mean prediction `p_hat`.
pub fn loss_diversity(p_batch: &[DistVec]) -> Result<f64> {
    let first = p_batch
        .first()
        .ok_or_else(|| Error::Argument("loss_diversity of an empty batch".into()))?;
    let c = first.len();
    if p_batch.iter().any(|p| p.len() != c) {
        return Err(Error::Shape("loss_diversity: rows differ in class count".into()));
    }
    let b = p_batch.len() as f64;
    let mean: Vec<f64> = (0..c)
        .map(|k| p_batch.iter().map(|p| p.probs()[k]).sum::<f64>() / b)
        .collect();
    Ok(mean.iter().map(|&p| xlogx(p)).sum())
}

/// Batch RCFD: mean feature KL plus `beta [gamma mean entropy + (1 - gamma) diversity]`.
pub fn loss_rcfd(
    f_student: &[Vec<f64>],
    f_teacher: &[Vec<f64>],
    p_batch: &[DistVec],
    stage: &DistillStage,
) -> Result<f64> {
    if f_student.len() != f_teacher.len() || f_student.len() != p_batch.len() || f_student.is_empty() {
        return Err(Error::Shape("loss_rcfd: batch sizes differ or are empty".into()));
    }
    let b = f_student.len() as f64;
    let mut cfd = 0.0;
    for (fs, ft) in f_student.iter().zip(f_teacher) {
        cfd += loss_cfd(fs, ft, stage.tau, stage.kl_direction)?;
    }
    cfd /= b;
    if stage.beta == 0.0 {
        return Ok(cfd);
    }
    let entropy = p_batch.iter().map(loss_entropy).sum::<f64>() / b;
    let diversity = loss_diversity(p_batch)?;
    Ok(cfd + stage.beta * (stage.gamma * entropy + (1.0 - stage.gamma) * diversity))
}

// ---- graph losses -------------------------------------------------------

/// Batch mean of `w_i ||x_T_i - x_S_i||^2`.
pub fn pd_loss_graph(g: &mut Graph, x_teacher: &Array2<f64>, x_student: Var, weights: &Array1<f64>) -> Result<Var> {
    let target = g.constant(x_teacher.clone());
    let diff = g.sub(x_student, target)?;
    let sq = g.square(diff);
    let per_row = g.row_sum(sq);
    let weighted = g.scale_rows(per_row, weights.clone())?;
    g.mean(weighted)
}

fn kl_graph(
    g: &mut Graph,
    f_student: Var,
    f_teacher: &Array2<f64>,
    student_tau: f64,
    teacher_tau: f64,
    direction: KlDirection,
) -> Result<Var> {
    let fs = g.value(f_student);
    if fs.dim() != f_teacher.dim() {
        return Err(Error::Shape(format!(
            "student features {:?} vs teacher features {:?}",
            fs.dim(),
            f_teacher.dim()
        )));
    }
    let b = f_teacher.nrows() as f64;
    let p_teacher = softmax_rows(f_teacher, teacher_tau);
    match direction {
        KlDirection::TeacherAsTarget => {
            let neg_entropy: f64 = p_teacher.iter().map(|&p| xlogx(p)).sum::<f64>() / b;
            let log_ps = g.log_softmax(f_student, student_tau)?;
            let pt = g.constant(p_teacher);
            let cross = g.mul(log_ps, pt)?;
            let total = g.sum(cross);
            let neg_cross = g.scale(total, -1.0 / b);
            let constant = g.constant(Array2::from_elem((1, 1), neg_entropy));
            g.add(neg_cross, constant)
        }
        KlDirection::StudentAsTarget => {
            let log_pt = crate::diffnet::graph::log_softmax_rows(f_teacher, teacher_tau);
            let ps = g.softmax(f_student, student_tau)?;
            let log_ps = g.log_softmax(f_student, student_tau)?;
            let lpt = g.constant(log_pt);
            let ratio = g.sub(log_ps, lpt)?;
            let prod = g.mul(ps, ratio)?;
            let total = g.sum(prod);
            Ok(g.scale(total, 1.0 / b))
        }
    }
}

/// Batch mean of [`loss_cfd`].
pub fn cfd_loss_graph(g: &mut Graph, f_student: Var, f_teacher: &Array2<f64>, tau: f64, direction: KlDirection) -> Result<Var> {
    kl_graph(g, f_student, f_teacher, 1.0, tau, direction)
}

/// Batch mean of [`loss_cfd_dual`].
pub fn cfd_dual_loss_graph(g: &mut Graph, f_student: Var, f_teacher: &Array2<f64>, tau: f64, direction: KlDirection) -> Result<Var> {
    let kl = kl_graph(g, f_student, f_teacher, tau, tau, direction)?;
    Ok(g.scale(kl, tau * tau))
}

/// Batch mean of per-row entropy of `softmax(logits)`.
pub fn entropy_loss_graph(g: &mut Graph, logits: Var) -> Result<Var> {
    let p = g.softmax(logits, 1.0)?;
    let logp = g.log_softmax(logits, 1.0)?;
    let plogp = g.mul(p, logp)?;
    let total = g.sum(plogp);
    let b = g.value(logits).nrows() as f64;
    Ok(g.scale(total, -1.0 / b))
}

/// `sum p_hat log p_hat` of the batch-mean of `softmax(logits)`.
pub fn diversity_loss_graph(g: &mut Graph, logits: Var) -> Result<Var> {
    let p = g.softmax(logits, 1.0)?;
    let p_hat = g.col_mean(p)?;
    let log_p_hat = g.log(p_hat)?;
    let prod = g.mul(p_hat, log_p_hat)?;
    Ok(g.sum(prod))
}

/// Full stage objective for a student prediction `x_S` already in `g`.
pub fn stage_loss_graph(
    g: &mut Graph,
    stage: &DistillStage,
    classifier: Option<&Classifier>,
    x_student: Var,
    x_teacher: &Array2<f64>,
    weights: &Array1<f64>,
) -> Result<Var> {
    if stage.loss_kind == LossKind::Pd {
        return pd_loss_graph(g, x_teacher, x_student, weights);
    }
    let clf = classifier.ok_or_else(|| {
        Error::config("classifier", format!("{} stage requires a classifier", stage.loss_kind.name()))
    })?;
    let f_teacher = clf.extract_batch(x_teacher)?;
    let f_student = clf.extract_graph(g, x_student, Binding::Frozen)?;
    match stage.loss_kind {
        LossKind::Pd => unreachable!(),
        LossKind::Cfd => cfd_loss_graph(g, f_student, &f_teacher, stage.tau, stage.kl_direction),
        LossKind::CfdDual => cfd_dual_loss_graph(g, f_student, &f_teacher, stage.tau, stage.kl_direction),
        LossKind::Rcfd => {
            let cfd = cfd_loss_graph(g, f_student, &f_teacher, stage.tau, stage.kl_direction)?;
            if stage.beta == 0.0 {
                return Ok(cfd);
            }
            let logits = clf.head_graph(g, f_student, Binding::Frozen)?;
            let entropy = entropy_loss_graph(g, logits)?;
            let diversity = diversity_loss_graph(g, logits)?;
            let e = g.scale(entropy, stage.beta * stage.gamma);
            let d = g.scale(diversity, stage.beta * (1.0 - stage.gamma));
            let reg = g.add(e, d)?;
            g.add(cfd, reg)
        }
    }
}

// ---- stage driver -------------------------------------------------------

/// Optimizer knobs shared by all stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillOptim {
    pub lr: f64,
    pub batch: usize,
    pub clip: f64,
    pub ema_decay: f64,
    pub log_every: usize,
}

impl Default for DistillOptim {
    fn default() -> Self {
        DistillOptim {
            lr: 5e-5,
            batch: 128,
            clip: 1.0,
            ema_decay: 0.995,
            log_every: 50,
        }
    }
}

/// One training batch for a stage.
#[derive(Debug, Clone)]
pub struct DistillBatch {
    pub z_t: Array2<f64>,
    pub t: Vec<f64>,
    pub x_teacher: Array2<f64>,
    pub weights: Array1<f64>,
}

impl DistillBatch {
    /// Noised data points at student-grid times, with teacher targets.
    pub fn draw<R: Rng + ?Sized>(
        teacher: &Denoiser,
        schedule: &NoiseSchedule,
        data: &ToyDataset,
        stage: &DistillStage,
        batch: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (x, _) = data.sample_batch(rng, batch);
        let times = stage.student_times();
        let t: Vec<f64> = (0..batch).map(|_| times[rng.random_range(0..times.len())]).collect();
        let eps = Array2::from_shape_fn(x.raw_dim(), |_| StandardNormal.sample(rng));
        let z_t = forward_diffuse_batch(schedule, &x, &t, &eps)?;
        let x_teacher = pd_target(teacher, schedule, &z_t, &t, stage.teacher_steps)?;
        let weights = t
            .iter()
            .map(|&ti| schedule.snr_weight(ti))
            .collect::<Result<Array1<f64>>>()?;
        Ok(DistillBatch {
            z_t,
            t,
            x_teacher,
            weights,
        })
    }
}

/// Loss value and student gradients for one batch.
pub fn stage_loss_and_grad(
    student: &Denoiser,
    stage: &DistillStage,
    classifier: Option<&Classifier>,
    batch: &DistillBatch,
) -> Result<(f64, crate::diffnet::ParamStore)> {
    let mut g = Graph::new();
    let z = g.constant(batch.z_t.clone());
    let x_student = student.forward(&mut g, z, &batch.t, Binding::Train)?;
    let loss = stage_loss_graph(&mut g, stage, classifier, x_student, &batch.x_teacher, &batch.weights)?;
    let value = g.scalar(loss)?;
    Ok((value, g.grad(loss, &student.params)?))
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: DistillStage,
    pub student: Denoiser,
    pub ema: Denoiser,
    pub log: Vec<LossRecord>,
}

/// Trains an `N/2`-step student initialized from the teacher.
pub fn distill_stage<R: Rng + ?Sized>(
    teacher: &Denoiser,
    stage: &DistillStage,
    classifier: Option<&Classifier>,
    schedule: &NoiseSchedule,
    data: &ToyDataset,
    optim: &DistillOptim,
    rng: &mut R,
) -> Result<StageOutcome> {
    stage.validate()?;
    if stage.loss_kind.needs_classifier() && classifier.is_none() {
        return Err(Error::config(
            "classifier",
            format!("{} stage requires a classifier", stage.loss_kind.name()),
        ));
    }
    let mut student = teacher.clone();
    let config = OptimConfig::adam(
        optim.lr,
        LrPolicy::Cosine {
            total: stage.iterations,
        },
        optim.clip,
        optim.ema_decay,
    );
    let mut state = OptimState::new(&student.params, config);
    let mut log = Vec::new();
    for i in 0..stage.iterations {
        let batch = DistillBatch::draw(teacher, schedule, data, stage, optim.batch, rng)?;
        let (loss, grads) = stage_loss_and_grad(&student, stage, classifier, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "{} stage {} -> {} diverged at iteration {i}",
                stage.loss_kind.name(),
                stage.teacher_steps,
                stage.student_steps
            )));
        }
        let report = optim_step(&mut student.params, &grads, &mut state)?;
        if i + 1 == stage.iterations || (optim.log_every > 0 && i % optim.log_every == 0) {
            log.push(LossRecord {
                iteration: i,
                loss,
                grad_norm: report.grad_norm,
                lr: report.lr,
            });
        }
    }
    let ema = Denoiser::from_params(state.ema)?;
    Ok(StageOutcome {
        stage: *stage,
        student,
        ema,
        log,
    })
}

/// Runs a halving plan; each stage is taught by the previous stage's EMA.
#[allow(clippy::too_many_arguments)]
pub fn progressive_distill<R: Rng + ?Sized>(
    base: &Denoiser,
    base_steps: usize,
    plan: &[DistillStage],
    classifier: Option<&Classifier>,
    schedule: &NoiseSchedule,
    data: &ToyDataset,
    optim: &DistillOptim,
    rng: &mut R,
    mut on_stage: impl FnMut(&StageOutcome) -> Result<()>,
) -> Result<Vec<StageOutcome>> {
    validate_plan(base_steps, plan)?;
    let mut outcomes: Vec<StageOutcome> = Vec::with_capacity(plan.len());
    for stage in plan {
        let teacher = outcomes.last().map(|o| &o.ema).unwrap_or(base);
        let outcome = distill_stage(teacher, stage, classifier, schedule, data, optim, rng)?;
        on_stage(&outcome)?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}
