//! Run configuration: a TOML document whose every key has a default.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffnet::{ClassifierSpec, DenoiserSpec};
use crate::distill::{
    default_plan, validate_plan, DistillOptim, DistillStage, KlDirection, LossKind, DEFAULT_STAGE_ITERATIONS,
};
use crate::error::{Error, Result};
use crate::schedule::{is_power_of_two, NoiseSchedule, ScheduleKind};
use crate::trainer::{DatasetSpec, LrPolicy, OptimConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub t_min: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            kind: ScheduleKind::Cosine,
            t_min: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub time_embed_dim: usize,
    pub hidden: Vec<usize>,
    /// Clip predictions to [-1, 1]. Reserved for image backends; point
    /// data is never clipped, so `true` is rejected.
    pub clip_prediction: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserSpec::default();
        ModelSection {
            time_embed_dim: d.time_embed_dim,
            hidden: d.hidden,
            clip_prediction: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    /// Width of the hidden layer before the feature layer.
    pub width: usize,
    pub feature_dim: usize,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            width: 64,
            feature_dim: 16,
            iterations: 3000,
            batch: 128,
            lr: 3e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub clip: f64,
    pub ema_decay: f64,
    pub log_every: usize,
    /// Step count of the base sampler.
    pub steps: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            iterations: 20_000,
            batch: 128,
            lr: 2e-4,
            warmup: 1000,
            clip: 1.0,
            ema_decay: 0.999,
            log_every: 100,
            steps: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub teacher_steps: usize,
    #[serde(default)]
    pub student_steps: Option<usize>,
    pub loss_kind: LossKind,
    #[serde(default = "one")]
    pub tau: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub kl_direction: KlDirection,
}

fn one() -> f64 {
    1.0
}

/// Which trained classifier supplies distillation features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierChoice {
    #[default]
    InDomain,
    /// Trained on the rotated, rescaled mixture.
    Shifted,
}

impl ClassifierChoice {
    pub fn stage_name(self) -> &'static str {
        match self {
            ClassifierChoice::InDomain => "classifier",
            ClassifierChoice::Shifted => "classifier-shifted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub lr: f64,
    pub batch: usize,
    pub clip: f64,
    pub ema_decay: f64,
    pub log_every: usize,
    /// Iterations for stages that do not set their own.
    pub iterations: usize,
    /// Step count of the first teacher; defaults to `train.steps`. The
    /// teacher is the latest checkpoint sampling at that many steps.
    pub from_steps: Option<usize>,
    pub classifier: ClassifierChoice,
    /// Explicit plan; empty means the default PD-then-RCFD plan.
    pub stages: Vec<StageSection>,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillOptim::default();
        DistillSection {
            lr: d.lr,
            batch: d.batch,
            clip: d.clip,
            ema_decay: d.ema_decay,
            log_every: d.log_every,
            iterations: DEFAULT_STAGE_ITERATIONS,
            from_steps: None,
            classifier: ClassifierChoice::InDomain,
            stages: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub samples: usize,
    pub entropy_samples: usize,
    /// Teacher step count used by `sweep-tau`.
    pub sweep_teacher_steps: usize,
    /// Upper bound accepted for the base sampler's Fréchet feature distance
    /// at `train.steps`: 1.5x a held-out reference run of the default config.
    pub base_ffd_threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            samples: 2048,
            entropy_samples: 4096,
            sweep_teacher_steps: 8,
            base_ffd_threshold: 4.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub deterministic: bool,
    pub dataset: DatasetSpec,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub classifier: ClassifierSection,
    pub train: TrainSection,
    pub distill: DistillSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            deterministic: false,
            dataset: DatasetSpec::default(),
            schedule: ScheduleSection::default(),
            model: ModelSection::default(),
            classifier: ClassifierSection::default(),
            train: TrainSection::default(),
            distill: DistillSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn toml_error_key(err: &toml::de::Error) -> String {
    let msg = err.message();
    // "unknown field `foo`, expected one of ..."
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        if let Some(end) = rest.find('`') {
            return rest[..end].to_string();
        }
    }
    if let Some(start) = msg.find('`') {
        if let Some(len) = msg[start + 1..].find('`') {
            return msg[start + 1..start + 1 + len].to_string();
        }
    }
    "<document>".to_string()
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(toml_error_key(&e), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialized form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_id(&self) -> String {
        self.hash()[..12].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate().map_err(|e| match e {
            Error::Config { key, message } => Error::config(
                if key.starts_with("dataset") { key } else { format!("dataset.{key}") },
                message,
            ),
            other => other,
        })?;
        NoiseSchedule::new(self.schedule.kind, self.schedule.t_min)?;
        if !self.model.time_embed_dim.is_multiple_of(2) || self.model.time_embed_dim == 0 {
            return Err(Error::config("model.time_embed_dim", "must be a positive even number"));
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "needs at least one positive width"));
        }
        if self.model.clip_prediction {
            return Err(Error::config(
                "model.clip_prediction",
                "prediction clipping applies to image data only; point data is sampled unclipped",
            ));
        }
        if self.classifier.width == 0 || self.classifier.feature_dim == 0 {
            return Err(Error::config("classifier.width", "widths must be positive"));
        }
        positive("classifier.lr", self.classifier.lr)?;
        positive("train.lr", self.train.lr)?;
        positive("distill.lr", self.distill.lr)?;
        unit_interval("train.ema_decay", self.train.ema_decay)?;
        unit_interval("distill.ema_decay", self.distill.ema_decay)?;
        nonzero("train.batch", self.train.batch)?;
        nonzero("distill.batch", self.distill.batch)?;
        nonzero("classifier.batch", self.classifier.batch)?;
        if !is_power_of_two(self.train.steps) {
            return Err(Error::config("train.steps", "base sampler steps must be a power of two"));
        }
        if !is_power_of_two(self.eval.sweep_teacher_steps) || self.eval.sweep_teacher_steps < 2 {
            return Err(Error::config("eval.sweep_teacher_steps", "must be a power of two >= 2"));
        }
        if self.eval.samples < 2 {
            return Err(Error::config("eval.samples", "need at least two samples"));
        }
        nonzero("eval.entropy_samples", self.eval.entropy_samples)?;
        positive("eval.base_ffd_threshold", self.eval.base_ffd_threshold)?;
        let from = self.distill_from();
        if !is_power_of_two(from) || from > self.train.steps {
            return Err(Error::config(
                "distill.from_steps",
                format!("must be a power of two no larger than train.steps, got {from}"),
            ));
        }
        validate_plan(from, &self.plan()?)
    }

    pub fn distill_from(&self) -> usize {
        self.distill.from_steps.unwrap_or(self.train.steps)
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule {
            kind: self.schedule.kind,
            t_min: self.schedule.t_min,
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        self.dataset.clone()
    }

    pub fn denoiser_spec(&self) -> DenoiserSpec {
        DenoiserSpec {
            data_dim: self.dataset.dim,
            time_embed_dim: self.model.time_embed_dim,
            hidden: self.model.hidden.clone(),
        }
    }

    pub fn classifier_spec(&self) -> ClassifierSpec {
        ClassifierSpec {
            input_dim: self.dataset.dim,
            hidden: vec![self.classifier.width, self.classifier.feature_dim],
            classes: self.dataset.classes,
        }
    }

    pub fn base_train(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            iterations: t.iterations,
            batch: t.batch,
            optim: OptimConfig::adam(t.lr, LrPolicy::Warmup { warmup: t.warmup }, t.clip, t.ema_decay),
            log_every: t.log_every,
        }
    }

    pub fn classifier_train(&self) -> TrainConfig {
        let c = &self.classifier;
        TrainConfig {
            iterations: c.iterations,
            batch: c.batch,
            optim: OptimConfig::adam(c.lr, LrPolicy::Cosine { total: c.iterations }, 1.0, 0.0),
            log_every: 100,
        }
    }

    pub fn distill_optim(&self) -> DistillOptim {
        let d = &self.distill;
        DistillOptim {
            lr: d.lr,
            batch: d.batch,
            clip: d.clip,
            ema_decay: d.ema_decay,
            log_every: d.log_every,
        }
    }

    /// The resolved halving plan.
    pub fn plan(&self) -> Result<Vec<DistillStage>> {
        if self.distill.stages.is_empty() {
            return default_plan(self.distill_from(), self.distill.iterations);
        }
        self.distill
            .stages
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let stage = DistillStage {
                    teacher_steps: s.teacher_steps,
                    student_steps: s.student_steps.unwrap_or(s.teacher_steps / 2),
                    loss_kind: s.loss_kind,
                    tau: s.tau,
                    beta: s.beta,
                    gamma: s.gamma,
                    iterations: s.iterations.unwrap_or(self.distill.iterations),
                    kl_direction: s.kl_direction,
                };
                stage.validate().map_err(|e| match e {
                    Error::Config { key, message } => Error::config(format!("distill.stages[{k}].{key}"), message),
                    other => other,
                })?;
                Ok(stage)
            })
            .collect()
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be > 0, got {v}")))
    }
}

fn unit_interval(key: &str, v: f64) -> Result<()> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(key, format!("must lie in [0, 1), got {v}")))
    }
}

fn nonzero(key: &str, v: usize) -> Result<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(Error::config(key, "must be positive"))
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    RunConfig::from_toml_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.dataset.classes, 8);
        assert_eq!(cfg.dataset.points, 8192);
        assert_eq!(cfg.train.steps, 64);
        let plan = cfg.plan().unwrap();
        assert_eq!(plan.len(), 6);
        assert_eq!(plan[0].loss_kind, LossKind::Pd);
        assert_eq!(plan[3].loss_kind, LossKind::Rcfd);
        assert_eq!(cfg.schedule().t_min, 1e-3);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml_str("[train]\nlearning_rate = 1.0\n").unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "learning_rate"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(RunConfig::from_toml_str("bogus = 1\n").is_err());
    }

    #[test]
    fn non_halving_plan_rejected() {
        let text = r#"
            [train]
            steps = 8
            [[distill.stages]]
            teacher_steps = 8
            student_steps = 3
            loss_kind = "PD"
        "#;
        match RunConfig::from_toml_str(text).unwrap_err() {
            Error::Config { key, .. } => assert!(key.contains("student_steps"), "{key}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stage_overrides_accepted() {
        let text = r#"
            [train]
            steps = 8
            [[distill.stages]]
            teacher_steps = 8
            loss_kind = "RCFD"
            tau = 0.95
            beta = 0.003
            gamma = 0.75
            [[distill.stages]]
            teacher_steps = 4
            loss_kind = "CFD"
            tau = 0.9
            kl_direction = "student_as_target"
            iterations = 10
        "#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        let plan = cfg.plan().unwrap();
        assert_eq!((plan[0].tau, plan[0].beta, plan[0].gamma), (0.95, 0.003, 0.75));
        assert_eq!(plan[0].iterations, DEFAULT_STAGE_ITERATIONS);
        assert_eq!(plan[1].kl_direction, KlDirection::StudentAsTarget);
        assert_eq!(plan[1].iterations, 10);
    }

    #[test]
    fn plan_may_start_below_base() {
        let text = "[distill]\nfrom_steps = 8\nclassifier = \"shifted\"\n";
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.plan().unwrap()[0].teacher_steps, 8);
        assert_eq!(cfg.distill.classifier, ClassifierChoice::Shifted);
        assert!(RunConfig::from_toml_str("[distill]\nfrom_steps = 128\n").is_err());
    }

    #[test]
    fn range_errors_name_the_key() {
        let cases = [
            ("[schedule]\nt_min = 0.0\n", "schedule.t_min"),
            ("[distill]\nlr = -1.0\n", "distill.lr"),
            ("[dataset]\npoints = 8001\n", "dataset.points"),
            ("[train]\nsteps = 48\n", "train.steps"),
        ];
        for (text, expected) in cases {
            match RunConfig::from_toml_str(text).unwrap_err() {
                Error::Config { key, .. } => assert_eq!(key, expected),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        let again = RunConfig::from_toml_str(&a.to_toml_string()).unwrap();
        assert_eq!(again, a);
    }
}
