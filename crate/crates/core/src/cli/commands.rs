//! Subcommand implementations. Every command reads and writes only the run
//! directory named by the resolved config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::checkpoint::{quantize, ModelKind};
use super::config::{parse_config, ClassifierChoice, RunConfig};
use super::rundir::{CheckpointEntry, RunDir, StageTag, CONFIG};
use crate::diffnet::{Classifier, Denoiser};
use crate::distill::{distill_stage, DistillStage, LossKind, StageOutcome};
use crate::error::{Error, Result};
use crate::evalsuite::{
    entropy_profile, feature_stats, line_svg, parse_metrics, scatter_svg, score_sampler, FeatureStats, MetricsRow,
    Reference,
};
use crate::sampler::sample;
use crate::schedule::make_grid;
use crate::trainer::{accuracy, make_dataset, train_base, train_classifier, LossRecord, ToyDataset};

const STREAM_BASE: u64 = 1;
const STREAM_CLASSIFIER: u64 = 2;
const STREAM_SHIFTED: u64 = 3;
const STREAM_DISTILL: u64 = 4;
const STREAM_EVAL: u64 = 5;
const STREAM_SAMPLE: u64 = 6;
const STREAM_ENTROPY: u64 = 7;
const STREAM_SWEEP: u64 = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    TrainBase,
    TrainClassifier,
    Distill,
    Sample {
        steps: usize,
        count: usize,
        stage: Option<String>,
    },
    Eval {
        steps: usize,
        stage: Option<String>,
    },
    DiagnoseEntropy {
        steps: usize,
        stage: Option<String>,
    },
    SweepTau {
        values: Vec<f64>,
    },
    Plot,
}

/// Resolved configuration plus command-line overrides.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("iteration,loss,grad_norm,lr\n");
    for r in log {
        let _ = writeln!(s, "{},{:.9},{:.9},{:.9}", r.iteration, r.loss, r.grad_norm, r.lr);
    }
    s
}

fn stage_tag(stage: &DistillStage) -> StageTag {
    StageTag {
        loss_kind: stage.loss_kind.name().to_string(),
        tau: stage.tau,
        beta: stage.beta,
        gamma: stage.gamma,
    }
}

#[derive(Serialize, Deserialize)]
struct CachedStats {
    classifier_sha256: String,
    stats: FeatureStats,
}

impl Context {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Context { config })
    }

    /// Loads the config file (or defaults) and applies flag overrides.
    pub fn from_args(
        config: Option<&Path>,
        seed: Option<u64>,
        out: Option<PathBuf>,
        deterministic: bool,
    ) -> Result<Self> {
        let mut cfg = match config {
            Some(p) => parse_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(o) = out {
            cfg.out = o;
        }
        cfg.deterministic |= deterministic;
        Context::new(cfg)
    }

    /// The config with the output location removed: two directories run
    /// from the same settings share an identity.
    fn identity(&self) -> RunConfig {
        let mut c = self.config.clone();
        c.out = PathBuf::new();
        c
    }

    fn run_id(&self) -> String {
        self.identity().run_id()
    }

    fn seconds(&self, since: Instant) -> f64 {
        if self.config.deterministic {
            0.0
        } else {
            since.elapsed().as_secs_f64()
        }
    }

    fn open(&self) -> Result<RunDir> {
        let mut rd = RunDir::open(&self.config.out)?;
        rd.manifest.run_id = self.run_id();
        rd.manifest.config_hash = self.identity().hash();
        rd.manifest.seed = self.config.seed;
        rd.write_artifact(CONFIG, self.config.to_toml_string().as_bytes())?;
        Ok(rd)
    }

    pub fn run(&self, cmd: &Command) -> Result<String> {
        let mut rd = self.open()?;
        let message = match cmd {
            Command::TrainBase => self.train_base(&mut rd),
            Command::TrainClassifier => self.train_classifiers(&mut rd),
            Command::Distill => self.distill(&mut rd),
            Command::Sample { steps, count, stage } => self.sample(&mut rd, *steps, *count, stage.as_deref()),
            Command::Eval { steps, stage } => self.eval(&mut rd, *steps, stage.as_deref()),
            Command::DiagnoseEntropy { steps, stage } => self.diagnose_entropy(&mut rd, *steps, stage.as_deref()),
            Command::SweepTau { values } => self.sweep_tau(&mut rd, values),
            Command::Plot => self.plot(&mut rd),
        };
        // Keep whatever was produced before a failure discoverable.
        rd.save_manifest()?;
        message
    }

    fn dataset(&self) -> Result<ToyDataset> {
        make_dataset(&self.config.dataset_spec())
    }

    fn train_base(&self, rd: &mut RunDir) -> Result<String> {
        let cfg = &self.config;
        let data = self.dataset()?;
        let trained = train_base(
            &data,
            &cfg.schedule(),
            cfg.denoiser_spec(),
            &cfg.base_train(),
            &mut rng(cfg.seed, STREAM_BASE),
        )?;
        rd.write_artifact("logs/base.csv", loss_log_csv(&trained.log).as_bytes())?;
        let entry = rd.store_checkpoint(
            "base",
            cfg.train.steps,
            ModelKind::Denoiser,
            StageTag::none(),
            &trained.ema.params,
        )?;
        let last = trained.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
        Ok(format!("trained base denoiser (final loss {last:.5}) -> {}", entry.file))
    }

    fn train_classifiers(&self, rd: &mut RunDir) -> Result<String> {
        let cfg = &self.config;
        let mut out = String::new();
        let spec = cfg.dataset_spec();
        for (choice, data_spec, stream) in [
            (ClassifierChoice::InDomain, spec.clone(), STREAM_CLASSIFIER),
            (ClassifierChoice::Shifted, spec.shifted(), STREAM_SHIFTED),
        ] {
            let data = make_dataset(&data_spec)?;
            let trained = train_classifier(
                &data,
                cfg.classifier_spec(),
                &cfg.classifier_train(),
                &mut rng(cfg.seed, stream),
            )?;
            let name = choice.stage_name();
            rd.write_artifact(&format!("logs/{name}.csv"), loss_log_csv(&trained.log).as_bytes())?;
            let stored = quantize(&trained.classifier.params);
            let acc = accuracy(&Classifier::from_params(stored.clone())?, &data)?;
            let entry = rd.store_checkpoint(name, 0, ModelKind::Classifier, StageTag::none(), &stored)?;
            let _ = writeln!(out, "trained {name} (train accuracy {acc:.4}) -> {}", entry.file);
        }
        Ok(out.trim_end().to_string())
    }

    fn load_classifier(&self, rd: &RunDir, choice: ClassifierChoice) -> Result<(CheckpointEntry, Classifier)> {
        let name = choice.stage_name();
        let entry = rd
            .manifest
            .find(ModelKind::Classifier, Some(name), None)
            .cloned()
            .ok_or_else(|| {
                Error::Prerequisite(format!(
                    "missing checkpoint checkpoints/{name}-0step-*.rcfd; run train-classifier first"
                ))
            })?;
        let clf = Classifier::from_params(rd.read_checkpoint(&entry)?)?;
        Ok((entry, clf))
    }

    /// The denoiser to sample with `steps` steps: an exact match on stage
    /// and step count first, then the named stage (or the base model)
    /// sampled at `steps`.
    fn select_denoiser(&self, rd: &RunDir, stage: Option<&str>, steps: usize) -> Result<(CheckpointEntry, Denoiser)> {
        let m = &rd.manifest;
        let entry = m
            .find(ModelKind::Denoiser, stage, Some(steps))
            .or_else(|| m.find(ModelKind::Denoiser, Some(stage.unwrap_or("base")), None))
            .cloned()
            .ok_or_else(|| {
                let wanted = match stage {
                    Some(s) => format!("checkpoints/{s}-{steps}step-*.rcfd"),
                    None => format!("checkpoints/base-{}step-*.rcfd", self.config.train.steps),
                };
                Error::Prerequisite(format!("missing checkpoint {wanted}; run train-base (and distill) first"))
            })?;
        let model = Denoiser::from_params(rd.read_checkpoint(&entry)?)?;
        Ok((entry, model))
    }

    fn real_stats(&self, rd: &mut RunDir, clf_entry: &CheckpointEntry, clf: &Classifier) -> Result<FeatureStats> {
        let rel = "real_stats.json";
        let path = rd.path(rel);
        if path.exists() {
            if let Ok(cached) = serde_json::from_str::<CachedStats>(&std::fs::read_to_string(&path)?) {
                if cached.classifier_sha256 == clf_entry.sha256 {
                    return Ok(cached.stats);
                }
            }
        }
        let stats = feature_stats(clf, &self.dataset()?.points)?;
        let cached = CachedStats {
            classifier_sha256: clf_entry.sha256.clone(),
            stats,
        };
        let text = serde_json::to_string(&cached).expect("stats serialize");
        rd.write_artifact(rel, text.as_bytes())?;
        Ok(cached.stats)
    }

    fn eval_noise(&self) -> Array2<f64> {
        gaussian(
            self.config.eval.samples,
            self.config.dataset.dim,
            &mut rng(self.config.seed, STREAM_EVAL),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn score_row(
        &self,
        model: &Denoiser,
        stage: &str,
        tag: &StageTag,
        steps: usize,
        clf: &Classifier,
        real: &FeatureStats,
        started: Instant,
    ) -> Result<MetricsRow> {
        let grid = make_grid(steps)?;
        let score = score_sampler(model, &self.config.schedule(), &grid, clf, real, &self.eval_noise())?;
        Ok(MetricsRow {
            run_id: self.run_id(),
            stage: stage.to_string(),
            steps,
            loss_kind: tag.loss_kind.clone(),
            tau: tag.tau,
            beta: tag.beta,
            gamma: tag.gamma,
            seed: self.config.seed,
            ffd: score.ffd,
            is_like: score.is_like,
            wall_seconds: self.seconds(started),
        })
    }

    fn distill(&self, rd: &mut RunDir) -> Result<String> {
        let cfg = &self.config;
        let plan = cfg.plan()?;
        let from = cfg.distill_from();
        let (first_entry, mut teacher) = match rd.manifest.find(ModelKind::Denoiser, None, Some(from)) {
            Some(_) => self.select_denoiser(rd, None, from)?,
            None => {
                return Err(Error::Prerequisite(format!(
                    "missing checkpoint for the {from}-step teacher (checkpoints/base-{}step-*.rcfd or a distilled \
                     {from}-step student); run train-base first",
                    cfg.train.steps
                )))
            }
        };
        let needs_clf = plan.iter().any(|s| s.loss_kind.needs_classifier());
        let choice = cfg.distill.classifier;
        let feature_clf = if needs_clf {
            Some(self.load_classifier(rd, choice)?.1)
        } else {
            None
        };
        let scorer = match self.load_classifier(rd, ClassifierChoice::InDomain) {
            Ok((e, c)) => {
                let real = self.real_stats(rd, &e, &c)?;
                Some((c, real))
            }
            Err(Error::Prerequisite(_)) => None,
            Err(e) => return Err(e),
        };
        let data = self.dataset()?;
        let schedule = cfg.schedule();
        let optim = cfg.distill_optim();
        let mut r = rng(cfg.seed, STREAM_DISTILL);
        let mut out = format!("teacher {} ({from} steps)\n", first_entry.file);
        let mut rows = Vec::new();
        for stage in &plan {
            let started = Instant::now();
            let clf = if stage.loss_kind.needs_classifier() {
                feature_clf.as_ref()
            } else {
                None
            };
            let StageOutcome { ema, log, .. } = distill_stage(&teacher, stage, clf, &schedule, &data, &optim, &mut r)?;
            let mut name = stage.loss_kind.name().to_ascii_lowercase();
            if clf.is_some() && choice == ClassifierChoice::Shifted {
                name.push_str("-shifted");
            }
            let stored = quantize(&ema.params);
            let tag = stage_tag(stage);
            rd.write_artifact(
                &format!("logs/{name}-{}step.csv", stage.student_steps),
                loss_log_csv(&log).as_bytes(),
            )?;
            let entry = rd.store_checkpoint(&name, stage.student_steps, ModelKind::Denoiser, tag.clone(), &stored)?;
            teacher = Denoiser::from_params(stored)?;
            let _ = write!(out, "{} {} -> {} steps -> {}", name, stage.teacher_steps, stage.student_steps, entry.file);
            if let Some((c, real)) = &scorer {
                let row = self.score_row(&teacher, &name, &tag, stage.student_steps, c, real, started)?;
                let _ = write!(out, " (ffd {:.5})", row.ffd);
                rows.push(row.clone());
                rd.append_metrics(&[row])?;
            }
            out.push('\n');
        }
        if scorer.is_none() {
            out.push_str("no in-domain classifier: metrics rows skipped\n");
        }
        Ok(out.trim_end().to_string())
    }

    fn sample(&self, rd: &mut RunDir, steps: usize, count: usize, stage: Option<&str>) -> Result<String> {
        if count == 0 {
            return Err(Error::Argument("--count must be positive".into()));
        }
        let (entry, model) = self.select_denoiser(rd, stage, steps)?;
        let grid = make_grid(steps)?;
        let noise = gaussian(count, self.config.dataset.dim, &mut rng(self.config.seed, STREAM_SAMPLE));
        let traj = sample(&model, &self.config.schedule(), &grid, &noise, true)?;
        let tag = format!("{}-{steps}step", entry.stage);
        let mut csv = String::new();
        let dims: Vec<String> = (0..traj.samples.ncols()).map(|j| format!("x{j}")).collect();
        let _ = writeln!(csv, "{}", dims.join(","));
        for row in traj.samples.rows() {
            let v: Vec<String> = row.iter().map(|x| format!("{x:.9}")).collect();
            let _ = writeln!(csv, "{}", v.join(","));
        }
        rd.write_artifact(&format!("samples/{tag}.csv"), csv.as_bytes())?;
        let mut tcsv = String::new();
        let zs: Vec<String> = (0..traj.samples.ncols()).map(|j| format!("z{j}")).collect();
        let xs: Vec<String> = (0..traj.samples.ncols()).map(|j| format!("xhat{j}")).collect();
        let _ = writeln!(tcsv, "sample,step,t,{},{}", zs.join(","), xs.join(","));
        for (k, rec) in traj.steps.iter().enumerate() {
            for i in 0..count {
                let z: Vec<String> = rec.z.row(i).iter().map(|x| format!("{x:.9}")).collect();
                let x: Vec<String> = rec.x_hat.row(i).iter().map(|x| format!("{x:.9}")).collect();
                let _ = writeln!(tcsv, "{i},{},{},{},{}", k + 1, rec.t, z.join(","), x.join(","));
            }
        }
        rd.write_artifact(&format!("samples/{tag}-trajectory.csv"), tcsv.as_bytes())?;
        let data = self.dataset()?;
        let shown = data.points.nrows().min(1024);
        let real = data.points.slice(ndarray::s![..shown, ..]).to_owned();
        let svg = scatter_svg(
            &format!("{} samples, {steps} steps", entry.stage),
            &[("data", &real), ("generated", &traj.samples)],
        );
        let fig = format!("figures/samples-{tag}.svg");
        rd.write_artifact(&fig, svg.as_bytes())?;
        Ok(format!("wrote {count} samples from {} to samples/{tag}.csv and {fig}", entry.file))
    }

    fn eval(&self, rd: &mut RunDir, steps: usize, stage: Option<&str>) -> Result<String> {
        let started = Instant::now();
        let (entry, model) = self.select_denoiser(rd, stage, steps)?;
        let (ce, clf) = self.load_classifier(rd, ClassifierChoice::InDomain)?;
        let real = self.real_stats(rd, &ce, &clf)?;
        let row = self.score_row(&model, &entry.stage, &entry.tag, steps, &clf, &real, started)?;
        rd.append_metrics(std::slice::from_ref(&row))?;
        let mut msg = format!("{} at {steps} steps: ffd {:.6}, is_like {:.4}", entry.stage, row.ffd, row.is_like);
        if entry.stage == "base" && steps == self.config.train.steps {
            let limit = self.config.eval.base_ffd_threshold;
            let verdict = if row.ffd < limit { "below" } else { "ABOVE" };
            msg.push_str(&format!(" ({verdict} base threshold {limit})"));
        }
        Ok(msg)
    }

    fn diagnose_entropy(&self, rd: &mut RunDir, steps: usize, stage: Option<&str>) -> Result<String> {
        let (entry, model) = self.select_denoiser(rd, stage, steps)?;
        let (_, clf) = self.load_classifier(rd, ClassifierChoice::InDomain)?;
        let noise = gaussian(
            self.config.eval.entropy_samples,
            self.config.dataset.dim,
            &mut rng(self.config.seed, STREAM_ENTROPY),
        );
        let profile = entropy_profile(&model, &self.config.schedule(), &make_grid(steps)?, &clf, &noise)?;
        let tag = format!("{}-{steps}step", entry.stage);
        rd.write_artifact(&format!("entropy-{tag}.csv"), profile.to_csv().as_bytes())?;
        let pts: Vec<(f64, f64)> = profile.steps.iter().map(|s| (s.step as f64, s.entropy)).collect();
        let max = (clf.classes() as f64).ln();
        let svg = line_svg(
            &format!("prediction entropy, {steps}-step sampler"),
            "sampling step",
            "mean entropy",
            &[(entry.stage.as_str(), pts)],
            &[Reference {
                label: "ln C",
                value: max,
            }],
        );
        rd.write_artifact(&format!("figures/entropy-{tag}.svg"), svg.as_bytes())?;
        let first = profile.steps.first().map(|s| s.entropy).unwrap_or(f64::NAN);
        let last = profile.steps.last().map(|s| s.entropy).unwrap_or(f64::NAN);
        Ok(format!(
            "entropy over {} samples: first step {first:.5}, final step {last:.5} -> entropy-{tag}.csv",
            profile.sample_count
        ))
    }

    fn sweep_tau(&self, rd: &mut RunDir, values: &[f64]) -> Result<String> {
        if values.is_empty() {
            return Err(Error::Argument("--values needs at least one temperature".into()));
        }
        let cfg = &self.config;
        let n = cfg.eval.sweep_teacher_steps;
        let (teacher_entry, teacher) = match rd.manifest.find(ModelKind::Denoiser, None, Some(n)) {
            Some(_) => self.select_denoiser(rd, None, n)?,
            None => {
                return Err(Error::Prerequisite(format!(
                    "missing checkpoint for a {n}-step teacher (checkpoints/*-{n}step-*.rcfd); run distill first"
                )))
            }
        };
        let (_, feature_clf) = self.load_classifier(rd, cfg.distill.classifier)?;
        let (ce, clf) = self.load_classifier(rd, ClassifierChoice::InDomain)?;
        let real = self.real_stats(rd, &ce, &clf)?;
        let data = self.dataset()?;
        let schedule = cfg.schedule();
        let optim = cfg.distill_optim();
        let reference = self.score_row(&teacher, &teacher_entry.stage, &teacher_entry.tag, n / 2, &clf, &real, Instant::now())?;
        let mut rows = Vec::new();
        for &tau in values {
            let started = Instant::now();
            let stage = DistillStage::new(n, LossKind::Cfd, tau, 0.0, 0.0, cfg.distill.iterations)
                .map_err(|e| match e {
                    Error::Config { message, .. } => Error::Argument(format!("--values: {message}")),
                    other => other,
                })?;
            let outcome = distill_stage(
                &teacher,
                &stage,
                Some(&feature_clf),
                &schedule,
                &data,
                &optim,
                &mut rng(cfg.seed, STREAM_SWEEP),
            )?;
            let student = Denoiser::from_params(quantize(&outcome.ema.params))?;
            rows.push(self.score_row(&student, "sweep-tau", &stage_tag(&stage), n / 2, &clf, &real, started)?);
        }
        rd.append_metrics(&rows)?;
        let svg = sweep_figure(&rows, n / 2, Some(reference.ffd));
        rd.write_artifact("figures/sweep_tau.svg", svg.as_bytes())?;
        let mut out = String::new();
        for r in &rows {
            let _ = writeln!(out, "tau {}: ffd {:.6}", r.tau, r.ffd);
        }
        let _ = write!(out, "undistilled {}-step reference: ffd {:.6}", n / 2, reference.ffd);
        Ok(out)
    }

    fn plot(&self, rd: &mut RunDir) -> Result<String> {
        let rows = match rd.read_metrics()? {
            Some(text) => parse_metrics(&text)?,
            None => Vec::new(),
        };
        let mut out = String::new();
        let curve: Vec<&MetricsRow> = rows.iter().filter(|r| r.stage != "sweep-tau").collect();
        if curve.is_empty() {
            out.push_str("ffd_vs_steps, is_vs_steps: no metrics rows, drew empty figures\n");
        }
        let mut stages: Vec<&str> = curve.iter().map(|r| r.stage.as_str()).collect();
        stages.sort_unstable();
        stages.dedup();
        for (file, title, label, pick) in [
            ("figures/ffd_vs_steps.svg", "Frechet feature distance", "ffd", (|r: &MetricsRow| r.ffd) as fn(&MetricsRow) -> f64),
            ("figures/is_vs_steps.svg", "IS-like score", "is_like", |r: &MetricsRow| r.is_like),
        ] {
            let series: Vec<(&str, Vec<(f64, f64)>)> = stages
                .iter()
                .map(|&s| {
                    let mut pts: Vec<(f64, f64)> = Vec::new();
                    // Last row per step count wins.
                    for r in curve.iter().filter(|r| r.stage == s) {
                        let x = (r.steps as f64).log2();
                        pts.retain(|p| p.0 != x);
                        pts.push((x, pick(r)));
                    }
                    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                    (s, pts)
                })
                .collect();
            let svg = line_svg(title, "log2 sampling steps", label, &series, &[]);
            rd.write_artifact(file, svg.as_bytes())?;
            let _ = writeln!(out, "wrote {file}");
        }
        let sweep: Vec<MetricsRow> = rows.iter().filter(|r| r.stage == "sweep-tau").cloned().collect();
        if sweep.is_empty() {
            out.push_str("sweep_tau: no sweep rows, skipped\n");
        } else {
            let steps = sweep[0].steps;
            rd.write_artifact("figures/sweep_tau.svg", sweep_figure(&sweep, steps, None).as_bytes())?;
            out.push_str("wrote figures/sweep_tau.svg\n");
        }
        Ok(out.trim_end().to_string())
    }
}

fn sweep_figure(rows: &[MetricsRow], steps: usize, reference: Option<f64>) -> String {
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for r in rows.iter().filter(|r| r.steps == steps) {
        pts.retain(|p| p.0 != r.tau);
        pts.push((r.tau, r.ffd));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let refs: Vec<Reference<'_>> = reference
        .map(|value| Reference {
            label: "undistilled",
            value,
        })
        .into_iter()
        .collect();
    line_svg(
        &format!("{steps}-step CFD student vs temperature"),
        "tau",
        "ffd",
        &[("CFD", pts)],
        &refs,
    )
}
