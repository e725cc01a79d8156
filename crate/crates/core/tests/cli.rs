use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Proc;

use rcfd_core::cli::checkpoint::{decode, encode, quantize, FORMAT_VERSION};
use rcfd_core::cli::{Command, Context, Manifest, ModelKind, RunConfig};
use rcfd_core::diffnet::ParamStore;
use rcfd_core::Error;

const TINY: &str = r#"
[train]
iterations = 150
steps = 8
[classifier]
iterations = 150
[distill]
iterations = 20
[eval]
samples = 128
entropy_samples = 64
sweep_teacher_steps = 4
"#;

fn ctx(out: &Path, deterministic: bool) -> Context {
    let mut cfg = RunConfig::from_toml_str(TINY).unwrap();
    cfg.out = out.to_path_buf();
    cfg.seed = 3;
    cfg.deterministic = deterministic;
    Context::new(cfg).unwrap()
}

fn pipeline(c: &Context) {
    c.run(&Command::TrainBase).unwrap();
    c.run(&Command::TrainClassifier).unwrap();
    c.run(&Command::Distill).unwrap();
    c.run(&Command::Eval {
        steps: 2,
        stage: Some("base".into()),
    })
    .unwrap();
}

fn checkpoint_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fs::read_dir(dir.join("checkpoints"))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let b = fs::read(&p).unwrap();
            (p, b)
        })
        .collect()
}

#[test]
fn distill_before_train_base_names_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let err = ctx(dir.path(), true).run(&Command::Distill).unwrap_err();
    assert_eq!(err.exit_code(), 8);
    let msg = err.to_string();
    assert!(msg.contains("base-8step"), "{msg}");
}

#[test]
fn eval_before_classifier_names_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let c = ctx(dir.path(), true);
    c.run(&Command::TrainBase).unwrap();
    let err = c.run(&Command::Eval { steps: 8, stage: None }).unwrap_err();
    assert!(matches!(err, Error::Prerequisite(_)));
    assert!(err.to_string().contains("classifier-0step"), "{err}");
}

#[test]
fn deterministic_reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(&ctx(a.path(), true));
    pipeline(&ctx(b.path(), true));
    let ma = fs::read(a.path().join("metrics.csv")).unwrap();
    let mb = fs::read(b.path().join("metrics.csv")).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(checkpoint_bytes(a.path()).len(), checkpoint_bytes(b.path()).len());
    for ((pa, ba), (pb, bb)) in checkpoint_bytes(a.path()).iter().zip(checkpoint_bytes(b.path()).iter()) {
        assert_eq!(pa.file_name(), pb.file_name());
        assert_eq!(ba, bb);
    }
    let manifest = |p: &Path| -> Manifest {
        serde_json::from_str(&fs::read_to_string(p.join("manifest.json")).unwrap()).unwrap()
    };
    let (ma, mb) = (manifest(a.path()), manifest(b.path()));
    assert_eq!(ma.config_hash, mb.config_hash);
    assert_eq!(ma.checkpoints, mb.checkpoints);
    assert_eq!(ma.artifacts.get("metrics.csv"), mb.artifacts.get("metrics.csv"));
}

#[test]
fn repeated_eval_reproduces_rows_and_leaves_checkpoints_alone() {
    let dir = tempfile::tempdir().unwrap();
    let c = ctx(dir.path(), true);
    pipeline(&c);
    let before = checkpoint_bytes(dir.path());
    let eval = Command::Eval { steps: 4, stage: None };
    c.run(&eval).unwrap();
    c.run(&eval).unwrap();
    c.run(&Command::Sample {
        steps: 4,
        count: 10,
        stage: None,
    })
    .unwrap();
    c.run(&Command::Plot).unwrap();
    assert_eq!(before, checkpoint_bytes(dir.path()));
    let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "run_id,stage,steps,loss_kind,tau,beta,gamma,seed,ffd,is_like,wall_seconds");
    assert_eq!(lines[lines.len() - 1], lines[lines.len() - 2]);
}

#[test]
fn sample_one_step_writes_points_and_scatter() {
    let dir = tempfile::tempdir().unwrap();
    let c = ctx(dir.path(), true);
    pipeline(&c);
    c.run(&Command::Sample {
        steps: 1,
        count: 37,
        stage: None,
    })
    .unwrap();
    let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("rcfd-1step"));
    let csv = fs::read_to_string(dir.path().join("samples/rcfd-1step.csv")).unwrap();
    assert_eq!(csv.lines().count(), 38);
    let svg = fs::read_to_string(dir.path().join("figures/samples-rcfd-1step.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(svg.matches("<circle").count() >= 37);
}

#[test]
fn sweep_tau_appends_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let c = ctx(dir.path(), true);
    pipeline(&c);
    let before = fs::read_to_string(dir.path().join("metrics.csv")).unwrap().lines().count();
    c.run(&Command::SweepTau {
        values: vec![1.0, 0.95, 0.9, 0.85],
    })
    .unwrap();
    let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), before + 4);
    let sweep: Vec<&str> = text.lines().filter(|l| l.contains(",sweep-tau,")).collect();
    assert_eq!(sweep.len(), 4);
    assert!(sweep.iter().all(|l| l.contains(",2,CFD,")));
    let svg = fs::read_to_string(dir.path().join("figures/sweep_tau.svg")).unwrap();
    let poly = svg.lines().find(|l| l.contains("<polyline")).unwrap();
    let points = poly.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
    assert_eq!(points.split_whitespace().count(), 4);
    assert!(c.run(&Command::SweepTau { values: vec![0.0] }).is_err());
}

#[test]
fn diagnose_entropy_writes_profile_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let c = ctx(dir.path(), true);
    pipeline(&c);
    c.run(&Command::DiagnoseEntropy {
        steps: 8,
        stage: None,
    })
    .unwrap();
    let csv = fs::read_to_string(dir.path().join("entropy-base-8step.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    assert!(dir.path().join("figures/entropy-base-8step.svg").exists());
}

#[test]
fn plot_without_metrics_still_emits_figures() {
    let dir = tempfile::tempdir().unwrap();
    let msg = ctx(dir.path(), true).run(&Command::Plot).unwrap();
    assert!(msg.contains("no metrics"));
    let svg = fs::read_to_string(dir.path().join("figures/ffd_vs_steps.svg")).unwrap();
    assert!(svg.contains("no data"));
}

#[test]
fn held_lock_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(".lock"), "1").unwrap();
    let err = ctx(dir.path(), true).run(&Command::Plot).unwrap_err();
    assert!(matches!(err, Error::Locked(_)));
    assert_eq!(err.exit_code(), 10);
}

fn byte_store() -> ParamStore {
    let mut p = ParamStore::new();
    p.add_shaped("w", vec![2, 3], vec![1.0, -2.5, 0.1, 3.0e-8, 1.0e6, -0.0]).unwrap();
    p.add_vector("b", vec![0.5, f64::from(f32::MIN_POSITIVE)]).unwrap();
    p
}

/// Byte layout written out by hand from the documented format.
fn expected_bytes(p: &ParamStore) -> Vec<u8> {
    let mut payload = Vec::new();
    for t in p.tensors() {
        for v in t.value.iter() {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut out = b"RCFD".to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(1);
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.push(b'w');
    out.push(2);
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&3u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.push(b'b');
    out.push(1);
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    let crc = crc32fast::hash(&payload);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

#[test]
fn checkpoint_matches_documented_layout_and_roundtrips_bitwise() {
    let p = byte_store();
    let bytes = encode(ModelKind::Denoiser, &p).unwrap();
    assert_eq!(bytes, expected_bytes(&p));
    let back = decode(&bytes, ModelKind::Denoiser).unwrap();
    assert_eq!(encode(ModelKind::Denoiser, &back).unwrap(), bytes);
    for (a, b) in back.flatten().iter().zip(quantize(&p).flatten()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    let mut bad_table = bytes.clone();
    // First dim of `w`: 2 -> 3 makes the table disagree with the payload length.
    bad_table[17] = 3;
    assert_eq!(decode(&bad_table, ModelKind::Denoiser).unwrap_err().exit_code(), 7);
}

#[test]
fn binary_reports_distinct_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_rcfd");
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    fs::write(&cfg_path, TINY).unwrap();
    let out = dir.path().join("run");
    let run = |args: &[&str]| {
        Proc::new(bin)
            .arg("--config")
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out)
            .arg("--deterministic")
            .args(args)
            .output()
            .unwrap()
    };
    let missing = run(&["distill"]);
    assert_eq!(missing.status.code(), Some(8));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("base-8step"));

    assert_eq!(run(&["train-base"]).status.code(), Some(0));
    let ckpt = fs::read_dir(out.join("checkpoints")).unwrap().next().unwrap().unwrap().path();
    let mut bytes = fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 12] ^= 0x40;
    fs::write(&ckpt, &bytes).unwrap();
    assert_eq!(run(&["train-classifier"]).status.code(), Some(0));
    let corrupted = run(&["eval", "--steps", "8"]);
    assert_eq!(corrupted.status.code(), Some(5), "{}", String::from_utf8_lossy(&corrupted.stderr));

    let bad_cfg = dir.path().join("bad.toml");
    fs::write(&bad_cfg, "[train]\nsteps = 6\n").unwrap();
    let bad = Proc::new(bin).arg("--config").arg(&bad_cfg).arg("plot").output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("train.steps"));
}
