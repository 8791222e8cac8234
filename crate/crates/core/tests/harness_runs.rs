use std::fs;
use std::path::Path;

use visd::harness::{
    compare_runs, format_summary, load_manifest, metrics_csv, read_metrics, run_experiment, steps_to_threshold, train,
    ExperimentConfig, Resolver, TeacherKind, PRESETS,
};
use visd::optimizer::StepMetrics;
use visd::policy::PolicyParams;

fn short(preset: &str, seed: u64, steps: u64) -> ExperimentConfig {
    Resolver::new().preset(preset).set("seed", seed).set("steps", steps).resolve().unwrap()
}

fn csv_bytes(metrics: &[StepMetrics]) -> Vec<u8> {
    let mut buf = Vec::new();
    metrics_csv(&mut buf, metrics).unwrap();
    buf
}

fn run_csv(config: &ExperimentConfig) -> Vec<u8> {
    csv_bytes(&train(config, |_| Ok(())).unwrap().metrics)
}

#[test]
fn layering_defaults_preset_file_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, r#"{"steps": 5, "seed": 1, "ema_rate": 0.02, "group_size": 4}"#).unwrap();
    let env = [("VISD_SEED".to_string(), "2".to_string()), ("VISD_GROUP_SIZE".to_string(), "6".to_string())];
    let c =
        Resolver::new().preset("visd_no_feedback").file(&path).unwrap().env_vars(env).set("seed", 3).resolve().unwrap();
    let d = ExperimentConfig::default();
    assert_eq!(c.learning_rate, d.learning_rate);
    assert!(!c.use_feedback);
    assert_eq!((c.steps, c.ema_rate), (5, 0.02));
    assert_eq!(c.group_size, 6);
    assert_eq!(c.seed, 3);
    assert_eq!(c.preset, "visd_no_feedback");
}

#[test]
fn file_can_override_preset_fields() {
    let c = Resolver::new().preset("grpo_baseline").json(r#"{"lambda0": 0.3}"#).unwrap().resolve().unwrap();
    assert_eq!(c.lambda0, 0.3);
    let c = Resolver::new().json(r#"{"preset": "visd_sync10"}"#).unwrap().resolve().unwrap();
    assert_eq!((c.teacher, c.sync_period), (TeacherKind::Sync, 10));
}

#[test]
fn bad_configs_are_rejected() {
    assert!(Resolver::new().preset("visd_unknown").resolve().is_err());
    assert!(Resolver::new().json("[1, 2]").is_err());
    assert!(Resolver::new().json(r#"{"seed": "x"}"#).unwrap().resolve().is_err());
    assert!(Resolver::new().set("group_size", 1).resolve().is_err());
    assert!(Resolver::new().set("frame_count", 500).resolve().is_err());
    assert!(Resolver::new().set("teacher", "teacherless").resolve().is_err());
}

#[test]
fn every_preset_resolves_and_builds() {
    for p in PRESETS {
        let c = ExperimentConfig::preset(p).unwrap();
        let (setup, params) = c.build().unwrap();
        assert_eq!((params.vocab_size, params.dim), (setup.vocab.size(), setup.features.dim()));
        assert!(params.is_finite());
    }
}

#[test]
fn runs_are_reproducible() {
    for p in ["visd_ema", "visd_sync10"] {
        let c = short(p, 11, 15);
        assert_eq!(run_csv(&c), run_csv(&c), "{p}");
    }
    assert_ne!(run_csv(&short("visd_ema", 11, 15)), run_csv(&short("visd_ema", 12, 15)));
}

#[test]
fn zero_mixing_without_feedback_is_grpo() {
    let grpo = run_csv(&short("grpo_baseline", 5, 30));
    for replay in [false, true] {
        let c = Resolver::new()
            .preset("visd_ema")
            .set("seed", 5)
            .set("steps", 30)
            .set("lambda0", 0.0)
            .set("use_feedback", false)
            .set("teacher_replay", replay)
            .resolve()
            .unwrap();
        assert_eq!(run_csv(&c), grpo, "teacher_replay = {replay}");
    }
}

#[test]
fn run_writes_files_that_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = short("visd_current_teacher", 4, 8);
    c.out_dir = Some(dir.path().join("run"));
    let (out, files) = run_experiment(&c).unwrap();
    assert_eq!(out.metrics.len(), 8);
    assert_eq!(out.metrics.iter().map(|m| m.step).collect::<Vec<_>>(), (0..8).collect::<Vec<_>>());
    assert_eq!(read_metrics(&files.metrics).unwrap(), out.metrics);
    assert_eq!(fs::read(&files.metrics).unwrap(), csv_bytes(&out.metrics));
    assert_eq!(load_manifest(&files.manifest).unwrap(), c);
    let params = PolicyParams::read_text(std::io::BufReader::new(fs::File::open(&files.params).unwrap())).unwrap();
    assert_eq!(params, out.student);

    let mut no_dir = c.clone();
    no_dir.out_dir = None;
    assert!(run_experiment(&no_dir).is_err());
}

#[test]
fn metrics_header_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    fs::write(&path, "step,reward\n0,1.0\n").unwrap();
    assert!(read_metrics(&path).is_err());
    let manifest = dir.path().join("manifest.json");
    fs::write(&manifest, r#"{"format_version": 99, "crate_version": "0", "seed": 0, "config": {}}"#).unwrap();
    assert!(load_manifest(&manifest).is_err());
}

fn fixture(dir: &Path, name: &str, rewards: &[f64]) -> std::path::PathBuf {
    let rows: Vec<StepMetrics> = rewards
        .iter()
        .enumerate()
        .map(|(i, &r)| StepMetrics {
            step: i as u64,
            total_reward: r,
            group_mean_reward: r,
            answer_acc: r / 4.0,
            r_fmt: 1.0,
            r_thk_tmp_seg: 0.0,
            r_thk_tmp_pt: 0.0,
            r_thk_spa: 0.0,
            r_ans_tmp: 0.0,
            r_ans_spa: 0.0,
            grad_norm: 0.5,
            entropy: 1.0,
            lambda: 0.0,
            sigma: 1.0,
        })
        .collect();
    let path = dir.join(name);
    fs::write(&path, csv_bytes(&rows)).unwrap();
    path
}

#[test]
fn compare_on_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let a = fixture(dir.path(), "a.csv", &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    let b = fixture(dir.path(), "b.csv", &[2.0, 2.0, 4.0, 4.0, 0.0, 0.0]);

    // Final window of a with width 2 is (4 + 5) / 2, so the default threshold is 3.6.
    let (target, runs) = compare_runs(&[a.clone(), b.clone()], 2, None).unwrap();
    assert!((target - 3.6).abs() < 1e-12);
    assert_eq!((runs[0].first_reward, runs[0].final_reward), (0.5, 4.5));
    assert_eq!(runs[0].final_answer_acc, 4.5 / 4.0);
    // Trailing means of a: 0, .5, 1.5, 2.5, 3.5, 4.5; of b: 2, 2, 3, 4, 2, 0.
    assert_eq!(runs[0].steps_to_threshold, Some(5));
    assert_eq!(runs[1].steps_to_threshold, Some(3));
    assert_eq!((runs[1].first_reward, runs[1].final_reward), (2.0, 0.0));

    let (target, runs) = compare_runs(&[a, b], 3, Some(10.0)).unwrap();
    assert_eq!(target, 10.0);
    assert!(runs.iter().all(|r| r.steps_to_threshold.is_none()));
    let table = format_summary(target, 3, &runs);
    assert_eq!(table.lines().count(), 4);
    assert!(table.lines().nth(2).unwrap().ends_with("\t-"));
    assert!(compare_runs(&[dir.path().join("missing.csv")], 2, None).is_err());
}

#[test]
fn threshold_on_live_metrics() {
    let out = train(&short("visd_ema", 2, 10), |_| Ok(())).unwrap();
    assert_eq!(steps_to_threshold(&out.metrics, 3, f64::NEG_INFINITY), Some(0));
    assert_eq!(steps_to_threshold(&out.metrics, 3, f64::INFINITY), None);
}
