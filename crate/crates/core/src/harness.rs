//! Experiment configuration, presets, training runs and run comparison.
//!
//! Configuration is a flat JSON object. Values are resolved in order:
//! built-in defaults, then the named preset, then the config file, then
//! `VISD_<KEY>` environment variables, then explicit overrides (the CLI).
//! Unknown keys are errors.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::env::{generate_episode, ContextLayout, EnvConfig};
use crate::error::{Error, Result};
use crate::judge::{JudgeThresholds, PrivilegedLayout};
use crate::optimizer::{train_step, DeltaVariant, OptimizerConfig, Prompt, StepMetrics, TrainSetup, METRICS_HEADER};
use crate::policy::{add_format_prior, FeatureLayout, PolicyParams};
use crate::rng;
use crate::teacher::{add_reading_prior, TeacherMode};
use crate::verifier::{RewardWeights, SigmaSchedule, VerifierConfig};
use crate::vocab::Vocabulary;

pub const PRESETS: [&str; 6] =
    ["visd_ema", "visd_no_feedback", "visd_current_teacher", "visd_sync10", "visd_sampled_token", "grpo_baseline"];

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    Ema,
    Current,
    Sync,
}

/// Every tunable of a run, as one flat record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    pub seed: u64,
    pub steps: u64,
    /// Directory for `metrics.csv`, `manifest.json` and `params.txt`.
    pub out_dir: Option<PathBuf>,
    /// Worker threads for rollout scoring; 0 uses the global pool.
    pub threads: usize,

    pub group_size: usize,
    pub prompts_per_step: usize,
    pub max_len: usize,
    pub topk: usize,
    pub weight_clip: f64,
    pub pg_clip: f64,
    pub lambda0: f64,
    pub lambda_anneal_steps: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub adv_epsilon: f64,
    pub teacher: TeacherKind,
    pub ema_rate: f64,
    pub sync_period: u64,
    pub use_feedback: bool,
    pub delta_variant: DeltaVariant,
    pub teacher_replay: bool,

    pub frame_count: u32,
    pub grid_width: u32,
    pub grid_height: u32,
    pub max_events: usize,
    pub kind_weights: [f64; 3],

    /// Weights for ans, fmt, ans-tmp, ans-spa, thk-tmp, thk-spa.
    pub reward_weights: [f64; 6],
    pub sigma_hi: f64,
    pub sigma_lo: f64,
    pub sigma_anneal_steps: u64,
    pub spatial_tolerance: f64,

    pub temporal_low: f64,
    pub temporal_mid: f64,
    pub spatial_high: f64,
    pub answer_grounding: f64,

    pub position_buckets: usize,
    pub time_buckets: usize,
    /// Initial logit bonus for grammar-valid tokens.
    pub format_prior: f64,
    /// Strength of the fixed privileged-reading weights.
    pub reading_prior: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        let e = EnvConfig::default();
        let s = SigmaSchedule::default();
        let j = JudgeThresholds::default();
        Self {
            preset: "visd_ema".into(),
            seed: 0,
            steps: 2000,
            out_dir: None,
            threads: 0,
            group_size: o.group_size,
            prompts_per_step: o.prompts_per_step,
            max_len: o.max_len,
            topk: o.topk,
            weight_clip: o.weight_clip,
            pg_clip: o.pg_clip,
            lambda0: o.lambda0,
            lambda_anneal_steps: o.lambda_anneal_steps,
            learning_rate: o.learning_rate,
            weight_decay: o.weight_decay,
            max_grad_norm: o.max_grad_norm,
            adv_epsilon: o.adv_epsilon,
            teacher: TeacherKind::Ema,
            ema_rate: 0.01,
            sync_period: 10,
            use_feedback: o.use_feedback,
            delta_variant: o.delta_variant,
            teacher_replay: o.teacher_replay,
            frame_count: e.frame_count,
            grid_width: e.grid_width,
            grid_height: e.grid_height,
            max_events: e.max_events,
            kind_weights: e.kind_weights,
            reward_weights: RewardWeights::default().0,
            sigma_hi: s.sigma_hi,
            sigma_lo: s.sigma_lo,
            sigma_anneal_steps: s.anneal_steps,
            spatial_tolerance: VerifierConfig::default().spatial_tolerance,
            temporal_low: j.temporal_low,
            temporal_mid: j.temporal_mid,
            spatial_high: j.spatial_high,
            answer_grounding: j.answer_grounding,
            position_buckets: 8,
            time_buckets: 8,
            format_prior: 8.0,
            reading_prior: 6.0,
        }
    }
}

/// Key-value overrides a preset applies on top of the defaults.
pub fn preset_overrides(name: &str) -> Result<Map<String, Value>> {
    let pairs: Vec<(&str, Value)> = match name {
        "visd_ema" => vec![],
        "visd_no_feedback" => vec![("use_feedback", false.into())],
        "visd_current_teacher" => vec![("teacher", "current".into())],
        "visd_sync10" => vec![("teacher", "sync".into()), ("sync_period", 10.into())],
        "visd_sampled_token" => vec![("delta_variant", "sampled_token".into())],
        "grpo_baseline" => {
            vec![("lambda0", 0.0.into()), ("use_feedback", false.into()), ("teacher_replay", false.into())]
        }
        other => return Err(Error::InvalidConfig(format!("unknown preset {other:?}"))),
    };
    Ok(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        Resolver::new().preset(name).resolve()
    }

    pub fn teacher_mode(&self) -> TeacherMode {
        match self.teacher {
            TeacherKind::Ema => TeacherMode::Ema { rate: self.ema_rate },
            TeacherKind::Current => TeacherMode::Current,
            TeacherKind::Sync => TeacherMode::SyncN { period: self.sync_period },
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            group_size: self.group_size,
            prompts_per_step: self.prompts_per_step,
            max_len: self.max_len,
            topk: self.topk,
            weight_clip: self.weight_clip,
            pg_clip: self.pg_clip,
            lambda0: self.lambda0,
            lambda_anneal_steps: self.lambda_anneal_steps,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            adv_epsilon: self.adv_epsilon,
            teacher_mode: self.teacher_mode(),
            use_feedback: self.use_feedback,
            delta_variant: self.delta_variant,
            teacher_replay: self.teacher_replay,
        }
    }

    pub fn env(&self) -> EnvConfig {
        EnvConfig {
            frame_count: self.frame_count,
            grid_width: self.grid_width,
            grid_height: self.grid_height,
            max_events: self.max_events,
            kind_weights: self.kind_weights,
        }
    }

    pub fn verifier(&self) -> VerifierConfig {
        VerifierConfig {
            weights: RewardWeights(self.reward_weights),
            sigma: SigmaSchedule {
                sigma_hi: self.sigma_hi,
                sigma_lo: self.sigma_lo,
                anneal_steps: self.sigma_anneal_steps,
            },
            spatial_tolerance: self.spatial_tolerance,
        }
    }

    pub fn judge(&self) -> JudgeThresholds {
        JudgeThresholds {
            temporal_low: self.temporal_low,
            temporal_mid: self.temporal_mid,
            spatial_high: self.spatial_high,
            answer_grounding: self.answer_grounding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vocab = Vocabulary::standard();
        if !PRESETS.contains(&self.preset.as_str()) {
            return Err(Error::InvalidConfig(format!("unknown preset {:?}", self.preset)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.position_buckets == 0 || self.time_buckets == 0 {
            return Err(Error::InvalidConfig("bucket counts must be positive".into()));
        }
        if !(self.format_prior.is_finite() && self.reading_prior.is_finite()) {
            return Err(Error::InvalidConfig("priors must be finite".into()));
        }
        self.optimizer().validate()?;
        self.env().validate(&vocab)?;
        self.verifier().sigma.validate()
    }

    /// Training setup and the shared initial parameters for student and
    /// teacher.
    pub fn build(&self) -> Result<(TrainSetup, PolicyParams)> {
        self.validate()?;
        let vocab = Vocabulary::standard();
        let privileged = PrivilegedLayout {
            n_letters: vocab.n_letters(),
            frame_count: self.frame_count,
            time_buckets: self.time_buckets,
        };
        let features = FeatureLayout {
            context_dim: ContextLayout::new(&vocab).dim(),
            privileged_dim: privileged.dim(),
            vocab_size: vocab.size(),
            position_buckets: self.position_buckets,
            max_len: self.max_len,
        };
        let mut params = PolicyParams::zeros(vocab.size(), features.dim());
        add_format_prior(&mut params, &features, &vocab, self.format_prior);
        add_reading_prior(&mut params, &features, &privileged, &vocab, self.reading_prior);
        let setup = TrainSetup {
            vocab,
            features,
            privileged,
            optimizer: self.optimizer(),
            verifier: self.verifier(),
            judge: self.judge(),
            seed: self.seed,
        };
        Ok((setup, params))
    }
}

/// Layered configuration resolution.
#[derive(Debug, Clone, Default)]
pub struct Resolver {
    preset: Option<String>,
    file: Option<Map<String, Value>>,
    env: Vec<(String, String)>,
    overrides: Map<String, Value>,
}

impl Resolver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn preset(mut self, name: &str) -> Self {
        self.preset = Some(name.to_string());
        self
    }

    pub fn file(self, path: &Path) -> Result<Self> {
        let mut text = String::new();
        File::open(path)?.read_to_string(&mut text)?;
        self.json(&text)
    }

    pub fn json(mut self, text: &str) -> Result<Self> {
        match serde_json::from_str(text)? {
            Value::Object(map) => {
                self.file = Some(map);
                Ok(self)
            }
            _ => Err(Error::InvalidConfig("config file must hold a JSON object".into())),
        }
    }

    /// Reads `VISD_<KEY>` variables from the process environment.
    pub fn process_env(self) -> Self {
        self.env_vars(std::env::vars())
    }

    pub fn env_vars(mut self, vars: impl IntoIterator<Item = (String, String)>) -> Self {
        self.env = vars.into_iter().filter(|(k, _)| k.starts_with("VISD_")).collect();
        self
    }

    pub fn set(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.overrides.insert(key.to_string(), value.into());
        self
    }

    pub fn resolve(self) -> Result<ExperimentConfig> {
        let defaults = match serde_json::to_value(ExperimentConfig::default())? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        let env: Map<String, Value> = self
            .env
            .iter()
            .map(|(k, v)| {
                let key = k["VISD_".len()..].to_ascii_lowercase();
                let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone()));
                (key, value)
            })
            .collect();
        for (layer, name) in [(&env, "environment"), (&self.overrides, "override")]
            .into_iter()
            .chain(self.file.as_ref().map(|f| (f, "config file")))
        {
            if let Some(k) = layer.keys().find(|k| !defaults.contains_key(*k)) {
                return Err(Error::InvalidConfig(format!("unknown {name} key {k:?}")));
            }
        }

        let preset_of = |m: &Map<String, Value>| m.get("preset").and_then(Value::as_str).map(str::to_string);
        let preset = preset_of(&self.overrides)
            .or(self.preset.clone())
            .or_else(|| preset_of(&env))
            .or_else(|| self.file.as_ref().and_then(preset_of))
            .unwrap_or_else(|| "visd_ema".to_string());

        let mut merged = defaults;
        merged.extend(preset_overrides(&preset)?);
        if let Some(f) = self.file {
            merged.extend(f);
        }
        merged.extend(env);
        merged.extend(self.overrides);
        merged.insert("preset".into(), Value::String(preset));
        let config: ExperimentConfig = serde_json::from_value(Value::Object(merged))?;
        config.validate()?;
        Ok(config)
    }
}

/// Prompts for 0-based `step`, drawn from per-(seed, step, prompt) streams.
pub fn prompts_for_step(config: &ExperimentConfig, setup: &TrainSetup, step: u64) -> Result<Vec<Prompt>> {
    let env = config.env();
    (0..config.prompts_per_step)
        .map(|p| {
            let mut r = rng::stream(config.seed, &[rng::EPISODES, step, p as u64]);
            Ok(generate_episode(&mut r, &env, &setup.vocab)?.prompt(&setup.vocab))
        })
        .collect()
}

/// Result of a run kept in memory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<StepMetrics>,
    pub student: PolicyParams,
    pub teacher: PolicyParams,
}

/// Trains for `config.steps`, calling `on_step` after every step.
pub fn train(config: &ExperimentConfig, mut on_step: impl FnMut(&StepMetrics) -> Result<()>) -> Result<RunOutput> {
    let (setup, init) = config.build()?;
    let pool = match config.threads {
        0 => None,
        n => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?,
        ),
    };
    let mut student = init.clone();
    let mut teacher = init;
    let mut metrics = Vec::with_capacity(config.steps as usize);
    for step in 0..config.steps {
        let prompts = prompts_for_step(config, &setup, step)?;
        let mut run = || train_step(&prompts, &mut student, &mut teacher, &setup, step);
        let m = match &pool {
            Some(p) => p.install(run)?,
            None => run()?,
        };
        on_step(&m)?;
        metrics.push(m);
    }
    Ok(RunOutput { metrics, student, teacher })
}

/// Metrics CSV for a sequence of steps.
pub fn metrics_csv<W: Write>(out: W, metrics: &[StepMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for m in metrics {
        m.write_csv_row(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub crate_version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

/// Files written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub metrics: PathBuf,
    pub manifest: PathBuf,
    pub params: PathBuf,
}

/// Runs an experiment, streaming metrics to `out_dir/metrics.csv` and writing
/// the manifest and final student parameters.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(RunOutput, RunFiles)> {
    config.validate()?;
    let dir =
        config.out_dir.clone().ok_or_else(|| Error::InvalidConfig("out_dir is required to write run files".into()))?;
    fs::create_dir_all(&dir)?;
    let files = RunFiles {
        metrics: dir.join("metrics.csv"),
        manifest: dir.join("manifest.json"),
        params: dir.join("params.txt"),
    };
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        config: config.clone(),
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(&files.manifest)?), &manifest)?;

    let mut w = csv::Writer::from_writer(File::create(&files.metrics)?);
    w.write_record(METRICS_HEADER)?;
    w.flush()?;
    let out = train(config, |m| {
        m.write_csv_row(&mut w)?;
        w.flush()?;
        Ok(())
    })?;
    out.student.write_text(BufWriter::new(File::create(&files.params)?))?;
    Ok((out, files))
}

/// Reads a manifest back into a config.
pub fn load_manifest(path: &Path) -> Result<ExperimentConfig> {
    let m: Manifest = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if m.format_version != MANIFEST_VERSION {
        return Err(Error::SchemaMismatch(format!("manifest version {}", m.format_version)));
    }
    Ok(m.config)
}

/// Rows of a metrics CSV, checking the header.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(Error::SchemaMismatch(format!("{}: unexpected header {header:?}", path.display())));
    }
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec.map_err(|e| Error::SchemaMismatch(format!("{}: {e}", path.display())))?);
    }
    Ok(rows)
}

/// Mean of the last `window` values, or of all values when fewer exist.
pub fn final_window_mean(values: &[f64], window: usize) -> f64 {
    let w = window.max(1).min(values.len());
    if w == 0 {
        return 0.0;
    }
    values[values.len() - w..].iter().sum::<f64>() / w as f64
}

/// Mean of the first `window` values, or of all values when fewer exist.
pub fn first_window_mean(values: &[f64], window: usize) -> f64 {
    let w = window.max(1).min(values.len());
    if w == 0 {
        return 0.0;
    }
    values[..w].iter().sum::<f64>() / w as f64
}

/// Trailing-window means: entry `i` averages `values[i+1-w ..= i]`, using
/// every earlier value while fewer than `window` exist.
pub fn trailing_means(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// First step whose trailing-window reward reaches `target`.
pub fn steps_to_threshold(metrics: &[StepMetrics], window: usize, target: f64) -> Option<u64> {
    let rewards: Vec<f64> = metrics.iter().map(|m| m.total_reward).collect();
    trailing_means(&rewards, window).iter().position(|&m| m >= target).map(|i| metrics[i].step)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub rows: usize,
    pub first_reward: f64,
    pub final_reward: f64,
    pub final_answer_acc: f64,
    pub final_grad_norm: f64,
    pub steps_to_threshold: Option<u64>,
}

pub fn summarize_run(name: &str, metrics: &[StepMetrics], window: usize, target: f64) -> RunSummary {
    let col = |f: fn(&StepMetrics) -> f64| metrics.iter().map(f).collect::<Vec<f64>>();
    let reward = col(|m| m.total_reward);
    RunSummary {
        name: name.to_string(),
        rows: metrics.len(),
        first_reward: first_window_mean(&reward, window),
        final_reward: final_window_mean(&reward, window),
        final_answer_acc: final_window_mean(&col(|m| m.answer_acc), window),
        final_grad_norm: final_window_mean(&col(|m| m.grad_norm), window),
        steps_to_threshold: steps_to_threshold(metrics, window, target),
    }
}

/// Compares metric files. Without an explicit `target`, the threshold is
/// 80% of the first file's final windowed reward.
pub fn compare_runs(files: &[PathBuf], window: usize, target: Option<f64>) -> Result<(f64, Vec<RunSummary>)> {
    let runs: Vec<(String, Vec<StepMetrics>)> =
        files.iter().map(|p| Ok((p.display().to_string(), read_metrics(p)?))).collect::<Result<_>>()?;
    let target = match (target, runs.first()) {
        (Some(t), _) => t,
        (None, Some((_, m))) => 0.8 * final_window_mean(&m.iter().map(|x| x.total_reward).collect::<Vec<_>>(), window),
        (None, None) => 0.0,
    };
    let summaries = runs.iter().map(|(n, m)| summarize_run(n, m, window, target)).collect();
    Ok((target, summaries))
}

/// Plain-text table of run summaries.
pub fn format_summary(target: f64, window: usize, runs: &[RunSummary]) -> String {
    let mut s = format!("window {window}, threshold {target:.4}\n");
    s.push_str("run\trows\tfirst_reward\tfinal_reward\tfinal_answer_acc\tfinal_grad_norm\tsteps_to_threshold\n");
    for r in runs {
        let stt = r.steps_to_threshold.map_or_else(|| "-".to_string(), |v| v.to_string());
        s.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}\n",
            r.name, r.rows, r.first_reward, r.final_reward, r.final_answer_acc, r.final_grad_norm, stt
        ));
    }
    s
}
