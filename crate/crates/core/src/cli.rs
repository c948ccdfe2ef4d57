//! Config-driven experiments, presets and the `eftd` command line.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{fit_series, verify_all_lemmas, RateEstimate};
use crate::compression::{verify_contraction, CompressorKind, CompressorSpec};
use crate::ef_td::{nominal_delta, run_single_agent, theorem_default_alpha, Algorithm, ProjectionSpec, RunSpec, SamplerKind};
use crate::env_model::{Environment, GroundTruthFile, PreparedEnvironment, RandomMrpParams};
use crate::error::{Error, Result};
use crate::multi_agent::{multi_agent_default_alpha, run_multi_agent_experiment, AveragingSpec, MultiAgentSpec};
use crate::nonlinear_sa::{SyntheticMap, TdMap, UpdateMap};
use crate::trace::{aggregate_csv, fnv1a_hex, mean_error_curve, CsvTable, Trace};

pub const SCHEMA_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_VERIFY_FAILED: i32 = 4;

pub const WORKERS_ENV: &str = "EFSA_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvSource {
    Path {
        path: PathBuf,
    },
    Generate(RandomMrpParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Td,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSetting {
    Value(f64),
    /// `α = over_delta / δ`.
    PerDelta { over_delta: f64 },
    Named(String),
}

impl Default for AlphaSetting {
    fn default() -> Self {
        AlphaSetting::Named("theorem_default".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(rename = "G", default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AveragingConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    pub a_override: Option<f64>,
}

fn default_compressor() -> String {
    "identity".into()
}

fn default_trials() -> usize {
    30
}

fn default_value_bits() -> u32 {
    32
}

fn default_sampler() -> SamplerKind {
    SamplerKind::Markov
}

/// One experiment: an environment, an algorithm and how to run it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub env: EnvSource,
    pub algorithm: Algorithm,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerKind,
    #[serde(default = "default_compressor")]
    pub compressor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<MapKind>,
    #[serde(default)]
    pub alpha: AlphaSetting,
    #[serde(rename = "T")]
    pub steps: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default)]
    pub projection: ProjectionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_every: Option<u64>,
    #[serde(default)]
    pub averaging: AveragingConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<f64>>,
    #[serde(default = "default_value_bits")]
    pub value_bits: u32,
}

impl ExperimentConfig {
    pub fn new(env: EnvSource, algorithm: Algorithm, sampler: SamplerKind, compressor: &str, steps: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            env,
            algorithm,
            sampler,
            compressor: compressor.into(),
            map: None,
            alpha: AlphaSetting::default(),
            steps,
            trials: default_trials(),
            m: None,
            projection: ProjectionConfig::default(),
            record_every: None,
            averaging: AveragingConfig::default(),
            seed: 0,
            output_dir: None,
            theta0: None,
            value_bits: default_value_bits(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Stable tag of the config, written into every trace.
    pub fn hash(&self) -> String {
        fnv1a_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Checks that do not need the environment.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        if let EnvSource::Generate(p) = &self.env {
            p.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.compressor.parse::<CompressorKind>()?;
        if self.steps == 0 {
            return Err(Error::Config("T must be >= 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.record_every == Some(0) {
            return Err(Error::Config("record_every must be >= 1".into()));
        }
        match &self.alpha {
            AlphaSetting::Value(a) if !(*a > 0.0 && *a < 1.0) => {
                return Err(Error::Config(format!("alpha must lie in (0,1), got {a}")));
            }
            AlphaSetting::PerDelta { over_delta: c } if !(*c > 0.0 && *c < 1.0) => {
                return Err(Error::Config(format!("over_delta must lie in (0,1), got {c}")));
            }
            AlphaSetting::Named(s) if s != "theorem_default" => {
                return Err(Error::Config(format!("alpha must be a number or \"theorem_default\", got {s:?}")));
            }
            _ => {}
        }
        match self.algorithm {
            Algorithm::MultiAgent => {
                if self.sampler != SamplerKind::Iid {
                    return Err(Error::Config("multi_agent requires the iid sampler".into()));
                }
                if !matches!(self.m, Some(m) if m >= 1) {
                    return Err(Error::Config("multi_agent requires M >= 1".into()));
                }
                if self.projection.enabled {
                    return Err(Error::Config("multi_agent runs do not project".into()));
                }
            }
            _ => {
                if self.m.is_some() {
                    return Err(Error::Config("M is only valid for multi_agent".into()));
                }
                if self.averaging.enabled {
                    return Err(Error::Config("averaging is only valid for multi_agent".into()));
                }
            }
        }
        if self.algorithm == Algorithm::EfSa && self.map.is_none() {
            return Err(Error::Config("ef_sa requires a map (\"td\" or \"synthetic\")".into()));
        }
        if self.algorithm != Algorithm::EfSa && self.map.is_some() {
            return Err(Error::Config("map is only valid for ef_sa".into()));
        }
        if let Some(g) = self.projection.radius {
            if !(g > 0.0) {
                return Err(Error::Config(format!("projection radius must be positive, got {g}")));
            }
        }
        if let Some(a) = self.averaging.a_override {
            if !(a >= 0.0) {
                return Err(Error::Config(format!("averaging A must be >= 0, got {a}")));
            }
        }
        Ok(())
    }

    pub fn load_environment(&self, base: Option<&Path>) -> Result<Environment> {
        match &self.env {
            EnvSource::Generate(p) => Environment::generate(p),
            EnvSource::Path { path } => {
                let full = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                Environment::from_json(&fs::read_to_string(full)?)
            }
        }
    }

    fn record_every(&self) -> u64 {
        self.record_every.unwrap_or((self.steps / 100).max(1))
    }
}

/// A config with its steady state and everything the runners need.
pub struct ResolvedExperiment {
    pub config: ExperimentConfig,
    pub prepared: PreparedEnvironment,
    pub compressor: CompressorSpec,
    pub alpha: f64,
    pub map: Option<Box<dyn UpdateMap + 'static>>,
}

/// Step size the config resolves to.
pub fn resolve_alpha(cfg: &ExperimentConfig, gamma: f64, delta: f64, beta: Option<f64>) -> f64 {
    match (&cfg.alpha, cfg.algorithm) {
        (AlphaSetting::Value(a), _) => *a,
        (AlphaSetting::PerDelta { over_delta }, _) => over_delta / delta,
        (_, Algorithm::MultiAgent) => multi_agent_default_alpha(gamma, delta),
        (_, Algorithm::EfSa) => {
            let a = theorem_default_alpha(cfg.sampler, gamma, delta, None);
            beta.map_or(a, |b| a.min(0.5 / b))
        }
        _ => theorem_default_alpha(cfg.sampler, gamma, delta, None),
    }
}

impl ResolvedExperiment {
    pub fn new(config: ExperimentConfig, base: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let env = config.load_environment(base)?;
        let prepared = PreparedEnvironment::new(env)?;
        let k = prepared.k();
        let compressor = CompressorSpec::parse(&config.compressor, k)?;
        if config.projection.enabled && prepared.env.mrp.max_abs_reward() > 1.0 {
            return Err(Error::Config("projected runs assume rewards bounded by 1".into()));
        }
        if let Some(t0) = &config.theta0 {
            if t0.len() != k {
                return Err(Error::DimensionMismatch { expected: k, got: t0.len() });
            }
        }
        let map: Option<Box<dyn UpdateMap>> = match config.map {
            Some(MapKind::Synthetic) => Some(Box::new(SyntheticMap::for_environment(&prepared, config.seed)?)),
            _ => None,
        };
        let beta = map.as_ref().map(|m| m.monotonicity());
        let alpha = resolve_alpha(&config, prepared.gamma(), nominal_delta(&compressor), beta);
        if let Some(b) = beta {
            if alpha * b >= 1.0 {
                return Err(Error::Config(format!("ef_sa needs alpha*beta < 1, got {}", alpha * b)));
            }
        }
        Ok(Self { config, prepared, compressor, alpha, map })
    }

    pub fn projection(&self) -> ProjectionSpec {
        if self.config.projection.enabled {
            ProjectionSpec::ball(
                self.config.projection.radius.unwrap_or_else(|| ProjectionSpec::default_radius(self.prepared.steady.theta_star_slice())),
            )
        } else {
            ProjectionSpec::disabled()
        }
    }

    pub fn run_spec(&self) -> RunSpec {
        let cfg = &self.config;
        let mut spec = RunSpec::new(cfg.algorithm, cfg.sampler, self.compressor, self.alpha, cfg.steps);
        spec.record_every = cfg.record_every();
        spec.projection = self.projection();
        spec.theta0 = cfg.theta0.clone();
        spec.seed = cfg.seed;
        spec.value_bits = cfg.value_bits;
        spec.config_hash = cfg.hash();
        spec
    }

    pub fn multi_spec(&self) -> MultiAgentSpec {
        let cfg = &self.config;
        let mut spec = MultiAgentSpec::new(cfg.m.unwrap_or(1), self.compressor, self.alpha, cfg.steps);
        spec.record_every = cfg.record_every();
        spec.theta0 = cfg.theta0.clone();
        spec.seed = cfg.seed;
        spec.value_bits = cfg.value_bits;
        spec.config_hash = cfg.hash();
        if cfg.averaging.enabled {
            spec.averaging = Some(
                cfg.averaging
                    .a_override
                    .unwrap_or_else(|| AveragingSpec::default_a(self.prepared.steady.omega, self.prepared.gamma())),
            );
        }
        spec
    }

    pub fn run_trial(&self, trial: usize) -> Result<Trace> {
        match self.config.algorithm {
            Algorithm::MultiAgent => run_multi_agent_experiment(&self.prepared, &self.multi_spec(), trial),
            Algorithm::EfSa => {
                let td;
                let map: &dyn UpdateMap = match &self.map {
                    Some(m) => m.as_ref(),
                    None => {
                        td = TdMap::new(&self.prepared);
                        &td
                    }
                };
                run_single_agent(&self.prepared, &self.run_spec(), trial, Some(map))
            }
            _ => run_single_agent(&self.prepared, &self.run_spec(), trial, None),
        }
    }

    /// All trials, in trial order, on a pool of `workers` threads.
    pub fn run_all(&self, workers: usize) -> Result<Vec<Trace>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
        pool.install(|| (0..self.config.trials).into_par_iter().map(|t| self.run_trial(t)).collect())
    }
}

/// Outcome of one experiment across all trials.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub label: String,
    pub traces: Vec<Trace>,
    pub alpha: f64,
}

impl ExperimentResult {
    pub fn any_diverged(&self) -> bool {
        self.traces.iter().any(|t| t.diverged)
    }

    pub fn mean_curve(&self) -> (Vec<f64>, Vec<f64>) {
        mean_error_curve(&self.traces)
    }

    pub fn final_mean_error(&self) -> f64 {
        let finals: Vec<f64> = self.traces.iter().filter_map(|t| t.last().map(|r| r.error_sq)).collect();
        finals.iter().sum::<f64>() / finals.len().max(1) as f64
    }

    /// Rate and plateau of the across-trial mean curve.
    pub fn fit(&self) -> Result<RateEstimate> {
        if self.any_diverged() {
            return Err(Error::Diverged);
        }
        let (t, e) = self.mean_curve();
        fit_series(&t, &e)
    }

    /// Writes `trial_NNN.csv` for every trial and `aggregate.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, t) in self.traces.iter().enumerate() {
            fs::write(dir.join(format!("trial_{i:03}.csv")), t.to_csv())?;
        }
        fs::write(dir.join("aggregate.csv"), aggregate_csv(&self.traces))?;
        Ok(())
    }

    pub fn summary_line(&self) -> String {
        let fit = match self.fit() {
            Ok(f) => format!("rate={:.6} plateau={:.6e}", f.geometric_rate, f.plateau),
            Err(e) => format!("fit unavailable ({e})"),
        };
        format!(
            "{}: alpha={:.6e} trials={} final_mean_E={:.6e} {}{}",
            self.label,
            self.alpha,
            self.traces.len(),
            self.final_mean_error(),
            fit,
            if self.any_diverged() { " DIVERGED" } else { "" }
        )
    }
}

pub fn run_experiment(label: &str, cfg: &ExperimentConfig, workers: usize, base: Option<&Path>) -> Result<ExperimentResult> {
    let resolved = ResolvedExperiment::new(cfg.clone(), base)?;
    let traces = resolved.run_all(workers)?;
    Ok(ExperimentResult { label: label.into(), traces, alpha: resolved.alpha })
}

/// Named figure presets. Each expands to one or more labelled configs.
pub const PRESETS: [&str; 5] = ["fig2_left", "fig2_right", "fig3", "fig4", "fig5"];

pub const PRESET_STEPS: u64 = 50_000;
pub const PRESET_TRIALS: usize = 30;

fn preset_env(k: usize, gamma: f64, reward_range: (f64, f64), seed: u64) -> EnvSource {
    EnvSource::Generate(RandomMrpParams { reward_range, ..RandomMrpParams::new(100, k, gamma, seed) })
}

fn with_alpha(mut cfg: ExperimentConfig, alpha: f64) -> ExperimentConfig {
    cfg.alpha = AlphaSetting::Value(alpha);
    cfg.record_every = Some(PRESET_STEPS / 500);
    cfg.trials = PRESET_TRIALS;
    cfg
}

/// Step size used by the sign comparison presets.
pub const FIG2_ALPHA: f64 = 0.05;
/// Top-k sweep step size is `FIG3_ALPHA / δ`.
pub const FIG3_ALPHA: f64 = 0.5;
/// Step size used by the multi-agent presets.
pub const FIG45_ALPHA: f64 = 0.05;
pub const FIG2_REWARD_RANGE: (f64, f64) = (0.0, 10.0);

pub fn preset(name: &str) -> Result<Vec<(String, ExperimentConfig)>> {
    let gen = |algorithm, sampler, comp: &str, env: EnvSource, alpha| {
        with_alpha(ExperimentConfig::new(env, algorithm, sampler, comp, PRESET_STEPS), alpha)
    };
    let out = match name {
        "fig2_left" | "fig2_right" => {
            let gamma = if name == "fig2_left" { 0.5 } else { 0.9 };
            let env = preset_env(10, gamma, FIG2_REWARD_RANGE, 1);
            vec![
                ("td0".to_string(), gen(Algorithm::Td0, SamplerKind::Markov, "identity", env.clone(), FIG2_ALPHA)),
                ("ef_sign".to_string(), gen(Algorithm::EfTd, SamplerKind::Markov, "signscaled", env.clone(), FIG2_ALPHA)),
                ("sign_no_ef".to_string(), gen(Algorithm::EfTdNofb, SamplerKind::Markov, "signraw", env, FIG2_ALPHA)),
            ]
        }
        "fig3" => {
            let env = preset_env(50, 0.5, (0.0, 1.0), 3);
            [1usize, 2, 5, 10, 25, 50]
                .iter()
                .map(|k| {
                    let mut cfg = gen(Algorithm::EfTd, SamplerKind::MeanPath, &format!("topk:{k}"), env.clone(), FIG3_ALPHA);
                    cfg.alpha = AlphaSetting::PerDelta { over_delta: FIG3_ALPHA };
                    (format!("top{k}"), cfg)
                })
                .collect()
        }
        "fig4" | "fig5" => {
            let comp = if name == "fig4" { "signscaled" } else { "topk:2" };
            let env = preset_env(10, 0.3, (0.0, 1.0), 4);
            [1usize, 10, 100]
                .iter()
                .map(|&m| {
                    let mut cfg = gen(Algorithm::MultiAgent, SamplerKind::Iid, comp, env.clone(), FIG45_ALPHA);
                    cfg.m = Some(m);
                    cfg.averaging.enabled = true;
                    (format!("M{m}"), cfg)
                })
                .collect()
        }
        other => return Err(Error::Config(format!("unknown preset {other:?}; expected one of {PRESETS:?}"))),
    };
    Ok(out)
}

/// Axes a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// `k` of a top-k compressor.
    K,
    M,
    Alpha,
    /// Top-k with `k = K/δ`.
    Delta,
}

pub fn sweep_point(base: &ExperimentConfig, axis: SweepAxis, value: f64, k_dim: usize) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    let as_count = |v: f64| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::Config(format!("sweep value {v} must be a positive integer")))
        }
    };
    match axis {
        SweepAxis::K => cfg.compressor = format!("topk:{}", as_count(value)?),
        SweepAxis::M => cfg.m = Some(as_count(value)?),
        SweepAxis::Alpha => cfg.alpha = AlphaSetting::Value(value),
        SweepAxis::Delta => {
            let k = k_dim as f64 / value;
            if k.fract() != 0.0 || k < 1.0 {
                return Err(Error::Config(format!("delta {value} does not divide K={k_dim}")));
            }
            cfg.compressor = format!("topk:{}", k as usize);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn env_dim(cfg: &ExperimentConfig, base: Option<&Path>) -> Result<usize> {
    match &cfg.env {
        EnvSource::Generate(p) => Ok(p.k),
        EnvSource::Path { .. } => Ok(cfg.load_environment(base)?.k()),
    }
}

/// Runs every sweep point and returns the combined CSV.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    workers: usize,
    base_dir: Option<&Path>,
    out: Option<&Path>,
) -> Result<(String, bool)> {
    if values.is_empty() {
        return Err(Error::Config("sweep axis has no values".into()));
    }
    let k_dim = env_dim(base, base_dir)?;
    let mut csv = String::from("axis,value,alpha,trials,final_E_mean,rate,plateau,diverged\n");
    let mut diverged = false;
    for &v in values {
        let cfg = sweep_point(base, axis, v, k_dim)?;
        let label = format!("{}_{v}", axis_name(axis));
        let result = run_experiment(&label, &cfg, workers, base_dir)?;
        if let Some(dir) = out {
            result.write(&dir.join(&label))?;
        }
        let (rate, plateau) = match result.fit() {
            Ok(f) => (f.geometric_rate.to_string(), f.plateau.to_string()),
            Err(_) => ("nan".into(), "nan".into()),
        };
        diverged |= result.any_diverged();
        csv.push_str(&format!(
            "{},{v},{},{},{},{rate},{plateau},{}\n",
            axis_name(axis),
            result.alpha,
            result.traces.len(),
            result.final_mean_error(),
            result.any_diverged()
        ));
    }
    Ok((csv, diverged))
}

fn axis_name(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::K => "k",
        SweepAxis::M => "M",
        SweepAxis::Alpha => "alpha",
        SweepAxis::Delta => "delta",
    }
}

/// Rate/plateau table for a set of trace or aggregate CSVs.
pub fn report_csv(paths: &[PathBuf]) -> Result<String> {
    let mut out = String::from("file,records,final_E,rate,plateau,fit_end\n");
    for p in paths {
        let table = CsvTable::parse(&fs::read_to_string(p)?)?;
        let times = table.column("t").ok_or_else(|| Error::Config(format!("{}: no t column", p.display())))?;
        let errors = table
            .column("E")
            .or_else(|| table.column("E_mean"))
            .ok_or_else(|| Error::Config(format!("{}: no E or E_mean column", p.display())))?;
        let last = errors.last().copied().unwrap_or(f64::NAN);
        let (rate, plateau, end) = match fit_series(&times, &errors) {
            Ok(f) => (f.geometric_rate.to_string(), f.plateau.to_string(), f.fit_window.1.to_string()),
            Err(_) => ("nan".into(), "nan".into(), "0".into()),
        };
        out.push_str(&format!("{},{},{last},{rate},{plateau},{end}\n", p.display(), times.len()));
    }
    Ok(out)
}

#[derive(Debug, Parser)]
#[command(name = "eftd", version, about = "TD learning with compressed updates and error feedback")]
pub struct Cli {
    /// Worker threads for trials and sweep points.
    #[arg(long, global = true, env = WORKERS_ENV)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an environment and its ground-truth sidecar.
    GenEnv(GenEnvArgs),
    /// Run one config or preset.
    Run(RunArgs),
    /// Run a config across values of one axis.
    Sweep(SweepArgs),
    /// Check the lemma suite and compressor properties on an environment.
    Verify(VerifyArgs),
    /// Fit rate and plateau for trace CSVs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenEnvArgs {
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long = "K", short = 'k', default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub reward_lo: f64,
    #[arg(long, default_value_t = 1.0)]
    pub reward_hi: f64,
    #[arg(long, default_value_t = 0.01)]
    pub mixing_eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// Overrides the master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the trial count.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Overrides the step count.
    #[arg(long = "T")]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Environment JSON; a generated default is used otherwise.
    #[arg(long, conflicts_with = "config")]
    pub env: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub files: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Diverged => EXIT_DIVERGED,
        _ => EXIT_USAGE,
    }
}

fn apply_overrides(cfg: &mut ExperimentConfig, args: &RunArgs) {
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(t) = args.steps {
        cfg.steps = t;
        if cfg.record_every.is_some_and(|r| r > t) {
            cfg.record_every = Some((t / 100).max(1));
        }
    }
}

fn cmd_gen_env(args: &GenEnvArgs) -> Result<i32> {
    let params = RandomMrpParams {
        reward_range: (args.reward_lo, args.reward_hi),
        mixing_eps: args.mixing_eps,
        ..RandomMrpParams::new(args.n, args.k, args.gamma, args.seed)
    };
    params.validate()?;
    let env = Environment::generate(&params)?;
    let ss = env.steady_state()?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("env.json"), env.to_json()?)?;
    fs::write(args.out.join("ground_truth.json"), serde_json::to_string_pretty(&GroundTruthFile::from_steady_state(&ss))?)?;
    println!("wrote {} (omega={:.6e}, sigma_sq={:.6e})", args.out.join("env.json").display(), ss.omega, ss.sigma_sq);
    Ok(EXIT_OK)
}

fn cmd_run(args: &RunArgs, workers: usize) -> Result<i32> {
    let (runs, base): (Vec<(String, ExperimentConfig)>, Option<PathBuf>) = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let cfg = ExperimentConfig::from_path(path)?;
            (vec![("run".into(), cfg)], path.parent().map(Path::to_path_buf))
        }
        (None, Some(name)) => (preset(name)?, None),
        (None, None) => return Err(Error::Config("--config or --preset is required".into())),
    };
    let single = runs.len() == 1;
    let mut diverged = false;
    for (label, mut cfg) in runs {
        apply_overrides(&mut cfg, args);
        cfg.validate()?;
        let result = run_experiment(&label, &cfg, workers, base.as_deref())?;
        let root = args.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
        let dir = if single { root } else { root.join(&label) };
        result.write(&dir)?;
        println!("{}", result.summary_line());
        diverged |= result.any_diverged();
    }
    Ok(if diverged { EXIT_DIVERGED } else { EXIT_OK })
}

fn cmd_sweep(args: &SweepArgs, workers: usize) -> Result<i32> {
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let base = args.config.parent().map(Path::to_path_buf);
    let out = args.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let (csv, diverged) = run_sweep(&cfg, args.axis, &args.values, workers, base.as_deref(), Some(&out))?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(if diverged { EXIT_DIVERGED } else { EXIT_OK })
}

fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    let env = match (&args.env, &args.config) {
        (Some(p), _) => Environment::from_json(&fs::read_to_string(p)?)?,
        (None, Some(c)) => ExperimentConfig::from_path(c)?.load_environment(c.parent())?,
        (None, None) => Environment::generate(&RandomMrpParams::new(100, 10, 0.5, 0))?,
    };
    let prepared = PreparedEnvironment::new(env)?;
    let report = verify_all_lemmas(&prepared, args.trials, args.seed);
    print!("{}", report.table());
    let k = prepared.k();
    println!("{:<28} {:>14} {:>14} compliant", "operator", "max_ratio", "bound");
    for text in ["signraw".to_string(), format!("randk:{}", (k / 2).max(1))] {
        let spec = CompressorSpec::parse(&text, k)?;
        let r = verify_contraction(&spec, args.trials.min(2000), args.seed);
        let bound = r.bound.map_or("none".to_string(), |b| format!("{b:.6}"));
        println!("{:<28} {:>14.6e} {:>14} {} (exempt)", spec.kind().to_string(), r.max_ratio, bound, if r.pass { "yes" } else { "no" });
    }
    Ok(if report.all_pass() { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

fn cmd_report(args: &ReportArgs) -> Result<i32> {
    let mut files = Vec::new();
    for f in &args.files {
        if f.is_dir() {
            let mut entries: Vec<PathBuf> =
                fs::read_dir(f)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "csv")).collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(f.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Config("no CSV files to report on".into()));
    }
    let csv = report_csv(&files)?;
    match &args.out {
        Some(p) => fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(EXIT_OK)
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let workers = cli.workers.unwrap_or_else(default_workers);
    let result = match &cli.command {
        Command::GenEnv(a) => cmd_gen_env(a),
        Command::Run(a) => cmd_run(a, workers),
        Command::Sweep(a) => cmd_sweep(a, workers),
        Command::Verify(a) => cmd_verify(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
