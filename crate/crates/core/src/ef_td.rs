//! Single-agent kernels and the trajectory runner.
//!
//! EF-TD keeps a memory `e` of everything the compressor dropped:
//!
//! ```text
//! h_t     = Q(e_{t-1} + g_t(θ_t))
//! θ_{t+1} = θ_t + α h_t            (or Π_B(θ_t + α h_t) when projecting)
//! e_t     = e_{t-1} + g_t(θ_t) − h_t
//! ```
//!
//! With the identity compressor the memory stays zero and the recursion is
//! plain TD(0), bit for bit.

use serde::{Deserialize, Serialize};

use crate::compression::{Compressor, CompressorSpec, Delta};
use crate::env_model::{
    td_direction_into, DataTuple, FeatureMap, IidSampler, MarkovSampler, PreparedEnvironment, SteadyState,
    TupleSampler,
};
use crate::error::{Error, Result};
use crate::nonlinear_sa::UpdateMap;
use crate::rng::{derive_seed, Stream};
use crate::trace::{Trace, TraceMeta, TraceRecord, DIVERGENCE_THRESHOLD};
use crate::vecops::{dist_sq, norm, norm_sq};

pub const DEFAULT_VALUE_BITS: u32 = 32;

/// Mutable iterate of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub theta: Vec<f64>,
    /// Memory `e_{t-1}`; zero before the first step.
    pub e: Vec<f64>,
    pub t: u64,
    /// Last projection error `e_{p,t}`; zero when projection is off.
    pub e_proj: Vec<f64>,
}

impl AgentState {
    pub fn new(theta0: Vec<f64>) -> Self {
        let k = theta0.len();
        Self { theta: theta0, e: vec![0.0; k], t: 0, e_proj: vec![0.0; k] }
    }

    pub fn zeros(k: usize) -> Self {
        Self::new(vec![0.0; k])
    }

    pub fn k(&self) -> usize {
        self.theta.len()
    }

    /// `θ̃_t = θ_t + α e_{t-1}`.
    pub fn perturbed_iterate(&self, alpha: f64) -> Vec<f64> {
        self.theta.iter().zip(&self.e).map(|(t, e)| t + alpha * e).collect()
    }
}

/// Euclidean projection onto the ball of radius `G` around the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub enabled: bool,
    pub radius: f64,
}

impl ProjectionSpec {
    pub fn disabled() -> Self {
        Self { enabled: false, radius: f64::INFINITY }
    }

    pub fn ball(radius: f64) -> Self {
        Self { enabled: true, radius }
    }

    /// `G = max(1, 2‖θ*‖ + 1)`.
    pub fn default_radius(theta_star: &[f64]) -> f64 {
        (2.0 * norm(theta_star) + 1.0).max(1.0)
    }

    /// The ball must contain `θ*`.
    pub fn check_contains(&self, theta_star: &[f64]) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config(format!("projection radius must be positive, got {}", self.radius)));
        }
        let r = norm(theta_star);
        if r >= self.radius {
            return Err(Error::Config(format!("projection radius {} does not contain θ* (‖θ*‖ = {r})", self.radius)));
        }
        Ok(())
    }

    #[inline]
    pub fn project(&self, v: &mut [f64]) {
        if !self.enabled {
            return;
        }
        let n = norm(v);
        if n > self.radius {
            let scale = self.radius / n;
            v.iter_mut().for_each(|x| *x *= scale);
        }
    }
}

/// Reusable per-step buffers.
#[derive(Debug, Clone)]
pub struct Scratch {
    /// Update direction `g_t(θ_t)` of the current step.
    pub g: Vec<f64>,
    /// Transmitted direction `h_t`.
    pub h: Vec<f64>,
    p: Vec<f64>,
}

impl Scratch {
    pub fn new(k: usize) -> Self {
        Self { g: vec![0.0; k], h: vec![0.0; k], p: vec![0.0; k] }
    }
}

/// `h = Q(e + g)`, `e ← e + g − h`. Reads the direction from `scratch.g`.
#[inline]
pub fn compress_with_feedback(e: &mut [f64], compressor: &mut Compressor, scratch: &mut Scratch) {
    for ((p, e), g) in scratch.p.iter_mut().zip(e.iter()).zip(&scratch.g) {
        *p = e + g;
    }
    compressor.apply(&scratch.p, &mut scratch.h);
    for ((e, p), h) in e.iter_mut().zip(&scratch.p).zip(&scratch.h) {
        *e = p - h;
    }
}

/// `θ ← Π(θ + α h)`, recording `e_p = Π(θ + αh) − (θ + αh)`.
#[inline]
pub fn apply_update(state: &mut AgentState, h: &[f64], alpha: f64, proj: &ProjectionSpec) {
    for (t, h) in state.theta.iter_mut().zip(h) {
        *t += alpha * h;
    }
    if proj.enabled {
        let before = state.theta.clone();
        proj.project(&mut state.theta);
        for ((ep, after), b) in state.e_proj.iter_mut().zip(&state.theta).zip(&before) {
            *ep = after - b;
        }
    }
    state.t += 1;
}

/// EF step for whatever direction is already in `scratch.g`.
#[inline]
pub fn ef_step_with_direction(
    state: &mut AgentState,
    alpha: f64,
    compressor: &mut Compressor,
    proj: &ProjectionSpec,
    scratch: &mut Scratch,
) {
    compress_with_feedback(&mut state.e, compressor, scratch);
    apply_update(state, &scratch.h, alpha, proj);
}

/// `θ ← θ + α g(X, θ)`. The direction is left in `scratch.g` and `scratch.h`.
pub fn td0_step(state: &mut AgentState, tuple: &DataTuple, fmap: &FeatureMap, gamma: f64, alpha: f64, scratch: &mut Scratch) {
    td_direction_into(tuple, fmap, gamma, &state.theta, &mut scratch.g);
    scratch.h.copy_from_slice(&scratch.g);
    apply_update(state, &scratch.g, alpha, &ProjectionSpec::disabled());
}

/// One EF-TD step. Returns `h_t`.
#[allow(clippy::too_many_arguments)]
pub fn ef_td_step<'s>(
    state: &mut AgentState,
    tuple: &DataTuple,
    fmap: &FeatureMap,
    gamma: f64,
    alpha: f64,
    compressor: &mut Compressor,
    proj: &ProjectionSpec,
    scratch: &'s mut Scratch,
) -> &'s [f64] {
    td_direction_into(tuple, fmap, gamma, &state.theta, &mut scratch.g);
    ef_step_with_direction(state, alpha, compressor, proj, scratch);
    &scratch.h
}

/// EF-TD driven by the exact mean-path direction `ḡ(θ_t)`.
pub fn mean_path_ef_td_step(
    state: &mut AgentState,
    ss: &SteadyState,
    alpha: f64,
    compressor: &mut Compressor,
    scratch: &mut Scratch,
) {
    ss.mean_path_direction_into(&state.theta, &mut scratch.g);
    ef_step_with_direction(state, alpha, compressor, &ProjectionSpec::disabled(), scratch);
}

/// `θ ← θ + α Q(g(X, θ))` with no memory.
pub fn no_feedback_ablation_step(
    state: &mut AgentState,
    tuple: &DataTuple,
    fmap: &FeatureMap,
    gamma: f64,
    alpha: f64,
    compressor: &mut Compressor,
    scratch: &mut Scratch,
) {
    td_direction_into(tuple, fmap, gamma, &state.theta, &mut scratch.g);
    compressor.apply(&scratch.g, &mut scratch.h);
    apply_update(state, &scratch.h, alpha, &ProjectionSpec::disabled());
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Td0,
    EfTd,
    EfTdNofb,
    EfSa,
    MultiAgent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    MeanPath,
    Iid,
    Markov,
}

/// Step size prescribed by the proofs for each observation model.
///
/// Mean path `(1−γ)/(128δ)`, i.i.d. `(1−γ)/(256δ)`, Markov
/// `min((1−γ)/112, user)`. A non-contractive operator is treated as `δ = K`.
pub fn theorem_default_alpha(sampler: SamplerKind, gamma: f64, delta: f64, user_cap: Option<f64>) -> f64 {
    match sampler {
        SamplerKind::MeanPath => (1.0 - gamma) / (128.0 * delta),
        SamplerKind::Iid => (1.0 - gamma) / (256.0 * delta),
        SamplerKind::Markov => {
            let a = (1.0 - gamma) / 112.0;
            user_cap.map_or(a, |u| a.min(u))
        }
    }
}

/// Nominal `δ` for step-size and metadata purposes.
pub fn nominal_delta(spec: &CompressorSpec) -> f64 {
    match spec.delta() {
        Delta::NonContractive => spec.dim() as f64,
        d => d.value().unwrap(),
    }
}

/// Fully resolved single-agent run.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub algorithm: Algorithm,
    pub sampler: SamplerKind,
    pub compressor: CompressorSpec,
    pub alpha: f64,
    pub steps: u64,
    pub record_every: u64,
    pub projection: ProjectionSpec,
    pub theta0: Option<Vec<f64>>,
    pub seed: u64,
    pub value_bits: u32,
    pub config_hash: String,
}

impl RunSpec {
    pub fn new(algorithm: Algorithm, sampler: SamplerKind, compressor: CompressorSpec, alpha: f64, steps: u64) -> Self {
        Self {
            algorithm,
            sampler,
            compressor,
            alpha,
            steps,
            record_every: (steps / 100).max(1),
            projection: ProjectionSpec::disabled(),
            theta0: None,
            seed: 0,
            value_bits: DEFAULT_VALUE_BITS,
            config_hash: String::new(),
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if self.compressor.dim() != k {
            return Err(Error::DimensionMismatch { expected: k, got: self.compressor.dim() });
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be >= 1".into()));
        }
        if let Some(t0) = &self.theta0 {
            if t0.len() != k {
                return Err(Error::DimensionMismatch { expected: k, got: t0.len() });
            }
        }
        if self.algorithm == Algorithm::MultiAgent {
            return Err(Error::Config("multi_agent runs go through the multi-agent runner".into()));
        }
        Ok(())
    }
}

enum Sampler {
    Iid(IidSampler),
    Markov(MarkovSampler),
    None,
}

impl Sampler {
    #[inline]
    fn next(&mut self) -> Option<DataTuple> {
        match self {
            Sampler::Iid(s) => Some(s.next_tuple()),
            Sampler::Markov(s) => Some(s.next_tuple()),
            Sampler::None => None,
        }
    }
}

/// Sampler seed for a given trial.
pub fn trial_sampler_seed(master: u64, trial: usize) -> u64 {
    derive_seed(master, Stream::Trial, trial as u64)
}

pub fn trial_compressor_seed(master: u64, trial: usize) -> u64 {
    derive_seed(master, Stream::RandK, trial as u64)
}

/// `ψ = ‖θ + αe − θ*‖² + α²‖e‖²`.
#[inline]
fn psi(state: &AgentState, alpha: f64, theta_star: &[f64]) -> f64 {
    let mut d = 0.0;
    for ((t, e), s) in state.theta.iter().zip(&state.e).zip(theta_star) {
        let x = t + alpha * e - s;
        d += x * x;
    }
    d + alpha * alpha * norm_sq(&state.e)
}

/// Runs one trial of a single-agent experiment.
///
/// `map` is required for [`Algorithm::EfSa`]; its `θ*` then replaces the
/// TD fixed point in every recorded error.
pub fn run_single_agent(
    prepared: &PreparedEnvironment,
    spec: &RunSpec,
    trial: usize,
    map: Option<&dyn UpdateMap>,
) -> Result<Trace> {
    let k = prepared.k();
    spec.validate(k)?;
    if spec.algorithm == Algorithm::EfSa && map.is_none() {
        return Err(Error::Config("ef_sa requires an update map".into()));
    }
    let ss = &prepared.steady;
    let fmap = prepared.features();
    let gamma = prepared.gamma();
    let theta_star: Vec<f64> = match (spec.algorithm, map) {
        (Algorithm::EfSa, Some(m)) => m.theta_star().to_vec(),
        _ => ss.theta_star.iter().copied().collect(),
    };
    spec.projection.check_contains(&theta_star)?;

    let mut sampler = match spec.sampler {
        SamplerKind::MeanPath => Sampler::None,
        SamplerKind::Iid => Sampler::Iid(IidSampler::new(prepared.tables.clone(), trial_sampler_seed(spec.seed, trial))),
        SamplerKind::Markov => {
            Sampler::Markov(MarkovSampler::new(prepared.tables.clone(), trial_sampler_seed(spec.seed, trial)))
        }
    };
    let transmitted = match spec.algorithm {
        Algorithm::Td0 => CompressorSpec::identity(k),
        _ => spec.compressor,
    };
    let bits_per_step = transmitted.bit_cost(spec.value_bits);
    let mut compressor = Compressor::new(spec.compressor, trial_compressor_seed(spec.seed, trial));
    let mut state = AgentState::new(spec.theta0.clone().unwrap_or_else(|| vec![0.0; k]));
    let mut scratch = Scratch::new(k);
    let alpha = spec.alpha;

    let mut trace = Trace::new(TraceMeta {
        config_hash: spec.config_hash.clone(),
        seed: spec.seed,
        trial,
        alpha,
        delta: spec.compressor.delta().value(),
    });
    let mut h_norm = 0.0;
    let mut bits: u64 = 0;

    let record = |state: &AgentState, h_norm: f64, bits: u64, trace: &mut Trace| -> bool {
        let error_sq = dist_sq(&state.theta, &theta_star);
        trace.records.push(TraceRecord {
            t: state.t,
            error_sq,
            d_norm_err: ss.d_norm_sq(&state.theta, &theta_star),
            psi: psi(state, alpha, &theta_star),
            e_norm: norm(&state.e),
            h_norm,
            eproj_norm: norm(&state.e_proj),
            bits,
            fleet: None,
        });
        error_sq <= DIVERGENCE_THRESHOLD
    };

    if !record(&state, h_norm, bits, &mut trace) {
        trace.diverged = true;
        return Ok(trace);
    }
    for step in 1..=spec.steps {
        let tuple = sampler.next();
        match (tuple, map) {
            (Some(x), Some(m)) if spec.algorithm == Algorithm::EfSa => m.eval(&x, &state.theta, &mut scratch.g),
            (Some(x), _) => td_direction_into(&x, fmap, gamma, &state.theta, &mut scratch.g),
            (None, Some(m)) if spec.algorithm == Algorithm::EfSa => m.mean_eval(&state.theta, &mut scratch.g),
            (None, _) => ss.mean_path_direction_into(&state.theta, &mut scratch.g),
        }
        match spec.algorithm {
            Algorithm::Td0 => {
                scratch.h.copy_from_slice(&scratch.g);
                apply_update(&mut state, &scratch.g, alpha, &spec.projection);
            }
            Algorithm::EfTd | Algorithm::EfSa => {
                ef_step_with_direction(&mut state, alpha, &mut compressor, &spec.projection, &mut scratch);
            }
            Algorithm::EfTdNofb => {
                compressor.apply(&scratch.g, &mut scratch.h);
                apply_update(&mut state, &scratch.h, alpha, &spec.projection);
            }
            Algorithm::MultiAgent => unreachable!("rejected by validate"),
        }
        bits += bits_per_step;
        if step % spec.record_every == 0 || step == spec.steps {
            h_norm = norm(&scratch.h);
            if !record(&state, h_norm, bits, &mut trace) {
                trace.diverged = true;
                break;
            }
        } else if step % 1024 == 0 && !(dist_sq(&state.theta, &theta_star) <= DIVERGENCE_THRESHOLD) {
            h_norm = norm(&scratch.h);
            record(&state, h_norm, bits, &mut trace);
            trace.diverged = true;
            break;
        }
    }
    Ok(trace)
}
