//! Round-synchronous simulation of `M` agents sharing one server model.
//!
//! Every round the server broadcasts `θ_t`; agent `i` draws a private i.i.d.
//! tuple, compresses `e_{i,t-1} + g_{i,t}(θ_t)` and keeps the residual. The
//! server applies `θ_{t+1} = θ_t + α (1/M) Σ h_{i,t}`, summing in ascending
//! agent order.

use crate::analysis::xi_from_parts;
use crate::compression::{Compressor, CompressorSpec};
use crate::ef_td::{compress_with_feedback, nominal_delta, trial_sampler_seed, Scratch, DEFAULT_VALUE_BITS};
use crate::env_model::{td_direction_into, FeatureMap, IidSampler, PreparedEnvironment, SamplingTables, TupleSampler};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Stream};
use crate::trace::{FleetColumns, Trace, TraceMeta, TraceRecord, DIVERGENCE_THRESHOLD};
use crate::vecops::{dist_sq, norm, norm_sq};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub theta: Vec<f64>,
    pub t: u64,
}

impl ServerState {
    pub fn new(theta0: Vec<f64>) -> Self {
        Self { theta: theta0, t: 0 }
    }
}

/// Private memories, samplers and compressors of all agents.
#[derive(Debug)]
pub struct FleetState {
    /// `e_{i,t-1}` per agent.
    pub memories: Vec<Vec<f64>>,
    samplers: Vec<IidSampler>,
    compressors: Vec<Compressor>,
}

/// Seed of agent `i`'s sample stream within a trial.
pub fn agent_sampler_seed(trial_seed: u64, agent: usize) -> u64 {
    derive_seed(trial_seed, Stream::Agent, agent as u64)
}

pub fn agent_compressor_seed(trial_seed: u64, agent: usize) -> u64 {
    derive_seed(trial_seed, Stream::RandK, agent as u64)
}

impl FleetState {
    pub fn new(m: usize, tables: &Arc<SamplingTables>, spec: CompressorSpec, trial_seed: u64) -> Self {
        let k = spec.dim();
        Self {
            memories: vec![vec![0.0; k]; m],
            samplers: (0..m).map(|i| IidSampler::new(tables.clone(), agent_sampler_seed(trial_seed, i))).collect(),
            compressors: (0..m).map(|i| Compressor::new(spec, agent_compressor_seed(trial_seed, i))).collect(),
        }
    }

    pub fn m(&self) -> usize {
        self.memories.len()
    }

    /// `(1/M) Σ ‖e_i‖²`.
    pub fn memory_energy(&self) -> f64 {
        self.memories.iter().map(|e| norm_sq(e)).sum::<f64>() / self.m() as f64
    }

    /// `ē = (1/M) Σ e_i`.
    pub fn mean_memory(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.memories[0].len()];
        for e in &self.memories {
            for (o, v) in out.iter_mut().zip(e) {
                *o += v;
            }
        }
        let m = self.m() as f64;
        out.iter_mut().for_each(|o| *o /= m);
        out
    }
}

/// What one round produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// `h̄_t = (1/M) Σ h_{i,t}`.
    pub h_bar: Vec<f64>,
    /// `(1/M) Σ g_{i,t}(θ_t)`.
    pub g_bar: Vec<f64>,
    pub uplink_bits: u64,
}

/// Reusable buffers for [`multi_agent_round`].
#[derive(Debug, Clone)]
pub struct RoundScratch {
    agent: Scratch,
    h_sum: Vec<f64>,
    g_sum: Vec<f64>,
}

impl RoundScratch {
    pub fn new(k: usize) -> Self {
        Self { agent: Scratch::new(k), h_sum: vec![0.0; k], g_sum: vec![0.0; k] }
    }
}

/// One synchronous round. Returns `‖h̄_t‖`; the averaged directions are left
/// in `scratch` and can be read with [`round_record`].
pub fn multi_agent_round(
    server: &mut ServerState,
    fleet: &mut FleetState,
    fmap: &FeatureMap,
    gamma: f64,
    alpha: f64,
    scratch: &mut RoundScratch,
) -> f64 {
    scratch.h_sum.iter_mut().for_each(|v| *v = 0.0);
    scratch.g_sum.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..fleet.m() {
        let tuple = fleet.samplers[i].next_tuple();
        td_direction_into(&tuple, fmap, gamma, &server.theta, &mut scratch.agent.g);
        compress_with_feedback(&mut fleet.memories[i], &mut fleet.compressors[i], &mut scratch.agent);
        for ((hs, gs), (h, g)) in scratch.h_sum.iter_mut().zip(scratch.g_sum.iter_mut()).zip(scratch.agent.h.iter().zip(&scratch.agent.g)) {
            *hs += h;
            *gs += g;
        }
    }
    let m = fleet.m() as f64;
    scratch.h_sum.iter_mut().for_each(|v| *v /= m);
    scratch.g_sum.iter_mut().for_each(|v| *v /= m);
    for (t, h) in server.theta.iter_mut().zip(&scratch.h_sum) {
        *t += alpha * h;
    }
    server.t += 1;
    norm(&scratch.h_sum)
}

/// Copies the last round's averaged directions out of `scratch`.
pub fn round_record(scratch: &RoundScratch, m: usize, spec: &CompressorSpec, value_bits: u32) -> RoundRecord {
    RoundRecord { h_bar: scratch.h_sum.clone(), g_bar: scratch.g_sum.clone(), uplink_bits: m as u64 * spec.bit_cost(value_bits) }
}

/// Geometric weights `w_t = (1−αA)^{−(t+1)}` for the averaged iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AveragingSpec {
    pub a: f64,
    pub alpha: f64,
}

impl AveragingSpec {
    /// `A = ω(1−γ)/8`.
    pub fn default_a(omega: f64, gamma: f64) -> f64 {
        omega * (1.0 - gamma) / 8.0
    }

    pub fn new(a: f64, alpha: f64) -> Result<Self> {
        if !(a >= 0.0 && alpha > 0.0 && alpha * a < 1.0) {
            return Err(Error::Config(format!("averaging needs 0 <= alpha*A < 1, got alpha={alpha}, A={a}")));
        }
        Ok(Self { a, alpha })
    }

    /// `q = 1/(1−αA)`, the ratio of consecutive weights.
    pub fn ratio(&self) -> f64 {
        1.0 / (1.0 - self.alpha * self.a)
    }
}

/// Streaming `θ̄_T = Σ w̄_t θ_t` that never forms the raw weights.
///
/// With `ρ_T = w_T / W_T`, `ρ_0 = 1` and `1/ρ_T = 1 + 1/(q ρ_{T-1})`, the
/// average updates as `θ̄_T = (1−ρ_T) θ̄_{T-1} + ρ_T θ_T`.
#[derive(Debug, Clone)]
pub struct WeightedAverager {
    q: f64,
    rho: f64,
    average: Vec<f64>,
    count: u64,
}

impl WeightedAverager {
    pub fn new(spec: &AveragingSpec, k: usize) -> Self {
        Self { q: spec.ratio(), rho: 1.0, average: vec![0.0; k], count: 0 }
    }

    pub fn push(&mut self, theta: &[f64]) {
        self.rho = if self.count == 0 { 1.0 } else { 1.0 / (1.0 + 1.0 / (self.q * self.rho)) };
        let rho = self.rho;
        for (a, t) in self.average.iter_mut().zip(theta) {
            *a = (1.0 - rho) * *a + rho * t;
        }
        self.count += 1;
    }

    pub fn average(&self) -> &[f64] {
        &self.average
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

pub fn weighted_average_iterate(thetas: &[Vec<f64>], avg: &AveragingSpec) -> Result<Vec<f64>> {
    let first = thetas.first().ok_or_else(|| Error::InvalidArgument("empty iterate sequence".into()))?;
    let mut w = WeightedAverager::new(avg, first.len());
    for t in thetas {
        if t.len() != first.len() {
            return Err(Error::DimensionMismatch { expected: first.len(), got: t.len() });
        }
        w.push(t);
    }
    Ok(w.average)
}

/// Fully resolved multi-agent run.
#[derive(Debug, Clone)]
pub struct MultiAgentSpec {
    pub m: usize,
    pub compressor: CompressorSpec,
    pub alpha: f64,
    pub rounds: u64,
    pub record_every: u64,
    /// `A` for iterate averaging; `None` disables it.
    pub averaging: Option<f64>,
    pub theta0: Option<Vec<f64>>,
    pub seed: u64,
    pub value_bits: u32,
    pub config_hash: String,
}

impl MultiAgentSpec {
    pub fn new(m: usize, compressor: CompressorSpec, alpha: f64, rounds: u64) -> Self {
        Self {
            m,
            compressor,
            alpha,
            rounds,
            record_every: (rounds / 100).max(1),
            averaging: None,
            theta0: None,
            seed: 0,
            value_bits: DEFAULT_VALUE_BITS,
            config_hash: String::new(),
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("M must be >= 1".into()));
        }
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
        if let Some(a) = self.averaging {
            AveragingSpec::new(a, self.alpha)?;
        }
        Ok(())
    }
}

/// Step size `(1−γ)/(112δ)` under which the fleet Lyapunov function contracts.
pub fn multi_agent_default_alpha(gamma: f64, delta: f64) -> f64 {
    (1.0 - gamma) / (112.0 * delta)
}

/// Runs one trial. The `psi` column holds the single-trial `Ξ_t`.
pub fn run_multi_agent_experiment(prepared: &PreparedEnvironment, spec: &MultiAgentSpec, trial: usize) -> Result<Trace> {
    let k = prepared.k();
    spec.validate(k)?;
    let ss = &prepared.steady;
    let gamma = prepared.gamma();
    let theta_star = ss.theta_star_slice();
    let delta = nominal_delta(&spec.compressor);
    let trial_seed = trial_sampler_seed(spec.seed, trial);
    let mut server = ServerState::new(spec.theta0.clone().unwrap_or_else(|| vec![0.0; k]));
    let mut fleet = FleetState::new(spec.m, &prepared.tables, spec.compressor, trial_seed);
    let mut scratch = RoundScratch::new(k);
    let bits_per_round = spec.m as u64 * spec.compressor.bit_cost(spec.value_bits);
    let mut averager = match spec.averaging {
        Some(a) => Some(WeightedAverager::new(&AveragingSpec::new(a, spec.alpha)?, k)),
        None => None,
    };
    if let Some(av) = averager.as_mut() {
        av.push(&server.theta);
    }

    let mut trace = Trace::new(TraceMeta {
        config_hash: spec.config_hash.clone(),
        seed: spec.seed,
        trial,
        alpha: spec.alpha,
        delta: spec.compressor.delta().value(),
    });
    let record = |server: &ServerState, fleet: &FleetState, h_norm: f64, bits: u64, avg: Option<&WeightedAverager>, trace: &mut Trace| {
        let error_sq = dist_sq(&server.theta, theta_star);
        let ebar_vec = fleet.mean_memory();
        let energy = fleet.memory_energy();
        let d_norm_err = ss.d_norm_sq(&server.theta, theta_star);
        trace.records.push(TraceRecord {
            t: server.t,
            error_sq,
            d_norm_err,
            psi: xi_from_parts(&server.theta, &ebar_vec, energy, spec.alpha, delta, gamma, theta_star),
            e_norm: norm(&ebar_vec),
            h_norm,
            eproj_norm: 0.0,
            bits,
            fleet: Some(FleetColumns {
                m: fleet.m(),
                ebar: energy,
                uplink_bits_cum: bits,
                dnorm_avg_iterate: avg.map_or(d_norm_err, |a| ss.d_norm_sq(a.average(), theta_star)),
            }),
        });
        error_sq <= DIVERGENCE_THRESHOLD
    };

    let mut bits = 0u64;
    if !record(&server, &fleet, 0.0, bits, averager.as_ref(), &mut trace) {
        trace.diverged = true;
        return Ok(trace);
    }
    for step in 1..=spec.rounds {
        let h_norm = multi_agent_round(&mut server, &mut fleet, prepared.features(), gamma, spec.alpha, &mut scratch);
        bits += bits_per_round;
        if let Some(av) = averager.as_mut() {
            av.push(&server.theta);
        }
        let diverged_now = step % 256 == 0 && !(dist_sq(&server.theta, theta_star) <= DIVERGENCE_THRESHOLD);
        let due = step % spec.record_every == 0 || step == spec.rounds || diverged_now;
        if due && !record(&server, &fleet, h_norm, bits, averager.as_ref(), &mut trace) {
            trace.diverged = true;
            break;
        }
    }
    Ok(trace)
}

/// Mean of `‖(1/M) Σ g_i(θ*)‖²` over `rounds` independent rounds of i.i.d.
/// draws, which should equal `σ²/M`.
pub fn direction_variance_at_fixed_point(prepared: &PreparedEnvironment, m: usize, rounds: u64, seed: u64) -> f64 {
    let k = prepared.k();
    let theta_star = prepared.steady.theta_star_slice();
    let mut samplers: Vec<IidSampler> =
        (0..m).map(|i| IidSampler::new(prepared.tables.clone(), agent_sampler_seed(seed, i))).collect();
    let mut g = vec![0.0; k];
    let mut avg = vec![0.0; k];
    let mut total = 0.0;
    for _ in 0..rounds {
        avg.iter_mut().for_each(|v| *v = 0.0);
        for s in samplers.iter_mut() {
            td_direction_into(&s.next_tuple(), prepared.features(), prepared.gamma(), theta_star, &mut g);
            for (a, gi) in avg.iter_mut().zip(&g) {
                *a += gi;
            }
        }
        total += norm_sq(&avg) / (m * m) as f64;
    }
    total / rounds as f64
}
