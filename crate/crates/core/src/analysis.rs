//! Lyapunov evaluators, bound envelopes, the lemma suite and trace fitting.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::compression::{acute_angle_margin, verify_contraction, Compressor, CompressorKind, CompressorSpec};
use crate::ef_td::{ef_td_step, nominal_delta, AgentState, ProjectionSpec, Scratch};
use crate::env_model::{td_direction_into, DataTuple, MarkovSampler, PreparedEnvironment, TupleSampler};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, derived_rng, SimRng, Stream};
use crate::trace::Trace;
use crate::vecops::{dot, norm, norm_sq, sub};

/// Relative slack used by every inequality in the lemma suite.
pub const LEMMA_SLACK: f64 = 1e-9;

/// `ψ = ‖θ + αe − θ*‖² + α²‖e‖²`.
pub fn lyapunov_psi(theta: &[f64], e: &[f64], alpha: f64, theta_star: &[f64]) -> f64 {
    let mut d = 0.0;
    for ((t, e), s) in theta.iter().zip(e).zip(theta_star) {
        let x = t + alpha * e - s;
        d += x * x;
    }
    d + alpha * alpha * norm_sq(e)
}

/// `C = 20δ/(1−γ)`.
pub fn xi_constant(delta: f64, gamma: f64) -> f64 {
    20.0 * delta / (1.0 - gamma)
}

/// `‖θ + αē − θ*‖² + Cα³·energy` with `energy = (1/M) Σ‖e_i‖²`.
pub fn xi_from_parts(theta: &[f64], e_bar: &[f64], energy: f64, alpha: f64, delta: f64, gamma: f64, theta_star: &[f64]) -> f64 {
    let mut d = 0.0;
    for ((t, e), s) in theta.iter().zip(e_bar).zip(theta_star) {
        let x = t + alpha * e - s;
        d += x * x;
    }
    d + xi_constant(delta, gamma) * alpha.powi(3) * energy
}

/// Single-trial fleet Lyapunov value.
pub fn lyapunov_xi(theta: &[f64], e_list: &[Vec<f64>], alpha: f64, delta: f64, gamma: f64, theta_star: &[f64]) -> f64 {
    let k = theta.len();
    let m = e_list.len().max(1) as f64;
    let mut e_bar = vec![0.0; k];
    let mut energy = 0.0;
    for e in e_list {
        for (b, v) in e_bar.iter_mut().zip(e) {
            *b += v;
        }
        energy += norm_sq(e);
    }
    e_bar.iter_mut().for_each(|v| *v /= m);
    xi_from_parts(theta, &e_bar, energy / m, alpha, delta, gamma, theta_star)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundKind {
    /// Mean path.
    MeanPath,
    /// I.i.d. sampling.
    Iid,
    /// Markov sampling with projection.
    MarkovProjected,
    /// Nonlinear maps.
    Nonlinear,
    /// Multiple agents, weighted average iterate.
    MultiAgent,
}

/// Inputs of a bound curve. Unknown order constants default to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeParams {
    pub alpha: f64,
    pub delta: f64,
    pub gamma: f64,
    pub omega: f64,
    pub beta: f64,
    pub tau: f64,
    pub g: f64,
    pub sigma_sq: f64,
    pub m: f64,
    /// `‖θ₀ − θ*‖²`.
    pub initial_error: f64,
    /// Transient constant; `None` uses `α²δ²G² + G²`.
    pub c1: Option<f64>,
    /// Rate constant: 1024 for the mean path, 2048 for i.i.d. sampling.
    pub rate_constant: f64,
    pub big_o: f64,
}

impl EnvelopeParams {
    pub fn new(kind: BoundKind) -> Self {
        Self {
            alpha: 0.0,
            delta: 1.0,
            gamma: 0.5,
            omega: 1.0,
            beta: 1.0,
            tau: 0.0,
            g: 1.0,
            sigma_sq: 0.0,
            m: 1.0,
            initial_error: 1.0,
            c1: None,
            rate_constant: if kind == BoundKind::Iid { 2048.0 } else { 1024.0 },
            big_o: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundEnvelope {
    pub kind: BoundKind,
    pub params: EnvelopeParams,
}

impl BoundEnvelope {
    pub fn new(kind: BoundKind, params: EnvelopeParams) -> Self {
        Self { kind, params }
    }

    fn c1(&self) -> f64 {
        let p = &self.params;
        p.c1.unwrap_or(p.big_o * (p.alpha * p.alpha * p.delta * p.delta * p.g * p.g + p.g * p.g))
    }

    /// Per-step factor of the decaying term.
    pub fn rate(&self) -> f64 {
        let p = &self.params;
        match self.kind {
            BoundKind::MeanPath | BoundKind::Iid => 1.0 - (1.0 - p.gamma).powi(2) * p.omega / (p.rate_constant * p.delta),
            BoundKind::MarkovProjected => 1.0 - p.alpha * p.omega * (1.0 - p.gamma),
            BoundKind::Nonlinear => 1.0 - p.alpha * p.beta,
            BoundKind::MultiAgent => (-(p.omega * (1.0 - p.gamma).powi(2)) / (p.rate_constant * p.delta)).exp(),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let p = &self.params;
        let rate = self.rate();
        match self.kind {
            BoundKind::MeanPath => 2.0 * rate.powf(t) * p.initial_error,
            BoundKind::Iid => 2.0 * rate.powf(t) * p.initial_error + p.big_o * p.sigma_sq / p.omega,
            BoundKind::MarkovProjected => {
                let floor = p.big_o * p.alpha * p.tau * p.delta.powi(2) * p.g.powi(2) / (p.omega * (1.0 - p.gamma));
                self.c1() * rate.powf((t - p.tau).max(0.0)) + floor
            }
            BoundKind::Nonlinear => {
                let floor = p.big_o * p.alpha * p.tau * p.delta.powi(2) * p.g.powi(2) / p.beta;
                self.c1() * rate.powf((t - p.tau).max(0.0)) + floor
            }
            BoundKind::MultiAgent => {
                let one_g = (1.0 - p.gamma).powi(2);
                let tt = t + 1.0;
                p.big_o
                    * (p.initial_error * rate.powf(t)
                        + p.sigma_sq / (p.omega * one_g * p.m * tt)
                        + p.delta.powi(2) * p.sigma_sq / (p.omega.powi(2) * one_g * one_g * tt * tt))
            }
        }
    }

    pub fn curve(&self, times: &[f64]) -> Vec<f64> {
        times.iter().map(|&t| self.eval(t)).collect()
    }
}

pub fn theorem_envelope(envelope: &BoundEnvelope, times: &[f64]) -> Vec<f64> {
    envelope.curve(times)
}

/// Outcome of one inequality over many random inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LemmaCheck {
    pub id: String,
    pub trials: usize,
    /// Smallest `(rhs − lhs) / max(1, |rhs|)` seen; negative beyond slack fails.
    pub worst_margin: f64,
    pub pass: bool,
    /// Input attaining the worst margin when the check fails.
    pub witness: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LemmaReport {
    pub checks: Vec<LemmaCheck>,
}

impl LemmaReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, id: &str) -> Option<&LemmaCheck> {
        self.checks.iter().find(|c| c.id == id)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<28} {:>8} {:>14} {}\n", "check", "trials", "worst_margin", "pass");
        for c in &self.checks {
            out.push_str(&format!("{:<28} {:>8} {:>14.6e} {}\n", c.id, c.trials, c.worst_margin, if c.pass { "yes" } else { "NO" }));
        }
        out
    }
}

struct Tracker {
    id: String,
    trials: usize,
    worst: f64,
    witness: Option<Vec<f64>>,
}

impl Tracker {
    fn new(id: impl Into<String>) -> Self {
        Self { id: id.into(), trials: 0, worst: f64::INFINITY, witness: None }
    }

    /// Records `lhs ≤ rhs`.
    fn le(&mut self, lhs: f64, rhs: f64, witness: impl FnOnce() -> Vec<f64>) {
        self.trials += 1;
        let margin = (rhs - lhs) / rhs.abs().max(1.0);
        if margin < self.worst || margin.is_nan() {
            self.worst = margin;
            self.witness = Some(witness());
        }
    }

    fn finish(self) -> LemmaCheck {
        let pass = self.worst >= -LEMMA_SLACK;
        LemmaCheck { id: self.id, trials: self.trials, worst_margin: self.worst, pass, witness: if pass { None } else { self.witness } }
    }
}

fn gaussian(rng: &mut SimRng, k: usize) -> Vec<f64> {
    let scale = 10f64.powf(rng.random_range(-3.0..3.0));
    (0..k).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Exact `E_π‖g(X, θ)‖²` as a quadratic in `θ`.
struct SecondMoment {
    k: usize,
    /// `E[AᵀA]`, row-major.
    ata: Vec<f64>,
    /// `E[Aᵀb]`.
    atb: Vec<f64>,
    /// `E‖b‖²`.
    bb: f64,
}

impl SecondMoment {
    /// With `g = A θ + b`, `A = φ(s)(γφ(s') − φ(s))ᵀ`, `b = r φ(s)`.
    fn new(prepared: &PreparedEnvironment) -> Self {
        let fmap = prepared.features();
        let k = fmap.k();
        let n = fmap.n();
        let pi = &prepared.steady.pi;
        let p = prepared.env.mrp.transition();
        let gamma = prepared.gamma();
        let mut ata = vec![0.0; k * k];
        let mut atb = vec![0.0; k];
        let mut bb = 0.0;
        let mut u = vec![0.0; k];
        for s in 0..n {
            let phi = fmap.row(s);
            let f2 = norm_sq(phi);
            let r = prepared.env.mrp.reward(s);
            for x in 0..n {
                let w = pi[s] * p[(s, x)];
                if w == 0.0 {
                    continue;
                }
                let next = fmap.row(x);
                for i in 0..k {
                    u[i] = gamma * next[i] - phi[i];
                }
                // AᵀA = ‖φ‖² u uᵀ, Aᵀb = r ‖φ‖² u.
                for i in 0..k {
                    for j in 0..k {
                        ata[i * k + j] += w * f2 * u[i] * u[j];
                    }
                    atb[i] += w * f2 * r * u[i];
                }
                bb += w * f2 * r * r;
            }
        }
        Self { k, ata, atb, bb }
    }

    fn eval(&self, theta: &[f64]) -> f64 {
        let k = self.k;
        let mut quad = 0.0;
        for i in 0..k {
            let mut row = 0.0;
            for j in 0..k {
                row += self.ata[i * k + j] * theta[j];
            }
            quad += theta[i] * row;
        }
        (quad + 2.0 * dot(&self.atb, theta) + self.bb).max(0.0)
    }
}

fn uniform_tuple(prepared: &PreparedEnvironment, rng: &mut SimRng) -> DataTuple {
    let n = prepared.env.n();
    let s = rng.random_range(0..n);
    DataTuple { s, s_next: rng.random_range(0..n), r: prepared.env.mrp.reward(s) }
}

/// Compressors whose contraction and angle properties are checked.
pub fn lemma_compressors(k: usize) -> Vec<CompressorSpec> {
    let mut specs = vec![CompressorSpec::identity(k)];
    let mut ks: Vec<usize> = vec![1, 2, k / 2, k];
    ks.retain(|&v| v >= 1 && v <= k);
    ks.dedup();
    for kk in ks {
        specs.push(CompressorSpec::top_k(kk, k).expect("valid k"));
    }
    specs.push(CompressorSpec::new(CompressorKind::ScaledSign, k).expect("valid dim"));
    specs
}

/// Runs every registered inequality on `trials` random inputs each.
pub fn verify_all_lemmas(prepared: &PreparedEnvironment, trials: usize, seed: u64) -> LemmaReport {
    let ss = &prepared.steady;
    let k = prepared.k();
    let gamma = prepared.gamma();
    let fmap = prepared.features();
    let star = ss.theta_star_slice();
    let omega = ss.omega;
    let mut checks = Vec::new();

    let mut rng = derived_rng(seed, Stream::Checker, 100);
    let mut l1_lo = Tracker::new("L1 lower");
    let mut l1_hi = Tracker::new("L1 upper");
    for _ in 0..trials {
        let a = gaussian(&mut rng, k);
        let b = gaussian(&mut rng, k);
        let dist = norm(&sub(&a, &b));
        let d_norm = ss.d_norm_sq(&a, &b).sqrt();
        l1_lo.le(omega.sqrt() * dist, d_norm, || [a.clone(), b.clone()].concat());
        l1_hi.le(d_norm, dist, || [a.clone(), b.clone()].concat());
    }
    checks.push(l1_lo.finish());
    checks.push(l1_hi.finish());

    let mut rng = derived_rng(seed, Stream::Checker, 101);
    let mut l2 = Tracker::new("L2");
    let mut l3 = Tracker::new("L3");
    let mut l4 = Tracker::new("L4 variance");
    let moment = SecondMoment::new(prepared);
    let mut g = vec![0.0; k];
    for _ in 0..trials {
        let delta = gaussian(&mut rng, k);
        let theta: Vec<f64> = star.iter().zip(&delta).map(|(s, d)| s + d).collect();
        ss.mean_path_direction_into(&theta, &mut g);
        let dn = ss.d_norm_sq(&theta, star);
        l2.le((1.0 - gamma) * dn, -dot(&delta, &g), || theta.clone());
        l3.le(norm(&g), 2.0 * dn.sqrt(), || theta.clone());
        l4.le(moment.eval(&theta), 2.0 * ss.sigma_sq + 8.0 * dn, || theta.clone());
    }
    checks.push(l2.finish());
    checks.push(l3.finish());
    checks.push(l4.finish());

    let mut rng = derived_rng(seed, Stream::Checker, 102);
    let mut l5 = Tracker::new("L5");
    let mut l6 = Tracker::new("L6");
    let mut g1 = vec![0.0; k];
    let mut g2 = vec![0.0; k];
    for i in 0..trials {
        let a = gaussian(&mut rng, k);
        let tuple = uniform_tuple(prepared, &mut rng);
        // Every other pair is separated along γφ(s') − φ(s), where the
        // sampled direction is most sensitive.
        let dir: Vec<f64> = if i % 2 == 0 {
            fmap.row(tuple.s_next).iter().zip(fmap.row(tuple.s)).map(|(q, p)| gamma * q - p).collect()
        } else {
            gaussian(&mut rng, k)
        };
        let b: Vec<f64> = a.iter().zip(&dir).map(|(x, d)| x + d).collect();
        let dist = norm(&dir);
        if dist == 0.0 {
            continue;
        }
        ss.mean_path_direction_into(&a, &mut g1);
        ss.mean_path_direction_into(&b, &mut g2);
        let mean_gap = norm(&sub(&g1, &g2));
        l5.le(mean_gap, dist, || [a.clone(), b.clone()].concat());
        td_direction_into(&tuple, fmap, gamma, &a, &mut g1);
        td_direction_into(&tuple, fmap, gamma, &b, &mut g2);
        let gap = norm(&sub(&g1, &g2));
        l6.le(gap, 2.0 * dist, || {
            let mut w = vec![tuple.s as f64, tuple.s_next as f64];
            w.extend(&a);
            w.extend(&b);
            w
        });
    }
    checks.push(l5.finish());
    checks.push(l6.finish());

    for spec in lemma_compressors(k) {
        let report = verify_contraction(&spec, trials, seed);
        checks.push(LemmaCheck {
            id: format!("contraction {}", spec.kind()),
            trials,
            worst_margin: report.bound.unwrap_or(0.0) - report.max_ratio,
            pass: report.pass,
            witness: None,
        });
        let mut rng = derived_rng(seed, Stream::Checker, 103);
        let mut comp = Compressor::new(spec, 0);
        let mut angle = Tracker::new(format!("angle {}", spec.kind()));
        let delta = nominal_delta(&spec);
        for _ in 0..trials {
            let x = gaussian(&mut rng, k);
            let m = acute_angle_margin(&mut comp, &x);
            let rhs = norm_sq(&x) / (2.0 * delta);
            angle.le(rhs, rhs + m, || x.clone());
        }
        checks.push(angle.finish());
    }

    checks.extend(memory_checks(prepared, trials, seed));
    LemmaReport { checks }
}

/// Step-wise memory contraction and the projected uniform bounds, along
/// Markov EF-TD trajectories.
fn memory_checks(prepared: &PreparedEnvironment, trials: usize, seed: u64) -> Vec<LemmaCheck> {
    let k = prepared.k();
    let gamma = prepared.gamma();
    let fmap = prepared.features();
    let star = prepared.steady.theta_star_slice();
    let mut l7 = Tracker::new("L7 memory");
    let mut l8 = Tracker::new("L8 uniform");
    let specs = lemma_compressors(k);
    let steps = trials.div_ceil(specs.len()).max(1);
    let g_radius = ProjectionSpec::default_radius(star);
    let proj = ProjectionSpec::ball(g_radius);
    let max_r = prepared.env.mrp.max_abs_reward();
    for (idx, spec) in specs.iter().enumerate() {
        let delta = nominal_delta(spec);
        let alpha = (1.0 - gamma) / 112.0;
        let mut sampler = MarkovSampler::new(prepared.tables.clone(), derive_seed(seed, Stream::Checker, 200 + idx as u64));
        let mut comp = Compressor::new(*spec, 0);
        let mut free = AgentState::zeros(k);
        let mut projected = AgentState::zeros(k);
        let mut scratch = Scratch::new(k);
        for _ in 0..steps {
            let x = sampler.next_tuple();
            let before = norm_sq(&free.e);
            ef_td_step(&mut free, &x, fmap, gamma, alpha, &mut comp, &ProjectionSpec::disabled(), &mut scratch);
            let g_sq = norm_sq(&scratch.g);
            l7.le(norm_sq(&free.e), (1.0 - 1.0 / (2.0 * delta)) * before + 2.0 * delta * g_sq, || free.theta.clone());

            if max_r <= 1.0 {
                let h = ef_td_step(&mut projected, &x, fmap, gamma, alpha, &mut comp, &proj, &mut scratch).to_vec();
                let b = delta * g_radius;
                l8.le(norm(&projected.e), 6.0 * b, || projected.e.clone());
                l8.le(norm(&h), 15.0 * b, || h.clone());
                l8.le(norm(&projected.e_proj), 15.0 * alpha * b, || projected.e_proj.clone());
            }
        }
    }
    vec![l7.finish(), l8.finish()]
}

/// Geometric rate and plateau of an error curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateEstimate {
    /// Per-unit-`t` contraction factor in `(0, 1]`.
    pub geometric_rate: f64,
    pub plateau: f64,
    /// Record indices `[start, end)` used by the fit.
    pub fit_window: (usize, usize),
}

pub const MIN_FIT_RECORDS: usize = 100;

/// Fits a trace's `E_t` column.
pub fn fit_rate_and_plateau(trace: &Trace) -> Result<RateEstimate> {
    if trace.diverged {
        return Err(Error::Diverged);
    }
    fit_series(&trace.times(), &trace.errors())
}

/// Plateau is the mean of the last 10% of values; the rate is
/// `exp(slope)` of a least-squares line through `ln E` over the leading
/// records with `E ≥ 10 × plateau`.
pub fn fit_series(times: &[f64], values: &[f64]) -> Result<RateEstimate> {
    let n = values.len();
    if n < MIN_FIT_RECORDS || times.len() != n {
        return Err(Error::Insufficient(format!("need at least {MIN_FIT_RECORDS} records, got {n}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged);
    }
    let tail = (n / 10).max(1);
    let plateau = values[n - tail..].iter().sum::<f64>() / tail as f64;
    let end = values.iter().position(|&v| !(v >= 10.0 * plateau && v > 0.0)).unwrap_or(n);
    if end < 2 {
        return Ok(RateEstimate { geometric_rate: 1.0, plateau, fit_window: (0, end) });
    }
    let xs = &times[..end];
    let ys: Vec<f64> = values[..end].iter().map(|v| v.ln()).collect();
    let mx = xs.iter().sum::<f64>() / end as f64;
    let my = ys.iter().sum::<f64>() / end as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    Ok(RateEstimate { geometric_rate: slope.exp().min(1.0), plateau, fit_window: (0, end) })
}
