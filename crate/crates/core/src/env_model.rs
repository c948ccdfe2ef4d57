//! Markov reward processes with linear value-function approximation.
//!
//! An [`Environment`] couples an [`Mrp`] (transition matrix, expected
//! rewards, discount) with a [`FeatureMap`]. [`steady_state_quantities`]
//! computes every exact quantity the learning algorithms are measured
//! against: the stationary distribution `π`, `Σ = ΦᵀDΦ`, its smallest
//! eigenvalue `ω`, the mean-path pair `(Ā, b̄)`, the fixed point `θ*` and the
//! noise level `σ² = E_π‖g(X, θ*)‖²`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derived_rng, rng_from_seed, SimRng, Stream};
use crate::vecops::{dot, norm_sq};

/// Tolerance on row sums of a stochastic matrix.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Smallest singular value of `Φ` accepted as full column rank.
pub const RANK_TOL: f64 = 1e-10;
pub const POWER_ITERATION_TOL: f64 = 1e-12;
pub const POWER_ITERATION_CAP: usize = 1_000_000;
pub const MIXING_TIME_CAP: usize = 100_000;

/// Markov reward process induced by a fixed policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Mrp {
    transition: DMatrix<f64>,
    rewards: DVector<f64>,
    gamma: f64,
}

impl Mrp {
    pub fn new(transition: DMatrix<f64>, rewards: DVector<f64>, gamma: f64) -> Result<Self> {
        let n = transition.nrows();
        if n < 2 || transition.ncols() != n {
            return Err(Error::InvalidEnvironment(format!(
                "transition matrix must be square with n >= 2, got {}x{}",
                transition.nrows(),
                transition.ncols()
            )));
        }
        if rewards.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: rewards.len() });
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidEnvironment(format!("gamma must lie in (0,1), got {gamma}")));
        }
        for s in 0..n {
            let row = transition.row(s);
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidEnvironment(format!("row {s} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidEnvironment(format!("row {s} sums to {sum}")));
            }
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidEnvironment("non-finite reward".into()));
        }
        Ok(Self { transition, rewards, gamma })
    }

    pub fn n(&self) -> usize {
        self.transition.nrows()
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn rewards(&self) -> &DVector<f64> {
        &self.rewards
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn reward(&self, s: usize) -> f64 {
        self.rewards[s]
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.rewards.iter().fold(0.0_f64, |m, r| m.max(r.abs()))
    }
}

/// `n × K` feature matrix stored row-major so that `φ(s)` is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    n: usize,
    k: usize,
    rows: Vec<f64>,
}

impl FeatureMap {
    /// Validates full column rank and `‖φ(s)‖ ≤ 1` for every state.
    pub fn new(n: usize, k: usize, rows: Vec<f64>) -> Result<Self> {
        let fmap = Self::new_unchecked(n, k, rows)?;
        let max_norm = fmap.max_row_norm();
        if max_norm > 1.0 + 1e-12 {
            return Err(Error::InvalidEnvironment(format!("feature row norm {max_norm} exceeds 1")));
        }
        let smin = fmap.smallest_singular_value();
        if !(smin > RANK_TOL) {
            return Err(Error::InvalidEnvironment(format!(
                "features are rank deficient (smallest singular value {smin:e})"
            )));
        }
        Ok(fmap)
    }

    /// Shape check only. Used for fault injection in the verification suite.
    pub fn new_unchecked(n: usize, k: usize, rows: Vec<f64>) -> Result<Self> {
        if k == 0 || n == 0 {
            return Err(Error::InvalidArgument("feature map needs n >= 1 and K >= 1".into()));
        }
        if rows.len() != n * k {
            return Err(Error::DimensionMismatch { expected: n * k, got: rows.len() });
        }
        if rows.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidEnvironment("non-finite feature entry".into()));
        }
        Ok(Self { n, k, rows })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.rows[s * self.k..(s + 1) * self.k]
    }

    pub fn row_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.rows[s * self.k..(s + 1) * self.k]
    }

    pub fn as_row_major(&self) -> &[f64] {
        &self.rows
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.k, &self.rows)
    }

    pub fn max_row_norm(&self) -> f64 {
        (0..self.n).map(|s| norm_sq(self.row(s)).sqrt()).fold(0.0, f64::max)
    }

    pub fn smallest_singular_value(&self) -> f64 {
        let sv = self.matrix().singular_values();
        sv.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `V̂_θ(s) = ⟨φ(s), θ⟩` for every state.
    pub fn values(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.n).map(|s| dot(self.row(s), theta)).collect()
    }
}

/// Observation `X_t = (s_t, s_{t+1}, r_t = R(s_t))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataTuple {
    pub s: usize,
    pub s_next: usize,
    pub r: f64,
}

/// Parameters of [`build_random_mrp`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomMrpParams {
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub gamma: f64,
    #[serde(default = "default_reward_range")]
    pub reward_range: (f64, f64),
    #[serde(default = "default_mixing_eps")]
    pub mixing_eps: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_reward_range() -> (f64, f64) {
    (0.0, 1.0)
}

fn default_mixing_eps() -> f64 {
    0.01
}

impl RandomMrpParams {
    pub fn new(n: usize, k: usize, gamma: f64, seed: u64) -> Self {
        Self { n, k, gamma, reward_range: default_reward_range(), mixing_eps: default_mixing_eps(), seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidArgument(format!("n must be >= 2, got {}", self.n)));
        }
        if self.k < 1 || self.k >= self.n {
            return Err(Error::InvalidArgument(format!("K must satisfy 1 <= K < n, got K={} n={}", self.k, self.n)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!("gamma must lie in (0,1), got {}", self.gamma)));
        }
        let (lo, hi) = self.reward_range;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!("degenerate reward range [{lo}, {hi}]")));
        }
        if !(self.mixing_eps >= 0.0 && self.mixing_eps < 1.0) {
            return Err(Error::InvalidArgument(format!("mixing_eps must lie in [0,1), got {}", self.mixing_eps)));
        }
        Ok(())
    }
}

/// Random MRP plus features.
///
/// Transition rows are symmetric Dirichlet(1) draws mixed with the uniform
/// distribution, `P = (1-ε)P_raw + ε/n`. Rewards are uniform on the reward
/// range. Features are i.i.d. standard normal scaled by the largest row
/// norm; rank-deficient draws are regenerated from a fresh sub-seed.
pub fn build_random_mrp(params: &RandomMrpParams) -> Result<(Mrp, FeatureMap)> {
    params.validate()?;
    let RandomMrpParams { n, k, gamma, reward_range: (lo, hi), mixing_eps, seed } = *params;

    let mut rng = derived_rng(seed, Stream::Transitions, 0);
    let mut p = DMatrix::<f64>::zeros(n, n);
    let uniform = mixing_eps / n as f64;
    for s in 0..n {
        let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        for (x, d) in draws.iter().enumerate() {
            p[(s, x)] = (1.0 - mixing_eps) * (d / total) + uniform;
        }
        // Renormalise to kill accumulated rounding in the row sum.
        let sum: f64 = p.row(s).iter().sum();
        for x in 0..n {
            p[(s, x)] /= sum;
        }
    }

    let mut rng = derived_rng(seed, Stream::Rewards, 0);
    let rewards = DVector::from_iterator(
        n,
        (0..n).map(|_| if lo == hi { lo } else { lo + (hi - lo) * rng.random::<f64>() }),
    );

    let mut attempt = 0_u64;
    let fmap = loop {
        let mut rng = derived_rng(seed, Stream::Features, attempt);
        let mut rows: Vec<f64> = (0..n * k).map(|_| StandardNormal.sample(&mut rng)).collect();
        let max_norm = rows.chunks(k).map(|r| norm_sq(r).sqrt()).fold(0.0, f64::max);
        if max_norm > 0.0 {
            rows.iter_mut().for_each(|x| *x /= max_norm);
            if let Ok(f) = FeatureMap::new(n, k, rows) {
                break f;
            }
        }
        attempt += 1;
        if attempt > 1000 {
            return Err(Error::InvalidEnvironment("could not draw full-rank features".into()));
        }
    };

    Ok((Mrp::new(p, rewards, gamma)?, fmap))
}

/// `‖πᵀP − πᵀ‖₁`.
pub fn stationarity_residual(mrp: &Mrp, pi: &DVector<f64>) -> f64 {
    let next = mrp.transition().tr_mul(pi);
    (next - pi).iter().map(|x| x.abs()).sum()
}

/// Stationary distribution by power iteration from the uniform vector.
pub fn stationary_distribution(mrp: &Mrp, tol: f64) -> Result<DVector<f64>> {
    stationary_distribution_capped(mrp, tol, POWER_ITERATION_CAP)
}

pub fn stationary_distribution_capped(mrp: &Mrp, tol: f64, cap: usize) -> Result<DVector<f64>> {
    let n = mrp.n();
    let pt = mrp.transition().transpose();
    let mut pi = DVector::from_element(n, 1.0 / n as f64);
    let mut residual = f64::INFINITY;
    for _ in 0..cap {
        let mut next = &pt * &pi;
        let total: f64 = next.iter().sum();
        next /= total;
        residual = (&next - &pi).iter().map(|x| x.abs()).sum();
        pi = next;
        if residual <= tol {
            return Ok(pi);
        }
    }
    Err(Error::NonConvergence { iterations: cap, residual })
}

/// Exact steady-state oracle bundle.
#[derive(Debug, Clone)]
pub struct SteadyState {
    pub pi: DVector<f64>,
    /// `Σ = ΦᵀDΦ`.
    pub sigma: DMatrix<f64>,
    /// `λ_min(Σ)`.
    pub omega: f64,
    /// `Ā = ΦᵀD(γP − I)Φ`.
    pub a_bar: DMatrix<f64>,
    /// `b̄ = −ΦᵀDR`.
    pub b_bar: DVector<f64>,
    pub theta_star: DVector<f64>,
    /// `E_π‖g(X, θ*)‖²` by enumeration over all transitions.
    pub sigma_sq: f64,
    /// Mixing time at the precision of a particular experiment, if computed.
    pub tau: Option<usize>,
}

pub fn steady_state_quantities(mrp: &Mrp, fmap: &FeatureMap) -> Result<SteadyState> {
    if fmap.n() != mrp.n() {
        return Err(Error::DimensionMismatch { expected: mrp.n(), got: fmap.n() });
    }
    let n = mrp.n();
    let pi = stationary_distribution(mrp, POWER_ITERATION_TOL)?;
    let phi = fmap.matrix();
    let d = DMatrix::from_diagonal(&pi);
    let phi_t_d = phi.transpose() * &d;
    let sigma = &phi_t_d * &phi;
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let omega = sigma.clone().symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);

    let gp_minus_i = mrp.transition() * mrp.gamma() - DMatrix::<f64>::identity(n, n);
    let a_bar = &phi_t_d * gp_minus_i * &phi;
    let b_bar = -(&phi_t_d * mrp.rewards());

    let theta_star = a_bar.clone().lu().solve(&b_bar).ok_or(Error::SingularMatrix)?;
    if theta_star.iter().any(|x| !x.is_finite()) {
        return Err(Error::SingularMatrix);
    }

    let values = &phi * &theta_star;
    let gamma = mrp.gamma();
    let p = mrp.transition();
    let mut sigma_sq = 0.0;
    for s in 0..n {
        let feat_sq = norm_sq(fmap.row(s));
        let mut inner = 0.0;
        for x in 0..n {
            let td = mrp.reward(s) + gamma * values[x] - values[s];
            inner += p[(s, x)] * td * td;
        }
        sigma_sq += pi[s] * inner * feat_sq;
    }

    Ok(SteadyState { pi, sigma, omega, a_bar, b_bar, theta_star, sigma_sq, tau: None })
}

impl SteadyState {
    pub fn k(&self) -> usize {
        self.theta_star.len()
    }

    pub fn theta_star_slice(&self) -> &[f64] {
        self.theta_star.as_slice()
    }

    /// `ḡ(θ) = Āθ − b̄`.
    pub fn mean_path_direction(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k()];
        self.mean_path_direction_into(theta, &mut out);
        out
    }

    pub fn mean_path_direction_into(&self, theta: &[f64], out: &mut [f64]) {
        let k = self.k();
        for i in 0..k {
            let mut acc = 0.0;
            for j in 0..k {
                acc += self.a_bar[(i, j)] * theta[j];
            }
            out[i] = acc - self.b_bar[i];
        }
    }

    /// `‖V̂_{θ₁} − V̂_{θ₂}‖²_D = (θ₁−θ₂)ᵀΣ(θ₁−θ₂)`.
    pub fn d_norm_sq(&self, a: &[f64], b: &[f64]) -> f64 {
        let k = self.k();
        let mut total = 0.0;
        for i in 0..k {
            let di = a[i] - b[i];
            let mut row = 0.0;
            for j in 0..k {
                row += self.sigma[(i, j)] * (a[j] - b[j]);
            }
            total += di * row;
        }
        total.max(0.0)
    }

    /// `‖V̂_θ − V̂_{θ*}‖²_D`.
    pub fn d_norm_err(&self, theta: &[f64]) -> f64 {
        self.d_norm_sq(theta, self.theta_star.as_slice())
    }

    /// `‖Āθ* − b̄‖₂`.
    pub fn fixed_point_residual(&self) -> f64 {
        (&self.a_bar * &self.theta_star - &self.b_bar).norm()
    }
}

/// `g(X, θ) = (r + γ⟨φ(s'),θ⟩ − ⟨φ(s),θ⟩) φ(s)`.
pub fn sample_td_direction(tuple: &DataTuple, fmap: &FeatureMap, gamma: f64, theta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; fmap.k()];
    td_direction_into(tuple, fmap, gamma, theta, &mut out);
    out
}

#[inline]
pub fn td_direction_into(tuple: &DataTuple, fmap: &FeatureMap, gamma: f64, theta: &[f64], out: &mut [f64]) {
    let phi = fmap.row(tuple.s);
    let phi_next = fmap.row(tuple.s_next);
    let td_error = tuple.r + gamma * dot(phi_next, theta) - dot(phi, theta);
    for (o, f) in out.iter_mut().zip(phi) {
        *o = td_error * f;
    }
}

/// An MRP, its features and the parameters that generated it.
#[derive(Debug, Clone)]
pub struct Environment {
    pub mrp: Mrp,
    pub features: FeatureMap,
    pub params: Option<RandomMrpParams>,
}

impl Environment {
    pub fn generate(params: &RandomMrpParams) -> Result<Self> {
        let (mrp, features) = build_random_mrp(params)?;
        Ok(Self { mrp, features, params: Some(*params) })
    }

    pub fn n(&self) -> usize {
        self.mrp.n()
    }

    pub fn k(&self) -> usize {
        self.features.k()
    }

    pub fn gamma(&self) -> f64 {
        self.mrp.gamma()
    }

    pub fn steady_state(&self) -> Result<SteadyState> {
        steady_state_quantities(&self.mrp, &self.features)
    }

    pub fn to_file(&self) -> EnvFile {
        let n = self.n();
        let p = self.mrp.transition();
        let params = self.params;
        EnvFile {
            n,
            k: self.k(),
            gamma: self.gamma(),
            transition: (0..n).map(|s| p.row(s).iter().copied().collect()).collect(),
            rewards: self.mrp.rewards().iter().copied().collect(),
            features: (0..n).map(|s| self.features.row(s).to_vec()).collect(),
            seed: params.map(|p| p.seed),
            mixing_eps: params.map(|p| p.mixing_eps),
            reward_range: params.map(|p| p.reward_range),
        }
    }

    pub fn from_file(file: &EnvFile) -> Result<Self> {
        let EnvFile { n, k, gamma, .. } = *file;
        if file.transition.len() != n || file.transition.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidEnvironment("P must be n rows of n entries".into()));
        }
        if file.features.len() != n || file.features.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidEnvironment("Phi must be n rows of K entries".into()));
        }
        if k >= n {
            return Err(Error::InvalidEnvironment(format!("K={k} must be < n={n}")));
        }
        let p = DMatrix::from_row_iterator(n, n, file.transition.iter().flatten().copied());
        let rewards = DVector::from_column_slice(&file.rewards);
        let mrp = Mrp::new(p, rewards, gamma)?;
        let features = FeatureMap::new(n, k, file.features.iter().flatten().copied().collect())?;
        let params = match (file.seed, file.mixing_eps, file.reward_range) {
            (Some(seed), Some(mixing_eps), Some(reward_range)) => {
                Some(RandomMrpParams { n, k, gamma, reward_range, mixing_eps, seed })
            }
            _ => None,
        };
        if let Some((lo, hi)) = file.reward_range {
            if mrp.rewards().iter().any(|&r| r < lo || r > hi) {
                return Err(Error::InvalidEnvironment("reward outside the declared reward_range".into()));
            }
        }
        Ok(Self { mrp, features, params })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: EnvFile = serde_json::from_str(text)?;
        Self::from_file(&file)
    }
}

/// On-disk environment document. Floats are written in shortest
/// round-trip form, so a load reproduces every bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvFile {
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub gamma: f64,
    #[serde(rename = "P")]
    pub transition: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub rewards: Vec<f64>,
    #[serde(rename = "Phi")]
    pub features: Vec<Vec<f64>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub mixing_eps: Option<f64>,
    #[serde(default)]
    pub reward_range: Option<(f64, f64)>,
}

/// Sidecar with the exact ground truth for an environment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthFile {
    pub pi: Vec<f64>,
    pub theta_star: Vec<f64>,
    pub omega: f64,
    pub sigma_sq: f64,
}

impl GroundTruthFile {
    pub fn from_steady_state(ss: &SteadyState) -> Self {
        Self {
            pi: ss.pi.iter().copied().collect(),
            theta_star: ss.theta_star.iter().copied().collect(),
            omega: ss.omega,
            sigma_sq: ss.sigma_sq,
        }
    }
}

/// Cumulative tables shared by all samplers of one environment.
#[derive(Debug)]
pub struct SamplingTables {
    n: usize,
    cumulative_rows: Vec<f64>,
    cumulative_pi: Vec<f64>,
    rewards: Vec<f64>,
}

fn cumulative(weights: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = weights
        .map(|w| {
            acc += w;
            acc
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = f64::INFINITY;
    }
    out
}

impl SamplingTables {
    pub fn new(mrp: &Mrp, pi: &DVector<f64>) -> Arc<Self> {
        let n = mrp.n();
        let p = mrp.transition();
        let mut cumulative_rows = Vec::with_capacity(n * n);
        for s in 0..n {
            cumulative_rows.extend(cumulative(p.row(s).iter().copied()));
        }
        Arc::new(Self {
            n,
            cumulative_rows,
            cumulative_pi: cumulative(pi.iter().copied()),
            rewards: mrp.rewards().iter().copied().collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn pick(table: &[f64], u: f64) -> usize {
        table.partition_point(|&c| c <= u).min(table.len() - 1)
    }

    #[inline]
    pub fn next_state(&self, s: usize, rng: &mut SimRng) -> usize {
        let row = &self.cumulative_rows[s * self.n..(s + 1) * self.n];
        Self::pick(row, rng.random::<f64>())
    }

    #[inline]
    pub fn stationary_state(&self, rng: &mut SimRng) -> usize {
        Self::pick(&self.cumulative_pi, rng.random::<f64>())
    }

    #[inline]
    pub fn reward(&self, s: usize) -> f64 {
        self.rewards[s]
    }
}

/// Environment plus its oracle bundle and sampling tables, built once per
/// experiment and shared read-only across trials.
#[derive(Debug, Clone)]
pub struct PreparedEnvironment {
    pub env: Environment,
    pub steady: SteadyState,
    pub tables: Arc<SamplingTables>,
}

impl PreparedEnvironment {
    pub fn new(env: Environment) -> Result<Self> {
        let steady = env.steady_state()?;
        let tables = SamplingTables::new(&env.mrp, &steady.pi);
        Ok(Self { env, steady, tables })
    }

    pub fn k(&self) -> usize {
        self.env.k()
    }

    pub fn gamma(&self) -> f64 {
        self.env.gamma()
    }

    pub fn features(&self) -> &FeatureMap {
        &self.env.features
    }
}

pub trait TupleSampler: Send {
    fn next_tuple(&mut self) -> DataTuple;
}

/// Single Markov trajectory; consecutive tuples overlap.
#[derive(Debug)]
pub struct MarkovSampler {
    tables: Arc<SamplingTables>,
    state: usize,
    rng: SimRng,
}

impl MarkovSampler {
    pub fn new(tables: Arc<SamplingTables>, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let state = rng.random_range(0..tables.n());
        Self { tables, state, rng }
    }

    pub fn current_state(&self) -> usize {
        self.state
    }
}

impl TupleSampler for MarkovSampler {
    #[inline]
    fn next_tuple(&mut self) -> DataTuple {
        let s = self.state;
        let s_next = self.tables.next_state(s, &mut self.rng);
        self.state = s_next;
        DataTuple { s, s_next, r: self.tables.reward(s) }
    }
}

/// `s ~ π`, `s' ~ P(s,·)`, independent across steps.
#[derive(Debug)]
pub struct IidSampler {
    tables: Arc<SamplingTables>,
    rng: SimRng,
}

impl IidSampler {
    pub fn new(tables: Arc<SamplingTables>, seed: u64) -> Self {
        Self { tables, rng: rng_from_seed(seed) }
    }
}

impl TupleSampler for IidSampler {
    #[inline]
    fn next_tuple(&mut self) -> DataTuple {
        let s = self.tables.stationary_state(&mut self.rng);
        let s_next = self.tables.next_state(s, &mut self.rng);
        DataTuple { s, s_next, r: self.tables.reward(s) }
    }
}

/// Amplification from distribution distance to direction distance,
/// `c_g = 2 + γ`.
pub fn mixing_amplification(gamma: f64) -> f64 {
    2.0 + gamma
}

/// `max_s ‖P^t(s,·) − π‖₁` for `t = 1, 2, …` until it reaches `eps / c_g`.
///
/// The ℓ₁ distance (twice the total variation) bounds
/// `‖E[g(X_t,θ)|X_0=s] − ḡ(θ)‖ / (‖θ‖+1)` up to the factor `1+γ` when rewards
/// are bounded by one, so dividing by `c_g = 2+γ` is conservative.
pub fn mixing_time(mrp: &Mrp, eps: f64) -> Result<usize> {
    mixing_time_capped(mrp, eps, MIXING_TIME_CAP)
}

pub fn mixing_time_capped(mrp: &Mrp, eps: f64, cap: usize) -> Result<usize> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("mixing precision must be positive, got {eps}")));
    }
    let pi = stationary_distribution(mrp, POWER_ITERATION_TOL)?;
    let threshold = eps / mixing_amplification(mrp.gamma());
    let p = mrp.transition();
    let mut power = p.clone();
    for t in 1..=cap {
        if max_l1_distance(&power, &pi) <= threshold {
            return Ok(t);
        }
        power = &power * p;
    }
    Err(Error::MixingCapExceeded { cap })
}

/// `max_s Σ_x |M(s,x) − π(x)|`.
pub fn max_l1_distance(m: &DMatrix<f64>, pi: &DVector<f64>) -> f64 {
    (0..m.nrows())
        .map(|s| m.row(s).iter().zip(pi.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> (Mrp, FeatureMap) {
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let mrp = Mrp::new(p, DVector::from_column_slice(&[1.0, 0.0]), 0.5).unwrap();
        let fmap = FeatureMap::new(2, 1, vec![1.0, 0.0]).unwrap();
        (mrp, fmap)
    }

    #[test]
    fn hundred_state_environment_is_valid() {
        let params = RandomMrpParams { mixing_eps: 0.01, ..RandomMrpParams::new(100, 10, 0.5, 7) };
        let (mrp, fmap) = build_random_mrp(&params).unwrap();
        assert_eq!(mrp.n(), 100);
        assert_eq!(fmap.k(), 10);
        assert!(fmap.smallest_singular_value() > RANK_TOL);
        assert!(fmap.max_row_norm() <= 1.0 + 1e-12);
        for s in 0..100 {
            let sum: f64 = mrp.transition().row(s).iter().sum();
            assert!((sum - 1.0).abs() <= ROW_SUM_TOL);
            assert!((0.0..=1.0).contains(&mrp.reward(s)));
        }
    }

    #[test]
    fn constant_reward_range() {
        let params = RandomMrpParams { reward_range: (1.0, 1.0), mixing_eps: 0.0, ..RandomMrpParams::new(2, 1, 0.5, 0) };
        let (mrp, fmap) = build_random_mrp(&params).unwrap();
        assert_eq!(mrp.rewards().as_slice(), &[1.0, 1.0]);
        assert!(fmap.max_row_norm() <= 1.0 + 1e-12);
    }

    #[test]
    fn mixing_regularisation_floor() {
        let params = RandomMrpParams { reward_range: (0.0, 1.0), mixing_eps: 0.05, ..RandomMrpParams::new(3, 2, 0.9, 1) };
        let (mrp, _) = build_random_mrp(&params).unwrap();
        let floor = 0.05 / 3.0;
        assert!(mrp.transition().iter().all(|&p| p >= floor - 1e-15));
    }

    #[test]
    fn generation_is_deterministic() {
        let params = RandomMrpParams::new(20, 4, 0.7, 11);
        let a = build_random_mrp(&params).unwrap();
        let b = build_random_mrp(&params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_dimensions_and_ranges() {
        assert!(build_random_mrp(&RandomMrpParams::new(5, 5, 0.5, 0)).is_err());
        assert!(build_random_mrp(&RandomMrpParams::new(5, 0, 0.5, 0)).is_err());
        assert!(build_random_mrp(&RandomMrpParams::new(1, 1, 0.5, 0)).is_err());
        assert!(build_random_mrp(&RandomMrpParams::new(5, 2, 1.0, 0)).is_err());
        let bad = RandomMrpParams { reward_range: (1.0, 0.0), ..RandomMrpParams::new(5, 2, 0.5, 0) };
        assert!(build_random_mrp(&bad).is_err());
    }

    #[test]
    fn uniform_chain_stationary() {
        let (mrp, _) = two_state();
        let pi = stationary_distribution(&mrp, 1e-12).unwrap();
        assert!((pi[0] - 0.5).abs() < 1e-15 && (pi[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn power_iteration_reports_non_convergence() {
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.5, 0.5]);
        let mrp = Mrp::new(p, DVector::zeros(2), 0.5).unwrap();
        assert!(matches!(
            stationary_distribution_capped(&mrp, 1e-300, 10),
            Err(Error::NonConvergence { iterations: 10, .. })
        ));
    }

    #[test]
    fn hand_computed_two_state_quantities() {
        let (mrp, fmap) = two_state();
        let ss = steady_state_quantities(&mrp, &fmap).unwrap();
        assert!((ss.sigma[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((ss.omega - 0.5).abs() < 1e-15);
        assert!((ss.a_bar[(0, 0)] + 0.375).abs() < 1e-15);
        assert!((ss.b_bar[0] + 0.5).abs() < 1e-15);
        assert!((ss.theta_star[0] - 4.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn zero_reward_gives_zero_fixed_point() {
        let params = RandomMrpParams { reward_range: (0.0, 0.0), ..RandomMrpParams::new(8, 3, 0.6, 2) };
        let env = Environment::generate(&params).unwrap();
        let ss = env.steady_state().unwrap();
        assert!(ss.b_bar.iter().all(|&x| x == 0.0));
        assert!(ss.theta_star.iter().all(|&x| x == 0.0));
        assert_eq!(ss.sigma_sq, 0.0);
    }

    #[test]
    fn mean_path_direction_at_fixed_point_and_origin() {
        let env = Environment::generate(&RandomMrpParams::new(100, 10, 0.5, 7)).unwrap();
        let ss = env.steady_state().unwrap();
        assert!(ss.fixed_point_residual() <= 1e-10);
        let g = ss.mean_path_direction(ss.theta_star_slice());
        assert!(norm_sq(&g).sqrt() <= 1e-10);
        let g0 = ss.mean_path_direction(&[0.0; 10]);
        for (a, b) in g0.iter().zip(ss.b_bar.iter()) {
            assert_eq!(*a, -b);
        }
    }

    #[test]
    fn td_direction_edge_cases() {
        let fmap = FeatureMap::new_unchecked(3, 2, vec![0.0, 0.0, 0.6, 0.8, 0.3, -0.4]).unwrap();
        let theta = [2.0, -1.0];
        let g = sample_td_direction(&DataTuple { s: 0, s_next: 1, r: 1.0 }, &fmap, 0.5, &theta);
        assert_eq!(g, vec![0.0, 0.0]);
        let v = dot(fmap.row(1), &theta);
        let g = sample_td_direction(&DataTuple { s: 1, s_next: 1, r: 0.0 }, &fmap, 0.5, &theta);
        assert!((g[0] - (0.5 - 1.0) * v * 0.6).abs() < 1e-15);
        assert!((g[1] - (0.5 - 1.0) * v * 0.8).abs() < 1e-15);
    }

    #[test]
    fn samplers_are_deterministic_and_overlap() {
        let env = Environment::generate(&RandomMrpParams::new(10, 3, 0.5, 4)).unwrap();
        let ss = env.steady_state().unwrap();
        let tables = SamplingTables::new(&env.mrp, &ss.pi);
        let mut a = MarkovSampler::new(tables.clone(), 9);
        let mut b = MarkovSampler::new(tables.clone(), 9);
        let mut prev = a.next_tuple();
        assert_eq!(prev, b.next_tuple());
        for _ in 0..1000 {
            let x = a.next_tuple();
            assert_eq!(x, b.next_tuple());
            assert_eq!(x.s, prev.s_next);
            assert_eq!(x.r, env.mrp.reward(x.s));
            prev = x;
        }
        let mut c = IidSampler::new(tables.clone(), 5);
        let mut d = IidSampler::new(tables, 5);
        for _ in 0..1000 {
            assert_eq!(c.next_tuple(), d.next_tuple());
        }
    }

    #[test]
    fn one_step_mixing_for_rank_one_chain() {
        let n = 4;
        let p = DMatrix::from_element(n, n, 1.0 / n as f64);
        let mrp = Mrp::new(p, DVector::zeros(n), 0.5).unwrap();
        assert_eq!(mixing_time(&mrp, 1e-6).unwrap(), 1);
    }

    #[test]
    fn mixing_time_rejects_nonpositive_eps() {
        let (mrp, _) = two_state();
        assert!(mixing_time(&mrp, 0.0).is_err());
    }

    #[test]
    fn env_json_round_trip_is_exact() {
        let env = Environment::generate(&RandomMrpParams::new(12, 3, 0.9, 5)).unwrap();
        let text = env.to_json().unwrap();
        let back = Environment::from_json(&text).unwrap();
        assert_eq!(back.mrp, env.mrp);
        assert_eq!(back.features, env.features);
        assert_eq!(back.params, env.params);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn corrupted_env_is_rejected() {
        let env = Environment::generate(&RandomMrpParams::new(6, 2, 0.5, 5)).unwrap();
        let mut file = env.to_file();
        file.transition[0][0] += 0.1;
        assert!(Environment::from_file(&file).is_err());
        let mut file = env.to_file();
        file.features[2][0] = 3.0;
        assert!(Environment::from_file(&file).is_err());
    }
}
