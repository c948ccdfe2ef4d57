//! Error feedback for general update maps `g(X, θ)`, plus sampling-based
//! checks of the Lipschitz and strong-monotonicity assumptions.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::compression::Compressor;
use crate::ef_td::{ef_step_with_direction, AgentState, ProjectionSpec, Scratch};
use crate::env_model::{td_direction_into, DataTuple, FeatureMap, PreparedEnvironment, SamplingTables, SteadyState};
use crate::error::{Error, Result};
use crate::rng::{derived_rng, SimRng, Stream};
use crate::vecops::{dot, norm, norm_sq};

pub const CHECK_SLACK: f64 = 1e-9;
const CHUNK: usize = 256;

/// Worst tuple seen by the Lipschitz check with its two iterates.
type Witness = (DataTuple, Vec<f64>, Vec<f64>);

/// A stochastic update direction with known regularity constants.
pub trait UpdateMap: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, tuple: &DataTuple, theta: &[f64], out: &mut [f64]);

    /// Exact expectation of `eval` under the stationary distribution.
    fn mean_eval(&self, theta: &[f64], out: &mut [f64]);

    /// Claimed `L`.
    fn lipschitz(&self) -> f64;

    /// Claimed `β`.
    fn monotonicity(&self) -> f64;

    fn theta_star(&self) -> &[f64];

    /// A tuple drawn uniformly over all state pairs.
    fn sample_tuple(&self, rng: &mut SimRng) -> DataTuple;

    /// Direction along which `eval` is most sensitive for this tuple, if known.
    fn hard_direction(&self, _tuple: &DataTuple) -> Option<Vec<f64>> {
        None
    }
}

/// The TD(0) direction viewed as an update map.
#[derive(Debug, Clone)]
pub struct TdMap<'a> {
    fmap: &'a FeatureMap,
    ss: &'a SteadyState,
    tables: Arc<SamplingTables>,
    gamma: f64,
    theta_star: Vec<f64>,
}

impl<'a> TdMap<'a> {
    pub fn new(prepared: &'a PreparedEnvironment) -> Self {
        Self::from_parts(prepared.features(), &prepared.steady, prepared.tables.clone(), prepared.gamma())
    }

    pub fn from_parts(fmap: &'a FeatureMap, ss: &'a SteadyState, tables: Arc<SamplingTables>, gamma: f64) -> Self {
        Self { fmap, ss, tables, gamma, theta_star: ss.theta_star.iter().copied().collect() }
    }
}

impl UpdateMap for TdMap<'_> {
    fn dim(&self) -> usize {
        self.fmap.k()
    }

    #[inline]
    fn eval(&self, tuple: &DataTuple, theta: &[f64], out: &mut [f64]) {
        td_direction_into(tuple, self.fmap, self.gamma, theta, out);
    }

    fn mean_eval(&self, theta: &[f64], out: &mut [f64]) {
        self.ss.mean_path_direction_into(theta, out);
    }

    fn lipschitz(&self) -> f64 {
        2.0
    }

    fn monotonicity(&self) -> f64 {
        self.ss.omega * (1.0 - self.gamma)
    }

    fn theta_star(&self) -> &[f64] {
        &self.theta_star
    }

    fn sample_tuple(&self, rng: &mut SimRng) -> DataTuple {
        let n = self.fmap.n();
        let s = rng.random_range(0..n);
        DataTuple { s, s_next: rng.random_range(0..n), r: self.tables.reward(s) }
    }

    fn hard_direction(&self, tuple: &DataTuple) -> Option<Vec<f64>> {
        let phi = self.fmap.row(tuple.s);
        let next = self.fmap.row(tuple.s_next);
        Some(phi.iter().zip(next).map(|(p, q)| self.gamma * q - p).collect())
    }
}

/// `g(X, θ) = −(θ − b(s)) − ½ tanh(θ − b(s))` elementwise, with one offset
/// vector `b(s)` per state.
///
/// Each coordinate has slope in `[1, 1.5]`, so `L = 1.5` and `β = 1`.
#[derive(Debug, Clone)]
pub struct SyntheticMap {
    k: usize,
    offsets: Vec<f64>,
    pi: Vec<f64>,
    theta_star: Vec<f64>,
}

pub const SYNTHETIC_TANH_WEIGHT: f64 = 0.5;

impl SyntheticMap {
    /// Offsets `b(s) = center + spread·N(0, I)`.
    pub fn new(pi: &[f64], k: usize, center: &[f64], spread: f64, seed: u64) -> Result<Self> {
        if center.len() != k {
            return Err(Error::DimensionMismatch { expected: k, got: center.len() });
        }
        if pi.is_empty() || k == 0 {
            return Err(Error::InvalidArgument("synthetic map needs at least one state and one dimension".into()));
        }
        let mut rng = derived_rng(seed, Stream::SyntheticMap, 0);
        let mut offsets = Vec::with_capacity(pi.len() * k);
        for _ in 0..pi.len() {
            for c in center {
                let z: f64 = rng.sample(StandardNormal);
                offsets.push(c + spread * z);
            }
        }
        let mut map = Self { k, offsets, pi: pi.to_vec(), theta_star: vec![0.0; k] };
        map.theta_star = map.solve_root()?;
        Ok(map)
    }

    pub fn for_environment(prepared: &PreparedEnvironment, seed: u64) -> Result<Self> {
        let pi: Vec<f64> = prepared.steady.pi.iter().copied().collect();
        let k = prepared.k();
        Self::new(&pi, k, &vec![1.0; k], 1.0, seed)
    }

    pub fn offset(&self, s: usize) -> &[f64] {
        &self.offsets[s * self.k..(s + 1) * self.k]
    }

    /// Fixed-point iteration `θ ← θ + 0.8 ḡ(θ)`, a 0.2-contraction.
    fn solve_root(&self) -> Result<Vec<f64>> {
        let mut theta = vec![0.0; self.k];
        for s in 0..self.pi.len() {
            for (t, b) in theta.iter_mut().zip(self.offset(s)) {
                *t += self.pi[s] * b;
            }
        }
        let mut g = vec![0.0; self.k];
        for _ in 0..200 {
            self.mean_eval(&theta, &mut g);
            if norm(&g) <= 1e-14 {
                return Ok(theta);
            }
            for (t, gi) in theta.iter_mut().zip(&g) {
                *t += 0.8 * gi;
            }
        }
        self.mean_eval(&theta, &mut g);
        let residual = norm(&g);
        if residual <= 1e-12 {
            Ok(theta)
        } else {
            Err(Error::NonConvergence { iterations: 200, residual })
        }
    }
}

impl UpdateMap for SyntheticMap {
    fn dim(&self) -> usize {
        self.k
    }

    #[inline]
    fn eval(&self, tuple: &DataTuple, theta: &[f64], out: &mut [f64]) {
        for ((o, t), b) in out.iter_mut().zip(theta).zip(self.offset(tuple.s)) {
            let d = t - b;
            *o = -d - SYNTHETIC_TANH_WEIGHT * d.tanh();
        }
    }

    fn mean_eval(&self, theta: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (s, p) in self.pi.iter().enumerate() {
            for ((o, t), b) in out.iter_mut().zip(theta).zip(self.offset(s)) {
                let d = t - b;
                *o += p * (-d - SYNTHETIC_TANH_WEIGHT * d.tanh());
            }
        }
    }

    fn lipschitz(&self) -> f64 {
        1.0 + SYNTHETIC_TANH_WEIGHT
    }

    fn monotonicity(&self) -> f64 {
        1.0
    }

    fn theta_star(&self) -> &[f64] {
        &self.theta_star
    }

    fn sample_tuple(&self, rng: &mut SimRng) -> DataTuple {
        let n = self.pi.len();
        DataTuple { s: rng.random_range(0..n), s_next: rng.random_range(0..n), r: 0.0 }
    }
}

/// One EF step driven by `map`. Returns `h_t`.
pub fn ef_sa_step<'s>(
    state: &mut AgentState,
    tuple: &DataTuple,
    map: &dyn UpdateMap,
    alpha: f64,
    compressor: &mut Compressor,
    proj: &ProjectionSpec,
    scratch: &'s mut Scratch,
) -> &'s [f64] {
    map.eval(tuple, &state.theta, &mut scratch.g);
    ef_step_with_direction(state, alpha, compressor, proj, scratch);
    &scratch.h
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzReport {
    pub max_ratio: f64,
    pub claimed: f64,
    pub pass: bool,
    pub witness: Option<(DataTuple, Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneReport {
    pub min_beta_observed: f64,
    pub claimed: f64,
    pub pass: bool,
    pub witness: Option<Vec<f64>>,
}

fn gaussian(rng: &mut SimRng, k: usize, scale: f64) -> Vec<f64> {
    (0..k).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn log_uniform_scale(rng: &mut SimRng) -> f64 {
    10f64.powf(rng.random_range(-3.0..3.0))
}

fn chunk_count(trials: usize) -> usize {
    trials.div_ceil(CHUNK)
}

/// Samples `(X, θ₁, θ₂)` and reports `max ‖g(X,θ₁) − g(X,θ₂)‖ / ‖θ₁ − θ₂‖`.
///
/// Every fourth pair is collinear along the map's hard direction when it has
/// one, and otherwise along a coordinate axis at a small separation.
pub fn check_lipschitz(map: &dyn UpdateMap, trials: usize, seed: u64) -> LipschitzReport {
    let k = map.dim();
    let star = map.theta_star().to_vec();
    let best = (0..chunk_count(trials))
        .into_par_iter()
        .map(|c| {
            let mut rng = derived_rng(seed, Stream::Checker, c as u64);
            let mut g1 = vec![0.0; k];
            let mut g2 = vec![0.0; k];
            let mut best: (f64, Option<Witness>) = (0.0, None);
            for i in c * CHUNK..((c + 1) * CHUNK).min(trials) {
                let tuple = map.sample_tuple(&mut rng);
                let scale = log_uniform_scale(&mut rng);
                let noise = gaussian(&mut rng, k, scale);
                let theta1: Vec<f64> = star.iter().zip(&noise).map(|(a, b)| a + b).collect();
                let direction = match (i % 4, map.hard_direction(&tuple)) {
                    (0, Some(d)) if norm(&d) > 0.0 => d,
                    (2, _) => {
                        let mut d = vec![0.0; k];
                        d[rng.random_range(0..k)] = 1.0;
                        d
                    }
                    _ => gaussian(&mut rng, k, 1.0),
                };
                let step = if i % 2 == 0 { 1e-3 } else { scale };
                let theta2: Vec<f64> = theta1.iter().zip(&direction).map(|(a, d)| a + step * d).collect();
                let gap = norm(&theta1.iter().zip(&theta2).map(|(a, b)| a - b).collect::<Vec<_>>());
                if gap == 0.0 {
                    continue;
                }
                map.eval(&tuple, &theta1, &mut g1);
                map.eval(&tuple, &theta2, &mut g2);
                let diff: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a - b).collect();
                let ratio = norm(&diff) / gap;
                if ratio > best.0 || !ratio.is_finite() {
                    best = (ratio, Some((tuple, theta1, theta2)));
                }
            }
            best
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, None), |acc, cur| if cur.0 > acc.0 { cur } else { acc });
    let claimed = map.lipschitz();
    let pass = best.0 <= claimed + CHECK_SLACK;
    LipschitzReport { max_ratio: best.0, claimed, pass, witness: if pass { None } else { best.1 } }
}

/// Samples `θ` and reports `min ⟨θ−θ*, ḡ(θ)⟩ / (−‖θ−θ*‖²)`.
pub fn check_monotone(map: &dyn UpdateMap, trials: usize, seed: u64) -> MonotoneReport {
    let k = map.dim();
    let star = map.theta_star().to_vec();
    let worst = (0..chunk_count(trials))
        .into_par_iter()
        .map(|c| {
            let mut rng = derived_rng(seed ^ 0x6d6f_6e6f, Stream::Checker, c as u64);
            let mut g = vec![0.0; k];
            let mut worst: (f64, Option<Vec<f64>>) = (f64::INFINITY, None);
            for _ in c * CHUNK..((c + 1) * CHUNK).min(trials) {
                let scale = log_uniform_scale(&mut rng);
                let delta = gaussian(&mut rng, k, scale);
                let dn = norm_sq(&delta);
                if dn == 0.0 {
                    continue;
                }
                let theta: Vec<f64> = star.iter().zip(&delta).map(|(a, b)| a + b).collect();
                map.mean_eval(&theta, &mut g);
                let beta = -dot(&delta, &g) / dn;
                if beta < worst.0 || beta.is_nan() {
                    worst = (beta, Some(theta));
                }
            }
            worst
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((f64::INFINITY, None), |acc, cur| if cur.0 < acc.0 { cur } else { acc });
    let claimed = map.monotonicity();
    let pass = worst.0 >= claimed - CHECK_SLACK;
    MonotoneReport { min_beta_observed: worst.0, claimed, pass, witness: if pass { None } else { worst.1 } }
}

/// `‖ḡ(θ*)‖`.
pub fn root_residual(map: &dyn UpdateMap) -> f64 {
    let mut g = vec![0.0; map.dim()];
    map.mean_eval(map.theta_star(), &mut g);
    norm(&g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::CompressorSpec;
    use crate::env_model::{Environment, MarkovSampler, RandomMrpParams, TupleSampler};

    fn prepared(seed: u64) -> PreparedEnvironment {
        PreparedEnvironment::new(Environment::generate(&RandomMrpParams::new(15, 4, 0.7, seed)).unwrap()).unwrap()
    }

    /// `ḡ(θ) = −(θ − θ*)` for every tuple.
    struct LinearMap {
        star: Vec<f64>,
    }

    impl UpdateMap for LinearMap {
        fn dim(&self) -> usize {
            self.star.len()
        }
        fn eval(&self, _: &DataTuple, theta: &[f64], out: &mut [f64]) {
            self.mean_eval(theta, out);
        }
        fn mean_eval(&self, theta: &[f64], out: &mut [f64]) {
            for ((o, t), s) in out.iter_mut().zip(theta).zip(&self.star) {
                *o = -(t - s);
            }
        }
        fn lipschitz(&self) -> f64 {
            1.0
        }
        fn monotonicity(&self) -> f64 {
            1.0
        }
        fn theta_star(&self) -> &[f64] {
            &self.star
        }
        fn sample_tuple(&self, _: &mut SimRng) -> DataTuple {
            DataTuple { s: 0, s_next: 0, r: 0.0 }
        }
    }

    struct ConstantMap;

    impl UpdateMap for ConstantMap {
        fn dim(&self) -> usize {
            2
        }
        fn eval(&self, _: &DataTuple, _: &[f64], out: &mut [f64]) {
            out.copy_from_slice(&[1.0, -2.0]);
        }
        fn mean_eval(&self, _: &[f64], out: &mut [f64]) {
            out.copy_from_slice(&[1.0, -2.0]);
        }
        fn lipschitz(&self) -> f64 {
            0.0
        }
        fn monotonicity(&self) -> f64 {
            0.0
        }
        fn theta_star(&self) -> &[f64] {
            &[0.0, 0.0]
        }
        fn sample_tuple(&self, _: &mut SimRng) -> DataTuple {
            DataTuple { s: 0, s_next: 0, r: 0.0 }
        }
    }

    #[test]
    fn td_map_constants_hold() {
        let p = prepared(1);
        let map = TdMap::new(&p);
        let lip = check_lipschitz(&map, 4000, 3);
        assert!(lip.pass, "{lip:?}");
        assert!(lip.max_ratio > 0.5);
        let mono = check_monotone(&map, 4000, 3);
        assert!(mono.pass, "{mono:?}");
        assert!(root_residual(&map) < 1e-10);
    }

    #[test]
    fn linear_map_has_unit_monotonicity() {
        let map = LinearMap { star: vec![0.5, -1.0, 2.0] };
        let mono = check_monotone(&map, 1000, 0);
        assert!((mono.min_beta_observed - 1.0).abs() < 1e-12);
        let lip = check_lipschitz(&map, 1000, 0);
        assert!((lip.max_ratio - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_map_has_zero_ratio() {
        let lip = check_lipschitz(&ConstantMap, 500, 0);
        assert_eq!(lip.max_ratio, 0.0);
        assert!(lip.pass);
    }

    #[test]
    fn synthetic_map_constants_and_root() {
        let p = prepared(2);
        let map = SyntheticMap::for_environment(&p, 9).unwrap();
        assert!(root_residual(&map) <= 1e-12);
        let lip = check_lipschitz(&map, 5000, 1);
        assert!(lip.pass && lip.max_ratio <= 1.5 + 1e-9 && lip.max_ratio > 1.3, "{lip:?}");
        let mono = check_monotone(&map, 5000, 1);
        assert!(mono.pass && mono.min_beta_observed >= 1.0 - 1e-9, "{mono:?}");
    }

    #[test]
    fn synthetic_map_is_fixed_when_offsets_agree() {
        let map = SyntheticMap::new(&[0.25, 0.75], 3, &[0.2, -0.4, 1.0], 0.0, 0).unwrap();
        assert_eq!(map.theta_star(), &[0.2, -0.4, 1.0]);
        let mut state = AgentState::new(map.theta_star().to_vec());
        let mut comp = Compressor::new(CompressorSpec::parse("signscaled", 3).unwrap(), 0);
        let mut scratch = Scratch::new(3);
        for s in [0, 1, 1, 0] {
            ef_sa_step(&mut state, &DataTuple { s, s_next: 0, r: 0.0 }, &map, 0.3, &mut comp, &ProjectionSpec::disabled(), &mut scratch);
        }
        assert_eq!(state.theta, vec![0.2, -0.4, 1.0]);
    }

    #[test]
    fn td_map_steps_match_ef_td_steps() {
        let p = prepared(3);
        let map = TdMap::new(&p);
        let k = p.k();
        let spec = CompressorSpec::top_k(2, k).unwrap();
        let mut a = AgentState::zeros(k);
        let mut b = AgentState::zeros(k);
        let mut ca = Compressor::new(spec, 0);
        let mut cb = Compressor::new(spec, 0);
        let mut sa = Scratch::new(k);
        let mut sb = Scratch::new(k);
        let mut sampler = MarkovSampler::new(p.tables.clone(), 5);
        for _ in 0..3000 {
            let x = sampler.next_tuple();
            ef_sa_step(&mut a, &x, &map, 0.2, &mut ca, &ProjectionSpec::disabled(), &mut sa);
            crate::ef_td::ef_td_step(&mut b, &x, p.features(), p.gamma(), 0.2, &mut cb, &ProjectionSpec::disabled(), &mut sb);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn checkers_are_deterministic() {
        let p = prepared(4);
        let map = SyntheticMap::for_environment(&p, 1).unwrap();
        assert_eq!(check_lipschitz(&map, 1000, 8), check_lipschitz(&map, 1000, 8));
        assert_eq!(check_monotone(&map, 1000, 8), check_monotone(&map, 1000, 8));
    }
}
