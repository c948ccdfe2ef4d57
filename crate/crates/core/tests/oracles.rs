//! Independent re-derivations of computed quantities.

use eftd::analysis::{fit_series, lyapunov_psi};
use eftd::cli::{run_cli, EXIT_OK};
use eftd::compression::{Compressor, CompressorKind, CompressorSpec};
use eftd::ef_td::{
    mean_path_ef_td_step, nominal_delta, run_single_agent, AgentState, Algorithm, RunSpec, SamplerKind, Scratch,
};
use eftd::env_model::{
    mixing_amplification, mixing_time, sample_td_direction, DataTuple, Environment, FeatureMap, GroundTruthFile,
    IidSampler, MarkovSampler, Mrp, PreparedEnvironment, RandomMrpParams, TupleSampler,
};
use eftd::multi_agent::{run_multi_agent_experiment, MultiAgentSpec};
use eftd::nonlinear_sa::{SyntheticMap, UpdateMap};
use eftd::trace::{mean_error_curve, Trace};
use nalgebra::{DMatrix, DVector};

fn prepared(n: usize, k: usize, gamma: f64, seed: u64) -> PreparedEnvironment {
    PreparedEnvironment::new(Environment::generate(&RandomMrpParams::new(n, k, gamma, seed)).unwrap()).unwrap()
}

fn from_parts(p: DMatrix<f64>, r: Vec<f64>, gamma: f64, phi: Vec<f64>, k: usize) -> PreparedEnvironment {
    let n = p.nrows();
    let mrp = Mrp::new(p, DVector::from_vec(r), gamma).unwrap();
    let features = FeatureMap::new(n, k, phi).unwrap();
    PreparedEnvironment::new(Environment { mrp, features, params: None }).unwrap()
}

/// `π` from the dense system `(Pᵀ − I)π = 0`, `Σπ = 1`.
fn dense_stationary(p: &DMatrix<f64>) -> DVector<f64> {
    let n = p.nrows();
    let mut a = p.transpose() - DMatrix::<f64>::identity(n, n);
    let mut b = DVector::zeros(n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    b[n - 1] = 1.0;
    a.lu().solve(&b).unwrap()
}

#[test]
fn stationary_distribution_matches_dense_solve() {
    let env = Environment::generate(&RandomMrpParams::new(5, 2, 0.9, 3)).unwrap();
    let ss = env.steady_state().unwrap();
    let pi = dense_stationary(env.mrp.transition());
    assert!((&ss.pi - &pi).amax() <= 1e-10, "{} vs {}", ss.pi, pi);
}

#[test]
fn mean_path_direction_matches_enumeration() {
    let p = prepared(5, 3, 0.8, 11);
    let mrp = &p.env.mrp;
    let theta = [0.7, -1.3, 2.1];
    let mut expect = [0.0; 3];
    for s in 0..5 {
        for x in 0..5 {
            let g = sample_td_direction(&DataTuple { s, s_next: x, r: mrp.reward(s) }, p.features(), p.gamma(), &theta);
            let w = p.steady.pi[s] * mrp.transition()[(s, x)];
            for i in 0..3 {
                expect[i] += w * g[i];
            }
        }
    }
    let got = p.steady.mean_path_direction(&theta);
    for i in 0..3 {
        assert!((got[i] - expect[i]).abs() <= 1e-10);
    }
}

#[test]
fn sigma_sq_matches_enumeration_at_fixed_point() {
    let p = prepared(6, 2, 0.6, 4);
    let mrp = &p.env.mrp;
    let star: Vec<f64> = p.steady.theta_star.iter().copied().collect();
    let mut total = 0.0;
    for s in 0..6 {
        for x in 0..6 {
            let g = sample_td_direction(&DataTuple { s, s_next: x, r: mrp.reward(s) }, p.features(), p.gamma(), &star);
            total += p.steady.pi[s] * mrp.transition()[(s, x)] * g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    assert!((total - p.steady.sigma_sq).abs() <= 1e-12 * total.max(1.0));
}

#[test]
fn td_direction_matches_formula_on_two_state_chain() {
    let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
    let env = from_parts(p, vec![1.0, 0.0], 0.5, vec![1.0, 0.0], 1);
    for (s, x, theta) in [(0usize, 1usize, 0.3f64), (1, 0, -2.0), (0, 0, 5.0)] {
        let r = env.env.mrp.reward(s);
        let phi = [1.0, 0.0];
        let expect = (r + 0.5 * phi[x] * theta - phi[s] * theta) * phi[s];
        let got = sample_td_direction(&DataTuple { s, s_next: x, r }, env.features(), 0.5, &[theta]);
        assert_eq!(got, vec![expect]);
    }
    let ss = &env.steady;
    assert!((ss.a_bar[(0, 0)] + 0.375).abs() < 1e-15);
    assert!((ss.b_bar[0] + 0.5).abs() < 1e-15);
    assert!((ss.theta_star[0] - 4.0 / 3.0).abs() < 1e-12);
}

#[test]
fn markov_sampler_transition_frequencies() {
    let eps = 0.1;
    let p = DMatrix::from_row_slice(2, 2, &[eps / 2.0, 1.0 - eps / 2.0, 1.0 - eps / 2.0, eps / 2.0]);
    let env = from_parts(p.clone(), vec![1.0, 0.0], 0.5, vec![1.0, 0.5], 1);
    let mut sampler = MarkovSampler::new(env.tables.clone(), 5);
    let mut counts = [[0u64; 2]; 2];
    let mut prev = sampler.next_tuple();
    counts[prev.s][prev.s_next] += 1;
    for _ in 1..1_000_000 {
        let x = sampler.next_tuple();
        assert_eq!(x.s, prev.s_next);
        counts[x.s][x.s_next] += 1;
        prev = x;
    }
    for s in 0..2 {
        let row = (counts[s][0] + counts[s][1]) as f64;
        for x in 0..2 {
            assert!((counts[s][x] as f64 / row - p[(s, x)]).abs() <= 1e-2);
        }
    }
}

#[test]
fn iid_marginal_matches_stationary_distribution() {
    let p = prepared(5, 2, 0.5, 9);
    let mut sampler = IidSampler::new(p.tables.clone(), 6);
    let mut counts = [0u64; 5];
    let draws = 1_000_000;
    for _ in 0..draws {
        counts[sampler.next_tuple().s] += 1;
    }
    for (s, &c) in counts.iter().enumerate() {
        assert!((c as f64 / draws as f64 - p.steady.pi[s]).abs() <= 1e-2);
    }
}

#[test]
fn two_state_mixing_time_follows_second_eigenvalue() {
    let p = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.9]);
    let gamma = 0.5;
    let mrp = Mrp::new(p, DVector::from_vec(vec![1.0, 0.0]), gamma).unwrap();
    let c = mixing_amplification(gamma);
    let oracle = |eps: f64| ((eps / c).ln() / 0.8f64.ln()).ceil() as usize;
    assert_eq!(mixing_time(&mrp, 0.01).unwrap(), oracle(0.01));
    let step = (2f64.ln() / (1.0 / 0.8f64).ln()).ceil() as usize;
    let mut eps = 0.5;
    let mut prev = mixing_time(&mrp, eps).unwrap();
    for _ in 0..10 {
        eps /= 2.0;
        let tau = mixing_time(&mrp, eps).unwrap();
        assert!(tau >= prev && tau - prev <= step);
        prev = tau;
    }
}

#[test]
fn scaled_sign_distortion_is_approached_near_basis_vectors() {
    let k = 10;
    let spec = CompressorSpec::new(CompressorKind::ScaledSign, k).unwrap();
    assert_eq!(nominal_delta(&spec), k as f64);
    let mut comp = Compressor::new(spec, 0);
    let bound = 1.0 - 1.0 / k as f64;
    for i in 0..k {
        let mut x = vec![1e-9; k];
        x[i] = 3.0;
        let q = comp.compress(&x).unwrap();
        let resid: f64 = q.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
        let norm_sq: f64 = x.iter().map(|v| v * v).sum();
        let l1: f64 = x.iter().map(|v| v.abs()).sum();
        assert!((resid - (norm_sq - l1 * l1 / k as f64)).abs() <= 1e-12);
        assert!(resid / norm_sq <= bound && resid / norm_sq > bound - 1e-6);
    }
}

#[test]
fn iid_td0_settles_well_below_start() {
    let p = prepared(100, 10, 0.5, 7);
    let mut spec = RunSpec::new(Algorithm::Td0, SamplerKind::Iid, CompressorSpec::identity(10), 0.01, 100_000);
    spec.record_every = 100;
    spec.seed = 3;
    let traces: Vec<Trace> = (0..10).map(|t| run_single_agent(&p, &spec, t, None).unwrap()).collect();
    let (_, m) = mean_error_curve(&traces);
    let tail = &m[m.len() - 100..];
    let plateau = tail.iter().sum::<f64>() / tail.len() as f64;
    let before = &m[m.len() - 200..m.len() - 100];
    let before = before.iter().sum::<f64>() / before.len() as f64;
    assert!((plateau - before).abs() <= 0.2 * plateau);
    assert!(plateau * 30.0 <= m[0], "E0={} plateau={plateau}", m[0]);
}

#[test]
fn mean_path_top1_reaches_numerical_convergence() {
    let p = prepared(12, 3, 0.5, 5);
    let ss = &p.steady;
    let spec = CompressorSpec::top_k(1, 3).unwrap();
    let alpha = (1.0 - p.gamma()) / (128.0 * nominal_delta(&spec));
    let star = ss.theta_star_slice();
    let mut state = AgentState::zeros(3);
    let mut comp = Compressor::new(spec, 0);
    let mut scratch = Scratch::new(3);
    let psi0 = lyapunov_psi(&state.theta, &state.e, alpha, star);
    let mut steps = 0;
    while lyapunov_psi(&state.theta, &state.e, alpha, star) >= 1e-20 * psi0 {
        mean_path_ef_td_step(&mut state, ss, alpha, &mut comp, &mut scratch);
        steps += 1;
        assert!(steps < 20_000_000, "no convergence");
    }
    let rho = 1.0 - (1.0 - p.gamma()).powi(2) * ss.omega / (1024.0 * 3.0);
    assert!((steps as f64) <= (1e-20f64).ln() / rho.ln());
}

#[test]
fn synthetic_ef_sa_rate_tracks_envelope() {
    let p = prepared(100, 10, 0.5, 7);
    let map = SyntheticMap::for_environment(&p, 1).unwrap();
    let alpha = 0.004;
    let mut spec = RunSpec::new(Algorithm::EfSa, SamplerKind::Markov, CompressorSpec::parse("signscaled", 10).unwrap(), alpha, 100_000);
    spec.record_every = 200;
    spec.seed = 8;
    let traces: Vec<Trace> = (0..10).map(|t| run_single_agent(&p, &spec, t, Some(&map)).unwrap()).collect();
    let (t, m) = mean_error_curve(&traces);
    let fit = fit_series(&t, &m).unwrap();
    let measured = -fit.geometric_rate.ln() / 2.0;
    let envelope = alpha * map.monotonicity();
    assert!(measured >= 0.5 * envelope && measured <= 2.0 * envelope, "{measured} vs {envelope}");
}

#[test]
fn compression_leaves_fleet_plateau_order_unchanged() {
    let p = prepared(100, 10, 0.3, 4);
    let plateau = |spec: CompressorSpec| {
        let mut run = MultiAgentSpec::new(10, spec, 0.05, 20_000);
        run.record_every = 100;
        run.seed = 2;
        let traces: Vec<Trace> = (0..10).map(|t| run_multi_agent_experiment(&p, &run, t).unwrap()).collect();
        let (_, m) = mean_error_curve(&traces);
        let tail = &m[m.len() - 40..];
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    let a = plateau(CompressorSpec::identity(10));
    let b = plateau(CompressorSpec::top_k(2, 10).unwrap());
    assert!(a.max(b) / a.min(b) <= 3.0, "identity {a} top2 {b}");
}

#[test]
fn sidecar_fixed_point_solves_the_projected_equation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(run_cli(["eftd", "gen-env", "--n", "100", "--K", "10", "--gamma", "0.5", "--seed", "7", "--out", out]), EXIT_OK);
    let env = Environment::from_json(&std::fs::read_to_string(tmp.path().join("env.json")).unwrap()).unwrap();
    let truth: GroundTruthFile = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("ground_truth.json")).unwrap()).unwrap();
    let pi = dense_stationary(env.mrp.transition());
    let phi = env.features.matrix();
    let d = DMatrix::from_diagonal(&pi);
    let a = phi.transpose() * &d * (env.mrp.transition() * env.gamma() - DMatrix::<f64>::identity(100, 100)) * &phi;
    let b = -(phi.transpose() * &d * env.mrp.rewards());
    let residual = (a * DVector::from_vec(truth.theta_star) - b).norm();
    assert!(residual <= 1e-10, "{residual}");
}
