//! Compression operators `Q_δ`.
//!
//! A compliant operator satisfies the contraction
//! `‖Q(x) − x‖² ≤ (1 − 1/δ)‖x‖²` for some distortion factor `δ ≥ 1`.
//! Identity, top-k and the ℓ₁-scaled sign operator are compliant. The raw
//! sign operator and the unbiased random-k sparsifier are provided for
//! ablations but do not satisfy the contraction.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{derived_rng, rng_from_seed, SimRng, Stream};
use crate::vecops::{dot, norm_sq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CompressorKind {
    Identity,
    TopK(usize),
    /// `(‖x‖₁ / K) · sign(x)`.
    ScaledSign,
    /// `sign(x)` elementwise. Not contraction-compliant.
    RawSign,
    /// `k` uniformly chosen coordinates scaled by `K/k`.
    RandK(usize),
}

/// Operator kind together with the dimension it acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CompressorSpec {
    kind: CompressorKind,
    dim: usize,
}

/// Distortion factor of an operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Delta {
    /// The contraction holds deterministically with this `δ`.
    Exact(f64),
    /// Nominal `δ` that only has an in-expectation reading.
    InExpectation(f64),
    NonContractive,
}

impl Delta {
    pub fn value(self) -> Option<f64> {
        match self {
            Delta::Exact(d) | Delta::InExpectation(d) => Some(d),
            Delta::NonContractive => None,
        }
    }

    pub fn is_exact(self) -> bool {
        matches!(self, Delta::Exact(_))
    }
}

impl CompressorSpec {
    pub fn new(kind: CompressorKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("compressor dimension must be >= 1".into()));
        }
        if let CompressorKind::TopK(k) | CompressorKind::RandK(k) = kind {
            if k == 0 || k > dim {
                return Err(Error::InvalidArgument(format!("k must satisfy 1 <= k <= K, got k={k} K={dim}")));
            }
        }
        Ok(Self { kind, dim })
    }

    pub fn identity(dim: usize) -> Self {
        Self { kind: CompressorKind::Identity, dim }
    }

    pub fn top_k(k: usize, dim: usize) -> Result<Self> {
        Self::new(CompressorKind::TopK(k), dim)
    }

    /// Parses `identity`, `topk:k`, `signscaled`, `signraw` or `randk:k`.
    pub fn parse(text: &str, dim: usize) -> Result<Self> {
        let kind: CompressorKind = text.parse()?;
        Self::new(kind, dim)
    }

    pub fn kind(&self) -> CompressorKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn delta(&self) -> Delta {
        let dim = self.dim as f64;
        match self.kind {
            CompressorKind::Identity => Delta::Exact(1.0),
            CompressorKind::TopK(k) => Delta::Exact(dim / k as f64),
            // sup_x 1 − ‖x‖₁²/(K‖x‖₂²) = 1 − 1/K, attained at one-hot inputs.
            CompressorKind::ScaledSign => Delta::Exact(dim),
            CompressorKind::RawSign => Delta::NonContractive,
            CompressorKind::RandK(k) => Delta::InExpectation(dim / k as f64),
        }
    }

    pub fn is_compliant(&self) -> bool {
        self.delta().is_exact()
    }

    /// Bits needed to transmit one compressed vector.
    pub fn bit_cost(&self, value_bits: u32) -> u64 {
        let vb = u64::from(value_bits);
        let dim = self.dim as u64;
        match self.kind {
            CompressorKind::Identity => dim * vb,
            CompressorKind::TopK(k) => k as u64 * (vb + index_bits(self.dim)),
            CompressorKind::ScaledSign => dim + vb,
            CompressorKind::RawSign => dim,
            // Indices are reproducible from a shared seed.
            CompressorKind::RandK(k) => k as u64 * vb,
        }
    }
}

/// `⌈log₂ K⌉`.
pub fn index_bits(dim: usize) -> u64 {
    if dim <= 1 {
        0
    } else {
        u64::from(usize::BITS - (dim - 1).leading_zeros())
    }
}

impl FromStr for CompressorKind {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let parse_k = |arg: &str| -> Result<usize> {
            arg.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid k in compressor string {text:?}")))
        };
        match text.trim().split_once(':') {
            None => match text.trim() {
                "identity" => Ok(CompressorKind::Identity),
                "signscaled" => Ok(CompressorKind::ScaledSign),
                "signraw" => Ok(CompressorKind::RawSign),
                other => Err(Error::Config(format!("unknown compressor {other:?}"))),
            },
            Some(("topk", k)) => Ok(CompressorKind::TopK(parse_k(k)?)),
            Some(("randk", k)) => Ok(CompressorKind::RandK(parse_k(k)?)),
            Some(_) => Err(Error::Config(format!("unknown compressor {text:?}"))),
        }
    }
}

impl fmt::Display for CompressorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompressorKind::Identity => write!(f, "identity"),
            CompressorKind::TopK(k) => write!(f, "topk:{k}"),
            CompressorKind::ScaledSign => write!(f, "signscaled"),
            CompressorKind::RawSign => write!(f, "signraw"),
            CompressorKind::RandK(k) => write!(f, "randk:{k}"),
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Stateful operator. Only `rand_k` uses the private RNG.
#[derive(Debug, Clone)]
pub struct Compressor {
    spec: CompressorSpec,
    rng: Option<SimRng>,
    order: Vec<usize>,
}

impl Compressor {
    pub fn new(spec: CompressorSpec, seed: u64) -> Self {
        let rng = matches!(spec.kind, CompressorKind::RandK(_)).then(|| rng_from_seed(seed));
        Self { spec, rng, order: (0..spec.dim).collect() }
    }

    pub fn spec(&self) -> &CompressorSpec {
        &self.spec
    }

    /// Writes `Q(x)` into `out`. Both slices must have length `K`.
    #[inline]
    pub fn apply(&mut self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.spec.dim);
        debug_assert_eq!(out.len(), self.spec.dim);
        match self.spec.kind {
            CompressorKind::Identity => out.copy_from_slice(x),
            CompressorKind::TopK(k) => {
                if k == self.spec.dim {
                    out.copy_from_slice(x);
                    return;
                }
                let order = &mut self.order;
                for (i, slot) in order.iter_mut().enumerate() {
                    *slot = i;
                }
                // Largest magnitude first, ties to the lower index.
                let by_magnitude = |a: &usize, b: &usize| {
                    x[*b].abs().total_cmp(&x[*a].abs()).then(a.cmp(b))
                };
                order.select_nth_unstable_by(k - 1, by_magnitude);
                out.iter_mut().for_each(|o| *o = 0.0);
                for &i in &order[..k] {
                    out[i] = x[i];
                }
            }
            CompressorKind::ScaledSign => {
                let scale = x.iter().map(|v| v.abs()).sum::<f64>() / self.spec.dim as f64;
                for (o, v) in out.iter_mut().zip(x) {
                    *o = scale * sign(*v);
                }
            }
            CompressorKind::RawSign => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = sign(*v);
                }
            }
            CompressorKind::RandK(k) => {
                let rng = self.rng.as_mut().expect("rand_k compressor owns an RNG");
                let scale = self.spec.dim as f64 / k as f64;
                out.iter_mut().for_each(|o| *o = 0.0);
                for i in index::sample(rng, self.spec.dim, k) {
                    out[i] = scale * x[i];
                }
            }
        }
    }

    pub fn compress(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.spec.dim {
            return Err(Error::DimensionMismatch { expected: self.spec.dim, got: x.len() });
        }
        let mut out = vec![0.0; x.len()];
        self.apply(x, &mut out);
        Ok(out)
    }
}

/// One-shot compression. `rand_k` draws from a fixed default stream; use a
/// seeded [`Compressor`] when reproducibility across calls matters.
pub fn compress(spec: &CompressorSpec, x: &[f64]) -> Result<Vec<f64>> {
    Compressor::new(*spec, 0).compress(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport {
    pub max_ratio: f64,
    /// `1 − 1/δ`, or `None` for non-contractive operators.
    pub bound: Option<f64>,
    pub pass: bool,
}

/// Maximum of `‖Q(x) − x‖² / ‖x‖²` over standard-normal draws plus one-hot,
/// constant, alternating and large-magnitude inputs.
///
/// For `rand_k` the ratio is averaged over the operator's own randomness,
/// since only an in-expectation reading is available.
pub fn verify_contraction(spec: &CompressorSpec, trials: usize, seed: u64) -> ContractionReport {
    let dim = spec.dim;
    let mut rng = derived_rng(seed, Stream::Checker, 0);
    let mut compressor = Compressor::new(*spec, crate::rng::derive_seed(seed, Stream::RandK, 0));
    let mut inputs: Vec<Vec<f64>> = Vec::new();
    for i in 0..dim {
        let mut e = vec![0.0; dim];
        e[i] = 1.0;
        inputs.push(e.clone());
        e[i] = 100.0;
        inputs.push(e);
    }
    inputs.push(vec![1.0; dim]);
    inputs.push((0..dim).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect());
    for _ in 0..trials {
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        inputs.push((0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect());
    }

    let repeats = if matches!(spec.kind, CompressorKind::RandK(_)) { 64 } else { 1 };
    let mut out = vec![0.0; dim];
    let mut max_ratio = 0.0_f64;
    for x in &inputs {
        let denom = norm_sq(x);
        if denom == 0.0 {
            continue;
        }
        let mut acc = 0.0;
        for _ in 0..repeats {
            compressor.apply(x, &mut out);
            acc += out.iter().zip(x).map(|(q, v)| (q - v) * (q - v)).sum::<f64>();
        }
        max_ratio = max_ratio.max(acc / repeats as f64 / denom);
    }

    match spec.delta() {
        Delta::NonContractive => ContractionReport { max_ratio, bound: None, pass: false },
        d => {
            let bound = 1.0 - 1.0 / d.value().unwrap();
            ContractionReport { max_ratio, bound: Some(bound), pass: max_ratio <= bound + 1e-12 }
        }
    }
}

/// `⟨Q(x), x⟩ − ‖x‖²/(2δ)`; nonnegative for compliant operators.
pub fn acute_angle_margin(compressor: &mut Compressor, x: &[f64]) -> f64 {
    let delta = compressor.spec().delta().value().unwrap_or(f64::INFINITY);
    let mut out = vec![0.0; x.len()];
    compressor.apply(x, &mut out);
    dot(&out, x) - norm_sq(x) / (2.0 * delta)
}
