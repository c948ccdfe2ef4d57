//! Per-run traces and their CSV forms.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Traces abort once `E_t` exceeds this value.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

pub const SINGLE_AGENT_COLUMNS: [&str; 8] = ["t", "E", "Dnorm", "psi", "e_norm", "h_norm", "eproj_norm", "bits"];
pub const MULTI_AGENT_COLUMNS: [&str; 4] = ["M", "Ebar", "uplink_bits_cum", "dnorm_avg_iterate"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FleetColumns {
    pub m: usize,
    /// `(1/M) Σ‖e_{i,t}‖²`.
    pub ebar: f64,
    pub uplink_bits_cum: u64,
    /// `‖V̂_{θ̄_t} − V̂_{θ*}‖²_D` for the weighted average iterate.
    pub dnorm_avg_iterate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: u64,
    /// `‖θ_t − θ*‖²`.
    pub error_sq: f64,
    /// `‖V̂_{θ_t} − V̂_{θ*}‖²_D`.
    pub d_norm_err: f64,
    /// Lyapunov value: `ψ_t` for one agent, the single-trial `Ξ_t` for a fleet.
    pub psi: f64,
    pub e_norm: f64,
    pub h_norm: f64,
    pub eproj_norm: f64,
    /// Cumulative bits sent up to `t`.
    pub bits: u64,
    pub fleet: Option<FleetColumns>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub config_hash: String,
    pub seed: u64,
    pub trial: usize,
    pub alpha: f64,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub meta: TraceMeta,
    pub records: Vec<TraceRecord>,
    pub diverged: bool,
}

impl Trace {
    pub fn new(meta: TraceMeta) -> Self {
        Self { meta, records: Vec::new(), diverged: false }
    }

    pub fn is_multi_agent(&self) -> bool {
        self.records.first().is_some_and(|r| r.fleet.is_some())
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t as f64).collect()
    }

    pub fn errors(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.error_sq).collect()
    }

    pub fn to_csv(&self) -> String {
        let multi = self.is_multi_agent();
        let mut out = String::new();
        writeln!(out, "# config_hash={} seed={} trial={} alpha={} delta={} diverged={}",
            self.meta.config_hash,
            self.meta.seed,
            self.meta.trial,
            self.meta.alpha,
            self.meta.delta.map_or("none".to_string(), |d| d.to_string()),
            self.diverged
        )
        .unwrap();
        out.push_str(&header(multi));
        out.push('\n');
        for r in &self.records {
            write!(out, "{},{},{},{},{},{},{},{}", r.t, r.error_sq, r.d_norm_err, r.psi, r.e_norm, r.h_norm, r.eproj_norm, r.bits).unwrap();
            if let Some(f) = r.fleet {
                write!(out, ",{},{},{},{}", f.m, f.ebar, f.uplink_bits_cum, f.dnorm_avg_iterate).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

fn header(multi: bool) -> String {
    let mut cols: Vec<&str> = SINGLE_AGENT_COLUMNS.to_vec();
    if multi {
        cols.extend(MULTI_AGENT_COLUMNS);
    }
    cols.join(",")
}

/// Numeric table read back from a trace CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let columns: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Insufficient("empty CSV".into()))?
            .split(',')
            .map(|c| c.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Config(format!("CSV row {}: {e}", i + 1)))?;
            if row.len() != columns.len() {
                return Err(Error::Config(format!("CSV row {} has {} fields, expected {}", i + 1, row.len(), columns.len())));
            }
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }
}

/// Across-trial mean and sample standard deviation per recorded `t`.
///
/// Trials that diverged stop contributing after their last record; the
/// `trials` column counts contributors per row.
pub fn aggregate_csv(traces: &[Trace]) -> String {
    let multi = traces.iter().any(Trace::is_multi_agent);
    let mut value_cols: Vec<&str> = SINGLE_AGENT_COLUMNS[1..].to_vec();
    if multi {
        value_cols.extend(MULTI_AGENT_COLUMNS);
    }
    let mut out = String::from("t,trials");
    for c in &value_cols {
        write!(out, ",{c}_mean,{c}_std").unwrap();
    }
    out.push('\n');

    let longest = traces.iter().map(|t| t.records.len()).max().unwrap_or(0);
    for i in 0..longest {
        let rows: Vec<&TraceRecord> = traces.iter().filter_map(|t| t.records.get(i)).collect();
        let t = rows[0].t;
        write!(out, "{t},{}", rows.len()).unwrap();
        for col in 0..value_cols.len() {
            let values: Vec<f64> = rows.iter().map(|r| record_value(r, col)).collect();
            let (mean, std) = mean_std(&values);
            write!(out, ",{mean},{std}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn record_value(r: &TraceRecord, col: usize) -> f64 {
    let f = r.fleet;
    match col {
        0 => r.error_sq,
        1 => r.d_norm_err,
        2 => r.psi,
        3 => r.e_norm,
        4 => r.h_norm,
        5 => r.eproj_norm,
        6 => r.bits as f64,
        7 => f.map_or(f64::NAN, |f| f.m as f64),
        8 => f.map_or(f64::NAN, |f| f.ebar),
        9 => f.map_or(f64::NAN, |f| f.uplink_bits_cum as f64),
        _ => f.map_or(f64::NAN, |f| f.dnorm_avg_iterate),
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean of `E_t` across trials at each record index shared by all trials.
pub fn mean_error_curve(traces: &[Trace]) -> (Vec<f64>, Vec<f64>) {
    let shortest = traces.iter().map(|t| t.records.len()).min().unwrap_or(0);
    let times = (0..shortest).map(|i| traces[0].records[i].t as f64).collect();
    let means = (0..shortest)
        .map(|i| traces.iter().map(|t| t.records[i].error_sq).sum::<f64>() / traces.len() as f64)
        .collect();
    (times, means)
}

/// FNV-1a, used to tag traces with the config that produced them.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}
