//! Per-step measurements and their on-disk formats.
//!
//! The CSV schema is a stable contract: fixed column order and names, one
//! row per evaluation point. Floats are written in shortest round-trip form,
//! so identical runs produce byte-identical files.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::compress::CompressorSpec;
use crate::error::Result;
use crate::optimizer::Phase;

/// Column order of `metrics.csv`.
pub const CSV_COLUMNS: [&str; 10] = [
    "t",
    "phase",
    "loss",
    "grad_norm_sq",
    "grad_norm_sq_V",
    "bits_step",
    "bits_cum",
    "eps_worker",
    "eps_server",
    "wall_ms",
];

/// One evaluation point along a run.
///
/// `grad_norm_sq_v` is the squared gradient norm weighted by
/// `diag(1/sqrt(v))`, with `v` frozen at the warmup boundary once the squeeze
/// phase starts (during warmup the live `v_t` is used). `eps_worker` is the
/// largest per-worker sum over chunks of residual norms; `eps_server` is the
/// sum over owner chunks of server residual norms. Both are observer reads:
/// computing them never touches optimization state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub t: u64,
    pub phase: Phase,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub grad_norm_sq_v: f64,
    pub bits_step: u64,
    pub bits_cum: u64,
    pub eps_worker: f64,
    pub eps_server: f64,
    pub wall_ms: u64,
}

impl MetricsRecord {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            self.t,
            self.phase.as_str(),
            self.loss,
            self.grad_norm_sq,
            self.grad_norm_sq_v,
            self.bits_step,
            self.bits_cum,
            self.eps_worker,
            self.eps_server,
            self.wall_ms
        )
    }
}

/// Render records into the canonical CSV text.
pub fn to_csv_string(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    out.push_str(&CSV_COLUMNS.join(","));
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
    }
    out
}

pub fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(to_csv_string(records).as_bytes())?;
    Ok(())
}

/// Parse a metrics CSV produced by [`write_csv`], validating the schema.
pub fn read_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().ne(CSV_COLUMNS.iter().copied()) {
        return Err(crate::Error::Decode(format!(
            "unexpected metrics.csv columns: {headers:?}"
        )));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let r = record?;
        let field = |i: usize| -> &str { r.get(i).unwrap_or("") };
        let parse_f = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| crate::Error::Decode(format!("bad float {:?}", field(i))))
        };
        let parse_u = |i: usize| -> Result<u64> {
            field(i)
                .parse()
                .map_err(|_| crate::Error::Decode(format!("bad integer {:?}", field(i))))
        };
        out.push(MetricsRecord {
            t: parse_u(0)?,
            phase: Phase::parse(field(1))?,
            loss: parse_f(2)?,
            grad_norm_sq: parse_f(3)?,
            grad_norm_sq_v: parse_f(4)?,
            bits_step: parse_u(5)?,
            bits_cum: parse_u(6)?,
            eps_worker: parse_f(7)?,
            eps_server: parse_f(8)?,
            wall_ms: parse_u(9)?,
        });
    }
    Ok(out)
}

/// End-of-run summary written next to the metrics as `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub compressor: CompressorSpec,
    pub n_workers: usize,
    pub param_dim: usize,
    pub t_warmup: u64,
    pub t_total: u64,
    pub master_seed: u64,
    pub final_loss: f64,
    pub final_grad_norm_sq: f64,
    /// Total simulated traffic over the run, in bits.
    pub bits_total: u64,
    /// Mean bits per squeeze step (warmup sends nothing through the codec).
    pub bits_per_squeeze_step: f64,
    /// Analytic per-step traffic of an uncompressed run at 64 / 32 bits per
    /// element, for ratio computations against either baseline.
    pub identity_bits_per_step_f64: u64,
    pub identity_bits_per_step_f32: u64,
    pub bits_ratio_vs_identity_f64: Option<f64>,
    pub bits_ratio_vs_identity_f32: Option<f64>,
    /// Fraction of elements actually sent per step (top-k sends `k%` of the
    /// elements but 96 bits each, so the bit ratio is larger than `k%`).
    pub elements_ratio: Option<f64>,
    /// Worst observed residual probes along the run.
    pub eps_worker_max: f64,
    pub eps_server_max: f64,
    /// `2 * max(eps_worker_max, eps_server_max)`: measured stand-in for the
    /// bounded-error constant.
    pub epsilon_measured: f64,
    /// Smallest frozen variance entry (None if the run never left warmup).
    pub v_min: Option<f64>,
    /// Monte-Carlo estimate of per-worker gradient variance at the final
    /// iterate, when the probe is enabled.
    pub sigma_sq_mean: Option<f64>,
    /// Analytic optimum of the objective when known.
    pub f_star: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}
