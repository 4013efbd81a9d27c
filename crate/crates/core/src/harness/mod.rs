//! Experiment driver: configuration, run orchestration, metric emission,
//! A/B comparison, and the verification suites the CLI exposes.

mod verify;

pub use verify::{
    run_suite, updating_form_checks, variance_scaling_checks_full, CheckOutcome, VerifyReport,
    VerifySuite,
};

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::compress::CompressorSpec;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsRecord, RunSummary};
use crate::optimizer::{self, OptimizerConfig, RunOptions, SqueezeMode};
use crate::problems::{Problem, ProblemSpec};
use crate::rng::{derive_rng, stream};

/// Environment variable overriding the output directory.
pub const OUT_DIR_ENV: &str = "SQUEEZE_OUT_DIR";

/// One experiment, loadable from flat JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub optimizer: OptimizerConfig,
    pub n_workers: usize,
    /// Master seed; every stream in the run derives from it.
    pub master_seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Where metrics.csv / summary.json land; overridable by CLI flag or the
    /// `SQUEEZE_OUT_DIR` environment variable.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Wall-clock column in the metrics. Disable for byte-identical reruns.
    #[serde(default = "default_true")]
    pub record_wall_time: bool,
    /// Draws for the post-run gradient-variance probe; 0 disables it.
    #[serde(default)]
    pub sigma_probe_draws: usize,
}

fn default_eval_every() -> u64 {
    1
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        self.optimizer.validate()?;
        if self.n_workers == 0 {
            return Err(Error::config("n_workers must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        Ok(())
    }

    fn run_options(&self) -> RunOptions {
        RunOptions {
            eval_every: self.eval_every,
            record_wall_time: self.record_wall_time,
        }
    }
}

/// In-memory result of [`execute`].
#[derive(Debug)]
pub struct ExperimentResult {
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
    pub final_x: crate::DenseVector,
}

/// Run the experiment described by `cfg` and build its summary. Pure except
/// for the clock; writes nothing.
pub fn execute(cfg: &RunConfig) -> Result<ExperimentResult> {
    execute_variant(cfg, &cfg.optimizer.compressor.clone(), SqueezeMode::Momentum)
}

fn execute_variant(
    cfg: &RunConfig,
    compressor: &CompressorSpec,
    mode: SqueezeMode,
) -> Result<ExperimentResult> {
    cfg.validate()?;
    let problem = Problem::build(&cfg.problem, cfg.n_workers)?;
    let mut opt_cfg = cfg.optimizer.clone();
    opt_cfg.compressor = compressor.clone();
    let out = optimizer::run(
        &opt_cfg,
        &problem,
        cfg.n_workers,
        cfg.master_seed,
        mode,
        &cfg.run_options(),
    )?;

    let squeeze_steps = opt_cfg.t_total - opt_cfg.t_warmup;
    let d = problem.param_dim();
    let n = cfg.n_workers as u64;
    // an uncompressed step moves every element twice across (n-1) links
    let identity_f64 = 2 * (n - 1) * d as u64 * 64;
    let identity_f32 = 2 * (n - 1) * d as u64 * 32;
    let bits_per_squeeze_step = out.bits_total as f64 / squeeze_steps as f64;
    let ratio = |base: u64| {
        (base > 0).then(|| bits_per_squeeze_step / base as f64)
    };

    let elements_ratio = match compressor {
        CompressorSpec::Identity | CompressorSpec::OneBit => Some(1.0),
        CompressorSpec::TopK { k_percent } => Some(k_percent / 100.0),
        CompressorSpec::StochasticQuant { .. } => Some(1.0),
    };
    let note = match compressor {
        CompressorSpec::TopK { k_percent } => Some(format!(
            "top-k sends {k_percent}% of the elements, but each kept entry costs \
             96 wire bits (index + value); the bit ratio is therefore larger than \
             the element ratio"
        )),
        _ => None,
    };

    let sigma_sq_mean = if cfg.sigma_probe_draws >= 2 {
        let mut rng = derive_rng(cfg.master_seed, &[stream::SIGMA_PROBE]);
        let per_worker = problem.measure_variance(&out.state.x, cfg.sigma_probe_draws, &mut rng)?;
        Some(per_worker.iter().sum::<f64>() / per_worker.len() as f64)
    } else {
        None
    };

    let last = out
        .records
        .last()
        .ok_or_else(|| Error::State("run produced no metrics".into()))?;
    let summary = RunSummary {
        compressor: compressor.clone(),
        n_workers: cfg.n_workers,
        param_dim: d,
        t_warmup: opt_cfg.t_warmup,
        t_total: opt_cfg.t_total,
        master_seed: cfg.master_seed,
        final_loss: last.loss,
        final_grad_norm_sq: last.grad_norm_sq,
        bits_total: out.bits_total,
        bits_per_squeeze_step,
        identity_bits_per_step_f64: identity_f64,
        identity_bits_per_step_f32: identity_f32,
        bits_ratio_vs_identity_f64: ratio(identity_f64),
        bits_ratio_vs_identity_f32: ratio(identity_f32),
        elements_ratio,
        eps_worker_max: out.eps_worker_max,
        eps_server_max: out.eps_server_max,
        epsilon_measured: 2.0 * out.eps_worker_max.max(out.eps_server_max),
        v_min: out
            .state
            .v_frozen
            .as_ref()
            .map(|v| v.iter().copied().fold(f64::INFINITY, f64::min)),
        sigma_sq_mean,
        f_star: problem.known_optimum(),
        note,
    };
    Ok(ExperimentResult { records: out.records, summary, final_x: out.state.x })
}

/// Resolve the output directory: CLI flag beats the environment variable
/// beats the config, defaulting to `squeeze_out`.
pub fn resolve_output_dir(cfg: &RunConfig, cli_override: Option<&Path>) -> PathBuf {
    if let Some(dir) = cli_override {
        return dir.to_path_buf();
    }
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("squeeze_out"))
}

/// Run and persist: `metrics.csv` + `summary.json` under `out_dir`.
pub fn run_to_files(cfg: &RunConfig, out_dir: &Path) -> Result<ExperimentResult> {
    let result = execute(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    metrics::write_csv(&out_dir.join("metrics.csv"), &result.records)?;
    let json = serde_json::to_string_pretty(&result.summary)?;
    std::fs::write(out_dir.join("summary.json"), json + "\n")?;
    Ok(result)
}

/// A/B variants for `compare`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Identity,
    OneBit,
    TopK,
    /// Error-feedback-compress the gradients instead of the momentum
    /// (momentum then updates locally from the lossless average).
    GradientCompression,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Variant::Identity),
            "one_bit" | "one-bit" => Ok(Variant::OneBit),
            "top_k" | "top-k" => Ok(Variant::TopK),
            "gradient_compression" | "gradient-compression" => Ok(Variant::GradientCompression),
            other => Err(Error::config(format!("unknown variant {other:?}"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Identity => "identity",
            Variant::OneBit => "one_bit",
            Variant::TopK => "top_k",
            Variant::GradientCompression => "gradient_compression",
        }
    }

    fn compressor_and_mode(self, cfg: &RunConfig) -> (CompressorSpec, SqueezeMode) {
        match self {
            Variant::Identity => (CompressorSpec::Identity, SqueezeMode::Momentum),
            Variant::OneBit => (CompressorSpec::OneBit, SqueezeMode::Momentum),
            Variant::TopK => {
                let spec = match &cfg.optimizer.compressor {
                    spec @ CompressorSpec::TopK { .. } => spec.clone(),
                    _ => CompressorSpec::TopK { k_percent: 10.0 },
                };
                (spec, SqueezeMode::Momentum)
            }
            Variant::GradientCompression => {
                (cfg.optimizer.compressor.clone(), SqueezeMode::Gradient)
            }
        }
    }
}

/// Output of a variant comparison: per-evaluation-step losses, aligned by
/// construction (identical seeds and warmup across variants).
#[derive(Debug)]
pub struct CompareOutput {
    pub variants: Vec<Variant>,
    pub steps: Vec<u64>,
    /// `losses[v][row]` for variant `v`.
    pub losses: Vec<Vec<f64>>,
    pub summaries: Vec<RunSummary>,
}

impl CompareOutput {
    /// Aligned CSV: `t, loss_<variant>...`.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("t");
        for v in &self.variants {
            out.push_str(&format!(",loss_{}", v.label()));
        }
        out.push('\n');
        for (row, t) in self.steps.iter().enumerate() {
            out.push_str(&t.to_string());
            for per_variant in &self.losses {
                out.push_str(&format!(",{}", per_variant[row]));
            }
            out.push('\n');
        }
        out
    }

    /// Final-loss relative gap of each variant against the first.
    pub fn relative_gaps(&self) -> Vec<(Variant, f64)> {
        let base = *self.losses[0].last().expect("non-empty run");
        self.variants
            .iter()
            .zip(self.losses.iter())
            .map(|(v, l)| {
                let last = *l.last().expect("non-empty run");
                (*v, (last - base) / base.abs().max(f64::MIN_POSITIVE))
            })
            .collect()
    }
}

/// Run every variant with identical seeds and problem, collecting aligned
/// per-step losses.
pub fn compare(cfg: &RunConfig, variants: &[Variant]) -> Result<CompareOutput> {
    if variants.len() < 2 {
        return Err(Error::config("compare needs at least two variants"));
    }
    let mut steps: Option<Vec<u64>> = None;
    let mut losses = Vec::with_capacity(variants.len());
    let mut summaries = Vec::with_capacity(variants.len());
    for v in variants {
        let (compressor, mode) = v.compressor_and_mode(cfg);
        let result = execute_variant(cfg, &compressor, mode)?;
        let ts: Vec<u64> = result.records.iter().map(|r| r.t).collect();
        match &steps {
            None => steps = Some(ts),
            Some(prev) => {
                if *prev != ts {
                    return Err(Error::State("variant runs produced misaligned steps".into()));
                }
            }
        }
        losses.push(result.records.iter().map(|r| r.loss).collect());
        summaries.push(result.summary);
    }
    Ok(CompareOutput {
        variants: variants.to_vec(),
        steps: steps.unwrap_or_default(),
        losses,
        summaries,
    })
}

/// Run a comparison and write `compare.csv` under `out_dir`.
pub fn compare_to_files(cfg: &RunConfig, variants: &[Variant], out_dir: &Path) -> Result<CompareOutput> {
    let out = compare(cfg, variants)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("compare.csv"), out.to_csv_string())?;
    Ok(out)
}
