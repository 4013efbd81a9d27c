//! The two-phase optimizer.
//!
//! Phase 1 (**warmup**): `t_warmup` steps of original Adam over the exact
//! mean of the per-worker gradients — full precision, nothing compressed,
//! bias-corrected first and second moments.
//!
//! Phase 2 (**squeeze**): the second moment is frozen at its warmup-end
//! value and never written again; each step, every worker forms a candidate
//! momentum from the *shared* previous momentum and its local gradient, the
//! candidates go through the compressed error-compensated allreduce, and the
//! model moves along the returned global momentum with per-coordinate rates
//! `gamma / max(sqrt(v_frozen), eta_floor)`.
//!
//! The net effect is momentum SGD whose per-coordinate learning rates were
//! preconditioned by a short run of Adam, with compression error recycled
//! through the residual states rather than lost.

use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::collective::CollectiveState;
use crate::compress::CompressorSpec;
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::numerics::DenseVector;
use crate::problems::Problem;
use crate::rng::{derive_rng, stream};

/// Learning-rate schedule. Constant unless a step-decay hook is requested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { gamma: f64 },
    StepDecay { gamma: f64, decay: f64, every: u64 },
}

impl LrSchedule {
    /// Rate used by the step with 0-based index `t`.
    pub fn at(&self, t: u64) -> f64 {
        match self {
            LrSchedule::Constant { gamma } => *gamma,
            LrSchedule::StepDecay { gamma, decay, every } => {
                gamma * decay.powi((t / every) as i32)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            LrSchedule::Constant { gamma } => *gamma > 0.0 && gamma.is_finite(),
            LrSchedule::StepDecay { gamma, decay, every } => {
                *gamma > 0.0 && gamma.is_finite() && *decay > 0.0 && *decay <= 1.0 && *every > 0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config("invalid learning-rate schedule"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    /// Additive denominator constant of the warmup Adam update.
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Floor on `sqrt(v_frozen)` in the squeeze-phase denominator; guards
    /// coordinates no gradient ever touched.
    #[serde(default = "default_eta")]
    pub eta_floor: f64,
    pub t_warmup: u64,
    pub t_total: u64,
    pub compressor: CompressorSpec,
    /// Freeze the bias-corrected variance instead of the raw accumulator.
    /// Off by default; kept as a switch because either reading is defensible.
    #[serde(default)]
    pub freeze_bias_corrected: bool,
}

fn default_eta() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.eta < 0.0 || !self.eta.is_finite() {
            return Err(Error::config("eta must be a finite non-negative number"));
        }
        if !(self.eta_floor > 0.0) || !self.eta_floor.is_finite() {
            return Err(Error::config("eta_floor must be a positive finite number"));
        }
        if self.t_warmup == 0 {
            return Err(Error::config("t_warmup must be at least 1"));
        }
        if self.t_total <= self.t_warmup {
            return Err(Error::config(format!(
                "t_total {} must exceed t_warmup {}",
                self.t_total, self.t_warmup
            )));
        }
        self.compressor.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Squeeze,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Squeeze => "squeeze",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "warmup" => Ok(Phase::Warmup),
            "squeeze" => Ok(Phase::Squeeze),
            other => Err(Error::Decode(format!("unknown phase {other:?}"))),
        }
    }
}

/// Mutable optimizer state. `m` is the post-gather global momentum and is by
/// construction identical on every simulated worker.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub x: DenseVector,
    pub m: DenseVector,
    pub v: DenseVector,
    /// Set exactly once, at the warmup -> squeeze transition; never written
    /// again.
    pub v_frozen: Option<DenseVector>,
    /// Completed steps.
    pub t: u64,
    pub phase: Phase,
}

impl OptimizerState {
    pub fn new(x0: DenseVector) -> Self {
        let d = x0.len();
        OptimizerState {
            x: x0,
            m: DenseVector::zeros(d),
            v: DenseVector::zeros(d),
            v_frozen: None,
            t: 0,
            phase: Phase::Warmup,
        }
    }

    fn check_gradients(&self, grads: &[DenseVector]) -> Result<()> {
        if grads.is_empty() {
            return Err(Error::config("need at least one worker gradient"));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != self.x.len() {
                return Err(Error::dim(format!(
                    "worker {i} gradient len {} vs model len {}",
                    g.len(),
                    self.x.len()
                )));
            }
        }
        Ok(())
    }
}

/// One step of original Adam over the exact gradient mean. On completing
/// step `t_warmup` the variance is frozen and the phase flips to squeeze.
pub fn adam_warmup_step(
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
    per_worker_gradients: &[DenseVector],
) -> Result<()> {
    if state.phase != Phase::Warmup {
        return Err(Error::State("adam_warmup_step outside warmup phase".into()));
    }
    state.check_gradients(per_worker_gradients)?;
    let g_bar = DenseVector::mean(per_worker_gradients)?;
    let gamma = cfg.lr.at(state.t);

    state.m = DenseVector::lin_comb(cfg.beta1, &state.m, 1.0 - cfg.beta1, &g_bar)?;
    let g_sq = g_bar.elementwise_multiply(&g_bar)?;
    state.v = DenseVector::lin_comb(cfg.beta2, &state.v, 1.0 - cfg.beta2, &g_sq)?;

    // bias correction with 1-indexed step count
    let t1 = (state.t + 1) as i32;
    let m_hat = state.m.scale(1.0 / (1.0 - cfg.beta1.powi(t1)))?;
    let v_hat = state.v.scale(1.0 / (1.0 - cfg.beta2.powi(t1)))?;
    let denom = v_hat.elementwise_sqrt()?.add_scalar(cfg.eta)?;
    // m_hat is exactly zero wherever denom is, so the subnormal floor only
    // ever turns 0/0 into 0
    let step_dir = m_hat.elementwise_divide(&denom, f64::MIN_POSITIVE)?;
    state.x = DenseVector::lin_comb(1.0, &state.x, -gamma, &step_dir)?;
    state.t += 1;

    if state.t == cfg.t_warmup {
        let frozen = if cfg.freeze_bias_corrected {
            state.v.scale(1.0 / (1.0 - cfg.beta2.powi(state.t as i32)))?
        } else {
            state.v.clone()
        };
        state.v_frozen = Some(frozen);
        state.phase = Phase::Squeeze;
    }
    Ok(())
}

/// One squeeze step: candidates from the shared momentum, compressed
/// allreduce, preconditioned model update.
pub fn squeeze_step(
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
    collective: &mut CollectiveState,
    per_worker_gradients: &[DenseVector],
) -> Result<()> {
    let candidates = squeeze_candidates(cfg, state, per_worker_gradients)?;
    let m_new = collective.compressed_allreduce(&candidates)?;
    apply_squeeze_update(cfg, state, m_new)
}

/// Ablation variant: error-feedback-compress the raw gradients, average them
/// losslessly, and update the momentum locally from the result. The caller
/// provides a collective whose server side is the identity codec.
pub fn squeeze_step_gradient_compressed(
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
    collective: &mut CollectiveState,
    per_worker_gradients: &[DenseVector],
) -> Result<()> {
    check_squeeze_preconditions(state, per_worker_gradients)?;
    let g_bar = collective.compressed_allreduce(per_worker_gradients)?;
    let m_new = DenseVector::lin_comb(cfg.beta1, &state.m, 1.0 - cfg.beta1, &g_bar)?;
    apply_squeeze_update(cfg, state, m_new)
}

fn check_squeeze_preconditions(state: &OptimizerState, grads: &[DenseVector]) -> Result<()> {
    if state.phase != Phase::Squeeze {
        return Err(Error::State("squeeze step outside squeeze phase".into()));
    }
    if state.v_frozen.is_none() {
        return Err(Error::State("squeeze phase without frozen variance".into()));
    }
    state.check_gradients(grads)
}

/// Worker `i`'s local candidate momentum: `beta1 * m + (1 - beta1) * g_i`,
/// built from the shared post-gather momentum.
pub fn squeeze_candidates(
    cfg: &OptimizerConfig,
    state: &OptimizerState,
    per_worker_gradients: &[DenseVector],
) -> Result<Vec<DenseVector>> {
    check_squeeze_preconditions(state, per_worker_gradients)?;
    per_worker_gradients
        .iter()
        .map(|g| DenseVector::lin_comb(cfg.beta1, &state.m, 1.0 - cfg.beta1, g))
        .collect()
}

fn apply_squeeze_update(
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
    m_new: DenseVector,
) -> Result<()> {
    let gamma = cfg.lr.at(state.t);
    let v_frozen = state.v_frozen.as_ref().expect("checked above");
    let denom = v_frozen.elementwise_sqrt()?;
    let step_dir = m_new.elementwise_divide(&denom, cfg.eta_floor)?;
    state.m = m_new;
    state.x = DenseVector::lin_comb(1.0, &state.x, -gamma, &step_dir)?;
    state.t += 1;
    Ok(())
}

/// Which quantity the squeeze phase compresses and averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SqueezeMode {
    /// Compress candidate momenta (the main algorithm).
    Momentum,
    /// Compress raw gradients, update momentum locally (ablation).
    Gradient,
}

/// Knobs of the driver loop that do not affect the trajectory.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Evaluate full loss/gradient metrics every this many steps (the final
    /// step is always evaluated).
    pub eval_every: u64,
    /// Record wall-clock time in the metrics. Off gives byte-identical
    /// reruns.
    pub record_wall_time: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { eval_every: 1, record_wall_time: true }
    }
}

/// A finished run: evaluation records plus final state.
#[derive(Debug)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub state: OptimizerState,
    pub bits_total: u64,
    pub eps_worker_max: f64,
    pub eps_server_max: f64,
}

/// Drive a full run: `t_warmup` Adam steps, then squeeze steps to `t_total`.
///
/// Per-worker gradient streams are derived from
/// `(master_seed, GRADIENT, worker, step)`, so the sampled sequence of any
/// worker is independent of how many other workers exist.
pub fn run(
    cfg: &OptimizerConfig,
    problem: &Problem,
    n_workers: usize,
    master_seed: u64,
    mode: SqueezeMode,
    opts: &RunOptions,
) -> Result<RunOutput> {
    cfg.validate()?;
    if n_workers != problem.n_workers() {
        return Err(Error::config(format!(
            "n_workers {n_workers} vs problem shards {}",
            problem.n_workers()
        )));
    }
    let d = problem.param_dim();
    let mut state = OptimizerState::new(problem.initial_point(master_seed));
    let mut collective = match mode {
        SqueezeMode::Momentum => CollectiveState::new(n_workers, d, cfg.compressor.clone())?,
        SqueezeMode::Gradient => CollectiveState::with_compressors(
            n_workers,
            d,
            cfg.compressor.clone(),
            CompressorSpec::Identity,
        )?,
    };

    let started = Instant::now();
    let mut records = Vec::new();
    let mut eps_worker_max = 0.0_f64;
    let mut eps_server_max = 0.0_f64;

    for step in 1..=cfg.t_total {
        let grads = sample_worker_gradients(problem, n_workers, master_seed, step, &state.x)
            .map_err(|e| at_step(step, e))?;
        match state.phase {
            Phase::Warmup => {
                adam_warmup_step(cfg, &mut state, &grads).map_err(|e| at_step(step, e))?
            }
            Phase::Squeeze => match mode {
                SqueezeMode::Momentum => {
                    squeeze_step(cfg, &mut state, &mut collective, &grads)
                        .map_err(|e| at_step(step, e))?
                }
                SqueezeMode::Gradient => {
                    squeeze_step_gradient_compressed(cfg, &mut state, &mut collective, &grads)
                        .map_err(|e| at_step(step, e))?
                }
            },
        }

        let in_squeeze = step > cfg.t_warmup;
        if in_squeeze {
            eps_worker_max = eps_worker_max.max(collective.max_worker_residual_norm_sum());
            eps_server_max = eps_server_max.max(collective.server_residual_norm_sum());
        }

        if step % opts.eval_every == 0 || step == cfg.t_total {
            let (grad, loss) = problem
                .full_gradient_and_loss(&state.x)
                .map_err(|e| at_step(step, e))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss diverged at step {step}: loss={loss}, |x|={:.3e}, |m|={:.3e}",
                    state.x.l2_norm(),
                    state.m.l2_norm()
                )));
            }
            let phase = if in_squeeze { Phase::Squeeze } else { Phase::Warmup };
            let (bits_step, bits_cum, eps_w, eps_s) = if in_squeeze {
                (
                    collective.bits_for_step().unwrap_or(0),
                    collective.bits_sent_total(),
                    collective.max_worker_residual_norm_sum(),
                    collective.server_residual_norm_sum(),
                )
            } else {
                (0, 0, 0.0, 0.0)
            };
            records.push(MetricsRecord {
                t: step,
                phase,
                loss,
                grad_norm_sq: grad.iter().map(|g| g * g).sum(),
                grad_norm_sq_v: weighted_grad_norm_sq(&grad, &state, cfg.eta_floor),
                bits_step,
                bits_cum,
                eps_worker: eps_w,
                eps_server: eps_s,
                wall_ms: if opts.record_wall_time {
                    started.elapsed().as_millis() as u64
                } else {
                    0
                },
            });
        }
    }

    Ok(RunOutput {
        records,
        state,
        bits_total: collective.bits_sent_total(),
        eps_worker_max,
        eps_server_max,
    })
}

/// Sample all workers' gradients at the current iterate for one step.
pub fn sample_worker_gradients(
    problem: &Problem,
    n_workers: usize,
    master_seed: u64,
    step: u64,
    x: &DenseVector,
) -> Result<Vec<DenseVector>> {
    (0..n_workers)
        .map(|i| {
            let mut rng = derive_rng(master_seed, &[stream::GRADIENT, i as u64, step]);
            Ok(problem.sample_gradient(i, x, &mut rng)?.gradient)
        })
        .collect()
}

/// `sum_j g_j^2 / max(sqrt(v_j), floor)` with `v` the frozen variance once
/// set, the live one during warmup.
fn weighted_grad_norm_sq(grad: &DenseVector, state: &OptimizerState, floor: f64) -> f64 {
    let v = state.v_frozen.as_ref().unwrap_or(&state.v);
    grad.iter()
        .zip(v.iter())
        .map(|(g, vj)| g * g / vj.sqrt().max(floor))
        .sum()
}

fn at_step(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("step {step}: {msg}")),
        Error::Domain(msg) => Error::NonFinite(format!("step {step}: {msg}")),
        other => other,
    }
}
