//! Invariant-verification suites.
//!
//! Each suite re-derives an expected quantity through an independent route
//! (algebraic recursion, exact mean, brute-force selection, Monte-Carlo,
//! central differences) and reports the worst observed deviation against a
//! pinned tolerance. The CLI prints one line per check; any failure is a
//! nonzero exit naming the first failing configuration.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::collective::CollectiveState;
use crate::compress::{compress, top_k_kept, CompressorSpec};
use crate::error::{Error, Result};
use crate::numerics::DenseVector;
use crate::problems::{Problem, ProblemKind, ProblemSpec};
use crate::rng::{derive_rng, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifySuite {
    UpdatingForm,
    IdentityEquiv,
    CodecContracts,
    VarianceScaling,
    FiniteDiff,
}

impl VerifySuite {
    pub const ALL: [VerifySuite; 5] = [
        VerifySuite::UpdatingForm,
        VerifySuite::IdentityEquiv,
        VerifySuite::CodecContracts,
        VerifySuite::VarianceScaling,
        VerifySuite::FiniteDiff,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "updating_form" | "updating-form" => Ok(VerifySuite::UpdatingForm),
            "identity_equiv" | "identity-equiv" => Ok(VerifySuite::IdentityEquiv),
            "codec_contracts" | "codec-contracts" => Ok(VerifySuite::CodecContracts),
            "variance_scaling" | "variance-scaling" => Ok(VerifySuite::VarianceScaling),
            "finite_diff" | "finite-diff" => Ok(VerifySuite::FiniteDiff),
            other => Err(Error::config(format!("unknown verify suite {other:?}"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            VerifySuite::UpdatingForm => "updating_form",
            VerifySuite::IdentityEquiv => "identity_equiv",
            VerifySuite::CodecContracts => "codec_contracts",
            VerifySuite::VarianceScaling => "variance_scaling",
            VerifySuite::FiniteDiff => "finite_diff",
        }
    }
}

/// One named check: the observed worst deviation against its tolerance.
/// For interval checks `observed` is the distance outside the allowed band
/// (zero when inside).
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub tolerance: f64,
    pub observed: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, tolerance: f64, observed: f64) -> Self {
        let passed = observed <= tolerance;
        CheckOutcome { name: name.into(), tolerance, observed, passed }
    }
}

#[derive(Debug)]
pub struct VerifyReport {
    pub suite: VerifySuite,
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_failure(&self) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| !c.passed)
    }
}

/// Run one suite with the given seed.
pub fn run_suite(suite: VerifySuite, seed: u64) -> Result<VerifyReport> {
    let checks = match suite {
        VerifySuite::UpdatingForm => updating_form_checks(seed, 200)?,
        VerifySuite::IdentityEquiv => identity_equiv_checks(seed)?,
        VerifySuite::CodecContracts => codec_contract_checks(seed)?,
        VerifySuite::VarianceScaling => variance_scaling_checks(seed)?,
        VerifySuite::FiniteDiff => finite_diff_checks(seed)?,
    };
    Ok(VerifyReport { suite, checks })
}

/// Compressor grid shared by the recursion-level suites.
fn compressor_grid(seed: u64) -> Vec<CompressorSpec> {
    vec![
        CompressorSpec::Identity,
        CompressorSpec::OneBit,
        CompressorSpec::TopK { k_percent: 10.0 },
        CompressorSpec::StochasticQuant { levels: 4, seed },
    ]
}

fn random_vectors<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Vec<DenseVector> {
    (0..n)
        .map(|_| {
            DenseVector::from_vec_unchecked((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        })
        .collect()
}

/// The effective global momentum recursion, reconstructed from live error
/// states:
///
/// `m_t == beta * m_{t-1} + (1 - beta) * gbar_t + dbar_{t-1} - dbar_t`
///
/// where `dbar` is the mean worker residual plus the server residual. This
/// holds for every codec because error feedback loses nothing — it only
/// delays.
pub fn updating_form_checks(seed: u64, steps: u64) -> Result<Vec<CheckOutcome>> {
    let beta = 0.9;
    let mut checks = Vec::new();
    for spec in compressor_grid(seed) {
        for n in [1usize, 2, 4, 8] {
            for d in [7usize, 64, 1000] {
                let mut coll = CollectiveState::new(n, d, spec.clone())?;
                let mut m = DenseVector::zeros(d);
                let mut rng =
                    derive_rng(seed, &[stream::VERIFY, 1, n as u64, d as u64]);
                let mut max_err = 0.0_f64;
                for _ in 0..steps {
                    let grads = random_vectors(n, d, &mut rng);
                    let g_bar = DenseVector::mean(&grads)?;
                    let candidates: Vec<DenseVector> = grads
                        .iter()
                        .map(|g| DenseVector::lin_comb(beta, &m, 1.0 - beta, g))
                        .collect::<Result<_>>()?;
                    let residual_before = coll.global_residual();
                    let m_prev = m.clone();
                    m = coll.compressed_allreduce(&candidates)?;
                    let residual_after = coll.global_residual();
                    for j in 0..d {
                        let expect = beta * m_prev[j] + (1.0 - beta) * g_bar[j]
                            + residual_before[j]
                            - residual_after[j];
                        max_err = max_err.max((m[j] - expect).abs());
                    }
                }
                checks.push(CheckOutcome::new(
                    format!("updating_form {} n={n} d={d}", spec.label()),
                    1e-10,
                    max_err,
                ));
            }
        }
    }
    Ok(checks)
}

/// With the identity codec the whole pipeline is an exact arithmetic mean
/// and every residual stays zero.
fn identity_equiv_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut checks = Vec::new();
    for n in [1usize, 2, 4, 8] {
        for d in [7usize, 64, 1000] {
            let mut coll = CollectiveState::new(n, d, CompressorSpec::Identity)?;
            let mut rng = derive_rng(seed, &[stream::VERIFY, 2, n as u64, d as u64]);
            let mut max_err = 0.0_f64;
            let mut max_residual = 0.0_f64;
            for _ in 0..50 {
                let inputs = random_vectors(n, d, &mut rng);
                let out = coll.compressed_allreduce(&inputs)?;
                let mean = DenseVector::mean(&inputs)?;
                for j in 0..d {
                    max_err = max_err.max((out[j] - mean[j]).abs());
                }
                max_residual = max_residual
                    .max(coll.max_worker_residual_norm_sum())
                    .max(coll.server_residual_norm_sum());
            }
            checks.push(CheckOutcome::new(
                format!("identity_equiv mean n={n} d={d}"),
                1e-14,
                max_err,
            ));
            checks.push(CheckOutcome::new(
                format!("identity_equiv zero_residuals n={n} d={d}"),
                0.0,
                max_residual,
            ));
        }
    }
    Ok(checks)
}

/// Per-codec contracts: the error-feedback identity, top-k selection and
/// exact sent counts, one-bit signs, stochastic-quantization unbiasedness,
/// and the wire-size formulas.
fn codec_contract_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut checks = Vec::new();
    let mut rng = derive_rng(seed, &[stream::VERIFY, 3]);

    // error-feedback identity per call, every codec
    for spec in compressor_grid(seed) {
        let mut max_err = 0.0_f64;
        for trial in 0..200u64 {
            let d = 1 + (trial % 33) as usize;
            let input = random_vectors(1, d, &mut rng).pop().unwrap();
            let prior = random_vectors(1, d, &mut rng).pop().unwrap();
            let mut state = crate::compress::ErrorState::zeros(d);
            // pre-load the state by one call so the prior is nontrivial
            crate::compress::compress_with_error_feedback(&spec, &prior, &mut state, &mut rng)?;
            let before = state.residual().clone();
            let chunk =
                crate::compress::compress_with_error_feedback(&spec, &input, &mut state, &mut rng)?;
            let lhs = chunk.decompress().add(state.residual())?;
            let rhs = input.add(&before)?;
            for j in 0..d {
                max_err = max_err.max((lhs[j] - rhs[j]).abs());
            }
        }
        checks.push(CheckOutcome::new(
            format!("codec error_feedback_identity {}", spec.label()),
            1e-14,
            max_err,
        ));
    }

    // top-k: exact sent count and kept-dominates-dropped ordering
    let mut count_err = 0.0_f64;
    let mut order_err = 0.0_f64;
    for trial in 0..200u64 {
        let d = 1 + (trial % 57) as usize;
        let k_percent = [10.0, 33.0, 50.0, 100.0][(trial % 4) as usize];
        let input = random_vectors(1, d, &mut rng).pop().unwrap();
        let chunk = compress(&CompressorSpec::TopK { k_percent }, &input, &mut rng)?;
        let sent = chunk.top_k_sent().unwrap();
        count_err = count_err.max((sent as f64 - top_k_kept(d, k_percent) as f64).abs());
        let out = chunk.decompress();
        let min_kept = out
            .iter()
            .filter(|&&x| x != 0.0)
            .fold(f64::INFINITY, |m, &x| m.min(x.abs()));
        let max_dropped = input
            .iter()
            .zip(out.iter())
            .filter(|(_, &o)| o == 0.0)
            .fold(0.0_f64, |m, (&x, _)| m.max(x.abs()));
        if min_kept.is_finite() {
            order_err = order_err.max((max_dropped - min_kept).max(0.0));
        }
    }
    checks.push(CheckOutcome::new("codec top_k exact_sent_count", 0.0, count_err));
    checks.push(CheckOutcome::new("codec top_k kept_dominates_dropped", 0.0, order_err));

    // one-bit sign correctness on nonzero elements
    let mut sign_err = 0.0_f64;
    for trial in 0..200u64 {
        let d = 1 + (trial % 41) as usize;
        let input = random_vectors(1, d, &mut rng).pop().unwrap();
        let out = compress(&CompressorSpec::OneBit, &input, &mut rng)?.decompress();
        for j in 0..d {
            if input[j] != 0.0 && out[j] * input[j] < 0.0 {
                sign_err += 1.0;
            }
        }
    }
    checks.push(CheckOutcome::new("codec one_bit sign_correct", 0.0, sign_err));

    // stochastic quantization unbiasedness: mean of 1e5 decompressions
    // within 3 standard errors of the input, per element
    let spec = CompressorSpec::StochasticQuant { levels: 4, seed };
    let input = DenseVector::from_vec(vec![0.83, -0.31, 0.02, -0.99, 0.5])?;
    let draws = 100_000;
    let d = input.len();
    let mut sums = vec![0.0; d];
    let mut sq_sums = vec![0.0; d];
    for _ in 0..draws {
        let out = compress(&spec, &input, &mut rng)?.decompress();
        for j in 0..d {
            sums[j] += out[j];
            sq_sums[j] += out[j] * out[j];
        }
    }
    let mut worst_z = 0.0_f64;
    for j in 0..d {
        let mean = sums[j] / draws as f64;
        let var = (sq_sums[j] / draws as f64 - mean * mean).max(0.0);
        let se = (var / draws as f64).sqrt().max(1e-12);
        worst_z = worst_z.max((mean - input[j]).abs() / se);
    }
    checks.push(CheckOutcome::new(
        "codec stochastic_quant unbiased (z-score)",
        3.0,
        worst_z,
    ));

    // wire sizes: formulas applied to concrete chunks
    let v1024 = DenseVector::from_vec(vec![1.0; 1024])?;
    let one_bit = compress(&CompressorSpec::OneBit, &v1024, &mut rng)?.wire_size_bits();
    let identity = compress(&CompressorSpec::Identity, &v1024, &mut rng)?.wire_size_bits();
    let v1000 = DenseVector::from_vec((0..1000).map(|i| i as f64).collect())?;
    let top_k = compress(&CompressorSpec::TopK { k_percent: 10.0 }, &v1000, &mut rng)?
        .wire_size_bits();
    let sq = compress(&CompressorSpec::StochasticQuant { levels: 4, seed }, &v1024, &mut rng)?
        .wire_size_bits();
    let wire_err = (one_bit as f64 - 1088.0)
        .abs()
        .max((identity as f64 - 65536.0).abs())
        .max((top_k as f64 - 9664.0).abs())
        .max((sq as f64 - (1024.0 * 2.0 + 128.0)).abs());
    checks.push(CheckOutcome::new("codec wire_size formulas", 0.0, wire_err));

    Ok(checks)
}

/// Variance of the averaged stochastic gradient scales like `1/n` on i.i.d.
/// shards: the ratio against a single worker must land in
/// `[0.8/n, 1.2/n]`.
fn variance_scaling_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    variance_scaling_checks_full(seed, 10_000)
}

/// Same check with an explicit draw count.
pub fn variance_scaling_checks_full(seed: u64, draws: usize) -> Result<Vec<CheckOutcome>> {
    let spec = ProblemSpec {
        kind: ProblemKind::LeastSquares,
        dim: 20,
        hidden: 0,
        n_samples: 4096,
        batch_size: 4,
        noise: 0.5,
        data_seed: seed,
        csv_path: None,
    };
    let x_seed = seed ^ 0x51CA;
    let base = {
        let problem = Problem::build(&spec, 1)?;
        let x = random_point(&problem, x_seed);
        averaged_gradient_variance(&problem, &x, draws, seed)?
    };
    let mut checks = Vec::new();
    for n in [2usize, 4, 8] {
        let problem = Problem::build(&spec, n)?;
        let x = random_point(&problem, x_seed);
        let var = averaged_gradient_variance(&problem, &x, draws, seed)?;
        let ratio = var / base;
        let (lo, hi) = (0.8 / n as f64, 1.2 / n as f64);
        let outside = (lo - ratio).max(ratio - hi).max(0.0);
        checks.push(CheckOutcome::new(
            format!("variance_scaling n={n} ratio={ratio:.5} band=[{lo:.5},{hi:.5}]"),
            0.0,
            outside,
        ));
    }
    Ok(checks)
}

fn random_point(problem: &Problem, seed: u64) -> DenseVector {
    let mut rng = derive_rng(seed, &[stream::VERIFY, 4]);
    DenseVector::from_vec_unchecked(
        (0..problem.param_dim())
            .map(|_| rng.random_range(-0.5..0.5))
            .collect(),
    )
}

/// Empirical `E || gbar - E gbar ||^2` of the worker-averaged minibatch
/// gradient at a fixed point.
fn averaged_gradient_variance(
    problem: &Problem,
    x: &DenseVector,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let n = problem.n_workers();
    let d = problem.param_dim();
    let mut mean = vec![0.0; d];
    let mut draws_data: Vec<Vec<f64>> = Vec::with_capacity(draws);
    for t in 0..draws {
        let mut avg = vec![0.0; d];
        for w in 0..n {
            let mut rng = derive_rng(seed, &[stream::GRADIENT, w as u64, t as u64]);
            let g = problem.sample_gradient(w, x, &mut rng)?.gradient;
            for j in 0..d {
                avg[j] += g[j];
            }
        }
        for a in avg.iter_mut() {
            *a /= n as f64;
        }
        for j in 0..d {
            mean[j] += avg[j];
        }
        draws_data.push(avg);
    }
    for m in mean.iter_mut() {
        *m /= draws as f64;
    }
    Ok(draws_data
        .iter()
        .map(|g| {
            g.iter()
                .zip(mean.iter())
                .map(|(a, m)| (a - m) * (a - m))
                .sum::<f64>()
        })
        .sum::<f64>()
        / draws as f64)
}

/// Central-difference gradient checks on every problem kind:
/// `|(f(x+he_j) - f(x-he_j)) / 2h - grad_j| <= 1e-5` at `h = 1e-5`.
fn finite_diff_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut checks = Vec::new();
    for kind in [ProblemKind::LeastSquares, ProblemKind::Logistic, ProblemKind::TinyMlp] {
        let spec = ProblemSpec {
            kind,
            dim: 8,
            hidden: 6,
            n_samples: 48,
            batch_size: 8,
            noise: 0.1,
            data_seed: seed,
            csv_path: None,
        };
        let problem = Problem::build(&spec, 3)?;
        let x = random_point(&problem, seed ^ 0xFD);
        let h = 1e-5;
        let (grad, _) = problem.full_gradient_and_loss(&x)?;
        let mut max_err = 0.0_f64;
        for j in 0..x.len() {
            let mut plus = x.as_slice().to_vec();
            let mut minus = plus.clone();
            plus[j] += h;
            minus[j] -= h;
            let fp = problem
                .full_gradient_and_loss(&DenseVector::from_vec(plus)?)?
                .1;
            let fm = problem
                .full_gradient_and_loss(&DenseVector::from_vec(minus)?)?
                .1;
            max_err = max_err.max(((fp - fm) / (2.0 * h) - grad[j]).abs());
        }
        checks.push(CheckOutcome::new(
            format!("finite_diff {kind:?}"),
            1e-5,
            max_err,
        ));
    }
    Ok(checks)
}
