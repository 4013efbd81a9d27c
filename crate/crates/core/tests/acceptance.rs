//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! (visible with `cargo test --test acceptance -- --nocapture`).
//!
//! Every tolerance is pinned here, not computed. Oracles are written in
//! plain scalar loops so they share no code with the vector pipeline they
//! check.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use squeeze_core::harness::{self, ExperimentResult, RunConfig};
use squeeze_core::metrics;
use squeeze_core::optimizer::{
    adam_warmup_step, squeeze_step, LrSchedule, OptimizerConfig, OptimizerState,
};
use squeeze_core::problems::{Problem, ProblemKind, ProblemSpec};
use squeeze_core::rng::{derive_rng, stream};
use squeeze_core::{CollectiveState, CompressorSpec, DenseVector};

// ---------------------------------------------------------------------------
// Criterion 1: updating-form equivalence
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_updating_form_equivalence() {
    let started = Instant::now();
    let checks = harness::updating_form_checks(20260801, 200).unwrap();
    let elapsed = started.elapsed();
    assert_eq!(checks.len(), 4 * 4 * 3); // compressors x workers x dims
    let mut worst = 0.0_f64;
    for c in &checks {
        assert!(
            c.passed,
            "[FAIL] criterion 1: {} observed {:.3e} >= 1e-10",
            c.name, c.observed
        );
        worst = worst.max(c.observed);
    }
    assert!(
        elapsed < Duration::from_secs(30),
        "[FAIL] criterion 1: runtime {elapsed:.1?} exceeds 30 s"
    );
    println!(
        "[PASS] criterion 1 (updating-form equivalence): 48 configs x 200 steps, \
         max per-element error {worst:.3e} < 1e-10, elapsed {elapsed:.1?}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: identity-compressor run equals preconditioned momentum SGD
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_identity_equivalence() {
    let (n, d) = (4usize, 50usize);
    let seed = 22022;
    let spec = ProblemSpec {
        kind: ProblemKind::Logistic,
        dim: d,
        hidden: 0,
        n_samples: 400,
        batch_size: 8,
        noise: 0.05,
        data_seed: 7,
        csv_path: None,
    };
    let problem = Problem::build(&spec, n).unwrap();
    let cfg = OptimizerConfig {
        lr: LrSchedule::Constant { gamma: 0.02 },
        beta1: 0.9,
        beta2: 0.999,
        eta: 1e-8,
        eta_floor: 1e-8,
        t_warmup: 50,
        t_total: 2050,
        compressor: CompressorSpec::Identity,
        freeze_bias_corrected: false,
    };

    // pipeline state
    let mut state = OptimizerState::new(problem.initial_point(seed));
    let mut collective = CollectiveState::new(n, d, CompressorSpec::Identity).unwrap();

    // oracle: scalar-loop Adam warmup, then scalar-loop momentum SGD with
    // per-coordinate rates gamma / max(sqrt(v_frozen), floor)
    let mut ox = vec![0.0_f64; d];
    let mut om = vec![0.0_f64; d];
    let mut ov = vec![0.0_f64; d];
    let mut o_denom: Vec<f64> = Vec::new();

    let sample_mean = |x: &[f64], step: u64| -> Vec<f64> {
        let xv = DenseVector::from_vec(x.to_vec()).unwrap();
        let mut acc = vec![0.0; d];
        for w in 0..n {
            let mut rng = derive_rng(seed, &[stream::GRADIENT, w as u64, step]);
            let g = problem.sample_gradient(w, &xv, &mut rng).unwrap().gradient;
            for j in 0..d {
                acc[j] += g[j];
            }
        }
        for a in acc.iter_mut() {
            *a /= n as f64;
        }
        acc
    };

    let mut max_gap = 0.0_f64;
    for step in 1..=cfg.t_total {
        // pipeline step
        let grads: Vec<DenseVector> = (0..n)
            .map(|w| {
                let mut rng = derive_rng(seed, &[stream::GRADIENT, w as u64, step]);
                problem.sample_gradient(w, &state.x, &mut rng).unwrap().gradient
            })
            .collect();
        if step <= cfg.t_warmup {
            adam_warmup_step(&cfg, &mut state, &grads).unwrap();
        } else {
            squeeze_step(&cfg, &mut state, &mut collective, &grads).unwrap();
            assert!(
                collective.residuals_all_zero(),
                "[FAIL] criterion 2: nonzero residual at step {step}"
            );
        }

        // oracle step
        let gbar = sample_mean(&ox, step);
        if step <= cfg.t_warmup {
            let t = step as i32;
            for j in 0..d {
                om[j] = 0.9 * om[j] + 0.1 * gbar[j];
                ov[j] = 0.999 * ov[j] + 0.001 * gbar[j] * gbar[j];
                let mh = om[j] / (1.0 - 0.9_f64.powi(t));
                let vh = ov[j] / (1.0 - 0.999_f64.powi(t));
                ox[j] -= 0.02 * mh / (vh.sqrt() + 1e-8);
            }
            if step == cfg.t_warmup {
                o_denom = ov.iter().map(|v| v.sqrt().max(1e-8)).collect();
            }
        } else {
            for j in 0..d {
                om[j] = 0.9 * om[j] + 0.1 * gbar[j];
                ox[j] -= 0.02 * om[j] / o_denom[j];
            }
        }

        for j in 0..d {
            max_gap = max_gap.max((state.x[j] - ox[j]).abs());
        }
        assert!(
            max_gap <= 1e-12,
            "[FAIL] criterion 2: |x - oracle| = {max_gap:.3e} > 1e-12 at step {step}"
        );
    }
    println!(
        "[PASS] criterion 2 (identity equivalence): 2000 squeeze steps, \
         max per-parameter gap {max_gap:.3e} <= 1e-12, residuals exactly zero"
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: warmup matches an independent scalar-loop Adam
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_adam_warmup_oracle() {
    let d = 10usize;
    // fixed 10-D quadratic: f(x) = 1/2 sum lambda_j (x_j - c_j)^2
    let lambda: Vec<f64> = (0..d).map(|j| 0.5 + 0.35 * j as f64).collect();
    let center: Vec<f64> = (0..d).map(|j| (j as f64 * 0.7).sin()).collect();
    let x0: Vec<f64> = (0..d).map(|j| 1.0 + 0.2 * j as f64).collect();

    let cfg = OptimizerConfig {
        lr: LrSchedule::Constant { gamma: 0.05 },
        beta1: 0.9,
        beta2: 0.999,
        eta: 1e-8,
        eta_floor: 1e-8,
        t_warmup: 1000,
        t_total: 1001,
        compressor: CompressorSpec::Identity,
        freeze_bias_corrected: false,
    };
    let mut state = OptimizerState::new(DenseVector::from_vec(x0.clone()).unwrap());

    let (mut ox, mut om, mut ov) = (x0, vec![0.0; d], vec![0.0; d]);
    let mut max_gap = 0.0_f64;
    for step in 1..=1000_u64 {
        let grad = DenseVector::from_vec(
            (0..d).map(|j| lambda[j] * (state.x[j] - center[j])).collect(),
        )
        .unwrap();
        adam_warmup_step(&cfg, &mut state, &[grad]).unwrap();

        let t = step as i32;
        for j in 0..d {
            let g = lambda[j] * (ox[j] - center[j]);
            om[j] = 0.9 * om[j] + 0.1 * g;
            ov[j] = 0.999 * ov[j] + 0.001 * g * g;
            let mh = om[j] / (1.0 - 0.9_f64.powi(t));
            let vh = ov[j] / (1.0 - 0.999_f64.powi(t));
            ox[j] -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        for j in 0..d {
            max_gap = max_gap.max((state.x[j] - ox[j]).abs());
        }
        assert!(
            max_gap <= 1e-12,
            "[FAIL] criterion 3: gap {max_gap:.3e} > 1e-12 at step {step}"
        );
    }
    println!(
        "[PASS] criterion 3 (Adam warmup oracle): 1000 steps on a 10-D quadratic, \
         max gap {max_gap:.3e} <= 1e-12"
    );
}

// ---------------------------------------------------------------------------
// Criteria 4, 8, 9 share one configuration (logistic, d=200, n=8, one-bit)
// ---------------------------------------------------------------------------

fn criterion_4_config(compressor: CompressorSpec) -> RunConfig {
    RunConfig {
        problem: ProblemSpec {
            kind: ProblemKind::Logistic,
            dim: 200,
            hidden: 0,
            n_samples: 4000,
            batch_size: 32,
            noise: 0.05,
            data_seed: 404,
            csv_path: None,
        },
        optimizer: OptimizerConfig {
            lr: LrSchedule::Constant { gamma: 0.01 },
            beta1: 0.9,
            beta2: 0.999,
            eta: 1e-8,
            eta_floor: 1e-8,
            t_warmup: 100,
            t_total: 3000,
            compressor,
            freeze_bias_corrected: false,
        },
        n_workers: 8,
        master_seed: 424242,
        eval_every: 10,
        output_dir: None,
        record_wall_time: false,
        sigma_probe_draws: 0,
    }
}

struct SharedRuns {
    identity: ExperimentResult,
    one_bit: ExperimentResult,
    elapsed: Duration,
}

fn shared_runs() -> &'static SharedRuns {
    static RUNS: OnceLock<SharedRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let started = Instant::now();
        let identity = harness::execute(&criterion_4_config(CompressorSpec::Identity)).unwrap();
        let one_bit = harness::execute(&criterion_4_config(CompressorSpec::OneBit)).unwrap();
        SharedRuns { identity, one_bit, elapsed: started.elapsed() }
    })
}

#[test]
fn criterion_4_compressed_matches_uncompressed_convergence() {
    let runs = shared_runs();
    let id = &runs.identity.summary;
    let ob = &runs.one_bit.summary;

    let loss_gap = (ob.final_loss - id.final_loss).abs() / id.final_loss;
    assert!(
        loss_gap <= 0.05,
        "[FAIL] criterion 4: relative loss gap {loss_gap:.4} > 5% \
         (one-bit {:.6} vs identity {:.6})",
        ob.final_loss,
        id.final_loss
    );
    let grad_ratio = ob.final_grad_norm_sq / id.final_grad_norm_sq;
    assert!(
        grad_ratio <= 2.0,
        "[FAIL] criterion 4: final grad norm ratio {grad_ratio:.3} > 2x"
    );
    assert!(
        runs.elapsed < Duration::from_secs(120),
        "[FAIL] criterion 4: runtime {:?} exceeds 2 min",
        runs.elapsed
    );
    println!(
        "[PASS] criterion 4 (compressed ~ uncompressed): loss gap {:.2}% <= 5%, \
         grad ratio {grad_ratio:.3} <= 2, both runs in {:.1?}",
        100.0 * loss_gap,
        runs.elapsed
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: communication volume
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_communication_volume() {
    let (n, d) = (8usize, 100_000usize);
    let mut rng = derive_rng(55, &[stream::VERIFY]);
    use rand::Rng;
    let inputs: Vec<DenseVector> = (0..n)
        .map(|_| {
            DenseVector::from_vec((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        })
        .collect();

    // one-bit traffic of a real step vs the float32 uncompressed baseline
    let mut coll = CollectiveState::new(n, d, CompressorSpec::OneBit).unwrap();
    coll.compressed_allreduce(&inputs).unwrap();
    let one_bit_bits = coll.bits_for_step().unwrap();
    let f32_baseline = 2 * (n as u64 - 1) * d as u64 * 32;
    let ratio = one_bit_bits as f64 / f32_baseline as f64;
    assert!(
        ratio <= 0.035,
        "[FAIL] criterion 5: one-bit/float32 ratio {ratio:.5} > 0.035"
    );

    // top-k sends exactly ceil(k% * chunk_len) entries per chunk
    let k_percent = 10.0;
    let spec = CompressorSpec::TopK { k_percent };
    let layout = squeeze_core::make_chunk_layout(d, n).unwrap();
    let mut checked = 0;
    for k in 0..layout.n_chunks() {
        let len = layout.chunk_len(k);
        let piece = DenseVector::from_vec(
            layout.slice_of(&inputs[0], k).unwrap().to_vec(),
        )
        .unwrap();
        let chunk = squeeze_core::compress(&spec, &piece, &mut rng).unwrap();
        // independent integer ceil of k% * len with k = 10
        let expect = (len * 10).div_ceil(100);
        assert_eq!(
            chunk.top_k_sent().unwrap(),
            expect,
            "[FAIL] criterion 5: top-k sent count mismatch on chunk {k}"
        );
        checked += 1;
    }
    assert_eq!(checked, n);
    println!(
        "[PASS] criterion 5 (communication volume): one-bit/float32 ratio \
         {ratio:.5} <= 0.035 at d=1e5 n=8; top-k counts exact on all {n} chunks"
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: linear-speedup proxy (averaged-gradient variance ~ 1/n)
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_linear_speedup_proxy() {
    let started = Instant::now();
    let checks = harness::variance_scaling_checks_full(20260806, 10_000).unwrap();
    let elapsed = started.elapsed();
    for c in &checks {
        assert!(
            c.passed,
            "[FAIL] criterion 6: {} outside the +/-20% band by {:.3e}",
            c.name, c.observed
        );
    }
    assert!(
        elapsed < Duration::from_secs(60),
        "[FAIL] criterion 6: runtime {elapsed:.1?} exceeds 1 min"
    );
    println!(
        "[PASS] criterion 6 (linear-speedup proxy): 10^4 draws, variance ratio \
         within [0.8/n, 1.2/n] for n in {{2,4,8}}, elapsed {elapsed:.1?}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: rate-trend of the weighted gradient norm
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_rate_trend() {
    let (n, d, t_total) = (4usize, 100usize, 4000u64);
    let problem_spec = ProblemSpec {
        kind: ProblemKind::Logistic,
        dim: d,
        hidden: 0,
        n_samples: 2000,
        batch_size: 16,
        noise: 0.05,
        data_seed: 707,
        csv_path: None,
    };
    let base_cfg = |gamma: f64, compressor: CompressorSpec, t_total: u64| RunConfig {
        problem: problem_spec.clone(),
        optimizer: OptimizerConfig {
            lr: LrSchedule::Constant { gamma },
            beta1: 0.9,
            beta2: 0.999,
            eta: 1e-8,
            eta_floor: 1e-8,
            t_warmup: 100,
            t_total,
            compressor,
            freeze_bias_corrected: false,
        },
        n_workers: n,
        master_seed: 777,
        eval_every: 1,
        output_dir: None,
        record_wall_time: false,
        sigma_probe_draws: 0,
    };

    // measured constants for the theory-form step size
    let problem = Problem::build(&problem_spec, n).unwrap();
    let l_smooth = logistic_smoothness(&problem);
    let x0 = problem.initial_point(777);
    let mut probe_rng = derive_rng(777, &[stream::SIGMA_PROBE, 7]);
    let sigma_sq = problem
        .measure_variance(&x0, 200, &mut probe_rng)
        .unwrap()
        .iter()
        .sum::<f64>()
        / n as f64;
    let pilot = harness::execute(&base_cfg(0.01, CompressorSpec::OneBit, 200)).unwrap();
    let v_min = pilot.summary.v_min.unwrap().max(1e-12);
    let epsilon = pilot.summary.epsilon_measured;
    // gamma = 1 / (4 L / v_min + sigma sqrt(T/n) + eps^(2/3) T^(1/3) / v_min)
    let gamma = 1.0
        / (4.0 * l_smooth / v_min
            + sigma_sq.sqrt() * (t_total as f64 / n as f64).sqrt()
            + epsilon.powf(2.0 / 3.0) * (t_total as f64).powf(1.0 / 3.0) / v_min);
    assert!(gamma.is_finite() && gamma > 0.0);

    for compressor in [CompressorSpec::Identity, CompressorSpec::OneBit] {
        let label = compressor.label();
        let result = harness::execute(&base_cfg(gamma, compressor, t_total)).unwrap();
        let records = &result.records;
        let mean_to = |t_cut: u64| -> f64 {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| r.t <= t_cut)
                .map(|r| r.grad_norm_sq_v)
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let early = mean_to(1000);
        let late = mean_to(t_total);
        assert!(
            late < early,
            "[FAIL] criterion 7 ({label}): running mean at T=4000 ({late:.6e}) \
             not below T=1000 ({early:.6e}), gamma={gamma:.3e}"
        );
        println!(
            "[PASS] criterion 7 ({label}): running mean of weighted grad norm \
             {early:.4e} @1000 -> {late:.4e} @4000, gamma={gamma:.3e}"
        );
    }
}

/// Largest eigenvalue of the logistic Hessian bound `(1/4N) A^T A`,
/// estimated by power iteration over the raw dataset.
fn logistic_smoothness(problem: &Problem) -> f64 {
    let d = problem.param_dim();
    let n = problem.n_samples();
    let features = problem.features();
    let mut y: Vec<f64> = (0..d).map(|j| ((j * 37 + 11) % 97) as f64 / 97.0 + 0.1).collect();
    let mut norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut eig = 0.0;
    for _ in 0..60 {
        for v in y.iter_mut() {
            *v /= norm;
        }
        // z = A^T (A y) / N
        let mut z = vec![0.0; d];
        for s in 0..n {
            let row = &features[s * d..(s + 1) * d];
            let proj: f64 = row.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
            for j in 0..d {
                z[j] += proj * row[j];
            }
        }
        for v in z.iter_mut() {
            *v /= n as f64;
        }
        norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        eig = norm;
        y = z;
    }
    eig / 4.0
}

// ---------------------------------------------------------------------------
// Criterion 8: bounded-error probe along the criterion-4 run
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_bounded_error_probe() {
    let runs = shared_runs();
    let mut grad_norms: Vec<f64> = Vec::new();
    let mut worst_ratio = 0.0_f64;
    for r in &runs.one_bit.records {
        grad_norms.push(r.grad_norm_sq.sqrt());
        let mut sorted = grad_norms.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[sorted.len() / 2];
        assert!(
            r.eps_worker.is_finite() && r.eps_server.is_finite(),
            "[FAIL] criterion 8: non-finite residual probe at t={}",
            r.t
        );
        let bound = 100.0 * median;
        assert!(
            r.eps_worker <= bound && r.eps_server <= bound,
            "[FAIL] criterion 8: residual probe exceeds 100x running median \
             at t={} (eps_w={:.3e}, eps_s={:.3e}, bound={bound:.3e})",
            r.t,
            r.eps_worker,
            r.eps_server
        );
        if bound > 0.0 {
            worst_ratio = worst_ratio.max(r.eps_worker / bound).max(r.eps_server / bound);
        }
    }
    println!(
        "[PASS] criterion 8 (bounded-error probe): residual sums finite at every \
         step; worst fraction of the 100x-median bound used: {:.3}",
        worst_ratio
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: bitwise-identical metrics across executions
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_determinism() {
    let runs = shared_runs();
    let cached_csv = metrics::to_csv_string(&runs.one_bit.records);
    let cached_summary =
        serde_json::to_string_pretty(&runs.one_bit.summary).unwrap() + "\n";

    // a fresh execution of the same configuration, through the file path
    let dir = tempfile::tempdir().unwrap();
    harness::run_to_files(&criterion_4_config(CompressorSpec::OneBit), dir.path()).unwrap();
    let fresh_csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let fresh_summary = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();

    assert!(
        cached_csv == fresh_csv,
        "[FAIL] criterion 9: metrics.csv differs between executions"
    );
    assert!(
        cached_summary == fresh_summary,
        "[FAIL] criterion 9: summary.json differs between executions"
    );
    println!(
        "[PASS] criterion 9 (determinism): metrics.csv ({} bytes) and summary.json \
         byte-identical across two executions",
        fresh_csv.len()
    );
}
