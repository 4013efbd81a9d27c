//! Deterministic simulation of a compressed gather-scatter allreduce.
//!
//! `n` workers hold equal-length vectors. The vector is partitioned into `n`
//! chunks and worker `i` owns chunk `i`. One step runs three barriers:
//!
//! 1. **Scatter** — every worker compresses each of its chunks with
//!    worker-side error feedback and sends chunk `k` to its owner. Self-sends
//!    (worker `i`'s chunk `i`) still pass through the codec so the numerics
//!    are identical for every chunk, but cost zero wire bits.
//! 2. **Average + recompress** — owner `i` averages the *decompressed*
//!    chunks it received (in float64, worker-index order) and recompresses
//!    the mean with its own server-side error feedback.
//! 3. **Gather** — owner `i` broadcasts the recompressed chunk to the other
//!    `n - 1` workers; the step result is the concatenation of the
//!    decompressed owner chunks, identical on every worker.
//!
//! Communication is simulated: each cross-worker send and each broadcast is
//! charged its exact wire size in bits.
//!
//! Error compensation happens twice — once per worker chunk, once per owner
//! chunk — and the residuals held here are exactly the quantities that make
//! the global momentum recursion checkable: mass dropped by compression in
//! one step is recovered from the residuals in later steps.

use crate::compress::{compress_with_error_feedback, CompressedChunk, CompressorSpec, ErrorState};
use crate::error::{Error, Result};
use crate::numerics::{ChunkLayout, DenseVector};
use crate::rng::{derive_rng, stream};

#[derive(Debug, Clone)]
pub struct CollectiveState {
    n_workers: usize,
    layout: ChunkLayout,
    worker_compressor: CompressorSpec,
    server_compressor: CompressorSpec,
    /// `worker_errors[i][k]`: residual of worker `i`'s chunk `k`.
    worker_errors: Vec<Vec<ErrorState>>,
    /// `server_errors[k]`: residual of owner `k`'s averaged chunk.
    server_errors: Vec<ErrorState>,
    bits_sent_total: u64,
    last_step_bits: Option<u64>,
    steps_completed: u64,
}

impl CollectiveState {
    /// Fresh state: zero residuals, zero traffic. The same compressor is
    /// applied on the worker and the server side.
    pub fn new(n_workers: usize, total_len: usize, compressor: CompressorSpec) -> Result<Self> {
        Self::with_compressors(n_workers, total_len, compressor.clone(), compressor)
    }

    /// Fresh state with distinct worker- and server-side codecs. Used by the
    /// gradient-compression ablation, which compresses on the worker side
    /// only and averages losslessly (`server = Identity`).
    pub fn with_compressors(
        n_workers: usize,
        total_len: usize,
        worker_compressor: CompressorSpec,
        server_compressor: CompressorSpec,
    ) -> Result<Self> {
        if n_workers == 0 {
            return Err(Error::config("collective needs at least one worker"));
        }
        worker_compressor.validate()?;
        server_compressor.validate()?;
        let layout = ChunkLayout::new(total_len, n_workers)?;
        let worker_errors = (0..n_workers)
            .map(|_| {
                (0..n_workers)
                    .map(|k| ErrorState::zeros(layout.chunk_len(k)))
                    .collect()
            })
            .collect();
        let server_errors = (0..n_workers)
            .map(|k| ErrorState::zeros(layout.chunk_len(k)))
            .collect();
        Ok(CollectiveState {
            n_workers,
            layout,
            worker_compressor,
            server_compressor,
            worker_errors,
            server_errors,
            bits_sent_total: 0,
            last_step_bits: None,
            steps_completed: 0,
        })
    }

    pub fn n_workers(&self) -> usize {
        self.n_workers
    }

    pub fn layout(&self) -> &ChunkLayout {
        &self.layout
    }

    pub fn steps_completed(&self) -> u64 {
        self.steps_completed
    }

    /// One full scatter / average / gather step over `inputs[i]` from each
    /// worker. Returns the shared result vector.
    pub fn compressed_allreduce(&mut self, inputs: &[DenseVector]) -> Result<DenseVector> {
        let n = self.n_workers;
        if inputs.len() != n {
            return Err(Error::dim(format!(
                "expected {n} worker inputs, got {}",
                inputs.len()
            )));
        }
        for (i, v) in inputs.iter().enumerate() {
            if v.len() != self.layout.total_len() {
                return Err(Error::dim(format!(
                    "worker {i} input len {} vs layout len {}",
                    v.len(),
                    self.layout.total_len()
                )));
            }
        }

        let step = self.steps_completed;
        let mut scatter_bits = 0u64;
        let mut gather_bits = 0u64;

        // Phase A (scatter): per-worker chunk compression with error feedback.
        let mut sent: Vec<Vec<CompressedChunk>> = Vec::with_capacity(n);
        for (i, input) in inputs.iter().enumerate() {
            let mut row = Vec::with_capacity(n);
            for k in 0..n {
                let piece = DenseVector::from_vec_unchecked(
                    self.layout.slice_of(input, k)?.to_vec(),
                );
                let mut rng = derive_rng(
                    self.worker_compressor.seed(),
                    &[stream::CODEC_WORKER, step, i as u64, k as u64],
                );
                let chunk = compress_with_error_feedback(
                    &self.worker_compressor,
                    &piece,
                    &mut self.worker_errors[i][k],
                    &mut rng,
                )?;
                if k != i {
                    scatter_bits += chunk.wire_size_bits();
                }
                row.push(chunk);
            }
            sent.push(row);
        }

        // Phase B (average + recompress) and Phase C (gather).
        let mut result = vec![0.0; self.layout.total_len()];
        for k in 0..n {
            let (start, len) = self.layout.chunk(k);
            let mut avg = vec![0.0; len];
            for row in &sent {
                let piece = row[k].decompress();
                for (a, b) in avg.iter_mut().zip(piece.iter()) {
                    *a += b;
                }
            }
            let inv = 1.0 / n as f64;
            for a in avg.iter_mut() {
                *a *= inv;
            }
            let avg = DenseVector::from_vec(avg)?;
            let mut rng = derive_rng(
                self.server_compressor.seed(),
                &[stream::CODEC_SERVER, step, k as u64],
            );
            let out = compress_with_error_feedback(
                &self.server_compressor,
                &avg,
                &mut self.server_errors[k],
                &mut rng,
            )?;
            gather_bits += (n as u64 - 1) * out.wire_size_bits();
            result[start..start + len].copy_from_slice(out.decompress().as_slice());
        }

        let bits = scatter_bits + gather_bits;
        self.bits_sent_total += bits;
        self.last_step_bits = Some(bits);
        self.steps_completed += 1;
        DenseVector::from_vec(result)
    }

    /// Wire bits of the most recent step. Errors before the first step.
    pub fn bits_for_step(&self) -> Result<u64> {
        self.last_step_bits
            .ok_or_else(|| Error::State("no allreduce step completed yet".into()))
    }

    /// Cumulative wire bits over all steps. Non-decreasing.
    pub fn bits_sent_total(&self) -> u64 {
        self.bits_sent_total
    }

    /// Sum over chunks of worker `i`'s residual norms.
    pub fn worker_residual_norm_sum(&self, worker: usize) -> f64 {
        self.worker_errors[worker]
            .iter()
            .map(|e| e.residual().l2_norm())
            .sum()
    }

    /// Largest per-worker residual norm sum (the worst worker).
    pub fn max_worker_residual_norm_sum(&self) -> f64 {
        (0..self.n_workers)
            .map(|i| self.worker_residual_norm_sum(i))
            .fold(0.0, f64::max)
    }

    /// Sum over owner chunks of server residual norms.
    pub fn server_residual_norm_sum(&self) -> f64 {
        self.server_errors
            .iter()
            .map(|e| e.residual().l2_norm())
            .sum()
    }

    /// Mean over workers of their full-length residual vector.
    pub fn mean_worker_residual(&self) -> DenseVector {
        let total = self.layout.total_len();
        let mut acc = vec![0.0; total];
        for row in &self.worker_errors {
            for (k, err) in row.iter().enumerate() {
                let (start, _) = self.layout.chunk(k);
                for (j, v) in err.residual().iter().enumerate() {
                    acc[start + j] += v;
                }
            }
        }
        let inv = 1.0 / self.n_workers as f64;
        DenseVector::from_vec_unchecked(acc.into_iter().map(|a| a * inv).collect())
    }

    /// The server residuals assembled into one full-length vector.
    pub fn server_residual(&self) -> DenseVector {
        let total = self.layout.total_len();
        let mut acc = vec![0.0; total];
        for (k, err) in self.server_errors.iter().enumerate() {
            let (start, _) = self.layout.chunk(k);
            for (j, v) in err.residual().iter().enumerate() {
                acc[start + j] = *v;
            }
        }
        DenseVector::from_vec_unchecked(acc)
    }

    /// Combined compensation residual: mean worker residual plus server
    /// residual. This is the quantity whose step-to-step difference appears
    /// in the effective momentum recursion.
    pub fn global_residual(&self) -> DenseVector {
        self.mean_worker_residual()
            .add(&self.server_residual())
            .expect("residual lengths agree by construction")
    }

    /// True when every worker and server residual is exactly zero.
    pub fn residuals_all_zero(&self) -> bool {
        let worker_zero = self
            .worker_errors
            .iter()
            .flatten()
            .all(|e| e.residual().iter().all(|&v| v == 0.0));
        worker_zero
            && self
                .server_errors
                .iter()
                .all(|e| e.residual().iter().all(|&v| v == 0.0))
    }

    /// Permute the worker dimension: worker `i`'s error states move to
    /// position `perm[i]`. Inputs permuted the same way must then produce
    /// the same result (worker-order invariance).
    pub fn permute_workers(&mut self, perm: &[usize]) -> Result<()> {
        if perm.len() != self.n_workers {
            return Err(Error::dim("permutation length mismatch"));
        }
        let mut seen = vec![false; self.n_workers];
        for &p in perm {
            if p >= self.n_workers || seen[p] {
                return Err(Error::config("not a permutation"));
            }
            seen[p] = true;
        }
        let old = std::mem::take(&mut self.worker_errors);
        let mut new: Vec<Option<Vec<ErrorState>>> = (0..self.n_workers).map(|_| None).collect();
        for (i, row) in old.into_iter().enumerate() {
            new[perm[i]] = Some(row);
        }
        self.worker_errors = new.into_iter().map(|r| r.unwrap()).collect();
        Ok(())
    }
}
