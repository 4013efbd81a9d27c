//! Error-compensated gradient compression over a simulated gather-scatter
//! allreduce, driving an Adam-preconditioned momentum SGD optimizer.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`] — float64 vectors, elementwise operators, chunk layouts;
//! * [`compress`] — codecs (one-bit, top-k, stochastic quantization,
//!   identity) and error-feedback state;
//! * [`collective`] — the n-worker scatter / average / gather step with
//!   double error compensation and exact bit accounting;
//! * [`optimizer`] — Adam warmup, then compressed momentum averaging with a
//!   frozen second moment;
//! * [`problems`] — synthetic least squares / logistic / tiny-MLP objectives
//!   with per-worker shards;
//! * [`harness`] — run configs, experiment driver, A/B comparison and the
//!   invariant-verification suites behind the CLI;
//! * [`metrics`] — the per-step record and its CSV/JSON formats.
//!
//! Everything is deterministic given a master seed: random streams are keyed
//! by logical coordinates (worker, step, chunk), never by call order.

pub mod collective;
pub mod compress;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod optimizer;
pub mod problems;
pub mod rng;

pub use collective::CollectiveState;
pub use compress::{
    compress, compress_with_error_feedback, CompressedChunk, CompressorSpec, ErrorState,
};
pub use error::{Error, Result};
pub use harness::{RunConfig, Variant, VerifySuite};
pub use metrics::{MetricsRecord, RunSummary};
pub use numerics::{make_chunk_layout, ChunkLayout, DenseVector};
pub use optimizer::{
    adam_warmup_step, squeeze_step, LrSchedule, OptimizerConfig, OptimizerState, Phase,
    RunOptions, SqueezeMode,
};
pub use problems::{GradientSample, Problem, ProblemKind, ProblemSpec};
