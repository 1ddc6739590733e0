//! Listwise preference optimization over reward scores.
//!
//! The crate is organized bottom-up:
//!
//! - [`diff`]: reverse-mode differentiation of scalar expressions plus a
//!   central-difference oracle.
//! - [`sorting`]: hard sort permutation matrices, the NeuralSort relaxation and
//!   Sinkhorn scaling.
//! - [`metrics`]: gain, discount, DCG/NDCG and the ApproxNDCG smooth rank.
//! - [`losses`]: OPO (NeuralNDCG), ApproxNDCG, ListMLE and the pairwise
//!   baselines.
//! - [`scorer`]: feature scorers and a bigram toy policy with a frozen
//!   reference, producing β-scaled log-ratio reward scores.
//! - [`data`]: response lists, JSONL I/O, subsampling and a synthetic
//!   generator with a hidden oracle utility.
//! - [`trainer`]: AdamW with a warmup-cosine schedule, and hyperparameter
//!   sweeps.
//! - [`harness`]: held-out NDCG, oracle win rate, approximation curves and
//!   the eight-loss comparison report.

pub mod data;
pub mod diff;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod scorer;
pub mod sorting;
pub mod trainer;

pub use error::{Error, Result};

/// Stream ids so that one user seed drives independent random sequences.
pub(crate) mod stream {
    pub const SYNTHETIC: u64 = 0;
    pub const SUBSAMPLE: u64 = 1;
    pub const FEATURE_INIT: u64 = 2;
    pub const POLICY_INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
}

pub(crate) fn seeded_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
