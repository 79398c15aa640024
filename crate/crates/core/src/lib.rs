//! Non-autoregressive Mask-CTC decoding and autoregressive-to-NAR
//! knowledge distillation over abstract posterior lattices.
//!
//! * [`ctc`]: collapse map, greedy decoding, forward marginal and loss gradient.
//! * [`maskctc`]: threshold masking, easy-first filling and beam search.
//! * [`distill`]: frame- and sequence-level distillation losses.
//! * [`toymodel`]: a synthetic teacher/student laboratory.
//! * [`io`]: file formats for lattices, predictors, N-best lists and configs.
//! * [`bench`]: latency/quality harness across beam widths.

pub mod bench;
pub mod ctc;
pub mod distill;
mod error;
pub mod io;
mod lattice;
pub mod maskctc;
pub mod oracle;
mod prob;
pub mod selftest;
mod sequence;
pub mod toymodel;
mod vocab;

pub use error::{Error, Result};
pub use lattice::{PosteriorLattice, ROW_SUM_TOLERANCE};
pub use prob::{
    log_add, log_softmax, log_sum_exp, log_sum_exp_raw, normalize_distribution, softmax, LogProb,
};
pub use sequence::{Fill, Hypothesis, MaskedSequence, Slot, TokenSequence};
pub use vocab::Vocabulary;

/// Environment variable that overrides every stochastic seed.
pub const SEED_ENV: &str = "NAR_DECODE_SEED";

/// `seed`, unless [`SEED_ENV`] holds a valid override.
pub fn effective_seed(seed: u64) -> u64 {
    std::env::var(SEED_ENV)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(seed)
}
