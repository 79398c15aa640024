//! Mask-CTC inference: threshold masking, easy-first filling and beam
//! search over masked-language-model decoding.

mod candidates;
mod predictor;
mod search;

pub use candidates::{top_b_candidate_sets, top_b_from_distributions, CandidateSet};
pub use predictor::{check_prediction, ContextScheme, MaskPredictor, TablePredictor};
pub use search::{
    beam_search_decode, beam_search_decode_traced, easy_first_decode, easy_first_decode_traced,
    initial_hypothesis, render_trace, DecodeOutput, IterationTrace,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{MaskedSequence, Slot, TokenSequence};

/// Decoding hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Tokens whose CTC confidence is below this are masked. In `(0, 1]`.
    pub p_thr: f64,
    /// Maximum fills per iteration (`K`).
    pub max_fills: usize,
    /// Beam width (`B`).
    pub beam: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            p_thr: 0.99,
            max_fills: 2,
            beam: 10,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_thr > 0.0 && self.p_thr <= 1.0) {
            return Err(Error::usage(format!(
                "p_thr must lie in (0, 1], got {}",
                self.p_thr
            )));
        }
        if self.max_fills == 0 {
            return Err(Error::usage(
                "K (max fills per iteration) must be at least 1",
            ));
        }
        if self.beam == 0 {
            return Err(Error::usage("beam width must be at least 1"));
        }
        Ok(())
    }

    pub fn with_beam(self, beam: usize) -> Self {
        DecodeConfig { beam, ..self }
    }
}

/// Masks every token whose confidence is strictly below `p_thr`.
pub fn mask_by_threshold(
    y: &TokenSequence,
    confidences: &[f64],
    p_thr: f64,
) -> Result<MaskedSequence> {
    if confidences.len() != y.len() {
        return Err(Error::usage(format!(
            "{} confidences for {} tokens",
            confidences.len(),
            y.len()
        )));
    }
    Ok(MaskedSequence::new(
        y.ids()
            .iter()
            .zip(confidences)
            .map(|(&t, &c)| {
                if c < p_thr {
                    Slot::Masked
                } else {
                    Slot::Observed(t)
                }
            })
            .collect(),
    ))
}

/// Number of iterations needed to fill `num_masked` slots `max_fills` at a time.
pub fn num_iterations(num_masked: usize, max_fills: usize) -> usize {
    num_masked.div_ceil(max_fills)
}

/// Fills committed at 1-based `iteration` of `total_iterations`: `K`, except
/// the last iteration takes the remainder `N mod K` (or `K` when it divides).
pub fn iteration_fill_count(
    num_masked: usize,
    max_fills: usize,
    iteration: usize,
    total_iterations: usize,
) -> Result<usize> {
    if num_masked == 0 || max_fills == 0 {
        return Err(Error::usage("N and K must be at least 1"));
    }
    if total_iterations != num_iterations(num_masked, max_fills) {
        return Err(Error::usage(format!(
            "{total_iterations} iterations given, but N = {num_masked}, K = {max_fills} needs {}",
            num_iterations(num_masked, max_fills)
        )));
    }
    if iteration == 0 || iteration > total_iterations {
        return Err(Error::usage(format!(
            "iteration {iteration} outside 1..={total_iterations}"
        )));
    }
    if iteration < total_iterations {
        return Ok(max_fills);
    }
    Ok(match num_masked % max_fills {
        0 => max_fills,
        r => r,
    })
}
