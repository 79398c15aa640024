use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::LogProb;

/// A blank-free token sequence `y = (y_1..y_L)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        TokenSequence(ids)
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_ids(self) -> Vec<usize> {
        self.0
    }

    /// Checks every id is an emitting, non-blank symbol of a `width`-wide lattice.
    pub fn check(&self, width: usize, blank: usize) -> Result<()> {
        for (i, &id) in self.0.iter().enumerate() {
            if id >= width || id == blank {
                return Err(Error::usage(format!(
                    "token {id} at position {i} is blank or outside the {width}-symbol inventory"
                )));
            }
        }
        Ok(())
    }
}

impl From<Vec<usize>> for TokenSequence {
    fn from(ids: Vec<usize>) -> Self {
        TokenSequence(ids)
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(" "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Observed(usize),
    Masked,
}

/// A partially observed sequence: `y_obs` plus `<MASK>` slots `y_mask`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskedSequence {
    slots: Vec<Slot>,
    num_masked: usize,
}

impl MaskedSequence {
    pub fn new(slots: Vec<Slot>) -> Self {
        let num_masked = slots.iter().filter(|s| **s == Slot::Masked).count();
        MaskedSequence { slots, num_masked }
    }

    pub fn fully_observed(y: &TokenSequence) -> Self {
        MaskedSequence::new(y.ids().iter().map(|&t| Slot::Observed(t)).collect())
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_masked(&self) -> usize {
        self.num_masked
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Slot::Masked)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.num_masked == 0
    }

    pub fn fill(&mut self, position: usize, token: usize) -> Result<()> {
        match self.slots.get(position) {
            Some(Slot::Masked) => {
                self.slots[position] = Slot::Observed(token);
                self.num_masked -= 1;
                Ok(())
            }
            Some(Slot::Observed(_)) => Err(Error::usage(format!(
                "position {position} is already observed"
            ))),
            None => Err(Error::usage(format!("position {position} out of range"))),
        }
    }

    /// The token sequence, if no slot is masked.
    pub fn to_tokens(&self) -> Option<TokenSequence> {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Observed(t) => Some(*t),
                Slot::Masked => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(TokenSequence)
    }

    /// Canonical text key of the observed context, e.g. `3 _ 5`.
    pub fn canonical_key(&self) -> String {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Observed(t) => t.to_string(),
                Slot::Masked => "_".to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One committed mask fill.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fill {
    pub position: usize,
    pub token: usize,
    pub log_prob: LogProb,
}

impl Fill {
    pub fn key(&self) -> (usize, usize) {
        (self.position, self.token)
    }
}

/// A partially filled hypothesis with its cumulative fill score.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub sequence: MaskedSequence,
    pub score: LogProb,
    pub fill_trace: Vec<Fill>,
}

impl Hypothesis {
    pub fn root(sequence: MaskedSequence) -> Self {
        Hypothesis {
            sequence,
            score: LogProb::ONE,
            fill_trace: Vec::new(),
        }
    }

    /// Commits `fills` in order, accumulating the score one fill at a time.
    pub fn extend(&self, fills: &[Fill]) -> Result<Hypothesis> {
        let mut next = self.clone();
        for f in fills {
            next.sequence.fill(f.position, f.token)?;
            next.score = next.score * f.log_prob;
            next.fill_trace.push(*f);
        }
        Ok(next)
    }

    /// Score recomputed from the trace in trace order.
    pub fn recompute_score(&self) -> LogProb {
        self.fill_trace
            .iter()
            .fold(LogProb::ONE, |acc, f| acc * f.log_prob)
    }

    pub fn trace_keys(&self) -> Vec<(usize, usize)> {
        self.fill_trace.iter().map(Fill::key).collect()
    }
}
