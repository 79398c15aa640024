use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::ROW_SUM_TOLERANCE;
use crate::prob::check_distribution;
use crate::sequence::{MaskedSequence, Slot};

/// A conditional masked-token model `p(y | y_obs, H)`.
///
/// One call returns a distribution for every masked position of `seq`, in
/// ascending position order. Each distribution spans the lattice symbols
/// (`num_symbols` entries) and puts zero mass on the blank. The context id
/// stands in for the encoder state `H`. Implementations must be
/// deterministic.
pub trait MaskPredictor: Send + Sync {
    fn num_symbols(&self) -> usize;

    fn predict(&self, seq: &MaskedSequence, context: u64) -> Vec<Vec<f64>>;
}

impl<P: MaskPredictor + ?Sized> MaskPredictor for &P {
    fn num_symbols(&self) -> usize {
        (**self).num_symbols()
    }

    fn predict(&self, seq: &MaskedSequence, context: u64) -> Vec<Vec<f64>> {
        (**self).predict(seq, context)
    }
}

/// Validates one predictor response against the masked sequence.
pub fn check_prediction(
    seq: &MaskedSequence,
    dists: &[Vec<f64>],
    num_symbols: usize,
) -> Result<()> {
    if dists.len() != seq.num_masked() {
        return Err(Error::usage(format!(
            "predictor returned {} distributions for {} masked positions",
            dists.len(),
            seq.num_masked()
        )));
    }
    for (pos, d) in seq.masked_positions().iter().zip(dists) {
        if d.len() != num_symbols {
            return Err(Error::usage(format!(
                "distribution at position {pos} has {} entries, expected {num_symbols}",
                d.len()
            )));
        }
        check_distribution(d, ROW_SUM_TOLERANCE, &format!("position {pos}"))?;
    }
    Ok(())
}

/// How a [`TablePredictor`] turns the observed context into a lookup key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextScheme {
    /// The whole observed pattern, e.g. `3 _ 5`.
    Full,
    /// The two neighbouring slots: a token id, `_` when masked, `^`/`$` at
    /// the sequence edges.
    Neighbors,
}

impl ContextScheme {
    pub fn key(self, seq: &MaskedSequence, position: usize) -> String {
        match self {
            ContextScheme::Full => seq.canonical_key(),
            ContextScheme::Neighbors => {
                let slot = |s: &Slot| match s {
                    Slot::Observed(t) => t.to_string(),
                    Slot::Masked => "_".to_string(),
                };
                let left = match position.checked_sub(1) {
                    Some(p) => slot(&seq.slots()[p]),
                    None => "^".to_string(),
                };
                let right = match seq.slots().get(position + 1) {
                    Some(s) => slot(s),
                    None => "$".to_string(),
                };
                format!("{left} {right}")
            }
        }
    }
}

/// Table-driven predictor: `(context key, position)` to distribution, with a
/// position-independent layer (`position = None`) and a fallback.
#[derive(Clone, Debug, PartialEq)]
pub struct TablePredictor {
    num_symbols: usize,
    blank: usize,
    scheme: ContextScheme,
    table: HashMap<(String, Option<usize>), Vec<f64>>,
    fallback: Vec<f64>,
}

impl TablePredictor {
    pub fn new(
        num_symbols: usize,
        blank: usize,
        scheme: ContextScheme,
        fallback: Vec<f64>,
    ) -> Result<Self> {
        if blank >= num_symbols {
            return Err(Error::usage("blank outside predictor symbol range"));
        }
        let p = TablePredictor {
            num_symbols,
            blank,
            scheme,
            table: HashMap::new(),
            fallback,
        };
        p.check_row(&p.fallback, "fallback")?;
        Ok(p)
    }

    /// Uniform over every non-blank symbol, no entries.
    pub fn uniform(num_symbols: usize, blank: usize, scheme: ContextScheme) -> Result<Self> {
        let n = (num_symbols - 1) as f64;
        let fallback = (0..num_symbols)
            .map(|s| if s == blank { 0.0 } else { 1.0 / n })
            .collect();
        TablePredictor::new(num_symbols, blank, scheme, fallback)
    }

    fn check_row(&self, row: &[f64], what: &str) -> Result<()> {
        if row.len() != self.num_symbols {
            return Err(Error::usage(format!(
                "{what}: {} entries, expected {}",
                row.len(),
                self.num_symbols
            )));
        }
        check_distribution(row, ROW_SUM_TOLERANCE, what)?;
        if row[self.blank] != 0.0 {
            return Err(Error::usage(format!("{what}: blank has nonzero mass")));
        }
        Ok(())
    }

    pub fn insert(
        &mut self,
        key: impl Into<String>,
        position: Option<usize>,
        dist: Vec<f64>,
    ) -> Result<()> {
        let key = key.into();
        self.check_row(&dist, &format!("entry {key:?}"))?;
        self.table.insert((key, position), dist);
        Ok(())
    }

    pub fn scheme(&self) -> ContextScheme {
        self.scheme
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    pub fn fallback(&self) -> &[f64] {
        &self.fallback
    }

    /// Entries sorted by key then position.
    pub fn entries(&self) -> Vec<(&str, Option<usize>, &[f64])> {
        let mut out: Vec<_> = self
            .table
            .iter()
            .map(|((k, p), d)| (k.as_str(), *p, d.as_slice()))
            .collect();
        out.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        out
    }

    pub fn lookup(&self, seq: &MaskedSequence, position: usize) -> &[f64] {
        let key = self.scheme.key(seq, position);
        if let Some(d) = self.table.get(&(key.clone(), Some(position))) {
            return d;
        }
        self.table
            .get(&(key, None))
            .map_or(self.fallback.as_slice(), Vec::as_slice)
    }
}

impl MaskPredictor for TablePredictor {
    fn num_symbols(&self) -> usize {
        self.num_symbols
    }

    fn predict(&self, seq: &MaskedSequence, _context: u64) -> Vec<Vec<f64>> {
        seq.masked_positions()
            .into_iter()
            .map(|p| self.lookup(seq, p).to_vec())
            .collect()
    }
}
