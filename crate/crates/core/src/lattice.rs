use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// Row-sum tolerance for lattice rows.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Frame-level CTC posteriors: `T` rows, each a distribution over the
/// emitting symbols (tokens plus blank).
///
/// The lattice also carries an opaque `context_id` standing in for the
/// encoder state a mask predictor may condition on.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorLattice {
    probs: Array2<f64>,
    blank: usize,
    context_id: u64,
}

impl PosteriorLattice {
    pub fn new(probs: Array2<f64>, blank: usize) -> Result<Self> {
        let (frames, width) = probs.dim();
        if frames == 0 {
            return Err(Error::usage("lattice has no frames"));
        }
        if width < 2 {
            return Err(Error::usage("lattice needs at least one token and blank"));
        }
        if blank >= width {
            return Err(Error::usage(format!(
                "blank index {blank} outside lattice width {width}"
            )));
        }
        for (t, row) in probs.outer_iter().enumerate() {
            if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
                return Err(Error::usage(format!("frame {t}: invalid probability {p}")));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::usage(format!("frame {t}: row sums to {sum}")));
            }
        }
        Ok(PosteriorLattice {
            probs,
            blank,
            context_id: 0,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], blank: usize) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::usage("lattice rows have unequal lengths"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let probs = Array2::from_shape_vec((rows.len(), width), flat)
            .map_err(|e| Error::usage(e.to_string()))?;
        PosteriorLattice::new(probs, blank)
    }

    /// Deterministic lattice whose frame `t` puts all mass on `alignment[t]`.
    pub fn one_hot(alignment: &[usize], width: usize, blank: usize) -> Result<Self> {
        let mut probs = Array2::zeros((alignment.len(), width));
        for (t, &s) in alignment.iter().enumerate() {
            if s >= width {
                return Err(Error::usage(format!("symbol {s} outside width {width}")));
            }
            probs[[t, s]] = 1.0;
        }
        PosteriorLattice::new(probs, blank)
    }

    pub fn with_context(mut self, context_id: u64) -> Self {
        self.context_id = context_id;
        self
    }

    pub fn num_frames(&self) -> usize {
        self.probs.nrows()
    }

    pub fn width(&self) -> usize {
        self.probs.ncols()
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    pub fn context_id(&self) -> u64 {
        self.context_id
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn row(&self, t: usize) -> ArrayView1<'_, f64> {
        self.probs.row(t)
    }

    #[inline]
    pub fn prob(&self, t: usize, symbol: usize) -> f64 {
        self.probs[[t, symbol]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_rows() {
        assert!(PosteriorLattice::from_rows(&[vec![0.5, 0.5]], 1).is_ok());
        assert!(PosteriorLattice::from_rows(&[vec![0.5, 0.4]], 1).is_err());
        assert!(PosteriorLattice::from_rows(&[vec![1.5, -0.5]], 1).is_err());
        assert!(PosteriorLattice::from_rows(&[], 0).is_err());
        assert!(PosteriorLattice::from_rows(&[vec![0.5, 0.5]], 2).is_err());
    }

    #[test]
    fn one_hot_rows() {
        let l = PosteriorLattice::one_hot(&[0, 2, 1], 3, 2).unwrap();
        assert_eq!(l.num_frames(), 3);
        assert_eq!(l.prob(1, 2), 1.0);
        assert_eq!(l.prob(1, 0), 0.0);
    }
}
