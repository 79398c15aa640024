//! CTC alignment semantics: the collapse map, greedy decoding, the
//! forward marginal over alignments and the forward-backward loss gradient.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::lattice::PosteriorLattice;
use crate::prob::{log_add, log_softmax, softmax, LogProb};
use crate::sequence::TokenSequence;

/// Frame-level alignment `Z` over tokens and blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment(pub Vec<usize>);

impl Alignment {
    pub fn collapse(&self, blank: usize) -> TokenSequence {
        collapse(&self.0, blank)
    }
}

/// Merges consecutive repeats, then drops blanks.
pub fn collapse(alignment: &[usize], blank: usize) -> TokenSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &z in alignment {
        if prev != Some(z) && z != blank {
            out.push(z);
        }
        prev = Some(z);
    }
    TokenSequence::new(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GreedyDecoding {
    pub alignment: Alignment,
    pub tokens: TokenSequence,
    /// One per output token: the highest frame posterior over the run of
    /// frames that was merged into it.
    pub confidences: Vec<f64>,
}

/// Per-frame argmax (lowest index wins ties) collapsed through [`collapse`].
pub fn greedy_decode(lattice: &PosteriorLattice) -> GreedyDecoding {
    let blank = lattice.blank();
    let mut alignment = Vec::with_capacity(lattice.num_frames());
    let mut best_probs = Vec::with_capacity(lattice.num_frames());
    for row in lattice.probs().outer_iter() {
        let (arg, p) =
            row.iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |(bi, bp), (i, &p)| {
                    if p > bp {
                        (i, p)
                    } else {
                        (bi, bp)
                    }
                });
        alignment.push(arg);
        best_probs.push(p);
    }

    let mut tokens = Vec::new();
    let mut confidences: Vec<f64> = Vec::new();
    let mut prev = None;
    for (&z, &p) in alignment.iter().zip(&best_probs) {
        if z != blank {
            if prev == Some(z) {
                let last = confidences.last_mut().expect("run has a token");
                *last = last.max(p);
            } else {
                tokens.push(z);
                confidences.push(p);
            }
        }
        prev = Some(z);
    }

    GreedyDecoding {
        alignment: Alignment(alignment),
        tokens: TokenSequence::new(tokens),
        confidences,
    }
}

/// Blank-interleaved label sequence `b y1 b y2 ... yL b`.
fn expand_labels(y: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * y.len() + 1);
    ext.push(blank);
    for &t in y {
        ext.push(t);
        ext.push(blank);
    }
    ext
}

/// Whether state `s` may be entered from `s - 2` (skipping a blank).
#[inline]
fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

/// Log-space forward table; `alpha[t][s]` includes the emission at `t`.
fn forward_table(log_probs: &Array2<f64>, ext: &[usize], blank: usize) -> Array2<f64> {
    let frames = log_probs.nrows();
    let states = ext.len();
    let mut alpha = Array2::from_elem((frames, states), f64::NEG_INFINITY);
    alpha[[0, 0]] = log_probs[[0, ext[0]]];
    if states > 1 {
        alpha[[0, 1]] = log_probs[[0, ext[1]]];
    }
    for t in 1..frames {
        for s in 0..states {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = log_add(acc, alpha[[t - 1, s - 1]]);
            }
            if can_skip(ext, s, blank) {
                acc = log_add(acc, alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = acc + log_probs[[t, ext[s]]];
        }
    }
    alpha
}

/// Log-space backward table; `beta[t][s]` includes the emission at `t`.
fn backward_table(log_probs: &Array2<f64>, ext: &[usize], blank: usize) -> Array2<f64> {
    let frames = log_probs.nrows();
    let states = ext.len();
    let mut beta = Array2::from_elem((frames, states), f64::NEG_INFINITY);
    let last = frames - 1;
    beta[[last, states - 1]] = log_probs[[last, ext[states - 1]]];
    if states > 1 {
        beta[[last, states - 2]] = log_probs[[last, ext[states - 2]]];
    }
    for t in (0..last).rev() {
        for s in 0..states {
            let mut acc = beta[[t + 1, s]];
            if s + 1 < states {
                acc = log_add(acc, beta[[t + 1, s + 1]]);
            }
            if s + 2 < states && can_skip(ext, s + 2, blank) {
                acc = log_add(acc, beta[[t + 1, s + 2]]);
            }
            beta[[t, s]] = acc + log_probs[[t, ext[s]]];
        }
    }
    beta
}

fn lattice_log_probs(lattice: &PosteriorLattice) -> Array2<f64> {
    lattice.probs().mapv(f64::ln)
}

fn final_log_prob(alpha: &Array2<f64>) -> f64 {
    let last = alpha.nrows() - 1;
    let states = alpha.ncols();
    let mut total = alpha[[last, states - 1]];
    if states > 1 {
        total = log_add(total, alpha[[last, states - 2]]);
    }
    total
}

/// `ln p_ctc(y | lattice)`: the summed probability of every alignment that
/// collapses to `y`. Unreachable targets yield [`LogProb::ZERO`].
pub fn ctc_log_marginal(lattice: &PosteriorLattice, y: &TokenSequence) -> Result<LogProb> {
    y.check(lattice.width(), lattice.blank())?;
    let ext = expand_labels(y.ids(), lattice.blank());
    let alpha = forward_table(&lattice_log_probs(lattice), &ext, lattice.blank());
    LogProb::new(final_log_prob(&alpha))
}

/// The same marginal as [`ctc_log_marginal`], computed by the backward recursion.
pub fn ctc_log_marginal_backward(lattice: &PosteriorLattice, y: &TokenSequence) -> Result<LogProb> {
    y.check(lattice.width(), lattice.blank())?;
    let ext = expand_labels(y.ids(), lattice.blank());
    let beta = backward_table(&lattice_log_probs(lattice), &ext, lattice.blank());
    let mut total = beta[[0, 0]];
    if ext.len() > 1 {
        total = log_add(total, beta[[0, 1]]);
    }
    LogProb::new(total)
}

/// CTC negative log-likelihood of `y` under `softmax(logits)` and its
/// gradient with respect to the logits.
pub fn ctc_loss_and_grad(
    logits: &Array2<f64>,
    y: &TokenSequence,
    blank: usize,
) -> Result<(f64, Array2<f64>)> {
    let (frames, width) = logits.dim();
    if frames == 0 {
        return Err(Error::usage("logits have no frames"));
    }
    if blank >= width {
        return Err(Error::usage(format!(
            "blank {blank} outside logit width {width}"
        )));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::usage("logits contain non-finite values"));
    }
    y.check(width, blank)?;

    let mut log_probs = Array2::zeros((frames, width));
    let mut probs = Array2::zeros((frames, width));
    for t in 0..frames {
        let row: Vec<f64> = logits.row(t).to_vec();
        for (c, (lp, p)) in log_softmax(&row).into_iter().zip(softmax(&row)).enumerate() {
            log_probs[[t, c]] = lp;
            probs[[t, c]] = p;
        }
    }

    let ext = expand_labels(y.ids(), blank);
    let alpha = forward_table(&log_probs, &ext, blank);
    let log_marginal = final_log_prob(&alpha);
    if log_marginal == f64::NEG_INFINITY {
        return Err(Error::InfiniteLoss(format!(
            "target of length {} is unreachable in {frames} frames",
            y.len()
        )));
    }
    let beta = backward_table(&log_probs, &ext, blank);

    let mut grad = probs;
    for t in 0..frames {
        for (s, &label) in ext.iter().enumerate() {
            let occ = alpha[[t, s]] + beta[[t, s]] - log_probs[[t, label]] - log_marginal;
            if occ > f64::NEG_INFINITY {
                grad[[t, label]] -= occ.exp();
            }
        }
    }
    Ok((-log_marginal, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const B: usize = 9;

    #[test]
    fn collapse_examples() {
        let (a, b) = (0, 1);
        assert!(collapse(&[B, B], B).is_empty());
        assert_eq!(collapse(&[a, B, a, b], B).ids(), &[a, a, b]);
        assert_eq!(collapse(&[a, a, B, a], B).ids(), &[a, a]);
    }

    #[test]
    fn collapse_idempotent_on_clean_input() {
        let clean = [0, 1, 0, 2, 1];
        assert_eq!(collapse(&clean, B).ids(), &clean);
        let twice = collapse(collapse(&clean, B).ids(), B);
        assert_eq!(twice.ids(), &clean);
    }

    #[test]
    fn greedy_one_hot() {
        let l = PosteriorLattice::one_hot(&[0, 2, 1], 3, 2).unwrap();
        let g = greedy_decode(&l);
        assert_eq!(g.tokens.ids(), &[0, 1]);
        assert_eq!(g.confidences, vec![1.0, 1.0]);

        let all_blank = PosteriorLattice::one_hot(&[2, 2, 2], 3, 2).unwrap();
        assert!(greedy_decode(&all_blank).tokens.is_empty());
    }

    #[test]
    fn greedy_confidence_is_run_maximum_and_ties_go_low() {
        let rows = vec![
            vec![0.6, 0.1, 0.3],
            vec![0.9, 0.05, 0.05],
            vec![0.2, 0.2, 0.6],
            vec![0.4, 0.4, 0.2],
        ];
        let l = PosteriorLattice::from_rows(&rows, 2).unwrap();
        let g = greedy_decode(&l);
        assert_eq!(g.alignment.0, vec![0, 0, 2, 0]);
        assert_eq!(g.tokens.ids(), &[0, 0]);
        assert_eq!(g.confidences, vec![0.9, 0.4]);
    }

    #[test]
    fn greedy_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let l = oracle::random_lattice(&mut rng, 4, 4, 3);
            let (tokens, conf) = oracle::greedy_naive(&l);
            let g = greedy_decode(&l);
            assert_eq!(g.tokens.ids(), tokens.as_slice());
            assert_eq!(g.confidences, conf);
        }
    }

    #[test]
    fn marginal_uniform_two_frames() {
        let l = PosteriorLattice::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]], 1).unwrap();
        let lp = ctc_log_marginal(&l, &TokenSequence::new(vec![0])).unwrap();
        assert!((lp.value() - 0.75f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn marginal_one_hot_is_certain() {
        let l = PosteriorLattice::one_hot(&[0, 0, 2, 1, 1, 2], 3, 2).unwrap();
        let lp = ctc_log_marginal(&l, &TokenSequence::new(vec![0, 1])).unwrap();
        assert_eq!(lp.value(), 0.0);
        let other = ctc_log_marginal(&l, &TokenSequence::new(vec![1])).unwrap();
        assert!(other.is_zero());
    }

    #[test]
    fn marginal_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let l = oracle::random_lattice(&mut rng, 6, 4, 3);
            let len = rng.random_range(0..=3);
            let y: Vec<usize> = (0..len).map(|_| rng.random_range(0..3)).collect();
            let y = TokenSequence::new(y);
            let got = ctc_log_marginal(&l, &y).unwrap().prob();
            let want = oracle::ctc_marginal_brute_force(&l, &y);
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn unreachable_and_empty_targets() {
        let l = PosteriorLattice::from_rows(&[vec![0.3, 0.7], vec![0.4, 0.6]], 1).unwrap();
        // "aa" needs a separating blank: 3 frames minimum.
        let aa = ctc_log_marginal(&l, &TokenSequence::new(vec![0, 0])).unwrap();
        assert!(aa.is_zero());
        let empty = ctc_log_marginal(&l, &TokenSequence::default()).unwrap();
        assert!((empty.prob() - 0.7 * 0.6).abs() < 1e-15);
        assert!(ctc_log_marginal(&l, &TokenSequence::new(vec![1])).is_err());
    }

    #[test]
    fn forward_and_backward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let l = oracle::random_lattice(&mut rng, 7, 5, 4);
            let len = rng.random_range(0..=4);
            let y = TokenSequence::new((0..len).map(|_| rng.random_range(0..4)).collect());
            let f = ctc_log_marginal(&l, &y).unwrap().value();
            let b = ctc_log_marginal_backward(&l, &y).unwrap().value();
            if f == f64::NEG_INFINITY {
                assert_eq!(b, f64::NEG_INFINITY);
            } else {
                assert!((f - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_frame_reduces_to_cross_entropy() {
        let logits = Array2::zeros((1, 4));
        let (loss, grad) = ctc_loss_and_grad(&logits, &TokenSequence::new(vec![0]), 3).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        let expected = [0.25 - 1.0, 0.25, 0.25, 0.25];
        for (g, e) in grad.iter().zip(expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_rejects_unreachable_target() {
        let logits = Array2::zeros((2, 3));
        let err = ctc_loss_and_grad(&logits, &TokenSequence::new(vec![0, 0]), 2).unwrap_err();
        assert!(matches!(err, Error::InfiniteLoss(_)));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let frames = rng.random_range(1..=6);
            let width = rng.random_range(2..=4);
            let blank = width - 1;
            let logits = oracle::random_logits(&mut rng, frames, width);
            let Some(y) = oracle::random_reachable_target(&mut rng, frames, width, blank) else {
                continue;
            };
            let (_, grad) = ctc_loss_and_grad(&logits, &y, blank).unwrap();
            let numeric = oracle::central_difference(&logits, 1e-5, |x| {
                ctc_loss_and_grad(x, &y, blank).unwrap().0
            });
            let err = oracle::max_relative_error(&grad, &numeric);
            assert!(err < 1e-5, "relative error {err}");
        }
    }
}
