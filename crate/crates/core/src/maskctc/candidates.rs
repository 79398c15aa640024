//! Exact top-B extraction of candidate fill sets.
//!
//! A candidate set picks `k` masked positions and one token for each; its
//! score is the product of the per-position posteriors. Instead of listing
//! all `C(N, k) * V^k` sets, a best-first frontier walks a move graph:
//!
//! * the root takes the `k` positions with the highest best-token
//!   probability, each at its best token;
//! * a *next-token* move advances one chosen position to its next-ranked token;
//! * a *swap* move, allowed while every chosen position sits at its best
//!   token, trades one chosen position for an unchosen one.
//!
//! Every non-root set has a predecessor under these moves that ranks
//! strictly ahead of it in the output order (score descending, then fill
//! list ascending), so popping the frontier yields sets in exactly that
//! order. Scores sum the fill log-probabilities in descending order, which
//! keeps them monotone under both moves in floating point.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use crate::error::{Error, Result};
use crate::maskctc::predictor::{check_prediction, MaskPredictor};
use crate::prob::LogProb;
use crate::sequence::{Fill, Hypothesis};

/// `k` fills for distinct masked positions and their joint log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    /// Fills in ascending position order.
    pub fills: Vec<Fill>,
    pub score: LogProb,
}

impl CandidateSet {
    pub fn keys(&self) -> Vec<(usize, usize)> {
        self.fills.iter().map(Fill::key).collect()
    }
}

/// Sum of log-probabilities taken in descending order.
pub(crate) fn ordered_sum(logs: &mut [f64]) -> f64 {
    logs.sort_unstable_by(|a, b| b.total_cmp(a));
    logs.iter().sum()
}

const UNCHOSEN: u32 = u32::MAX;

struct Node {
    score: f64,
    keys: Vec<(usize, usize)>,
    ranks: Vec<u32>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    // Max-heap: higher score first, then the smaller fill list.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.keys.cmp(&self.keys))
    }
}

struct Frontier<'a> {
    positions: &'a [usize],
    /// Per masked position: `(token, log p)` sorted by probability
    /// descending, then token ascending. Zero-probability tokens are left out.
    ranked: Vec<Vec<(usize, f64)>>,
}

impl Frontier<'_> {
    fn node(&self, ranks: Vec<u32>) -> Node {
        let mut keys = Vec::new();
        let mut logs = Vec::new();
        for (i, &r) in ranks.iter().enumerate() {
            if r != UNCHOSEN {
                let (tok, lp) = self.ranked[i][r as usize];
                keys.push((self.positions[i], tok));
                logs.push(lp);
            }
        }
        Node {
            score: ordered_sum(&mut logs),
            keys,
            ranks,
        }
    }

    fn to_candidate(&self, node: &Node) -> CandidateSet {
        let fills = node
            .ranks
            .iter()
            .enumerate()
            .filter(|(_, r)| **r != UNCHOSEN)
            .map(|(i, &r)| {
                let (token, lp) = self.ranked[i][r as usize];
                Fill {
                    position: self.positions[i],
                    token,
                    log_prob: LogProb::new(lp).expect("log of a probability"),
                }
            })
            .collect();
        CandidateSet {
            fills,
            score: LogProb::new(node.score).expect("sum of log-probabilities"),
        }
    }
}

/// Exact top-`beam` candidate sets of size `k` from one batch of masked
/// position distributions (`dists[i]` belongs to `masked_positions[i]`).
pub fn top_b_from_distributions(
    masked_positions: &[usize],
    dists: &[Vec<f64>],
    k: usize,
    beam: usize,
) -> Result<Vec<CandidateSet>> {
    if dists.len() != masked_positions.len() {
        return Err(Error::usage(
            "one distribution per masked position required",
        ));
    }
    if k == 0 || k > masked_positions.len() {
        return Err(Error::usage(format!(
            "cannot choose {k} fills from {} masked positions",
            masked_positions.len()
        )));
    }
    if beam == 0 {
        return Err(Error::usage("beam width must be at least 1"));
    }

    let ranked: Vec<Vec<(usize, f64)>> = dists
        .iter()
        .map(|d| {
            let mut r: Vec<(usize, f64)> = d
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(t, p)| (t, p.ln()))
                .collect();
            r.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            r
        })
        .collect();
    if ranked.iter().any(Vec::is_empty) {
        return Err(Error::usage("a masked position has no token with mass"));
    }
    let frontier = Frontier {
        positions: masked_positions,
        ranked,
    };

    let mut order: Vec<usize> = (0..masked_positions.len()).collect();
    order.sort_by(|&a, &b| {
        frontier.ranked[b][0]
            .1
            .total_cmp(&frontier.ranked[a][0].1)
            .then(masked_positions[a].cmp(&masked_positions[b]))
    });
    let mut root = vec![UNCHOSEN; masked_positions.len()];
    for &i in &order[..k] {
        root[i] = 0;
    }

    let mut heap = BinaryHeap::new();
    let mut seen = HashSet::new();
    seen.insert(root.clone());
    heap.push(frontier.node(root));

    let mut out = Vec::with_capacity(beam.min(64));
    while let Some(node) = heap.pop() {
        out.push(frontier.to_candidate(&node));
        if out.len() == beam {
            break;
        }
        let ranks = &node.ranks;
        for (i, &r) in ranks.iter().enumerate() {
            if r != UNCHOSEN && (r as usize) + 1 < frontier.ranked[i].len() {
                let mut next = ranks.clone();
                next[i] = r + 1;
                if seen.insert(next.clone()) {
                    heap.push(frontier.node(next));
                }
            }
        }
        if ranks.iter().all(|&r| r == UNCHOSEN || r == 0) {
            for out_i in (0..ranks.len()).filter(|&i| ranks[i] == 0) {
                for in_j in (0..ranks.len()).filter(|&j| ranks[j] == UNCHOSEN) {
                    let mut next = ranks.clone();
                    next[out_i] = UNCHOSEN;
                    next[in_j] = 0;
                    if seen.insert(next.clone()) {
                        heap.push(frontier.node(next));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Queries `predictor` once for `parent` and returns its top-`beam`
/// candidate sets of size `k`.
pub fn top_b_candidate_sets<P: MaskPredictor + ?Sized>(
    parent: &Hypothesis,
    predictor: &P,
    context: u64,
    k: usize,
    beam: usize,
) -> Result<Vec<CandidateSet>> {
    let seq = &parent.sequence;
    if k > seq.num_masked() {
        return Err(Error::usage(format!(
            "k = {k} exceeds the {} masked positions",
            seq.num_masked()
        )));
    }
    let dists = predictor.predict(seq, context);
    check_prediction(seq, &dists, predictor.num_symbols())?;
    top_b_from_distributions(&seq.masked_positions(), &dists, k, beam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dists(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let w: Vec<f64> = (0..vocab).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|x| x / s).collect()
            })
            .collect()
    }

    #[test]
    fn single_position_returns_best_tokens_in_order() {
        let d = vec![vec![0.2, 0.5, 0.3]];
        let c = top_b_from_distributions(&[4], &d, 1, 2).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].keys(), vec![(4, 1)]);
        assert_eq!(c[1].keys(), vec![(4, 2)]);
        assert!((c[0].score.value() - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn two_positions_argmax_pair() {
        let d = vec![vec![0.1, 0.7, 0.2], vec![0.6, 0.3, 0.1]];
        let c = top_b_from_distributions(&[0, 1], &d, 2, 1).unwrap();
        assert_eq!(c[0].keys(), vec![(0, 1), (1, 0)]);
        let expected = 0.7f64.ln() + 0.6f64.ln();
        assert!((c[0].score.value() - expected).abs() < 1e-15);
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random_dists(&mut rng, 3, 4);
        let brute = oracle::enumerate_candidate_sets(&[0, 1, 2], &d, 2);
        assert_eq!(brute.len(), 48);
        let got = top_b_from_distributions(&[0, 1, 2], &d, 2, 8).unwrap();
        assert_eq!(got.len(), 8);
        for (g, b) in got.iter().zip(&brute) {
            let bk: Vec<(usize, usize)> = b.fills.iter().map(|f| (f.0, f.1)).collect();
            assert_eq!(g.keys(), bk);
            assert_eq!(g.score.value(), b.score);
        }
    }

    #[test]
    fn full_enumeration_with_ties() {
        // Uniform rows tie everything; order must fall back to fill lists.
        let d = vec![vec![0.5, 0.5]; 3];
        let brute = oracle::enumerate_candidate_sets(&[1, 3, 5], &d, 2);
        let got = top_b_from_distributions(&[1, 3, 5], &d, 2, 100).unwrap();
        assert_eq!(got.len(), brute.len());
        for (g, b) in got.iter().zip(&brute) {
            let bk: Vec<(usize, usize)> = b.fills.iter().map(|f| (f.0, f.1)).collect();
            assert_eq!(g.keys(), bk);
        }
    }

    #[test]
    fn randomized_prefix_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let n = rng.random_range(1..=5);
            let vocab = rng.random_range(1..=4);
            let k = rng.random_range(1..=n);
            let beam = rng.random_range(1..=20);
            let mut d = random_dists(&mut rng, n, vocab);
            // Occasional exact ties and zero entries.
            if rng.random_bool(0.3) {
                d[0] = vec![1.0 / vocab as f64; vocab];
            }
            if vocab > 1 && rng.random_bool(0.3) {
                d[n - 1][0] = 0.0;
                let s: f64 = d[n - 1].iter().sum();
                d[n - 1].iter_mut().for_each(|x| *x /= s);
            }
            let positions: Vec<usize> = (0..n).map(|i| 2 * i).collect();
            let brute = oracle::enumerate_candidate_sets(&positions, &d, k);
            let got = top_b_from_distributions(&positions, &d, k, beam).unwrap();
            assert_eq!(got.len(), beam.min(brute.len()));
            for (g, b) in got.iter().zip(&brute) {
                let bk: Vec<(usize, usize)> = b.fills.iter().map(|f| (f.0, f.1)).collect();
                assert_eq!(g.keys(), bk);
                assert_eq!(g.score.value(), b.score);
            }
            for w in got.windows(2) {
                assert!(w[0].score >= w[1].score);
                assert_ne!(w[0].keys(), w[1].keys());
            }
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        let d = vec![vec![1.0]];
        assert!(top_b_from_distributions(&[0], &d, 2, 1).is_err());
        assert!(top_b_from_distributions(&[0], &d, 0, 1).is_err());
        assert!(top_b_from_distributions(&[0], &d, 1, 0).is_err());
    }
}
