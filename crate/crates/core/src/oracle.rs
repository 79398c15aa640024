//! Brute-force reference implementations and numerical checks.
//!
//! Nothing here calls into the dynamic-programming or search code it is
//! used to check: alignments are enumerated, candidate sets are listed
//! exhaustively and gradients are taken by central differences.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

use crate::lattice::PosteriorLattice;
use crate::maskctc::MaskPredictor;
use crate::sequence::{MaskedSequence, Slot, TokenSequence};

/// A lattice with strictly positive random rows.
pub fn random_lattice<R: Rng>(
    rng: &mut R,
    frames: usize,
    width: usize,
    blank: usize,
) -> PosteriorLattice {
    let rows: Vec<Vec<f64>> = (0..frames)
        .map(|_| {
            let w: Vec<f64> = (0..width).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
        .collect();
    PosteriorLattice::from_rows(&rows, blank).expect("random rows are normalized")
}

pub fn random_logits<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0))
}

/// A random target of non-blank symbols that fits in `frames` frames.
pub fn random_reachable_target<R: Rng>(
    rng: &mut R,
    frames: usize,
    width: usize,
    blank: usize,
) -> Option<TokenSequence> {
    let tokens: Vec<usize> = (0..width).filter(|&s| s != blank).collect();
    for _ in 0..32 {
        let len = rng.random_range(0..=frames);
        let y: Vec<usize> = (0..len)
            .map(|_| tokens[rng.random_range(0..tokens.len())])
            .collect();
        let repeats = y.windows(2).filter(|w| w[0] == w[1]).count();
        if y.len() + repeats <= frames {
            return Some(TokenSequence::new(y));
        }
    }
    None
}

/// Argmax per frame, then collapse, written out longhand.
pub fn greedy_naive(lattice: &PosteriorLattice) -> (Vec<usize>, Vec<f64>) {
    let mut labels = Vec::new();
    let mut maxes = Vec::new();
    for t in 0..lattice.num_frames() {
        let mut best = 0;
        for s in 1..lattice.width() {
            if lattice.prob(t, s) > lattice.prob(t, best) {
                best = s;
            }
        }
        labels.push(best);
        maxes.push(lattice.prob(t, best));
    }
    let mut tokens = Vec::new();
    let mut conf: Vec<f64> = Vec::new();
    let mut t = 0;
    while t < labels.len() {
        let mut end = t;
        while end + 1 < labels.len() && labels[end + 1] == labels[t] {
            end += 1;
        }
        if labels[t] != lattice.blank() {
            tokens.push(labels[t]);
            conf.push(maxes[t..=end].iter().copied().fold(0.0, f64::max));
        }
        t = end + 1;
    }
    (tokens, conf)
}

fn collapse_naive(path: &[usize], blank: usize) -> Vec<usize> {
    let mut merged: Vec<usize> = Vec::new();
    for &z in path {
        if merged.last() != Some(&z) {
            merged.push(z);
        }
    }
    merged.retain(|&z| z != blank);
    merged
}

/// Visits every alignment of `frames` frames over `width` symbols.
fn for_each_alignment(frames: usize, width: usize, mut visit: impl FnMut(&[usize])) {
    let mut path = vec![0usize; frames];
    loop {
        visit(&path);
        let mut i = 0;
        loop {
            if i == frames {
                return;
            }
            path[i] += 1;
            if path[i] < width {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn path_prob(lattice: &PosteriorLattice, path: &[usize]) -> f64 {
    path.iter()
        .enumerate()
        .map(|(t, &z)| lattice.prob(t, z))
        .product()
}

/// `p(y)` by summing every alignment in linear space.
pub fn ctc_marginal_brute_force(lattice: &PosteriorLattice, y: &TokenSequence) -> f64 {
    let mut total = 0.0;
    for_each_alignment(lattice.num_frames(), lattice.width(), |path| {
        if collapse_naive(path, lattice.blank()) == y.ids() {
            total += path_prob(lattice, path);
        }
    });
    total
}

/// Probability mass of every distinct collapsed sequence.
pub fn ctc_sequence_distribution(lattice: &PosteriorLattice) -> HashMap<Vec<usize>, f64> {
    let mut mass = HashMap::new();
    for_each_alignment(lattice.num_frames(), lattice.width(), |path| {
        *mass
            .entry(collapse_naive(path, lattice.blank()))
            .or_insert(0.0) += path_prob(lattice, path);
    });
    mass
}

/// Central finite differences of a scalar function of a matrix.
pub fn central_difference(
    x: &Array2<f64>,
    eps: f64,
    mut f: impl FnMut(&Array2<f64>) -> f64,
) -> Array2<f64> {
    let mut grad = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.dim()) {
        let orig = probe[idx];
        probe[idx] = orig + eps;
        let plus = f(&probe);
        probe[idx] = orig - eps;
        let minus = f(&probe);
        probe[idx] = orig;
        grad[idx] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Entry magnitude below which [`max_relative_error`] measures absolute error
/// scaled by this floor.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)`.
pub fn max_relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "gradient shapes differ");
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max)
}

/// Every size-`k` subset of `items`, in lexicographic order.
pub fn subsets(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    fn rec(
        items: &[usize],
        k: usize,
        start: usize,
        cur: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            cur.push(items[i]);
            rec(items, k, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(items, k, 0, &mut Vec::new(), &mut out);
    out
}

/// One exhaustively enumerated candidate set: `(position, token, log p)` in
/// position order, plus its score.
#[derive(Clone, Debug, PartialEq)]
pub struct BruteCandidate {
    pub fills: Vec<(usize, usize, f64)>,
    pub score: f64,
}

/// Score of a set of log-probabilities, summed in descending order.
pub fn canonical_sum(logs: &[f64]) -> f64 {
    let mut v = logs.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v.into_iter().sum()
}

/// All candidate sets of `k` masked positions with one nonzero-probability
/// token each, sorted by score (descending) then by fill list.
pub fn enumerate_candidate_sets(
    masked_positions: &[usize],
    dists: &[Vec<f64>],
    k: usize,
) -> Vec<BruteCandidate> {
    let dist_of: HashMap<usize, &Vec<f64>> =
        masked_positions.iter().copied().zip(dists.iter()).collect();
    let mut out = Vec::new();
    for subset in subsets(masked_positions, k) {
        let mut choices: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new()];
        for &pos in &subset {
            let dist = dist_of[&pos];
            let mut next = Vec::new();
            for prefix in &choices {
                for (tok, &p) in dist.iter().enumerate() {
                    if p > 0.0 {
                        let mut c = prefix.clone();
                        c.push((pos, tok, p.ln()));
                        next.push(c);
                    }
                }
            }
            choices = next;
        }
        for fills in choices {
            let logs: Vec<f64> = fills.iter().map(|f| f.2).collect();
            out.push(BruteCandidate {
                score: canonical_sum(&logs),
                fills,
            });
        }
    }
    out.sort_by(|a, b| {
        b.score.total_cmp(&a.score).then_with(|| {
            let ka: Vec<(usize, usize)> = a.fills.iter().map(|f| (f.0, f.1)).collect();
            let kb: Vec<(usize, usize)> = b.fills.iter().map(|f| (f.0, f.1)).collect();
            ka.cmp(&kb)
        })
    });
    out
}

/// Fill counts per iteration: `K` each, the remainder last (`K` when it divides).
pub fn schedule(num_masked: usize, max_fills: usize) -> Vec<usize> {
    let mut left = num_masked;
    let mut out = Vec::new();
    while left > 0 {
        let k = left.min(max_fills);
        out.push(k);
        left -= k;
    }
    out
}

/// Highest cumulative fill score over every complete assignment reachable by
/// the iteration schedule, re-querying `predictor` after each iteration.
pub fn best_schedule_score<P: MaskPredictor + ?Sized>(
    predictor: &P,
    start: &MaskedSequence,
    context: u64,
    max_fills: usize,
) -> f64 {
    fn rec<P: MaskPredictor + ?Sized>(
        predictor: &P,
        seq: &MaskedSequence,
        context: u64,
        plan: &[usize],
        memo: &mut HashMap<Vec<Slot>, f64>,
    ) -> f64 {
        let Some((&k, rest)) = plan.split_first() else {
            return 0.0;
        };
        if let Some(&v) = memo.get(seq.slots()) {
            return v;
        }
        let positions = seq.masked_positions();
        let dists = predictor.predict(seq, context);
        let mut best = f64::NEG_INFINITY;
        for cand in enumerate_candidate_sets(&positions, &dists, k) {
            let mut child = seq.clone();
            for &(pos, tok, _) in &cand.fills {
                child.fill(pos, tok).expect("position is masked");
            }
            let total = cand.score + rec(predictor, &child, context, rest, memo);
            if total > best {
                best = total;
            }
        }
        memo.insert(seq.slots().to_vec(), best);
        best
    }
    let plan = schedule(start.num_masked(), max_fills);
    rec(predictor, start, context, &plan, &mut HashMap::new())
}

/// Largest number of candidate sets any expansion on the schedule can have.
pub fn max_expansion_size(num_masked: usize, max_fills: usize, vocab: usize) -> usize {
    let mut left = num_masked;
    let mut best = 1usize;
    for k in schedule(num_masked, max_fills) {
        best = best.max(binomial(left, k) * vocab.pow(k as u32));
        left -= k;
    }
    best
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// A context-dependent random predictor: each `(sequence, position)` gets
/// a fixed pseudo-random distribution derived from a hash of the masked
/// sequence. Larger `sharpness` gives more peaked rows.
#[derive(Clone, Debug, PartialEq)]
pub struct HashPredictor {
    pub seed: u64,
    pub num_symbols: usize,
    pub blank: usize,
    pub sharpness: f64,
}

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl MaskPredictor for HashPredictor {
    fn num_symbols(&self) -> usize {
        self.num_symbols
    }

    fn predict(&self, seq: &MaskedSequence, context: u64) -> Vec<Vec<f64>> {
        use rand::SeedableRng;
        let key = seq.canonical_key();
        seq.masked_positions()
            .into_iter()
            .map(|p| {
                let h = fnv1a(format!("{key}|{p}|{context}").as_bytes(), self.seed);
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(h);
                let w: Vec<f64> = (0..self.num_symbols)
                    .map(|s| {
                        if s == self.blank {
                            0.0
                        } else {
                            rng.random_range(0.01f64..1.0).powf(self.sharpness)
                        }
                    })
                    .collect();
                let total: f64 = w.iter().sum();
                w.into_iter().map(|x| x / total).collect()
            })
            .collect()
    }
}

/// A random masked sequence of length `len` over tokens `0..num_tokens`
/// with at least one mask.
pub fn random_masked_sequence<R: Rng>(
    rng: &mut R,
    len: usize,
    num_tokens: usize,
    mask_rate: f64,
) -> MaskedSequence {
    let mut slots: Vec<Slot> = (0..len)
        .map(|_| {
            if rng.random_bool(mask_rate) {
                Slot::Masked
            } else {
                Slot::Observed(rng.random_range(0..num_tokens))
            }
        })
        .collect();
    if !slots.contains(&Slot::Masked) {
        let p = rng.random_range(0..len);
        slots[p] = Slot::Masked;
    }
    MaskedSequence::new(slots)
}

/// A lattice whose greedy decoding is `tokens`, each token spread over one
/// or two frames with a random peak probability in `confidence`, separated
/// by confident blank frames. Token `i`'s confidence is the peak of its run.
pub fn lattice_for_tokens<R: Rng>(
    rng: &mut R,
    tokens: &[usize],
    width: usize,
    blank: usize,
    confidence: std::ops::Range<f64>,
) -> PosteriorLattice {
    let peaked = |rng: &mut R, argmax: usize, conf: f64| -> Vec<f64> {
        let w: Vec<f64> = (0..width)
            .map(|s| {
                if s == argmax {
                    0.0
                } else {
                    rng.random_range(0.05..1.0)
                }
            })
            .collect();
        let s: f64 = w.iter().sum();
        (0..width)
            .map(|i| {
                if i == argmax {
                    conf
                } else {
                    (1.0 - conf) * w[i] / s
                }
            })
            .collect::<Vec<f64>>()
    };
    let mut rows = Vec::new();
    for &tok in tokens {
        let conf = rng.random_range(confidence.clone());
        rows.push(peaked(rng, blank, 0.999));
        rows.push(peaked(rng, tok, conf));
        if rng.random_bool(0.5) {
            let lower = (0.5 + 0.5 * (conf - 0.5)).min(conf);
            let second = rng.random_range(lower..=conf);
            rows.push(peaked(rng, tok, second));
        }
    }
    rows.push(peaked(rng, blank, 0.999));
    PosteriorLattice::from_rows(&rows, blank).expect("rows are normalized")
}
