use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write;

use crate::ctc::{greedy_decode, GreedyDecoding};
use crate::error::{Error, Result};
use crate::lattice::PosteriorLattice;
use crate::maskctc::candidates::top_b_candidate_sets;
use crate::maskctc::predictor::MaskPredictor;
use crate::maskctc::{iteration_fill_count, mask_by_threshold, num_iterations, DecodeConfig};
use crate::sequence::{Hypothesis, MaskedSequence, Slot, TokenSequence};

/// Contents of the working queue after one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationTrace {
    pub iteration: usize,
    pub k: usize,
    pub beam: Vec<Hypothesis>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub ctc: GreedyDecoding,
    /// The CTC hypothesis after threshold masking.
    pub initial: MaskedSequence,
    pub tokens: TokenSequence,
    pub best: Hypothesis,
    /// Final accepted hypotheses, best first.
    pub beam: Vec<Hypothesis>,
    pub iterations: usize,
    pub predictor_queries: usize,
    pub trace: Vec<IterationTrace>,
}

/// Best-first order over hypotheses: higher score, then the smaller
/// `(position, token)` fill list.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.trace_keys().cmp(&b.trace_keys()))
}

/// Greedy CTC decoding followed by threshold masking.
pub fn initial_hypothesis(
    lattice: &PosteriorLattice,
    p_thr: f64,
) -> Result<(GreedyDecoding, MaskedSequence)> {
    let ctc = greedy_decode(lattice);
    let masked = mask_by_threshold(&ctc.tokens, &ctc.confidences, p_thr)?;
    Ok((ctc, masked))
}

fn check_symbols<P: MaskPredictor + ?Sized>(
    lattice: &PosteriorLattice,
    predictor: &P,
) -> Result<()> {
    if predictor.num_symbols() != lattice.width() {
        return Err(Error::usage(format!(
            "predictor covers {} symbols, lattice has {}",
            predictor.num_symbols(),
            lattice.width()
        )));
    }
    Ok(())
}

fn run<P: MaskPredictor + ?Sized>(
    lattice: &PosteriorLattice,
    predictor: &P,
    config: &DecodeConfig,
    beam_width: usize,
    keep_trace: bool,
) -> Result<DecodeOutput> {
    config.validate()?;
    check_symbols(lattice, predictor)?;
    let (ctc, initial) = initial_hypothesis(lattice, config.p_thr)?;
    let context = lattice.context_id();
    let n = initial.num_masked();

    let mut accepted = vec![Hypothesis::root(initial.clone())];
    let mut trace = Vec::new();
    let mut queries = 0;
    let total = if n == 0 {
        0
    } else {
        num_iterations(n, config.max_fills)
    };

    for iteration in 1..=total {
        let k = iteration_fill_count(n, config.max_fills, iteration, total)?;
        let mut queue: HashMap<Vec<Slot>, Hypothesis> = HashMap::new();
        for parent in &accepted {
            queries += 1;
            for cand in top_b_candidate_sets(parent, predictor, context, k, beam_width)? {
                let child = parent.extend(&cand.fills)?;
                match queue.get_mut(child.sequence.slots()) {
                    Some(existing) => {
                        if rank(&child, existing) == Ordering::Less {
                            *existing = child;
                        }
                    }
                    None => {
                        queue.insert(child.sequence.slots().to_vec(), child);
                    }
                }
            }
        }
        let mut next: Vec<Hypothesis> = queue.into_values().collect();
        next.sort_by(rank);
        next.truncate(beam_width);
        if keep_trace {
            trace.push(IterationTrace {
                iteration,
                k,
                beam: next.clone(),
            });
        }
        accepted = next;
    }

    let best = accepted[0].clone();
    let tokens = best
        .sequence
        .to_tokens()
        .expect("every mask is filled after the last iteration");
    Ok(DecodeOutput {
        ctc,
        initial,
        tokens,
        best,
        beam: accepted,
        iterations: total,
        predictor_queries: queries,
        trace,
    })
}

/// Easy-first Mask-CTC: each iteration commits the single highest-scoring
/// candidate set and re-queries the predictor. `config.beam` is ignored.
pub fn easy_first_decode<P: MaskPredictor + ?Sized>(
    lattice: &PosteriorLattice,
    predictor: &P,
    config: &DecodeConfig,
) -> Result<DecodeOutput> {
    run(lattice, predictor, config, 1, false)
}

/// [`easy_first_decode`] recording every iteration's committed hypothesis.
pub fn easy_first_decode_traced<P: MaskPredictor + ?Sized>(
    lattice: &PosteriorLattice,
    predictor: &P,
    config: &DecodeConfig,
) -> Result<DecodeOutput> {
    run(lattice, predictor, config, 1, true)
}

/// Beam search over mask filling with `config.beam` accepted hypotheses per
/// iteration; returns the best hypothesis of the final beam.
pub fn beam_search_decode<P: MaskPredictor + ?Sized>(
    lattice: &PosteriorLattice,
    predictor: &P,
    config: &DecodeConfig,
) -> Result<DecodeOutput> {
    run(lattice, predictor, config, config.beam, false)
}

/// [`beam_search_decode`] recording every iteration's queue.
pub fn beam_search_decode_traced<P: MaskPredictor + ?Sized>(
    lattice: &PosteriorLattice,
    predictor: &P,
    config: &DecodeConfig,
) -> Result<DecodeOutput> {
    run(lattice, predictor, config, config.beam, true)
}

/// Text rendering of a decode trace, one block per iteration.
pub fn render_trace(out: &DecodeOutput) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "init masked={} seq=[{}]",
        out.initial.num_masked(),
        out.initial.canonical_key()
    );
    for it in &out.trace {
        let _ = writeln!(
            s,
            "iteration {} k={} size={}",
            it.iteration,
            it.k,
            it.beam.len()
        );
        for (i, h) in it.beam.iter().enumerate() {
            let fills: Vec<String> = h
                .fill_trace
                .iter()
                .map(|f| format!("{}:{}@{}", f.position, f.token, f.log_prob))
                .collect();
            let _ = writeln!(
                s,
                "  #{i} score={} seq=[{}] fills=[{}]",
                h.score,
                h.sequence.canonical_key(),
                fills.join(" ")
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskctc::predictor::{ContextScheme, TablePredictor};

    /// Lattice `a ? ? c` over tokens {a, b, c} + blank (index 3), where the
    /// two middle tokens are low confidence.
    fn two_mask_lattice() -> PosteriorLattice {
        let rows = vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![0.2, 0.5, 0.3, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![0.1, 0.6, 0.3, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ];
        PosteriorLattice::from_rows(&rows, 3).unwrap()
    }

    #[test]
    fn no_masks_short_circuits() {
        let l = PosteriorLattice::one_hot(&[0, 3, 1, 2], 4, 3).unwrap();
        let p = TablePredictor::uniform(4, 3, ContextScheme::Full).unwrap();
        let out = beam_search_decode(&l, &p, &DecodeConfig::default()).unwrap();
        assert_eq!(out.tokens.ids(), &[0, 1, 2]);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.predictor_queries, 0);
        assert!(out.best.fill_trace.is_empty());
    }

    #[test]
    fn one_hot_predictor_forces_tokens() {
        let l = two_mask_lattice();
        let mut p = TablePredictor::uniform(4, 3, ContextScheme::Full).unwrap();
        p.set_all_for_test(vec![0.0, 0.0, 1.0, 0.0]);
        for k in 1..=3 {
            let cfg = DecodeConfig {
                p_thr: 0.99,
                max_fills: k,
                beam: 1,
            };
            let out = easy_first_decode(&l, &p, &cfg).unwrap();
            assert_eq!(out.tokens.ids(), &[0, 2, 2, 2]);
        }
    }

    #[test]
    fn easy_first_hand_trace() {
        // Start "0 _ _ 2". With K = 1 the first step picks the most
        // confident single fill; the second distribution then depends on it.
        let l = two_mask_lattice();
        let mut p = TablePredictor::uniform(4, 3, ContextScheme::Full).unwrap();
        p.insert("0 _ _ 2", Some(1), vec![0.6, 0.3, 0.1, 0.0])
            .unwrap();
        p.insert("0 _ _ 2", Some(2), vec![0.2, 0.1, 0.7, 0.0])
            .unwrap();
        // After filling position 2 with token 2:
        p.insert("0 _ 2 2", Some(1), vec![0.1, 0.8, 0.1, 0.0])
            .unwrap();
        let cfg = DecodeConfig {
            p_thr: 0.99,
            max_fills: 1,
            beam: 1,
        };
        let out = easy_first_decode(&l, &p, &cfg).unwrap();
        assert_eq!(out.tokens.ids(), &[0, 1, 2, 2]);
        assert_eq!(out.best.trace_keys(), vec![(2, 2), (1, 1)]);
        let expected = 0.7f64.ln() + 0.8f64.ln();
        assert!((out.best.score.value() - expected).abs() < 1e-15);
        assert_eq!(out.predictor_queries, 2);
    }

    #[test]
    fn beam_escapes_greedy_trap() {
        // Greedy commits position 1 = token 0 (0.6) and is then stuck with a
        // flat second step; the runner-up leads to a confident completion.
        let l = two_mask_lattice();
        let mut p = TablePredictor::uniform(4, 3, ContextScheme::Full).unwrap();
        p.insert("0 _ _ 2", Some(1), vec![0.6, 0.4, 0.0, 0.0])
            .unwrap();
        p.insert("0 _ _ 2", Some(2), vec![0.3, 0.3, 0.4, 0.0])
            .unwrap();
        p.insert("0 0 _ 2", Some(2), vec![0.34, 0.33, 0.33, 0.0])
            .unwrap();
        p.insert("0 1 _ 2", Some(2), vec![0.0, 0.0, 1.0, 0.0])
            .unwrap();
        let cfg = DecodeConfig {
            p_thr: 0.99,
            max_fills: 1,
            beam: 2,
        };
        let greedy = easy_first_decode(&l, &p, &cfg).unwrap();
        let beam = beam_search_decode_traced(&l, &p, &cfg).unwrap();
        assert_eq!(greedy.tokens.ids(), &[0, 0, 0, 2]);
        assert_eq!(beam.tokens.ids(), &[0, 1, 2, 2]);
        assert!(beam.best.score > greedy.best.score);
        assert_eq!(beam.trace.len(), 2);
        let text = render_trace(&beam);
        assert!(text.starts_with("init masked=2 seq=[0 _ _ 2]\niteration 1 k=1 size=2\n"));
    }

    #[test]
    fn predictor_width_must_match() {
        let l = two_mask_lattice();
        let p = TablePredictor::uniform(3, 2, ContextScheme::Full).unwrap();
        assert!(beam_search_decode(&l, &p, &DecodeConfig::default()).is_err());
    }

    impl TablePredictor {
        fn set_all_for_test(&mut self, dist: Vec<f64>) {
            *self = TablePredictor::new(4, 3, self.scheme(), dist).unwrap();
        }
    }
}
