//! Oracle suites: every check compares the library against a brute-force or
//! numerical reference from [`crate::oracle`] on seeded random instances.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::ctc::{ctc_log_marginal, ctc_loss_and_grad, greedy_decode};
use crate::distill::{
    combined_kd_loss, decoder_frame_kd_loss, frame_kd_loss, joint_loss, mlm_loss, nbest_normalize,
    sequence_kd_loss, total_loss, DistillWeights, FrameDistributionPair, NBestEntry, NBestList,
};
use crate::io::{decode_lattice, encode_tensor, Dtype};
use crate::maskctc::{
    beam_search_decode, easy_first_decode, top_b_from_distributions, DecodeConfig,
};
use crate::oracle::{self, HashPredictor};
use crate::sequence::TokenSequence;
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    /// First failing instance, if any.
    pub failure: Option<String>,
}

impl SuiteResult {
    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

struct Tally {
    name: &'static str,
    passed: usize,
    total: usize,
    failure: Option<String>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Tally {
            name,
            passed: 0,
            total: 0,
            failure: None,
        }
    }

    fn check(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        self.total += 1;
        if ok {
            self.passed += 1;
        } else if self.failure.is_none() {
            self.failure = Some(format!("instance {}: {}", self.total - 1, detail()));
        }
    }

    fn done(self) -> SuiteResult {
        SuiteResult {
            name: self.name,
            passed: self.passed,
            total: self.total,
            failure: self.failure,
        }
    }
}

fn rng_for(seed: u64, suite: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(suite);
    rng
}

fn random_probs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.05..1.0));
    for mut r in m.rows_mut() {
        let s = r.sum();
        r /= s;
    }
    m
}

fn ctc_marginal_suite(seed: u64) -> SuiteResult {
    let mut rng = rng_for(seed, 1);
    let mut t = Tally::new("ctc-marginal");
    for _ in 0..100 {
        let frames = rng.random_range(1..=5);
        let width = rng.random_range(2..=3);
        let lattice = oracle::random_lattice(&mut rng, frames, width, width - 1);
        let Some(y) = oracle::random_reachable_target(&mut rng, frames, width, width - 1) else {
            continue;
        };
        let got = ctc_log_marginal(&lattice, &y).map(|l| l.prob());
        let want = oracle::ctc_marginal_brute_force(&lattice, &y);
        t.check(
            got.as_ref().is_ok_and(|g| (g - want).abs() <= 1e-10),
            || format!("y={y} got {got:?} want {want}"),
        );
    }
    t.done()
}

fn ctc_total_probability_suite(seed: u64) -> SuiteResult {
    let mut rng = rng_for(seed, 2);
    let mut t = Tally::new("ctc-total-probability");
    for _ in 0..40 {
        let frames = rng.random_range(1..=4);
        let width = rng.random_range(2..=3);
        let lattice = oracle::random_lattice(&mut rng, frames, width, 0);
        let total: f64 = oracle::ctc_sequence_distribution(&lattice)
            .keys()
            .map(|y| {
                ctc_log_marginal(&lattice, &TokenSequence::new(y.clone()))
                    .map_or(f64::NAN, |l| l.prob())
            })
            .sum();
        t.check((total - 1.0).abs() <= 1e-9, || format!("total {total}"));
    }
    t.done()
}

fn ctc_greedy_suite(seed: u64) -> SuiteResult {
    let mut rng = rng_for(seed, 3);
    let mut t = Tally::new("ctc-greedy");
    for _ in 0..100 {
        let frames = rng.random_range(1..=8);
        let width = rng.random_range(2..=5);
        let lattice = oracle::random_lattice(&mut rng, frames, width, width - 1);
        let g = greedy_decode(&lattice);
        let (tokens, conf) = oracle::greedy_naive(&lattice);
        t.check(g.tokens.ids() == tokens && g.confidences == conf, || {
            format!("got {} want {tokens:?}", g.tokens)
        });
    }
    t.done()
}

const EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-5;

fn gradient_suite(seed: u64) -> Vec<SuiteResult> {
    let mut rng = rng_for(seed, 4);
    let mut ctc = Tally::new("grad-ctc");
    let mut mlm = Tally::new("grad-mlm");
    let mut fkd = Tally::new("grad-frame-kd");
    let mut dec = Tally::new("grad-decoder-frame-kd");
    let mut skd = Tally::new("grad-sequence-kd");
    for _ in 0..20 {
        let frames = rng.random_range(2..=6);
        let width = rng.random_range(2..=4);
        let z = oracle::random_logits(&mut rng, frames, width);

        if let Some(y) = oracle::random_reachable_target(&mut rng, frames, width, 0) {
            let (_, g) = ctc_loss_and_grad(&z, &y, 0).expect("reachable");
            let fd = oracle::central_difference(&z, EPS, |x| {
                ctc_loss_and_grad(x, &y, 0).expect("reachable").0
            });
            let e = oracle::max_relative_error(&g, &fd);
            ctc.check(e < GRAD_TOL, || format!("relative error {e}"));
        }

        let targets: Vec<usize> = (0..frames).map(|_| rng.random_range(0..width)).collect();
        let (_, g) = mlm_loss(&z, &targets).expect("valid");
        let fd = oracle::central_difference(&z, EPS, |x| mlm_loss(x, &targets).expect("valid").0);
        let e = oracle::max_relative_error(&g, &fd);
        mlm.check(e < GRAD_TOL, || format!("relative error {e}"));

        let teacher = random_probs(&mut rng, frames, width);
        let pair = FrameDistributionPair::all_rows(teacher.clone(), z.clone()).expect("shapes");
        let (_, g) = frame_kd_loss(&pair).expect("valid");
        let fd = oracle::central_difference(&z, EPS, |x| {
            frame_kd_loss(&pair.with_logits(x.clone()).expect("shape"))
                .expect("valid")
                .0
        });
        let e = oracle::max_relative_error(&g, &fd);
        fkd.check(e < GRAD_TOL, || format!("relative error {e}"));

        let mask: Vec<usize> = (0..frames).filter(|_| rng.random_bool(0.5)).collect();
        let mask = if mask.is_empty() { vec![0] } else { mask };
        let (_, g) = decoder_frame_kd_loss(&pair, &mask).expect("valid");
        let fd = oracle::central_difference(&z, EPS, |x| {
            decoder_frame_kd_loss(&pair.with_logits(x.clone()).expect("shape"), &mask)
                .expect("valid")
                .0
        });
        let e = oracle::max_relative_error(&g, &fd);
        dec.check(e < GRAD_TOL, || format!("relative error {e}"));

        let seq_len = frames + 2;
        let mut positions: Vec<usize> = (0..seq_len).filter(|_| rng.random_bool(0.6)).collect();
        positions.truncate(frames);
        if positions.is_empty() {
            positions.push(1);
        }
        let zs = oracle::random_logits(&mut rng, positions.len(), width);
        let nbest = random_nbest(&mut rng, seq_len, width, 5);
        let out = sequence_kd_loss(&nbest, &zs, &positions, seq_len).expect("valid");
        let fd = oracle::central_difference(&zs, EPS, |x| {
            sequence_kd_loss(&nbest, x, &positions, seq_len)
                .expect("valid")
                .loss
        });
        let e = oracle::max_relative_error(&out.grad, &fd);
        skd.check(e < GRAD_TOL, || format!("relative error {e}"));
    }
    vec![ctc.done(), mlm.done(), fkd.done(), dec.done(), skd.done()]
}

fn random_nbest(rng: &mut ChaCha8Rng, len: usize, width: usize, size: usize) -> NBestList {
    let mut entries: Vec<NBestEntry> = Vec::new();
    while entries.len() < size {
        let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..width)).collect();
        if entries.iter().any(|e| e.tokens.ids() == ids) {
            if width.pow(len as u32) <= entries.len() {
                break;
            }
            continue;
        }
        entries.push(NBestEntry {
            tokens: TokenSequence::new(ids),
            log_prob: rng.random_range(-20.0..0.0),
        });
    }
    NBestList::new(entries).expect("distinct finite entries")
}

fn candidate_suite(seed: u64) -> SuiteResult {
    let mut rng = rng_for(seed, 5);
    let mut t = Tally::new("candidate-sets");
    for _ in 0..100 {
        let n = rng.random_range(1..=4);
        let vocab = rng.random_range(1..=4);
        let k = rng.random_range(1..=n);
        let beam = rng.random_range(1..=16);
        let dists: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let w: Vec<f64> = (0..vocab).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let positions: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
        let brute = oracle::enumerate_candidate_sets(&positions, &dists, k);
        let got = top_b_from_distributions(&positions, &dists, k, beam).expect("valid");
        let ok = got.len() == beam.min(brute.len())
            && got.iter().zip(&brute).all(|(g, b)| {
                g.score.value() == b.score
                    && g.keys() == b.fills.iter().map(|f| (f.0, f.1)).collect::<Vec<_>>()
            });
        t.check(ok, || format!("n={n} vocab={vocab} k={k} beam={beam}"));
    }
    t.done()
}

fn random_instance(
    rng: &mut ChaCha8Rng,
    max_len: usize,
    max_vocab: usize,
) -> (crate::lattice::PosteriorLattice, HashPredictor) {
    let num_tokens = rng.random_range(2..=max_vocab);
    let len = rng.random_range(1..=max_len);
    let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..num_tokens)).collect();
    let width = num_tokens + 1;
    let lattice = oracle::lattice_for_tokens(rng, &tokens, width, num_tokens, 0.55..1.0)
        .with_context(rng.random());
    let predictor = HashPredictor {
        seed: rng.random(),
        num_symbols: width,
        blank: num_tokens,
        sharpness: rng.random_range(1.0..4.0),
    };
    (lattice, predictor)
}

fn beam_degeneracy_suite(seed: u64) -> SuiteResult {
    let mut rng = rng_for(seed, 6);
    let mut t = Tally::new("beam-degeneracy");
    for i in 0..100 {
        let (lattice, predictor) = random_instance(&mut rng, 8, 5);
        let cfg = DecodeConfig {
            p_thr: [0.5, 0.9, 0.99][i % 3],
            max_fills: 1 + (i / 3) % 3,
            beam: 1,
        };
        let a = beam_search_decode(&lattice, &predictor, &cfg).expect("valid");
        let b = easy_first_decode(&lattice, &predictor, &cfg).expect("valid");
        t.check(a == b, || {
            format!("beam {} vs easy-first {}", a.tokens, b.tokens)
        });
    }
    t.done()
}

fn beam_optimality_suite(seed: u64) -> SuiteResult {
    let mut rng = rng_for(seed, 7);
    let mut t = Tally::new("beam-optimality");
    for _ in 0..40 {
        let (lattice, predictor) = random_instance(&mut rng, 5, 4);
        let k = rng.random_range(1..=3);
        let cfg = DecodeConfig {
            p_thr: 0.99,
            max_fills: k,
            beam: usize::MAX,
        };
        let out = beam_search_decode(&lattice, &predictor, &cfg).expect("valid");
        let want = oracle::best_schedule_score(&predictor, &out.initial, lattice.context_id(), k);
        let got = out.best.score.value();
        t.check((got - want).abs() <= 1e-9, || {
            format!("got {got} want {want}")
        });
    }
    t.done()
}

fn nbest_suite(seed: u64) -> SuiteResult {
    let mut rng = rng_for(seed, 8);
    let mut t = Tally::new("nbest-normalize");
    for _ in 0..200 {
        let size = rng.random_range(1..=10);
        let list = random_nbest(&mut rng, 6, 4, size);
        let p = nbest_normalize(&list);
        let shift = rng.random_range(-500.0..500.0);
        let shifted = NBestList::new(
            list.entries()
                .iter()
                .map(|e| NBestEntry {
                    tokens: e.tokens.clone(),
                    log_prob: e.log_prob + shift,
                })
                .collect(),
        )
        .expect("distinct finite entries");
        let q = nbest_normalize(&shifted);
        let sum: f64 = p.iter().sum();
        let max_diff = p
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        t.check((sum - 1.0).abs() <= 1e-12 && max_diff <= 1e-12, || {
            format!("sum {sum}, shift difference {max_diff}")
        });
    }
    t.done()
}

fn composition_suite(seed: u64) -> SuiteResult {
    let mut rng = rng_for(seed, 9);
    let mut t = Tally::new("loss-composition");
    for i in 0..100 {
        let w = if i % 2 == 0 {
            DistillWeights::STAGE1
        } else {
            DistillWeights::STAGE2
        };
        let (ctc, att, f, s, enc): (f64, f64, f64, f64, f64) = (
            rng.random(),
            rng.random(),
            rng.random(),
            rng.random(),
            rng.random(),
        );
        let jca = joint_loss(ctc, att, &w);
        let dec = combined_kd_loss(f, s, &w);
        let total = total_loss(jca, enc, dec, &w);
        let ok = jca == w.alpha * ctc + (1.0 - w.alpha) * att
            && dec == w.beta_f * f + w.beta_s * s
            && total == jca + w.gamma_enc * enc + w.gamma_dec * dec;
        t.check(ok, || format!("weights {w:?}"));
    }
    t.done()
}

fn io_suite(seed: u64) -> SuiteResult {
    let mut rng = rng_for(seed, 10);
    let mut t = Tally::new("io-round-trip");
    for _ in 0..50 {
        let n = rng.random_range(1..=6);
        let v = Vocabulary::letters(n);
        let frames = rng.random_range(1..=20);
        let l = oracle::random_lattice(&mut rng, frames, v.lattice_width(), v.blank_id());
        let data: Vec<f64> = l.probs().iter().copied().collect();
        let bytes = encode_tensor(
            &[frames as u64, v.lattice_width() as u64],
            &data,
            Dtype::F64,
        )
        .expect("consistent dims");
        let back = decode_lattice(&bytes, Path::new("memory"), &v);
        // Rows already sum to one within rounding; renormalising may move the
        // last bit, so compare within one ulp-scale bound.
        let ok = back.as_ref().is_ok_and(|b| {
            b.probs()
                .iter()
                .zip(l.probs().iter())
                .all(|(x, y)| (x - y).abs() <= 4.0 * f64::EPSILON)
        });
        t.check(ok, || format!("{frames} frames, {n} tokens"));
    }
    t.done()
}

/// Runs every suite. Deterministic in `seed`.
pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    let mut out = vec![
        ctc_marginal_suite(seed),
        ctc_total_probability_suite(seed),
        ctc_greedy_suite(seed),
    ];
    out.extend(gradient_suite(seed));
    out.push(candidate_suite(seed));
    out.push(beam_degeneracy_suite(seed));
    out.push(beam_optimality_suite(seed));
    out.push(nbest_suite(seed));
    out.push(composition_suite(seed));
    out.push(io_suite(seed));
    out
}

pub fn render(results: &[SuiteResult], records: bool) -> String {
    let mut s = String::new();
    for r in results {
        if records {
            let _ = write!(
                s,
                "suite name={} passed={} total={} status={}",
                r.name,
                r.passed,
                r.total,
                if r.ok() { "pass" } else { "fail" }
            );
            if let Some(f) = &r.failure {
                let _ = write!(s, " failure=\"{f}\"");
            }
            s.push('\n');
        } else {
            let _ = writeln!(
                s,
                "{:<24} {:>4}/{:<4} {}",
                r.name,
                r.passed,
                r.total,
                if r.ok() { "ok" } else { "FAILED" }
            );
            if let Some(f) = &r.failure {
                let _ = writeln!(s, "    {f}");
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_and_are_deterministic() {
        let a = run_all(11);
        for r in &a {
            assert!(r.ok(), "{r:?}");
            assert!(r.total > 0, "{}", r.name);
        }
        assert_eq!(render(&a, true), render(&run_all(11), true));
    }
}
