//! Fixtures shared by the criterion benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nar_decode::distill::{NBestEntry, NBestList};
use nar_decode::maskctc::TablePredictor;
use nar_decode::{PosteriorLattice, TokenSequence};

/// Synthetic lattices and the context-dependent teacher that fits them.
pub fn decode_fixture(seed: u64, count: usize) -> (TablePredictor, Vec<PosteriorLattice>) {
    let (task, corpus) =
        nar_decode::bench::synthetic_corpus(seed, count).expect("built-in task config is valid");
    (
        task.teacher(),
        corpus.into_iter().map(|c| c.lattice).collect(),
    )
}

/// Inputs for the distillation loss benchmarks.
pub struct LossFixture {
    pub teacher: Array2<f64>,
    pub logits: Array2<f64>,
    pub mask: Vec<usize>,
    pub nbest: NBestList,
    pub seq_len: usize,
    pub targets: Vec<usize>,
}

pub fn loss_fixture(seed: u64, rows: usize, classes: usize, nbest: usize) -> LossFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut teacher = Array2::from_shape_fn((rows, classes), |_| rng.random_range(0.01..1.0));
    for mut r in teacher.rows_mut() {
        let s = r.sum();
        r /= s;
    }
    let logits = Array2::from_shape_fn((rows, classes), |_| rng.random_range(-3.0..3.0));
    let seq_len = rows + rows / 2;
    let mask: Vec<usize> = (0..rows).map(|i| i + i / 2).collect();
    let mut entries = Vec::new();
    while entries.len() < nbest {
        let ids: Vec<usize> = (0..seq_len).map(|_| rng.random_range(0..classes)).collect();
        let tokens = TokenSequence::new(ids);
        if entries.iter().all(|e: &NBestEntry| e.tokens != tokens) {
            entries.push(NBestEntry {
                tokens,
                log_prob: rng.random_range(-30.0..0.0),
            });
        }
    }
    let targets = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    LossFixture {
        teacher,
        logits,
        mask,
        nbest: NBestList::new(entries).expect("entries are distinct"),
        seq_len,
        targets,
    }
}
