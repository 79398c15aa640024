//! Writes the small demo inputs used by the README and the CLI tests.
//!
//! ```text
//! cargo run -p nar-decode --example demo_data -- data/demo
//! ```

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nar_decode::distill::{NBestEntry, NBestList};
use nar_decode::io::{self, Dtype};
use nar_decode::toymodel::{ExperimentConfig, SyntheticTask};
use nar_decode::{bench, TokenSequence};

fn main() -> nar_decode::Result<()> {
    let dir = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "data/demo".into()),
    );
    std::fs::create_dir_all(&dir).map_err(|e| nar_decode::Error::Io {
        path: dir.clone(),
        source: e,
    })?;

    let task = SyntheticTask::new(1, bench::bench_task_config())?;
    let corpus_dir = dir.join("corpus");
    io::write_corpus(&corpus_dir, task.vocab(), &task.corpus(24, 3))?;
    io::write_predictor(&corpus_dir.join("predictor.json"), &task.teacher())?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (rows, classes) = (4usize, 5usize);
    let mut teacher: Vec<f64> = (0..rows * classes)
        .map(|_| rng.random_range(0.05..1.0))
        .collect();
    for r in teacher.chunks_mut(classes) {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|x| *x /= s);
    }
    let dims = [rows as u64, classes as u64];
    io::write_tensor(&dir.join("teacher.nart"), &dims, &teacher, Dtype::F64)?;
    let logits: Vec<f64> = (0..rows * classes)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    io::write_tensor(&dir.join("logits.nart"), &dims, &logits, Dtype::F64)?;

    // N-best over sequences of length 6 whose masked positions are 1, 2, 4, 5.
    let mut entries = Vec::new();
    while entries.len() < 5 {
        let ids: Vec<usize> = (0..6).map(|_| rng.random_range(0..classes - 1)).collect();
        let tokens = TokenSequence::new(ids);
        if entries.iter().all(|e: &NBestEntry| e.tokens != tokens) {
            entries.push(NBestEntry {
                tokens,
                log_prob: rng.random_range(-8.0..-0.5),
            });
        }
    }
    io::write_nbest(&dir.join("nbest.jsonl"), &NBestList::new(entries)?)?;

    let mut config = ExperimentConfig::default();
    config.task.eval_utterances = 100;
    config.train.steps = 200;
    config.train.stage2_at = Some(150);
    io::write_experiment_config(&dir.join("task.toml"), &config)?;
    Ok(())
}
