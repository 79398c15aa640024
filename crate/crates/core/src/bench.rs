//! Latency/quality harness: decode a corpus at several beam widths and
//! report per-utterance wall time, time ratios against `B = 1`, mean final
//! hypothesis log-probability and token error rate.
//!
//! Timed decodes run sequentially on the calling thread after an untimed
//! warm-up pass. A parallel untimed reference pass checks that timing does
//! not change any output.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::CorpusItem;
use crate::maskctc::{beam_search_decode, DecodeConfig, DecodeOutput, MaskPredictor};
use crate::toymodel::{edit_counts, SyntheticTask, TaskConfig};

const WARMUP_UTTERANCES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BeamRow {
    pub beam: usize,
    pub utterances: usize,
    pub mean_seconds: f64,
    pub median_seconds: f64,
    /// Mean wall time relative to the `B = 1` row of the same run.
    pub time_ratio: f64,
    /// Total wall time over nominal audio duration, when a frame duration is set.
    pub rtf: Option<f64>,
    pub mean_log_prob: f64,
    /// Against the references, when every utterance has one.
    pub token_error_rate: Option<f64>,
    pub mean_iterations: f64,
    pub mean_predictor_queries: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Invariant {
    pub name: String,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub utterances: usize,
    pub frames: usize,
    pub frame_seconds: Option<f64>,
    pub rows: Vec<BeamRow>,
    pub invariants: Vec<Invariant>,
}

impl BenchReport {
    pub fn passed(&self) -> bool {
        self.invariants.iter().all(|i| i.passed)
    }

    pub fn row(&self, beam: usize) -> Option<&BeamRow> {
        self.rows.iter().find(|r| r.beam == beam)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub decode: DecodeConfig,
    pub beams: Vec<usize>,
    /// Nominal duration of one lattice frame, for a true real-time factor.
    pub frame_seconds: Option<f64>,
}

fn same_output(a: &DecodeOutput, b: &DecodeOutput) -> bool {
    a.tokens == b.tokens && a.best == b.best && a.beam == b.beam
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn run_bench<P: MaskPredictor + ?Sized>(
    corpus: &[CorpusItem],
    predictor: &P,
    config: &BenchConfig,
) -> Result<BenchReport> {
    if corpus.is_empty() {
        return Err(Error::usage("bench corpus is empty"));
    }
    if !config.beams.contains(&1) {
        return Err(Error::usage("beam list must include 1"));
    }
    if let Some(fs) = config.frame_seconds {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::usage("frame duration must be positive"));
        }
    }
    let mut beams = config.beams.clone();
    beams.sort_unstable();
    beams.dedup();
    for &b in &beams {
        config.decode.with_beam(b).validate()?;
    }
    let frames: usize = corpus.iter().map(|c| c.lattice.num_frames()).sum();
    let with_refs = corpus.iter().all(|c| c.reference.is_some());

    let mut invariants = Vec::new();
    let mut rows = Vec::new();
    for &b in &beams {
        let cfg = config.decode.with_beam(b);
        let untimed = corpus
            .par_iter()
            .map(|c| beam_search_decode(&c.lattice, predictor, &cfg))
            .collect::<Result<Vec<_>>>()?;
        for c in corpus.iter().take(WARMUP_UTTERANCES) {
            beam_search_decode(&c.lattice, predictor, &cfg)?;
        }
        let mut times = Vec::with_capacity(corpus.len());
        let mut timed = Vec::with_capacity(corpus.len());
        for c in corpus {
            let start = Instant::now();
            let out = beam_search_decode(&c.lattice, predictor, &cfg)?;
            times.push(start.elapsed().as_secs_f64());
            timed.push(out);
        }

        invariants.push(Invariant {
            name: format!("beam {b}: timed outputs equal untimed outputs"),
            passed: timed.iter().zip(&untimed).all(|(a, u)| same_output(a, u)),
        });
        invariants.push(Invariant {
            name: format!("beam {b}: utterance count equals corpus size"),
            passed: timed.len() == corpus.len(),
        });

        let n = corpus.len() as f64;
        let total: f64 = times.iter().sum();
        let token_error_rate = with_refs.then(|| {
            let mut errors = 0;
            let mut tokens = 0;
            for (c, out) in corpus.iter().zip(&timed) {
                let r = c.reference.as_ref().expect("checked above");
                errors += edit_counts(r.ids(), out.tokens.ids()).errors();
                tokens += r.len();
            }
            if tokens == 0 {
                0.0
            } else {
                errors as f64 / tokens as f64
            }
        });
        rows.push(BeamRow {
            beam: b,
            utterances: timed.len(),
            mean_seconds: total / n,
            median_seconds: median(&mut times),
            time_ratio: 1.0,
            rtf: config.frame_seconds.map(|fs| total / (frames as f64 * fs)),
            mean_log_prob: timed.iter().map(|o| o.best.score.value()).sum::<f64>() / n,
            token_error_rate,
            mean_iterations: timed.iter().map(|o| o.iterations as f64).sum::<f64>() / n,
            mean_predictor_queries: timed
                .iter()
                .map(|o| o.predictor_queries as f64)
                .sum::<f64>()
                / n,
        });
    }

    let base = rows[0].mean_seconds;
    for r in rows.iter_mut().skip(1) {
        r.time_ratio = r.mean_seconds / base;
    }
    invariants.push(Invariant {
        name: "beam 1 time ratio is 1".into(),
        passed: rows[0].time_ratio == 1.0,
    });

    Ok(BenchReport {
        utterances: corpus.len(),
        frames,
        frame_seconds: config.frame_seconds,
        rows,
        invariants,
    })
}

/// Task shape of the built-in benchmark corpus: longer sequences with many
/// low-confidence tokens, so that several iterations run per utterance.
pub fn bench_task_config() -> TaskConfig {
    TaskConfig {
        vocab_size: 6,
        min_len: 8,
        max_len: 16,
        uncertain_rate: 0.5,
        ..TaskConfig::default()
    }
}

/// `count` synthetic utterances with references, plus the task whose
/// teacher is a context-dependent predictor for them.
pub fn synthetic_corpus(seed: u64, count: usize) -> Result<(SyntheticTask, Vec<CorpusItem>)> {
    let task = SyntheticTask::new(seed, bench_task_config())?;
    let items = task
        .corpus(count, 3)
        .into_iter()
        .map(|u| CorpusItem {
            name: format!("u{:05}", u.id),
            lattice: u.lattice,
            reference: Some(u.truth),
        })
        .collect();
    Ok((task, items))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x}"))
}

/// `key=value` records, one line per beam and per invariant. Timing fields
/// appear only with `timing`.
pub fn render_records(report: &BenchReport, timing: bool) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "corpus utterances={} frames={}",
        report.utterances, report.frames
    );
    for r in &report.rows {
        let _ = write!(
            s,
            "beam b={} utterances={} mean_log_prob={} ter={} mean_iterations={} mean_queries={}",
            r.beam,
            r.utterances,
            r.mean_log_prob,
            opt(r.token_error_rate),
            r.mean_iterations,
            r.mean_predictor_queries
        );
        if timing {
            let _ = write!(
                s,
                " mean_seconds={} median_seconds={} time_ratio={} rtf={}",
                r.mean_seconds,
                r.median_seconds,
                r.time_ratio,
                opt(r.rtf)
            );
        }
        s.push('\n');
    }
    for i in &report.invariants {
        let _ = writeln!(
            s,
            "invariant status={} name=\"{}\"",
            if i.passed { "pass" } else { "fail" },
            i.name
        );
    }
    s
}

/// Aligned human-readable table.
pub fn render_table(report: &BenchReport, timing: bool) -> String {
    let mut header = vec!["beam", "utts", "mean logp", "TER", "iters", "queries"];
    if timing {
        header.extend(["mean ms", "median ms", "ratio", "RTF"]);
    }
    let mut lines: Vec<Vec<String>> = vec![header.iter().map(|h| h.to_string()).collect()];
    for r in &report.rows {
        let mut cells = vec![
            r.beam.to_string(),
            r.utterances.to_string(),
            format!("{:.4}", r.mean_log_prob),
            r.token_error_rate
                .map_or_else(|| "-".into(), |t| format!("{:.2}%", 100.0 * t)),
            format!("{:.2}", r.mean_iterations),
            format!("{:.2}", r.mean_predictor_queries),
        ];
        if timing {
            cells.extend([
                format!("{:.4}", 1e3 * r.mean_seconds),
                format!("{:.4}", 1e3 * r.median_seconds),
                format!("{:.3}", r.time_ratio),
                r.rtf.map_or_else(|| "-".into(), |x| format!("{x:.5}")),
            ]);
        }
        lines.push(cells);
    }
    let widths: Vec<usize> = (0..lines[0].len())
        .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for l in &lines {
        let cells: Vec<String> = l
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect();
        let _ = writeln!(s, "{}", cells.join("  ").trim_end());
    }
    let failed: Vec<&Invariant> = report.invariants.iter().filter(|i| !i.passed).collect();
    if failed.is_empty() {
        let _ = writeln!(s, "all {} invariant checks passed", report.invariants.len());
    } else {
        for i in failed {
            let _ = writeln!(s, "FAILED: {}", i.name);
        }
    }
    s
}
