use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ndarray::Array2;

use nar_decode::bench::{render_records, render_table, run_bench, synthetic_corpus, BenchConfig};
use nar_decode::ctc::{ctc_log_marginal, ctc_loss_and_grad, greedy_decode};
use nar_decode::distill::{
    combined_kd_loss, decoder_frame_kd_loss, frame_kd_loss, joint_loss, kld, mlm_loss,
    sequence_kd_loss, total_loss, DistillWeights, FrameDistributionPair,
};
use nar_decode::io;
use nar_decode::maskctc::{
    beam_search_decode_traced, easy_first_decode_traced, render_trace, DecodeConfig, MaskPredictor,
};
use nar_decode::oracle::{central_difference, max_relative_error};
use nar_decode::toymodel::{run_experiment, EvalReport};
use nar_decode::{effective_seed, TokenSequence, Vocabulary};

use crate::{
    BenchArgs, Cli, Command, CtcDecodeArgs, DistillTrainArgs, Format, LossKind, MaskctcDecodeArgs,
    ScoreArgs, SelftestArgs, UsageError,
};

/// What a subcommand prints, and whether it succeeded.
pub struct Outcome {
    pub stdout: String,
    pub ok: bool,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Outcome { stdout, ok: true }
    }
}

const GRAD_EPS: f64 = 1e-5;
const GRAD_TOLERANCE: f64 = 1e-5;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let start = Instant::now();
    let mut outcome = match &cli.command {
        Command::CtcDecode(a) => ctc_decode(a, cli.format),
        Command::MaskctcDecode(a) => maskctc_decode(a, cli.format),
        Command::Score(a) => score(a, cli.format),
        Command::DistillTrain(a) => distill_train(a, cli.format),
        Command::Bench(a) => bench(a, cli.format, cli.timing),
        Command::Selftest(a) => selftest(a, cli.format),
    }?;
    if cli.timing {
        let secs = start.elapsed().as_secs_f64();
        match cli.format {
            Format::Text => {
                let _ = writeln!(outcome.stdout, "elapsed: {secs:.6} s");
            }
            Format::Records => {
                let _ = writeln!(outcome.stdout, "timing elapsed_seconds={secs}");
            }
        }
    }
    Ok(outcome)
}

fn join<T: ToString>(items: &[T], sep: &str) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

fn ctc_decode(a: &CtcDecodeArgs, format: Format) -> Result<Outcome> {
    let vocab = io::read_vocab(&a.vocab)?;
    let lattice = io::read_lattice(&a.lattice, &vocab)?;
    let g = greedy_decode(&lattice);
    let marginal = match &a.marginal {
        Some(text) => {
            let y = TokenSequence::new(vocab.parse_sequence(text)?);
            Some((y.clone(), ctc_log_marginal(&lattice, &y)?))
        }
        None => None,
    };
    let mut s = String::new();
    match format {
        Format::Text => {
            let _ = writeln!(s, "frames: {}", lattice.num_frames());
            let _ = writeln!(s, "tokens: {}", vocab.render(g.tokens.ids()));
            let _ = writeln!(s, "confidences: {}", join(&g.confidences, " "));
            if let Some((y, lp)) = &marginal {
                let _ = writeln!(s, "log marginal of [{}]: {lp}", vocab.render(y.ids()));
            }
        }
        Format::Records => {
            let _ = writeln!(
                s,
                "greedy frames={} tokens=\"{}\" ids={} confidences={}",
                lattice.num_frames(),
                vocab.render(g.tokens.ids()),
                join(g.tokens.ids(), ","),
                join(&g.confidences, ",")
            );
            if let Some((y, lp)) = &marginal {
                let _ = writeln!(
                    s,
                    "marginal sequence=\"{}\" log_prob={lp}",
                    vocab.render(y.ids())
                );
            }
        }
    }
    Ok(Outcome::ok(s))
}

/// Numeric symbol names for a predictor without a vocabulary file.
fn numeric_vocab(width: usize, blank: usize) -> Result<Vocabulary> {
    let mut names: Vec<String> = (0..width)
        .map(|i| {
            if i == blank {
                "<blank>".into()
            } else {
                i.to_string()
            }
        })
        .collect();
    names.push("<mask>".into());
    Ok(Vocabulary::new(names, blank, width)?)
}

fn maskctc_decode(a: &MaskctcDecodeArgs, format: Format) -> Result<Outcome> {
    let predictor = io::read_predictor(&a.predictor)?;
    let vocab = match &a.vocab {
        Some(p) => io::read_vocab(p)?,
        None => numeric_vocab(predictor.num_symbols(), predictor.blank())?,
    };
    let lattice = io::read_lattice(&a.lattice, &vocab)?;
    let config = DecodeConfig {
        p_thr: a.p_thr,
        max_fills: a.k,
        beam: a.beam,
    };
    let out = if a.easy_first {
        easy_first_decode_traced(&lattice, &predictor, &config)?
    } else {
        beam_search_decode_traced(&lattice, &predictor, &config)?
    };
    let mut s = String::new();
    if a.trace {
        s.push_str(&render_trace(&out));
    }
    match format {
        Format::Text => {
            let _ = writeln!(s, "ctc: {}", vocab.render(out.ctc.tokens.ids()));
            let _ = writeln!(s, "masked: {}", out.initial.num_masked());
            let _ = writeln!(s, "tokens: {}", vocab.render(out.tokens.ids()));
            let _ = writeln!(s, "score: {}", out.best.score);
            let _ = writeln!(s, "iterations: {}", out.iterations);
            let _ = writeln!(s, "predictor queries: {}", out.predictor_queries);
        }
        Format::Records => {
            let _ = writeln!(
                s,
                "decode tokens=\"{}\" ids={} score={} masked={} iterations={} queries={}",
                vocab.render(out.tokens.ids()),
                join(out.tokens.ids(), ","),
                out.best.score,
                out.initial.num_masked(),
                out.iterations,
                out.predictor_queries
            );
        }
    }
    Ok(Outcome::ok(s))
}

fn need<'a, T>(value: &'a Option<T>, flag: &str, loss: &str) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| usage(format!("--loss {loss} requires {flag}")))
}

/// A rank-1 tensor becomes a single row.
fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let t = io::read_tensor(path)?;
    let (rows, cols) = match t.dims.as_slice() {
        [n] => (1, *n as usize),
        [r, c] => (*r as usize, *c as usize),
        d => bail!(UsageError(format!(
            "{}: expected a rank-1 or rank-2 tensor, got rank {}",
            path.display(),
            d.len()
        ))),
    };
    Ok(Array2::from_shape_vec((rows, cols), t.data)?)
}

struct Scored {
    name: &'static str,
    value: f64,
    extra: Vec<(&'static str, String)>,
    grad_error: Option<f64>,
}

fn grad_check(
    enabled: bool,
    x: &Array2<f64>,
    analytic: &Array2<f64>,
    f: impl FnMut(&Array2<f64>) -> f64,
) -> Option<f64> {
    enabled.then(|| max_relative_error(analytic, &central_difference(x, GRAD_EPS, f)))
}

fn score(a: &ScoreArgs, format: Format) -> Result<Outcome> {
    let check = a.grad_check;
    let scored = match a.loss {
        LossKind::Kld => {
            if check {
                return Err(usage("--grad-check is not available for kld"));
            }
            let p = read_matrix(need(&a.teacher, "--teacher", "kld")?)?;
            let q = read_matrix(need(&a.student, "--student", "kld")?)?;
            if p.dim() != q.dim() {
                return Err(usage("teacher and student shapes differ"));
            }
            let mut total = 0.0;
            for (pr, qr) in p.rows().into_iter().zip(q.rows()) {
                total += kld(&pr.to_vec(), &qr.to_vec())?;
            }
            Scored {
                name: "kld",
                value: total,
                extra: vec![("rows", p.nrows().to_string())],
                grad_error: None,
            }
        }
        LossKind::Fkd | LossKind::FkdDec => {
            let name = if a.loss == LossKind::Fkd {
                "fkd"
            } else {
                "fkd-dec"
            };
            let teacher = read_matrix(need(&a.teacher, "--teacher", name)?)?;
            let z = read_matrix(need(&a.logits, "--logits", name)?)?;
            let pair = FrameDistributionPair::all_rows(teacher, z.clone())?;
            let eval = |pair: &FrameDistributionPair| -> nar_decode::Result<(f64, Array2<f64>)> {
                match a.loss {
                    LossKind::Fkd => frame_kd_loss(pair),
                    _ => decoder_frame_kd_loss(pair, a.mask.as_deref().unwrap_or_default()),
                }
            };
            if a.loss == LossKind::FkdDec {
                need(&a.mask, "--mask", name)?;
            }
            let (value, grad) = eval(&pair)?;
            Scored {
                name,
                value,
                extra: vec![],
                grad_error: grad_check(check, &z, &grad, |x| {
                    eval(&pair.with_logits(x.clone()).expect("same shape"))
                        .expect("valid at the probe point")
                        .0
                }),
            }
        }
        LossKind::Skd => {
            let nbest = io::read_nbest(need(&a.nbest, "--nbest", "skd")?)?;
            let z = read_matrix(need(&a.logits, "--logits", "skd")?)?;
            let mask = need(&a.mask, "--mask", "skd")?;
            let len = *need(&a.seq_len, "--seq-len", "skd")?;
            let out = sequence_kd_loss(&nbest, &z, mask, len)?;
            Scored {
                name: "skd",
                value: out.loss,
                extra: vec![
                    ("used", out.used.to_string()),
                    ("dropped", out.dropped.to_string()),
                ],
                grad_error: grad_check(check, &z, &out.grad, |x| {
                    sequence_kd_loss(&nbest, x, mask, len)
                        .expect("valid at the probe point")
                        .loss
                }),
            }
        }
        LossKind::Mlm => {
            let z = read_matrix(need(&a.logits, "--logits", "mlm")?)?;
            let targets = need(&a.targets, "--targets", "mlm")?;
            let (value, grad) = mlm_loss(&z, targets)?;
            Scored {
                name: "mlm",
                value,
                extra: vec![],
                grad_error: grad_check(check, &z, &grad, |x| {
                    mlm_loss(x, targets).expect("valid at the probe point").0
                }),
            }
        }
        LossKind::Ctc => {
            let z = read_matrix(need(&a.logits, "--logits", "ctc")?)?;
            let text = need(&a.target, "--target", "ctc")?;
            let ids = text
                .split(',')
                .filter(|t| !t.trim().is_empty())
                .map(|t| t.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| usage(format!("--target: {e}")))?;
            let y = TokenSequence::new(ids);
            let blank = a.blank.unwrap_or(z.ncols().saturating_sub(1));
            let (value, grad) = ctc_loss_and_grad(&z, &y, blank)?;
            Scored {
                name: "ctc",
                value,
                extra: vec![],
                grad_error: grad_check(check, &z, &grad, |x| {
                    ctc_loss_and_grad(x, &y, blank)
                        .expect("valid at the probe point")
                        .0
                }),
            }
        }
        LossKind::Total => {
            if check {
                return Err(usage("--grad-check is not available for total"));
            }
            let w = if a.stage == 1 {
                DistillWeights::STAGE1
            } else {
                DistillWeights::STAGE2
            };
            let ctc = *need(&a.ctc, "--ctc", "total")?;
            let att = *need(&a.att, "--att", "total")?;
            let frame = *need(&a.dec_frame, "--dec-frame", "total")?;
            let jca = joint_loss(ctc, att, &w);
            let dec = combined_kd_loss(frame, a.dec_seq.unwrap_or(0.0), &w);
            let value = total_loss(jca, a.enc.unwrap_or(0.0), dec, &w);
            Scored {
                name: "total",
                value,
                extra: vec![
                    ("stage", a.stage.to_string()),
                    ("jca", jca.to_string()),
                    ("decoder_kd", dec.to_string()),
                ],
                grad_error: None,
            }
        }
    };

    let passed = scored.grad_error.map_or(true, |e| e < GRAD_TOLERANCE);
    let mut s = String::new();
    match format {
        Format::Text => {
            let _ = writeln!(s, "{}: {}", scored.name, scored.value);
            for (k, v) in &scored.extra {
                let _ = writeln!(s, "{k}: {v}");
            }
            if let Some(e) = scored.grad_error {
                let _ = writeln!(
                    s,
                    "gradient check: max relative error {e:.3e} ({})",
                    if passed { "pass" } else { "FAIL" }
                );
            }
        }
        Format::Records => {
            let _ = write!(s, "score loss={} value={}", scored.name, scored.value);
            for (k, v) in &scored.extra {
                let _ = write!(s, " {k}={v}");
            }
            s.push('\n');
            if let Some(e) = scored.grad_error {
                let _ = writeln!(
                    s,
                    "grad_check max_relative_error={e} tolerance={GRAD_TOLERANCE} status={}",
                    if passed { "pass" } else { "fail" }
                );
            }
        }
    }
    Ok(Outcome {
        stdout: s,
        ok: passed,
    })
}

fn eval_line(s: &mut String, format: Format, who: &str, r: &EvalReport) {
    match format {
        Format::Text => {
            let _ = writeln!(
                s,
                "{who:<9}  TER {:6.2}%  (S {} D {} I {} / {} tokens)  masked error {:6.2}%",
                100.0 * r.token_error_rate,
                r.edits.substitutions,
                r.edits.deletions,
                r.edits.insertions,
                r.reference_tokens,
                100.0 * r.masked_error_rate
            );
        }
        Format::Records => {
            let _ = writeln!(
                s,
                "eval student={who} ter={} sub={} del={} ins={} ref_tokens={} masked={} masked_errors={} masked_error_rate={} mean_log_prob={}",
                r.token_error_rate,
                r.edits.substitutions,
                r.edits.deletions,
                r.edits.insertions,
                r.reference_tokens,
                r.masked_positions,
                r.masked_errors,
                r.masked_error_rate,
                r.mean_log_prob
            );
        }
    }
}

fn distill_train(a: &DistillTrainArgs, format: Format) -> Result<Outcome> {
    let mut config = match &a.task_config {
        Some(p) => io::read_experiment_config(p)?,
        None => Default::default(),
    };
    config.seed = effective_seed(config.seed);
    if let Some(at) = a.stage2_at {
        config.train.stage2_at = Some(at);
    }
    if a.print_config {
        return Ok(Outcome::ok(io::render_experiment_config(&config)?));
    }
    let report = run_experiment(&config)?;
    if let Some(p) = &a.curve {
        io::write_curve(p, &report.distilled_curve)?;
    }
    if let Some(p) = &a.baseline_curve {
        io::write_curve(p, &report.baseline_curve)?;
    }
    let last = |c: &[nar_decode::toymodel::CurvePoint]| c.last().map_or(f64::NAN, |p| p.total);
    let mut s = String::new();
    match format {
        Format::Text => {
            let _ = writeln!(s, "seed: {}", config.seed);
            let stage2 = config
                .train
                .stage2_at
                .map_or_else(|| "never".to_string(), |x| x.to_string());
            let _ = writeln!(
                s,
                "steps: {} (stage 2 from step {stage2})",
                config.train.steps
            );
        }
        Format::Records => {
            let _ = writeln!(
                s,
                "config seed={} steps={} stage2_at={}",
                config.seed,
                config.train.steps,
                config
                    .train
                    .stage2_at
                    .map_or_else(|| "-".to_string(), |x| x.to_string())
            );
        }
    }
    eval_line(&mut s, format, "teacher", &report.teacher);
    eval_line(&mut s, format, "distilled", &report.distilled);
    eval_line(&mut s, format, "baseline", &report.baseline);
    match format {
        Format::Text => {
            let _ = writeln!(
                s,
                "relative TER reduction: {:.2}%",
                100.0 * report.relative_reduction()
            );
            let _ = writeln!(
                s,
                "final objective: distilled {:.6}, baseline {:.6}",
                last(&report.distilled_curve),
                last(&report.baseline_curve)
            );
        }
        Format::Records => {
            let _ = writeln!(
                s,
                "summary relative_reduction={} distilled_final_loss={} baseline_final_loss={}",
                report.relative_reduction(),
                last(&report.distilled_curve),
                last(&report.baseline_curve)
            );
        }
    }
    Ok(Outcome::ok(s))
}

fn bench(a: &BenchArgs, format: Format, timing: bool) -> Result<Outcome> {
    let config = BenchConfig {
        decode: DecodeConfig {
            p_thr: a.p_thr,
            max_fills: a.k,
            beam: 1,
        },
        beams: a.beams.clone(),
        frame_seconds: a.frame_seconds,
    };
    let report = if let Some(count) = a.synthetic {
        if count == 0 {
            return Err(usage("--synthetic needs at least one utterance"));
        }
        let seed = effective_seed(a.seed);
        let (task, corpus) = synthetic_corpus(seed, count)?;
        let teacher = task.teacher();
        if let Some(dir) = &a.emit_corpus {
            let utts = task.corpus(count, 3);
            io::write_corpus(dir, task.vocab(), &utts)?;
            io::write_predictor(&dir.join("predictor.json"), &teacher)?;
            return Ok(Outcome::ok(format!(
                "wrote {count} utterances to {}\n",
                dir.display()
            )));
        }
        run_bench(&corpus, &teacher, &config)?
    } else {
        let dir = a.corpus.as_ref().expect("clap requires --corpus");
        let vocab_path = a.vocab.clone().unwrap_or_else(|| dir.join("vocab.txt"));
        let pred_path = a
            .predictor
            .clone()
            .unwrap_or_else(|| dir.join("predictor.json"));
        let vocab = io::read_vocab(&vocab_path)?;
        let predictor = io::read_predictor(&pred_path)?;
        let corpus = io::read_corpus(dir, &vocab)?;
        run_bench(&corpus, &predictor, &config)?
    };
    let stdout = match format {
        Format::Text => render_table(&report, timing),
        Format::Records => render_records(&report, timing),
    };
    Ok(Outcome {
        stdout,
        ok: report.passed(),
    })
}

fn selftest(a: &SelftestArgs, format: Format) -> Result<Outcome> {
    let results = nar_decode::selftest::run_all(effective_seed(a.seed));
    let ok = results.iter().all(|r| r.ok());
    let mut stdout = nar_decode::selftest::render(&results, format == Format::Records);
    if format == Format::Text {
        let passed = results.iter().filter(|r| r.ok()).count();
        let _ = writeln!(stdout, "{passed}/{} suites passed", results.len());
    }
    Ok(Outcome { stdout, ok })
}
