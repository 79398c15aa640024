use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "nar-decode",
    version,
    about = "Mask-CTC decoding, beam search over mask filling, and distillation losses"
)]
pub struct Cli {
    /// Output style: human-readable text or `key=value` records.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,

    /// Worker threads for parallel evaluation (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Include wall-clock timing lines in the output.
    #[arg(long, global = true)]
    pub timing: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Records,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Greedy CTC decoding of a lattice, optionally with the marginal of a sequence.
    CtcDecode(CtcDecodeArgs),
    /// Mask-CTC decoding: threshold masking then beam search over mask filling.
    MaskctcDecode(MaskctcDecodeArgs),
    /// Evaluate a loss on tensor inputs, optionally checking its gradient.
    Score(ScoreArgs),
    /// Train a distilled student and a weak-label baseline on a synthetic task.
    DistillTrain(DistillTrainArgs),
    /// Decode a corpus at several beam widths and report time and quality.
    Bench(BenchArgs),
    /// Run every brute-force oracle suite.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
pub struct CtcDecodeArgs {
    /// Lattice tensor (`T × (|U| + 1)`).
    #[arg(long)]
    pub lattice: PathBuf,
    /// Vocabulary file.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Space-separated token names (or ids) whose CTC log-marginal to print.
    #[arg(long, allow_hyphen_values = true)]
    pub marginal: Option<String>,
}

#[derive(Args, Debug)]
pub struct MaskctcDecodeArgs {
    /// Lattice tensor (`T × (|U| + 1)`).
    #[arg(long)]
    pub lattice: PathBuf,
    /// Predictor table (JSON).
    #[arg(long)]
    pub predictor: PathBuf,
    /// Vocabulary file; without it tokens are printed as ids.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Confidence threshold below which CTC tokens are masked.
    #[arg(long, default_value_t = 0.99)]
    pub p_thr: f64,
    /// Maximum fills per iteration.
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Beam width.
    #[arg(long, default_value_t = 10)]
    pub beam: usize,
    /// Use easy-first filling (one committed hypothesis); ignores --beam.
    #[arg(long)]
    pub easy_first: bool,
    /// Print every iteration's accepted hypotheses.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossKind {
    Kld,
    Fkd,
    FkdDec,
    Skd,
    Mlm,
    Ctc,
    Total,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Loss to evaluate.
    #[arg(long, value_enum)]
    pub loss: LossKind,
    /// Teacher probabilities, one row per frame (kld, fkd, fkd-dec).
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Student probabilities (kld).
    #[arg(long)]
    pub student: Option<PathBuf>,
    /// Student logits (fkd, fkd-dec, skd, mlm, ctc).
    #[arg(long)]
    pub logits: Option<PathBuf>,
    /// Teacher N-best list (skd).
    #[arg(long)]
    pub nbest: Option<PathBuf>,
    /// Comma-separated masked positions (fkd-dec rows; skd sequence positions).
    #[arg(long, value_delimiter = ',')]
    pub mask: Option<Vec<usize>>,
    /// Student sequence length (skd).
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Comma-separated target ids, one per logit row (mlm).
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<usize>>,
    /// Comma-separated CTC target ids (ctc); empty for the empty sequence.
    #[arg(long)]
    pub target: Option<String>,
    /// Blank column of the logits (ctc) [default: last column].
    #[arg(long)]
    pub blank: Option<usize>,
    /// CTC loss value (total).
    #[arg(long, allow_hyphen_values = true)]
    pub ctc: Option<f64>,
    /// Attention/MLM loss value (total).
    #[arg(long, allow_hyphen_values = true)]
    pub att: Option<f64>,
    /// Encoder distillation loss value (total) [default: 0].
    #[arg(long, allow_hyphen_values = true)]
    pub enc: Option<f64>,
    /// Decoder frame-level distillation value (total).
    #[arg(long, allow_hyphen_values = true)]
    pub dec_frame: Option<f64>,
    /// Decoder sequence-level distillation value (total) [default: 0].
    #[arg(long, allow_hyphen_values = true)]
    pub dec_seq: Option<f64>,
    /// Training stage whose loss weights `total` uses.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Compare the analytic gradient with central finite differences.
    #[arg(long)]
    pub grad_check: bool,
}

#[derive(Args, Debug)]
pub struct DistillTrainArgs {
    /// Experiment config (TOML) [default: built-in defaults].
    #[arg(long)]
    pub task_config: Option<PathBuf>,
    /// Step at which stage-2 weights take over (overrides the config).
    #[arg(long)]
    pub stage2_at: Option<usize>,
    /// Write the distilled student's training curve (JSON lines).
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// Write the baseline student's training curve (JSON lines).
    #[arg(long)]
    pub baseline_curve: Option<PathBuf>,
    /// Print the effective config as TOML and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Directory of `*.nart` lattices with optional `*.ref` references.
    #[arg(
        long,
        required_unless_present = "synthetic",
        conflicts_with = "synthetic"
    )]
    pub corpus: Option<PathBuf>,
    /// Vocabulary file [default: CORPUS/vocab.txt].
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Predictor table [default: CORPUS/predictor.json].
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    /// Generate this many synthetic utterances instead of reading a corpus.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Seed of the synthetic corpus.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Write the synthetic corpus, vocabulary and teacher predictor here and exit.
    #[arg(long, requires = "synthetic")]
    pub emit_corpus: Option<PathBuf>,
    /// Comma-separated beam widths; must include 1.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub beams: Vec<usize>,
    /// Confidence threshold below which CTC tokens are masked.
    #[arg(long, default_value_t = 0.99)]
    pub p_thr: f64,
    /// Maximum fills per iteration.
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Nominal seconds per lattice frame, to report a real-time factor.
    #[arg(long)]
    pub frame_seconds: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    /// Seed of the random instances.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

/// A caller mistake detected by the CLI itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some()
            || e.downcast_ref::<nar_decode::Error>()
                .is_some_and(nar_decode::Error::is_usage)
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(&cli) {
        Ok(outcome) => {
            print!("{}", outcome.stdout);
            if outcome.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_usage(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
