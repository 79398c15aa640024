use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nar-decode"))
        .args(args)
        .current_dir(root())
        .env("RUST_LOG", "off")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 output")
}

const LATTICE: &str = "data/demo/corpus/u00005.nart";
const PREDICTOR: &str = "data/demo/corpus/predictor.json";
const VOCAB: &str = "data/demo/corpus/vocab.txt";

#[test]
fn beam_one_prints_what_easy_first_prints() {
    for k in ["1", "2", "3"] {
        for p in ["0.5", "0.9", "0.99"] {
            let base = [
                "maskctc-decode",
                "--lattice",
                LATTICE,
                "--predictor",
                PREDICTOR,
                "--trace",
            ];
            let mut a = base.to_vec();
            a.extend(["--k", k, "--p-thr", p, "--beam", "1"]);
            let mut b = base.to_vec();
            b.extend(["--k", k, "--p-thr", p, "--easy-first"]);
            let (a, b) = (run(&a), run(&b));
            assert!(a.status.success() && b.status.success());
            assert_eq!(a.stdout, b.stdout, "k={k} p_thr={p}");
        }
    }
}

#[test]
fn kld_of_identical_inputs_is_zero() {
    let t = "data/demo/teacher.nart";
    let out = run(&["score", "--loss", "kld", "--teacher", t, "--student", t]);
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("kld: 0\n"), "{}", stdout(&out));
}

#[test]
fn gradient_checks_pass_on_demo_inputs() {
    let cases: &[&[&str]] = &[
        &[
            "--loss",
            "fkd",
            "--teacher",
            "data/demo/teacher.nart",
            "--logits",
            "data/demo/logits.nart",
        ],
        &[
            "--loss",
            "mlm",
            "--logits",
            "data/demo/logits.nart",
            "--targets",
            "3,2,1,0",
        ],
        &[
            "--loss",
            "ctc",
            "--logits",
            "data/demo/logits.nart",
            "--target",
            "",
        ],
    ];
    for case in cases {
        let mut args = vec!["score", "--grad-check"];
        args.extend_from_slice(case);
        let out = run(&args);
        assert!(out.status.success(), "{case:?}");
        assert!(stdout(&out).contains("(pass)"), "{}", stdout(&out));
    }
}

#[test]
fn total_uses_stage_weights() {
    let args = [
        "score",
        "--loss",
        "total",
        "--ctc",
        "2",
        "--att",
        "1",
        "--dec-frame",
        "1",
    ];
    let total = |args: &[&str]| -> f64 {
        let text = stdout(&run(args));
        let line = text.lines().next().expect("output");
        line.strip_prefix("total: ")
            .expect("total line")
            .parse()
            .expect("number")
    };
    let mut two = args.to_vec();
    two.extend(["--stage", "2"]);
    // jca = 0.3 * 2 + 0.7 * 1; the decoder term is weighted 0.3, then 0.5.
    assert!((total(&args) - 1.6).abs() < 1e-12);
    assert!((total(&two) - 1.8).abs() < 1e-12);
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        vec!["frobnicate"],
        vec!["maskctc-decode", "--lattice", LATTICE],
        vec![
            "maskctc-decode",
            "--lattice",
            LATTICE,
            "--predictor",
            PREDICTOR,
            "--beam",
            "0",
        ],
        vec![
            "maskctc-decode",
            "--lattice",
            LATTICE,
            "--predictor",
            PREDICTOR,
            "--p-thr",
            "1.5",
        ],
        vec!["bench", "--synthetic", "5", "--beams", "5,10"],
        vec!["score", "--loss", "kld"],
        vec!["score", "--loss", "total", "--stage", "3"],
    ] {
        let out = run(&args);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn bad_files_exit_one_with_a_location() {
    let out = run(&[
        "ctc-decode",
        "--lattice",
        "data/demo/corpus/u00005.ref",
        "--vocab",
        VOCAB,
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("byte offset 0"), "{err}");

    let out = run(&[
        "ctc-decode",
        "--lattice",
        "data/demo/missing.nart",
        "--vocab",
        VOCAB,
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.nart"));
}

#[test]
fn truncated_lattice_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = std::fs::read(root().join(LATTICE)).unwrap();
    let path = dir.path().join("cut.nart");
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let out = run(&[
        "ctc-decode",
        "--lattice",
        path.to_str().unwrap(),
        "--vocab",
        VOCAB,
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("parse error"));
}

#[test]
fn help_mentions_each_subcommand() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for sub in [
        "ctc-decode",
        "maskctc-decode",
        "score",
        "distill-train",
        "bench",
        "selftest",
    ] {
        assert!(text.contains(sub), "{sub} missing from help");
        let sub_help = run(&[sub, "--help"]);
        assert!(sub_help.status.success(), "{sub} --help");
    }
}

#[test]
fn records_mode_is_stable_and_timing_is_opt_in() {
    let args = [
        "--format",
        "records",
        "bench",
        "--synthetic",
        "30",
        "--beams",
        "1,5",
    ];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert!(!stdout(&a).contains("seconds"));

    let mut timed = args.to_vec();
    timed.insert(0, "--timing");
    assert!(stdout(&run(&timed)).contains("time_ratio="));
}

#[test]
fn emitted_corpus_round_trips_through_bench() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert!(run(&["bench", "--synthetic", "15", "--emit-corpus", d])
        .status
        .success());
    let from_disk = run(&["--format", "records", "bench", "--corpus", d]);
    let in_memory = run(&["--format", "records", "bench", "--synthetic", "15"]);
    assert!(from_disk.status.success());
    let beams = |o: &Output| -> Vec<String> {
        stdout(o)
            .lines()
            .filter(|l| l.starts_with("beam "))
            .map(String::from)
            .collect()
    };
    assert_eq!(beams(&from_disk), beams(&in_memory));
}

#[test]
fn distill_train_writes_curves_and_honours_stage_switch() {
    let dir = tempfile::tempdir().unwrap();
    let curve = dir.path().join("curve.jsonl");
    let out = run(&[
        "distill-train",
        "--task-config",
        "data/demo/task.toml",
        "--stage2-at",
        "100",
        "--curve",
        curve.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout(&out).contains("stage 2 from step 100"));
    let text = std::fs::read_to_string(&curve).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 201);
    assert!(lines[99].contains("\"stage\":1"));
    assert!(lines[100].contains("\"stage\":2"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "seed = 3\n[train]\nlearning_rat = 0.5\n").unwrap();
    let out = run(&["distill-train", "--task-config", path.to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}
