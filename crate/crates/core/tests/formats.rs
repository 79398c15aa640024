use std::path::Path;

use proptest::prelude::*;

use nar_decode::distill::{NBestEntry, NBestList};
use nar_decode::io::{
    decode_lattice, decode_tensor, encode_tensor, parse_experiment_config, parse_nbest,
    parse_predictor, parse_vocab, read_corpus, read_curve, render_experiment_config, render_nbest,
    render_predictor, render_vocab, write_corpus, write_curve, Dtype,
};
use nar_decode::maskctc::{ContextScheme, TablePredictor};
use nar_decode::toymodel::{CurvePoint, ExperimentConfig, SyntheticTask, TaskConfig};
use nar_decode::{Error, TokenSequence, Vocabulary};

fn here() -> &'static Path {
    Path::new("test")
}

fn dims_and_data() -> impl Strategy<Value = (Vec<u64>, Vec<f64>)> {
    prop::collection::vec(1u64..5, 0..4).prop_flat_map(|dims| {
        let n = dims.iter().product::<u64>() as usize;
        (Just(dims), prop::collection::vec(-1e6f64..1e6, n))
    })
}

proptest! {
    #[test]
    fn f64_tensors_round_trip_exactly((dims, data) in dims_and_data()) {
        let bytes = encode_tensor(&dims, &data, Dtype::F64).unwrap();
        prop_assert_eq!(bytes.len(), 10 + 8 * dims.len() + 8 * data.len());
        let t = decode_tensor(&bytes, here()).unwrap();
        prop_assert_eq!(t.dims, dims);
        prop_assert_eq!(t.data, data);
    }

    #[test]
    fn f32_tensors_round_trip_through_f32((dims, data) in dims_and_data()) {
        let bytes = encode_tensor(&dims, &data, Dtype::F32).unwrap();
        let t = decode_tensor(&bytes, here()).unwrap();
        prop_assert_eq!(t.dtype, Dtype::F32);
        for (got, want) in t.data.iter().zip(&data) {
            prop_assert_eq!(*got, f64::from(*want as f32));
        }
    }

    #[test]
    fn truncated_or_padded_tensors_are_errors(
        (dims, data) in dims_and_data(),
        cut in 1usize..16,
        pad in 1usize..16,
    ) {
        let bytes = encode_tensor(&dims, &data, Dtype::F64).unwrap();
        let short = &bytes[..bytes.len().saturating_sub(cut)];
        let is_parse = matches!(decode_tensor(short, here()), Err(Error::Parse { .. }));
        prop_assert!(is_parse);
        let mut long = bytes.clone();
        long.extend(std::iter::repeat(0u8).take(pad));
        let is_parse = matches!(decode_tensor(&long, here()), Err(Error::Parse { .. }));
        prop_assert!(is_parse);
    }

    #[test]
    fn random_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = decode_tensor(&bytes, here());
        let mut framed = b"NART".to_vec();
        framed.extend(&bytes);
        let _ = decode_tensor(&framed, here());
    }

    #[test]
    fn vocabularies_round_trip(n in 1usize..12, blank_first in any::<bool>()) {
        let v = Vocabulary::letters(n);
        let text = render_vocab(&v);
        prop_assert_eq!(parse_vocab(&text, here()).unwrap(), v.clone());
        if blank_first {
            let mut lines: Vec<&str> = text.lines().collect();
            let blank = lines.iter().position(|l| l.starts_with("#blank")).unwrap();
            let line = lines.remove(blank);
            lines.insert(0, line);
            let reordered = lines.join("\n");
            prop_assert_eq!(parse_vocab(&reordered, here()).unwrap().num_tokens(), n);
        }
    }

    #[test]
    fn nbest_lists_round_trip(
        entries in prop::collection::btree_map(
            prop::collection::vec(0usize..6, 0..8),
            -1e3f64..0.0,
            1..10,
        )
    ) {
        let list = NBestList::new(
            entries
                .into_iter()
                .map(|(ids, log_prob)| NBestEntry { tokens: TokenSequence::new(ids), log_prob })
                .collect(),
        )
        .unwrap();
        let back = parse_nbest(&render_nbest(&list), here()).unwrap();
        prop_assert_eq!(back, list);
    }

    #[test]
    fn predictors_round_trip(
        rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 0..6),
        positional in any::<bool>(),
    ) {
        let mut p = TablePredictor::uniform(4, 3, ContextScheme::Neighbors).unwrap();
        for (i, w) in rows.iter().enumerate() {
            let s: f64 = w.iter().sum();
            let mut row: Vec<f64> = w.iter().map(|x| x / s).collect();
            row.push(0.0);
            p.insert(format!("{i} $"), positional.then_some(i), row).unwrap();
        }
        let back = parse_predictor(&render_predictor(&p), here()).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn experiment_configs_round_trip(seed in any::<u64>(), steps in 1usize..5000, lr in 0.01f64..10.0) {
        let mut c = ExperimentConfig { seed, ..ExperimentConfig::default() };
        c.train.steps = steps;
        c.train.learning_rate = lr;
        c.train.stage2_at = Some(steps / 2);
        match render_experiment_config(&c) {
            Ok(text) => prop_assert_eq!(parse_experiment_config(&text, here()).unwrap(), c),
            Err(e) => prop_assert!(e.is_usage() && seed > i64::MAX as u64),
        }
    }
}

#[test]
fn lattice_rows_off_by_more_than_tolerance_are_rejected_with_offset() {
    let v = Vocabulary::letters(2);
    let data = [0.5, 0.25, 0.25, 0.5, 0.3, 0.3];
    let bytes = encode_tensor(&[2, 3], &data, Dtype::F64).unwrap();
    match decode_lattice(&bytes, here(), &v) {
        Err(Error::Parse { offset, .. }) => assert_eq!(offset, 10 + 16 + 24),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn config_rejects_unknown_version_and_fields() {
    let good = render_experiment_config(&ExperimentConfig::default()).unwrap();
    assert!(parse_experiment_config(&good.replace("version = 1", "version = 2"), here()).is_err());
    assert!(parse_experiment_config("seed = 1\nbogus = 2\n", here()).is_err());
    let partial = parse_experiment_config("seed = 9\n[decode]\nbeam = 3\n", here()).unwrap();
    assert_eq!(partial.seed, 9);
    assert_eq!(partial.decode.beam, 3);
    assert_eq!(partial.task, TaskConfig::default());
}

#[test]
fn corpus_and_curve_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let task = SyntheticTask::new(4, TaskConfig::default()).unwrap();
    let utts = task.corpus(7, 5);
    write_corpus(dir.path(), task.vocab(), &utts).unwrap();
    let items = read_corpus(dir.path(), task.vocab()).unwrap();
    assert_eq!(items.len(), 7);
    for (item, u) in items.iter().zip(&utts) {
        assert_eq!(item.reference.as_ref(), Some(&u.truth));
        for (a, b) in item.lattice.probs().iter().zip(u.lattice.probs().iter()) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON);
        }
    }

    let curve: Vec<CurvePoint> = (0..5)
        .map(|i| CurvePoint {
            step: i,
            stage: 1 + (i >= 3) as u8,
            mlm: 1.0 / (i + 1) as f64,
            jca: 0.7 / (i + 1) as f64,
            frame_kd: 2.0 - 0.1 * i as f64,
            seq_kd: 0.0,
            decoder_kd: 0.5,
            total: 3.0 - 0.3 * i as f64,
        })
        .collect();
    let path = dir.path().join("curve.jsonl");
    write_curve(&path, &curve).unwrap();
    assert_eq!(read_curve(&path).unwrap(), curve);
}
