//! File formats: tensors, lattices, vocabularies, predictor tables,
//! N-best lists, experiment configs, training curves and lattice corpora.
//!
//! Tensor layout (little-endian):
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `NART` |
//! | 4 | 4 | version (`u32`, currently 1) |
//! | 8 | 1 | dtype (0 = `f32`, 1 = `f64`) |
//! | 9 | 1 | rank (`u8`) |
//! | 10 | 8 × rank | dims (`u64`) |
//! | … | | row-major payload |

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::distill::{NBestEntry, NBestList};
use crate::error::{Error, Result};
use crate::lattice::PosteriorLattice;
use crate::maskctc::{ContextScheme, TablePredictor};
use crate::sequence::TokenSequence;
use crate::toymodel::{CurvePoint, ExperimentConfig, Utterance};
use crate::vocab::Vocabulary;

pub const TENSOR_MAGIC: &[u8; 4] = b"NART";
pub const TENSOR_VERSION: u32 = 1;
const HEADER_FIXED: usize = 10;

/// Lattice rows within this distance of 1 are renormalised on read.
pub const LATTICE_RENORMALIZE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dtype: Dtype,
    pub dims: Vec<u64>,
    /// Values widened to `f64`.
    pub data: Vec<f64>,
    /// Byte offset of the first payload value.
    pub payload_offset: usize,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn format_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

/// Decodes a tensor image. `path` only labels errors.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 4 || &bytes[..4] != TENSOR_MAGIC {
        return Err(parse_err(path, 0, "bad magic, expected \"NART\""));
    }
    if bytes.len() < HEADER_FIXED {
        return Err(parse_err(path, bytes.len(), "truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != TENSOR_VERSION {
        return Err(parse_err(path, 4, format!("unsupported version {version}")));
    }
    let dtype = match bytes[8] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        c => return Err(parse_err(path, 8, format!("unknown dtype code {c}"))),
    };
    let rank = bytes[9] as usize;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = HEADER_FIXED + 8 * i;
        let Some(raw) = bytes.get(at..at + 8) else {
            return Err(parse_err(
                path,
                bytes.len(),
                format!("truncated dimension {i}"),
            ));
        };
        dims.push(u64::from_le_bytes(raw.try_into().expect("8 bytes")));
    }
    let payload_offset = HEADER_FIXED + 8 * rank;
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|n| usize::try_from(n).ok())
        .filter(|n| n.checked_mul(dtype.size()).is_some())
        .ok_or_else(|| parse_err(path, HEADER_FIXED, "dimensions overflow"))?;
    let expected = payload_offset + count * dtype.size();
    if bytes.len() < expected {
        return Err(parse_err(
            path,
            bytes.len(),
            format!(
                "truncated payload: {count} values need {} bytes from offset {payload_offset}",
                count * dtype.size()
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(parse_err(path, expected, "trailing bytes after payload"));
    }
    let payload = &bytes[payload_offset..];
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok(Tensor {
        dtype,
        dims,
        data,
        payload_offset,
    })
}

pub fn encode_tensor(dims: &[u64], data: &[f64], dtype: Dtype) -> Result<Vec<u8>> {
    let count: u64 = dims.iter().product();
    if count != data.len() as u64 {
        return Err(Error::usage(format!(
            "{} values for dimensions {dims:?}",
            data.len()
        )));
    }
    let rank = u8::try_from(dims.len()).map_err(|_| Error::usage("rank above 255"))?;
    let mut out = Vec::with_capacity(HEADER_FIXED + 8 * dims.len() + data.len() * dtype.size());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(rank);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in data {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&read_bytes(path)?, path)
}

pub fn write_tensor(path: &Path, dims: &[u64], data: &[f64], dtype: Dtype) -> Result<()> {
    write_bytes(path, &encode_tensor(dims, data, dtype)?)
}

/// Decodes a `T × (|U| + 1)` lattice image against `vocab`.
pub fn decode_lattice(bytes: &[u8], path: &Path, vocab: &Vocabulary) -> Result<PosteriorLattice> {
    let t = decode_tensor(bytes, path)?;
    if t.dims.len() != 2 {
        return Err(parse_err(
            path,
            9,
            format!("lattice must have rank 2, got {}", t.dims.len()),
        ));
    }
    let (frames, width) = (t.dims[0] as usize, t.dims[1] as usize);
    if frames == 0 {
        return Err(parse_err(path, HEADER_FIXED, "lattice has no frames"));
    }
    if width != vocab.lattice_width() {
        return Err(parse_err(
            path,
            HEADER_FIXED + 8,
            format!(
                "lattice has {width} columns, vocabulary needs {}",
                vocab.lattice_width()
            ),
        ));
    }
    let size = t.dtype.size();
    let mut data = t.data;
    for f in 0..frames {
        let row = &mut data[f * width..(f + 1) * width];
        let row_offset = t.payload_offset + f * width * size;
        if let Some(c) = row.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(parse_err(
                path,
                row_offset + c * size,
                format!("frame {f}: invalid probability {}", row[c]),
            ));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > LATTICE_RENORMALIZE_TOLERANCE {
            return Err(parse_err(
                path,
                row_offset,
                format!("frame {f}: row sums to {sum}"),
            ));
        }
        row.iter_mut().for_each(|p| *p /= sum);
    }
    let probs = Array2::from_shape_vec((frames, width), data).expect("shape checked");
    PosteriorLattice::new(probs, vocab.blank_id())
}

pub fn read_lattice(path: &Path, vocab: &Vocabulary) -> Result<PosteriorLattice> {
    decode_lattice(&read_bytes(path)?, path, vocab)
}

/// Writes a lattice as a 64-bit tensor.
pub fn write_lattice(path: &Path, lattice: &PosteriorLattice) -> Result<()> {
    let dims = [lattice.num_frames() as u64, lattice.width() as u64];
    let data: Vec<f64> = lattice.probs().iter().copied().collect();
    write_tensor(path, &dims, &data, Dtype::F64)
}

/// Parses a vocabulary: `#blank N` and `#mask N` on the first two lines,
/// then one symbol per line (0-based).
pub fn parse_vocab(text: &str, path: &Path) -> Result<Vocabulary> {
    let lines: Vec<&str> = text.lines().collect();
    let mut blank = None;
    let mut mask = None;
    for (i, line) in lines.iter().take(2).enumerate() {
        let mut parts = line.split_whitespace();
        let (slot, name) = match parts.next() {
            Some("#blank") => (&mut blank, "#blank"),
            Some("#mask") => (&mut mask, "#mask"),
            _ => {
                return Err(format_err(
                    path,
                    i + 1,
                    "expected `#blank <index>` and `#mask <index>` on the first two lines",
                ))
            }
        };
        if slot.is_some() {
            return Err(format_err(
                path,
                i + 1,
                format!("repeated {name} directive"),
            ));
        }
        let value = parts
            .next()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|_| parts.next().is_none())
            .ok_or_else(|| format_err(path, i + 1, format!("{name} needs one integer index")))?;
        *slot = Some(value);
    }
    let (Some(blank), Some(mask)) = (blank, mask) else {
        return Err(format_err(path, 1, "missing #blank or #mask directive"));
    };
    let mut tokens = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(2) {
        let tok = line.trim();
        if tok.is_empty() || tok.contains(char::is_whitespace) {
            return Err(format_err(
                path,
                i + 1,
                "token must be a single non-empty word",
            ));
        }
        tokens.push(tok.to_string());
    }
    Vocabulary::new(tokens, blank, mask).map_err(|e| format_err(path, 1, e.to_string()))
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    parse_vocab(&read_text(path)?, path)
}

pub fn render_vocab(vocab: &Vocabulary) -> String {
    let mut s = format!("#blank {}\n#mask {}\n", vocab.blank_id(), vocab.mask_id());
    for t in vocab.tokens() {
        s.push_str(t);
        s.push('\n');
    }
    s
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    write_bytes(path, render_vocab(vocab).as_bytes())
}

/// Parses line-delimited `{"tokens": [...], "log_prob": x}` records.
/// Blank lines are skipped; order is preserved.
pub fn parse_nbest(text: &str, path: &Path) -> Result<NBestList> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: NBestEntry =
            serde_json::from_str(line).map_err(|e| format_err(path, i + 1, e.to_string()))?;
        entries.push(e);
    }
    if entries.is_empty() {
        return Err(format_err(path, 1, "N-best list is empty"));
    }
    NBestList::new(entries).map_err(|e| format_err(path, 1, e.to_string()))
}

pub fn read_nbest(path: &Path) -> Result<NBestList> {
    parse_nbest(&read_text(path)?, path)
}

pub fn render_nbest(nbest: &NBestList) -> String {
    let mut s = String::new();
    for e in nbest.entries() {
        s.push_str(&serde_json::to_string(e).expect("N-best entries serialize"));
        s.push('\n');
    }
    s
}

pub fn write_nbest(path: &Path, nbest: &NBestList) -> Result<()> {
    write_bytes(path, render_nbest(nbest).as_bytes())
}

pub const PREDICTOR_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictorFile {
    version: u32,
    num_symbols: usize,
    blank: usize,
    scheme: ContextScheme,
    fallback: Vec<f64>,
    #[serde(default)]
    entries: Vec<PredictorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictorEntry {
    key: String,
    #[serde(default)]
    position: Option<usize>,
    dist: Vec<f64>,
}

/// Parses a JSON predictor table.
pub fn parse_predictor(text: &str, path: &Path) -> Result<TablePredictor> {
    let file: PredictorFile =
        serde_json::from_str(text).map_err(|e| format_err(path, e.line(), e.to_string()))?;
    if file.version != PREDICTOR_VERSION {
        return Err(format_err(
            path,
            1,
            format!("unsupported version {}", file.version),
        ));
    }
    let mut p = TablePredictor::new(file.num_symbols, file.blank, file.scheme, file.fallback)
        .map_err(|e| format_err(path, 1, e.to_string()))?;
    for e in file.entries {
        let what = e.key.clone();
        p.insert(e.key, e.position, e.dist)
            .map_err(|err| format_err(path, 1, format!("entry {what:?}: {err}")))?;
    }
    Ok(p)
}

pub fn read_predictor(path: &Path) -> Result<TablePredictor> {
    parse_predictor(&read_text(path)?, path)
}

pub fn render_predictor(p: &TablePredictor) -> String {
    use crate::maskctc::MaskPredictor;
    let file = PredictorFile {
        version: PREDICTOR_VERSION,
        num_symbols: p.num_symbols(),
        blank: p.blank(),
        scheme: p.scheme(),
        fallback: p.fallback().to_vec(),
        entries: p
            .entries()
            .into_iter()
            .map(|(k, pos, d)| PredictorEntry {
                key: k.to_string(),
                position: pos,
                dist: d.to_vec(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("predictor serializes");
    s.push('\n');
    s
}

pub fn write_predictor(path: &Path, p: &TablePredictor) -> Result<()> {
    write_bytes(path, render_predictor(p).as_bytes())
}

pub const CONFIG_VERSION: u32 = 1;

#[derive(Serialize)]
struct ConfigFile {
    version: u32,
    #[serde(flatten)]
    config: ExperimentConfig,
}

/// Parses a TOML experiment config; missing fields take their defaults.
pub fn parse_experiment_config(text: &str, path: &Path) -> Result<ExperimentConfig> {
    let value: toml::Table = toml::from_str(text).map_err(|e| config_err(path, text, e))?;
    let mut value = value;
    match value.remove("version") {
        None => {}
        Some(toml::Value::Integer(v)) if v == CONFIG_VERSION as i64 => {}
        Some(v) => return Err(format_err(path, 1, format!("unsupported version {v}"))),
    }
    let config: ExperimentConfig = value
        .try_into()
        .map_err(|e: toml::de::Error| format_err(path, 1, e.message().to_string()))?;
    config
        .task
        .validate()
        .map_err(|e| format_err(path, 1, e.to_string()))?;
    config
        .decode
        .validate()
        .map_err(|e| format_err(path, 1, e.to_string()))?;
    config
        .stage1
        .validate()
        .map_err(|e| format_err(path, 1, e.to_string()))?;
    config
        .stage2
        .validate()
        .map_err(|e| format_err(path, 1, e.to_string()))?;
    Ok(config)
}

fn config_err(path: &Path, text: &str, e: toml::de::Error) -> Error {
    let line = e.span().map_or(1, |s| {
        text[..s.start.min(text.len())].matches('\n').count() + 1
    });
    format_err(path, line, e.message().to_string())
}

pub fn read_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    parse_experiment_config(&read_text(path)?, path)
}

/// TOML integers are signed, so seeds above `i64::MAX` cannot be written.
pub fn render_experiment_config(config: &ExperimentConfig) -> Result<String> {
    if i64::try_from(config.seed).is_err() {
        return Err(Error::usage(format!(
            "seed {} does not fit a TOML integer (max {})",
            config.seed,
            i64::MAX
        )));
    }
    Ok(toml::to_string(&ConfigFile {
        version: CONFIG_VERSION,
        config: config.clone(),
    })
    .expect("config serializes"))
}

pub fn write_experiment_config(path: &Path, config: &ExperimentConfig) -> Result<()> {
    write_bytes(path, render_experiment_config(config)?.as_bytes())
}

pub fn render_curve(curve: &[CurvePoint]) -> String {
    let mut s = String::new();
    for p in curve {
        s.push_str(&serde_json::to_string(p).expect("curve point serializes"));
        s.push('\n');
    }
    s
}

pub fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(render_curve(curve).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format_err(path, i + 1, e.to_string())))
        .collect()
}

/// One lattice of a corpus directory.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub name: String,
    pub lattice: PosteriorLattice,
    pub reference: Option<TokenSequence>,
}

/// Loads every `*.nart` lattice of `dir` in file-name order, with the
/// reference from a sibling `*.ref` file (token names) when present. Each
/// lattice's context id is its index.
pub fn read_corpus(dir: &Path, vocab: &Vocabulary) -> Result<Vec<CorpusItem>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "nart"))
        .collect();
    paths.sort();
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let lattice = read_lattice(p, vocab)?.with_context(i as u64);
            let ref_path = p.with_extension("ref");
            let reference = if ref_path.exists() {
                let text = read_text(&ref_path)?;
                let ids = vocab
                    .parse_sequence(text.trim())
                    .map_err(|e| format_err(&ref_path, 1, e.to_string()))?;
                Some(TokenSequence::new(ids))
            } else {
                None
            };
            Ok(CorpusItem {
                name: p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                lattice,
                reference,
            })
        })
        .collect()
}

/// Writes utterances as `uNNNNN.nart` / `uNNNNN.ref` pairs plus `vocab.txt`.
pub fn write_corpus(dir: &Path, vocab: &Vocabulary, utterances: &[Utterance]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_vocab(&dir.join("vocab.txt"), vocab)?;
    for u in utterances {
        let stem = format!("u{:05}", u.id);
        write_lattice(&dir.join(format!("{stem}.nart")), &u.lattice)?;
        let mut r = vocab.render(u.truth.ids());
        r.push('\n');
        write_bytes(&dir.join(format!("{stem}.ref")), r.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    fn offset(e: Error) -> u64 {
        match e {
            Error::Parse { offset, .. } => offset,
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn tensor_round_trip_f64_exact() {
        let data = vec![0.1, 1.0 / 3.0, f64::MIN_POSITIVE, -2.5, 1e300, 0.0];
        let bytes = encode_tensor(&[2, 3], &data, Dtype::F64).unwrap();
        let t = decode_tensor(&bytes, p()).unwrap();
        assert_eq!(t.dims, vec![2, 3]);
        assert_eq!(t.data, data);
        assert_eq!(t.payload_offset, 26);
    }

    #[test]
    fn tensor_header_errors_name_offsets() {
        let bytes = encode_tensor(&[2, 2], &[0.5; 4], Dtype::F64).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(offset(decode_tensor(&bad, p()).unwrap_err()), 0);
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(offset(decode_tensor(&bad, p()).unwrap_err()), 4);
        let mut bad = bytes.clone();
        bad[8] = 7;
        assert_eq!(offset(decode_tensor(&bad, p()).unwrap_err()), 8);
        // Truncated payload: error at the end of what exists.
        let cut = &bytes[..bytes.len() - 3];
        assert_eq!(
            offset(decode_tensor(cut, p()).unwrap_err()),
            cut.len() as u64
        );
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(
            offset(decode_tensor(&long, p()).unwrap_err()),
            bytes.len() as u64
        );
    }

    #[test]
    fn lattice_normalization_rule() {
        let v = Vocabulary::letters(1);
        let ok = encode_tensor(&[1, 2], &[0.50004, 0.5], Dtype::F64).unwrap();
        let l = decode_lattice(&ok, p(), &v).unwrap();
        assert!((l.probs().sum() - 1.0).abs() < 1e-15);

        let bad = encode_tensor(&[2, 2], &[0.5, 0.5, 0.4, 0.5], Dtype::F64).unwrap();
        // Second row starts 16 bytes into the payload at 26.
        assert_eq!(offset(decode_lattice(&bad, p(), &v).unwrap_err()), 42);

        let neg = encode_tensor(&[1, 2], &[1.5, -0.5], Dtype::F64).unwrap();
        assert_eq!(offset(decode_lattice(&neg, p(), &v).unwrap_err()), 34);

        let wide = encode_tensor(&[1, 3], &[0.2, 0.3, 0.5], Dtype::F64).unwrap();
        assert_eq!(offset(decode_lattice(&wide, p(), &v).unwrap_err()), 18);

        let rank3 = encode_tensor(&[1, 1, 2], &[0.5, 0.5], Dtype::F64).unwrap();
        assert_eq!(offset(decode_lattice(&rank3, p(), &v).unwrap_err()), 9);
    }

    #[test]
    fn f32_lattices_load() {
        let v = Vocabulary::letters(2);
        let bytes = encode_tensor(&[1, 3], &[0.1, 0.2, 0.7], Dtype::F32).unwrap();
        let l = decode_lattice(&bytes, p(), &v).unwrap();
        assert!((l.prob(0, 2) - 0.7).abs() < 1e-7);
    }

    #[test]
    fn vocab_round_trip_and_errors() {
        let v = Vocabulary::letters(3);
        let text = render_vocab(&v);
        assert!(text.starts_with("#blank 3\n#mask 4\na\n"));
        assert_eq!(parse_vocab(&text, p()).unwrap(), v);
        let swapped = "#mask 3\n#blank 2\nx\ny\n<b>\n<m>\n";
        assert_eq!(parse_vocab(swapped, p()).unwrap().blank_id(), 2);
        assert!(parse_vocab("a\nb\n", p()).is_err());
        assert!(parse_vocab("#blank 1\n#mask 2\na\n\n<m>\n", p()).is_err());
        assert!(parse_vocab("#blank 1\n#blank 2\na\nb\nc\n", p()).is_err());
    }

    #[test]
    fn nbest_preserves_order_and_rejects_bad_input() {
        let text = "{\"tokens\":[1,2],\"log_prob\":-3.5}\n{\"tokens\":[0],\"log_prob\":-0.1}\n";
        let n = parse_nbest(text, p()).unwrap();
        assert_eq!(n.entries()[0].tokens.ids(), &[1, 2]);
        assert_eq!(render_nbest(&n), text);
        assert!(parse_nbest("", p()).is_err());
        let dup = "{\"tokens\":[1],\"log_prob\":-1}\n{\"tokens\":[1],\"log_prob\":-2}\n";
        assert!(parse_nbest(dup, p()).is_err());
        match parse_nbest("{\"tokens\":[1],\"log_prob\":-1}\nnot json\n", p()) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn predictor_round_trip() {
        let mut t = TablePredictor::uniform(4, 3, ContextScheme::Neighbors).unwrap();
        t.insert("^ 1", None, vec![0.2, 0.3, 0.5, 0.0]).unwrap();
        t.insert("0 $", Some(2), vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let text = render_predictor(&t);
        assert_eq!(parse_predictor(&text, p()).unwrap(), t);
        let bad = text.replace("\"version\": 1", "\"version\": 2");
        assert!(parse_predictor(&bad, p()).is_err());
    }

    #[test]
    fn config_round_trip_and_defaults() {
        let c = ExperimentConfig::default();
        let text = render_experiment_config(&c).unwrap();
        assert_eq!(parse_experiment_config(&text, p()).unwrap(), c);
        let partial = "seed = 9\n[train]\nsteps = 5\n";
        let got = parse_experiment_config(partial, p()).unwrap();
        assert_eq!(got.seed, 9);
        assert_eq!(got.train.steps, 5);
        assert_eq!(got.task, c.task);
        match parse_experiment_config("seed = 1\n[task]\nbogus = 3\n", p()) {
            Err(Error::Format { .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(parse_experiment_config("version = 3\n", p()).is_err());
    }
}
