//! Knowledge-distillation objectives from an autoregressive teacher into a
//! non-autoregressive student, with analytic gradients with respect to the
//! student logits.
//!
//! Frame-level terms are cross-entropies `-Σ P log Q`; the teacher entropy
//! is constant for a frozen teacher and is dropped. [`kld`] is provided for
//! reporting and tests.

use std::collections::HashSet;

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_log_marginal, ctc_loss_and_grad};
use crate::error::{Error, Result};
use crate::lattice::{PosteriorLattice, ROW_SUM_TOLERANCE};
use crate::prob::{check_distribution, log_softmax, log_sum_exp_raw, softmax};
use crate::sequence::TokenSequence;

/// `KLD(P, Q) = Σ_i P_i ln(P_i / Q_i)`, `+inf` when `Q` misses mass of `P`.
pub fn kld(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::usage(format!(
            "distributions differ in length ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, ROW_SUM_TOLERANCE, "P")?;
    check_distribution(q, ROW_SUM_TOLERANCE, "Q")?;
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi == 0.0 {
                return Ok(f64::INFINITY);
            }
            total += pi * (pi / qi).ln();
        }
    }
    Ok(total.max(0.0))
}

/// Teacher posteriors and student logits over the same rows and classes,
/// with the rows the loss is taken over.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDistributionPair {
    teacher: Array2<f64>,
    student_logits: Array2<f64>,
    rows: Vec<usize>,
}

impl FrameDistributionPair {
    pub fn new(
        teacher: Array2<f64>,
        student_logits: Array2<f64>,
        rows: Vec<usize>,
    ) -> Result<Self> {
        if teacher.dim() != student_logits.dim() {
            return Err(Error::usage(format!(
                "teacher {:?} and student {:?} shapes differ",
                teacher.dim(),
                student_logits.dim()
            )));
        }
        for (t, row) in teacher.outer_iter().enumerate() {
            check_distribution(
                row.as_slice().expect("standard layout"),
                ROW_SUM_TOLERANCE,
                &format!("teacher row {t}"),
            )?;
        }
        if student_logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::usage("student logits contain non-finite values"));
        }
        check_rows(&rows, teacher.nrows())?;
        Ok(FrameDistributionPair {
            teacher: teacher.as_standard_layout().to_owned(),
            student_logits,
            rows,
        })
    }

    /// Loss over every row.
    pub fn all_rows(teacher: Array2<f64>, student_logits: Array2<f64>) -> Result<Self> {
        let rows = (0..teacher.nrows()).collect();
        FrameDistributionPair::new(teacher, student_logits, rows)
    }

    pub fn teacher(&self) -> &Array2<f64> {
        &self.teacher
    }

    pub fn student_logits(&self) -> &Array2<f64> {
        &self.student_logits
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn with_logits(&self, student_logits: Array2<f64>) -> Result<Self> {
        FrameDistributionPair::new(self.teacher.clone(), student_logits, self.rows.clone())
    }
}

fn check_rows(rows: &[usize], nrows: usize) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::usage("position mask is empty"));
    }
    let mut seen = HashSet::new();
    for &r in rows {
        if r >= nrows {
            return Err(Error::usage(format!("row {r} outside {nrows} rows")));
        }
        if !seen.insert(r) {
            return Err(Error::usage(format!("row {r} listed twice")));
        }
    }
    Ok(())
}

fn cross_entropy_rows(
    teacher: &Array2<f64>,
    logits: &Array2<f64>,
    rows: &[usize],
    scale: f64,
) -> (f64, Array2<f64>) {
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    for &t in rows {
        let z = logits.row(t).to_vec();
        let logq = log_softmax(&z);
        let q = softmax(&z);
        let mut row_loss = 0.0;
        for c in 0..z.len() {
            let p = teacher[[t, c]];
            if p > 0.0 {
                row_loss -= p * logq[c];
            }
            grad[[t, c]] = scale * (q[c] - p);
        }
        loss += scale * row_loss;
    }
    (loss, grad)
}

/// Frame-level distillation: `-Σ_t Σ_c P_t(c) ln Q_t(c)` over the pair's rows.
pub fn frame_kd_loss(pair: &FrameDistributionPair) -> Result<(f64, Array2<f64>)> {
    Ok(cross_entropy_rows(
        &pair.teacher,
        &pair.student_logits,
        &pair.rows,
        1.0,
    ))
}

/// Decoder-side frame distillation restricted to the masked rows and
/// normalised by their count.
pub fn decoder_frame_kd_loss(
    pair: &FrameDistributionPair,
    mask_positions: &[usize],
) -> Result<(f64, Array2<f64>)> {
    check_rows(mask_positions, pair.teacher.nrows())?;
    let scale = 1.0 / mask_positions.len() as f64;
    Ok(cross_entropy_rows(
        &pair.teacher,
        &pair.student_logits,
        mask_positions,
        scale,
    ))
}

/// One teacher hypothesis with its raw (unnormalised) log-probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestEntry {
    pub tokens: TokenSequence,
    pub log_prob: f64,
}

/// The teacher's N-best list `Ω`: non-empty, distinct sequences, finite scores.
#[derive(Clone, Debug, PartialEq)]
pub struct NBestList {
    entries: Vec<NBestEntry>,
}

impl NBestList {
    pub fn new(entries: Vec<NBestEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::usage("N-best list is empty"));
        }
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if !e.log_prob.is_finite() {
                return Err(Error::usage(format!(
                    "entry {i} has non-finite log-probability {}",
                    e.log_prob
                )));
            }
            if !seen.insert(&e.tokens) {
                return Err(Error::usage(format!(
                    "entry {i} repeats sequence [{}]",
                    e.tokens
                )));
            }
        }
        Ok(NBestList { entries })
    }

    pub fn entries(&self) -> &[NBestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `P(y_i) / Σ_j P(y_j)` over the N-best list, computed in log space.
pub fn nbest_normalize(nbest: &NBestList) -> Vec<f64> {
    normalize_log_scores(&nbest.entries.iter().map(|e| e.log_prob).collect::<Vec<_>>())
}

fn normalize_log_scores(scores: &[f64]) -> Vec<f64> {
    let total = log_sum_exp_raw(scores);
    scores.iter().map(|s| (s - total).exp()).collect()
}

/// Result of [`sequence_kd_loss`].
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceKd {
    pub loss: f64,
    pub grad: Array2<f64>,
    /// Hypotheses that contributed.
    pub used: usize,
    /// Hypotheses dropped for a length mismatch with the student sequence.
    pub dropped: usize,
}

/// Sequence-level distillation on the decoder:
/// `-Σ_{y ∈ Ω} P'(y) / |y_mask| · ln Q(y_mask | y_obs)`.
///
/// `student_logits` has one row per entry of `mask_positions` (ascending
/// sequence positions) and one column per token class; `ln Q(y_mask | ·)`
/// factorizes over the masked positions. Hypotheses whose length differs
/// from `seq_len` are dropped and `P'` is renormalised over the rest; if
/// none survive the loss is zero.
pub fn sequence_kd_loss(
    nbest: &NBestList,
    student_logits: &Array2<f64>,
    mask_positions: &[usize],
    seq_len: usize,
) -> Result<SequenceKd> {
    let (rows, classes) = student_logits.dim();
    if mask_positions.is_empty() {
        return Err(Error::usage("no masked positions"));
    }
    if rows != mask_positions.len() {
        return Err(Error::usage(format!(
            "{rows} logit rows for {} masked positions",
            mask_positions.len()
        )));
    }
    if let Some(p) = mask_positions.iter().find(|&&p| p >= seq_len) {
        return Err(Error::usage(format!(
            "masked position {p} outside sequence of length {seq_len}"
        )));
    }
    if student_logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::usage("student logits contain non-finite values"));
    }

    let survivors: Vec<&NBestEntry> = nbest
        .entries
        .iter()
        .filter(|e| e.tokens.len() == seq_len)
        .collect();
    let dropped = nbest.len() - survivors.len();
    if survivors.is_empty() {
        warn!(
            "sequence KD: all {} hypotheses differ in length from the student ({seq_len}); loss is zero",
            nbest.len()
        );
        return Ok(SequenceKd {
            loss: 0.0,
            grad: Array2::zeros((rows, classes)),
            used: 0,
            dropped,
        });
    }
    for e in &survivors {
        for &p in mask_positions {
            if e.tokens.ids()[p] >= classes {
                return Err(Error::usage(format!(
                    "hypothesis token {} outside {classes} student classes",
                    e.tokens.ids()[p]
                )));
            }
        }
    }

    let weights = normalize_log_scores(&survivors.iter().map(|e| e.log_prob).collect::<Vec<_>>());
    let scale = 1.0 / mask_positions.len() as f64;

    let row_log_q: Vec<Vec<f64>> = (0..rows)
        .map(|j| log_softmax(&student_logits.row(j).to_vec()))
        .collect();
    let row_q: Vec<Vec<f64>> = (0..rows)
        .map(|j| softmax(&student_logits.row(j).to_vec()))
        .collect();

    let mut loss = 0.0;
    let mut grad = Array2::zeros((rows, classes));
    for (e, &w) in survivors.iter().zip(&weights) {
        let mut log_q = 0.0;
        for (j, &p) in mask_positions.iter().enumerate() {
            let tok = e.tokens.ids()[p];
            log_q += row_log_q[j][tok];
            for c in 0..classes {
                let target = if c == tok { 1.0 } else { 0.0 };
                grad[[j, c]] += w * scale * (row_q[j][c] - target);
            }
        }
        loss -= w * scale * log_q;
    }
    Ok(SequenceKd {
        loss,
        grad,
        used: survivors.len(),
        dropped,
    })
}

/// Masked-LM negative log-likelihood, one logit row per masked position.
pub fn mlm_loss(student_logits: &Array2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (rows, classes) = student_logits.dim();
    if rows != targets.len() {
        return Err(Error::usage(format!(
            "{rows} logit rows for {} targets",
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::usage(format!(
            "target {t} outside {classes} classes"
        )));
    }
    let mut loss = 0.0;
    let mut grad = Array2::zeros((rows, classes));
    for (j, &tok) in targets.iter().enumerate() {
        let z = student_logits.row(j).to_vec();
        loss -= log_softmax(&z)[tok];
        for (c, q) in softmax(&z).into_iter().enumerate() {
            grad[[j, c]] = q - if c == tok { 1.0 } else { 0.0 };
        }
    }
    Ok((loss, grad))
}

/// Loss weights. The defaults are the first training stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillWeights {
    /// CTC share of the joint CTC/attention loss.
    pub alpha: f64,
    pub beta_f: f64,
    pub beta_s: f64,
    pub gamma_enc: f64,
    pub gamma_dec: f64,
}

impl DistillWeights {
    /// Training from scratch with frame-level distillation only.
    pub const STAGE1: DistillWeights = DistillWeights {
        alpha: 0.3,
        beta_f: 1.0,
        beta_s: 0.0,
        gamma_enc: 0.5,
        gamma_dec: 0.3,
    };

    /// Fine-tuning with the sequence-level term added.
    pub const STAGE2: DistillWeights = DistillWeights {
        alpha: 0.3,
        beta_f: 1.0,
        beta_s: 1.0,
        gamma_enc: 0.5,
        gamma_dec: 0.5,
    };

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("alpha", self.alpha),
            ("beta_f", self.beta_f),
            ("beta_s", self.beta_s),
            ("gamma_enc", self.gamma_enc),
            ("gamma_dec", self.gamma_dec),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::usage(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.alpha > 1.0 {
            return Err(Error::usage(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

impl Default for DistillWeights {
    fn default() -> Self {
        DistillWeights::STAGE1
    }
}

/// Joint CTC/attention loss `α L_ctc + (1 - α) L_att`.
pub fn joint_loss(ctc: f64, attention: f64, weights: &DistillWeights) -> f64 {
    weights.alpha * ctc + (1.0 - weights.alpha) * attention
}

/// `β_F L_F-KD + β_S L_S-KD`.
pub fn combined_kd_loss(frame: f64, sequence: f64, weights: &DistillWeights) -> f64 {
    weights.beta_f * frame + weights.beta_s * sequence
}

/// Gradient of [`combined_kd_loss`].
pub fn combined_kd_grad(
    frame: &Array2<f64>,
    sequence: &Array2<f64>,
    weights: &DistillWeights,
) -> Result<Array2<f64>> {
    if frame.dim() != sequence.dim() {
        return Err(Error::usage("frame and sequence gradients differ in shape"));
    }
    Ok(frame * weights.beta_f + sequence * weights.beta_s)
}

/// `L_jca + γ_enc L_KD^enc + γ_dec L_KD^dec`.
pub fn total_loss(jca: f64, encoder_kd: f64, decoder_kd: f64, weights: &DistillWeights) -> f64 {
    jca + weights.gamma_enc * encoder_kd + weights.gamma_dec * decoder_kd
}

/// Encoder-side distillation terms on CTC posteriors.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderKd {
    pub frame_loss: f64,
    pub sequence_loss: f64,
    /// `β_F` frame + `β_S` sequence.
    pub loss: f64,
    pub grad: Array2<f64>,
    /// N-best entries the student lattice cannot emit in its frame count.
    pub dropped: usize,
}

/// Encoder distillation: frame cross-entropy against the teacher lattice on
/// every frame, plus a sequence term over the N-best where both teacher
/// weights `P'` and student likelihoods come from CTC marginals.
pub fn encoder_kd_loss(
    teacher: &PosteriorLattice,
    student_logits: &Array2<f64>,
    nbest: &[TokenSequence],
    weights: &DistillWeights,
) -> Result<EncoderKd> {
    if teacher.probs().dim() != student_logits.dim() {
        return Err(Error::usage(
            "teacher lattice and student logits differ in shape",
        ));
    }
    let pair = FrameDistributionPair::all_rows(teacher.probs().clone(), student_logits.clone())?;
    let (frame_loss, frame_grad) = frame_kd_loss(&pair)?;

    let mut seq_grad = Array2::zeros(student_logits.dim());
    let mut sequence_loss = 0.0;
    let mut dropped = 0;
    let mut scored = Vec::new();
    for y in nbest {
        let lp = ctc_log_marginal(teacher, y)?;
        if lp.is_zero() {
            dropped += 1;
        } else {
            scored.push((y, lp.value()));
        }
    }
    if !scored.is_empty() {
        let w = normalize_log_scores(&scored.iter().map(|s| s.1).collect::<Vec<_>>());
        for ((y, _), wi) in scored.iter().zip(w) {
            let (nll, g) = ctc_loss_and_grad(student_logits, y, teacher.blank())?;
            sequence_loss += wi * nll;
            seq_grad = seq_grad + g * wi;
        }
    }
    Ok(EncoderKd {
        frame_loss,
        sequence_loss,
        loss: combined_kd_loss(frame_loss, sequence_loss, weights),
        grad: combined_kd_grad(&frame_grad, &seq_grad, weights)?,
        dropped,
    })
}
