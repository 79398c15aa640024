//! Desk-scale teacher/student laboratory.
//!
//! A task is a first-order Markov chain over `|U|` tokens started from its
//! stationary distribution. Its *context rule* gives the conditional of a
//! masked token from its two neighbouring slots: `A[l][y]` from an observed
//! left neighbour (the start distribution at the sequence start, the
//! stationary distribution when masked) times `A[y][r]` from an observed
//! right neighbour. The teacher is that rule sharpened by a temperature and
//! tabulated as a [`TablePredictor`]; the student is a table of trainable
//! logits over the same context keys.
//!
//! Symbol layout: tokens `0..|U|`, blank `|U|`, mask `|U| + 1`.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::{
    decoder_frame_kd_loss, joint_loss, mlm_loss, sequence_kd_loss, total_loss, DistillWeights,
    FrameDistributionPair, NBestEntry, NBestList,
};
use crate::error::{Error, Result};
use crate::lattice::PosteriorLattice;
use crate::maskctc::{
    beam_search_decode, top_b_from_distributions, ContextScheme, DecodeConfig, MaskPredictor,
    TablePredictor,
};
use crate::prob::softmax;
use crate::sequence::{MaskedSequence, Slot, TokenSequence};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    /// Regular tokens `|U|`.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Dirichlet concentration of the transition rows. Zero gives a
    /// deterministic chain (a random cyclic successor map).
    pub concentration: f64,
    /// Teacher sharpening temperature; zero gives one-hot teacher rows.
    pub temperature: f64,
    /// Probability that a weak training label is replaced by a random token.
    pub label_noise: f64,
    /// Share of tokens emitted with low CTC confidence in synthetic lattices.
    pub uncertain_rate: f64,
    /// Probability that a low-confidence frame's argmax is a wrong token.
    pub wrong_rate: f64,
    /// Per-token masking probability for training examples.
    pub mask_rate: f64,
    pub train_utterances: usize,
    pub eval_utterances: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            vocab_size: 4,
            min_len: 4,
            max_len: 8,
            concentration: 0.5,
            temperature: 1.0,
            label_noise: 0.6,
            uncertain_rate: 0.35,
            wrong_rate: 0.5,
            mask_rate: 0.35,
            train_utterances: 40,
            eval_utterances: 200,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::usage("vocab_size must be at least 2"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::usage("need 1 <= min_len <= max_len"));
        }
        let unit = [
            ("label_noise", self.label_noise),
            ("uncertain_rate", self.uncertain_rate),
            ("wrong_rate", self.wrong_rate),
            ("mask_rate", self.mask_rate),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::usage(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.concentration >= 0.0 && self.concentration.is_finite()) {
            return Err(Error::usage("concentration must be finite and >= 0"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::usage("temperature must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// Step at which stage-2 weights replace stage-1 weights.
    pub stage2_at: Option<usize>,
    /// Teacher N-best size `|Ω|`.
    pub nbest: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1.0,
            steps: 600,
            stage2_at: Some(450),
            nbest: 10,
        }
    }
}

/// Everything needed to reproduce one distillation experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub stage1: DistillWeights,
    pub stage2: DistillWeights,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            task: TaskConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            stage1: DistillWeights::STAGE1,
            stage2: DistillWeights::STAGE2,
        }
    }
}

/// A neighbouring slot as seen by the context rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Neighbor {
    Edge,
    Masked,
    Token(usize),
}

/// One synthetic utterance: a lattice and the sequence it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: u64,
    pub lattice: PosteriorLattice,
    pub truth: TokenSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub seed: u64,
    pub config: TaskConfig,
    start: Vec<f64>,
    transition: Vec<Vec<f64>>,
    vocab: Vocabulary,
}

fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

fn stationary(transition: &[Vec<f64>]) -> Vec<f64> {
    let n = transition.len();
    let mut pi = vec![1.0 / n as f64; n];
    // Lazy chain: converges for periodic chains too.
    for _ in 0..2000 {
        let mut next = vec![0.0; n];
        for (i, row) in transition.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                next[j] += 0.5 * pi[i] * a;
            }
            next[i] += 0.5 * pi[i];
        }
        pi = next;
    }
    let s: f64 = pi.iter().sum();
    pi.into_iter().map(|x| x / s).collect()
}

/// `p^(1/τ)` renormalised; `τ = 0` is the limit, uniform over the maxima.
pub fn sharpen(probs: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 0.0 {
        let best = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ties = probs.iter().filter(|p| **p == best).count() as f64;
        return probs
            .iter()
            .map(|p| if *p == best { 1.0 / ties } else { 0.0 })
            .collect();
    }
    let logs: Vec<f64> = probs
        .iter()
        .map(|p| {
            if *p > 0.0 {
                p.ln() / temperature
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    softmax(&logs)
}

impl SyntheticTask {
    pub fn new(seed: u64, config: TaskConfig) -> Result<Self> {
        config.validate()?;
        let n = config.vocab_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let transition: Vec<Vec<f64>> = if config.concentration == 0.0 {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut rows = vec![vec![0.0; n]; n];
            for i in 0..n {
                rows[order[i]][order[(i + 1) % n]] = 1.0;
            }
            rows
        } else {
            let gamma =
                Gamma::new(config.concentration, 1.0).map_err(|e| Error::usage(e.to_string()))?;
            (0..n)
                .map(|_| {
                    let w: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
                    let s: f64 = w.iter().sum();
                    if s > 0.0 {
                        w.into_iter().map(|x| x / s).collect()
                    } else {
                        let hot = rng.random_range(0..n);
                        (0..n).map(|j| if j == hot { 1.0 } else { 0.0 }).collect()
                    }
                })
                .collect()
        };
        let start = stationary(&transition);
        Ok(SyntheticTask {
            seed,
            config,
            start,
            transition,
            vocab: Vocabulary::letters(n),
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn num_tokens(&self) -> usize {
        self.config.vocab_size
    }

    pub fn blank(&self) -> usize {
        self.config.vocab_size
    }

    pub fn lattice_width(&self) -> usize {
        self.config.vocab_size + 1
    }

    /// True conditional of a masked token over `U` given its neighbours.
    pub fn true_conditional(&self, left: Neighbor, right: Neighbor) -> Vec<f64> {
        let n = self.num_tokens();
        let weights: Vec<f64> = (0..n)
            .map(|y| {
                let l = match left {
                    Neighbor::Token(t) => self.transition[t][y],
                    Neighbor::Edge | Neighbor::Masked => self.start[y],
                };
                let r = match right {
                    Neighbor::Token(t) => self.transition[y][t],
                    Neighbor::Edge | Neighbor::Masked => 1.0,
                };
                l * r
            })
            .collect();
        let s: f64 = weights.iter().sum();
        if s > 0.0 {
            weights.into_iter().map(|w| w / s).collect()
        } else {
            vec![1.0 / n as f64; n]
        }
    }

    /// Every `(key, left, right)` of the neighbour context scheme.
    pub fn context_keys(&self) -> Vec<(String, Neighbor, Neighbor)> {
        let n = self.num_tokens();
        let mut lefts = vec![
            (String::from("^"), Neighbor::Edge),
            ("_".into(), Neighbor::Masked),
        ];
        let mut rights = vec![
            (String::from("$"), Neighbor::Edge),
            ("_".into(), Neighbor::Masked),
        ];
        for t in 0..n {
            lefts.push((t.to_string(), Neighbor::Token(t)));
            rights.push((t.to_string(), Neighbor::Token(t)));
        }
        let mut out = Vec::new();
        for (lk, l) in &lefts {
            for (rk, r) in &rights {
                out.push((format!("{lk} {rk}"), *l, *r));
            }
        }
        out
    }

    fn embed(&self, dist: &[f64]) -> Vec<f64> {
        let mut row = dist.to_vec();
        row.push(0.0);
        row
    }

    /// The sharpened context rule as a neighbour-keyed table.
    pub fn teacher(&self) -> TablePredictor {
        let mut table =
            TablePredictor::uniform(self.lattice_width(), self.blank(), ContextScheme::Neighbors)
                .expect("uniform fallback is valid");
        for (key, l, r) in self.context_keys() {
            let row = sharpen(&self.true_conditional(l, r), self.config.temperature);
            table
                .insert(key, None, self.embed(&row))
                .expect("sharpened rows are distributions");
        }
        table
    }

    pub fn sample_sequence<R: Rng>(&self, rng: &mut R) -> TokenSequence {
        let len = rng.random_range(self.config.min_len..=self.config.max_len);
        let mut ids = Vec::with_capacity(len);
        let mut cur = sample_index(rng, &self.start);
        ids.push(cur);
        for _ in 1..len {
            cur = sample_index(rng, &self.transition[cur]);
            ids.push(cur);
        }
        TokenSequence::new(ids)
    }

    fn peaked_row<R: Rng>(&self, rng: &mut R, argmax: usize, confidence: f64) -> Vec<f64> {
        let width = self.lattice_width();
        let w: Vec<f64> = (0..width)
            .map(|s| {
                if s == argmax {
                    0.0
                } else {
                    rng.random_range(0.05..1.0)
                }
            })
            .collect();
        let s: f64 = w.iter().sum();
        let rest = 1.0 - confidence;
        (0..width)
            .map(|i| {
                if i == argmax {
                    confidence
                } else {
                    rest * w[i] / s
                }
            })
            .collect()
    }

    /// A lattice spelling `truth`: every token gets one or two frames and is
    /// followed by a blank frame, so greedy CTC recovers the token count.
    /// Low-confidence tokens sometimes carry a wrong argmax.
    pub fn make_lattice<R: Rng>(
        &self,
        rng: &mut R,
        truth: &TokenSequence,
        id: u64,
    ) -> PosteriorLattice {
        let n = self.num_tokens();
        let mut rows = Vec::new();
        let conf = rng.random_range(0.995..1.0);
        rows.push(self.peaked_row(rng, self.blank(), conf));
        for &tok in truth.ids() {
            let uncertain = rng.random_bool(self.config.uncertain_rate);
            let shown = if uncertain && rng.random_bool(self.config.wrong_rate) {
                (tok + rng.random_range(1..n)) % n
            } else {
                tok
            };
            for _ in 0..rng.random_range(1..=2) {
                let conf = if uncertain {
                    rng.random_range(0.55..0.95)
                } else {
                    rng.random_range(0.995..1.0)
                };
                rows.push(self.peaked_row(rng, shown, conf));
            }
            let conf = rng.random_range(0.995..1.0);
            rows.push(self.peaked_row(rng, self.blank(), conf));
        }
        PosteriorLattice::from_rows(&rows, self.blank())
            .expect("synthetic rows are normalized")
            .with_context(id)
    }

    /// `count` utterances from an independent stream keyed by `stream`.
    pub fn corpus(&self, count: usize, stream: u64) -> Vec<Utterance> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        (0..count as u64)
            .map(|id| {
                let truth = self.sample_sequence(&mut rng);
                let lattice = self.make_lattice(&mut rng, &truth, id);
                Utterance { id, lattice, truth }
            })
            .collect()
    }

    pub fn eval_set(&self) -> Vec<Utterance> {
        self.corpus(self.config.eval_utterances, 1)
    }
}

/// Builds the task, its teacher and its held-out evaluation set.
pub fn generate_task(
    seed: u64,
    config: &TaskConfig,
) -> Result<(SyntheticTask, TablePredictor, Vec<Utterance>)> {
    let task = SyntheticTask::new(seed, config.clone())?;
    let teacher = task.teacher();
    let eval = task.eval_set();
    Ok((task, teacher, eval))
}

/// Teacher N-best over the masked positions of a sequence: the top
/// assignments under the product of the teacher's per-position posteriors.
pub fn teacher_nbest<P: MaskPredictor + ?Sized>(
    teacher: &P,
    seq: &MaskedSequence,
    size: usize,
) -> Result<NBestList> {
    let positions = seq.masked_positions();
    let dists = teacher.predict(seq, 0);
    let sets = top_b_from_distributions(&positions, &dists, positions.len(), size)?;
    let entries = sets
        .into_iter()
        .map(|c| {
            let mut filled = seq.clone();
            for f in &c.fills {
                filled.fill(f.position, f.token)?;
            }
            Ok(NBestEntry {
                tokens: filled.to_tokens().expect("all masks filled"),
                log_prob: c.score.value(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    NBestList::new(entries)
}

/// One masked training sequence with its distillation targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub sequence: MaskedSequence,
    pub positions: Vec<usize>,
    /// Student table key per masked position.
    pub keys: Vec<String>,
    /// Teacher posteriors over `U`, one row per masked position.
    pub teacher_rows: Array2<f64>,
    /// Weak labels: the true tokens, each replaced by a random token with
    /// probability `label_noise`.
    pub noisy_labels: Vec<usize>,
    pub nbest: NBestList,
}

/// Samples training sequences, masks them at random and attaches teacher
/// rows, weak labels and teacher N-best lists.
pub fn training_examples(
    task: &SyntheticTask,
    teacher: &TablePredictor,
    nbest_size: usize,
) -> Result<Vec<TrainingExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    rng.set_stream(2);
    let n = task.num_tokens();
    let mut out = Vec::with_capacity(task.config.train_utterances);
    for _ in 0..task.config.train_utterances {
        let truth = task.sample_sequence(&mut rng);
        let mut slots: Vec<Slot> = truth
            .ids()
            .iter()
            .map(|&t| {
                if rng.random_bool(task.config.mask_rate) {
                    Slot::Masked
                } else {
                    Slot::Observed(t)
                }
            })
            .collect();
        if !slots.contains(&Slot::Masked) {
            let p = rng.random_range(0..slots.len());
            slots[p] = Slot::Masked;
        }
        let sequence = MaskedSequence::new(slots);
        let positions = sequence.masked_positions();
        let keys = positions
            .iter()
            .map(|&p| ContextScheme::Neighbors.key(&sequence, p))
            .collect();
        let dists = teacher.predict(&sequence, 0);
        let mut teacher_rows = Array2::zeros((positions.len(), n));
        for (j, d) in dists.iter().enumerate() {
            for c in 0..n {
                teacher_rows[[j, c]] = d[c];
            }
        }
        let noisy_labels = positions
            .iter()
            .map(|&p| {
                if rng.random_bool(task.config.label_noise) {
                    rng.random_range(0..n)
                } else {
                    truth.ids()[p]
                }
            })
            .collect();
        let nbest = teacher_nbest(teacher, &sequence, nbest_size)?;
        out.push(TrainingExample {
            sequence,
            positions,
            keys,
            teacher_rows,
            noisy_labels,
            nbest,
        });
    }
    Ok(out)
}

/// Trainable logits over `U` per neighbour context key. Unseen keys act as
/// all-zero logits (uniform).
#[derive(Clone, Debug, PartialEq)]
pub struct LogitTableStudent {
    num_tokens: usize,
    logits: BTreeMap<String, Vec<f64>>,
    pub learning_rate: f64,
    pub steps: usize,
}

impl LogitTableStudent {
    pub fn new(num_tokens: usize, learning_rate: f64) -> Self {
        LogitTableStudent {
            num_tokens,
            logits: BTreeMap::new(),
            learning_rate,
            steps: 0,
        }
    }

    pub fn logits(&self, key: &str) -> Vec<f64> {
        self.logits
            .get(key)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.num_tokens])
    }

    pub fn table(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.logits
    }

    fn rows(&self, keys: &[String]) -> Array2<f64> {
        let mut m = Array2::zeros((keys.len(), self.num_tokens));
        for (j, k) in keys.iter().enumerate() {
            for (c, z) in self.logits(k).into_iter().enumerate() {
                m[[j, c]] = z;
            }
        }
        m
    }
}

impl MaskPredictor for LogitTableStudent {
    fn num_symbols(&self) -> usize {
        self.num_tokens + 1
    }

    fn predict(&self, seq: &MaskedSequence, _context: u64) -> Vec<Vec<f64>> {
        seq.masked_positions()
            .into_iter()
            .map(|p| {
                let mut row = softmax(&self.logits(&ContextScheme::Neighbors.key(seq, p)));
                row.push(0.0);
                row
            })
            .collect()
    }
}

/// Loss components of one full-batch evaluation, averaged over examples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub stage: u8,
    /// Per-token masked-LM loss on the weak labels.
    pub mlm: f64,
    /// `α · 0 + (1 - α) · mlm`: the student has no CTC branch here.
    pub jca: f64,
    pub frame_kd: f64,
    pub seq_kd: f64,
    /// `β_F frame_kd + β_S seq_kd`.
    pub decoder_kd: f64,
    pub total: f64,
}

/// Full-batch objective and gradient per table key.
fn objective(
    student: &LogitTableStudent,
    examples: &[TrainingExample],
    weights: &DistillWeights,
) -> Result<(CurvePoint, BTreeMap<String, Vec<f64>>)> {
    let scale = 1.0 / examples.len() as f64;
    let mut mlm_sum = 0.0;
    let mut frame_sum = 0.0;
    let mut seq_sum = 0.0;
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ex in examples {
        let z = student.rows(&ex.keys);
        let m = ex.positions.len() as f64;
        let (mlm, mlm_grad) = mlm_loss(&z, &ex.noisy_labels)?;
        let rows: Vec<usize> = (0..ex.positions.len()).collect();
        let pair = FrameDistributionPair::new(ex.teacher_rows.clone(), z.clone(), rows.clone())?;
        let (frame, frame_grad) = decoder_frame_kd_loss(&pair, &rows)?;
        let seq = sequence_kd_loss(&ex.nbest, &z, &ex.positions, ex.sequence.len())?;

        mlm_sum += mlm / m;
        frame_sum += frame;
        seq_sum += seq.loss;

        let g_jca = (1.0 - weights.alpha) / m;
        let g_frame = weights.gamma_dec * weights.beta_f;
        let g_seq = weights.gamma_dec * weights.beta_s;
        for (j, key) in ex.keys.iter().enumerate() {
            let acc = grads
                .entry(key.clone())
                .or_insert_with(|| vec![0.0; student.num_tokens]);
            for (c, a) in acc.iter_mut().enumerate() {
                *a += scale
                    * (g_jca * mlm_grad[[j, c]]
                        + g_frame * frame_grad[[j, c]]
                        + g_seq * seq.grad[[j, c]]);
            }
        }
    }
    let mlm = mlm_sum * scale;
    let frame_kd = frame_sum * scale;
    let seq_kd = seq_sum * scale;
    let jca = joint_loss(0.0, mlm, weights);
    let decoder_kd = weights.beta_f * frame_kd + weights.beta_s * seq_kd;
    let point = CurvePoint {
        step: student.steps,
        stage: 1,
        mlm,
        jca,
        frame_kd,
        seq_kd,
        decoder_kd,
        total: total_loss(jca, 0.0, decoder_kd, weights),
    };
    Ok((point, grads))
}

/// Evaluates the training objective without updating the student.
pub fn evaluate_objective(
    student: &LogitTableStudent,
    examples: &[TrainingExample],
    weights: &DistillWeights,
) -> Result<CurvePoint> {
    Ok(objective(student, examples, weights)?.0)
}

/// Weight schedule: `stage1` from step 0, `stage2` from `switch_at` on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainPlan {
    pub steps: usize,
    pub stage1: DistillWeights,
    pub stage2: Option<(usize, DistillWeights)>,
}

impl TrainPlan {
    fn weights_at(&self, step: usize) -> (u8, DistillWeights) {
        match self.stage2 {
            Some((at, w)) if step >= at => (2, w),
            _ => (1, self.stage1),
        }
    }
}

/// Plain full-batch gradient descent. Records the objective before every
/// update and once after the last one.
pub fn train_student(
    student: &mut LogitTableStudent,
    examples: &[TrainingExample],
    plan: &TrainPlan,
) -> Result<Vec<CurvePoint>> {
    if examples.is_empty() {
        return Err(Error::usage("no training examples"));
    }
    if !(student.learning_rate >= 0.0 && student.learning_rate.is_finite()) {
        return Err(Error::usage("learning rate must be finite and >= 0"));
    }
    plan.stage1.validate()?;
    if let Some((_, w)) = plan.stage2 {
        w.validate()?;
    }
    let mut curve = Vec::with_capacity(plan.steps + 1);
    for step in 0..=plan.steps {
        let (stage, weights) = plan.weights_at(step);
        let (mut point, grads) = objective(student, examples, &weights)?;
        point.stage = stage;
        if !point.total.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("objective is {}", point.total),
            });
        }
        curve.push(point);
        if step == plan.steps {
            break;
        }
        for (key, g) in grads {
            let row = student
                .logits
                .entry(key)
                .or_insert_with(|| vec![0.0; g.len()]);
            for (z, gc) in row.iter_mut().zip(g) {
                *z -= student.learning_rate * gc;
            }
            if row.iter().any(|z| !z.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    detail: "non-finite logit".into(),
                });
            }
        }
        student.steps += 1;
    }
    Ok(curve)
}

/// Edit operations aligning a hypothesis to a reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn add(&mut self, other: EditCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
    }
}

/// Minimum edit distance with a substitution/deletion/insertion breakdown.
/// Backtracking prefers match or substitution, then deletion, then insertion.
pub fn edit_counts(reference: &[usize], hypothesis: &[usize]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[i][j] == d[i - 1][j - 1] + diff {
                counts.substitutions += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub reference_tokens: usize,
    pub edits: EditCounts,
    /// `(S + D + I) / reference tokens`.
    pub token_error_rate: f64,
    /// Masked positions in utterances whose decode has the reference length.
    pub masked_positions: usize,
    pub masked_errors: usize,
    pub masked_error_rate: f64,
    pub mean_log_prob: f64,
}

/// Beam-decodes every utterance with `predictor` and scores the output
/// against the reference sequences.
pub fn evaluate_student<P: MaskPredictor + ?Sized>(
    predictor: &P,
    eval: &[Utterance],
    config: &DecodeConfig,
) -> Result<EvalReport> {
    let decoded = eval
        .par_iter()
        .map(|u| beam_search_decode(&u.lattice, predictor, config))
        .collect::<Result<Vec<_>>>()?;
    let mut report = EvalReport {
        utterances: eval.len(),
        ..Default::default()
    };
    let mut log_prob = 0.0;
    for (u, out) in eval.iter().zip(&decoded) {
        report.reference_tokens += u.truth.len();
        report
            .edits
            .add(edit_counts(u.truth.ids(), out.tokens.ids()));
        log_prob += out.best.score.value();
        if out.tokens.len() == u.truth.len() {
            for p in out.initial.masked_positions() {
                report.masked_positions += 1;
                if out.tokens.ids()[p] != u.truth.ids()[p] {
                    report.masked_errors += 1;
                }
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    report.token_error_rate = ratio(report.edits.errors(), report.reference_tokens);
    report.masked_error_rate = ratio(report.masked_errors, report.masked_positions);
    report.mean_log_prob = if eval.is_empty() {
        0.0
    } else {
        log_prob / eval.len() as f64
    };
    Ok(report)
}

/// Outcome of training a distilled student and a weak-label baseline on
/// the same examples with the same budget.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub seed: u64,
    pub distilled: EvalReport,
    pub baseline: EvalReport,
    pub teacher: EvalReport,
    pub distilled_curve: Vec<CurvePoint>,
    pub baseline_curve: Vec<CurvePoint>,
}

impl ExperimentReport {
    /// `(baseline - distilled) / baseline` token error rate.
    pub fn relative_reduction(&self) -> f64 {
        let b = self.baseline.token_error_rate;
        if b == 0.0 {
            0.0
        } else {
            (b - self.distilled.token_error_rate) / b
        }
    }
}

/// Weights of the weak-label baseline: the joint loss only.
pub fn baseline_weights(stage: &DistillWeights) -> DistillWeights {
    DistillWeights {
        gamma_enc: 0.0,
        gamma_dec: 0.0,
        ..*stage
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.decode.validate()?;
    let (task, teacher, eval) = generate_task(config.seed, &config.task)?;
    let examples = training_examples(&task, &teacher, config.train.nbest)?;

    let stage2 = config.train.stage2_at.map(|at| (at, config.stage2));
    let plan = TrainPlan {
        steps: config.train.steps,
        stage1: config.stage1,
        stage2,
    };
    let baseline_plan = TrainPlan {
        steps: config.train.steps,
        stage1: baseline_weights(&config.stage1),
        stage2: stage2.map(|(at, w)| (at, baseline_weights(&w))),
    };

    let mut distilled = LogitTableStudent::new(task.num_tokens(), config.train.learning_rate);
    let distilled_curve = train_student(&mut distilled, &examples, &plan)?;
    let mut baseline = LogitTableStudent::new(task.num_tokens(), config.train.learning_rate);
    let baseline_curve = train_student(&mut baseline, &examples, &baseline_plan)?;

    Ok(ExperimentReport {
        seed: config.seed,
        distilled: evaluate_student(&distilled, &eval, &config.decode)?,
        baseline: evaluate_student(&baseline, &eval, &config.decode)?,
        teacher: evaluate_student(&teacher, &eval, &config.decode)?,
        distilled_curve,
        baseline_curve,
    })
}
