use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{OraclePanelist, Panelist, PanelistError, PanelistModel, TrainedPanelist};
use crate::kgsynth::KnowledgeGraph;
use crate::numerics::OptimizerConfig;
use crate::taskgen::{tokenize, QAExample};

/// A filled simple question and the answer its panelist should give.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LabeledQuestion {
    pub text: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    /// Extra questions whose slot has the wrong entity kind, relative to the
    /// number of dataset sub-questions. They stand in for malformed turns.
    pub wrong_kind_ratio: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { wrong_kind_ratio: 0.25, seed: 0 }
    }
}

/// Distinct sub-questions of the examples' decompositions, labeled with the
/// panelist's answer. With `own_only`, questions for other shards are dropped.
pub fn subquestions(oracle: &OraclePanelist, examples: &[QAExample], own_only: bool) -> Vec<LabeledQuestion> {
    let catalog = oracle.catalog();
    let mut seen = BTreeSet::new();
    for x in examples {
        for d in &x.decomposition {
            let Some(t) = catalog.simple_by_id(&d.template_id) else {
                continue;
            };
            if !own_only || t.step().shard() == oracle.shard() {
                seen.insert(t.fill(&d.slot));
            }
        }
    }
    seen.into_iter().map(|text| LabeledQuestion { answer: oracle.answer(&text), text }).collect()
}

/// Pretraining questions for one panelist: every sub-question the training
/// examples broadcast (own ones with their answer, the rest UNK), plus
/// sampled wrong-kind questions labeled UNK. Shuffled.
pub fn build_corpus(
    oracle: &OraclePanelist,
    examples: &[QAExample],
    union: &KnowledgeGraph,
    cfg: &CorpusConfig,
) -> Result<Vec<LabeledQuestion>, PanelistError> {
    if !(cfg.wrong_kind_ratio >= 0.0) {
        return Err(PanelistError::Invalid(format!("corpus config out of range: {cfg:?}")));
    }
    let mut corpus = subquestions(oracle, examples, false);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let entities: Vec<_> = union.entities().collect();
    let templates = &oracle.catalog().simple;
    let wanted = (corpus.len() as f64 * cfg.wrong_kind_ratio).round() as usize;
    let mut extra = BTreeSet::new();
    if !templates.is_empty() && !entities.is_empty() {
        for _ in 0..wanted.saturating_mul(20) {
            if extra.len() == wanted {
                break;
            }
            let t = &templates[rng.gen_range(0..templates.len())];
            let e = entities[rng.gen_range(0..entities.len())];
            if e.kind != t.step().from_kind() {
                extra.insert(t.fill(&e.surface));
            }
        }
    }
    corpus.extend(extra.into_iter().map(|text| LabeledQuestion { answer: oracle.answer(&text), text }));
    corpus.shuffle(&mut rng);
    Ok(corpus)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stop after this many epochs without a new best dev accuracy.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch_size: 128, learning_rate: 3e-3, patience: Some(15), seed: 0 }
    }
}

impl PretrainConfig {
    pub fn paper_scale() -> Self {
        Self { epochs: 1000, batch_size: 500, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy on the batches as they were trained, before each update.
    pub train_accuracy: f64,
    pub dev_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub epochs_run: usize,
    /// Epoch whose parameters were kept (0 = initialization).
    pub best_epoch: usize,
    pub dev_accuracy: f64,
    pub history: Vec<EpochStats>,
}

fn encode_corpus(model: &PanelistModel, data: &[LabeledQuestion]) -> Result<Vec<(Vec<usize>, usize)>, PanelistError> {
    data.iter()
        .map(|x| {
            let rows = model.token_rows(&tokenize(&x.text))?;
            let node = model
                .node_of(&x.answer)
                .ok_or_else(|| PanelistError::Invalid(format!("answer `{}` is not a node of this shard", x.answer)))?;
            Ok((rows, node))
        })
        .collect()
}

/// Fraction of questions answered exactly as labeled.
pub fn evaluate_accuracy(model: &PanelistModel, data: &[LabeledQuestion]) -> Result<f64, PanelistError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let frozen = TrainedPanelist::freeze(model.clone())?;
    let mut correct = 0;
    for chunk in data.chunks(512) {
        let qs: Vec<&str> = chunk.iter().map(|x| x.text.as_str()).collect();
        let answers = frozen.answer_batch(&qs);
        correct += chunk.iter().zip(&answers).filter(|(x, a)| x.answer == **a).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Supervised cross-entropy training over all candidate nodes with Adam.
///
/// The parameters with the best dev accuracy are kept. Training stops early
/// once an epoch fits every training question or dev accuracy stalls.
pub fn pretrain(
    model: &mut PanelistModel,
    train: &[LabeledQuestion],
    dev: &[LabeledQuestion],
    cfg: &PretrainConfig,
) -> Result<PretrainReport, PanelistError> {
    if cfg.batch_size == 0 {
        return Err(PanelistError::Invalid("batch size 0".into()));
    }
    let opt = OptimizerConfig::with_learning_rate(cfg.learning_rate);
    let encoded = encode_corpus(model, train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut history = Vec::new();
    let mut best = (evaluate_accuracy(model, dev)?, 0, model.store.clone());
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let rows: Vec<Vec<usize>> = batch.iter().map(|&i| encoded[i].0.clone()).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| encoded[i].1).collect();
            let (tape, loss, probs) = model.loss_on_tape(&model.store, &rows, &targets)?;
            let l = tape.value(loss).data()[0];
            if !l.is_finite() {
                return Err(PanelistError::Divergence { epoch, loss: l });
            }
            loss_sum += l * batch.len() as f64;
            correct += targets.iter().enumerate().filter(|(i, &t)| super::argmax(probs.row_slice(*i)) == t).count();
            let grads = tape.backward(loss)?;
            model.store.adam_step(&grads, &opt)?;
        }
        let n = encoded.len().max(1) as f64;
        let stats = EpochStats {
            epoch,
            loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            dev_accuracy: evaluate_accuracy(model, dev)?,
        };
        if stats.dev_accuracy > best.0 {
            best = (stats.dev_accuracy, epoch, model.store.clone());
        }
        let fitted = stats.train_accuracy >= 1.0;
        history.push(stats);
        if fitted || cfg.patience.is_some_and(|p| epoch - best.1 >= p) {
            break;
        }
    }
    let (dev_accuracy, best_epoch, store) = best;
    model.store = store;
    Ok(PretrainReport { epochs_run: history.len(), best_epoch, dev_accuracy, history })
}
