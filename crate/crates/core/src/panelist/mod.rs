//! Panelist agents: one per knowledge-graph shard.
//!
//! A trained panelist encodes its graph with a one-layer relational graph
//! network, encodes the incoming sub-question with a bidirectional LSTM and
//! scores every node (plus a dedicated UNK node) bilinearly. The oracle
//! variant answers by exact lookup.

mod oracle;
mod train;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::kgsynth::{EntityId, KnowledgeGraph, Relation};
use crate::numerics::{
    encode_sequences, glorot, load_checkpoint, save_checkpoint, uniform, BiLstmNames, NumericsError, ParameterStore,
    Tape, Tensor, Var,
};
use crate::taskgen::{tokenize, Vocabulary, UNK};

pub use oracle::OraclePanelist;
pub use train::{
    build_corpus, evaluate_accuracy, pretrain, subquestions, CorpusConfig, EpochStats, LabeledQuestion, PretrainConfig,
    PretrainReport,
};

pub const EMBED_DIM: usize = 40;
pub const LSTM_HIDDEN: usize = 40;
pub const GRAPH_HIDDEN: usize = 80;
/// Embedding tables start uniform in `[-1, 1]`.
const EMBED_INIT: f64 = 1.0;

pub(crate) const NODE_EMB: &str = "node.emb";
pub(crate) const WORD_EMB: &str = "word.emb";
pub(crate) const REL_EMB: &str = "rel.emb";
pub(crate) const GNN_W: &str = "gnn.w";
pub(crate) const GNN_B: &str = "gnn.b";
pub(crate) const SELECT_W: &str = "select.w";
const QUESTION: &str = "question";

#[derive(Debug, thiserror::Error)]
pub enum PanelistError {
    #[error("token `{0}` is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("graph entity `{0}` is not in the vocabulary")]
    MissingEntity(String),
    #[error("checkpoint does not match: {0}")]
    Mismatch(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Anything that can be asked a sub-question.
pub trait Panelist: Send + Sync {
    /// Index of the shard this panelist owns (1-based).
    fn shard(&self) -> usize;
    /// An entity surface, or [`UNK`].
    fn answer(&self, question: &str) -> String;
    fn answer_all(&self, questions: &[&str]) -> Vec<String> {
        questions.iter().map(|q| self.answer(q)).collect()
    }
}

/// One response collected after a broadcast.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Utterance {
    pub speaker: usize,
    pub text: String,
}

impl Utterance {
    pub fn is_unk(&self) -> bool {
        self.text == UNK
    }
}

/// Final node representations, one row per node in model order.
#[derive(Clone, Debug)]
pub struct GraphEncoding {
    pub h: Tensor,
    pub nodes: Vec<String>,
}

/// Message list of the graph network: incoming edges, their inverses and a
/// self-loop per node.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub(crate) struct Messages {
    pub target: Vec<usize>,
    pub relation: Vec<usize>,
    pub source: Vec<usize>,
}

/// Structure and parameters of one panelist.
///
/// Nodes are the shard's entities in id order followed by the UNK node.
/// Token embeddings of entity surfaces are the node embeddings themselves;
/// every other vocabulary token has its own row.
#[derive(Clone, Debug)]
pub struct PanelistModel {
    shard: usize,
    node_ids: Vec<EntityId>,
    nodes: Vec<String>,
    node_index: HashMap<String, usize>,
    relation_types: Vec<String>,
    messages: Messages,
    vocab: Vocabulary,
    token_rows: Vec<usize>,
    pub store: ParameterStore,
}

fn bilstm() -> BiLstmNames {
    BiLstmNames::new(QUESTION)
}

fn relation_types(schema: &[Relation]) -> Vec<String> {
    let mut out: Vec<String> = schema.iter().map(|r| r.to_string()).collect();
    out.extend(schema.iter().map(|r| format!("{r}^-1")));
    out.push("self".into());
    out
}

impl PanelistModel {
    /// Fresh randomly initialized model for `kg` over `vocab`.
    pub fn new<R: Rng>(kg: &KnowledgeGraph, vocab: &Vocabulary, rng: &mut R) -> Result<Self, PanelistError> {
        let mut model = Self::structure(kg, vocab)?;
        let n_words = model.token_rows.iter().filter(|&&r| r > model.unk_node()).count().max(1);
        let n_rel = model.relation_types.len();
        let s = &mut model.store;
        s.insert(NODE_EMB, uniform(&[model.nodes.len(), EMBED_DIM], EMBED_INIT, rng))?;
        s.insert(WORD_EMB, uniform(&[n_words, EMBED_DIM], EMBED_INIT, rng))?;
        s.insert(REL_EMB, uniform(&[n_rel, EMBED_DIM], EMBED_INIT, rng))?;
        s.insert(GNN_W, glorot(3 * EMBED_DIM, GRAPH_HIDDEN, rng))?;
        s.insert(GNN_B, Tensor::vector(vec![0.0; GRAPH_HIDDEN]))?;
        bilstm().init(s, EMBED_DIM, LSTM_HIDDEN, rng)?;
        s.insert(SELECT_W, glorot(GRAPH_HIDDEN, 2 * LSTM_HIDDEN, rng))?;
        Ok(model)
    }

    /// Node order, message list and token map, with an empty store.
    fn structure(kg: &KnowledgeGraph, vocab: &Vocabulary) -> Result<Self, PanelistError> {
        let mut ents: Vec<_> = kg.entities().collect();
        ents.sort_by_key(|e| e.id);
        let node_ids: Vec<EntityId> = ents.iter().map(|e| e.id).collect();
        let mut nodes: Vec<String> = ents.iter().map(|e| e.surface.clone()).collect();
        nodes.push(UNK.to_string());
        let node_index: HashMap<String, usize> =
            nodes.iter().enumerate().take(node_ids.len()).map(|(i, s)| (s.clone(), i)).collect();
        let by_id: HashMap<EntityId, usize> = node_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

        let schema = Relation::schema(kg.owner());
        let rel_pos: HashMap<Relation, usize> = schema.iter().enumerate().map(|(i, &r)| (r, i)).collect();
        let relation_types = relation_types(&schema);
        let self_loop = relation_types.len() - 1;
        let mut messages = Messages::default();
        for t in kg.triples() {
            let r = rel_pos[&t.relation];
            let (h, tl) = (by_id[&t.head], by_id[&t.tail]);
            messages.target.push(tl);
            messages.relation.push(r);
            messages.source.push(h);
            messages.target.push(h);
            messages.relation.push(schema.len() + r);
            messages.source.push(tl);
        }
        for v in 0..nodes.len() {
            messages.target.push(v);
            messages.relation.push(self_loop);
            messages.source.push(v);
        }

        for s in &nodes[..node_ids.len()] {
            if vocab.id(s).is_none() {
                return Err(PanelistError::MissingEntity(s.clone()));
            }
        }
        let unk_node = nodes.len() - 1;
        let mut next_word = nodes.len();
        let token_rows = vocab
            .tokens()
            .iter()
            .map(|t| match node_index.get(t) {
                Some(&i) => i,
                None => {
                    next_word += 1;
                    next_word - 1
                }
            })
            .collect();
        debug_assert_eq!(unk_node + 1, nodes.len());
        Ok(Self {
            shard: kg.owner(),
            node_ids,
            nodes,
            node_index,
            relation_types,
            messages,
            vocab: vocab.clone(),
            token_rows,
            store: ParameterStore::new(),
        })
    }

    pub fn shard(&self) -> usize {
        self.shard
    }

    /// Node surfaces in model order; the last one is UNK.
    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn unk_node(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn node_of(&self, surface: &str) -> Option<usize> {
        if surface == UNK {
            Some(self.unk_node())
        } else {
            self.node_index.get(surface).copied()
        }
    }

    pub fn relation_types(&self) -> &[String] {
        &self.relation_types
    }

    pub fn message_count(&self) -> usize {
        self.messages.target.len()
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Hash of the node order: entity ids and surfaces.
    pub fn node_hash(&self) -> String {
        let mut h = Sha256::new();
        for (id, s) in self.node_ids.iter().zip(&self.nodes) {
            h.update(format!("{id}\t{s}\n").as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Rows of the combined embedding table for a token sequence.
    pub fn token_rows<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>, PanelistError> {
        let ids = self.vocab.encode(tokens).map_err(PanelistError::OutOfVocabulary)?;
        Ok(ids.into_iter().map(|i| self.token_rows[i]).collect())
    }

    /// Node embedding table and final node representations on `tape`.
    pub(crate) fn graph_on_tape(&self, tape: &mut Tape, store: &ParameterStore) -> Result<(Var, Var), NumericsError> {
        let emb = tape.param(store, NODE_EMB)?;
        let rel = tape.param(store, REL_EMB)?;
        let w = tape.param(store, GNN_W)?;
        let b = tape.param(store, GNN_B)?;
        let d = EMBED_DIM;
        let w_node = tape.slice_rows(w, 0, d)?;
        let w_rel = tape.slice_rows(w, d, 2 * d)?;
        let w_nbr = tape.slice_rows(w, 2 * d, 3 * d)?;
        // The affine map of a concatenation splits into one product per part,
        // so each part is projected once per node or relation and then gathered.
        let p_node = tape.matmul(emb, w_node)?;
        let p_nbr = tape.matmul(emb, w_nbr)?;
        let p_rel = tape.affine(rel, w_rel, b)?;
        let m = &self.messages;
        let a = tape.gather_rows(p_node, m.target.clone())?;
        let r = tape.gather_rows(p_rel, m.relation.clone())?;
        let u = tape.gather_rows(p_nbr, m.source.clone())?;
        let ar = tape.add(a, r)?;
        let pre = tape.add(ar, u)?;
        let msg = tape.relu(pre);
        let mean = tape.segment_mean(msg, m.target.clone(), self.nodes.len())?;
        Ok((emb, tape.relu(mean)))
    }

    /// Question vectors `[B × 80]` for sequences of table rows.
    pub(crate) fn questions_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        node_emb: Var,
        rows: &[Vec<usize>],
    ) -> Result<Var, NumericsError> {
        let words = tape.param(store, WORD_EMB)?;
        let table = tape.concat_rows(&[node_emb, words])?;
        let (fw, bw) = bilstm().bind(tape, store)?;
        encode_sequences(tape, table, rows, fw, bw)
    }

    /// Scores `[B × nodes]`: `α = H W q` for every question row.
    pub(crate) fn scores_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        h: Var,
        q: Var,
    ) -> Result<Var, NumericsError> {
        let w = tape.param(store, SELECT_W)?;
        let hw = tape.matmul(h, w)?;
        tape.matmul_nt(q, hw)
    }

    /// Mean cross-entropy of a batch of (token rows, gold node) pairs.
    pub fn loss_on_tape(
        &self,
        store: &ParameterStore,
        rows: &[Vec<usize>],
        targets: &[usize],
    ) -> Result<(Tape, Var, Tensor), NumericsError> {
        let mut tape = Tape::new();
        let (emb, h) = self.graph_on_tape(&mut tape, store)?;
        let q = self.questions_on_tape(&mut tape, store, emb, rows)?;
        let s = self.scores_on_tape(&mut tape, store, h, q)?;
        let (loss, probs) = tape.softmax_cross_entropy(s, targets)?;
        Ok((tape, loss, probs))
    }

    pub fn encode_graph(&self) -> Result<GraphEncoding, PanelistError> {
        let mut tape = Tape::new();
        let (_, h) = self.graph_on_tape(&mut tape, &self.store)?;
        Ok(GraphEncoding { h: tape.value(h).clone(), nodes: self.nodes.clone() })
    }

    /// Final forward and backward hidden states, concatenated.
    pub fn encode_question<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<f64>, PanelistError> {
        let rows = self.token_rows(tokens)?;
        let mut tape = Tape::new();
        let emb = tape.param(&self.store, NODE_EMB)?;
        let q = self.questions_on_tape(&mut tape, &self.store, emb, &[rows])?;
        Ok(tape.value(q).data().to_vec())
    }

    /// Scores of every node for question vector `q` and the winning node.
    pub fn select_node(&self, enc: &GraphEncoding, q: &[f64]) -> Result<(Vec<f64>, usize), PanelistError> {
        let w = self.store.get(SELECT_W).ok_or_else(|| NumericsError::UnknownParameter(SELECT_W.into()))?;
        select_node(&enc.h, w, q)
    }

    /// Answers with fresh encodings; see [`TrainedPanelist`] for repeated use.
    pub fn answer(&self, question: &str) -> String {
        TrainedPanelist::freeze(self.clone()).map(|p| p.answer(question)).unwrap_or_else(|_| UNK.into())
    }

    fn header(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("kind".to_string(), "panelist".to_string()),
            ("shard".to_string(), self.shard.to_string()),
            ("vocab".to_string(), self.vocab.hash()),
            ("nodes".to_string(), self.node_hash()),
        ])
    }

    pub fn save(&self, prefix: &Path) -> Result<(), PanelistError> {
        Ok(save_checkpoint(prefix, &self.header(), &self.store)?)
    }

    /// Loads parameters saved for the same shard, vocabulary and node order.
    pub fn load(prefix: &Path, kg: &KnowledgeGraph, vocab: &Vocabulary) -> Result<Self, PanelistError> {
        let mut model = Self::structure(kg, vocab)?;
        let (header, store) = load_checkpoint(prefix)?;
        for (k, want) in model.header() {
            match header.get(&k) {
                Some(got) if *got == want => {}
                Some(got) => {
                    return Err(PanelistError::Mismatch(format!("{k}: checkpoint has {got}, graph has {want}")))
                }
                None => return Err(PanelistError::Mismatch(format!("header lacks `{k}`"))),
            }
        }
        let expected = [NODE_EMB, WORD_EMB, REL_EMB, GNN_W, GNN_B, SELECT_W];
        if let Some(missing) = expected.iter().find(|n| store.get(n).is_none()) {
            return Err(PanelistError::Mismatch(format!("tensor `{missing}` absent")));
        }
        model.store = store;
        Ok(model)
    }
}

/// `α = H W q` and its argmax; ties go to the lowest node index.
pub fn select_node(h: &Tensor, w: &Tensor, q: &[f64]) -> Result<(Vec<f64>, usize), PanelistError> {
    if h.cols() != w.rows() || w.cols() != q.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "select_node",
            left: h.shape().to_vec(),
            right: w.shape().to_vec(),
        }
        .into());
    }
    let wq: Vec<f64> = (0..w.rows()).map(|i| w.row_slice(i).iter().zip(q).map(|(a, b)| a * b).sum()).collect();
    let scores: Vec<f64> = (0..h.rows()).map(|v| h.row_slice(v).iter().zip(&wq).map(|(a, b)| a * b).sum()).collect();
    Ok((scores.clone(), argmax(&scores)))
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// A frozen model with its graph encoding computed once and answers memoized.
pub struct TrainedPanelist {
    model: PanelistModel,
    hw: Tensor,
    table: Tensor,
    memo: Mutex<HashMap<String, String>>,
}

impl TrainedPanelist {
    pub fn freeze(model: PanelistModel) -> Result<Self, PanelistError> {
        let mut tape = Tape::new();
        let (emb, h) = model.graph_on_tape(&mut tape, &model.store)?;
        let w = tape.param(&model.store, SELECT_W)?;
        let hw = tape.matmul(h, w)?;
        let words = tape.param(&model.store, WORD_EMB)?;
        let table = tape.concat_rows(&[emb, words])?;
        Ok(Self {
            hw: tape.value(hw).clone(),
            table: tape.value(table).clone(),
            model,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn model(&self) -> &PanelistModel {
        &self.model
    }

    /// Answers a batch in one pass, consulting and filling the memo.
    pub fn answer_batch(&self, questions: &[&str]) -> Vec<String> {
        let mut out: Vec<Option<String>> = {
            let memo = self.memo.lock().expect("memo lock");
            questions.iter().map(|q| memo.get(*q).cloned()).collect()
        };
        let mut todo = Vec::new();
        let mut rows = Vec::new();
        for (i, q) in questions.iter().enumerate() {
            if out[i].is_some() {
                continue;
            }
            match self.model.token_rows(&tokenize(q)) {
                Ok(r) if !r.is_empty() => {
                    todo.push(i);
                    rows.push(r);
                }
                _ => out[i] = Some(UNK.to_string()),
            }
        }
        if !rows.is_empty() {
            let picks = self.pick(&rows).unwrap_or_else(|_| vec![self.model.unk_node(); rows.len()]);
            let mut memo = self.memo.lock().expect("memo lock");
            for (&i, node) in todo.iter().zip(picks) {
                let a = self.model.nodes[node].clone();
                memo.insert(questions[i].to_string(), a.clone());
                out[i] = Some(a);
            }
        }
        out.into_iter().map(|a| a.expect("every question answered")).collect()
    }

    fn pick(&self, rows: &[Vec<usize>]) -> Result<Vec<usize>, NumericsError> {
        let mut tape = Tape::new();
        let table = tape.constant(self.table.clone());
        let (fw, bw) = bilstm().bind(&mut tape, &self.model.store)?;
        let q = encode_sequences(&mut tape, table, rows, fw, bw)?;
        let hw = tape.constant(self.hw.clone());
        let s = tape.matmul_nt(q, hw)?;
        let s = tape.value(s);
        Ok((0..s.rows()).map(|i| argmax(s.row_slice(i))).collect())
    }
}

impl Panelist for TrainedPanelist {
    fn shard(&self) -> usize {
        self.model.shard
    }

    fn answer(&self, question: &str) -> String {
        self.answer_batch(&[question]).pop().expect("one answer")
    }

    fn answer_all(&self, questions: &[&str]) -> Vec<String> {
        self.answer_batch(questions)
    }
}
