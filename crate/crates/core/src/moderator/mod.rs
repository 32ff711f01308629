//! The moderator's collaboration policy.
//!
//! The dialog history is a token sequence encoded by a bidirectional LSTM;
//! one affine layer maps the final states to a distribution over the simple
//! templates (plus a terminate action in baseline mode). Training is
//! REINFORCE with an entropy hinge.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::numerics::{
    encode_sequences, glorot, load_checkpoint, save_checkpoint, uniform, BiLstmNames, NumericsError, OptimizerConfig,
    ParameterStore, Tape, Tensor, Var,
};
use crate::panelist::Utterance;
use crate::taskgen::{tokenize, Catalog, SimpleTemplate, Vocabulary, UNK};

pub const EMBED_DIM: usize = 40;
pub const LSTM_HIDDEN: usize = 40;
pub const STATE_DIM: usize = 2 * LSTM_HIDDEN;
const EMBED_INIT: f64 = 1.0;

const TOKEN_EMB: &str = "token.emb";
const HISTORY: &str = "history";
const POLICY_W: &str = "policy.w";
const POLICY_B: &str = "policy.b";

#[derive(Debug, thiserror::Error)]
pub enum ModeratorError {
    #[error("token `{0}` is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("checkpoint does not match: {0}")]
    Mismatch(String),
    #[error("policy update diverged: loss {0}")]
    Divergence(f64),
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Reward scheme, which also fixes the action space and episode length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// ±1 on the final answer; the moderator decides when to stop.
    Baseline,
    /// Fixed episode length and a penalty for turns without exactly one answer.
    Enhanced,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Enhanced => "enhanced",
        })
    }
}

impl FromStr for Mode {
    type Err = ModeratorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "enhanced" => Ok(Mode::Enhanced),
            other => Err(ModeratorError::Invalid(format!("unknown mode `{other}`"))),
        }
    }
}

/// Simple-template ids in catalog order, then terminate if present.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionSpace {
    pub templates: Vec<String>,
    pub terminate: bool,
}

impl ActionSpace {
    pub fn new(catalog: &Catalog, mode: Mode) -> Self {
        Self { templates: catalog.simple.iter().map(|t| t.id.clone()).collect(), terminate: mode == Mode::Baseline }
    }

    pub fn len(&self) -> usize {
        self.templates.len() + usize::from(self.terminate)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn terminate_action(&self) -> Option<usize> {
        self.terminate.then_some(self.templates.len())
    }

    pub fn is_terminate(&self, action: usize) -> bool {
        self.terminate_action() == Some(action)
    }

    pub fn template(&self, action: usize) -> Option<&str> {
        self.templates.get(action).map(String::as_str)
    }

    pub fn index_of(&self, template_id: &str) -> Option<usize> {
        self.templates.iter().position(|t| t == template_id)
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.templates {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.update([u8::from(self.terminate)]);
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardConfig {
    pub mode: Mode,
    /// Added to −1 when some turn did not get exactly one non-UNK answer.
    pub beta: f64,
    pub t_max: usize,
    /// Entropy below this is penalized.
    pub entropy_threshold: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { mode: Mode::Enhanced, beta: -0.2, t_max: 4, entropy_threshold: 0.1 }
    }
}

impl RewardConfig {
    pub fn with_mode(mode: Mode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ModeratorError> {
        if !(self.beta < 0.0) || !(self.entropy_threshold >= 0.0) || self.t_max == 0 {
            return Err(ModeratorError::Invalid(format!("reward config out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Dialog history as the moderator sees it, plus the current-entity register.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogState {
    pub tokens: Vec<String>,
    pub register: String,
    pub turn: usize,
}

impl DialogState {
    pub fn new(question: &str, anchor: &str) -> Self {
        let mut tokens = vec!["<q>".to_string()];
        tokens.extend(tokenize(question));
        Self { tokens, register: anchor.to_string(), turn: 0 }
    }

    /// Appends one broadcast and its responses. The register takes the
    /// answer when exactly one panelist gave a non-UNK one; returns whether
    /// that was the case.
    pub fn record_turn(&mut self, sub_question: &str, utterances: &[Utterance]) -> bool {
        self.tokens.push("<ask>".to_string());
        self.tokens.extend(tokenize(sub_question));
        for u in utterances {
            self.tokens.push(format!("<p{}>", u.speaker));
            self.tokens.push(u.text.clone());
        }
        self.turn += 1;
        match unique_answer(utterances) {
            Some(a) => {
                self.register = a.to_string();
                true
            }
            None => false,
        }
    }
}

/// The single non-UNK utterance of a turn, if there is exactly one.
pub fn unique_answer(utterances: &[Utterance]) -> Option<&str> {
    let mut known = utterances.iter().filter(|u| u.text != UNK);
    match (known.next(), known.next()) {
        (Some(u), None) => Some(u.text.as_str()),
        _ => None,
    }
}

pub fn fill_template(template: &SimpleTemplate, register: &str) -> String {
    template.fill(register)
}

/// Scalar episode reward.
///
/// Baseline: +1 for the right final answer, else −1. Enhanced: −1 + β if any
/// turn lacked a unique answer, otherwise ±1 as in baseline.
pub fn compute_reward(correct: bool, all_turns_well_formed: bool, cfg: &RewardConfig) -> f64 {
    match (cfg.mode, correct, all_turns_well_formed) {
        (Mode::Enhanced, _, false) => -1.0 + cfg.beta,
        (_, true, _) => 1.0,
        (_, false, _) => -1.0,
    }
}

/// Sampled (or argmax) action. Ties in argmax go to the lowest index.
pub fn act<R: Rng>(probs: &[f64], rng: &mut R, greedy: bool) -> usize {
    if greedy {
        return crate::panelist::argmax(probs);
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// One sampled trajectory as the update needs it.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSample {
    /// History tokens before each action.
    pub states: Vec<Vec<String>>,
    pub actions: Vec<usize>,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateStats {
    pub loss: f64,
    pub mean_entropy: f64,
}

#[derive(Clone, Debug)]
pub struct ModeratorModel {
    mode: Mode,
    actions: ActionSpace,
    vocab: Vocabulary,
    pub store: ParameterStore,
}

fn bilstm() -> BiLstmNames {
    BiLstmNames::new(HISTORY)
}

impl ModeratorModel {
    pub fn new<R: Rng>(catalog: &Catalog, vocab: &Vocabulary, mode: Mode, rng: &mut R) -> Result<Self, ModeratorError> {
        let actions = ActionSpace::new(catalog, mode);
        let mut store = ParameterStore::new();
        store.insert(TOKEN_EMB, uniform(&[vocab.len(), EMBED_DIM], EMBED_INIT, rng))?;
        bilstm().init(&mut store, EMBED_DIM, LSTM_HIDDEN, rng)?;
        store.insert(POLICY_W, glorot(STATE_DIM, actions.len(), rng))?;
        store.insert(POLICY_B, Tensor::vector(vec![0.0; actions.len()]))?;
        Ok(Self { mode, actions, vocab: vocab.clone(), store })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn actions(&self) -> &ActionSpace {
        &self.actions
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>, ModeratorError> {
        self.vocab.encode(tokens).map_err(ModeratorError::OutOfVocabulary)
    }

    fn states_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        seqs: &[Vec<usize>],
    ) -> Result<Var, NumericsError> {
        let emb = tape.param(store, TOKEN_EMB)?;
        let (fw, bw) = bilstm().bind(tape, store)?;
        encode_sequences(tape, emb, seqs, fw, bw)
    }

    fn log_policy_on_tape(&self, tape: &mut Tape, store: &ParameterStore, s: Var) -> Result<Var, NumericsError> {
        let w = tape.param(store, POLICY_W)?;
        let b = tape.param(store, POLICY_B)?;
        let logits = tape.affine(s, w, b)?;
        Ok(tape.log_softmax(logits))
    }

    pub fn encode_state<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<f64>, ModeratorError> {
        let ids = self.encode_tokens(tokens)?;
        let mut tape = Tape::new();
        let s = self.states_on_tape(&mut tape, &self.store, &[ids])?;
        Ok(tape.value(s).data().to_vec())
    }

    /// Action distribution for an encoded state.
    pub fn policy(&self, state: &[f64]) -> Result<Vec<f64>, ModeratorError> {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::row(state.to_vec()));
        let logp = self.log_policy_on_tape(&mut tape, &self.store, s)?;
        Ok(tape.value(logp).data().iter().map(|v| v.exp()).collect())
    }

    /// Action distributions for a batch of histories, one row each.
    pub fn policies<S: AsRef<str>>(&self, histories: &[Vec<S>]) -> Result<Tensor, ModeratorError> {
        let seqs = histories.iter().map(|h| self.encode_tokens(h)).collect::<Result<Vec<_>, _>>()?;
        let mut tape = Tape::new();
        let s = self.states_on_tape(&mut tape, &self.store, &seqs)?;
        let logp = self.log_policy_on_tape(&mut tape, &self.store, s)?;
        let lp = tape.value(logp);
        Ok(Tensor::new(lp.shape().to_vec(), lp.data().iter().map(|v| v.exp()).collect())?)
    }

    /// The policy-gradient loss with entropy hinge, averaged over `episodes`.
    ///
    /// Row `i` of `seqs` is a visited state, `actions[i]` the action taken
    /// there and `rewards[i]` the reward of its episode. Returns the tape,
    /// the loss node and the per-state entropies.
    pub fn loss_on_tape(
        &self,
        store: &ParameterStore,
        seqs: &[Vec<usize>],
        actions: &[usize],
        rewards: &[f64],
        episodes: usize,
        entropy_threshold: f64,
    ) -> Result<(Tape, Var, Vec<f64>), NumericsError> {
        if rewards.len() != seqs.len() || episodes == 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "{} states, {} rewards, {episodes} episodes",
                seqs.len(),
                rewards.len()
            )));
        }
        let mut tape = Tape::new();
        let s = self.states_on_tape(&mut tape, store, seqs)?;
        let logp = self.log_policy_on_tape(&mut tape, store, s)?;
        let picked = tape.pick_cols(logp, actions.to_vec())?;
        let neg_r = tape.constant(Tensor::matrix(rewards.len(), 1, rewards.iter().map(|r| -r).collect())?);
        let pg = tape.mul(picked, neg_r)?;
        let pg = tape.sum(pg);
        let p = tape.exp(logp);
        let plogp = tape.mul(p, logp)?;
        let neg_h = tape.sum_rows(plogp);
        let entropies = tape.value(neg_h).data().iter().map(|v| -v).collect();
        let gap = tape.add_scalar(neg_h, entropy_threshold);
        let hinge = tape.relu(gap);
        let hinge = tape.sum(hinge);
        let total = tape.add(pg, hinge)?;
        let loss = tape.scale(total, 1.0 / episodes as f64);
        Ok((tape, loss, entropies))
    }

    /// One Adam step on a batch of sampled episodes.
    pub fn reinforce_update(
        &mut self,
        batch: &[EpisodeSample],
        cfg: &RewardConfig,
        opt: &OptimizerConfig,
    ) -> Result<UpdateStats, ModeratorError> {
        if batch.is_empty() {
            return Err(ModeratorError::Invalid("empty episode batch".into()));
        }
        let (mut seqs, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
        for e in batch {
            if e.states.len() != e.actions.len() {
                return Err(ModeratorError::Invalid("states and actions differ in length".into()));
            }
            for (s, &a) in e.states.iter().zip(&e.actions) {
                seqs.push(self.encode_tokens(s)?);
                actions.push(a);
                rewards.push(e.reward);
            }
        }
        if seqs.is_empty() {
            return Err(ModeratorError::Invalid("episode batch has no actions".into()));
        }
        let (tape, loss, entropies) =
            self.loss_on_tape(&self.store, &seqs, &actions, &rewards, batch.len(), cfg.entropy_threshold)?;
        let l = tape.value(loss).data()[0];
        if !l.is_finite() {
            return Err(ModeratorError::Divergence(l));
        }
        let grads = tape.backward(loss)?;
        self.store.adam_step(&grads, opt)?;
        let mean_entropy = entropies.iter().sum::<f64>() / entropies.len() as f64;
        Ok(UpdateStats { loss: l, mean_entropy })
    }

    fn header(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("kind".to_string(), "moderator".to_string()),
            ("mode".to_string(), self.mode.to_string()),
            ("actions".to_string(), self.actions.hash()),
            ("vocab".to_string(), self.vocab.hash()),
        ])
    }

    pub fn save(&self, prefix: &Path) -> Result<(), ModeratorError> {
        save_checkpoint(prefix, &self.header(), &self.store)?;
        Ok(())
    }

    pub fn load(prefix: &Path, catalog: &Catalog, vocab: &Vocabulary) -> Result<Self, ModeratorError> {
        let (header, store) = load_checkpoint(prefix)?;
        let field = |k: &str| header.get(k).map(String::as_str).unwrap_or("");
        if field("kind") != "moderator" {
            return Err(ModeratorError::Mismatch(format!("not a moderator checkpoint (kind `{}`)", field("kind"))));
        }
        let mode: Mode = field("mode").parse()?;
        let actions = ActionSpace::new(catalog, mode);
        if field("actions") != actions.hash() {
            return Err(ModeratorError::Mismatch("action space differs from the template catalog".into()));
        }
        if field("vocab") != vocab.hash() {
            return Err(ModeratorError::Mismatch("vocabulary hash differs".into()));
        }
        let h = 4 * LSTM_HIDDEN;
        let expected: Vec<(String, Vec<usize>)> = [
            (TOKEN_EMB.to_string(), vec![vocab.len(), EMBED_DIM]),
            (POLICY_W.to_string(), vec![STATE_DIM, actions.len()]),
            (POLICY_B.to_string(), vec![actions.len()]),
        ]
        .into_iter()
        .chain(
            [bilstm().forward, bilstm().backward]
                .into_iter()
                .flat_map(|c| [(c.w_input, vec![EMBED_DIM, h]), (c.w_hidden, vec![LSTM_HIDDEN, h]), (c.bias, vec![h])]),
        )
        .collect();
        for (name, shape) in &expected {
            match store.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(ModeratorError::Mismatch(format!("tensor `{name}` absent or misshapen"))),
            }
        }
        let model = Self { mode, actions, vocab: vocab.clone(), store };
        Ok(model)
    }
}
