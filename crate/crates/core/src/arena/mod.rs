//! The dialog environment: broadcast a sub-question, collect every
//! panelist's answer, update the register, repeat. Also scoring, evaluation,
//! moderator training and the experiment drivers built on them.

mod experiment;
mod report;
mod train;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kgsynth::{KgError, KgSuite};
use crate::moderator::{
    act, compute_reward, entropy, unique_answer, ActionSpace, DialogState, EpisodeSample, Mode, ModeratorError,
    ModeratorModel, RewardConfig,
};
use crate::panelist::{OraclePanelist, Panelist, PanelistError, TrainedPanelist, Utterance};
use crate::taskgen::{Catalog, QAExample, TaskError};

pub use experiment::{
    build_world, cross_pair, diagonal_flags, freeze_panel, overlap_sweep, pretrain_panel, run_pipeline, sweep_config,
    train_and_test, CrossPair, ExperimentConfig, PanelRun, PipelineRun, SweepPoint, World,
};
pub use report::{
    cross_pair_csv, curves_csv, metrics_csv, parse_curves_csv, parse_sweep_csv, sweep_csv, trace_jsonl, CurveSeries,
    CURVES_HEADER, METRICS_HEADER, SWEEP_HEADER,
};
pub use train::{subtract_leave_one_out_mean, train_moderator, CurvePoint, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ArenaError {
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("pairing mismatch: {0}")]
    Mismatch(String),
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Moderator(#[from] ModeratorError),
    #[error(transparent)]
    Panelist(#[from] PanelistError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Kg(#[from] KgError),
}

/// The panelists of one dialog, in speaker order.
#[derive(Clone)]
pub struct Panel {
    members: Vec<Arc<dyn Panelist>>,
    vocab_hash: Option<String>,
}

impl Panel {
    pub fn new(members: Vec<Arc<dyn Panelist>>, vocab_hash: Option<String>) -> Self {
        Self { members, vocab_hash }
    }

    pub fn oracles(suite: &KgSuite, catalog: &Catalog) -> Self {
        let members =
            suite.shards.iter().map(|kg| Arc::new(OraclePanelist::new(kg, catalog)) as Arc<dyn Panelist>).collect();
        Self { members, vocab_hash: None }
    }

    /// Trained panelists sharing one vocabulary.
    pub fn trained(panelists: Vec<TrainedPanelist>) -> Result<Self, ArenaError> {
        let hashes: Vec<String> = panelists.iter().map(|p| p.model().vocabulary().hash()).collect();
        if hashes.windows(2).any(|w| w[0] != w[1]) {
            return Err(ArenaError::Mismatch("panelists were built with different vocabularies".into()));
        }
        let members = panelists.into_iter().map(|p| Arc::new(p) as Arc<dyn Panelist>).collect();
        Ok(Self { members, vocab_hash: hashes.into_iter().next() })
    }

    pub fn members(&self) -> &[Arc<dyn Panelist>] {
        &self.members
    }

    pub fn vocab_hash(&self) -> Option<&str> {
        self.vocab_hash.as_deref()
    }

    /// Every panelist's answer to every question; `out[q]` lists speakers in order.
    pub fn broadcast(&self, questions: &[&str]) -> Vec<Vec<Utterance>> {
        let answers: Vec<Vec<String>> = self.members.iter().map(|p| p.answer_all(questions)).collect();
        (0..questions.len())
            .map(|q| {
                self.members
                    .iter()
                    .zip(&answers)
                    .map(|(p, a)| Utterance { speaker: p.shard(), text: a[q].clone() })
                    .collect()
            })
            .collect()
    }
}

/// A dialog still waiting for its next action.
pub struct Pending<'a> {
    /// Position in the episode batch, also the index of its random stream.
    pub index: usize,
    pub example: &'a QAExample,
    pub state: &'a DialogState,
}

/// Anything that picks moderator actions.
pub trait Controller: Sync {
    fn actions(&self) -> &ActionSpace;
    /// One (action, policy entropy) per pending dialog.
    fn choose(&self, pending: &[Pending<'_>], rngs: &mut [ChaCha8Rng]) -> Result<Vec<(usize, f64)>, ArenaError>;
}

/// A moderator model, sampling or greedy.
pub struct PolicyController<'a> {
    pub model: &'a ModeratorModel,
    pub greedy: bool,
}

impl Controller for PolicyController<'_> {
    fn actions(&self) -> &ActionSpace {
        self.model.actions()
    }

    fn choose(&self, pending: &[Pending<'_>], rngs: &mut [ChaCha8Rng]) -> Result<Vec<(usize, f64)>, ArenaError> {
        let histories: Vec<&[String]> = pending.iter().map(|p| p.state.tokens.as_slice()).collect();
        let histories: Vec<Vec<&str>> = histories.iter().map(|h| h.iter().map(String::as_str).collect()).collect();
        let probs = self.model.policies(&histories)?;
        Ok(pending
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let row = probs.row_slice(i);
                (act(row, &mut rngs[p.index], self.greedy), entropy(row))
            })
            .collect())
    }
}

/// Uniform over the whole action space of the mode.
pub struct RandomController {
    pub actions: ActionSpace,
}

impl Controller for RandomController {
    fn actions(&self) -> &ActionSpace {
        &self.actions
    }

    fn choose(&self, pending: &[Pending<'_>], rngs: &mut [ChaCha8Rng]) -> Result<Vec<(usize, f64)>, ArenaError> {
        let n = self.actions.len();
        Ok(pending.iter().map(|p| (rngs[p.index].gen_range(0..n), (n as f64).ln())).collect())
    }
}

/// Follows each question's gold decomposition, then terminates if it can.
pub struct GoldController {
    pub actions: ActionSpace,
}

impl Controller for GoldController {
    fn actions(&self) -> &ActionSpace {
        &self.actions
    }

    fn choose(&self, pending: &[Pending<'_>], _: &mut [ChaCha8Rng]) -> Result<Vec<(usize, f64)>, ArenaError> {
        pending
            .iter()
            .map(|p| {
                let step = match p.example.decomposition.get(p.state.turn) {
                    Some(d) => self.actions.index_of(&d.template_id),
                    None => self.actions.terminate_action(),
                };
                step.map(|a| (a, 0.0)).ok_or_else(|| {
                    ArenaError::Protocol(format!("no scripted action for {} at turn {}", p.example.id, p.state.turn))
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TurnRecord {
    pub action: usize,
    pub template: String,
    /// Step name of the template, e.g. `birthplace` or `mayor^-1`.
    pub relation: String,
    pub question: String,
    pub utterances: Vec<Utterance>,
    pub register: String,
    pub well_formed: bool,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DialogTrace {
    pub question_id: String,
    pub turns: Vec<TurnRecord>,
    /// The register when the dialog ended.
    pub answer: String,
    /// The moderator chose to stop (baseline mode only).
    pub terminated: bool,
    pub reward: f64,
}

impl DialogTrace {
    pub fn well_formed(&self) -> bool {
        self.turns.iter().all(|t| t.well_formed)
    }
}

/// Reward of a finished trace against its question.
pub fn trace_reward(trace: &DialogTrace, gold: &QAExample, cfg: &RewardConfig) -> f64 {
    compute_reward(trace.answer == gold.answer, trace.well_formed(), cfg)
}

/// A finished episode: the trace and what the policy update needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub trace: DialogTrace,
    pub sample: EpisodeSample,
    pub entropies: Vec<f64>,
}

/// The random stream of episode `index` under `seed`.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Runs a batch of dialogs in lockstep; `rngs[i]` drives dialog `i`.
///
/// Enhanced mode runs exactly as many turns as the question has hops (capped
/// at `t_max`); baseline runs until terminate or `t_max` turns.
pub fn run_episodes(
    examples: &[&QAExample],
    controller: &dyn Controller,
    panel: &Panel,
    catalog: &Catalog,
    cfg: &RewardConfig,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<Rollout>, ArenaError> {
    if rngs.len() != examples.len() {
        return Err(ArenaError::Invalid(format!("{} random streams for {} dialogs", rngs.len(), examples.len())));
    }
    let actions = controller.actions();
    if actions.terminate != (cfg.mode == Mode::Baseline) {
        return Err(ArenaError::Protocol(format!("controller action space does not fit {} mode", cfg.mode)));
    }
    let limit = |x: &QAExample| match cfg.mode {
        Mode::Enhanced => x.hops.min(cfg.t_max),
        Mode::Baseline => cfg.t_max,
    };
    let mut states: Vec<DialogState> = examples.iter().map(|x| DialogState::new(&x.question, &x.anchor)).collect();
    let mut turns: Vec<Vec<TurnRecord>> = vec![Vec::new(); examples.len()];
    let mut samples: Vec<EpisodeSample> =
        (0..examples.len()).map(|_| EpisodeSample { states: Vec::new(), actions: Vec::new(), reward: 0.0 }).collect();
    let mut entropies: Vec<Vec<f64>> = vec![Vec::new(); examples.len()];
    let mut terminated = vec![false; examples.len()];
    let mut live: Vec<usize> = (0..examples.len()).filter(|&i| limit(examples[i]) > 0).collect();

    while !live.is_empty() {
        let pending: Vec<Pending> =
            live.iter().map(|&i| Pending { index: i, example: examples[i], state: &states[i] }).collect();
        let chosen = controller.choose(&pending, rngs)?;
        drop(pending);
        let mut asking = Vec::new();
        for (&i, &(a, h)) in live.iter().zip(&chosen) {
            samples[i].states.push(states[i].tokens.clone());
            samples[i].actions.push(a);
            entropies[i].push(h);
            if actions.is_terminate(a) {
                terminated[i] = true;
                continue;
            }
            let id = actions
                .template(a)
                .ok_or_else(|| ArenaError::Protocol(format!("action {a} outside the action space")))?;
            let t = catalog
                .simple_by_id(id)
                .ok_or_else(|| ArenaError::Protocol(format!("template `{id}` not in the catalog")))?;
            asking.push((i, a, t, t.fill(&states[i].register)));
        }
        let questions: Vec<&str> = asking.iter().map(|(_, _, _, q)| q.as_str()).collect();
        let replies = panel.broadcast(&questions);
        for ((i, a, t, q), utterances) in asking.into_iter().zip(replies) {
            let well_formed = states[i].record_turn(&q, &utterances);
            turns[i].push(TurnRecord {
                action: a,
                template: t.id.clone(),
                relation: t.step().name(),
                question: q,
                utterances,
                register: states[i].register.clone(),
                well_formed,
            });
        }
        live.retain(|&i| !terminated[i] && turns[i].len() < limit(examples[i]));
    }

    Ok(examples
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut trace = DialogTrace {
                question_id: x.id.clone(),
                turns: std::mem::take(&mut turns[i]),
                answer: states[i].register.clone(),
                terminated: terminated[i],
                reward: 0.0,
            };
            trace.reward = trace_reward(&trace, x, cfg);
            let mut sample = std::mem::replace(
                &mut samples[i],
                EpisodeSample { states: Vec::new(), actions: Vec::new(), reward: 0.0 },
            );
            sample.reward = trace.reward;
            Rollout { trace, sample, entropies: std::mem::take(&mut entropies[i]) }
        })
        .collect())
}

/// One dialog with its own random stream.
pub fn run_episode(
    example: &QAExample,
    controller: &dyn Controller,
    panel: &Panel,
    catalog: &Catalog,
    cfg: &RewardConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DialogTrace, ArenaError> {
    let mut rngs = [rng.clone()];
    let mut out = run_episodes(&[example], controller, panel, catalog, cfg, &mut rngs)?;
    *rng = rngs[0].clone();
    Ok(out.pop().expect("one rollout").trace)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Score {
    pub ema: bool,
    pub emp: bool,
}

/// Exact match of the final answer and of the extracted path.
///
/// Turn `k` contributes the triple (register before the turn, template
/// relation, unique non-UNK answer); a malformed turn never matches.
pub fn score(trace: &DialogTrace, gold: &QAExample) -> Score {
    let ema = trace.answer == gold.answer;
    let mut emp = trace.turns.len() == gold.hops && gold.path.len() == gold.hops;
    if emp {
        let mut before = gold.anchor.as_str();
        for (turn, hop) in trace.turns.iter().zip(&gold.path) {
            let answer = unique_answer(&turn.utterances);
            if !turn.well_formed || before != hop[0] || turn.relation != hop[1] || answer != Some(hop[2].as_str()) {
                emp = false;
                break;
            }
            before = &turn.register;
        }
    }
    Score { ema, emp }
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tally {
    pub count: usize,
    pub ema_hits: usize,
    pub emp_hits: usize,
}

impl Tally {
    fn add(&mut self, s: Score) {
        self.count += 1;
        self.ema_hits += usize::from(s.ema);
        self.emp_hits += usize::from(s.emp);
    }

    pub fn ema(&self) -> f64 {
        ratio(self.ema_hits, self.count)
    }

    pub fn emp(&self) -> f64 {
        ratio(self.emp_hits, self.count)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub overall: Tally,
    /// Keyed by complex template id.
    pub by_template: BTreeMap<String, Tally>,
    pub by_hops: BTreeMap<usize, Tally>,
    /// Dialogs whose turn count differs from the question's hop count.
    pub termination_errors: usize,
    pub malformed_turns: usize,
    pub total_turns: usize,
    pub mean_reward: f64,
    /// Mean policy entropy over every visited state.
    pub mean_entropy: f64,
}

impl MetricsReport {
    pub fn ema(&self) -> f64 {
        self.overall.ema()
    }

    pub fn emp(&self) -> f64 {
        self.overall.emp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub traces: Vec<DialogTrace>,
    pub scores: Vec<Score>,
}

/// Dialogs evaluated per lockstep batch.
const EVAL_CHUNK: usize = 256;

/// Scores every example. Dialog `i` draws from `episode_rng(seed, i)`, so
/// the result does not depend on `jobs`.
pub fn evaluate(
    controller: &dyn Controller,
    panel: &Panel,
    catalog: &Catalog,
    examples: &[QAExample],
    cfg: &RewardConfig,
    seed: u64,
    jobs: usize,
) -> Result<Evaluation, ArenaError> {
    let chunks: Vec<(usize, &[QAExample])> =
        examples.chunks(EVAL_CHUNK).enumerate().map(|(c, xs)| (c * EVAL_CHUNK, xs)).collect();
    let run = |(offset, xs): &(usize, &[QAExample])| -> Result<Vec<Rollout>, ArenaError> {
        let refs: Vec<&QAExample> = xs.iter().collect();
        let mut rngs: Vec<ChaCha8Rng> = (0..xs.len()).map(|i| episode_rng(seed, (offset + i) as u64)).collect();
        run_episodes(&refs, controller, panel, catalog, cfg, &mut rngs)
    };
    let jobs = jobs.max(1).min(chunks.len().max(1));
    let results: Vec<Result<Vec<Rollout>, ArenaError>> = if jobs <= 1 {
        chunks.iter().map(run).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<Rollout>, ArenaError>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..jobs)
                .map(|w| {
                    let (chunks, run) = (&chunks, &run);
                    scope.spawn(move || {
                        chunks.iter().enumerate().skip(w).step_by(jobs).map(|(c, ch)| (c, run(ch))).collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (c, r) in h.join().expect("evaluation worker panicked") {
                    slots[c] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every chunk evaluated")).collect()
    };
    let mut rollouts = Vec::with_capacity(examples.len());
    for r in results {
        rollouts.extend(r?);
    }
    Ok(summarize(examples, rollouts))
}

fn summarize(examples: &[QAExample], rollouts: Vec<Rollout>) -> Evaluation {
    let mut report = MetricsReport::default();
    let (mut reward_sum, mut entropy_sum, mut states) = (0.0, 0.0, 0usize);
    let mut traces = Vec::with_capacity(rollouts.len());
    let mut scores = Vec::with_capacity(rollouts.len());
    for (x, r) in examples.iter().zip(rollouts) {
        let s = score(&r.trace, x);
        report.overall.add(s);
        report.by_template.entry(x.template.clone()).or_default().add(s);
        report.by_hops.entry(x.hops).or_default().add(s);
        report.termination_errors += usize::from(r.trace.turns.len() != x.hops);
        report.malformed_turns += r.trace.turns.iter().filter(|t| !t.well_formed).count();
        report.total_turns += r.trace.turns.len();
        reward_sum += r.trace.reward;
        entropy_sum += r.entropies.iter().sum::<f64>();
        states += r.entropies.len();
        traces.push(r.trace);
        scores.push(s);
    }
    report.mean_reward = reward_sum / examples.len().max(1) as f64;
    report.mean_entropy = entropy_sum / states.max(1) as f64;
    Evaluation { report, traces, scores }
}
