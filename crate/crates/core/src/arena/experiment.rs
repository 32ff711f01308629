use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{evaluate, train_moderator, ArenaError, CurvePoint, MetricsReport, Panel, PolicyController, TrainConfig};
use crate::kgsynth::{generate_kg_suite, union, KgConfig, KgSuite, KnowledgeGraph};
use crate::moderator::{ModeratorModel, RewardConfig};
use crate::panelist::{
    build_corpus, evaluate_accuracy, pretrain, subquestions, CorpusConfig, OraclePanelist, PanelistModel,
    PretrainConfig, PretrainReport, TrainedPanelist,
};
use crate::taskgen::{build_catalog, build_dataset, Catalog, DatasetConfig, DatasetSplits, Vocabulary};

/// Everything one end-to-end run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub kg: KgConfig,
    pub data: DatasetConfig,
    pub corpus: CorpusConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kg: KgConfig::default(),
            data: DatasetConfig::default(),
            corpus: CorpusConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// The same experiment with every seed-dependent stage keyed to `seed`
    /// except graph and dataset generation.
    pub fn with_agent_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = seed;
        c.train.seed = seed;
        c
    }
}

/// Graphs, templates, vocabulary and questions of one experiment.
#[derive(Clone, Debug)]
pub struct World {
    pub suite: KgSuite,
    pub union: KnowledgeGraph,
    pub catalog: Catalog,
    pub vocab: Vocabulary,
    pub data: DatasetSplits,
}

pub fn build_world(kg: &KgConfig, data: &DatasetConfig) -> Result<World, ArenaError> {
    let suite = generate_kg_suite(kg)?;
    let union = union(&suite)?;
    let catalog = build_catalog(&[1, 2, 3]);
    let vocab = Vocabulary::build(&catalog, &union);
    let data = build_dataset(data, &union, &catalog)?;
    Ok(World { suite, union, catalog, vocab, data })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PanelRun {
    pub shard: usize,
    pub corpus_size: usize,
    pub report: PretrainReport,
    /// Accuracy on the test split's own-shard sub-questions.
    pub held_out_accuracy: f64,
    pub held_out_count: usize,
}

/// Pretrains one panelist per shard. Shard `i` is initialized from stream `i`
/// of `cfg.seed`.
pub fn pretrain_panel(
    world: &World,
    corpus: &CorpusConfig,
    cfg: &PretrainConfig,
) -> Result<(Vec<PanelistModel>, Vec<PanelRun>), ArenaError> {
    let mut models = Vec::new();
    let mut runs = Vec::new();
    for kg in &world.suite.shards {
        let oracle = OraclePanelist::new(kg, &world.catalog);
        let train = build_corpus(&oracle, &world.data.train, &world.union, corpus)?;
        let dev = subquestions(&oracle, &world.data.dev, true);
        let held_out = subquestions(&oracle, &world.data.test, true);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(kg.owner() as u64);
        let mut model = PanelistModel::new(kg, &world.vocab, &mut rng)?;
        let report = pretrain(&mut model, &train, &dev, cfg)?;
        runs.push(PanelRun {
            shard: kg.owner(),
            corpus_size: train.len(),
            report,
            held_out_accuracy: evaluate_accuracy(&model, &held_out)?,
            held_out_count: held_out.len(),
        });
        models.push(model);
    }
    Ok((models, runs))
}

pub fn freeze_panel(models: Vec<PanelistModel>) -> Result<Panel, ArenaError> {
    let frozen = models.into_iter().map(TrainedPanelist::freeze).collect::<Result<Vec<_>, _>>()?;
    Panel::trained(frozen)
}

/// Trains a fresh moderator against `panel` and scores it on the test split.
pub fn train_and_test(
    world: &World,
    panel: &Panel,
    cfg: &TrainConfig,
) -> Result<(ModeratorModel, Vec<CurvePoint>, MetricsReport), ArenaError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ModeratorModel::new(&world.catalog, &world.vocab, cfg.reward.mode, &mut rng)?;
    let curve = train_moderator(&mut model, &world.data.train, &world.data.dev, panel, &world.catalog, cfg)?;
    let greedy = PolicyController { model: &model, greedy: true };
    let test = evaluate(&greedy, panel, &world.catalog, &world.data.test, &cfg.reward, cfg.seed, cfg.jobs)?.report;
    Ok((model, curve, test))
}

pub struct PipelineRun {
    pub world: World,
    pub panelists: Vec<PanelistModel>,
    pub panel: Panel,
    pub panel_runs: Vec<PanelRun>,
    pub moderator: ModeratorModel,
    pub curve: Vec<CurvePoint>,
    pub test: MetricsReport,
}

/// Generate, pretrain, train and test.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineRun, ArenaError> {
    let world = build_world(&cfg.kg, &cfg.data)?;
    let (panelists, panel_runs) = pretrain_panel(&world, &cfg.corpus, &cfg.pretrain)?;
    let panel = freeze_panel(panelists.clone())?;
    let (moderator, curve, test) = train_and_test(&world, &panel, &cfg.train)?;
    Ok(PipelineRun { world, panelists, panel, panel_runs, moderator, curve, test })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SweepPoint {
    pub ratio: f64,
    pub seed: u64,
    pub ema: f64,
    pub emp: f64,
}

/// For every ratio and seed: regenerate the graphs with that overlap ratio,
/// then run the whole pipeline. Sorted by ratio, then seed.
pub fn overlap_sweep(
    ratios: &[f64],
    base: &ExperimentConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&SweepPoint),
) -> Result<Vec<SweepPoint>, ArenaError> {
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(ArenaError::Invalid(format!("overlap ratio {r} outside [0, 1]")));
    }
    let mut sorted = ratios.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    for &ratio in &sorted {
        for &seed in seeds {
            let run = run_pipeline(&sweep_config(base, ratio, seed))?;
            let p = SweepPoint { ratio, seed, ema: run.test.ema(), emp: run.test.emp() };
            progress(&p);
            out.push(p);
        }
    }
    Ok(out)
}

pub fn sweep_config(base: &ExperimentConfig, ratio: f64, seed: u64) -> ExperimentConfig {
    let mut c = base.with_agent_seed(seed);
    c.kg.overlap_ratio = ratio;
    c
}

/// Test EMA (and EMP) of every (panel group, moderator) pairing.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CrossPair {
    /// `ema[panel][moderator]`.
    pub ema: Vec<Vec<f64>>,
    pub emp: Vec<Vec<f64>>,
    /// Per moderator column: is the native pairing the column maximum?
    pub diagonal_max: Vec<bool>,
}

pub fn cross_pair(
    panels: &[Panel],
    moderators: &[&ModeratorModel],
    catalog: &Catalog,
    examples: &[crate::taskgen::QAExample],
    reward: &RewardConfig,
    jobs: usize,
) -> Result<CrossPair, ArenaError> {
    if panels.len() != moderators.len() {
        return Err(ArenaError::Invalid(format!("{} panels for {} moderators", panels.len(), moderators.len())));
    }
    let mut ema = vec![vec![0.0; moderators.len()]; panels.len()];
    let mut emp = ema.clone();
    for (i, panel) in panels.iter().enumerate() {
        for (j, m) in moderators.iter().enumerate() {
            if let Some(h) = panel.vocab_hash() {
                if h != m.vocabulary().hash() {
                    return Err(ArenaError::Mismatch(format!(
                        "panel {i} and moderator {j} use different vocabularies"
                    )));
                }
            }
            let greedy = PolicyController { model: m, greedy: true };
            let r = evaluate(&greedy, panel, catalog, examples, reward, 0, jobs)?.report;
            ema[i][j] = r.ema();
            emp[i][j] = r.emp();
        }
    }
    let diagonal_max = diagonal_flags(&ema);
    Ok(CrossPair { ema, emp, diagonal_max })
}

/// For each column `j`, whether `m[j][j]` is at least every other entry of the column.
pub fn diagonal_flags(m: &[Vec<f64>]) -> Vec<bool> {
    let cols = m.first().map_or(0, Vec::len);
    (0..cols).map(|j| m.get(j).is_some_and(|row| m.iter().all(|other| other[j] <= row[j]))).collect()
}
