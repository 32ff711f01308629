//! Flat `key = value` run configuration.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use collabqa::arena::{ExperimentConfig, TrainConfig};
use collabqa::kgsynth::KgConfig;
use collabqa::moderator::{Mode, RewardConfig};
use collabqa::panelist::{CorpusConfig, PretrainConfig, EMBED_DIM, GRAPH_HIDDEN, LSTM_HIDDEN};
use collabqa::taskgen::DatasetConfig;

pub const SEED_VAR: &str = "COLLABQA_SEED";
pub const OUT_VAR: &str = "COLLABQA_OUT";

/// Every setting of every subcommand. Defaults are the desk preset.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,

    pub persons: usize,
    pub companies: usize,
    pub cities: usize,
    pub states: usize,
    pub businesses: usize,
    pub overlap_ratio: f64,
    pub jobless_fraction: f64,

    pub train_questions: usize,
    pub dev_questions: usize,
    pub test_questions: usize,
    pub three_hop_fraction: f64,

    pub graph_layers: usize,
    pub graph_hidden: usize,
    pub embedding_dim: usize,
    pub lstm_hidden: usize,

    pub wrong_kind_ratio: f64,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_learning_rate: f64,
    /// 0 disables early stopping.
    pub pretrain_patience: usize,

    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub entropy_threshold: f64,
    pub beta: f64,
    pub t_max: usize,
    pub reward_baseline: bool,
    pub eval_every: usize,
    /// 0 evaluates the whole dev split.
    pub eval_limit: usize,

    /// Agent seeds of the multi-run commands.
    pub seeds: Vec<u64>,
    pub sweep_ratios: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let kg = KgConfig::default();
        let data = DatasetConfig::default();
        let pre = PretrainConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            jobs: 1,
            persons: kg.persons,
            companies: kg.companies,
            cities: kg.cities,
            states: kg.states,
            businesses: kg.businesses,
            overlap_ratio: kg.overlap_ratio,
            jobless_fraction: kg.jobless_fraction,
            train_questions: data.train,
            dev_questions: data.dev,
            test_questions: data.test,
            three_hop_fraction: data.three_hop_fraction,
            graph_layers: 1,
            graph_hidden: GRAPH_HIDDEN,
            embedding_dim: EMBED_DIM,
            lstm_hidden: LSTM_HIDDEN,
            wrong_kind_ratio: CorpusConfig::default().wrong_kind_ratio,
            pretrain_epochs: pre.epochs,
            pretrain_batch_size: pre.batch_size,
            pretrain_learning_rate: pre.learning_rate,
            pretrain_patience: pre.patience.unwrap_or(0),
            mode: train.reward.mode,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            entropy_threshold: train.reward.entropy_threshold,
            beta: train.reward.beta,
            t_max: train.reward.t_max,
            reward_baseline: train.baseline,
            eval_every: train.eval_every,
            eval_limit: train.eval_limit.unwrap_or(0),
            seeds: vec![0, 1, 2],
            sweep_ratios: vec![0.0, 0.5, 0.9, 0.99],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| anyhow::anyhow!("`{key}`: cannot parse `{value}`: {e}"))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "jobs" => self.jobs = parse(key, value)?,
            "persons" => self.persons = parse(key, value)?,
            "companies" => self.companies = parse(key, value)?,
            "cities" => self.cities = parse(key, value)?,
            "states" => self.states = parse(key, value)?,
            "businesses" => self.businesses = parse(key, value)?,
            "overlap_ratio" => self.overlap_ratio = parse(key, value)?,
            "jobless_fraction" => self.jobless_fraction = parse(key, value)?,
            "train_questions" => self.train_questions = parse(key, value)?,
            "dev_questions" => self.dev_questions = parse(key, value)?,
            "test_questions" => self.test_questions = parse(key, value)?,
            "three_hop_fraction" => self.three_hop_fraction = parse(key, value)?,
            "graph_layers" => self.graph_layers = parse(key, value)?,
            "graph_hidden" => self.graph_hidden = parse(key, value)?,
            "embedding_dim" => self.embedding_dim = parse(key, value)?,
            "lstm_hidden" => self.lstm_hidden = parse(key, value)?,
            "wrong_kind_ratio" => self.wrong_kind_ratio = parse(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, value)?,
            "pretrain_batch_size" => self.pretrain_batch_size = parse(key, value)?,
            "pretrain_learning_rate" => self.pretrain_learning_rate = parse(key, value)?,
            "pretrain_patience" => self.pretrain_patience = parse(key, value)?,
            "mode" => self.mode = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "entropy_threshold" => self.entropy_threshold = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "t_max" => self.t_max = parse(key, value)?,
            "reward_baseline" => self.reward_baseline = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "eval_limit" => self.eval_limit = parse(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "sweep_ratios" => self.sweep_ratios = parse_list(key, value)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("jobs", self.jobs.to_string()),
            ("persons", self.persons.to_string()),
            ("companies", self.companies.to_string()),
            ("cities", self.cities.to_string()),
            ("states", self.states.to_string()),
            ("businesses", self.businesses.to_string()),
            ("overlap_ratio", self.overlap_ratio.to_string()),
            ("jobless_fraction", self.jobless_fraction.to_string()),
            ("train_questions", self.train_questions.to_string()),
            ("dev_questions", self.dev_questions.to_string()),
            ("test_questions", self.test_questions.to_string()),
            ("three_hop_fraction", self.three_hop_fraction.to_string()),
            ("graph_layers", self.graph_layers.to_string()),
            ("graph_hidden", self.graph_hidden.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("lstm_hidden", self.lstm_hidden.to_string()),
            ("wrong_kind_ratio", self.wrong_kind_ratio.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("pretrain_batch_size", self.pretrain_batch_size.to_string()),
            ("pretrain_learning_rate", self.pretrain_learning_rate.to_string()),
            ("pretrain_patience", self.pretrain_patience.to_string()),
            ("mode", self.mode.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("entropy_threshold", self.entropy_threshold.to_string()),
            ("beta", self.beta.to_string()),
            ("t_max", self.t_max.to_string()),
            ("reward_baseline", self.reward_baseline.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_limit", self.eval_limit.to_string()),
            ("seeds", join(&self.seeds)),
            ("sweep_ratios", join(&self.sweep_ratios)),
        ]
    }

    /// The configuration as a config file that parses back to `self`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").expect("write to string");
        }
        s
    }

    /// Overlays a config file on the defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').with_context(|| format!("line {}: expected `key = value`", i + 1))?;
            cfg.set(k.trim(), v.trim()).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse_text(&text).with_context(|| format!("config {}", path.display()))
    }

    /// Applies `COLLABQA_SEED` and `COLLABQA_OUT` from `env`.
    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(v) = env(SEED_VAR) {
            self.set("seed", &v).with_context(|| format!("environment variable {SEED_VAR}"))?;
        }
        if let Some(v) = env(OUT_VAR) {
            self.set("out", &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fixed = [
            ("graph_layers", self.graph_layers, 1),
            ("graph_hidden", self.graph_hidden, GRAPH_HIDDEN),
            ("embedding_dim", self.embedding_dim, EMBED_DIM),
            ("lstm_hidden", self.lstm_hidden, LSTM_HIDDEN),
        ];
        for (k, v, want) in fixed {
            if v != want {
                bail!("`{k}` = {v}: the models are built with {k} = {want}");
            }
        }
        if self.jobs == 0 {
            bail!("`jobs` must be at least 1");
        }
        if self.seeds.is_empty() {
            bail!("`seeds` is empty");
        }
        self.reward().validate()?;
        Ok(())
    }

    pub fn kg(&self) -> KgConfig {
        KgConfig {
            persons: self.persons,
            companies: self.companies,
            cities: self.cities,
            states: self.states,
            businesses: self.businesses,
            overlap_ratio: self.overlap_ratio,
            jobless_fraction: self.jobless_fraction,
            seed: self.seed,
            ..KgConfig::default()
        }
    }

    pub fn data(&self) -> DatasetConfig {
        DatasetConfig {
            train: self.train_questions,
            dev: self.dev_questions,
            test: self.test_questions,
            three_hop_fraction: self.three_hop_fraction,
            seed: self.seed,
        }
    }

    pub fn corpus(&self) -> CorpusConfig {
        CorpusConfig { wrong_kind_ratio: self.wrong_kind_ratio, seed: self.seed }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch_size,
            learning_rate: self.pretrain_learning_rate,
            patience: (self.pretrain_patience > 0).then_some(self.pretrain_patience),
            seed: self.seed,
        }
    }

    pub fn reward(&self) -> RewardConfig {
        RewardConfig { mode: self.mode, beta: self.beta, t_max: self.t_max, entropy_threshold: self.entropy_threshold }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            reward: self.reward(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            eval_every: self.eval_every,
            eval_limit: (self.eval_limit > 0).then_some(self.eval_limit),
            seed: self.seed,
            jobs: self.jobs,
            baseline: self.reward_baseline,
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            kg: self.kg(),
            data: self.data(),
            corpus: self.corpus(),
            pretrain: self.pretrain(),
            train: self.train(),
        }
    }
}
