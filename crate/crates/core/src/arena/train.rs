use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{episode_rng, evaluate, run_episodes, ArenaError, Panel, PolicyController};
use crate::moderator::{EpisodeSample, ModeratorModel, RewardConfig};
use crate::numerics::OptimizerConfig;
use crate::taskgen::{Catalog, QAExample};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub reward: RewardConfig,
    /// One epoch is one batch of sampled training questions.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Dev evaluation period in epochs; epoch 0 and the last epoch are always evaluated.
    pub eval_every: usize,
    /// Evaluate on at most this many dev questions.
    pub eval_limit: Option<usize>,
    pub seed: u64,
    pub jobs: usize,
    /// Subtract from each episode's reward the mean reward of the other
    /// episodes in its batch.
    pub baseline: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            reward: RewardConfig::default(),
            epochs: 200,
            batch_size: 64,
            learning_rate: 3e-3,
            eval_every: 20,
            eval_limit: None,
            seed: 0,
            jobs: 1,
            baseline: true,
        }
    }
}

impl TrainConfig {
    pub fn paper_scale() -> Self {
        Self { epochs: 1000, batch_size: 500, eval_every: 50, ..Self::default() }
    }
}

/// One dev evaluation during training.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub ema: f64,
    pub emp: f64,
    pub mean_reward: f64,
    pub mean_entropy: f64,
}

/// REINFORCE on sampled rollouts against a frozen panel.
///
/// Questions are drawn without replacement from a reshuffled training split.
/// Returns the dev curve; `model` ends with the last update applied.
pub fn train_moderator(
    model: &mut ModeratorModel,
    train: &[QAExample],
    dev: &[QAExample],
    panel: &Panel,
    catalog: &Catalog,
    cfg: &TrainConfig,
) -> Result<Vec<CurvePoint>, ArenaError> {
    cfg.reward.validate()?;
    if model.mode() != cfg.reward.mode {
        return Err(ArenaError::Invalid(format!("{} moderator trained with {} reward", model.mode(), cfg.reward.mode)));
    }
    if let Some(h) = panel.vocab_hash() {
        if h != model.vocabulary().hash() {
            return Err(ArenaError::Mismatch("moderator and panel vocabularies differ".into()));
        }
    }
    if train.is_empty() || cfg.batch_size == 0 {
        return Err(ArenaError::Invalid("no training questions or zero batch size".into()));
    }
    let opt = OptimizerConfig::with_learning_rate(cfg.learning_rate);
    let dev = &dev[..cfg.eval_limit.unwrap_or(dev.len()).min(dev.len())];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut curve = Vec::new();
    let mut checkpoint = |model: &ModeratorModel, epoch: usize| -> Result<(), ArenaError> {
        let greedy = PolicyController { model, greedy: true };
        let r = evaluate(&greedy, panel, catalog, dev, &cfg.reward, cfg.seed, cfg.jobs)?.report;
        curve.push(CurvePoint {
            epoch,
            ema: r.ema(),
            emp: r.emp(),
            mean_reward: r.mean_reward,
            mean_entropy: r.mean_entropy,
        });
        Ok(())
    };
    checkpoint(model, 0)?;
    for epoch in 1..=cfg.epochs {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let first = ((epoch - 1) * cfg.batch_size) as u64 + 1;
        let mut rngs: Vec<ChaCha8Rng> = (0..batch.len()).map(|i| episode_rng(cfg.seed, first + i as u64)).collect();
        let sampler = PolicyController { model, greedy: false };
        let rollouts = run_episodes(&batch, &sampler, panel, catalog, &cfg.reward, &mut rngs)?;
        let mut samples: Vec<EpisodeSample> = rollouts.into_iter().map(|r| r.sample).collect();
        if cfg.baseline {
            subtract_leave_one_out_mean(&mut samples);
        }
        model.reinforce_update(&samples, &cfg.reward, &opt)?;
        if epoch % cfg.eval_every.max(1) == 0 || epoch == cfg.epochs {
            checkpoint(model, epoch)?;
        }
    }
    Ok(curve)
}

/// Centers rewards on the mean of the other episodes in the batch. Each
/// baseline is independent of the episode it corrects, so the expected
/// gradient is unchanged. A batch of one is left as it is.
pub fn subtract_leave_one_out_mean(samples: &mut [EpisodeSample]) {
    let n = samples.len();
    if n < 2 {
        return;
    }
    let total: f64 = samples.iter().map(|s| s.reward).sum();
    let rewards: Vec<f64> = samples.iter().map(|s| s.reward).collect();
    for (s, r) in samples.iter_mut().zip(rewards) {
        s.reward = r - (total - r) / (n - 1) as f64;
    }
}
