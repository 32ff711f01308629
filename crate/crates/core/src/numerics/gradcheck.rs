//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NumericsError, ParameterStore, Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates probed per parameter (all of them when the tensor is smaller).
    pub coordinates_per_param: usize,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so that two gradients that
    /// both vanish are not compared relatively.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, coordinates_per_param: 32, tolerance: 1e-4, floor: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Maximum relative error per parameter name.
    pub max_relative_error: BTreeMap<String, f64>,
    /// Number of coordinates probed in total.
    pub probed: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_relative_error.values().cloned().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= self.tolerance
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("non-finite {kind} gradient for `{name}`[{index}]")]
    NonFinite { kind: &'static str, name: String, index: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Compares analytic gradients of `forward` against central differences.
///
/// `forward` must build a fresh tape from the store and return the scalar
/// loss node; it is called once for the analytic pass and twice per probe.
pub fn grad_check<F>(
    forward: F,
    store: &ParameterStore,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&ParameterStore) -> Result<(Tape, Var), NumericsError>,
{
    let (tape, loss) = forward(store)?;
    let analytic = tape.backward(loss)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport { max_relative_error: BTreeMap::new(), probed: 0, tolerance: cfg.tolerance };
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let n = store.get(&name).unwrap().len();
        let coords: Vec<usize> = if n <= cfg.coordinates_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.coordinates_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let grad = analytic.get(&name);
        let mut worst: f64 = 0.0;
        for idx in coords {
            let a = grad.map_or(0.0, |g| g.data()[idx]);
            if !a.is_finite() {
                return Err(GradCheckError::NonFinite { kind: "analytic", name, index: idx });
            }
            let original = work.get(&name).unwrap().data()[idx];
            work.value_mut(&name).unwrap().data_mut()[idx] = original + cfg.step;
            let plus = eval(&forward, &work)?;
            work.value_mut(&name).unwrap().data_mut()[idx] = original - cfg.step;
            let minus = eval(&forward, &work)?;
            work.value_mut(&name).unwrap().data_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            if !numeric.is_finite() {
                return Err(GradCheckError::NonFinite { kind: "numeric", name, index: idx });
            }
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max((a - numeric).abs() / denom);
            report.probed += 1;
        }
        report.max_relative_error.insert(name, worst);
    }
    Ok(report)
}

fn eval<F>(forward: &F, store: &ParameterStore) -> Result<f64, NumericsError>
where
    F: Fn(&ParameterStore) -> Result<(Tape, Var), NumericsError>,
{
    let (tape, loss) = forward(store)?;
    Ok(tape.value(loss).data()[0])
}
