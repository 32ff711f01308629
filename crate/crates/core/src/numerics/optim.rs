use std::collections::BTreeMap;

use rand::Rng;

use super::{Gradients, NumericsError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 3e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.learning_rate > 0.0) || !unit(self.beta1) || !unit(self.beta2) {
            return Err(NumericsError::InvalidArgument(format!("optimizer config out of range: {self:?}")));
        }
        Ok(())
    }
}

/// A trainable tensor with its Adam state.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
    step: u64,
}

impl Parameter {
    fn new(value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self { first_moment: zeros.clone(), second_moment: zeros, value, step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &Tensor {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &Tensor {
        &self.second_moment
    }
}

/// Named parameters of one model, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), NumericsError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NumericsError::DuplicateParameter(name));
        }
        self.params.insert(name, Parameter::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    /// Overwrites a value in place; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), NumericsError> {
        let p = self.params.get_mut(name).ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "set",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter().map(|(k, p)| (k, &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// One bias-corrected Adam update. Parameters absent from `grads` are
    /// treated as having zero gradient; every step counter advances once.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &OptimizerConfig) -> Result<(), NumericsError> {
        cfg.validate()?;
        for (name, g) in grads.iter() {
            let p = self.params.get(name).ok_or_else(|| NumericsError::UnknownParameter(name.clone()))?;
            if p.value.shape() != g.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    left: p.value.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        for (name, p) in self.params.iter_mut() {
            p.step += 1;
            let Some(g) = grads.get(name) else {
                if p.first_moment.max_abs() == 0.0 && p.second_moment.max_abs() == 0.0 {
                    continue;
                }
                let zero = Tensor::zeros(p.value.shape());
                apply_adam(p, &zero, cfg);
                continue;
            };
            apply_adam(p, g, cfg);
        }
        Ok(())
    }
}

fn apply_adam(p: &mut Parameter, g: &Tensor, cfg: &OptimizerConfig) {
    let t = p.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let values = p.value.data_mut();
    let m = p.first_moment.data_mut();
    let v = p.second_moment.data_mut();
    for i in 0..values.len() {
        let gi = g.data()[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        values[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// Uniform initialization in `[-bound, bound]`.
pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape with positive extents")
}

/// Glorot/Xavier uniform initialization for a `[fan_in × fan_out]` matrix.
pub fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(&[fan_in, fan_out], bound, rng)
}
