//! Momentum SGD on gradients averaged over several batches and divided by
//! their global L2 norm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeOrder {
    /// Normalize the accumulated gradient, then fold it into the velocity.
    #[default]
    BeforeMomentum,
    /// Fold the raw gradient into the velocity, then step along the
    /// normalized velocity.
    AfterMomentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub eps_norm: f64,
    pub batches_per_iteration: usize,
    /// Multiply the learning rate by `decay_factor` every this many
    /// iterations; 0 disables decay.
    pub decay_every: usize,
    pub decay_factor: f64,
    #[serde(default)]
    pub order: NormalizeOrder,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            eps_norm: 1e-12,
            batches_per_iteration: 2,
            decay_every: 0,
            decay_factor: 0.5,
            order: NormalizeOrder::BeforeMomentum,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.eps_norm > 0.0) {
            return Err(Error::config("eps_norm must be positive"));
        }
        if self.batches_per_iteration == 0 {
            return Err(Error::config("batches_per_iteration must be >= 1"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("decay_factor must lie in (0, 1]"));
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// `g / max(||g||, eps)` and the original norm.
pub fn normalize(grads: &[Vec<f64>], eps: f64) -> (Vec<Vec<f64>>, f64) {
    let norm = global_norm(grads);
    let d = norm.max(eps);
    (grads.iter().map(|g| g.iter().map(|x| x / d).collect()).collect(), norm)
}

/// Element-wise mean of per-batch gradients, summed in batch order. A
/// missing gradient counts as zeros.
pub fn mean_gradients(per_batch: &[Vec<Option<Vec<f64>>>], sizes: &[usize]) -> Result<Vec<Vec<f64>>> {
    if per_batch.is_empty() {
        return Err(Error::invalid("no batch gradients to accumulate"));
    }
    let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    for (b, grads) in per_batch.iter().enumerate() {
        if grads.len() != sizes.len() {
            return Err(Error::shape(format!(
                "batch {b}: {} gradients for {} parameters",
                grads.len(),
                sizes.len()
            )));
        }
        for (p, (a, g)) in acc.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.len() != a.len() {
                return Err(Error::shape(format!(
                    "batch {b}: gradient {p} has {} entries, expected {}",
                    g.len(),
                    a.len()
                )));
            }
            if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "batch {b}: parameter {p} gradient entry {bad} is {}",
                    g[bad]
                )));
            }
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
    }
    let scale = per_batch.len() as f64;
    if per_batch.len() > 1 {
        for x in acc.iter_mut().flatten() {
            *x /= scale;
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub velocity: Vec<Vec<f64>>,
    pub iteration: usize,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &[Tensor]) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            config,
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            iteration: 0,
        })
    }

    /// Learning rate for the next step.
    pub fn learning_rate(&self) -> f64 {
        let c = &self.config;
        match c.decay_every {
            0 => c.learning_rate,
            every => c.learning_rate * c.decay_factor.powi((self.iteration / every) as i32),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<StepInfo> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::shape(format!(
                "{} parameters, {} gradients, {} velocity buffers",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        for (i, (g, v)) in grads.iter().zip(&self.velocity).enumerate() {
            if g.len() != v.len() {
                return Err(Error::shape(format!(
                    "gradient {i} has {} entries, expected {}",
                    g.len(),
                    v.len()
                )));
            }
        }
        if grads.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite gradient passed to the optimizer".into()));
        }
        let lr = self.learning_rate();
        let mu = self.config.momentum;
        let eps = self.config.eps_norm;
        let grad_norm = match self.config.order {
            NormalizeOrder::BeforeMomentum => {
                let (g, norm) = normalize(grads, eps);
                for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(&g) {
                    for ((theta, vel), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                        *vel = mu * *vel + gi;
                        *theta -= lr * *vel;
                    }
                }
                norm
            }
            NormalizeOrder::AfterMomentum => {
                for (v, g) in self.velocity.iter_mut().zip(grads) {
                    for (vel, gi) in v.iter_mut().zip(g) {
                        *vel = mu * *vel + gi;
                    }
                }
                let d = global_norm(&self.velocity).max(eps);
                for (p, v) in params.iter_mut().zip(&self.velocity) {
                    for (theta, vel) in p.data_mut().iter_mut().zip(v) {
                        *theta -= lr * vel / d;
                    }
                }
                global_norm(grads)
            }
        };
        self.iteration += 1;
        Ok(StepInfo {
            grad_norm,
            learning_rate: lr,
        })
    }

    /// State as named tensors under `opt/`, velocity shapes mirroring `params`.
    pub fn to_tensors(&self, names: &[String], params: &[Tensor]) -> Result<Vec<(String, Tensor)>> {
        let mut out = vec![("opt/iteration".to_string(), Tensor::scalar(self.iteration as f64))];
        for ((name, v), p) in names.iter().zip(&self.velocity).zip(params) {
            out.push((
                format!("opt/velocity/{name}"),
                Tensor::new(p.shape().to_vec(), v.clone())?,
            ));
        }
        Ok(out)
    }

    /// Restores velocity buffers and the iteration counter from checkpoint tensors.
    pub fn load_tensors(&mut self, names: &[String], tensors: &[(String, Tensor)]) -> Result<()> {
        let find = |key: &str| tensors.iter().find(|(n, _)| n == key).map(|(_, t)| t);
        let it = find("opt/iteration").ok_or_else(|| Error::format("checkpoint", "missing opt/iteration"))?;
        self.iteration = it.item()? as usize;
        for (name, v) in names.iter().zip(self.velocity.iter_mut()) {
            let key = format!("opt/velocity/{name}");
            let t = find(&key).ok_or_else(|| Error::format("checkpoint", format!("missing {key}")))?;
            if t.numel() != v.len() {
                return Err(Error::format(
                    "checkpoint",
                    format!("{key} has {} entries, expected {}", t.numel(), v.len()),
                ));
            }
            v.copy_from_slice(t.data());
        }
        Ok(())
    }
}
