//! SGD and Adam, plus the mini-batch epoch loop shared by pre-training,
//! local fine-tuning and FedBE distillation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, NetworkSpec, ParamVector, TrainingPair};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Adam's beta1; ignored by SGD.
    pub momentum: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 0.001,
            momentum: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step_count: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, param_len: usize) -> Self {
        let moments = match config.kind {
            OptimizerKind::Adam => param_len,
            OptimizerKind::Sgd => 0,
        };
        Self {
            config,
            step_count: 0,
            first_moment: vec![0.0; moments],
            second_moment: vec![0.0; moments],
        }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::LengthMismatch {
                expected: params.len(),
                got: grad.len(),
            });
        }
        let c = self.config;
        match c.kind {
            OptimizerKind::Sgd => {
                for (w, g) in params.iter_mut().zip(grad) {
                    *w -= c.learning_rate * g;
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.len() != params.len() {
                    return Err(Error::LengthMismatch {
                        expected: self.first_moment.len(),
                        got: params.len(),
                    });
                }
                let t = (self.step_count + 1) as i32;
                let bc1 = 1.0 - c.momentum.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for (((w, &g), m), v) in params
                    .iter_mut()
                    .zip(grad)
                    .zip(self.first_moment.iter_mut())
                    .zip(self.second_moment.iter_mut())
                {
                    *m = c.momentum * *m + (1.0 - c.momentum) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                }
            }
        }
        self.step_count += 1;
        Ok(())
    }
}

/// Runs `epochs` passes of shuffled mini-batch training.
///
/// The final partial batch of each epoch is kept. Returns the mean training
/// loss of each epoch (averaged over batches, measured before each step).
pub fn train_epochs<P: TrainingPair + Sync>(
    spec: &NetworkSpec,
    params: &mut ParamVector,
    data: &[P],
    epochs: usize,
    batch_size: usize,
    state: &mut OptimizerState,
    rng: &mut SimRng,
) -> Result<Vec<f64>> {
    if epochs == 0 {
        return Ok(Vec::new());
    }
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&P> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grad) = nn::loss_and_gradient(spec, params, &batch)?;
            state.step(params.data_mut(), grad.data())?;
            total += loss;
            batches += 1;
        }
        history.push(total / batches as f64);
    }
    Ok(history)
}

/// `steps` plain mini-batch steps, each on a freshly drawn batch.
pub fn train_steps<P: TrainingPair + Sync>(
    spec: &NetworkSpec,
    params: &mut ParamVector,
    data: &[P],
    steps: usize,
    batch_size: usize,
    state: &mut OptimizerState,
    rng: &mut SimRng,
) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let take = batch_size.clamp(1, data.len());
    for _ in 0..steps {
        let (picked, _) = order.partial_shuffle(rng, take);
        let batch: Vec<&P> = picked.iter().map(|&i| &data[i]).collect();
        let grad = nn::backward(spec, params, &batch)?;
        state.step(params.data_mut(), grad.data())?;
    }
    Ok(())
}
