//! Losses, analytic gradients, optimizers and the two fine-tuning stages.
//!
//! The trainable part of the embedding is a single per-location linear map
//! (`Adapter`) applied on top of the frozen, precomputed feature tensors.

mod gradcheck;
mod loss;
mod optim;
mod stages;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{gradcheck, random_instance, GradcheckConfig, GradcheckReport, Instance};
pub use loss::{
    cross_entropy, dense_cost, grad_dense_cost, grad_proto_cost, proto_cost, DenseGrads,
    SupportExample,
};
pub use optim::{adam_step, sgd_nesterov_step, AdamState, Optimizer, SgdState};
pub use stages::{
    adapt_novel, base_train, init_head, support_prototypes, AdaptOutcome, BaseOutcome,
    MAX_ADAPT_STEPS,
};

/// Square `d x d` map applied at every location, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    d: usize,
    matrix: Vec<f64>,
}

impl Adapter {
    pub fn identity(d: usize) -> Self {
        let mut matrix = vec![0.0; d * d];
        for i in 0..d {
            matrix[i * d + i] = 1.0;
        }
        Adapter { d, matrix }
    }

    pub fn from_matrix(d: usize, matrix: Vec<f64>) -> Result<Self> {
        if d == 0 || matrix.len() != d * d {
            return Err(Error::Shape(format!(
                "adapter for d = {d} needs {} entries, got {}",
                d * d,
                matrix.len()
            )));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite adapter entry".into()));
        }
        Ok(Adapter { d, matrix })
    }

    pub fn channels(&self) -> usize {
        self.d
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut [f64] {
        &mut self.matrix
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix
            .chunks_exact(self.d)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdNesterov,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Base-class training: SGD with Nesterov momentum, batches of 200.
    pub fn base() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            max_steps: 100,
            batch_size: 200,
            optimizer: OptimizerKind::SgdNesterov,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }

    /// Novel-class adaptation: full-support Adam, at most 60 iterations.
    pub fn novel() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            max_steps: MAX_ADAPT_STEPS,
            optimizer: OptimizerKind::Adam,
            ..TrainConfig::base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidParameter("adam betas must be in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter("adam epsilon must be positive".into()));
        }
        Ok(())
    }
}
