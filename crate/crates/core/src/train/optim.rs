use super::{OptimizerKind, TrainConfig};

/// Velocity buffer for SGD with Nesterov momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(n: usize) -> Self {
        SgdState {
            velocity: vec![0.0; n],
        }
    }
}

/// `v <- mu v + g; p <- p - lr (g + mu v)`.
pub fn sgd_nesterov_step(params: &mut [f64], grads: &[f64], state: &mut SgdState, lr: f64, momentum: f64) {
    debug_assert_eq!(params.len(), grads.len());
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * (g + momentum * *v);
    }
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u32,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Adam with bias correction.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, config: &TrainConfig) {
    debug_assert_eq!(params.len(), grads.len());
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
    }
}

/// Optimizer selected by a [`TrainConfig`], holding its own state.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(SgdState),
    Adam(AdamState),
}

impl Optimizer {
    pub fn new(config: &TrainConfig, n: usize) -> Self {
        match config.optimizer {
            OptimizerKind::SgdNesterov => Optimizer::Sgd(SgdState::new(n)),
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(n)),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], config: &TrainConfig) {
        match self {
            Optimizer::Sgd(s) => {
                sgd_nesterov_step(params, grads, s, config.learning_rate, config.momentum)
            }
            Optimizer::Adam(s) => adam_step(params, grads, s, config),
        }
    }
}
