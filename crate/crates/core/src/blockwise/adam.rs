//! Bias-corrected Adam with decoupled weight decay, over flat f64 vectors.

/// Hyperparameters. Weight decay is decoupled: θ ← θ − lr·m̂/(√v̂+ε) − lr·wd·θ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// Per-parameter moments and the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One in-place update. Panics if the shapes disagree; callers own layout.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hp: &AdamParams) {
    assert_eq!(params.len(), grads.len(), "gradient shape mismatch");
    assert_eq!(params.len(), state.m.len(), "state shape mismatch");
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -=
            hp.lr * m_hat / (v_hat.sqrt() + hp.epsilon) + hp.lr * hp.weight_decay * params[i];
    }
}
