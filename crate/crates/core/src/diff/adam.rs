//! Adaptive-moment optimizer with bias correction.

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// One [`AdamState`] per tensor of a parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Adam {
            config,
            states: params.iter().map(|t| AdamState::new(t.numel())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), self.states.len());
        assert_eq!(grads.len(), self.states.len());
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.states) {
            adam_step(p.data_mut(), g, s, &self.config);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_by_hand() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut p = [1.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[0.5], &mut s, &cfg);
        // m̂ = 0.5, v̂ = 0.25, step = 0.1 · 0.5 / (0.5 + 1e-8)
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert_eq!(p[0], expected);
        assert!((1.0 - p[0] - 0.0999999980).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = [0.3, -2.0];
        let mut s = AdamState::new(2);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0, 0.0], &mut s, &AdamConfig::default());
        }
        assert_eq!(p, [0.3, -2.0]);
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let mut params = vec![Tensor::vector(vec![1.0, 2.0, 3.0])];
            let mut opt = Adam::new(AdamConfig::default(), &params);
            for k in 0..50 {
                let g: Vec<f64> = params[0].data().iter().map(|x| 2.0 * x + k as f64 * 0.01).collect();
                opt.step(&mut params, &[g]);
            }
            params
        };
        assert_eq!(run(), run());
    }
}
