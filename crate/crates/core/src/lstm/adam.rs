use serde::{Deserialize, Serialize};

use super::{LstmError, NetworkParameters, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: NetworkParameters,
    pub v: NetworkParameters,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParameters, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut NetworkParameters, grads: &NetworkParameters) -> Result<()> {
        if params.num_params() != grads.num_params() || params.num_params() != self.m.num_params() {
            return Err(LstmError::Shape("parameter, gradient and moment shapes differ".into()));
        }
        self.t += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lstm::{init_params, NetworkConfig};

    fn small() -> NetworkParameters {
        let mut cfg = NetworkConfig::new(2);
        cfg.layer_sizes = vec![3, 2];
        init_params(&cfg).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = small();
        let before = p.clone();
        let mut state = AdamState::new(&p, AdamConfig::default());
        let g = p.zeros_like();
        state.step(&mut p, &g).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // At t = 1, m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut p = small();
        let before = p.flatten();
        let mut grads = p.zeros_like();
        let g: Vec<f64> = (0..p.num_params()).map(|k| (k as f64 - 20.0) * 0.37 + 0.01).collect();
        grads.set_flat(&g).unwrap();
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(&p, cfg);
        state.step(&mut p, &grads).unwrap();
        for ((after, b), gk) in p.flatten().iter().zip(&before).zip(&g) {
            let want = b - cfg.learning_rate * gk / (gk.abs() + cfg.epsilon);
            assert!((after - want).abs() < 1e-15);
            assert!(((b - after) - cfg.learning_rate * gk.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic() {
        let p0 = small();
        let mut grads = p0.zeros_like();
        let g: Vec<f64> = (0..p0.num_params()).map(|k| (k as f64).sin()).collect();
        grads.set_flat(&g).unwrap();
        let state0 = AdamState::new(&p0, AdamConfig::default());
        let (mut a, mut sa) = (p0.clone(), state0.clone());
        let (mut b, mut sb) = (p0.clone(), state0);
        sa.step(&mut a, &grads).unwrap();
        sb.step(&mut b, &grads).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }
}
