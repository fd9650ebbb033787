//! Stacked LSTM regressor with a dropout + dense head, trained with Adam on
//! mean squared error.
//!
//! Gate stacks are ordered `[input, forget, candidate, output]`; each layer
//! stores input weights `4H x D`, recurrent weights `4H x H` and a bias `4H`,
//! all row-major. The candidate and cell-output transforms use the configured
//! activation (rectifier by default); the three gates are logistic.

mod adam;
mod gemm;
mod network;
mod train;

pub use adam::{AdamConfig, AdamState};
pub use network::{backward, forward, forward_batch, loss_mse, BatchCache};
pub use train::{predict_batch, predict_series, predict_targets, train, TrainingConfig, TrainingOutcome};

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LstmError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}; training diverged")]
    Divergence(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    DivergedAtEpoch { epoch: usize, loss: f64 },
    #[error("empty input: {0}")]
    Empty(String),
    #[error(transparent)]
    Data(#[from] crate::timeseries::DataError),
}

pub type Result<T> = std::result::Result<T, LstmError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output `y = f(x)`.
    #[inline]
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_features: usize,
    pub layer_sizes: Vec<usize>,
    pub dropout_rate: f64,
    #[serde(default)]
    pub activation: Activation,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn new(input_features: usize) -> Self {
        Self {
            input_features,
            layer_sizes: vec![64, 32],
            dropout_rate: 0.2,
            activation: Activation::Relu,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_features == 0 {
            return Err(LstmError::Config("input_features must be >= 1".into()));
        }
        if self.layer_sizes.is_empty() || self.layer_sizes.contains(&0) {
            return Err(LstmError::Config("layer_sizes must be non-empty with every width >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(LstmError::Config(format!("dropout rate {} not in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    pub input_size: usize,
    pub hidden: usize,
    /// `4H x D`
    pub w_ih: Vec<f64>,
    /// `4H x H`
    pub w_hh: Vec<f64>,
    /// `4H`
    pub bias: Vec<f64>,
}

impl LstmLayer {
    fn zeros(input_size: usize, hidden: usize) -> Self {
        Self {
            input_size,
            hidden,
            w_ih: vec![0.0; 4 * hidden * input_size],
            w_hh: vec![0.0; 4 * hidden * hidden],
            bias: vec![0.0; 4 * hidden],
        }
    }
}

/// Every trainable tensor. Gradients and Adam moments reuse this shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParameters {
    pub config: NetworkConfig,
    pub layers: Vec<LstmLayer>,
    /// `H_last`
    pub head_w: Vec<f64>,
    /// Length 1.
    pub head_b: Vec<f64>,
}

impl NetworkParameters {
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut input = config.input_features;
        let mut layers = Vec::with_capacity(config.layer_sizes.len());
        for &h in &config.layer_sizes {
            layers.push(LstmLayer::zeros(input, h));
            input = h;
        }
        Ok(Self {
            config: config.clone(),
            layers,
            head_w: vec![0.0; input],
            head_b: vec![0.0],
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        out
    }

    pub fn last_hidden(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden)
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(&l.w_ih);
            out.push(&l.w_hh);
            out.push(&l.bias);
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(&mut l.w_ih);
            out.push(&mut l.w_hh);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(LstmError::Shape(format!(
                "flat vector has {} entries, network has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Checks tensor sizes against the embedded config.
    pub fn check_shapes(&self) -> Result<()> {
        let expected = Self::zeros(&self.config)?;
        let ok = self.layers.len() == expected.layers.len()
            && self
                .tensors()
                .iter()
                .zip(expected.tensors())
                .all(|(a, b)| a.len() == b.len());
        if !ok {
            return Err(LstmError::Shape("parameter tensors do not match the network config".into()));
        }
        Ok(())
    }
}

/// Uniform `+-1/sqrt(fan_in)` weights, zero biases except forget gates at 1.
pub fn init_params(config: &NetworkConfig) -> Result<NetworkParameters> {
    let mut params = NetworkParameters::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut fill = |t: &mut [f64], fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        t.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
    };
    for layer in &mut params.layers {
        fill(&mut layer.w_ih, layer.input_size);
        fill(&mut layer.w_hh, layer.hidden);
        let h = layer.hidden;
        layer.bias[h..2 * h].fill(1.0);
    }
    let h_last = params.head_w.len();
    fill(&mut params.head_w, h_last);
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let cfg = NetworkConfig::new(3);
        let p = init_params(&cfg).unwrap();
        assert_eq!(p.layers[0].w_ih.len(), 256 * 3);
        assert_eq!(p.layers[0].w_hh.len(), 256 * 64);
        assert_eq!(p.layers[1].w_ih.len(), 128 * 64);
        assert_eq!(p.layers[1].w_hh.len(), 128 * 32);
        assert_eq!(p.head_w.len(), 32);
        assert!(p.layers[0].bias[64..128].iter().all(|&b| b == 1.0));
        assert!(p.layers[0].bias[..64].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_bounds_follow_fan_in() {
        let p = init_params(&NetworkConfig::new(4)).unwrap();
        let bound = 1.0 / 4f64.sqrt();
        assert!(p.layers[0].w_ih.iter().all(|v| v.abs() <= bound));
        let bound = 1.0 / 64f64.sqrt();
        assert!(p.layers[0].w_hh.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn seeding() {
        let mut cfg = NetworkConfig::new(3);
        cfg.seed = 1;
        let a = init_params(&cfg).unwrap();
        assert_eq!(a, init_params(&cfg).unwrap());
        cfg.seed = 2;
        assert_ne!(a.flatten(), init_params(&cfg).unwrap().flatten());
    }

    #[test]
    fn config_validation() {
        let mut cfg = NetworkConfig::new(3);
        cfg.layer_sizes = vec![];
        assert!(init_params(&cfg).is_err());
        let mut cfg = NetworkConfig::new(3);
        cfg.dropout_rate = 1.0;
        assert!(init_params(&cfg).is_err());
        assert!(init_params(&NetworkConfig::new(0)).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let p = init_params(&NetworkConfig::new(2)).unwrap();
        let mut q = p.zeros_like();
        q.set_flat(&p.flatten()).unwrap();
        assert_eq!(p, q);
        assert!(q.set_flat(&[0.0]).is_err());
    }
}
