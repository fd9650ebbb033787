use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::network::{backward, forward_batch, loss_mse};
use super::{init_params, LstmError, NetworkConfig, NetworkParameters, Result};
use crate::timeseries::{DarkHourMask, ForecastSeries, NormalizationParams, TimeSeriesDataset, WindowSpec, WindowedSample};

const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(LstmError::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LstmError::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub params: NetworkParameters,
    /// Mean training-mode MSE of each epoch.
    pub loss_history: Vec<f64>,
}

/// Minibatch Adam on batch-mean MSE. Sample order and dropout masks come
/// from `tc.seed`, initial weights from `net.seed`.
pub fn train(samples: &[WindowedSample], net: &NetworkConfig, tc: &TrainingConfig) -> Result<TrainingOutcome> {
    tc.validate()?;
    if samples.is_empty() {
        return Err(LstmError::Empty("training samples".into()));
    }
    let mut params = init_params(net)?;
    let adam = AdamConfig {
        learning_rate: tc.learning_rate,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&params, adam);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut loss_history = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        if tc.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let windows: Vec<&[f64]> = chunk.iter().map(|&k| samples[k].input.as_slice()).collect();
            let labels: Vec<f64> = chunk.iter().map(|&k| samples[k].label).collect();
            let cache = forward_batch(&params, &windows, true, rng.next_u64()).map_err(|e| match e {
                LstmError::Divergence(_) => LstmError::DivergedAtEpoch { epoch, loss: f64::NAN },
                other => other,
            })?;
            total += loss_mse(&cache.outputs, &labels)? * chunk.len() as f64;
            let grads = backward(&params, &cache, &labels)?;
            state.step(&mut params, &grads)?;
        }
        let loss = total / samples.len() as f64;
        if !loss.is_finite() || !params.all_finite() {
            return Err(LstmError::DivergedAtEpoch { epoch, loss });
        }
        loss_history.push(loss);
    }
    Ok(TrainingOutcome { params, loss_history })
}

/// Inference-mode outputs for many windows.
pub fn predict_batch(params: &NetworkParameters, windows: &[&[f64]]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(PREDICT_CHUNK) {
        out.extend(forward_batch(params, chunk, false, 0)?.outputs);
    }
    Ok(out)
}

/// Forecasts the target feature at dataset rows `targets`, each from the
/// window of `lookback` rows ending `horizon` hours before it. Outputs are
/// rescaled to MW, floored at 0 and dark-masked.
pub fn predict_targets(
    params: &NetworkParameters,
    ds: &TimeSeriesDataset,
    spec: &WindowSpec,
    normalizer: &NormalizationParams,
    mask: &DarkHourMask,
    targets: Range<usize>,
) -> Result<ForecastSeries> {
    spec.validate(ds.num_features())?;
    if normalizer.num_features() != ds.num_features() || params.config.input_features != ds.num_features() {
        return Err(LstmError::Shape(format!(
            "dataset has {} features, normalizer {}, network {}",
            ds.num_features(),
            normalizer.num_features(),
            params.config.input_features
        )));
    }
    let first = spec.min_rows() - 1;
    if targets.is_empty() || targets.start < first || targets.end > ds.len() {
        return Err(LstmError::Data(crate::timeseries::DataError::TooShort {
            required: spec.min_rows(),
            available: targets.end.min(ds.len()),
            lookback: spec.lookback,
            horizon: spec.horizon,
        }));
    }
    let normalized = normalizer.transform(ds);
    let f = ds.num_features();
    let windows: Vec<&[f64]> = targets
        .clone()
        .map(|t| {
            let start = t - first;
            &normalized.values[start * f..(start + spec.lookback) * f]
        })
        .collect();
    let raw = predict_batch(params, &windows)?;
    let timestamps = ds.timestamps()[targets].to_vec();
    let values = raw
        .iter()
        .zip(&timestamps)
        .map(|(&z, ts)| {
            if mask.is_dark_at(ts) {
                0.0
            } else {
                normalizer.denormalize_value(spec.target, z).max(0.0)
            }
        })
        .collect();
    Ok(ForecastSeries::new(ds.feature_names()[spec.target].clone(), timestamps, values)?)
}

/// Forecast for every row that has a full window behind it.
pub fn predict_series(
    params: &NetworkParameters,
    ds: &TimeSeriesDataset,
    spec: &WindowSpec,
    normalizer: &NormalizationParams,
    mask: &DarkHourMask,
) -> Result<ForecastSeries> {
    predict_targets(params, ds, spec, normalizer, mask, spec.min_rows() - 1..ds.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::parse_timestamp;
    use chrono::{Datelike, Timelike};

    fn tiny_net() -> NetworkConfig {
        NetworkConfig {
            input_features: 2,
            layer_sizes: vec![4, 3],
            dropout_rate: 0.2,
            activation: crate::lstm::Activation::Relu,
            seed: 3,
        }
    }

    fn toy_samples() -> Vec<WindowedSample> {
        (0..10)
            .map(|k| WindowedSample {
                input: (0..8).map(|v| ((k * 8 + v) as f64 * 0.37).sin().abs()).collect(),
                label: (k as f64 * 0.9).cos().abs(),
            })
            .collect()
    }

    #[test]
    fn history_length_and_determinism() {
        let tc = TrainingConfig { epochs: 5, batch_size: 4, ..Default::default() };
        let a = train(&toy_samples(), &tiny_net(), &tc).unwrap();
        assert_eq!(a.loss_history.len(), 5);
        let b = train(&toy_samples(), &tiny_net(), &tc).unwrap();
        let bits = |h: &[f64]| h.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.loss_history), bits(&b.loss_history));
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn rejects_bad_configs() {
        let tc = TrainingConfig { epochs: 0, ..Default::default() };
        assert!(train(&toy_samples(), &tiny_net(), &tc).is_err());
        assert!(train(&[], &tiny_net(), &TrainingConfig::default()).is_err());
    }

    fn hourly(n: usize, f: impl Fn(usize) -> [f64; 2]) -> TimeSeriesDataset {
        let start = parse_timestamp("2023-01-01T00").unwrap();
        let stamps = (0..n).map(|k| start + chrono::Duration::hours(k as i64)).collect();
        let values = (0..n).flat_map(f).collect();
        TimeSeriesDataset::new(stamps, values, vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn series_alignment_clipping_and_mask() {
        let ds = hourly(100, |k| [(k % 24) as f64, 1.0 + (k % 5) as f64]);
        let spec = WindowSpec::new(6, 3, 0);
        let norm = NormalizationParams::fit(&ds);
        let mut params = init_params(&tiny_net()).unwrap();
        // Constant output far below the training range: denormalizes negative.
        params.head_w.fill(0.0);
        params.head_b = vec![-0.5];
        let mut mask = DarkHourMask::default();
        mask.set(1, 5, true);
        let fc = predict_series(&params, &ds, &spec, &norm, &mask).unwrap();
        assert_eq!(fc.len(), 100 - 6 - 3 + 1);
        assert_eq!(fc.timestamps[0], ds.timestamps()[8]);
        assert!(fc.values.iter().all(|&v| v == 0.0));

        params.head_b = vec![0.5];
        let fc = predict_series(&params, &ds, &spec, &norm, &mask).unwrap();
        for (ts, v) in fc.timestamps.iter().zip(&fc.values) {
            if ts.month() == 1 && ts.hour() == 5 {
                assert_eq!(*v, 0.0);
            } else {
                assert!((v - 11.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn insufficient_history() {
        let ds = hourly(8, |_| [1.0, 2.0]);
        let spec = WindowSpec::new(6, 3, 0);
        let norm = NormalizationParams::fit(&ds);
        let params = init_params(&tiny_net()).unwrap();
        let err = predict_series(&params, &ds, &spec, &norm, &DarkHourMask::default());
        assert!(err.is_err());
        let err = predict_targets(&params, &hourly(20, |_| [1.0, 2.0]), &spec, &norm, &DarkHourMask::default(), 3..10);
        assert!(err.is_err());
    }
}
