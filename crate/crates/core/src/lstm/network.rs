use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::gemm;
use super::{LstmError, NetworkParameters, Result};

#[inline]
fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations kept from a batched forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct BatchCache {
    pub batch: usize,
    pub seq: usize,
    /// Time-major `seq x B x F`.
    inputs: Vec<f64>,
    layers: Vec<LayerCache>,
    /// `B x H_last`; 0 for dropped units, `1/(1-rate)` for kept ones, 1 at inference.
    dropout_scale: Vec<f64>,
    pub outputs: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    /// Activated gates `seq x B x 4H` in `[i, f, g, o]` order.
    gates: Vec<f64>,
    /// `seq x B x H`
    cells: Vec<f64>,
    /// `seq x B x H`
    hidden: Vec<f64>,
}

/// Runs a batch of `lookback x F` windows (row-major) through the network.
/// Dropout is applied only when `training`, with masks drawn from `dropout_seed`.
pub fn forward_batch(
    params: &NetworkParameters,
    windows: &[&[f64]],
    training: bool,
    dropout_seed: u64,
) -> Result<BatchCache> {
    let cfg = &params.config;
    let f = cfg.input_features;
    let batch = windows.len();
    if batch == 0 {
        return Err(LstmError::Empty("forward batch".into()));
    }
    let len = windows[0].len();
    if len == 0 || len % f != 0 || windows.iter().any(|w| w.len() != len) {
        return Err(LstmError::Shape(format!(
            "windows must all be lookback x {f} (first has {len} values)"
        )));
    }
    let seq = len / f;

    let mut inputs = vec![0.0; seq * batch * f];
    for (b, w) in windows.iter().enumerate() {
        for t in 0..seq {
            let dst = (t * batch + b) * f;
            inputs[dst..dst + f].copy_from_slice(&w[t * f..(t + 1) * f]);
        }
    }

    let act = cfg.activation;
    let mut layers: Vec<LayerCache> = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let (d, h) = (layer.input_size, layer.hidden);
        let h4 = 4 * h;
        let x_all: &[f64] = if l == 0 { &inputs } else { &layers[l - 1].hidden };

        let mut gates = vec![0.0; seq * batch * h4];
        for row in gates.chunks_exact_mut(h4) {
            row.copy_from_slice(&layer.bias);
        }
        gemm(seq * batch, d, h4, x_all, false, &layer.w_ih, true, 1.0, &mut gates);

        let mut cells = vec![0.0; seq * batch * h];
        let mut hidden = vec![0.0; seq * batch * h];
        for t in 0..seq {
            let (z_off, s_off) = (t * batch * h4, t * batch * h);
            if t > 0 {
                let (prev_h, _) = hidden.split_at(s_off);
                let prev_h = &prev_h[s_off - batch * h..];
                gemm(batch, h, h4, prev_h, false, &layer.w_hh, true, 1.0, &mut gates[z_off..z_off + batch * h4]);
            }
            for b in 0..batch {
                let z = &mut gates[z_off + b * h4..z_off + (b + 1) * h4];
                for j in 0..h {
                    let i_g = logistic(z[j]);
                    let f_g = logistic(z[h + j]);
                    let g_g = act.apply(z[2 * h + j]);
                    let o_g = logistic(z[3 * h + j]);
                    z[j] = i_g;
                    z[h + j] = f_g;
                    z[2 * h + j] = g_g;
                    z[3 * h + j] = o_g;
                    let c_prev = if t > 0 { cells[s_off - batch * h + b * h + j] } else { 0.0 };
                    let c = f_g * c_prev + i_g * g_g;
                    cells[s_off + b * h + j] = c;
                    hidden[s_off + b * h + j] = o_g * act.apply(c);
                }
            }
        }
        layers.push(LayerCache { gates, cells, hidden });
    }

    let h_last = params.last_hidden();
    let mut dropout_scale = vec![1.0; batch * h_last];
    if training && cfg.dropout_rate > 0.0 {
        let keep_scale = 1.0 / (1.0 - cfg.dropout_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        for s in dropout_scale.iter_mut() {
            *s = if rng.gen::<f64>() < cfg.dropout_rate { 0.0 } else { keep_scale };
        }
    }

    let top = &layers.last().expect("at least one layer").hidden;
    let last = &top[(seq - 1) * batch * h_last..];
    let outputs: Vec<f64> = (0..batch)
        .map(|b| {
            let hb = &last[b * h_last..(b + 1) * h_last];
            let sb = &dropout_scale[b * h_last..(b + 1) * h_last];
            params.head_b[0]
                + hb.iter()
                    .zip(sb)
                    .zip(&params.head_w)
                    .map(|((h, s), w)| h * s * w)
                    .sum::<f64>()
        })
        .collect();
    if outputs.iter().any(|y| !y.is_finite()) {
        return Err(LstmError::Divergence("network output".into()));
    }

    Ok(BatchCache {
        batch,
        seq,
        inputs,
        layers,
        dropout_scale,
        outputs,
    })
}

/// Single-window convenience wrapper around [`forward_batch`].
pub fn forward(
    params: &NetworkParameters,
    window: &[f64],
    training: bool,
    dropout_seed: u64,
) -> Result<(f64, BatchCache)> {
    let cache = forward_batch(params, &[window], training, dropout_seed)?;
    Ok((cache.outputs[0], cache))
}

pub fn loss_mse(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(LstmError::Empty("loss inputs".into()));
    }
    if predictions.len() != labels.len() {
        return Err(LstmError::Shape(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / predictions.len() as f64)
}

/// Gradient of the batch-mean squared error with respect to every parameter,
/// by backpropagation through time over the cached forward pass.
pub fn backward(params: &NetworkParameters, cache: &BatchCache, labels: &[f64]) -> Result<NetworkParameters> {
    let batch = cache.batch;
    let seq = cache.seq;
    if labels.len() != batch {
        return Err(LstmError::Shape(format!("{} labels for a cached batch of {batch}", labels.len())));
    }
    if cache.layers.len() != params.layers.len() {
        return Err(LstmError::Shape("cache was produced by a different network".into()));
    }
    let act = params.config.activation;
    let mut grads = params.zeros_like();

    let dy: Vec<f64> = cache
        .outputs
        .iter()
        .zip(labels)
        .map(|(y, l)| 2.0 * (y - l) / batch as f64)
        .collect();
    let h_last = params.last_hidden();
    let top = &cache.layers.last().expect("at least one layer").hidden;
    let last = &top[(seq - 1) * batch * h_last..];
    grads.head_b[0] = dy.iter().sum();
    for b in 0..batch {
        for j in 0..h_last {
            grads.head_w[j] += dy[b] * last[b * h_last + j] * cache.dropout_scale[b * h_last + j];
        }
    }

    // Gradient arriving at the current layer's hidden outputs from above.
    let mut d_hidden = vec![0.0; seq * batch * h_last];
    let off = (seq - 1) * batch * h_last;
    for b in 0..batch {
        for j in 0..h_last {
            d_hidden[off + b * h_last + j] = dy[b] * params.head_w[j] * cache.dropout_scale[b * h_last + j];
        }
    }

    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let lc = &cache.layers[l];
        let (d, h) = (layer.input_size, layer.hidden);
        let h4 = 4 * h;
        let mut dz = vec![0.0; seq * batch * h4];
        let mut dh_next = vec![0.0; batch * h];
        let mut dc_next = vec![0.0; batch * h];

        for t in (0..seq).rev() {
            let (z_off, s_off) = (t * batch * h4, t * batch * h);
            for b in 0..batch {
                let gates = &lc.gates[z_off + b * h4..z_off + (b + 1) * h4];
                let dzb = &mut dz[z_off + b * h4..z_off + (b + 1) * h4];
                for j in 0..h {
                    let k = b * h + j;
                    let (i_g, f_g, g_g, o_g) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                    let c = lc.cells[s_off + k];
                    let c_prev = if t > 0 { lc.cells[s_off - batch * h + k] } else { 0.0 };
                    let ac = act.apply(c);
                    let dh = d_hidden[s_off + k] + dh_next[k];
                    let dc = dh * o_g * act.grad_from_output(ac) + dc_next[k];
                    dzb[j] = dc * g_g * i_g * (1.0 - i_g);
                    dzb[h + j] = dc * c_prev * f_g * (1.0 - f_g);
                    dzb[2 * h + j] = dc * i_g * act.grad_from_output(g_g);
                    dzb[3 * h + j] = dh * ac * o_g * (1.0 - o_g);
                    dc_next[k] = dc * f_g;
                }
            }
            if t > 0 {
                gemm(batch, h4, h, &dz[z_off..z_off + batch * h4], false, &layer.w_hh, false, 0.0, &mut dh_next);
            }
        }

        let x_all: &[f64] = if l == 0 { &cache.inputs } else { &cache.layers[l - 1].hidden };
        let g = &mut grads.layers[l];
        gemm(h4, seq * batch, d, &dz, true, x_all, false, 0.0, &mut g.w_ih);
        if seq > 1 {
            let n_prev = (seq - 1) * batch;
            gemm(h4, n_prev, h, &dz[batch * h4..], true, &lc.hidden[..n_prev * h], false, 0.0, &mut g.w_hh);
        }
        for row in dz.chunks_exact(h4) {
            for (gb, v) in g.bias.iter_mut().zip(row) {
                *gb += v;
            }
        }
        if l > 0 {
            let mut below = vec![0.0; seq * batch * d];
            gemm(seq * batch, h4, d, &dz, false, &layer.w_ih, false, 0.0, &mut below);
            d_hidden = below;
        }
    }
    if !grads.all_finite() {
        return Err(LstmError::Divergence("gradients".into()));
    }
    Ok(grads)
}
