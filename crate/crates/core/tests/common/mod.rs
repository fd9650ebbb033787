//! Independent oracles shared by the integration suites. Nothing here calls
//! into the code paths it is used to check.
#![allow(dead_code)]

use gridcast_core::lp::LinearProgram;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Oracle {
    Optimal(f64),
    Infeasible,
    Unbounded,
}

/// Dense `a.x <= b` / `a.x = b` rows, bounds included as rows.
fn dense_rows(lp: &LinearProgram, box_limit: Option<f64>) -> (Vec<(Vec<f64>, f64)>, Vec<(Vec<f64>, f64)>) {
    let n = lp.num_vars();
    let dense = |terms: &[(usize, f64)]| {
        let mut row = vec![0.0; n];
        for &(j, a) in terms {
            row[j] += a;
        }
        row
    };
    let eq = lp.eq.iter().map(|c| (dense(&c.terms), c.rhs)).collect();
    let mut le: Vec<(Vec<f64>, f64)> = lp.le.iter().map(|c| (dense(&c.terms), c.rhs)).collect();
    for j in 0..n {
        let mut unit = vec![0.0; n];
        unit[j] = 1.0;
        let hi = if lp.upper[j].is_finite() { Some(lp.upper[j]) } else { box_limit };
        let lo = if lp.lower[j].is_finite() { Some(lp.lower[j]) } else { box_limit.map(|m| -m) };
        if let Some(hi) = hi {
            le.push((unit.clone(), hi));
        }
        if let Some(lo) = lo {
            le.push((unit.iter().map(|v| -v).collect(), -lo));
        }
    }
    (eq, le)
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_square(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

fn combinations(n: usize, k: usize, f: &mut dyn FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, f);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::new(), f);
}

/// Minimum of the objective over every basic feasible point of the polytope
/// (optionally clipped to `|x_j| <= box_limit` for unbounded directions).
fn best_vertex(lp: &LinearProgram, box_limit: Option<f64>) -> Option<f64> {
    let n = lp.num_vars();
    let (eq, le) = dense_rows(lp, box_limit);
    let all: Vec<(Vec<f64>, f64)> = eq.iter().chain(le.iter()).cloned().collect();
    let feas_tol = 1e-7;
    let mut best: Option<f64> = None;
    combinations(all.len(), n, &mut |subset| {
        let a = subset.iter().map(|&i| all[i].0.clone()).collect();
        let b = subset.iter().map(|&i| all[i].1).collect();
        let Some(x) = solve_square(a, b) else { return };
        let dot = |row: &[f64]| row.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>();
        let scale = |rhs: f64| feas_tol * (1.0 + rhs.abs());
        if eq.iter().any(|(r, rhs)| (dot(r) - rhs).abs() > scale(*rhs)) {
            return;
        }
        if le.iter().any(|(r, rhs)| dot(r) - rhs > scale(*rhs)) {
            return;
        }
        let obj = lp.objective_at(&x);
        best = Some(best.map_or(obj, |b: f64| b.min(obj)));
    });
    best
}

/// Vertex-enumeration oracle. Unboundedness is detected by comparing optima
/// under two artificial boxes an order of magnitude apart.
pub fn vertex_oracle(lp: &LinearProgram) -> Oracle {
    let fully_boxed = (0..lp.num_vars()).all(|j| lp.lower[j].is_finite() && lp.upper[j].is_finite());
    if fully_boxed {
        return best_vertex(lp, None).map_or(Oracle::Infeasible, Oracle::Optimal);
    }
    let small = best_vertex(lp, Some(1e3));
    let large = best_vertex(lp, Some(1e4));
    match (small, large) {
        (None, None) => Oracle::Infeasible,
        (Some(a), Some(b)) if (a - b).abs() <= 1e-6 * (1.0 + a.abs()) => Oracle::Optimal(a),
        (_, Some(_)) => Oracle::Unbounded,
        (Some(_), None) => unreachable!("larger box contains the smaller"),
    }
}

/// Random LP with at most 6 variables and 10 rows. `boxed` gives every
/// variable finite bounds; otherwise some variables are only bounded below.
/// `anchored` makes a random interior point feasible.
pub fn random_lp(rng: &mut ChaCha8Rng, boxed: bool, anchored: bool) -> LinearProgram {
    let n = rng.gen_range(2..=6);
    let mut lp = LinearProgram::new();
    let mut anchor = Vec::with_capacity(n);
    for j in 0..n {
        let cost = (rng.gen_range(-10.0..10.0f64) * 4.0).round() / 4.0;
        let lo = rng.gen_range(-5.0..0.0f64).round();
        let hi = if boxed || rng.gen_bool(0.5) { lo + rng.gen_range(1.0..8.0f64).round() } else { f64::INFINITY };
        lp.add_var(format!("x{j}"), cost, lo, hi);
        let top = if hi.is_finite() { hi } else { lo + 5.0 };
        anchor.push(rng.gen_range(lo..top));
    }
    let rows = rng.gen_range(1..=10);
    for _ in 0..rows {
        let mut terms: Vec<(usize, f64)> = Vec::new();
        for j in 0..n {
            if rng.gen_bool(0.7) {
                terms.push((j, rng.gen_range(-5i32..=5) as f64));
            }
        }
        let act: f64 = terms.iter().map(|&(j, a)| a * anchor[j]).sum();
        let rhs = if anchored {
            (act + rng.gen_range(0.0..4.0)).round().max(act.ceil())
        } else {
            rng.gen_range(-15i32..=15) as f64
        };
        if rng.gen_bool(0.15) && anchored {
            // Equality through a rational-valued anchor would rarely be
            // representable; use a row satisfied by the anchor exactly.
            lp.add_eq(terms, act);
        } else {
            lp.add_le(terms, rhs);
        }
    }
    lp
}

use gridcast_core::dispatch::{default_fleet, DispatchCase, GeneratorSpec};

/// Random fleet of 1-4 units with distinct costs below 100 $/MWh.
pub fn random_fleet(rng: &mut ChaCha8Rng) -> Vec<GeneratorSpec> {
    if rng.gen_bool(0.5) {
        return default_fleet();
    }
    let n = rng.gen_range(1..=4);
    let mut fleet: Vec<GeneratorSpec> = (0..n)
        .map(|v| GeneratorSpec {
            name: format!("U{v}"),
            cost: 10.0 + 15.0 * v as f64 + rng.gen_range(0.0..10.0),
            pmax: rng.gen_range(10.0..60.0),
            pmin: 0.0,
            ramp: rng.gen_range(5.0..40.0),
            rt_available: rng.gen_bool(0.5),
            gas_fired: rng.gen_bool(0.5),
        })
        .collect();
    if !fleet.iter().any(|g| g.rt_available) {
        fleet[n - 1].rt_available = true;
    }
    fleet
}

/// Random case with `forecast == actual`.
pub fn random_case(rng: &mut ChaCha8Rng) -> DispatchCase {
    let horizon = rng.gen_range(1..=24);
    let demand: Vec<f64> = (0..horizon).map(|_| rng.gen_range(0.0..150.0)).collect();
    let pv: Vec<f64> = (0..horizon)
        .map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..80.0) })
        .collect();
    DispatchCase {
        demand,
        forecast: pv.clone(),
        actual: pv,
        fleet: random_fleet(rng),
        voll: rng.gen_range(200.0..2000.0),
        emission_factor: 202.0,
    }
}

use gridcast_core::lstm::{init_params, Activation, NetworkConfig, NetworkParameters};

/// Central differences of `f` around `x`, one coordinate at a time.
pub fn central_difference(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + step;
            let up = f(&probe);
            probe[k] = x[k] - step;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Agreement test: absolute floor `abs`, otherwise relative to the larger magnitude.
pub fn grad_close(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= abs || diff <= rel * analytic.abs().max(numeric.abs())
}

pub struct GradProblem {
    pub params: NetworkParameters,
    pub windows: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

/// A network with at most 3 features, widths up to [4, 3] and lookback up to 6,
/// plus a batch of two windows. Biases are randomized too so no gate sits at
/// its initial symmetric point.
pub fn random_grad_problem(rng: &mut ChaCha8Rng) -> GradProblem {
    let features = rng.gen_range(1..=3);
    let mut layer_sizes = vec![rng.gen_range(1..=4)];
    if rng.gen_bool(0.7) {
        layer_sizes.push(rng.gen_range(1..=3));
    }
    let activation = if rng.gen_bool(0.75) { Activation::Relu } else { Activation::Tanh };
    let config = NetworkConfig {
        input_features: features,
        layer_sizes,
        dropout_rate: if rng.gen_bool(0.5) { 0.2 } else { 0.0 },
        activation,
        seed: rng.gen(),
    };
    let mut params = init_params(&config).unwrap();
    for layer in &mut params.layers {
        for b in &mut layer.bias {
            *b += rng.gen_range(-0.5..0.5);
        }
    }
    params.head_b[0] = rng.gen_range(-0.5..0.5);
    let lookback = rng.gen_range(1..=6);
    let windows = (0..2)
        .map(|_| (0..lookback * features).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    let labels = (0..2).map(|_| rng.gen_range(0.0..1.0)).collect();
    GradProblem { params, windows, labels }
}
