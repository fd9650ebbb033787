//! Linear programs in minimization form and a dense two-phase primal simplex.
//!
//! The solver works on the standard form `min c'y, A y = b, y >= 0` obtained by
//! shifting finite lower bounds to zero, mirroring variables that only have an
//! upper bound, splitting free variables into two non-negative parts, turning
//! finite upper bounds into rows and adding one slack per inequality row.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITERS: usize = 50_000;
/// Consecutive degenerate pivots before switching to Bland's rule.
const STALL_THRESHOLD: usize = 50;

#[derive(Debug, Error, PartialEq)]
pub enum LpError {
    #[error("malformed LP: {0}")]
    Malformed(String),
    #[error("simplex iteration limit of {0} reached")]
    IterationLimit(usize),
    #[error("solution has {got} values, LP has {expected} variables")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    /// Sparse `(variable, coefficient)` terms.
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl Constraint {
    fn activity(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(j, a)| a * x[j]).sum()
    }
}

/// `min c.x` subject to equality rows, `<=` rows and per-variable bounds
/// (infinite bounds allowed).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearProgram {
    pub names: Vec<String>,
    pub cost: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub eq: Vec<Constraint>,
    pub le: Vec<Constraint>,
}

impl LinearProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn add_var(&mut self, name: impl Into<String>, cost: f64, lower: f64, upper: f64) -> usize {
        self.names.push(name.into());
        self.cost.push(cost);
        self.lower.push(lower);
        self.upper.push(upper);
        self.cost.len() - 1
    }

    pub fn add_eq(&mut self, terms: Vec<(usize, f64)>, rhs: f64) {
        self.eq.push(Constraint { terms, rhs });
    }

    pub fn add_le(&mut self, terms: Vec<(usize, f64)>, rhs: f64) {
        self.le.push(Constraint { terms, rhs });
    }

    /// Stored as the negated `<=` row.
    pub fn add_ge(&mut self, terms: Vec<(usize, f64)>, rhs: f64) {
        let terms = terms.into_iter().map(|(j, a)| (j, -a)).collect();
        self.le.push(Constraint { terms, rhs: -rhs });
    }

    pub fn objective_at(&self, x: &[f64]) -> f64 {
        self.cost.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    pub fn validate(&self) -> Result<(), LpError> {
        let n = self.num_vars();
        if self.names.len() != n || self.lower.len() != n || self.upper.len() != n {
            return Err(LpError::Malformed("per-variable vectors differ in length".into()));
        }
        for j in 0..n {
            if !self.cost[j].is_finite() {
                return Err(LpError::Malformed(format!("cost of {} is not finite", self.names[j])));
            }
            if self.lower[j].is_nan() || self.upper[j].is_nan() || self.lower[j] > self.upper[j] {
                return Err(LpError::Malformed(format!(
                    "bounds [{}, {}] of {} are inconsistent",
                    self.lower[j], self.upper[j], self.names[j]
                )));
            }
            if self.lower[j] == f64::INFINITY || self.upper[j] == f64::NEG_INFINITY {
                return Err(LpError::Malformed(format!("bounds of {} exclude every value", self.names[j])));
            }
        }
        for (kind, rows) in [("equality", &self.eq), ("inequality", &self.le)] {
            for (i, row) in rows.iter().enumerate() {
                if !row.rhs.is_finite() {
                    return Err(LpError::Malformed(format!("{kind} row {i} has non-finite rhs")));
                }
                for &(j, a) in &row.terms {
                    if j >= n {
                        return Err(LpError::Malformed(format!(
                            "{kind} row {i} references variable {j} of {n}"
                        )));
                    }
                    if !a.is_finite() {
                        return Err(LpError::Malformed(format!("{kind} row {i} has a non-finite coefficient")));
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for LinearProgram {
    /// Plain-text listing in the spirit of the CPLEX LP format.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let term_list = |terms: &mut dyn Iterator<Item = (usize, f64)>| -> String {
            let mut out = String::new();
            for (j, a) in terms {
                let sign = if a < 0.0 { "-" } else { "+" };
                out.push_str(&format!(" {sign} {} {}", a.abs(), self.names[j]));
            }
            if out.is_empty() {
                out.push_str(" 0");
            }
            out
        };
        writeln!(f, "Minimize")?;
        writeln!(
            f,
            " obj:{}",
            term_list(&mut self.cost.iter().copied().enumerate().filter(|(_, c)| *c != 0.0))
        )?;
        writeln!(f, "Subject To")?;
        for (i, row) in self.eq.iter().enumerate() {
            writeln!(f, " e{i}:{} = {}", term_list(&mut row.terms.iter().copied()), row.rhs)?;
        }
        for (i, row) in self.le.iter().enumerate() {
            writeln!(f, " l{i}:{} <= {}", term_list(&mut row.terms.iter().copied()), row.rhs)?;
        }
        writeln!(f, "Bounds")?;
        for j in 0..self.num_vars() {
            let (lo, hi) = (self.lower[j], self.upper[j]);
            match (lo.is_finite(), hi.is_finite()) {
                (false, false) => writeln!(f, " {} free", self.names[j])?,
                (true, false) => writeln!(f, " {} >= {lo}", self.names[j])?,
                (false, true) => writeln!(f, " -inf <= {} <= {hi}", self.names[j])?,
                (true, true) => writeln!(f, " {lo} <= {} <= {hi}", self.names[j])?,
            }
        }
        writeln!(f, "End")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub status: LpStatus,
    /// One value per LP variable; meaningful only when `Optimal`.
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Equality { row: usize, residual: f64 },
    Inequality { row: usize, excess: f64 },
    LowerBound { var: usize, by: f64 },
    UpperBound { var: usize, by: f64 },
    Objective { reported: f64, recomputed: f64 },
}

impl Violation {
    pub fn magnitude(&self) -> f64 {
        match *self {
            Violation::Equality { residual, .. } => residual.abs(),
            Violation::Inequality { excess, .. } => excess,
            Violation::LowerBound { by, .. } | Violation::UpperBound { by, .. } => by,
            Violation::Objective { reported, recomputed } => (reported - recomputed).abs(),
        }
    }
}

/// Every row, bound or objective mismatch exceeding `tol`. Empty means the
/// point is feasible and the reported objective is consistent.
pub fn check_solution(lp: &LinearProgram, sol: &LpSolution, tol: f64) -> Result<Vec<Violation>, LpError> {
    let x = &sol.x;
    if x.len() != lp.num_vars() {
        return Err(LpError::Dimension {
            expected: lp.num_vars(),
            got: x.len(),
        });
    }
    let mut out = Vec::new();
    for (row, c) in lp.eq.iter().enumerate() {
        let residual = c.activity(x) - c.rhs;
        if residual.abs() > tol {
            out.push(Violation::Equality { row, residual });
        }
    }
    for (row, c) in lp.le.iter().enumerate() {
        let excess = c.activity(x) - c.rhs;
        if excess > tol {
            out.push(Violation::Inequality { row, excess });
        }
    }
    for var in 0..lp.num_vars() {
        if lp.lower[var] - x[var] > tol {
            out.push(Violation::LowerBound { var, by: lp.lower[var] - x[var] });
        }
        if x[var] - lp.upper[var] > tol {
            out.push(Violation::UpperBound { var, by: x[var] - lp.upper[var] });
        }
    }
    let recomputed = lp.objective_at(x);
    if (recomputed - sol.objective).abs() > tol {
        out.push(Violation::Objective {
            reported: sol.objective,
            recomputed,
        });
    }
    Ok(out)
}

/// How an original variable is expressed through standard-form columns.
#[derive(Debug, Clone, Copy)]
enum ColMap {
    /// `x = offset + y`
    Shifted { col: usize, offset: f64 },
    /// `x = offset - y`
    Mirrored { col: usize, offset: f64 },
    /// `x = y_pos - y_neg`
    Split { pos: usize, neg: usize },
}

pub fn solve_lp(lp: &LinearProgram, tol: f64, max_iters: usize) -> Result<LpSolution, LpError> {
    lp.validate()?;
    let n = lp.num_vars();

    // Structural columns.
    let mut maps = Vec::with_capacity(n);
    let mut col_cost = Vec::new();
    let mut bound_rows: Vec<(usize, f64)> = Vec::new();
    for j in 0..n {
        let (lo, hi, c) = (lp.lower[j], lp.upper[j], lp.cost[j]);
        let col = col_cost.len();
        if lo.is_finite() {
            maps.push(ColMap::Shifted { col, offset: lo });
            col_cost.push(c);
            if hi.is_finite() {
                bound_rows.push((col, hi - lo));
            }
        } else if hi.is_finite() {
            maps.push(ColMap::Mirrored { col, offset: hi });
            col_cost.push(-c);
        } else {
            maps.push(ColMap::Split { pos: col, neg: col + 1 });
            col_cost.push(c);
            col_cost.push(-c);
        }
    }
    let n_struct = col_cost.len();

    // Rows in terms of structural columns: (dense coefficients, rhs, is_le).
    let mut rows: Vec<(Vec<f64>, f64, bool)> = Vec::new();
    let mut push_row = |terms: &[(usize, f64)], rhs: f64, is_le: bool| {
        let mut coeffs = vec![0.0; n_struct];
        let mut rhs = rhs;
        for &(j, a) in terms {
            match maps[j] {
                ColMap::Shifted { col, offset } => {
                    coeffs[col] += a;
                    rhs -= a * offset;
                }
                ColMap::Mirrored { col, offset } => {
                    coeffs[col] -= a;
                    rhs -= a * offset;
                }
                ColMap::Split { pos, neg } => {
                    coeffs[pos] += a;
                    coeffs[neg] -= a;
                }
            }
        }
        rows.push((coeffs, rhs, is_le));
    };
    for c in &lp.eq {
        push_row(&c.terms, c.rhs, false);
    }
    for c in &lp.le {
        push_row(&c.terms, c.rhs, true);
    }
    for &(col, cap) in &bound_rows {
        let mut coeffs = vec![0.0; n_struct];
        coeffs[col] = 1.0;
        rows.push((coeffs, cap, true));
    }

    let mut tableau = Tableau::build(&rows, n_struct, tol);
    let mut iterations = 0;

    // Phase 1.
    if tableau.n_art > 0 {
        let phase1_cost: Vec<f64> = (0..tableau.n_cols)
            .map(|c| if tableau.is_artificial(c) { 1.0 } else { 0.0 })
            .collect();
        tableau.set_costs(&phase1_cost);
        match tableau.run(&mut iterations, max_iters)? {
            PhaseOutcome::Optimal => {}
            PhaseOutcome::Unbounded => unreachable!("phase 1 objective is bounded below by zero"),
        }
        let scale = 1.0 + rows.iter().map(|r| r.1.abs()).fold(0.0, f64::max);
        if tableau.objective_value() > tol.max(1e-9) * scale * 10.0 {
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                x: vec![f64::NAN; n],
                objective: f64::NAN,
                iterations,
            });
        }
        tableau.drive_out_artificials();
    }

    // Phase 2.
    let mut phase2_cost = col_cost.clone();
    phase2_cost.resize(tableau.n_cols, 0.0);
    tableau.set_costs(&phase2_cost);
    let outcome = tableau.run(&mut iterations, max_iters)?;
    if outcome == PhaseOutcome::Unbounded {
        return Ok(LpSolution {
            status: LpStatus::Unbounded,
            x: vec![f64::NAN; n],
            objective: f64::NEG_INFINITY,
            iterations,
        });
    }

    let y = tableau.primal_values();
    let x: Vec<f64> = maps
        .iter()
        .map(|m| match *m {
            ColMap::Shifted { col, offset } => offset + y[col],
            ColMap::Mirrored { col, offset } => offset - y[col],
            ColMap::Split { pos, neg } => y[pos] - y[neg],
        })
        .collect();
    let objective = lp.objective_at(&x);
    Ok(LpSolution {
        status: LpStatus::Optimal,
        x,
        objective,
        iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PhaseOutcome {
    Optimal,
    Unbounded,
}

/// Dense simplex tableau `[A | b]` with a reduced-cost row.
struct Tableau {
    m: usize,
    n_cols: usize,
    /// Columns `>= art_start` are artificial.
    art_start: usize,
    n_art: usize,
    /// Row-major `m x (n_cols + 1)`; last column is the rhs.
    a: Vec<f64>,
    basis: Vec<usize>,
    /// Reduced costs, with the negated objective value in the last slot.
    d: Vec<f64>,
    tol: f64,
}

impl Tableau {
    fn build(rows: &[(Vec<f64>, f64, bool)], n_struct: usize, tol: f64) -> Self {
        let m = rows.len();
        let n_slack = rows.iter().filter(|r| r.2).count();
        // A `<=` row with non-negative rhs starts with its slack basic; every
        // other row needs an artificial.
        let n_art = rows.iter().filter(|r| !(r.2 && r.1 >= 0.0)).count();
        let art_start = n_struct + n_slack;
        let n_cols = art_start + n_art;
        let width = n_cols + 1;
        let mut a = vec![0.0; m * width];
        let mut basis = vec![0; m];
        let mut slack = n_struct;
        let mut art = art_start;
        for (i, (coeffs, rhs, is_le)) in rows.iter().enumerate() {
            let sign = if *rhs < 0.0 { -1.0 } else { 1.0 };
            let row = &mut a[i * width..(i + 1) * width];
            for (c, &v) in coeffs.iter().enumerate() {
                row[c] = sign * v;
            }
            row[n_cols] = sign * rhs;
            if *is_le {
                row[slack] = sign;
                if sign > 0.0 {
                    basis[i] = slack;
                }
                slack += 1;
            }
            if !(*is_le && sign > 0.0) {
                row[art] = 1.0;
                basis[i] = art;
                art += 1;
            }
        }
        Self {
            m,
            n_cols,
            art_start,
            n_art,
            a,
            basis,
            d: vec![0.0; width],
            tol,
        }
    }

    fn width(&self) -> usize {
        self.n_cols + 1
    }

    fn is_artificial(&self, col: usize) -> bool {
        col >= self.art_start
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.width() + j]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.at(i, self.n_cols)
    }

    /// Reduced costs `c_j - c_B B^-1 A_j` for the current basis.
    fn set_costs(&mut self, cost: &[f64]) {
        let w = self.width();
        self.d.iter_mut().for_each(|v| *v = 0.0);
        self.d[..self.n_cols].copy_from_slice(&cost[..self.n_cols]);
        for i in 0..self.m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                let row = &self.a[i * w..(i + 1) * w];
                for (dj, &aij) in self.d.iter_mut().zip(row) {
                    *dj -= cb * aij;
                }
            }
        }
    }

    fn objective_value(&self) -> f64 {
        -self.d[self.n_cols]
    }

    fn entering(&self, bland: bool) -> Option<usize> {
        let candidates = (0..self.art_start).filter(|&j| self.d[j] < -self.tol);
        if bland {
            candidates.into_iter().next()
        } else {
            // Most negative reduced cost; first index on ties.
            candidates.fold(None, |best: Option<usize>, j| match best {
                Some(b) if self.d[b] <= self.d[j] => Some(b),
                _ => Some(j),
            })
        }
    }

    /// Minimum-ratio row; ties go to the smallest basic variable index.
    fn leaving(&self, q: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.m {
            let aiq = self.at(i, q);
            if aiq > self.tol {
                let ratio = self.rhs(i).max(0.0) / aiq;
                best = match best {
                    None => Some((i, ratio)),
                    Some((r, br)) => {
                        if ratio < br - self.tol
                            || (ratio <= br + self.tol && self.basis[i] < self.basis[r])
                        {
                            Some((i, ratio))
                        } else {
                            Some((r, br))
                        }
                    }
                };
            }
        }
        best.map(|(i, _)| i)
    }

    fn pivot(&mut self, r: usize, q: usize) {
        let w = self.width();
        let inv = 1.0 / self.at(r, q);
        {
            let row = &mut self.a[r * w..(r + 1) * w];
            row.iter_mut().for_each(|v| *v *= inv);
            row[q] = 1.0;
        }
        let nz: Vec<usize> = (0..w).filter(|&j| self.a[r * w + j] != 0.0).collect();
        let pivot_row: Vec<f64> = nz.iter().map(|&j| self.a[r * w + j]).collect();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.a[i * w + q];
            if f != 0.0 {
                let row = &mut self.a[i * w..(i + 1) * w];
                for (&j, &p) in nz.iter().zip(&pivot_row) {
                    row[j] -= f * p;
                }
                row[q] = 0.0;
            }
        }
        let f = self.d[q];
        if f != 0.0 {
            for (&j, &p) in nz.iter().zip(&pivot_row) {
                self.d[j] -= f * p;
            }
            self.d[q] = 0.0;
        }
        self.basis[r] = q;
    }

    fn run(&mut self, iterations: &mut usize, max_iters: usize) -> Result<PhaseOutcome, LpError> {
        let mut stalled = 0;
        loop {
            let bland = stalled >= STALL_THRESHOLD;
            let Some(q) = self.entering(bland) else {
                return Ok(PhaseOutcome::Optimal);
            };
            let Some(r) = self.leaving(q) else {
                return Ok(PhaseOutcome::Unbounded);
            };
            if *iterations >= max_iters {
                return Err(LpError::IterationLimit(max_iters));
            }
            let step = self.rhs(r) / self.at(r, q);
            if step <= self.tol {
                stalled += 1;
            } else {
                stalled = 0;
            }
            self.pivot(r, q);
            *iterations += 1;
        }
    }

    /// After a feasible phase 1, pivot remaining zero-valued artificials out
    /// of the basis where a structural or slack column allows it. Rows with no
    /// such column are redundant and keep their artificial at zero.
    fn drive_out_artificials(&mut self) {
        for i in 0..self.m {
            if !self.is_artificial(self.basis[i]) {
                continue;
            }
            let col = (0..self.art_start)
                .filter(|&j| self.at(i, j).abs() > self.tol)
                .max_by(|&x, &y| self.at(i, x).abs().total_cmp(&self.at(i, y).abs()));
            if let Some(q) = col {
                self.pivot(i, q);
            }
        }
        // Artificials may never re-enter; zero their columns so they are inert.
        let w = self.width();
        for i in 0..self.m {
            if self.is_artificial(self.basis[i]) {
                continue;
            }
            for j in self.art_start..self.n_cols {
                self.a[i * w + j] = 0.0;
            }
        }
    }

    fn primal_values(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.n_cols];
        for i in 0..self.m {
            y[self.basis[i]] = self.rhs(i).max(0.0);
        }
        y
    }
}
