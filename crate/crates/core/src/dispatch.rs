//! Day-ahead and real-time economic dispatch over a single aggregated PV
//! source, plus the grid metric bundle (gas energy, CO2, shedding, spillage,
//! cost, NMAE).
//!
//! The day-ahead market schedules generators against the forecast PV cap.
//! The real-time market then sees actual PV and may only move the units
//! flagged `rt_available`; everything else stays at its day-ahead setpoint.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{check_solution, solve_lp, LinearProgram, LpError, LpStatus, DEFAULT_MAX_ITERS, DEFAULT_TOL};

/// kg CO2 per MWh of gas-fired output.
pub const DEFAULT_EMISSION_FACTOR: f64 = 202.0;
pub const DEFAULT_VOLL: f64 = 1000.0;
/// Feasibility tolerance for unpacked schedules.
pub const SCHEDULE_TOL: f64 = 1e-6;
/// Cost per MWh on real-time spill, only to break zero-cost ties between
/// spilling and releasing day-ahead curtailment. Not part of the reported cost.
const SPILL_TIE_BREAK: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("invalid dispatch case: {0}")]
    InvalidCase(String),
    #[error("invalid generator {name}: {msg}")]
    InvalidGenerator { name: String, msg: String },
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("day-ahead dispatch infeasible; the zero schedule with shedding should always be feasible")]
    DayAheadInfeasible,
    #[error("real-time dispatch infeasible (first unbalanced hour {hour})")]
    RealTimeInfeasible { hour: usize },
    #[error("{market} LP unbounded")]
    Unbounded { market: &'static str },
    #[error("{market} schedule fails feasibility check: {detail}")]
    Check { market: &'static str, detail: String },
    #[error("mean actual generation is zero; NMAE undefined")]
    ZeroMeanActual,
    #[error("fleet file: {0}")]
    Fleet(String),
}

pub type Result<T> = std::result::Result<T, DispatchError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub name: String,
    /// $/MWh
    pub cost: f64,
    pub pmax: f64,
    pub pmin: f64,
    /// MW/h, symmetric up and down.
    pub ramp: f64,
    /// May be redispatched in the real-time market.
    pub rt_available: bool,
    pub gas_fired: bool,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| {
            Err(DispatchError::InvalidGenerator {
                name: self.name.clone(),
                msg: msg.to_string(),
            })
        };
        if !(self.pmin >= 0.0 && self.pmin <= self.pmax && self.pmax.is_finite()) {
            return bad("need 0 <= pmin <= pmax");
        }
        if !(self.cost >= 0.0 && self.cost.is_finite()) {
            return bad("cost must be finite and >= 0");
        }
        if !(self.ramp > 0.0) {
            return bad("ramp must be > 0");
        }
        Ok(())
    }
}

/// Three-unit fleet: two day-ahead-only units and one flexible gas unit.
pub fn default_fleet() -> Vec<GeneratorSpec> {
    let unit = |name: &str, cost, pmax, ramp, flexible| GeneratorSpec {
        name: name.to_string(),
        cost,
        pmax,
        pmin: 0.0,
        ramp,
        rt_available: flexible,
        gas_fired: flexible,
    };
    vec![
        unit("G1", 20.0, 50.0, 20.0, false),
        unit("G2", 25.0, 50.0, 20.0, false),
        unit("G3", 30.0, 30.0, 30.0, true),
    ]
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" => Some(false),
        _ => None,
    }
}

/// Reads `name,cost,pmax,pmin,ramp,rt_available,gas_fired`.
pub fn parse_fleet<R: Read>(reader: R) -> Result<Vec<GeneratorSpec>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| DispatchError::Fleet(e.to_string()))?.clone();
    let expected = ["name", "cost", "pmax", "pmin", "ramp", "rt_available", "gas_fired"];
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(DispatchError::Fleet(format!("header must be `{}`", expected.join(","))));
    }
    let mut fleet = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let row = idx + 1;
        let rec = rec.map_err(|e| DispatchError::Fleet(format!("row {row}: {e}")))?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| DispatchError::Fleet(format!("row {row}: `{}` is not a number", &rec[i])))
        };
        let flag = |i: usize| -> Result<bool> {
            parse_flag(&rec[i]).ok_or_else(|| DispatchError::Fleet(format!("row {row}: `{}` is not 0/1", &rec[i])))
        };
        let g = GeneratorSpec {
            name: rec[0].to_string(),
            cost: num(1)?,
            pmax: num(2)?,
            pmin: num(3)?,
            ramp: num(4)?,
            rt_available: flag(5)?,
            gas_fired: flag(6)?,
        };
        g.validate()?;
        fleet.push(g);
    }
    if fleet.is_empty() {
        return Err(DispatchError::Fleet("no generators".into()));
    }
    Ok(fleet)
}

pub fn load_fleet(path: &Path) -> Result<Vec<GeneratorSpec>> {
    let file = File::open(path).map_err(|e| DispatchError::Fleet(format!("{}: {e}", path.display())))?;
    parse_fleet(file)
}

pub fn write_fleet<W: Write>(fleet: &[GeneratorSpec], w: W) -> std::io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["name", "cost", "pmax", "pmin", "ramp", "rt_available", "gas_fired"])?;
    for g in fleet {
        out.write_record([
            g.name.clone(),
            g.cost.to_string(),
            g.pmax.to_string(),
            g.pmin.to_string(),
            g.ramp.to_string(),
            u8::from(g.rt_available).to_string(),
            u8::from(g.gas_fired).to_string(),
        ])?;
    }
    out.flush()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchCase {
    /// MW per hour.
    pub demand: Vec<f64>,
    /// Day-ahead PV cap, MW per hour.
    pub forecast: Vec<f64>,
    /// Real-time PV, MW per hour.
    pub actual: Vec<f64>,
    pub fleet: Vec<GeneratorSpec>,
    /// $/MWh of unserved load.
    pub voll: f64,
    /// kg CO2 per MWh of gas-fired output.
    pub emission_factor: f64,
}

impl DispatchCase {
    pub fn horizon(&self) -> usize {
        self.demand.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.horizon();
        if t == 0 {
            return Err(DispatchError::InvalidCase("empty horizon".into()));
        }
        if self.forecast.len() != t || self.actual.len() != t {
            return Err(DispatchError::InvalidCase(format!(
                "series lengths differ: demand {t}, forecast {}, actual {}",
                self.forecast.len(),
                self.actual.len()
            )));
        }
        for (name, s) in [("demand", &self.demand), ("forecast", &self.forecast), ("actual", &self.actual)] {
            if let Some(v) = s.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(DispatchError::InvalidCase(format!("{name} value {v} must be finite and >= 0")));
            }
        }
        if self.fleet.is_empty() {
            return Err(DispatchError::InvalidCase("empty fleet".into()));
        }
        for g in &self.fleet {
            g.validate()?;
        }
        let max_cost = self.fleet.iter().map(|g| g.cost).fold(0.0, f64::max);
        if !(self.voll > max_cost && self.voll.is_finite()) {
            return Err(DispatchError::InvalidCase(format!(
                "VOLL {} must exceed the highest generator cost {max_cost}",
                self.voll
            )));
        }
        if !(self.emission_factor >= 0.0 && self.emission_factor.is_finite()) {
            return Err(DispatchError::InvalidCase("emission factor must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Column layout of the day-ahead LP.
#[derive(Debug, Clone, Copy)]
pub struct DaLayout {
    pub generators: usize,
    pub horizon: usize,
}

impl DaLayout {
    pub fn gen(&self, v: usize, t: usize) -> usize {
        v * self.horizon + t
    }
    pub fn renewable(&self, t: usize) -> usize {
        self.generators * self.horizon + t
    }
    pub fn shed(&self, t: usize) -> usize {
        (self.generators + 1) * self.horizon + t
    }
}

/// Previous hour with the cyclic wrap `t = 0 -> T - 1`.
fn prev_hour(t: usize, horizon: usize) -> usize {
    if t == 0 {
        horizon - 1
    } else {
        t - 1
    }
}

/// Day-ahead LP: minimize generation plus shedding cost subject to hourly
/// balance against the forecast PV cap, capacity and cyclic ramp limits.
pub fn build_da_lp(case: &DispatchCase) -> Result<(LinearProgram, DaLayout)> {
    case.validate()?;
    let layout = DaLayout {
        generators: case.fleet.len(),
        horizon: case.horizon(),
    };
    let horizon = layout.horizon;
    let mut lp = LinearProgram::new();
    for g in &case.fleet {
        for t in 0..horizon {
            lp.add_var(format!("p_{}_{t}", g.name), g.cost, g.pmin, g.pmax);
        }
    }
    for t in 0..horizon {
        lp.add_var(format!("rnw_{t}"), 0.0, 0.0, case.forecast[t]);
    }
    for t in 0..horizon {
        lp.add_var(format!("ls_{t}"), case.voll, 0.0, case.demand[t]);
    }
    for t in 0..horizon {
        let mut terms: Vec<(usize, f64)> = (0..layout.generators).map(|v| (layout.gen(v, t), 1.0)).collect();
        terms.push((layout.renewable(t), 1.0));
        terms.push((layout.shed(t), 1.0));
        lp.add_eq(terms, case.demand[t]);
    }
    for (v, g) in case.fleet.iter().enumerate() {
        for t in 0..horizon {
            let (now, before) = (layout.gen(v, t), layout.gen(v, prev_hour(t, horizon)));
            lp.add_le(vec![(now, 1.0), (before, -1.0)], g.ramp);
            lp.add_le(vec![(now, -1.0), (before, 1.0)], g.ramp);
        }
    }
    Ok((lp, layout))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaSolution {
    /// `generation[v][t]`, MW.
    pub generation: Vec<Vec<f64>>,
    /// PV scheduled, MW.
    pub renewable: Vec<f64>,
    pub shed: Vec<f64>,
    pub objective: f64,
}

fn ensure_feasible(lp: &LinearProgram, sol: &crate::lp::LpSolution, market: &'static str) -> Result<()> {
    let violations = check_solution(lp, sol, SCHEDULE_TOL)?;
    if let Some(v) = violations.first() {
        return Err(DispatchError::Check {
            market,
            detail: format!("{} violation(s), first {v:?}", violations.len()),
        });
    }
    Ok(())
}

pub fn solve_da(case: &DispatchCase) -> Result<DaSolution> {
    let (lp, layout) = build_da_lp(case)?;
    let sol = solve_lp(&lp, DEFAULT_TOL, DEFAULT_MAX_ITERS)?;
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Err(DispatchError::DayAheadInfeasible),
        LpStatus::Unbounded => return Err(DispatchError::Unbounded { market: "day-ahead" }),
    }
    ensure_feasible(&lp, &sol, "day-ahead")?;
    let horizon = layout.horizon;
    Ok(DaSolution {
        generation: (0..layout.generators)
            .map(|v| (0..horizon).map(|t| sol.x[layout.gen(v, t)]).collect())
            .collect(),
        renewable: (0..horizon).map(|t| sol.x[layout.renewable(t)]).collect(),
        shed: (0..horizon).map(|t| sol.x[layout.shed(t)]).collect(),
        objective: sol.objective,
    })
}

/// Column layout of the real-time LP.
#[derive(Debug, Clone)]
pub struct RtLayout {
    /// Fleet indices of the redispatchable units, in fleet order.
    pub flexible: Vec<usize>,
    pub horizon: usize,
}

impl RtLayout {
    /// `k` indexes into `flexible`.
    pub fn adjust(&self, k: usize, t: usize) -> usize {
        k * self.horizon + t
    }
    pub fn release(&self, t: usize) -> usize {
        self.flexible.len() * self.horizon + t
    }
    pub fn spill(&self, t: usize) -> usize {
        (self.flexible.len() + 1) * self.horizon + t
    }
    pub fn shed(&self, t: usize) -> usize {
        (self.flexible.len() + 2) * self.horizon + t
    }
}

/// Real-time LP against actual PV, holding non-flexible units at their
/// day-ahead setpoints.
///
/// Day-ahead curtailment `forecast - renewable*` is tracked separately from
/// real-time spill: `release` brings curtailed PV back (up to what actually
/// arrived), `spill` curtails beyond the day-ahead plan. With a perfect
/// forecast the day-ahead schedule is feasible with every adjustment zero.
pub fn build_rt_lp(case: &DispatchCase, da: &DaSolution) -> Result<(LinearProgram, RtLayout)> {
    case.validate()?;
    let horizon = case.horizon();
    if da.generation.len() != case.fleet.len() || da.renewable.len() != horizon || da.shed.len() != horizon {
        return Err(DispatchError::InvalidCase("day-ahead solution does not match the case".into()));
    }
    let layout = RtLayout {
        flexible: (0..case.fleet.len()).filter(|&v| case.fleet[v].rt_available).collect(),
        horizon,
    };
    let mut lp = LinearProgram::new();
    for &v in &layout.flexible {
        let g = &case.fleet[v];
        for t in 0..horizon {
            let p = da.generation[v][t];
            lp.add_var(format!("dp_{}_{t}", g.name), g.cost, g.pmin - p, g.pmax - p);
        }
    }
    let curtailed: Vec<f64> = (0..horizon).map(|t| (case.forecast[t] - da.renewable[t]).max(0.0)).collect();
    for (t, &c) in curtailed.iter().enumerate() {
        lp.add_var(format!("release_{t}"), 0.0, 0.0, c);
    }
    for t in 0..horizon {
        lp.add_var(format!("spill_{t}"), SPILL_TIE_BREAK, 0.0, case.actual[t]);
    }
    for t in 0..horizon {
        let ls = da.shed[t];
        lp.add_var(format!("ls_rt_{t}"), case.voll, -ls, case.demand[t] - ls);
    }
    for t in 0..horizon {
        let scheduled: f64 = (0..case.fleet.len()).map(|v| da.generation[v][t]).sum();
        let deviation = case.actual[t] - case.forecast[t];
        let mut terms: Vec<(usize, f64)> = (0..layout.flexible.len()).map(|k| (layout.adjust(k, t), 1.0)).collect();
        terms.push((layout.release(t), 1.0));
        terms.push((layout.spill(t), -1.0));
        terms.push((layout.shed(t), 1.0));
        let rhs = case.demand[t] - scheduled - da.renewable[t] - deviation - da.shed[t];
        lp.add_eq(terms, rhs);
        // PV injection renewable* + deviation + release - spill stays >= 0.
        lp.add_le(
            vec![(layout.spill(t), 1.0), (layout.release(t), -1.0)],
            da.renewable[t] + deviation,
        );
    }
    for (k, &v) in layout.flexible.iter().enumerate() {
        let g = &case.fleet[v];
        for t in 0..horizon {
            let before = prev_hour(t, horizon);
            let da_step = da.generation[v][t] - da.generation[v][before];
            let (now, prev) = (layout.adjust(k, t), layout.adjust(k, before));
            lp.add_le(vec![(now, 1.0), (prev, -1.0)], g.ramp - da_step);
            lp.add_le(vec![(now, -1.0), (prev, 1.0)], g.ramp + da_step);
        }
    }
    Ok((lp, layout))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtSolution {
    /// `adjustment[v][t]` for every fleet unit; zero for day-ahead-only units.
    pub adjustment: Vec<Vec<f64>>,
    /// Day-ahead curtailment taken back in real time, MW.
    pub release: Vec<f64>,
    pub spill: Vec<f64>,
    /// Signed change to day-ahead shedding.
    pub shed: Vec<f64>,
    /// `sum C_v dp + VOLL ls_rt`.
    pub objective: f64,
}

/// First hour whose real-time balance cannot be met on its own: shortfall
/// beyond flexible headroom plus sheddable load.
fn first_short_hour(case: &DispatchCase, da: &DaSolution) -> usize {
    (0..case.horizon())
        .find(|&t| {
            let deviation = case.actual[t] - case.forecast[t];
            let headroom: f64 = case
                .fleet
                .iter()
                .enumerate()
                .filter(|(_, g)| g.rt_available)
                .map(|(v, g)| g.pmax - da.generation[v][t])
                .sum();
            -deviation > headroom + (case.demand[t] - da.shed[t]) + SCHEDULE_TOL
        })
        .unwrap_or(0)
}

pub fn solve_rt(case: &DispatchCase, da: &DaSolution) -> Result<RtSolution> {
    let (lp, layout) = build_rt_lp(case, da)?;
    let sol = solve_lp(&lp, DEFAULT_TOL, DEFAULT_MAX_ITERS)?;
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => {
            return Err(DispatchError::RealTimeInfeasible {
                hour: first_short_hour(case, da),
            })
        }
        LpStatus::Unbounded => return Err(DispatchError::Unbounded { market: "real-time" }),
    }
    ensure_feasible(&lp, &sol, "real-time")?;
    let horizon = layout.horizon;
    let mut adjustment = vec![vec![0.0; horizon]; case.fleet.len()];
    for (k, &v) in layout.flexible.iter().enumerate() {
        for t in 0..horizon {
            adjustment[v][t] = sol.x[layout.adjust(k, t)];
        }
    }
    let shed: Vec<f64> = (0..horizon).map(|t| sol.x[layout.shed(t)]).collect();
    let objective = adjustment
        .iter()
        .zip(&case.fleet)
        .map(|(row, g)| g.cost * row.iter().sum::<f64>())
        .sum::<f64>()
        + case.voll * shed.iter().sum::<f64>();
    Ok(RtSolution {
        adjustment,
        release: (0..horizon).map(|t| sol.x[layout.release(t)]).collect(),
        spill: (0..horizon).map(|t| sol.x[layout.spill(t)]).collect(),
        shed,
        objective,
    })
}

/// Grid metrics for one forecaster over one evaluation span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// MWh of gas-fired output after real-time redispatch.
    pub gas_mwh: f64,
    pub co2_kg: f64,
    /// Sum over hours of final shed MW.
    pub load_shed: f64,
    pub spillage: f64,
    /// Day-ahead plus real-time objective, $.
    pub cost: f64,
    pub nmae: f64,
}

impl EvaluationReport {
    pub const ROW_NAMES: [&'static str; 6] = [
        "gas_fired_mwh",
        "co2_kg",
        "load_shedding_mw",
        "res_spillage_mw",
        "da_rt_cost_usd",
        "nmae",
    ];

    pub fn rows(&self) -> [f64; 6] {
        [self.gas_mwh, self.co2_kg, self.load_shed, self.spillage, self.cost, self.nmae]
    }
}

/// Mean absolute error over the mean of the actual series.
pub fn nmae(forecast: &[f64], actual: &[f64]) -> Result<f64> {
    if forecast.len() != actual.len() || actual.is_empty() {
        return Err(DispatchError::InvalidCase(format!(
            "NMAE needs equal non-empty series, got {} and {}",
            forecast.len(),
            actual.len()
        )));
    }
    let n = actual.len() as f64;
    let mae = forecast.iter().zip(actual).map(|(f, a)| (f - a).abs()).sum::<f64>() / n;
    let mean = actual.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(DispatchError::ZeroMeanActual);
    }
    Ok(mae / mean)
}

pub fn co2_kg(gas_mwh: f64, emission_factor: f64) -> f64 {
    emission_factor * gas_mwh
}

/// Gas-fired MWh after redispatch.
pub fn gas_energy(case: &DispatchCase, da: &DaSolution, rt: &RtSolution) -> f64 {
    case.fleet
        .iter()
        .enumerate()
        .filter(|(_, g)| g.gas_fired)
        .map(|(v, _)| {
            da.generation[v]
                .iter()
                .zip(&rt.adjustment[v])
                .map(|(p, dp)| p + dp)
                .sum::<f64>()
        })
        .sum()
}

pub fn compute_metrics(case: &DispatchCase, da: &DaSolution, rt: &RtSolution) -> Result<EvaluationReport> {
    let gas_mwh = gas_energy(case, da, rt);
    let load_shed = da.shed.iter().zip(&rt.shed).map(|(a, b)| (a + b).max(0.0)).sum();
    Ok(EvaluationReport {
        gas_mwh,
        co2_kg: co2_kg(gas_mwh, case.emission_factor),
        load_shed,
        spillage: rt.spill.iter().sum(),
        cost: da.objective + rt.objective,
        nmae: nmae(&case.forecast, &case.actual)?,
    })
}

/// Both markets plus metrics for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub da: DaSolution,
    pub rt: RtSolution,
}

pub fn run_case(case: &DispatchCase) -> Result<CaseOutcome> {
    let da = solve_da(case)?;
    let rt = solve_rt(case, &da)?;
    Ok(CaseOutcome { da, rt })
}
