mod common;

use common::{random_case, vertex_oracle, Oracle};
use gridcast_core::dispatch::{
    build_da_lp, build_rt_lp, co2_kg, compute_metrics, default_fleet, run_case, solve_da, DispatchCase,
    DEFAULT_EMISSION_FACTOR, DEFAULT_VOLL,
};
use gridcast_core::lp::{check_solution, LpSolution, LpStatus};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn table_case(demand: f64, forecast: f64, actual: f64) -> DispatchCase {
    DispatchCase {
        demand: vec![demand],
        forecast: vec![forecast],
        actual: vec![actual],
        fleet: default_fleet(),
        voll: DEFAULT_VOLL,
        emission_factor: DEFAULT_EMISSION_FACTOR,
    }
}

/// Single-hour merit order: cheapest units first, then PV first since it is free.
fn merit_order(demand: f64, pv: f64, fleet: &[(f64, f64)], voll: f64) -> (Vec<f64>, f64) {
    let mut left = (demand - pv).max(0.0);
    let mut order: Vec<usize> = (0..fleet.len()).collect();
    order.sort_by(|&a, &b| fleet[a].0.total_cmp(&fleet[b].0));
    let mut out = vec![0.0; fleet.len()];
    let mut cost = 0.0;
    for v in order {
        let take = left.min(fleet[v].1);
        out[v] = take;
        cost += take * fleet[v].0;
        left -= take;
    }
    (out, cost + left * voll)
}

#[test]
fn merit_order_fixture() {
    let units = [(20.0, 50.0), (25.0, 50.0), (30.0, 30.0)];
    let (sched, cost) = merit_order(80.0, 0.0, &units, DEFAULT_VOLL);
    assert_eq!(sched, vec![50.0, 30.0, 0.0]);
    assert_eq!(cost, 1750.0);

    let case = table_case(80.0, 0.0, 0.0);
    let da = solve_da(&case).unwrap();
    for (v, want) in sched.iter().enumerate() {
        assert!((da.generation[v][0] - want).abs() < 1e-6);
    }
    assert!((da.objective - 1750.0).abs() < 1e-6);

    let (lp, _) = build_da_lp(&case).unwrap();
    assert_eq!(vertex_oracle(&lp), Oracle::Optimal(1750.0));
}

#[test]
fn merit_order_matches_on_single_hours() {
    let units = [(20.0, 50.0), (25.0, 50.0), (30.0, 30.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let demand = rng.gen_range(0.0..220.0);
        let pv = rng.gen_range(0.0..60.0);
        let (_, cost) = merit_order(demand, pv, &units, DEFAULT_VOLL);
        let da = solve_da(&table_case(demand, pv, pv)).unwrap();
        assert!((da.objective - cost).abs() < 1e-6, "demand {demand} pv {pv}");
    }
}

#[test]
fn shortfall_picked_up_by_g3() {
    let out = run_case(&table_case(90.0, 10.0, 0.0)).unwrap();
    assert!((out.rt.adjustment[2][0] - 10.0).abs() < 1e-9);
    assert!((out.rt.objective - 10.0 * 30.0).abs() < 1e-6);
    assert!(out.rt.spill[0].abs() < 1e-9);
}

#[test]
fn surplus_is_spilled_after_g3_backs_down() {
    // DA: demand 95 with 5 MW PV -> G1 50, G2 40, G3 0. RT brings 25 MW of PV:
    // G3 is already at 0 and G1/G2 are frozen, so the extra 20 MW spills.
    let out = run_case(&table_case(95.0, 5.0, 25.0)).unwrap();
    assert!(out.da.generation[2][0].abs() < 1e-9);
    assert!((out.rt.spill[0] - 20.0).abs() < 1e-9);
    assert!(out.rt.objective.abs() < 1e-6);

    // With G3 running in DA, surplus first backs it down for a credit.
    let out = run_case(&table_case(120.0, 0.0, 25.0)).unwrap();
    assert!((out.da.generation[2][0] - 20.0).abs() < 1e-9);
    assert!((out.rt.adjustment[2][0] + 20.0).abs() < 1e-9);
    assert!((out.rt.spill[0] - 5.0).abs() < 1e-9);
    assert!((out.rt.objective + 600.0).abs() < 1e-6);
}

#[test]
fn published_co2_pairs() {
    for (gas, co2) in [(263.7, 53_267.0), (140.56, 28_393.0), (108.7, 21_957.0)] {
        let got = co2_kg(gas, DEFAULT_EMISSION_FACTOR);
        assert!((got - co2).abs() <= 1.0, "{gas} -> {got}");
    }
    assert_eq!(co2_kg(108.7, 202.0), 202.0 * 108.7);
}

fn all_checks_pass(case: &DispatchCase) {
    let out = run_case(case).unwrap();
    let (da_lp, layout) = build_da_lp(case).unwrap();
    let mut x = vec![0.0; da_lp.num_vars()];
    for (v, row) in out.da.generation.iter().enumerate() {
        for (t, p) in row.iter().enumerate() {
            x[layout.gen(v, t)] = *p;
        }
    }
    for t in 0..case.horizon() {
        x[layout.renewable(t)] = out.da.renewable[t];
        x[layout.shed(t)] = out.da.shed[t];
    }
    let sol = LpSolution { status: LpStatus::Optimal, objective: out.da.objective, x, iterations: 0 };
    assert!(check_solution(&da_lp, &sol, 1e-6).unwrap().is_empty());
    let (rt_lp, _) = build_rt_lp(case, &out.da).unwrap();
    assert!(rt_lp.num_vars() > 0);
    // Combined schedule stays within capacity and ramps.
    for (v, g) in case.fleet.iter().enumerate() {
        let total: Vec<f64> = (0..case.horizon()).map(|t| out.da.generation[v][t] + out.rt.adjustment[v][t]).collect();
        for t in 0..case.horizon() {
            assert!(total[t] >= g.pmin - 1e-6 && total[t] <= g.pmax + 1e-6);
            let prev = if t == 0 { case.horizon() - 1 } else { t - 1 };
            assert!((total[t] - total[prev]).abs() <= g.ramp + 1e-6);
        }
    }
    for t in 0..case.horizon() {
        let ls = out.da.shed[t] + out.rt.shed[t];
        assert!(ls >= -1e-6 && ls <= case.demand[t] + 1e-6);
        assert!(out.rt.spill[t] >= -1e-6 && out.rt.spill[t] <= case.actual[t] + 1e-6);
    }
}

#[test]
fn schedules_feasible_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..40 {
        let mut case = random_case(&mut rng);
        for a in case.actual.iter_mut() {
            *a = (*a + rng.gen_range(-30.0..30.0)).max(0.0);
        }
        all_checks_pass(&case);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn perfect_forecast_closes(seed in any::<u64>()) {
        let case = random_case(&mut ChaCha8Rng::seed_from_u64(seed));
        let out = run_case(&case).unwrap();
        prop_assert!(out.rt.objective.abs() <= 1e-6);
        prop_assert!(out.rt.spill.iter().all(|s| s.abs() <= 1e-6));
        prop_assert!(out.rt.shed.iter().all(|s| s.abs() <= 1e-6));
    }

    #[test]
    fn less_pv_never_cheaper(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = random_case(&mut rng);
        let mut worse = base.clone();
        for a in worse.actual.iter_mut() {
            *a *= rng.gen_range(0.0..1.0);
        }
        let a = run_case(&base).unwrap();
        let b = run_case(&worse).unwrap();
        prop_assert!(b.da.objective + b.rt.objective >= a.da.objective + a.rt.objective - 1e-6);
    }

    #[test]
    fn spill_bounded_by_actual(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut case = random_case(&mut rng);
        for a in case.actual.iter_mut() {
            *a += rng.gen_range(0.0..50.0);
        }
        let out = run_case(&case).unwrap();
        let report = compute_metrics(&case, &out.da, &out.rt);
        let total: f64 = case.actual.iter().sum();
        prop_assert!(out.rt.spill.iter().sum::<f64>() <= total + 1e-6);
        if let Ok(r) = report {
            prop_assert_eq!(r.co2_kg, r.gas_mwh * case.emission_factor);
        }
    }
}
