//! Brute-force oracles and fixtures shared by the integration tests.
#![allow(dead_code, clippy::filter_map_bool_then)]

use gridroll_core::kernel::*;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random feasible, bounded LP: every variable has finite bounds and the
/// rows are built around an interior point.
pub fn random_lp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> LinearProgram {
    let mut lp = LinearProgram::new();
    let mut x0 = Vec::new();
    for _ in 0..n {
        let lo = -rng.gen_range(0.0..4.0f64).round();
        let hi = lo + rng.gen_range(1.0..6.0f64).round();
        lp.add_var(lo, hi, rng.gen_range(-5.0..5.0f64).round());
        x0.push(rng.gen_range(lo..hi));
    }
    for _ in 0..m {
        let coeffs: Vec<(usize, f64)> = (0..n)
            .filter_map(|j| rng.gen_bool(0.7).then(|| (j, rng.gen_range(-3.0..3.0f64).round())))
            .filter(|&(_, a)| a != 0.0)
            .collect();
        if coeffs.is_empty() {
            continue;
        }
        let at: f64 = coeffs.iter().map(|&(j, a)| a * x0[j]).sum();
        match rng.gen_range(0..5) {
            0 => lp.add_eq(coeffs, at),
            1 | 2 => lp.add_le(coeffs, at + rng.gen_range(0.0..2.0)),
            _ => lp.add_ge(coeffs, at - rng.gen_range(0.0..2.0)),
        }
    }
    lp
}

/// Every candidate hyperplane as (dense row, rhs).
fn hyperplanes(lp: &LinearProgram) -> (Vec<(Vec<f64>, f64)>, usize) {
    let n = lp.num_vars;
    let dense = |c: &Constraint| {
        let mut r = vec![0.0; n];
        for &(j, a) in &c.coeffs {
            r[j] += a;
        }
        r
    };
    let mut planes = Vec::new();
    for c in lp.constraints.iter().filter(|c| c.relation == Relation::Eq) {
        planes.push((dense(c), c.rhs));
    }
    let n_eq = planes.len();
    for c in lp.constraints.iter().filter(|c| c.relation != Relation::Eq) {
        planes.push((dense(c), c.rhs));
    }
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        planes.push((e.clone(), lp.bounds[j].0));
        planes.push((e, lp.bounds[j].1));
    }
    (planes, n_eq)
}

fn combinations(pool: usize, k: usize, out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, start: usize) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    for i in start..pool {
        cur.push(i);
        combinations(pool, k, out, cur, i + 1);
        cur.pop();
    }
}

/// Minimum objective over all feasible basic solutions, or None if none.
pub fn vertex_enumeration(lp: &LinearProgram) -> Option<f64> {
    let n = lp.num_vars;
    let (planes, n_eq) = hyperplanes(lp);
    if n_eq > n {
        return None;
    }
    let mut subsets = Vec::new();
    combinations(planes.len() - n_eq, n - n_eq, &mut subsets, &mut Vec::new(), 0);
    let mut best: Option<f64> = None;
    for s in subsets {
        let rows: Vec<usize> = (0..n_eq).chain(s.iter().map(|i| i + n_eq)).collect();
        let a = DMatrix::from_fn(n, n, |i, j| planes[rows[i]].0[j]);
        let b = DVector::from_fn(n, |i, _| planes[rows[i]].1);
        let lu = a.lu();
        if lu.determinant().abs() < 1e-9 {
            continue;
        }
        let x = lu.solve(&b).unwrap();
        let x: Vec<f64> = x.iter().copied().collect();
        if lp.max_violation(&x) <= 1e-7 {
            let v = lp.evaluate(&x);
            best = Some(best.map_or(v, |b: f64| b.min(v)));
        }
    }
    best
}

pub fn random_milp(rng: &mut ChaCha8Rng) -> MilpProblem {
    let k = rng.gen_range(1..=8);
    let nc = rng.gen_range(1..=12);
    let mut p = MilpProblem::new(LinearProgram::new());
    for _ in 0..k {
        p.add_binary(rng.gen_range(-6.0..6.0f64).round());
    }
    for _ in 0..nc {
        let hi = rng.gen_range(1.0..5.0f64).round();
        p.lp.add_var(0.0, hi, rng.gen_range(-4.0..4.0f64).round());
    }
    let n = k + nc;
    for _ in 0..rng.gen_range(1..=10) {
        let coeffs: Vec<(usize, f64)> = (0..n)
            .filter_map(|j| rng.gen_bool(0.5).then(|| (j, rng.gen_range(-4.0..4.0f64).round())))
            .filter(|&(_, a)| a != 0.0)
            .collect();
        if coeffs.is_empty() {
            continue;
        }
        let rhs = rng.gen_range(-2.0..6.0f64).round();
        if rng.gen_bool(0.7) {
            p.lp.add_le(coeffs, rhs);
        } else {
            p.lp.add_ge(coeffs, rhs - 4.0);
        }
    }
    p
}

/// Fix every binary assignment and solve the remaining LP.
pub fn enumerate_milp(p: &MilpProblem) -> Option<f64> {
    let bins: Vec<usize> = p.binary_vars.iter().copied().collect();
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << bins.len()) {
        let mut lp = p.lp.clone();
        for (b, &j) in bins.iter().enumerate() {
            let v = ((mask >> b) & 1) as f64;
            lp.bounds[j] = (v, v);
        }
        let s = solve_lp(&lp).unwrap();
        if s.is_optimal() {
            best = Some(best.map_or(s.objective_value, |b: f64| b.min(s.objective_value)));
        }
    }
    best
}

use gridroll_core::fleet::{aggregate_to_bus, step_soc, EvSpec};
use gridroll_core::grid::{Branch, FeederSpec, NetworkModel};
use gridroll_core::te::AggregatorAgent;

pub fn ev(id: &str, ev_type: u8, bus: usize, arrival: usize, departure: usize, soc_init: f64) -> EvSpec {
    let (cap, smax, p, c_bat) = if ev_type == 1 {
        (14.0, 0.9, 3.7, 22_400.0)
    } else {
        (25.0, 0.85, 5.28, 40_000.0)
    };
    EvSpec {
        id: id.into(),
        ev_type,
        bus,
        capacity_kwh: cap,
        soc_min: 0.2,
        soc_max: smax,
        soc_init,
        soc_desired: soc_init,
        p_max_ch: p,
        p_max_dis: p,
        eta_ch: 0.9,
        eta_dis: 0.95,
        arrival,
        departure,
        cycle_life: 4000.0,
        dod: 0.8,
        c_bat,
    }
}

/// An EV whose desired SOC is exactly what `plan` (net kW per connected
/// hour, starting at `arrival`) delivers.
pub fn ev_with_plan(id: &str, ev_type: u8, bus: usize, arrival: usize, soc_init: f64, plan: &[f64]) -> EvSpec {
    let mut e = ev(id, ev_type, bus, arrival, arrival + plan.len(), soc_init);
    let mut soc = soc_init;
    for &p in plan {
        soc = gridroll_core::fleet::step_soc(soc, p.max(0.0), (-p).max(0.0), &e, 1.0);
    }
    e.soc_desired = soc;
    e
}

pub fn feeder(n: usize, branches: Vec<Branch>, base_load_kw: Vec<Vec<f64>>, p_trans_max_kw: f64) -> NetworkModel {
    NetworkModel::new(FeederSpec {
        n_buses: n,
        slack_bus: 0,
        slack_voltage: 1.0,
        s_base_kva: 100.0,
        branches,
        base_load_kw,
        p_trans_max_kw,
        u_min: 0.9,
        u_max: 1.1,
    })
    .unwrap()
}

/// Agent whose targets are its members' plans summed per bus.
pub fn agent_from_plans(id: &str, evs: &[(EvSpec, Vec<f64>)], horizon: usize, n_buses: usize) -> AggregatorAgent {
    let fleet: Vec<EvSpec> = evs.iter().map(|(e, _)| e.clone()).collect();
    let storages = aggregate_to_bus(&fleet, horizon, n_buses).unwrap();
    let targets = storages
        .iter()
        .map(|s| {
            let mut t = vec![0.0; horizon];
            for (e, plan) in evs.iter().filter(|(e, _)| e.bus == s.bus) {
                for (k, p) in plan.iter().enumerate() {
                    t[e.arrival + k] += p;
                }
            }
            t
        })
        .collect();
    AggregatorAgent::new(id, storages, targets, 1.0)
}

/// Two buses, two aggregators, three hours; both aggregators front-load
/// charging so hour 0 needs 12.68 kW against a 10 kW transformer.
pub fn micro_instance() -> (Vec<AggregatorAgent>, NetworkModel) {
    let a = [vec![3.7, 3.7, 0.0], vec![3.7, 0.0, 1.0]];
    let a_evs: Vec<(EvSpec, Vec<f64>)> = a
        .iter()
        .enumerate()
        .map(|(k, p)| (ev_with_plan(&format!("a{k}"), 1, 1, 0, 0.3, p), p.clone()))
        .collect();
    let b = vec![5.28, 0.0, 5.28];
    let b_evs = vec![(ev_with_plan("b0", 2, 1, 0, 0.3, &b), b)];
    let net = feeder(
        2,
        vec![Branch {
            from: 0,
            to: 1,
            r: 0.01,
            x: 0.005,
        }],
        vec![vec![0.0, 2.0]; 3],
        10.0,
    );
    (vec![agent_from_plans("A", &a_evs, 3, 2), agent_from_plans("B", &b_evs, 3, 2)], net)
}

use gridroll_core::dam::{solve_dam_with, BocMode, DamSchedule};
use gridroll_core::scenario::PriceProcess;

/// Random fleet on a `horizon`-hour day with feasible energy needs, its
/// DAM baseline, and a price process around the DAM prices.
pub fn random_market(seed: u64, horizon: usize, n_evs: usize, boc: BocMode) -> (Vec<EvSpec>, DamSchedule, PriceProcess) {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let dam_prices: Vec<f64> = (0..horizon).map(|_| rng.gen_range(0.2..0.5)).collect();
    let bm: Vec<f64> = dam_prices.iter().map(|p| p * rng.gen_range(0.85..1.15)).collect();
    let fleet: Vec<EvSpec> = (0..n_evs)
        .map(|k| {
            let ty = rng.gen_range(1..=2u8);
            let arrival = rng.gen_range(0..horizon - 3);
            let departure = rng.gen_range(arrival + 3..=horizon);
            let mut e = ev(&format!("ev{k}"), ty, 1 + k % 3, arrival, departure, rng.gen_range(0.3..0.5));
            let reach = e.soc_init + (departure - arrival) as f64 * e.p_max_ch * e.eta_ch / e.capacity_kwh;
            e.soc_desired = rng.gen_range(e.soc_init..reach.min(e.soc_max));
            e
        })
        .collect();
    let dam = solve_dam_with(&fleet, &dam_prices, boc, gridroll_core::Execution::Sequential).unwrap();
    let process = PriceProcess {
        actual: bm,
        error_rate: 0.015,
        seed,
    };
    (fleet, dam, process)
}

/// One bus with 1-4 EVs whose plans stay inside their SOC limits.
pub fn random_agent(rng: &mut ChaCha8Rng, horizon: usize) -> AggregatorAgent {
    let mut evs: Vec<(EvSpec, Vec<f64>)> = Vec::new();
    for k in 0..rng.gen_range(1..=4) {
        let ty = rng.gen_range(1..=2u8);
        let arrival = rng.gen_range(0..horizon - 2);
        let len = rng.gen_range(2..=(horizon - arrival));
        let proto = ev("p", ty, 1, arrival, arrival + len, rng.gen_range(0.3..0.6));
        let mut soc = proto.soc_init;
        let mut plan = Vec::new();
        for _ in 0..len {
            let mut p = rng.gen_range(-proto.p_max_dis..=proto.p_max_ch);
            let next = step_soc(soc, p.max(0.0), (-p).max(0.0), &proto, 1.0);
            if next < proto.soc_min || next > proto.soc_max {
                p = 0.0;
            }
            soc = step_soc(soc, p.max(0.0), (-p).max(0.0), &proto, 1.0);
            plan.push(p);
        }
        let e = ev_with_plan(&format!("e{k}"), ty, 1, arrival, proto.soc_init, &plan);
        evs.push((e, plan));
    }
    agent_from_plans("J", &evs, horizon, 2)
}
