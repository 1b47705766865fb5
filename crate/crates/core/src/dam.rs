//! Day-ahead schedule of each EV as a small MILP with charge/discharge
//! exclusivity and an optional battery operating cost on discharge.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::fleet::{battery_operating_cost, step_soc, EvSpec, FleetError, Schedule};
use crate::kernel::{solve_milp, KernelError, LinearProgram, MilpProblem, Status, DEFAULT_GAP};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DamError {
    #[error("EV {ev}: prices cover {got} hours but the window ends at hour {needed}")]
    HorizonMismatch { ev: String, needed: usize, got: usize },
    #[error("EV {ev}: day-ahead problem is infeasible ({status:?})")]
    Infeasible { ev: String, status: Status },
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Where the degradation cost c_d is charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BocMode {
    Off,
    #[default]
    Discharge,
    /// Non-default: charge and discharge energy both pay c_d.
    ChargeAndDischarge,
}

impl BocMode {
    pub fn from_flags(include_boc: bool, on_charge: bool) -> Self {
        match (include_boc, on_charge) {
            (false, _) => BocMode::Off,
            (true, false) => BocMode::Discharge,
            (true, true) => BocMode::ChargeAndDischarge,
        }
    }

    /// (charge, discharge) cost per kWh.
    pub fn costs(self, c_d: f64) -> (f64, f64) {
        match self {
            BocMode::Off => (0.0, 0.0),
            BocMode::Discharge => (0.0, c_d),
            BocMode::ChargeAndDischarge => (c_d, c_d),
        }
    }
}

/// Column layout of the per-hour variables of [`build_dam_model`].
pub const VARS_PER_HOUR: usize = 4;
pub fn dam_columns(k: usize) -> (usize, usize, usize, usize) {
    let b = VARS_PER_HOUR * k;
    (b, b + 1, b + 2, b + 3)
}

pub fn build_dam_model(spec: &EvSpec, dam_prices: &[f64], include_boc: bool) -> Result<MilpProblem, DamError> {
    build_dam_model_with(spec, dam_prices, BocMode::from_flags(include_boc, false))
}

/// Hour `k` of the window (absolute hour `arrival + k`) owns columns
/// `4k..4k+4` = charge, discharge, δa, δb.
pub fn build_dam_model_with(spec: &EvSpec, dam_prices: &[f64], boc: BocMode) -> Result<MilpProblem, DamError> {
    if dam_prices.len() < spec.departure {
        return Err(DamError::HorizonMismatch {
            ev: spec.id.clone(),
            needed: spec.departure,
            got: dam_prices.len(),
        });
    }
    let (boc_ch, boc_dis) = boc.costs(battery_operating_cost(spec)?.cost_per_kwh);
    let mut p = MilpProblem::new(LinearProgram::new());
    let mut soc_terms: Vec<(usize, f64)> = Vec::new();
    let n = spec.window_len();
    for k in 0..n {
        let price = dam_prices[spec.arrival + k];
        let ch = p.lp.add_var(0.0, spec.p_max_ch, price + boc_ch);
        let dis = p.lp.add_var(0.0, spec.p_max_dis, -price + boc_dis);
        let da = p.add_binary(0.0);
        let db = p.add_binary(0.0);
        p.lp.add_le(vec![(ch, 1.0), (da, -spec.p_max_ch)], 0.0);
        p.lp.add_le(vec![(dis, 1.0), (db, -spec.p_max_dis)], 0.0);
        p.lp.add_le(vec![(da, 1.0), (db, 1.0)], 1.0);
        soc_terms.push((ch, spec.eta_ch / spec.capacity_kwh));
        soc_terms.push((dis, -1.0 / (spec.eta_dis * spec.capacity_kwh)));
        p.lp.add_le(soc_terms.clone(), spec.soc_max - spec.soc_init);
        let lower = if k + 1 == n { spec.soc_desired.max(spec.soc_min) } else { spec.soc_min };
        p.lp.add_ge(soc_terms.clone(), lower - spec.soc_init);
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvDam {
    pub id: String,
    /// P^FCh / P^FDis over the whole horizon (zero outside the window).
    pub schedule: Schedule,
    /// Energy cost plus degradation, Dkk.
    pub cost: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DamSchedule {
    pub evs: Vec<EvDam>,
    pub total_cost: f64,
    pub boc: BocMode,
    pub solve_seconds: f64,
}

impl DamSchedule {
    pub fn get(&self, id: &str) -> Option<&EvDam> {
        self.evs.iter().find(|e| e.id == id)
    }

    pub fn total_discharge_kwh(&self) -> f64 {
        self.evs.iter().flat_map(|e| e.schedule.p_dis.iter()).sum()
    }

    /// Net EV power per bus per hour, kW.
    pub fn bus_totals(&self, fleet: &[EvSpec], n_buses: usize) -> Vec<Vec<f64>> {
        let h = self.evs.first().map_or(0, |e| e.schedule.len());
        let mut out = vec![vec![0.0; h]; n_buses];
        for (ev, d) in fleet.iter().zip(&self.evs) {
            for t in 0..h {
                out[ev.bus][t] += d.schedule.net(t);
            }
        }
        out
    }
}

/// SOC at the start of every hour `0..=horizon` for a schedule; outside the
/// window the value is held.
pub fn soc_path(spec: &EvSpec, sched: &Schedule) -> Vec<f64> {
    let mut soc = Vec::with_capacity(sched.len() + 1);
    let mut s = spec.soc_init;
    soc.push(s);
    for t in 0..sched.len() {
        if spec.is_connected(t) {
            s = step_soc(s, sched.p_ch[t], sched.p_dis[t], spec, 1.0);
        }
        soc.push(s);
    }
    soc
}

/// Solves every EV independently; results follow `fleet` order.
pub fn solve_dam(fleet: &[EvSpec], dam_prices: &[f64], include_boc: bool, exec: Execution) -> Result<DamSchedule, DamError> {
    solve_dam_with(fleet, dam_prices, BocMode::from_flags(include_boc, false), exec)
}

pub fn solve_dam_with(fleet: &[EvSpec], dam_prices: &[f64], boc: BocMode, exec: Execution) -> Result<DamSchedule, DamError> {
    let started = Instant::now();
    let horizon = dam_prices.len();
    let results = exec.map(fleet, |ev| solve_one(ev, dam_prices, boc, horizon));
    let evs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let total_cost = evs.iter().map(|e| e.cost).sum();
    Ok(DamSchedule {
        evs,
        total_cost,
        boc,
        solve_seconds: started.elapsed().as_secs_f64(),
    })
}

fn solve_one(ev: &EvSpec, prices: &[f64], boc: BocMode, horizon: usize) -> Result<EvDam, DamError> {
    let p = build_dam_model_with(ev, prices, boc)?;
    let sol = solve_milp(&p, DEFAULT_GAP)?;
    if sol.status != Status::Optimal {
        log::warn!("EV {}: day-ahead solve returned {:?}", ev.id, sol.status);
        return Err(DamError::Infeasible {
            ev: ev.id.clone(),
            status: sol.status,
        });
    }
    let mut schedule = Schedule::zeros(horizon);
    for k in 0..ev.window_len() {
        let (ch, dis, _, _) = dam_columns(k);
        // snap solver noise so downstream comparisons see clean zeros
        schedule.p_ch[ev.arrival + k] = clean(sol.values[ch]);
        schedule.p_dis[ev.arrival + k] = clean(sol.values[dis]);
    }
    Ok(EvDam {
        id: ev.id.clone(),
        schedule,
        cost: sol.objective_value,
        nodes: sol.nodes,
    })
}

pub(crate) fn clean(v: f64) -> f64 {
    if v.abs() < 1e-9 {
        0.0
    } else {
        v
    }
}
