//! Stage orchestration: DAM → BM → per-bus targets → security check →
//! (TE if needed) → per-EV schedules.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bm::{run_rolling, BmError, BmSchedule};
use crate::dam::{solve_dam_with, DamError, DamSchedule};
use crate::exec::Execution;
use crate::fleet::{aggregate_to_bus, disaggregate, EvSpec, FleetError, Schedule};
use crate::grid::{check_constraints, violation_hours, Violation};
use crate::scenario::Scenario;
use crate::te::{negotiate, AggregatorAgent, TeError, TeOutcome};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("dam stage: {0}")]
    Dam(#[from] DamError),
    #[error("bm stage: {0}")]
    Bm(#[from] BmError),
    #[error("te stage: {0}")]
    Te(#[from] TeError),
    #[error("disaggregation: {0}")]
    Fleet(#[from] FleetError),
}

impl PipelineError {
    /// True when some optimization problem had no feasible point.
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            PipelineError::Dam(DamError::Infeasible { .. })
                | PipelineError::Te(TeError::AgentInfeasible { .. } | TeError::DsoInfeasible { .. })
                | PipelineError::Fleet(FleetError::InfeasibleAllocation { .. })
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub dam: f64,
    pub bm: f64,
    pub te: f64,
    pub total: f64,
}

/// Output of the security check and, when it ran, the negotiation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeStage {
    /// One agent per aggregator, targets from the BM plan.
    pub agents: Vec<AggregatorAgent>,
    pub pre_te: Vec<Violation>,
    pub te: Option<TeOutcome>,
    /// Violations of the final schedules; equal to `pre_te` when TE was skipped.
    pub post_te: Vec<Violation>,
    /// Per EV in fleet order.
    pub ev_schedules: Vec<(String, Schedule)>,
    /// Largest disaggregation residual, kW.
    pub allocation_residual_kw: f64,
}

impl TeStage {
    pub fn te_ran(&self) -> bool {
        self.te.is_some()
    }

    pub fn converged(&self) -> bool {
        self.te.as_ref().is_none_or(|t| t.converged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// The resolved configuration the run used.
    pub config: Scenario,
    pub dam: Option<DamSchedule>,
    pub bm: Option<BmSchedule>,
    pub te: Option<TeStage>,
    pub timings: StageTimings,
}

impl RunReport {
    pub fn pre_te_violation_hours(&self) -> usize {
        self.te.as_ref().map_or(0, |t| violation_hours(&t.pre_te))
    }

    /// A copy with all wall-clock fields zeroed.
    pub fn without_timings(&self) -> RunReport {
        let mut r = self.clone();
        r.timings = StageTimings::default();
        if let Some(d) = &mut r.dam {
            d.solve_seconds = 0.0;
        }
        if let Some(b) = &mut r.bm {
            b.solve_seconds = 0.0;
        }
        if let Some(t) = r.te.as_mut().and_then(|t| t.te.as_mut()) {
            t.solve_seconds = 0.0;
        }
        r
    }
}

pub fn stage_dam(sc: &Scenario, exec: Execution) -> Result<DamSchedule, PipelineError> {
    Ok(solve_dam_with(&sc.fleet(), &sc.prices.dam, sc.flags.boc_mode(), exec)?)
}

pub fn stage_bm(sc: &Scenario, dam: &DamSchedule, exec: Execution) -> Result<BmSchedule, PipelineError> {
    Ok(run_rolling(&sc.fleet(), dam, &sc.price_process(), &sc.rolling_config(), &sc.bm_options(exec))?)
}

/// Net BM power of each aggregator's EVs, grouped into per-bus storages.
pub fn build_agents(sc: &Scenario, bm: &BmSchedule) -> Result<Vec<AggregatorAgent>, PipelineError> {
    let fleet = sc.fleet();
    let owner = sc.aggregator_index();
    let n = sc.network.n_buses;
    let h = sc.horizon;
    let mut agents = Vec::new();
    for (a, agg) in sc.aggregators.iter().enumerate() {
        let members: Vec<EvSpec> = fleet.iter().zip(&owner).filter(|(_, &o)| o == a).map(|(e, _)| e.clone()).collect();
        let storages = aggregate_to_bus(&members, h, n)?;
        let targets = storages
            .iter()
            .map(|s| {
                let mut t = vec![0.0; h];
                for id in &s.members {
                    let ev = bm.evs.iter().find(|e| &e.id == id).expect("BM plan covers the fleet");
                    for (x, hour) in t.iter_mut().zip(&ev.hours) {
                        *x += hour.delivered;
                    }
                }
                t
            })
            .collect();
        agents.push(AggregatorAgent::new(agg.id.clone(), storages, targets, agg.participation));
    }
    Ok(agents)
}

fn bus_totals(agents: &[AggregatorAgent], n: usize, h: usize) -> Vec<Vec<f64>> {
    crate::te::bus_targets(agents, n, h)
}

pub fn stage_te(sc: &Scenario, bm: &BmSchedule, exec: Execution) -> Result<TeStage, PipelineError> {
    let fleet = sc.fleet();
    let net = sc.network_model();
    let agents = build_agents(sc, bm)?;
    let pre_te = check_constraints(&net, &bus_totals(&agents, sc.network.n_buses, sc.horizon));
    if pre_te.is_empty() && !sc.flags.force_te {
        log::info!("pre-TE check clean, negotiation skipped");
        let ev_schedules = fleet
            .iter()
            .zip(&bm.evs)
            .map(|(ev, b)| (ev.id.clone(), Schedule::from_net(&b.delivered())))
            .collect();
        return Ok(TeStage {
            agents,
            pre_te,
            te: None,
            post_te: Vec::new(),
            ev_schedules,
            allocation_residual_kw: 0.0,
        });
    }
    log::info!("pre-TE check: {} violations in {} hours", pre_te.len(), violation_hours(&pre_te));
    let outcome = negotiate(&agents, &net, &sc.negotiation, exec)?;
    if !outcome.converged {
        log::warn!("negotiation stopped after {} rounds without converging", outcome.iterations);
    }
    let mut by_id: Vec<(String, Schedule)> = Vec::new();
    let mut residual = 0.0f64;
    for (agent, out) in agents.iter().zip(&outcome.agents) {
        for (storage, sched) in agent.storages.iter().zip(&out.schedules) {
            let alloc = disaggregate(sched, storage, &fleet)?;
            residual = residual.max(alloc.residual_kw);
            by_id.extend(alloc.schedules);
        }
    }
    let ev_schedules = fleet
        .iter()
        .map(|ev| by_id.iter().find(|(id, _)| id == &ev.id).cloned().expect("every EV allocated"))
        .collect();
    let post_te = outcome.violations.clone();
    Ok(TeStage {
        agents,
        pre_te,
        te: Some(outcome),
        post_te,
        ev_schedules,
        allocation_residual_kw: residual,
    })
}

pub fn run_pipeline(sc: &Scenario, exec: Execution) -> Result<RunReport, PipelineError> {
    let started = Instant::now();
    let dam = stage_dam(sc, exec)?;
    let t_dam = started.elapsed().as_secs_f64();
    let bm = stage_bm(sc, &dam, exec)?;
    let t_bm = started.elapsed().as_secs_f64() - t_dam;
    let te = stage_te(sc, &bm, exec)?;
    let total = started.elapsed().as_secs_f64();
    Ok(RunReport {
        config: sc.clone(),
        dam: Some(dam),
        bm: Some(bm),
        te: Some(te),
        timings: StageTimings {
            dam: t_dam,
            bm: t_bm,
            te: total - t_dam - t_bm,
            total,
        },
    })
}

/// Maps a run outcome to the process exit code: 0 ok, 2 no convergence, 3 infeasible.
pub fn exit_code(result: &Result<RunReport, PipelineError>) -> i32 {
    match result {
        Ok(r) if r.te.as_ref().is_some_and(|t| !t.converged()) => 2,
        Ok(_) => 0,
        Err(e) if e.is_infeasible() => 3,
        Err(_) => 1,
    }
}
