//! Transactive-energy negotiation. Aggregators track their balancing-market
//! plans, the DSO tracks the same plans inside transformer and voltage
//! limits, and a broker moves a virtual price λ per (bus, hour) along the
//! mismatch between the two until it settles.
//!
//! Everything is in per-unit on `P_base = P_trans^Max`: the quadratic terms
//! are `M·(x̂ − b̂)²` and `(ŷ − Σb̂)²`, and the price step is
//! `λ ← λ + β·(Σx̂ − ŷ)`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dam::clean;
use crate::exec::Execution;
use crate::fleet::{BusVirtualStorage, Schedule};
use crate::grid::{check_constraints, NetworkModel, Violation};
use crate::kernel::{pwl_anchored, solve_lp, KernelError, LinearProgram, PwlVar, Status, DEFAULT_SEGMENTS};

/// `[bus][hour]` values.
type BusHours = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TeError {
    #[error("aggregator {agent}, bus {bus}: rescheduling problem is {status:?}")]
    AgentInfeasible { agent: String, bus: usize, status: Status },
    #[error("DSO problem at hour {hour} is {status:?}; security limits contradict each other")]
    DsoInfeasible { hour: usize, status: Status },
    #[error("invalid negotiation input: {0}")]
    Config(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Upper limit on segments chosen by the automatic resolution.
pub const MAX_AUTO_SEGMENTS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NegotiationConfig {
    /// Initial step length β.
    pub beta: f64,
    /// Convergence threshold ω on |Δλ|.
    pub omega: f64,
    pub max_iters: usize,
    /// Minimum PWL segments per quadratic term.
    pub segments: usize,
    /// Widest PWL breakpoint spacing, kW; terms with a wide range get more
    /// than `segments`. `None` picks a quarter of the tolerated mismatch so
    /// quantization cannot stall the price iteration; `Some(0.0)` disables.
    pub resolution_kw: Option<f64>,
    /// β(l) = β₀ / (1 + 0.05·l) instead of a constant step.
    pub diminishing_step: bool,
    /// Let the DSO hold back the largest mismatch the convergence test
    /// tolerates, so converged aggregator schedules are secure.
    pub security_margin: bool,
}

impl Default for NegotiationConfig {
    fn default() -> Self {
        NegotiationConfig {
            beta: 0.4,
            omega: 0.005,
            max_iters: 500,
            segments: DEFAULT_SEGMENTS,
            resolution_kw: None,
            diminishing_step: false,
            security_margin: true,
        }
    }
}

impl NegotiationConfig {
    pub fn beta_at(&self, iteration: usize) -> f64 {
        if self.diminishing_step {
            self.beta / (1.0 + 0.05 * iteration as f64)
        } else {
            self.beta
        }
    }

    pub fn resolution_for(&self, p_base: f64) -> Option<f64> {
        match self.resolution_kw {
            None => Some(self.tolerated_mismatch_kw(p_base) / 4.0),
            Some(r) if r > 0.0 => Some(r),
            Some(_) => None,
        }
    }

    fn segments_for(&self, span_kw: f64, p_base: f64) -> usize {
        let wanted = |r: f64| (span_kw / r).ceil() as usize;
        match (self.resolution_kw, self.resolution_for(p_base)) {
            (None, Some(r)) => self.segments.max(wanted(r).min(MAX_AUTO_SEGMENTS)),
            (_, Some(r)) => self.segments.max(wanted(r)),
            (_, None) => self.segments,
        }
    }

    /// Largest per-(bus, hour) mismatch, kW, compatible with convergence.
    pub fn tolerated_mismatch_kw(&self, p_base: f64) -> f64 {
        self.omega * p_base / self.beta
    }
}

/// One aggregator: its per-bus virtual storages and the plan it wants to keep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorAgent {
    pub id: String,
    pub storages: Vec<BusVirtualStorage>,
    /// Net balancing-market power per storage per hour, kW.
    pub targets: Vec<Vec<f64>>,
    /// M_g per storage.
    pub participation: Vec<f64>,
}

impl AggregatorAgent {
    pub fn new(id: impl Into<String>, storages: Vec<BusVirtualStorage>, targets: Vec<Vec<f64>>, participation: f64) -> Self {
        let n = storages.len();
        AggregatorAgent {
            id: id.into(),
            storages,
            targets,
            participation: vec![participation; n],
        }
    }
}

/// Columns of one storage's model inside a (possibly shared) LP.
#[derive(Debug, Clone)]
struct AggCols {
    hours: Vec<(usize, usize, usize, PwlVar)>,
    tolerance: f64,
}

/// Small cost on throughput so that equal-cost charge/discharge pairs never win.
const THROUGHPUT: f64 = 1e-7;

fn add_storage_model(
    lp: &mut LinearProgram,
    s: &BusVirtualStorage,
    target: &[f64],
    weight: f64,
    lambda: Option<&[f64]>,
    p_base: f64,
    cfg: &NegotiationConfig,
) -> Result<AggCols, TeError> {
    let mut hours = Vec::new();
    let mut tolerance = 0.0f64;
    let mut energy: Vec<(usize, f64)> = Vec::new();
    let mut events = 0.0;
    for t in 0..s.horizon() {
        events += s.arrivals_kwh[t] - s.departures_kwh[t];
        if s.p_max_ch[t] <= 0.0 && s.p_max_dis[t] <= 0.0 {
            continue;
        }
        let lam = lambda.map_or(0.0, |l| l[t]);
        let ch = lp.add_var(0.0, s.p_max_ch[t], (lam + THROUGHPUT) / p_base);
        let dis = lp.add_var(0.0, s.p_max_dis[t], (-lam + THROUGHPUT) / p_base);
        let lo = -s.p_max_dis[t] / p_base;
        let hi = s.p_max_ch[t] / p_base;
        let pwl = pwl_anchored(weight, lo, hi, target[t] / p_base, cfg.segments_for(s.p_max_ch[t] + s.p_max_dis[t], p_base))?;
        tolerance = tolerance.max(pwl.max_error);
        let v = pwl.add_to_lp(lp, 1.0);
        let mut row = vec![(ch, 1.0 / p_base), (dis, -1.0 / p_base)];
        row.extend(v.terms(-1.0));
        lp.add_eq(row, v.lo);

        // stored energy at the start of t, after arrivals and departures
        lp.add_ge(energy.clone(), s.e_min[t] - events);
        lp.add_le(energy.clone(), s.e_max[t] - events);
        energy.push((ch, s.eta_ch));
        energy.push((dis, -1.0 / s.eta_dis));
        lp.add_ge(energy.clone(), s.e_end_min[t] - events);
        lp.add_le(energy.clone(), s.e_end_max[t] - events);
        hours.push((t, ch, dis, v));
    }
    if !hours.is_empty() {
        // energy left after the horizon, once everyone has left
        let h = s.horizon();
        let rest = events + s.arrivals_kwh[h] - s.departures_kwh[h];
        lp.add_ge(energy.clone(), s.e_min[h] - rest);
        lp.add_le(energy, s.e_max[h] - rest);
    }
    Ok(AggCols { hours, tolerance })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorResponse {
    /// Per storage, grid-side charge/discharge over the horizon.
    pub schedules: Vec<Schedule>,
    /// Largest PWL approximation error of any quadratic term.
    pub pwl_tolerance: f64,
}

/// Per-storage response to λ (`[bus][hour]`).
pub fn storage_response(agent: &AggregatorAgent, k: usize, lambda: &[Vec<f64>], p_base: f64, cfg: &NegotiationConfig) -> Result<(Schedule, f64), TeError> {
    let s = &agent.storages[k];
    let mut lp = LinearProgram::new();
    let cols = add_storage_model(&mut lp, s, &agent.targets[k], agent.participation[k], Some(&lambda[s.bus]), p_base, cfg)?;
    let sol = solve_lp(&lp)?;
    if sol.status != Status::Optimal {
        return Err(TeError::AgentInfeasible {
            agent: agent.id.clone(),
            bus: s.bus,
            status: sol.status,
        });
    }
    let mut sched = Schedule::zeros(s.horizon());
    for &(t, ch, dis, _) in &cols.hours {
        sched.p_ch[t] = clean(sol.values[ch]);
        sched.p_dis[t] = clean(sol.values[dis]);
    }
    Ok((sched, cols.tolerance))
}

pub fn aggregator_response(agent: &AggregatorAgent, lambda: &[Vec<f64>], p_base: f64, cfg: &NegotiationConfig) -> Result<AggregatorResponse, TeError> {
    let mut schedules = Vec::new();
    let mut tol = 0.0f64;
    for k in 0..agent.storages.len() {
        let (s, t) = storage_response(agent, k, lambda, p_base, cfg)?;
        schedules.push(s);
        tol = tol.max(t);
    }
    Ok(AggregatorResponse { schedules, pwl_tolerance: tol })
}

/// Aggregate charge/discharge capability per bus per hour over all agents.
fn bus_capability(agents: &[AggregatorAgent], n_buses: usize, horizon: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut ch = vec![vec![0.0; horizon]; n_buses];
    let mut dis = vec![vec![0.0; horizon]; n_buses];
    for a in agents {
        for s in &a.storages {
            for t in 0..horizon {
                ch[s.bus][t] += s.p_max_ch[t];
                dis[s.bus][t] += s.p_max_dis[t];
            }
        }
    }
    (ch, dis)
}

/// Everything the DSO knows: network, registered charger capability per bus,
/// and the security margins it applies.
#[derive(Debug, Clone, PartialEq)]
pub struct DsoView<'a> {
    pub net: &'a NetworkModel,
    pub cap_ch: Vec<Vec<f64>>,
    pub cap_dis: Vec<Vec<f64>>,
    /// Σ_j P^BM per `[bus][hour]`, kW.
    pub targets: Vec<Vec<f64>>,
    /// Transformer margin per hour, kW.
    pub trans_margin: Vec<f64>,
    /// Voltage margin per `[hour][bus]`, p.u.
    pub volt_margin: Vec<Vec<f64>>,
}

impl<'a> DsoView<'a> {
    pub fn new(net: &'a NetworkModel, agents: &[AggregatorAgent], cfg: &NegotiationConfig) -> Self {
        let n = net.n_buses();
        let h = net.horizon();
        let (cap_ch, cap_dis) = bus_capability(agents, n, h);
        let targets = bus_targets(agents, n, h);
        let mut trans_margin = vec![0.0; h];
        let mut volt_margin = vec![vec![0.0; n]; h];
        if cfg.security_margin {
            let kappa = cfg.tolerated_mismatch_kw(net.spec.p_trans_max_kw);
            for t in 0..h {
                let active: Vec<usize> = (0..n).filter(|&g| cap_ch[g][t] > 0.0 || cap_dis[g][t] > 0.0).collect();
                trans_margin[t] = (kappa * active.len() as f64).min(net.spec.p_trans_max_kw);
                for k in 0..n {
                    let raw: f64 = active.iter().map(|&g| net.sensitivity[t][(k, g)].abs() * kappa).sum();
                    let u0 = net.u0[t][k];
                    // never tighten past the base-case voltage itself
                    let room = (u0 - net.spec.u_min).min(net.spec.u_max - u0).max(0.0);
                    volt_margin[t][k] = raw.min(room);
                }
            }
        }
        DsoView {
            net,
            cap_ch,
            cap_dis,
            targets,
            trans_margin,
            volt_margin,
        }
    }
}

pub fn bus_targets(agents: &[AggregatorAgent], n_buses: usize, horizon: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; horizon]; n_buses];
    for a in agents {
        for (s, tgt) in a.storages.iter().zip(&a.targets) {
            for t in 0..horizon {
                out[s.bus][t] += tgt[t];
            }
        }
    }
    out
}

fn add_dso_hour(
    lp: &mut LinearProgram,
    view: &DsoView<'_>,
    t: usize,
    lambda: Option<&[Vec<f64>]>,
    p_base: f64,
    cfg: &NegotiationConfig,
) -> Result<(Vec<(usize, PwlVar)>, f64), TeError> {
    let net = view.net;
    let n = net.n_buses();
    let mut vars = Vec::new();
    for g in 0..n {
        let (c, d) = (view.cap_ch[g][t], view.cap_dis[g][t]);
        if c <= 0.0 && d <= 0.0 {
            continue;
        }
        let pwl = pwl_anchored(1.0, -d / p_base, c / p_base, view.targets[g][t] / p_base, cfg.segments_for(c + d, p_base))?;
        let lam = lambda.map_or(0.0, |l| l[g][t]);
        let v = pwl.add_to_lp(lp, 1.0);
        for (j, _) in v.terms(1.0) {
            lp.objective[j] -= lam;
        }
        vars.push((g, v));
    }
    let tol = 0.0;
    if vars.is_empty() {
        return Ok((vars, tol));
    }
    // transformer: |Σ ŷ| ≤ (P_max − margin)/P_base
    let limit = (net.spec.p_trans_max_kw - view.trans_margin[t]) / p_base;
    let lo_sum: f64 = vars.iter().map(|(_, v)| v.lo).sum();
    let row: Vec<(usize, f64)> = vars.iter().flat_map(|(_, v)| v.terms(1.0)).collect();
    lp.add_le(row.clone(), limit - lo_sum);
    lp.add_ge(row, -limit - lo_sum);
    // U_k = U⁰_k − Σ_g S_kg·P_base·ŷ_g within the (tightened) band
    for k in 0..n {
        let s = &net.sensitivity[t];
        let mut row = Vec::new();
        let mut shift = 0.0;
        for (g, v) in &vars {
            let a = s[(k, *g)] * p_base;
            if a != 0.0 {
                row.extend(v.terms(a));
                shift += a * v.lo;
            }
        }
        if row.is_empty() {
            continue;
        }
        let u0 = net.u0[t][k];
        let m = view.volt_margin[t][k];
        // u0 − (shift + row) ≥ u_min + m  ⇔  row ≤ u0 − u_min − m − shift
        lp.add_le(row.clone(), u0 - net.spec.u_min - m - shift);
        lp.add_ge(row, u0 - net.spec.u_max + m - shift);
    }
    Ok((vars, tol))
}

/// P^DSO per `[bus][hour]`, kW.
pub fn dso_response(view: &DsoView<'_>, lambda: &[Vec<f64>], p_base: f64, cfg: &NegotiationConfig, exec: Execution) -> Result<Vec<Vec<f64>>, TeError> {
    let n = view.net.n_buses();
    let h = view.net.horizon();
    let per_hour = exec.map_range(h, |t| -> Result<Vec<(usize, f64)>, TeError> {
        let mut lp = LinearProgram::new();
        let (vars, _) = add_dso_hour(&mut lp, view, t, Some(lambda), p_base, cfg)?;
        if vars.is_empty() {
            return Ok(Vec::new());
        }
        let sol = solve_lp(&lp)?;
        if sol.status != Status::Optimal {
            return Err(TeError::DsoInfeasible { hour: t, status: sol.status });
        }
        Ok(vars.iter().map(|(g, v)| (*g, clean(v.value(&sol.values) * p_base))).collect())
    });
    let mut out = vec![vec![0.0; h]; n];
    for (t, r) in per_hour.into_iter().enumerate() {
        for (g, y) in r? {
            out[g][t] = y;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub beta: f64,
    /// λ after this round's update, `[bus][hour]`.
    pub lambda: Vec<Vec<f64>>,
    /// Σ_j net − P^DSO, kW, `[bus][hour]`.
    pub mismatch_kw: Vec<Vec<f64>>,
    pub max_abs_mismatch_kw: f64,
    pub max_abs_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegotiationState {
    pub lambda: Vec<Vec<f64>>,
    pub iteration: usize,
    pub beta: f64,
    pub omega: f64,
    pub history: Vec<IterationRecord>,
}

impl NegotiationState {
    pub fn new(n_buses: usize, horizon: usize, beta: f64, omega: f64) -> Self {
        NegotiationState {
            lambda: vec![vec![0.0; horizon]; n_buses],
            iteration: 0,
            beta,
            omega,
            history: Vec::new(),
        }
    }

    /// Largest |Δλ| of the latest round, or infinity before the first.
    pub fn last_step(&self) -> f64 {
        self.history.last().map_or(f64::INFINITY, |r| r.max_abs_step)
    }

    pub fn is_converged(&self) -> bool {
        self.last_step() <= self.omega
    }
}

/// One subgradient step with the mismatch normalized by `p_base`.
pub fn update_prices(state: &NegotiationState, agg_totals: &[Vec<f64>], dso: &[Vec<f64>], p_base: f64, cfg: &NegotiationConfig) -> NegotiationState {
    let beta = cfg.beta_at(state.iteration);
    let mut lambda = state.lambda.clone();
    let mut mismatch = vec![vec![0.0; lambda.first().map_or(0, Vec::len)]; lambda.len()];
    let mut worst_m = 0.0f64;
    let mut worst_step = 0.0f64;
    for g in 0..lambda.len() {
        for t in 0..lambda[g].len() {
            // solver noise must not move the price
            let m = clean(agg_totals[g][t] - dso[g][t]);
            mismatch[g][t] = m;
            let step = beta * m / p_base;
            lambda[g][t] += step;
            worst_m = worst_m.max(m.abs());
            worst_step = worst_step.max(step.abs());
        }
    }
    let mut history = state.history.clone();
    history.push(IterationRecord {
        iteration: state.iteration + 1,
        beta,
        lambda: lambda.clone(),
        mismatch_kw: mismatch,
        max_abs_mismatch_kw: worst_m,
        max_abs_step: worst_step,
    });
    NegotiationState {
        lambda,
        iteration: state.iteration + 1,
        beta: cfg.beta_at(state.iteration + 1),
        omega: state.omega,
        history,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentOutcome {
    pub id: String,
    pub buses: Vec<usize>,
    pub targets: Vec<Vec<f64>>,
    pub schedules: Vec<Schedule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeOutcome {
    pub converged: bool,
    pub iterations: usize,
    pub lambda: Vec<Vec<f64>>,
    pub agents: Vec<AgentOutcome>,
    /// P^DSO per `[bus][hour]`, kW.
    pub dso: Vec<Vec<f64>>,
    /// Security check of the aggregators' final schedules.
    pub violations: Vec<Violation>,
    pub history: Vec<IterationRecord>,
    /// (iteration, agent id) pairs where an agent fell back to its last response.
    pub distress: Vec<(usize, String)>,
    pub pwl_tolerance: f64,
    pub solve_seconds: f64,
}

impl TeOutcome {
    /// Σ_j net aggregator power per `[bus][hour]`, kW.
    pub fn aggregator_totals(&self, n_buses: usize, horizon: usize) -> Vec<Vec<f64>> {
        totals(self.agents.iter().map(|a| (&a.buses, &a.schedules)), n_buses, horizon)
    }
}

fn totals<'a>(it: impl Iterator<Item = (&'a Vec<usize>, &'a Vec<Schedule>)>, n: usize, h: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; h]; n];
    for (buses, scheds) in it {
        for (&g, s) in buses.iter().zip(scheds) {
            for t in 0..h {
                out[g][t] += s.net(t);
            }
        }
    }
    out
}

/// Runs synchronous rounds until every |Δλ| ≤ ω or `max_iters` is reached.
/// A non-converged outcome carries the round with the smallest mismatch.
pub fn negotiate(agents: &[AggregatorAgent], net: &NetworkModel, cfg: &NegotiationConfig, exec: Execution) -> Result<TeOutcome, TeError> {
    let started = Instant::now();
    if !(cfg.beta > 0.0) || !(cfg.omega > 0.0) || cfg.max_iters == 0 {
        return Err(TeError::Config("beta and omega must be > 0 and max_iters >= 1".into()));
    }
    let n = net.n_buses();
    let h = net.horizon();
    let p_base = net.spec.p_trans_max_kw;
    let view = DsoView::new(net, agents, cfg);
    let pairs: Vec<(usize, usize)> = agents
        .iter()
        .enumerate()
        .flat_map(|(j, a)| (0..a.storages.len()).map(move |k| (j, k)))
        .collect();

    let mut state = NegotiationState::new(n, h, cfg.beta, cfg.omega);
    let mut last: Vec<Option<Schedule>> = vec![None; pairs.len()];
    let mut distress = Vec::new();
    let mut tol = 0.0f64;
    // (mismatch, schedules, dso, lambda) of the closest round so far
    let mut best: Option<(f64, Vec<Schedule>, BusHours, BusHours)> = None;
    let mut round_out: Option<(Vec<Schedule>, Vec<Vec<f64>>)> = None;

    while state.iteration < cfg.max_iters {
        let lambda = &state.lambda;
        let responses = exec.map(&pairs, |&(j, k)| storage_response(&agents[j], k, lambda, p_base, cfg));
        let mut scheds = Vec::with_capacity(pairs.len());
        for (i, r) in responses.into_iter().enumerate() {
            match r {
                Ok((s, t)) => {
                    tol = tol.max(t);
                    last[i] = Some(s.clone());
                    scheds.push(s);
                }
                Err(e @ TeError::AgentInfeasible { .. }) => {
                    let (j, _) = pairs[i];
                    log::warn!("round {}: {e}", state.iteration + 1);
                    distress.push((state.iteration + 1, agents[j].id.clone()));
                    match &last[i] {
                        Some(prev) => scheds.push(prev.clone()),
                        None => return Err(e),
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let dso = dso_response(&view, &state.lambda, p_base, cfg, exec)?;
        let agg = totals_from_pairs(agents, &pairs, &scheds, n, h);
        let prev_lambda = state.lambda.clone();
        state = update_prices(&state, &agg, &dso, p_base, cfg);
        let rec = state.history.last().unwrap();
        log::debug!(
            "round {}: max mismatch {:.4} kW, max step {:.5}",
            rec.iteration,
            rec.max_abs_mismatch_kw,
            rec.max_abs_step
        );
        if best.as_ref().is_none_or(|b| rec.max_abs_mismatch_kw < b.0) {
            best = Some((rec.max_abs_mismatch_kw, scheds.clone(), dso.clone(), prev_lambda));
        }
        round_out = Some((scheds, dso));
        if state.is_converged() {
            break;
        }
    }

    let converged = state.is_converged();
    let (scheds, dso, lambda) = if converged {
        let (s, d) = round_out.unwrap();
        (s, d, state.lambda.clone())
    } else {
        let (_, s, d, l) = best.unwrap();
        (s, d, l)
    };
    let agents_out = collect_agents(agents, &pairs, scheds);
    let agg = totals(agents_out.iter().map(|a| (&a.buses, &a.schedules)), n, h);
    let violations = check_constraints(net, &agg);
    Ok(TeOutcome {
        converged,
        iterations: state.iteration,
        lambda,
        agents: agents_out,
        dso,
        violations,
        history: state.history,
        distress,
        pwl_tolerance: tol,
        solve_seconds: started.elapsed().as_secs_f64(),
    })
}

fn totals_from_pairs(agents: &[AggregatorAgent], pairs: &[(usize, usize)], scheds: &[Schedule], n: usize, h: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; h]; n];
    for (&(j, k), s) in pairs.iter().zip(scheds) {
        let g = agents[j].storages[k].bus;
        for t in 0..h {
            out[g][t] += s.net(t);
        }
    }
    out
}

fn collect_agents(agents: &[AggregatorAgent], pairs: &[(usize, usize)], scheds: Vec<Schedule>) -> Vec<AgentOutcome> {
    let mut out: Vec<AgentOutcome> = agents
        .iter()
        .map(|a| AgentOutcome {
            id: a.id.clone(),
            buses: a.storages.iter().map(|s| s.bus).collect(),
            targets: a.targets.clone(),
            schedules: Vec::new(),
        })
        .collect();
    for (&(j, _), s) in pairs.iter().zip(scheds) {
        out[j].schedules.push(s);
    }
    out
}

/// Social cost `Σ_j A_j + D` with exact quadratics, per unit.
pub fn social_cost(agents: &[AggregatorAgent], schedules: &[Vec<Schedule>], dso: &[Vec<f64>], p_base: f64) -> f64 {
    let mut total = 0.0;
    for (a, scheds) in agents.iter().zip(schedules) {
        for (k, (s, sch)) in a.storages.iter().zip(scheds).enumerate() {
            for t in s.active_hours() {
                let d = (sch.net(t) - a.targets[k][t]) / p_base;
                total += a.participation[k] * d * d;
            }
        }
    }
    let n = dso.len();
    let h = dso.first().map_or(0, Vec::len);
    let targets = bus_targets(agents, n, h);
    let (cap_ch, cap_dis) = bus_capability(agents, n, h);
    for g in 0..n {
        for t in 0..h {
            if cap_ch[g][t] > 0.0 || cap_dis[g][t] > 0.0 {
                let d = (dso[g][t] - targets[g][t]) / p_base;
                total += d * d;
            }
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralizedSolution {
    pub schedules: Vec<Vec<Schedule>>,
    pub dso: Vec<Vec<f64>>,
    /// Social cost with exact quadratics at the PWL optimum.
    pub social_cost: f64,
}

/// Reference solve of the coupled problem in one LP: all aggregator models,
/// the DSO model of every hour, and `Σ_j x̂ = ŷ` per (bus, hour).
pub fn centralized_solve(agents: &[AggregatorAgent], net: &NetworkModel, cfg: &NegotiationConfig) -> Result<CentralizedSolution, TeError> {
    let n = net.n_buses();
    let h = net.horizon();
    let p_base = net.spec.p_trans_max_kw;
    let view = DsoView::new(net, agents, cfg);
    let mut lp = LinearProgram::new();
    let mut agg_cols = Vec::new();
    for a in agents {
        let mut per = Vec::new();
        for (k, s) in a.storages.iter().enumerate() {
            per.push(add_storage_model(&mut lp, s, &a.targets[k], a.participation[k], None, p_base, cfg)?);
        }
        agg_cols.push(per);
    }
    let mut dso_cols = Vec::new();
    for t in 0..h {
        dso_cols.push(add_dso_hour(&mut lp, &view, t, None, p_base, cfg)?.0);
    }
    for (t, vars) in dso_cols.iter().enumerate() {
        for (g, v) in vars {
            let mut row: Vec<(usize, f64)> = v.terms(-1.0).collect();
            for (a, cols) in agents.iter().zip(&agg_cols) {
                for (s, c) in a.storages.iter().zip(cols) {
                    if s.bus != *g {
                        continue;
                    }
                    if let Some(&(_, ch, dis, _)) = c.hours.iter().find(|x| x.0 == t) {
                        row.push((ch, 1.0 / p_base));
                        row.push((dis, -1.0 / p_base));
                    }
                }
            }
            lp.add_eq(row, v.lo);
        }
    }
    let sol = solve_lp(&lp)?;
    if sol.status != Status::Optimal {
        return Err(TeError::DsoInfeasible { hour: 0, status: sol.status });
    }
    let schedules: Vec<Vec<Schedule>> = agg_cols
        .iter()
        .map(|cols| {
            cols.iter()
                .map(|c| {
                    let mut s = Schedule::zeros(h);
                    for &(t, ch, dis, _) in &c.hours {
                        s.p_ch[t] = sol.values[ch];
                        s.p_dis[t] = sol.values[dis];
                    }
                    s
                })
                .collect()
        })
        .collect();
    let mut dso = vec![vec![0.0; h]; n];
    for (t, vars) in dso_cols.iter().enumerate() {
        for (g, v) in vars {
            dso[*g][t] = v.value(&sol.values) * p_base;
        }
    }
    let cost = social_cost(agents, &schedules, &dso, p_base);
    Ok(CentralizedSolution {
        schedules,
        dso,
        social_cost: cost,
    })
}

/// Accessor used by the convexification checks.
pub fn max_simultaneous(s: &Schedule) -> f64 {
    s.p_ch.iter().zip(&s.p_dis).map(|(c, d)| c.min(*d)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fleet::{aggregate_to_bus, tests::type1};
    use crate::grid::tests::two_bus;

    fn one_agent(targets: Vec<f64>) -> (AggregatorAgent, NetworkModel) {
        let fleet = vec![type1("a", 1, 0, 2), type1("b", 1, 0, 2)];
        let storages = aggregate_to_bus(&fleet, 2, 2).unwrap();
        let mut net = two_bus(0.001, 0.001, 0.0);
        net.spec.base_load_kw = vec![vec![0.0, 0.0]; 2];
        let net = NetworkModel::new(net.spec).unwrap();
        (AggregatorAgent::new("A", storages, vec![targets], 1.0), net)
    }

    #[test]
    fn zero_price_reproduces_a_feasible_target() {
        // +4 kW then the energy-neutral discharge back
        let back = 4.0 * 0.9 * 0.95;
        let (agent, net) = one_agent(vec![4.0, -back]);
        let lam = vec![vec![0.0; 2]; 2];
        let r = aggregator_response(&agent, &lam, 70.0, &NegotiationConfig::default()).unwrap();
        assert!((r.schedules[0].net(0) - 4.0).abs() < 1e-6);
        assert!((r.schedules[0].net(1) + back).abs() < 1e-6);
        let _ = net;
    }

    #[test]
    fn price_step_arithmetic() {
        let cfg = NegotiationConfig::default();
        let mut st = NegotiationState::new(1, 1, 0.4, 0.005);
        st.lambda[0][0] = 0.10;
        let up = update_prices(&st, &[vec![2.0]], &[vec![0.0]], 70.0, &cfg);
        assert!((up.lambda[0][0] - 0.111_428_571).abs() < 1e-8);
        let down = update_prices(&st, &[vec![0.0]], &[vec![2.0]], 70.0, &cfg);
        assert!((down.lambda[0][0] - (0.10 - 0.4 * 2.0 / 70.0)).abs() < 1e-12);
        let same = update_prices(&st, &[vec![1.5]], &[vec![1.5]], 70.0, &cfg);
        assert_eq!(same.lambda, st.lambda);
        assert_eq!(same.history.len(), 1);
    }

    #[test]
    fn secure_targets_settle_in_one_round() {
        let back = 4.0 * 0.9 * 0.95;
        let (agent, net) = one_agent(vec![4.0, -back]);
        let out = negotiate(&[agent], &net, &NegotiationConfig::default(), Execution::Sequential).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 1);
        assert!(out.lambda.iter().flatten().all(|&l| l == 0.0));
        assert!((out.agents[0].schedules[0].net(0) - 4.0).abs() < 1e-6);
    }
}
