//! Balancing-market re-optimization around the day-ahead baseline: one
//! big-M linearized MILP per EV and window, first hours committed, SOC
//! carried into the next window.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dam::{clean, BocMode, DamSchedule};
use crate::exec::Execution;
use crate::fleet::{battery_operating_cost, step_soc, EvSpec, FleetError, Schedule};
use crate::kernel::{solve_milp, KernelError, LinearProgram, MilpProblem, Status, DEFAULT_GAP};
use crate::scenario::PriceProcess;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BmError {
    #[error("no day-ahead baseline for EV {0}")]
    MissingBaseline(String),
    #[error("forecast covers {got} hours, window needs {needed}")]
    ForecastGap { needed: usize, got: usize },
    #[error("invalid rolling configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollingConfig {
    pub window_hours: usize,
    pub step_hours: usize,
    pub horizon: usize,
}

impl RollingConfig {
    pub fn new(window_hours: usize, step_hours: usize, horizon: usize) -> Result<Self, BmError> {
        if step_hours == 0 || step_hours > window_hours {
            return Err(BmError::Config(format!("need 1 <= step ({step_hours}) <= window ({window_hours})")));
        }
        Ok(RollingConfig {
            window_hours,
            step_hours,
            horizon,
        })
    }

    /// One window spanning the whole horizon.
    pub fn single_shot(horizon: usize) -> Self {
        RollingConfig {
            window_hours: horizon.max(1),
            step_hours: horizon.max(1),
            horizon,
        }
    }

    pub fn is_rolling(&self) -> bool {
        self.window_hours < self.horizon
    }

    /// `(start, len, commit)` of every window; tail windows shrink.
    pub fn windows(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.horizon {
            let len = self.window_hours.min(self.horizon - start);
            let commit = self.step_hours.min(len);
            out.push((start, len, commit));
            start += commit;
        }
        out
    }
}

/// What the SOC must satisfy at the end of a window that does not reach the
/// EV's departure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MidWindowTerminal {
    /// End on the day-ahead SOC path.
    #[default]
    DamBaseline,
    /// SOC bounds only, plus enough slack to still reach the desired SOC.
    BoundOnly,
}

/// How the degradation term enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationSign {
    /// c_d times the magnitude of discharging-mode power.
    #[default]
    Magnitude,
    /// c_d times the signed discharging-mode power (a negative cost).
    Printed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BmOptions {
    pub boc: BocMode,
    pub degradation: DegradationSign,
    pub terminal: MidWindowTerminal,
    pub exec: Execution,
}

impl Default for BmOptions {
    fn default() -> Self {
        BmOptions {
            boc: BocMode::Discharge,
            degradation: DegradationSign::Magnitude,
            terminal: MidWindowTerminal::DamBaseline,
            exec: Execution::default(),
        }
    }
}

/// Per-hour columns of a window model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HourCols {
    pub hour: usize,
    pub d1: usize,
    pub d2: usize,
    pub d3: usize,
    pub d4: usize,
    pub p_up: usize,
    pub p_down: usize,
    pub z1: usize,
    pub z2: usize,
    pub z3: usize,
    pub z4: usize,
}

/// Window MILP of one EV plus the column map needed to read it back.
#[derive(Debug, Clone, PartialEq)]
pub struct BmWindowModel {
    pub milp: MilpProblem,
    pub hours: Vec<HourCols>,
    /// Baseline net power F = P^FCh − P^FDis per modelled hour.
    pub baseline: Vec<f64>,
    pub m_up: Vec<f64>,
    pub m_down: Vec<f64>,
}

/// Regularizer that makes "no regulation" win ties.
const TIE_BREAK: f64 = 1e-6;

/// Input describing one EV-window.
#[derive(Debug, Clone, Copy)]
pub struct WindowInput<'a> {
    pub ev: &'a EvSpec,
    /// SOC at the start of `start`.
    pub soc_start: f64,
    pub baseline: &'a Schedule,
    /// Forecast prices for hours `start..start + forecast.len()`.
    pub forecast: &'a [f64],
    pub start: usize,
    pub len: usize,
}

pub fn build_bm_window_model(w: &WindowInput<'_>, opts: &BmOptions) -> Result<BmWindowModel, BmError> {
    let ev = w.ev;
    if w.forecast.len() < w.len {
        return Err(BmError::ForecastGap {
            needed: w.len,
            got: w.forecast.len(),
        });
    }
    let end = w.start + w.len;
    if w.baseline.len() < end.min(ev.departure) {
        return Err(BmError::MissingBaseline(ev.id.clone()));
    }
    let c_d = battery_operating_cost(ev)?.cost_per_kwh;
    let (c_ch, c_dis) = opts.boc.costs(c_d);
    let dis_sign = match opts.degradation {
        DegradationSign::Magnitude => 1.0,
        DegradationSign::Printed => -1.0,
    };

    let mut p = MilpProblem::new(LinearProgram::new());
    let mut hours = Vec::new();
    let mut base = Vec::new();
    let mut m_ups = Vec::new();
    let mut m_downs = Vec::new();
    let mut soc_terms: Vec<(usize, f64)> = Vec::new();
    let from = w.start.max(ev.arrival);
    let to = end.min(ev.departure);
    let soc_const = w.soc_start;
    for hour in from..to {
        let lam = w.forecast[hour - w.start];
        let f = w.baseline.net(hour);
        let m_up = (ev.p_max_ch + f).max(0.0);
        let m_down = (ev.p_max_ch - f).max(0.0);
        let d1 = p.add_binary(0.0);
        let d2 = p.add_binary(0.0);
        let d3 = p.add_binary(0.0);
        let d4 = p.add_binary(0.0);
        let p_up = p.lp.add_var(0.0, m_up, TIE_BREAK);
        let p_down = p.lp.add_var(0.0, m_down, TIE_BREAK);
        // charging-mode power c = F·d3 − z1 + z2, discharging-mode d = F·d4 − z3 + z4
        let z1 = p.lp.add_var(0.0, m_up, -lam - c_ch);
        let z2 = p.lp.add_var(0.0, m_down, lam + c_ch);
        let z3 = p.lp.add_var(0.0, m_up, -lam + dis_sign * c_dis);
        let z4 = p.lp.add_var(0.0, m_down, lam - dis_sign * c_dis);
        p.lp.objective[d3] += c_ch * f;
        p.lp.objective[d4] += -dis_sign * c_dis * f;

        p.lp.add_le(vec![(d1, 1.0), (d2, 1.0)], 1.0);
        p.lp.add_eq(vec![(d3, 1.0), (d4, 1.0)], 1.0);
        let c_row = vec![(d3, f), (z1, -1.0), (z2, 1.0)];
        let d_row = vec![(d4, f), (z3, -1.0), (z4, 1.0)];
        p.lp.add_ge(c_row.clone(), 0.0);
        p.lp.add_le(c_row.clone(), ev.p_max_ch);
        p.lp.add_ge(d_row.clone(), -ev.p_max_dis);
        p.lp.add_le(d_row.clone(), 0.0);
        for (z, a, b, x, m) in [
            (z1, d1, d3, p_up, m_up),
            (z2, d2, d3, p_down, m_down),
            (z3, d1, d4, p_up, m_up),
            (z4, d2, d4, p_down, m_down),
        ] {
            big_m(&mut p.lp, z, a, b, x, m);
        }

        for &(j, a) in &c_row {
            soc_terms.push((j, a * ev.eta_ch / ev.capacity_kwh));
        }
        for &(j, a) in &d_row {
            soc_terms.push((j, a / (ev.eta_dis * ev.capacity_kwh)));
        }
        let last = hour + 1 == to;
        if !last {
            p.lp.add_le(soc_terms.clone(), ev.soc_max - soc_const);
            p.lp.add_ge(soc_terms.clone(), ev.soc_min - soc_const);
        }
        hours.push(HourCols {
            hour,
            d1,
            d2,
            d3,
            d4,
            p_up,
            p_down,
            z1,
            z2,
            z3,
            z4,
        });
        base.push(f);
        m_ups.push(m_up);
        m_downs.push(m_down);
    }
    if !hours.is_empty() {
        let (lo, hi) = terminal_band(w, to, opts.terminal);
        if lo == hi {
            p.lp.add_eq(soc_terms, lo - soc_const);
        } else {
            p.lp.add_le(soc_terms.clone(), hi - soc_const);
            p.lp.add_ge(soc_terms, lo - soc_const);
        }
    }
    Ok(BmWindowModel {
        milp: p,
        hours,
        baseline: base,
        m_up: m_ups,
        m_down: m_downs,
    })
}

/// `z = δa·δb·x` for binaries δa, δb and `0 <= x <= m`.
fn big_m(lp: &mut LinearProgram, z: usize, a: usize, b: usize, x: usize, m: f64) {
    lp.add_le(vec![(z, 1.0), (x, -1.0)], 0.0);
    lp.add_ge(vec![(z, 1.0), (x, -1.0), (a, -m), (b, -m)], -2.0 * m);
    lp.add_ge(vec![(z, 1.0), (x, -1.0)], -m);
    lp.add_le(vec![(z, 1.0), (a, -m)], 0.0);
    lp.add_le(vec![(z, 1.0), (b, -m)], 0.0);
}

/// SOC band at the end of the modelled hours (ending at `to`).
fn terminal_band(w: &WindowInput<'_>, to: usize, rule: MidWindowTerminal) -> (f64, f64) {
    let ev = w.ev;
    if to == ev.departure {
        return (ev.soc_desired, ev.soc_desired);
    }
    match rule {
        MidWindowTerminal::DamBaseline => {
            let mut s = ev.soc_init;
            for t in ev.arrival..to {
                s = step_soc(s, w.baseline.p_ch[t], w.baseline.p_dis[t], ev, 1.0);
            }
            (s, s)
        }
        MidWindowTerminal::BoundOnly => {
            let rest = (ev.departure - to) as f64;
            let reach = ev.soc_desired - rest * ev.p_max_ch * ev.eta_ch / ev.capacity_kwh;
            (ev.soc_min.max(reach), ev.soc_max)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Charging,
    Discharging,
    Offline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Charging => "charging",
            Mode::Discharging => "discharging",
            Mode::Offline => "offline",
        }
    }
}

/// One committed EV-hour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BmHour {
    pub mode: Mode,
    /// Effective up-regulation (z¹ + z³), kW.
    pub up: f64,
    /// Effective down-regulation (z² + z⁴), kW.
    pub down: f64,
    /// Delivered power F − up + down, kW (negative = discharge).
    pub delivered: f64,
    /// Degradation cost per kWh of discharging-mode power, Dkk.
    pub c_dis: f64,
    /// Degradation cost per kWh of charging-mode power, Dkk.
    pub c_ch: f64,
    pub fallback: bool,
}

impl BmHour {
    pub fn offline() -> Self {
        BmHour {
            mode: Mode::Offline,
            up: 0.0,
            down: 0.0,
            delivered: 0.0,
            c_dis: 0.0,
            c_ch: 0.0,
            fallback: false,
        }
    }
}

/// One window's solved plan for one EV, all modelled hours.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPlan {
    pub hours: Vec<(usize, BmHour)>,
    pub solution: Vec<f64>,
    pub objective: f64,
    pub nodes: usize,
}

pub fn solve_window(w: &WindowInput<'_>, opts: &BmOptions) -> Result<Option<WindowPlan>, BmError> {
    let model = build_bm_window_model(w, opts)?;
    if model.hours.is_empty() {
        return Ok(Some(WindowPlan {
            hours: Vec::new(),
            solution: Vec::new(),
            objective: 0.0,
            nodes: 0,
        }));
    }
    let sol = solve_milp(&model.milp, DEFAULT_GAP)?;
    if sol.status != Status::Optimal {
        return Ok(None);
    }
    let c_d = battery_operating_cost(w.ev)?.cost_per_kwh;
    let (c_ch, c_dis) = opts.boc.costs(c_d);
    let x = &sol.values;
    let hours = model
        .hours
        .iter()
        .zip(&model.baseline)
        .map(|(h, &f)| {
            let up = clean(x[h.z1] + x[h.z3]);
            let down = clean(x[h.z2] + x[h.z4]);
            let mode = if x[h.d3] > 0.5 { Mode::Charging } else { Mode::Discharging };
            (
                h.hour,
                BmHour {
                    mode,
                    up,
                    down,
                    delivered: clean(f - up + down),
                    c_dis,
                    c_ch,
                    fallback: false,
                },
            )
        })
        .collect();
    Ok(Some(WindowPlan {
        hours,
        solution: sol.values,
        objective: sol.objective_value,
        nodes: sol.nodes,
    }))
}

/// Signed cashflow of committed hours at realized prices: positive is a
/// cost. Down-regulation is bought, up-regulation sold.
pub fn settle_window(committed: &[(usize, BmHour)], realized_prices: &[f64]) -> f64 {
    committed
        .iter()
        .map(|&(hour, h)| {
            let energy = (h.down - h.up) * realized_prices[hour];
            let wear = match h.mode {
                Mode::Discharging => h.c_dis * (-h.delivered).max(0.0),
                Mode::Charging => h.c_ch * h.delivered.max(0.0),
                Mode::Offline => 0.0,
            };
            energy + wear
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvBm {
    pub id: String,
    pub hours: Vec<BmHour>,
}

impl EvBm {
    pub fn delivered(&self) -> Vec<f64> {
        self.hours.iter().map(|h| h.delivered).collect()
    }
}

/// Hand-off record of one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowTrace {
    pub start: usize,
    pub len: usize,
    pub committed: Vec<usize>,
    /// SOC per EV entering the window.
    pub soc_in: Vec<f64>,
    /// SOC per EV after the committed hours.
    pub soc_out: Vec<f64>,
    pub fallbacks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmSchedule {
    pub evs: Vec<EvBm>,
    pub realized_cost: f64,
    pub rolling: bool,
    pub trace: Vec<WindowTrace>,
    pub solve_seconds: f64,
}

impl BmSchedule {
    pub fn fallback_count(&self) -> usize {
        self.trace.iter().map(|w| w.fallbacks.len()).sum()
    }

    /// Net delivered power per bus per hour, kW.
    pub fn bus_totals(&self, fleet: &[EvSpec], n_buses: usize) -> Vec<Vec<f64>> {
        let h = self.evs.first().map_or(0, |e| e.hours.len());
        let mut out = vec![vec![0.0; h]; n_buses];
        for (ev, b) in fleet.iter().zip(&self.evs) {
            for t in 0..h {
                out[ev.bus][t] += b.hours[t].delivered;
            }
        }
        out
    }
}

fn baseline_hour(ev: &EvSpec, baseline: &Schedule, hour: usize, opts: &BmOptions) -> BmHour {
    let f = baseline.net(hour);
    let (c_ch, c_dis) = opts.boc.costs(battery_operating_cost(ev).map_or(0.0, |c| c.cost_per_kwh));
    BmHour {
        mode: if f < 0.0 { Mode::Discharging } else { Mode::Charging },
        up: 0.0,
        down: 0.0,
        delivered: f,
        c_dis,
        c_ch,
        fallback: true,
    }
}

/// Rolls the window over the horizon. Fleet, baseline and output all follow
/// `fleet` order.
pub fn run_rolling(fleet: &[EvSpec], dam: &DamSchedule, prices: &PriceProcess, cfg: &RollingConfig, opts: &BmOptions) -> Result<BmSchedule, BmError> {
    let started = Instant::now();
    let horizon = cfg.horizon;
    if prices.actual.len() < horizon {
        return Err(BmError::ForecastGap {
            needed: horizon,
            got: prices.actual.len(),
        });
    }
    let baselines: Vec<&Schedule> = fleet
        .iter()
        .map(|ev| dam.get(&ev.id).map(|d| &d.schedule).ok_or_else(|| BmError::MissingBaseline(ev.id.clone())))
        .collect::<Result<_, _>>()?;
    let mut soc: Vec<f64> = fleet.iter().map(|e| e.soc_init).collect();
    let mut hours: Vec<Vec<BmHour>> = vec![vec![BmHour::offline(); horizon]; fleet.len()];
    let mut trace = Vec::new();

    for (start, len, commit) in cfg.windows() {
        let forecast = prices.forecast(start, len);
        let idx: Vec<usize> = (0..fleet.len()).collect();
        let plans = opts.exec.map(&idx, |&k| {
            let ev = &fleet[k];
            if ev.departure <= start || ev.arrival >= start + len {
                return Ok(Some(None));
            }
            let w = WindowInput {
                ev,
                soc_start: soc[k],
                baseline: baselines[k],
                forecast: &forecast.prices,
                start,
                len,
            };
            solve_window(&w, opts).map(|p| p.map(Some))
        });
        let soc_in = soc.clone();
        let mut fallbacks = Vec::new();
        for (k, plan) in plans.into_iter().enumerate() {
            let ev = &fleet[k];
            let plan = match plan {
                Ok(Some(p)) => p,
                Ok(None) => {
                    log::warn!("window at hour {start}: EV {} infeasible, committing baseline", ev.id);
                    fallbacks.push(ev.id.clone());
                    None
                }
                Err(BmError::Kernel(e)) => {
                    log::warn!("window at hour {start}: EV {} kernel error {e}, committing baseline", ev.id);
                    fallbacks.push(ev.id.clone());
                    None
                }
                Err(e) => return Err(e),
            };
            let modelled = plan.is_some();
            for hour in start..start + commit {
                if !ev.is_connected(hour) {
                    continue;
                }
                let h = match &plan {
                    Some(p) => p.hours.iter().find(|(t, _)| *t == hour).map(|x| x.1),
                    None => None,
                };
                let h = h.unwrap_or_else(|| {
                    debug_assert!(!modelled, "connected hour missing from plan");
                    baseline_hour(ev, baselines[k], hour, opts)
                });
                if hour == ev.arrival {
                    soc[k] = ev.soc_init;
                }
                soc[k] = step_soc(soc[k], h.delivered.max(0.0), (-h.delivered).max(0.0), ev, 1.0);
                hours[k][hour] = h;
            }
        }
        trace.push(WindowTrace {
            start,
            len,
            committed: (start..start + commit).collect(),
            soc_in,
            soc_out: soc.clone(),
            fallbacks,
        });
    }

    let evs: Vec<EvBm> = fleet.iter().zip(hours).map(|(ev, hours)| EvBm { id: ev.id.clone(), hours }).collect();
    let realized_cost = evs
        .iter()
        .map(|e| {
            let committed: Vec<(usize, BmHour)> = e.hours.iter().copied().enumerate().collect();
            settle_window(&committed, &prices.actual)
        })
        .sum();
    Ok(BmSchedule {
        evs,
        realized_cost,
        rolling: cfg.is_rolling(),
        trace,
        solve_seconds: started.elapsed().as_secs_f64(),
    })
}
