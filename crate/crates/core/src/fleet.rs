//! EV battery physics, battery operating cost, per-bus virtual storage and
//! the split of bus-level schedules back onto individual vehicles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::kernel::{solve_lp, LinearProgram, Status};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FleetError {
    #[error("EV {ev}: {field} must be > 0, got {value}")]
    NonPositiveParameter { ev: String, field: &'static str, value: f64 },
    #[error("EV {ev} references unknown bus {bus}")]
    UnknownBus { ev: String, bus: usize },
    #[error("bus {bus}: per-EV SOC constraints cannot be met ({reason})")]
    InfeasibleAllocation { bus: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvSpec {
    pub id: String,
    pub ev_type: u8,
    pub bus: usize,
    /// E_b, kWh.
    pub capacity_kwh: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub soc_init: f64,
    pub soc_desired: f64,
    pub p_max_ch: f64,
    pub p_max_dis: f64,
    pub eta_ch: f64,
    pub eta_dis: f64,
    /// First connected hour (absolute).
    pub arrival: usize,
    /// First hour no longer connected; the desired SOC is due at its start.
    pub departure: usize,
    pub cycle_life: f64,
    pub dod: f64,
    /// Battery capital cost, Dkk.
    pub c_bat: f64,
}

impl EvSpec {
    pub fn is_connected(&self, hour: usize) -> bool {
        self.arrival <= hour && hour < self.departure
    }

    pub fn window_len(&self) -> usize {
        self.departure - self.arrival
    }

    /// Every violated invariant, as `(field, message)`.
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let frac = |name: &'static str, v: f64, out: &mut Vec<(&'static str, String)>| {
            if !(0.0..=1.0).contains(&v) {
                out.push((name, format!("must lie in [0, 1], got {v}")));
            }
        };
        frac("soc_min", self.soc_min, &mut out);
        frac("soc_max", self.soc_max, &mut out);
        frac("soc_init", self.soc_init, &mut out);
        frac("soc_desired", self.soc_desired, &mut out);
        frac("dod", self.dod, &mut out);
        if !(self.soc_min <= self.soc_init && self.soc_init <= self.soc_max) {
            out.push(("soc_init", format!("must lie in [soc_min, soc_max], got {}", self.soc_init)));
        }
        if !(self.soc_min <= self.soc_desired && self.soc_desired <= self.soc_max) {
            out.push(("soc_desired", format!("must lie in [soc_min, soc_max], got {}", self.soc_desired)));
        }
        if self.arrival >= self.departure {
            out.push(("departure", format!("must be after arrival {}, got {}", self.arrival, self.departure)));
        }
        for (name, v) in [
            ("capacity_kwh", self.capacity_kwh),
            ("p_max_ch", self.p_max_ch),
            ("p_max_dis", self.p_max_dis),
            ("cycle_life", self.cycle_life),
            ("dod", self.dod),
        ] {
            if !(v > 0.0) {
                out.push((name, format!("must be > 0, got {v}")));
            }
        }
        for (name, v) in [("eta_ch", self.eta_ch), ("eta_dis", self.eta_dis)] {
            if !(v > 0.0 && v <= 1.0) {
                out.push((name, format!("must lie in (0, 1], got {v}")));
            }
        }
        if self.eta_ch * self.eta_dis > 1.0 {
            out.push(("eta_ch", "eta_ch * eta_dis must not exceed 1".to_string()));
        }
        if !(self.c_bat >= 0.0) {
            out.push(("c_bat", format!("must be >= 0, got {}", self.c_bat)));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryCost {
    /// L_ET = L_c·E_b·DoD, kWh.
    pub lifetime_throughput_kwh: f64,
    /// c_d, Dkk/kWh.
    pub cost_per_kwh: f64,
}

pub fn battery_operating_cost(spec: &EvSpec) -> Result<BatteryCost, FleetError> {
    for (field, value) in [("cycle_life", spec.cycle_life), ("capacity_kwh", spec.capacity_kwh), ("dod", spec.dod)] {
        if !(value > 0.0) {
            return Err(FleetError::NonPositiveParameter {
                ev: spec.id.clone(),
                field,
                value,
            });
        }
    }
    let l_et = spec.cycle_life * spec.capacity_kwh * spec.dod;
    Ok(BatteryCost {
        lifetime_throughput_kwh: l_et,
        cost_per_kwh: spec.c_bat / l_et,
    })
}

/// SOC after `dt` hours at the given grid-side powers. Not clamped.
pub fn step_soc(soc: f64, p_ch: f64, p_dis: f64, spec: &EvSpec, dt: f64) -> f64 {
    soc + (p_ch * spec.eta_ch - p_dis / spec.eta_dis) * dt / spec.capacity_kwh
}

/// Grid-side powers of one entity over the horizon, kW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub p_ch: Vec<f64>,
    pub p_dis: Vec<f64>,
}

impl Schedule {
    pub fn zeros(horizon: usize) -> Self {
        Schedule {
            p_ch: vec![0.0; horizon],
            p_dis: vec![0.0; horizon],
        }
    }

    pub fn len(&self) -> usize {
        self.p_ch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_ch.is_empty()
    }

    pub fn net(&self, hour: usize) -> f64 {
        self.p_ch[hour] - self.p_dis[hour]
    }

    /// Splits signed net power into the charge/discharge pair.
    pub fn from_net(net: &[f64]) -> Self {
        Schedule {
            p_ch: net.iter().map(|&p| p.max(0.0)).collect(),
            p_dis: net.iter().map(|&p| (-p).max(0.0)).collect(),
        }
    }
}

/// Time-varying virtual storage: the EVs of one bus seen as a single battery.
///
/// Energy is tracked at hour boundaries. `e_min[t]`/`e_max[t]` bound the
/// stored energy at the start of hour `t` after arrivals and departures;
/// `e_end_min[t]`/`e_end_max[t]` bound it at the end of hour `t` before them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusVirtualStorage {
    pub bus: usize,
    pub members: Vec<String>,
    pub capacity_kwh: f64,
    pub p_max_ch: Vec<f64>,
    pub p_max_dis: Vec<f64>,
    pub e_min: Vec<f64>,
    pub e_max: Vec<f64>,
    pub e_end_min: Vec<f64>,
    pub e_end_max: Vec<f64>,
    /// Energy brought in by EVs arriving at the start of each hour, plus one
    /// trailing entry for the boundary after the horizon.
    pub arrivals_kwh: Vec<f64>,
    /// Energy taken away (at the desired SOC) by EVs leaving at each boundary.
    pub departures_kwh: Vec<f64>,
    pub initial_energy_kwh: f64,
    pub desired_energy_kwh: f64,
    pub eta_ch: f64,
    pub eta_dis: f64,
}

impl BusVirtualStorage {
    pub fn horizon(&self) -> usize {
        self.p_max_ch.len()
    }

    pub fn active_hours(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.horizon()).filter(|&t| self.p_max_ch[t] > 0.0 || self.p_max_dis[t] > 0.0)
    }

    /// Stored energy at each boundary (after events) implied by `net` powers.
    pub fn energy_path(&self, sched: &Schedule) -> Vec<f64> {
        let h = self.horizon();
        let mut e = vec![0.0; h + 1];
        e[0] = self.arrivals_kwh[0] - self.departures_kwh[0];
        for t in 0..h {
            let end = e[t] + self.eta_ch * sched.p_ch[t] - sched.p_dis[t] / self.eta_dis;
            e[t + 1] = end + self.arrivals_kwh[t + 1] - self.departures_kwh[t + 1];
        }
        e
    }

    /// Largest violation of power and energy limits by `sched`, kW or kWh.
    pub fn max_violation(&self, sched: &Schedule) -> f64 {
        let e = self.energy_path(sched);
        let mut worst = 0.0f64;
        for t in 0..self.horizon() {
            worst = worst
                .max(sched.p_ch[t] - self.p_max_ch[t])
                .max(sched.p_dis[t] - self.p_max_dis[t])
                .max(-sched.p_ch[t])
                .max(-sched.p_dis[t]);
            let end = e[t + 1] - self.arrivals_kwh[t + 1] + self.departures_kwh[t + 1];
            worst = worst
                .max(self.e_min[t] - e[t])
                .max(e[t] - self.e_max[t])
                .max(self.e_end_min[t] - end)
                .max(end - self.e_end_max[t]);
        }
        let h = self.horizon();
        worst.max(self.e_min[h] - e[h]).max(e[h] - self.e_max[h])
    }
}

/// Groups `fleet` by bus. Output is sorted by bus index and omits empty buses.
pub fn aggregate_to_bus(fleet: &[EvSpec], horizon: usize, n_buses: usize) -> Result<Vec<BusVirtualStorage>, FleetError> {
    let mut by_bus: BTreeMap<usize, Vec<&EvSpec>> = BTreeMap::new();
    for ev in fleet {
        if ev.bus >= n_buses {
            return Err(FleetError::UnknownBus {
                ev: ev.id.clone(),
                bus: ev.bus,
            });
        }
        by_bus.entry(ev.bus).or_default().push(ev);
    }
    Ok(by_bus.into_iter().map(|(bus, evs)| build_storage(bus, &evs, horizon)).collect())
}

fn build_storage(bus: usize, evs: &[&EvSpec], horizon: usize) -> BusVirtualStorage {
    let h = horizon;
    let mut s = BusVirtualStorage {
        bus,
        members: evs.iter().map(|e| e.id.clone()).collect(),
        capacity_kwh: evs.iter().map(|e| e.capacity_kwh).sum(),
        p_max_ch: vec![0.0; h],
        p_max_dis: vec![0.0; h],
        e_min: vec![0.0; h + 1],
        e_max: vec![0.0; h + 1],
        e_end_min: vec![0.0; h],
        e_end_max: vec![0.0; h],
        arrivals_kwh: vec![0.0; h + 1],
        departures_kwh: vec![0.0; h + 1],
        initial_energy_kwh: evs.iter().map(|e| e.soc_init * e.capacity_kwh).sum(),
        desired_energy_kwh: evs.iter().map(|e| e.soc_desired * e.capacity_kwh).sum(),
        // one efficiency per bus; the worst member is the safe choice
        eta_ch: evs.iter().map(|e| e.eta_ch).fold(1.0, f64::min),
        eta_dis: evs.iter().map(|e| e.eta_dis).fold(1.0, f64::min),
    };
    for ev in evs {
        let eb = ev.capacity_kwh;
        if ev.arrival <= h {
            s.arrivals_kwh[ev.arrival] += ev.soc_init * eb;
        }
        if ev.departure <= h {
            s.departures_kwh[ev.departure] += ev.soc_desired * eb;
        }
        for t in ev.arrival..ev.departure.min(h) {
            s.p_max_ch[t] += ev.p_max_ch;
            s.p_max_dis[t] += ev.p_max_dis;
            s.e_min[t] += ev.soc_min * eb;
            s.e_max[t] += ev.soc_max * eb;
            // a leaving EV must hold its desired SOC at the end of its last hour
            let last = t + 1 == ev.departure;
            s.e_end_min[t] += if last { ev.soc_desired } else { ev.soc_min } * eb;
            s.e_end_max[t] += if last { ev.soc_desired } else { ev.soc_max } * eb;
        }
    }
    s
}

/// Result of splitting one bus schedule over its member EVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    /// Per member, in `storage.members` order.
    pub schedules: Vec<(String, Schedule)>,
    /// Largest per-hour gap between the bus schedule and the member sum, kW.
    pub residual_kw: f64,
    /// True when the proportional split had to be re-solved.
    pub repaired: bool,
}

const ALLOC_TOL: f64 = 1e-6;

/// Splits `bus_schedule` over the members of `storage`.
///
/// Each hour's charge (discharge) is shared in proportion to each connected
/// EV's headroom: the smaller of its power limit and what its SOC bounds
/// allow in that hour. If the result breaks any EV's SOC path, an L1 repair
/// LP re-solves the whole horizon, matching the bus totals where possible and
/// staying close to the proportional split otherwise.
pub fn disaggregate(bus_schedule: &Schedule, storage: &BusVirtualStorage, fleet: &[EvSpec]) -> Result<Allocation, FleetError> {
    let members: Vec<&EvSpec> = storage.members.iter().filter_map(|id| fleet.iter().find(|e| &e.id == id)).collect();
    let h = storage.horizon();
    let mut socs: Vec<f64> = members.iter().map(|e| e.soc_init).collect();
    let mut scheds: Vec<Schedule> = members.iter().map(|_| Schedule::zeros(h)).collect();
    for t in 0..h {
        for (k, ev) in members.iter().enumerate() {
            if t == ev.arrival {
                socs[k] = ev.soc_init;
            }
        }
        let conn: Vec<usize> = (0..members.len()).filter(|&k| members[k].is_connected(t)).collect();
        let ch_room: Vec<f64> = conn
            .iter()
            .map(|&k| {
                let ev = members[k];
                let soc_room = ((ev.soc_max - socs[k]) * ev.capacity_kwh / ev.eta_ch).max(0.0);
                ev.p_max_ch.min(soc_room)
            })
            .collect();
        let dis_room: Vec<f64> = conn
            .iter()
            .map(|&k| {
                let ev = members[k];
                let soc_room = ((socs[k] - ev.soc_min) * ev.capacity_kwh * ev.eta_dis).max(0.0);
                ev.p_max_dis.min(soc_room)
            })
            .collect();
        let ch = proportional(bus_schedule.p_ch[t], &ch_room);
        let dis = proportional(bus_schedule.p_dis[t], &dis_room);
        for (i, &k) in conn.iter().enumerate() {
            scheds[k].p_ch[t] = ch[i];
            scheds[k].p_dis[t] = dis[i];
            socs[k] = step_soc(socs[k], ch[i], dis[i], members[k], 1.0);
        }
    }

    let residual = bus_residual(bus_schedule, &scheds);
    let ok = residual <= ALLOC_TOL && members.iter().zip(&scheds).all(|(ev, s)| ev_violation(ev, s) <= ALLOC_TOL);
    if ok {
        return Ok(Allocation {
            schedules: members.iter().map(|e| e.id.clone()).zip(scheds).collect(),
            residual_kw: residual,
            repaired: false,
        });
    }
    let repaired = repair(bus_schedule, storage.bus, &members, &scheds)?;
    let residual = bus_residual(bus_schedule, &repaired);
    Ok(Allocation {
        schedules: members.iter().map(|e| e.id.clone()).zip(repaired).collect(),
        residual_kw: residual,
        repaired: true,
    })
}

fn proportional(total: f64, room: &[f64]) -> Vec<f64> {
    let cap: f64 = room.iter().sum();
    if total <= 0.0 || cap <= 0.0 {
        return vec![0.0; room.len()];
    }
    let share = (total / cap).min(1.0);
    room.iter().map(|r| r * share).collect()
}

fn bus_residual(bus: &Schedule, scheds: &[Schedule]) -> f64 {
    (0..bus.len())
        .map(|t| {
            let sum: f64 = scheds.iter().map(|s| s.net(t)).sum();
            (sum - bus.net(t)).abs()
        })
        .fold(0.0, f64::max)
}

/// Largest SOC or power violation of one EV schedule.
pub fn ev_violation(ev: &EvSpec, s: &Schedule) -> f64 {
    let mut soc = ev.soc_init;
    let mut worst = 0.0f64;
    for t in 0..s.len() {
        if !ev.is_connected(t) {
            worst = worst.max(s.p_ch[t].abs()).max(s.p_dis[t].abs());
            continue;
        }
        worst = worst
            .max(s.p_ch[t] - ev.p_max_ch)
            .max(s.p_dis[t] - ev.p_max_dis)
            .max(-s.p_ch[t])
            .max(-s.p_dis[t]);
        soc = step_soc(soc, s.p_ch[t], s.p_dis[t], ev, 1.0);
        worst = worst.max(ev.soc_min - soc).max(soc - ev.soc_max);
    }
    if ev.departure <= s.len() {
        worst = worst.max(ev.soc_desired - soc);
    }
    worst
}

fn repair(bus: &Schedule, bus_id: usize, members: &[&EvSpec], start: &[Schedule]) -> Result<Vec<Schedule>, FleetError> {
    const STAY_CLOSE: f64 = 1e-3;
    const THROUGHPUT: f64 = 1e-5;
    let h = bus.len();
    let mut lp = LinearProgram::new();
    // (ch, dis) variable per member-hour, None when disconnected
    let mut idx: Vec<Vec<Option<(usize, usize)>>> = vec![vec![None; h]; members.len()];
    for (k, ev) in members.iter().enumerate() {
        for t in ev.arrival..ev.departure.min(h) {
            let c = lp.add_var(0.0, ev.p_max_ch, THROUGHPUT);
            let d = lp.add_var(0.0, ev.p_max_dis, THROUGHPUT);
            idx[k][t] = Some((c, d));
            // |net - proportional net|
            let up = lp.add_var(0.0, f64::INFINITY, STAY_CLOSE);
            let dn = lp.add_var(0.0, f64::INFINITY, STAY_CLOSE);
            lp.add_eq(vec![(c, 1.0), (d, -1.0), (up, -1.0), (dn, 1.0)], start[k].net(t));
        }
        // SOC path as cumulative rows
        let mut acc: Vec<(usize, f64)> = Vec::new();
        for t in ev.arrival..ev.departure.min(h) {
            let (c, d) = idx[k][t].unwrap();
            acc.push((c, ev.eta_ch / ev.capacity_kwh));
            acc.push((d, -1.0 / (ev.eta_dis * ev.capacity_kwh)));
            lp.add_le(acc.clone(), ev.soc_max - ev.soc_init);
            let lower = if t + 1 == ev.departure { ev.soc_desired } else { ev.soc_min };
            lp.add_ge(acc.clone(), lower - ev.soc_init);
        }
    }
    for t in 0..h {
        let mut row: Vec<(usize, f64)> = Vec::new();
        for cell in idx.iter() {
            if let Some((c, d)) = cell[t] {
                row.push((c, 1.0));
                row.push((d, -1.0));
            }
        }
        let up = lp.add_var(0.0, f64::INFINITY, 1.0);
        let dn = lp.add_var(0.0, f64::INFINITY, 1.0);
        row.push((up, -1.0));
        row.push((dn, 1.0));
        lp.add_eq(row, bus.net(t));
    }
    let sol = solve_lp(&lp).map_err(|e| FleetError::InfeasibleAllocation {
        bus: bus_id,
        reason: e.to_string(),
    })?;
    if sol.status != Status::Optimal {
        return Err(FleetError::InfeasibleAllocation {
            bus: bus_id,
            reason: format!("repair LP is {:?}", sol.status),
        });
    }
    Ok(idx
        .iter()
        .map(|cells| {
            let mut s = Schedule::zeros(h);
            for (t, cell) in cells.iter().enumerate() {
                if let Some((c, d)) = *cell {
                    s.p_ch[t] = sol.values[c];
                    s.p_dis[t] = sol.values[d];
                }
            }
            s
        })
        .collect())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn type1(id: &str, bus: usize, arrival: usize, departure: usize) -> EvSpec {
        EvSpec {
            id: id.into(),
            ev_type: 1,
            bus,
            capacity_kwh: 14.0,
            soc_min: 0.2,
            soc_max: 0.9,
            soc_init: 0.5,
            soc_desired: 0.5,
            p_max_ch: 3.7,
            p_max_dis: 3.7,
            eta_ch: 0.9,
            eta_dis: 0.95,
            arrival,
            departure,
            cycle_life: 4000.0,
            dod: 0.8,
            c_bat: 22_400.0,
        }
    }

    #[test]
    fn lifetime_throughput_and_cost() {
        let ev = type1("a", 0, 0, 4);
        let c = battery_operating_cost(&ev).unwrap();
        assert!((c.lifetime_throughput_kwh - 44_800.0).abs() < 1e-9);
        assert!((c.cost_per_kwh - 0.5).abs() < 1e-12);
        let t2 = EvSpec {
            capacity_kwh: 25.0,
            ..ev.clone()
        };
        assert!((battery_operating_cost(&t2).unwrap().lifetime_throughput_kwh - 80_000.0).abs() < 1e-9);
        let bad = EvSpec { dod: 0.0, ..ev };
        assert!(matches!(
            battery_operating_cost(&bad),
            Err(FleetError::NonPositiveParameter { field: "dod", .. })
        ));
    }

    #[test]
    fn soc_steps() {
        let ev = type1("a", 0, 0, 4);
        assert_eq!(step_soc(0.5, 0.0, 0.0, &ev, 1.0), 0.5);
        assert!((step_soc(0.5, 3.7, 0.0, &ev, 1.0) - 0.737_857_142_857).abs() < 1e-9);
        assert!((step_soc(0.9, 0.0, 3.7, &ev, 1.0) - 0.621_804_511_278).abs() < 1e-9);
    }

    #[test]
    fn two_evs_same_bus() {
        let fleet = vec![type1("a", 3, 18, 24), type1("b", 3, 18, 24)];
        let s = aggregate_to_bus(&fleet, 24, 7).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s[0].p_max_ch[20] - 7.4).abs() < 1e-12);
        assert_eq!(s[0].p_max_ch[10], 0.0);
        assert_eq!(s[0].capacity_kwh, 28.0);
    }

    #[test]
    fn unknown_bus_and_empty_fleet() {
        assert!(aggregate_to_bus(&[], 24, 7).unwrap().is_empty());
        let err = aggregate_to_bus(&[type1("x", 99, 0, 2)], 24, 7).unwrap_err();
        assert_eq!(err, FleetError::UnknownBus { ev: "x".into(), bus: 99 });
    }

    #[test]
    fn symmetric_split() {
        let fleet = vec![type1("a", 0, 0, 2), type1("b", 0, 0, 2)];
        let s = &aggregate_to_bus(&fleet, 2, 1).unwrap()[0];
        let mut bus = Schedule::zeros(2);
        bus.p_ch[0] = 6.0;
        bus.p_dis[1] = 6.0 * 0.9 * 0.95;
        let a = disaggregate(&bus, s, &fleet).unwrap();
        assert!(!a.repaired);
        assert!((a.schedules[0].1.p_ch[0] - 3.0).abs() < 1e-12);
        assert!((a.schedules[1].1.p_ch[0] - 3.0).abs() < 1e-12);
        assert!(a.residual_kw < 1e-9);
    }

    #[test]
    fn repair_moves_energy_to_the_ev_that_needs_it() {
        // b leaves after one hour needing a full charge; a stays idle-capable
        let mut a = type1("a", 0, 0, 2);
        let mut b = type1("b", 0, 0, 1);
        a.soc_desired = 0.5;
        b.soc_init = 0.5;
        b.soc_desired = 0.5 + 3.0 * 0.9 / 14.0;
        let fleet = vec![a, b];
        let s = &aggregate_to_bus(&fleet, 2, 1).unwrap()[0];
        let mut bus = Schedule::zeros(2);
        bus.p_ch[0] = 3.0;
        let out = disaggregate(&bus, s, &fleet).unwrap();
        assert!(out.repaired);
        assert!(out.residual_kw < 1e-6);
        assert!((out.schedules[1].1.p_ch[0] - 3.0).abs() < 1e-6);
        for (ev, (_, sch)) in fleet.iter().zip(&out.schedules) {
            assert!(ev_violation(ev, sch) < 1e-6);
        }
    }
}
