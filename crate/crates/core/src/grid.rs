//! Radial feeder model: Newton–Raphson AC power flow, the linear voltage
//! model `U = U⁰ − S·P` built from the inverse Jacobian, and security checks.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GridError {
    #[error("network is not a tree rooted at the slack bus: {0}")]
    NotRadial(String),
    #[error("power flow diverged after {iterations} iterations (mismatch {mismatch:e} p.u.)")]
    Diverged { iterations: usize, mismatch: f64 },
    #[error("power-flow Jacobian is singular")]
    SingularJacobian,
    #[error("invalid network: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    /// Series resistance, p.u.
    pub r: f64,
    /// Series reactance, p.u.
    pub x: f64,
}

/// Raw feeder description, as read from a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeederSpec {
    pub n_buses: usize,
    #[serde(default)]
    pub slack_bus: usize,
    pub slack_voltage: f64,
    pub s_base_kva: f64,
    pub branches: Vec<Branch>,
    /// Base (non-EV) consumption, `[hour][bus]` kW.
    pub base_load_kw: Vec<Vec<f64>>,
    pub p_trans_max_kw: f64,
    pub u_min: f64,
    pub u_max: f64,
}

/// Feeder plus the per-hour base operating point and voltage sensitivities.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub spec: FeederSpec,
    ybus: DMatrix<Complex<f64>>,
    /// U⁰, `[hour][bus]`.
    pub u0: Vec<Vec<f64>>,
    /// J₂₁⁻¹ in p.u. per kW of consumption, one `bus x bus` matrix per hour.
    pub sensitivity: Vec<DMatrix<f64>>,
}

pub const PF_TOL: f64 = 1e-10;
pub const PF_MAX_ITERS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlow {
    pub voltages: Vec<f64>,
    pub angles: Vec<f64>,
    /// Active power drawn from the slack bus, kW.
    pub slack_kw: f64,
    pub iterations: usize,
    pub mismatch: f64,
}

impl NetworkModel {
    pub fn new(spec: FeederSpec) -> Result<Self, GridError> {
        check_radial(&spec)?;
        if !(spec.u_min < spec.u_max) {
            return Err(GridError::Invalid(format!("u_min {} must be below u_max {}", spec.u_min, spec.u_max)));
        }
        if !(spec.s_base_kva > 0.0) {
            return Err(GridError::Invalid("s_base_kva must be > 0".into()));
        }
        if spec.base_load_kw.iter().any(|row| row.len() != spec.n_buses) {
            return Err(GridError::Invalid("every base-load row needs one entry per bus".into()));
        }
        let ybus = build_ybus(&spec);
        let mut net = NetworkModel {
            spec,
            ybus,
            u0: Vec::new(),
            sensitivity: Vec::new(),
        };
        for hour in 0..net.spec.base_load_kw.len() {
            let base = net.spec.base_load_kw[hour].clone();
            let pf = solve_power_flow(&net, &base)?;
            net.sensitivity.push(voltage_sensitivity(&net, &pf)?);
            net.u0.push(pf.voltages);
        }
        Ok(net)
    }

    pub fn n_buses(&self) -> usize {
        self.spec.n_buses
    }

    pub fn horizon(&self) -> usize {
        self.spec.base_load_kw.len()
    }

    /// Base load plus EV load at `hour`, kW per bus.
    pub fn total_load(&self, hour: usize, ev_kw: &[f64]) -> Vec<f64> {
        self.spec.base_load_kw[hour].iter().zip(ev_kw).map(|(b, e)| b + e).collect()
    }

    /// Linearized voltages `U⁰ − S·P` for extra (EV) load at `hour`.
    pub fn linear_voltages(&self, hour: usize, ev_kw: &[f64]) -> Vec<f64> {
        let s = &self.sensitivity[hour];
        (0..self.n_buses())
            .map(|k| self.u0[hour][k] - (0..self.n_buses()).map(|g| s[(k, g)] * ev_kw[g]).sum::<f64>())
            .collect()
    }

    /// Exact voltages for extra (EV) load at `hour`.
    pub fn nr_voltages(&self, hour: usize, ev_kw: &[f64]) -> Result<Vec<f64>, GridError> {
        Ok(solve_power_flow(self, &self.total_load(hour, ev_kw))?.voltages)
    }
}

fn check_radial(spec: &FeederSpec) -> Result<(), GridError> {
    let n = spec.n_buses;
    if n == 0 || spec.slack_bus >= n {
        return Err(GridError::NotRadial("slack bus out of range".into()));
    }
    if spec.branches.len() != n - 1 {
        return Err(GridError::NotRadial(format!(
            "{} buses need {} branches, found {}",
            n,
            n - 1,
            spec.branches.len()
        )));
    }
    let mut adj = vec![Vec::new(); n];
    for (i, b) in spec.branches.iter().enumerate() {
        if b.from >= n || b.to >= n || b.from == b.to {
            return Err(GridError::NotRadial(format!("branch {i} has invalid endpoints")));
        }
        if !(b.r >= 0.0 && b.x >= 0.0 && b.r + b.x > 0.0) {
            return Err(GridError::NotRadial(format!("branch {i} needs a positive impedance")));
        }
        adj[b.from].push(b.to);
        adj[b.to].push(b.from);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![spec.slack_bus];
    seen[spec.slack_bus] = true;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    match seen.iter().position(|s| !s) {
        Some(b) => Err(GridError::NotRadial(format!("bus {b} is not connected to the slack"))),
        None => Ok(()),
    }
}

fn build_ybus(spec: &FeederSpec) -> DMatrix<Complex<f64>> {
    let n = spec.n_buses;
    let mut y = DMatrix::from_element(n, n, Complex::new(0.0, 0.0));
    for b in &spec.branches {
        let ys = Complex::new(1.0, 0.0) / Complex::new(b.r, b.x);
        y[(b.from, b.from)] += ys;
        y[(b.to, b.to)] += ys;
        y[(b.from, b.to)] -= ys;
        y[(b.to, b.from)] -= ys;
    }
    y
}

/// Non-slack buses in order; their position is the row/column offset used
/// in the Jacobian.
fn pq_buses(net: &NetworkModel) -> Vec<usize> {
    (0..net.n_buses()).filter(|&b| b != net.spec.slack_bus).collect()
}

fn injections(y: &DMatrix<Complex<f64>>, v: &[f64], th: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = v.len();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        for k in 0..n {
            let g = y[(i, k)].re;
            let b = y[(i, k)].im;
            if g == 0.0 && b == 0.0 {
                continue;
            }
            let (s, c) = (th[i] - th[k]).sin_cos();
            p[i] += v[i] * v[k] * (g * c + b * s);
            q[i] += v[i] * v[k] * (g * s - b * c);
        }
    }
    (p, q)
}

fn jacobian(net: &NetworkModel, v: &[f64], th: &[f64], p: &[f64], q: &[f64]) -> DMatrix<f64> {
    let pq = pq_buses(net);
    let m = pq.len();
    let y = &net.ybus;
    let mut j = DMatrix::zeros(2 * m, 2 * m);
    for (a, &i) in pq.iter().enumerate() {
        for (c, &k) in pq.iter().enumerate() {
            let g = y[(i, k)].re;
            let b = y[(i, k)].im;
            if i == k {
                let gii = g;
                let bii = b;
                j[(a, c)] = -q[i] - bii * v[i] * v[i];
                j[(a, m + c)] = p[i] / v[i] + gii * v[i];
                j[(m + a, c)] = p[i] - gii * v[i] * v[i];
                j[(m + a, m + c)] = q[i] / v[i] - bii * v[i];
            } else {
                let (s, co) = (th[i] - th[k]).sin_cos();
                j[(a, c)] = v[i] * v[k] * (g * s - b * co);
                j[(a, m + c)] = v[i] * (g * co + b * s);
                j[(m + a, c)] = -v[i] * v[k] * (g * co + b * s);
                j[(m + a, m + c)] = v[i] * (g * s - b * co);
            }
        }
    }
    j
}

/// Newton–Raphson in polar coordinates at unity power factor. `load_kw` is
/// the total consumption per bus; the slack bus entry is ignored.
pub fn solve_power_flow(net: &NetworkModel, load_kw: &[f64]) -> Result<PowerFlow, GridError> {
    let n = net.n_buses();
    if load_kw.len() != n || load_kw.iter().any(|p| !p.is_finite()) {
        return Err(GridError::Invalid("one finite load per bus is required".into()));
    }
    let slack = net.spec.slack_bus;
    let pq = pq_buses(net);
    let m = pq.len();
    let sb = net.spec.s_base_kva;
    let mut v = vec![net.spec.slack_voltage; n];
    let mut th = vec![0.0; n];
    let mut mismatch = f64::INFINITY;
    for it in 0..=PF_MAX_ITERS {
        let (p, q) = injections(&net.ybus, &v, &th);
        let mut f = DVector::zeros(2 * m);
        for (a, &i) in pq.iter().enumerate() {
            f[a] = -load_kw[i] / sb - p[i];
            f[m + a] = -q[i];
        }
        mismatch = f.amax();
        if mismatch < PF_TOL {
            let slack_kw = p[slack] * sb;
            return Ok(PowerFlow {
                voltages: v,
                angles: th,
                slack_kw,
                iterations: it,
                mismatch,
            });
        }
        if it == PF_MAX_ITERS || !mismatch.is_finite() {
            break;
        }
        let j = jacobian(net, &v, &th, &p, &q);
        let dx = j.lu().solve(&f).ok_or(GridError::SingularJacobian)?;
        for (a, &i) in pq.iter().enumerate() {
            th[i] += dx[a];
            v[i] += dx[m + a];
        }
        if v.iter().any(|&x| !(x > 0.05)) {
            break;
        }
    }
    Err(GridError::Diverged {
        iterations: PF_MAX_ITERS,
        mismatch,
    })
}

/// J₂₁⁻¹ at `op`: `S[(k, g)]` is the voltage drop at bus `k` per kW of extra
/// consumption at bus `g`. Slack row and column are zero.
pub fn voltage_sensitivity(net: &NetworkModel, op: &PowerFlow) -> Result<DMatrix<f64>, GridError> {
    let (p, q) = injections(&net.ybus, &op.voltages, &op.angles);
    let j = jacobian(net, &op.voltages, &op.angles, &p, &q);
    let jinv = j.try_inverse().ok_or(GridError::SingularJacobian)?;
    let pq = pq_buses(net);
    let m = pq.len();
    let n = net.n_buses();
    let sb = net.spec.s_base_kva;
    let mut s = DMatrix::zeros(n, n);
    for (a, &k) in pq.iter().enumerate() {
        for (c, &g) in pq.iter().enumerate() {
            // dV/dP_injection is positive; consumption is negative injection
            s[(k, g)] = jinv[(m + a, c)] / sb;
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Transformer,
    UnderVoltage,
    OverVoltage,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::Transformer => "transformer",
            ViolationKind::UnderVoltage => "under_voltage",
            ViolationKind::OverVoltage => "over_voltage",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub hour: usize,
    /// None for the transformer.
    pub bus: Option<usize>,
    pub kind: ViolationKind,
    /// Amount beyond the limit, kW or p.u.
    pub magnitude: f64,
}

/// Tolerance before a limit excursion is reported.
pub const CHECK_TOL: f64 = 1e-9;

/// Flags transformer overloads (EV power only, against P_trans^Max) and
/// linearized voltages outside the band. `ev_kw` is `[bus][hour]`.
pub fn check_constraints(net: &NetworkModel, ev_kw: &[Vec<f64>]) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = net.n_buses();
    for hour in 0..net.horizon() {
        let p: Vec<f64> = (0..n).map(|b| ev_kw.get(b).map_or(0.0, |row| row[hour])).collect();
        let flow: f64 = p.iter().sum();
        let over = flow.abs() - net.spec.p_trans_max_kw;
        if over > CHECK_TOL {
            out.push(Violation {
                hour,
                bus: None,
                kind: ViolationKind::Transformer,
                magnitude: over,
            });
        }
        for (bus, u) in net.linear_voltages(hour, &p).into_iter().enumerate() {
            if net.spec.u_min - u > CHECK_TOL {
                out.push(Violation {
                    hour,
                    bus: Some(bus),
                    kind: ViolationKind::UnderVoltage,
                    magnitude: net.spec.u_min - u,
                });
            } else if u - net.spec.u_max > CHECK_TOL {
                out.push(Violation {
                    hour,
                    bus: Some(bus),
                    kind: ViolationKind::OverVoltage,
                    magnitude: u - net.spec.u_max,
                });
            }
        }
    }
    out
}

/// Distinct hours with at least one violation.
pub fn violation_hours(v: &[Violation]) -> usize {
    let mut hours: Vec<usize> = v.iter().map(|x| x.hour).collect();
    hours.sort_unstable();
    hours.dedup();
    hours.len()
}
