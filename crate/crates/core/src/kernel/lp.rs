//! Dense-tableau primal simplex for small bounded linear programs.
//!
//! Variables carry finite lower bounds and optional upper bounds; upper
//! bounds are handled implicitly (nonbasic-at-upper plus bound flips) so that
//! they never become tableau rows. Phase one minimizes the sum of artificial
//! variables. Pricing is Dantzig's largest reduced cost; after a run of
//! degenerate pivots the solver switches to Bland's smallest-index rule until
//! the objective moves again, which rules out cycling.

use super::KernelError;

/// Primal feasibility tolerance on constraint rows and bounds.
pub const FEAS_TOL: f64 = 1e-7;
const OPT_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;
const DEGENERATE_RUN_BEFORE_BLAND: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub coeffs: Vec<(usize, f64)>,
    pub relation: Relation,
    pub rhs: f64,
}

/// `min c·x` subject to sparse rows and per-variable bounds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearProgram {
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
    /// `(lower, upper)`; lower must be finite, upper may be `f64::INFINITY`.
    pub bounds: Vec<(f64, f64)>,
}

impl LinearProgram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a variable and returns its index.
    pub fn add_var(&mut self, lower: f64, upper: f64, cost: f64) -> usize {
        self.num_vars += 1;
        self.objective.push(cost);
        self.bounds.push((lower, upper));
        self.num_vars - 1
    }

    pub fn add_constraint(&mut self, coeffs: Vec<(usize, f64)>, relation: Relation, rhs: f64) {
        self.constraints.push(Constraint { coeffs, relation, rhs });
    }

    pub fn add_le(&mut self, coeffs: Vec<(usize, f64)>, rhs: f64) {
        self.add_constraint(coeffs, Relation::Le, rhs);
    }

    pub fn add_ge(&mut self, coeffs: Vec<(usize, f64)>, rhs: f64) {
        self.add_constraint(coeffs, Relation::Ge, rhs);
    }

    pub fn add_eq(&mut self, coeffs: Vec<(usize, f64)>, rhs: f64) {
        self.add_constraint(coeffs, Relation::Eq, rhs);
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if self.objective.len() != self.num_vars || self.bounds.len() != self.num_vars {
            return Err(KernelError::MalformedModel(format!(
                "num_vars={} but objective has {} entries and bounds {}",
                self.num_vars,
                self.objective.len(),
                self.bounds.len()
            )));
        }
        for (j, (&c, &(lo, hi))) in self.objective.iter().zip(&self.bounds).enumerate() {
            if !c.is_finite() {
                return Err(KernelError::MalformedModel(format!("objective[{j}] is not finite")));
            }
            if !lo.is_finite() || hi.is_nan() || lo > hi {
                return Err(KernelError::MalformedModel(format!("variable {j} has invalid bounds [{lo}, {hi}]")));
            }
        }
        for (i, row) in self.constraints.iter().enumerate() {
            if !row.rhs.is_finite() {
                return Err(KernelError::MalformedModel(format!("row {i} rhs is not finite")));
            }
            for &(j, a) in &row.coeffs {
                if j >= self.num_vars {
                    return Err(KernelError::MalformedModel(format!("row {i} references variable {j} >= {}", self.num_vars)));
                }
                if !a.is_finite() {
                    return Err(KernelError::MalformedModel(format!("row {i} has a non-finite coefficient")));
                }
            }
        }
        Ok(())
    }

    /// Objective value of `x`.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Largest violation of any row or bound by `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for row in &self.constraints {
            let lhs: f64 = row.coeffs.iter().map(|&(j, a)| a * x[j]).sum();
            let v = match row.relation {
                Relation::Le => lhs - row.rhs,
                Relation::Ge => row.rhs - lhs,
                Relation::Eq => (lhs - row.rhs).abs(),
            };
            worst = worst.max(v);
        }
        for (v, &(lo, hi)) in x.iter().zip(&self.bounds) {
            worst = worst.max(lo - v).max(v - hi);
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
    IterLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub status: Status,
    pub objective_value: f64,
    pub values: Vec<f64>,
    /// Row multipliers `y` with `c = Aᵀy + r`; filled only for optimal LPs.
    pub duals: Vec<f64>,
    pub iterations: usize,
    /// Branch-and-bound nodes processed (0 for a plain LP).
    pub nodes: usize,
}

impl Solution {
    pub(crate) fn without_point(status: Status, iterations: usize) -> Self {
        Solution {
            status,
            objective_value: match status {
                Status::Unbounded => f64::NEG_INFINITY,
                _ => f64::INFINITY,
            },
            values: Vec::new(),
            duals: Vec::new(),
            iterations,
            nodes: 0,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == Status::Optimal
    }
}

/// Solves `lp` to optimality, or reports infeasibility/unboundedness.
pub fn solve_lp(lp: &LinearProgram) -> Result<Solution, KernelError> {
    lp.validate()?;
    Ok(Tableau::build(lp).run(lp))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Structural,
    Slack,
    Artificial,
}

struct Tableau {
    m: usize,
    ncols: usize,
    /// Row-major `m x ncols`, always equal to `B^-1 A`.
    t: Vec<f64>,
    /// Current values of the basic variables.
    beta: Vec<f64>,
    /// Upper bound of each column in shifted space (lower is always 0).
    upper: Vec<f64>,
    at_upper: Vec<bool>,
    basis: Vec<usize>,
    is_basic: Vec<bool>,
    kind: Vec<Kind>,
    /// Column that formed the identity for each row at the start.
    identity_col: Vec<usize>,
    /// Sign applied to each original row when normalizing rhs >= 0.
    row_sign: Vec<f64>,
    shift: Vec<f64>,
    iterations: usize,
    max_iterations: usize,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Self {
        let n = lp.num_vars;
        let m = lp.constraints.len();
        let shift: Vec<f64> = lp.bounds.iter().map(|b| b.0).collect();

        let n_slack = lp.constraints.iter().filter(|c| c.relation != Relation::Eq).count();

        let mut row_sign = vec![1.0; m];
        let mut rhs = vec![0.0; m];
        let mut needs_art = vec![false; m];
        let mut slack_of_row = vec![usize::MAX; m];
        let mut slack_coef = vec![0.0; m];
        let mut next_slack = n;
        for (i, row) in lp.constraints.iter().enumerate() {
            let shifted: f64 = row.coeffs.iter().map(|&(j, a)| a * shift[j]).sum();
            let mut b = row.rhs - shifted;
            let mut s = match row.relation {
                Relation::Le => 1.0,
                Relation::Ge => -1.0,
                Relation::Eq => 0.0,
            };
            if s != 0.0 {
                slack_of_row[i] = next_slack;
                next_slack += 1;
            }
            if b < 0.0 {
                row_sign[i] = -1.0;
                b = -b;
                s = -s;
            }
            rhs[i] = b;
            slack_coef[i] = s;
            needs_art[i] = s <= 0.0;
        }
        let n_art = needs_art.iter().filter(|&&a| a).count();
        let ncols = n + n_slack + n_art;

        let mut t = vec![0.0; m * ncols];
        let mut upper = vec![f64::INFINITY; ncols];
        let mut kind = vec![Kind::Structural; ncols];
        for (j, &(lo, hi)) in lp.bounds.iter().enumerate() {
            upper[j] = hi - lo;
        }
        for k in n..n + n_slack {
            kind[k] = Kind::Slack;
        }
        for k in n + n_slack..ncols {
            kind[k] = Kind::Artificial;
        }

        let mut basis = vec![0; m];
        let mut identity_col = vec![0; m];
        let mut next_art = n + n_slack;
        for (i, row) in lp.constraints.iter().enumerate() {
            let r = &mut t[i * ncols..(i + 1) * ncols];
            for &(j, a) in &row.coeffs {
                r[j] += row_sign[i] * a;
            }
            if slack_of_row[i] != usize::MAX {
                r[slack_of_row[i]] = slack_coef[i];
            }
            if needs_art[i] {
                r[next_art] = 1.0;
                basis[i] = next_art;
                next_art += 1;
            } else {
                basis[i] = slack_of_row[i];
            }
            identity_col[i] = basis[i];
        }
        let mut is_basic = vec![false; ncols];
        for &b in &basis {
            is_basic[b] = true;
        }
        let max_iterations = 50_000 + 50 * (m + ncols);
        Tableau {
            m,
            ncols,
            t,
            beta: rhs,
            upper,
            at_upper: vec![false; ncols],
            basis,
            is_basic,
            kind,
            identity_col,
            row_sign,
            shift,
            iterations: 0,
            max_iterations,
        }
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut d = cost.to_vec();
        for i in 0..self.m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                let row = &self.t[i * self.ncols..(i + 1) * self.ncols];
                for (dj, &a) in d.iter_mut().zip(row) {
                    *dj -= cb * a;
                }
            }
        }
        d
    }

    fn run(mut self, lp: &LinearProgram) -> Solution {
        let n = lp.num_vars;
        let has_art = self.kind.contains(&Kind::Artificial);
        if has_art {
            let cost1: Vec<f64> = self.kind.iter().map(|&k| if k == Kind::Artificial { 1.0 } else { 0.0 }).collect();
            let mut d = self.reduced_costs(&cost1);
            match self.optimize(&mut d, false) {
                Status::Optimal => {}
                Status::IterLimit => return Solution::without_point(Status::IterLimit, self.iterations),
                // phase one is bounded below by zero
                Status::Unbounded | Status::Infeasible => return Solution::without_point(Status::Infeasible, self.iterations),
            }
            let infeas: f64 = (0..self.m)
                .filter(|&i| self.kind[self.basis[i]] == Kind::Artificial)
                .map(|i| self.beta[i])
                .sum();
            let scale = 1.0 + lp.constraints.iter().map(|c| c.rhs.abs()).fold(0.0, f64::max);
            if infeas > FEAS_TOL * scale {
                return Solution::without_point(Status::Infeasible, self.iterations);
            }
            self.drive_out_artificials();
            for j in 0..self.ncols {
                if self.kind[j] == Kind::Artificial {
                    self.upper[j] = 0.0;
                    self.at_upper[j] = false;
                }
            }
        }

        let mut cost2 = vec![0.0; self.ncols];
        cost2[..n].copy_from_slice(&lp.objective);
        let mut d = self.reduced_costs(&cost2);
        let status = self.optimize(&mut d, true);
        if status != Status::Optimal {
            return Solution::without_point(status, self.iterations);
        }

        let mut x = vec![0.0; self.ncols];
        for j in 0..self.ncols {
            if !self.is_basic[j] && self.at_upper[j] {
                x[j] = self.upper[j];
            }
        }
        for i in 0..self.m {
            x[self.basis[i]] = self.beta[i];
        }
        let values: Vec<f64> = (0..n)
            .map(|j| {
                let (lo, hi) = lp.bounds[j];
                (x[j] + self.shift[j]).clamp(lo, hi)
            })
            .collect();
        // y_i = c_B B^-1 e_i; the identity column has zero phase-two cost
        let duals: Vec<f64> = (0..self.m).map(|i| -d[self.identity_col[i]] * self.row_sign[i]).collect();
        Solution {
            status: Status::Optimal,
            objective_value: lp.evaluate(&values),
            values,
            duals,
            iterations: self.iterations,
            nodes: 0,
        }
    }

    fn eligible(&self, j: usize, d: &[f64], phase_two: bool) -> bool {
        if self.is_basic[j] || self.upper[j] <= 0.0 {
            return false;
        }
        if phase_two && self.kind[j] == Kind::Artificial {
            return false;
        }
        if self.at_upper[j] {
            d[j] > OPT_TOL
        } else {
            d[j] < -OPT_TOL
        }
    }

    fn optimize(&mut self, d: &mut [f64], phase_two: bool) -> Status {
        let mut degenerate_run = 0usize;
        loop {
            if self.iterations >= self.max_iterations {
                return Status::IterLimit;
            }
            let bland = degenerate_run >= DEGENERATE_RUN_BEFORE_BLAND;
            let mut entering = None;
            let mut best = 0.0;
            for j in 0..self.ncols {
                if !self.eligible(j, d, phase_two) {
                    continue;
                }
                if bland {
                    entering = Some(j);
                    break;
                }
                let score = d[j].abs();
                if score > best {
                    best = score;
                    entering = Some(j);
                }
            }
            let Some(q) = entering else {
                return Status::Optimal;
            };
            self.iterations += 1;

            // +1 when increasing from the lower bound, -1 when decreasing from the upper
            let dir = if self.at_upper[q] { -1.0 } else { 1.0 };
            let mut step = self.upper[q];
            let mut leave: Option<usize> = None;
            let mut leave_pivot = 0.0f64;
            for i in 0..self.m {
                let a = self.t[i * self.ncols + q];
                if a.abs() <= PIVOT_TOL {
                    continue;
                }
                let rate = -dir * a;
                let b = self.basis[i];
                let ratio = if rate < 0.0 {
                    (self.beta[i].max(0.0)) / -rate
                } else if self.upper[b].is_finite() {
                    ((self.upper[b] - self.beta[i]).max(0.0)) / rate
                } else {
                    continue;
                };
                let better = match leave {
                    None => ratio < step || (ratio <= step && !self.upper[q].is_finite()),
                    Some(l) => {
                        if ratio < step - 1e-12 {
                            true
                        } else if ratio <= step + 1e-12 {
                            if bland {
                                b < self.basis[l]
                            } else {
                                a.abs() > leave_pivot + 1e-12 || ((a.abs() - leave_pivot).abs() <= 1e-12 && b < self.basis[l])
                            }
                        } else {
                            false
                        }
                    }
                };
                if better {
                    step = ratio;
                    leave = Some(i);
                    leave_pivot = a.abs();
                }
            }
            if leave.is_none() && !step.is_finite() {
                return Status::Unbounded;
            }
            if step > 1e-12 {
                degenerate_run = 0;
            } else {
                degenerate_run += 1;
            }

            // move basic values along the edge
            for i in 0..self.m {
                let a = self.t[i * self.ncols + q];
                if a != 0.0 {
                    self.beta[i] -= dir * a * step;
                }
            }
            match leave {
                None => {
                    // bound flip, basis unchanged
                    self.at_upper[q] = !self.at_upper[q];
                }
                Some(r) => {
                    let entering_value = if dir > 0.0 { step } else { self.upper[q] - step };
                    let leaving = self.basis[r];
                    let rate = -dir * self.t[r * self.ncols + q];
                    self.at_upper[leaving] = rate > 0.0;
                    self.pivot(r, q, d);
                    self.beta[r] = entering_value;
                    self.at_upper[q] = false;
                }
            }
        }
    }

    fn pivot(&mut self, r: usize, q: usize, d: &mut [f64]) {
        let nc = self.ncols;
        let p = self.t[r * nc + q];
        {
            let row = &mut self.t[r * nc..(r + 1) * nc];
            let inv = 1.0 / p;
            for v in row.iter_mut() {
                *v *= inv;
            }
            row[q] = 1.0;
        }
        let (before, rest) = self.t.split_at_mut(r * nc);
        let (pivot_row, after) = rest.split_at_mut(nc);
        for row in before.chunks_exact_mut(nc).chain(after.chunks_exact_mut(nc)) {
            let f = row[q];
            if f != 0.0 {
                for (v, &pr) in row.iter_mut().zip(pivot_row.iter()) {
                    *v -= f * pr;
                }
                row[q] = 0.0;
            }
        }
        let dq = d[q];
        if dq != 0.0 {
            for (dj, &pr) in d.iter_mut().zip(pivot_row.iter()) {
                *dj -= dq * pr;
            }
            d[q] = 0.0;
        }
        let leaving = self.basis[r];
        self.is_basic[leaving] = false;
        self.is_basic[q] = true;
        self.basis[r] = q;
    }

    /// Replaces zero-valued basic artificials by real columns where possible.
    fn drive_out_artificials(&mut self) {
        let mut scratch = vec![0.0; self.ncols];
        for r in 0..self.m {
            if self.kind[self.basis[r]] != Kind::Artificial {
                continue;
            }
            let row = &self.t[r * self.ncols..(r + 1) * self.ncols];
            let candidate = (0..self.ncols).find(|&j| !self.is_basic[j] && self.kind[j] != Kind::Artificial && row[j].abs() > 1e-7);
            if let Some(q) = candidate {
                // degenerate pivot: entering keeps its current bound value
                let value = if self.at_upper[q] { self.upper[q] } else { 0.0 };
                let art_value = self.beta[r];
                let a = row[q];
                // shift so the artificial leaves at exactly zero
                let delta = art_value / a;
                for i in 0..self.m {
                    let aiq = self.t[i * self.ncols + q];
                    if aiq != 0.0 {
                        self.beta[i] -= aiq * delta;
                    }
                }
                let leaving = self.basis[r];
                self.at_upper[leaving] = false;
                self.pivot(r, q, &mut scratch);
                self.beta[r] = value + delta;
                self.at_upper[q] = false;
                scratch.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}
