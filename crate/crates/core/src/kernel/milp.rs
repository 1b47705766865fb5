//! Best-first branch-and-bound over binary variables.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use super::lp::{solve_lp, LinearProgram, Solution, Status};
use super::KernelError;

/// Integrality tolerance for binaries.
pub const INT_TOL: f64 = 1e-6;
pub const DEFAULT_GAP: f64 = 1e-6;
pub const DEFAULT_NODE_LIMIT: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct MilpProblem {
    pub lp: LinearProgram,
    pub binary_vars: BTreeSet<usize>,
}

impl MilpProblem {
    pub fn new(lp: LinearProgram) -> Self {
        MilpProblem {
            lp,
            binary_vars: BTreeSet::new(),
        }
    }

    /// Adds a `{0, 1}` variable with the given cost.
    pub fn add_binary(&mut self, cost: f64) -> usize {
        let j = self.lp.add_var(0.0, 1.0, cost);
        self.binary_vars.insert(j);
        j
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        self.lp.validate()?;
        for &j in &self.binary_vars {
            if j >= self.lp.num_vars {
                return Err(KernelError::MalformedModel(format!("binary index {j} out of range")));
            }
            let (lo, hi) = self.lp.bounds[j];
            if lo != 0.0 || hi != 1.0 {
                return Err(KernelError::MalformedModel(format!("binary {j} must have bounds [0, 1], found [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MilpOptions {
    /// Absolute optimality gap.
    pub gap_tol: f64,
    pub node_limit: usize,
}

impl Default for MilpOptions {
    fn default() -> Self {
        MilpOptions {
            gap_tol: DEFAULT_GAP,
            node_limit: DEFAULT_NODE_LIMIT,
        }
    }
}

struct Node {
    bound: f64,
    depth: usize,
    seq: usize,
    fixings: Vec<(usize, f64)>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // BinaryHeap is a max-heap: "greater" pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then(self.depth.cmp(&other.depth))
            .then(other.seq.cmp(&self.seq))
    }
}

/// Solves `p` with the default node budget.
pub fn solve_milp(p: &MilpProblem, gap_tol: f64) -> Result<Solution, KernelError> {
    solve_milp_with(
        p,
        MilpOptions {
            gap_tol,
            ..MilpOptions::default()
        },
    )
}

pub fn solve_milp_with(p: &MilpProblem, opts: MilpOptions) -> Result<Solution, KernelError> {
    p.validate()?;
    if opts.gap_tol < 0.0 || opts.gap_tol.is_nan() {
        return Err(KernelError::MalformedModel("gap_tol must be >= 0".into()));
    }

    let mut heap = BinaryHeap::new();
    heap.push(Node {
        bound: f64::NEG_INFINITY,
        depth: 0,
        seq: 0,
        fixings: Vec::new(),
    });
    let mut seq = 1usize;
    let mut incumbent: Option<Solution> = None;
    let mut nodes = 0usize;
    let mut lp_iterations = 0usize;
    let mut work = p.lp.clone();

    while let Some(node) = heap.pop() {
        if let Some(inc) = &incumbent {
            if node.bound >= inc.objective_value - opts.gap_tol {
                continue;
            }
        }
        if nodes >= opts.node_limit {
            let mut out = incumbent.unwrap_or_else(|| Solution::without_point(Status::IterLimit, 0));
            out.status = Status::IterLimit;
            out.nodes = nodes;
            out.iterations = lp_iterations;
            return Ok(out);
        }
        nodes += 1;

        work.bounds.clone_from(&p.lp.bounds);
        for &(j, v) in &node.fixings {
            work.bounds[j] = (v, v);
        }
        let relax = solve_lp(&work)?;
        lp_iterations += relax.iterations;
        match relax.status {
            Status::Optimal => {}
            Status::Infeasible => continue,
            Status::Unbounded if node.depth == 0 => {
                let mut out = Solution::without_point(Status::Unbounded, lp_iterations);
                out.nodes = nodes;
                return Ok(out);
            }
            Status::Unbounded => continue,
            Status::IterLimit => continue,
        }
        if let Some(inc) = &incumbent {
            if relax.objective_value >= inc.objective_value - opts.gap_tol {
                continue;
            }
        }

        // most fractional binary, lowest index on ties
        let mut branch: Option<(usize, f64)> = None;
        let mut best_frac = INT_TOL;
        for &j in &p.binary_vars {
            let v = relax.values[j];
            let frac = (v - v.round()).abs();
            if frac > best_frac + 1e-12 {
                best_frac = frac;
                branch = Some((j, v));
            }
        }
        match branch {
            None => incumbent = Some(relax),
            Some((j, v)) => {
                let preferred = if v >= 0.5 { 1.0 } else { 0.0 };
                for val in [preferred, 1.0 - preferred] {
                    let mut fixings = node.fixings.clone();
                    fixings.push((j, val));
                    heap.push(Node {
                        bound: relax.objective_value,
                        depth: node.depth + 1,
                        seq,
                        fixings,
                    });
                    seq += 1;
                }
            }
        }
    }

    Ok(match incumbent {
        Some(mut s) => {
            s.nodes = nodes;
            s.iterations = lp_iterations;
            s
        }
        None => {
            let mut s = Solution::without_point(Status::Infeasible, lp_iterations);
            s.nodes = nodes;
            s
        }
    })
}
