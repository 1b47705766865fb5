//! LP/MILP kernel shared by every model builder in the crate.

mod lp;
mod milp;
mod pwl;

pub use lp::{solve_lp, Constraint, LinearProgram, Relation, Solution, Status, FEAS_TOL};
pub use milp::{solve_milp, solve_milp_with, MilpOptions, MilpProblem, DEFAULT_GAP, DEFAULT_NODE_LIMIT, INT_TOL};
pub use pwl::{pwl_anchored, pwl_convexify, PwlSegment, PwlVar, DEFAULT_SEGMENTS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("malformed model: {0}")]
    MalformedModel(String),
    #[error("degenerate interval [{lo}, {hi}]")]
    DegenerateInterval { lo: f64, hi: f64 },
}
