//! EV aggregator operating pipeline: day-ahead MILP scheduling, rolling
//! balancing-market re-optimization, and a network-constrained transactive
//! price negotiation between aggregators and the distribution operator.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod bm;
pub mod dam;
pub mod exec;
pub mod fleet;
pub mod grid;
pub mod kernel;
pub mod pipeline;
pub mod scenario;
pub mod te;

pub use exec::Execution;
