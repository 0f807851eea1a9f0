//! Shared fixtures for the criterion benches.

use dln_core::tasks::low_rank_completion;
use dln_core::{init_gaussian, CostSpec, NetShape, Params};

/// Rank-3 completion on a `10 × 10` target with a depth-`depth`, width-`width`
/// network initialized at `σ = 1/w`.
pub fn completion_fixture(depth: usize, width: usize) -> (Params, CostSpec) {
    let cost = low_rank_completion(10, 10, &[20.0, 10.0, 4.0], 0.7, 11).expect("valid task");
    let shape = NetShape::rectangular(depth, 10, width, 10).expect("valid shape");
    let theta = init_gaussian(&shape, 1.0 / width as f64, 1).expect("valid init");
    (theta, cost)
}
