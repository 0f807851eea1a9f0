//! Deep linear networks `A_θ = W_L ⋯ W_1`: costs, gradient flow, saddle
//! escape, greedy low-rank training, symmetries and NTK analysis.

pub mod analysis;
pub mod costs;
pub mod error;
pub mod escape;
pub mod flow;
pub mod greedy;
pub mod linalg;
pub mod network;
pub mod rng;
pub mod symmetry;
pub mod tasks;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use costs::CostSpec;
pub use error::{DlnError, Result};
pub use flow::{FlowConfig, Integrator, Snapshot, StopReason, Trajectory};
pub use greedy::{GreedyConfig, GreedyReport};
pub use linalg::{Matrix, Triplet, Vector};
pub use network::{backprop, init_gaussian, loss_gradient, loss_value, product_map, GradVec, NetShape, Params};
