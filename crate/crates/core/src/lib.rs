//! Couplings between matrix-driven first-order iterations and Gaussian
//! comparison processes.
//!
//! An iteration `x_t = A f_t(x_{<t}) + g_t(x_{<t})` driven by a symmetric
//! Gaussian matrix `A` is paired with a comparison process
//! `y_t = m_t(y_{<t}) + w_t` whose noise has per-step covariance
//! `Sigma_{st} I`. The crate estimates the covariance recursion that matches
//! the two laws, constructs both trajectories on a common probability space,
//! and measures the per-trial gap `||X - Y||` against dimension-free bounds,
//! exact two-point Wasserstein formulas in the linear case, and a Gaussian
//! conditioning oracle.

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod conditioning;
pub mod coupling;
pub mod diagnostics;
pub mod dynamics;
pub mod linalg;
pub mod rng;
pub mod state_evolution;
pub mod wasserstein;

pub use dynamics::{FunctionSpec, ScalarMap, SystemSpec, Trajectory};
pub use linalg::{SymMatrix, UpperTriMatrix};
pub use rng::RngStream;
