//! Deep learning solvers for decoupled nonlinear BSDEs and their semilinear parabolic PDEs.
//!
//! The crate is organised bottom-up:
//!
//! - [`net`]: one-hidden-layer networks with closed-form reverse-mode gradients
//!   (parameters, inputs, and the mixed parameter/input derivative).
//! - [`sde`]: time grids, reproducible Gaussian streams and the Euler–Maruyama scheme.
//! - [`problems`]: the BSDE abstraction, benchmark problems with closed-form
//!   solutions, and a finite-difference PDE residual.
//! - [`optim`]: SGD / Adam with plateau-halving of the learning rate.
//! - [`schemes`]: the multistep automatic-differentiation scheme (DADM) and the
//!   DBDP1, DBDP2 and Deep BSDE comparators.
//! - [`validation`]: independent oracles (finite differences, Gauss–Hermite,
//!   derivative bounds, Z-regularity).
//! - [`harness`]: experiment configuration, multi-run statistics and CSV output.

pub mod error;
pub mod harness;
pub mod net;
pub mod optim;
pub mod problems;
pub mod schemes;
pub mod sde;
pub mod validation;

pub use error::{Error, Result};
pub use net::{Activation, ParamGradient, ShallowNet, WeightConstraint};
pub use optim::{Method, OptimizerState, TrainConfig};
pub use problems::BsdeProblem;
pub use schemes::{SolveResult, SolverConfig, TrainedStack};
pub use sde::{PathBatch, StreamRng, TimeGrid};
