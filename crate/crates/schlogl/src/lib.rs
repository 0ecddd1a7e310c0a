//! Stabilization of the Schlögl reaction–diffusion equation to target
//! trajectories on Ω = (0, L), with P1 finite elements.
//!
//! Two controllers are provided on top of the shared discretization:
//! a saturated explicit feedback built from oblique projections onto an
//! indicator-actuator family, and a receding-horizon controller that solves
//! constrained finite-horizon optimal control problems with an adjoint-based
//! projected Barzilai–Borwein gradient method.

pub mod actuation;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod expr;
pub mod fem;
pub mod linalg;
pub mod ocp;

pub use error::{Error, Result};
