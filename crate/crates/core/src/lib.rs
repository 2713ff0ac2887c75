//! Probabilistic safety filtering for control-affine systems.
//!
//! A Gaussian process learns the residual of a control barrier function's
//! time derivative, and a convex second-order-cone projection keeps the
//! control inside the set where the barrier constraint holds with high
//! probability under the GP posterior.

pub mod barrier;
pub mod control;
pub mod dynamics;
pub mod episodic;
pub mod error;
pub mod experiments;
pub mod filter;
pub mod gp;
pub mod jet;
pub mod system;
pub mod validation;

pub use error::{Error, Result};
