//! ContactSDF: smooth signed-distance multi-contact model.
//!
//! Collision detection is approximated by a log-sum-exp smoothed distance
//! to a supporting-plane polytope, and quasi-dynamic time stepping by the
//! same smoothing applied to the dual cone of the contact constraints in a
//! rescaled velocity space. The result is an explicit, differentiable
//! step model used for MPC and for fitting model parameters from data.

pub mod contact;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod learning;
pub mod mpc;
pub mod projection;
pub mod scenes;
pub mod smooth;
pub mod state;
pub mod stepper;

pub use error::{Error, Result};
