//! Electromagnetic formation flying (EMFF) for `n` satellites driven by
//! alternating magnetic field forces, with a soft-minimum relaxed control
//! barrier function filter enforcing collision, relative-speed and
//! apparent-power constraints around an MPC formation planner.
//!
//! Module map:
//!
//! * [`model`]: pair indexing, the dipole force function and the averaged
//!   state-space dynamics.
//! * [`amff`]: piecewise-sinusoidal magnetic moments, full-fidelity
//!   dynamics and the time-averaging quadrature.
//! * [`allocation`]: closed-form amplitude pair for a prescribed force
//!   function value and the smooth power bound `psi`.
//! * [`mpc`]: finite-horizon LQ planner for the desired force function.
//! * [`safety`]: barrier functions, soft-min composition and the closed-form
//!   optimal safe control.
//! * [`sim`], [`scenario`], [`runlog`]: closed-loop integration, scenario
//!   files and run logging.
//! * [`validate`]: executable property suites.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod amff;
pub mod error;
pub mod model;
pub mod mpc;
pub mod runlog;
pub mod safety;
pub mod scenario;
pub mod sim;
pub mod validate;

pub use error::{EmffError, Result};
pub use model::{ForceVector, FormationState, PairIndex, Vec3};
