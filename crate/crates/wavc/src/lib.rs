//! Measurement-driven wide-area voltage control toolkit.
//!
//! The crate is organised around a pipeline:
//!
//! * [`net`] builds the static network model (admittance matrix, power
//!   injections, Jacobians, steady-state power flow) from a case file.
//! * [`sim`] integrates the stochastic load and SVC dynamics forward in
//!   time and emits PMU-like measurement windows.
//! * [`estim`] recovers the scaled state matrix from an ambient window
//!   via the lag-covariance regression, estimates load time constants,
//!   and extracts the power-flow sensitivity blocks.
//! * [`lp`] solves the controller's boxed infinity-norm minimisation as
//!   a dense linear program.
//! * [`control`] implements the trigger logic, problem assembly, and
//!   reference dispatch of the voltage controller.
//! * [`harness`] orchestrates end-to-end experiments and file I/O.

pub mod control;
pub mod estim;
pub mod harness;
pub mod linalg;
pub mod lp;
pub mod net;
pub mod sim;
