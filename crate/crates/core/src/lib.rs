//! Online data-driven control of district heating systems.
//!
//! The steady-state economic dispatch problem of a heating network is encoded
//! as the zero equilibrium of an augmented incremental system. Feedback gains
//! for that system are then learned from closed-loop data with
//! covariance-parameterized policy gradient descent (plain or ADAM
//! preconditioned), and compared against model-based LQR, certainty
//! equivalence, zeroth-order policy search and nominal receding-horizon
//! control.
//!
//! Module map:
//!
//! * [`mathkit`]: dense Lyapunov/Riccati solvers and spectral diagnostics.
//! * [`dhs`]: network topology, thermal models, dispatch and temperature
//!   optimality.
//! * [`augment`]: optimality-error output and the augmented realization.
//! * [`lqr`]: exact cost evaluation, model-based and certainty-equivalence LQR.
//! * [`deepo`]: covariance buffers, surrogate cost/gradient, GD and ADAM steps.
//! * [`baselines`]: zeroth-order policy optimization and nominal MPC.
//! * [`simlab`]: plants, noise, closed-loop runs and regret accounting.
//! * [`presets`]: the three-state benchmark and the industrial network.

// `!(x < y)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod baselines;
pub mod deepo;
pub mod dhs;
mod error;
pub mod lqr;
pub mod mathkit;
pub mod par;
pub mod presets;
pub mod rng;
pub mod simlab;

pub use error::{Error, Result};

/// Dense real matrix used throughout the crate.
pub type Mat = nalgebra::DMatrix<f64>;
/// Dense real column vector.
pub type Vector = nalgebra::DVector<f64>;
