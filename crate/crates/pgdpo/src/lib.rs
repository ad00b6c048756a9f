//! Pontryagin-guided direct policy optimization for Merton's
//! consumption-investment problem.
//!
//! Two small neural networks (an investment-fraction policy and a
//! consumption policy) are trained by backpropagation through time on
//! Euler-Maruyama simulations of the wealth SDE, maximizing the discounted
//! CRRA objective averaged over random initial states. The regularized
//! variant additionally extracts the adjoint (costate) of each simulated
//! path by a second autodiff pass and penalizes the distance between the
//! network controls and the Pontryagin controls implied by that adjoint.
//! The closed-form Merton solution is available throughout as a benchmark.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
