//! Model predictive control of nonlinear ODE systems with Gaussian processes
//! whose sample paths satisfy the linearized dynamics exactly.
//!
//! The pipeline: find an equilibrium of the plant, linearize it, write the
//! linear system as an operator matrix `H = [A - I*dt | B]`, diagonalize `H`
//! with a Smith normal form, and push a latent kernel through `V`. Control is
//! then read off the posterior of that GP after conditioning on the current
//! state and on pseudo-observations encoding constraints.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod gp;
pub mod linearize;
pub mod lodegp;
pub mod mpc;
pub mod plant;
pub mod polyalg;

pub use error::{Error, Result};
