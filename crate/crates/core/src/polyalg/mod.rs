//! Exact algebra over univariate polynomials in the derivative operator `dt`.

pub mod matrix;
pub mod poly;
pub mod rational;
pub mod smith;

pub use matrix::{det, OperatorMatrix};
pub use poly::{poly_add, poly_divmod, poly_mul, OperatorPoly};
pub use rational::{rational_from_float, Rational, DEFAULT_MAX_DENOMINATOR};
pub use smith::{smith_normal_form, SmithDecomposition};
