//! Output moments of piecewise-linear ReLU networks under Gaussian input,
//! and Gaussian adversarial noise built on top of them.

// `!(x > 0.0)` is how argument checks here reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod error;
pub mod experiments;
pub mod gauss;
pub mod net_moments;
pub mod oracle;
pub mod plnet;
pub mod quadrature;
pub mod relu_moments;
pub mod specfun;

pub use error::{Error, Result};
