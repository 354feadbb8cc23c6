// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corrector1d;
pub mod corrector_md;
pub mod error;
pub mod impact;
pub mod market_sim;
pub mod merton;
pub mod ode;
pub mod second_corrector;
pub mod validator;

pub use error::{Error, Result};
