// Negated comparisons are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod error;
pub mod evolve;
pub mod fracop;
pub mod grid;
pub mod heat;
pub mod inverse;
pub mod io;
pub mod linearize;
pub mod nonlinearity;
pub mod par;
pub mod runge;
pub mod spectral;
pub mod verify;
pub mod wave;

pub use error::{Error, Result};
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
