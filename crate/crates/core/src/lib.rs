//! Certified patch-robust classification by splitting a backbone into a small
//! receptive-field prefix and a large receptive-field suffix, then wrapping
//! the prefix features in a secure masking operation.

pub mod cli;
pub mod cure;
pub mod error;
pub mod eval;
pub mod masks;
pub mod models;
pub mod oracles;
pub mod rf;
pub mod secure;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
