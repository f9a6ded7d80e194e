// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cli;
pub mod error;
pub mod langmodel;
pub mod model;
pub mod numerics;
pub mod obfuscation;
pub mod partition;
pub mod protocol;
pub mod security;
pub mod verify;

pub use error::{Error, Result};
