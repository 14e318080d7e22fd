//! Dataset IO, configuration, batch runs, observability reports and the
//! command line around [`ingvio_core`].

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod montecarlo;
pub mod observability;
pub mod output;
pub mod plot;

pub use error::{Error, Result};
