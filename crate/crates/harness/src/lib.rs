//! Evaluation harness for groundloc: file formats, metrics and the
//! reproduction experiments behind the `groundloc` command-line tool.

pub mod error;
pub mod experiments;
pub mod formats;
pub mod metrics;

pub use error::{HarnessError, Result};
