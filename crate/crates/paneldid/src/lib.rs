//! Panel difference-in-differences with explicit weighting diagnostics.

pub mod balance;
pub mod cli;
pub mod drdid;
pub mod error;
pub mod numcore;
pub mod oracle;
pub mod panel;
pub mod twfe;

pub use error::{Error, Result};
