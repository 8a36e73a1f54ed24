pub mod cli;
pub mod error;
pub mod gpm;
pub mod linalg;
pub mod metrics;
pub mod net;
pub mod tasks;

pub use error::{Error, Result};
