pub mod data;
pub mod diagnostics;
pub mod error;
pub mod forest;
pub mod hetero;
pub mod linalg;
pub mod nuisance;
pub mod policy;
pub mod scores;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
