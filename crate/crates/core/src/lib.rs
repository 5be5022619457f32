pub mod error;
pub mod model;
pub mod network;
pub mod oracle;
pub mod simplex;
pub mod solver;

pub use error::{Error, Result};
