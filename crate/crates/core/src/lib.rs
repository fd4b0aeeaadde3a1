pub mod channel;
pub mod config;
pub mod asymptotic;
pub mod constellation;
pub mod eval;
pub mod error;
pub mod linalg;
pub mod mi;
pub mod precoder;
pub mod report;
pub mod tol;

pub use error::{Error, ErrorKind, Result};
