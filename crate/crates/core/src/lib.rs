pub mod error;
pub mod exec;
pub mod harness;
pub mod model;
pub mod nmhe;
pub mod nmpc;
pub mod oracle;
pub mod path;
pub mod plant;
pub mod qp;
pub mod selftest;

pub use error::{Error, Result};
