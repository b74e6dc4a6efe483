pub mod config;
pub mod error;
pub mod exec;
pub mod env;
pub mod log;
pub mod numerics;
pub mod pipeline;
pub mod policy;
pub mod rl;
pub mod sans;
pub mod seed;
pub mod worldmodel;

pub use error::{Error, Result};
