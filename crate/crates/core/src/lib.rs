pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gradsuite;
pub mod head;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod trainer;

pub use error::{AmdaError, Result};
