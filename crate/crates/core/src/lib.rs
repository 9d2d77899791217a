pub mod data;
pub mod error;
pub mod extraction;
pub mod federated;
pub mod harness;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
