pub mod analytics;
pub mod cluster;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod manifold;
pub mod pipeline;
pub mod report;
pub mod stats;
pub mod synthetic;
pub mod tuner;

pub use error::{Error, ErrorClass, Result};
