pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod connector;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod stream;
pub mod trainer;

pub use error::{Error, Result};
