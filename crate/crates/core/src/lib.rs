pub mod binio;
pub mod cli;
pub mod corpus;
pub mod dedup;
pub mod embedder;
pub mod eval;
pub mod error;
pub mod index;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod sampler;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
