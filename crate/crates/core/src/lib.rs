pub mod decode;
pub mod error;
pub mod gnn;
pub mod hiergraph;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
