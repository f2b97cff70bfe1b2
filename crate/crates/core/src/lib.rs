//! Generative retrieval engine: documents are indexed by short code
//! sequences and retrieved by decoding those codes from a query.

pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod rq;
pub mod training;
pub mod util;

pub use error::{Error, Result};
