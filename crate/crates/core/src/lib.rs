//! Entity alignment between two knowledge graphs by neighborhood matching.

pub mod checkpoint;
pub mod cli;
pub mod datatools;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod kg;
pub mod matching;
pub mod model;
pub mod neighborhood;
pub mod pipeline;
pub mod tape;
pub mod training;

pub use error::{NmnError, Result};
