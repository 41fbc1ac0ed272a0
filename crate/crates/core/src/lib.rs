pub mod augment;
pub mod cli;
pub mod config;
pub mod contrast;
pub mod corpus;
pub mod error;
pub mod model;
pub mod numeric;
pub mod pretrainer;
pub mod retrieval;
pub mod schedule;
pub mod tokenizer;

pub use error::{Error, Result};
