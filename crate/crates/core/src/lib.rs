pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod extractor;
pub mod filter_bank;
pub mod message;
pub mod model;
pub mod stylizer;
pub mod trainer;

pub use error::{Result, StegoError};
