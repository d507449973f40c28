pub mod data;
pub mod error;
pub mod experiment;
pub mod models;
pub mod numerics;
pub mod objective;
pub mod parallel;
pub mod seed;
pub mod tokenizer;
pub mod transfer;

pub use error::{Error, Result};
