pub mod cli;
pub mod config;
pub mod continual_engine;
pub mod decoder;
pub mod error;
pub mod losses;
pub mod numerics;
pub mod prompts;
pub mod seeding;
pub mod synthbench;

pub use error::{Error, Result};
pub use numerics::Matrix;
