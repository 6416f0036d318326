pub mod config;
pub mod datagen;
pub mod error;
pub mod evalbench;
pub mod executor;
pub mod expert;
pub mod geometry;
pub mod rewards;
pub mod scheduler;
pub mod seeds;
pub mod skill_learning;
pub mod skills;
pub mod world;

pub use error::{Error, Result};
