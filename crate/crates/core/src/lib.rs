//! Offline reward-weighted fine-tuning of multi-turn clarification policies.

pub mod cli;
pub mod config;
pub mod datagen;
pub mod dataset;
pub mod env;
pub mod objectives;
pub mod error;
pub mod evalreport;
pub mod policy;
pub mod reward;
pub mod seed;
pub mod trainers;
pub mod types;

pub use error::{Error, Result};
