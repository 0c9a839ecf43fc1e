//! Toy multimodal instruction-tuning stack: a frozen vision encoder and
//! language model joined by a Q-Former-lite and a gated cross-modal adapter,
//! with staged training, evaluation and parameter accounting.

pub mod adapter;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod run;
pub mod session;
pub mod train;
pub mod verify;

pub use error::{CromeError, Result};
pub use model::Model;
