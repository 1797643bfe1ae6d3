//! Guided depth super-resolution: semantic tokens from a frozen vision
//! transformer steer a four-level depth refinement network through gated
//! cross-attention.

pub mod blocks;
pub mod cli;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod grid;
pub mod gta;
mod lanes;
pub mod objective;
pub mod params;
pub mod tokens;
pub mod trainer;

pub use config::{ModelConfig, RunConfig, Variant};
pub use error::{Error, Result};
pub use grid::Grid;
pub use gta::NaimaModel;
