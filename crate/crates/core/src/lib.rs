//! Multi-channel relational graph attention for link prediction and entity
//! classification, with its own reverse-mode differentiation engine.

pub mod autodiff;
pub mod classify;
pub mod config;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod inspect;
pub mod layer;
pub mod model;
pub mod synth;
pub mod train;
pub mod util;

pub use error::{Result, RgatError};
