//! Spatio-temporal graph forecasting with learned hierarchical pooling.
//!
//! The network encodes a window of node observations with graph-convolved,
//! pooled recurrent cells and decodes a forecast through the mirrored
//! unpooling path. Everything runs on a small dense reverse-mode
//! differentiation tape in double precision.

pub mod error;
pub mod eval;
pub mod checkpoint;
pub mod data;
pub mod graph;
pub mod layers;
pub mod model;
pub mod params;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Matrix, Tape, Var};
