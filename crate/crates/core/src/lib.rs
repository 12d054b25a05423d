//! Concatenate, fine-tune, re-train: semi-supervised 3D segmentation driven by
//! pseudo-labels from a 2D foundation model adapted to slice grids.

mod error;
pub mod grid_concat;
pub mod lora;
pub mod metrics;
pub mod pseudo_label;
pub mod seg2d;
pub mod ssl3d;
pub mod volume_io;

pub use error::{CfrError, FormatError, Result};
