//! Disentangled two-stage salient object detection.
//!
//! A low-resolution network classifies every pixel as background, salient or
//! uncertain (a trimap) and a high-resolution network refines the uncertain
//! band tile by tile, trained with an aleatoric-uncertainty objective.

pub mod checkpoint;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod hrrn;
pub mod losses;
pub mod lrscn;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod tiling;
pub mod training;
pub mod trimap;

pub use error::{Error, Result};
pub use raster::{BinaryMask, Image, SaliencyMap, Trimap, UncertaintyMap};
