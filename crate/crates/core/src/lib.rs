//! Adversarial-defense pre-processing for anchor-based siamese trackers.

pub mod advtrain;
pub mod attacks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod defense;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod geometry;
pub mod imaging;
mod kernels;
pub mod losses;
pub mod nn;
pub mod tracker;

pub use candle_core as candle;
pub use error::{Error, Result};
pub use geometry::{iou, BBox};
pub use imaging::Image;
