pub mod anchors;
pub mod augment;
pub mod datamodel;
pub mod error;
pub mod evalmetrics;
pub mod heatmap;
pub mod nn;
pub mod pavit;
pub mod spectral;
pub mod synthgen;

pub use error::{Error, Result};
