//! The adapter-tuned vision transformer for skin measurement regression.

mod config;
pub mod kernels;
mod loss;
mod model;
mod train;

pub use config::*;
pub use loss::{contrastive_loss, contrastive_terms, cosine_similarity, total_loss};
pub use model::{
    resize_patch, scale_label, unscale_label, Backbone, Checkpoint, ForwardOutput, InputEncoder,
    LabelScale, SkinPavit,
};
pub use train::*;
