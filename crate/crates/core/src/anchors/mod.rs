//! Anchor estimation, patch cropping, sticker supervision and the anchor error metric.

mod crop;
mod metric;
mod regressor;
mod sticker;

pub use crop::{crop_patch, patch_window};
pub use metric::anchor_error_rate;
pub use regressor::{
    mean_error_rate, normalize_landmarks, predict_anchors, train_anchor_model, AnchorRegressor,
    AnchorTrainConfig, NormTransform,
};
pub use sticker::{rgb_to_hsv, sticker_centroids, ColorSpec, Sticker, StickerDetection};
