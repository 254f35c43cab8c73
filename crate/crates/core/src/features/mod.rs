//! Feature ingestion and preparation: stacks and hyperpixels, the
//! self-attention map, projection heads and augmentation.

mod attention;
mod augment;
mod encoder;
mod map;

pub use attention::{attention_map, attention_map_with, AttentionMap, PooledSource};
pub use augment::{
    attention_guided_crop, identity_record, valid_indices, AugmentConfig, AugmentationRecord,
    CropRect,
};
pub use encoder::{
    encode, Branch, EncoderParams, EncoderShape, HeadNodes, HeadParams, Linear, ProjectionHead,
    PARAM_NAMES,
};
pub use map::{construct_hyperpixel, hyperpixel, FeatureMap, FeatureStack};
