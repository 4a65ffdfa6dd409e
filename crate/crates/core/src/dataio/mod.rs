//! Images, NetPBM files and the synthetic degradation pipeline.

mod degrade;
mod image;
mod manifest;
pub mod synth;

pub use degrade::{
    bicubic_downsample, bicubic_upsample, blur, crop_offsets, make_blur_pair, make_sr_pair,
    mirror_index, resize_bicubic, sample_patches, BlurKernel, Degradation, DegradedPair,
};
pub use image::Image;
pub use manifest::{Manifest, ManifestEntry};
