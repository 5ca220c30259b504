//! Low-bitrate coding of SIFT-style keypoints as side information for video
//! feature streams.
//!
//! Frames are coded as Detection (all keypoints intra coded), Skip (keypoints
//! predicted from the previous frame with one quantized affine transform),
//! Update (a mix of skipped, differentially coded and new keypoints) or Null
//! (no side information). See [`codec::encode_stream`] and
//! [`codec::decode_stream`].

// `!(x >= lo)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codec;
pub mod entropy;
pub mod error;
pub mod framecontrol;
pub mod geometry;
pub mod harness;
pub mod kpquant;
pub mod matching;
pub mod model;

pub use error::{Error, Result};
pub use model::{AffineTransform, DecomposedAffine, Descriptor, Feature, FrameFeatures, FrameType, Keypoint};
