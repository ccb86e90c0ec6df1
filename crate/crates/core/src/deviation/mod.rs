//! Motion estimation, flow, warping and deviation-gated decoding.

pub mod flow;
pub mod gate;
pub mod model;
pub mod warp;

pub use flow::{decode_flow, decode_global_flow, FlowField, MaskPredictor, PoseTransform, RegionMasks, RegionTransforms};
pub use gate::{activation, blend, compute_deviation, gated_decode, scaled_sigmoid, CallCounter, DeviationHead, Gate, UpBlock};
pub use model::{AblationFlags, LatentPoseEstimator, ReconstructTrace, SourceEncoding, StageOneConfig, StageOneModel};
pub use warp::{grid_sample, identity_grid, pixel_offset};
