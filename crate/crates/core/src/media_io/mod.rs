//! Dataset layout, frame/audio IO, audio features and the synthetic speaker.

pub mod audio;
pub mod dataset;
pub mod image;
pub mod synth;

pub use audio::{extract_audio_features, AudioFeatureConfig, AudioFeatures, FeatureKind, Waveform};
pub use dataset::{load_clip, ClipRecord, DatasetManifest, Split};
pub use image::{batch_to_images, images_to_batch, BoxRect, FractionalBox, FrameBoxes, Image, VideoClip};
pub use synth::{generate_synthetic_dataset, FrameTruth, SyntheticSpec};
