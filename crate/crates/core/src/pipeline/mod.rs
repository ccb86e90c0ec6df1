//! Training orchestration, checkpoints and inference.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod generate;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, TensorMap, CHECKPOINT_VERSION};
pub use config::{Stage1Options, Stage2Options, TrainConfig};
pub use evaluate::{animate_clip, default_metric_nets, frozen_motion_model, motion_rows, pooled_psnr, report_with_model, self_reconstruct};
pub use generate::{check_compatible, encode_y4m, frame_count, generate_from_wave, generate_video, write_video, GenerateOptions};
pub use train::{
    denoiser_from_checkpoint, extract_motion, stage_one_from_checkpoint, train_stage1, train_stage2, ClipData,
    LossHistory, Progress, Stage2Extra, TrainRun, TrainingData,
};
