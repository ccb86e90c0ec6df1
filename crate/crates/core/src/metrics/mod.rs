//! Evaluation metrics: Fréchet distances, diversity, PSNR, SSIM and a
//! perceptual similarity proxy, collected into a region-wise report.

pub mod frechet;
pub mod quality;
pub mod report;
pub mod video;

pub use frechet::{diversity, fgd, frechet_distance, GaussianStats};
pub use quality::{lpips_proxy, psnr, psnr_from_mse, ssim, ssim_with, SsimParams};
pub use report::{config_hash, evaluate_report, EvalInputs, MetricNets, MetricReport, RegionMetrics, SetMetrics, REGIONS, REPORT_VERSION};
pub use video::VideoFeatureNet;
