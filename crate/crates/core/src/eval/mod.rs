//! Evaluation: landmark error, image similarity metrics, synthetic pairs and
//! the batch benchmark runner.

mod bench;
mod landmarks;
mod metrics;
mod synth;

pub use bench::{run_bench, write_bench_csv, BenchOptions, BenchRow};
pub use landmarks::{naed, LandmarkSet};
pub use metrics::{psnr, ssim, PSNR_CAP};
pub use synth::{landmark_grid, procedural_image, synth_pair, SynthPair, MAX_REDRAWS};
