//! Toy joint model, training loop, experiments and their reports.

mod config;
mod experiments;
mod model;
mod train;

pub use config::{DataConfig, DiffusionConfig, RunConfig};
pub use experiments::{
    experiment_branches, experiment_gmta, load_or_generate, run_once, ArmReport, BranchRow, BranchSweep, Datasets,
    GmtaComparison, MeanSummary, RunSummary,
};
pub use model::{detector_forward, fuse_image, pooling_matrix, time_embedding, DetectorConfig, ModelConfig, ToyModel};
pub use train::{
    detect, detect_seed, detect_with, detection_part, draw_diffusion_inputs, evaluate, fusion_part, held_out_losses,
    schedule_of, train, StepRecord, TrainLog,
};
