//! Training, generation, compute accounting and persistence.

pub mod checkpoint;
pub mod flops;
pub mod sampling;
pub mod sweep;
pub mod train;

pub use checkpoint::{
    config_digest, dpar_checkpoint, dpar_from_checkpoint, load_dpar, load_entropy, save_dpar,
    save_entropy, CheckpointHeader, DparCheckpoint,
};
pub use flops::{baseline_flops, estimate_flops, layer_flops, FlopsReport, TRAINING_MULTIPLIER};
pub use sampling::{
    cfg_combine, filtered_distribution, sample, sample_grid, softmax, SampleTrace, SamplingConfig,
};
pub use sweep::{loss_csv, sweep_csv, threshold_sweep, write_text, SweepRow};
pub use train::{
    batch_gradients, draw_cfg_drops, evaluate, train, EvalMetrics, StepStats, TrainConfig, Trainer,
};
