//! Downstream evaluation of pre-trained encoders: feature extraction, linear probing,
//! partial fine-tuning, feature-distance statistics and ablation grids.

mod ablation;
mod features;
mod finetune;
mod probe;
mod stats;

pub use ablation::{
    ablation_grid, grid_csv, probe_encoder, run_experiment, run_random_init, AblationRow, Axis, ExperimentData,
    ExperimentResult, GridOptions, GridReport, GridRowResult, GRID_CSV_HEADER,
};
pub use features::{extract_features, Features};
pub use finetune::{partial_finetune, tuned_params, FINETUNE_HEAD};
pub use probe::{linear_probe, HeadType, ProbeConfig, ProbeResult};
pub use stats::{cosine_distance, feature_stats, FeatureStats};
