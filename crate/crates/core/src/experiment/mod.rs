//! Run configuration, the end-to-end pipeline, and on-disk artifacts.

mod config;
mod output;
mod pipeline;
mod svg;

pub use config::{resolve_scenario, RunConfig};
pub use output::{loss_csv, versions_json, write_file, write_run_metadata, points_csv, token_snapshots_csv};
pub use pipeline::{
    ablate, class_generators, evaluate, fit_denoiser, fit_expert, forge_all, generate_data,
    split_data, BiasRow, EvalOutputs,
};
pub use svg::scatter_svg;
