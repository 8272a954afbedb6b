//! File formats, experiment configuration, parallel ablation and run
//! artifacts around [`mtmixatt_core`]. The `mtmixatt` binary is a thin
//! command-line layer over this crate.
//!
//! On-disk formats:
//!
//! * experiment config: TOML with `[model]`, `[train]` and `[data]` tables;
//!   unknown keys are rejected
//! * dataset: newline-delimited JSON, a header line then one sample per line
//! * checkpoint: one JSON document holding the model config, the init seed
//!   and every named parameter tensor
//! * run report: pretty-printed JSON of [`mtmixatt_core::train::RunReport`]
//! * ablation table and routing trace: CSV

pub mod ablate;
pub mod artifacts;
pub mod checkpoint;
pub mod dataset;
pub mod experiment;

pub use mtmixatt_core as core;
