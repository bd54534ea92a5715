//! File formats, configuration, the staged pipeline, and the command line for
//! cross-modality adaptation of vestibular schwannoma and cochlea segmentation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod config;
pub mod error;
pub mod io;
pub mod nifti;
pub mod pipeline;
pub mod raw;
pub mod tables;

pub use config::{ablation_variant, Plan, Preset, RunConfig, Stage, Variant};
pub use error::{Error, Result};
pub use pipeline::{run_ablation, run_plan, run_stage, Context};
