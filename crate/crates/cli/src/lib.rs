//! Command implementations behind the `srhc` binary.
//!
//! Every command reads a [`config::RunConfig`], writes its artifacts under
//! one run directory and refreshes that directory's `manifest.json`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use commands::{cmd_field, cmd_plan, cmd_simulate, cmd_slice, cmd_sweep, Context, FieldTarget};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
