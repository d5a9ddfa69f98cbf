//! Configuration, initial data, run orchestration and output emission for the
//! `muskat-jko` command.

// `!(x > 0.0)` style tests are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod output;
pub mod presets;
pub mod run;

pub use config::{parse_config, parse_config_with_overrides, parse_override, Mode, RunConfig};
pub use output::emit_outputs;
pub use presets::{make_initial, parse_preset, Preset};
pub use run::{execute, Report, RunOutput};
