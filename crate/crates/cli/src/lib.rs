//! Reproducible experiment runner for the `dgff-core` library: text
//! configuration, seeded orchestration and CSV/JSON/SVG artifacts.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod plot;
pub mod runner;

pub use config::{parse_config, ConfigErrors, Experiment, Format, RawConfig, RunConfig};
pub use plot::{emit_plot, PlotKind, Series};
pub use runner::{run, RunError, RunManifest};
