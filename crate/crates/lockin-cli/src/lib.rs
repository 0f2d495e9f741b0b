//! Command-line front end of the lock-in domain estimation pipeline.
//!
//! One TOML configuration drives five commands: `check` gates the model's
//! structural assumptions, `estimate` runs the full pipeline and writes the
//! plot-ready artifacts, `validate` stresses a finished estimate with
//! seeded simulations, `simulate` integrates a single explicit initial
//! condition, and `export` adds per-orbit and model reports.

// Negated float comparisons are deliberate throughout: `!(x > 0.0)` rejects
// NaN, while the suggested `x <= 0.0` silently lets NaN through a guard.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod pipeline;
pub mod plugin;

pub use commands::{run, Cli};
