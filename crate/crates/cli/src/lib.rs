//! Command implementations behind the `radiosynth` binary. Each command
//! validates its configuration first, locks its output directory and leaves
//! a `run.json` record (config snapshot, derived seeds, input hashes).

pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod io;
pub mod pipeline;
pub mod prepare;
pub mod record;
pub mod sr;
pub mod study;

pub use config::PipelineConfig;
pub use error::{CliError, CliResult, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK};
