//! Command-line plumbing around `cemmaf-core`: run configuration, JSON
//! reports, external rankings and the subcommands behind the `cemmaf` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod rankings;
pub mod report;

pub use commands::{cmd_eval, cmd_fixtures, cmd_pn, cmd_pp, cmd_segment, EvalArgs, Outcome, SolveArgs};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use report::ExplanationReport;
