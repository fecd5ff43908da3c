//! Stage orchestration behind the command-line tool.

pub mod config;
pub mod manifest;
pub mod report;
pub mod run;

pub use config::{RankMode, RunConfig};
pub use manifest::RunManifest;
pub use report::{emit_report, summary};
pub use run::{run_pipeline, RankOutput, Stage};
