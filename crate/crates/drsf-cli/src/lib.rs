//! IO, configuration, and orchestration around `drsf-core`: dataset and
//! checkpoint containers, metrics persistence, ablation suites, and the
//! pieces behind the `drsf` command-line interface.

pub mod ablation;
pub mod checkpoint_io;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod metrics_io;

pub use error::{CliError, Result};
