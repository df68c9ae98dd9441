//! File formats, reports and the command-line driver around `csvmasr-core`.

pub mod app;
pub mod checkpoint_io;
pub mod corpus_io;
pub mod error;
pub mod gradcheck;
pub mod manifest;
pub mod report;
pub mod threads;

pub use error::{CliError, CliResult};
