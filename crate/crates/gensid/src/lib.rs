//! File formats, configuration, pipeline orchestration and the command line
//! for `gensid-core`.

pub mod cli;
pub mod config;
pub mod formats;
pub mod pipeline;
