//! File formats, experiment drivers and the command line for `polyadapt-core`.

pub mod app;
pub mod config;
pub mod experiments;
pub mod formats;
