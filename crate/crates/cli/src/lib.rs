//! Project files, pipeline commands and the HTTP service around
//! `spheresfm-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod fixture;
pub mod ops;
pub mod project;
pub mod serve;
