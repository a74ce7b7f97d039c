//! File formats, dataset tooling, and parallel drivers around `hscat-core`.

pub mod checkpoint;
pub mod cli;
pub mod container;
pub mod error;
pub mod jsonrep;
pub mod manifest;
pub mod objio;
pub mod parallel;
pub mod pfm;
pub mod pngio;
pub mod rundir;
