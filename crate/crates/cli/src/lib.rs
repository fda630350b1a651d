//! Harness library behind the `flowalign` binary: run configuration,
//! SRPK1 checkpoints, CSV/SVG/PGM emitters, and the experiment runners.

pub mod checkpoint;
pub mod config;
pub mod emit;
pub mod experiments;
