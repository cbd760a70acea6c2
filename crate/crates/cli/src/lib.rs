//! Experiment harness behind the `bvlab` binary.

pub mod config;
pub mod harness;
pub mod verify;
