//! Experiment orchestration for the OoD detection toolkit: config files,
//! content hashing, and the train / eval / sweep / gen-data / report flows
//! behind the `odinctl` binary.

pub mod config;
pub mod run;
