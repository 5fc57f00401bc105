//! Command implementations behind the `ceres` binary.

pub mod args;
pub mod commands;
pub mod plot;
pub mod serve;
