//! Learned state-conditioned action constraints for safe reinforcement
//! learning.
//!
//! * [`geometry`]: linear constraint sets and the projection QP.
//! * [`nn`]: small MLPs with manual backpropagation and Adam.
//! * [`constraint_net`]: state → constraint-set predictor and its margin loss.
//! * [`env`]: 2-D navigation simulators with snapshot/restore.
//! * [`ppo`]: Gaussian-policy PPO.
//! * [`ceres`]: direct/recovery co-training that discovers labeled demonstrations.
//! * [`demo`]: demonstration files, scripted expert and negative heuristics.
//! * [`metrics`]: per-iteration metrics rows and CSV files.

pub mod ceres;
pub mod constraint_net;
pub mod demo;
pub mod env;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod ppo;
mod vecops;

pub use ceres::{CeresConfig, CeresRun, PpoRun};
pub use constraint_net::{ConstraintNet, LabeledDemo};
pub use demo::{DemoRecord, DemoSet};
pub use env::{Env, EnvConfig, EnvState};
pub use metrics::MetricsRow;
pub use geometry::{ActionBox, LinearConstraintSet};
pub use nn::{Activation, Adam, AdamConfig, Mlp};
pub use ppo::{GaussianPolicy, PpoAgent, PpoConfig};
