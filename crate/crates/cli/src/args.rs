use std::path::PathBuf;

use anyhow::{Context, Result};
use ceres_core::env::{ControlMode, EnvConfig, ObservationMode};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "ceres", version, about = "Learned action constraints and CERES demonstration discovery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Generate the scripted maze dataset (positives plus heuristic negatives).
    GenDemos(GenDemosArgs),
    /// Train a constraint network on a demonstration file.
    TrainConstraints(TrainConstraintsArgs),
    /// Train a PPO policy, optionally guided by a fixed constraint network.
    TrainRl(TrainRlArgs),
    /// Run the CERES direct/recovery co-training loop.
    Ceres(CeresArgs),
    /// Evaluate a policy over seeded episodes.
    Eval(EvalArgs),
    /// Serve interactive sessions over websockets for the demo UI.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvPreset {
    /// Static maze, position control, reduced policy observations.
    StaticMaze,
    /// Three random rectangles, position control.
    RandomPosition,
    /// Three random rectangles, force control.
    RandomForce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObsArg {
    Full,
    Reduced,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EnvArgs {
    /// Environment config file (TOML, or JSON by extension); overrides --preset.
    #[arg(long = "env")]
    pub env_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "static-maze")]
    pub preset: EnvPreset,
    /// Policy observation mode (defaults to the preset's).
    #[arg(long, value_enum)]
    pub observation: Option<ObsArg>,
}

impl EnvArgs {
    pub fn preset(preset: EnvPreset) -> Self {
        Self {
            env_file: None,
            preset,
            observation: None,
        }
    }

    pub fn resolve(&self) -> Result<EnvConfig> {
        let mut cfg = match &self.env_file {
            Some(path) => EnvConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => match self.preset {
                EnvPreset::StaticMaze => EnvConfig::static_maze(),
                EnvPreset::RandomPosition => EnvConfig::random_obstacles(ControlMode::Position, ObservationMode::Reduced),
                EnvPreset::RandomForce => EnvConfig::random_obstacles(ControlMode::Force, ObservationMode::Reduced),
            },
        };
        if let Some(obs) = self.observation {
            cfg.observation = match obs {
                ObsArg::Full => ObservationMode::Full,
                ObsArg::Reduced => ObservationMode::Reduced,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PpoArgs {
    #[arg(long, default_value_t = 2048)]
    pub steps_per_iter: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 10)]
    pub ppo_epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub minibatch: usize,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    pub hidden: Vec<usize>,
}

impl PpoArgs {
    pub fn config(&self) -> ceres_core::ppo::PpoConfig {
        ceres_core::ppo::PpoConfig {
            steps_per_iter: self.steps_per_iter,
            learning_rate: self.learning_rate,
            epochs: self.ppo_epochs,
            minibatch: self.minibatch,
            hidden: self.hidden.clone(),
            ..Default::default()
        }
    }
}

impl Default for PpoArgs {
    fn default() -> Self {
        Self {
            steps_per_iter: 2048,
            learning_rate: 3e-4,
            ppo_epochs: 10,
            minibatch: 64,
            hidden: vec![64, 64],
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDemosArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long, default_value_t = 500)]
    pub trajectories: usize,
    /// Evenly spaced probe directions per visited state.
    #[arg(long, default_value_t = 16)]
    pub samples_per_state: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output JSONL file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainConstraintsArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    /// Demonstration JSONL file.
    #[arg(long)]
    pub demos: PathBuf,
    /// Number of linear constraints.
    #[arg(long, default_value_t = 2)]
    pub n_in: usize,
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainRlArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub ppo: PpoArgs,
    /// Constraint network checkpoint; every action is projected when given.
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CeresArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub ppo: PpoArgs,
    #[arg(long, default_value_t = 50)]
    pub iterations: usize,
    /// Recovery horizon n_s.
    #[arg(long, default_value_t = 10)]
    pub n_s: usize,
    /// Recovery attempts n_a.
    #[arg(long, default_value_t = 3)]
    pub n_a: usize,
    #[arg(long, default_value_t = 2)]
    pub n_in: usize,
    #[arg(long, default_value_t = 2048)]
    pub recovery_steps: usize,
    /// Also constrain the recovery policy.
    #[arg(long)]
    pub constrain_recovery: bool,
    /// Use a fixed activation probability instead of the separation accuracy.
    #[arg(long)]
    pub fixed_activation: Option<f64>,
    /// Write checkpoints every N iterations (0 disables).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    /// Policy checkpoint; an untrained policy from --seed when omitted.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    /// Play the policy mean instead of sampling.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the summary as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ServeArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8765")]
    pub addr: String,
    /// Directory receiving exported datasets.
    #[arg(long, default_value = ".")]
    pub export_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
