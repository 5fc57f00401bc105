//! Per-iteration training metrics and their CSV encoding.

use std::path::Path;

use serde::{Deserialize, Serialize};

/// One CSV row. Constraint columns are empty when no constraint network
/// was trained or evaluated in that iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub env_steps: usize,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub failure_rate: f64,
    pub mean_ep_len: f64,
    pub activation_prob: f64,
    pub constraint_loss: Option<f64>,
    pub constraint_accuracy: Option<f64>,
}

pub const METRICS_COLUMNS: [&str; 9] = [
    "iteration",
    "env_steps",
    "mean_reward",
    "success_rate",
    "failure_rate",
    "mean_ep_len",
    "activation_prob",
    "constraint_loss",
    "constraint_accuracy",
];

/// Outcome of one finished episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode_return: f64,
    pub length: usize,
    pub success: bool,
    pub failure: bool,
}

/// Means over the episodes finished during an iteration; zeros when none
/// finished.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpisodeStats {
    pub episodes: usize,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub failure_rate: f64,
    pub mean_ep_len: f64,
}

impl EpisodeStats {
    pub fn of(episodes: &[EpisodeSummary]) -> Self {
        if episodes.is_empty() {
            return Self::default();
        }
        let n = episodes.len() as f64;
        Self {
            episodes: episodes.len(),
            mean_reward: episodes.iter().map(|e| e.episode_return).sum::<f64>() / n,
            success_rate: episodes.iter().filter(|e| e.success).count() as f64 / n,
            failure_rate: episodes.iter().filter(|e| e.failure).count() as f64 / n,
            mean_ep_len: episodes.iter().map(|e| e.length as f64).sum::<f64>() / n,
        }
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(METRICS_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}
