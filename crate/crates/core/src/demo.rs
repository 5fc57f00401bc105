//! Demonstration datasets: the JSON-lines file format, a scripted maze
//! expert and the two negative-demonstration heuristics.
//!
//! A file starts with one header line
//! `{"format","version","env_config_hash","n_obs","n_act","counts"}` followed
//! by one record per line with fields, in order, `state`, `action`,
//! `indicator`, `trajectory_id`, `step_index`, `source`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraint_net::LabeledDemo;
use crate::env::{ControlMode, Env, EnvError, EnvState, GridPlanner, ObstacleMode};

pub const DEMO_FORMAT: &str = "ceres-demos";
pub const DEMO_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: {field} has dimension {found}, expected {expected}")]
    Dimension {
        line: usize,
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("dataset header declares n_obs={found_obs}, n_act={found_act}; expected n_obs={n_obs}, n_act={n_act}")]
    HeaderMismatch {
        n_obs: usize,
        n_act: usize,
        found_obs: usize,
        found_act: usize,
    },
    #[error("scripted generation needs a static maze with position control")]
    UnsupportedEnv,
    #[error("no successful scripted trajectory after {0} attempts")]
    Exhausted(usize),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemoSource {
    Human,
    Scripted,
    CeresDirect,
    CeresRecovery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRecord {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub indicator: u8,
    pub trajectory_id: Option<u64>,
    pub step_index: Option<usize>,
    pub source: DemoSource,
}

impl DemoRecord {
    pub fn is_positive(&self) -> bool {
        self.indicator == 1
    }

    pub fn to_labeled(&self) -> LabeledDemo {
        LabeledDemo::new(self.state.clone(), self.action.clone(), self.is_positive())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoCounts {
    pub positives: usize,
    pub negatives: usize,
}

impl DemoCounts {
    pub fn of(records: &[DemoRecord]) -> Self {
        let positives = records.iter().filter(|r| r.is_positive()).count();
        Self {
            positives,
            negatives: records.len() - positives,
        }
    }

    pub fn ratio(&self) -> f64 {
        self.negatives as f64 / self.positives as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoHeader {
    pub format: String,
    pub version: u32,
    pub env_config_hash: String,
    pub n_obs: usize,
    pub n_act: usize,
    pub counts: DemoCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub header: DemoHeader,
    pub records: Vec<DemoRecord>,
}

impl DemoSet {
    pub fn new(env_config_hash: &str, n_obs: usize, n_act: usize, records: Vec<DemoRecord>) -> Self {
        Self {
            header: DemoHeader {
                format: DEMO_FORMAT.to_string(),
                version: DEMO_VERSION,
                env_config_hash: env_config_hash.to_string(),
                n_obs,
                n_act,
                counts: DemoCounts::of(&records),
            },
            records,
        }
    }

    pub fn counts(&self) -> DemoCounts {
        DemoCounts::of(&self.records)
    }

    pub fn labeled(&self) -> Vec<LabeledDemo> {
        self.records.iter().map(DemoRecord::to_labeled).collect()
    }

    /// Rejects datasets recorded for other dimensions.
    pub fn expect_dims(&self, n_obs: usize, n_act: usize) -> Result<(), DemoError> {
        if self.header.n_obs != n_obs || self.header.n_act != n_act {
            return Err(DemoError::HeaderMismatch {
                n_obs,
                n_act,
                found_obs: self.header.n_obs,
                found_act: self.header.n_act,
            });
        }
        Ok(())
    }
}

fn check_record(r: &DemoRecord, header: &DemoHeader, line: usize) -> Result<(), DemoError> {
    if r.state.len() != header.n_obs {
        return Err(DemoError::Dimension {
            line,
            field: "state",
            expected: header.n_obs,
            found: r.state.len(),
        });
    }
    if r.action.len() != header.n_act {
        return Err(DemoError::Dimension {
            line,
            field: "action",
            expected: header.n_act,
            found: r.action.len(),
        });
    }
    if r.indicator > 1 {
        return Err(DemoError::Malformed {
            line,
            message: format!("indicator must be 0 or 1, got {}", r.indicator),
        });
    }
    Ok(())
}

/// Writes the dataset and returns its class counts.
pub fn save_demos(set: &DemoSet, path: &Path) -> Result<DemoCounts, DemoError> {
    let mut header = set.header.clone();
    header.counts = set.counts();
    for (i, r) in set.records.iter().enumerate() {
        check_record(r, &header, i + 2)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    let to_io = |e: serde_json::Error| std::io::Error::other(e);
    writeln!(out, "{}", serde_json::to_string(&header).map_err(to_io)?)?;
    for r in &set.records {
        writeln!(out, "{}", serde_json::to_string(r).map_err(to_io)?)?;
    }
    out.flush()?;
    Ok(header.counts)
}

pub fn load_demos(path: &Path) -> Result<DemoSet, DemoError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let header: DemoHeader = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line?).map_err(|e| DemoError::Malformed {
            line: 1,
            message: format!("bad header: {e}"),
        })?,
        None => {
            return Err(DemoError::Malformed {
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    if header.format != DEMO_FORMAT || header.version != DEMO_VERSION {
        return Err(DemoError::Malformed {
            line: 1,
            message: format!("unsupported format {:?} version {}", header.format, header.version),
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DemoRecord = serde_json::from_str(&line).map_err(|e| DemoError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        check_record(&record, &header, i + 1)?;
        records.push(record);
    }
    Ok(DemoSet { header, records })
}

/// One executed step: full observation before and after, the action and
/// the snapshot it was taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoStep {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub snapshot: EnvState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoTrajectory {
    pub id: u64,
    pub steps: Vec<DemoStep>,
}

/// Planner clearance added to the agent radius.
const PLANNER_MARGIN: f64 = 0.05;
const PLANNER_RESOLUTION: f64 = 0.02;
/// Fraction of the maximum step the expert moves along its path.
const STRIDE: f64 = 0.9;

/// Position of the point `dist` further along the polyline `path` from
/// segment `seg`, parameter `t`.
fn advance(path: &[[f64; 2]], mut seg: usize, mut t: f64, mut dist: f64) -> (usize, f64, [f64; 2]) {
    while seg + 1 < path.len() {
        let (a, b) = (path[seg], path[seg + 1]);
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        let remaining = len * (1.0 - t);
        if dist <= remaining && len > 0.0 {
            t += dist / len;
            return (seg, t, [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
        dist -= remaining;
        seg += 1;
        t = 0.0;
    }
    let last = *path.last().expect("non-empty path");
    (path.len() - 1, 0.0, last)
}

/// Runs the scripted expert until `count` trajectories reach their target
/// without failure. Unreachable or colliding attempts are discarded.
pub fn generate_scripted_positives(env: &mut Env, count: usize) -> Result<Vec<DemoTrajectory>, DemoError> {
    let cfg = env.config().clone();
    if cfg.control != ControlMode::Position || cfg.obstacles != ObstacleMode::StaticMaze {
        return Err(DemoError::UnsupportedEnv);
    }
    let radius = cfg.agent_radius();
    let stride = STRIDE * cfg.max_step;
    let max_attempts = 20 * count + 100;
    let mut trajectories = Vec::with_capacity(count);
    let mut attempts = 0;
    let planner = {
        env.reset()?;
        GridPlanner::new(env.world(), PLANNER_RESOLUTION, radius + PLANNER_MARGIN)
    };
    while trajectories.len() < count {
        if attempts >= max_attempts {
            return Err(DemoError::Exhausted(attempts));
        }
        attempts += 1;
        env.reset()?;
        let (start, goal) = (env.state().agent, env.state().target);
        let Some(path) = planner.shortest_path(start, goal) else { continue };
        let (mut seg, mut t) = (0, 0.0);
        let mut steps = Vec::new();
        let reached = loop {
            let here = env.state().agent;
            let to_goal = (goal[0] - here[0]).hypot(goal[1] - here[1]);
            let next = if to_goal <= stride {
                goal
            } else {
                let (s, tt, p) = advance(&path, seg, t, stride);
                seg = s;
                t = tt;
                p
            };
            if env.world().sweep_collides(here, next, radius) {
                break false;
            }
            let snapshot = env.snapshot();
            let state = env.full_observation();
            let action = vec![next[0] - here[0], next[1] - here[1]];
            let result = env.step(&action)?;
            steps.push(DemoStep {
                state,
                action,
                next_state: env.full_observation(),
                snapshot,
            });
            if result.end {
                break result.info.success;
            }
        };
        if reached {
            trajectories.push(DemoTrajectory {
                id: trajectories.len() as u64,
                steps,
            });
        }
    }
    Ok(trajectories)
}

pub fn positives_of(trajectories: &[DemoTrajectory], source: DemoSource) -> Vec<DemoRecord> {
    trajectories
        .iter()
        .flat_map(|traj| {
            traj.steps.iter().enumerate().map(move |(i, s)| DemoRecord {
                state: s.state.clone(),
                action: s.action.clone(),
                indicator: 1,
                trajectory_id: Some(traj.id),
                step_index: Some(i),
                source,
            })
        })
        .collect()
}

/// `k` evenly spaced actions of norm `radius`, the first along `+x`.
pub fn circle_probes(radius: f64, k: usize) -> Vec<[f64; 2]> {
    (0..k)
        .map(|j| {
            let angle = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
            [radius * angle.cos(), radius * angle.sin()]
        })
        .collect()
}

/// Probes `samples_per_state` actions of norm Δ_m from every visited state;
/// the ones whose single step fails become negatives. The environment is
/// returned to its prior state.
pub fn negatives_by_sampling(
    trajectories: &[DemoTrajectory],
    env: &mut Env,
    samples_per_state: usize,
    source: DemoSource,
) -> Result<Vec<DemoRecord>, DemoError> {
    let saved = env.snapshot();
    let probes = circle_probes(env.config().max_step, samples_per_state);
    let mut out = Vec::new();
    for traj in trajectories {
        for (i, step) in traj.steps.iter().enumerate() {
            for p in &probes {
                env.restore(&Env::rearm(&step.snapshot))?;
                if env.step(p)?.info.failure {
                    out.push(DemoRecord {
                        state: step.state.clone(),
                        action: p.to_vec(),
                        indicator: 0,
                        trajectory_id: Some(traj.id),
                        step_index: Some(i),
                        source,
                    });
                }
            }
        }
    }
    env.restore(&saved)?;
    Ok(out)
}

/// `(s, a) → s′` becomes the negative `(s′, −a)`.
pub fn negatives_by_reversal(trajectories: &[DemoTrajectory], source: DemoSource) -> Vec<DemoRecord> {
    trajectories
        .iter()
        .flat_map(|traj| {
            traj.steps.iter().enumerate().map(move |(i, s)| DemoRecord {
                state: s.next_state.clone(),
                action: s.action.iter().map(|a| -a).collect(),
                indicator: 0,
                trajectory_id: Some(traj.id),
                step_index: Some(i + 1),
                source,
            })
        })
        .collect()
}

/// Scripted positives plus both negative heuristics, as one dataset.
pub fn scripted_dataset(env: &mut Env, trajectories: usize, samples_per_state: usize) -> Result<DemoSet, DemoError> {
    let trajs = generate_scripted_positives(env, trajectories)?;
    let mut records = positives_of(&trajs, DemoSource::Scripted);
    records.extend(negatives_by_sampling(&trajs, env, samples_per_state, DemoSource::Scripted)?);
    records.extend(negatives_by_reversal(&trajs, DemoSource::Scripted));
    let cfg = env.config();
    Ok(DemoSet::new(&cfg.hash(), cfg.n_obs(crate::env::ObservationMode::Full), cfg.n_act(), records))
}
