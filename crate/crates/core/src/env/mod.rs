//! 2-D navigation: an agent disk must reach a target disk inside `[-1, 1]²`
//! without touching the border or any hole.
//!
//! Two obstacle modes (the shipped static maze, or freshly randomized holes
//! per episode) and two control modes (position increments, or forces
//! integrated into a velocity) are supported. Every episode state can be
//! captured with [`Env::snapshot`] and reinstated with [`Env::restore`].

pub mod layout;
pub mod planner;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::ActionBox;
pub use layout::{Layout, Rect, World};
pub use planner::GridPlanner;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("episode already terminated; call reset or restore")]
    EpisodeOver,
    #[error("action has dimension {0}, expected 2")]
    ActionDim(usize),
    #[error("snapshot was taken under a different environment configuration")]
    ConfigMismatch,
    #[error("could not place agent and target after {0} attempts")]
    Placement(usize),
    #[error("invalid environment configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    Position,
    Force,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleMode {
    StaticMaze,
    Randomized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    /// Agent, target, velocity (force mode) and beams.
    Full,
    /// Agent, target and velocity (force mode) only.
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceParams {
    pub dt: f64,
    pub max_speed: f64,
    pub max_force: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomObstacleParams {
    pub count: usize,
    pub min_side: f64,
    pub max_side: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub fail: f64,
    pub goal: f64,
    pub distance_coef: f64,
    pub alive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub version: u32,
    pub world_half_extent: f64,
    pub agent_diameter: f64,
    pub target_diameter: f64,
    /// Δ_m: largest displacement per step in position mode.
    pub max_step: f64,
    pub horizon: usize,
    pub control: ControlMode,
    pub obstacles: ObstacleMode,
    pub observation: ObservationMode,
    pub beam_count: usize,
    pub beam_range: f64,
    pub force: ForceParams,
    pub random_obstacles: RandomObstacleParams,
    pub rewards: RewardParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            world_half_extent: 1.0,
            agent_diameter: 0.05,
            target_diameter: 0.05,
            max_step: 0.1,
            horizon: 100,
            control: ControlMode::Position,
            obstacles: ObstacleMode::StaticMaze,
            observation: ObservationMode::Full,
            beam_count: 8,
            beam_range: 2.0 * std::f64::consts::SQRT_2,
            force: ForceParams {
                dt: 1.0,
                max_speed: 0.1,
                max_force: 0.02,
            },
            random_obstacles: RandomObstacleParams {
                count: 3,
                min_side: 0.2,
                max_side: 0.5,
            },
            rewards: RewardParams {
                fail: -10.0,
                goal: 10.0,
                distance_coef: -0.01,
                alive: -0.01,
            },
        }
    }
}

impl EnvConfig {
    /// Static maze, position control, policy sees positions only.
    pub fn static_maze() -> Self {
        Self {
            observation: ObservationMode::Reduced,
            ..Self::default()
        }
    }

    pub fn random_obstacles(control: ControlMode, observation: ObservationMode) -> Self {
        Self {
            obstacles: ObstacleMode::Randomized,
            control,
            observation,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::Config(m.to_string()));
        if self.version != CONFIG_VERSION {
            return bad("unsupported config version");
        }
        if !(self.max_step > 0.0) {
            return bad("max_step must be positive");
        }
        if self.horizon < 1 {
            return bad("horizon must be at least 1");
        }
        if !(self.agent_diameter > 0.0 && self.target_diameter > 0.0) {
            return bad("diameters must be positive");
        }
        if !(self.force.dt > 0.0 && self.force.max_speed > 0.0 && self.force.max_force > 0.0) {
            return bad("force parameters must be positive");
        }
        let ro = &self.random_obstacles;
        if !(0.0 < ro.min_side && ro.min_side <= ro.max_side && ro.max_side < 2.0 * self.world_half_extent) {
            return bad("random obstacle sides out of range");
        }
        Ok(())
    }

    pub fn agent_radius(&self) -> f64 {
        0.5 * self.agent_diameter
    }

    /// Agent-target center distance at which the target counts as reached.
    pub fn reach_distance(&self) -> f64 {
        0.5 * (self.agent_diameter + self.target_diameter)
    }

    pub fn n_act(&self) -> usize {
        2
    }

    pub fn action_box(&self) -> ActionBox {
        match self.control {
            ControlMode::Position => ActionBox::symmetric(self.max_step, 2),
            ControlMode::Force => ActionBox::symmetric(self.force.max_force, 2),
        }
    }

    pub fn n_obs(&self, mode: ObservationMode) -> usize {
        let velocity = if self.control == ControlMode::Force { 2 } else { 0 };
        let beams = if mode == ObservationMode::Full { self.beam_count } else { 0 };
        4 + velocity + beams
    }

    /// Observation size for the policy-facing mode of this config.
    pub fn policy_obs_dim(&self) -> usize {
        self.n_obs(self.observation)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn fingerprint(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Reads TOML or JSON depending on the file extension.
    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path)?;
        let config: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        let text = if path.extension().is_some_and(|e| e == "json") {
            serde_json::to_string_pretty(self)?
        } else {
            toml::to_string(self)?
        };
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Restorable simulator snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub agent: [f64; 2],
    pub velocity: [f64; 2],
    pub target: [f64; 2],
    pub holes: Vec<Rect>,
    pub timestep: usize,
    pub done: bool,
    config_fingerprint: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardTerms {
    pub fail: f64,
    pub goal: f64,
    pub distance: f64,
    pub alive: f64,
}

impl RewardTerms {
    pub fn total(&self) -> f64 {
        self.fail + self.goal + self.distance + self.alive
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepInfo {
    pub success: bool,
    pub failure: bool,
    /// Horizon reached without success or failure.
    pub truncated: bool,
    pub reward_terms: RewardTerms,
    /// Displacement actually applied this step.
    pub displacement: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub end: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone)]
pub struct Env {
    config: EnvConfig,
    layout: Layout,
    fingerprint: u64,
    state: EnvState,
    rng: ChaCha8Rng,
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

impl Env {
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self, EnvError> {
        Self::with_layout(config, Layout::static_maze(), seed)
    }

    /// `layout` is used in static-maze mode and ignored when randomized.
    pub fn with_layout(config: EnvConfig, layout: Layout, seed: u64) -> Result<Self, EnvError> {
        config.validate()?;
        let fingerprint = config.fingerprint();
        let mut env = Self {
            state: EnvState {
                agent: [0.0; 2],
                velocity: [0.0; 2],
                target: [0.0; 2],
                holes: Vec::new(),
                timestep: 0,
                done: true,
                config_fingerprint: fingerprint,
            },
            config,
            layout,
            fingerprint,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        env.reset_state()?;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.done
    }

    pub fn world(&self) -> World<'_> {
        World {
            half_extent: self.config.world_half_extent,
            holes: &self.state.holes,
        }
    }

    /// New episode drawn from the environment's own stream.
    pub fn reset(&mut self) -> Result<Vec<f64>, EnvError> {
        self.reset_state()?;
        Ok(self.observation())
    }

    /// Reseeds the stream, then resets.
    pub fn reset_with_seed(&mut self, seed: u64) -> Result<Vec<f64>, EnvError> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.reset()
    }

    fn reset_state(&mut self) -> Result<(), EnvError> {
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let holes = match self.config.obstacles {
                ObstacleMode::StaticMaze => self.layout.holes.clone(),
                ObstacleMode::Randomized => self.sample_holes(),
            };
            let world = World {
                half_extent: self.config.world_half_extent,
                holes: &holes,
            };
            let Some(agent) = self.sample_free(&world) else { continue };
            let Some(target) = self.sample_free(&world) else { continue };
            let gap = (agent[0] - target[0]).hypot(agent[1] - target[1]);
            if gap <= self.config.reach_distance() {
                continue;
            }
            if self.config.obstacles == ObstacleMode::Randomized {
                let planner = GridPlanner::new(world, 0.05, self.config.agent_radius());
                if !planner.connected(agent, target) {
                    continue;
                }
            }
            self.state = EnvState {
                agent,
                velocity: [0.0; 2],
                target,
                holes,
                timestep: 0,
                done: false,
                config_fingerprint: self.fingerprint,
            };
            return Ok(());
        }
        Err(EnvError::Placement(MAX_PLACEMENT_ATTEMPTS))
    }

    fn sample_holes(&mut self) -> Vec<Rect> {
        let h = self.config.world_half_extent;
        let p = self.config.random_obstacles.clone();
        (0..p.count)
            .map(|_| {
                let w = self.rng.gen_range(p.min_side..=p.max_side);
                let ht = self.rng.gen_range(p.min_side..=p.max_side);
                let x = self.rng.gen_range(-h..h - w);
                let y = self.rng.gen_range(-h..h - ht);
                Rect::new([x, y], [x + w, y + ht])
            })
            .collect()
    }

    fn sample_free(&mut self, world: &World<'_>) -> Option<[f64; 2]> {
        let r = self.config.agent_radius();
        let h = self.config.world_half_extent - r;
        for _ in 0..1000 {
            let p = [self.rng.gen_range(-h..h), self.rng.gen_range(-h..h)];
            if !world.disk_collides(p, r) {
                return Some(p);
            }
        }
        None
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if self.state.done {
            return Err(EnvError::EpisodeOver);
        }
        if action.len() != 2 {
            return Err(EnvError::ActionDim(action.len()));
        }
        let displacement = match self.config.control {
            ControlMode::Position => {
                let norm = action[0].hypot(action[1]);
                let scale = if norm > self.config.max_step {
                    self.config.max_step / norm
                } else {
                    1.0
                };
                [action[0] * scale, action[1] * scale]
            }
            ControlMode::Force => {
                let f = &self.config.force;
                let mut v = self.state.velocity;
                for (vi, ai) in v.iter_mut().zip(action) {
                    let force = ai.clamp(-f.max_force, f.max_force);
                    *vi = (*vi + force * f.dt).clamp(-f.max_speed, f.max_speed);
                }
                self.state.velocity = v;
                [v[0] * f.dt, v[1] * f.dt]
            }
        };
        let start = self.state.agent;
        let end = [start[0] + displacement[0], start[1] + displacement[1]];
        self.state.agent = end;
        self.state.timestep += 1;

        let failure = self.world().sweep_collides(start, end, self.config.agent_radius());
        let to_target = (self.state.target[0] - end[0]).hypot(self.state.target[1] - end[1]);
        let success = !failure && to_target <= self.config.reach_distance();
        let rw = &self.config.rewards;
        let terms = RewardTerms {
            fail: if failure { rw.fail } else { 0.0 },
            goal: if success { rw.goal } else { 0.0 },
            distance: rw.distance_coef * to_target,
            alive: rw.alive,
        };
        let horizon = self.state.timestep >= self.config.horizon;
        let end_flag = failure || success || horizon;
        self.state.done = end_flag;
        Ok(StepResult {
            observation: self.observation(),
            reward: terms.total(),
            end: end_flag,
            info: StepInfo {
                success,
                failure,
                truncated: horizon && !failure && !success,
                reward_terms: terms,
                displacement,
            },
        })
    }

    pub fn beam_distances(&self) -> Vec<f64> {
        self.world()
            .beams(self.state.agent, self.config.beam_count, self.config.beam_range)
    }

    pub fn observe(&self, mode: ObservationMode) -> Vec<f64> {
        let s = &self.state;
        let mut obs = vec![s.agent[0], s.agent[1], s.target[0], s.target[1]];
        if self.config.control == ControlMode::Force {
            obs.extend_from_slice(&s.velocity);
        }
        if mode == ObservationMode::Full {
            obs.extend(self.beam_distances());
        }
        obs
    }

    /// Observation in the configured (policy-facing) mode.
    pub fn observation(&self) -> Vec<f64> {
        self.observe(self.config.observation)
    }

    pub fn full_observation(&self) -> Vec<f64> {
        self.observe(ObservationMode::Full)
    }

    pub fn snapshot(&self) -> EnvState {
        self.state.clone()
    }

    pub fn restore(&mut self, state: &EnvState) -> Result<Vec<f64>, EnvError> {
        if state.config_fingerprint != self.fingerprint {
            return Err(EnvError::ConfigMismatch);
        }
        self.state = state.clone();
        Ok(self.observation())
    }

    /// Copy of `state` with the episode clock rewound and the done flag
    /// cleared, for starting new episodes from visited states.
    pub fn rearm(state: &EnvState) -> EnvState {
        EnvState {
            timestep: 0,
            done: false,
            ..state.clone()
        }
    }

    /// Places the agent and target directly (tools and tests).
    pub fn place(&mut self, agent: [f64; 2], target: [f64; 2], velocity: [f64; 2]) -> Vec<f64> {
        self.state.agent = agent;
        self.state.target = target;
        self.state.velocity = velocity;
        self.state.timestep = 0;
        self.state.done = false;
        self.observation()
    }
}
