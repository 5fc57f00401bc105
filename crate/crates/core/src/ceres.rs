//! Constrained sampling, demonstration labeling and the direct/recovery
//! co-training loop.
//!
//! Every run draws its randomness from independent ChaCha streams of one
//! seed (see [`streams`]), so switching the constraint filter on or off
//! never perturbs the policy, environment or shuffling streams.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraint_net::{
    mean_loss, separation_accuracy, ConstraintError, ConstraintNet, ConstraintTrainConfig, ConstraintTrainer,
    LabeledDemo,
};
use crate::demo::{DemoRecord, DemoSet, DemoSource};
use crate::env::{Env, EnvConfig, EnvError, EnvState, ObservationMode, StepInfo};
use crate::geometry::{project_action, ActionBox, LinearConstraintSet};
use crate::metrics::{EpisodeStats, EpisodeSummary, MetricsRow};
use crate::ppo::{PpoAgent, PpoConfig, PpoError, RolloutBatch, Transition};

#[derive(Debug, Error)]
pub enum CeresError {
    #[error("invalid CERES configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

/// Stream identifiers for [`stream_rng`].
pub mod streams {
    pub const DIRECT_INIT: u64 = 0;
    pub const DIRECT_ENV: u64 = 1;
    pub const DIRECT_POLICY: u64 = 2;
    pub const DIRECT_FILTER: u64 = 3;
    pub const RECOVERY_INIT: u64 = 4;
    pub const RECOVERY_ENV: u64 = 5;
    pub const RECOVERY_POLICY: u64 = 6;
    pub const RECOVERY_FILTER: u64 = 7;
    pub const QUEUE: u64 = 8;
    pub const CONSTRAINT_INIT: u64 = 9;
    pub const CONSTRAINT_TRAIN: u64 = 10;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalCause {
    Failure,
    Success,
    Horizon,
}

impl TerminalCause {
    pub fn of(info: &StepInfo) -> Self {
        if info.failure {
            Self::Failure
        } else if info.success {
            Self::Success
        } else {
            Self::Horizon
        }
    }
}

/// One executed step: full observation, executed (corrected) action, step
/// info and the snapshot reached.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalStep {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub info: StepInfo,
    pub successor: EnvState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryForEval {
    pub id: u64,
    pub steps: Vec<EvalStep>,
    pub cause: TerminalCause,
}

impl TrajectoryForEval {
    pub fn new(id: u64, steps: Vec<EvalStep>, cause: TerminalCause) -> Result<Self, CeresError> {
        let Some(last) = steps.last() else {
            return Err(CeresError::Config("empty trajectory".into()));
        };
        let consistent = match cause {
            TerminalCause::Failure => last.info.failure,
            TerminalCause::Success => last.info.success,
            TerminalCause::Horizon => !last.info.failure && !last.info.success,
        };
        if !consistent {
            return Err(CeresError::Config(format!("terminal cause {cause:?} contradicts last step")));
        }
        Ok(Self { id, steps, cause })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DemoLabel {
    Positive,
    Negative,
    Uncertain,
}

/// Labels every demo of a finished trajectory. A demo is positive when at
/// least `n_s` non-failing steps follow it; after a failure the last demo
/// is negative; everything else is uncertain.
pub fn evaluate_demos(traj: &TrajectoryForEval, n_s: usize) -> Vec<DemoLabel> {
    let len = traj.steps.len();
    let mut labels = vec![DemoLabel::Uncertain; len];
    let failing_tail = usize::from(traj.cause == TerminalCause::Failure);
    for (j, label) in labels.iter_mut().enumerate() {
        let safe_successors = (len - 1 - j).saturating_sub(failing_tail);
        if safe_successors >= n_s {
            *label = DemoLabel::Positive;
        }
    }
    if failing_tail == 1 {
        labels[len - 1] = DemoLabel::Negative;
    }
    labels
}

/// Index range of the uncertain demos (always a contiguous tail block).
pub fn uncertain_range(labels: &[DemoLabel]) -> std::ops::Range<usize> {
    let start = labels.iter().position(|l| *l == DemoLabel::Uncertain).unwrap_or(labels.len());
    let end = labels.iter().rposition(|l| *l == DemoLabel::Uncertain).map_or(start, |e| e + 1);
    start..end
}

/// Labels are consistent when no positive follows a negative or an
/// uncertain demo precedes a positive after a negative, i.e. the sequence
/// reads `P* U* N*`.
pub fn labels_consistent(labels: &[DemoLabel]) -> bool {
    let rank = |l: &DemoLabel| match l {
        DemoLabel::Positive => 0,
        DemoLabel::Uncertain => 1,
        DemoLabel::Negative => 2,
    };
    labels.windows(2).all(|w| rank(&w[0]) <= rank(&w[1]))
}

/// Per-step reward of the recovery environment.
pub fn recovery_reward(alive: bool, failed: bool, n_s: usize) -> f64 {
    debug_assert!(alive != failed, "alive and failed are exclusive");
    if failed {
        -(n_s as f64)
    } else {
        1.0
    }
}

/// Separation accuracy on `recent`; zero on an empty slice.
pub fn activation_probability(net: &ConstraintNet, recent: &[LabeledDemo]) -> f64 {
    if recent.is_empty() {
        0.0
    } else {
        separation_accuracy(net, recent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemoMeta {
    pub source: DemoSource,
    pub trajectory_id: Option<u64>,
    pub step_index: Option<usize>,
}

/// Append-only store of labeled demonstrations.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    demos: Vec<LabeledDemo>,
    meta: Vec<DemoMeta>,
    positives: usize,
}

impl ReplayBuffer {
    pub fn push(&mut self, demo: LabeledDemo, meta: DemoMeta) {
        self.positives += usize::from(demo.positive);
        self.demos.push(demo);
        self.meta.push(meta);
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.positives
    }

    pub fn negatives(&self) -> usize {
        self.demos.len() - self.positives
    }

    pub fn demos(&self) -> &[LabeledDemo] {
        &self.demos
    }

    pub fn recent(&self, window: usize) -> &[LabeledDemo] {
        &self.demos[self.demos.len().saturating_sub(window)..]
    }

    pub fn to_demo_set(&self, env_config_hash: &str, n_obs: usize, n_act: usize) -> DemoSet {
        let records = self
            .demos
            .iter()
            .zip(&self.meta)
            .map(|(d, m)| DemoRecord {
                state: d.state.clone(),
                action: d.action.clone(),
                indicator: d.indicator(),
                trajectory_id: m.trajectory_id,
                step_index: m.step_index,
                source: m.source,
            })
            .collect();
        DemoSet::new(env_config_hash, n_obs, n_act, records)
    }
}

/// Uncertain demos of one direct trajectory awaiting recovery probing.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertainSegment {
    pub trajectory_id: u64,
    /// Index of the first demo of the segment within its trajectory.
    pub start: usize,
    pub demos: Vec<EvalStep>,
}

/// FIFO of segments holding at most `capacity` demos; the oldest segments
/// are dropped first.
#[derive(Debug, Clone)]
pub struct UncertainQueue {
    segments: VecDeque<UncertainSegment>,
    states: usize,
    capacity: usize,
    dropped: usize,
}

impl UncertainQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            segments: VecDeque::new(),
            states: 0,
            capacity,
            dropped: 0,
        }
    }

    pub fn push(&mut self, segment: UncertainSegment) {
        if segment.demos.is_empty() {
            return;
        }
        self.states += segment.demos.len();
        self.segments.push_back(segment);
        while self.states > self.capacity {
            let old = self.segments.pop_front().expect("over capacity implies non-empty");
            self.states -= old.demos.len();
            self.dropped += old.demos.len();
        }
    }

    /// Removes a uniformly chosen segment.
    pub fn take_random<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Option<UncertainSegment> {
        if self.segments.is_empty() {
            return None;
        }
        let i = rng.gen_range(0..self.segments.len());
        let seg = self.segments.remove(i)?;
        self.states -= seg.demos.len();
        Some(seg)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }
}

/// Applies the constraint net with probability `activation`.
#[derive(Debug, Clone, Copy)]
pub struct ConstraintFilter<'a> {
    pub net: &'a ConstraintNet,
    pub activation: f64,
}

/// Projects `raw` onto the predicted polytope intersected with the action
/// box. The interior point lies in the box, so the problem is feasible.
pub fn project_in_box(set: &LinearConstraintSet, bounds: &ActionBox, raw: &[f64]) -> Vec<f64> {
    let n = bounds.dim();
    let mut rows = set.rows().to_vec();
    let mut offsets = set.offsets().to_vec();
    for k in 0..n {
        let mut e = vec![0.0; n];
        e[k] = 1.0;
        rows.push(e.clone());
        offsets.push(bounds.upper()[k]);
        e[k] = -1.0;
        rows.push(e);
        offsets.push(-bounds.lower()[k]);
    }
    let augmented = LinearConstraintSet::from_rows_offsets(rows, offsets);
    match project_action(raw, &augmented) {
        Ok(a) => bounds.clamp(&a),
        Err(e) => {
            log::warn!("projection failed ({e}); falling back to the interior point");
            set.interior_point().to_vec()
        }
    }
}

/// Executed action for a raw policy sample: projected when the filter
/// fires, otherwise clamped to the action box. The coin is drawn whenever a
/// filter is present.
pub fn execute_action<R: Rng + ?Sized>(
    raw: &[f64],
    full_obs: &[f64],
    bounds: &ActionBox,
    filter: Option<ConstraintFilter<'_>>,
    rng: &mut R,
) -> (Vec<f64>, bool) {
    if let Some(f) = filter {
        if rng.gen::<f64>() < f.activation {
            let set = f.net.predict(full_obs);
            return (project_in_box(&set, bounds, raw), true);
        }
    }
    (bounds.clamp(raw), false)
}

/// Result of one [`Sampler::sample`] call.
#[derive(Debug, Clone, Default)]
pub struct SampleOutput {
    pub batch: RolloutBatch,
    pub trajectories: Vec<TrajectoryForEval>,
    pub episodes: Vec<EpisodeSummary>,
    pub corrected_steps: usize,
}

/// Runs a policy on one environment, carrying unfinished episodes over to
/// the next call.
#[derive(Debug, Clone)]
pub struct Sampler {
    env: Env,
    obs: Vec<f64>,
    current: Vec<EvalStep>,
    episode_return: f64,
    next_id: u64,
}

impl Sampler {
    pub fn new(mut env: Env) -> Result<Self, EnvError> {
        let obs = env.reset()?;
        Ok(Self {
            env,
            obs,
            current: Vec::new(),
            episode_return: 0.0,
            next_id: 0,
        })
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    /// Collects `steps` on-policy transitions. `τ_PO` holds raw actions;
    /// finished trajectories hold executed actions.
    pub fn sample<R1: Rng + ?Sized, R2: Rng + ?Sized>(
        &mut self,
        agent: &PpoAgent,
        filter: Option<ConstraintFilter<'_>>,
        steps: usize,
        policy_rng: &mut R1,
        filter_rng: &mut R2,
    ) -> Result<SampleOutput, EnvError> {
        let bounds = self.env.config().action_box();
        let mut out = SampleOutput::default();
        for _ in 0..steps {
            let full = self.env.full_observation();
            let (raw, log_prob, value) = agent.act(&self.obs, policy_rng);
            let (executed, corrected) = execute_action(&raw, &full, &bounds, filter, filter_rng);
            out.corrected_steps += usize::from(corrected);
            let result = self.env.step(&executed)?;
            self.episode_return += result.reward;
            out.batch.steps.push(Transition {
                state: std::mem::replace(&mut self.obs, result.observation),
                action: raw,
                log_prob,
                reward: result.reward,
                value,
                end: result.end,
            });
            self.current.push(EvalStep {
                state: full,
                action: executed,
                info: result.info,
                successor: self.env.snapshot(),
            });
            if result.end {
                let steps = std::mem::take(&mut self.current);
                out.episodes.push(EpisodeSummary {
                    episode_return: self.episode_return,
                    length: steps.len(),
                    success: result.info.success,
                    failure: result.info.failure,
                });
                let cause = TerminalCause::of(&result.info);
                out.trajectories.push(TrajectoryForEval {
                    id: self.next_id,
                    steps,
                    cause,
                });
                self.next_id += 1;
                self.episode_return = 0.0;
                self.obs = self.env.reset()?;
            }
        }
        out.batch.bootstrap_value = match out.batch.steps.last() {
            Some(last) if !last.end => agent.value_of(&self.obs),
            _ => 0.0,
        };
        Ok(out)
    }
}

/// Outcome of probing one uncertain segment.
#[derive(Debug, Clone, Default)]
pub struct RecoveryOutcome {
    /// Final label per segment demo (never uncertain).
    pub labels: Vec<DemoLabel>,
    /// Probed segment indices in probing order.
    pub probes: Vec<usize>,
    pub batch: RolloutBatch,
    pub episodes: Vec<EpisodeSummary>,
    /// Failing recovery steps, which are negatives in their own right.
    pub failure_negatives: Vec<LabeledDemo>,
}

/// Bisection labeling of an uncertain segment with the recovery policy.
///
/// A probe restores the successor state of a demo and lets the recovery
/// policy act for up to `n_s` steps, at most `n_a` times. Survival (or
/// reaching the goal) labels the demo and all earlier ones positive; `n_a`
/// failures label it and all later ones negative.
#[allow(clippy::too_many_arguments)]
pub fn recovery_label<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    env_r: &mut Env,
    agent: &PpoAgent,
    segment: &UncertainSegment,
    n_s: usize,
    n_a: usize,
    filter: Option<ConstraintFilter<'_>>,
    policy_rng: &mut R1,
    filter_rng: &mut R2,
) -> Result<RecoveryOutcome, EnvError> {
    let len = segment.demos.len();
    let bounds = env_r.config().action_box();
    let mut out = RecoveryOutcome {
        labels: vec![DemoLabel::Uncertain; len],
        ..Default::default()
    };
    let (mut lo, mut hi) = (0, len);
    while lo < hi {
        let m = lo + (hi - lo) / 2;
        out.probes.push(m);
        let start = Env::rearm(&segment.demos[m].successor);
        let mut survived = false;
        for _ in 0..n_a {
            env_r.restore(&start)?;
            let mut ret = 0.0;
            let mut length = 0;
            let mut failed = false;
            for t in 0..n_s {
                let full = env_r.full_observation();
                let (raw, log_prob, value) = agent.act(&full, policy_rng);
                let (executed, _) = execute_action(&raw, &full, &bounds, filter, filter_rng);
                let result = env_r.step(&executed)?;
                failed = result.info.failure;
                let reward = recovery_reward(!failed, failed, n_s);
                let end = failed || result.end || t + 1 == n_s;
                ret += reward;
                length += 1;
                out.batch.steps.push(Transition {
                    state: full.clone(),
                    action: raw,
                    log_prob,
                    reward,
                    value,
                    end,
                });
                if failed {
                    out.failure_negatives.push(LabeledDemo::new(full, executed, false));
                }
                if end {
                    break;
                }
            }
            out.episodes.push(EpisodeSummary {
                episode_return: ret,
                length,
                success: !failed,
                failure: failed,
            });
            if !failed {
                survived = true;
                break;
            }
        }
        if survived {
            out.labels[lo..=m].fill(DemoLabel::Positive);
            lo = m + 1;
        } else {
            out.labels[m..hi].fill(DemoLabel::Negative);
            hi = m;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationRule {
    /// Separation accuracy on the most recent buffer window.
    Accuracy,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeresConfig {
    pub n_s: usize,
    pub n_a: usize,
    pub iterations: usize,
    pub activation: ActivationRule,
    pub constrain_recovery: bool,
    pub recovery_steps_per_iter: usize,
    pub queue_capacity: usize,
    /// Constraint training starts once both classes reach this count.
    pub min_class_demos: usize,
    pub accuracy_window: usize,
    pub constraint: ConstraintTrainConfig,
    pub direct: PpoConfig,
    pub recovery: PpoConfig,
    /// Keep per-trajectory labels and probe counts for inspection.
    pub audit: bool,
}

impl Default for CeresConfig {
    fn default() -> Self {
        Self {
            n_s: 10,
            n_a: 3,
            iterations: 50,
            activation: ActivationRule::Accuracy,
            constrain_recovery: false,
            recovery_steps_per_iter: 2048,
            queue_capacity: 10_000,
            min_class_demos: 64,
            accuracy_window: 2048,
            constraint: ConstraintTrainConfig {
                epochs: 1,
                max_batches: Some(200),
                report_accuracy: false,
                ..Default::default()
            },
            direct: PpoConfig::default(),
            recovery: PpoConfig::default(),
            audit: false,
        }
    }
}

impl CeresConfig {
    pub fn validate(&self) -> Result<(), CeresError> {
        if self.n_s == 0 || self.n_a == 0 {
            return Err(CeresError::Config("n_s and n_a must be at least 1".into()));
        }
        if let ActivationRule::Fixed(p) = self.activation {
            if !(0.0..=1.0).contains(&p) {
                return Err(CeresError::Config(format!("activation {p} outside [0, 1]")));
            }
        }
        self.direct.validate()?;
        self.recovery.validate()?;
        self.constraint.validate()?;
        Ok(())
    }
}

fn check_constraint_net(net: &ConstraintNet, env_cfg: &EnvConfig) -> Result<(), CeresError> {
    let n_obs = env_cfg.n_obs(ObservationMode::Full);
    if net.n_obs() != n_obs || net.bounds() != &env_cfg.action_box() {
        return Err(CeresError::Config(format!(
            "constraint net expects {} inputs and bounds {:?}; environment has {n_obs} and {:?}",
            net.n_obs(),
            net.bounds(),
            env_cfg.action_box()
        )));
    }
    Ok(())
}

fn new_agent(n_obs: usize, env_cfg: &EnvConfig, config: &PpoConfig, seed: u64, stream: u64) -> Result<PpoAgent, PpoError> {
    let mut rng = stream_rng(seed, stream);
    PpoAgent::new(n_obs, env_cfg.action_box().half_widths(), config.clone(), &mut rng)
}

fn new_env(env_cfg: &EnvConfig, seed: u64, stream: u64) -> Result<Env, EnvError> {
    Env::new(env_cfg.clone(), stream_rng(seed, stream).gen())
}

/// PPO on the direct environment, optionally with a fixed constraint net
/// that corrects every action.
#[derive(Debug, Clone)]
pub struct PpoRun {
    pub agent: PpoAgent,
    pub constraints: Option<ConstraintNet>,
    sampler: Sampler,
    policy_rng: ChaCha8Rng,
    filter_rng: ChaCha8Rng,
    iteration: usize,
    env_steps: usize,
}

impl PpoRun {
    pub fn new(
        env_cfg: &EnvConfig,
        ppo: PpoConfig,
        constraints: Option<ConstraintNet>,
        seed: u64,
    ) -> Result<Self, CeresError> {
        ppo.validate()?;
        if let Some(net) = &constraints {
            check_constraint_net(net, env_cfg)?;
        }
        Ok(Self {
            agent: new_agent(env_cfg.policy_obs_dim(), env_cfg, &ppo, seed, streams::DIRECT_INIT)?,
            constraints,
            sampler: Sampler::new(new_env(env_cfg, seed, streams::DIRECT_ENV)?)?,
            policy_rng: stream_rng(seed, streams::DIRECT_POLICY),
            filter_rng: stream_rng(seed, streams::DIRECT_FILTER),
            iteration: 0,
            env_steps: 0,
        })
    }

    pub fn iterate(&mut self) -> Result<MetricsRow, CeresError> {
        let filter = self.constraints.as_ref().map(|net| ConstraintFilter { net, activation: 1.0 });
        let steps = self.agent.config.steps_per_iter;
        let out = self
            .sampler
            .sample(&self.agent, filter, steps, &mut self.policy_rng, &mut self.filter_rng)?;
        self.agent.update(&out.batch, &mut self.policy_rng)?;
        self.env_steps += steps;
        let stats = EpisodeStats::of(&out.episodes);
        let row = MetricsRow {
            iteration: self.iteration,
            env_steps: self.env_steps,
            mean_reward: stats.mean_reward,
            success_rate: stats.success_rate,
            failure_rate: stats.failure_rate,
            mean_ep_len: stats.mean_ep_len,
            activation_prob: if self.constraints.is_some() { 1.0 } else { 0.0 },
            constraint_loss: None,
            constraint_accuracy: None,
        };
        self.iteration += 1;
        Ok(row)
    }
}

pub fn run_ppo(
    env_cfg: &EnvConfig,
    ppo: PpoConfig,
    constraints: Option<ConstraintNet>,
    iterations: usize,
    seed: u64,
) -> Result<(PpoRun, Vec<MetricsRow>), CeresError> {
    let mut run = PpoRun::new(env_cfg, ppo, constraints, seed)?;
    let rows = (0..iterations).map(|_| run.iterate()).collect::<Result<Vec<_>, _>>()?;
    Ok((run, rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeAudit {
    pub segment_len: usize,
    pub probes: usize,
}

/// Extra per-iteration numbers not in the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IterationDetails {
    pub recovery_steps: usize,
    pub recovery_episodes: usize,
    pub recovery_survival_rate: f64,
    pub segments_probed: usize,
    pub queue_states: usize,
    pub buffer_positives: usize,
    pub buffer_negatives: usize,
}

/// State of a CERES run: both agents, the constraint net and its trainer,
/// the replay buffer and the uncertain queue.
#[derive(Debug, Clone)]
pub struct CeresRun {
    pub config: CeresConfig,
    pub direct: PpoAgent,
    pub recovery: PpoAgent,
    pub trainer: ConstraintTrainer,
    pub buffer: ReplayBuffer,
    pub queue: UncertainQueue,
    env_cfg: EnvConfig,
    sampler: Sampler,
    env_r: Env,
    direct_rng: ChaCha8Rng,
    direct_filter_rng: ChaCha8Rng,
    recovery_rng: ChaCha8Rng,
    recovery_filter_rng: ChaCha8Rng,
    queue_rng: ChaCha8Rng,
    activation: f64,
    trained: bool,
    iteration: usize,
    env_steps: usize,
    audit_labels: BTreeMap<u64, Vec<DemoLabel>>,
    audit_probes: Vec<ProbeAudit>,
    pub last_details: IterationDetails,
}

impl CeresRun {
    pub fn new(env_cfg: &EnvConfig, config: CeresConfig, seed: u64) -> Result<Self, CeresError> {
        config.validate()?;
        let full = env_cfg.n_obs(ObservationMode::Full);
        let net = ConstraintNet::new(
            full,
            config.constraint.n_in,
            &config.constraint.hidden,
            env_cfg.action_box(),
            &mut stream_rng(seed, streams::CONSTRAINT_INIT),
        );
        Self::with_constraint_net(env_cfg, config, net, seed)
    }

    /// Starts from a given (possibly pre-trained) constraint network.
    pub fn with_constraint_net(
        env_cfg: &EnvConfig,
        config: CeresConfig,
        net: ConstraintNet,
        seed: u64,
    ) -> Result<Self, CeresError> {
        config.validate()?;
        check_constraint_net(&net, env_cfg)?;
        let full = env_cfg.n_obs(ObservationMode::Full);
        let activation = match config.activation {
            ActivationRule::Accuracy => 0.0,
            ActivationRule::Fixed(p) => p,
        };
        Ok(Self {
            direct: new_agent(env_cfg.policy_obs_dim(), env_cfg, &config.direct, seed, streams::DIRECT_INIT)?,
            recovery: new_agent(full, env_cfg, &config.recovery, seed, streams::RECOVERY_INIT)?,
            trainer: ConstraintTrainer::new(
                net,
                config.constraint.clone(),
                stream_rng(seed, streams::CONSTRAINT_TRAIN),
            ),
            buffer: ReplayBuffer::default(),
            queue: UncertainQueue::new(config.queue_capacity),
            sampler: Sampler::new(new_env(env_cfg, seed, streams::DIRECT_ENV)?)?,
            env_r: new_env(env_cfg, seed, streams::RECOVERY_ENV)?,
            env_cfg: env_cfg.clone(),
            direct_rng: stream_rng(seed, streams::DIRECT_POLICY),
            direct_filter_rng: stream_rng(seed, streams::DIRECT_FILTER),
            recovery_rng: stream_rng(seed, streams::RECOVERY_POLICY),
            recovery_filter_rng: stream_rng(seed, streams::RECOVERY_FILTER),
            queue_rng: stream_rng(seed, streams::QUEUE),
            activation,
            trained: false,
            iteration: 0,
            env_steps: 0,
            audit_labels: BTreeMap::new(),
            audit_probes: Vec::new(),
            last_details: IterationDetails::default(),
            config,
        })
    }

    pub fn constraint_net(&self) -> &ConstraintNet {
        &self.trainer.net
    }

    pub fn env_config(&self) -> &EnvConfig {
        &self.env_cfg
    }

    pub fn activation(&self) -> f64 {
        self.activation
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Final labels of every direct trajectory (audit mode only).
    pub fn audit_labels(&self) -> &BTreeMap<u64, Vec<DemoLabel>> {
        &self.audit_labels
    }

    pub fn audit_probes(&self) -> &[ProbeAudit] {
        &self.audit_probes
    }

    fn push_demo(buffer: &mut ReplayBuffer, step: &EvalStep, positive: bool, source: DemoSource, id: u64, index: usize) {
        buffer.push(
            LabeledDemo::new(step.state.clone(), step.action.clone(), positive),
            DemoMeta {
                source,
                trajectory_id: Some(id),
                step_index: Some(index),
            },
        );
    }

    /// One CERES iteration; returns its metrics row.
    pub fn iterate(&mut self) -> Result<MetricsRow, CeresError> {
        let cfg = &self.config;
        let (n_s, n_a) = (cfg.n_s, cfg.n_a);

        // Direct policy: constrained sampling and PPO update.
        let activation_used = self.activation;
        let filter = Some(ConstraintFilter {
            net: &self.trainer.net,
            activation: activation_used,
        });
        let steps = self.direct.config.steps_per_iter;
        let direct = self.sampler.sample(
            &self.direct,
            filter,
            steps,
            &mut self.direct_rng,
            &mut self.direct_filter_rng,
        )?;
        self.direct.update(&direct.batch, &mut self.direct_rng)?;
        self.env_steps += steps;

        // Recovery policy: probe queued uncertain segments.
        let recovery_filter = cfg.constrain_recovery.then_some(ConstraintFilter {
            net: &self.trainer.net,
            activation: activation_used,
        });
        let mut recovery_batch = RolloutBatch::default();
        let mut recovery_episodes = Vec::new();
        let mut resolved = Vec::new();
        let mut segments_probed = 0;
        while recovery_batch.len() < cfg.recovery_steps_per_iter {
            let Some(segment) = self.queue.take_random(&mut self.queue_rng) else { break };
            let outcome = match recovery_label(
                &mut self.env_r,
                &self.recovery,
                &segment,
                n_s,
                n_a,
                recovery_filter,
                &mut self.recovery_rng,
                &mut self.recovery_filter_rng,
            ) {
                Ok(o) => o,
                Err(e) => {
                    log::warn!("recovery labeling of trajectory {} aborted: {e}", segment.trajectory_id);
                    continue;
                }
            };
            segments_probed += 1;
            if cfg.audit {
                self.audit_probes.push(ProbeAudit {
                    segment_len: segment.demos.len(),
                    probes: outcome.probes.len(),
                });
            }
            recovery_batch.extend(outcome.batch);
            recovery_episodes.extend(outcome.episodes);
            resolved.push((segment, outcome.labels, outcome.failure_negatives));
        }
        if !recovery_batch.is_empty() {
            self.recovery.update(&recovery_batch, &mut self.recovery_rng)?;
        }

        // Buffer: direct labels, then recovery promotions.
        let mut new_segments = Vec::new();
        for traj in &direct.trajectories {
            let labels = evaluate_demos(traj, n_s);
            for (i, (step, label)) in traj.steps.iter().zip(&labels).enumerate() {
                match label {
                    DemoLabel::Positive => Self::push_demo(&mut self.buffer, step, true, DemoSource::CeresDirect, traj.id, i),
                    DemoLabel::Negative => Self::push_demo(&mut self.buffer, step, false, DemoSource::CeresDirect, traj.id, i),
                    DemoLabel::Uncertain => {}
                }
            }
            let range = uncertain_range(&labels);
            if !range.is_empty() {
                new_segments.push(UncertainSegment {
                    trajectory_id: traj.id,
                    start: range.start,
                    demos: traj.steps[range.clone()].to_vec(),
                });
            }
            if cfg.audit {
                self.audit_labels.insert(traj.id, labels);
            }
        }
        for (segment, labels, failure_negatives) in resolved {
            for (k, (step, label)) in segment.demos.iter().zip(&labels).enumerate() {
                let positive = *label == DemoLabel::Positive;
                Self::push_demo(&mut self.buffer, step, positive, DemoSource::CeresDirect, segment.trajectory_id, segment.start + k);
            }
            for demo in failure_negatives {
                self.buffer.push(
                    demo,
                    DemoMeta {
                        source: DemoSource::CeresRecovery,
                        trajectory_id: None,
                        step_index: None,
                    },
                );
            }
            if cfg.audit {
                if let Some(all) = self.audit_labels.get_mut(&segment.trajectory_id) {
                    all[segment.start..segment.start + labels.len()].copy_from_slice(&labels);
                }
            }
        }

        // Constraint network.
        let mut constraint_loss = None;
        let mut constraint_accuracy = None;
        if self.buffer.positives() >= cfg.min_class_demos && self.buffer.negatives() >= cfg.min_class_demos {
            self.trainer.train(self.buffer.demos())?;
            self.trained = true;
        }
        if self.trained {
            let recent = self.buffer.recent(cfg.accuracy_window);
            let acc = activation_probability(&self.trainer.net, recent);
            constraint_accuracy = Some(acc);
            constraint_loss = Some(mean_loss(&self.trainer.net, recent));
            if cfg.activation == ActivationRule::Accuracy {
                self.activation = acc;
            }
        }

        for segment in new_segments {
            self.queue.push(segment);
        }

        let stats = EpisodeStats::of(&direct.episodes);
        let recovery_stats = EpisodeStats::of(&recovery_episodes);
        self.last_details = IterationDetails {
            recovery_steps: recovery_batch.len(),
            recovery_episodes: recovery_episodes.len(),
            recovery_survival_rate: recovery_stats.success_rate,
            segments_probed,
            queue_states: self.queue.states(),
            buffer_positives: self.buffer.positives(),
            buffer_negatives: self.buffer.negatives(),
        };
        let row = MetricsRow {
            iteration: self.iteration,
            env_steps: self.env_steps,
            mean_reward: stats.mean_reward,
            success_rate: stats.success_rate,
            failure_rate: stats.failure_rate,
            mean_ep_len: stats.mean_ep_len,
            activation_prob: activation_used,
            constraint_loss,
            constraint_accuracy,
        };
        self.iteration += 1;
        Ok(row)
    }
}

/// Runs `config.iterations` CERES iterations, calling `observer` after each.
pub fn ceres_loop(
    env_cfg: &EnvConfig,
    config: CeresConfig,
    seed: u64,
    observer: &mut dyn FnMut(&CeresRun, &MetricsRow),
) -> Result<(CeresRun, Vec<MetricsRow>), CeresError> {
    let mut run = CeresRun::new(env_cfg, config, seed)?;
    let mut rows = Vec::with_capacity(run.config.iterations);
    for _ in 0..run.config.iterations {
        let row = run.iterate()?;
        observer(&run, &row);
        rows.push(row);
    }
    Ok((run, rows))
}
