//! Clipped-surrogate PPO with a diagonal Gaussian policy and a separate
//! value network.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{clip_grad_norm, Activation, Adam, AdamConfig, Mlp, MlpCheckpoint, NnError};
use crate::vecops::mean;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("non-finite {0} during policy update; update aborted")]
    NonFinite(&'static str),
    #[error("invalid PPO configuration: {0}")]
    Config(String),
    #[error("empty rollout batch")]
    EmptyBatch,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Discount `γ ∈ [0, 1)` and GAE smoothing `λ ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscountConfig {
    pub gamma: f64,
    pub lambda: f64,
}

impl DiscountConfig {
    pub fn new(gamma: f64, lambda: f64) -> Result<Self, PpoError> {
        if !(0.0..1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
            return Err(PpoError::Config(format!("γ = {gamma}, λ = {lambda} out of range")));
        }
        Ok(Self { gamma, lambda })
    }
}

impl Default for DiscountConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub discount: DiscountConfig,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    /// Environment steps collected per iteration.
    pub steps_per_iter: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    pub hidden: Vec<usize>,
    /// Initial log standard deviation in normalized action units.
    pub init_log_std: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            discount: DiscountConfig::default(),
            clip: 0.2,
            epochs: 10,
            minibatch: 64,
            steps_per_iter: 2048,
            entropy_coef: 0.0,
            value_coef: 0.5,
            learning_rate: 3e-4,
            max_grad_norm: 0.5,
            normalize_advantages: true,
            hidden: vec![64, 64],
            init_log_std: -0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        DiscountConfig::new(self.discount.gamma, self.discount.lambda)?;
        if self.epochs == 0 || self.minibatch == 0 || self.steps_per_iter == 0 {
            return Err(PpoError::Config("epochs, minibatch and steps_per_iter must be positive".into()));
        }
        if !(self.clip > 0.0) {
            return Err(PpoError::Config("clip must be positive".into()));
        }
        Ok(())
    }
}

/// `N(scale ⊙ net(s), diag(scale ⊙ exp(log_std))²)`; the mean network works
/// in units normalized by `action_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mean_net: Mlp,
    pub log_std: Vec<f64>,
    pub action_scale: Vec<f64>,
}

const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(
        n_obs: usize,
        hidden: &[usize],
        action_scale: Vec<f64>,
        init_log_std: f64,
        rng: &mut R,
    ) -> Self {
        let n_act = action_scale.len();
        let mut sizes = vec![n_obs];
        sizes.extend_from_slice(hidden);
        sizes.push(n_act);
        Self {
            mean_net: Mlp::new(&sizes, Activation::Tanh, Activation::Identity, 0.01, rng),
            log_std: vec![init_log_std; n_act],
            action_scale,
        }
    }

    pub fn n_act(&self) -> usize {
        self.action_scale.len()
    }

    pub fn mean(&self, state: &[f64]) -> Vec<f64> {
        self.mean_net
            .predict(state)
            .iter()
            .zip(&self.action_scale)
            .map(|(m, s)| m * s)
            .collect()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std
            .iter()
            .zip(&self.action_scale)
            .map(|(l, s)| l.exp() * s)
            .collect()
    }

    fn normalized_log_prob(&self, mean_norm: &[f64], u: &[f64]) -> f64 {
        mean_norm
            .iter()
            .zip(u)
            .zip(&self.log_std)
            .map(|((m, x), ls)| {
                let z = (x - m) / ls.exp();
                -0.5 * z * z - ls - LOG_SQRT_2PI
            })
            .sum()
    }

    fn log_scale(&self) -> f64 {
        self.action_scale.iter().map(|s| s.ln()).sum()
    }

    /// Exact log density of `action` (in action units).
    pub fn log_prob(&self, state: &[f64], action: &[f64]) -> f64 {
        let mu = self.mean_net.predict(state);
        let u: Vec<f64> = action.iter().zip(&self.action_scale).map(|(a, s)| a / s).collect();
        self.normalized_log_prob(&mu, &u) - self.log_scale()
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
        let mu = self.mean_net.predict(state);
        let u: Vec<f64> = mu
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let log_prob = self.normalized_log_prob(&mu, &u) - self.log_scale();
        let action = u.iter().zip(&self.action_scale).map(|(x, s)| x * s).collect();
        (action, log_prob)
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| ls + 0.5 + LOG_SQRT_2PI).sum::<f64>() + self.log_scale()
    }

    pub fn save(&self, path: &Path) -> Result<(), PpoError> {
        let ckpt = PolicyCheckpoint {
            format: POLICY_FORMAT.to_string(),
            version: 1,
            mean_net: self.mean_net.to_checkpoint(),
            log_std: self.log_std.clone(),
            action_scale: self.action_scale.clone(),
        };
        std::fs::write(path, serde_json::to_string(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PpoError> {
        let ckpt: PolicyCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ckpt.format != POLICY_FORMAT || ckpt.version != 1 {
            return Err(PpoError::Config(format!("unsupported policy checkpoint {:?}", ckpt.format)));
        }
        Ok(Self {
            mean_net: Mlp::from_checkpoint(&ckpt.mean_net)?,
            log_std: ckpt.log_std,
            action_scale: ckpt.action_scale,
        })
    }
}

const POLICY_FORMAT: &str = "ceres-gaussian-policy";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyCheckpoint {
    format: String,
    version: u32,
    mean_net: MlpCheckpoint,
    log_std: Vec<f64>,
    action_scale: Vec<f64>,
}

/// One on-policy step. `action` is the raw policy sample, never a
/// corrected action.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub end: bool,
}

/// Steps in collection order; episode boundaries are marked by `end`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBatch {
    pub steps: Vec<Transition>,
    /// Value of the state following the last step, used when that step did
    /// not end its episode.
    pub bootstrap_value: f64,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn extend(&mut self, other: RolloutBatch) {
        if let Some(last) = self.steps.last() {
            debug_assert!(last.end, "only complete segments can be concatenated");
        }
        self.steps.extend(other.steps);
        self.bootstrap_value = other.bootstrap_value;
    }
}

/// Generalized advantage estimation; returns `(advantages, value_targets)`.
pub fn compute_advantages(batch: &RolloutBatch, discount: DiscountConfig) -> (Vec<f64>, Vec<f64>) {
    let n = batch.steps.len();
    let mut advantages = vec![0.0; n];
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let step = &batch.steps[t];
        let next_value = if t + 1 == n {
            batch.bootstrap_value
        } else {
            batch.steps[t + 1].value
        };
        let nonterminal = if step.end { 0.0 } else { 1.0 };
        let delta = step.reward + discount.gamma * next_value * nonterminal - step.value;
        gae = delta + discount.gamma * discount.lambda * nonterminal * gae;
        advantages[t] = gae;
    }
    let targets = advantages
        .iter()
        .zip(&batch.steps)
        .map(|(a, s)| a + s.value)
        .collect();
    (advantages, targets)
}

/// Summary of one [`PpoAgent::update`] call (last epoch for KL and clipping).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Policy, critic and their optimizers.
#[derive(Debug, Clone)]
pub struct PpoAgent {
    pub policy: GaussianPolicy,
    pub value: Mlp,
    pub config: PpoConfig,
    policy_opt: Adam,
    log_std_opt: Adam,
    value_opt: Adam,
}

impl PpoAgent {
    pub fn new<R: Rng + ?Sized>(
        n_obs: usize,
        action_scale: Vec<f64>,
        config: PpoConfig,
        rng: &mut R,
    ) -> Result<Self, PpoError> {
        config.validate()?;
        let policy = GaussianPolicy::new(n_obs, &config.hidden, action_scale, config.init_log_std, rng);
        let mut sizes = vec![n_obs];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(1);
        let value = Mlp::new(&sizes, Activation::Tanh, Activation::Identity, 1.0, rng);
        Ok(Self::from_parts(policy, value, config))
    }

    pub fn from_parts(policy: GaussianPolicy, value: Mlp, config: PpoConfig) -> Self {
        let adam = AdamConfig::with_learning_rate(config.learning_rate);
        Self {
            policy_opt: Adam::new(policy.mean_net.n_params(), adam),
            log_std_opt: Adam::new(policy.log_std.len(), adam),
            value_opt: Adam::new(value.n_params(), adam),
            policy,
            value,
            config,
        }
    }

    pub fn value_of(&self, state: &[f64]) -> f64 {
        self.value.predict(state)[0]
    }

    pub fn act<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> (Vec<f64>, f64, f64) {
        let (action, log_prob) = self.policy.sample_action(state, rng);
        (action, log_prob, self.value_of(state))
    }

    /// Runs `epochs` passes of shuffled minibatches over `batch`.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &RolloutBatch, rng: &mut R) -> Result<UpdateStats, PpoError> {
        if batch.is_empty() {
            return Err(PpoError::EmptyBatch);
        }
        let cfg = self.config.clone();
        let (mut advantages, targets) = compute_advantages(batch, cfg.discount);
        if cfg.normalize_advantages && advantages.len() > 1 {
            let m = mean(&advantages);
            let var = advantages.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / advantages.len() as f64;
            let sd = var.sqrt();
            for a in &mut advantages {
                *a = (*a - m) / (sd + 1e-8);
            }
        }
        let scale = self.policy.action_scale.clone();
        let n_act = scale.len();
        let mut order: Vec<usize> = (0..batch.len()).collect();
        let mut stats = UpdateStats::default();

        for _ in 0..cfg.epochs {
            order.shuffle(rng);
            let (mut kl_sum, mut clipped, mut pl_sum, mut vl_sum) = (0.0, 0usize, 0.0, 0.0);
            for chunk in order.chunks(cfg.minibatch) {
                let m = chunk.len() as f64;
                let mut g_policy = vec![0.0; self.policy.mean_net.n_params()];
                let mut g_log_std = vec![0.0; n_act];
                let mut g_value = vec![0.0; self.value.n_params()];
                let sigma: Vec<f64> = self.policy.log_std.iter().map(|l| l.exp()).collect();
                for &i in chunk {
                    let step = &batch.steps[i];
                    let adv = advantages[i];
                    let (mu, tape) = self.policy.mean_net.forward(&step.state);
                    let u: Vec<f64> = step.action.iter().zip(&scale).map(|(a, s)| a / s).collect();
                    let new_lp = self.policy.normalized_log_prob(&mu, &u) - self.policy.log_scale();
                    let ratio = (new_lp - step.log_prob).exp();
                    let surr1 = ratio * adv;
                    let surr2 = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * adv;
                    pl_sum += -surr1.min(surr2);
                    kl_sum += step.log_prob - new_lp;
                    if (ratio - 1.0).abs() > cfg.clip {
                        clipped += 1;
                    }
                    // d(-min(surr1, surr2))/d log π
                    let dlp = if surr1 <= surr2 { -ratio * adv / m } else { 0.0 };
                    if dlp != 0.0 {
                        let mut d_mu = vec![0.0; n_act];
                        for k in 0..n_act {
                            let z = (u[k] - mu[k]) / sigma[k];
                            d_mu[k] = dlp * z / sigma[k];
                            g_log_std[k] += dlp * (z * z - 1.0);
                        }
                        self.policy.mean_net.backward_accumulate(&tape, &d_mu, &mut g_policy);
                    }
                    let (v, vtape) = self.value.forward(&step.state);
                    let err = v[0] - targets[i];
                    vl_sum += 0.5 * err * err;
                    self.value
                        .backward_accumulate(&vtape, &[cfg.value_coef * 2.0 * err / m], &mut g_value);
                }
                // Entropy bonus: ∂H/∂log_std = 1 per dimension.
                for g in &mut g_log_std {
                    *g -= cfg.entropy_coef;
                }
                if !(pl_sum.is_finite() && vl_sum.is_finite()) {
                    return Err(PpoError::NonFinite("loss"));
                }
                let mut joint: Vec<f64> = g_policy.iter().chain(&g_log_std).copied().collect();
                clip_grad_norm(&mut joint, cfg.max_grad_norm);
                let (gp, gl) = joint.split_at(g_policy.len());
                clip_grad_norm(&mut g_value, cfg.max_grad_norm);
                self.policy_opt
                    .step(self.policy.mean_net.params_mut(), gp)
                    .map_err(|_| PpoError::NonFinite("policy gradient"))?;
                self.log_std_opt
                    .step(&mut self.policy.log_std, gl)
                    .map_err(|_| PpoError::NonFinite("log-std gradient"))?;
                self.value_opt
                    .step(self.value.params_mut(), &g_value)
                    .map_err(|_| PpoError::NonFinite("value gradient"))?;
            }
            let n = batch.len() as f64;
            stats = UpdateStats {
                policy_loss: pl_sum / n,
                value_loss: vl_sum / n,
                entropy: self.policy.entropy(),
                approx_kl: kl_sum / n,
                clip_fraction: clipped as f64 / n,
            };
        }
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn step(reward: f64, value: f64, end: bool) -> Transition {
        Transition {
            state: vec![0.0],
            action: vec![0.0],
            log_prob: 0.0,
            reward,
            value,
            end,
        }
    }

    #[test]
    fn myopic_advantage_is_reward_minus_value() {
        let batch = RolloutBatch {
            steps: vec![step(1.0, 0.3, false), step(-2.0, 0.5, false), step(0.5, -1.0, true)],
            bootstrap_value: 7.0,
        };
        let (adv, targets) = compute_advantages(&batch, DiscountConfig::new(0.0, 0.95).unwrap());
        assert_eq!(adv, vec![0.7, -2.5, 1.5]);
        assert_eq!(targets, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn zero_rewards_and_values_give_zero_advantages() {
        let batch = RolloutBatch {
            steps: (0..5).map(|i| step(0.0, 0.0, i == 2)).collect(),
            bootstrap_value: 0.0,
        };
        let (adv, _) = compute_advantages(&batch, DiscountConfig::default());
        assert!(adv.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn three_step_discounted_returns() {
        let batch = RolloutBatch {
            steps: vec![step(1.0, 0.0, false), step(1.0, 0.0, false), step(1.0, 0.0, true)],
            bootstrap_value: 100.0,
        };
        let (adv, _) = compute_advantages(&batch, DiscountConfig::new(0.9, 1.0).unwrap());
        // Hand-computed: 1 + 0.9 + 0.81, 1 + 0.9, 1.
        let expected = [2.71, 1.9, 1.0];
        for (a, e) in adv.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn advantages_reset_at_episode_ends_and_bootstrap_otherwise() {
        let batch = RolloutBatch {
            steps: vec![step(1.0, 0.0, true), step(1.0, 0.0, false)],
            bootstrap_value: 10.0,
        };
        let (adv, _) = compute_advantages(&batch, DiscountConfig::new(0.5, 1.0).unwrap());
        assert_eq!(adv, vec![1.0, 6.0]);
    }

    #[test]
    fn discount_ranges_are_checked() {
        assert!(DiscountConfig::new(1.0, 0.5).is_err());
        assert!(DiscountConfig::new(0.5, 1.5).is_err());
    }

    #[test]
    fn degenerate_std_samples_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut policy = GaussianPolicy::new(3, &[8], vec![0.1, 0.1], -0.5, &mut rng);
        policy.log_std = vec![-60.0, -60.0];
        let s = [0.2, -0.1, 0.4];
        let (a, lp) = policy.sample_action(&s, &mut rng);
        let mean = policy.mean(&s);
        assert!(a.iter().zip(&mean).all(|(x, m)| (x - m).abs() < 1e-20));
        assert!(lp.is_finite());
    }

    #[test]
    fn sampling_is_seed_reproducible_and_log_prob_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let policy = GaussianPolicy::new(2, &[4], vec![0.1, 0.02], -0.5, &mut rng);
        let s = [0.5, 0.5];
        let a1 = policy.sample_action(&s, &mut ChaCha8Rng::seed_from_u64(7));
        let a2 = policy.sample_action(&s, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a1, a2);
        assert!((policy.log_prob(&s, &a1.0) - a1.1).abs() < 1e-12);
        // Independent density: product of univariate normals.
        let (m, sd) = (policy.mean(&s), policy.std());
        let direct: f64 = (0..2)
            .map(|k| {
                let z = (a1.0[k] - m[k]) / sd[k];
                (-0.5 * z * z).exp() / (sd[k] * (2.0 * PI).sqrt())
            })
            .product::<f64>()
            .ln();
        assert!((direct - a1.1).abs() < 1e-9);
    }

    #[test]
    fn zero_advantages_leave_policy_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config = PpoConfig { epochs: 3, minibatch: 4, ..Default::default() };
        let mut agent = PpoAgent::new(2, vec![0.1, 0.1], config, &mut rng).unwrap();
        // Value equals reward and every step terminates → advantages are zero.
        let steps = (0..8)
            .map(|i| {
                let s = vec![i as f64 * 0.1, -0.2];
                let (a, lp, v) = agent.act(&s, &mut rng);
                Transition { state: s, action: a, log_prob: lp, reward: v, value: v, end: true }
            })
            .collect();
        let before = agent.policy.clone();
        agent.update(&RolloutBatch { steps, bootstrap_value: 0.0 }, &mut rng).unwrap();
        assert_eq!(agent.policy, before);
    }

    #[test]
    fn positive_advantage_direction_pulls_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let config = PpoConfig { epochs: 4, minibatch: 32, normalize_advantages: false, ..Default::default() };
        let mut agent = PpoAgent::new(1, vec![1.0, 1.0], config, &mut rng).unwrap();
        let s = vec![0.3];
        let before = agent.policy.mean(&s);
        for _ in 0..10 {
            let steps = (0..64)
                .map(|_| {
                    let (a, lp, _) = agent.act(&s, &mut rng);
                    // Reward actions with a large first component.
                    Transition { state: s.clone(), reward: a[0], action: a, log_prob: lp, value: 0.0, end: true }
                })
                .collect();
            agent.update(&RolloutBatch { steps, bootstrap_value: 0.0 }, &mut rng).unwrap();
        }
        assert!(agent.policy.mean(&s)[0] > before[0] + 0.05);
    }

    #[test]
    fn policy_checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let policy = GaussianPolicy::new(4, &[6], vec![0.1, 0.1], -1.0, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        policy.save(&path).unwrap();
        assert_eq!(GaussianPolicy::load(&path).unwrap(), policy);
    }
}
