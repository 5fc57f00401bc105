//! State-conditioned constraint predictor trained from labeled demonstrations.
//!
//! The network head emits, per constraint, `n_act - 1` spherical angles and
//! one raw offset, followed by `n_act` raw interior-point coordinates. The
//! head is turned into a [`LinearConstraintSet`] by [`geometry::assemble`].
//!
//! The loss of a demonstration is the largest violation margin when it is
//! positive and the smallest satisfaction margin when it is negative, so a
//! batch has zero loss exactly when every demonstration is separated.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    self, assemble, assemble_backward, satisfaction_margin, violation_margin, ActionBox,
    ConstraintSetGrad, LinearConstraintSet,
};
use crate::nn::{Activation, Adam, AdamConfig, Mlp, MlpCheckpoint, NnError};
use crate::vecops::mean;

#[derive(Debug, Error)]
pub enum ConstraintError {
    #[error("training needs both classes: {positives} positives, {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("predicted constraint set broke an invariant during training: {0}")]
    Invariant(#[from] geometry::GeometryError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// A state-action pair with its indicator (`positive` ⇔ δ = 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDemo {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub positive: bool,
}

impl LabeledDemo {
    pub fn new(state: Vec<f64>, action: Vec<f64>, positive: bool) -> Self {
        Self {
            state,
            action,
            positive,
        }
    }

    pub fn indicator(&self) -> u8 {
        u8::from(self.positive)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintTrainConfig {
    pub n_in: usize,
    pub positives_per_batch: usize,
    pub negatives_per_batch: usize,
    pub epochs: usize,
    /// Stop after this many minibatches in one call, whatever the epoch count.
    pub max_batches: Option<usize>,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    /// Verify every predicted set of every minibatch (slow, for tests).
    pub check_invariants: bool,
    /// Evaluate separation accuracy on the whole buffer after each epoch;
    /// `EpochStats::accuracy` is NaN when disabled.
    #[serde(default = "default_true")]
    pub report_accuracy: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ConstraintTrainConfig {
    fn default() -> Self {
        Self {
            n_in: 2,
            positives_per_batch: 32,
            negatives_per_batch: 32,
            epochs: 1,
            max_batches: None,
            learning_rate: 1e-3,
            hidden: vec![64, 64],
            check_invariants: false,
            report_accuracy: true,
        }
    }
}

impl ConstraintTrainConfig {
    pub fn validate(&self) -> Result<(), ConstraintError> {
        if self.positives_per_batch == 0 || self.negatives_per_batch == 0 {
            return Err(ConstraintError::Config(
                "both classes need at least one sample per minibatch".into(),
            ));
        }
        if self.n_in == 0 {
            return Err(ConstraintError::Config("n_in must be positive".into()));
        }
        Ok(())
    }
}

/// The constraint network `N^C` together with the action box it targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintNet {
    mlp: Mlp,
    n_in: usize,
    bounds: ActionBox,
}

impl ConstraintNet {
    pub fn new<R: Rng + ?Sized>(
        n_obs: usize,
        n_in: usize,
        hidden: &[usize],
        bounds: ActionBox,
        rng: &mut R,
    ) -> Self {
        let n_act = bounds.dim();
        assert!(n_act >= 2, "constraint rows need a 2-D or larger action space");
        let mut sizes = vec![n_obs];
        sizes.extend_from_slice(hidden);
        sizes.push(head_dim(n_in, n_act));
        let mlp = Mlp::new(&sizes, Activation::Tanh, Activation::Identity, 1.0, rng);
        Self { mlp, n_in, bounds }
    }

    pub fn from_mlp(mlp: Mlp, n_in: usize, bounds: ActionBox) -> Result<Self, ConstraintError> {
        let expected = head_dim(n_in, bounds.dim());
        if mlp.output_dim() != expected {
            return Err(ConstraintError::Config(format!(
                "network head has {} outputs, expected {expected} for n_in = {n_in}",
                mlp.output_dim()
            )));
        }
        Ok(Self { mlp, n_in, bounds })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_obs(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn bounds(&self) -> &ActionBox {
        &self.bounds
    }

    pub fn save(&self, path: &Path) -> Result<(), ConstraintError> {
        let ckpt = ConstraintNetCheckpoint {
            format: CONSTRAINT_NET_FORMAT.to_string(),
            version: 1,
            n_in: self.n_in,
            lower: self.bounds.lower().to_vec(),
            upper: self.bounds.upper().to_vec(),
            mlp: self.mlp.to_checkpoint(),
        };
        let text = serde_json::to_string(&ckpt).map_err(NnError::from)?;
        std::fs::write(path, text).map_err(NnError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConstraintError> {
        let text = std::fs::read_to_string(path).map_err(NnError::from)?;
        let ckpt: ConstraintNetCheckpoint = serde_json::from_str(&text).map_err(NnError::from)?;
        if ckpt.format != CONSTRAINT_NET_FORMAT || ckpt.version != 1 {
            return Err(ConstraintError::Config(format!(
                "unsupported constraint checkpoint {:?} version {}",
                ckpt.format, ckpt.version
            )));
        }
        let bounds = ActionBox::new(ckpt.lower, ckpt.upper)?;
        Self::from_mlp(Mlp::from_checkpoint(&ckpt.mlp)?, ckpt.n_in, bounds)
    }

    fn split<'a>(&self, head: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let n_ang = self.n_in * (self.bounds.dim() - 1);
        let (angles, rest) = head.split_at(n_ang);
        let (offsets, interior) = rest.split_at(self.n_in);
        (angles, offsets, interior)
    }

    /// `(A^s, b^s) = N^C(s)`.
    pub fn predict(&self, state: &[f64]) -> LinearConstraintSet {
        let head = self.mlp.predict(state);
        let (angles, offsets, interior) = self.split(&head);
        assemble(angles, offsets, interior, &self.bounds)
    }

    /// Loss of one demonstration; adds `scale · ∂loss/∂params` into `grads`.
    pub fn loss_and_grad(&self, demo: &LabeledDemo, scale: f64, grads: &mut [f64]) -> f64 {
        let (head, tape) = self.mlp.forward(&demo.state);
        let (angles, offsets, interior) = self.split(&head);
        let set = assemble(angles, offsets, interior, &self.bounds);
        let (loss, set_grad) = constraint_loss_grad(&set, demo);
        if loss == 0.0 {
            return 0.0;
        }
        let raw = assemble_backward(angles, offsets, interior, &self.bounds, &set_grad);
        let head_grad: Vec<f64> = raw
            .angles
            .iter()
            .chain(&raw.offsets)
            .chain(&raw.interior)
            .map(|g| g * scale)
            .collect();
        self.mlp.backward_accumulate(&tape, &head_grad, grads);
        loss
    }

    /// Demonstration separated by the predicted constraints.
    pub fn separates(&self, demo: &LabeledDemo) -> bool {
        is_separated(&self.predict(&demo.state), demo)
    }
}

/// Head width for `n_in` constraints in an `n_act`-dimensional action space.
pub fn head_dim(n_in: usize, n_act: usize) -> usize {
    n_in * (n_act - 1) + n_in + n_act
}

/// Index of the largest value, ties going to the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `δ · max_i relu(g_i) + (1 - δ) · min_i relu(-g_i)`.
pub fn constraint_loss(set: &LinearConstraintSet, demo: &LabeledDemo) -> f64 {
    let g = set.constraint_values(&demo.action);
    if g.is_empty() {
        return 0.0;
    }
    if demo.positive {
        g.iter().map(|&v| violation_margin(v)).fold(0.0, f64::max)
    } else {
        g.iter()
            .map(|&v| satisfaction_margin(v))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Loss and its gradient with respect to `(A, b)`.
///
/// The max/min routes the gradient to the lowest-index extremal constraint;
/// at a relu kink the gradient is zero.
pub fn constraint_loss_grad(
    set: &LinearConstraintSet,
    demo: &LabeledDemo,
) -> (f64, ConstraintSetGrad) {
    let n_in = set.n_constraints();
    let mut grad = ConstraintSetGrad::zeros(n_in, demo.action.len());
    if n_in == 0 {
        return (0.0, grad);
    }
    let g = set.constraint_values(&demo.action);
    let (loss, k, dg) = if demo.positive {
        let margins: Vec<f64> = g.iter().map(|&v| violation_margin(v)).collect();
        let k = argmax(&margins);
        (margins[k], k, if g[k] > 0.0 { 1.0 } else { 0.0 })
    } else {
        let neg: Vec<f64> = g.iter().map(|&v| -satisfaction_margin(v)).collect();
        let k = argmax(&neg);
        (-neg[k], k, if g[k] < 0.0 { -1.0 } else { 0.0 })
    };
    if dg != 0.0 {
        for (r, a) in grad.rows[k].iter_mut().zip(&demo.action) {
            *r = dg * a;
        }
        grad.offsets[k] = -dg;
    }
    (loss, grad)
}

/// Positive: every `g_i <= 0`. Negative: some `g_i >= 0`.
pub fn is_separated(set: &LinearConstraintSet, demo: &LabeledDemo) -> bool {
    let g = set.constraint_values(&demo.action);
    if demo.positive {
        g.iter().all(|&v| v <= 0.0)
    } else {
        g.iter().any(|&v| v >= 0.0)
    }
}

/// Fraction of demonstrations separated by the predicted constraints.
pub fn separation_accuracy(net: &ConstraintNet, demos: &[LabeledDemo]) -> f64 {
    assert!(!demos.is_empty(), "separation accuracy of an empty demonstration set");
    let hits = demos.iter().filter(|d| net.separates(d)).count();
    hits as f64 / demos.len() as f64
}

/// Mean loss of `demos` under `net`.
pub fn mean_loss(net: &ConstraintNet, demos: &[LabeledDemo]) -> f64 {
    let losses: Vec<f64> = demos
        .iter()
        .map(|d| constraint_loss(&net.predict(&d.state), d))
        .collect();
    mean(&losses)
}

const CONSTRAINT_NET_FORMAT: &str = "ceres-constraint-net";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConstraintNetCheckpoint {
    format: String,
    version: u32,
    n_in: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    mlp: MlpCheckpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub batches: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// Constraint network with its optimizer state and sampling stream.
#[derive(Debug, Clone)]
pub struct ConstraintTrainer {
    pub net: ConstraintNet,
    pub config: ConstraintTrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    epochs_done: usize,
}

impl ConstraintTrainer {
    pub fn new(net: ConstraintNet, config: ConstraintTrainConfig, rng: ChaCha8Rng) -> Self {
        let adam = Adam::new(
            net.mlp().n_params(),
            AdamConfig::with_learning_rate(config.learning_rate),
        );
        Self {
            net,
            config,
            adam,
            rng,
            epochs_done: 0,
        }
    }

    pub fn into_net(self) -> ConstraintNet {
        self.net
    }

    /// Runs `config.epochs` epochs (or up to `config.max_batches` minibatches).
    ///
    /// Each epoch visits every negative exactly once in a fresh permutation;
    /// each minibatch pairs a chunk of negatives with positives drawn
    /// uniformly with replacement.
    pub fn train(&mut self, buffer: &[LabeledDemo]) -> Result<Vec<EpochStats>, ConstraintError> {
        self.config.validate()?;
        let positives: Vec<&LabeledDemo> = buffer.iter().filter(|d| d.positive).collect();
        let negatives: Vec<&LabeledDemo> = buffer.iter().filter(|d| !d.positive).collect();
        if positives.is_empty() || negatives.is_empty() {
            return Err(ConstraintError::SingleClass {
                positives: positives.len(),
                negatives: negatives.len(),
            });
        }
        if self.config.n_in != self.net.n_in() {
            return Err(ConstraintError::Config(format!(
                "config n_in {} differs from network n_in {}",
                self.config.n_in,
                self.net.n_in()
            )));
        }

        let mut history = Vec::new();
        let mut batches_left = self.config.max_batches.unwrap_or(usize::MAX);
        let mut grads = vec![0.0; self.net.mlp().n_params()];
        let mut order: Vec<usize> = (0..negatives.len()).collect();
        for _ in 0..self.config.epochs {
            if batches_left == 0 {
                break;
            }
            order.shuffle(&mut self.rng);
            let mut losses = Vec::new();
            for chunk in order.chunks(self.config.negatives_per_batch) {
                if batches_left == 0 {
                    break;
                }
                batches_left -= 1;
                let batch: Vec<&LabeledDemo> = chunk
                    .iter()
                    .map(|&i| negatives[i])
                    .chain((0..self.config.positives_per_batch).map(|_| {
                        positives[self.rng.gen_range(0..positives.len())]
                    }))
                    .collect();
                if self.config.check_invariants {
                    for d in &batch {
                        self.net.predict(&d.state).check_invariants(self.net.bounds())?;
                    }
                }
                grads.iter_mut().for_each(|g| *g = 0.0);
                let scale = 1.0 / batch.len() as f64;
                let loss: f64 = batch
                    .iter()
                    .map(|d| self.net.loss_and_grad(d, scale, &mut grads))
                    .sum::<f64>()
                    * scale;
                self.adam.step(self.net.mlp_mut().params_mut(), &grads)?;
                losses.push(loss);
            }
            self.epochs_done += 1;
            history.push(EpochStats {
                epoch: self.epochs_done,
                batches: losses.len(),
                mean_loss: mean(&losses),
                accuracy: if self.config.report_accuracy {
                    separation_accuracy(&self.net, buffer)
                } else {
                    f64::NAN
                },
            });
        }
        Ok(history)
    }
}

/// Convenience wrapper: trains a copy of `net` and returns it with its history.
pub fn train_constraints(
    net: ConstraintNet,
    buffer: &[LabeledDemo],
    config: ConstraintTrainConfig,
    rng: ChaCha8Rng,
) -> Result<(ConstraintNet, Vec<EpochStats>), ConstraintError> {
    let mut trainer = ConstraintTrainer::new(net, config, rng);
    let history = trainer.train(buffer)?;
    Ok((trainer.into_net(), history))
}

/// Ground-truth separable data: a fixed random network maps states to
/// constraint sets and uniformly drawn actions are labeled by them.
pub mod synthetic {
    use super::*;

    #[derive(Debug, Clone)]
    pub struct GroundTruth {
        pub net: ConstraintNet,
    }

    impl GroundTruth {
        /// Smooth teacher: one hidden tanh layer with modest weights.
        pub fn new<R: Rng + ?Sized>(n_obs: usize, n_in: usize, bounds: ActionBox, rng: &mut R) -> Self {
            let n_act = bounds.dim();
            let sizes = [n_obs, 16, head_dim(n_in, n_act)];
            let mut mlp = Mlp::new(&sizes, Activation::Tanh, Activation::Identity, 1.0, rng);
            for p in mlp.params_mut() {
                *p *= 0.7;
            }
            let net = ConstraintNet::from_mlp(mlp, n_in, bounds).expect("head sized above");
            Self { net }
        }

        pub fn label(&self, state: Vec<f64>, action: Vec<f64>) -> LabeledDemo {
            let positive = self.net.predict(&state).is_satisfied(&action, 0.0);
            LabeledDemo::new(state, action, positive)
        }

        /// `count` demos with states uniform in `[-1, 1]^n_obs` and actions
        /// uniform in the action box.
        pub fn generate<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<LabeledDemo> {
            let n_obs = self.net.n_obs();
            let bounds = self.net.bounds().clone();
            (0..count)
                .map(|_| {
                    let state = (0..n_obs).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let action = bounds
                        .lower()
                        .iter()
                        .zip(bounds.upper())
                        .map(|(&lo, &hi)| rng.gen_range(lo..hi))
                        .collect();
                    self.label(state, action)
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn fixed_set(g_targets: &[f64]) -> (LinearConstraintSet, Vec<f64>) {
        // Rows along the axes of R^n, action at the origin: g_i = -b_i.
        let n = g_targets.len();
        let rows = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let offsets = g_targets.iter().map(|g| -g).collect();
        (LinearConstraintSet::from_rows_offsets(rows, offsets), vec![0.0; n])
    }

    #[test]
    fn loss_examples() {
        let (set, a) = fixed_set(&[-0.1, -0.3]);
        assert_eq!(constraint_loss(&set, &LabeledDemo::new(vec![], a.clone(), true)), 0.0);
        let (set, a) = fixed_set(&[0.05, -0.3]);
        assert_eq!(constraint_loss(&set, &LabeledDemo::new(vec![], a.clone(), false)), 0.0);
        let (set, a) = fixed_set(&[0.2, -0.1]);
        let demo = LabeledDemo::new(vec![], a, true);
        assert!((constraint_loss(&set, &demo) - 0.2).abs() < 1e-15);
        let (loss, grad) = constraint_loss_grad(&set, &demo);
        assert!((loss - 0.2).abs() < 1e-15);
        assert_eq!(grad.offsets, vec![-1.0, 0.0]);
    }

    #[test]
    fn negative_loss_is_smallest_satisfaction() {
        let (set, a) = fixed_set(&[-0.4, -0.1, -0.25]);
        let demo = LabeledDemo::new(vec![], a, false);
        assert!((constraint_loss(&set, &demo) - 0.1).abs() < 1e-15);
        let (_, grad) = constraint_loss_grad(&set, &demo);
        assert_eq!(grad.offsets, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn ties_route_to_lowest_index() {
        let (set, a) = fixed_set(&[0.3, 0.3]);
        let (_, grad) = constraint_loss_grad(&set, &LabeledDemo::new(vec![], a, true));
        assert_eq!(grad.offsets, vec![-1.0, 0.0]);
    }

    fn toy_net(seed: u64) -> ConstraintNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConstraintNet::new(3, 2, &[8, 8], ActionBox::symmetric(0.1, 2), &mut rng)
    }

    #[test]
    fn untrained_prediction_contains_interior_point() {
        let net = toy_net(1);
        for s in [[0.0, 0.0, 0.0], [1.0, -0.5, 0.2], [-3.0, 2.0, 9.0]] {
            let set = net.predict(&s);
            set.check_invariants(net.bounds()).unwrap();
            assert!(-set.max_value(set.interior_point()) >= 0.01 * (1.0 - 1e-12));
            assert_eq!(set, net.predict(&s));
        }
    }

    #[test]
    fn accuracy_counts() {
        let net = toy_net(4);
        let s = vec![0.1, 0.2, 0.3];
        let set = net.predict(&s);
        let inside = set.interior_point().to_vec();
        // Far outside along the first row.
        let outside: Vec<f64> = set.rows()[0].iter().zip(&inside).map(|(r, p)| p + 0.5 * r).collect();
        let demos = vec![
            LabeledDemo::new(s.clone(), inside.clone(), true),
            LabeledDemo::new(s.clone(), inside.clone(), true),
            LabeledDemo::new(s.clone(), outside.clone(), false),
            LabeledDemo::new(s.clone(), outside.clone(), true),
        ];
        assert_eq!(separation_accuracy(&net, &demos[..3]), 1.0);
        assert_eq!(separation_accuracy(&net, &demos), 0.75);
    }

    #[test]
    #[should_panic]
    fn accuracy_of_empty_set_panics() {
        separation_accuracy(&toy_net(0), &[]);
    }

    #[test]
    fn single_class_buffer_is_refused() {
        let net = toy_net(2);
        let demos = vec![LabeledDemo::new(vec![0.0; 3], vec![0.0, 0.0], true)];
        let err = train_constraints(net, &demos, ConstraintTrainConfig::default(), ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(ConstraintError::SingleClass { positives: 1, negatives: 0 })));
    }

    #[test]
    fn epoch_covers_each_negative_once() {
        // 70 negatives in chunks of 32 → 3 minibatches per epoch.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth = synthetic::GroundTruth::new(3, 2, ActionBox::symmetric(0.1, 2), &mut rng);
        let mut demos: Vec<LabeledDemo> = truth.generate(2000, &mut rng);
        let negatives: Vec<LabeledDemo> = demos.iter().filter(|d| !d.positive).take(70).cloned().collect();
        demos.retain(|d| d.positive);
        demos.extend(negatives);
        let config = ConstraintTrainConfig { epochs: 2, hidden: vec![8], ..Default::default() };
        let net = ConstraintNet::new(3, 2, &[8], ActionBox::symmetric(0.1, 2), &mut rng);
        let (_, history) = train_constraints(net, &demos, config, ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(history.len(), 2);
        assert!(history.iter().all(|h| h.batches == 3));
    }

    #[test]
    fn max_batches_caps_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = synthetic::GroundTruth::new(3, 2, ActionBox::symmetric(0.1, 2), &mut rng);
        let demos = truth.generate(3000, &mut rng);
        let config = ConstraintTrainConfig { epochs: 10, max_batches: Some(5), ..Default::default() };
        let net = ConstraintNet::new(3, 2, &[8], ActionBox::symmetric(0.1, 2), &mut rng);
        let (_, history) = train_constraints(net, &demos, config, ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(history.iter().map(|h| h.batches).sum::<usize>(), 5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let net = ConstraintNet::new(5, 3, &[8], ActionBox::symmetric(0.1, 2), &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        net.save(&path).unwrap();
        assert_eq!(ConstraintNet::load(&path).unwrap(), net);
    }
}
