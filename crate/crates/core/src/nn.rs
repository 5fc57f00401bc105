//! Feed-forward networks with hand-written reverse mode and Adam.
//!
//! Parameters live in one flat vector so optimizers and checkpoints can treat
//! them uniformly. Layer `l` stores its `fan_in × fan_out` weight matrix
//! row-major, followed by its bias.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_FORMAT: &str = "ceres-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer {layer}: fan_in {fan_in} does not chain with previous fan_out {expected}")]
    BrokenChain {
        layer: usize,
        fan_in: usize,
        expected: usize,
    },
    #[error("layer {layer}: expected {expected} values, found {found}")]
    ParamCount {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite gradient, step rejected")]
    NonFiniteGradient,
    #[error("unsupported checkpoint {format:?} version {version}")]
    UnsupportedCheckpoint { format: String, version: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output. The relu kink
    /// gets derivative zero.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn n_params(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// Multilayer perceptron parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    shapes: Vec<LayerShape>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

/// Activations cached by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// `values[0]` is the input, `values[l + 1]` the output of layer `l`.
    values: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("tape is never empty")
    }

    pub fn input(&self) -> &[f64] {
        &self.values[0]
    }
}

impl Mlp {
    /// Orthogonally initialised network with zero biases. Hidden layers use
    /// gain `√2`; the output layer uses `output_gain`.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        output_gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut net = Self::zeros(sizes, hidden, output);
        let n_layers = net.shapes.len();
        for l in 0..n_layers {
            let shape = net.shapes[l];
            let gain = if l + 1 == n_layers {
                output_gain
            } else {
                std::f64::consts::SQRT_2
            };
            let w = orthogonal(shape.fan_in, shape.fan_out, gain, rng);
            net.weights_mut(l).copy_from_slice(&w);
        }
        net
    }

    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Self {
        assert!(sizes.len() >= 2, "a network needs input and output sizes");
        let shapes = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| LayerShape {
                fan_in: w[0],
                fan_out: w[1],
                activation: if l + 2 == sizes.len() { output } else { hidden },
            })
            .collect();
        Self::from_shapes(shapes, None).expect("sizes chain by construction")
    }

    pub fn from_shapes(shapes: Vec<LayerShape>, params: Option<Vec<f64>>) -> Result<Self, NnError> {
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut total = 0;
        for (layer, shape) in shapes.iter().enumerate() {
            if layer > 0 && shape.fan_in != shapes[layer - 1].fan_out {
                return Err(NnError::BrokenChain {
                    layer,
                    fan_in: shape.fan_in,
                    expected: shapes[layer - 1].fan_out,
                });
            }
            offsets.push(total);
            total += shape.n_params();
        }
        let params = match params {
            Some(p) if p.len() != total => {
                return Err(NnError::ParamCount {
                    layer: shapes.len(),
                    expected: total,
                    found: p.len(),
                })
            }
            Some(p) => p,
            None => vec![0.0; total],
        };
        Ok(Self {
            shapes,
            offsets,
            params,
        })
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().expect("non-empty").fan_out
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let s = self.shapes[layer];
        let o = self.offsets[layer];
        &self.params[o..o + s.fan_in * s.fan_out]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let s = self.shapes[layer];
        let o = self.offsets[layer];
        &mut self.params[o..o + s.fan_in * s.fan_out]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let s = self.shapes[layer];
        let o = self.offsets[layer] + s.fan_in * s.fan_out;
        &self.params[o..o + s.fan_out]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let s = self.shapes[layer];
        let o = self.offsets[layer] + s.fan_in * s.fan_out;
        &mut self.params[o..o + s.fan_out]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn layer_forward(&self, layer: usize, x: &[f64]) -> Vec<f64> {
        let s = self.shapes[layer];
        let w = self.weights(layer);
        let mut y = self.bias(layer).to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &w[i * s.fan_out..(i + 1) * s.fan_out];
            for (yj, wij) in y.iter_mut().zip(row) {
                *yj += xi * wij;
            }
        }
        for v in &mut y {
            *v = s.activation.apply(*v);
        }
        y
    }

    /// Output only, no tape.
    pub fn predict(&self, input: &[f64]) -> Vec<f64> {
        assert_eq!(input.len(), self.input_dim(), "network input dimension mismatch");
        let mut x = input.to_vec();
        for l in 0..self.shapes.len() {
            x = self.layer_forward(l, &x);
        }
        x
    }

    pub fn forward(&self, input: &[f64]) -> (Vec<f64>, Tape) {
        assert_eq!(input.len(), self.input_dim(), "network input dimension mismatch");
        let mut values = Vec::with_capacity(self.shapes.len() + 1);
        values.push(input.to_vec());
        for l in 0..self.shapes.len() {
            let next = self.layer_forward(l, values.last().expect("non-empty"));
            values.push(next);
        }
        (values.last().expect("non-empty").clone(), Tape { values })
    }

    /// Reverse pass; returns fresh parameter gradients and the input gradient.
    pub fn backward(&self, tape: &Tape, output_grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut grads = vec![0.0; self.params.len()];
        let input_grad = self.backward_accumulate(tape, output_grad, &mut grads);
        (grads, input_grad)
    }

    /// Reverse pass adding parameter gradients into `grads`.
    pub fn backward_accumulate(&self, tape: &Tape, output_grad: &[f64], grads: &mut [f64]) -> Vec<f64> {
        assert_eq!(grads.len(), self.params.len());
        assert_eq!(output_grad.len(), self.output_dim());
        let mut upstream = output_grad.to_vec();
        for l in (0..self.shapes.len()).rev() {
            let s = self.shapes[l];
            let x = &tape.values[l];
            let y = &tape.values[l + 1];
            let dz: Vec<f64> = upstream
                .iter()
                .zip(y)
                .map(|(g, &yj)| g * s.activation.derivative_from_output(yj))
                .collect();
            let o = self.offsets[l];
            let w = self.weights(l);
            let (gw, gb) = grads[o..o + s.n_params()].split_at_mut(s.fan_in * s.fan_out);
            for (gbj, dzj) in gb.iter_mut().zip(&dz) {
                *gbj += dzj;
            }
            let mut dx = vec![0.0; s.fan_in];
            for (i, &xi) in x.iter().enumerate() {
                let wrow = &w[i * s.fan_out..(i + 1) * s.fan_out];
                let grow = &mut gw[i * s.fan_out..(i + 1) * s.fan_out];
                let mut acc = 0.0;
                for ((gij, wij), dzj) in grow.iter_mut().zip(wrow).zip(&dz) {
                    *gij += xi * dzj;
                    acc += wij * dzj;
                }
                dx[i] = acc;
            }
            upstream = dx;
        }
        upstream
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        MlpCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            layers: (0..self.shapes.len())
                .map(|l| LayerRecord {
                    shape: self.shapes[l],
                    weights: self.weights(l).to_vec(),
                    bias: self.bias(l).to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &MlpCheckpoint) -> Result<Self, NnError> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(NnError::UnsupportedCheckpoint {
                format: ckpt.format.clone(),
                version: ckpt.version,
            });
        }
        let mut params = Vec::new();
        for (layer, rec) in ckpt.layers.iter().enumerate() {
            let expected = rec.shape.fan_in * rec.shape.fan_out;
            if rec.weights.len() != expected || rec.bias.len() != rec.shape.fan_out {
                return Err(NnError::ParamCount {
                    layer,
                    expected: expected + rec.shape.fan_out,
                    found: rec.weights.len() + rec.bias.len(),
                });
            }
            params.extend_from_slice(&rec.weights);
            params.extend_from_slice(&rec.bias);
        }
        Self::from_shapes(ckpt.layers.iter().map(|r| r.shape).collect(), Some(params))
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let ckpt: MlpCheckpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::from_checkpoint(&ckpt)
    }
}

/// On-disk network container: layer shapes with flat weight and bias arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub format: String,
    pub version: u32,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    #[serde(flatten)]
    pub shape: LayerShape,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// `fan_in × fan_out` matrix with orthonormal rows or columns, row-major.
fn orthogonal<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (rows, cols) = (fan_in.max(fan_out), fan_in.min(fan_out));
    let g = DMatrix::<f64>::from_fn(rows, cols, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..cols {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    let q = if fan_in >= fan_out { q } else { q.transpose() };
    let mut out = Vec::with_capacity(fan_in * fan_out);
    for i in 0..fan_in {
        for j in 0..fan_out {
            out.push(gain * q[(i, j)]);
        }
    }
    out
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        assert_eq!(params.len(), self.first_moment.len(), "parameter shape mismatch");
        assert_eq!(grads.len(), params.len(), "gradient shape mismatch");
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient);
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Rescales `grads` in place so its L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(seed: u64, sizes: &[usize], hidden: Activation) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::new(sizes, hidden, Activation::Identity, 1.0, &mut rng);
        for b in 0..net.shapes().len() {
            for v in net.bias_mut(b) {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        net
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2], Activation::Tanh, Activation::Identity);
        assert_eq!(net.predict(&[1.0, -2.0, 3.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut net = Mlp::zeros(&[3, 3], Activation::Tanh, Activation::Identity);
        for i in 0..3 {
            net.weights_mut(0)[i * 3 + i] = 1.0;
        }
        assert_eq!(net.predict(&[0.5, -1.5, 2.0]), vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn orthogonal_init_has_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = orthogonal(6, 4, 1.0, &mut rng);
        for a in 0..4 {
            for b in 0..4 {
                let d: f64 = (0..6).map(|i| w[i * 4 + a] * w[i * 4 + b]).sum();
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!((d - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_matches_finite_difference_linearization() {
        let net = random_net(11, &[4, 7, 3], Activation::Tanh);
        let x = [0.3, -0.8, 0.5, 1.1];
        let (y, tape) = net.forward(&x);
        let h = 1e-5;
        for k in 0..3 {
            let mut g = vec![0.0; 3];
            g[k] = 1.0;
            let (_, dx) = net.backward(&tape, &g);
            for i in 0..4 {
                let (mut xp, mut xm) = (x, x);
                xp[i] += h;
                xm[i] -= h;
                let fd = (net.predict(&xp)[k] - net.predict(&xm)[k]) / (2.0 * h);
                assert!((fd - dx[i]).abs() < 1e-8 * (1.0 + fd.abs()));
            }
        }
        assert_eq!(y, net.predict(&x));
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let net = random_net(2, &[3, 4, 2], Activation::Relu);
        let (_, tape) = net.forward(&[0.1, 0.2, 0.3]);
        let (gp, gx) = net.backward(&tape, &[0.0, 0.0]);
        assert!(gp.iter().chain(&gx).all(|&g| g == 0.0));
    }

    #[test]
    fn single_layer_weight_gradient_is_outer_product() {
        let net = random_net(5, &[3, 2], Activation::Tanh);
        let x = [0.4, -1.0, 2.0];
        let g = [0.7, -0.2];
        let (_, tape) = net.forward(&x);
        let (gp, _) = net.backward(&tape, &g);
        for i in 0..3 {
            for j in 0..2 {
                assert!((gp[i * 2 + j] - x[i] * g[j]).abs() < 1e-15);
            }
        }
        assert_eq!(&gp[6..8], &g);
    }

    fn check_param_gradients(hidden: Activation, seed: u64) {
        let net = random_net(seed, &[3, 6, 5, 2], hidden);
        let x = [0.25, -0.6, 0.9];
        let weights = [1.3, -0.4];
        let loss = |n: &Mlp| -> f64 { n.predict(&x).iter().zip(&weights).map(|(y, w)| y * w).sum() };
        let (_, tape) = net.forward(&x);
        // Stay away from relu kinks.
        for layer in &tape.values[1..tape.values.len() - 1] {
            if hidden == Activation::Relu {
                assert!(layer.iter().all(|&v| v == 0.0 || v > 1e-3));
            }
        }
        let (grads, _) = net.backward(&tape, &weights);
        let h = 1e-5;
        for p in 0..net.n_params() {
            let mut plus = net.clone();
            let mut minus = net.clone();
            plus.params_mut()[p] += h;
            minus.params_mut()[p] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let err = (fd - grads[p]).abs() / fd.abs().max(grads[p].abs()).max(1e-6);
            assert!(err < 1e-4, "param {p}: fd {fd} vs analytic {}", grads[p]);
        }
    }

    #[test]
    fn gradient_check_tanh() {
        check_param_gradients(Activation::Tanh, 17);
    }

    #[test]
    fn gradient_check_relu() {
        check_param_gradients(Activation::Relu, 23);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut params = vec![0.5, -1.0];
        let mut adam = Adam::new(2, AdamConfig::default());
        adam.step(&mut params, &[0.0, 0.0]).unwrap();
        assert_eq!(params, vec![0.5, -1.0]);
    }

    #[test]
    fn adam_moves_against_constant_gradient() {
        let mut params = vec![0.0, 0.0];
        let mut adam = Adam::new(2, AdamConfig::default());
        for _ in 0..50 {
            adam.step(&mut params, &[2.0, -0.5]).unwrap();
        }
        assert!(params[0] < 0.0 && params[1] > 0.0);
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        let mut w = vec![0.5, -0.3, 0.2];
        let mut adam = Adam::new(3, AdamConfig::with_learning_rate(1e-3));
        for _ in 0..2000 {
            let g: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
            adam.step(&mut w, &g).unwrap();
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "‖w‖ = {norm}");
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut params = vec![1.0];
        let mut adam = Adam::new(1, AdamConfig::default());
        assert!(matches!(adam.step(&mut params, &[f64::NAN]), Err(NnError::NonFiniteGradient)));
        assert_eq!(params, vec![1.0]);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = random_net(99, &[5, 8, 3], Activation::Tanh);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.save(&path).unwrap();
        let back = Mlp::load(&path).unwrap();
        assert_eq!(net.shapes(), back.shapes());
        assert!(net.params().iter().zip(back.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn broken_chain_is_rejected() {
        let shapes = vec![
            LayerShape { fan_in: 2, fan_out: 3, activation: Activation::Tanh },
            LayerShape { fan_in: 4, fan_out: 1, activation: Activation::Identity },
        ];
        assert!(matches!(Mlp::from_shapes(shapes, None), Err(NnError::BrokenChain { layer: 1, .. })));
    }

    #[test]
    fn clip_grad_norm_caps_length() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}
