//! Small trainable feedforward network with exact, checkable gradients,
//! per-layer learning-rate multipliers, and layer freezing.
//!
//! Everything is double precision and the arithmetic order is fixed, which is
//! what makes the latent-replay/native-rehearsal bitwise-equivalence tests
//! possible. Gradients are hand-derived; the finite-difference oracle lives
//! in [`crate::oracle`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Rectifier,
    Identity,
}

/// Shape and training policy of one dense layer. `lr_multiplier` of 0 freezes
/// the layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub lr_multiplier: f64,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec {
            in_dim,
            out_dim,
            activation,
            lr_multiplier: 1.0,
        }
    }
}

/// One dense layer: row-major weights (`out_dim` rows of `in_dim`) plus bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Feedforward stack of dense layers (the shared weights a head sits on).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub rng_seed: u64,
}

/// Per-layer activations of one forward pass. `values[0]` is the input (or
/// the injected latent for a partial pass) and the final entry is the output.
/// `start_tap` names the record position of `values[0]`: 0 for a full pass,
/// `p` when the pass was started from latent input at tap `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub start_tap: usize,
    pub values: Vec<Vec<f64>>,
}

impl ActivationRecord {
    /// Activation at record position `tap` (0 = network input, `i` = output
    /// of layer `i-1`).
    pub fn tap(&self, tap: usize) -> Result<&[f64]> {
        if tap < self.start_tap || tap - self.start_tap >= self.values.len() {
            return Err(Error::invalid(format!(
                "tap {tap} outside record range [{}, {})",
                self.start_tap,
                self.start_tap + self.values.len()
            )));
        }
        Ok(&self.values[tap - self.start_tap])
    }

    /// Final entry: the logits for a record that reaches the last layer.
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("record is never empty")
    }
}

/// Parameter-shaped container used for gradients, update deltas and synaptic
/// importance accumulators. Layout mirrors [`Network::layers`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamSet {
    pub fn zeros_like(net: &Network) -> Self {
        ParamSet {
            layers: net
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.len() == b.weights.len() && a.bias.len() == b.bias.len()
            })
    }

    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn is_finite(&self) -> bool {
        self.iter_values().all(|v| v.is_finite())
    }

    /// self += scale * other, elementwise.
    pub fn axpy(&mut self, scale: f64, other: &ParamSet) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::invalid("parameter set shape mismatch"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            for v in &mut l.weights {
                *v *= factor;
            }
            for v in &mut l.bias {
                *v *= factor;
            }
        }
    }
}

impl Network {
    /// Build a network with seeded Gaussian init: mean 0, std sqrt(2/in_dim),
    /// zero bias.
    pub fn new(specs: Vec<LayerSpec>, rng_seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (i, s) in specs.iter().enumerate() {
            if s.in_dim < 1 || s.out_dim < 1 {
                return Err(Error::invalid(format!("layer {i}: dims must be >= 1")));
            }
            if !s.lr_multiplier.is_finite() || s.lr_multiplier < 0.0 {
                return Err(Error::invalid(format!(
                    "layer {i}: lr_multiplier must be >= 0"
                )));
            }
            if i > 0 && specs[i - 1].out_dim != s.in_dim {
                return Err(Error::invalid(format!(
                    "layer {i}: in_dim {} does not match previous out_dim {}",
                    s.in_dim,
                    specs[i - 1].out_dim
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let layers = specs
            .into_iter()
            .map(|spec| {
                let std = (2.0 / spec.in_dim as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let weights = (0..spec.in_dim * spec.out_dim)
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                let bias = vec![0.0; spec.out_dim];
                Layer {
                    spec,
                    weights,
                    bias,
                }
            })
            .collect();
        Ok(Network { layers, rng_seed })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").spec.out_dim
    }

    /// Dimensionality of the activation at record position `tap`.
    pub fn tap_dim(&self, tap: usize) -> Result<usize> {
        if tap > self.depth() {
            return Err(Error::invalid(format!(
                "tap {tap} out of range for depth {}",
                self.depth()
            )));
        }
        Ok(if tap == 0 {
            self.input_dim()
        } else {
            self.layers[tap - 1].spec.out_dim
        })
    }

    /// Snapshot of all parameters (for SI reference points).
    pub fn params(&self) -> ParamSet {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: l.weights.clone(),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
    }

    /// Set every layer's lr multiplier (freeze with 0).
    pub fn set_lr_multipliers(&mut self, multipliers: &[f64]) -> Result<()> {
        if multipliers.len() != self.depth() {
            return Err(Error::invalid("one multiplier per layer required"));
        }
        for (l, &m) in self.layers.iter_mut().zip(multipliers) {
            if !m.is_finite() || m < 0.0 {
                return Err(Error::invalid("lr_multiplier must be >= 0"));
            }
            l.spec.lr_multiplier = m;
        }
        Ok(())
    }

    fn apply_layer(layer: &Layer, input: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(layer.spec.out_dim);
        for row in 0..layer.spec.out_dim {
            let mut acc = layer.bias[row];
            let base = row * layer.spec.in_dim;
            for (j, &v) in input.iter().enumerate() {
                acc += layer.weights[base + j] * v;
            }
            out.push(match layer.spec.activation {
                Activation::Rectifier => acc.max(0.0),
                Activation::Identity => acc,
            });
        }
        out
    }

    /// Full forward pass; the record holds the input and every layer output.
    pub fn forward(&self, x: &[f64]) -> Result<ActivationRecord> {
        self.forward_from(0, x)
    }

    /// Forward pass starting from an activation injected at record position
    /// `tap` (0 = raw input). Computes only the layers above the tap.
    pub fn forward_from(&self, tap: usize, latent: &[f64]) -> Result<ActivationRecord> {
        if tap > self.depth() {
            return Err(Error::invalid(format!(
                "tap {tap} out of range for depth {}",
                self.depth()
            )));
        }
        let expect = self.tap_dim(tap)?;
        if latent.len() != expect {
            return Err(Error::invalid(format!(
                "input dim {} does not match tap {tap} dim {expect}",
                latent.len()
            )));
        }
        let mut values = Vec::with_capacity(self.depth() - tap + 1);
        values.push(latent.to_vec());
        for layer in &self.layers[tap..] {
            let next = Self::apply_layer(layer, values.last().expect("non-empty"));
            values.push(next);
        }
        Ok(ActivationRecord {
            start_tap: tap,
            values,
        })
    }

    /// Backpropagate `dout` (gradient w.r.t. the record's final entry) through
    /// the layers the record covers. Gradients for layers below `stop_below`
    /// (or below the record's start tap) are zero.
    pub fn backward(
        &self,
        record: &ActivationRecord,
        dout: &[f64],
        stop_below: usize,
    ) -> Result<ParamSet> {
        let top = record.start_tap + record.values.len() - 1;
        if top != self.depth() {
            return Err(Error::invalid(
                "activation record does not reach the final layer",
            ));
        }
        if dout.len() != self.output_dim() {
            return Err(Error::invalid("dout dim does not match output dim"));
        }
        for (i, v) in record.values.iter().enumerate() {
            let expect = self.tap_dim(record.start_tap + i)?;
            if v.len() != expect {
                return Err(Error::invalid("activation record shape mismatch"));
            }
        }

        let mut grads = ParamSet::zeros_like(self);
        let lowest = stop_below.max(record.start_tap);
        let mut delta = dout.to_vec();
        for li in (lowest..self.depth()).rev() {
            let layer = &self.layers[li];
            let out = record.tap(li + 1)?;
            let input = record.tap(li)?;
            // d(loss)/d(pre-activation)
            for (d, &o) in delta.iter_mut().zip(out) {
                if layer.spec.activation == Activation::Rectifier && o <= 0.0 {
                    *d = 0.0;
                }
            }
            let lp = &mut grads.layers[li];
            for (row, &d) in delta.iter().enumerate() {
                let base = row * layer.spec.in_dim;
                lp.bias[row] += d;
                for (j, &v) in input.iter().enumerate() {
                    lp.weights[base + j] += d * v;
                }
            }
            if li > lowest {
                let mut next_delta = vec![0.0; layer.spec.in_dim];
                for (row, &d) in delta.iter().enumerate() {
                    let base = row * layer.spec.in_dim;
                    for (j, nd) in next_delta.iter_mut().enumerate() {
                        *nd += layer.weights[base + j] * d;
                    }
                }
                delta = next_delta;
            }
        }
        Ok(grads)
    }

    /// One SGD update: p -= lr * lr_multiplier * grad. Returns the applied
    /// per-parameter deltas (for SI path integrals).
    pub fn sgd_step(&mut self, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::invalid("lr must be >= 0"));
        }
        if !self.same_shape(grads) {
            return Err(Error::invalid("gradient shape mismatch"));
        }
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient in sgd_step".into()));
        }
        let mut deltas = ParamSet::zeros_like(self);
        for ((layer, g), d) in self
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut deltas.layers)
        {
            let step = lr * layer.spec.lr_multiplier;
            for ((p, &gv), dv) in layer.weights.iter_mut().zip(&g.weights).zip(&mut d.weights) {
                let delta = -step * gv;
                *p += delta;
                *dv = delta;
            }
            for ((p, &gv), dv) in layer.bias.iter_mut().zip(&g.bias).zip(&mut d.bias) {
                let delta = -step * gv;
                *p += delta;
                *dv = delta;
            }
        }
        Ok(deltas)
    }

    fn same_shape(&self, params: &ParamSet) -> bool {
        self.layers.len() == params.layers.len()
            && self.layers.iter().zip(&params.layers).all(|(l, p)| {
                l.weights.len() == p.weights.len() && l.bias.len() == p.bias.len()
            })
    }
}

/// Numerically stable softmax cross-entropy: returns the loss and the
/// gradient w.r.t. the logits (softmax minus one-hot).
pub fn softmax_xent(logits: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    if y >= logits.len() {
        return Err(Error::invalid(format!(
            "class {y} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    let loss = -(logits[y] - max - sum.ln());
    let mut dlogits: Vec<f64> = exp.iter().map(|&e| e / sum).collect();
    dlogits[y] -= 1.0;
    Ok((loss, dlogits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn identity_layer(dim: usize) -> Network {
        let mut net = Network::new(
            vec![LayerSpec::new(dim, dim, Activation::Identity)],
            0,
        )
        .unwrap();
        for (i, w) in net.layers[0].weights.iter_mut().enumerate() {
            *w = if i % (dim + 1) == 0 { 1.0 } else { 0.0 };
        }
        net
    }

    #[test]
    fn identity_forward_returns_input() {
        let net = identity_layer(3);
        let rec = net.forward(&[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(rec.values.len(), 2);
        assert_eq!(rec.output(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut net = Network::new(vec![LayerSpec::new(4, 3, Activation::Identity)], 1).unwrap();
        net.layers[0].weights.iter_mut().for_each(|w| *w = 0.0);
        let rec = net.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(rec.output(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rectifier_clamps_negative_preactivations() {
        let mut net = Network::new(vec![LayerSpec::new(2, 2, Activation::Rectifier)], 2).unwrap();
        net.layers[0].weights.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        net.layers[0].bias.copy_from_slice(&[0.0, 0.0]);
        let rec = net.forward(&[-1.0, 2.0]).unwrap();
        assert_eq!(rec.output(), &[0.0, 2.0]);
    }

    #[test]
    fn forward_rejects_dim_mismatch() {
        let net = identity_layer(3);
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }

    fn random_net(rng: &mut impl Rng, depth: usize) -> (Network, Vec<f64>) {
        let mut dims = vec![rng.random_range(2..6)];
        for _ in 0..depth {
            dims.push(rng.random_range(2..6));
        }
        let specs: Vec<LayerSpec> = (0..depth)
            .map(|i| {
                let act = if i + 1 == depth {
                    Activation::Identity
                } else {
                    Activation::Rectifier
                };
                LayerSpec::new(dims[i], dims[i + 1], act)
            })
            .collect();
        let net = Network::new(specs, rng.random()).unwrap();
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        (net, x)
    }

    #[test]
    fn forward_from_prefix_reproduces_full_forward_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (net, x) = random_net(&mut rng, 3);
            let full = net.forward(&x).unwrap();
            for tap in 0..=net.depth() {
                let suffix = net.forward_from(tap, full.tap(tap).unwrap()).unwrap();
                for (i, v) in suffix.values.iter().enumerate() {
                    let expect = full.tap(tap + i).unwrap();
                    assert_eq!(v.as_slice(), expect, "tap {tap}, offset {i}");
                }
            }
        }
    }

    #[test]
    fn forward_from_last_hidden_returns_logits_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (net, x) = random_net(&mut rng, 2);
        let full = net.forward(&x).unwrap();
        let tap = net.depth() - 1;
        let suffix = net.forward_from(tap, full.tap(tap).unwrap()).unwrap();
        assert_eq!(suffix.values.len(), 2);
        assert_eq!(suffix.output(), full.output());
    }

    #[test]
    fn softmax_xent_uniform_logits() {
        let k = 5;
        let (loss, dlogits) = softmax_xent(&vec![0.7; k], 2).unwrap();
        assert!((loss - (k as f64).ln()).abs() < 1e-12);
        assert!((dlogits[2] - (1.0 / k as f64 - 1.0)).abs() < 1e-12);
        assert!((dlogits[0] - 1.0 / k as f64).abs() < 1e-12);
    }

    #[test]
    fn softmax_xent_confident_correct_prediction_has_near_zero_loss() {
        let (loss, _) = softmax_xent(&[500.0, -3.0], 0).unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
        let (loss_big, _) = softmax_xent(&[1e300, 0.0], 0).unwrap();
        assert!(loss_big.is_finite());
    }

    #[test]
    fn softmax_xent_rejects_out_of_range_class() {
        assert!(softmax_xent(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn softmax_xent_dlogits_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y = rng.random_range(0..4);
            let (_, dlogits) = softmax_xent(&logits, y).unwrap();
            let h = 1e-6;
            for i in 0..4 {
                let mut plus = logits.clone();
                plus[i] += h;
                let mut minus = logits.clone();
                minus[i] -= h;
                let numeric = (softmax_xent(&plus, y).unwrap().0
                    - softmax_xent(&minus, y).unwrap().0)
                    / (2.0 * h);
                let rel = crate::oracle::relative_error(dlogits[i], numeric);
                assert!(rel < 1e-6, "component {i}: rel err {rel}");
            }
        }
    }

    #[test]
    fn stop_below_depth_minus_one_leaves_only_final_layer_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (net, x) = random_net(&mut rng, 3);
        let rec = net.forward(&x).unwrap();
        let (_, dlogits) = softmax_xent(rec.output(), 0).unwrap();
        let grads = net.backward(&rec, &dlogits, net.depth() - 1).unwrap();
        for li in 0..net.depth() - 1 {
            assert!(grads.layers[li].weights.iter().all(|&g| g == 0.0));
            assert!(grads.layers[li].bias.iter().all(|&g| g == 0.0));
        }
        assert!(grads.layers[net.depth() - 1]
            .weights
            .iter()
            .any(|&g| g != 0.0));
    }

    #[test]
    fn stop_below_zero_matches_full_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (net, x) = random_net(&mut rng, 2);
        let rec = net.forward(&x).unwrap();
        let (_, dlogits) = softmax_xent(rec.output(), 1).unwrap();
        let a = net.backward(&rec, &dlogits, 0).unwrap();
        let b = net.backward(&rec, &dlogits, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        while checked < 30 {
            let depth = rng.random_range(1..4);
            let (net, x) = random_net(&mut rng, depth);
            if crate::oracle::rectifier_margin(&net, &x).unwrap() < 1e-3 {
                continue; // finite differences are invalid at a rectifier kink
            }
            let y = rng.random_range(0..net.output_dim());
            let max_err = crate::oracle::max_network_gradient_error(&net, &x, y, 1e-5).unwrap();
            assert!(max_err < 1e-4, "trial {checked}: rel err {max_err}");
            checked += 1;
        }
    }

    #[test]
    fn frozen_layers_are_bit_identical_after_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (mut net, x) = random_net(&mut rng, 3);
        net.layers[0].spec.lr_multiplier = 0.0;
        let before = net.layers[0].clone();
        for _ in 0..25 {
            let rec = net.forward(&x).unwrap();
            let (_, dlogits) = softmax_xent(rec.output(), 0).unwrap();
            let grads = net.backward(&rec, &dlogits, 0).unwrap();
            net.sgd_step(&grads, 0.1).unwrap();
        }
        assert_eq!(net.layers[0], before);
    }

    #[test]
    fn zero_lr_leaves_network_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut net, x) = random_net(&mut rng, 2);
        let before = net.clone();
        let rec = net.forward(&x).unwrap();
        let (_, dlogits) = softmax_xent(rec.output(), 0).unwrap();
        let grads = net.backward(&rec, &dlogits, 0).unwrap();
        net.sgd_step(&grads, 0.0).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn scalar_sgd_step_is_exact() {
        let mut net = Network::new(vec![LayerSpec::new(1, 1, Activation::Identity)], 3).unwrap();
        net.layers[0].weights[0] = 2.0;
        net.layers[0].bias[0] = 0.0;
        let mut grads = ParamSet::zeros_like(&net);
        grads.layers[0].weights[0] = 0.5;
        let deltas = net.sgd_step(&grads, 0.2).unwrap();
        assert_eq!(net.layers[0].weights[0], 2.0 - 0.2 * 0.5);
        assert_eq!(deltas.layers[0].weights[0], -0.2 * 0.5);
    }

    #[test]
    fn non_finite_gradient_is_a_numeric_error() {
        let mut net = Network::new(vec![LayerSpec::new(2, 2, Activation::Identity)], 4).unwrap();
        let mut grads = ParamSet::zeros_like(&net);
        grads.layers[0].weights[0] = f64::NAN;
        assert!(matches!(
            net.sgd_step(&grads, 0.1),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn checkpoint_round_trips_through_json() {
        let net = Network::new(
            vec![
                LayerSpec::new(4, 3, Activation::Rectifier),
                LayerSpec::new(3, 2, Activation::Identity),
            ],
            99,
        )
        .unwrap();
        let json = serde_json::to_string(&net).unwrap();
        let back: Network = serde_json::from_str(&json).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn init_uses_seeded_gaussian_with_expected_scale() {
        let a = Network::new(vec![LayerSpec::new(64, 64, Activation::Identity)], 12).unwrap();
        let b = Network::new(vec![LayerSpec::new(64, 64, Activation::Identity)], 12).unwrap();
        assert_eq!(a, b);
        let std = (a.layers[0].weights.iter().map(|w| w * w).sum::<f64>()
            / a.layers[0].weights.len() as f64)
            .sqrt();
        let expect = (2.0f64 / 64.0).sqrt();
        assert!((std - expect).abs() < 0.02, "std {std} vs {expect}");
    }
}
