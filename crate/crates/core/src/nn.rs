//! Fully connected residual networks with hand-derived backpropagation.
//!
//! The architecture is fixed:
//!
//! ```text
//! h_0     = W_in x + b_in
//! h_{k+1} = h_k + W_2 drop(relu(W_1 relu(h_k) + b_1)) + b_2      (pre-activation block)
//! y       = W_out relu(h_B) + b_out
//! ```
//!
//! Batches are row-major: one example per row. Dropout is inverted (scaled at
//! train time), so evaluation is a plain deterministic forward pass.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AceError, Result};

/// Layer sizes of a residual network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub blocks: usize,
    pub output_dim: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden_dim: usize, blocks: usize, output_dim: usize) -> Self {
        Architecture {
            input_dim,
            hidden_dim,
            blocks,
            output_dim,
        }
    }

    /// `(out, in)` for every dense layer in storage order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(2 + 2 * self.blocks);
        shapes.push((self.hidden_dim, self.input_dim));
        for _ in 0..self.blocks {
            shapes.push((self.hidden_dim, self.hidden_dim));
            shapes.push((self.hidden_dim, self.hidden_dim));
        }
        shapes.push((self.output_dim, self.hidden_dim));
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(AceError::config(format!(
                "network dimensions must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Whether dropout is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A dense affine layer, `y = W x + b`, with `W` stored as `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Dense {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    /// Fan-in scaled Gaussian weights, zero bias.
    pub fn he<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((out_dim, in_dim), || {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        Dense {
            weight,
            bias: Array1::zeros(out_dim),
        }
    }

    /// Applies the layer to every row of `x`.
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Multiplies `grad` in place by the rectifier derivative at `pre`.
fn relu_backward(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    Zip::from(grad).and(pre).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Weights of a residual network (also the container for its gradients).
#[derive(Debug, Clone)]
pub struct ResidualNet {
    arch: Architecture,
    layers: Vec<Dense>,
    version: u64,
}

/// Compares weights only; the mutation counter is bookkeeping.
impl PartialEq for ResidualNet {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.layers == other.layers
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    version: u64,
    input: Array2<f64>,
    /// `h_k` entering each block.
    block_inputs: Vec<Array2<f64>>,
    /// Pre-activation of each block's first dense layer.
    block_hidden: Vec<Array2<f64>>,
    /// Inverted-dropout multipliers (0 or `1/(1-p)`) per block, train mode only.
    dropout: Vec<Option<Array2<f64>>>,
    /// `h_B`, the residual stream after the last block.
    final_hidden: Array2<f64>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }

    /// Dropout multipliers recorded for block `k`, if dropout was active.
    pub fn dropout_mask(&self, block: usize) -> Option<&Array2<f64>> {
        self.dropout.get(block).and_then(|m| m.as_ref())
    }
}

/// Gradients with respect to a network's parameters and its input batch.
#[derive(Debug, Clone)]
pub struct Backprop {
    pub params: Gradients,
    pub input: Array2<f64>,
}

impl ResidualNet {
    /// He-initialized network.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(o, i)| Dense::he(o, i, rng))
            .collect();
        Ok(ResidualNet {
            arch,
            layers,
            version: 0,
        })
    }

    /// Builds a network from explicit layers, checking that shapes chain.
    pub fn from_layers(arch: Architecture, layers: Vec<Dense>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(AceError::config(format!(
                "expected {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (k, ((o, i), layer)) in shapes.iter().zip(&layers).enumerate() {
            if layer.weight.dim() != (*o, *i) || layer.bias.len() != *o {
                return Err(AceError::config(format!(
                    "layer {k}: expected weight {o}x{i}, got {:?}",
                    layer.weight.dim()
                )));
            }
        }
        Ok(ResidualNet {
            arch,
            layers,
            version: 0,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.version += 1;
        &mut self.layers
    }

    /// The final dense layer.
    pub fn output_layer_mut(&mut self) -> &mut Dense {
        self.version += 1;
        self.layers.last_mut().expect("network has an output layer")
    }

    /// Increments on every parameter mutation; traces from older versions are rejected.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Dense::parameter_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for layer in &self.layers {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    /// Inverse of [`ResidualNet::to_flat`].
    pub fn from_flat(arch: Architecture, flat: &[f64]) -> Result<Self> {
        arch.validate()?;
        if flat.len() != arch.parameter_count() {
            return Err(AceError::Format(format!(
                "parameter blob has {} values, architecture needs {}",
                flat.len(),
                arch.parameter_count()
            )));
        }
        let mut offset = 0;
        let mut layers = Vec::new();
        for (o, i) in arch.layer_shapes() {
            let w = Array2::from_shape_vec((o, i), flat[offset..offset + o * i].to_vec())
                .expect("slice length matches shape");
            offset += o * i;
            let b = Array1::from(flat[offset..offset + o].to_vec());
            offset += o;
            layers.push(Dense { weight: w, bias: b });
        }
        Ok(ResidualNet {
            arch,
            layers,
            version: 0,
        })
    }

    /// Reads parameter `index` in [`ResidualNet::to_flat`] order.
    pub fn parameter(&self, index: usize) -> f64 {
        let (layer, local) = self.locate(index);
        let l = &self.layers[layer];
        if local < l.weight.len() {
            l.weight.as_slice().expect("standard layout")[local]
        } else {
            l.bias[local - l.weight.len()]
        }
    }

    pub fn set_parameter(&mut self, index: usize, value: f64) {
        let (layer, local) = self.locate(index);
        self.version += 1;
        let l = &mut self.layers[layer];
        if local < l.weight.len() {
            l.weight.as_slice_mut().expect("standard layout")[local] = value;
        } else {
            let n = l.weight.len();
            l.bias[local - n] = value;
        }
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (k, l) in self.layers.iter().enumerate() {
            let n = l.parameter_count();
            if index < n {
                return (k, index);
            }
            index -= n;
        }
        panic!("parameter index out of range");
    }

    fn check_input(&self, input: &Array2<f64>) -> Result<()> {
        if input.ncols() != self.arch.input_dim {
            return Err(AceError::config(format!(
                "network expects input width {}, got {}",
                self.arch.input_dim,
                input.ncols()
            )));
        }
        Ok(())
    }

    /// Forward pass over a batch, recording what backpropagation needs.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: &Array2<f64>,
        mode: Mode,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Result<(Array2<f64>, ForwardTrace)> {
        self.check_input(input)?;
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(AceError::config(format!(
                "dropout rate must lie in [0, 1), got {dropout_rate}"
            )));
        }
        let use_dropout = mode == Mode::Train && dropout_rate > 0.0;
        let keep_scale = 1.0 / (1.0 - dropout_rate);

        let mut h = self.layers[0].apply(input);
        let mut block_inputs = Vec::with_capacity(self.arch.blocks);
        let mut block_hidden = Vec::with_capacity(self.arch.blocks);
        let mut dropout = Vec::with_capacity(self.arch.blocks);
        for b in 0..self.arch.blocks {
            let first = &self.layers[1 + 2 * b];
            let second = &self.layers[2 + 2 * b];
            let z1 = first.apply(&relu(&h));
            let mut a = relu(&z1);
            let mask = if use_dropout {
                let m = Array2::from_shape_simple_fn(a.raw_dim(), || {
                    if rng.random::<f64>() < dropout_rate {
                        0.0
                    } else {
                        keep_scale
                    }
                });
                a *= &m;
                Some(m)
            } else {
                None
            };
            let z2 = second.apply(&a);
            block_inputs.push(h.clone());
            h += &z2;
            block_hidden.push(z1);
            dropout.push(mask);
        }
        let out = self.layers[self.layers.len() - 1].apply(&relu(&h));
        let trace = ForwardTrace {
            version: self.version,
            input: input.clone(),
            block_inputs,
            block_hidden,
            dropout,
            final_hidden: h,
        };
        Ok((out, trace))
    }

    /// Evaluation-mode forward pass without a trace.
    pub fn predict(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(input)?;
        let mut h = self.layers[0].apply(input);
        for b in 0..self.arch.blocks {
            let z1 = self.layers[1 + 2 * b].apply(&relu(&h));
            h += &self.layers[2 + 2 * b].apply(&relu(&z1));
        }
        Ok(self.layers[self.layers.len() - 1].apply(&relu(&h)))
    }

    /// Gradients of a loss whose gradient with respect to the outputs is `output_grad`.
    pub fn backward(&self, trace: &ForwardTrace, output_grad: &Array2<f64>) -> Result<Backprop> {
        if trace.version != self.version {
            return Err(AceError::usage(
                "trace was produced before the network's parameters changed",
            ));
        }
        if trace.block_inputs.len() != self.arch.blocks
            || trace.input.ncols() != self.arch.input_dim
        {
            return Err(AceError::usage("trace does not belong to this network"));
        }
        if output_grad.dim() != (trace.batch_size(), self.arch.output_dim) {
            return Err(AceError::usage(format!(
                "output gradient has shape {:?}, expected ({}, {})",
                output_grad.dim(),
                trace.batch_size(),
                self.arch.output_dim
            )));
        }

        let nl = self.layers.len();
        let mut grads: Vec<Dense> = Vec::with_capacity(nl);
        grads.resize_with(nl, || Dense::zeros(0, 0));

        let a_final = relu(&trace.final_hidden);
        grads[nl - 1] = Dense {
            weight: output_grad.t().dot(&a_final),
            bias: output_grad.sum_axis(Axis(0)),
        };
        let mut dh = output_grad.dot(&self.layers[nl - 1].weight);
        relu_backward(&mut dh, &trace.final_hidden);

        for b in (0..self.arch.blocks).rev() {
            let first = &self.layers[1 + 2 * b];
            let second = &self.layers[2 + 2 * b];
            let h_in = &trace.block_inputs[b];
            let z1 = &trace.block_hidden[b];
            let mut a = relu(z1);
            if let Some(m) = &trace.dropout[b] {
                a *= m;
            }
            grads[2 + 2 * b] = Dense {
                weight: dh.t().dot(&a),
                bias: dh.sum_axis(Axis(0)),
            };
            let mut dz1 = dh.dot(&second.weight);
            if let Some(m) = &trace.dropout[b] {
                dz1 *= m;
            }
            relu_backward(&mut dz1, z1);
            grads[1 + 2 * b] = Dense {
                weight: dz1.t().dot(&relu(h_in)),
                bias: dz1.sum_axis(Axis(0)),
            };
            let mut through = dz1.dot(&first.weight);
            relu_backward(&mut through, h_in);
            dh += &through;
        }

        grads[0] = Dense {
            weight: dh.t().dot(&trace.input),
            bias: dh.sum_axis(Axis(0)),
        };
        let input = dh.dot(&self.layers[0].weight);
        Ok(Backprop {
            params: Gradients { layers: grads },
            input,
        })
    }
}

/// Per-parameter values shaped like a [`ResidualNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &ResidualNet) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    /// Value at flat index `index` (same order as [`ResidualNet::to_flat`]).
    pub fn get(&self, mut index: usize) -> f64 {
        for l in &self.layers {
            let n = l.parameter_count();
            if index < n {
                return if index < l.weight.len() {
                    l.weight.as_slice().expect("standard layout")[index]
                } else {
                    l.bias[index - l.weight.len()]
                };
            }
            index -= n;
        }
        panic!("gradient index out of range");
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    fn matches(&self, net: &ResidualNet) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weight.dim() == l.weight.dim() && g.bias.len() == l.bias.len())
    }
}

/// Adam moment estimates for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Gradients,
    second: Gradients,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Zero moments with `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
    pub fn new(net: &ResidualNet) -> Self {
        AdamState {
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &Gradients {
        &self.first
    }

    pub fn second_moment(&self) -> &Gradients {
        &self.second
    }

    /// One bias-corrected Adam update. Leaves everything untouched when the
    /// gradient is non-finite so the caller may skip the batch.
    pub fn step(&mut self, net: &mut ResidualNet, grads: &Gradients, learning_rate: f64) -> Result<()> {
        if !grads.matches(net) || !self.first.matches(net) {
            return Err(AceError::usage("gradient shapes do not match the network"));
        }
        if !grads.is_finite() {
            return Err(AceError::NonFinite("gradient contains NaN or infinity".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        net.version += 1;
        for (k, layer) in net.layers.iter_mut().enumerate() {
            let g = &grads.layers[k];
            let m = &mut self.first.layers[k];
            let v = &mut self.second.layers[k];
            let update = |w: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            };
            Zip::from(&mut layer.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .and(&g.weight)
                .for_each(|w, m, v, &g| update(w, m, v, g));
            Zip::from(&mut layer.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .and(&g.bias)
                .for_each(|w, m, v, &g| update(w, m, v, g));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeded(seed);
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn identity_linear_layer() {
        let eye = Dense {
            weight: Array2::eye(2),
            bias: Array1::zeros(2),
        };
        assert_eq!(eye.apply(&array![[1.5, -2.0]]), array![[1.5, -2.0]]);
    }

    #[test]
    fn identity_network_passes_positive_inputs() {
        // blocks = 0: a single input layer feeding the output layer through a rectifier.
        // With W_in = I and W_out = I, positive inputs pass through unchanged.
        let arch = Architecture::new(2, 2, 0, 2);
        let eye = Dense {
            weight: Array2::eye(2),
            bias: Array1::zeros(2),
        };
        let net = ResidualNet::from_layers(arch, vec![eye.clone(), eye]).unwrap();
        let out = net.predict(&array![[1.5, 2.0]]).unwrap();
        assert_eq!(out, array![[1.5, 2.0]]);
        // The rectifier before the output layer clips negative coordinates.
        let out = net.predict(&array![[1.5, -2.0]]).unwrap();
        assert_eq!(out, array![[1.5, 0.0]]);
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let mut rng = seeded(1);
        let net = ResidualNet::new(Architecture::new(3, 8, 2, 2), &mut rng).unwrap();
        let x = random_batch(5, 3, 2);
        let (train, _) = net.forward(&x, Mode::Train, 0.0, &mut rng).unwrap();
        let eval = net.predict(&x).unwrap();
        assert_eq!(train, eval);
    }

    #[test]
    fn forward_is_deterministic_under_seed() {
        let run = || {
            let mut rng = seeded(11);
            let net = ResidualNet::new(Architecture::new(4, 16, 2, 3), &mut rng).unwrap();
            let x = random_batch(7, 4, 12);
            net.forward(&x, Mode::Train, 0.3, &mut rng).unwrap().0
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let mut rng = seeded(1);
        let net = ResidualNet::new(Architecture::new(3, 4, 1, 1), &mut rng).unwrap();
        let err = net.predict(&Array2::zeros((2, 5))).unwrap_err();
        assert!(matches!(err, AceError::Config(_)));
    }

    #[test]
    fn zero_output_weights_block_upstream_gradients() {
        let mut rng = seeded(3);
        let mut net = ResidualNet::new(Architecture::new(3, 6, 2, 2), &mut rng).unwrap();
        *net.output_layer_mut() = Dense::zeros(2, 6);
        let x = random_batch(4, 3, 4);
        let (_, trace) = net.forward(&x, Mode::Eval, 0.0, &mut rng).unwrap();
        let bp = net.backward(&trace, &Array2::ones((4, 2))).unwrap();
        for layer in &bp.params.layers()[..bp.params.layers().len() - 1] {
            assert!(layer.weight.iter().all(|&v| v == 0.0));
            assert!(layer.bias.iter().all(|&v| v == 0.0));
        }
        assert!(bp.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_output_gradient_is_outer_product() {
        // Loss = sum(y) with y = W_out relu(h): dL/dW_out = outer(1, relu(h)).
        let arch = Architecture::new(2, 2, 0, 3);
        let net = ResidualNet::from_layers(
            arch,
            vec![
                Dense {
                    weight: Array2::eye(2),
                    bias: Array1::zeros(2),
                },
                Dense {
                    weight: array![[1.0, 2.0], [0.5, -1.0], [0.0, 3.0]],
                    bias: Array1::zeros(3),
                },
            ],
        )
        .unwrap();
        let x = array![[0.7, 1.3]];
        let (_, trace) = net.forward(&x, Mode::Eval, 0.0, &mut seeded(0)).unwrap();
        let bp = net.backward(&trace, &Array2::ones((1, 3))).unwrap();
        let expected = array![[0.7, 1.3], [0.7, 1.3], [0.7, 1.3]];
        assert_eq!(bp.params.layers()[1].weight, expected);
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut rng = seeded(5);
        let mut net = ResidualNet::new(Architecture::new(2, 4, 1, 1), &mut rng).unwrap();
        let x = random_batch(3, 2, 6);
        let (_, trace) = net.forward(&x, Mode::Eval, 0.0, &mut rng).unwrap();
        let grads = net.backward(&trace, &Array2::ones((3, 1))).unwrap().params;
        let mut adam = AdamState::new(&net);
        adam.step(&mut net, &grads, 1e-3).unwrap();
        assert!(matches!(
            net.backward(&trace, &Array2::ones((3, 1))),
            Err(AceError::Usage(_))
        ));
    }

    #[test]
    fn adam_first_step_moves_by_at_most_lr() {
        let mut rng = seeded(8);
        let mut net = ResidualNet::new(Architecture::new(2, 3, 1, 1), &mut rng).unwrap();
        let before = net.to_flat();
        let x = random_batch(4, 2, 9);
        let (_, trace) = net.forward(&x, Mode::Eval, 0.0, &mut rng).unwrap();
        let grads = net.backward(&trace, &Array2::ones((4, 1))).unwrap().params;
        let lr = 0.01;
        let mut adam = AdamState::new(&net);
        adam.step(&mut net, &grads, lr).unwrap();
        assert_eq!(adam.step_count(), 1);
        let after = net.to_flat();
        for i in 0..before.len() {
            let g = grads.get(i);
            let delta = after[i] - before[i];
            let lower = lr * g.abs() / (g.abs() + adam.epsilon);
            assert!(delta.abs() <= lr * (1.0 + 1e-12));
            assert!(delta.abs() >= lower * (1.0 - 1e-9));
            if g != 0.0 {
                assert_eq!(delta.signum(), -g.signum());
            }
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut rng = seeded(8);
        let mut net = ResidualNet::new(Architecture::new(2, 3, 1, 1), &mut rng).unwrap();
        let before = net.to_flat();
        let zeros = Gradients::zeros_like(&net);
        let mut adam = AdamState::new(&net);
        for _ in 0..3 {
            adam.step(&mut net, &zeros, 0.1).unwrap();
        }
        assert_eq!(net.to_flat(), before);
        assert!(adam.second_moment().layers().iter().all(|l| l.weight.iter().all(|&v| v >= 0.0)));
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut rng = seeded(8);
        let mut net = ResidualNet::new(Architecture::new(2, 3, 1, 1), &mut rng).unwrap();
        let before = net.to_flat();
        let mut grads = Gradients::zeros_like(&net);
        grads.layers[0].weight[[0, 0]] = f64::NAN;
        let mut adam = AdamState::new(&net);
        assert!(matches!(adam.step(&mut net, &grads, 0.1), Err(AceError::NonFinite(_))));
        assert_eq!(adam.step_count(), 0);
        assert_eq!(net.to_flat(), before);
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        // f(w) = w², driven through a 1x1 output bias so the rest of the net is irrelevant.
        let arch = Architecture::new(1, 1, 0, 1);
        let mut net = ResidualNet::from_layers(arch, vec![Dense::zeros(1, 1), Dense::zeros(1, 1)]).unwrap();
        let bias_index = net.parameter_count() - 1;
        net.set_parameter(bias_index, 3.0);
        let mut adam = AdamState::new(&net);
        for _ in 0..500 {
            let w = net.parameter(bias_index);
            let mut g = Gradients::zeros_like(&net);
            g.layers[1].bias[0] = 2.0 * w;
            adam.step(&mut net, &g, 0.05).unwrap();
        }
        assert!(net.parameter(bias_index).abs() < 1e-2);
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = seeded(21);
        let net = ResidualNet::new(Architecture::new(3, 5, 2, 4), &mut rng).unwrap();
        let back = ResidualNet::from_flat(net.architecture(), &net.to_flat()).unwrap();
        assert_eq!(back.layers(), net.layers());
        for i in [0, 7, net.parameter_count() - 1] {
            assert_eq!(back.parameter(i), net.parameter(i));
        }
    }
}
