//! Dense feed-forward networks with exact backpropagation.
//!
//! A [`LayerStack`] is a chain of fully connected layers with ReLU or
//! identity activations, trained with softmax cross-entropy (mean over the
//! batch) and plain SGD. Stacks can be cut at any layer boundary into a
//! [`SplitModel`]; running the two halves back to back performs exactly the
//! same floating point operations as running the whole stack.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn apply(self, z: &Tensor) -> Tensor {
        match self {
            Activation::Identity => z.clone(),
            Activation::Relu => {
                let mut out = z.clone();
                out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                out
            }
        }
    }

    /// Multiplies `grad` in place by the activation derivative at `z`.
    fn backprop(self, z: &Tensor, grad: &mut Tensor) {
        if let Activation::Relu = self {
            for (g, &zv) in grad.data_mut().iter_mut().zip(z.data()) {
                if zv <= 0.0 {
                    *g = 0.0;
                }
            }
        }
    }
}

/// Fully connected layer computing `act(x · W + b)` with `W` stored `[in × out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    weight: Tensor,
    bias: Tensor,
    activation: Activation,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weight.ndim() != 2 || bias.ndim() != 1 || bias.len() != weight.cols() {
            return Err(Error::Shape(format!(
                "dense weight {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Dense {
            weight,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt() as f32;
        let w = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Dense {
            weight: Tensor::new(vec![in_dim, out_dim], w).expect("positive dims"),
            bias: Tensor::zeros(vec![out_dim]),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut Tensor {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        &mut self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn pre_activation(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = x.matmul(&self.weight)?;
        let out = self.out_dim();
        let b = self.bias.data();
        for row in z.data_mut().chunks_mut(out) {
            row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
        Ok(z)
    }
}

/// Gradient of one dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Parameter gradients, aligned one-to-one with the layers of a stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(model: &LayerStack) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Tensor::zeros(l.weight.shape().to_vec()),
                    bias: Tensor::zeros(l.bias.shape().to_vec()),
                })
                .collect(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values()
            .map(|v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// All gradient values in parameter order (per layer: weights then bias).
    pub fn values(&self) -> impl Iterator<Item = f32> + '_ {
        self.layers
            .iter()
            .flat_map(|g| g.weight.data().iter().chain(g.bias.data()).copied())
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape("gradient layer count differs".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_assign(&b.weight)?;
            a.bias.add_assign(&b.bias)?;
        }
        Ok(())
    }

    /// Concatenates gradients of a device part and a server part.
    pub fn concat(mut self, tail: Gradients) -> Gradients {
        self.layers.extend(tail.layers);
        self
    }
}

/// Everything `backward` needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    version: u64,
    dims: Vec<(usize, usize)>,
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
}

impl Tape {
    /// Input of layer `k`; for `k == layer count` this is the stack output.
    pub fn layer_input(&self, k: usize) -> Option<&Tensor> {
        self.inputs.get(k)
    }

    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }
}

/// Result of backpropagating a labelled batch.
#[derive(Clone, Debug)]
pub struct Backward {
    pub grads: Gradients,
    /// Gradient with respect to the stack input (`∇a_j` for a server part).
    pub input_grad: Tensor,
    pub loss: f32,
}

/// Ordered dense layers ending in class logits.
#[derive(Clone, Debug)]
pub struct LayerStack {
    layers: Vec<Dense>,
    version: u64,
}

impl PartialEq for LayerStack {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl LayerStack {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("a layer stack needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Layer {
                    layer: k + 1,
                    message: format!(
                        "input dim {} does not match previous output dim {}",
                        pair[1].in_dim(),
                        pair[0].out_dim()
                    ),
                });
            }
        }
        Ok(LayerStack {
            layers,
            version: next_version(),
        })
    }

    /// Multi-layer perceptron over `dims` (input, hidden..., output): ReLU on
    /// every hidden layer, identity on the last.
    pub fn mlp(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        Self::mlp_with_output(dims, Activation::Identity, rng)
    }

    pub fn mlp_with_output(dims: &[usize], last: Activation, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidInput(format!("bad layer widths {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let act = if k + 1 == n { last } else { Activation::Relu };
                Dense::init(dims[k], dims[k + 1], act, rng)
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable layer access; invalidates outstanding tapes.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.version = next_version();
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Output width of layer `k` (1-based count of layers applied).
    pub fn width_after(&self, k: usize) -> Option<usize> {
        match k {
            0 => Some(self.in_dim()),
            k => self.layers.get(k - 1).map(Dense::out_dim),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Bytes occupied by all parameters as `f32`.
    pub fn param_bytes(&self) -> u64 {
        4 * self.param_count() as u64
    }

    /// All parameters in order (per layer: weights then bias).
    pub fn param_values(&self) -> impl Iterator<Item = f32> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != 2 || x.cols() != self.in_dim() {
            return Err(Error::Layer {
                layer: 0,
                message: format!(
                    "expected input [batch x {}], got {:?}",
                    self.in_dim(),
                    x.shape()
                ),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tape)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let z = layer.pre_activation(&h)?;
            let a = layer.activation.apply(&z);
            inputs.push(h);
            pre.push(z);
            h = a;
        }
        inputs.push(h.clone());
        let tape = Tape {
            version: self.version,
            dims: self.layers.iter().map(|l| (l.in_dim(), l.out_dim())).collect(),
            inputs,
            pre,
        };
        Ok((h, tape))
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_prefix(x, self.layers.len())
    }

    /// Output of the first `upto` layers.
    pub fn forward_prefix(&self, x: &Tensor, upto: usize) -> Result<Tensor> {
        self.check_input(x)?;
        if upto > self.layers.len() {
            return Err(Error::InvalidSplit {
                index: upto,
                layers: self.layers.len(),
            });
        }
        let mut h = x.clone();
        for layer in &self.layers[..upto] {
            h = layer.activation.apply(&layer.pre_activation(&h)?);
        }
        Ok(h)
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        let dims: Vec<_> = self.layers.iter().map(|l| (l.in_dim(), l.out_dim())).collect();
        if tape.dims != dims {
            return Err(Error::StaleTape("layer dimensions differ".into()));
        }
        if tape.version != self.version {
            return Err(Error::StaleTape(
                "model parameters changed since the forward pass".into(),
            ));
        }
        Ok(())
    }

    /// Backpropagates softmax cross-entropy (mean over the batch).
    pub fn backward(&self, tape: &Tape, labels: &[usize]) -> Result<Backward> {
        self.check_tape(tape)?;
        let logits = &tape.inputs[self.layers.len()];
        let (loss, dlogits) = softmax_cross_entropy(logits, labels)?;
        let (grads, input_grad) = self.backward_from(tape, dlogits)?;
        Ok(Backward {
            grads,
            input_grad,
            loss,
        })
    }

    /// Backpropagates an upstream gradient with respect to the stack output.
    pub fn backward_from(&self, tape: &Tape, grad_output: Tensor) -> Result<(Gradients, Tensor)> {
        self.check_tape(tape)?;
        let out = &tape.inputs[self.layers.len()];
        if grad_output.shape() != out.shape() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                grad_output.shape(),
                out.shape()
            )));
        }
        let mut grad = grad_output;
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate().rev() {
            layer.activation.backprop(&tape.pre[k], &mut grad);
            let x = &tape.inputs[k];
            let gw = x.t_matmul(&grad)?;
            let mut gb = vec![0.0f32; layer.out_dim()];
            for row in grad.data().chunks(layer.out_dim()) {
                gb.iter_mut().zip(row).for_each(|(b, g)| *b += g);
            }
            let gx = grad.matmul_t(&layer.weight)?;
            layer_grads.push(LayerGrad {
                weight: gw,
                bias: Tensor::new(vec![layer.out_dim()], gb)?,
            });
            grad = gx;
        }
        layer_grads.reverse();
        Ok((
            Gradients {
                layers: layer_grads,
            },
            grad,
        ))
    }

    /// `p ← p − lr·g` for every parameter.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f32) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidInput(format!("learning rate {lr}")));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} gradient layers for {} model layers",
                grads.layers.len(),
                self.layers.len()
            )));
        }
        for (k, (layer, g)) in self.layers.iter().zip(&grads.layers).enumerate() {
            if g.weight.shape() != layer.weight.shape() || g.bias.shape() != layer.bias.shape() {
                return Err(Error::Layer {
                    layer: k,
                    message: "gradient shape differs from parameter shape".into(),
                });
            }
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (p, d) in layer.weight.data_mut().iter_mut().zip(g.weight.data()) {
                *p -= lr * d;
            }
            for (p, d) in layer.bias.data_mut().iter_mut().zip(g.bias.data()) {
                *p -= lr * d;
            }
        }
        self.version = next_version();
        Ok(())
    }

    /// One forward/backward/update on a labelled batch; returns the loss.
    pub fn train_batch(&mut self, x: &Tensor, labels: &[usize], lr: f32) -> Result<f32> {
        let (_, tape) = self.forward(x)?;
        let bw = self.backward(&tape, labels)?;
        self.sgd_step(&bw.grads, lr)?;
        Ok(bw.loss)
    }

    /// Cuts the stack into layers `[..j]` and `[j..]`.
    pub fn split_at(&self, j: usize) -> Result<SplitModel> {
        if j == 0 || j >= self.layers.len() {
            return Err(Error::InvalidSplit {
                index: j,
                layers: self.layers.len(),
            });
        }
        Ok(SplitModel {
            device_part: LayerStack::new(self.layers[..j].to_vec())?,
            server_part: LayerStack::new(self.layers[j..].to_vec())?,
            split_index: j,
        })
    }

    /// The first `upto` layers as a standalone stack.
    pub fn prefix(&self, upto: usize) -> Result<LayerStack> {
        if upto == 0 || upto > self.layers.len() {
            return Err(Error::InvalidSplit {
                index: upto,
                layers: self.layers.len(),
            });
        }
        LayerStack::new(self.layers[..upto].to_vec())
    }

    /// Appends `tail` after this stack.
    pub fn concat(&self, tail: &LayerStack) -> Result<LayerStack> {
        let mut layers = self.layers.clone();
        layers.extend(tail.layers.iter().cloned());
        LayerStack::new(layers)
    }
}

/// A stack cut at a layer boundary: `device_part` runs `[..j]`, `server_part` runs `[j..]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitModel {
    pub device_part: LayerStack,
    pub server_part: LayerStack,
    pub split_index: usize,
}

impl SplitModel {
    pub fn join(&self) -> Result<LayerStack> {
        self.device_part.concat(&self.server_part)
    }

    /// Width of the activation exchanged at the cut.
    pub fn cut_width(&self) -> usize {
        self.device_part.out_dim()
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let (rows, classes) = (logits.rows(), logits.cols());
    if labels.len() != rows {
        return Err(Error::Shape(format!(
            "{} labels for {rows} logit rows",
            labels.len()
        )));
    }
    let mut grad = Vec::with_capacity(rows * classes);
    let mut loss = 0.0f64;
    let inv = 1.0 / rows as f32;
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::InvalidInput(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f32 = exps.iter().sum();
        loss += f64::from(sum.ln() - (row[y] - max));
        for (j, e) in exps.iter().enumerate() {
            let p = e / sum;
            let t = if j == y { 1.0 } else { 0.0 };
            grad.push((p - t) * inv);
        }
    }
    Ok(((loss / rows as f64) as f32, Tensor::matrix(rows, classes, grad)?))
}
