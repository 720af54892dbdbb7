//! Minimal differentiable dense-network kernels and the three-way split-model
//! containers the rest of the system trains.
//!
//! A model part is a [`LayerStack`] of affine layers with ReLU or linear
//! activations. Forward passes cache enough state for exact reverse-mode
//! differentiation; everything is `f64` so gradient checks have headroom.
//!
//! Conventions:
//! - weights are `(out_dim, in_dim)` matrices, inputs are `(batch, in_dim)`,
//! - the ReLU subgradient at exactly 0 is 0,
//! - an empty stack is the identity map.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of one dense layer: `y = W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    /// Row-major `(out_dim, in_dim)` weight matrix.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseParams {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    /// Square identity weights with zero bias.
    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bias.len() != self.weight.nrows() {
            return Err(Error::Config(format!(
                "bias length {} does not match weight rows {}",
                self.bias.len(),
                self.weight.nrows()
            )));
        }
        if self
            .weight
            .iter()
            .chain(self.bias.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Config("non-finite layer parameter".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    /// No nonlinearity; used by heads that must emit raw logits.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub params: DenseParams,
    pub activation: Activation,
}

/// An ordered sequence of dense layers. Empty stacks act as the identity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerStack(pub Vec<DenseLayer>);

impl LayerStack {
    pub fn new(layers: Vec<DenseLayer>) -> Self {
        Self(layers)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Input dimension, or `None` for an identity (empty) stack.
    pub fn in_dim(&self) -> Option<usize> {
        self.0.first().map(|l| l.params.in_dim())
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.0.last().map(|l| l.params.out_dim())
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev_out: Option<usize> = None;
        for (i, layer) in self.0.iter().enumerate() {
            layer.params.validate()?;
            if let Some(out) = prev_out {
                if layer.params.in_dim() != out {
                    return Err(Error::Config(format!(
                        "layer {i} expects input dim {}, previous layer emits {out}",
                        layer.params.in_dim()
                    )));
                }
            }
            prev_out = Some(layer.params.out_dim());
        }
        Ok(())
    }
}

/// Per-layer state captured during a forward pass, sufficient for exact
/// backprop: the input to each layer and its pre-activation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layer_inputs: Vec<Array2<f64>>,
    pub pre_activations: Vec<Array2<f64>>,
}

/// Gradients with the same shapes as the corresponding [`LayerStack`].
#[derive(Debug, Clone)]
pub struct StackGrads(pub Vec<DenseParams>);

impl StackGrads {
    pub fn zeros_like(stack: &LayerStack) -> Self {
        Self(
            stack
                .0
                .iter()
                .map(|l| DenseParams::zeros(l.params.out_dim(), l.params.in_dim()))
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &StackGrads) {
        assert_eq!(
            self.0.len(),
            other.0.len(),
            "gradient stack length mismatch"
        );
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.0 {
            g.weight *= factor;
            g.bias *= factor;
        }
    }
}

/// A mini-batch of inputs with integer class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::Config(
                "batch must contain at least one sample".into(),
            ));
        }
        if inputs.nrows() != labels.len() {
            return Err(Error::Config(format!(
                "batch has {} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

fn apply_activation(pre: &Array2<f64>, act: Activation) -> Array2<f64> {
    match act {
        Activation::Relu => pre.mapv(|v| if v > 0.0 { v } else { 0.0 }),
        Activation::Linear => pre.clone(),
    }
}

/// Forward pass through a stack, caching activations for backprop.
pub fn forward(stack: &LayerStack, x: &ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
    let mut cache = ForwardCache {
        layer_inputs: Vec::with_capacity(stack.len()),
        pre_activations: Vec::with_capacity(stack.len()),
    };
    let mut current = x.to_owned();
    for (i, layer) in stack.0.iter().enumerate() {
        if current.ncols() != layer.params.in_dim() {
            return Err(Error::Config(format!(
                "layer {i} expects input dim {}, got {}",
                layer.params.in_dim(),
                current.ncols()
            )));
        }
        let pre = current.dot(&layer.params.weight.t()) + &layer.params.bias;
        cache.layer_inputs.push(current);
        let out = apply_activation(&pre, layer.activation);
        cache.pre_activations.push(pre);
        current = out;
    }
    Ok((current, cache))
}

/// Client-side forward: maps a batch of raw inputs to smashed features.
pub fn forward_client(
    client_side: &LayerStack,
    batch: &Batch,
) -> Result<(Array2<f64>, ForwardCache)> {
    forward(client_side, &batch.inputs.view())
}

/// Server-side forward: smashed features through the processor, then the head.
pub fn forward_server(
    processor: &LayerStack,
    head: &LayerStack,
    smashed: &ArrayView2<f64>,
) -> Result<(Array2<f64>, ServerCache)> {
    let (hidden, processor_cache) = forward(processor, smashed)?;
    let (logits, head_cache) = forward(head, &hidden.view())?;
    Ok((
        logits,
        ServerCache {
            processor: processor_cache,
            head: head_cache,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct ServerCache {
    pub processor: ForwardCache,
    pub head: ForwardCache,
}

/// Exact reverse-mode pass. Returns parameter gradients plus the gradient
/// with respect to the stack's input.
pub fn backward(
    stack: &LayerStack,
    cache: &ForwardCache,
    output_grad: &ArrayView2<f64>,
) -> Result<(StackGrads, Array2<f64>)> {
    if cache.layer_inputs.len() != stack.len() || cache.pre_activations.len() != stack.len() {
        return Err(Error::Internal(format!(
            "cache holds {} layers, stack has {}",
            cache.layer_inputs.len(),
            stack.len()
        )));
    }
    let mut grads = Vec::with_capacity(stack.len());
    let mut grad = output_grad.to_owned();
    for (i, layer) in stack.0.iter().enumerate().rev() {
        let pre = &cache.pre_activations[i];
        let input = &cache.layer_inputs[i];
        if grad.dim() != pre.dim() {
            return Err(Error::Internal(format!(
                "gradient shape {:?} does not match cached pre-activation {:?} at layer {i}",
                grad.dim(),
                pre.dim()
            )));
        }
        let delta = match layer.activation {
            // subgradient at 0 is 0: strict comparison
            Activation::Relu => {
                let mut d = grad;
                d.zip_mut_with(pre, |g, &p| {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                });
                d
            }
            Activation::Linear => grad,
        };
        let weight_grad = delta.t().dot(input);
        let bias_grad = delta.sum_axis(Axis(0));
        grad = delta.dot(&layer.params.weight);
        grads.push(DenseParams {
            weight: weight_grad,
            bias: bias_grad,
        });
    }
    grads.reverse();
    Ok((StackGrads(grads), grad))
}

/// Backward through head then processor, returning the smashed-feature grad.
pub fn backward_server(
    processor: &LayerStack,
    head: &LayerStack,
    cache: &ServerCache,
    logits_grad: &ArrayView2<f64>,
) -> Result<(StackGrads, StackGrads, Array2<f64>)> {
    let (head_grads, hidden_grad) = backward(head, &cache.head, logits_grad)?;
    let (processor_grads, smashed_grad) =
        backward(processor, &cache.processor, &hidden_grad.view())?;
    Ok((processor_grads, head_grads, smashed_grad))
}

/// One plain SGD step: `params -= lr * grads`.
pub fn sgd_step(stack: &mut LayerStack, grads: &StackGrads, lr: f64) {
    assert_eq!(stack.len(), grads.0.len(), "gradient stack length mismatch");
    for (layer, g) in stack.0.iter_mut().zip(&grads.0) {
        layer.params.weight.scaled_add(-lr, &g.weight);
        layer.params.bias.scaled_add(-lr, &g.bias);
    }
}

/// Numerically stable softplus `ln(1 + e^x)`, evaluated as
/// `max(x, 0) + ln(1 + e^{-|x|})`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid, the derivative of softplus.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise softplus over a logits matrix; entries are strictly positive.
pub fn softplus_evidence(logits: &ArrayView2<f64>) -> Array2<f64> {
    logits.mapv(softplus)
}

/// Architecture description for a full split model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub num_classes: usize,
    /// Number of client-side (extractor) layers; at least 1.
    pub client_layers: usize,
    /// Width of the smashed representation and processor layers.
    pub hidden_dim: usize,
    /// Number of server-side processor layers before the head; may be 0.
    pub processor_layers: usize,
    /// Width of the auxiliary model's feature space.
    pub aux_hidden_dim: usize,
}

/// Parameter sets for the three-way split: the client-side extractor, the
/// server-side processor and head, and the client-local auxiliary model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitModel {
    pub client_side: LayerStack,
    pub server_processor: LayerStack,
    pub server_head: LayerStack,
    pub auxiliary_extractor: LayerStack,
    pub auxiliary_head: LayerStack,
}

fn init_layer<R: Rng>(
    out_dim: usize,
    in_dim: usize,
    activation: Activation,
    rng: &mut R,
) -> DenseLayer {
    // Xavier-uniform; good enough for both ReLU and linear at this scale.
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let mut params = DenseParams::zeros(out_dim, in_dim);
    for w in params.weight.iter_mut() {
        *w = rng.random_range(-limit..limit);
    }
    DenseLayer { params, activation }
}

impl SplitModel {
    /// Seed-deterministic initialization for the given architecture.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        if arch.input_dim == 0
            || arch.num_classes < 2
            || arch.client_layers == 0
            || arch.hidden_dim == 0
            || arch.aux_hidden_dim == 0
        {
            return Err(Error::Config(
                "architecture dims must be positive (and at least two classes)".into(),
            ));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut client = Vec::new();
        let mut in_dim = arch.input_dim;
        for _ in 0..arch.client_layers {
            client.push(init_layer(
                arch.hidden_dim,
                in_dim,
                Activation::Relu,
                &mut rng,
            ));
            in_dim = arch.hidden_dim;
        }
        let mut processor = Vec::new();
        for _ in 0..arch.processor_layers {
            processor.push(init_layer(
                arch.hidden_dim,
                arch.hidden_dim,
                Activation::Relu,
                &mut rng,
            ));
        }
        let head = vec![init_layer(
            arch.num_classes,
            arch.hidden_dim,
            Activation::Linear,
            &mut rng,
        )];
        let aux_extractor = vec![init_layer(
            arch.aux_hidden_dim,
            arch.input_dim,
            Activation::Relu,
            &mut rng,
        )];
        let aux_head = vec![init_layer(
            arch.num_classes,
            arch.aux_hidden_dim,
            Activation::Linear,
            &mut rng,
        )];
        let model = Self {
            client_side: LayerStack::new(client),
            server_processor: LayerStack::new(processor),
            server_head: LayerStack::new(head),
            auxiliary_extractor: LayerStack::new(aux_extractor),
            auxiliary_head: LayerStack::new(aux_head),
        };
        model.validate()?;
        Ok(model)
    }

    /// Checks the split-point dimension contracts.
    pub fn validate(&self) -> Result<()> {
        self.client_side.validate()?;
        self.server_processor.validate()?;
        self.server_head.validate()?;
        self.auxiliary_extractor.validate()?;
        self.auxiliary_head.validate()?;
        let smashed = self.client_side.out_dim();
        if let (Some(s), Some(p)) = (smashed, self.server_processor.in_dim()) {
            if s != p {
                return Err(Error::Config(format!(
                    "smashed dim {s} does not match processor input {p}"
                )));
            }
        }
        let server_in = self.server_processor.out_dim().or(smashed);
        if let (Some(s), Some(h)) = (server_in, self.server_head.in_dim()) {
            if s != h {
                return Err(Error::Config(format!(
                    "processor output {s} does not match head input {h}"
                )));
            }
        }
        if let (Some(a), Some(h)) = (
            self.auxiliary_extractor.out_dim(),
            self.auxiliary_head.in_dim(),
        ) {
            if a != h {
                return Err(Error::Config(format!(
                    "auxiliary feature dim {a} does not match auxiliary head input {h}"
                )));
            }
        }
        if let (Some(g), Some(a)) = (self.server_head.out_dim(), self.auxiliary_head.out_dim()) {
            if g != a {
                return Err(Error::Config(format!(
                    "server head emits {g} classes, auxiliary head {a}"
                )));
            }
        }
        Ok(())
    }
}
