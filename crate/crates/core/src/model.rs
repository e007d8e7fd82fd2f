//! Model construction and execution: an optional feature extractor followed
//! by the "bottom stack" that the label-recovery attack targets.
//!
//! The bottom stack always has the shape `first stack (FC-ReLU or Conv-ReLU),
//! (L-2) FC-ReLU stacks, final FC classifier without activation`. Forward
//! passes keep a full per-layer trace and backward passes keep per-sample
//! gradients alongside the batch means, so every inversion identity can be
//! verified against ground truth.

use serde::{Deserialize, Serialize};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    Fc {
        out_features: usize,
        in_features: usize,
    },
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    },
    Relu,
}

impl LayerKind {
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Fc {
                out_features,
                in_features,
            } => Some(vec![out_features, in_features]),
            LayerKind::Conv {
                out_channels,
                in_channels,
                kernel_h,
                kernel_w,
            } => Some(vec![out_channels, in_channels, kernel_h, kernel_w]),
            LayerKind::Relu => None,
        }
    }

    /// Shape of this layer's output given its input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerKind::Fc {
                out_features,
                in_features,
            } => {
                let total: usize = input.iter().product();
                if total != in_features {
                    return Err(Error::Shape(format!(
                        "fc layer wants {in_features} inputs, got shape {input:?}"
                    )));
                }
                Ok(vec![out_features])
            }
            LayerKind::Conv {
                out_channels,
                in_channels,
                kernel_h,
                kernel_w,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(Error::Shape(format!(
                        "conv layer wants [{in_channels}, H, W] input, got {input:?}"
                    )));
                }
                if kernel_h > input[1] || kernel_w > input[2] {
                    return Err(Error::Shape(format!(
                        "conv kernel {kernel_h}x{kernel_w} larger than input {input:?}"
                    )));
                }
                Ok(vec![
                    out_channels,
                    input[1] - kernel_h + 1,
                    input[2] - kernel_w + 1,
                ])
            }
            LayerKind::Relu => Ok(input.to_vec()),
        }
    }
}

/// One materialized layer; ReLU layers carry no weight.
#[derive(Debug, Clone)]
pub struct Layer {
    pub kind: LayerKind,
    pub weight: Option<Tensor>,
}

/// Structural description of the attacked bottom stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BottomStackSpec {
    pub layers: Vec<LayerKind>,
    pub class_count: usize,
}

impl BottomStackSpec {
    /// MLP-style bottom stack: FC-ReLU per hidden width, then a final
    /// `class_count x last_hidden` FC classifier.
    pub fn mlp(input_dim: usize, hidden: &[usize], class_count: usize) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::Spec("mlp needs at least one hidden width".into()));
        }
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &width in hidden {
            layers.push(LayerKind::Fc {
                out_features: width,
                in_features: prev,
            });
            layers.push(LayerKind::Relu);
            prev = width;
        }
        layers.push(LayerKind::Fc {
            out_features: class_count,
            in_features: prev,
        });
        Ok(Self {
            layers,
            class_count,
        })
    }

    /// Conv-ReLU first stack whose kernels span the whole spatial input, so
    /// every kernel produces a single 1x1 output, followed by FC-ReLU stacks
    /// and the final classifier.
    pub fn conv_first(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        out_channels: usize,
        hidden: &[usize],
        class_count: usize,
    ) -> Result<Self> {
        let mut layers = vec![
            LayerKind::Conv {
                out_channels,
                in_channels,
                kernel_h: in_h,
                kernel_w: in_w,
            },
            LayerKind::Relu,
        ];
        let mut prev = out_channels;
        for &width in hidden {
            layers.push(LayerKind::Fc {
                out_features: width,
                in_features: prev,
            });
            layers.push(LayerKind::Relu);
            prev = width;
        }
        layers.push(LayerKind::Fc {
            out_features: class_count,
            in_features: prev,
        });
        Ok(Self {
            layers,
            class_count,
        })
    }

    /// Number of stacks L (weight layers; ReLUs do not count).
    pub fn stack_count(&self) -> usize {
        (self.layers.len() + 1) / 2
    }

    /// Checks the structural invariants against the stack's input shape.
    pub fn validate(&self, input_shape: &[usize]) -> Result<()> {
        if self.layers.len() < 3 || self.layers.len() % 2 == 0 {
            return Err(Error::Spec(format!(
                "bottom stack must be weight/ReLU pairs plus a final FC, got {} layers",
                self.layers.len()
            )));
        }
        let stacks = self.stack_count();
        let mut shape = input_shape.to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            let is_relu_slot = idx % 2 == 1;
            match layer {
                LayerKind::Relu if !is_relu_slot => {
                    return Err(Error::Spec(format!("unexpected ReLU at layer {idx}")))
                }
                LayerKind::Relu => {}
                _ if is_relu_slot => {
                    return Err(Error::Spec(format!(
                        "expected ReLU at layer {idx}, got a weight layer"
                    )))
                }
                LayerKind::Conv { .. } if idx != 0 => {
                    return Err(Error::Spec(
                        "conv is only allowed as the first stack".into(),
                    ))
                }
                LayerKind::Conv { .. } => {
                    let out = layer.output_shape(&shape)?;
                    if out[1] != 1 || out[2] != 1 {
                        return Err(Error::Spec(format!(
                            "conv first stack must produce 1x1 outputs, got {}x{}",
                            out[1], out[2]
                        )));
                    }
                }
                LayerKind::Fc {
                    out_features,
                    in_features,
                } => {
                    let stack = idx / 2 + 1;
                    if stack >= 2 && out_features > in_features {
                        return Err(Error::Spec(format!(
                            "stack {stack} expands {in_features} -> {out_features}; \
                             inverted stacks must not expand"
                        )));
                    }
                    if stack == stacks && *out_features != self.class_count {
                        return Err(Error::Spec(format!(
                            "final FC must have {} outputs, got {out_features}",
                            self.class_count
                        )));
                    }
                }
            }
            shape = layer.output_shape(&shape)?;
        }
        Ok(())
    }
}

/// Weight initialization for the bottom stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// i.i.d. uniform in [0.01, 0.2]; keeps every weight positive.
    #[default]
    PositiveUniform,
    /// Standard Kaiming uniform with fan-in bounds.
    KaimingUniform,
}

impl InitScheme {
    pub const POSITIVE_LOW: f64 = 0.01;
    pub const POSITIVE_HIGH: f64 = 0.2;
}

#[derive(Debug, Clone)]
pub struct Model {
    pub extractor: Vec<Layer>,
    pub bottom: Vec<Layer>,
    pub class_count: usize,
    pub input_shape: Vec<usize>,
    pub seed: u64,
}

fn fan_in(kind: &LayerKind) -> usize {
    match *kind {
        LayerKind::Fc { in_features, .. } => in_features,
        LayerKind::Conv {
            in_channels,
            kernel_h,
            kernel_w,
            ..
        } => in_channels * kernel_h * kernel_w,
        LayerKind::Relu => 1,
    }
}

fn materialize(kind: &LayerKind, init: InitScheme, rng: &mut ChaCha20Rng) -> Layer {
    let weight = kind.weight_shape().map(|shape| {
        let n: usize = shape.iter().product();
        let data = match init {
            InitScheme::PositiveUniform => (0..n)
                .map(|_| rng.random_range(InitScheme::POSITIVE_LOW..InitScheme::POSITIVE_HIGH))
                .collect(),
            InitScheme::KaimingUniform => {
                let bound = (6.0 / fan_in(kind) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        };
        Tensor::new(shape, data).expect("weight shape is consistent")
    });
    Layer {
        kind: kind.clone(),
        weight,
    }
}

/// Materializes a model: extractor layers always use Kaiming uniform, bottom
/// layers use the requested scheme. Deterministic for a given seed.
pub fn build_model(
    input_shape: &[usize],
    extractor_spec: &[LayerKind],
    bottom_spec: &BottomStackSpec,
    init: InitScheme,
    seed: u64,
) -> Result<Model> {
    let mut shape = input_shape.to_vec();
    for kind in extractor_spec {
        shape = kind.output_shape(&shape)?;
    }
    bottom_spec.validate(&shape)?;

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let extractor = extractor_spec
        .iter()
        .map(|k| materialize(k, InitScheme::KaimingUniform, &mut rng))
        .collect();
    let bottom = bottom_spec
        .layers
        .iter()
        .map(|k| materialize(k, init, &mut rng))
        .collect();
    Ok(Model {
        extractor,
        bottom,
        class_count: bottom_spec.class_count,
        input_shape: input_shape.to_vec(),
        seed,
    })
}

impl Model {
    /// Number of stacks L in the bottom.
    pub fn bottom_stack_count(&self) -> usize {
        (self.bottom.len() + 1) / 2
    }

    /// Index into `bottom` of the weight layer of stack `l` (1-based).
    pub fn stack_layer_index(&self, stack: usize) -> Result<usize> {
        let count = self.bottom_stack_count();
        if stack == 0 || stack > count {
            return Err(Error::Index(format!(
                "stack {stack} out of range 1..={count}"
            )));
        }
        Ok(2 * (stack - 1))
    }

    /// Weight tensor of bottom stack `l` (1-based).
    pub fn stack_weight(&self, stack: usize) -> Result<&Tensor> {
        let idx = self.stack_layer_index(stack)?;
        self.bottom[idx]
            .weight
            .as_ref()
            .ok_or_else(|| Error::Index(format!("stack {stack} has no weight")))
    }

    /// Shape of the bottom stack's input (after the extractor).
    pub fn bottom_input_shape(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for layer in &self.extractor {
            shape = layer.kind.output_shape(&shape)?;
        }
        Ok(shape)
    }
}

/// Input and output of one layer for one sample.
#[derive(Debug, Clone)]
pub struct LayerIo {
    pub input: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub extractor: Vec<LayerIo>,
    pub bottom: Vec<LayerIo>,
    pub logits: Tensor,
    pub probs: Tensor,
}

impl SampleTrace {
    /// Pre-activation z of bottom stack `l` (1-based).
    pub fn stack_preactivation(&self, stack: usize) -> &Tensor {
        &self.bottom[2 * (stack - 1)].output
    }

    /// Post-ReLU activation a of bottom stack `l` (1-based, l < L).
    pub fn stack_activation(&self, stack: usize) -> &Tensor {
        &self.bottom[2 * (stack - 1) + 1].output
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub samples: Vec<SampleTrace>,
}

fn run_layer(layer: &Layer, input: &Tensor) -> Result<Tensor> {
    match layer.kind {
        LayerKind::Fc { .. } => nn::fc_forward(layer.weight.as_ref().unwrap(), input),
        LayerKind::Conv { .. } => nn::conv_forward(layer.weight.as_ref().unwrap(), input),
        LayerKind::Relu => Ok(nn::relu_forward(input)),
    }
}

/// Runs the full model on a batch, recording every per-layer value.
pub fn forward(model: &Model, batch: &[Tensor]) -> Result<ForwardTrace> {
    let mut samples = Vec::with_capacity(batch.len());
    for input in batch {
        if input.len() != model.input_shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "sample shape {:?} does not match model input {:?}",
                input.shape(),
                model.input_shape
            )));
        }
        let mut value = input.clone();
        let mut extractor = Vec::with_capacity(model.extractor.len());
        for layer in &model.extractor {
            let out = run_layer(layer, &value)?;
            extractor.push(LayerIo {
                input: value,
                output: out.clone(),
            });
            value = out;
        }
        let mut bottom = Vec::with_capacity(model.bottom.len());
        for layer in &model.bottom {
            let out = run_layer(layer, &value)?;
            bottom.push(LayerIo {
                input: value,
                output: out.clone(),
            });
            value = out;
        }
        let logits = value;
        if logits.len() != model.class_count {
            return Err(Error::Shape(format!(
                "model produced {} logits for {} classes",
                logits.len(),
                model.class_count
            )));
        }
        let probs = nn::softmax(&logits.reshape(vec![logits.len()])?);
        samples.push(SampleTrace {
            extractor,
            bottom,
            logits,
            probs,
        });
    }
    Ok(ForwardTrace { samples })
}

/// Gradients produced by one backward pass over a batch.
#[derive(Debug, Clone)]
pub struct BackwardPass {
    /// Batch-averaged weight gradients, aligned with `model.extractor`.
    pub extractor_weight_grads: Vec<Option<Tensor>>,
    /// Batch-averaged weight gradients, aligned with `model.bottom`.
    pub bottom_weight_grads: Vec<Option<Tensor>>,
    /// Per-sample gradient w.r.t. the output logits.
    pub logit_grads: Vec<Tensor>,
    /// Per-sample gradient w.r.t. each bottom layer's input,
    /// indexed `[sample][bottom layer]`.
    pub bottom_input_grads: Vec<Vec<Tensor>>,
}

impl BackwardPass {
    /// Batch-averaged weight gradient of bottom stack `l` (1-based).
    pub fn stack_weight_grad(&self, stack: usize) -> &Tensor {
        self.bottom_weight_grads[2 * (stack - 1)]
            .as_ref()
            .expect("weight layer")
    }

    /// Per-sample gradient w.r.t. the input x of bottom stack `l` (1-based).
    pub fn stack_input_grad(&self, sample: usize, stack: usize) -> &Tensor {
        &self.bottom_input_grads[sample][2 * (stack - 1)]
    }

    /// Per-sample gradient w.r.t. the activation a of bottom stack `l`
    /// (1-based, l < L): the input gradient of the next stack's weight layer.
    pub fn stack_activation_grad(&self, sample: usize, stack: usize) -> &Tensor {
        &self.bottom_input_grads[sample][2 * stack]
    }
}

fn backprop_layer(layer: &Layer, io: &LayerIo, upstream: &Tensor) -> Result<(Option<Tensor>, Tensor)> {
    match layer.kind {
        LayerKind::Fc { .. } => {
            let w = layer.weight.as_ref().unwrap();
            let (gw, gx) = nn::fc_backward(w, &io.input, upstream)?;
            Ok((Some(gw), gx.reshape(io.input.shape().to_vec())?))
        }
        LayerKind::Conv { .. } => {
            let w = layer.weight.as_ref().unwrap();
            let gz = upstream.reshape(io.output.shape().to_vec())?;
            let gw = nn::conv_backward_weights(w, &io.input, &gz)?;
            let gx = nn::conv_backward_input(w, io.input.shape(), &gz)?;
            Ok((Some(gw), gx))
        }
        LayerKind::Relu => {
            let gz = nn::relu_backward(&io.input, &upstream.reshape(io.input.shape().to_vec())?)?;
            Ok((None, gz))
        }
    }
}

/// Backpropagates the per-sample cross-entropy loss through the whole model.
///
/// Weight gradients are averaged over the batch; per-sample logit and
/// per-layer input gradients are kept for oracle checks.
pub fn backward(model: &Model, trace: &ForwardTrace, labels: &[usize]) -> Result<BackwardPass> {
    if labels.len() != trace.samples.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} traced samples",
            labels.len(),
            trace.samples.len()
        )));
    }
    let batch = trace.samples.len() as f64;
    let mut extractor_weight_grads: Vec<Option<Tensor>> = model
        .extractor
        .iter()
        .map(|l| l.kind.weight_shape().map(Tensor::zeros))
        .collect();
    let mut bottom_weight_grads: Vec<Option<Tensor>> = model
        .bottom
        .iter()
        .map(|l| l.kind.weight_shape().map(Tensor::zeros))
        .collect();
    let mut logit_grads = Vec::with_capacity(trace.samples.len());
    let mut bottom_input_grads = Vec::with_capacity(trace.samples.len());

    for (sample, &label) in trace.samples.iter().zip(labels) {
        if label >= model.class_count {
            return Err(Error::Index(format!(
                "label {label} out of range for {} classes",
                model.class_count
            )));
        }
        let mut grad = nn::ce_logit_gradient(&sample.probs, label)?;
        logit_grads.push(grad.clone());

        let mut input_grads = vec![Tensor::zeros(vec![1]); model.bottom.len()];
        for (idx, (layer, io)) in model.bottom.iter().zip(&sample.bottom).enumerate().rev() {
            let (gw, gx) = backprop_layer(layer, io, &grad)?;
            if let Some(gw) = gw {
                bottom_weight_grads[idx]
                    .as_mut()
                    .unwrap()
                    .axpy(1.0 / batch, &gw)?;
            }
            input_grads[idx] = gx.clone();
            grad = gx;
        }
        bottom_input_grads.push(input_grads);

        for (idx, (layer, io)) in model
            .extractor
            .iter()
            .zip(&sample.extractor)
            .enumerate()
            .rev()
        {
            let (gw, gx) = backprop_layer(layer, io, &grad)?;
            if let Some(gw) = gw {
                extractor_weight_grads[idx]
                    .as_mut()
                    .unwrap()
                    .axpy(1.0 / batch, &gw)?;
            }
            grad = gx;
        }
    }

    Ok(BackwardPass {
        extractor_weight_grads,
        bottom_weight_grads,
        logit_grads,
        bottom_input_grads,
    })
}
