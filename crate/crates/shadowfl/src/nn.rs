//! Minimal neural-network training core: initialization, forward pass with
//! penultimate-layer representation extraction, exact analytic gradients, and
//! plain SGD. Three architectures: a dense MLP, a small two-conv-layer image net,
//! and the fixed-head two-layer network used by the early-stopping theory
//! experiments.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::ImageGeometry;
use crate::rng;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("batch must be nonempty")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Softplus: smooth, with bounded first and second derivatives.
    SmoothRelu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            // Stable softplus.
            Activation::SmoothRelu => {
                if z > 30.0 {
                    z
                } else if z < -30.0 {
                    z.exp()
                } else {
                    (1.0 + z.exp()).ln()
                }
            }
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::SmoothRelu => 1.0 / (1.0 + (-z).exp()),
        }
    }
}

/// Fixed shapes of the small convolutional net: two 3x3 valid conv layers
/// (8 then 16 filters) each followed by 2x2 max-pooling, dropout on the
/// flattened features at training time, a 128-wide penultimate dense layer
/// and a dense classification head.
pub const CONV1_FILTERS: usize = 8;
pub const CONV2_FILTERS: usize = 16;
pub const CONV_KERNEL: usize = 3;
pub const CONV_DENSE_WIDTH: usize = 128;
pub const CONV_DROPOUT_RATE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    /// input -> hidden widths -> classes, dense with biases.
    Mlp { hidden: Vec<usize> },
    /// The fixed small image net; needs `geometry`.
    ConvSmall,
    /// f(x) = v^T phi(W x) with the head v fixed to +-1/sqrt(width) halves;
    /// no biases; scalar output regressed against class values in [-1, 1].
    TwoLayerFixedHead { width: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub activation: Activation,
    pub input_dim: usize,
    pub geometry: Option<ImageGeometry>,
    pub classes: usize,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Self {
        ModelSpec {
            arch: Architecture::Mlp { hidden },
            activation: Activation::Relu,
            input_dim,
            geometry: None,
            classes,
        }
    }

    pub fn conv_small(geometry: ImageGeometry, classes: usize) -> Self {
        ModelSpec {
            arch: Architecture::ConvSmall,
            activation: Activation::Relu,
            input_dim: geometry.dim(),
            geometry: Some(geometry),
            classes,
        }
    }

    pub fn two_layer_fixed_head(input_dim: usize, width: usize, classes: usize) -> Self {
        assert!(width % 2 == 0, "fixed head needs an even width");
        ModelSpec {
            arch: Architecture::TwoLayerFixedHead { width },
            activation: Activation::SmoothRelu,
            input_dim,
            geometry: None,
            classes,
        }
    }

    /// Width of the penultimate activation vector exposed as representation.
    pub fn representation_dim(&self) -> usize {
        match &self.arch {
            Architecture::Mlp { hidden } => hidden.last().copied().unwrap_or(self.input_dim),
            Architecture::ConvSmall => CONV_DENSE_WIDTH,
            Architecture::TwoLayerFixedHead { width } => *width,
        }
    }

    pub fn param_count(&self) -> usize {
        match &self.arch {
            Architecture::Mlp { hidden } => {
                let mut count = 0;
                let mut fan_in = self.input_dim;
                for &h in hidden {
                    count += fan_in * h + h;
                    fan_in = h;
                }
                count + fan_in * self.classes + self.classes
            }
            Architecture::ConvSmall => {
                let g = self.conv_geometry();
                let conv1 = CONV1_FILTERS * (g.channels * CONV_KERNEL * CONV_KERNEL) + CONV1_FILTERS;
                let conv2 =
                    CONV2_FILTERS * (CONV1_FILTERS * CONV_KERNEL * CONV_KERNEL) + CONV2_FILTERS;
                let dense1 = CONV_DENSE_WIDTH * self.conv_flat_dim() + CONV_DENSE_WIDTH;
                let dense2 = self.classes * CONV_DENSE_WIDTH + self.classes;
                conv1 + conv2 + dense1 + dense2
            }
            Architecture::TwoLayerFixedHead { width } => width * self.input_dim,
        }
    }

    fn conv_geometry(&self) -> ImageGeometry {
        self.geometry.expect("conv_small spec needs image geometry")
    }

    /// Spatial dims after each conv (valid) and 2x2 pool (floor).
    fn conv_dims(&self) -> ((usize, usize), (usize, usize), (usize, usize), (usize, usize)) {
        let g = self.conv_geometry();
        let c1 = (g.height - CONV_KERNEL + 1, g.width - CONV_KERNEL + 1);
        let p1 = (c1.0 / 2, c1.1 / 2);
        let c2 = (p1.0 - CONV_KERNEL + 1, p1.1 - CONV_KERNEL + 1);
        let p2 = (c2.0 / 2, c2.1 / 2);
        (c1, p1, c2, p2)
    }

    fn conv_flat_dim(&self) -> usize {
        let (_, _, _, p2) = self.conv_dims();
        p2.0 * p2.1 * CONV2_FILTERS
    }

    /// The fixed classification head of the two-layer model: +1/sqrt(width)
    /// for the first half of the units, -1/sqrt(width) for the second half.
    pub fn fixed_head(&self) -> Vec<f64> {
        match &self.arch {
            Architecture::TwoLayerFixedHead { width } => {
                let scale = 1.0 / (*width as f64).sqrt();
                (0..*width).map(|i| if i < width / 2 { scale } else { -scale }).collect()
            }
            _ => panic!("fixed_head only defined for the two-layer architecture"),
        }
    }
}

/// Regression target for class `label` when classes are placed evenly in [-1, 1].
pub fn label_value(classes: usize, label: usize) -> f64 {
    assert!(classes >= 2);
    -1.0 + 2.0 * label as f64 / (classes - 1) as f64
}

/// Flat parameter vector; layout is fixed by the paired [`ModelSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    values: Vec<f64>,
}

impl ModelParams {
    pub fn from_values(values: Vec<f64>) -> Self {
        ModelParams { values }
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        ModelParams { values: vec![0.0; spec.param_count()] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A labeled minibatch, inputs flattened row-major.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, dim: usize) -> Self {
        assert_eq!(inputs.len(), labels.len() * dim, "batch shape mismatch");
        Batch { inputs, labels, dim }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }
}

/// Whether dropout is active; training mode owns the dropout stream.
pub enum Mode<'a> {
    Eval,
    Train { dropout_rng: &'a mut ChaCha8Rng },
}

fn normal(sample_rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(sample_rng)
}

/// Deterministic parameter initialization.
///
/// Dense and conv layers get He-scaled normal weights with zero biases; the
/// two-layer fixed-head model gets standard-normal entries.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ModelParams {
    let mut init_rng = rng::stream(seed, &[rng::tags::MODEL_INIT]);
    let mut values = vec![0.0; spec.param_count()];
    match &spec.arch {
        Architecture::Mlp { hidden } => {
            let mut offset = 0;
            let mut fan_in = spec.input_dim;
            for &h in hidden.iter().chain(std::iter::once(&spec.classes)) {
                let std = (2.0 / fan_in as f64).sqrt();
                for v in values[offset..offset + fan_in * h].iter_mut() {
                    *v = std * normal(&mut init_rng);
                }
                offset += fan_in * h + h; // biases stay zero
                fan_in = h;
            }
        }
        Architecture::ConvSmall => {
            let g = spec.conv_geometry();
            let mut offset = 0;
            let mut section = |count: usize, fan_in: usize, values: &mut Vec<f64>, offset: &mut usize| {
                let std = (2.0 / fan_in as f64).sqrt();
                for v in values[*offset..*offset + count].iter_mut() {
                    *v = std * normal(&mut init_rng);
                }
                *offset += count;
            };
            let k2 = CONV_KERNEL * CONV_KERNEL;
            section(CONV1_FILTERS * g.channels * k2, g.channels * k2, &mut values, &mut offset);
            offset += CONV1_FILTERS;
            section(CONV2_FILTERS * CONV1_FILTERS * k2, CONV1_FILTERS * k2, &mut values, &mut offset);
            offset += CONV2_FILTERS;
            let flat = spec.conv_flat_dim();
            section(CONV_DENSE_WIDTH * flat, flat, &mut values, &mut offset);
            offset += CONV_DENSE_WIDTH;
            section(spec.classes * CONV_DENSE_WIDTH, CONV_DENSE_WIDTH, &mut values, &mut offset);
        }
        Architecture::TwoLayerFixedHead { .. } => {
            for v in values.iter_mut() {
                *v = StandardNormal.sample(&mut init_rng);
            }
        }
    }
    ModelParams { values }
}

fn check_input(spec: &ModelSpec, x: &[f64]) -> Result<(), NnError> {
    if x.len() != spec.input_dim {
        return Err(NnError::DimensionMismatch(format!(
            "input length {} vs spec input_dim {}",
            x.len(),
            spec.input_dim
        )));
    }
    Ok(())
}

fn check_params(spec: &ModelSpec, params: &ModelParams) -> Result<(), NnError> {
    if params.len() != spec.param_count() {
        return Err(NnError::DimensionMismatch(format!(
            "parameter vector length {} vs spec count {}",
            params.len(),
            spec.param_count()
        )));
    }
    Ok(())
}

/// Forward pass: logits plus the penultimate activation vector.
pub fn forward(
    params: &ModelParams,
    spec: &ModelSpec,
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), NnError> {
    check_params(spec, params)?;
    check_input(spec, x)?;
    match &spec.arch {
        Architecture::Mlp { .. } => {
            let trace = mlp_forward(params, spec, x);
            let representation =
                trace.activations.last().cloned().unwrap_or_else(|| x.to_vec());
            Ok((trace.logits, representation))
        }
        Architecture::ConvSmall => {
            let trace = conv_forward(params, spec, x, None);
            Ok((trace.logits, trace.representation))
        }
        Architecture::TwoLayerFixedHead { .. } => {
            let (hidden, f) = two_layer_forward(params, spec, x);
            let logits = (0..spec.classes)
                .map(|c| {
                    let diff = f - label_value(spec.classes, c);
                    -diff * diff
                })
                .collect();
            Ok((logits, hidden))
        }
    }
}

/// Argmax class prediction; ties break toward the lower index.
pub fn predict(params: &ModelParams, spec: &ModelSpec, x: &[f64]) -> Result<usize, NnError> {
    let (logits, _) = forward(params, spec, x)?;
    Ok(argmax(&logits))
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and its exact analytic gradient over a batch.
///
/// Softmax cross-entropy for the classification architectures; squared loss
/// against the class value for the two-layer fixed-head model.
pub fn loss_grad(
    params: &ModelParams,
    spec: &ModelSpec,
    batch: &Batch,
    mode: Mode,
) -> Result<(f64, ModelParams), NnError> {
    check_params(spec, params)?;
    if batch.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    if batch.dim != spec.input_dim {
        return Err(NnError::DimensionMismatch(format!(
            "batch dim {} vs spec input_dim {}",
            batch.dim, spec.input_dim
        )));
    }
    let mut grad = ModelParams::zeros(spec);
    let inv_n = 1.0 / batch.len() as f64;
    let mut total_loss = 0.0;

    match &spec.arch {
        Architecture::Mlp { .. } => {
            for i in 0..batch.len() {
                let x = batch.input(i);
                let trace = mlp_forward(params, spec, x);
                let (loss, dlogits) = softmax_ce(&trace.logits, batch.labels[i]);
                total_loss += loss * inv_n;
                mlp_backward(params, spec, x, &trace, &dlogits, inv_n, grad.values_mut());
            }
        }
        Architecture::ConvSmall => {
            let mut dropout = match mode {
                Mode::Eval => None,
                Mode::Train { dropout_rng } => Some(dropout_rng),
            };
            for i in 0..batch.len() {
                let x = batch.input(i);
                let mask = dropout.as_mut().map(|rng_ref| {
                    dropout_mask(spec.conv_flat_dim(), CONV_DROPOUT_RATE, rng_ref)
                });
                let trace = conv_forward(params, spec, x, mask);
                let (loss, dlogits) = softmax_ce(&trace.logits, batch.labels[i]);
                total_loss += loss * inv_n;
                conv_backward(params, spec, x, &trace, &dlogits, inv_n, grad.values_mut());
            }
        }
        Architecture::TwoLayerFixedHead { width } => {
            let head = spec.fixed_head();
            for i in 0..batch.len() {
                let x = batch.input(i);
                let (hidden, f) = two_layer_forward(params, spec, x);
                let target = label_value(spec.classes, batch.labels[i]);
                let residual = f - target;
                total_loss += 0.5 * residual * residual * inv_n;
                // dL/dW[j, :] = residual * v_j * phi'(w_j . x) * x
                for j in 0..*width {
                    let z = crate::numerics::dot(
                        &params.values()[j * spec.input_dim..(j + 1) * spec.input_dim],
                        x,
                    );
                    let coeff = residual * head[j] * spec.activation.derivative(z) * inv_n;
                    if coeff == 0.0 {
                        continue;
                    }
                    let row = &mut grad.values_mut()[j * spec.input_dim..(j + 1) * spec.input_dim];
                    for (g, &xv) in row.iter_mut().zip(x) {
                        *g += coeff * xv;
                    }
                }
                let _ = hidden;
            }
        }
    }
    Ok((total_loss, grad))
}

/// Loss and gradient of mean squared distance between the representations of
/// `inputs` and a fixed target representation. Used by the evasion adversary;
/// the target is treated as a constant.
pub fn representation_match_grad(
    params: &ModelParams,
    spec: &ModelSpec,
    inputs: &[Vec<f64>],
    target: &[f64],
) -> Result<(f64, ModelParams), NnError> {
    check_params(spec, params)?;
    if inputs.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    if target.len() != spec.representation_dim() {
        return Err(NnError::DimensionMismatch(format!(
            "target representation length {} vs {}",
            target.len(),
            spec.representation_dim()
        )));
    }
    let mut grad = ModelParams::zeros(spec);
    let inv_n = 1.0 / inputs.len() as f64;
    let mut total = 0.0;
    for x in inputs {
        check_input(spec, x)?;
        match &spec.arch {
            Architecture::Mlp { .. } => {
                let trace = mlp_forward(params, spec, x);
                let rep = trace.activations.last().unwrap();
                let mut drep = vec![0.0; rep.len()];
                for (d, (r, t)) in drep.iter_mut().zip(rep.iter().zip(target)) {
                    let diff = r - t;
                    total += diff * diff * inv_n;
                    *d = 2.0 * diff;
                }
                mlp_backward_from_representation(params, spec, x, &trace, &drep, inv_n, grad.values_mut());
            }
            Architecture::ConvSmall => {
                let trace = conv_forward(params, spec, x, None);
                let mut drep = vec![0.0; trace.representation.len()];
                for (d, (r, t)) in drep.iter_mut().zip(trace.representation.iter().zip(target)) {
                    let diff = r - t;
                    total += diff * diff * inv_n;
                    *d = 2.0 * diff;
                }
                conv_backward_from_representation(params, spec, x, &trace, &drep, inv_n, grad.values_mut());
            }
            Architecture::TwoLayerFixedHead { width } => {
                let (hidden, _) = two_layer_forward(params, spec, x);
                for j in 0..*width {
                    let z = crate::numerics::dot(
                        &params.values()[j * spec.input_dim..(j + 1) * spec.input_dim],
                        x,
                    );
                    let diff = hidden[j] - target[j];
                    total += diff * diff * inv_n;
                    let coeff = 2.0 * diff * spec.activation.derivative(z) * inv_n;
                    let row = &mut grad.values_mut()[j * spec.input_dim..(j + 1) * spec.input_dim];
                    for (g, &xv) in row.iter_mut().zip(x) {
                        *g += coeff * xv;
                    }
                }
            }
        }
    }
    Ok((total, grad))
}

/// One plain SGD step: params - lr * grad.
pub fn sgd_step(params: &ModelParams, grad: &ModelParams, lr: f64) -> ModelParams {
    assert_eq!(params.len(), grad.len(), "sgd_step shape mismatch");
    let values =
        params.values().iter().zip(grad.values()).map(|(p, g)| p - lr * g).collect();
    ModelParams { values }
}

/// In-place vector add: params += scale * delta. Used for server aggregation.
pub fn add_scaled(params: &mut ModelParams, delta: &[f64], scale: f64) {
    assert_eq!(params.len(), delta.len());
    for (p, d) in params.values_mut().iter_mut().zip(delta) {
        *p += scale * d;
    }
}

fn softmax_ce(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = -(exps[label] / sum).ln();
    let mut dlogits: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
    dlogits[label] -= 1.0;
    (loss, dlogits)
}

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

struct MlpTrace {
    /// Pre-activations per hidden layer.
    pre_activations: Vec<Vec<f64>>,
    /// Post-activations per hidden layer; empty when there are none, in which
    /// case the representation is the input itself.
    activations: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn mlp_layer_dims(spec: &ModelSpec) -> Vec<usize> {
    let Architecture::Mlp { hidden } = &spec.arch else { unreachable!() };
    let mut dims = vec![spec.input_dim];
    dims.extend_from_slice(hidden);
    dims.push(spec.classes);
    dims
}

fn mlp_forward(params: &ModelParams, spec: &ModelSpec, x: &[f64]) -> MlpTrace {
    let dims = mlp_layer_dims(spec);
    let values = params.values();
    let mut offset = 0;
    let mut pre_activations = Vec::with_capacity(dims.len().saturating_sub(2));
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(dims.len().saturating_sub(2));
    let mut logits = Vec::new();
    for layer in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
        let input: &[f64] = if layer == 0 { x } else { &activations[layer - 1] };
        let mut z = vec![0.0; fan_out];
        for o in 0..fan_out {
            let row = &values[offset + o * fan_in..offset + (o + 1) * fan_in];
            z[o] = crate::numerics::dot(row, input) + values[offset + fan_in * fan_out + o];
        }
        offset += fan_in * fan_out + fan_out;
        if layer == dims.len() - 2 {
            logits = z;
        } else {
            let a: Vec<f64> = z.iter().map(|&v| spec.activation.apply(v)).collect();
            pre_activations.push(z);
            activations.push(a);
        }
    }
    MlpTrace { pre_activations, activations, logits }
}

fn mlp_backward(
    params: &ModelParams,
    spec: &ModelSpec,
    x: &[f64],
    trace: &MlpTrace,
    dlogits: &[f64],
    scale: f64,
    grad: &mut [f64],
) {
    let dims = mlp_layer_dims(spec);
    mlp_backprop_impl(params, spec, x, trace, dlogits, None, scale, grad, &dims);
}

fn mlp_backward_from_representation(
    params: &ModelParams,
    spec: &ModelSpec,
    x: &[f64],
    trace: &MlpTrace,
    drep: &[f64],
    scale: f64,
    grad: &mut [f64],
) {
    let dims = mlp_layer_dims(spec);
    mlp_backprop_impl(params, spec, x, trace, &[], Some(drep), scale, grad, &dims);
}

/// Shared MLP backprop. Either `dlogits` is set (gradient flows from the
/// output layer) or `drep` is set (gradient starts at the representation and
/// the output layer is untouched).
#[allow(clippy::too_many_arguments)]
fn mlp_backprop_impl(
    params: &ModelParams,
    spec: &ModelSpec,
    x: &[f64],
    trace: &MlpTrace,
    dlogits: &[f64],
    drep: Option<&[f64]>,
    scale: f64,
    grad: &mut [f64],
    dims: &[usize],
) {
    let values = params.values();
    let n_layers = dims.len() - 1;
    // Offsets of each layer's weight block.
    let mut offsets = Vec::with_capacity(n_layers);
    let mut off = 0;
    for layer in 0..n_layers {
        offsets.push(off);
        off += dims[layer] * dims[layer + 1] + dims[layer + 1];
    }

    let input_of = |layer: usize| -> &[f64] {
        if layer == 0 {
            x
        } else {
            &trace.activations[layer - 1]
        }
    };

    let mut delta: Vec<f64>;
    let start_layer;
    match drep {
        None => {
            // Output layer first.
            let layer = n_layers - 1;
            let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
            let input = input_of(layer);
            let base = offsets[layer];
            for o in 0..fan_out {
                let d = dlogits[o] * scale;
                if d != 0.0 {
                    let row = &mut grad[base + o * fan_in..base + (o + 1) * fan_in];
                    for (g, &inp) in row.iter_mut().zip(input) {
                        *g += d * inp;
                    }
                    grad[base + fan_in * fan_out + o] += d;
                }
            }
            if n_layers == 1 {
                return;
            }
            // Propagate into the representation.
            let mut dact = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = dlogits[o];
                if d == 0.0 {
                    continue;
                }
                let row = &values[base + o * fan_in..base + (o + 1) * fan_in];
                for (da, &w) in dact.iter_mut().zip(row) {
                    *da += d * w;
                }
            }
            delta = dact;
            start_layer = n_layers - 2;
        }
        Some(drep) => {
            if n_layers == 1 {
                // Representation is the input; nothing trainable upstream.
                return;
            }
            delta = drep.to_vec();
            start_layer = n_layers - 2;
        }
    }

    // Hidden layers, last to first. `delta` holds dL/d(activation) here.
    let mut layer = start_layer;
    loop {
        let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
        let pre = &trace.pre_activations[layer];
        let input = input_of(layer);
        let base = offsets[layer];
        let mut dz = vec![0.0; fan_out];
        for o in 0..fan_out {
            dz[o] = delta[o] * spec.activation.derivative(pre[o]);
        }
        for o in 0..fan_out {
            let d = dz[o] * scale;
            if d != 0.0 {
                let row = &mut grad[base + o * fan_in..base + (o + 1) * fan_in];
                for (g, &inp) in row.iter_mut().zip(input) {
                    *g += d * inp;
                }
                grad[base + fan_in * fan_out + o] += d;
            }
        }
        if layer == 0 {
            break;
        }
        let mut next_delta = vec![0.0; fan_in];
        for o in 0..fan_out {
            let d = dz[o];
            if d == 0.0 {
                continue;
            }
            let row = &values[base + o * fan_in..base + (o + 1) * fan_in];
            for (nd, &w) in next_delta.iter_mut().zip(row) {
                *nd += d * w;
            }
        }
        delta = next_delta;
        layer -= 1;
    }
}

// ---------------------------------------------------------------------------
// Two-layer fixed head
// ---------------------------------------------------------------------------

fn two_layer_forward(params: &ModelParams, spec: &ModelSpec, x: &[f64]) -> (Vec<f64>, f64) {
    let Architecture::TwoLayerFixedHead { width } = &spec.arch else { unreachable!() };
    let head = spec.fixed_head();
    let mut hidden = vec![0.0; *width];
    let mut f = 0.0;
    for j in 0..*width {
        let z = crate::numerics::dot(&params.values()[j * spec.input_dim..(j + 1) * spec.input_dim], x);
        hidden[j] = spec.activation.apply(z);
        f += head[j] * hidden[j];
    }
    (hidden, f)
}

// ---------------------------------------------------------------------------
// Small conv net
// ---------------------------------------------------------------------------

struct ConvTrace {
    conv1_pre: Vec<f64>,
    pool1: Vec<f64>,
    pool1_src: Vec<usize>,
    conv2_pre: Vec<f64>,
    pool2_src: Vec<usize>,
    /// Flattened pool2 output after the (optional) dropout mask.
    flat: Vec<f64>,
    dropout_mask: Option<Vec<f64>>,
    dense1_pre: Vec<f64>,
    representation: Vec<f64>,
    logits: Vec<f64>,
}

struct ConvOffsets {
    conv1_w: usize,
    conv1_b: usize,
    conv2_w: usize,
    conv2_b: usize,
    dense1_w: usize,
    dense1_b: usize,
    dense2_w: usize,
    dense2_b: usize,
}

fn conv_offsets(spec: &ModelSpec) -> ConvOffsets {
    let g = spec.conv_geometry();
    let k2 = CONV_KERNEL * CONV_KERNEL;
    let conv1_w = 0;
    let conv1_b = conv1_w + CONV1_FILTERS * g.channels * k2;
    let conv2_w = conv1_b + CONV1_FILTERS;
    let conv2_b = conv2_w + CONV2_FILTERS * CONV1_FILTERS * k2;
    let dense1_w = conv2_b + CONV2_FILTERS;
    let dense1_b = dense1_w + CONV_DENSE_WIDTH * spec.conv_flat_dim();
    let dense2_w = dense1_b + CONV_DENSE_WIDTH;
    let dense2_b = dense2_w + spec.classes * CONV_DENSE_WIDTH;
    ConvOffsets { conv1_w, conv1_b, conv2_w, conv2_b, dense1_w, dense1_b, dense2_w, dense2_b }
}

fn dropout_mask(len: usize, rate: f64, dropout_rng: &mut ChaCha8Rng) -> Vec<f64> {
    use rand::Rng;
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| if dropout_rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

/// Valid convolution over channel-last input.
#[allow(clippy::too_many_arguments)]
fn conv2d(
    input: &[f64],
    in_h: usize,
    in_w: usize,
    in_c: usize,
    weights: &[f64],
    biases: &[f64],
    filters: usize,
    out: &mut [f64],
) {
    let out_h = in_h - CONV_KERNEL + 1;
    let out_w = in_w - CONV_KERNEL + 1;
    for f in 0..filters {
        let w_base = f * in_c * CONV_KERNEL * CONV_KERNEL;
        for r in 0..out_h {
            for c in 0..out_w {
                let mut acc = biases[f];
                for kr in 0..CONV_KERNEL {
                    for kc in 0..CONV_KERNEL {
                        let in_base = ((r + kr) * in_w + (c + kc)) * in_c;
                        let w_inner = w_base + (kr * CONV_KERNEL + kc) * in_c;
                        for ch in 0..in_c {
                            acc += weights[w_inner + ch] * input[in_base + ch];
                        }
                    }
                }
                out[(r * out_w + c) * filters + f] = acc;
            }
        }
    }
}

/// 2x2 max pool with stride 2; records winning flat source index per cell.
fn maxpool2(
    input: &[f64],
    in_h: usize,
    in_w: usize,
    channels: usize,
    out: &mut [f64],
    src: &mut [usize],
) {
    let out_h = in_h / 2;
    let out_w = in_w / 2;
    for r in 0..out_h {
        for c in 0..out_w {
            for ch in 0..channels {
                let mut best_idx = ((2 * r) * in_w + 2 * c) * channels + ch;
                let mut best = input[best_idx];
                for dr in 0..2 {
                    for dc in 0..2 {
                        let idx = ((2 * r + dr) * in_w + (2 * c + dc)) * channels + ch;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[(r * out_w + c) * channels + ch] = best;
                src[(r * out_w + c) * channels + ch] = best_idx;
            }
        }
    }
}

fn conv_forward(
    params: &ModelParams,
    spec: &ModelSpec,
    x: &[f64],
    dropout_mask: Option<Vec<f64>>,
) -> ConvTrace {
    let g = spec.conv_geometry();
    let off = conv_offsets(spec);
    let values = params.values();
    let (c1, p1, c2, p2) = spec.conv_dims();
    let act = spec.activation;

    let mut conv1_pre = vec![0.0; c1.0 * c1.1 * CONV1_FILTERS];
    conv2d(
        x,
        g.height,
        g.width,
        g.channels,
        &values[off.conv1_w..off.conv1_b],
        &values[off.conv1_b..off.conv2_w],
        CONV1_FILTERS,
        &mut conv1_pre,
    );
    let conv1_act: Vec<f64> = conv1_pre.iter().map(|&z| act.apply(z)).collect();
    let mut pool1 = vec![0.0; p1.0 * p1.1 * CONV1_FILTERS];
    let mut pool1_src = vec![0usize; pool1.len()];
    maxpool2(&conv1_act, c1.0, c1.1, CONV1_FILTERS, &mut pool1, &mut pool1_src);

    let mut conv2_pre = vec![0.0; c2.0 * c2.1 * CONV2_FILTERS];
    conv2d(
        &pool1,
        p1.0,
        p1.1,
        CONV1_FILTERS,
        &values[off.conv2_w..off.conv2_b],
        &values[off.conv2_b..off.dense1_w],
        CONV2_FILTERS,
        &mut conv2_pre,
    );
    let conv2_act: Vec<f64> = conv2_pre.iter().map(|&z| act.apply(z)).collect();
    let mut pool2 = vec![0.0; p2.0 * p2.1 * CONV2_FILTERS];
    let mut pool2_src = vec![0usize; pool2.len()];
    maxpool2(&conv2_act, c2.0, c2.1, CONV2_FILTERS, &mut pool2, &mut pool2_src);

    let flat: Vec<f64> = match &dropout_mask {
        Some(mask) => pool2.iter().zip(mask).map(|(v, m)| v * m).collect(),
        None => pool2,
    };

    let flat_dim = flat.len();
    let mut dense1_pre = vec![0.0; CONV_DENSE_WIDTH];
    for o in 0..CONV_DENSE_WIDTH {
        let row = &values[off.dense1_w + o * flat_dim..off.dense1_w + (o + 1) * flat_dim];
        dense1_pre[o] = crate::numerics::dot(row, &flat) + values[off.dense1_b + o];
    }
    let representation: Vec<f64> = dense1_pre.iter().map(|&z| act.apply(z)).collect();

    let mut logits = vec![0.0; spec.classes];
    for o in 0..spec.classes {
        let row = &values[off.dense2_w + o * CONV_DENSE_WIDTH..off.dense2_w + (o + 1) * CONV_DENSE_WIDTH];
        logits[o] = crate::numerics::dot(row, &representation) + values[off.dense2_b + o];
    }

    ConvTrace {
        conv1_pre,
        pool1,
        pool1_src,
        conv2_pre,
        pool2_src,
        flat,
        dropout_mask,
        dense1_pre,
        representation,
        logits,
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    params: &ModelParams,
    spec: &ModelSpec,
    x: &[f64],
    trace: &ConvTrace,
    dlogits: &[f64],
    scale: f64,
    grad: &mut [f64],
) {
    let off = conv_offsets(spec);
    let values = params.values();
    let flat_dim = trace.flat.len();

    // Dense head.
    let mut drep = vec![0.0; CONV_DENSE_WIDTH];
    for o in 0..spec.classes {
        let d = dlogits[o];
        let ds = d * scale;
        let w_row = &values[off.dense2_w + o * CONV_DENSE_WIDTH..off.dense2_w + (o + 1) * CONV_DENSE_WIDTH];
        let g_row = &mut grad[off.dense2_w + o * CONV_DENSE_WIDTH..off.dense2_w + (o + 1) * CONV_DENSE_WIDTH];
        for i in 0..CONV_DENSE_WIDTH {
            g_row[i] += ds * trace.representation[i];
            drep[i] += d * w_row[i];
        }
        grad[off.dense2_b + o] += ds;
    }
    conv_backward_tail(params, spec, x, trace, &drep, scale, grad, &off, flat_dim);
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_from_representation(
    params: &ModelParams,
    spec: &ModelSpec,
    x: &[f64],
    trace: &ConvTrace,
    drep: &[f64],
    scale: f64,
    grad: &mut [f64],
) {
    let off = conv_offsets(spec);
    let flat_dim = trace.flat.len();
    conv_backward_tail(params, spec, x, trace, drep, scale, grad, &off, flat_dim);
}

/// Backprop from dL/d(representation) down to the conv weights.
#[allow(clippy::too_many_arguments)]
fn conv_backward_tail(
    params: &ModelParams,
    spec: &ModelSpec,
    x: &[f64],
    trace: &ConvTrace,
    drep: &[f64],
    scale: f64,
    grad: &mut [f64],
    off: &ConvOffsets,
    flat_dim: usize,
) {
    let g = spec.conv_geometry();
    let values = params.values();
    let act = spec.activation;
    let (c1, p1, c2, _p2) = spec.conv_dims();

    // Dense penultimate layer.
    let mut dflat = vec![0.0; flat_dim];
    for o in 0..CONV_DENSE_WIDTH {
        let dz = drep[o] * act.derivative(trace.dense1_pre[o]);
        if dz == 0.0 {
            continue;
        }
        let dzs = dz * scale;
        let w_row = &values[off.dense1_w + o * flat_dim..off.dense1_w + (o + 1) * flat_dim];
        let g_row = &mut grad[off.dense1_w + o * flat_dim..off.dense1_w + (o + 1) * flat_dim];
        for i in 0..flat_dim {
            g_row[i] += dzs * trace.flat[i];
            dflat[i] += dz * w_row[i];
        }
        grad[off.dense1_b + o] += dzs;
    }

    // Undo dropout, route pool2 -> conv2 activations.
    if let Some(mask) = &trace.dropout_mask {
        for (d, m) in dflat.iter_mut().zip(mask) {
            *d *= m;
        }
    }
    let mut dconv2_act = vec![0.0; c2.0 * c2.1 * CONV2_FILTERS];
    for (cell, &src) in trace.pool2_src.iter().enumerate() {
        dconv2_act[src] += dflat[cell];
    }
    let mut dconv2_pre = dconv2_act;
    for (d, &z) in dconv2_pre.iter_mut().zip(&trace.conv2_pre) {
        *d *= act.derivative(z);
    }

    // conv2 weight gradients and pool1 deltas.
    let mut dpool1 = vec![0.0; p1.0 * p1.1 * CONV1_FILTERS];
    let out_w2 = c2.1;
    for f in 0..CONV2_FILTERS {
        let w_base = off.conv2_w + f * CONV1_FILTERS * CONV_KERNEL * CONV_KERNEL;
        for r in 0..c2.0 {
            for c in 0..out_w2 {
                let d = dconv2_pre[(r * out_w2 + c) * CONV2_FILTERS + f];
                if d == 0.0 {
                    continue;
                }
                let ds = d * scale;
                grad[off.conv2_b + f] += ds;
                for kr in 0..CONV_KERNEL {
                    for kc in 0..CONV_KERNEL {
                        let in_base = ((r + kr) * p1.1 + (c + kc)) * CONV1_FILTERS;
                        let w_inner = w_base + (kr * CONV_KERNEL + kc) * CONV1_FILTERS;
                        for ch in 0..CONV1_FILTERS {
                            grad[w_inner + ch] += ds * trace.pool1[in_base + ch];
                            dpool1[in_base + ch] += d * values[w_inner + ch];
                        }
                    }
                }
            }
        }
    }

    // pool1 -> conv1 activations.
    let mut dconv1_act = vec![0.0; c1.0 * c1.1 * CONV1_FILTERS];
    for (cell, &src) in trace.pool1_src.iter().enumerate() {
        dconv1_act[src] += dpool1[cell];
    }
    let mut dconv1_pre = dconv1_act;
    for (d, &z) in dconv1_pre.iter_mut().zip(&trace.conv1_pre) {
        *d *= act.derivative(z);
    }

    // conv1 weight gradients.
    let out_w1 = c1.1;
    for f in 0..CONV1_FILTERS {
        let w_base = off.conv1_w + f * g.channels * CONV_KERNEL * CONV_KERNEL;
        for r in 0..c1.0 {
            for c in 0..out_w1 {
                let d = dconv1_pre[(r * out_w1 + c) * CONV1_FILTERS + f];
                if d == 0.0 {
                    continue;
                }
                let ds = d * scale;
                grad[off.conv1_b + f] += ds;
                for kr in 0..CONV_KERNEL {
                    for kc in 0..CONV_KERNEL {
                        let in_base = ((r + kr) * g.width + (c + kc)) * g.channels;
                        let w_inner = w_base + (kr * CONV_KERNEL + kc) * g.channels;
                        for ch in 0..g.channels {
                            grad[w_inner + ch] += ds * x[in_base + ch];
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

fn arch_to_meta(spec: &ModelSpec) -> String {
    let (tag, detail) = match &spec.arch {
        Architecture::Mlp { hidden } => (
            "mlp",
            hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
        ),
        Architecture::ConvSmall => ("conv_small", String::new()),
        Architecture::TwoLayerFixedHead { width } => ("two_layer_fixed_head", width.to_string()),
    };
    let activation = match spec.activation {
        Activation::Relu => "relu",
        Activation::SmoothRelu => "smooth_relu",
    };
    let geometry = spec
        .geometry
        .map(|geom| format!("{}x{}x{}", geom.height, geom.width, geom.channels))
        .unwrap_or_else(|| "none".into());
    format!(
        "kind = model\narch = {tag}\narch_detail = {detail}\nactivation = {activation}\ninput_dim = {}\ngeometry = {geometry}\nclasses = {}\n",
        spec.input_dim, spec.classes
    )
}

/// Persist a model: header (spec fields, seed) plus the little-endian
/// parameter vector.
pub fn save_model(
    path: &std::path::Path,
    spec: &ModelSpec,
    seed: u64,
    params: &ModelParams,
) -> Result<(), CheckpointError> {
    let mut ck = Checkpoint::new();
    ck.put_text("meta", &format!("{}seed = {seed}\n", arch_to_meta(spec)));
    ck.put_f64s("params", params.values());
    ck.write_to(path)
}

/// Load a model checkpoint; returns (spec, seed, params).
pub fn load_model(path: &std::path::Path) -> Result<(ModelSpec, u64, ModelParams), CheckpointError> {
    let ck = Checkpoint::read_from(path)?;
    let meta = ck.text("meta")?;
    let field = |key: &str| -> Result<String, CheckpointError> {
        for line in meta.lines() {
            if let Some((k, v)) = line.split_once('=') {
                if k.trim() == key {
                    return Ok(v.trim().to_string());
                }
            }
        }
        Err(CheckpointError::Malformed(format!("missing meta key {key}")))
    };
    let arch_tag = field("arch")?;
    let detail = field("arch_detail")?;
    let arch = match arch_tag.as_str() {
        "mlp" => Architecture::Mlp {
            hidden: if detail.is_empty() {
                vec![]
            } else {
                detail
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| CheckpointError::Malformed("bad hidden widths".into()))?
            },
        },
        "conv_small" => Architecture::ConvSmall,
        "two_layer_fixed_head" => Architecture::TwoLayerFixedHead {
            width: detail
                .parse()
                .map_err(|_| CheckpointError::Malformed("bad two-layer width".into()))?,
        },
        other => return Err(CheckpointError::Malformed(format!("unknown arch {other}"))),
    };
    let activation = match field("activation")?.as_str() {
        "relu" => Activation::Relu,
        "smooth_relu" => Activation::SmoothRelu,
        other => return Err(CheckpointError::Malformed(format!("unknown activation {other}"))),
    };
    let geometry = match field("geometry")?.as_str() {
        "none" => None,
        dims => {
            let parts: Vec<usize> = dims
                .split('x')
                .map(|s| s.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| CheckpointError::Malformed("bad geometry".into()))?;
            if parts.len() != 3 {
                return Err(CheckpointError::Malformed("bad geometry".into()));
            }
            Some(ImageGeometry { height: parts[0], width: parts[1], channels: parts[2] })
        }
    };
    let spec = ModelSpec {
        arch,
        activation,
        input_dim: field("input_dim")?
            .parse()
            .map_err(|_| CheckpointError::Malformed("bad input_dim".into()))?,
        geometry,
        classes: field("classes")?
            .parse()
            .map_err(|_| CheckpointError::Malformed("bad classes".into()))?,
    };
    let seed = field("seed")?
        .parse()
        .map_err(|_| CheckpointError::Malformed("bad seed".into()))?;
    let params = ModelParams::from_values(ck.f64s("params")?);
    if params.len() != spec.param_count() {
        return Err(CheckpointError::Malformed(format!(
            "parameter count {} does not match spec ({})",
            params.len(),
            spec.param_count()
        )));
    }
    Ok((spec, seed, params))
}
