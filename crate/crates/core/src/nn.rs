//! Feed-forward network engine: Dense, ReLU and Softmax layers with exact
//! reverse-mode gradients.
//!
//! Parameters are stored per Dense layer as a weight tensor of shape
//! `[in_dim, out_dim]` followed (when the layer has a bias) by a bias tensor of
//! shape `[out_dim]`. A batch is a `[n, in_dim]` tensor, one sample per row.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{MiaError, Result};
use crate::rng;
use crate::tensor::{matmul, matmul_a_bt, matmul_at_b_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { in_dim: usize, out_dim: usize, bias: bool },
    Relu,
    Softmax,
}

/// A validated, ordered list of layers. Layer identifiers are positions in
/// this list, counted from the input.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Architecture {
    layers: Vec<LayerSpec>,
    #[serde(skip)]
    dims: Vec<usize>,
    #[serde(skip)]
    slots: Vec<Option<ParamSlot>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ParamSlot {
    weight: usize,
    bias: Option<usize>,
}

impl<'de> Deserialize<'de> for Architecture {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            layers: Vec<LayerSpec>,
        }
        let raw = Raw::deserialize(de)?;
        Architecture::new(raw.layers).map_err(serde::de::Error::custom)
    }
}

impl Architecture {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let mut current: Option<usize> = None;
        let mut dims = Vec::with_capacity(layers.len());
        let mut slots = Vec::with_capacity(layers.len());
        let mut next_param = 0;
        for (idx, layer) in layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { in_dim, out_dim, bias } => {
                    if in_dim == 0 || out_dim == 0 {
                        return Err(MiaError::config(format!("layer {idx}: zero-width Dense layer")));
                    }
                    if let Some(prev) = current {
                        if prev != in_dim {
                            return Err(MiaError::config(format!(
                                "layer {idx}: Dense expects {in_dim} inputs but receives {prev}"
                            )));
                        }
                    }
                    current = Some(out_dim);
                    let weight = next_param;
                    next_param += 1;
                    let bias = bias.then(|| {
                        next_param += 1;
                        weight + 1
                    });
                    slots.push(Some(ParamSlot { weight, bias }));
                }
                LayerSpec::Relu | LayerSpec::Softmax => {
                    if current.is_none() {
                        return Err(MiaError::config(format!(
                            "layer {idx}: activation before the first Dense layer has no known width"
                        )));
                    }
                    if matches!(layer, LayerSpec::Softmax) && idx + 1 != layers.len() {
                        return Err(MiaError::config("Softmax may only appear as the final layer"));
                    }
                    slots.push(None);
                }
            }
            dims.push(current.unwrap_or(0));
        }
        if layers.is_empty() {
            return Err(MiaError::config("architecture has no layers"));
        }
        Ok(Self { layers, dims, slots })
    }

    /// `input -> [Dense, ReLU]* -> Dense -> Softmax`.
    pub fn classifier(input_dim: usize, hidden: &[usize], num_classes: usize) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(LayerSpec::Dense { in_dim: prev, out_dim: h, bias: true });
            layers.push(LayerSpec::Relu);
            prev = h;
        }
        layers.push(LayerSpec::Dense { in_dim: prev, out_dim: num_classes, bias: true });
        layers.push(LayerSpec::Softmax);
        Self::new(layers)
    }

    /// `input -> [Dense, ReLU]*`, optionally capped by a linear Dense head.
    pub fn relu_stack(input_dim: usize, hidden: &[usize], head: Option<usize>) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(LayerSpec::Dense { in_dim: prev, out_dim: h, bias: true });
            layers.push(LayerSpec::Relu);
            prev = h;
        }
        if let Some(out) = head {
            layers.push(LayerSpec::Dense { in_dim: prev, out_dim: out, bias: true });
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        match self.layers[0] {
            LayerSpec::Dense { in_dim, .. } => in_dim,
            _ => unreachable!("validated: first layer is Dense"),
        }
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("non-empty")
    }

    /// Width of layer `idx`'s output.
    pub fn layer_dim(&self, idx: usize) -> usize {
        self.dims[idx]
    }

    pub fn ends_with_softmax(&self) -> bool {
        matches!(self.layers.last(), Some(LayerSpec::Softmax))
    }

    /// Indices of Dense layers, ascending.
    pub fn dense_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.slots[i].is_some()).collect()
    }

    /// Indices of layers whose output passes through an activation (ReLU or
    /// Softmax), ascending.
    pub fn activation_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Relu | LayerSpec::Softmax))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_dense(&self, idx: usize) -> bool {
        self.slots.get(idx).is_some_and(Option::is_some)
    }

    /// Parameter tensor indices (weight, optional bias) owned by layer `idx`.
    pub fn param_indices(&self, idx: usize) -> Option<(usize, Option<usize>)> {
        self.slots.get(idx).copied().flatten().map(|s| (s.weight, s.bias))
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for layer in &self.layers {
            if let LayerSpec::Dense { in_dim, out_dim, bias } = *layer {
                shapes.push(vec![in_dim, out_dim]);
                if bias {
                    shapes.push(vec![out_dim]);
                }
            }
        }
        shapes
    }

    /// Number of scalar parameters owned by layer `idx`.
    pub fn layer_param_count(&self, idx: usize) -> usize {
        match self.layers[idx] {
            LayerSpec::Dense { in_dim, out_dim, bias } => in_dim * out_dim + if bias { out_dim } else { 0 },
            _ => 0,
        }
    }
}

/// Architecture plus parameters at one training point. Never mutated after
/// construction; updates produce new snapshots.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSnapshot {
    arch: Architecture,
    params: Vec<Tensor>,
    tag: u64,
}

impl ModelSnapshot {
    pub fn new(arch: Architecture, params: Vec<Tensor>, tag: u64) -> Result<Self> {
        let shapes = arch.param_shapes();
        if shapes.len() != params.len() {
            return Err(MiaError::shape(format!(
                "architecture needs {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (shape, p)) in shapes.iter().zip(&params).enumerate() {
            if p.shape() != shape.as_slice() {
                return Err(MiaError::shape(format!(
                    "parameter {i}: expected shape {shape:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        if !params.iter().all(Tensor::is_finite) {
            return Err(MiaError::numeric("non-finite parameter"));
        }
        Ok(Self { arch, params, tag })
    }

    /// Uniform `[-a, a]` weights with `a = sqrt(6 / (in + out))`, zero biases.
    pub fn initialize(arch: &Architecture, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[rng::label::INIT]);
        let mut params = Vec::new();
        for layer in arch.layers() {
            if let LayerSpec::Dense { in_dim, out_dim, bias } = *layer {
                let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
                let data = (0..in_dim * out_dim).map(|_| rng.random_range(-a..=a)).collect();
                params.push(Tensor::new(vec![in_dim, out_dim], data).expect("shape"));
                if bias {
                    params.push(Tensor::zeros(vec![out_dim]));
                }
            }
        }
        Self { arch: arch.clone(), params, tag: 0 }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn tag(&self) -> u64 {
        self.tag
    }

    /// A new snapshot of the same architecture with different parameters.
    pub fn with_params(&self, params: Vec<Tensor>, tag: u64) -> Result<Self> {
        Self::new(self.arch.clone(), params, tag)
    }

    pub fn with_tag(&self, tag: u64) -> Self {
        Self { tag, ..self.clone() }
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = SnapshotDoc {
            format: SNAPSHOT_FORMAT.to_string(),
            tag: self.tag,
            arch: self.arch.layers.clone(),
            params: self.params.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SnapshotDoc = serde_json::from_str(text)?;
        if doc.format != SNAPSHOT_FORMAT {
            return Err(MiaError::Format(format!("unknown snapshot format {:?}", doc.format)));
        }
        Self::new(Architecture::new(doc.arch)?, doc.params, doc.tag)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

pub const SNAPSHOT_FORMAT: &str = "mialab-model/1";

/// On-disk form of a snapshot. Doubles are written in shortest round-trip
/// decimal form and parsed with correct rounding, so save/load is bit-exact.
#[derive(Serialize, Deserialize)]
struct SnapshotDoc {
    format: String,
    tag: u64,
    arch: Vec<LayerSpec>,
    params: Vec<Tensor>,
}

/// Every layer's output for one batch, plus per-sample cross-entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub layer_outputs: Vec<Tensor>,
    pub losses: Vec<f64>,
}

impl ForwardTrace {
    /// Final-layer output, i.e. the class probabilities.
    pub fn probabilities(&self) -> &Tensor {
        self.layer_outputs.last().expect("trace has at least one layer")
    }
}

/// Gradients of one loss with respect to every parameter tensor, in
/// parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.0
    }

    /// Weight and bias gradients of layer `idx`, flattened weights first.
    pub fn layer_flat(&self, arch: &Architecture, idx: usize) -> Option<Vec<f64>> {
        let (w, b) = arch.param_indices(idx)?;
        let mut out = self.0[w].data().to_vec();
        if let Some(b) = b {
            out.extend_from_slice(self.0[b].data());
        }
        Some(out)
    }

    pub fn layer_norm(&self, arch: &Architecture, idx: usize) -> Option<f64> {
        let (w, b) = arch.param_indices(idx)?;
        let mut sq: f64 = self.0[w].data().iter().map(|v| v * v).sum();
        if let Some(b) = b {
            sq += self.0[b].data().iter().map(|v| v * v).sum::<f64>();
        }
        Some(sq.sqrt())
    }
}

fn check_batch(arch: &Architecture, batch: &Tensor) -> Result<()> {
    if batch.shape().len() < 2 {
        return Err(MiaError::shape(format!(
            "batch must be [samples, features...], got shape {:?}",
            batch.shape()
        )));
    }
    if batch.cols() != arch.input_dim() {
        return Err(MiaError::shape(format!(
            "model expects {} input features, batch has {}",
            arch.input_dim(),
            batch.cols()
        )));
    }
    Ok(())
}

fn relu_in_place(values: &mut [f64]) {
    for v in values {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
}

fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|&z| (z - max).exp()));
        let sum: f64 = out[start..].iter().sum();
        for p in &mut out[start..] {
            *p /= sum;
        }
    }
    out
}

/// `-log softmax(z)[label]` as `(max - z[label]) + ln(1 + rest)`, where
/// `rest` sums the shifted exponentials of every logit but the first maximum.
/// Keeps full relative precision when the label dominates and the loss is tiny.
pub fn cross_entropy_from_logits(logits: &[f64], label: usize) -> f64 {
    let top = (0..logits.len()).fold(0, |best, k| if logits[k] > logits[best] { k } else { best });
    let max = logits[top];
    let rest: f64 = logits.iter().enumerate().filter(|&(k, _)| k != top).map(|(_, &z)| (z - max).exp()).sum();
    (max - logits[label]) + rest.ln_1p()
}

/// Runs the batch through every layer and returns each layer's output.
pub fn activations(model: &ModelSnapshot, batch: &Tensor) -> Result<Vec<Tensor>> {
    let arch = model.arch();
    check_batch(arch, batch)?;
    let n = batch.rows();
    let mut outputs: Vec<Tensor> = Vec::with_capacity(arch.len());
    for (idx, layer) in arch.layers().iter().enumerate() {
        let input = outputs.last().map(Tensor::data).unwrap_or(batch.data());
        let data = match *layer {
            LayerSpec::Dense { in_dim, out_dim, .. } => {
                let (w, b) = arch.param_indices(idx).expect("dense layer has params");
                let mut out = vec![0.0; n * out_dim];
                matmul(input, model.params[w].data(), n, in_dim, out_dim, &mut out);
                if let Some(b) = b {
                    let bias = model.params[b].data();
                    for row in out.chunks_mut(out_dim) {
                        for (o, bv) in row.iter_mut().zip(bias) {
                            *o += bv;
                        }
                    }
                }
                out
            }
            LayerSpec::Relu => {
                let mut out = input.to_vec();
                relu_in_place(&mut out);
                out
            }
            LayerSpec::Softmax => softmax_rows(input, arch.layer_dim(idx)),
        };
        if !data.iter().all(|v| v.is_finite()) {
            return Err(MiaError::numeric(format!("non-finite output at layer {idx}")));
        }
        outputs.push(Tensor::new(vec![n, arch.layer_dim(idx)], data)?);
    }
    Ok(outputs)
}

fn check_labels(arch: &Architecture, n: usize, labels: &[usize]) -> Result<()> {
    if !arch.ends_with_softmax() {
        return Err(MiaError::config("classification requires a final Softmax layer"));
    }
    if labels.len() != n {
        return Err(MiaError::shape(format!("{n} samples but {} labels", labels.len())));
    }
    let classes = arch.output_dim();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(MiaError::shape(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// The Softmax input (logits) for the batch.
fn logits<'a>(outputs: &'a [Tensor], batch: &'a Tensor) -> &'a Tensor {
    if outputs.len() >= 2 {
        &outputs[outputs.len() - 2]
    } else {
        batch
    }
}

/// Forward pass of a classifier with per-sample cross-entropy losses.
pub fn forward(model: &ModelSnapshot, batch: &Tensor, labels: &[usize]) -> Result<ForwardTrace> {
    check_batch(model.arch(), batch)?;
    check_labels(model.arch(), batch.rows(), labels)?;
    let layer_outputs = activations(model, batch)?;
    let z = logits(&layer_outputs, batch);
    let losses = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| cross_entropy_from_logits(z.row(i), y))
        .collect::<Vec<_>>();
    if !losses.iter().all(|l| l.is_finite()) {
        return Err(MiaError::numeric("non-finite loss"));
    }
    Ok(ForwardTrace { layer_outputs, losses })
}

/// Propagates `delta` (the gradient with respect to the input of layer
/// `upto`) back to the input. Returns parameter gradients and, if requested,
/// the gradient with respect to the batch.
pub(crate) fn backprop(
    model: &ModelSnapshot,
    batch: &Tensor,
    outputs: &[Tensor],
    upto: usize,
    mut delta: Vec<f64>,
    want_input_grad: bool,
) -> Result<(Gradients, Option<Vec<f64>>)> {
    let arch = model.arch();
    let n = batch.rows();
    let mut grads: Vec<Tensor> = arch.param_shapes().into_iter().map(Tensor::zeros).collect();
    for idx in (0..upto).rev() {
        let input = if idx == 0 { batch.data() } else { outputs[idx - 1].data() };
        match arch.layers()[idx] {
            LayerSpec::Dense { in_dim, out_dim, .. } => {
                let (w, b) = arch.param_indices(idx).expect("dense layer has params");
                matmul_at_b_acc(input, &delta, n, in_dim, out_dim, grads[w].data_mut());
                if let Some(b) = b {
                    let gb = grads[b].data_mut();
                    for row in delta.chunks(out_dim) {
                        for (g, d) in gb.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
                if idx > 0 || want_input_grad {
                    let mut prev = vec![0.0; n * in_dim];
                    matmul_a_bt(&delta, model.params[w].data(), n, out_dim, in_dim, &mut prev);
                    delta = prev;
                }
            }
            LayerSpec::Relu => {
                // Subgradient 0 at 0: the output is positive exactly where the input was.
                for (d, &out) in delta.iter_mut().zip(outputs[idx].data()) {
                    if out <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            LayerSpec::Softmax => {
                return Err(MiaError::config("cannot backpropagate through an interior Softmax"));
            }
        }
    }
    if !grads.iter().all(Tensor::is_finite) {
        return Err(MiaError::numeric("non-finite gradient"));
    }
    Ok((Gradients(grads), want_input_grad.then_some(delta)))
}

/// Forward trace and gradient of the cross-entropy of a single sample.
pub fn sample_trace(model: &ModelSnapshot, x: &[f64], y: usize) -> Result<(ForwardTrace, Gradients)> {
    let batch = Tensor::new(vec![1, x.len()], x.to_vec())?;
    let trace = forward(model, &batch, &[y])?;
    let mut delta = trace.probabilities().data().to_vec();
    delta[y] -= 1.0;
    let (grads, _) = backprop(model, &batch, &trace.layer_outputs, model.arch().len() - 1, delta, false)?;
    Ok((trace, grads))
}

/// Gradient of one sample's cross-entropy with respect to every parameter.
pub fn backward_per_sample(model: &ModelSnapshot, x: &[f64], y: usize) -> Result<Gradients> {
    sample_trace(model, x, y).map(|(_, g)| g)
}

/// Mean cross-entropy over the batch and its gradient.
pub fn batch_gradient(model: &ModelSnapshot, batch: &Tensor, labels: &[usize]) -> Result<(f64, Gradients)> {
    let trace = forward(model, batch, labels)?;
    let n = batch.rows();
    let classes = model.arch().output_dim();
    let mut delta = trace.probabilities().data().to_vec();
    for (i, &y) in labels.iter().enumerate() {
        delta[i * classes + y] -= 1.0;
    }
    let scale = 1.0 / n as f64;
    delta.iter_mut().for_each(|d| *d *= scale);
    let (grads, _) = backprop(model, batch, &trace.layer_outputs, model.arch().len() - 1, delta, false)?;
    let mean_loss = trace.losses.iter().sum::<f64>() * scale;
    Ok((mean_loss, grads))
}

fn axpy(params: &[Tensor], grads: &[Tensor], scale: f64) -> Result<Vec<Tensor>> {
    if params.len() != grads.len() {
        return Err(MiaError::shape(format!(
            "{} parameter tensors but {} gradient tensors",
            params.len(),
            grads.len()
        )));
    }
    params
        .iter()
        .zip(grads)
        .map(|(p, g)| {
            if !p.same_shape(g) {
                return Err(MiaError::shape(format!(
                    "parameter shape {:?} vs gradient shape {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let data: Vec<f64> = p.data().iter().zip(g.data()).map(|(w, d)| w + scale * d).collect();
            if !data.iter().all(|v| v.is_finite()) {
                return Err(MiaError::numeric("parameter update produced a non-finite value"));
            }
            Tensor::new(p.shape().to_vec(), data)
        })
        .collect()
}

/// `W - lr * g`.
pub fn sgd_step(params: &[Tensor], mean_gradients: &[Tensor], lr: f64) -> Result<Vec<Tensor>> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(MiaError::config(format!("learning rate must be positive, got {lr}")));
    }
    axpy(params, mean_gradients, -lr)
}

/// `W + gamma * dL_x/dW`: gradient ascent on a target sample's loss.
/// `gamma = 0` is accepted and leaves the parameters unchanged.
pub fn ascent_step(params: &[Tensor], target_gradients: &[Tensor], gamma: f64) -> Result<Vec<Tensor>> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(MiaError::config(format!("ascent rate must be nonnegative, got {gamma}")));
    }
    axpy(params, target_gradients, gamma)
}
