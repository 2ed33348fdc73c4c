//! White-box feature extraction: for each observed snapshot, selected layer
//! outputs, the output probabilities, the loss and per-layer gradients of one
//! sample; plus its one-hot label.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MiaError, Result};
use crate::nn::{sample_trace, Architecture, ModelSnapshot};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Full,
    PerLayerNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    /// Layers whose outputs are recorded.
    #[serde(default)]
    pub observed_layers: BTreeSet<usize>,
    /// Dense layers whose parameter gradients are recorded.
    #[serde(default)]
    pub gradient_layers: BTreeSet<usize>,
    #[serde(default)]
    pub gradient_mode: GradientMode,
    #[serde(default = "yes")]
    pub include_output_probs: bool,
    #[serde(default = "yes")]
    pub include_loss: bool,
    #[serde(default = "yes")]
    pub include_label: bool,
}

fn yes() -> bool {
    true
}

impl FeatureConfig {
    /// Final output, final Dense-layer gradient, loss and label.
    pub fn default_for(arch: &Architecture) -> Self {
        Self {
            observed_layers: BTreeSet::new(),
            gradient_layers: arch.dense_layers().last().copied().into_iter().collect(),
            gradient_mode: GradientMode::Full,
            include_output_probs: true,
            include_loss: true,
            include_label: true,
        }
    }

    /// Per-layer gradient norms of every Dense layer, nothing else.
    pub fn gradient_norms_for(arch: &Architecture) -> Self {
        Self {
            observed_layers: BTreeSet::new(),
            gradient_layers: arch.dense_layers().into_iter().collect(),
            gradient_mode: GradientMode::PerLayerNorm,
            include_output_probs: false,
            include_loss: false,
            include_label: false,
        }
    }

    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        if let Some(&bad) = self.observed_layers.iter().find(|&&i| i >= arch.len()) {
            return Err(MiaError::config(format!("observed layer {bad} does not exist")));
        }
        if let Some(&bad) = self.gradient_layers.iter().find(|&&i| !arch.is_dense(i)) {
            return Err(MiaError::config(format!("gradient layer {bad} is not a Dense layer")));
        }
        if !arch.ends_with_softmax() {
            return Err(MiaError::config("feature extraction needs a classifier"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerGradient {
    /// Flattened weight gradient followed by the bias gradient.
    Full(Vec<f64>),
    Norm(f64),
}

impl LayerGradient {
    pub fn norm(&self) -> f64 {
        match self {
            Self::Full(v) => v.iter().map(|g| g * g).sum::<f64>().sqrt(),
            Self::Norm(n) => *n,
        }
    }
}

/// Observables from one snapshot. Components absent from the extraction
/// config are empty or `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotFeatures {
    pub tag: u64,
    pub layer_outputs: Vec<Vec<f64>>,
    pub output_probs: Option<Vec<f64>>,
    pub loss: Option<f64>,
    pub gradients: Vec<LayerGradient>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhiteBoxFeatures {
    /// One block per snapshot, ascending by tag.
    pub blocks: Vec<SnapshotFeatures>,
    pub label_onehot: Option<Vec<f64>>,
}

impl WhiteBoxFeatures {
    pub fn snapshot_tags(&self) -> Vec<u64> {
        self.blocks.iter().map(|b| b.tag).collect()
    }
}

fn check_congruent(snapshots: &[&ModelSnapshot]) -> Result<()> {
    let first = snapshots.first().ok_or_else(|| MiaError::input("no snapshots to extract from"))?;
    if snapshots.iter().any(|s| s.arch() != first.arch()) {
        return Err(MiaError::config("snapshots have different architectures"));
    }
    Ok(())
}

/// Extracts the configured observables of `(x, y)` from every snapshot.
/// Blocks come out in ascending tag order whatever the input order.
pub fn extract(snapshots: &[ModelSnapshot], x: &[f64], y: usize, cfg: &FeatureConfig) -> Result<WhiteBoxFeatures> {
    let mut ordered: Vec<&ModelSnapshot> = snapshots.iter().collect();
    check_congruent(&ordered)?;
    ordered.sort_by_key(|s| s.tag());
    let arch = ordered[0].arch();
    cfg.validate(arch)?;
    let blocks = ordered
        .iter()
        .map(|snap| {
            let (trace, grads) = sample_trace(snap, x, y)?;
            let layer_outputs = cfg
                .observed_layers
                .iter()
                .map(|&i| trace.layer_outputs[i].data().to_vec())
                .collect();
            let gradients = cfg
                .gradient_layers
                .iter()
                .map(|&i| match cfg.gradient_mode {
                    GradientMode::Full => LayerGradient::Full(grads.layer_flat(arch, i).expect("validated")),
                    GradientMode::PerLayerNorm => LayerGradient::Norm(grads.layer_norm(arch, i).expect("validated")),
                })
                .collect();
            Ok(SnapshotFeatures {
                tag: snap.tag(),
                layer_outputs,
                output_probs: cfg.include_output_probs.then(|| trace.probabilities().data().to_vec()),
                loss: cfg.include_loss.then(|| trace.losses[0]),
                gradients,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let label_onehot = cfg.include_label.then(|| {
        let mut v = vec![0.0; arch.output_dim()];
        v[y] = 1.0;
        v
    });
    Ok(WhiteBoxFeatures { blocks, label_onehot })
}

/// L2 norm of each recorded gradient, per snapshot then per layer.
pub fn gradient_norms(features: &WhiteBoxFeatures) -> Result<Vec<Vec<f64>>> {
    if features.blocks.iter().all(|b| b.gradients.is_empty()) {
        return Err(MiaError::input("features carry no gradients"));
    }
    Ok(features.blocks.iter().map(|b| b.gradients.iter().map(LayerGradient::norm).collect()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmentKind {
    LayerOutput { ordinal: usize },
    OutputProbs,
    Loss,
    Gradient { ordinal: usize },
    GradientNorm { ordinal: usize },
    Label,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    /// Position of the snapshot block, absent for the label.
    pub block: Option<usize>,
    pub tag: Option<u64>,
    pub offset: usize,
    pub len: usize,
}

/// Layout of a flattened feature vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGeometry {
    pub segments: Vec<Segment>,
}

impl FeatureGeometry {
    pub fn total_len(&self) -> usize {
        self.segments.last().map(|s| s.offset + s.len).unwrap_or(0)
    }

    pub fn segment_lens(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.len).collect()
    }
}

/// Flattens features in canonical order: per snapshot (ascending tag) the
/// layer outputs, output probabilities, loss and gradients; then the label.
pub fn feature_vector(features: &WhiteBoxFeatures) -> (Vec<f64>, FeatureGeometry) {
    let mut values = Vec::new();
    let mut segments = Vec::new();
    let mut push = |kind: SegmentKind, at: Option<(usize, u64)>, data: &[f64]| {
        let (block, tag) = (at.map(|a| a.0), at.map(|a| a.1));
        segments.push(Segment { kind, block, tag, offset: values.len(), len: data.len() });
        values.extend_from_slice(data);
    };
    for (index, block) in features.blocks.iter().enumerate() {
        let tag = Some((index, block.tag));
        for (ordinal, out) in block.layer_outputs.iter().enumerate() {
            push(SegmentKind::LayerOutput { ordinal }, tag, out);
        }
        if let Some(p) = &block.output_probs {
            push(SegmentKind::OutputProbs, tag, p);
        }
        if let Some(l) = block.loss {
            push(SegmentKind::Loss, tag, &[l]);
        }
        for (ordinal, g) in block.gradients.iter().enumerate() {
            match g {
                LayerGradient::Full(v) => push(SegmentKind::Gradient { ordinal }, tag, v),
                LayerGradient::Norm(n) => push(SegmentKind::GradientNorm { ordinal }, tag, &[*n]),
            }
        }
    }
    if let Some(label) = &features.label_onehot {
        push(SegmentKind::Label, None, label);
    }
    (values, FeatureGeometry { segments })
}

/// Inverse of [`feature_vector`].
pub fn unflatten(values: &[f64], geometry: &FeatureGeometry) -> Result<WhiteBoxFeatures> {
    if values.len() != geometry.total_len() {
        return Err(MiaError::shape(format!(
            "vector has {} entries, geometry describes {}",
            values.len(),
            geometry.total_len()
        )));
    }
    let mut blocks: Vec<SnapshotFeatures> = Vec::new();
    let mut label_onehot = None;
    for seg in &geometry.segments {
        let data = &values[seg.offset..seg.offset + seg.len];
        let (Some(index), Some(tag)) = (seg.block, seg.tag) else {
            label_onehot = Some(data.to_vec());
            continue;
        };
        if index == blocks.len() {
            blocks.push(SnapshotFeatures { tag, layer_outputs: vec![], output_probs: None, loss: None, gradients: vec![] });
        }
        let block = blocks
            .get_mut(index)
            .ok_or_else(|| MiaError::Format(format!("segment refers to block {index} out of order")))?;
        match seg.kind {
            SegmentKind::LayerOutput { .. } => block.layer_outputs.push(data.to_vec()),
            SegmentKind::OutputProbs => block.output_probs = Some(data.to_vec()),
            SegmentKind::Loss => block.loss = Some(data[0]),
            SegmentKind::Gradient { .. } => block.gradients.push(LayerGradient::Full(data.to_vec())),
            SegmentKind::GradientNorm { .. } => block.gradients.push(LayerGradient::Norm(data[0])),
            SegmentKind::Label => return Err(MiaError::Format("label segment carries a tag".into())),
        }
    }
    Ok(WhiteBoxFeatures { blocks, label_onehot })
}

/// Writes one feature vector per line, optionally followed by a membership
/// column, plus `<path>.geometry.json` describing the columns.
pub fn write_feature_matrix(path: &Path, rows: &[(Vec<f64>, Option<bool>)], geometry: &FeatureGeometry) -> Result<()> {
    let mut text = String::new();
    for (values, member) in rows {
        if values.len() != geometry.total_len() {
            return Err(MiaError::shape("feature row does not match geometry"));
        }
        let mut first = true;
        for v in values {
            if !first {
                text.push(',');
            }
            first = false;
            write!(text, "{v:?}").expect("write to string");
        }
        if let Some(m) = member {
            write!(text, ",{}", u8::from(*m)).expect("write to string");
        }
        text.push('\n');
    }
    fs::write(path, text)?;
    let sidecar = path.with_extension("geometry.json");
    fs::write(sidecar, serde_json::to_string_pretty(geometry)?)?;
    Ok(())
}
