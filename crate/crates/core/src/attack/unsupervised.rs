//! Label-free attack: spectral clustering of per-layer gradient norms. The
//! cluster whose final-layer gradient norm is lower on average is declared
//! the member cluster.

use crate::attack::spectral::spectral_cluster;
use crate::error::{MiaError, Result};
use crate::features::{gradient_norms, WhiteBoxFeatures};

#[derive(Clone, Debug, PartialEq)]
pub struct UnsupervisedOutcome {
    /// Predicted membership per input sample.
    pub members: Vec<bool>,
    /// Cluster index per sample as produced by the clustering.
    pub clusters: Vec<usize>,
    pub member_cluster: usize,
}

fn standardize_columns(rows: &mut [Vec<f64>]) {
    let n = rows.len() as f64;
    let dim = rows[0].len();
    for d in 0..dim {
        let mean = rows.iter().map(|r| r[d]).sum::<f64>() / n;
        let sd = (rows.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / n).sqrt();
        let scale = if sd > 1e-12 { sd } else { 1.0 };
        for r in rows.iter_mut() {
            r[d] = (r[d] - mean) / scale;
        }
    }
}

pub fn attack_unsupervised(features: &[WhiteBoxFeatures], seed: u64) -> Result<UnsupervisedOutcome> {
    if features.len() < 4 {
        return Err(MiaError::input("unsupervised attack needs at least four samples"));
    }
    let raw: Vec<Vec<f64>> = features
        .iter()
        .map(|f| gradient_norms(f).map(|per_snapshot| per_snapshot.concat()))
        .collect::<Result<_>>()?;
    let dim = raw[0].len();
    if raw.iter().any(|r| r.len() != dim) {
        return Err(MiaError::shape("samples carry different numbers of gradient norms"));
    }
    let mut points = raw.clone();
    standardize_columns(&mut points);
    let clustering = spectral_cluster(&points, 2, seed)?;
    if clustering.degenerate {
        return Err(MiaError::Degenerate("gradient norms collapsed into a single cluster".into()));
    }

    let mut sum = [0.0; 2];
    let mut count = [0usize; 2];
    for (r, &c) in raw.iter().zip(&clustering.labels) {
        sum[c] += r[dim - 1];
        count[c] += 1;
    }
    let mean = [sum[0] / count[0] as f64, sum[1] / count[1] as f64];
    let member_cluster = if mean[0] < mean[1] {
        0
    } else if mean[1] < mean[0] {
        1
    } else if count[1] < count[0] {
        1
    } else {
        0
    };
    Ok(UnsupervisedOutcome {
        members: clustering.labels.iter().map(|&c| c == member_cluster).collect(),
        clusters: clustering.labels,
        member_cluster,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{LayerGradient, SnapshotFeatures};

    fn with_norms(norms: &[f64]) -> WhiteBoxFeatures {
        WhiteBoxFeatures {
            blocks: vec![SnapshotFeatures {
                tag: 0,
                layer_outputs: vec![],
                output_probs: None,
                loss: None,
                gradients: norms.iter().map(|&n| LayerGradient::Norm(n)).collect(),
            }],
            label_onehot: None,
        }
    }

    #[test]
    fn constructed_separation_is_recovered() {
        let mut features = Vec::new();
        let mut truth = Vec::new();
        for i in 0..20 {
            let member = i % 2 == 0;
            features.push(with_norms(&[if member { 0.0 } else { 1.0 }]));
            truth.push(member);
        }
        let out = attack_unsupervised(&features, 3).unwrap();
        assert_eq!(out.members, truth);
    }

    #[test]
    fn identical_norms_are_degenerate() {
        let features = vec![with_norms(&[0.5, 0.5]); 8];
        assert!(matches!(attack_unsupervised(&features, 0), Err(MiaError::Degenerate(_))));
    }

    #[test]
    fn needs_enough_samples_with_gradients() {
        assert!(attack_unsupervised(&vec![with_norms(&[1.0]); 3], 0).is_err());
        assert!(attack_unsupervised(&vec![with_norms(&[]); 6], 0).is_err());
    }
}
