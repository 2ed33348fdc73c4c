//! Normalized spectral clustering: RBF affinities with a median-distance
//! bandwidth, the symmetric normalized Laplacian, its `k` lowest
//! eigenvectors, row normalization, then seeded k-means with restarts.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;

use crate::error::{MiaError, Result};
use crate::rng::{self, Rng};

pub const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 300;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clustering {
    pub labels: Vec<usize>,
    /// Set when fewer than `k` clusters are populated.
    pub degenerate: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of all pairwise distances; falls back to the mean positive
/// distance when more than half the pairs coincide.
pub fn median_bandwidth(points: &[Vec<f64>]) -> f64 {
    let mut d: Vec<f64> = Vec::with_capacity(points.len() * points.len() / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(sq_dist(&points[i], &points[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let median = if d.len() % 2 == 0 { 0.5 * (d[mid - 1] + d[mid]) } else { d[mid] };
    if median > 0.0 {
        return median;
    }
    let positive: Vec<f64> = d.into_iter().filter(|&x| x > 0.0).collect();
    if positive.is_empty() {
        0.0
    } else {
        positive.iter().sum::<f64>() / positive.len() as f64
    }
}

/// `exp(-d^2 / (2 sigma^2))` off the diagonal, zero on it.
pub fn rbf_affinity(points: &[Vec<f64>], sigma: f64) -> DMatrix<f64> {
    let n = points.len();
    let mut a = DMatrix::zeros(n, n);
    let denom = 2.0 * sigma * sigma;
    for i in 0..n {
        for j in i + 1..n {
            let w = (-sq_dist(&points[i], &points[j]) / denom).exp();
            a[(i, j)] = w;
            a[(j, i)] = w;
        }
    }
    a
}

/// Rows of the `k` lowest eigenvectors of `I - D^-1/2 A D^-1/2`, each scaled
/// to unit length (zero rows stay zero).
pub fn spectral_embedding(affinity: &DMatrix<f64>, k: usize) -> Result<Vec<Vec<f64>>> {
    let n = affinity.nrows();
    if affinity.ncols() != n {
        return Err(MiaError::shape("affinity matrix must be square"));
    }
    if k == 0 || k > n {
        return Err(MiaError::input(format!("cannot take {k} eigenvectors of a {n}x{n} matrix")));
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = affinity.row(i).iter().sum();
            if deg > 0.0 {
                1.0 / deg.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let lap = DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * affinity[(i, j)] * inv_sqrt[j]
    });
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let rows = (0..n)
        .map(|i| {
            let mut r: Vec<f64> = order[..k].iter().map(|&c| eig.eigenvectors[(i, c)]).collect();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                r.iter_mut().for_each(|v| *v /= norm);
            }
            r
        })
        .collect();
    Ok(rows)
}

/// k-means++ seeding followed by Lloyd iterations. Returns labels and inertia.
fn kmeans_once(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> (Vec<usize>, f64) {
    let n = points.len();
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, w) in d.iter().enumerate() {
                if r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[next].clone());
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .expect("k > 0");
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum();
    (labels, inertia)
}

/// Best of `restarts` k-means runs by inertia; earlier runs win ties.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || points.len() < k {
        return Err(MiaError::input(format!("{} points cannot form {k} clusters", points.len())));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for r in 0..restarts.max(1) {
        let mut rng = rng::stream(seed, &[rng::label::CLUSTER, r as u64]);
        let (labels, inertia) = kmeans_once(points, k, &mut rng);
        if best.as_ref().is_none_or(|(_, b)| inertia < *b) {
            best = Some((labels, inertia));
        }
    }
    Ok(best.expect("at least one restart").0)
}

fn finish(labels: Vec<usize>, k: usize) -> Clustering {
    let populated = (0..k).filter(|c| labels.contains(c)).count();
    Clustering { labels, degenerate: populated < k }
}

/// Clusters from a precomputed symmetric affinity matrix.
pub fn spectral_cluster_affinity(affinity: &DMatrix<f64>, k: usize, seed: u64) -> Result<Clustering> {
    let embedding = spectral_embedding(affinity, k)?;
    Ok(finish(kmeans(&embedding, k, KMEANS_RESTARTS, seed)?, k))
}

pub fn spectral_cluster(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering> {
    if k == 0 || points.len() < k {
        return Err(MiaError::input(format!("{} points cannot form {k} clusters", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(MiaError::shape("points have different dimensions"));
    }
    if points.iter().all(|p| p == &points[0]) {
        return Ok(Clustering { labels: vec![0; points.len()], degenerate: true });
    }
    let sigma = median_bandwidth(points);
    spectral_cluster_affinity(&rbf_affinity(points, sigma), k, seed)
}
