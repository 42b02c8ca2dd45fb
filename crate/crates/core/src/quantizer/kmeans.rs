//! Seeded Lloyd's k-means with k-means++ seeding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{child_seed, RngStream, Tensor2D};
use crate::parallel::map_chunks;

/// Points per parallel chunk. Fixed so the reduction tree never depends on worker count.
const CHUNK: usize = 512;

/// Fitted cluster centres.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub centroids: Tensor2D<f32>,
    /// Sum of squared distances of the training points to their nearest centroid.
    pub inertia: f64,
    pub seed: u64,
}

impl Codebook {
    pub fn new(centroids: Tensor2D<f32>, inertia: f64, seed: u64) -> Result<Self> {
        if centroids.rows() == 0 || centroids.cols() == 0 {
            return Err(Error::InvalidArgument("codebook needs k >= 1 and dim >= 1".into()));
        }
        if !centroids.is_finite() {
            return Err(Error::NonFinite("codebook centroids".into()));
        }
        Ok(Self {
            centroids,
            inertia,
            seed,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest-inertia fit wins.
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 50,
            seed: 0,
            max_iter: 100,
            tol: 1e-4,
            restarts: 1,
        }
    }
}

/// A fit plus its per-iteration inertia trace.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub codebook: Codebook,
    pub labels: Vec<u32>,
    pub history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Nearest centroid by squared Euclidean distance; ties go to the lower index.
fn nearest(point: &[f32], centroids: &Tensor2D<f32>) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for j in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(j));
        if d < best.1 {
            best = (j as u32, d);
        }
    }
    best
}

/// Labels and squared distances for every point, computed in parallel chunks.
fn assign_with_dist(centroids: &Tensor2D<f32>, points: &Tensor2D<f32>) -> (Vec<u32>, Vec<f64>) {
    let parts = map_chunks(points.rows(), CHUNK, |s, e| {
        (s..e)
            .map(|i| nearest(points.row(i), centroids))
            .collect::<Vec<_>>()
    });
    parts.into_iter().flatten().unzip()
}

/// Maps each point to its nearest centroid (lowest index on ties).
pub fn assign(cb: &Codebook, points: &Tensor2D<f32>) -> Result<Vec<u32>> {
    if points.cols() != cb.dim() {
        return Err(Error::Shape(format!(
            "points have {} columns, codebook dimension is {}",
            points.cols(),
            cb.dim()
        )));
    }
    Ok(assign_with_dist(&cb.centroids, points).0)
}

/// Sum of squared distances from each point to its nearest centroid.
pub fn inertia(cb: &Codebook, points: &Tensor2D<f32>) -> Result<f64> {
    if points.cols() != cb.dim() {
        return Err(Error::Shape("inertia: dimension mismatch".into()));
    }
    Ok(assign_with_dist(&cb.centroids, points).1.iter().sum())
}

fn kmeans_pp_init(points: &Tensor2D<f32>, k: usize, rng: &mut RngStream) -> Tensor2D<f32> {
    let n = points.rows();
    let mut centroids = Tensor2D::zeros(k, points.cols());
    let first = rng.below(n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        centroids.row_mut(j).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    centroids
}

/// Single seeded k-means run with the per-iteration inertia trace.
pub fn kmeans_fit_traced(
    points: &Tensor2D<f32>,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansFit> {
    if points.cols() == 0 {
        return Err(Error::InvalidArgument("zero-dimensional points".into()));
    }
    if k == 0 || points.rows() < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs at least k points (k = {k}, {} points)",
            points.rows()
        )));
    }
    if max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
    }
    if !points.is_finite() {
        return Err(Error::NonFinite("k-means input points".into()));
    }
    let dim = points.cols();
    let mut rng = RngStream::new(seed, "kmeans-init");
    let mut centroids = kmeans_pp_init(points, k, &mut rng);
    let mut history = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iter {
        iterations += 1;
        let (mut labels, mut dist) = assign_with_dist(&centroids, points);
        repair_empty_clusters(k, &mut labels, &mut dist);
        history.push(dist.iter().sum());

        // Partial sums per chunk, reduced in chunk order.
        let partials = map_chunks(points.rows(), CHUNK, |s, e| {
            let mut sums = vec![0.0f64; k * dim];
            let mut counts = vec![0usize; k];
            for i in s..e {
                let c = labels[i] as usize;
                counts[c] += 1;
                for (acc, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(points.row(i)) {
                    *acc += v as f64;
                }
            }
            (sums, counts)
        });
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (ps, pc) in partials {
            for (a, b) in sums.iter_mut().zip(ps) {
                *a += b;
            }
            for (a, b) in counts.iter_mut().zip(pc) {
                *a += b;
            }
        }

        let mut max_shift = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let n = counts[c] as f64;
            let mut shift = 0.0;
            for (d, cv) in centroids.row_mut(c).iter_mut().enumerate() {
                let new = (sums[c * dim + d] / n) as f32;
                let delta = new as f64 - *cv as f64;
                shift += delta * delta;
                *cv = new;
            }
            max_shift = max_shift.max(shift.sqrt());
        }
        if max_shift < tol {
            break;
        }
    }

    let (labels, dist) = assign_with_dist(&centroids, points);
    let final_inertia: f64 = dist.iter().sum();
    history.push(final_inertia);
    Ok(KMeansFit {
        codebook: Codebook::new(centroids, final_inertia, seed)?,
        labels,
        history,
        iterations,
    })
}

/// Moves each empty cluster onto the point currently farthest from its centroid.
fn repair_empty_clusters(k: usize, labels: &mut [u32], dist: &mut [f64]) {
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l as usize] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut far: Option<usize> = None;
        for i in 0..dist.len() {
            if counts[labels[i] as usize] <= 1 {
                continue;
            }
            if far.is_none_or(|f| dist[i] > dist[f]) {
                far = Some(i);
            }
        }
        let Some(i) = far else { break };
        counts[labels[i] as usize] -= 1;
        labels[i] = c as u32;
        dist[i] = 0.0;
        counts[c] = 1;
    }
}

/// Seeded k-means: k-means++ initialisation from `RngStream(seed, "kmeans-init")`, then
/// Lloyd iterations until the largest centroid shift drops below `tol`.
pub fn kmeans_fit(
    points: &Tensor2D<f32>,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<Codebook> {
    kmeans_fit_traced(points, k, seed, max_iter, tol).map(|f| f.codebook)
}

/// Best of `cfg.restarts` runs. Restart 0 uses `cfg.seed` itself, so a single restart
/// is identical to [`kmeans_fit`].
pub fn kmeans_fit_restarts(points: &Tensor2D<f32>, cfg: &KMeansConfig) -> Result<KMeansFit> {
    let mut best: Option<KMeansFit> = None;
    for r in 0..cfg.restarts.max(1) {
        let seed = if r == 0 { cfg.seed } else { child_seed(cfg.seed, r as u64) };
        let fit = kmeans_fit_traced(points, cfg.k, seed, cfg.max_iter, cfg.tol)?;
        if best.as_ref().is_none_or(|b| fit.codebook.inertia < b.codebook.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}
