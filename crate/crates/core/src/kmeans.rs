//! Seeded Lloyd k-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Result of one clustering run.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub dim: usize,
    /// `k x dim`, row-major.
    pub centroids: Vec<f64>,
    /// Sum of squared distances after seeding, then after every Lloyd update.
    pub trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub(crate) fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

struct Assignment {
    labels: Vec<usize>,
    dists: Vec<f64>,
    sse: f64,
}

fn assign(data: &[f64], dim: usize, centroids: &[f64]) -> Assignment {
    let n = data.len() / dim;
    let mut labels = Vec::with_capacity(n);
    let mut dists = Vec::with_capacity(n);
    let mut sse = 0.0;
    for p in data.chunks_exact(dim) {
        let (j, d) = nearest(p, centroids, dim);
        labels.push(j);
        dists.push(d);
        sse += d;
    }
    Assignment { labels, dists, sse }
}

fn plus_plus_init(data: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&data[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = data
        .chunks_exact(dim)
        .map(|p| sq_dist(p, &centroids[..dim]))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    chosen = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            // falls back to the last positive-weight point on rounding overrun
            chosen.expect("positive total implies a positive weight")
        } else {
            // fewer distinct points than k
            rng.random_range(0..n)
        };
        let c = &data[pick * dim..(pick + 1) * dim];
        centroids.extend_from_slice(c);
        for (w, p) in d2.iter_mut().zip(data.chunks_exact(dim)) {
            *w = w.min(sq_dist(p, c));
        }
    }
    centroids
}

/// Moves each listed centroid onto the point currently farthest from its
/// assigned centroid. A point with positive distance cannot coincide with any
/// centroid, so repaired centroids are distinct from all others.
fn repair(
    data: &[f64],
    dim: usize,
    centroids: &mut [f64],
    broken: &[usize],
    a: &mut Assignment,
) {
    for &j in broken {
        let (far, d) = a
            .dists
            .iter()
            .enumerate()
            .fold((0, -1.0), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        if d <= 0.0 {
            return;
        }
        centroids[j * dim..(j + 1) * dim].copy_from_slice(&data[far * dim..(far + 1) * dim]);
        a.labels[far] = j;
        a.dists[far] = 0.0;
    }
}

/// Clusters `data` (`n x dim`, row-major) into `k` centroids.
pub fn kmeans(data: &[f64], dim: usize, k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(Error::Config(format!("data length {} is not a multiple of dim {dim}", data.len())));
    }
    let n = data.len() / dim;
    if k == 0 || n < k {
        return Err(Error::Config(format!("need at least k={k} samples, have {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(data, dim, k, &mut rng);
    let mut a = assign(data, dim, &centroids);
    let mut trace = vec![a.sse];

    for _ in 0..iters {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &l) in data.chunks_exact(dim).zip(&a.labels) {
            counts[l] += 1;
            for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut empty = Vec::new();
        for j in 0..k {
            if counts[j] == 0 {
                empty.push(j);
                continue;
            }
            let inv = 1.0 / counts[j] as f64;
            for (c, s) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                *c = s * inv;
            }
        }
        if !empty.is_empty() {
            repair(data, dim, &mut centroids, &empty, &mut a);
        }
        let next = assign(data, dim, &centroids);
        trace.push(next.sse);
        let converged = next.labels == a.labels;
        a = next;
        if converged {
            break;
        }
    }

    // Means of distinct clusters can still coincide; keep every centroid live.
    let dupes: Vec<usize> = (1..k)
        .filter(|&j| {
            let cj = &centroids[j * dim..(j + 1) * dim];
            (0..j).any(|i| &centroids[i * dim..(i + 1) * dim] == cj)
        })
        .collect();
    if !dupes.is_empty() {
        repair(data, dim, &mut centroids, &dupes, &mut a);
        let fixed = assign(data, dim, &centroids);
        trace.push(fixed.sse);
    }

    Ok(KMeans { dim, centroids, trace })
}
