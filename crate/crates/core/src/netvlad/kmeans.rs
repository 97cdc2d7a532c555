use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest center; ties go to the lower index.
fn nearest(p: &[f64], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.chunks(dim).enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_seed(points: &[f64], m: usize, dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..m);
    centers.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points
        .chunks(dim)
        .map(|p| sq_dist(p, &centers[..dim]))
        .collect();
    for _ in 1..k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // Every point coincides with a chosen center.
            Err(_) => rng.random_range(0..m),
        };
        let c = points[next * dim..(next + 1) * dim].to_vec();
        for (dv, p) in d2.iter_mut().zip(points.chunks(dim)) {
            *dv = dv.min(sq_dist(p, &c));
        }
        centers.extend_from_slice(&c);
    }
    centers
}

/// Lloyd's algorithm with k-means++ seeding over `m = sample.len() / dim`
/// row-major points.
///
/// Stops after `max_iters` rounds or once no center moves more than `tol`
/// (Euclidean). An emptied cluster is re-seeded with the point farthest from
/// its assigned center.
pub fn kmeans_init<T: Scalar>(
    sample: &[T],
    dim: usize,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<Vec<T>> {
    if dim == 0 || k == 0 || sample.len() % dim != 0 {
        return Err(Error::Config(format!(
            "k-means needs K >= 1 and a sample of whole {dim}-vectors"
        )));
    }
    let m = sample.len() / dim;
    if m < k {
        return Err(Error::Data(format!("k-means: {m} points for {k} clusters")));
    }
    let points: Vec<f64> = sample.iter().map(|v| v.as_f64()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_seed(&points, m, dim, k, &mut rng);
    let mut assign = vec![0usize; m];
    let mut dist = vec![0.0f64; m];

    for _ in 0..max_iters {
        for (i, p) in points.chunks(dim).enumerate() {
            (assign[i], dist[i]) = nearest(p, &centers, dim);
        }
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, p) in points.chunks(dim).enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i] * dim..].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut moved = 0.0f64;
        for c in 0..k {
            let new: Vec<f64> = if counts[c] == 0 {
                let far = (0..m)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("m >= 1");
                dist[far] = 0.0;
                points[far * dim..(far + 1) * dim].to_vec()
            } else {
                sums[c * dim..(c + 1) * dim]
                    .iter()
                    .map(|s| s / counts[c] as f64)
                    .collect()
            };
            let old = &mut centers[c * dim..(c + 1) * dim];
            moved = moved.max(sq_dist(old, &new).sqrt());
            old.copy_from_slice(&new);
        }
        if moved < tol {
            break;
        }
    }
    Ok(centers.into_iter().map(T::from_f64).collect())
}

/// Mean squared distance of each point to its nearest center.
pub fn distortion<T: Scalar>(sample: &[T], centers: &[T], dim: usize) -> f64 {
    let c: Vec<f64> = centers.iter().map(|v| v.as_f64()).collect();
    let m = sample.len() / dim;
    sample
        .chunks(dim)
        .map(|p| {
            let p: Vec<f64> = p.iter().map(|v| v.as_f64()).collect();
            nearest(&p, &c, dim).1
        })
        .sum::<f64>()
        / m.max(1) as f64
}
