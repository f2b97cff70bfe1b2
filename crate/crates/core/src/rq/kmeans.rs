//! Lloyd's k-means with k-means++ seeding.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::util::sq_dist;

/// Relative scale of the noise added to data points that seed surplus
/// centroids when there are fewer distinct points than clusters.
const PERTURB: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct KMeans {
    /// `k x D`.
    pub centroids: Array2<f64>,
    /// Nearest centroid of every point under the final centroids.
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each assignment step, in order; the
    /// last entry corresponds to `assignments`.
    pub energy: Vec<f64>,
}

/// Index of the nearest row of `centroids` (lowest index on ties) and its
/// squared distance.
pub fn nearest(centroids: &ArrayView2<f64>, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(c.as_slice().unwrap(), x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn row(data: &ArrayView2<f64>, i: usize) -> Vec<f64> {
    data.row(i).to_vec()
}

fn perturbed(data: &ArrayView2<f64>, i: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, scale).unwrap();
    data.row(i).iter().map(|v| v + noise.sample(rng)).collect()
}

fn seed_plus_plus(data: &ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (n, d) = data.dim();
    let rms = (data.iter().map(|v| v * v).sum::<f64>() / (n * d) as f64).sqrt();
    let scale = PERTURB * if rms > 0.0 { rms } else { 1.0 };
    let mut centroids = Array2::zeros((k, d));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(data.row(i).as_slice().unwrap(), &row(data, first)))
        .collect();
    for j in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // Guard against rounding landing on a zero-weight tail point.
            while dist[chosen] == 0.0 {
                chosen -= 1;
            }
            row(data, chosen)
        } else {
            let i = rng.gen_range(0..n);
            perturbed(data, i, scale, rng)
        };
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(data.row(i).as_slice().unwrap(), &pick));
        }
        centroids
            .row_mut(j)
            .assign(&ndarray::ArrayView1::from(&pick));
    }
    centroids
}

fn assign(data: &ArrayView2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    let cv = centroids.view();
    data.rows()
        .into_iter()
        .map(|x| nearest(&cv, x.as_slice().unwrap()))
        .unzip()
}

/// Clusters the rows of `data` (must be contiguous, non-empty) into `k`
/// groups with `iters` Lloyd iterations.
pub fn kmeans(data: &ArrayView2<f64>, k: usize, iters: usize, rng: &mut ChaCha8Rng) -> KMeans {
    let (n, d) = data.dim();
    assert!(n > 0 && k > 0 && iters > 0);
    let mut centroids = seed_plus_plus(data, k, rng);
    let (mut assignments, mut dists) = assign(data, &centroids);
    let mut energy = vec![dists.iter().sum()];
    for _ in 0..iters {
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            let mut s = sums.row_mut(a);
            s += &data.row(i);
            counts[a] += 1;
        }
        let mut taken = vec![false; n];
        for (j, &cnt) in counts.iter().enumerate().take(k) {
            if cnt > 0 {
                let mut c = centroids.row_mut(j);
                c.assign(&sums.row(j));
                c /= cnt as f64;
                continue;
            }
            // Empty cluster: move it onto the point farthest from its centroid.
            let far = (0..n)
                .filter(|&i| !taken[i])
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = far.filter(|&i| dists[i] > 0.0) {
                taken[i] = true;
                centroids.row_mut(j).assign(&data.row(i));
            }
        }
        let (next, next_d) = assign(data, &centroids);
        let changed = next != assignments;
        assignments = next;
        dists = next_d;
        energy.push(dists.iter().sum());
        if !changed {
            break;
        }
    }
    KMeans {
        centroids,
        assignments,
        energy,
    }
}
