//! Lloyd's k-means with k-means++ seeding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::squared_distance;

#[derive(Clone, Debug)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Stop when the relative inertia change falls below this.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 15,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(x, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

pub fn kmeans(data: &[Vec<f64>], cfg: &KMeansConfig, rng: &mut ChaCha8Rng) -> Result<KMeans> {
    if cfg.k == 0 || data.len() < cfg.k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs at least k={} points, got {}",
            cfg.k,
            data.len()
        )));
    }
    let dim = data[0].len();
    if data.iter().any(|x| x.len() != dim) {
        return Err(Error::InvalidArgument("k-means points differ in dimension".into()));
    }

    // k-means++: each new center drawn with probability ∝ D(x)².
    let mut centroids = vec![data[rng.random_range(0..data.len())].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| squared_distance(x, &centroids[0])).collect();
    while centroids.len() < cfg.k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = data.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..data.len())
        };
        centroids.push(data[pick].clone());
        for (i, x) in data.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(x, &centroids[centroids.len() - 1]));
        }
    }

    let mut assignments = vec![0; data.len()];
    let mut inertia = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..cfg.max_iter {
        iterations = it + 1;
        let mut new_inertia = 0.0;
        for (i, x) in data.iter().enumerate() {
            let (c, d) = nearest(x, &centroids);
            assignments[i] = c;
            new_inertia += d;
        }
        let mut sums = vec![vec![0.0; dim]; cfg.k];
        let mut counts = vec![0usize; cfg.k];
        for (x, &c) in data.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..cfg.k {
            // An emptied cluster keeps its previous center.
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let converged = inertia.is_finite()
            && (inertia - new_inertia).abs() <= cfg.tol * inertia.max(f64::MIN_POSITIVE);
        inertia = new_inertia;
        if converged {
            break;
        }
    }
    // Final assignment against the final centers.
    inertia = 0.0;
    for (i, x) in data.iter().enumerate() {
        let (c, d) = nearest(x, &centroids);
        assignments[i] = c;
        inertia += d;
    }
    Ok(KMeans {
        centroids,
        assignments,
        inertia,
        iterations,
    })
}
