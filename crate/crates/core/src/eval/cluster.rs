//! k-means over per-token gate-logit vectors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::traces::{RoutingTrace, TokenSet};

const MAX_ITER: usize = 200;

/// A fitted k-means partition of tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    /// Layers whose logits are concatenated into each token's feature vector.
    pub layers: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Cluster of each token of the fitting set, in set order.
    pub assignments: Vec<usize>,
    /// Share of the fitting set in each cluster.
    pub weights: Vec<f64>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Nearest centroid of a token, ties to the lower index.
    pub fn assign(&self, trace: &RoutingTrace, token: usize) -> usize {
        let mut feat = Vec::with_capacity(self.centroids[0].len());
        features(trace, &self.layers, token, &mut feat);
        nearest(&self.centroids, &feat).0
    }

    /// Cluster of every token in `set`, in set order.
    pub fn assign_all(&self, trace: &RoutingTrace, set: &TokenSet) -> Vec<usize> {
        set.iter().map(|t| self.assign(trace, t)).collect()
    }

    /// Cluster shares among the tokens of `set`.
    pub fn shares(&self, trace: &RoutingTrace, set: &TokenSet) -> Vec<f64> {
        let mut counts = vec![0.0; self.k()];
        for c in self.assign_all(trace, set) {
            counts[c] += 1.0;
        }
        let n = set.len().max(1) as f64;
        counts.iter().map(|c| c / n).collect()
    }
}

fn features(trace: &RoutingTrace, layers: &[usize], token: usize, out: &mut Vec<f64>) {
    out.clear();
    for &l in layers {
        out.extend(trace.token_logits(token, l).iter().map(|&v| v as f64));
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means with k-means++ seeding on the concatenated logits of `layers`
/// for the tokens in `set`. Deterministic given `seed`. A cluster that
/// empties is re-seeded at the point farthest from its centroid.
pub fn cluster_tokens(
    trace: &RoutingTrace,
    layers: &[usize],
    set: &TokenSet,
    k: usize,
    seed: u64,
) -> Result<Clustering> {
    if k == 0 {
        return Err(Error::invalid("cluster count must be at least 1"));
    }
    if set.len() < k {
        return Err(Error::invalid(format!(
            "cannot form {k} clusters from {} tokens",
            set.len()
        )));
    }
    if layers.is_empty() || layers.iter().any(|&l| l >= trace.layers()) {
        return Err(Error::invalid(
            "cluster layers must be nonempty and in range",
        ));
    }
    if set.as_slice().last().is_some_and(|&t| t >= trace.tokens()) {
        return Err(Error::invalid("token index out of range"));
    }
    let points: Vec<Vec<f64>> = set
        .iter()
        .map(|t| {
            let mut f = Vec::new();
            features(trace, layers, t, &mut f);
            f
        })
        .collect();
    let n = points.len();
    let mut rng = stream_rng(seed, 0);

    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(&points) {
            *d = d.min(dist2(p, centroids.last().unwrap()));
        }
    }

    let dim = points[0].len();
    let mut assignments = vec![usize::MAX; n];
    for _ in 0..MAX_ITER {
        let mut changed = false;
        for (a, p) in assignments.iter_mut().zip(&points) {
            let c = nearest(&centroids, p).0;
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(&points) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&i, &j| {
                        let di = dist2(&points[i], &centroids[assignments[i]]);
                        let dj = dist2(&points[j], &centroids[assignments[j]]);
                        di.total_cmp(&dj).then(j.cmp(&i))
                    })
                    .unwrap();
                centroids[c] = points[far].clone();
                assignments[far] = c;
                changed = true;
            } else {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }

    let mut counts = vec![0usize; k];
    let mut inertia = 0.0;
    for (&a, p) in assignments.iter().zip(&points) {
        counts[a] += 1;
        inertia += dist2(p, &centroids[a]);
    }
    let weights = counts.iter().map(|&c| c as f64 / n as f64).collect();
    Ok(Clustering {
        layers: layers.to_vec(),
        centroids,
        assignments,
        weights,
        inertia,
    })
}

/// Inertia for each candidate cluster count, for choosing `k` by the elbow.
pub fn elbow_report(
    trace: &RoutingTrace,
    layers: &[usize],
    set: &TokenSet,
    ks: &[usize],
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    ks.iter()
        .map(|&k| Ok((k, cluster_tokens(trace, layers, set, k, seed)?.inertia)))
        .collect()
}
