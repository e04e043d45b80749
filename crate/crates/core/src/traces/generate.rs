//! Synthetic routing traces with a known equilibrium.
//!
//! Every token carries a latent type that is fixed across layers. At each
//! layer the coupled equilibrium of the planted game is solved, and every
//! token of type `k` is dispatched to `K` distinct experts by systematic
//! sampling on `K·μ^(k)`, so dispatch frequencies are unbiased for the
//! equilibrium. Logits are then built as
//!
//! `s_t,i = q_i^(k) + c·(1[i chosen] − F_i^(k)) + u_t,i`
//!
//! where `F^(k)` is the realized selection frequency of the type and `u` is
//! bounded uniform noise. The mean logit of a type equals its quality, and
//! `c` is large enough that the chosen experts are exactly the top-K.
//!
//! The indicator term dominates distances between logit vectors, so types
//! are hard to tell apart by clustering. `type_offset` adds `k·type_offset`
//! to every logit of a type-`k` token, which changes neither softmax nor
//! top-K routing but separates the types in logit space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{solve_multitype, MultiTypeSpec, SolverOptions};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::simplex::{GameParams, LoadDistribution, QualityVector};
use crate::traces::RoutingTrace;

/// The planted game at one layer: shared congestion `gamma` and one quality
/// vector per token type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub gamma: f64,
    pub qualities: Vec<QualityVector>,
}

impl LayerPlan {
    pub fn single(gamma: f64, quality: QualityVector) -> Self {
        Self {
            gamma,
            qualities: vec![quality],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    pub top_k: usize,
    pub lambda: f64,
    pub alpha: Option<f32>,
    pub batches: usize,
    pub tokens_per_batch: usize,
    /// Population share of each token type.
    pub type_weights: Vec<f64>,
    pub layers: Vec<LayerPlan>,
    /// Half-width of the uniform logit noise.
    pub noise: f64,
    /// Expert-independent logit shift per type index.
    #[serde(default)]
    pub type_offset: f64,
    pub seed: u64,
}

/// What the generator planted, for checking estimates against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub token_types: Vec<usize>,
    /// Aggregate equilibrium load per layer.
    pub aggregate: Vec<LoadDistribution>,
    /// Per-layer, per-type equilibrium load.
    pub per_type: Vec<Vec<LoadDistribution>>,
}

/// Expert indices hit by the `k` points `u, u+1, …, u+k-1` on the
/// cumulative sum of `k·mu`. Distinct whenever `k·max(mu) <= 1`.
fn systematic(mu: &[f64], k: usize, u: f64, out: &mut Vec<usize>) {
    out.clear();
    let mut cum = 0.0;
    let mut next = u;
    for (i, &p) in mu.iter().enumerate() {
        cum += k as f64 * p;
        while out.len() < k && next < cum {
            out.push(i);
            next += 1.0;
        }
    }
    // Rounding can leave the final point just past the total mass.
    let mut i = mu.len();
    while out.len() < k {
        i -= 1;
        if !out.contains(&i) {
            out.push(i);
        }
    }
}

pub fn generate(spec: &TraceSpec) -> Result<(RoutingTrace, GroundTruth)> {
    let layers = spec.layers.len();
    if layers == 0 {
        return Err(Error::invalid("trace spec has no layers"));
    }
    if spec.batches == 0 || spec.tokens_per_batch == 0 {
        return Err(Error::invalid("trace spec needs at least one token"));
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(Error::invalid("noise must be finite and nonnegative"));
    }
    if !spec.type_offset.is_finite() {
        return Err(Error::invalid("type offset must be finite"));
    }
    let types = spec.type_weights.len();
    let m = spec.layers[0]
        .qualities
        .first()
        .ok_or_else(|| Error::invalid("layer plan has no qualities"))?
        .len();
    let k = spec.top_k;
    if k == 0 || k > m {
        return Err(Error::invalid(format!("top_k {k} outside 1..={m}")));
    }

    let opts = SolverOptions::default();
    let mut aggregate = Vec::with_capacity(layers);
    let mut per_type = Vec::with_capacity(layers);
    for (l, plan) in spec.layers.iter().enumerate() {
        if plan.qualities.len() != types {
            return Err(Error::invalid(format!(
                "layer {l} has {} quality vectors for {types} types",
                plan.qualities.len()
            )));
        }
        let game = MultiTypeSpec::new(spec.type_weights.clone(), plan.qualities.clone())?;
        if game.experts() != m {
            return Err(Error::invalid("all layers must share the expert count"));
        }
        let eq = solve_multitype(&game, GameParams::new(plan.gamma, spec.lambda)?, opts)?;
        for (t, mu) in eq.per_type.iter().enumerate() {
            if k as f64 * mu.max() > 1.0 {
                return Err(Error::invalid(format!(
                    "layer {l} type {t}: K·max μ = {:.3} > 1, top-{k} dispatch cannot match the load",
                    k as f64 * mu.max()
                )));
            }
        }
        aggregate.push(eq.aggregate);
        per_type.push(eq.per_type);
    }

    let tokens = spec.batches * spec.tokens_per_batch;
    let mut rng = stream_rng(spec.seed, 0);
    let cum_w: Vec<f64> = spec
        .type_weights
        .iter()
        .scan(0.0, |s, w| {
            *s += w;
            Some(*s)
        })
        .collect();
    let token_types: Vec<usize> = (0..tokens)
        .map(|_| {
            let u: f64 = rng.random();
            cum_w.iter().position(|&c| u < c).unwrap_or(types - 1)
        })
        .collect();
    let type_counts: Vec<usize> = (0..types)
        .map(|t| token_types.iter().filter(|&&x| x == t).count())
        .collect();

    let mut logits = vec![0f32; tokens * layers * m];
    let mut chosen = vec![false; tokens * m];
    let mut pick = Vec::with_capacity(k);
    for l in 0..layers {
        let mut rng = stream_rng(spec.seed, 1 + l as u64);
        chosen.iter_mut().for_each(|c| *c = false);
        let mut freq = vec![vec![0.0f64; m]; types];
        for t in 0..tokens {
            let ty = token_types[t];
            systematic(per_type[l][ty].as_slice(), k, rng.random(), &mut pick);
            for &i in &pick {
                chosen[t * m + i] = true;
                freq[ty][i] += 1.0;
            }
        }
        for (f, &n) in freq.iter_mut().zip(&type_counts) {
            f.iter_mut().for_each(|x| *x /= n.max(1) as f64);
        }
        let spread = spec.layers[l]
            .qualities
            .iter()
            .map(QualityVector::spread)
            .fold(0.0, f64::max);
        let max_f = freq
            .iter()
            .flatten()
            .copied()
            .filter(|&f| f < 1.0 - 1e-12)
            .fold(0.0, f64::max);
        let c = if k == m {
            0.0
        } else {
            1.1 * (spread + 2.0 * spec.noise) / (1.0 - max_f) + 0.5
        };
        for t in 0..tokens {
            let ty = token_types[t];
            let q = spec.layers[l].qualities[ty].as_slice();
            let shift = spec.type_offset * ty as f64;
            let row = &mut logits[(t * layers + l) * m..(t * layers + l + 1) * m];
            for i in 0..m {
                let ind = if chosen[t * m + i] { 1.0 } else { 0.0 };
                let u = if spec.noise > 0.0 {
                    rng.random_range(-spec.noise..spec.noise)
                } else {
                    0.0
                };
                row[i] = (q[i] + shift + c * (ind - freq[ty][i]) + u) as f32;
            }
        }
    }

    let offsets = (0..=spec.batches)
        .map(|b| b * spec.tokens_per_batch)
        .collect();
    let trace = RoutingTrace::new(
        m,
        layers,
        k,
        spec.lambda as f32,
        spec.alpha,
        logits,
        offsets,
    )?;
    Ok((
        trace,
        GroundTruth {
            token_types,
            aggregate,
            per_type,
        },
    ))
}
