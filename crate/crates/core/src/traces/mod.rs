//! Routing traces: storage, the MOER file format, checkpoint manifests,
//! token splits and the quantities estimated from gate logits.

use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::simplex::{LoadDistribution, QualityVector};

pub mod format;
pub mod generate;
pub mod manifest;

pub use format::{decode, encode, read_trace, read_trace_file, write_trace, write_trace_file};
pub use manifest::{Manifest, ManifestEntry};

/// Floor applied to observed loads so that every expert keeps positive mass.
pub const LOAD_FLOOR: f64 = 1e-12;

/// Gate logits for `T` tokens across `L` MoE layers of `M` experts each,
/// grouped into contiguous batches (documents).
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    experts: usize,
    layers: usize,
    top_k: usize,
    lambda: f32,
    alpha: Option<f32>,
    logits: Vec<f32>,
    batch_offsets: Vec<usize>,
}

impl RoutingTrace {
    /// `logits` is token-major, then layer, then expert. `batch_offsets`
    /// runs from 0 to `T` strictly increasing.
    pub fn new(
        experts: usize,
        layers: usize,
        top_k: usize,
        lambda: f32,
        alpha: Option<f32>,
        logits: Vec<f32>,
        batch_offsets: Vec<usize>,
    ) -> Result<Self> {
        if experts < 2 {
            return Err(Error::invalid(format!("expert count {experts} < 2")));
        }
        if layers == 0 {
            return Err(Error::invalid("layer count must be at least 1"));
        }
        if top_k == 0 || top_k > experts {
            return Err(Error::invalid(format!(
                "top_k {top_k} outside 1..={experts}"
            )));
        }
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::invalid(format!("lambda {lambda} must be positive")));
        }
        if alpha.is_some_and(|a| !a.is_finite()) {
            return Err(Error::invalid("alpha must be finite when present"));
        }
        if logits.len() % (experts * layers) != 0 {
            return Err(Error::invalid("logit count is not a multiple of L·M"));
        }
        let tokens = logits.len() / (experts * layers);
        if tokens > u32::MAX as usize {
            return Err(Error::invalid("too many tokens"));
        }
        if batch_offsets.len() < 2
            || batch_offsets[0] != 0
            || *batch_offsets.last().unwrap() != tokens
            || batch_offsets.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::invalid(
                "batch offsets must increase strictly from 0 to the token count",
            ));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("logits must be finite"));
        }
        Ok(Self {
            experts,
            layers,
            top_k,
            lambda,
            alpha,
            logits,
            batch_offsets,
        })
    }

    pub fn tokens(&self) -> usize {
        *self.batch_offsets.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn lambda(&self) -> f32 {
        self.lambda
    }

    pub fn alpha(&self) -> Option<f32> {
        self.alpha
    }

    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    pub fn batch_offsets(&self) -> &[usize] {
        &self.batch_offsets
    }

    pub fn batch_count(&self) -> usize {
        self.batch_offsets.len() - 1
    }

    pub fn batch(&self, b: usize) -> Range<usize> {
        self.batch_offsets[b]..self.batch_offsets[b + 1]
    }

    /// Logits of one token at one layer.
    pub fn token_logits(&self, token: usize, layer: usize) -> &[f32] {
        let start = (token * self.layers + layer) * self.experts;
        &self.logits[start..start + self.experts]
    }

    /// All layers of one token, concatenated.
    pub fn token_row(&self, token: usize) -> &[f32] {
        let width = self.layers * self.experts;
        &self.logits[token * width..(token + 1) * width]
    }

    pub fn all_tokens(&self) -> TokenSet {
        TokenSet((0..self.tokens()).collect())
    }

    /// Tokens of the given batches, in batch order.
    pub fn batch_tokens(&self, batches: &[usize]) -> TokenSet {
        TokenSet::new(batches.iter().flat_map(|&b| self.batch(b)).collect())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.layers {
            return Err(Error::invalid(format!(
                "layer {layer} out of range for {} layers",
                self.layers
            )));
        }
        Ok(())
    }
}

/// A sorted, duplicate-free set of token indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSet(Vec<usize>);

impl TokenSet {
    pub fn new(mut tokens: Vec<usize>) -> Self {
        tokens.sort_unstable();
        tokens.dedup();
        Self(tokens)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    fn check(&self, trace: &RoutingTrace) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid("token set is empty"));
        }
        if *self.0.last().unwrap() >= trace.tokens() {
            return Err(Error::invalid("token index out of range"));
        }
        Ok(())
    }
}

/// Disjoint quality-estimation (A), clustering (B) and held-out (C) sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub a: TokenSet,
    pub b: TokenSet,
    pub c: TokenSet,
}

/// Shuffle batches with `seed` and cut them so that the token shares of the
/// three sets approach `fractions`. Each cut lands within one batch of its
/// target, and no batch is split.
pub fn split_three_way(trace: &RoutingTrace, fractions: [f64; 3], seed: u64) -> Result<SplitSpec> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0)
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::invalid(format!(
            "split fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let nb = trace.batch_count();
    if nb < 3 {
        return Err(Error::invalid(format!(
            "three-way split needs at least 3 batches, got {nb}"
        )));
    }
    let mut order: Vec<usize> = (0..nb).collect();
    order.shuffle(&mut stream_rng(seed, 0));

    let mut cum = Vec::with_capacity(nb + 1);
    cum.push(0usize);
    for &b in &order {
        let r = trace.batch(b);
        cum.push(cum.last().unwrap() + r.len());
    }
    let total = trace.tokens() as f64;
    let nearest = |target: f64, from: usize| {
        (from..=nb)
            .min_by(|&i, &j| {
                let di = (cum[i] as f64 - target).abs();
                let dj = (cum[j] as f64 - target).abs();
                di.total_cmp(&dj)
            })
            .unwrap()
    };
    let c1 = nearest(fractions[0] * total, 0);
    let c2 = nearest((fractions[0] + fractions[1]) * total, c1);
    Ok(SplitSpec {
        a: trace.batch_tokens(&order[..c1]),
        b: trace.batch_tokens(&order[c1..c2]),
        c: trace.batch_tokens(&order[c2..]),
    })
}

/// Split a token set by batch: tokens of the first half of the touched
/// batches, then the rest. A set inside one batch is halved by position.
pub fn split_half(trace: &RoutingTrace, set: &TokenSet) -> (TokenSet, TokenSet) {
    let offsets = trace.batch_offsets();
    let batch_of = |t: usize| offsets.partition_point(|&o| o <= t) - 1;
    let mut touched: Vec<usize> = set.iter().map(batch_of).collect();
    touched.dedup();
    if touched.len() < 2 {
        let mid = set.len() / 2;
        return (
            TokenSet(set.0[..mid].to_vec()),
            TokenSet(set.0[mid..].to_vec()),
        );
    }
    let cut_batch = touched[touched.len() / 2];
    let cut = offsets[cut_batch];
    let mid = set.0.partition_point(|&t| t < cut);
    (
        TokenSet(set.0[..mid].to_vec()),
        TokenSet(set.0[mid..].to_vec()),
    )
}

/// How per-expert quality is estimated from gate logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityMethod {
    Mean,
    Median,
    /// Mean after dropping the lowest and highest 10% per expert.
    Trimmed10,
    /// Mean over the first half of the batches only.
    SplitHalf,
}

impl std::str::FromStr for QualityMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "median" => Ok(Self::Median),
            "trimmed10" => Ok(Self::Trimmed10),
            "split_half" => Ok(Self::SplitHalf),
            _ => Err(Error::invalid(format!("unknown quality method {s:?}"))),
        }
    }
}

/// Mean gate logit per expert over a token set.
pub fn mean_logits(trace: &RoutingTrace, layer: usize, set: &TokenSet) -> Result<Vec<f64>> {
    trace.check_layer(layer)?;
    set.check(trace)?;
    let mut acc = vec![0.0f64; trace.experts()];
    for t in set.iter() {
        for (a, &s) in acc.iter_mut().zip(trace.token_logits(t, layer)) {
            *a += s as f64;
        }
    }
    let n = set.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

fn per_expert_sorted(trace: &RoutingTrace, layer: usize, set: &TokenSet) -> Vec<Vec<f64>> {
    let mut cols = vec![Vec::with_capacity(set.len()); trace.experts()];
    for t in set.iter() {
        for (c, &s) in cols.iter_mut().zip(trace.token_logits(t, layer)) {
            c.push(s as f64);
        }
    }
    cols.iter_mut().for_each(|c| c.sort_by(f64::total_cmp));
    cols
}

pub fn estimate_quality(
    trace: &RoutingTrace,
    layer: usize,
    set: &TokenSet,
    method: QualityMethod,
) -> Result<QualityVector> {
    trace.check_layer(layer)?;
    set.check(trace)?;
    let q = match method {
        QualityMethod::Mean => mean_logits(trace, layer, set)?,
        QualityMethod::SplitHalf => {
            let (first, _) = split_half(trace, set);
            let first = if first.is_empty() { set.clone() } else { first };
            mean_logits(trace, layer, &first)?
        }
        QualityMethod::Median => per_expert_sorted(trace, layer, set)
            .iter()
            .map(|c| {
                let n = c.len();
                if n % 2 == 1 {
                    c[n / 2]
                } else {
                    0.5 * (c[n / 2 - 1] + c[n / 2])
                }
            })
            .collect(),
        QualityMethod::Trimmed10 => per_expert_sorted(trace, layer, set)
            .iter()
            .map(|c| {
                let cut = c.len() / 10;
                let kept = &c[cut..c.len() - cut];
                kept.iter().sum::<f64>() / kept.len() as f64
            })
            .collect(),
    };
    QualityVector::new(q)
}

/// Indices of the `k` largest logits, ties broken toward the lower index,
/// in descending order of logit.
pub fn top_k_indices(logits: &[f32], k: usize, out: &mut Vec<usize>) {
    out.clear();
    out.extend(0..logits.len());
    let cmp = |&i: &usize, &j: &usize| logits[j].total_cmp(&logits[i]).then(i.cmp(&j));
    if k < logits.len() {
        out.select_nth_unstable_by(k, cmp);
        out.truncate(k);
    }
    out.sort_unstable_by(cmp);
}

/// How the observed per-expert load is measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadMode {
    /// Fraction of top-K assignments each expert receives.
    #[default]
    Dispatch,
    /// Mean gate softmax probability.
    Probability,
}

/// An observed load, floored away from the simplex boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedLoad {
    pub load: LoadDistribution,
    /// True when some expert had (near) zero mass and was raised to
    /// [`LOAD_FLOOR`].
    pub floored: bool,
}

/// Per-expert top-K dispatch counts.
pub fn dispatch_counts(trace: &RoutingTrace, layer: usize, set: &TokenSet) -> Result<Vec<u64>> {
    trace.check_layer(layer)?;
    set.check(trace)?;
    let mut counts = vec![0u64; trace.experts()];
    let mut buf = Vec::with_capacity(trace.experts());
    for t in set.iter() {
        top_k_indices(trace.token_logits(t, layer), trace.top_k(), &mut buf);
        for &i in &buf {
            counts[i] += 1;
        }
    }
    Ok(counts)
}

/// Normalize nonnegative masses into an observed load.
pub fn load_from_masses(masses: &[f64]) -> Result<ObservedLoad> {
    let total: f64 = masses.iter().sum();
    if !(total.is_finite() && total > 0.0) || masses.iter().any(|m| *m < 0.0) {
        return Err(Error::invalid(
            "load masses must be nonnegative with positive total",
        ));
    }
    let mut floored = false;
    let mut v: Vec<f64> = masses
        .iter()
        .map(|m| {
            let p = m / total;
            if p < LOAD_FLOOR {
                floored = true;
                LOAD_FLOOR
            } else {
                p
            }
        })
        .collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|p| *p /= s);
    Ok(ObservedLoad {
        load: LoadDistribution::from_vec_unchecked(v),
        floored,
    })
}

/// Unnormalized routing mass per expert: dispatch counts, or summed gate
/// probabilities.
pub fn load_masses(
    trace: &RoutingTrace,
    layer: usize,
    set: &TokenSet,
    mode: LoadMode,
) -> Result<Vec<f64>> {
    match mode {
        LoadMode::Dispatch => Ok(dispatch_counts(trace, layer, set)?
            .iter()
            .map(|&c| c as f64)
            .collect()),
        LoadMode::Probability => {
            trace.check_layer(layer)?;
            set.check(trace)?;
            let m = trace.experts();
            let mut acc = vec![0.0f64; m];
            let mut p = vec![0.0f64; m];
            let mut logits = vec![0.0f64; m];
            for t in set.iter() {
                for (l, &s) in logits.iter_mut().zip(trace.token_logits(t, layer)) {
                    *l = s as f64;
                }
                crate::simplex::softmax_into(&logits, &mut p);
                acc.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
            }
            Ok(acc)
        }
    }
}

pub fn observed_load(
    trace: &RoutingTrace,
    layer: usize,
    set: &TokenSet,
    mode: LoadMode,
) -> Result<ObservedLoad> {
    load_from_masses(&load_masses(trace, layer, set, mode)?)
}
