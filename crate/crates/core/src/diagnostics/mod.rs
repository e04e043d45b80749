//! Scope diagnostics: when the equilibrium model is well posed for a layer,
//! how far top-K routing can sit from it, and how strongly routing at one
//! layer conditions the next.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::{l1, LoadDistribution};
use crate::traces::{top_k_indices, LoadMode, RoutingTrace};

mod phases;

pub use phases::{classify_phases, CheckpointRecord, Phase, PhaseReport, PhaseThresholds};

/// Smallest top-1 group kept when estimating the continuation spread.
pub const MIN_GROUP_SIZE: usize = 5;

/// An error bound in L1, or `Vacuous` when the contraction argument fails.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Value(f64),
    Vacuous,
}

impl Bound {
    pub fn value(self) -> Option<f64> {
        match self {
            Bound::Value(v) => Some(v),
            Bound::Vacuous => None,
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Value(v) => write!(f, "{v:.4}"),
            Bound::Vacuous => f.write_str("vacuous"),
        }
    }
}

/// Congestion level above which the equilibrium can no longer put more than
/// `1/M` of the load on any expert: `M·B0/(M−1)`.
pub fn gamma_critical(experts: usize, spread: f64) -> f64 {
    assert!(experts >= 2, "gamma_critical needs at least two experts");
    experts as f64 * spread / (experts as f64 - 1.0)
}

/// Worst-case Lipschitz constant of the best-response map, `γ/(2λ)`.
pub fn contraction_rate(gamma: f64, lambda: f64) -> f64 {
    gamma / (2.0 * lambda)
}

/// Contraction rate at a specific load, `(γ/λ)·max_i 2μ_i(1−μ_i)`.
pub fn contraction_rate_effective(gamma: f64, lambda: f64, mu: &LoadDistribution) -> f64 {
    let s = mu
        .as_slice()
        .iter()
        .map(|&m| 2.0 * m * (1.0 - m))
        .fold(0.0, f64::max);
    gamma / lambda * s
}

/// Bound on the L1 gap between the softmax and top-K equilibria,
/// `2(1−K/M)/(1−ρ)`, capped at 2.
pub fn topk_error_bound(top_k: usize, experts: usize, rho: f64) -> Result<Bound> {
    if top_k == 0 || top_k > experts {
        return Err(Error::invalid(format!(
            "top_k {top_k} outside 1..={experts}"
        )));
    }
    if top_k == experts {
        return Ok(Bound::Value(0.0));
    }
    if rho.is_nan() || rho >= 1.0 {
        return Ok(Bound::Vacuous);
    }
    let b = 2.0 * (1.0 - top_k as f64 / experts as f64) / (1.0 - rho);
    Ok(Bound::Value(b.min(2.0)))
}

/// Bound on the gap between layer-wise myopic routing and the routing that
/// also accounts for downstream layers, `ε/λ · 1/(1−ρ)`, capped at 2.
pub fn myopic_gap_bound(epsilon: f64, lambda: f64, rho: f64) -> Bound {
    if epsilon == 0.0 {
        return Bound::Value(0.0);
    }
    if rho.is_nan() || rho >= 1.0 {
        return Bound::Vacuous;
    }
    Bound::Value((epsilon / lambda / (1.0 - rho)).min(2.0))
}

/// Reference load against which each group's next-layer load is compared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadBaseline {
    /// The unconditional average load at the next layer.
    #[default]
    Unconditional,
    /// The largest L1 distance between any two groups.
    PairwiseMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationSpread {
    pub value: f64,
    /// Top-1 groups with at least [`MIN_GROUP_SIZE`] tokens.
    pub groups: usize,
    pub dropped_tokens: usize,
    /// Fewer than two groups survived; `value` is 0.
    pub degenerate: bool,
}

/// Group tokens by their top-1 expert at `layer` and measure how much the
/// average load at `layer + 1` varies across groups.
pub fn continuation_spread(
    trace: &RoutingTrace,
    layer: usize,
    mode: LoadMode,
    baseline: SpreadBaseline,
) -> Result<ContinuationSpread> {
    if layer + 1 >= trace.layers() {
        return Err(Error::invalid(format!(
            "continuation spread needs layer < L-1, got {layer} with L = {}",
            trace.layers()
        )));
    }
    let m = trace.experts();
    let k = trace.top_k();
    let mut sums = vec![vec![0.0f64; m]; m];
    let mut sizes = vec![0usize; m];
    let mut buf = Vec::with_capacity(m);
    let mut probs = vec![0.0f64; m];
    let mut logits = vec![0.0f64; m];
    for t in 0..trace.tokens() {
        top_k_indices(trace.token_logits(t, layer), 1, &mut buf);
        let g = buf[0];
        sizes[g] += 1;
        let next = trace.token_logits(t, layer + 1);
        match mode {
            LoadMode::Dispatch => {
                top_k_indices(next, k, &mut buf);
                for &i in &buf {
                    sums[g][i] += 1.0 / k as f64;
                }
            }
            LoadMode::Probability => {
                for (l, &s) in logits.iter_mut().zip(next) {
                    *l = s as f64;
                }
                crate::simplex::softmax_into(&logits, &mut probs);
                sums[g].iter_mut().zip(&probs).for_each(|(a, p)| *a += p);
            }
        }
    }

    let mut kept = Vec::new();
    let mut dropped = 0;
    let mut total = vec![0.0f64; m];
    let mut kept_tokens = 0usize;
    for (g, &n) in sizes.iter().enumerate() {
        if n == 0 {
            continue;
        }
        if n < MIN_GROUP_SIZE {
            dropped += n;
            continue;
        }
        total.iter_mut().zip(&sums[g]).for_each(|(a, b)| *a += b);
        kept_tokens += n;
        kept.push(sums[g].iter().map(|s| s / n as f64).collect::<Vec<f64>>());
    }
    if kept.len() < 2 {
        return Ok(ContinuationSpread {
            value: 0.0,
            groups: kept.len(),
            dropped_tokens: dropped,
            degenerate: true,
        });
    }
    let value = match baseline {
        SpreadBaseline::Unconditional => {
            let mean: Vec<f64> = total.iter().map(|s| s / kept_tokens as f64).collect();
            kept.iter().map(|g| l1(g, &mean)).fold(0.0, f64::max)
        }
        SpreadBaseline::PairwiseMax => {
            let mut best = 0.0f64;
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    best = best.max(l1(a, b));
                }
            }
            best
        }
    };
    Ok(ContinuationSpread {
        value,
        groups: kept.len(),
        dropped_tokens: dropped,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_critical_reference_values() {
        assert_eq!(gamma_critical(64, 0.0), 0.0);
        assert!((gamma_critical(64, 2.24) - 2.2756).abs() < 1e-3);
        assert!((gamma_critical(64, 2.78) - 2.82).abs() < 5e-3);
    }

    #[test]
    fn contraction_rates() {
        assert_eq!(contraction_rate(0.0, 1.0), 0.0);
        assert_eq!(contraction_rate(2.0, 1.0), 1.0);
        assert_eq!(contraction_rate(8.5, 1.0), 4.25);
        let m = 64;
        let u = LoadDistribution::uniform(m).unwrap();
        let expect = 8.5 * 2.0 * (m as f64 - 1.0) / (m * m) as f64;
        assert!((contraction_rate_effective(8.5, 1.0, &u) - expect).abs() < 1e-12);
    }

    #[test]
    fn topk_bound_cases() {
        assert_eq!(topk_error_bound(8, 8, 0.3).unwrap(), Bound::Value(0.0));
        assert_eq!(topk_error_bound(8, 8, 3.0).unwrap(), Bound::Value(0.0));
        assert_eq!(topk_error_bound(2, 8, 1.0).unwrap(), Bound::Vacuous);
        assert_eq!(topk_error_bound(2, 8, 0.5).unwrap(), Bound::Value(2.0));
        assert_eq!(topk_error_bound(6, 8, 0.5).unwrap(), Bound::Value(1.0));
        assert!(topk_error_bound(0, 8, 0.5).is_err());
        assert!(topk_error_bound(9, 8, 0.5).is_err());
    }

    #[test]
    fn myopic_bound_cases() {
        assert_eq!(myopic_gap_bound(0.0, 1.0, 4.0), Bound::Value(0.0));
        assert_eq!(myopic_gap_bound(0.5, 1.0, 0.5), Bound::Value(1.0));
        assert_eq!(myopic_gap_bound(0.5, 1.0, 1.0), Bound::Vacuous);
        assert_eq!(myopic_gap_bound(1.5, 1.0, 0.5), Bound::Value(2.0));
    }

    fn two_layer(rows: &[([f32; 3], [f32; 3])]) -> RoutingTrace {
        let logits = rows
            .iter()
            .flat_map(|(a, b)| a.iter().chain(b).copied())
            .collect();
        RoutingTrace::new(3, 2, 1, 1.0, None, logits, vec![0, rows.len()]).unwrap()
    }

    #[test]
    fn spread_zero_when_next_layer_is_token_independent() {
        let mut rows = Vec::new();
        for t in 0..30 {
            let g = (t % 3) as f32;
            rows.push(([g, 1.0, 0.5], [0.2, 0.9, 0.1]));
        }
        let tr = two_layer(&rows);
        for mode in [LoadMode::Dispatch, LoadMode::Probability] {
            let s = continuation_spread(&tr, 0, mode, SpreadBaseline::Unconditional).unwrap();
            assert!(!s.degenerate);
            assert!(s.value < 1e-12);
        }
    }

    #[test]
    fn spread_of_fully_conditioned_groups_is_one() {
        let mut rows = Vec::new();
        for _ in 0..10 {
            rows.push(([1.0, 0.0, 0.0], [1.0, 0.0, 0.0]));
            rows.push(([0.0, 1.0, 0.0], [0.0, 1.0, 0.0]));
        }
        let tr = two_layer(&rows);
        let s =
            continuation_spread(&tr, 0, LoadMode::Dispatch, SpreadBaseline::Unconditional).unwrap();
        assert!((s.value - 1.0).abs() < 1e-12);
        assert_eq!(s.groups, 2);
        let p =
            continuation_spread(&tr, 0, LoadMode::Dispatch, SpreadBaseline::PairwiseMax).unwrap();
        assert!((p.value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn small_groups_are_dropped_and_flagged() {
        let mut rows = vec![([1.0, 0.0, 0.0], [1.0, 0.0, 0.0]); 10];
        rows.extend(vec![([0.0, 1.0, 0.0], [0.0, 1.0, 0.0]); 4]);
        let tr = two_layer(&rows);
        let s =
            continuation_spread(&tr, 0, LoadMode::Dispatch, SpreadBaseline::Unconditional).unwrap();
        assert!(s.degenerate);
        assert_eq!((s.value, s.groups, s.dropped_tokens), (0.0, 1, 4));
        assert!(
            continuation_spread(&tr, 1, LoadMode::Dispatch, SpreadBaseline::Unconditional).is_err()
        );
    }
}
