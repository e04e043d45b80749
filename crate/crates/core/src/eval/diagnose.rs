//! Per-layer scope diagnostics of a single trace.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    continuation_spread, contraction_rate, contraction_rate_effective, gamma_critical,
    myopic_gap_bound, topk_error_bound, Bound, SpreadBaseline,
};
use crate::equilibrium::{solve_single, SolverOptions};
use crate::error::{Error, Result};
use crate::identify::{decompose, fit_gamma, DEFAULT_GAMMA_MAX};
use crate::simplex::GameParams;
use crate::traces::{estimate_quality, observed_load, LoadMode, QualityMethod, RoutingTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseConfig {
    pub quality_method: QualityMethod,
    pub load_mode: LoadMode,
    pub gamma_max: f64,
    /// Overrides the trace's auxiliary-loss coefficient.
    pub alpha: Option<f64>,
    pub spread_baseline: SpreadBaseline,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            quality_method: QualityMethod::Mean,
            load_mode: LoadMode::Dispatch,
            gamma_max: DEFAULT_GAMMA_MAX,
            alpha: None,
            spread_baseline: SpreadBaseline::Unconditional,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub gamma_eff: f64,
    pub gamma_explicit: f64,
    pub gamma_implicit: f64,
    pub spread: f64,
    pub gamma_c: f64,
    /// `γ_eff / γ_c`.
    pub safety_margin: f64,
    pub rho: f64,
    /// Contraction rate at the fitted equilibrium.
    pub rho_eff: f64,
    pub k_over_m: f64,
    pub topk_bound: Bound,
    pub topk_bound_eff: Bound,
    /// Continuation spread into the next layer; absent for the last layer.
    pub epsilon: Option<f64>,
    pub epsilon_degenerate: bool,
    pub myopic_bound: Option<Bound>,
}

pub fn diagnose_trace(trace: &RoutingTrace, cfg: &DiagnoseConfig) -> Result<Vec<LayerDiagnostics>> {
    let all = trace.all_tokens();
    let lambda = trace.lambda() as f64;
    let m = trace.experts();
    let k = trace.top_k();
    let alpha = cfg.alpha.or(trace.alpha().map(f64::from)).unwrap_or(0.0);
    (0..trace.layers())
        .into_par_iter()
        .map(|l| {
            let q = estimate_quality(trace, l, &all, cfg.quality_method)?;
            let obs = observed_load(trace, l, &all, cfg.load_mode)?;
            let fit = fit_gamma(&obs.load, &q, lambda, cfg.gamma_max)?;
            let gamma = fit.gamma_eff;
            let mu = match solve_single(
                &q,
                GameParams::new(gamma, lambda)?,
                SolverOptions::default(),
            ) {
                Ok(eq) => eq.mu,
                Err(Error::NonConverged { .. }) => obs.load.clone(),
                Err(e) => return Err(e),
            };
            let rho = contraction_rate(gamma, lambda);
            let rho_eff = contraction_rate_effective(gamma, lambda, &mu);
            let spread = q.spread();
            let gamma_c = gamma_critical(m, spread);
            let (epsilon, degenerate) = if l + 1 < trace.layers() {
                let s = continuation_spread(trace, l, cfg.load_mode, cfg.spread_baseline)?;
                (Some(s.value), s.degenerate)
            } else {
                (None, false)
            };
            let (gamma_explicit, gamma_implicit) = decompose(gamma, alpha, m);
            Ok(LayerDiagnostics {
                layer: l,
                gamma_eff: gamma,
                gamma_explicit,
                gamma_implicit,
                spread,
                gamma_c,
                safety_margin: gamma / gamma_c,
                rho,
                rho_eff,
                k_over_m: k as f64 / m as f64,
                topk_bound: topk_error_bound(k, m, rho)?,
                topk_bound_eff: topk_error_bound(k, m, rho_eff)?,
                epsilon,
                epsilon_degenerate: degenerate,
                myopic_bound: epsilon.map(|e| myopic_gap_bound(e, lambda, rho_eff)),
            })
        })
        .collect()
}

pub fn diagnostics_tsv(rows: &[LayerDiagnostics]) -> String {
    let mut out = String::from(
        "layer\tgamma_eff\tgamma_explicit\tgamma_implicit\tB0\tgamma_c\tmargin\trho\trho_eff\tK/M\ttopk_bound\ttopk_bound_eff\tepsilon\tmyopic_bound\n",
    );
    for r in rows {
        let eps = match (r.epsilon, r.epsilon_degenerate) {
            (None, _) => "-".to_string(),
            (Some(_), true) => "degenerate".to_string(),
            (Some(e), false) => format!("{e:.4}"),
        };
        let _ = writeln!(
            out,
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.3}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}\t{}\t{}",
            r.layer,
            r.gamma_eff,
            r.gamma_explicit,
            r.gamma_implicit,
            r.spread,
            r.gamma_c,
            r.safety_margin,
            r.rho,
            r.rho_eff,
            r.k_over_m,
            r.topk_bound,
            r.topk_bound_eff,
            eps,
            r.myopic_bound.map_or("-".into(), |b| b.to_string()),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex::QualityVector;
    use crate::traces::generate::{generate, LayerPlan, TraceSpec};

    #[test]
    fn full_width_routing_has_zero_topk_bound() {
        let logits: Vec<f32> = (0..40 * 2 * 3)
            .map(|i| ((i * 31) % 7) as f32 * 0.3)
            .collect();
        let tr = RoutingTrace::new(3, 2, 3, 1.0, None, logits, vec![0, 20, 40]).unwrap();
        let cfg = DiagnoseConfig {
            load_mode: LoadMode::Probability,
            ..Default::default()
        };
        for r in diagnose_trace(&tr, &cfg).unwrap() {
            assert_eq!(r.topk_bound, Bound::Value(0.0));
            assert_eq!(r.topk_bound_eff, Bound::Value(0.0));
        }
    }

    #[test]
    fn columns_for_generated_trace() {
        let q =
            QualityVector::new((0..16).map(|i| (i as f64 * 0.37).sin() * 1.1).collect()).unwrap();
        let spec = TraceSpec {
            top_k: 2,
            lambda: 1.0,
            alpha: Some(0.01),
            batches: 10,
            tokens_per_batch: 400,
            type_weights: vec![1.0],
            layers: vec![LayerPlan::single(8.0, q.clone()), LayerPlan::single(8.0, q)],
            noise: 0.3,
            type_offset: 0.0,
            seed: 4,
        };
        let tr = generate(&spec).unwrap().0;
        let rows = diagnose_trace(&tr, &DiagnoseConfig::default()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].epsilon.is_some() && rows[1].epsilon.is_none());
        assert!((rows[0].gamma_explicit - 0.16).abs() < 1e-6);
        assert!(rows[0].rho_eff <= rows[0].rho + 1e-12);
        assert_eq!(rows[0].k_over_m, 0.125);
        let tsv = diagnostics_tsv(&rows);
        assert_eq!(tsv.lines().count(), 3);
    }
}
