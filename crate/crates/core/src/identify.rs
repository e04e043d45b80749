//! Identification of the effective congestion coefficient from an observed
//! load, its explicit/implicit decomposition, and the synthetic recovery
//! experiment that checks the identification end to end.

use std::cell::RefCell;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{best_response, solve_single, SolverOptions};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::search::{minimize_bracketed, Boundary};
use crate::simplex::{l1, l1_distance, softmax_into, GameParams, LoadDistribution, QualityVector};

/// Default upper end of the γ search interval.
pub const DEFAULT_GAMMA_MAX: f64 = 500.0;
/// Golden-section tolerance in γ.
pub const GAMMA_TOL: f64 = 1e-4;
/// Layers whose fitted γ does not exceed this are out of scope for the
/// single-type model.
pub const IN_SCOPE_THRESHOLD: f64 = 0.05;
const SCAN_POINTS: usize = 201;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryFlag {
    Interior,
    AtZero,
    AtMax,
}

impl std::fmt::Display for BoundaryFlag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BoundaryFlag::Interior => "interior",
            BoundaryFlag::AtZero => "at_zero",
            BoundaryFlag::AtMax => "at_max",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub gamma_eff: f64,
    /// `||Φ_γ(μ_obs) - μ_obs||_1` at the fitted γ.
    pub residual: f64,
    pub gamma_explicit: f64,
    /// `gamma_eff - gamma_explicit`; negative when the observed balance is
    /// weaker than the auxiliary loss alone would induce.
    pub gamma_implicit: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub boundary: BoundaryFlag,
}

impl FitResult {
    /// Attach the decomposition for auxiliary-loss coefficient `alpha` over
    /// `experts` experts.
    pub fn with_decomposition(mut self, alpha: f64, experts: usize) -> Self {
        let (explicit, implicit) = decompose(self.gamma_eff, alpha, experts);
        self.gamma_explicit = explicit;
        self.gamma_implicit = implicit;
        self
    }

    pub fn in_scope(&self) -> bool {
        self.gamma_eff > IN_SCOPE_THRESHOLD
    }

    pub fn with_ci(mut self, low: f64, high: f64) -> Self {
        self.ci_low = Some(low);
        self.ci_high = Some(high);
        self
    }
}

/// The identification objective `R(γ) = ||Φ_γ(μ_obs) - μ_obs||_1`.
pub fn residual(
    gamma: f64,
    mu_obs: &LoadDistribution,
    q: &QualityVector,
    lambda: f64,
) -> Result<f64> {
    mu_obs.require_interior()?;
    let br = best_response(mu_obs, q, GameParams::new(gamma, lambda)?)?;
    l1_distance(&br, mu_obs)
}

/// Allocation-light residual for the search loop.
pub(crate) struct ResidualFn<'a> {
    mu: &'a [f64],
    q: &'a [f64],
    lambda: f64,
}

impl<'a> ResidualFn<'a> {
    pub(crate) fn new(mu: &'a [f64], q: &'a [f64], lambda: f64) -> Self {
        Self { mu, q, lambda }
    }

    pub(crate) fn eval(&self, gamma: f64) -> f64 {
        let max = self
            .q
            .iter()
            .zip(self.mu)
            .map(|(&q, &m)| (q - gamma * m) / self.lambda)
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = self
            .q
            .iter()
            .zip(self.mu)
            .map(|(&q, &m)| ((q - gamma * m) / self.lambda - max).exp())
            .sum();
        self.q
            .iter()
            .zip(self.mu)
            .map(|(&q, &m)| (((q - gamma * m) / self.lambda - max).exp() / z - m).abs())
            .sum()
    }
}

pub(crate) fn check_identifiable(q: &QualityVector) -> Result<()> {
    let spread = q.spread();
    if spread <= 1e-12 {
        return Err(Error::DegenerateQuality { spread });
    }
    Ok(())
}

/// Fit `γ_eff = argmin_{γ ∈ [0, gamma_max]} R(γ)`.
///
/// The decomposition fields are filled for `α = 0`; use
/// [`FitResult::with_decomposition`] to attach a model's auxiliary-loss
/// coefficient.
pub fn fit_gamma(
    mu_obs: &LoadDistribution,
    q: &QualityVector,
    lambda: f64,
    gamma_max: f64,
) -> Result<FitResult> {
    if mu_obs.len() != q.len() {
        return Err(Error::invalid("load and quality disagree on expert count"));
    }
    mu_obs.require_interior()?;
    check_identifiable(q)?;
    GameParams::new(0.0, lambda)?;
    if !(gamma_max.is_finite() && gamma_max > GAMMA_TOL) {
        return Err(Error::invalid(format!(
            "gamma_max must be positive, got {gamma_max}"
        )));
    }
    let r = ResidualFn::new(mu_obs.as_slice(), q.as_slice(), lambda);
    let found = minimize_bracketed(|g| r.eval(g), 0.0, gamma_max, GAMMA_TOL, SCAN_POINTS);
    let boundary = match found.boundary {
        Boundary::Interior => BoundaryFlag::Interior,
        Boundary::AtLower => BoundaryFlag::AtZero,
        Boundary::AtUpper => BoundaryFlag::AtMax,
    };
    Ok(FitResult {
        gamma_eff: found.x,
        residual: found.value,
        gamma_explicit: 0.0,
        gamma_implicit: found.x,
        ci_low: None,
        ci_high: None,
        boundary,
    })
}

/// Fit one congestion coefficient shared by several token types:
/// minimize `Σ_k w_k ||softmax((q^(k) - γ f)/λ) - μ^(k)||_1` where `f` is
/// the observed aggregate load.
pub fn fit_gamma_multitype(
    per_type: &[LoadDistribution],
    qualities: &[QualityVector],
    weights: &[f64],
    aggregate: &LoadDistribution,
    lambda: f64,
    gamma_max: f64,
) -> Result<FitResult> {
    let k = per_type.len();
    if k == 0 || qualities.len() != k || weights.len() != k {
        return Err(Error::invalid(
            "per-type loads, qualities and weights must align",
        ));
    }
    let m = aggregate.len();
    if per_type.iter().any(|p| p.len() != m) || qualities.iter().any(|q| q.len() != m) {
        return Err(Error::invalid("all types must share the expert count"));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::invalid(
            "type weights must be nonnegative with positive sum",
        ));
    }
    aggregate.require_interior()?;
    GameParams::new(0.0, lambda)?;
    if !(gamma_max.is_finite() && gamma_max > GAMMA_TOL) {
        return Err(Error::invalid(format!(
            "gamma_max must be positive, got {gamma_max}"
        )));
    }
    if qualities
        .iter()
        .zip(weights)
        .all(|(q, &w)| w == 0.0 || q.spread() <= 1e-12)
    {
        return Err(Error::DegenerateQuality { spread: 0.0 });
    }
    let f = aggregate.as_slice();
    let scratch = RefCell::new((vec![0.0; m], vec![0.0; m]));
    let objective = |g: f64| -> f64 {
        let (logits, p) = &mut *scratch.borrow_mut();
        let mut total = 0.0;
        for ((mu, q), &w) in per_type.iter().zip(qualities).zip(weights) {
            if w == 0.0 {
                continue;
            }
            for ((l, &qi), &fi) in logits.iter_mut().zip(q.as_slice()).zip(f) {
                *l = (qi - g * fi) / lambda;
            }
            softmax_into(logits, p);
            total += w * l1(p, mu.as_slice());
        }
        total
    };
    let found = minimize_bracketed(objective, 0.0, gamma_max, GAMMA_TOL, SCAN_POINTS);
    Ok(FitResult {
        gamma_eff: found.x,
        residual: found.value,
        gamma_explicit: 0.0,
        gamma_implicit: found.x,
        ci_low: None,
        ci_high: None,
        boundary: match found.boundary {
            Boundary::Interior => BoundaryFlag::Interior,
            Boundary::AtLower => BoundaryFlag::AtZero,
            Boundary::AtUpper => BoundaryFlag::AtMax,
        },
    })
}

/// Split `gamma_eff` into the auxiliary-loss part `α·M` and the remainder.
pub fn decompose(gamma_eff: f64, alpha: f64, experts: usize) -> (f64, f64) {
    let explicit = alpha * experts as f64;
    (explicit, gamma_eff - explicit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryTrial {
    pub gamma_true: f64,
    pub gamma_hat: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub trials: Vec<RecoveryTrial>,
    pub median_error: f64,
    pub mean_error: f64,
    pub sigma_q: f64,
    /// Trials dropped because the equilibrium solver did not converge.
    pub failed: usize,
}

impl RecoveryReport {
    /// One tab-separated row per trial with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("gamma_true\tgamma_hat\trelative_error\n");
        for t in &self.trials {
            out.push_str(&format!(
                "{:.6}\t{:.6}\t{:.6}\n",
                t.gamma_true, t.gamma_hat, t.relative_error
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub gammas: Vec<f64>,
    pub sigma_q: f64,
    /// Trials per γ value.
    pub trials: usize,
    pub experts: usize,
    /// Quality vectors are rescaled to exactly this spread.
    pub spread: f64,
    pub seed: u64,
    pub gamma_max: f64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            gammas: vec![5.0, 10.0, 15.0, 20.0, 30.0, 40.0],
            sigma_q: 0.1,
            trials: 50,
            experts: 64,
            spread: 1.5,
            seed: 42,
            gamma_max: DEFAULT_GAMMA_MAX,
        }
    }
}

/// Draw i.i.d. standard normal qualities and rescale them affinely to the
/// requested spread (minimum at zero).
pub fn random_quality<R: Rng + ?Sized>(rng: &mut R, experts: usize, spread: f64) -> QualityVector {
    loop {
        let raw: Vec<f64> = (0..experts).map(|_| rng.sample(StandardNormal)).collect();
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > 1e-12 {
            let scaled = raw.iter().map(|v| (v - lo) / (hi - lo) * spread).collect();
            return QualityVector::new(scaled).expect("finite by construction");
        }
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Generate equilibria at known γ, corrupt the quality vector with Gaussian
/// noise and refit γ from the equilibrium load and the noisy quality.
///
/// Every trial draws from its own RNG stream, so the report is identical
/// whether trials run serially or in parallel.
pub fn synthetic_recovery(config: &RecoveryConfig) -> Result<RecoveryReport> {
    if config.trials == 0 || config.gammas.is_empty() {
        return Err(Error::invalid(
            "synthetic recovery needs at least one trial",
        ));
    }
    if config.gammas.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
        return Err(Error::invalid("true gamma values must be positive"));
    }
    if !(config.sigma_q.is_finite() && config.sigma_q >= 0.0) {
        return Err(Error::invalid("sigma_q must be nonnegative"));
    }
    if config.experts < 2 || config.spread.is_nan() || config.spread <= 0.0 {
        return Err(Error::invalid("need M >= 2 and a positive quality spread"));
    }
    let jobs: Vec<(usize, f64)> = config
        .gammas
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g, config.trials))
        .enumerate()
        .collect();

    let outcomes: Vec<Result<Option<RecoveryTrial>>> = jobs
        .par_iter()
        .map(|&(index, gamma)| {
            let mut rng = stream_rng(config.seed, index as u64);
            let q = random_quality(&mut rng, config.experts, config.spread);
            let eq =
                match solve_single(&q, GameParams::with_gamma(gamma)?, SolverOptions::default()) {
                    Ok(eq) => eq,
                    Err(Error::NonConverged { .. }) => return Ok(None),
                    Err(e) => return Err(e),
                };
            let noisy: Vec<f64> = q
                .as_slice()
                .iter()
                .map(|v| v + config.sigma_q * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let noisy = QualityVector::new(noisy)?;
            let fit = fit_gamma(&eq.mu, &noisy, 1.0, config.gamma_max)?;
            Ok(Some(RecoveryTrial {
                gamma_true: gamma,
                gamma_hat: fit.gamma_eff,
                relative_error: (fit.gamma_eff - gamma).abs() / gamma,
            }))
        })
        .collect();

    let mut trials = Vec::with_capacity(outcomes.len());
    let mut failed = 0;
    for o in outcomes {
        match o? {
            Some(t) => trials.push(t),
            None => failed += 1,
        }
    }
    let mut errors: Vec<f64> = trials.iter().map(|t| t.relative_error).collect();
    errors.sort_by(f64::total_cmp);
    let mean_error = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
    Ok(RecoveryReport {
        median_error: median(&errors),
        mean_error,
        sigma_q: config.sigma_q,
        failed,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex::softmax;

    fn qv(v: &[f64]) -> QualityVector {
        QualityVector::new(v.to_vec()).unwrap()
    }

    fn equilibrium(q: &QualityVector, gamma: f64) -> LoadDistribution {
        solve_single(
            q,
            GameParams::with_gamma(gamma).unwrap(),
            SolverOptions::default(),
        )
        .unwrap()
        .mu
    }

    #[test]
    fn residual_examples() {
        let q = qv(&[0.5, -0.3, 1.1, 0.0]);
        let sm = softmax(q.as_slice()).unwrap();
        assert!(residual(0.0, &sm, &q, 1.0).unwrap() < 1e-15);

        let mu = LoadDistribution::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let far = residual(1e4, &mu, &q, 1.0).unwrap();
        // Φ concentrates on the least-loaded expert: R → 2(1 - μ_min).
        assert!((far - 2.0 * (1.0 - 0.1)).abs() < 1e-9, "{far}");

        let eq = equilibrium(&q, 10.0);
        assert!(residual(10.0, &eq, &q, 1.0).unwrap() <= 1e-10);
    }

    #[test]
    fn fits_zero_for_plain_softmax() {
        let q = qv(&[0.5, -0.3, 1.1, 0.0, 2.0]);
        let fit = fit_gamma(&softmax(q.as_slice()).unwrap(), &q, 1.0, DEFAULT_GAMMA_MAX).unwrap();
        assert!(fit.gamma_eff < 1e-3);
        assert!(fit.residual < 1e-6);
        assert_eq!(fit.boundary, BoundaryFlag::AtZero);
        assert!(!fit.in_scope());
    }

    #[test]
    fn recovers_generating_gamma() {
        let q = qv(&[0.5, -0.3, 1.1, 0.0, 2.0, 0.7]);
        let fit = fit_gamma(&equilibrium(&q, 10.0), &q, 1.0, DEFAULT_GAMMA_MAX).unwrap();
        assert!(
            (fit.gamma_eff - 10.0).abs() / 10.0 < 0.01,
            "{}",
            fit.gamma_eff
        );
        assert_eq!(fit.boundary, BoundaryFlag::Interior);
    }

    #[test]
    fn flags_upper_boundary() {
        let q = qv(&[0.5, -0.3, 1.1, 0.0]);
        let fit = fit_gamma(&equilibrium(&q, 80.0), &q, 1.0, 20.0).unwrap();
        assert_eq!(fit.boundary, BoundaryFlag::AtMax);
        assert_eq!(fit.gamma_eff, 20.0);
    }

    #[test]
    fn constant_quality_is_degenerate() {
        let q = qv(&[0.3; 4]);
        let mu = LoadDistribution::uniform(4).unwrap();
        assert!(matches!(
            fit_gamma(&mu, &q, 1.0, 100.0),
            Err(Error::DegenerateQuality { .. })
        ));
    }

    #[test]
    fn decomposition_examples() {
        let (e, i) = decompose(8.5, 0.01, 64);
        assert!((e - 0.64).abs() < 1e-12 && (i - 7.86).abs() < 1e-12);
        assert_eq!(decompose(3.0, 0.0, 64), (0.0, 3.0));
        let (e, i) = decompose(36.0, 0.01, 64);
        assert!((i - 35.36).abs() < 1e-12);
        assert!((36.0 / e - 56.25).abs() < 1e-9);
        let (_, i) = decompose(0.3, 0.01, 64);
        assert!(i < 0.0);
    }

    #[test]
    fn one_type_multitype_fit_is_the_single_fit() {
        let q = qv(&[0.9, -0.4, 0.2, 1.3, 0.0, -1.0]);
        let mu = equilibrium(&q, 7.5);
        let single = fit_gamma(&mu, &q, 1.0, DEFAULT_GAMMA_MAX).unwrap();
        let multi = fit_gamma_multitype(
            std::slice::from_ref(&mu),
            std::slice::from_ref(&q),
            &[1.0],
            &mu,
            1.0,
            DEFAULT_GAMMA_MAX,
        )
        .unwrap();
        assert!((single.gamma_eff - multi.gamma_eff).abs() < 1e-9);
        assert!((multi.gamma_eff - 7.5).abs() < 1e-3);

        let two = fit_gamma_multitype(
            &[mu.clone(), mu.clone()],
            &[q.clone(), q],
            &[0.3, 0.7],
            &mu,
            1.0,
            DEFAULT_GAMMA_MAX,
        )
        .unwrap();
        assert!((two.gamma_eff - single.gamma_eff).abs() < 1e-9);
    }

    #[test]
    fn noiseless_recovery_is_exact() {
        let report = synthetic_recovery(&RecoveryConfig {
            sigma_q: 0.0,
            trials: 3,
            experts: 16,
            ..RecoveryConfig::default()
        })
        .unwrap();
        assert_eq!(report.trials.len(), 18);
        assert!(report.median_error < 0.01);
        assert!(report.to_tsv().lines().count() == 19);
    }

    #[test]
    fn recovery_is_deterministic() {
        let config = RecoveryConfig {
            trials: 2,
            experts: 8,
            ..RecoveryConfig::default()
        };
        assert_eq!(
            synthetic_recovery(&config).unwrap(),
            synthetic_recovery(&config).unwrap()
        );
        let other = RecoveryConfig {
            seed: 7,
            ..config.clone()
        };
        assert_ne!(
            synthetic_recovery(&config).unwrap(),
            synthetic_recovery(&other).unwrap()
        );
    }
}
