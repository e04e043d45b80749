//! Equilibria of the entropy-regularized congestion game.
//!
//! The single-type equilibrium is the unique fixed point of the best-response
//! map `Φ_γ(μ)_i = softmax((q_i - γ μ_i) / λ)` and, equivalently, the unique
//! minimizer of the strictly convex Rosenthal potential
//!
//! ```text
//! Ψ(μ) = Σ_i [ -q_i μ_i + (γ/2) μ_i² + λ μ_i log μ_i ]
//! ```
//!
//! The multi-type game couples `K` token populations through the aggregate
//! load `f = Σ_k w_k μ^(k)` and has the potential
//!
//! ```text
//! Ψ(μ^(1..K)) = (γ/2) Σ_i f_i² - Σ_k w_k Σ_i q_i^(k) μ_i^(k) + λ Σ_k w_k Σ_i μ_i^(k) log μ_i^(k)
//! ```
//!
//! Both are solved by damped best response `μ ← (1-η) μ + η Φ(μ)` starting
//! from the uniform load with `η = min(1, λ / (λ + γ))`. The direction
//! `Φ(μ) - μ` is always a descent direction of the potential, so the step is
//! halved whenever the potential fails to decrease; this keeps the iteration
//! globally convergent even where `Φ` is not a contraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::{l1, softmax_into, GameParams, LoadDistribution, QualityVector};

/// Stopping rule for the fixed-point solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// L1 fixed-point residual at which the iteration stops.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100_000,
        }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::invalid(format!("tol must be > 0, got {}", self.tol)));
        }
        Ok(())
    }
}

/// A solved single-type (or top-K truncated) equilibrium.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub mu: LoadDistribution,
    /// `||Φ(μ) - μ||_1` at the returned point.
    pub residual: f64,
    pub iterations: usize,
    pub potential: f64,
}

/// Token populations of the multi-type game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTypeSpec {
    weights: Vec<f64>,
    qualities: Vec<QualityVector>,
}

impl MultiTypeSpec {
    pub fn new(weights: Vec<f64>, qualities: Vec<QualityVector>) -> Result<Self> {
        if weights.is_empty() || weights.len() != qualities.len() {
            return Err(Error::invalid(format!(
                "{} type weights for {} quality vectors",
                weights.len(),
                qualities.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("type weights must be positive"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("type weights sum to {sum}, not 1")));
        }
        let m = qualities[0].len();
        if qualities.iter().any(|q| q.len() != m) {
            return Err(Error::invalid("quality vectors disagree on expert count"));
        }
        Ok(Self { weights, qualities })
    }

    /// Weights that are only approximately normalized (e.g. cluster token
    /// shares) are rescaled to sum to one.
    pub fn normalized(weights: Vec<f64>, qualities: Vec<QualityVector>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum.is_finite() && sum > 0.0) {
            return Err(Error::invalid("type weights must have positive total"));
        }
        Self::new(weights.iter().map(|w| w / sum).collect(), qualities)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn qualities(&self) -> &[QualityVector] {
        &self.qualities
    }

    pub fn type_count(&self) -> usize {
        self.weights.len()
    }

    pub fn experts(&self) -> usize {
        self.qualities[0].len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTypeEquilibrium {
    pub per_type: Vec<LoadDistribution>,
    /// `f_i = Σ_k w_k μ_i^(k)`.
    pub aggregate: LoadDistribution,
    /// `max_k ||Φ_k(f) - μ^(k)||_1`.
    pub residual: f64,
    pub iterations: usize,
    pub potential: f64,
}

fn check_same_m(mu: &LoadDistribution, q: &QualityVector) -> Result<()> {
    if mu.len() != q.len() {
        return Err(Error::invalid(format!(
            "load has {} experts but quality has {}",
            mu.len(),
            q.len()
        )));
    }
    Ok(())
}

/// `out = softmax((q - γ·load) / λ)`, using `scratch` for the logits.
fn best_response_into(
    load: &[f64],
    q: &[f64],
    params: GameParams,
    scratch: &mut [f64],
    out: &mut [f64],
) {
    for ((s, &qi), &li) in scratch.iter_mut().zip(q).zip(load) {
        *s = (qi - params.gamma * li) / params.lambda;
    }
    softmax_into(scratch, out);
}

/// The entropic best response to the population load `mu`.
pub fn best_response(
    mu: &LoadDistribution,
    q: &QualityVector,
    params: GameParams,
) -> Result<LoadDistribution> {
    check_same_m(mu, q)?;
    let m = mu.len();
    let (mut scratch, mut out) = (vec![0.0; m], vec![0.0; m]);
    best_response_into(mu.as_slice(), q.as_slice(), params, &mut scratch, &mut out);
    Ok(LoadDistribution::from_vec_unchecked(out))
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

fn potential_raw(mu: &[f64], q: &[f64], params: GameParams) -> f64 {
    mu.iter()
        .zip(q)
        .map(|(&m, &qi)| -qi * m + 0.5 * params.gamma * m * m + params.lambda * xlogx(m))
        .sum()
}

/// Rosenthal potential of the single-type game. Requires an interior load.
pub fn potential(mu: &LoadDistribution, q: &QualityVector, params: GameParams) -> Result<f64> {
    check_same_m(mu, q)?;
    mu.require_interior()?;
    Ok(potential_raw(mu.as_slice(), q.as_slice(), params))
}

fn multitype_potential_raw(
    per_type: &[Vec<f64>],
    aggregate: &[f64],
    spec: &MultiTypeSpec,
    params: GameParams,
) -> f64 {
    let congestion: f64 = 0.5 * params.gamma * aggregate.iter().map(|f| f * f).sum::<f64>();
    let typed: f64 = per_type
        .iter()
        .zip(&spec.weights)
        .zip(&spec.qualities)
        .map(|((mu, &w), q)| {
            w * mu
                .iter()
                .zip(q.as_slice())
                .map(|(&m, &qi)| -qi * m + params.lambda * xlogx(m))
                .sum::<f64>()
        })
        .sum();
    congestion + typed
}

/// Potential of the multi-type game at the per-type loads `per_type`.
pub fn multitype_potential(
    per_type: &[LoadDistribution],
    spec: &MultiTypeSpec,
    params: GameParams,
) -> Result<f64> {
    if per_type.len() != spec.type_count() {
        return Err(Error::invalid("one load per type is required"));
    }
    for (mu, q) in per_type.iter().zip(&spec.qualities) {
        check_same_m(mu, q)?;
        mu.require_interior()?;
    }
    let loads: Vec<Vec<f64>> = per_type.iter().map(|m| m.as_slice().to_vec()).collect();
    let aggregate = aggregate_load(&loads, &spec.weights);
    Ok(multitype_potential_raw(&loads, &aggregate, spec, params))
}

fn aggregate_load(per_type: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let m = per_type[0].len();
    let mut f = vec![0.0; m];
    for (mu, &w) in per_type.iter().zip(weights) {
        for (fi, &mi) in f.iter_mut().zip(mu) {
            *fi += w * mi;
        }
    }
    f
}

fn initial_step(params: GameParams) -> f64 {
    (params.lambda / (params.lambda + params.gamma)).min(1.0)
}

/// Accept a step when the potential rises by no more than rounding noise.
fn no_worse(candidate: f64, current: f64) -> bool {
    candidate <= current + 1e-12 * (1.0 + current.abs())
}

const MIN_STEP: f64 = 1e-12;

/// Solve the single-type equilibrium from the uniform load.
pub fn solve_single(
    q: &QualityVector,
    params: GameParams,
    opts: SolverOptions,
) -> Result<Equilibrium> {
    let start = LoadDistribution::uniform(q.len())?;
    solve_single_from(q, params, &start, opts)
}

/// Solve the single-type equilibrium from an arbitrary interior starting
/// load. The equilibrium is unique, so the answer does not depend on `start`.
pub fn solve_single_from(
    q: &QualityVector,
    params: GameParams,
    start: &LoadDistribution,
    opts: SolverOptions,
) -> Result<Equilibrium> {
    opts.validate()?;
    check_same_m(start, q)?;
    start.require_interior()?;
    let m = q.len();
    let q = q.as_slice();
    let mut mu = start.as_slice().to_vec();
    let mut br = vec![0.0; m];
    let mut cand = vec![0.0; m];
    let mut scratch = vec![0.0; m];
    let mut psi = potential_raw(&mu, q, params);
    let mut eta = initial_step(params);
    let mut residual = f64::INFINITY;

    for it in 0..opts.max_iter {
        best_response_into(&mu, q, params, &mut scratch, &mut br);
        residual = l1(&br, &mu);
        if residual <= opts.tol {
            return Ok(Equilibrium {
                mu: LoadDistribution::from_vec_unchecked(mu),
                residual,
                iterations: it,
                potential: psi,
            });
        }
        loop {
            for ((c, &a), &b) in cand.iter_mut().zip(&mu).zip(&br) {
                *c = (1.0 - eta) * a + eta * b;
            }
            let psi_c = potential_raw(&cand, q, params);
            if no_worse(psi_c, psi) || eta <= MIN_STEP {
                psi = psi_c;
                std::mem::swap(&mut mu, &mut cand);
                break;
            }
            eta *= 0.5;
        }
    }
    Err(Error::NonConverged {
        iterations: opts.max_iter,
        residual,
        best: mu,
        detail: None,
    })
}

/// Solve the coupled multi-type equilibrium by synchronous damped best
/// response of every type against the current aggregate load.
pub fn solve_multitype(
    spec: &MultiTypeSpec,
    params: GameParams,
    opts: SolverOptions,
) -> Result<MultiTypeEquilibrium> {
    opts.validate()?;
    let m = spec.experts();
    let k = spec.type_count();
    let mut mu = vec![vec![1.0 / m as f64; m]; k];
    let mut cand = mu.clone();
    let mut br = mu.clone();
    let mut scratch = vec![0.0; m];
    let mut f = aggregate_load(&mu, &spec.weights);
    let mut psi = multitype_potential_raw(&mu, &f, spec, params);
    let mut eta = initial_step(params);
    let mut residual = f64::INFINITY;

    for it in 0..opts.max_iter {
        residual = 0.0f64;
        for ((b, q), cur) in br.iter_mut().zip(&spec.qualities).zip(&mu) {
            best_response_into(&f, q.as_slice(), params, &mut scratch, b);
            residual = residual.max(l1(b, cur));
        }
        if residual <= opts.tol {
            let per_type = mu
                .into_iter()
                .map(LoadDistribution::from_vec_unchecked)
                .collect();
            return Ok(MultiTypeEquilibrium {
                per_type,
                aggregate: LoadDistribution::from_vec_unchecked(f),
                residual,
                iterations: it,
                potential: psi,
            });
        }
        loop {
            for ((c, a), b) in cand.iter_mut().zip(&mu).zip(&br) {
                for ((ci, &ai), &bi) in c.iter_mut().zip(a).zip(b) {
                    *ci = (1.0 - eta) * ai + eta * bi;
                }
            }
            let f_c = aggregate_load(&cand, &spec.weights);
            let psi_c = multitype_potential_raw(&cand, &f_c, spec, params);
            if no_worse(psi_c, psi) || eta <= MIN_STEP {
                psi = psi_c;
                f = f_c;
                std::mem::swap(&mut mu, &mut cand);
                break;
            }
            eta *= 0.5;
        }
    }
    Err(Error::NonConverged {
        iterations: opts.max_iter,
        residual,
        best: f,
        detail: None,
    })
}

/// Keep the `k` largest entries of `p` (ties go to the lowest index), zero
/// the rest and renormalize the survivors proportionally. Returns the kept
/// indices in ascending order.
pub(crate) fn truncate_top_k(p: &[f64], k: usize, out: &mut [f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_unstable();
    let mass: f64 = kept.iter().map(|&i| p[i]).sum();
    out.iter_mut().for_each(|o| *o = 0.0);
    for &i in &kept {
        out[i] = p[i] / mass;
    }
    kept
}

/// Fixed point of the top-K truncated best response `μ ↦ T_K(Φ(μ))`, found
/// by damped iteration from the uniform load. Existence is not guaranteed;
/// when the kept support keeps switching the solver reports
/// [`Error::NonConverged`] with a diagnostic.
pub fn topk_fixed_point(
    q: &QualityVector,
    params: GameParams,
    k: usize,
    opts: SolverOptions,
) -> Result<Equilibrium> {
    opts.validate()?;
    let m = q.len();
    if k == 0 || k > m {
        return Err(Error::invalid(format!("top-K width {k} outside 1..={m}")));
    }
    let q = q.as_slice();
    let mut mu = vec![1.0 / m as f64; m];
    let mut br = vec![0.0; m];
    let mut target = vec![0.0; m];
    let mut scratch = vec![0.0; m];
    let eta = initial_step(params);
    let mut residual = f64::INFINITY;
    let mut support: Vec<usize> = Vec::new();
    let window = (opts.max_iter / 10).max(1);
    let mut switches_in_window = 0usize;

    for it in 0..opts.max_iter {
        best_response_into(&mu, q, params, &mut scratch, &mut br);
        let kept = truncate_top_k(&br, k, &mut target);
        if kept != support {
            if it + window >= opts.max_iter {
                switches_in_window += 1;
            }
            support = kept;
        }
        residual = l1(&target, &mu);
        if residual <= opts.tol {
            // Report the exactly truncated point rather than the damped iterate.
            let potential = potential_raw(&target, q, params);
            return Ok(Equilibrium {
                mu: LoadDistribution::from_vec_unchecked(target),
                residual,
                iterations: it,
                potential,
            });
        }
        for (a, &b) in mu.iter_mut().zip(&target) {
            *a = (1.0 - eta) * *a + eta * b;
        }
    }
    let detail = (switches_in_window > 0).then(|| {
        format!(
            "top-{k} support switched {switches_in_window} times in the final {window} iterations"
        )
    });
    Err(Error::NonConverged {
        iterations: opts.max_iter,
        residual,
        best: mu,
        detail,
    })
}
