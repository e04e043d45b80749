//! Simplex-valued primitives shared by every other module: load
//! distributions, quality vectors, game parameters and the small kernels
//! (softmax, L1 distance, normalized entropy, quality spread) built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entries produced by [`softmax`] never drop below this value, so its output
/// is strictly interior even when `exp` underflows.
pub const SOFTMAX_FLOOR: f64 = 1e-300;

/// Inputs whose sum is within this distance of one are renormalized on
/// construction; anything further off is rejected.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-9;

/// A point on the probability simplex over `M >= 2` experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LoadDistribution(Vec<f64>);

impl LoadDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::invalid(format!(
                "a load distribution needs at least 2 experts, got {}",
                weights.len()
            )));
        }
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !w.is_finite() || **w < 0.0)
        {
            return Err(Error::invalid(format!(
                "load share {i} is {w}; shares must be finite and nonnegative"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > RENORMALIZE_TOLERANCE {
            return Err(Error::invalid(format!("load shares sum to {sum}, not 1")));
        }
        let mut weights = weights;
        if sum != 1.0 {
            weights.iter_mut().for_each(|w| *w /= sum);
        }
        Ok(Self(weights))
    }

    /// Like [`LoadDistribution::new`] but additionally requires every share to
    /// be strictly positive.
    pub fn interior(weights: Vec<f64>) -> Result<Self> {
        let mu = Self::new(weights)?;
        mu.require_interior()?;
        Ok(mu)
    }

    pub fn uniform(experts: usize) -> Result<Self> {
        if experts < 2 {
            return Err(Error::invalid("uniform distribution needs M >= 2"));
        }
        Ok(Self(vec![1.0 / experts as f64; experts]))
    }

    /// Build from shares that are already known to be a valid distribution.
    pub(crate) fn from_vec_unchecked(weights: Vec<f64>) -> Self {
        debug_assert!(weights.len() >= 2);
        debug_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        Self(weights)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_interior(&self) -> bool {
        self.0.iter().all(|&w| w > 0.0)
    }

    pub fn require_interior(&self) -> Result<()> {
        match self.0.iter().position(|&w| w <= 0.0) {
            Some(i) => Err(Error::invalid(format!(
                "expert {i} has zero load; an interior distribution is required"
            ))),
            None => Ok(()),
        }
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

impl TryFrom<Vec<f64>> for LoadDistribution {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<LoadDistribution> for Vec<f64> {
    fn from(value: LoadDistribution) -> Self {
        value.0
    }
}

impl AsRef<[f64]> for LoadDistribution {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Reduced-form per-expert preference scores for one layer, in gate-logit
/// units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QualityVector(Vec<f64>);

impl QualityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "a quality vector needs at least 2 experts, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("quality {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `max_i q_i - min_i q_i`.
    pub fn spread(&self) -> f64 {
        quality_spread(self)
    }
}

impl TryFrom<Vec<f64>> for QualityVector {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<QualityVector> for Vec<f64> {
    fn from(value: QualityVector) -> Self {
        value.0
    }
}

/// Congestion strength and entropy temperature of the routing game.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GameParams {
    pub gamma: f64,
    pub lambda: f64,
}

impl GameParams {
    pub fn new(gamma: f64, lambda: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::invalid(format!("gamma must be >= 0, got {gamma}")));
        }
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::invalid(format!("lambda must be > 0, got {lambda}")));
        }
        Ok(Self { gamma, lambda })
    }

    /// Congestion `gamma` at the conventional router temperature `lambda = 1`.
    pub fn with_gamma(gamma: f64) -> Result<Self> {
        Self::new(gamma, 1.0)
    }
}

impl Default for GameParams {
    fn default() -> Self {
        Self {
            gamma: 0.0,
            lambda: 1.0,
        }
    }
}

/// Numerically stable softmax. Entries are floored at [`SOFTMAX_FLOOR`] so
/// the result is always interior.
pub fn softmax(logits: &[f64]) -> Result<LoadDistribution> {
    if logits.len() < 2 {
        return Err(Error::invalid("softmax needs at least 2 logits"));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("logit {i} is not finite")));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(LoadDistribution(out))
}

/// Allocation-free softmax kernel used by the solvers. `logits` must be
/// finite.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    let mut floored = false;
    for o in out.iter_mut() {
        *o /= sum;
        if *o < SOFTMAX_FLOOR {
            *o = SOFTMAX_FLOOR;
            floored = true;
        }
    }
    if floored {
        let s: f64 = out.iter().sum();
        out.iter_mut().for_each(|o| *o /= s);
    }
}

/// `sum_i |a_i - b_i|`, in `[0, 2]` for two distributions.
pub fn l1_distance(a: &LoadDistribution, b: &LoadDistribution) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "cannot compare distributions over {} and {} experts",
            a.len(),
            b.len()
        )));
    }
    Ok(l1(a.as_slice(), b.as_slice()))
}

pub(crate) fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Shannon entropy (natural log) divided by `log M`; 1 for the uniform load,
/// 0 for a one-hot load.
pub fn entropy_normalized(mu: &LoadDistribution) -> f64 {
    let first = mu.as_slice()[0];
    if mu.as_slice().iter().all(|&p| p == first) {
        return 1.0;
    }
    let h: f64 = mu
        .as_slice()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    (h / (mu.len() as f64).ln()).clamp(0.0, 1.0)
}

pub fn quality_spread(q: &QualityVector) -> f64 {
    let (lo, hi) = q
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    hi - lo
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(v: &[f64]) -> LoadDistribution {
        LoadDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_constant_logits_is_uniform() {
        let p = softmax(&[0.0; 4]).unwrap();
        assert_eq!(p.as_slice(), &[0.25; 4]);
    }

    #[test]
    fn softmax_reference_values() {
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        let want = [0.09003057, 0.24472847, 0.66524096];
        for (a, b) in p.as_slice().iter().zip(want) {
            assert!((a - b).abs() < 5e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax(&[0.0, f64::NAN]),
            Err(Error::InvalidInput(_))
        ));
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn softmax_stays_interior_under_underflow() {
        let p = softmax(&[0.0, -5000.0, 800.0]).unwrap();
        assert!(p.is_interior());
        assert!(p.min() >= SOFTMAX_FLOOR * 0.5);
    }

    #[test]
    fn l1_reference_values() {
        let x = dist(&[0.3, 0.7]);
        assert_eq!(l1_distance(&x, &x).unwrap(), 0.0);
        assert_eq!(
            l1_distance(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])).unwrap(),
            2.0
        );
        let d = l1_distance(&dist(&[0.6, 0.4]), &dist(&[0.5, 0.5])).unwrap();
        assert!((d - 0.2).abs() < 1e-15);
        assert!(l1_distance(&dist(&[0.5, 0.5]), &dist(&[0.2, 0.3, 0.5])).is_err());
    }

    #[test]
    fn entropy_reference_values() {
        assert_eq!(
            entropy_normalized(&LoadDistribution::uniform(7).unwrap()),
            1.0
        );
        assert_eq!(entropy_normalized(&dist(&[1.0, 0.0, 0.0])), 0.0);
        // 1.75 bits over a 2-bit maximum.
        let h = entropy_normalized(&dist(&[0.5, 0.25, 0.125, 0.125]));
        assert!((h - 0.875).abs() < 1e-12, "{h}");
    }

    #[test]
    fn spread_reference_values() {
        assert_eq!(QualityVector::new(vec![3.0; 5]).unwrap().spread(), 0.0);
        assert_eq!(QualityVector::new(vec![1.0, 0.0]).unwrap().spread(), 1.0);
    }

    #[test]
    fn construction_renormalizes_small_drift_only() {
        let mu = LoadDistribution::new(vec![0.5 + 4e-10, 0.5]).unwrap();
        assert!((mu.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(LoadDistribution::new(vec![0.5 + 1e-6, 0.5]).is_err());
        assert!(LoadDistribution::new(vec![1.0]).is_err());
        assert!(LoadDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(LoadDistribution::interior(vec![1.0, 0.0]).is_err());
        assert!(QualityVector::new(vec![0.0, f64::NAN]).is_err());
        assert!(GameParams::new(-1.0, 1.0).is_err());
        assert!(GameParams::new(1.0, 0.0).is_err());
    }

    fn simplex_point(m: usize) -> impl Strategy<Value = LoadDistribution> {
        prop::collection::vec(0.0f64..1.0, m).prop_filter_map("zero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| LoadDistribution::new(v.iter().map(|x| x / s).collect()).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in prop::collection::vec(-50.0f64..50.0, 2..40),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&logits).unwrap();
            let sum: f64 = p.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(p.is_interior());
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let p2 = softmax(&shifted).unwrap();
            prop_assert!(l1_distance(&p, &p2).unwrap() < 1e-12);
        }

        #[test]
        fn l1_is_a_metric(
            (a, b, c) in (2usize..12).prop_flat_map(|m| (simplex_point(m), simplex_point(m), simplex_point(m)))
        ) {
            let ab = l1_distance(&a, &b).unwrap();
            let ba = l1_distance(&b, &a).unwrap();
            let bc = l1_distance(&b, &c).unwrap();
            let ac = l1_distance(&a, &c).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert!((0.0..=2.0 + 1e-12).contains(&ab));
            prop_assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
            if a != b {
                prop_assert!(ab > 0.0);
            }
        }

        #[test]
        fn entropy_below_one_off_uniform(mu in (2usize..20).prop_flat_map(simplex_point)) {
            let h = entropy_normalized(&mu);
            let m = mu.len() as f64;
            let off_uniform = mu.as_slice().iter().any(|p| (p - 1.0 / m).abs() > 1e-6);
            prop_assert!((0.0..=1.0).contains(&h));
            if off_uniform {
                prop_assert!(h < 1.0);
            }
        }
    }
}
