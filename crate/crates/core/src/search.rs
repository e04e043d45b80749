//! Bracketed golden-section minimization of scalar functions.

/// Where the minimizer landed relative to the search interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Interior,
    AtLower,
    AtUpper,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMin {
    pub x: f64,
    pub value: f64,
    pub boundary: Boundary,
    pub evaluations: usize,
}

/// Minimize `f` on `[lo, hi]`.
///
/// A coarse scan of `scan_points` evenly spaced abscissae brackets the best
/// grid point, then golden-section search narrows that bracket to width
/// `tol`. For a unimodal `f` this is the global minimizer; the scan makes the
/// result robust to flat or noisy stretches far from the minimum. The
/// endpoints are always candidates, and the result is flagged when it lies
/// within `tol` of either one.
pub fn minimize_bracketed(
    f: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    tol: f64,
    scan_points: usize,
) -> ScalarMin {
    assert!(lo < hi && tol > 0.0);
    let n = scan_points.max(3);
    let step = (hi - lo) / (n - 1) as f64;
    let grid = |i: usize| if i == n - 1 { hi } else { lo + step * i as f64 };

    let mut best_i = 0;
    let mut best_v = f64::INFINITY;
    for i in 0..n {
        let v = f(grid(i));
        if v < best_v {
            best_v = v;
            best_i = i;
        }
    }
    let mut evaluations = n;

    let a = grid(best_i.saturating_sub(1));
    let b = grid((best_i + 1).min(n - 1));
    let (x, v, evals) = golden_section(&f, a, b, tol);
    evaluations += evals;

    let (mut x, mut value) = if v <= best_v {
        (x, v)
    } else {
        (grid(best_i), best_v)
    };
    // Snap to an endpoint when it does at least as well.
    if best_i == 0 && best_v <= value {
        x = lo;
        value = best_v;
    }
    if best_i == n - 1 && best_v <= value {
        x = hi;
        value = best_v;
    }

    let boundary = if x - lo <= tol {
        Boundary::AtLower
    } else if hi - x <= tol {
        Boundary::AtUpper
    } else {
        Boundary::Interior
    };
    ScalarMin {
        x,
        value,
        boundary,
        evaluations,
    }
}

/// Plain golden-section search on `[a, b]`; returns `(x, f(x), evaluations)`.
pub fn golden_section(
    f: impl Fn(f64) -> f64,
    mut a: f64,
    mut b: f64,
    tol: f64,
) -> (f64, f64, usize) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut evals = 2;
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
        evals += 1;
    }
    if fc <= fd {
        (c, fc, evals)
    } else {
        (d, fd, evals)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_parabola_vertex() {
        let r = minimize_bracketed(|x| (x - 3.7).powi(2), 0.0, 10.0, 1e-8, 21);
        assert!((r.x - 3.7).abs() < 1e-6);
        assert_eq!(r.boundary, Boundary::Interior);
    }

    #[test]
    fn v_shaped_minimum() {
        let r = minimize_bracketed(|x| (x - 0.123).abs(), 0.0, 500.0, 1e-6, 101);
        assert!((r.x - 0.123).abs() < 2e-6);
    }

    #[test]
    fn flags_endpoints() {
        let r = minimize_bracketed(|x| x, 0.0, 1.0, 1e-6, 11);
        assert_eq!((r.x, r.boundary), (0.0, Boundary::AtLower));
        let r = minimize_bracketed(|x| -x, 0.0, 1.0, 1e-6, 11);
        assert_eq!((r.x, r.boundary), (1.0, Boundary::AtUpper));
    }
}
