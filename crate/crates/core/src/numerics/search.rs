//! Scalar line search.

/// Golden-section search for a minimum of `f` on `[lo, hi]`. Returns every
/// evaluated `(x, f(x))` in evaluation order so callers can apply their own
/// tie-breaking. Non-finite values count as `+inf`.
pub fn golden_section(lo: f64, hi: f64, iterations: usize, mut f: impl FnMut(f64) -> f64) -> Vec<(f64, f64)> {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let clean = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let mut f1 = clean(f(x1));
    let mut f2 = clean(f(x2));
    let mut seen = vec![(x1, f1), (x2, f2)];
    for _ in 2..iterations.max(2) {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = clean(f(x1));
            seen.push((x1, f1));
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = clean(f(x2));
            seen.push((x2, f2));
        }
    }
    seen
}

/// Best point of a search history; among values within `tol` of the
/// minimum the largest `x` wins.
pub fn best_prefer_larger(points: &[(f64, f64)], tol: f64) -> Option<(f64, f64)> {
    let min = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return None;
    }
    points
        .iter()
        .filter(|p| p.1 <= min + tol * (1.0 + min.abs()))
        .copied()
        .max_by(|a, b| a.0.total_cmp(&b.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_parabola_minimum() {
        let pts = golden_section(0.0, 1.0, 40, |x| (x - 0.3f64).powi(2));
        let best = best_prefer_larger(&pts, 0.0).unwrap();
        assert!((best.0 - 0.3).abs() < 1e-6);
        assert_eq!(pts.len(), 40);
    }

    #[test]
    fn ties_prefer_larger_argument() {
        let pts = [(0.0, 1.0), (0.5, 1.0), (1.0, 1.0), (0.7, 2.0)];
        assert_eq!(best_prefer_larger(&pts, 0.0).unwrap().0, 1.0);
        assert!(best_prefer_larger(&[(0.0, f64::INFINITY)], 0.0).is_none());
    }

    #[test]
    fn infeasible_values_are_skipped() {
        let pts = golden_section(0.0, 1.0, 20, |x| if x < 0.5 { f64::NAN } else { x });
        let best = best_prefer_larger(&pts, 0.0).unwrap();
        assert!(best.0 >= 0.5 && best.0 < 0.52);
    }
}
