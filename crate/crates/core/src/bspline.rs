//! Common B-spline basis shared by every sensor.
//!
//! Knots are clamped (each endpoint repeated `order` times) with equally
//! spaced interior knots. `order` follows de Boor's convention, so order 3
//! means piecewise quadratics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Singular values below this fraction of the largest one mark the spline
/// design as rank deficient.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub domain_lo: f64,
    pub domain_hi: f64,
    pub order: usize,
    pub n_basis: usize,
    pub knot_sequence: Vec<f64>,
}

/// Clamped uniform B-spline basis with `n_basis` functions of the given order.
pub fn build_basis(domain_lo: f64, domain_hi: f64, n_basis: usize, order: usize) -> Result<BasisSpec> {
    if order < 1 || n_basis < order {
        return Err(Error::InvalidArgument(format!(
            "need n_basis >= order >= 1, got n_basis={n_basis}, order={order}"
        )));
    }
    if !(domain_lo.is_finite() && domain_hi.is_finite() && domain_lo < domain_hi) {
        return Err(Error::InvalidArgument(format!(
            "need finite domain_lo < domain_hi, got [{domain_lo}, {domain_hi}]"
        )));
    }
    let n_interior = n_basis - order;
    let step = (domain_hi - domain_lo) / (n_interior + 1) as f64;
    let mut knots = Vec::with_capacity(n_basis + order);
    knots.extend(std::iter::repeat_n(domain_lo, order));
    knots.extend((1..=n_interior).map(|i| domain_lo + i as f64 * step));
    knots.extend(std::iter::repeat_n(domain_hi, order));
    Ok(BasisSpec {
        domain_lo,
        domain_hi,
        order,
        n_basis,
        knot_sequence: knots,
    })
}

impl BasisSpec {
    pub fn degree(&self) -> usize {
        self.order - 1
    }

    /// Checks the structural invariants; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.order < 1 || self.n_basis < self.order {
            return Err(Error::InvalidArgument("basis needs n_basis >= order >= 1".into()));
        }
        if !(self.domain_lo < self.domain_hi) {
            return Err(Error::InvalidArgument("basis needs domain_lo < domain_hi".into()));
        }
        if self.knot_sequence.len() != self.n_basis + self.order {
            return Err(Error::InvalidArgument(format!(
                "knot sequence has length {}, expected {}",
                self.knot_sequence.len(),
                self.n_basis + self.order
            )));
        }
        if self.knot_sequence.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("knot sequence must be nondecreasing".into()));
        }
        Ok(())
    }

    /// Index of the knot span containing `t`; the right endpoint belongs to
    /// the last nonempty span.
    fn find_span(&self, t: f64) -> usize {
        let p = self.degree();
        let n = self.n_basis;
        let u = &self.knot_sequence;
        if t >= u[n] {
            return n - 1;
        }
        // first index in [p, n) with u[idx] <= t < u[idx + 1]
        let (mut lo, mut hi) = (p, n);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < u[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Nonzero basis values at `t` (Cox–de Boor), returned with the index of
    /// the first one. Assumes `t` is inside the domain.
    fn nonzero_values(&self, t: f64) -> (usize, Vec<f64>) {
        let p = self.degree();
        let u = &self.knot_sequence;
        let span = self.find_span(t);
        let mut values = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        values[0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[span + 1 - j];
            right[j] = u[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        (span - p, values)
    }

    fn check_domain(&self, t: f64) -> Result<()> {
        if !(t >= self.domain_lo && t <= self.domain_hi) {
            return Err(Error::OutOfDomain {
                t,
                lo: self.domain_lo,
                hi: self.domain_hi,
            });
        }
        Ok(())
    }

    /// Design matrix with one row per time point and one column per basis
    /// function.
    pub fn design_matrix(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let mut x = DMatrix::zeros(times.len(), self.n_basis);
        for (row, &t) in times.iter().enumerate() {
            self.check_domain(t)?;
            let (first, vals) = self.nonzero_values(t);
            for (offset, v) in vals.into_iter().enumerate() {
                x[(row, first + offset)] = v;
            }
        }
        Ok(x)
    }

    /// Evaluates a spline with the given coefficients on `times`.
    pub fn evaluate_curve(&self, coeffs: &[f64], times: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.n_basis {
            return Err(Error::ShapeMismatch(format!(
                "{} coefficients for a basis of size {}",
                coeffs.len(),
                self.n_basis
            )));
        }
        times
            .iter()
            .map(|&t| {
                self.check_domain(t)?;
                let (first, vals) = self.nonzero_values(t);
                Ok(vals.iter().zip(&coeffs[first..]).map(|(v, c)| v * c).sum())
            })
            .collect()
    }
}

/// All `n_basis` basis values at `t`.
pub fn evaluate_basis(basis: &BasisSpec, t: f64) -> Result<Vec<f64>> {
    basis.check_domain(t)?;
    let (first, vals) = basis.nonzero_values(t);
    let mut out = vec![0.0; basis.n_basis];
    out[first..first + vals.len()].copy_from_slice(&vals);
    Ok(out)
}

/// Least-squares spline coefficients of one sampled curve.
pub fn fit_coefficients(basis: &BasisSpec, times: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    let projector = SplineProjector::new(basis, times)?;
    projector.project(values)
}

/// Precomputed least-squares projection from a fixed time grid onto the basis.
/// Fitting many curves sampled on the same grid reuses one pseudo-inverse.
#[derive(Debug, Clone)]
pub struct SplineProjector {
    times: Vec<f64>,
    pinv: DMatrix<f64>,
}

impl SplineProjector {
    pub fn new(basis: &BasisSpec, times: &[f64]) -> Result<Self> {
        if times.len() < basis.n_basis {
            return Err(Error::RankDeficient(format!(
                "{} sample times for {} basis functions",
                times.len(),
                basis.n_basis
            )));
        }
        let design = basis.design_matrix(times)?;
        let svd = design.svd(true, true);
        let max_sv = svd.singular_values.max();
        let min_sv = svd.singular_values.min();
        if !(max_sv > 0.0) || min_sv / max_sv < RANK_TOL {
            return Err(Error::RankDeficient(format!(
                "design condition {:.3e} on {} sample times",
                if max_sv > 0.0 { min_sv / max_sv } else { 0.0 },
                times.len()
            )));
        }
        let pinv = svd
            .pseudo_inverse(max_sv * RANK_TOL)
            .map_err(|e| Error::Numerical(e.to_string()))?;
        Ok(Self {
            times: times.to_vec(),
            pinv,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn project(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.times.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} sample times",
                values.len(),
                self.times.len()
            )));
        }
        let y = DVector::from_column_slice(values);
        Ok((&self.pinv * y).as_slice().to_vec())
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1].
pub(crate) fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Chebyshev-like starting guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let pk = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = pk;
            }
            // p1 = P_n(x), p0 = P_{n-1}(x)
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Pairwise L2 inner products of the basis functions over the domain,
/// integrated per knot span with `order`-point Gauss–Legendre (exact for the
/// piecewise polynomial products).
pub fn gram_matrix(basis: &BasisSpec) -> Result<DMatrix<f64>> {
    basis.validate()?;
    let (nodes, weights) = gauss_legendre(basis.order.max(1));
    let nb = basis.n_basis;
    let mut gram = DMatrix::zeros(nb, nb);
    for span in basis.knot_sequence.windows(2) {
        let (a, b) = (span[0], span[1]);
        if b <= a {
            continue;
        }
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (x, w) in nodes.iter().zip(&weights) {
            let t = mid + half * x;
            let (first, vals) = basis.nonzero_values(t);
            for (ia, va) in vals.iter().enumerate() {
                for (ib, vb) in vals.iter().enumerate() {
                    gram[(first + ia, first + ib)] += half * w * va * vb;
                }
            }
        }
    }
    // exact symmetry
    for r in 0..nb {
        for c in (r + 1)..nb {
            let v = 0.5 * (gram[(r, c)] + gram[(c, r)]);
            gram[(r, c)] = v;
            gram[(c, r)] = v;
        }
    }
    Ok(gram)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_basis_has_twelve_functions() {
        let b = build_basis(0.0, 30.0, 12, 3).unwrap();
        assert_eq!(b.n_basis, 12);
        assert_eq!(b.knot_sequence.len(), 15);
        assert_eq!(b.knot_sequence[0], 0.0);
        assert_eq!(*b.knot_sequence.last().unwrap(), 30.0);
        b.validate().unwrap();
    }

    #[test]
    fn single_constant_function() {
        let b = build_basis(0.0, 1.0, 1, 1).unwrap();
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(evaluate_basis(&b, t).unwrap(), vec![1.0]);
        }
    }

    #[test]
    fn interior_knots_equally_spaced_and_partition_of_unity() {
        let b = build_basis(0.0, 10.0, 5, 3).unwrap();
        // 2 interior knots at 10/3 and 20/3
        assert_abs_diff_eq!(b.knot_sequence[3], 10.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.knot_sequence[4], 20.0 / 3.0, epsilon = 1e-12);
        let s: f64 = evaluate_basis(&b, 2.5).unwrap().iter().sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn invalid_arguments() {
        assert!(matches!(build_basis(0.0, 1.0, 2, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_basis(1.0, 1.0, 4, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_basis(0.0, 1.0, 4, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn order_one_is_indicator() {
        let b = build_basis(0.0, 1.0, 4, 1).unwrap();
        for t in [0.0, 0.1, 0.25, 0.6, 0.99, 1.0] {
            let v = evaluate_basis(&b, t).unwrap();
            assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(v.iter().filter(|&&x| x == 0.0).count(), 3);
        }
    }

    #[test]
    fn clamped_left_endpoint() {
        for order in 1..=4 {
            let b = build_basis(0.0, 30.0, 12, order).unwrap();
            let v = evaluate_basis(&b, 0.0).unwrap();
            assert_eq!(v[0], 1.0);
            let v = evaluate_basis(&b, 30.0).unwrap();
            assert_abs_diff_eq!(v[11], 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn cubic_midpoint_partition() {
        let b = build_basis(0.0, 30.0, 12, 4).unwrap();
        let s: f64 = evaluate_basis(&b, 15.0).unwrap().iter().sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn out_of_domain_rejected() {
        let b = build_basis(0.0, 30.0, 12, 3).unwrap();
        assert!(matches!(evaluate_basis(&b, -0.1), Err(Error::OutOfDomain { .. })));
        assert!(matches!(evaluate_basis(&b, 30.1), Err(Error::OutOfDomain { .. })));
        assert!(evaluate_basis(&b, f64::NAN).is_err());
    }

    #[test]
    fn partition_of_unity_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for order in 1..=4 {
            let b = build_basis(-2.0, 5.0, 9, order).unwrap();
            for _ in 0..1000 {
                let t = rng.random_range(-2.0..=5.0);
                let v = evaluate_basis(&b, t).unwrap();
                assert!(v.iter().all(|&x| x >= 0.0));
                assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn local_support() {
        let b = build_basis(0.0, 30.0, 12, 3).unwrap();
        let u = &b.knot_sequence;
        for t in (0..=300).map(|i| i as f64 * 0.1) {
            let v = evaluate_basis(&b, t).unwrap();
            for (j, &val) in v.iter().enumerate() {
                if t < u[j] || t > u[j + b.order] {
                    assert_eq!(val, 0.0, "B_{j}({t})");
                }
            }
        }
    }

    #[test]
    fn constant_curve_reproduced() {
        let b = build_basis(0.0, 30.0, 12, 3).unwrap();
        let times: Vec<f64> = (0..=30).map(f64::from).collect();
        let values = vec![3.7; times.len()];
        let c = fit_coefficients(&b, &times, &values).unwrap();
        let fitted = b.evaluate_curve(&c, &times).unwrap();
        for f in fitted {
            assert_abs_diff_eq!(f, 3.7, epsilon = 1e-10);
        }
    }

    #[test]
    fn recovers_synthesized_coefficients() {
        let b = build_basis(0.0, 30.0, 12, 3).unwrap();
        let times: Vec<f64> = (0..=30).map(f64::from).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
        let values = b.evaluate_curve(&z, &times).unwrap();
        let c = fit_coefficients(&b, &times, &values).unwrap();
        for (a, e) in c.iter().zip(&z) {
            assert_abs_diff_eq!(a, e, epsilon = 1e-8);
        }
    }

    #[test]
    fn residual_orthogonal_to_design() {
        let b = build_basis(0.0, 30.0, 12, 3).unwrap();
        let times: Vec<f64> = (0..=30).map(f64::from).collect();
        let values: Vec<f64> = times.iter().map(|t| (t / 4.0).sin() + 0.01 * t * t).collect();
        let c = fit_coefficients(&b, &times, &values).unwrap();
        let fitted = b.evaluate_curve(&c, &times).unwrap();
        let x = b.design_matrix(&times).unwrap();
        let resid = DVector::from_iterator(times.len(), values.iter().zip(&fitted).map(|(v, f)| v - f));
        let xtr = x.transpose() * resid;
        assert!(xtr.amax() < 1e-9, "{}", xtr.amax());
    }

    #[test]
    fn too_few_points_is_rank_deficient() {
        let b = build_basis(0.0, 30.0, 12, 3).unwrap();
        let err = fit_coefficients(&b, &[1.0, 2.0], &[0.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::RankDeficient(_)));
        // enough points but clumped in one span
        let times: Vec<f64> = (0..20).map(|i| 1.0 + i as f64 * 0.01).collect();
        let err = fit_coefficients(&b, &times, &vec![0.0; 20]).unwrap_err();
        assert!(matches!(err, Error::RankDeficient(_)));
    }

    #[test]
    fn gram_of_indicators_is_diagonal() {
        let k = 5;
        let b = build_basis(0.0, 1.0, k, 1).unwrap();
        let g = gram_matrix(&b).unwrap();
        for r in 0..k {
            for c in 0..k {
                let expect = if r == c { 1.0 / k as f64 } else { 0.0 };
                assert_abs_diff_eq!(g[(r, c)], expect, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn gram_matches_fine_quadrature() {
        // independent check: composite Simpson on a fine grid
        let b = build_basis(0.0, 30.0, 12, 3).unwrap();
        let g = gram_matrix(&b).unwrap();
        let n = 30_000;
        let h = 30.0 / n as f64;
        let mut fine = DMatrix::<f64>::zeros(12, 12);
        for i in 0..=n {
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            } * h
                / 3.0;
            let v = evaluate_basis(&b, i as f64 * h).unwrap();
            for r in 0..12 {
                for c in 0..12 {
                    fine[(r, c)] += w * v[r] * v[c];
                }
            }
        }
        assert!((g - fine).amax() < 1e-6);
    }

    #[test]
    fn gram_symmetric_positive_definite() {
        for order in 1..=4 {
            let b = build_basis(0.0, 30.0, 12, order).unwrap();
            let g = gram_matrix(&b).unwrap();
            assert!((&g - g.transpose()).amax() < 1e-12);
            let eig = g.symmetric_eigen();
            assert!(eig.eigenvalues.min() > 0.0);
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in 1..=6 {
            let (x, w) = gauss_legendre(n);
            for deg in 0..(2 * n) {
                let approx: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert_abs_diff_eq!(approx, exact, epsilon = 1e-13);
            }
        }
    }

    proptest! {
        #[test]
        fn fit_is_exact_on_spline_curves(
            z in proptest::collection::vec(-5.0f64..5.0, 8),
            order in 1usize..=4,
        ) {
            let b = build_basis(0.0, 7.0, 8, order).unwrap();
            let times: Vec<f64> = (0..=35).map(|i| i as f64 * 0.2).collect();
            let values = b.evaluate_curve(&z, &times).unwrap();
            let c = fit_coefficients(&b, &times, &values).unwrap();
            for (a, e) in c.iter().zip(&z) {
                prop_assert!((a - e).abs() < 1e-8);
            }
        }
    }
}
