//! Cubic B-spline machinery: clamped knot vectors, Cox-de Boor evaluation,
//! the equivalent truncated-power basis, the change of basis between the two,
//! the curvature penalty matrix and its mixed-model (O'Sullivan) design.
//!
//! Everything lives on the normalised covariate domain [0,1]; callers rescale
//! their data first and map results back.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::solve_matrix_refined;

/// Spline degree is fixed to cubic throughout the model.
pub const DEGREE: usize = 3;

/// Clamped cubic knot sequence on [0,1] with `K` strictly increasing interior
/// knots and 4-fold repeated boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    interior: Vec<f64>,
    full: Vec<f64>,
}

impl KnotVector {
    /// Evenly spaced interior knots i/(K+1), i = 1..K.
    pub fn uniform(k: usize) -> Self {
        let interior: Vec<f64> = (1..=k).map(|i| i as f64 / (k + 1) as f64).collect();
        Self::from_interior(interior).expect("uniform knots are valid")
    }

    /// Build from explicit interior knots; they must be strictly increasing
    /// and strictly inside (0,1).
    pub fn from_interior(interior: Vec<f64>) -> Result<Self> {
        for w in interior.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::invalid("interior knots must be strictly increasing"));
            }
        }
        if interior
            .iter()
            .any(|&g| !g.is_finite() || g <= 0.0 || g >= 1.0)
        {
            return Err(Error::invalid(
                "interior knots must lie strictly inside (0,1)",
            ));
        }
        let mut full = vec![0.0; 4];
        full.extend_from_slice(&interior);
        full.extend_from_slice(&[1.0; 4]);
        Ok(KnotVector { interior, full })
    }

    /// Validate a covariate domain and return the evenly spaced knots on the
    /// normalised scale. The domain itself only matters for the affine rescale
    /// kept by the caller.
    pub fn make_knots(k: usize, domain: (f64, f64)) -> Result<Self> {
        let (lo, hi) = domain;
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid("domain endpoints must be finite"));
        }
        if !(hi > lo) {
            return Err(Error::invalid("domain must have positive length"));
        }
        Ok(Self::uniform(k))
    }

    /// Number of interior knots K.
    pub fn num_interior(&self) -> usize {
        self.interior.len()
    }

    /// Number of basis functions, K + 4.
    pub fn num_basis(&self) -> usize {
        self.interior.len() + 4
    }

    pub fn interior(&self) -> &[f64] {
        &self.interior
    }

    /// Full clamped sequence of length K + 8.
    pub fn full(&self) -> &[f64] {
        &self.full
    }

    /// Greville abscissae: K + 4 strictly increasing points in [0,1]. These
    /// are both the change-of-basis collocation points and the B-spline
    /// coefficients of the identity function.
    pub fn greville(&self) -> Vec<f64> {
        (0..self.num_basis())
            .map(|j| (self.full[j + 1] + self.full[j + 2] + self.full[j + 3]) / 3.0)
            .collect()
    }

    /// All basis values of the given degree at x, length full.len() - p - 1.
    fn all_values(&self, p: usize, x: f64) -> Vec<f64> {
        let t = &self.full;
        let n = t.len();
        let t_max = t[n - 1];
        let mut vals = vec![0.0; n - 1];
        // degree 0 indicators on half-open spans, closing the last span at x = t_max
        for j in 0..n - 1 {
            let inside =
                (t[j] <= x && x < t[j + 1]) || (x == t_max && t[j + 1] == t_max && t[j] < t[j + 1]);
            if inside {
                vals[j] = 1.0;
            }
        }
        for d in 1..=p {
            for j in 0..n - 1 - d {
                let left = if t[j + d] > t[j] {
                    (x - t[j]) / (t[j + d] - t[j]) * vals[j]
                } else {
                    0.0
                };
                let right = if t[j + d + 1] > t[j + 1] {
                    (t[j + d + 1] - x) / (t[j + d + 1] - t[j + 1]) * vals[j + 1]
                } else {
                    0.0
                };
                vals[j] = left + right;
            }
        }
        vals.truncate(n - 1 - p);
        vals
    }

    /// Cubic B-spline basis vector at x in [0,1]; nonnegative, sums to one.
    pub fn eval_basis(&self, x: f64) -> Result<DVector<f64>> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::invalid(format!(
                "x = {x} outside [0,1]; rescale first"
            )));
        }
        Ok(DVector::from_vec(self.all_values(DEGREE, x)))
    }

    /// Second derivatives of the cubic basis at x (piecewise linear in x).
    pub fn eval_basis_second_deriv(&self, x: f64) -> Result<DVector<f64>> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::invalid(format!(
                "x = {x} outside [0,1]; rescale first"
            )));
        }
        let t = &self.full;
        let n1 = self.all_values(1, x);
        let safe = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
        // first derivative of the degree-2 basis
        let d1: Vec<f64> = (0..n1.len() - 1)
            .map(|j| 2.0 * (safe(n1[j], t[j + 2] - t[j]) - safe(n1[j + 1], t[j + 3] - t[j + 1])))
            .collect();
        let out: Vec<f64> = (0..self.num_basis())
            .map(|j| 3.0 * (safe(d1[j], t[j + 3] - t[j]) - safe(d1[j + 1], t[j + 4] - t[j + 1])))
            .collect();
        Ok(DVector::from_vec(out))
    }

    /// Truncated power basis (1, x, x^2, x^3, (x-g_1)_+^3, ..., (x-g_K)_+^3).
    pub fn eval_truncated_power(&self, x: f64) -> Result<DVector<f64>> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::invalid(format!(
                "x = {x} outside [0,1]; rescale first"
            )));
        }
        let mut v = Vec::with_capacity(self.num_basis());
        v.push(1.0);
        v.push(x);
        v.push(x * x);
        v.push(x * x * x);
        for &g in &self.interior {
            let d = (x - g).max(0.0);
            v.push(d * d * d);
        }
        Ok(DVector::from_vec(v))
    }

    /// Matrix T with tp(x) * T = bs(x) for every x, obtained by collocation at
    /// the Greville abscissae (guaranteed distinct) and a refined LU solve.
    pub fn change_of_basis(&self) -> Result<DMatrix<f64>> {
        let m = self.num_basis();
        let xs = self.greville();
        let mut a = DMatrix::zeros(m, m);
        let mut b = DMatrix::zeros(m, m);
        for (i, &x) in xs.iter().enumerate() {
            a.set_row(i, &self.eval_truncated_power(x)?.transpose());
            b.set_row(i, &self.eval_basis(x)?.transpose());
        }
        solve_matrix_refined(&a, &b)
            .map_err(|_| Error::numerical("change-of-basis collocation system is singular"))
    }

    /// Curvature penalty matrix: entries are integrals over [0,1] of products
    /// of second derivatives. The integrand is piecewise quadratic, so a
    /// two-point Gauss rule on each knot interval is exact.
    pub fn penalty_matrix(&self) -> DMatrix<f64> {
        let m = self.num_basis();
        let mut breaks = vec![0.0];
        breaks.extend_from_slice(&self.interior);
        breaks.push(1.0);
        let mut omega = DMatrix::zeros(m, m);
        let node = 0.5 / 3.0_f64.sqrt();
        for w in breaks.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let h = hi - lo;
            let mid = 0.5 * (lo + hi);
            for &x in &[mid - node * h, mid + node * h] {
                let d2 = self
                    .eval_basis_second_deriv(x)
                    .expect("gauss nodes are interior");
                // weight h/2 for each of the two nodes
                omega.syger(0.5 * h, &d2, &d2, 1.0);
            }
        }
        // syger fills the lower triangle; mirror it
        for i in 0..m {
            for j in (i + 1)..m {
                omega[(i, j)] = omega[(j, i)];
            }
        }
        omega
    }
}

/// Mixed-model design for the penalised centring mean: fixed part [1, x],
/// random part built from the spectral decomposition of the penalty.
#[derive(Debug, Clone)]
pub struct PenaltyDesign {
    /// Penalty matrix, kept for diagnostics and tests.
    pub omega: DMatrix<f64>,
    /// n x 2 fixed-effects design [1, x_i].
    pub x: DMatrix<f64>,
    /// n x (K+2) random-effects design Z = B U_Z diag(d_Z^{-1/2}).
    pub z: DMatrix<f64>,
    /// The K+2 strictly positive eigenvalues, descending.
    pub d_z: DVector<f64>,
    /// Eigenvector columns matching `d_z`.
    pub u_z: DMatrix<f64>,
    /// (K+4) x (K+2) map from random effects to basis coefficients,
    /// U_Z diag(d_Z^{-1/2}); Z = B * z_transform.
    pub z_transform: DMatrix<f64>,
}

/// Build the O'Sullivan design for covariates already rescaled to [0,1].
pub fn osullivan_design(knots: &KnotVector, xs: &[f64]) -> Result<PenaltyDesign> {
    let m = knots.num_basis();
    let omega = knots.penalty_matrix();
    let eig = nalgebra::SymmetricEigen::new(omega.clone());
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());

    let max_abs = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tol = m as f64 * f64::EPSILON * max_abs;
    let positive: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| eig.eigenvalues[i] > tol)
        .collect();
    let near_zero = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i].abs() <= tol)
        .count();
    if positive.len() != m - 2 || near_zero != 2 {
        return Err(Error::numerical(format!(
            "penalty eigenvalue split is ambiguous: {} positive, {} near zero (expected {}, 2)",
            positive.len(),
            near_zero,
            m - 2
        )));
    }

    let d_z = DVector::from_iterator(m - 2, positive.iter().map(|&i| eig.eigenvalues[i]));
    let mut u_z = DMatrix::zeros(m, m - 2);
    for (c, &i) in positive.iter().enumerate() {
        u_z.set_column(c, &eig.eigenvectors.column(i));
    }
    let mut z_transform = u_z.clone();
    for c in 0..m - 2 {
        let scale = 1.0 / d_z[c].sqrt();
        z_transform.column_mut(c).scale_mut(scale);
    }

    let n = xs.len();
    let mut x = DMatrix::zeros(n, 2);
    let mut basis = DMatrix::zeros(n, m);
    for (i, &xi) in xs.iter().enumerate() {
        if !(0.0..=1.0).contains(&xi) {
            return Err(Error::invalid("covariates must be rescaled to [0,1]"));
        }
        x[(i, 0)] = 1.0;
        x[(i, 1)] = xi;
        basis.set_row(i, &knots.eval_basis(xi)?.transpose());
    }
    let z = &basis * &z_transform;

    Ok(PenaltyDesign {
        omega,
        x,
        z,
        d_z,
        u_z,
        z_transform,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn make_knots_layout() {
        let k0 = KnotVector::make_knots(0, (0.0, 1.0)).unwrap();
        assert_eq!(k0.full(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(k0.interior().is_empty());

        let k1 = KnotVector::make_knots(1, (2.0, 5.0)).unwrap();
        assert_eq!(k1.interior(), &[0.5]);

        let k20 = KnotVector::make_knots(20, (0.0, 1.0)).unwrap();
        for (i, &g) in k20.interior().iter().enumerate() {
            assert_abs_diff_eq!(g, (i + 1) as f64 / 21.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn make_knots_rejects_bad_domain() {
        assert!(KnotVector::make_knots(3, (1.0, 1.0)).is_err());
        assert!(KnotVector::make_knots(3, (2.0, 1.0)).is_err());
        assert!(KnotVector::make_knots(3, (0.0, f64::INFINITY)).is_err());
        assert!(KnotVector::from_interior(vec![0.5, 0.5]).is_err());
        assert!(KnotVector::from_interior(vec![0.0, 0.5]).is_err());
    }

    #[test]
    fn basis_clamped_endpoints() {
        let kv = KnotVector::uniform(2);
        let b0 = kv.eval_basis(0.0).unwrap();
        assert_eq!(b0.len(), 6);
        assert_abs_diff_eq!(b0[0], 1.0, epsilon = 1e-15);
        for j in 1..6 {
            assert_abs_diff_eq!(b0[j], 0.0, epsilon = 1e-15);
        }
        let b1 = kv.eval_basis(1.0).unwrap();
        assert_abs_diff_eq!(b1[5], 1.0, epsilon = 1e-15);
        for j in 0..5 {
            assert_abs_diff_eq!(b1[j], 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn basis_matches_bernstein_without_interior_knots() {
        // with no interior knots the cubic basis is the Bernstein basis
        let kv = KnotVector::uniform(0);
        let binom = [1.0, 3.0, 3.0, 1.0];
        for i in 0..=50 {
            let x = i as f64 / 50.0;
            let b = kv.eval_basis(x).unwrap();
            for j in 0..4 {
                let bern = binom[j] * x.powi(j as i32) * (1.0 - x).powi(3 - j as i32);
                assert_abs_diff_eq!(b[j], bern, epsilon = 1e-14);
            }
        }
        let mid = kv.eval_basis(0.5).unwrap();
        assert_abs_diff_eq!(mid[0], 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(mid[1], 0.375, epsilon = 1e-15);
        assert_abs_diff_eq!(mid[2], 0.375, epsilon = 1e-15);
        assert_abs_diff_eq!(mid[3], 0.125, epsilon = 1e-15);
    }

    #[test]
    fn partition_of_unity_random() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
        for _ in 0..1000 {
            let k = rng.gen_range(0..=25);
            let kv = KnotVector::uniform(k);
            let x: f64 = rng.gen();
            let b = kv.eval_basis(x).unwrap();
            assert!((b.sum() - 1.0).abs() < 1e-12, "K={k} x={x}");
            assert!(b.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn local_support() {
        let kv = KnotVector::uniform(6);
        let t = kv.full();
        for i in 0..=200 {
            let x = i as f64 / 200.0;
            let b = kv.eval_basis(x).unwrap();
            for j in 0..kv.num_basis() {
                if x < t[j] || x > t[j + 4] {
                    assert_eq!(b[j], 0.0, "B_{j}({x}) should vanish outside its support");
                }
            }
        }
    }

    #[test]
    fn truncated_power_values() {
        let kv = KnotVector::from_interior(vec![0.5]).unwrap();
        let v = kv.eval_truncated_power(0.25).unwrap();
        assert_eq!(v.as_slice(), &[1.0, 0.25, 0.0625, 0.015625, 0.0]);
        let v1 = kv.eval_truncated_power(1.0).unwrap();
        assert_eq!(v1.as_slice(), &[1.0, 1.0, 1.0, 1.0, 0.125]);
        let kv2 = KnotVector::uniform(2);
        let v0 = kv2.eval_truncated_power(0.0).unwrap();
        assert_eq!(v0.as_slice(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn change_of_basis_reproduces_bspline() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        for &k in &[0usize, 3, 8, 20] {
            let kv = if k == 3 {
                // random interior knots for the K=3 case
                let mut g: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..0.95)).collect();
                g.sort_by(|a, b| a.partial_cmp(b).unwrap());
                KnotVector::from_interior(g).unwrap()
            } else {
                KnotVector::uniform(k)
            };
            let t = kv.change_of_basis().unwrap();
            let mut worst = 0.0f64;
            for i in 0..=200 {
                let x = i as f64 / 200.0;
                let tp = kv.eval_truncated_power(x).unwrap();
                let bs = kv.eval_basis(x).unwrap();
                let approx_bs = t.transpose() * tp;
                worst = worst.max((approx_bs - bs).amax());
            }
            assert!(worst < 1e-9, "K={k}: sup error {worst}");
        }
    }

    #[test]
    fn change_of_basis_inverse_consistency() {
        let kv = KnotVector::uniform(5);
        let t = kv.change_of_basis().unwrap();
        let t_inv = t.clone().try_inverse().unwrap();
        let eye = t * t_inv;
        for i in 0..kv.num_basis() {
            for j in 0..kv.num_basis() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(eye[(i, j)], expect, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn second_derivative_matches_finite_differences() {
        let kv = KnotVector::uniform(4);
        let h = 1e-5;
        for &x in &[0.11, 0.37, 0.52, 0.83] {
            let d2 = kv.eval_basis_second_deriv(x).unwrap();
            let f = |x: f64| kv.eval_basis(x).unwrap();
            let fd = (f(x + h) - f(x) * 2.0 + f(x - h)) / (h * h);
            for j in 0..kv.num_basis() {
                assert_abs_diff_eq!(d2[j], fd[j], epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn penalty_annihilates_affine_functions() {
        for &k in &[0usize, 1, 7, 20] {
            let kv = KnotVector::uniform(k);
            let omega = kv.penalty_matrix();
            let ones = DVector::from_element(kv.num_basis(), 1.0);
            let grev = DVector::from_vec(kv.greville());
            // coefficients of f(x) = a + b x
            let coef = &ones * 0.7 + &grev * (-1.3);
            assert!((omega.clone() * ones).amax() < 1e-10);
            assert!((omega * coef).amax() < 1e-10, "K={k}");
        }
    }

    #[test]
    fn penalty_matches_fine_quadrature() {
        // independent oracle: composite Simpson with many panels per interval
        let kv = KnotVector::from_interior(vec![0.5]).unwrap();
        let omega = kv.penalty_matrix();
        let m = kv.num_basis();
        let panels = 400;
        let mut oracle = DMatrix::<f64>::zeros(m, m);
        for seg in [(0.0, 0.5), (0.5, 1.0)] {
            let h = (seg.1 - seg.0) / panels as f64;
            for p in 0..panels {
                let lo = seg.0 + p as f64 * h;
                for (xw, w) in [(lo, 1.0), (lo + 0.5 * h, 4.0), (lo + h, 1.0)] {
                    let d2 = kv.eval_basis_second_deriv(xw).unwrap();
                    oracle.syger(w * h / 6.0, &d2, &d2, 1.0);
                }
            }
        }
        for i in 0..m {
            for j in 0..=i {
                assert_abs_diff_eq!(omega[(i, j)], oracle[(i, j)], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn eigen_split_is_two_plus_rest() {
        for &k in &[0usize, 1, 5, 12, 30] {
            let kv = KnotVector::uniform(k);
            let m = kv.num_basis();
            let omega = kv.penalty_matrix();
            let eig = nalgebra::SymmetricEigen::new(omega);
            let max_abs = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let tol = m as f64 * f64::EPSILON * max_abs;
            let pos = eig.eigenvalues.iter().filter(|&&v| v > tol).count();
            let zero = eig.eigenvalues.iter().filter(|&&v| v.abs() <= tol).count();
            assert_eq!(pos, m - 2, "K={k}");
            assert_eq!(zero, 2, "K={k}");
        }
    }

    #[test]
    fn osullivan_design_shapes_and_reconstruction() {
        let kv = KnotVector::uniform(6);
        let xs: Vec<f64> = (0..40).map(|i| i as f64 / 39.0).collect();
        let d = osullivan_design(&kv, &xs).unwrap();
        assert_eq!(d.z.ncols(), 8); // K + 2
        assert_eq!(d.x.ncols(), 2);
        assert_eq!(d.z.nrows(), 40);

        // reconstruct omega from the full decomposition
        let eig = nalgebra::SymmetricEigen::new(d.omega.clone());
        let recon = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues)
            * eig.eigenvectors.transpose();
        assert!((recon - &d.omega).amax() < 1e-9);

        // a pure line is carried by X alone: with u = 0 the Z part is inert
        let beta = DVector::from_column_slice(&[0.4, -2.0]);
        let mu = &d.x * beta;
        for (i, &x) in xs.iter().enumerate() {
            assert_abs_diff_eq!(mu[i], 0.4 - 2.0 * x, epsilon = 1e-12);
        }
    }

    #[test]
    fn osullivan_rejects_unscaled_covariates() {
        let kv = KnotVector::uniform(3);
        assert!(osullivan_design(&kv, &[0.1, 1.7]).is_err());
    }
}
