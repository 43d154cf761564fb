//! Non-negative least squares, Lawson-Hanson active set method.
//!
//! The problems here are tiny (at most a few dozen variables), so each passive
//! set is re-solved from scratch with an SVD-backed least-squares solve rather
//! than the classic QR updating scheme.

use nalgebra::{DMatrix, DVector};

/// Solution of min ||A x - b|| subject to x >= 0.
#[derive(Debug, Clone)]
pub struct NnlsSolution {
    pub x: DVector<f64>,
    pub residual_norm: f64,
}

/// Solve the NNLS problem. `a` is m x n with m >= 1, n >= 1.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> NnlsSolution {
    let (m, n) = a.shape();
    assert!(m > 0 && n > 0, "empty NNLS problem");
    assert_eq!(b.len(), m);

    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let scale = a.amax().max(b.amax()).max(1.0);
    let tol = 1e-14 * scale * scale * m as f64;

    // near-collinear columns make progress per activation slow; the classic
    // 3n cap stops well short of the optimum on those problems
    let max_outer = 40 * n;
    let mut prev_rss = f64::INFINITY;
    for _ in 0..max_outer {
        // dual w = A^T (b - A x); all entries for passive columns are ~0
        let resid = b - a * &x;
        let rss = resid.norm_squared();
        if rss >= prev_rss * (1.0 - 1e-13) {
            // no meaningful progress left; the duals below are noise
            break;
        }
        prev_rss = rss;
        let w = a.transpose() * &resid;
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if !passive[j] && w[j] > tol {
                match best {
                    Some((_, wv)) if wv >= w[j] => {}
                    _ => best = Some((j, w[j])),
                }
            }
        }
        let Some((j_new, _)) = best else { break };
        passive[j_new] = true;

        // inner loop: restore feasibility of the passive-set LS solution
        loop {
            let cols: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let ap = a.select_columns(cols.iter());
            let z = ap
                .svd(true, true)
                .solve(b, 1e-13 * scale)
                .expect("svd solve is infallible for finite input");

            if z.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (idx, &j) in cols.iter().enumerate() {
                    x[j] = z[idx];
                }
                break;
            }

            // step toward z only as far as feasibility allows
            let mut alpha = f64::INFINITY;
            for (idx, &j) in cols.iter().enumerate() {
                if z[idx] <= 0.0 {
                    let denom = x[j] - z[idx];
                    if denom > 0.0 {
                        alpha = alpha.min(x[j] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for (idx, &j) in cols.iter().enumerate() {
                x[j] += alpha * (z[idx] - x[j]);
            }
            for &j in &cols {
                if x[j] <= tol.max(1e-300) {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }

    let residual_norm = (b - a * &x).norm();
    NnlsSolution { x, residual_norm }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn unconstrained_optimum_in_positive_orthant() {
        let a = DMatrix::identity(2, 2);
        let b = DVector::from_column_slice(&[2.0, 3.0]);
        let s = nnls(&a, &b);
        assert_abs_diff_eq!(s.x[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.x[1], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.residual_norm, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn negative_component_is_clamped() {
        let a = DMatrix::identity(2, 2);
        let b = DVector::from_column_slice(&[1.0, -1.0]);
        let s = nnls(&a, &b);
        assert_abs_diff_eq!(s.x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.x[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.residual_norm, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn recovers_random_nonnegative_combinations() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        for _ in 0..50 {
            let m = rng.gen_range(3..8);
            let n = rng.gen_range(2..=m);
            let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
            let x_true = DVector::from_fn(n, |_, _| {
                if rng.gen_bool(0.4) {
                    0.0
                } else {
                    rng.gen_range(0.0..2.0)
                }
            });
            let b = &a * &x_true;
            let s = nnls(&a, &b);
            // the fitted values must reproduce b (solution itself may differ
            // when columns are collinear)
            assert!(s.residual_norm < 1e-9, "residual {}", s.residual_norm);
            assert!(s.x.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn matches_grid_search_on_2d_problem() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 1.0, 0.5, -0.3]);
        let b = DVector::from_column_slice(&[1.0, 0.2, -0.4]);
        let s = nnls(&a, &b);
        let mut best = f64::INFINITY;
        let mut best_x = (0.0, 0.0);
        for i in 0..=400 {
            for j in 0..=400 {
                let x0 = i as f64 / 100.0;
                let x1 = j as f64 / 100.0;
                let r = (&a * DVector::from_column_slice(&[x0, x1]) - &b).norm();
                if r < best {
                    best = r;
                    best_x = (x0, x1);
                }
            }
        }
        assert!(s.residual_norm <= best + 1e-6);
        assert_abs_diff_eq!(s.x[0], best_x.0, epsilon = 2e-2);
        assert_abs_diff_eq!(s.x[1], best_x.1, epsilon = 2e-2);
    }
}
