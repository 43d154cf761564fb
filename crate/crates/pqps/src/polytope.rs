//! The minimal enclosing polytope of the cubic spline moment curve.
//!
//! The curve x -> (x, x^2, x^3, (x-g_1)_+^3, ..., (x-g_K)_+^3) on (0,1) is
//! enclosed by a polytope with exactly K+4 vertices. Placing monotone
//! quantile values at those vertices makes the induced quantile curves
//! non-crossing everywhere on [0,1], which removes every ordering constraint
//! from posterior sampling.
//!
//! Two independent constructions of the vertices live here: the closed-form
//! coordinates and the tangent-plane induction that derives them dimension by
//! dimension. They must agree to ~1e-10 and the test suite holds them to it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{condition_number, RefinedLu};
use crate::nnls::{nnls, NnlsSolution};
use crate::spline::KnotVector;

/// Vertices above which the inverse of the vertex basis is considered
/// untrustworthy; surfaced as a warning in fit reports.
pub const CONDITION_WARN_THRESHOLD: f64 = 1e12;

/// Closed-form vertex coordinates, one vertex per row, K+4 rows by K+3
/// columns in truncated-power coordinates (without the leading constant).
pub fn proposition_vertices(knots: &KnotVector) -> Result<DMatrix<f64>> {
    let gamma = knots.interior();
    if gamma.iter().any(|&g| g <= 0.0 || g >= 1.0) {
        return Err(Error::invalid(
            "interior knots must lie strictly inside (0,1)",
        ));
    }
    let k = gamma.len();
    let dim = k + 3;
    let mut v = DMatrix::zeros(k + 4, dim);

    // vertex 1 is the curve point at x = 0: all zeros
    // vertex 2: (1/2, 0, ..., 0)
    v[(1, 0)] = 0.5;
    // vertex 3: (2/3, 1/3, 0, ..., 0)
    v[(2, 0)] = 2.0 / 3.0;
    v[(2, 1)] = 1.0 / 3.0;
    // knot vertices
    for (idx, &g) in gamma.iter().enumerate() {
        let row = 3 + idx;
        v[(row, 0)] = (2.0 + g) / 3.0;
        v[(row, 1)] = (1.0 + 2.0 * g) / 3.0;
        v[(row, 2)] = g;
        for (j, &gj) in gamma.iter().enumerate().take(idx) {
            v[(row, 3 + j)] = (g - gj) * (1.0 - gj) * (1.0 - gj);
        }
    }
    // final vertex is the curve point at x = 1
    let last = k + 3;
    v[(last, 0)] = 1.0;
    v[(last, 1)] = 1.0;
    v[(last, 2)] = 1.0;
    for (j, &gj) in gamma.iter().enumerate() {
        v[(last, 3 + j)] = (1.0 - gj).powi(3);
    }
    Ok(v)
}

/// Constructive oracle: build the vertices by induction on the basis,
/// replacing the previous curve endpoint with the intersection of the tangent
/// line at the new endpoint and the hyperplane where the newest coordinate
/// vanishes.
pub fn induction_vertices(knots: &KnotVector) -> Result<DMatrix<f64>> {
    let gamma = knots.interior();
    if gamma.iter().any(|&g| g <= 0.0 || g >= 1.0) {
        return Err(Error::invalid(
            "interior knots must lie strictly inside (0,1)",
        ));
    }

    // seed: the curve (x, x^2) is enclosed by (0,0), (1/2,0), (1,1), where
    // (1/2,0) is the intersection of the tangents at both endpoints
    let mut verts: Vec<Vec<f64>> = vec![vec![0.0, 0.0], vec![0.5, 0.0], vec![1.0, 1.0]];

    // each lift appends one coordinate: first x^3, then each truncated cubic
    for step in 0..=gamma.len() {
        let dim = 3 + step;
        let mut endpoint = vec![1.0; 3];
        let mut tangent = vec![1.0, 2.0, 3.0];
        for &g in &gamma[..step] {
            endpoint.push((1.0 - g).powi(3));
            tangent.push(3.0 * (1.0 - g) * (1.0 - g));
        }
        debug_assert_eq!(endpoint.len(), dim);

        if tangent[dim - 1] == 0.0 {
            return Err(Error::numerical(
                "tangent line parallel to target hyperplane (knot at domain end?)",
            ));
        }
        let t = -endpoint[dim - 1] / tangent[dim - 1];
        let mut replacement: Vec<f64> = endpoint
            .iter()
            .zip(&tangent)
            .map(|(e, d)| e + t * d)
            .collect();
        replacement[dim - 1] = 0.0; // exactly on the hyperplane

        // zero-pad everything except the previous endpoint, which is replaced
        verts.pop();
        for v in verts.iter_mut() {
            v.push(0.0);
        }
        verts.push(replacement);
        verts.push(endpoint);
    }

    let dim = gamma.len() + 3;
    let mut m = DMatrix::zeros(verts.len(), dim);
    for (i, v) in verts.iter().enumerate() {
        for (j, &x) in v.iter().enumerate() {
            m[(i, j)] = x;
        }
    }
    Ok(m)
}

/// Affine interpolation weights of a curve point with respect to the
/// polytope vertices: nonnegative on [0,1] and summing to one.
#[derive(Debug, Clone)]
pub struct BarycentricWeights {
    pub weights: DVector<f64>,
    pub x: f64,
}

/// Certificate produced by the convex-membership solver.
#[derive(Debug, Clone)]
pub struct MembershipCertificate {
    /// Convex weights found by NNLS (nonnegative; sum pinned by the solver).
    pub lambda: DVector<f64>,
    /// Norm of the defect; small means the point is in the hull.
    pub residual: f64,
    /// residual < 1e-8
    pub feasible: bool,
}

/// Residual tolerance for hull membership.
pub const MEMBERSHIP_TOL: f64 = 1e-8;

/// The Proposition-1 polytope together with its B-spline-coordinate
/// representation.
pub struct PolytopeVertices {
    knots: KnotVector,
    /// (K+4) x (K+3) truncated-power vertex coordinates.
    vertices_tp: DMatrix<f64>,
    /// Row p is the B-spline coordinate vector of vertex p; rows sum to one.
    vertex_basis: DMatrix<f64>,
    /// Inverse of `vertex_basis` (diagnostics; weight solves go through LU).
    vertex_basis_inv: DMatrix<f64>,
    /// Factorisation of vertex_basis^T for refined weight solves.
    weights_lu: RefinedLu,
    /// 2-norm condition number of the vertex basis.
    condition: f64,
}

impl PolytopeVertices {
    /// Build the polytope for the given knots: closed-form vertices plus the
    /// change-of-basis mapping into B-spline coordinates.
    pub fn build(knots: &KnotVector) -> Result<Self> {
        let vertices_tp = proposition_vertices(knots)?;
        let t = knots.change_of_basis()?;
        let m = knots.num_basis();

        // row p of the basis is (1, q_p) * T
        let mut aug = DMatrix::zeros(m, m);
        for p in 0..m {
            aug[(p, 0)] = 1.0;
            for j in 0..m - 1 {
                aug[(p, j + 1)] = vertices_tp[(p, j)];
            }
        }
        let mut vertex_basis = aug * &t;
        // T maps the constant function to the constant function, so each row
        // sums to one exactly; renormalising enforces the identity that the
        // large-entry product just blurred
        for p in 0..m {
            let sum = vertex_basis.row(p).sum();
            if !((sum - 1.0).abs() < 1e-6) {
                return Err(Error::numerical(format!(
                    "vertex basis row {p} sums to {sum}; change of basis is unusable"
                )));
            }
            vertex_basis.row_mut(p).scale_mut(1.0 / sum);
        }

        let vertex_basis_inv = vertex_basis
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::numerical("vertex basis is singular"))?;
        let weights_lu = RefinedLu::new_transpose(vertex_basis.clone())?;
        let condition = condition_number(&vertex_basis);

        Ok(PolytopeVertices {
            knots: knots.clone(),
            vertices_tp,
            vertex_basis,
            vertex_basis_inv,
            weights_lu,
            condition,
        })
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    /// Number of vertices, K + 4.
    pub fn num_vertices(&self) -> usize {
        self.vertices_tp.nrows()
    }

    pub fn vertices_tp(&self) -> &DMatrix<f64> {
        &self.vertices_tp
    }

    pub fn vertex_basis(&self) -> &DMatrix<f64> {
        &self.vertex_basis
    }

    pub fn vertex_basis_inv(&self) -> &DMatrix<f64> {
        &self.vertex_basis_inv
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// x-coordinate (first truncated-power coordinate) of each vertex; equals
    /// the affine extension of the identity function and always lies in [0,1].
    pub fn vertex_x(&self) -> Vec<f64> {
        (0..self.num_vertices())
            .map(|p| self.vertices_tp[(p, 0)])
            .collect()
    }

    /// Interpolation weights M(x): the unique affine weights w with
    /// sum(w) = 1 and sum_p w_p * vertex_p = curve(x).
    pub fn interpolation_weights(&self, x: f64) -> Result<BarycentricWeights> {
        let b = self.knots.eval_basis(x)?;
        let weights = self.weights_lu.solve(&b);
        Ok(BarycentricWeights { weights, x })
    }

    /// Convex-hull membership of an arbitrary point in truncated-power
    /// coordinates; the affine constraint is handled as an extra row of the
    /// NNLS system.
    pub fn contains(&self, point: &[f64]) -> MembershipCertificate {
        let m = self.num_vertices();
        let dim = m - 1;
        assert_eq!(point.len(), dim, "point dimension must be K+3");
        let mut a = DMatrix::zeros(dim + 1, m);
        for p in 0..m {
            for j in 0..dim {
                a[(j, p)] = self.vertices_tp[(p, j)];
            }
            a[(dim, p)] = 1.0;
        }
        let mut b = DVector::zeros(dim + 1);
        for j in 0..dim {
            b[j] = point[j];
        }
        b[dim] = 1.0;
        let NnlsSolution { x, residual_norm } = nnls(&a, &b);
        MembershipCertificate {
            lambda: x,
            residual: residual_norm,
            feasible: residual_norm < MEMBERSHIP_TOL,
        }
    }

    /// Truncated-power coordinates of the curve point at x.
    pub fn curve_point(&self, x: f64) -> Result<Vec<f64>> {
        let tp = self.knots.eval_truncated_power(x)?;
        Ok(tp.as_slice()[1..].to_vec())
    }
}
