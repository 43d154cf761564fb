//! The full model: quantile hyperplanes over the polytope, penalised centring
//! mean, centring sd spline, priors and the joint log posterior.
//!
//! Parameters:
//!   qp       (K+4) x T  quantile values at the polytope vertices, each row a
//!                       pyramid and strictly increasing across levels
//!   beta     2          fixed effects of the centring mean
//!   u        K+2        penalised random effects of the centring mean
//!   sigma2_u            random-effect variance (Cauchy scale^2 for the
//!                       fat-tailed variant)
//!   sigma_p  R+4        centring sd values at the sd-polytope vertices,
//!                       each in [0.01, 1e6]
//!
//! The likelihood is piecewise Normal: inside each inter-quantile bin the
//! density is the centring Normal renormalised to the bin, carrying mass
//! tau_t - tau_{t-1}; the two end bins extend to +-infinity with boundary
//! probabilities 0 and 1.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polytope::PolytopeVertices;
use crate::pyramid::PyramidTree;
use crate::special::{normal_cdf_diff, normal_ln_pdf, normal_quantile, LN_SQRT_2PI};
use crate::spline::{osullivan_design, KnotVector, PenaltyDesign};

/// Bounds of the uniform prior on the centring sd vertex values.
pub const SIGMA_P_MIN: f64 = 0.01;
pub const SIGMA_P_MAX: f64 = 1e6;

/// Variance of the Normal prior on each fixed effect.
pub const BETA_PRIOR_VAR: f64 = 1e8;

/// Shape and rate of the inverse-Gamma prior on sigma2_u.
pub const SIGMA2_U_PRIOR_SHAPE: f64 = 0.01;
pub const SIGMA2_U_PRIOR_RATE: f64 = 0.01;

/// Distribution family of the random effects of the centring mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RandomEffects {
    #[default]
    Normal,
    /// Independent Cauchy(0, sigma_u) components; lets the amount of
    /// smoothing vary sharply across the covariate.
    Cauchy,
}

/// Affine map between the original covariate scale and [0,1].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CovariateMap {
    pub lo: f64,
    pub hi: f64,
}

impl CovariateMap {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || !(hi > lo) {
            return Err(Error::invalid(
                "covariate range must be finite with positive length",
            ));
        }
        Ok(CovariateMap { lo, hi })
    }

    pub fn to_unit(&self, x: f64) -> f64 {
        (x - self.lo) / (self.hi - self.lo)
    }

    pub fn from_unit(&self, t: f64) -> f64 {
        self.lo + t * (self.hi - self.lo)
    }
}

/// Observed data with covariates rescaled to the unit interval.
#[derive(Debug, Clone)]
pub struct Dataset {
    x_unit: Vec<f64>,
    y: Vec<f64>,
    map: CovariateMap,
}

impl Dataset {
    /// Build from raw columns; the covariate range defines the affine map.
    pub fn from_raw(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::invalid("x and y must have equal length"));
        }
        if x.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let map = CovariateMap::new(lo, hi)
            .map_err(|_| Error::invalid("covariate must take at least two distinct values"))?;
        let x_unit = x.iter().map(|&v| map.to_unit(v).clamp(0.0, 1.0)).collect();
        Ok(Dataset {
            x_unit,
            y: y.to_vec(),
            map,
        })
    }

    /// An empty dataset on a given map; used for prior-only sampling.
    pub fn empty() -> Self {
        Dataset {
            x_unit: Vec::new(),
            y: Vec::new(),
            map: CovariateMap { lo: 0.0, hi: 1.0 },
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn x_unit(&self) -> &[f64] {
        &self.x_unit
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn map(&self) -> CovariateMap {
        self.map
    }
}

/// Everything about the fit that does not change during sampling: knots,
/// polytopes, pyramid tree, and per-observation design rows.
pub struct Geometry {
    pub knots: KnotVector,
    pub sd_knots: KnotVector,
    pub levels: Vec<f64>,
    pub polytope: PolytopeVertices,
    pub sd_polytope: PolytopeVertices,
    pub design: PenaltyDesign,
    pub tree: PyramidTree,
    /// n x (K+4): interpolation weights at each observation.
    pub m_rows: DMatrix<f64>,
    /// n x (R+4): sd-polytope weights at each observation.
    pub n_rows: DMatrix<f64>,
    /// Greville abscissae = B-spline coefficients of the identity.
    pub greville: DVector<f64>,
    /// (K+4) x 2: vertex-basis rows applied to the fixed-effect coefficient
    /// columns [1, greville]; column 0 is all ones, column 1 the vertex x.
    pub w_affine: DMatrix<f64>,
    /// (K+4) x (K+2): vertex-basis rows applied to the random-effect map.
    pub w_u: DMatrix<f64>,
    /// (K+4) x (R+4): sd-polytope weights at each vertex's x location.
    pub sd_rows_at_vertices: DMatrix<f64>,
    /// Warnings accumulated while building (conditioning, small n).
    pub warnings: Vec<String>,
}

impl Geometry {
    pub fn new(k: usize, r: usize, levels: &[f64], data: &Dataset) -> Result<Self> {
        let knots = KnotVector::uniform(k);
        let sd_knots = KnotVector::uniform(r);
        let tree = PyramidTree::new(levels)?;
        let polytope = PolytopeVertices::build(&knots)?;
        let sd_polytope = PolytopeVertices::build(&sd_knots)?;
        let design = osullivan_design(&knots, data.x_unit())?;

        let n = data.n();
        let m = knots.num_basis();
        let m_sd = sd_knots.num_basis();
        let mut m_rows = DMatrix::zeros(n, m);
        let mut n_rows = DMatrix::zeros(n, m_sd);
        for (i, &x) in data.x_unit().iter().enumerate() {
            m_rows.set_row(i, &polytope.interpolation_weights(x)?.weights.transpose());
            n_rows.set_row(
                i,
                &sd_polytope.interpolation_weights(x)?.weights.transpose(),
            );
        }

        let greville = DVector::from_vec(knots.greville());
        let w = polytope.vertex_basis();
        let ones = DVector::from_element(m, 1.0);
        let mut w_affine = DMatrix::zeros(m, 2);
        w_affine.set_column(0, &(w * &ones));
        w_affine.set_column(1, &(w * &greville));
        let w_u = w * &design.z_transform;

        let mut sd_rows_at_vertices = DMatrix::zeros(m, m_sd);
        for (p, &x) in polytope.vertex_x().iter().enumerate() {
            let weights = sd_polytope
                .interpolation_weights(x.clamp(0.0, 1.0))?
                .weights;
            sd_rows_at_vertices.set_row(p, &weights.transpose());
        }

        let mut warnings = Vec::new();
        if polytope.condition() > crate::polytope::CONDITION_WARN_THRESHOLD {
            warnings.push(format!(
                "vertex basis condition number {:.3e} exceeds 1e12; weights may be inaccurate",
                polytope.condition()
            ));
        }
        if n > 0 && n < m {
            warnings.push(format!(
                "n = {n} observations for {m} basis functions; fit will be prior-dominated"
            ));
        }

        Ok(Geometry {
            knots,
            sd_knots,
            levels: levels.to_vec(),
            polytope,
            sd_polytope,
            design,
            tree,
            m_rows,
            n_rows,
            greville,
            w_affine,
            w_u,
            sd_rows_at_vertices,
            warnings,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.polytope.num_vertices()
    }

    pub fn num_sd_vertices(&self) -> usize {
        self.sd_polytope.num_vertices()
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn num_random_effects(&self) -> usize {
        self.design.z_transform.ncols()
    }
}

/// Full parameter state of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// (K+4) x T; row p holds the pyramid-p quantiles.
    pub qp: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub u: DVector<f64>,
    pub sigma2_u: f64,
    pub sigma_p: DVector<f64>,
}

impl ModelState {
    /// Moment-matched initial state: every pyramid starts at the Normal
    /// quantiles of the response's sample mean and sd, the fixed effects at
    /// the least-squares line, the random effects at a mild ridge fit of the
    /// residual curve. Starting u at zero with a unit variance puts the chain
    /// deep inside the (u, sigma2_u) funnel and stages of realistic length do
    /// not escape it, so the variance is moment-matched to the ridge fit.
    pub fn init_from_data(data: &Dataset, geom: &Geometry) -> Result<Self> {
        let n = data.n();
        let (mean_y, sd_y) = if n >= 2 {
            let mean = data.y().iter().sum::<f64>() / n as f64;
            let var = data
                .y()
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<f64>()
                / (n as f64 - 1.0);
            (mean, var.sqrt().max(1e-3))
        } else {
            (0.0, 1.0)
        };

        let m = geom.num_vertices();
        let t_len = geom.num_levels();
        let mut qp = DMatrix::zeros(m, t_len);
        for (t, &tau) in geom.levels.iter().enumerate() {
            let q = mean_y + sd_y * normal_quantile(tau);
            for p in 0..m {
                qp[(p, t)] = q;
            }
        }

        // least squares of y on [1, x]
        let beta = if n >= 2 {
            let x = &geom.design.x;
            let y = DVector::from_column_slice(data.y());
            let xtx = x.transpose() * x;
            let xty = x.transpose() * y;
            xtx.lu()
                .solve(&xty)
                .unwrap_or_else(|| DVector::from_column_slice(&[mean_y, 0.0]))
        } else {
            DVector::from_column_slice(&[mean_y, 0.0])
        };

        let sigma_p =
            DVector::from_element(geom.num_sd_vertices(), sd_y.clamp(SIGMA_P_MIN, SIGMA_P_MAX));

        Ok(ModelState {
            qp,
            beta,
            u: DVector::zeros(geom.num_random_effects()),
            sigma2_u: 1.0,
            sigma_p,
        })
    }

    /// Support check: finite values, strictly increasing pyramid rows,
    /// positive variance, sd vertices within the uniform-prior bounds.
    pub fn in_support(&self) -> bool {
        if !self.sigma2_u.is_finite() || self.sigma2_u <= 0.0 {
            return false;
        }
        if self
            .beta
            .iter()
            .chain(self.u.iter())
            .any(|v| !v.is_finite())
        {
            return false;
        }
        if self
            .sigma_p
            .iter()
            .any(|&s| !s.is_finite() || !(SIGMA_P_MIN..=SIGMA_P_MAX).contains(&s))
        {
            return false;
        }
        let (m, t_len) = self.qp.shape();
        for p in 0..m {
            for t in 0..t_len {
                let v = self.qp[(p, t)];
                if !v.is_finite() {
                    return false;
                }
                if t + 1 < t_len && !(v < self.qp[(p, t + 1)]) {
                    return false;
                }
            }
        }
        true
    }
}

/// Quantile curve value at unit-scale x for level index t.
pub fn quantile_curve(state: &ModelState, geom: &Geometry, x: f64, t: usize) -> Result<f64> {
    let w = geom.polytope.interpolation_weights(x)?.weights;
    Ok((0..geom.num_vertices())
        .map(|p| w[p] * state.qp[(p, t)])
        .sum())
}

/// Centring mean at unit-scale x.
pub fn centring_mean(state: &ModelState, geom: &Geometry, x: f64) -> Result<f64> {
    let b = geom.knots.eval_basis(x)?;
    let z_row = b.transpose() * &geom.design.z_transform;
    Ok(state.beta[0] + state.beta[1] * x + (z_row * &state.u)[(0, 0)])
}

/// Centring sd at unit-scale x; strictly positive on the support.
pub fn centring_sd(state: &ModelState, geom: &Geometry, x: f64) -> Result<f64> {
    let w = geom.sd_polytope.interpolation_weights(x)?.weights;
    Ok((0..geom.num_sd_vertices())
        .map(|p| w[p] * state.sigma_p[p])
        .sum())
}

/// B-spline coefficients of the centring-mean curve for a given state.
pub fn mean_coefficients(state: &ModelState, geom: &Geometry) -> DVector<f64> {
    let m = geom.num_vertices();
    let mut theta = DVector::from_element(m, state.beta[0]);
    theta.axpy(state.beta[1], &geom.greville, 1.0);
    theta.gemv(1.0, &geom.design.z_transform, &state.u, 1.0);
    theta
}

/// Piecewise-Normal log likelihood of a single observation given the ordered
/// quantile cutpoints at its covariate, the centring mean and sd, and the
/// level list. Returns -inf (and reports it) when a bin has collapsed.
pub fn log_likelihood_point(
    quantiles: &[f64],
    levels: &[f64],
    mu: f64,
    sigma: f64,
    y: f64,
) -> (f64, bool) {
    debug_assert_eq!(quantiles.len(), levels.len());
    let t_len = levels.len();
    // smallest t with y <= q_t; t_len when y is above every quantile
    let mut bin = t_len;
    for (t, &q) in quantiles.iter().enumerate() {
        if y <= q {
            bin = t;
            break;
        }
    }
    let (tau_lo, tau_hi) = (
        if bin == 0 { 0.0 } else { levels[bin - 1] },
        if bin == t_len { 1.0 } else { levels[bin] },
    );
    let z_lo = if bin == 0 {
        f64::NEG_INFINITY
    } else {
        (quantiles[bin - 1] - mu) / sigma
    };
    let z_hi = if bin == t_len {
        f64::INFINITY
    } else {
        (quantiles[bin] - mu) / sigma
    };
    let mass = normal_cdf_diff(z_lo, z_hi);
    if !(mass > 0.0) {
        return (f64::NEG_INFINITY, true);
    }
    let z = (y - mu) / sigma;
    let ll = (tau_hi - tau_lo).ln() + normal_ln_pdf(z) - sigma.ln() - mass.ln();
    (ll, false)
}

/// Additive components of the log posterior, useful for diagnostics and for
/// testing additivity; the posterior is their sum.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorParts {
    pub log_likelihood: f64,
    pub log_pyramid_prior: f64,
    pub log_other_priors: f64,
    /// Observations that fell in a numerically collapsed bin.
    pub zero_width_bins: u64,
}

impl PosteriorParts {
    pub fn total(&self) -> f64 {
        self.log_likelihood + self.log_pyramid_prior + self.log_other_priors
    }
}

/// Log prior density of the non-quantile parameters.
pub fn log_other_priors(state: &ModelState, family: RandomEffects) -> f64 {
    let mut lp = 0.0;
    for &b in state.beta.iter() {
        lp += -0.5 * b * b / BETA_PRIOR_VAR - 0.5 * BETA_PRIOR_VAR.ln() - LN_SQRT_2PI;
    }
    match family {
        RandomEffects::Normal => {
            let var = state.sigma2_u;
            for &uj in state.u.iter() {
                lp += -0.5 * uj * uj / var - 0.5 * var.ln() - LN_SQRT_2PI;
            }
        }
        RandomEffects::Cauchy => {
            let scale = state.sigma2_u.sqrt();
            for &uj in state.u.iter() {
                let z = uj / scale;
                lp += -std::f64::consts::PI.ln() - scale.ln() - (1.0 + z * z).ln();
            }
        }
    }
    // inverse gamma on sigma2_u
    let (a, b) = (SIGMA2_U_PRIOR_SHAPE, SIGMA2_U_PRIOR_RATE);
    lp += a * b.ln()
        - crate::special::ln_gamma(a)
        - (a + 1.0) * state.sigma2_u.ln()
        - b / state.sigma2_u;
    // uniform on each sd vertex (support already checked)
    lp -= state.sigma_p.len() as f64 * (SIGMA_P_MAX - SIGMA_P_MIN).ln();
    lp
}

/// Full log posterior kernel; -inf off the support.
pub fn log_posterior_parts(
    state: &ModelState,
    data: &Dataset,
    geom: &Geometry,
    family: RandomEffects,
) -> PosteriorParts {
    let neg_inf = PosteriorParts {
        log_likelihood: f64::NEG_INFINITY,
        log_pyramid_prior: f64::NEG_INFINITY,
        log_other_priors: f64::NEG_INFINITY,
        zero_width_bins: 0,
    };
    if !state.in_support() {
        return neg_inf;
    }

    let n = data.n();
    let t_len = geom.num_levels();
    let m = geom.num_vertices();

    // likelihood
    let mut log_likelihood = 0.0;
    let mut zero_width = 0u64;
    if n > 0 {
        let q = &geom.m_rows * &state.qp; // n x T
        let mut mu = &geom.design.x * &state.beta;
        mu.gemv(1.0, &geom.design.z, &state.u, 1.0);
        let sigma = &geom.n_rows * &state.sigma_p;
        let mut row = vec![0.0; t_len];
        for i in 0..n {
            for t in 0..t_len {
                row[t] = q[(i, t)];
            }
            let (ll, collapsed) =
                log_likelihood_point(&row, &geom.levels, mu[i], sigma[i], data.y()[i]);
            if collapsed {
                zero_width += 1;
            }
            log_likelihood += ll;
            if log_likelihood == f64::NEG_INFINITY {
                break;
            }
        }
    }

    // pyramid priors, one per vertex, centred by the vertex-extended mean/sd
    let theta_mu = mean_coefficients(state, geom);
    let mu_v = geom.polytope.vertex_basis() * &theta_mu;
    let sd_v = &geom.sd_rows_at_vertices * &state.sigma_p;
    let mut log_pyramid = 0.0;
    let mut row = vec![0.0; t_len];
    for p in 0..m {
        for t in 0..t_len {
            row[t] = state.qp[(p, t)];
        }
        log_pyramid += geom.tree.log_prior(&row, mu_v[p], sd_v[p]);
        if log_pyramid == f64::NEG_INFINITY {
            break;
        }
    }

    PosteriorParts {
        log_likelihood,
        log_pyramid_prior: log_pyramid,
        log_other_priors: log_other_priors(state, family),
        zero_width_bins: zero_width,
    }
}

/// Convenience wrapper returning the summed kernel.
pub fn log_posterior(
    state: &ModelState,
    data: &Dataset,
    geom: &Geometry,
    family: RandomEffects,
) -> f64 {
    log_posterior_parts(state, data, geom, family).total()
}
