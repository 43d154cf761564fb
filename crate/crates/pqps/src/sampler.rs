//! Two-stage adaptive MCMC.
//!
//! Stage 1 sweeps the parameters one at a time with Metropolised Gibbs:
//! uniform-window proposals for the vertex quantiles, Gaussian random walks
//! for everything else, each site's scale tuned by a Robbins-Monro recursion
//! toward the scalar-optimal acceptance rate 0.44. The retained sweeps feed a
//! posterior correlation estimate; complete-linkage clustering on 1 - |rho|
//! groups the parameters into blocks. Stage 2 then runs block-wise
//! Metropolis-Hastings with multivariate Normal proposals shaped by the
//! per-block sample covariance, tuned toward 0.23 and frozen after burn-in.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{log_other_priors, Dataset, Geometry, ModelState, RandomEffects};
use crate::special::normal_cdf_diff;

/// Robbins-Monro tuned proposal scale.
#[derive(Debug, Clone)]
pub struct AdaptiveScale {
    log_scale: f64,
    target: f64,
    step_constant: f64,
    update_count: u64,
    decay_cap: u64,
    frozen: bool,
}

impl AdaptiveScale {
    pub fn new(initial_scale: f64, target: f64, step_constant: f64) -> Self {
        AdaptiveScale {
            log_scale: initial_scale.max(1e-300).ln(),
            target,
            step_constant,
            update_count: 0,
            decay_cap: u64::MAX,
            frozen: false,
        }
    }

    /// Cap the 1/k decay at 1/cap so the tuner keeps tracking a slowly
    /// drifting conditional instead of freezing onto an early estimate.
    pub fn with_decay_cap(initial_scale: f64, target: f64, step_constant: f64, cap: u64) -> Self {
        let mut s = Self::new(initial_scale, target, step_constant);
        s.decay_cap = cap.max(1);
        s
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    /// One stochastic-approximation step with 1/k decay.
    pub fn update(&mut self, accepted: bool) {
        if !self.frozen {
            let k = self.update_count.max(1).min(self.decay_cap) as f64;
            if accepted {
                self.log_scale += self.step_constant * (1.0 - self.target) / k;
            } else {
                self.log_scale -= self.step_constant * self.target / k;
            }
        }
        self.update_count += 1;
    }

    /// Stop adapting; the scale becomes part of a fixed kernel.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }
}

/// Which kind of parameter a flat index addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Vertex quantile (pyramid row, level column).
    Quantile(usize, usize),
    Beta(usize),
    U(usize),
    Sigma2U,
    SigmaP(usize),
}

/// Flat indexing over the full parameter vector, quantiles first.
#[derive(Debug, Clone, Copy)]
pub struct ParamLayout {
    pub num_vertices: usize,
    pub num_levels: usize,
    pub num_u: usize,
    pub num_sigma_p: usize,
}

impl ParamLayout {
    pub fn of(geom: &Geometry) -> Self {
        ParamLayout {
            num_vertices: geom.num_vertices(),
            num_levels: geom.num_levels(),
            num_u: geom.num_random_effects(),
            num_sigma_p: geom.num_sd_vertices(),
        }
    }

    pub fn total(&self) -> usize {
        self.num_vertices * self.num_levels + 2 + self.num_u + 1 + self.num_sigma_p
    }

    pub fn kind(&self, idx: usize) -> ParamKind {
        let nq = self.num_vertices * self.num_levels;
        if idx < nq {
            ParamKind::Quantile(idx / self.num_levels, idx % self.num_levels)
        } else if idx < nq + 2 {
            ParamKind::Beta(idx - nq)
        } else if idx < nq + 2 + self.num_u {
            ParamKind::U(idx - nq - 2)
        } else if idx == nq + 2 + self.num_u {
            ParamKind::Sigma2U
        } else {
            ParamKind::SigmaP(idx - nq - 3 - self.num_u)
        }
    }

    pub fn get(&self, state: &ModelState, idx: usize) -> f64 {
        match self.kind(idx) {
            ParamKind::Quantile(p, t) => state.qp[(p, t)],
            ParamKind::Beta(j) => state.beta[j],
            ParamKind::U(j) => state.u[j],
            ParamKind::Sigma2U => state.sigma2_u,
            ParamKind::SigmaP(j) => state.sigma_p[j],
        }
    }

    pub fn flatten(&self, state: &ModelState, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.total());
        for (i, v) in out.iter_mut().enumerate() {
            *v = self.get(state, i);
        }
    }

    /// Sampling coordinate of a parameter. Scale-like parameters (the
    /// random-effect variance and the sd vertices) walk on the log scale,
    /// where their conditional widths stay stable; everything else uses its
    /// natural scale.
    pub fn to_coord(&self, idx: usize, raw: f64) -> f64 {
        match self.kind(idx) {
            ParamKind::Sigma2U | ParamKind::SigmaP(_) => raw.max(1e-300).ln(),
            _ => raw,
        }
    }

    pub fn from_coord(&self, idx: usize, coord: f64) -> f64 {
        match self.kind(idx) {
            ParamKind::Sigma2U | ParamKind::SigmaP(_) => coord.exp(),
            _ => coord,
        }
    }

    /// Log proposal-density correction for a symmetric walk in coordinate
    /// space: ln q(new -> old) - ln q(old -> new).
    pub fn log_proposal_correction(&self, idx: usize, old_raw: f64, new_raw: f64) -> f64 {
        match self.kind(idx) {
            ParamKind::Sigma2U | ParamKind::SigmaP(_) if new_raw > 0.0 && old_raw > 0.0 => {
                new_raw.ln() - old_raw.ln()
            }
            _ => 0.0,
        }
    }

    pub fn unflatten(&self, values: &[f64], state: &mut ModelState) {
        debug_assert_eq!(values.len(), self.total());
        for (i, &v) in values.iter().enumerate() {
            match self.kind(i) {
                ParamKind::Quantile(p, t) => state.qp[(p, t)] = v,
                ParamKind::Beta(j) => state.beta[j] = v,
                ParamKind::U(j) => state.u[j] = v,
                ParamKind::Sigma2U => state.sigma2_u = v,
                ParamKind::SigmaP(j) => state.sigma_p[j] = v,
            }
        }
    }
}

/// Incremental posterior evaluator.
///
/// Holds per-observation caches (quantile curves, centring mean and sd) plus
/// the additive components of the log posterior. A proposal mutates the state
/// and caches in place after snapshotting them; rejection restores the
/// snapshot exactly, so no floating-point unwinding error can accumulate.
/// Accepted-move drift in the incremental arrays is bounded by periodic
/// rebuilds.
pub struct PosteriorEvaluator<'a> {
    data: &'a Dataset,
    geom: &'a Geometry,
    family: RandomEffects,
    // caches for the current state
    q: DMatrix<f64>,     // n x T
    mu: DVector<f64>,    // n
    sigma: DVector<f64>, // n
    theta_mu: DVector<f64>,
    mu_v: DVector<f64>,
    sd_v: DVector<f64>,
    lik: f64,
    pyr: Vec<f64>,
    lp_other: f64,
    /// Running count of numerically collapsed likelihood bins.
    pub zero_width_bins: u64,
    // snapshot buffers
    undo: Undo,
    row_buf: Vec<f64>,
}

struct Undo {
    valid: bool,
    params: Vec<(usize, f64)>,
    q_cols: Vec<usize>,
    q_data: DMatrix<f64>,
    mu: DVector<f64>,
    sigma: DVector<f64>,
    theta_mu: DVector<f64>,
    mu_v: DVector<f64>,
    sd_v: DVector<f64>,
    pyr: Vec<f64>,
    lik: f64,
    lp_other: f64,
}

impl<'a> PosteriorEvaluator<'a> {
    pub fn new(
        state: &ModelState,
        data: &'a Dataset,
        geom: &'a Geometry,
        family: RandomEffects,
    ) -> Result<Self> {
        let n = data.n();
        let t_len = geom.num_levels();
        let m = geom.num_vertices();
        let mut ev = PosteriorEvaluator {
            data,
            geom,
            family,
            q: DMatrix::zeros(n, t_len),
            mu: DVector::zeros(n),
            sigma: DVector::zeros(n),
            theta_mu: DVector::zeros(m),
            mu_v: DVector::zeros(m),
            sd_v: DVector::zeros(m),
            lik: 0.0,
            pyr: vec![0.0; m],
            lp_other: 0.0,
            zero_width_bins: 0,
            undo: Undo {
                valid: false,
                params: Vec::with_capacity(16),
                q_cols: Vec::with_capacity(t_len),
                q_data: DMatrix::zeros(n, t_len),
                mu: DVector::zeros(n),
                sigma: DVector::zeros(n),
                theta_mu: DVector::zeros(m),
                mu_v: DVector::zeros(m),
                sd_v: DVector::zeros(m),
                pyr: vec![0.0; m],
                lik: 0.0,
                lp_other: 0.0,
            },
            row_buf: vec![0.0; t_len],
        };
        ev.rebuild(state);
        if !ev.total().is_finite() {
            return Err(Error::invalid("initial state has non-finite log posterior"));
        }
        Ok(ev)
    }

    /// Recompute every cache from scratch.
    pub fn rebuild(&mut self, state: &ModelState) {
        let n = self.data.n();
        if n > 0 {
            self.q.gemm(1.0, &self.geom.m_rows, &state.qp, 0.0);
            self.mu.gemv(1.0, &self.geom.design.x, &state.beta, 0.0);
            self.mu.gemv(1.0, &self.geom.design.z, &state.u, 1.0);
            self.sigma.gemv(1.0, &self.geom.n_rows, &state.sigma_p, 0.0);
        }
        self.theta_mu
            .copy_from(&crate::model::mean_coefficients(state, self.geom));
        self.mu_v
            .gemv(1.0, self.geom.polytope.vertex_basis(), &self.theta_mu, 0.0);
        self.sd_v
            .gemv(1.0, &self.geom.sd_rows_at_vertices, &state.sigma_p, 0.0);
        self.recompute_other(state);
        for p in 0..self.geom.num_vertices() {
            self.recompute_pyramid(state, p);
        }
        self.recompute_lik(state);
    }

    pub fn total(&self) -> f64 {
        self.lik + self.pyr.iter().sum::<f64>() + self.lp_other
    }

    fn recompute_other(&mut self, state: &ModelState) {
        // scalar support checks live here so that every violation surfaces as
        // a -inf component rather than undefined arithmetic
        let ok = state.sigma2_u.is_finite()
            && state.sigma2_u > 0.0
            && state
                .beta
                .iter()
                .chain(state.u.iter())
                .all(|v| v.is_finite())
            && state.sigma_p.iter().all(|&s| {
                s.is_finite()
                    && (crate::model::SIGMA_P_MIN..=crate::model::SIGMA_P_MAX).contains(&s)
            });
        self.lp_other = if ok {
            log_other_priors(state, self.family)
        } else {
            f64::NEG_INFINITY
        };
    }

    fn recompute_pyramid(&mut self, state: &ModelState, p: usize) {
        let t_len = self.geom.num_levels();
        for t in 0..t_len {
            self.row_buf[t] = state.qp[(p, t)];
        }
        self.pyr[p] = self
            .geom
            .tree
            .log_prior(&self.row_buf, self.mu_v[p], self.sd_v[p]);
    }

    fn recompute_lik(&mut self, state: &ModelState) {
        let _ = state;
        let n = self.data.n();
        let t_len = self.geom.num_levels();
        let levels = &self.geom.levels;
        let y = self.data.y();
        let mut total = 0.0;
        for i in 0..n {
            let sigma = self.sigma[i];
            if !(sigma > 0.0) {
                total = f64::NEG_INFINITY;
                break;
            }
            let mu = self.mu[i];
            let yi = y[i];
            // smallest t with y <= q_t
            let mut bin = t_len;
            for t in 0..t_len {
                if yi <= self.q[(i, t)] {
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
                (self.q[(i, bin - 1)] - mu) / sigma
            };
            let z_hi = if bin == t_len {
                f64::INFINITY
            } else {
                (self.q[(i, bin)] - mu) / sigma
            };
            let mass = normal_cdf_diff(z_lo, z_hi);
            if !(mass > 0.0) {
                self.zero_width_bins += 1;
                total = f64::NEG_INFINITY;
                break;
            }
            let z = (yi - mu) / sigma;
            total += (tau_hi - tau_lo).ln()
                - 0.5 * z * z
                - crate::special::LN_SQRT_2PI
                - sigma.ln()
                - mass.ln();
        }
        self.lik = total;
    }

    fn snapshot_base(&mut self) {
        let u = &mut self.undo;
        u.valid = true;
        u.params.clear();
        u.q_cols.clear();
        u.mu.copy_from(&self.mu);
        u.sigma.copy_from(&self.sigma);
        u.theta_mu.copy_from(&self.theta_mu);
        u.mu_v.copy_from(&self.mu_v);
        u.sd_v.copy_from(&self.sd_v);
        u.pyr.copy_from_slice(&self.pyr);
        u.lik = self.lik;
        u.lp_other = self.lp_other;
    }

    fn snapshot_q_col(&mut self, t: usize) {
        if !self.undo.q_cols.contains(&t) {
            let slot = self.undo.q_cols.len();
            self.undo.q_cols.push(t);
            self.undo
                .q_data
                .column_mut(slot)
                .copy_from(&self.q.column(t));
        }
    }

    /// Propose new values for a set of parameters. Returns the proposed log
    /// posterior; the caller must `commit` on acceptance or `rollback` on
    /// rejection before the next proposal.
    pub fn propose(
        &mut self,
        state: &mut ModelState,
        layout: &ParamLayout,
        changes: &[(usize, f64)],
    ) -> f64 {
        debug_assert!(
            !self.undo.valid,
            "commit or rollback the previous proposal first"
        );
        self.snapshot_base();

        let m = self.geom.num_vertices();
        let mut lik_dirty = false;
        let mut other_dirty = false;
        let mut all_pyr_dirty = false;
        let mut pyr_dirty: u64 = 0; // bitmask; m <= 64 in practice (K <= 60)

        for &(idx, new_val) in changes {
            let old = layout.get(state, idx);
            self.undo.params.push((idx, old));
            let delta = new_val - old;
            match layout.kind(idx) {
                ParamKind::Quantile(p, t) => {
                    self.snapshot_q_col(t);
                    state.qp[(p, t)] = new_val;
                    if self.data.n() > 0 {
                        self.q
                            .column_mut(t)
                            .axpy(delta, &self.geom.m_rows.column(p), 1.0);
                    }
                    lik_dirty = true;
                    if p < 64 {
                        pyr_dirty |= 1 << p;
                    } else {
                        all_pyr_dirty = true;
                    }
                }
                ParamKind::Beta(j) => {
                    state.beta[j] = new_val;
                    if self.data.n() > 0 {
                        self.mu.axpy(delta, &self.geom.design.x.column(j), 1.0);
                    }
                    if j == 0 {
                        self.theta_mu.add_scalar_mut(delta);
                    } else {
                        self.theta_mu.axpy(delta, &self.geom.greville, 1.0);
                    }
                    self.mu_v.axpy(delta, &self.geom.w_affine.column(j), 1.0);
                    lik_dirty = true;
                    other_dirty = true;
                    all_pyr_dirty = true;
                }
                ParamKind::U(j) => {
                    state.u[j] = new_val;
                    if self.data.n() > 0 {
                        self.mu.axpy(delta, &self.geom.design.z.column(j), 1.0);
                    }
                    self.theta_mu
                        .axpy(delta, &self.geom.design.z_transform.column(j), 1.0);
                    self.mu_v.axpy(delta, &self.geom.w_u.column(j), 1.0);
                    lik_dirty = true;
                    other_dirty = true;
                    all_pyr_dirty = true;
                }
                ParamKind::Sigma2U => {
                    state.sigma2_u = new_val;
                    other_dirty = true;
                }
                ParamKind::SigmaP(j) => {
                    state.sigma_p[j] = new_val;
                    if self.data.n() > 0 {
                        self.sigma.axpy(delta, &self.geom.n_rows.column(j), 1.0);
                    }
                    self.sd_v
                        .axpy(delta, &self.geom.sd_rows_at_vertices.column(j), 1.0);
                    lik_dirty = true;
                    all_pyr_dirty = true;
                    other_dirty = true; // bounds checked there
                }
            }
        }

        if other_dirty {
            self.recompute_other(state);
        }
        if all_pyr_dirty {
            for p in 0..m {
                self.recompute_pyramid(state, p);
            }
        } else {
            for p in 0..m.min(64) {
                if pyr_dirty & (1 << p) != 0 {
                    self.recompute_pyramid(state, p);
                }
            }
        }
        let prior_total = self.pyr.iter().sum::<f64>() + self.lp_other;
        if prior_total == f64::NEG_INFINITY {
            // off support; the likelihood cache is stale but the caller is
            // forced to reject, which restores it
            return f64::NEG_INFINITY;
        }
        if lik_dirty {
            self.recompute_lik(state);
        }
        self.total()
    }

    /// Keep the proposed state.
    pub fn commit(&mut self) {
        self.undo.valid = false;
    }

    /// Restore the state and caches saved by the last `propose`.
    pub fn rollback(&mut self, state: &mut ModelState, layout: &ParamLayout) {
        debug_assert!(self.undo.valid, "nothing to roll back");
        for &(idx, old) in self.undo.params.iter().rev() {
            match layout.kind(idx) {
                ParamKind::Quantile(p, t) => state.qp[(p, t)] = old,
                ParamKind::Beta(j) => state.beta[j] = old,
                ParamKind::U(j) => state.u[j] = old,
                ParamKind::Sigma2U => state.sigma2_u = old,
                ParamKind::SigmaP(j) => state.sigma_p[j] = old,
            }
        }
        for (slot, &t) in self.undo.q_cols.iter().enumerate() {
            self.q
                .column_mut(t)
                .copy_from(&self.undo.q_data.column(slot));
        }
        self.mu.copy_from(&self.undo.mu);
        self.sigma.copy_from(&self.undo.sigma);
        self.theta_mu.copy_from(&self.undo.theta_mu);
        self.mu_v.copy_from(&self.undo.mu_v);
        self.sd_v.copy_from(&self.undo.sd_v);
        self.pyr.copy_from_slice(&self.undo.pyr);
        self.lik = self.undo.lik;
        self.lp_other = self.undo.lp_other;
        self.undo.valid = false;
    }
}

/// Options for the single-site stage.
#[derive(Debug, Clone)]
pub struct Stage1Options {
    pub iters: usize,
    /// Sweeps discarded before samples are retained for the correlation
    /// estimate (and before acceptance is measured).
    pub burnin: usize,
    pub step_constant: f64,
    pub progress: bool,
}

/// Output of stage 1: retained sweeps, tuned scales, measured acceptance.
pub struct Stage1Output {
    /// (iters - burnin) x D retained parameter vectors, in sampling
    /// coordinates (scale-like parameters are stored as logs).
    pub samples: DMatrix<f64>,
    /// Tuned proposal scale per parameter.
    pub scales: Vec<f64>,
    /// Acceptance rate per parameter over the final half of the stage.
    pub acceptance: Vec<f64>,
    /// Empirical likelihood precision of each random-effect mode, estimated
    /// by splitting the retained samples at the median sigma2_u: a mode's
    /// conditional variance is 1/(1/sigma2_u + h).
    pub u_precision: Vec<f64>,
}

/// Run the Metropolised Gibbs stage over every parameter.
pub fn stage1_run<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &Dataset,
    geom: &Geometry,
    family: RandomEffects,
    opts: &Stage1Options,
    rng: &mut R,
) -> Result<Stage1Output> {
    stage1_run_filtered(state, data, geom, family, opts, rng, |_| true)
}

/// Joint rescaling (sigma2_u, u) -> (lambda sigma2_u, sqrt(lambda) u): the
/// random-effect prior is invariant along this direction, so the move walks
/// the variance ridge that coordinatewise updates cross only slowly. The
/// mapping's Jacobian is lambda^(K2/2 + 1).
fn group_rescale_move<R: Rng + ?Sized>(
    state: &mut ModelState,
    layout: &ParamLayout,
    ev: &mut PosteriorEvaluator<'_>,
    scale: &mut AdaptiveScale,
    current: &mut f64,
    changes: &mut Vec<(usize, f64)>,
    rng: &mut R,
) {
    let nq = layout.num_vertices * layout.num_levels;
    let lambda = (scale.scale() * rng.sample::<f64, _>(StandardNormal)).exp();
    changes.clear();
    let root = lambda.sqrt();
    for j in 0..layout.num_u {
        let idx = nq + 2 + j;
        changes.push((idx, state.u[j] * root));
    }
    changes.push((nq + 2 + layout.num_u, state.sigma2_u * lambda));
    let lp_new = ev.propose(state, layout, changes);
    let jacobian = (layout.num_u as f64 / 2.0 + 1.0) * lambda.ln();
    let accepted = rng.gen::<f64>().ln() < lp_new - *current + jacobian;
    if accepted {
        ev.commit();
        *current = lp_new;
    } else {
        ev.rollback(state, layout);
    }
    scale.update(accepted);
}

/// Stage 1 restricted to the parameters selected by `active`; the rest stay
/// fixed. Used for prior-recovery checks with the likelihood disabled.
pub fn stage1_run_filtered<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &Dataset,
    geom: &Geometry,
    family: RandomEffects,
    opts: &Stage1Options,
    rng: &mut R,
    active: impl Fn(usize) -> bool,
) -> Result<Stage1Output> {
    if opts.burnin >= opts.iters {
        return Err(Error::invalid(
            "stage-1 burn-in must be smaller than the iteration count",
        ));
    }
    let layout = ParamLayout::of(geom);
    let d = layout.total();
    let mut ev = PosteriorEvaluator::new(state, data, geom, family)?;

    // data-scaled initial proposal windows
    let sd_y = if data.n() >= 2 {
        let mean = data.y().iter().sum::<f64>() / data.n() as f64;
        (data
            .y()
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (data.n() as f64 - 1.0))
            .sqrt()
            .max(1e-3)
    } else {
        1.0
    };
    let mut scales: Vec<AdaptiveScale> = (0..d)
        .map(|idx| {
            let init = match layout.kind(idx) {
                ParamKind::Quantile(..) => sd_y,
                ParamKind::Beta(_) => sd_y,
                // multiplier on the current sigma_u
                ParamKind::U(_) => 1.0,
                // log-scale windows for the scale-like parameters
                ParamKind::Sigma2U => 0.5,
                ParamKind::SigmaP(_) => 0.3,
            };
            // the decay cap keeps the tuner tracking conditionals that drift
            // with the slowly mixing parts of the chain
            AdaptiveScale::with_decay_cap(init, 0.44, opts.step_constant, 500)
        })
        .collect();

    let active_idx: Vec<usize> = (0..d).filter(|&i| active(i)).collect();
    let retained = opts.iters - opts.burnin;
    let mut samples = DMatrix::zeros(retained, d);
    let mut accepts = vec![0u64; d];
    let mut trials = vec![0u64; d];
    let mut flat = vec![0.0; d];
    let mut current = ev.total();
    // acceptance is reported for the adapted sampler, i.e. the final half
    let measure_from = opts.iters / 2;
    let mut window_accepts = 0u64;
    let mut window_trials = 0u64;

    // likelihood precision of each random-effect mode, so the u windows can
    // ride the conditional width 1/sqrt(1/sigma2_u + h_j)
    let u_precision: Vec<f64> = (0..layout.num_u)
        .map(|j| geom.design.z.column(j).norm_squared() / (sd_y * sd_y))
        .collect();
    // the ridge move complements the sweeps whenever random effects are live
    let group_active = active_idx
        .iter()
        .any(|&i| matches!(layout.kind(i), ParamKind::U(_) | ParamKind::Sigma2U));
    let mut group_scale = AdaptiveScale::with_decay_cap(0.5, 0.44, opts.step_constant, 500);
    let mut group_changes: Vec<(usize, f64)> = Vec::with_capacity(layout.num_u + 1);

    for it in 0..opts.iters {
        for &idx in &active_idx {
            let cur = layout.get(state, idx);
            let s = scales[idx].scale();
            let proposal = match layout.kind(idx) {
                ParamKind::Quantile(..) => cur + rng.gen_range(-1.0..1.0) * s,
                // a random-effect conditional is as wide as the tighter of
                // its prior and its likelihood information; the window rides
                // that width (sigma2_u is not part of the move, so the
                // proposal stays symmetric)
                ParamKind::U(j) => {
                    let width = (1.0 / (1.0 / state.sigma2_u + u_precision[j])).sqrt();
                    cur + s * width * rng.sample::<f64, _>(StandardNormal)
                }
                _ => layout.from_coord(
                    idx,
                    layout.to_coord(idx, cur) + s * rng.sample::<f64, _>(StandardNormal),
                ),
            };
            let lp_new = ev.propose(state, &layout, &[(idx, proposal)]);
            let correction = layout.log_proposal_correction(idx, cur, proposal);
            let log_u: f64 = rng.gen::<f64>().ln();
            let accepted = log_u < lp_new - current + correction;
            if accepted {
                ev.commit();
                current = lp_new;
            } else {
                ev.rollback(state, &layout);
            }
            scales[idx].update(accepted);
            window_trials += 1;
            window_accepts += accepted as u64;
            if it >= measure_from {
                trials[idx] += 1;
                accepts[idx] += accepted as u64;
            }
        }
        if group_active {
            group_rescale_move(
                state,
                &layout,
                &mut ev,
                &mut group_scale,
                &mut current,
                &mut group_changes,
                rng,
            );
        }
        if it >= opts.burnin {
            // retained in sampling coordinates so the stage-2 proposal shapes
            // live in the space the walk actually moves in
            layout.flatten(state, &mut flat);
            for (j, &v) in flat.iter().enumerate() {
                samples[(it - opts.burnin, j)] = layout.to_coord(j, v);
            }
        }
        if (it + 1) % 500 == 0 {
            ev.rebuild(state);
            debug_assert!(
                (ev.total() - current).abs() <= 1e-6 * (1.0 + current.abs()),
                "evaluator drift: {} vs {current}",
                ev.total()
            );
            current = ev.total();
            if opts.progress {
                let acc = window_accepts as f64 / window_trials.max(1) as f64;
                eprintln!(
                    "stage=1 iter={} of={} logpost={current:.4} acc={acc:.3}",
                    it + 1,
                    opts.iters
                );
            }
            window_accepts = 0;
            window_trials = 0;
        }
    }

    let acceptance: Vec<f64> = (0..d)
        .map(|i| {
            if trials[i] > 0 {
                accepts[i] as f64 / trials[i] as f64
            } else {
                f64::NAN
            }
        })
        .collect();
    let u_precision = estimate_u_precision(&samples, &layout);
    Ok(Stage1Output {
        samples,
        scales: scales.iter().map(|s| s.scale()).collect(),
        acceptance,
        u_precision,
    })
}

/// Estimate each random-effect mode's likelihood precision from the stage-1
/// sweeps: the Gaussian-approximation conditional precision of u_j given
/// every other parameter is the matching diagonal of the inverse sample
/// covariance, and its prior share is E[1/sigma2_u].
fn estimate_u_precision(samples: &DMatrix<f64>, layout: &ParamLayout) -> Vec<f64> {
    let s = samples.nrows();
    let d = samples.ncols();
    let nq = layout.num_vertices * layout.num_levels;
    let sig2_col = nq + 2 + layout.num_u;
    let u0 = nq + 2;
    if s < 2 * d {
        return vec![0.0; layout.num_u];
    }

    let mut mean = vec![0.0; d];
    for j in 0..d {
        mean[j] = samples.column(j).sum() / s as f64;
    }
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..s {
        for a in 0..d {
            let da = samples[(i, a)] - mean[a];
            for b in a..d {
                cov[(a, b)] += da * (samples[(i, b)] - mean[b]);
            }
        }
    }
    cov /= (s - 1) as f64;
    for a in 0..d {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    let ridge = 1e-8 * cov.trace().max(1e-300) / d as f64;
    for a in 0..d {
        cov[(a, a)] += ridge;
    }
    let Some(precision) = cov.lu().try_inverse() else {
        return vec![0.0; layout.num_u];
    };

    // samples store ln(sigma2_u)
    let mean_inv_sig2 = (0..s).map(|i| (-samples[(i, sig2_col)]).exp()).sum::<f64>() / s as f64;
    (0..layout.num_u)
        .map(|j| (precision[(u0 + j, u0 + j)] - mean_inv_sig2).max(0.0))
        .collect()
}

/// One proposal block: member indices, proposal Cholesky factor, tuner.
pub struct Block {
    pub indices: Vec<usize>,
    /// Lower Cholesky factor of the regularised member covariance.
    pub chol: DMatrix<f64>,
    pub scale: AdaptiveScale,
}

/// Partition of the parameters with per-block proposal shapes.
pub struct BlockPlan {
    pub blocks: Vec<Block>,
    pub warnings: Vec<String>,
}

/// Parameters with complete-linkage correlation distance above this never
/// share a block.
pub const BLOCK_DIST_CEILING: f64 = 0.9;

/// Complete-linkage agglomeration on a distance matrix; merges run in
/// ascending distance up to the ceiling, stopping at the first merge that
/// would exceed the size cap.
fn cluster_complete_linkage(dist: &DMatrix<f64>, ceiling: f64, size_cap: usize) -> Vec<Vec<usize>> {
    let d = dist.nrows();
    let mut members: Vec<Option<Vec<usize>>> = (0..d).map(|i| Some(vec![i])).collect();
    let mut cd = dist.clone();

    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..d {
            if members[i].is_none() {
                continue;
            }
            for j in (i + 1)..d {
                if members[j].is_none() {
                    continue;
                }
                let v = cd[(i, j)];
                if v <= ceiling {
                    match best {
                        Some((_, _, bv)) if bv <= v => {}
                        _ => best = Some((i, j, v)),
                    }
                }
            }
        }
        let Some((i, j, _)) = best else { break };
        let size_i = members[i].as_ref().unwrap().len();
        let size_j = members[j].as_ref().unwrap().len();
        if size_i + size_j > size_cap {
            // height cut: the dendrogram stops growing here
            break;
        }
        let mut taken = members[j].take().unwrap();
        members[i].as_mut().unwrap().append(&mut taken);
        for k in 0..d {
            if k != i && members[k].is_some() {
                let v = cd[(i, k)].max(cd[(j, k)]);
                cd[(i, k)] = v;
                cd[(k, i)] = v;
            }
        }
    }

    let mut out: Vec<Vec<usize>> = members.into_iter().flatten().collect();
    for c in &mut out {
        c.sort_unstable();
    }
    out.sort_by_key(|c| c[0]);
    out
}

/// Estimate the posterior correlation from stage-1 samples and build the
/// block plan. Requires at least 500 retained samples.
pub fn build_blocks(samples: &DMatrix<f64>, block_max: usize) -> Result<BlockPlan> {
    let (s, d) = samples.shape();
    if s < 500 {
        return Err(Error::invalid(format!(
            "need at least 500 stage-1 samples to estimate correlation, got {s}"
        )));
    }
    if block_max == 0 {
        return Err(Error::invalid("block size cap must be positive"));
    }

    let mut mean = vec![0.0; d];
    for j in 0..d {
        mean[j] = samples.column(j).sum() / s as f64;
    }
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..s {
        for a in 0..d {
            let da = samples[(i, a)] - mean[a];
            for b in a..d {
                cov[(a, b)] += da * (samples[(i, b)] - mean[b]);
            }
        }
    }
    cov /= (s - 1) as f64;
    for a in 0..d {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }

    let sd: Vec<f64> = (0..d).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let mut dist = DMatrix::from_element(d, d, 1.0);
    for a in 0..d {
        dist[(a, a)] = 0.0;
        for b in (a + 1)..d {
            let rho = if sd[a] > 1e-12 && sd[b] > 1e-12 {
                (cov[(a, b)] / (sd[a] * sd[b])).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            let v = 1.0 - rho.abs();
            dist[(a, b)] = v;
            dist[(b, a)] = v;
        }
    }

    let clusters = cluster_complete_linkage(&dist, BLOCK_DIST_CEILING, block_max);

    let mut warnings = Vec::new();
    let mut blocks = Vec::with_capacity(clusters.len());
    for indices in clusters {
        let dim = indices.len();
        let mut sigma = DMatrix::zeros(dim, dim);
        for (r, &a) in indices.iter().enumerate() {
            for (c, &b) in indices.iter().enumerate() {
                sigma[(r, c)] = cov[(a, b)];
            }
        }
        let trace = sigma.trace().max(1e-300);
        let mut ridge = 1e-8 * trace / dim as f64;
        let chol = loop {
            let candidate = &sigma + DMatrix::identity(dim, dim) * ridge;
            if let Some(c) = nalgebra::Cholesky::new(candidate) {
                break c.l();
            }
            ridge *= 10.0;
            if ridge > 1e-2 * trace {
                warnings.push(format!(
                    "block {indices:?}: rank-deficient sample covariance, using diagonal"
                ));
                let diag = DMatrix::from_fn(dim, dim, |r, c| {
                    if r == c {
                        sigma[(r, r)].max(1e-12).sqrt()
                    } else {
                        0.0
                    }
                });
                break diag;
            }
        };
        let dimf = dim as f64;
        blocks.push(Block {
            indices,
            chol,
            scale: AdaptiveScale::new(2.38 / dimf.sqrt(), 0.23, 2.38 * 2.38 / dimf),
        });
    }
    Ok(BlockPlan { blocks, warnings })
}

/// Options for the block stage.
#[derive(Debug, Clone)]
pub struct Stage2Options {
    pub iters: usize,
    pub burnin: usize,
    pub thin: usize,
    pub progress: bool,
    /// Empirical per-mode likelihood precision from stage 1; lets blocks of
    /// random effects ride the width of their conditionals as sigma2_u moves.
    pub u_precision: Option<Vec<f64>>,
}

/// Posterior band summary of the quantile curves on a set of points.
#[derive(Debug, Clone)]
pub struct CurveSummary {
    pub xs_unit: Vec<f64>,
    pub levels: Vec<f64>,
    /// All matrices are len(xs) x T.
    pub mean: DMatrix<f64>,
    pub sd: DMatrix<f64>,
    pub lower95: DMatrix<f64>,
    pub upper95: DMatrix<f64>,
}

/// Stored draws and chain diagnostics.
pub struct ChainResult {
    /// Thinned post-burnin draws, one flattened state per row.
    pub draws: DMatrix<f64>,
    /// Post-burnin acceptance rate per block.
    pub block_acceptance: Vec<f64>,
    /// Block sizes, parallel to `block_acceptance`.
    pub block_sizes: Vec<usize>,
    /// Effective sample size per parameter, from the thinned draws.
    pub ess: Vec<f64>,
    /// Collapsed-bin diagnostics accumulated over the whole run.
    pub zero_width_bins: u64,
    /// Posterior band summary on the requested grid.
    pub summary: CurveSummary,
}

/// Run block-wise Metropolis-Hastings with multivariate Normal proposals.
/// Adaptation runs during burn-in and is frozen afterwards, so retained draws
/// come from a fixed kernel.
pub fn stage2_run<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &Dataset,
    geom: &Geometry,
    family: RandomEffects,
    plan: &mut BlockPlan,
    opts: &Stage2Options,
    grid_unit: &[f64],
    rng: &mut R,
) -> Result<ChainResult> {
    if opts.thin == 0 {
        return Err(Error::invalid("thinning interval must be at least 1"));
    }
    if opts.burnin >= opts.iters {
        return Err(Error::invalid(
            "stage-2 burn-in must be smaller than the iteration count",
        ));
    }
    let layout = ParamLayout::of(geom);
    let d = layout.total();
    let covered: usize = plan.blocks.iter().map(|b| b.indices.len()).sum();
    if covered != d {
        return Err(Error::invalid(format!(
            "block plan covers {covered} of {d} parameters"
        )));
    }

    let mut ev = PosteriorEvaluator::new(state, data, geom, family)?;
    let mut current = ev.total();

    let retained = (opts.iters - opts.burnin) / opts.thin;
    let mut draws = DMatrix::zeros(retained, d);
    let mut row = 0usize;
    let mut accepts = vec![0u64; plan.blocks.len()];
    let mut trials = vec![0u64; plan.blocks.len()];
    let mut flat = vec![0.0; d];
    let mut changes: Vec<(usize, f64)> = Vec::with_capacity(8);

    // A random-effect conditional has width 1/sqrt(1/sigma2_u + h_j); for
    // blocks made purely of random effects the proposal steps ride that
    // width, normalised to 1 at the entry state so the stage-1 covariance
    // keeps its meaning. sigma2_u lies outside such blocks, so the factors
    // are common to the forward and reverse moves and the proposal stays
    // symmetric.
    let u_h: Vec<f64> = opts
        .u_precision
        .clone()
        .unwrap_or_else(|| vec![0.0; layout.num_u]);
    let sig2_ref = state.sigma2_u;
    let u_width = |j: usize, sig2: f64| (1.0 / (1.0 / sig2 + u_h[j])).sqrt();
    let ride: Vec<Option<Vec<usize>>> = plan
        .blocks
        .iter()
        .map(|b| {
            opts.u_precision.as_ref()?;
            let mut js = Vec::with_capacity(b.indices.len());
            for &idx in &b.indices {
                match layout.kind(idx) {
                    ParamKind::U(j) => js.push(j),
                    _ => return None,
                }
            }
            Some(js)
        })
        .collect();

    let mut group_scale = AdaptiveScale::new(0.5, 0.44, 1.0);
    let mut group_changes: Vec<(usize, f64)> = Vec::with_capacity(layout.num_u + 1);

    for it in 0..opts.iters {
        if it == opts.burnin {
            for b in plan.blocks.iter_mut() {
                b.scale.freeze();
            }
            group_scale.freeze();
        }
        for (bi, block) in plan.blocks.iter_mut().enumerate() {
            let dim = block.indices.len();
            let s = block.scale.scale();
            changes.clear();
            let mut correction = 0.0;
            // correlated step in sampling coordinates: scale * L * z
            let z: Vec<f64> = (0..dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            for (r, &idx) in block.indices.iter().enumerate() {
                let mut step = 0.0;
                for c in 0..=r {
                    step += block.chol[(r, c)] * z[c];
                }
                if let Some(js) = &ride[bi] {
                    step *= u_width(js[r], state.sigma2_u) / u_width(js[r], sig2_ref);
                }
                let cur = layout.get(state, idx);
                let new = layout.from_coord(idx, layout.to_coord(idx, cur) + s * step);
                correction += layout.log_proposal_correction(idx, cur, new);
                changes.push((idx, new));
            }
            let lp_new = ev.propose(state, &layout, &changes);
            let log_u: f64 = rng.gen::<f64>().ln();
            let accepted = log_u < lp_new - current + correction;
            if accepted {
                ev.commit();
                current = lp_new;
            } else {
                ev.rollback(state, &layout);
            }
            block.scale.update(accepted);
            if it >= opts.burnin {
                trials[bi] += 1;
                accepts[bi] += accepted as u64;
            }
        }
        group_rescale_move(
            state,
            &layout,
            &mut ev,
            &mut group_scale,
            &mut current,
            &mut group_changes,
            rng,
        );
        if it >= opts.burnin && (it - opts.burnin).is_multiple_of(opts.thin) && row < retained {
            layout.flatten(state, &mut flat);
            for (j, &v) in flat.iter().enumerate() {
                draws[(row, j)] = v;
            }
            row += 1;
        }
        if (it + 1) % 2000 == 0 {
            ev.rebuild(state);
            debug_assert!(
                (ev.total() - current).abs() <= 1e-6 * (1.0 + current.abs()),
                "evaluator drift: {} vs {current}",
                ev.total()
            );
            current = ev.total();
            if opts.progress {
                let acc_mean = if it >= opts.burnin {
                    let tt: u64 = trials.iter().sum();
                    let aa: u64 = accepts.iter().sum();
                    if tt > 0 {
                        aa as f64 / tt as f64
                    } else {
                        f64::NAN
                    }
                } else {
                    f64::NAN
                };
                eprintln!(
                    "stage=2 iter={} of={} logpost={current:.4} acc={acc_mean:.3}",
                    it + 1,
                    opts.iters
                );
            }
        }
    }

    let block_acceptance: Vec<f64> = (0..plan.blocks.len())
        .map(|i| {
            if trials[i] > 0 {
                accepts[i] as f64 / trials[i] as f64
            } else {
                f64::NAN
            }
        })
        .collect();
    let block_sizes = plan.blocks.iter().map(|b| b.indices.len()).collect();
    let ess: Vec<f64> = (0..d)
        .map(|j| {
            let col: Vec<f64> = draws.column(j).iter().copied().collect();
            effective_sample_size(&col)
        })
        .collect();

    let summary = summarize_curves(&draws, geom, grid_unit)?;
    Ok(ChainResult {
        draws,
        block_acceptance,
        block_sizes,
        ess,
        zero_width_bins: ev.zero_width_bins,
        summary,
    })
}

/// Effective sample size via Geyer's initial positive sequence.
pub fn effective_sample_size(chain: &[f64]) -> f64 {
    let n = chain.len();
    if n < 4 {
        return n as f64;
    }
    let nf = n as f64;
    let mean = chain.iter().sum::<f64>() / nf;
    let var = chain.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / nf;
    if var <= 0.0 {
        return nf;
    }
    let auto = |k: usize| -> f64 {
        let mut c = 0.0;
        for i in 0..n - k {
            c += (chain[i] - mean) * (chain[i + k] - mean);
        }
        c / nf / var
    };
    let mut tau = 1.0; // rho_0
    let mut k = 1;
    let mut prev_pair = f64::INFINITY;
    while k + 1 < n {
        let pair = auto(k) + auto(k + 1);
        if pair <= 0.0 {
            break;
        }
        let capped = pair.min(prev_pair);
        tau += 2.0 * capped;
        prev_pair = capped;
        k += 2;
    }
    (nf / tau).clamp(1.0, nf)
}

/// Posterior mean, sd and central 95% bands of the quantile curves at the
/// given unit-scale points, computed from stored draws.
pub fn summarize_curves(
    draws: &DMatrix<f64>,
    geom: &Geometry,
    xs_unit: &[f64],
) -> Result<CurveSummary> {
    let s = draws.nrows();
    if s == 0 {
        return Err(Error::invalid("no draws to summarise"));
    }
    let g = xs_unit.len();
    let t_len = geom.num_levels();
    let m = geom.num_vertices();
    let layout = ParamLayout::of(geom);

    let mut wx = DMatrix::zeros(g, m);
    for (i, &x) in xs_unit.iter().enumerate() {
        wx.set_row(
            i,
            &geom.polytope.interpolation_weights(x)?.weights.transpose(),
        );
    }

    // curve draws per cell
    let mut cells = vec![Vec::with_capacity(s); g * t_len];
    let mut qp = DMatrix::zeros(m, t_len);
    let mut curves = DMatrix::zeros(g, t_len);
    for r in 0..s {
        for p in 0..m {
            for t in 0..t_len {
                qp[(p, t)] = draws[(r, p * layout.num_levels + t)];
            }
        }
        curves.gemm(1.0, &wx, &qp, 0.0);
        for i in 0..g {
            for t in 0..t_len {
                cells[i * t_len + t].push(curves[(i, t)]);
            }
        }
    }

    let mut mean = DMatrix::zeros(g, t_len);
    let mut sd = DMatrix::zeros(g, t_len);
    let mut lower = DMatrix::zeros(g, t_len);
    let mut upper = DMatrix::zeros(g, t_len);
    for i in 0..g {
        for t in 0..t_len {
            let cell = &mut cells[i * t_len + t];
            let mu = cell.iter().sum::<f64>() / s as f64;
            let var = if s > 1 {
                cell.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / (s as f64 - 1.0)
            } else {
                0.0
            };
            cell.sort_by(|a, b| a.partial_cmp(b).unwrap());
            mean[(i, t)] = mu;
            sd[(i, t)] = var.sqrt();
            lower[(i, t)] = empirical_quantile(cell, 0.025);
            upper[(i, t)] = empirical_quantile(cell, 0.975);
        }
    }
    Ok(CurveSummary {
        xs_unit: xs_unit.to_vec(),
        levels: geom.levels.clone(),
        mean,
        sd,
        lower95: lower,
        upper95: upper,
    })
}

/// Linear-interpolation quantile of an already-sorted slice.
fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n as f64 - 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let w = h - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}
