//! Quantile pyramid prior.
//!
//! A pyramid draws the quantiles of a random distribution level by level:
//! the first level splits the sorted list of target quantile levels at its
//! middle element, each subtree recurses on its half, and every quantile is a
//! Beta-weighted average of its nearest already-drawn neighbours. On the
//! uniform scale the recursion starts from Q(0) = 0 and Q(1) = 1; an
//! inverse-cdf transform then centres the process on a Normal distribution
//! with the given mean and standard deviation.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::special::{beta_ln_pdf, ln_beta, normal_cdf, normal_ln_pdf, normal_quantile};

/// One node of the splitting tree.
#[derive(Debug, Clone)]
pub struct PyramidNode {
    /// Depth m >= 1; the Beta shape is a = 2m.
    pub depth: usize,
    /// Quantile level drawn at this node.
    pub level: f64,
    /// Closest already-drawn level to the left (0 at the boundary).
    pub left_level: f64,
    /// Closest already-drawn level to the right (1 at the boundary).
    pub right_level: f64,
    /// Index of `level` in the sorted level list.
    pub pos: usize,
    /// Index of the left ancestor in the sorted list; None is the virtual 0.
    pub left_pos: Option<usize>,
    /// Index of the right ancestor; None is the virtual 1.
    pub right_pos: Option<usize>,
    /// Beta shape a = 2m.
    pub beta_a: f64,
    /// Beta shape solving the mean constraint E V = (tau - tau_L)/(tau_R - tau_L).
    pub beta_b: f64,
    ln_beta_norm: f64,
}

/// Sampling order, ancestry and Beta weights for a set of quantile levels.
#[derive(Debug, Clone)]
pub struct PyramidTree {
    levels: Vec<f64>,
    nodes: Vec<PyramidNode>,
    max_depth: usize,
}

impl PyramidTree {
    /// Build the tree for strictly increasing levels in (0,1).
    pub fn new(levels: &[f64]) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("at least one quantile level is required"));
        }
        for w in levels.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::invalid(
                    "quantile levels must be strictly increasing",
                ));
            }
        }
        if levels
            .iter()
            .any(|&t| !t.is_finite() || t <= 0.0 || t >= 1.0)
        {
            return Err(Error::invalid(
                "quantile levels must lie strictly inside (0,1)",
            ));
        }

        let mut nodes = Vec::with_capacity(levels.len());
        // recursion: split [lo, hi) at its middle element (the smaller middle
        // when the count is even), ancestors tracked as (level, position)
        fn split(
            levels: &[f64],
            lo: usize,
            hi: usize,
            depth: usize,
            left: (f64, Option<usize>),
            right: (f64, Option<usize>),
            nodes: &mut Vec<PyramidNode>,
            max_depth: &mut usize,
        ) {
            if lo >= hi {
                return;
            }
            *max_depth = (*max_depth).max(depth);
            let mid = lo + (hi - lo - 1) / 2;
            let level = levels[mid];
            let e = (level - left.0) / (right.0 - left.0);
            let a = 2.0 * depth as f64;
            let b = a * (1.0 - e) / e;
            nodes.push(PyramidNode {
                depth,
                level,
                left_level: left.0,
                right_level: right.0,
                pos: mid,
                left_pos: left.1,
                right_pos: right.1,
                beta_a: a,
                beta_b: b,
                ln_beta_norm: ln_beta(a, b),
            });
            split(
                levels,
                lo,
                mid,
                depth + 1,
                left,
                (level, Some(mid)),
                nodes,
                max_depth,
            );
            split(
                levels,
                mid + 1,
                hi,
                depth + 1,
                (level, Some(mid)),
                right,
                nodes,
                max_depth,
            );
        }

        let mut max_depth = 0;
        split(
            levels,
            0,
            levels.len(),
            1,
            (0.0, None),
            (1.0, None),
            &mut nodes,
            &mut max_depth,
        );
        Ok(PyramidTree {
            levels: levels.to_vec(),
            nodes,
            max_depth,
        })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Nodes in sampling order (every ancestor precedes its descendants).
    pub fn nodes(&self) -> &[PyramidNode] {
        &self.nodes
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    /// Draw the uniform-scale quantiles Q^unif, strictly increasing in (0,1).
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut u = vec![f64::NAN; self.levels.len()];
        for node in &self.nodes {
            let lo = node.left_pos.map_or(0.0, |i| u[i]);
            let hi = node.right_pos.map_or(1.0, |i| u[i]);
            let beta = Beta::new(node.beta_a, node.beta_b).expect("shapes are positive");
            // keep v strictly inside (0,1) so the recursion stays strict
            let v = beta.sample(rng).clamp(1e-12, 1.0 - 1e-12);
            u[node.pos] = lo * (1.0 - v) + hi * v;
        }
        u
    }

    /// Draw quantiles centred on Normal(mu, sigma).
    pub fn sample<R: Rng + ?Sized>(&self, mu: f64, sigma: f64, rng: &mut R) -> Vec<f64> {
        assert!(sigma > 0.0, "centring sd must be positive");
        self.sample_uniform(rng)
            .into_iter()
            .map(|u| mu + sigma * normal_quantile(u))
            .collect()
    }

    /// Joint log density of the quantile vector under the pyramid prior with
    /// Normal(mu, sigma) centring. Returns -inf for non-monotone input (the
    /// support boundary), never an error.
    pub fn log_prior(&self, q: &[f64], mu: f64, sigma: f64) -> f64 {
        debug_assert_eq!(q.len(), self.levels.len());
        if sigma <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if q.windows(2).any(|w| !(w[0] < w[1])) {
            return f64::NEG_INFINITY;
        }

        let mut total = 0.0;
        let mut u = [0.0f64; 64];
        let t = q.len();
        let mut u_heap;
        let u: &mut [f64] = if t <= 64 {
            &mut u[..t]
        } else {
            u_heap = vec![0.0; t];
            &mut u_heap
        };
        for (i, &qi) in q.iter().enumerate() {
            let z = (qi - mu) / sigma;
            if !z.is_finite() {
                return f64::NEG_INFINITY;
            }
            u[i] = normal_cdf(z);
            // the inverse-cdf Jacobian: one phi(z)/sigma factor per quantile
            total += normal_ln_pdf(z) - sigma.ln();
        }
        if u.windows(2).any(|w| !(w[0] < w[1])) || u[0] <= 0.0 || u[t - 1] >= 1.0 {
            // cdf saturation collapsed a gap
            return f64::NEG_INFINITY;
        }

        for node in &self.nodes {
            let lo = node.left_pos.map_or(0.0, |i| u[i]);
            let hi = node.right_pos.map_or(1.0, |i| u[i]);
            let gap = hi - lo;
            if !(gap > 0.0) {
                return f64::NEG_INFINITY;
            }
            let v = (u[node.pos] - lo) / gap;
            let lp = beta_ln_pdf(v, node.beta_a, node.beta_b, node.ln_beta_norm);
            if !lp.is_finite() {
                return f64::NEG_INFINITY;
            }
            total += lp - gap.ln();
        }
        total
    }
}
