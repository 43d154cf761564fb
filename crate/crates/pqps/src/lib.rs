// Negated partial-order comparisons are deliberate throughout: NaN must fail
// monotonicity and support checks, and `!(a < b)` is the form that does it.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::excessive_precision)] // published special-function constants
#![allow(clippy::too_many_arguments)]
#![allow(clippy::needless_range_loop)]

//! Simultaneous Bayesian estimation of non-crossing nonparametric quantile
//! curves with penalised splines.
//!
//! Quantile curves are cubic B-splines whose values are parameterised at the
//! vertices of a minimal polytope enclosing the spline moment curve; quantile
//! pyramid priors at those vertices keep the curves ordered by construction,
//! so the posterior needs no crossing checks. The centring distribution is a
//! Normal whose mean is an O'Sullivan penalised spline and whose sd is a
//! reduced-knot spline, and inference runs through a two-stage adaptive MCMC
//! (Robbins-Monro tuned single-site sweeps, then correlation-clustered block
//! updates).

pub mod error;
pub mod fit;
pub mod linalg;
pub mod model;
pub mod nnls;
pub mod polytope;
pub mod pyramid;
pub mod sampler;
pub mod simharness;
pub mod special;
pub mod spline;

pub use error::{Error, Result};
pub use fit::{fit_dataset, FitConfig, FitResult};
pub use model::{CovariateMap, Dataset, Geometry, ModelState, RandomEffects};
pub use polytope::{BarycentricWeights, MembershipCertificate, PolytopeVertices};
pub use pyramid::PyramidTree;
pub use sampler::{ChainResult, CurveSummary};
pub use simharness::{Design, DesignSpec, StudyConfig, StudyReport};
pub use spline::{osullivan_design, KnotVector, PenaltyDesign};
