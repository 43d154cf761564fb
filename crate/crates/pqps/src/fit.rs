//! End-to-end fitting: geometry construction, the two MCMC stages, and the
//! posterior curve summary on an output grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, Geometry, ModelState, RandomEffects};
use crate::sampler::{
    build_blocks, stage1_run, stage2_run, summarize_curves, ChainResult, CurveSummary,
    Stage1Options, Stage2Options,
};

/// Everything a fit needs beyond the data. Serialisable so a config file can
/// carry it; command-line flags override individual fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Quantile levels, strictly increasing in (0,1).
    pub levels: Vec<f64>,
    /// Interior knots of the quantile and centring-mean splines.
    pub knots: usize,
    /// Interior knots of the centring-sd spline.
    pub sd_knots: usize,
    pub re_family: RandomEffects,
    /// Stage-1 sweeps.
    pub iters1: usize,
    /// Stage-1 sweeps discarded before the correlation estimate; defaults to
    /// iters1 / 5 when zero.
    pub burnin1: usize,
    /// Stage-2 iterations.
    pub iters2: usize,
    /// Stage-2 burn-in (adaptation freezes here).
    pub burnin: usize,
    /// Thinning interval for retained draws.
    pub thin: usize,
    pub seed: u64,
    /// Output grid size for curve summaries.
    pub grid: usize,
    /// Largest proposal block.
    pub block_max: usize,
    /// Robbins-Monro step constant for scalar sites.
    pub step_constant: f64,
    /// Emit key=value progress lines on stderr.
    pub progress: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            levels: vec![0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95],
            knots: 20,
            sd_knots: 3,
            re_family: RandomEffects::Normal,
            iters1: 10_000,
            burnin1: 0,
            iters2: 30_000,
            burnin: 10_000,
            thin: 10,
            seed: 1,
            grid: 200,
            block_max: 8,
            step_constant: 1.0,
            progress: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::invalid("at least one quantile level is required"));
        }
        for w in self.levels.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::invalid("levels must be strictly increasing"));
            }
        }
        if self.levels.iter().any(|&t| !(0.0 < t && t < 1.0)) {
            return Err(Error::invalid("levels must lie strictly inside (0,1)"));
        }
        if self.iters1 == 0 || self.iters2 == 0 {
            return Err(Error::invalid("iteration counts must be positive"));
        }
        if self.thin == 0 {
            return Err(Error::invalid("thin must be at least 1"));
        }
        if self.burnin >= self.iters2 {
            return Err(Error::invalid("stage-2 burn-in must be below iters2"));
        }
        if self.effective_burnin1() >= self.iters1 {
            return Err(Error::invalid("stage-1 burn-in must be below iters1"));
        }
        if self.grid < 2 {
            return Err(Error::invalid("output grid needs at least two points"));
        }
        if self.block_max == 0 {
            return Err(Error::invalid("block_max must be positive"));
        }
        Ok(())
    }

    pub fn effective_burnin1(&self) -> usize {
        if self.burnin1 > 0 {
            self.burnin1
        } else {
            self.iters1 / 5
        }
    }
}

/// Fit output: chain, summaries on the output grid (original covariate
/// scale), acceptance diagnostics and geometry.
pub struct FitResult {
    pub chain: ChainResult,
    pub geometry: Geometry,
    /// Summary on the output grid; grid x values are on the original scale.
    pub grid_summary: CurveSummary,
    pub grid_original: Vec<f64>,
    pub stage1_acceptance: Vec<f64>,
    pub blocks: usize,
    pub warnings: Vec<String>,
    pub runtime_seconds: f64,
}

/// Run the full two-stage fit with the caller's RNG.
pub fn fit_dataset<R: Rng + ?Sized>(
    data: &Dataset,
    cfg: &FitConfig,
    rng: &mut R,
) -> Result<FitResult> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let geom = Geometry::new(cfg.knots, cfg.sd_knots, &cfg.levels, data)?;
    let mut state = ModelState::init_from_data(data, &geom)?;

    let s1 = Stage1Options {
        iters: cfg.iters1,
        burnin: cfg.effective_burnin1(),
        step_constant: cfg.step_constant,
        progress: cfg.progress,
    };
    let stage1 = stage1_run(&mut state, data, &geom, cfg.re_family, &s1, rng)?;

    let mut plan = build_blocks(&stage1.samples, cfg.block_max)?;
    let s2 = Stage2Options {
        iters: cfg.iters2,
        burnin: cfg.burnin,
        thin: cfg.thin,
        progress: cfg.progress,
        u_precision: Some(stage1.u_precision.clone()),
    };
    let grid_unit: Vec<f64> = (0..cfg.grid)
        .map(|i| i as f64 / (cfg.grid - 1) as f64)
        .collect();
    let chain = stage2_run(
        &mut state,
        data,
        &geom,
        cfg.re_family,
        &mut plan,
        &s2,
        &grid_unit,
        rng,
    )?;

    let grid_summary = summarize_curves(&chain.draws, &geom, &grid_unit)?;
    let grid_original: Vec<f64> = grid_unit.iter().map(|&u| data.map().from_unit(u)).collect();

    let mut warnings = geom.warnings.clone();
    warnings.extend(plan.warnings.iter().cloned());

    let blocks = chain.block_acceptance.len();
    Ok(FitResult {
        chain,
        geometry: geom,
        grid_summary,
        grid_original,
        stage1_acceptance: stage1.acceptance,
        blocks,
        warnings,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}
