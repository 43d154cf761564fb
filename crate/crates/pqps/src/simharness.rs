//! Simulation designs, error metrics and the replicate study driver.
//!
//! Four heteroscedastic benchmark designs generate data on x ~ U(0,1):
//!   1: f(x) = 0.5 + 2x + sin(2 pi x - 0.5), unit noise
//!   2: f(x) = 3x, noise sd 0.5 + 2x + sin(2 pi x - 0.5)
//!   3: two-bump Normal-density mean (widths 0.1 and 0.2), noise sd
//!      0.1 + x/10 + x^2/10
//!   4: as 3 with the first bump sharpened to width 0.05, which rewards
//!      fat-tailed random effects
//! The true quantile function of each design is mean + sd * Phi^{-1}(tau).

use rand::Rng;
use rand_distr::StandardNormal;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{fit_dataset, FitConfig};
use crate::model::{Dataset, RandomEffects};
use crate::sampler::summarize_curves;
use crate::special::{normal_quantile, LN_SQRT_2PI};

/// Benchmark design identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Design {
    One,
    Two,
    Three,
    Four,
}

impl Design {
    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            1 => Ok(Design::One),
            2 => Ok(Design::Two),
            3 => Ok(Design::Three),
            4 => Ok(Design::Four),
            _ => Err(Error::invalid(format!(
                "unknown design {id}; expected 1..=4"
            ))),
        }
    }

    pub fn id(self) -> u32 {
        match self {
            Design::One => 1,
            Design::Two => 2,
            Design::Three => 3,
            Design::Four => 4,
        }
    }

    /// Random-effect family used by default for this design: the sharp bump
    /// of design 4 wants heavy-tailed local smoothness.
    pub fn recommended_family(self) -> RandomEffects {
        match self {
            Design::Four => RandomEffects::Cauchy,
            _ => RandomEffects::Normal,
        }
    }

    /// Mean function.
    pub fn mean(self, x: f64) -> f64 {
        match self {
            Design::One => 0.5 + 2.0 * x + (2.0 * std::f64::consts::PI * x - 0.5).sin(),
            Design::Two => 3.0 * x,
            Design::Three => normal_pdf(x, 0.15, 0.1) / 4.0 + normal_pdf(x, 0.6, 0.2) / 4.0,
            Design::Four => normal_pdf(x, 0.15, 0.05) / 4.0 + normal_pdf(x, 0.6, 0.2) / 4.0,
        }
    }

    /// Noise standard deviation.
    pub fn noise_sd(self, x: f64) -> f64 {
        match self {
            Design::One => 1.0,
            Design::Two => 0.5 + 2.0 * x + (2.0 * std::f64::consts::PI * x - 0.5).sin(),
            Design::Three | Design::Four => 0.1 + x / 10.0 + x * x / 10.0,
        }
    }

    /// True conditional quantile.
    pub fn true_quantile(self, tau: f64, x: f64) -> f64 {
        self.mean(x) + self.noise_sd(x) * normal_quantile(tau)
    }
}

fn normal_pdf(x: f64, mu: f64, sd: f64) -> f64 {
    let z = (x - mu) / sd;
    (-0.5 * z * z - LN_SQRT_2PI).exp() / sd
}

/// A design paired with a sample size.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DesignSpec {
    pub design: Design,
    pub n: usize,
}

impl DesignSpec {
    pub fn new(design: Design, n: usize) -> Result<Self> {
        if n < 10 {
            return Err(Error::invalid("design sample size must be at least 10"));
        }
        Ok(DesignSpec { design, n })
    }
}

/// Draw one dataset from the design.
pub fn generate<R: Rng + ?Sized>(spec: DesignSpec, rng: &mut R) -> Result<Dataset> {
    let mut x = Vec::with_capacity(spec.n);
    let mut y = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let xi: f64 = rng.gen();
        let eps: f64 = rng.sample(StandardNormal);
        x.push(xi);
        y.push(spec.design.mean(xi) + spec.design.noise_sd(xi) * eps);
    }
    Dataset::from_raw(&x, &y)
}

/// Root mean integrated squared error over the design points.
pub fn rmise(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::invalid("rmise requires matching grids"));
    }
    if estimate.is_empty() {
        return Err(Error::invalid("rmise of empty grids"));
    }
    let n = estimate.len() as f64;
    let sum: f64 = estimate
        .iter()
        .zip(truth)
        .map(|(&e, &t)| (e - t) * (e - t))
        .sum();
    Ok((sum / n).sqrt())
}

/// Fraction of (interval, truth) pairs with the truth inside the interval.
pub fn coverage(intervals: &[(f64, f64)], truth: &[f64]) -> Result<f64> {
    if intervals.len() != truth.len() {
        return Err(Error::invalid("coverage requires matching lengths"));
    }
    if intervals.is_empty() {
        return Err(Error::invalid("coverage of empty input"));
    }
    for &(lo, hi) in intervals {
        if !(lo <= hi) {
            return Err(Error::invalid("malformed credible interval"));
        }
    }
    let hits = intervals
        .iter()
        .zip(truth)
        .filter(|(&(lo, hi), &t)| lo <= t && t <= hi)
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Study settings: a design, replicate count, and the fit configuration
/// applied to every replicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub spec: DesignSpec,
    pub replicates: usize,
    pub fit: FitConfig,
}

/// One row of the aggregated study report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyRow {
    pub tau: f64,
    /// Mean RMISE over successful replicates, scaled by 100.
    pub rmise_x100: f64,
    /// Pooled 95% empirical coverage over (replicate, design point) pairs.
    pub coverage: f64,
    pub replicates: usize,
}

/// Per-replicate metrics, kept for the optional raw dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub replicate: usize,
    pub tau: f64,
    pub rmise_x100: f64,
    pub covered: usize,
    pub points: usize,
}

/// Aggregated study output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub design: u32,
    pub n: usize,
    pub rows: Vec<StudyRow>,
    pub raw: Vec<ReplicateMetrics>,
    /// Replicates whose fit failed; recorded, never silently dropped.
    pub failures: Vec<String>,
    pub runtime_seconds: f64,
}

impl StudyReport {
    /// CSV with the tau,rmise_x100,coverage,replicates schema.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,rmise_x100,coverage,replicates\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.tau, row.rmise_x100, row.coverage, row.replicates
            ));
        }
        out
    }

    /// Per-replicate metrics as CSV.
    pub fn raw_csv(&self) -> String {
        let mut out = String::from("replicate,tau,rmise_x100,covered,points\n");
        for m in &self.raw {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                m.replicate, m.tau, m.rmise_x100, m.covered, m.points
            ));
        }
        out
    }

    /// Aligned text table; coverage is averaged over each replicate's own
    /// design points.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "design {} (n = {}, {} replicates; coverage over replicate design points)\n",
            self.design,
            self.n,
            self.rows.first().map_or(0, |r| r.replicates)
        ));
        out.push_str(&format!(
            "{:>8} {:>12} {:>10}\n",
            "tau", "rmise_x100", "coverage"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:>8.3} {:>12.2} {:>10.3}\n",
                row.tau, row.rmise_x100, row.coverage
            ));
        }
        if !self.failures.is_empty() {
            out.push_str(&format!("failed replicates: {}\n", self.failures.len()));
        }
        out
    }
}

/// Deterministic per-replicate RNG: a seeded generator advanced by
/// `replicate` long jumps, giving non-overlapping streams.
pub fn replicate_rng(master_seed: u64, replicate: usize) -> Xoshiro256PlusPlus {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(master_seed);
    for _ in 0..replicate {
        rng.long_jump();
    }
    rng
}

/// Run the replicate study: independent datasets fitted in parallel, RMISE
/// and coverage aggregated per quantile level.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    if cfg.replicates == 0 {
        return Err(Error::invalid("at least one replicate is required"));
    }
    let start = std::time::Instant::now();
    let levels = cfg.fit.levels.clone();
    let t_len = levels.len();

    struct RepOutcome {
        replicate: usize,
        result: Result<Vec<(f64, usize, usize)>>, // per tau: (rmise, covered, points)
    }

    let outcomes: Vec<RepOutcome> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let run = || -> Result<Vec<(f64, usize, usize)>> {
                let mut rng = replicate_rng(cfg.fit.seed, r);
                let data = generate(cfg.spec, &mut rng)?;
                let fit = fit_dataset(&data, &cfg.fit, &mut rng)?;
                // evaluate the bands at the replicate's own design points
                let summary = summarize_curves(&fit.chain.draws, &fit.geometry, data.x_unit())?;
                let mut per_tau = Vec::with_capacity(t_len);
                for (t, &tau) in levels.iter().enumerate() {
                    let truth: Vec<f64> = data
                        .x_unit()
                        .iter()
                        .map(|&xu| cfg.spec.design.true_quantile(tau, data.map().from_unit(xu)))
                        .collect();
                    let est: Vec<f64> = (0..data.n()).map(|i| summary.mean[(i, t)]).collect();
                    let e = rmise(&est, &truth)?;
                    let hits = (0..data.n())
                        .filter(|&i| {
                            summary.lower95[(i, t)] <= truth[i]
                                && truth[i] <= summary.upper95[(i, t)]
                        })
                        .count();
                    per_tau.push((e, hits, data.n()));
                }
                Ok(per_tau)
            };
            RepOutcome {
                replicate: r,
                result: run(),
            }
        })
        .collect();

    let mut raw = Vec::new();
    let mut failures = Vec::new();
    let mut sums = vec![0.0; t_len];
    let mut covered = vec![0usize; t_len];
    let mut points = vec![0usize; t_len];
    let mut ok = 0usize;
    for outcome in &outcomes {
        match &outcome.result {
            Ok(per_tau) => {
                ok += 1;
                for (t, &(e, hit, pts)) in per_tau.iter().enumerate() {
                    sums[t] += e;
                    covered[t] += hit;
                    points[t] += pts;
                    raw.push(ReplicateMetrics {
                        replicate: outcome.replicate,
                        tau: levels[t],
                        rmise_x100: 100.0 * e,
                        covered: hit,
                        points: pts,
                    });
                }
            }
            Err(e) => failures.push(format!("replicate {}: {e}", outcome.replicate)),
        }
    }
    if ok == 0 {
        return Err(Error::numerical("every replicate fit failed"));
    }

    let rows = levels
        .iter()
        .enumerate()
        .map(|(t, &tau)| StudyRow {
            tau,
            rmise_x100: 100.0 * sums[t] / ok as f64,
            coverage: covered[t] as f64 / points[t] as f64,
            replicates: ok,
        })
        .collect();

    Ok(StudyReport {
        design: cfg.spec.design.id(),
        n: cfg.spec.n,
        rows,
        raw,
        failures,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn design_one_mean_value() {
        // f(0.25) = 0.5 + 0.5 + sin(pi/2 - 0.5) = 1 + cos(0.5)
        let expected = 1.0 + 0.5f64.cos();
        assert_abs_diff_eq!(Design::One.mean(0.25), expected, epsilon = 1e-14);
    }

    #[test]
    fn design_two_median_is_line() {
        for i in 0..=10 {
            let x = i as f64 / 10.0;
            assert_abs_diff_eq!(Design::Two.true_quantile(0.5, x), 3.0 * x, epsilon = 1e-12);
        }
    }

    #[test]
    fn design_three_noise_endpoints() {
        assert_abs_diff_eq!(Design::Three.noise_sd(0.0), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(Design::Three.noise_sd(1.0), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn design_four_recommends_cauchy() {
        assert_eq!(Design::Four.recommended_family(), RandomEffects::Cauchy);
        assert_eq!(Design::One.recommended_family(), RandomEffects::Normal);
    }

    #[test]
    fn generated_quantiles_match_analytic_truth() {
        // empirical quantiles of many draws at fixed x vs the analytic truth
        for design in [Design::One, Design::Two, Design::Three, Design::Four] {
            let x = 0.37;
            let n = 200_000;
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(7 + design.id() as u64);
            let mut ys: Vec<f64> = (0..n)
                .map(|_| {
                    let eps: f64 = rng.sample(StandardNormal);
                    design.mean(x) + design.noise_sd(x) * eps
                })
                .collect();
            ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for &tau in &[0.5, 0.9] {
                let idx = ((n as f64) * tau) as usize;
                let empirical = ys[idx.min(n - 1)];
                let truth = design.true_quantile(tau, x);
                // Monte Carlo error of an empirical quantile
                let dens = {
                    let z = normal_quantile(tau);
                    (-0.5 * z * z - LN_SQRT_2PI).exp() / design.noise_sd(x)
                };
                let se = (tau * (1.0 - tau) / n as f64).sqrt() / dens;
                assert!(
                    (empirical - truth).abs() < 4.0 * se + 1e-3,
                    "design {} tau {tau}: {empirical} vs {truth}",
                    design.id()
                );
            }
        }
    }

    #[test]
    fn rmise_basics() {
        let a = [1.0, 2.0, 3.0];
        assert_abs_diff_eq!(rmise(&a, &a).unwrap(), 0.0, epsilon = 1e-15);
        let b = [1.5, 2.5, 3.5];
        assert_abs_diff_eq!(rmise(&a, &b).unwrap(), 0.5, epsilon = 1e-15);
        assert!(rmise(&a, &b[..2]).is_err());
        // brute-force cross-check on random vectors
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(12);
        let e: Vec<f64> = (0..57).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let t: Vec<f64> = (0..57).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let direct = {
            let mut acc = 0.0;
            for i in 0..57 {
                acc += (e[i] - t[i]).powi(2);
            }
            (acc / 57.0).sqrt()
        };
        assert_abs_diff_eq!(rmise(&e, &t).unwrap(), direct, epsilon = 1e-12);
    }

    #[test]
    fn coverage_basics() {
        let truth = [0.0, 1.0, 2.0];
        let all = [(f64::NEG_INFINITY, f64::INFINITY); 3];
        assert_abs_diff_eq!(coverage(&all, &truth).unwrap(), 1.0, epsilon = 1e-15);
        let wrong = [(5.0, 5.0), (7.0, 7.0), (9.0, 9.0)];
        assert_abs_diff_eq!(coverage(&wrong, &truth).unwrap(), 0.0, epsilon = 1e-15);
        let half = [(-1.0, 0.5), (2.0, 3.0), (1.5, 2.5)];
        assert_abs_diff_eq!(coverage(&half, &truth).unwrap(), 2.0 / 3.0, epsilon = 1e-12);
        assert!(coverage(&[(1.0, 0.0)], &[0.5]).is_err());
    }

    #[test]
    fn calibrated_normal_intervals_cover_nominally() {
        // closed-form Normal posterior oracle: xbar +- 1.96 sigma/sqrt(m)
        // covers the true mean with probability 0.95
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(31);
        let reps = 4000;
        let m = 25usize;
        let mut intervals = Vec::with_capacity(reps);
        let truth = vec![1.7; reps];
        for _ in 0..reps {
            let xbar = (0..m)
                .map(|_| 1.7 + rng.sample::<f64, _>(StandardNormal))
                .sum::<f64>()
                / m as f64;
            let half = 1.959963984540054 / (m as f64).sqrt();
            intervals.push((xbar - half, xbar + half));
        }
        let c = coverage(&intervals, &truth).unwrap();
        let se = (0.95f64 * 0.05 / reps as f64).sqrt();
        assert!((c - 0.95).abs() < 4.0 * se, "coverage {c}");
    }

    #[test]
    fn replicate_rng_streams_differ_and_repeat() {
        let mut a = replicate_rng(9, 0);
        let mut b = replicate_rng(9, 1);
        let mut a2 = replicate_rng(9, 0);
        let va: f64 = a.gen();
        let vb: f64 = b.gen();
        let va2: f64 = a2.gen();
        assert_ne!(va, vb);
        assert_eq!(va, va2);
    }
}
