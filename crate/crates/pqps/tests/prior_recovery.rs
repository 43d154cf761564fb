//! With no data the posterior is the prior: sampling only the vertex
//! quantiles must reproduce the pyramid prior's marginals.

use pqps::model::{Dataset, Geometry, ModelState, RandomEffects};
use pqps::sampler::{effective_sample_size, stage1_run_filtered, ParamLayout, Stage1Options};
use pqps::simharness::replicate_rng;

#[test]
fn quantile_marginals_match_direct_pyramid_sampling() {
    let data = Dataset::empty();
    let levels = [0.3, 0.6];
    let geom = Geometry::new(2, 2, &levels, &data).unwrap();
    let layout = ParamLayout::of(&geom);
    let mut state = ModelState::init_from_data(&data, &geom).unwrap();

    // freeze everything except the vertex quantiles
    let nq = geom.num_vertices() * levels.len();
    let mut rng = replicate_rng(4242, 0);
    let opts = Stage1Options {
        iters: 24_000,
        burnin: 4_000,
        step_constant: 1.0,
        progress: false,
    };
    let out = stage1_run_filtered(
        &mut state,
        &data,
        &geom,
        RandomEffects::Normal,
        &opts,
        &mut rng,
        |idx| idx < nq,
    )
    .unwrap();

    // direct sampling with the same centring: beta = u = 0 gives mean 0 at
    // every vertex, and the sd vertices sit at 1, so sd is 1 everywhere
    let mut direct_rng = replicate_rng(777, 0);
    let n_direct = 100_000;
    let mut sums = vec![0.0; levels.len()];
    let mut sq = vec![0.0; levels.len()];
    for _ in 0..n_direct {
        let q = geom.tree.sample(0.0, 1.0, &mut direct_rng);
        for (t, &v) in q.iter().enumerate() {
            sums[t] += v;
            sq[t] += v * v;
        }
    }
    for t in 0..levels.len() {
        let direct_mean = sums[t] / n_direct as f64;
        let direct_var = sq[t] / n_direct as f64 - direct_mean * direct_mean;
        let direct_se = (direct_var / n_direct as f64).sqrt();
        for p in 0..geom.num_vertices() {
            let col: Vec<f64> = out
                .samples
                .column(p * levels.len() + t)
                .iter()
                .copied()
                .collect();
            let mcmc_mean = col.iter().sum::<f64>() / col.len() as f64;
            let mcmc_var = col
                .iter()
                .map(|&v| (v - mcmc_mean) * (v - mcmc_mean))
                .sum::<f64>()
                / (col.len() as f64 - 1.0);
            let ess = effective_sample_size(&col);
            let mcmc_se = (mcmc_var / ess).sqrt();
            let tol = 3.0 * (direct_se * direct_se + mcmc_se * mcmc_se).sqrt();
            assert!(
                (mcmc_mean - direct_mean).abs() < tol,
                "pyramid {p} level {}: mcmc {mcmc_mean:.4} vs direct {direct_mean:.4} (tol {tol:.4}, ess {ess:.0})",
                levels[t]
            );
        }
    }

    // the frozen parameters must not have moved
    assert_eq!(state.beta[0], 0.0);
    assert!(state.u.iter().all(|&v| v == 0.0));
}
