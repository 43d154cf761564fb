//! Property tests for the basis, polytope and pyramid invariants.

use proptest::prelude::*;

use pqps::pyramid::PyramidTree;
use pqps::spline::KnotVector;
use pqps::PolytopeVertices;

fn knot_strategy(max_k: usize) -> impl Strategy<Value = KnotVector> {
    prop::collection::vec(0.02f64..0.98, 0..=max_k).prop_filter_map(
        "knots must be separated",
        |mut g| {
            g.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if g.windows(2).all(|w| w[1] - w[0] > 1e-3) {
                KnotVector::from_interior(g).ok()
            } else {
                None
            }
        },
    )
}

fn level_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..0.99, 1..=9).prop_filter_map(
        "levels must be separated",
        |mut l| {
            l.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if l.windows(2).all(|w| w[1] - w[0] > 1e-3) {
                Some(l)
            } else {
                None
            }
        },
    )
}

proptest! {
    #[test]
    fn basis_partition_of_unity(kv in knot_strategy(25), x in 0.0f64..=1.0) {
        let b = kv.eval_basis(x).unwrap();
        prop_assert!((b.sum() - 1.0).abs() < 1e-12);
        prop_assert!(b.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn truncated_power_and_bspline_agree_through_change_of_basis(
        kv in knot_strategy(8),
        x in 0.0f64..=1.0,
    ) {
        let t = kv.change_of_basis().unwrap();
        let tp = kv.eval_truncated_power(x).unwrap();
        let bs = kv.eval_basis(x).unwrap();
        let mapped = t.transpose() * tp;
        prop_assert!((mapped - bs).amax() < 1e-9);
    }

    #[test]
    fn interpolation_weights_affine_and_nonnegative(
        kv in knot_strategy(10),
        x in 0.0f64..=1.0,
    ) {
        let poly = PolytopeVertices::build(&kv).unwrap();
        let w = poly.interpolation_weights(x).unwrap().weights;
        prop_assert!((w.sum() - 1.0).abs() < 1e-12);
        // adversarially tight knots cost a few digits on individual weights
        // (evenly spaced knots stay below 1e-12; see the acceptance suite)
        prop_assert!(w.min() > -1e-9);
    }

    #[test]
    fn pyramid_tree_reconstructs_levels(levels in level_strategy()) {
        let tree = PyramidTree::new(&levels).unwrap();
        let mut seen: Vec<f64> = tree.nodes().iter().map(|n| n.level).collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assert_eq!(seen, levels.clone());
        let bound = (levels.len() as f64).log2().ceil() as usize + 1;
        prop_assert!(tree.max_depth() <= bound);
    }

    #[test]
    fn pyramid_samples_strictly_increasing(
        levels in level_strategy(),
        seed in any::<u64>(),
        mu in -5.0f64..5.0,
        sigma in 0.1f64..4.0,
    ) {
        use rand::SeedableRng;
        let tree = PyramidTree::new(&levels).unwrap();
        let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(seed);
        let q = tree.sample(mu, sigma, &mut rng);
        prop_assert!(q.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(tree.log_prior(&q, mu, sigma).is_finite());
    }
}

// Hull containment, the load-bearing geometric fact: every curve point must
// certify as a member of the vertex hull, for random knot sets as well as
// even ones.
#[test]
fn curve_stays_inside_hull_for_random_knots() {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(2026);
    for k in 0..=10usize {
        let kv = loop {
            let mut g: Vec<f64> = (0..k).map(|_| rng.gen_range(0.02..0.98)).collect();
            g.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if g.windows(2).all(|w| w[1] - w[0] > 1e-3) {
                break KnotVector::from_interior(g).unwrap();
            }
        };
        let poly = PolytopeVertices::build(&kv).unwrap();
        for i in 0..200 {
            let x = i as f64 / 199.0;
            let point = poly.curve_point(x).unwrap();
            let cert = poly.contains(&point);
            assert!(
                cert.residual < 1e-8,
                "K={k} x={x}: hull residual {:.3e}",
                cert.residual
            );
            assert!(cert.feasible);
        }
    }
}
