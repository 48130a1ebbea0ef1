mod common;

use common::*;
use proattention::attention::softmax_rows;
use proattention::estimator::*;
use proattention::matrix::{distance, Matrix};
use proattention::penalty::Penalty;
use proattention::rng::NormalStream;
use proattention::simlab::trajectory_values;
use proptest::prelude::*;

#[test]
fn majorizer_dominates_on_probe_cloud() {
    let mut rng = NormalStream::new(42);
    let values = gaussian(&mut rng, 8, 3, 1.0);
    let weights = softmax_rows(&gaussian(&mut rng, 1, 8, 1.0)).into_data();
    let pts = WeightedPoints::new(values, weights).unwrap();
    let p = Penalty::mcp(4.0).unwrap();
    let anchor = random_vector(&mut rng, 3, 1.0);
    for _ in 0..10_000 {
        let z = random_vector(&mut rng, 3, 3.0);
        let ub = upper_bound_loss(&p, &pts, &z, &anchor, EPS).unwrap();
        assert!(ub >= robust_loss(&p, &pts, &z).unwrap() - 1e-12);
    }
}

#[test]
fn mcp_descent_on_softmax_instance() {
    let mut rng = NormalStream::new(7);
    let values = gaussian(&mut rng, 64, 8, 1.0);
    let weights = softmax_rows(&gaussian(&mut rng, 1, 64, 1.0)).into_data();
    let pts = WeightedPoints::new(values, weights).unwrap();
    let p = Penalty::mcp(4.0).unwrap();
    let t = newton_irls(&p, &pts, 8, EPS, None).unwrap();
    assert_eq!(t.iterates.len(), 9);
    for (z, recorded) in t.iterates.iter().zip(&t.losses) {
        assert_eq!(robust_loss(&p, &pts, z).unwrap(), *recorded);
    }
    for w in t.losses.windows(2) {
        assert!(w[1] <= w[0], "{:?}", t.losses);
    }
}

#[test]
fn l1_trajectory_against_weiszfeld_reference() {
    let pts = WeightedPoints::uniform(trajectory_values());
    let median = geometric_median_oracle(&pts, 1e-10, 1_000_000).unwrap();
    // the Fermat point of this triangle is the obtuse vertex
    assert!(distance(&median, &[7.0, 25.0]) < 1e-8, "{median:?}");

    let t = newton_irls(&Penalty::l1(), &pts, 5, EPS, None).unwrap();
    let d0 = distance(&t.iterates[0], &median);
    // ratios from an independent numpy run of the same reweighting
    let frozen = [0.502_276_325_211_343, 0.296_752_899_769_943, 0.188_693_553_695_419, 0.124_891_021_170_561, 0.084_681_838_786_507];
    for (k, want) in frozen.iter().enumerate() {
        let got = distance(&t.iterates[k + 1], &median) / d0;
        assert!((got - want).abs() < 1e-8, "step {}: {got} vs {want}", k + 1);
    }
}

#[test]
fn newton_beats_gradient_descent_on_trajectory() {
    let pts = WeightedPoints::uniform(trajectory_values());
    let p = Penalty::l1();
    let newton = newton_irls(&p, &pts, 3, EPS, None).unwrap();
    let gd = gradient_descent(&p, &pts, 3, 0.05, EPS, None).unwrap();
    assert!(gd.final_loss() > newton.final_loss());
}

#[test]
fn l2_iterates_stay_at_weighted_mean() {
    for seed in 0..50 {
        let pts = random_instance(seed);
        let mean = wls_estimate(&pts);
        let t = newton_irls(&Penalty::l2(), &pts, 6, EPS, None).unwrap();
        for z in &t.iterates {
            for (a, b) in z.iter().zip(&mean) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn gd_with_newton_step_size_matches_newton() {
    for seed in 0..50 {
        let pts = random_instance(seed);
        let mut rng = NormalStream::new(seed + 77);
        let z = random_vector(&mut rng, pts.dim(), 0.5);
        for p in all_penalties() {
            let w = irls_weights(&p, &pts, &z, EPS);
            let s: f64 = pts.weights().iter().zip(&w).map(|(a, w)| a * w).sum();
            if s == 0.0 {
                continue;
            }
            let gd = gd_step(&p, &pts, &z, 1.0 / (2.0 * s), EPS).unwrap();
            let nt = newton_irls_step(&p, &pts, &z, EPS).unwrap();
            for (a, b) in gd.iter().zip(&nt) {
                assert!((a - b).abs() <= 1e-12, "{p}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn moving_a_deleted_outlier_changes_nothing() {
    let mut rng = NormalStream::new(3);
    let inliers = gaussian(&mut rng, 12, 2, 0.5);
    let p = Penalty::mcp(4.0).unwrap();
    let init = [0.1, -0.1];
    let with_outlier = |d: f64| {
        let mut rows: Vec<Vec<f64>> = inliers.iter_rows().map(<[f64]>::to_vec).collect();
        rows.push(vec![d * 0.6, d * 0.8]);
        WeightedPoints::uniform(Matrix::from_rows(&rows).unwrap())
    };
    let near = newton_irls(&p, &with_outlier(10.0), 8, EPS, Some(&init)).unwrap();
    for z in &near.iterates {
        assert!(distance(z, &[6.0, 8.0]) >= 4.0);
    }
    for d in [20.0, 1e3, 1e6] {
        let far = newton_irls(&p, &with_outlier(d), 8, EPS, Some(&init)).unwrap();
        assert_eq!(far.iterates, near.iterates, "d = {d}");
    }
}

proptest! {
    #[test]
    fn translation_equivariance(
        seed in 0u64..10_000,
        shift in proptest::collection::vec(-50.0f64..50.0, 16),
        kind in 0usize..5,
    ) {
        let pts = random_instance(seed);
        let d = pts.dim();
        let c = &shift[..d];
        let moved: Vec<f64> = pts
            .values()
            .iter_rows()
            .flat_map(|r| r.iter().zip(c).map(|(x, s)| x + s).collect::<Vec<_>>())
            .collect();
        let moved = WeightedPoints::new(
            Matrix::new(pts.len(), d, moved).unwrap(),
            pts.weights().to_vec(),
        ).unwrap();
        let p = all_penalties()[kind];
        let a = newton_irls(&p, &pts, 4, EPS, None).unwrap();
        let b = newton_irls(&p, &moved, 4, EPS, None).unwrap();
        for (za, zb) in a.iterates.iter().zip(&b.iterates) {
            for ((x, y), s) in za.iter().zip(zb).zip(c) {
                prop_assert!((x + s - y).abs() <= 1e-9, "{x} + {s} vs {y}");
            }
        }
    }
}
