mod common;

use common::*;
use proattention::attention::*;
use proattention::estimator::{newton_irls, wls_estimate, WeightedPoints};
use proattention::matrix::{distance, Matrix};
use proattention::penalty::Penalty;
use proattention::rng::NormalStream;
use proattention::simlab::{trajectory_attention, trajectory_values};
use proptest::prelude::*;

fn qkv(seed: u64, n: usize, d: usize) -> (Matrix, Matrix, Matrix) {
    let mut rng = NormalStream::new(seed);
    (gaussian(&mut rng, n, d, 1.0), gaussian(&mut rng, n, d, 1.0), gaussian(&mut rng, n, d, 1.0))
}

fn permute_rows(m: &Matrix, perm: &[usize]) -> Matrix {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| m.row(i).to_vec()).collect();
    Matrix::from_rows(&rows).unwrap()
}

#[test]
fn vanilla_rows_are_weighted_means() {
    let (q, k, v) = qkv(3, 4, 3);
    let a = attention_matrix(&q, &k, true).unwrap();
    let out = vanilla_attention(&q, &k, &v, true).unwrap();
    for i in 0..4 {
        let pts = WeightedPoints::new(v.clone(), a.row(i).to_vec()).unwrap();
        let mean = wls_estimate(&pts);
        for (x, y) in out.row(i).iter().zip(&mean) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn pro_rows_match_estimator() {
    let (q, k, v) = qkv(11, 8, 4);
    let p = Penalty::mcp(4.0).unwrap();
    let cfg = AttentionConfig::new(p, 3);
    let a = attention_matrix(&q, &k, true).unwrap();
    let out = pro_attention(&q, &k, &v, &cfg).unwrap();
    for i in 0..8 {
        let pts = WeightedPoints::new(v.clone(), a.row(i).to_vec()).unwrap();
        let t = newton_irls(&p, &pts, 3, cfg.eps, None).unwrap();
        for (x, y) in out.row(i).iter().zip(t.final_iterate()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn pairwise_distances_match_loop() {
    let z = Matrix::from_rows(&[vec![11.0, 64.0 / 3.0], vec![9.0, 14.0], vec![-2.0, 0.5]]).unwrap();
    let v = trajectory_values();
    let d = pairwise_distances(&z, &v).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let mut s = 0.0;
            for c in 0..2 {
                s += (z.get(i, c) - v.get(j, c)).powi(2);
            }
            assert!((d.get(i, j) - s.sqrt()).abs() <= 1e-12);
        }
    }
}

#[test]
fn trajectory_matrix_recovers_vertices() {
    let cfg = AttentionConfig::new(Penalty::mcp(4.0).unwrap(), 3);
    let out = pro_attention_from_weights(&trajectory_attention(), &trajectory_values(), &cfg).unwrap();
    assert!(distance(out.row(1), &[1.0, 2.0]) < 1e-9, "{:?}", out.row(1));
    assert!(distance(out.row(2), &[25.0, 37.0]) < 1e-9, "{:?}", out.row(2));
}

#[test]
fn duplicate_and_identical_tokens_stay_finite() {
    let (q, k, mut v) = qkv(4, 6, 3);
    for c in 0..3 {
        v.set(1, c, v.get(0, c));
    }
    let same = Matrix::new(6, 3, vec![0.7; 18]).unwrap();
    for p in all_penalties() {
        let cfg = AttentionConfig::new(p, 5);
        for vv in [&v, &same] {
            let out = pro_attention(&q, &k, vv, &cfg).unwrap();
            assert!(out.data().iter().all(|x| x.is_finite()), "{p}");
        }
        let out = pro_attention(&q, &k, &same, &cfg).unwrap();
        assert!(out.data().iter().all(|&x| (x - 0.7).abs() <= 1e-12), "{p}");
    }
}

fn planted(d: f64) -> (Matrix, Matrix) {
    let mut rng = NormalStream::new(21);
    let mut rows: Vec<Vec<f64>> = gaussian(&mut rng, 7, 2, 0.1).iter_rows().map(<[f64]>::to_vec).collect();
    rows.push(vec![0.6 * d, 0.8 * d]);
    let a = softmax_rows(&gaussian(&mut rng, 8, 8, 0.1));
    (a, Matrix::from_rows(&rows).unwrap())
}

#[test]
fn mcp_output_stays_with_inliers_while_vanilla_follows_outlier() {
    let cfg = AttentionConfig::new(Penalty::mcp(4.0).unwrap(), 3);
    let vanilla = |a: &Matrix, v: &Matrix| pro_attention_from_weights(a, v, &AttentionConfig::new(Penalty::l2(), 1)).unwrap();
    let (a, v6) = planted(6.0);
    let (_, v24) = planted(24.0);
    let hull: Vec<&[f64]> = v6.iter_rows().take(7).collect();
    let radius = hull.iter().map(|r| distance(r, &[0.0, 0.0])).fold(0.0, f64::max);
    for v in [&v6, &v24] {
        let out = pro_attention_from_weights(&a, v, &cfg).unwrap();
        for row in out.iter_rows() {
            assert!(distance(row, &[0.0, 0.0]) <= radius, "{row:?}");
        }
    }
    let moved = vanilla(&a, &v24).sub(&vanilla(&a, &v6)).unwrap();
    for (i, row) in moved.iter_rows().enumerate() {
        let expect = a.get(i, 7) * 18.0;
        assert!((distance(row, &[0.0, 0.0]) - expect).abs() <= 1e-9);
    }
}

#[test]
fn flat_weight_zone_makes_output_independent_of_far_outlier() {
    let cfg = AttentionConfig::new(Penalty::huber_mcp(2.0, 4.0).unwrap(), 3);
    let (a, v) = planted(5.0);
    let reference = pro_attention_from_weights(&a, &v, &cfg).unwrap();
    for d in [6.0, 8.0, 10.0, 12.0] {
        let (_, vd) = planted(d);
        let out = pro_attention_from_weights(&a, &vd, &cfg).unwrap();
        assert!(out.max_abs_diff(&reference) <= 1e-12, "d = {d}");
    }
}

fn random_heads(rng: &mut NormalStream, h: usize, d_model: usize) -> Vec<HeadProjection> {
    let dh = d_model / h;
    (0..h)
        .map(|_| HeadProjection {
            wq: gaussian(rng, d_model, dh, 0.5),
            wk: gaussian(rng, d_model, dh, 0.5),
            wv: gaussian(rng, d_model, dh, 0.5),
        })
        .collect()
}

#[test]
fn single_identity_head_with_l2_is_vanilla() {
    let mut rng = NormalStream::new(8);
    let x = gaussian(&mut rng, 6, 4, 1.0);
    let id = Matrix::identity(4);
    let heads = [HeadProjection { wq: id.clone(), wk: id.clone(), wv: id.clone() }];
    let out = multi_head_pro_attention(&x, &heads, &id, &AttentionConfig::new(Penalty::l2(), 3)).unwrap();
    let van = vanilla_attention(&x, &x, &x, true).unwrap();
    assert!(out.max_abs_diff(&van) <= 1e-12);
}

#[test]
fn heads_occupy_their_own_column_slices() {
    let mut rng = NormalStream::new(5);
    let x = gaussian(&mut rng, 7, 8, 1.0);
    let heads = random_heads(&mut rng, 4, 8);
    let cfg = AttentionConfig::new(Penalty::mcp(4.0).unwrap(), 3);
    let concat = multi_head_concat(&x, &heads, &cfg).unwrap();
    for (h, hp) in heads.iter().enumerate() {
        let single = pro_attention(&x.matmul(&hp.wq).unwrap(), &x.matmul(&hp.wk).unwrap(), &x.matmul(&hp.wv).unwrap(), &cfg).unwrap();
        let slice = concat.column_slice(2 * h, 2).unwrap();
        assert_eq!(slice, single);
    }
}

proptest! {
    #[test]
    fn permutation_equivariance(seed in 0u64..5000, kind in 0usize..5, n in 2usize..12, shuffle in any::<u64>()) {
        let (q, k, v) = qkv(seed, n, 3);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = shuffle;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let cfg = AttentionConfig::new(all_penalties()[kind], 3);
        let base = pro_attention(&q, &k, &v, &cfg).unwrap();
        let moved_queries = pro_attention(&permute_rows(&q, &perm), &k, &v, &cfg).unwrap();
        prop_assert_eq!(moved_queries, permute_rows(&base, &perm));
        let moved_keys = pro_attention(&q, &permute_rows(&k, &perm), &permute_rows(&v, &perm), &cfg).unwrap();
        prop_assert!(moved_keys.max_abs_diff(&base) <= 1e-9);
    }
}
