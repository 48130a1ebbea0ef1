#![allow(dead_code)]

use proattention::attention::softmax_rows;
use proattention::estimator::WeightedPoints;
use proattention::matrix::Matrix;
use proattention::penalty::{Penalty, PenaltyKind};
use proattention::rng::{NormalStream, SplitMix64};

pub const EPS: f64 = 1e-6;

pub fn all_penalties() -> Vec<Penalty> {
    PenaltyKind::ALL.into_iter().map(Penalty::with_defaults).collect()
}

pub fn gaussian(rng: &mut NormalStream, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::new(rows, cols, rng.fill(rows * cols).into_iter().map(|x| x * scale).collect()).unwrap()
}

/// N ∈ [2, 64], D ∈ [1, 16], unit-normal values, softmax of unit-normal
/// scores as weights.
pub fn random_instance(seed: u64) -> WeightedPoints {
    let mut dims = SplitMix64::new(seed ^ 0xa5a5_a5a5);
    let n = 2 + (dims.next_u64() % 63) as usize;
    let d = 1 + (dims.next_u64() % 16) as usize;
    let mut rng = NormalStream::new(seed);
    let values = gaussian(&mut rng, n, d, 1.0);
    let scores = gaussian(&mut rng, 1, n, 1.0);
    let weights = softmax_rows(&scores).into_data();
    WeightedPoints::new(values, weights).unwrap()
}

pub fn random_vector(rng: &mut NormalStream, d: usize, scale: f64) -> Vec<f64> {
    rng.fill(d).into_iter().map(|x| x * scale).collect()
}

pub fn verdict(id: &str, name: &str, pass: bool, detail: impl std::fmt::Display) {
    println!("[{}] {id} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{id} {name} failed: {detail}");
}
