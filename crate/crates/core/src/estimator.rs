//! Token-wise robust estimation.
//!
//! Vanilla attention aggregates one token as the weighted mean of the value
//! rows, i.e. the minimizer of `Σ a_j ‖v_j − z‖²`. The robust estimator
//! replaces the square with a penalty, `L(z) = Σ a_j ρ(‖v_j − z‖)`, and
//! minimizes it by repeatedly minimizing the quadratic majorizer
//! `Σ a_j w_j ‖v_j − z‖² + C`, whose minimizer is the reweighted mean
//! `Σ a_j w_j v_j / Σ a_j w_j`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::{distance, squared_distance, Matrix};
use crate::penalty::Penalty;

/// Value rows with nonnegative aggregation weights (at least one positive).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPoints {
    values: Matrix,
    weights: Vec<f64>,
}

impl WeightedPoints {
    pub fn new(values: Matrix, weights: Vec<f64>) -> Result<Self> {
        check_weights(&values, &weights)?;
        Ok(Self { values, weights })
    }

    pub fn uniform(values: Matrix) -> Self {
        let weights = vec![1.0; values.rows()];
        Self { values, weights }
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

fn check_weights(values: &Matrix, weights: &[f64]) -> Result<()> {
    if weights.len() != values.rows() {
        return Err(Error::dims(format!(
            "{} weights for {} points",
            weights.len(),
            values.rows()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::invalid("weights must be finite and nonnegative"));
    }
    if !weights.iter().any(|&w| w > 0.0) {
        return Err(Error::invalid("all weights are zero"));
    }
    Ok(())
}

fn check_dim(pts: &WeightedPoints, z: &[f64]) -> Result<()> {
    if z.len() != pts.dim() {
        return Err(Error::dims(format!(
            "estimate has dimension {}, points have {}",
            z.len(),
            pts.dim()
        )));
    }
    Ok(())
}

/// Iterates and losses of one Newton-IRLS run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IrlsTrace {
    pub iterates: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_step_weights: Option<Vec<Vec<f64>>>,
}

impl IrlsTrace {
    pub fn final_iterate(&self) -> &[f64] {
        self.iterates.last().expect("trace holds at least the initial iterate")
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("trace holds at least the initial loss")
    }

    /// First step whose loss rises above its predecessor by more than
    /// `slack · max(1, previous)`.
    pub fn first_ascent(&self, slack: f64) -> Option<usize> {
        self.losses
            .windows(2)
            .position(|w| w[1] > w[0] + slack * w[0].abs().max(1.0))
            .map(|i| i + 1)
    }
}

/// Normalized weighted mean `Σ a_j v_j / Σ a_j`.
pub fn wls_estimate(pts: &WeightedPoints) -> Vec<f64> {
    weighted_mean(&pts.values, |j| pts.weights[j]).expect("weights contain a positive entry")
}

/// `Σ c_j v_j / Σ c_j`, or `None` when the coefficients sum to zero.
pub(crate) fn weighted_mean(values: &Matrix, coef: impl Fn(usize) -> f64) -> Option<Vec<f64>> {
    let mut num = vec![0.0; values.cols()];
    let mut den = 0.0;
    for (j, v) in values.iter_rows().enumerate() {
        let c = coef(j);
        den += c;
        for (n, x) in num.iter_mut().zip(v) {
            *n += c * x;
        }
    }
    if den > 0.0 {
        Some(num.into_iter().map(|n| n / den).collect())
    } else {
        None
    }
}

/// `Σ a_j ρ(‖v_j − z‖)`.
pub fn robust_loss(p: &Penalty, pts: &WeightedPoints, z: &[f64]) -> Result<f64> {
    check_dim(pts, z)?;
    Ok(loss_unchecked(p, pts, z))
}

fn loss_unchecked(p: &Penalty, pts: &WeightedPoints, z: &[f64]) -> f64 {
    pts.values
        .iter_rows()
        .zip(&pts.weights)
        .fold(0.0, |acc, (v, a)| acc + a * p.rho_unchecked(distance(v, z)))
}

/// IRLS weights for every point at the current iterate.
pub fn irls_weights(p: &Penalty, pts: &WeightedPoints, z: &[f64], eps: f64) -> Vec<f64> {
    pts.values
        .iter_rows()
        .map(|v| p.irls_weight(distance(v, z), eps))
        .collect()
}

/// Quadratic majorizer of the robust loss built at `anchor`, evaluated at `z`.
/// The constant is fixed so that the value at the anchor equals the loss.
pub fn upper_bound_loss(
    p: &Penalty,
    pts: &WeightedPoints,
    z: &[f64],
    anchor: &[f64],
    eps: f64,
) -> Result<f64> {
    check_dim(pts, z)?;
    check_dim(pts, anchor)?;
    let w = irls_weights(p, pts, anchor, eps);
    let quad = |at: &[f64]| {
        pts.values
            .iter_rows()
            .zip(pts.weights.iter().zip(&w))
            .fold(0.0, |acc, (v, (a, w))| acc + a * w * squared_distance(v, at))
    };
    let constant = loss_unchecked(p, pts, anchor) - quad(anchor);
    Ok(quad(z) + constant)
}

/// One Newton step on the majorizer: the reweighted mean. When every
/// combined weight is zero the majorizer is flat and `z` is returned.
pub fn newton_irls_step(p: &Penalty, pts: &WeightedPoints, z: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_dim(pts, z)?;
    let w = irls_weights(p, pts, z, eps);
    Ok(reweighted_mean(pts, &w).unwrap_or_else(|| z.to_vec()))
}

fn reweighted_mean(pts: &WeightedPoints, w: &[f64]) -> Option<Vec<f64>> {
    weighted_mean(&pts.values, |j| pts.weights[j] * w[j])
}

/// Runs `steps` Newton-IRLS iterations from `init` (default: the weighted
/// mean), recording every iterate and its loss.
pub fn newton_irls(
    p: &Penalty,
    pts: &WeightedPoints,
    steps: usize,
    eps: f64,
    init: Option<&[f64]>,
) -> Result<IrlsTrace> {
    run(p, pts, steps, eps, init, false)
}

/// Same as [`newton_irls`] but keeps the weight vector used at each step.
pub fn newton_irls_with_weights(
    p: &Penalty,
    pts: &WeightedPoints,
    steps: usize,
    eps: f64,
    init: Option<&[f64]>,
) -> Result<IrlsTrace> {
    run(p, pts, steps, eps, init, true)
}

fn run(
    p: &Penalty,
    pts: &WeightedPoints,
    steps: usize,
    eps: f64,
    init: Option<&[f64]>,
    keep_weights: bool,
) -> Result<IrlsTrace> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let z0 = match init {
        Some(z) => {
            check_dim(pts, z)?;
            z.to_vec()
        }
        None => wls_estimate(pts),
    };
    let mut losses = vec![loss_unchecked(p, pts, &z0)];
    let mut iterates = vec![z0];
    let mut per_step = keep_weights.then(Vec::new);
    for _ in 0..steps {
        let z = iterates.last().expect("nonempty");
        let w = irls_weights(p, pts, z, eps);
        let next = reweighted_mean(pts, &w).unwrap_or_else(|| z.clone());
        if let Some(ws) = per_step.as_mut() {
            ws.push(w);
        }
        losses.push(loss_unchecked(p, pts, &next));
        iterates.push(next);
    }
    Ok(IrlsTrace {
        iterates,
        losses,
        per_step_weights: per_step,
    })
}

/// First-order baseline: `z − η Σ a_j w_j · 2(z − v_j)`.
pub fn gd_step(p: &Penalty, pts: &WeightedPoints, z: &[f64], eta: f64, eps: f64) -> Result<Vec<f64>> {
    check_dim(pts, z)?;
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("step size must be nonnegative, got {eta}")));
    }
    let w = irls_weights(p, pts, z, eps);
    let mut grad = vec![0.0; z.len()];
    for (v, (a, w)) in pts.values.iter_rows().zip(pts.weights.iter().zip(&w)) {
        let c = 2.0 * a * w;
        for ((g, zi), vi) in grad.iter_mut().zip(z).zip(v) {
            *g += c * (zi - vi);
        }
    }
    Ok(z.iter().zip(&grad).map(|(zi, g)| zi - eta * g).collect())
}

/// Runs `steps` gradient steps from the weighted mean, recording losses.
pub fn gradient_descent(
    p: &Penalty,
    pts: &WeightedPoints,
    steps: usize,
    eta: f64,
    eps: f64,
    init: Option<&[f64]>,
) -> Result<IrlsTrace> {
    let z0 = match init {
        Some(z) => {
            check_dim(pts, z)?;
            z.to_vec()
        }
        None => wls_estimate(pts),
    };
    let mut losses = vec![loss_unchecked(p, pts, &z0)];
    let mut iterates = vec![z0];
    for _ in 0..steps {
        let next = gd_step(p, pts, iterates.last().expect("nonempty"), eta, eps)?;
        losses.push(loss_unchecked(p, pts, &next));
        iterates.push(next);
    }
    Ok(IrlsTrace {
        iterates,
        losses,
        per_step_weights: None,
    })
}

/// Weighted geometric median by Weiszfeld iteration with the Vardi–Zhang
/// correction for iterates that land on a data point.
///
/// Kept independent of the penalty machinery: it is the reference the ℓ1
/// estimator is tested against.
pub fn geometric_median_oracle(pts: &WeightedPoints, tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tolerance must be positive, got {tol}")));
    }
    let values = &pts.values;
    let weights = &pts.weights;
    let dim = values.cols();

    let support: Vec<usize> = (0..values.rows()).filter(|&j| weights[j] > 0.0).collect();
    let first = values.row(support[0]);
    if support.iter().all(|&j| values.row(j) == first) {
        return Ok(first.to_vec());
    }

    let total: f64 = support.iter().map(|&j| weights[j]).sum();
    let mut y = vec![0.0; dim];
    for &j in &support {
        for (yi, vi) in y.iter_mut().zip(values.row(j)) {
            *yi += weights[j] * vi / total;
        }
    }

    let mut last_step = f64::INFINITY;
    for _ in 0..max_iter {
        let mut num = vec![0.0; dim];
        let mut den = 0.0;
        let mut coincident = 0.0;
        for &j in &support {
            let v = values.row(j);
            let d = distance(v, &y);
            if d == 0.0 {
                coincident += weights[j];
                continue;
            }
            let c = weights[j] / d;
            den += c;
            for (n, vi) in num.iter_mut().zip(v) {
                *n += c * vi;
            }
        }
        let t: Vec<f64> = num.iter().map(|n| n / den).collect();
        let next = if coincident == 0.0 {
            t
        } else {
            // R = Σ_{v ≠ y} a_j (v_j − y)/‖v_j − y‖ = den·(t − y)
            let r: Vec<f64> = t.iter().zip(&y).map(|(ti, yi)| den * (ti - yi)).collect();
            let r_norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if r_norm <= coincident {
                return Ok(y);
            }
            let keep = coincident / r_norm;
            t.iter()
                .zip(&y)
                .map(|(ti, yi)| (1.0 - keep) * ti + keep * yi)
                .collect()
        };
        last_step = distance(&next, &y);
        y = next;
        if last_step < tol {
            return Ok(y);
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        last_step,
        last_iterate: y,
    })
}
