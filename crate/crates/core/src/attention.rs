//! Matrix-form attention.
//!
//! `pro_attention` is the row-vectorized form of the token-wise Newton-IRLS
//! estimator: with `A` fixed, each step computes the distance matrix
//! `D = [‖z_i − v_j‖]`, the elementwise weights `W = w(D)`, and the
//! row-normalized product `(W ⊙ A)·V`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{distance, MacCount, Matrix};
use crate::penalty::{Penalty, PenaltyKind, DEFAULT_EPS};

pub const DEFAULT_STEPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    #[serde(default)]
    pub penalty: Penalty,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_scaled")]
    pub scaled: bool,
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

fn default_scaled() -> bool {
    true
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            penalty: Penalty::default(),
            steps: DEFAULT_STEPS,
            eps: DEFAULT_EPS,
            scaled: true,
        }
    }
}

impl AttentionConfig {
    pub fn new(penalty: Penalty, steps: usize) -> Self {
        Self {
            penalty,
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(scores: &Matrix) -> Matrix {
    let mut out = scores.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

pub fn attention_matrix(q: &Matrix, k: &Matrix, scaled: bool) -> Result<Matrix> {
    attention_matrix_counted(q, k, scaled, &mut MacCount::default())
}

fn attention_matrix_counted(q: &Matrix, k: &Matrix, scaled: bool, macs: &mut MacCount) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(Error::dims(format!(
            "queries have dimension {}, keys have {}",
            q.cols(),
            k.cols()
        )));
    }
    let mut scores = q.matmul_transposed_counted(k, macs)?;
    if scaled {
        let s = (q.cols() as f64).sqrt();
        scores = scores.map(|x| x / s);
    }
    Ok(softmax_rows(&scores))
}

fn check_values(k: &Matrix, v: &Matrix) -> Result<()> {
    if k.rows() != v.rows() {
        return Err(Error::dims(format!(
            "{} keys but {} values",
            k.rows(),
            v.rows()
        )));
    }
    Ok(())
}

pub fn vanilla_attention(q: &Matrix, k: &Matrix, v: &Matrix, scaled: bool) -> Result<Matrix> {
    vanilla_attention_counted(q, k, v, scaled).map(|(m, _)| m)
}

/// Vanilla attention plus the number of multiply-accumulates it spent.
pub fn vanilla_attention_counted(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    scaled: bool,
) -> Result<(Matrix, MacCount)> {
    check_values(k, v)?;
    let mut macs = MacCount::default();
    let a = attention_matrix_counted(q, k, scaled, &mut macs)?;
    let out = a.matmul_counted(v, &mut macs)?;
    Ok((out, macs))
}

pub fn pairwise_distances(z: &Matrix, v: &Matrix) -> Result<Matrix> {
    pairwise_distances_counted(z, v, &mut MacCount::default())
}

fn pairwise_distances_counted(z: &Matrix, v: &Matrix, macs: &mut MacCount) -> Result<Matrix> {
    if z.cols() != v.cols() {
        return Err(Error::dims(format!(
            "estimates have dimension {}, values have {}",
            z.cols(),
            v.cols()
        )));
    }
    let mut out = Matrix::zeros(z.rows(), v.rows());
    for i in 0..z.rows() {
        let zi = z.row(i);
        for (j, d) in out.row_mut(i).iter_mut().enumerate() {
            *d = distance(zi, v.row(j));
        }
    }
    macs.add(z.rows() * v.rows() * z.cols());
    Ok(out)
}

pub fn pro_attention(q: &Matrix, k: &Matrix, v: &Matrix, cfg: &AttentionConfig) -> Result<Matrix> {
    pro_attention_counted(q, k, v, cfg).map(|(m, _)| m)
}

/// K-step robust attention. With zero steps this is exactly
/// [`vanilla_attention`].
pub fn pro_attention_counted(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &AttentionConfig,
) -> Result<(Matrix, MacCount)> {
    cfg.validate()?;
    check_values(k, v)?;
    let mut macs = MacCount::default();
    let a = attention_matrix_counted(q, k, cfg.scaled, &mut macs)?;
    let z0 = a.matmul_counted(v, &mut macs)?;
    let out = reweight(&a, v, z0, cfg, &mut macs)?;
    Ok((out, macs))
}

/// Robust aggregation from an explicit (not necessarily row-stochastic)
/// attention matrix. The starting estimate is the row-normalized mean
/// `Σ_j a_ij v_j / Σ_j a_ij`.
pub fn pro_attention_from_weights(a: &Matrix, v: &Matrix, cfg: &AttentionConfig) -> Result<Matrix> {
    cfg.validate()?;
    if a.cols() != v.rows() {
        return Err(Error::dims(format!(
            "attention matrix has {} columns, values have {} rows",
            a.cols(),
            v.rows()
        )));
    }
    if a.data().iter().any(|&x| x < 0.0) {
        return Err(Error::invalid("attention weights must be nonnegative"));
    }
    let mut macs = MacCount::default();
    let mut z0 = a.matmul_counted(v, &mut macs)?;
    for i in 0..a.rows() {
        let s: f64 = a.row(i).iter().sum();
        if s <= 0.0 {
            return Err(Error::invalid(format!("attention row {i} has no positive weight")));
        }
        for x in z0.row_mut(i) {
            *x /= s;
        }
    }
    reweight(a, v, z0, cfg, &mut macs)
}

fn reweight(a: &Matrix, v: &Matrix, mut z: Matrix, cfg: &AttentionConfig, macs: &mut MacCount) -> Result<Matrix> {
    // ℓ2 weights are the constant 1/2, so every step reproduces the weighted
    // mean already held in `z`; iterating would only perturb the last bits.
    if cfg.penalty.kind() == PenaltyKind::L2 {
        return Ok(z);
    }
    for _ in 0..cfg.steps {
        let d = pairwise_distances_counted(&z, v, macs)?;
        let mut m = d;
        for i in 0..m.rows() {
            let a_row = a.row(i);
            for (x, &aij) in m.row_mut(i).iter_mut().zip(a_row) {
                *x = aij * cfg.penalty.irls_weight(*x, cfg.eps);
            }
        }
        let num = m.matmul_counted(v, macs)?;
        for i in 0..z.rows() {
            let s = m.row(i).iter().fold(0.0, |acc, x| acc + x);
            if s > 0.0 {
                for (zi, ni) in z.row_mut(i).iter_mut().zip(num.row(i)) {
                    *zi = ni / s;
                }
            }
        }
    }
    Ok(z)
}

/// Query, key and value projections for one head, each `d_model × d_head`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjection {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

/// Per-head outputs before the output projection, concatenated.
pub fn multi_head_concat(x: &Matrix, heads: &[HeadProjection], cfg: &AttentionConfig) -> Result<Matrix> {
    let h = heads.len();
    if h == 0 {
        return Err(Error::invalid("at least one head is required"));
    }
    let d_model = x.cols();
    if !d_model.is_multiple_of(h) {
        return Err(Error::invalid(format!(
            "model dimension {d_model} is not divisible by {h} heads"
        )));
    }
    let d_head = d_model / h;
    let outputs = heads
        .iter()
        .enumerate()
        .map(|(i, hp)| {
            for (name, w) in [("wq", &hp.wq), ("wk", &hp.wk), ("wv", &hp.wv)] {
                if w.shape() != (d_model, d_head) {
                    return Err(Error::dims(format!(
                        "head {i} {name} is {}x{}, expected {d_model}x{d_head}",
                        w.rows(),
                        w.cols()
                    )));
                }
            }
            pro_attention(&x.matmul(&hp.wq)?, &x.matmul(&hp.wk)?, &x.matmul(&hp.wv)?, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::hcat(&outputs)
}

/// Multi-head robust attention: heads run independently on their projections,
/// are concatenated, then mapped through `wo`.
pub fn multi_head_pro_attention(
    x: &Matrix,
    heads: &[HeadProjection],
    wo: &Matrix,
    cfg: &AttentionConfig,
) -> Result<Matrix> {
    let concat = multi_head_concat(x, heads, cfg)?;
    if wo.rows() != concat.cols() {
        return Err(Error::dims(format!(
            "output projection has {} rows, heads produce {} columns",
            wo.rows(),
            concat.cols()
        )));
    }
    concat.matmul(wo)
}
