//! A post-norm transformer encoder block whose attention can be swapped
//! between the vanilla weighted mean and the robust estimator without
//! touching any parameter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_pro_attention, vanilla_attention, AttentionConfig, HeadProjection};
use crate::error::{Error, Result};
use crate::io::{read_matrix, read_vector, write_atomic, write_matrix};
use crate::matrix::Matrix;
use crate::rng::NormalStream;

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Contents of `block.json` in a parameter directory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockShape {
    pub h: usize,
    pub d_model: usize,
    pub d_ff: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_ln_eps() -> f64 {
    DEFAULT_LN_EPS
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub shape: BlockShape,
    pub heads: Vec<HeadProjection>,
    pub wo: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
}

impl BlockParams {
    pub fn validate(&self) -> Result<()> {
        let BlockShape { h, d_model, d_ff, ln_eps } = self.shape;
        if h == 0 || d_model == 0 || d_ff == 0 {
            return Err(Error::invalid("block dimensions must be positive"));
        }
        if d_model % h != 0 {
            return Err(Error::invalid(format!("d_model {d_model} not divisible by {h} heads")));
        }
        if !(ln_eps > 0.0) {
            return Err(Error::invalid(format!("ln_eps must be positive, got {ln_eps}")));
        }
        if self.heads.len() != h {
            return Err(Error::dims(format!("{} head projections for h = {h}", self.heads.len())));
        }
        let d_head = d_model / h;
        for (i, hp) in self.heads.iter().enumerate() {
            for (name, w) in [("wq", &hp.wq), ("wk", &hp.wk), ("wv", &hp.wv)] {
                expect_shape(&format!("{name}_h{i}"), w, (d_model, d_head))?;
            }
        }
        expect_shape("wo", &self.wo, (d_model, d_model))?;
        expect_shape("w1", &self.w1, (d_model, d_ff))?;
        expect_shape("w2", &self.w2, (d_ff, d_model))?;
        for (name, v, n) in [
            ("b1", &self.b1, d_ff),
            ("b2", &self.b2, d_model),
            ("ln1_g", &self.ln1_g, d_model),
            ("ln1_b", &self.ln1_b, d_model),
            ("ln2_g", &self.ln2_g, d_model),
            ("ln2_b", &self.ln2_b, d_model),
        ] {
            if v.len() != n {
                return Err(Error::dims(format!("{name} has length {}, expected {n}", v.len())));
            }
        }
        Ok(())
    }

    /// Gaussian weights scaled by 1/√fan_in, unit norms, zero biases.
    pub fn random(seed: u64, h: usize, d_model: usize, d_ff: usize) -> Result<Self> {
        if h == 0 || !d_model.is_multiple_of(h) {
            return Err(Error::invalid(format!("d_model {d_model} not divisible by {h} heads")));
        }
        let mut rng = NormalStream::new(seed);
        let d_head = d_model / h;
        let mut gauss = |rows: usize, cols: usize| {
            let s = 1.0 / (rows as f64).sqrt();
            Matrix::new(rows, cols, rng.fill(rows * cols).into_iter().map(|x| x * s).collect())
        };
        let heads = (0..h)
            .map(|_| {
                Ok(HeadProjection {
                    wq: gauss(d_model, d_head)?,
                    wk: gauss(d_model, d_head)?,
                    wv: gauss(d_model, d_head)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = Self {
            shape: BlockShape {
                h,
                d_model,
                d_ff,
                ln_eps: DEFAULT_LN_EPS,
            },
            heads,
            wo: gauss(d_model, d_model)?,
            w1: gauss(d_model, d_ff)?,
            b1: vec![0.0; d_ff],
            w2: gauss(d_ff, d_model)?,
            b2: vec![0.0; d_model],
            ln1_g: vec![1.0; d_model],
            ln1_b: vec![0.0; d_model],
            ln2_g: vec![1.0; d_model],
            ln2_b: vec![0.0; d_model],
        };
        params.validate()?;
        Ok(params)
    }

    /// Loads `block.json` plus `wq_h{i}.mat`, `wk_h{i}.mat`, `wv_h{i}.mat`,
    /// `wo.mat`, `w1.mat`, `b1.mat`, `w2.mat`, `b2.mat`, `ln1_g.mat`,
    /// `ln1_b.mat`, `ln2_g.mat`, `ln2_b.mat`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let json_path = dir.join("block.json");
        let text = std::fs::read_to_string(&json_path).map_err(|source| Error::Io {
            path: json_path.clone(),
            source,
        })?;
        let shape: BlockShape = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: json_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let heads = (0..shape.h)
            .map(|i| {
                Ok(HeadProjection {
                    wq: read_matrix(dir.join(format!("wq_h{i}.mat")))?,
                    wk: read_matrix(dir.join(format!("wk_h{i}.mat")))?,
                    wv: read_matrix(dir.join(format!("wv_h{i}.mat")))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = Self {
            shape,
            heads,
            wo: read_matrix(dir.join("wo.mat"))?,
            w1: read_matrix(dir.join("w1.mat"))?,
            b1: read_vector(dir.join("b1.mat"))?,
            w2: read_matrix(dir.join("w2.mat"))?,
            b2: read_vector(dir.join("b2.mat"))?,
            ln1_g: read_vector(dir.join("ln1_g.mat"))?,
            ln1_b: read_vector(dir.join("ln1_b.mat"))?,
            ln2_g: read_vector(dir.join("ln2_g.mat"))?,
            ln2_b: read_vector(dir.join("ln2_b.mat"))?,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let json = serde_json::to_string_pretty(&self.shape).expect("shape serializes");
        write_atomic(dir.join("block.json"), json.as_bytes())?;
        for (i, hp) in self.heads.iter().enumerate() {
            write_matrix(dir.join(format!("wq_h{i}.mat")), &hp.wq)?;
            write_matrix(dir.join(format!("wk_h{i}.mat")), &hp.wk)?;
            write_matrix(dir.join(format!("wv_h{i}.mat")), &hp.wv)?;
        }
        write_matrix(dir.join("wo.mat"), &self.wo)?;
        write_matrix(dir.join("w1.mat"), &self.w1)?;
        write_matrix(dir.join("w2.mat"), &self.w2)?;
        for (name, v) in [
            ("b1", &self.b1),
            ("b2", &self.b2),
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
        ] {
            write_matrix(dir.join(format!("{name}.mat")), &row_vector(v)?)?;
        }
        Ok(())
    }
}

fn expect_shape(name: &str, m: &Matrix, shape: (usize, usize)) -> Result<()> {
    if m.shape() != shape {
        return Err(Error::dims(format!(
            "{name} is {}x{}, expected {}x{}",
            m.rows(),
            m.cols(),
            shape.0,
            shape.1
        )));
    }
    Ok(())
}

fn row_vector(v: &[f64]) -> Result<Matrix> {
    Matrix::new(1, v.len(), v.to_vec())
}

/// Per-row standardization (population variance) followed by `gain·x + bias`.
pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64], ln_eps: f64) -> Result<Matrix> {
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(Error::dims(format!(
            "layer norm over {} columns with gain {} and bias {}",
            x.cols(),
            gain.len(),
            bias.len()
        )));
    }
    if !(ln_eps > 0.0) {
        return Err(Error::invalid(format!("ln_eps must be positive, got {ln_eps}")));
    }
    let n = x.cols() as f64;
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + ln_eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gain).zip(bias) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

fn add_bias(m: &mut Matrix, bias: &[f64]) {
    for r in 0..m.rows() {
        for (x, b) in m.row_mut(r).iter_mut().zip(bias) {
            *x += b;
        }
    }
}

fn feed_forward(x: &Matrix, p: &BlockParams) -> Result<Matrix> {
    let mut hidden = x.matmul(&p.w1)?;
    add_bias(&mut hidden, &p.b1);
    let hidden = hidden.map(|v| v.max(0.0));
    let mut out = hidden.matmul(&p.w2)?;
    add_bias(&mut out, &p.b2);
    Ok(out)
}

fn finish_block(x: &Matrix, attn: &Matrix, p: &BlockParams) -> Result<Matrix> {
    let eps = p.shape.ln_eps;
    let h1 = layer_norm(&x.add(attn)?, &p.ln1_g, &p.ln1_b, eps)?;
    let ff = feed_forward(&h1, p)?;
    layer_norm(&h1.add(&ff)?, &p.ln2_g, &p.ln2_b, eps)
}

fn check_input(x: &Matrix, p: &BlockParams) -> Result<()> {
    p.validate()?;
    if x.cols() != p.shape.d_model {
        return Err(Error::dims(format!(
            "input has {} columns, block expects d_model = {}",
            x.cols(),
            p.shape.d_model
        )));
    }
    Ok(())
}

/// `LN(h + FFN(h))` with `h = LN(X + MHA(X))`, MHA being robust attention.
pub fn encoder_block(x: &Matrix, p: &BlockParams, cfg: &AttentionConfig) -> Result<Matrix> {
    check_input(x, p)?;
    let attn = multi_head_pro_attention(x, &p.heads, &p.wo, cfg)?;
    finish_block(x, &attn, p)
}

/// The same block with plain softmax attention in every head.
pub fn vanilla_encoder_block(x: &Matrix, p: &BlockParams, scaled: bool) -> Result<Matrix> {
    check_input(x, p)?;
    let heads = p
        .heads
        .iter()
        .map(|hp| vanilla_attention(&x.matmul(&hp.wq)?, &x.matmul(&hp.wk)?, &x.matmul(&hp.wv)?, scaled))
        .collect::<Result<Vec<_>>>()?;
    let attn = Matrix::hcat(&heads)?.matmul(&p.wo)?;
    finish_block(x, &attn, p)
}
