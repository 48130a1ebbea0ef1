//! Analytic operation counts for four attention mechanisms, and measured
//! multiply-accumulate counts from the implemented kernels.
//!
//! Counting convention for the measured side: one MAC per fused
//! multiply-add in a matrix product and one per coordinate of a pairwise
//! distance. Softmax exponentials, weight evaluation and row normalization
//! are not counted. Under this convention vanilla attention costs `2N²D`
//! (scores plus aggregation) and robust attention costs
//! `2N²D + K·2N²D` (the same two products, then a distance matrix and a
//! reweighted product per step).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::{pro_attention_counted, vanilla_attention_counted, AttentionConfig};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::penalty::Penalty;
use crate::rng::NormalStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Vanilla,
    Pro,
    Kde,
    Rkde,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [Mechanism::Vanilla, Mechanism::Pro, Mechanism::Kde, Mechanism::Rkde];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Vanilla => "vanilla",
            Mechanism::Pro => "pro",
            Mechanism::Kde => "kde",
            Mechanism::Rkde => "rkde",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mechanism {s:?}")))
    }

    pub fn uses_steps(self) -> bool {
        matches!(self, Mechanism::Pro | Mechanism::Rkde)
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostQuery {
    pub mechanism: Mechanism,
    pub n: u64,
    pub d: u64,
    pub k: u64,
}

impl CostQuery {
    pub fn new(mechanism: Mechanism, n: u64, d: u64, k: u64) -> Result<Self> {
        if n == 0 || d == 0 || (k == 0 && mechanism.uses_steps()) {
            return Err(Error::invalid(format!(
                "dimensions must be positive (N={n}, D={d}, K={k})"
            )));
        }
        Ok(Self { mechanism, n, d, k })
    }
}

/// Basic-operation count:
/// vanilla and kde `2N²D`, pro `(1+2K)N²D`, rkde `(2+3K)N²D + 2KN³`.
pub fn op_count(q: &CostQuery) -> u64 {
    let CostQuery { n, d, k, .. } = *q;
    let nnd = n * n * d;
    match q.mechanism {
        Mechanism::Vanilla | Mechanism::Kde => 2 * nnd,
        Mechanism::Pro => (1 + 2 * k) * nnd,
        Mechanism::Rkde => (2 + 3 * k) * nnd + 2 * k * n * n * n,
    }
}

/// MACs counted while running vanilla and robust attention on one random
/// `N×D` instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MeasuredMacs {
    pub vanilla: u64,
    pub pro: u64,
}

impl MeasuredMacs {
    pub fn ratio(&self) -> f64 {
        self.pro as f64 / self.vanilla as f64
    }
}

pub fn measure_macs(n: usize, d: usize, k: usize, seed: u64) -> Result<MeasuredMacs> {
    if n == 0 || d == 0 {
        return Err(Error::invalid("dimensions must be positive"));
    }
    let mut rng = NormalStream::new(seed);
    let mut gauss = || Matrix::new(n, d, rng.fill(n * d));
    let (q, kmat, v) = (gauss()?, gauss()?, gauss()?);
    let (_, vanilla) = vanilla_attention_counted(&q, &kmat, &v, true)?;
    let cfg = AttentionConfig::new(Penalty::with_defaults(crate::penalty::PenaltyKind::Mcp), k);
    let (_, pro) = pro_attention_counted(&q, &kmat, &v, &cfg)?;
    Ok(MeasuredMacs {
        vanilla: vanilla.0,
        pro: pro.0,
    })
}

/// Counted robust MACs over counted vanilla MACs.
pub fn measured_ratio(n: usize, d: usize, k: usize, seed: u64) -> Result<f64> {
    measure_macs(n, d, k, seed).map(|m| m.ratio())
}

/// What the counter convention predicts: `(2 + 2K)N²D` over `2N²D`.
pub fn counter_model_ratio(k: usize) -> f64 {
    1.0 + k as f64
}

/// One row of the cost CSV.
#[derive(Debug, Clone, Serialize)]
pub struct CostRow {
    pub mechanism: Mechanism,
    #[serde(rename = "N")]
    pub n: u64,
    #[serde(rename = "D")]
    pub d: u64,
    #[serde(rename = "K")]
    pub k: u64,
    pub analytic_ops: u64,
    /// Only vanilla and pro have kernels to instrument.
    pub measured_macs: Option<u64>,
}

pub fn cost_row(q: &CostQuery, seed: u64) -> Result<CostRow> {
    let measured_macs = match q.mechanism {
        Mechanism::Vanilla | Mechanism::Pro => {
            let m = measure_macs(q.n as usize, q.d as usize, q.k as usize, seed)?;
            Some(if q.mechanism == Mechanism::Vanilla { m.vanilla } else { m.pro })
        }
        Mechanism::Kde | Mechanism::Rkde => None,
    };
    Ok(CostRow {
        mechanism: q.mechanism,
        n: q.n,
        d: q.d,
        k: q.k,
        analytic_ops: op_count(q),
        measured_macs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(m: Mechanism, n: u64, d: u64, k: u64) -> u64 {
        op_count(&CostQuery::new(m, n, d, k).unwrap())
    }

    #[test]
    fn formula_examples() {
        assert_eq!(q(Mechanism::Pro, 64, 8, 3), 229_376);
        assert_eq!(q(Mechanism::Vanilla, 1, 1, 1), 2);
        // (2+3)·16·2 + 2·64
        assert_eq!(q(Mechanism::Rkde, 4, 2, 1), 288);
        assert_eq!(q(Mechanism::Kde, 3, 5, 1), 90);
    }

    #[test]
    fn steps_ignored_for_vanilla() {
        assert_eq!(q(Mechanism::Vanilla, 7, 3, 1), q(Mechanism::Vanilla, 7, 3, 9));
        assert!(CostQuery::new(Mechanism::Vanilla, 4, 4, 0).is_ok());
        assert!(CostQuery::new(Mechanism::Pro, 4, 4, 0).is_err());
        assert!(CostQuery::new(Mechanism::Kde, 0, 4, 1).is_err());
    }

    #[test]
    fn zero_steps_measures_vanilla_cost() {
        let m = measure_macs(16, 4, 0, 1).unwrap();
        assert_eq!(m.pro, m.vanilla);
        assert_eq!(measured_ratio(16, 4, 0, 1).unwrap(), counter_model_ratio(0));
    }

    #[test]
    fn measured_matches_counter_model() {
        for k in 0..5 {
            let m = measure_macs(10, 3, k, 2).unwrap();
            assert_eq!(m.vanilla, 2 * 100 * 3);
            assert_eq!(m.pro, (2 + 2 * k as u64) * 100 * 3);
        }
    }

    #[test]
    fn mechanism_names() {
        for m in Mechanism::ALL {
            assert_eq!(Mechanism::parse(m.name()).unwrap(), m);
        }
        assert!(Mechanism::parse("flash").is_err());
    }
}
