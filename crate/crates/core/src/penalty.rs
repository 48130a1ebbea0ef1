//! Residual penalties ρ, their right derivatives, and the induced IRLS weights.
//!
//! Each penalty is applied to a residual norm `z = ‖v − z‖ ≥ 0`. Writing
//! `φ(s) = ρ(√s)`, every penalty here has a concave `φ`, so the tangent of `φ`
//! at the current squared residual is a global quadratic majorizer with slope
//! `w(r) = ρ′(r) / (2r)`.
//!
//! | kind       | ρ(z)                                                        |
//! |------------|-------------------------------------------------------------|
//! | `l2`       | z²/2                                                        |
//! | `l1`       | z                                                           |
//! | `huber`    | z²/2 for z < δ, δ(z − δ/2) otherwise                        |
//! | `mcp`      | z − z²/(2γ) for z < γ, γ/2 otherwise                        |
//! | `huber_mcp`| z²/2 below δ, δ(z − δ/2 − (z−δ)²/(2(γ−δ))) up to γ, δγ/2 after |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DELTA: f64 = 1.0;
pub const DEFAULT_GAMMA: f64 = 4.0;
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    L2,
    L1,
    Huber,
    Mcp,
    HuberMcp,
}

impl PenaltyKind {
    pub const ALL: [PenaltyKind; 5] = [
        PenaltyKind::L2,
        PenaltyKind::L1,
        PenaltyKind::Huber,
        PenaltyKind::Mcp,
        PenaltyKind::HuberMcp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PenaltyKind::L2 => "l2",
            PenaltyKind::L1 => "l1",
            PenaltyKind::Huber => "huber",
            PenaltyKind::Mcp => "mcp",
            PenaltyKind::HuberMcp => "huber_mcp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        PenaltyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown penalty kind {s:?}")))
    }
}

/// A validated penalty. Thresholds that a kind does not use are still stored
/// (at their defaults) but never read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PenaltySpec", into = "PenaltySpec")]
pub struct Penalty {
    kind: PenaltyKind,
    delta: f64,
    gamma: f64,
}

/// Wire form: `{"kind":"mcp","gamma":4.0}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl TryFrom<PenaltySpec> for Penalty {
    type Error = Error;

    fn try_from(spec: PenaltySpec) -> Result<Self> {
        Penalty::new(
            spec.kind,
            spec.delta.unwrap_or(DEFAULT_DELTA),
            spec.gamma.unwrap_or(DEFAULT_GAMMA),
        )
    }
}

impl From<Penalty> for PenaltySpec {
    fn from(p: Penalty) -> Self {
        let uses_delta = matches!(p.kind, PenaltyKind::Huber | PenaltyKind::HuberMcp);
        let uses_gamma = matches!(p.kind, PenaltyKind::Mcp | PenaltyKind::HuberMcp);
        PenaltySpec {
            kind: p.kind,
            delta: uses_delta.then_some(p.delta),
            gamma: uses_gamma.then_some(p.gamma),
        }
    }
}

impl Default for Penalty {
    fn default() -> Self {
        Penalty::l2()
    }
}

impl std::fmt::Display for Penalty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            PenaltyKind::L2 | PenaltyKind::L1 => write!(f, "{}", self.kind.name()),
            PenaltyKind::Huber => write!(f, "huber(delta={})", self.delta),
            PenaltyKind::Mcp => write!(f, "mcp(gamma={})", self.gamma),
            PenaltyKind::HuberMcp => {
                write!(f, "huber_mcp(delta={},gamma={})", self.delta, self.gamma)
            }
        }
    }
}

impl Penalty {
    pub fn new(kind: PenaltyKind, delta: f64, gamma: f64) -> Result<Self> {
        let needs_delta = matches!(kind, PenaltyKind::Huber | PenaltyKind::HuberMcp);
        let needs_gamma = matches!(kind, PenaltyKind::Mcp | PenaltyKind::HuberMcp);
        if needs_delta && !(delta.is_finite() && delta > 0.0) {
            return Err(Error::invalid(format!("delta must be positive, got {delta}")));
        }
        if needs_gamma && !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
        }
        if kind == PenaltyKind::HuberMcp && delta >= gamma {
            return Err(Error::invalid(format!(
                "huber_mcp needs delta < gamma, got delta={delta} gamma={gamma}"
            )));
        }
        Ok(Self { kind, delta, gamma })
    }

    pub fn l2() -> Self {
        Self {
            kind: PenaltyKind::L2,
            delta: DEFAULT_DELTA,
            gamma: DEFAULT_GAMMA,
        }
    }

    pub fn l1() -> Self {
        Self {
            kind: PenaltyKind::L1,
            ..Self::l2()
        }
    }

    pub fn huber(delta: f64) -> Result<Self> {
        Self::new(PenaltyKind::Huber, delta, DEFAULT_GAMMA)
    }

    pub fn mcp(gamma: f64) -> Result<Self> {
        Self::new(PenaltyKind::Mcp, DEFAULT_DELTA, gamma)
    }

    pub fn huber_mcp(delta: f64, gamma: f64) -> Result<Self> {
        Self::new(PenaltyKind::HuberMcp, delta, gamma)
    }

    /// The kind with default thresholds (δ = 1, γ = 4).
    pub fn with_defaults(kind: PenaltyKind) -> Self {
        Self::new(kind, DEFAULT_DELTA, DEFAULT_GAMMA).expect("defaults are valid")
    }

    pub fn kind(&self) -> PenaltyKind {
        self.kind
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Residual values where the penalty changes branch.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self.kind {
            PenaltyKind::L2 | PenaltyKind::L1 => vec![],
            PenaltyKind::Huber => vec![self.delta],
            PenaltyKind::Mcp => vec![self.gamma],
            PenaltyKind::HuberMcp => vec![self.delta, self.gamma],
        }
    }

    pub fn rho(&self, z: f64) -> Result<f64> {
        check_residual(z)?;
        Ok(self.rho_unchecked(z))
    }

    pub fn rho_prime(&self, z: f64) -> Result<f64> {
        check_residual(z)?;
        Ok(self.rho_prime_unchecked(z))
    }

    pub(crate) fn rho_unchecked(&self, z: f64) -> f64 {
        let (d, g) = (self.delta, self.gamma);
        match self.kind {
            PenaltyKind::L2 => 0.5 * z * z,
            PenaltyKind::L1 => z,
            PenaltyKind::Huber => {
                if z < d {
                    0.5 * z * z
                } else {
                    d * (z - 0.5 * d)
                }
            }
            PenaltyKind::Mcp => {
                if z < g {
                    z - z * z / (2.0 * g)
                } else {
                    0.5 * g
                }
            }
            PenaltyKind::HuberMcp => {
                if z < d {
                    0.5 * z * z
                } else if z < g {
                    let excess = z - d;
                    d * (z - 0.5 * d - excess * excess / (2.0 * (g - d)))
                } else {
                    0.5 * d * g
                }
            }
        }
    }

    /// Right derivative. Huber-MCP is differentiable at δ, so the `z ≤ δ`
    /// branch returns δ there exactly.
    pub(crate) fn rho_prime_unchecked(&self, z: f64) -> f64 {
        let (d, g) = (self.delta, self.gamma);
        match self.kind {
            PenaltyKind::L2 => z,
            PenaltyKind::L1 => 1.0,
            PenaltyKind::Huber => z.min(d),
            PenaltyKind::Mcp => (1.0 - z / g).max(0.0),
            PenaltyKind::HuberMcp => {
                if z <= d {
                    z
                } else if z < g {
                    d * (g - z) / (g - d)
                } else {
                    0.0
                }
            }
        }
    }

    /// IRLS weight `ρ′(r̃)/(2r̃)` with `r̃ = max(r, eps)`.
    ///
    /// Exact values fall out of the quotient: `r̃/(2r̃)` is exactly 1/2 inside
    /// the quadratic zones and `0/(2r̃)` is exactly zero past γ.
    pub fn irls_weight(&self, r: f64, eps: f64) -> f64 {
        debug_assert!(eps > 0.0, "eps must be positive");
        let r = r.max(eps);
        self.rho_prime_unchecked(r) / (2.0 * r)
    }
}

fn check_residual(z: f64) -> Result<()> {
    if z >= 0.0 && z.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("residual must be a finite nonnegative number, got {z}")))
    }
}
