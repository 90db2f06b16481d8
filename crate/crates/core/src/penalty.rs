//! Folded-concave penalties (MCP, SCAD) and the Lasso, with the thresholding
//! primitive used by the proximal solver.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WitError};

/// Default MCP concavity parameter.
pub const DEFAULT_RHO: f64 = 2.0;
/// Default SCAD shape parameter.
pub const DEFAULT_SCAD_A: f64 = 3.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    Mcp,
    Scad,
    Lasso,
}

impl PenaltyKind {
    pub fn default_shape(self) -> f64 {
        match self {
            PenaltyKind::Mcp => DEFAULT_RHO,
            PenaltyKind::Scad => DEFAULT_SCAD_A,
            PenaltyKind::Lasso => 1.0,
        }
    }
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PenaltyKind::Mcp => "mcp",
            PenaltyKind::Scad => "scad",
            PenaltyKind::Lasso => "lasso",
        })
    }
}

impl FromStr for PenaltyKind {
    type Err = WitError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcp" => Ok(PenaltyKind::Mcp),
            "scad" => Ok(PenaltyKind::Scad),
            "lasso" => Ok(PenaltyKind::Lasso),
            other => Err(WitError::Spec(format!("unknown penalty '{other}'"))),
        }
    }
}

/// A penalty family with its level `lambda` and shape (`rho` for MCP, `a` for SCAD).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    kind: PenaltyKind,
    lambda: f64,
    shape: f64,
}

impl PenaltySpec {
    pub fn new(kind: PenaltyKind, lambda: f64, shape: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(WitError::Spec(format!(
                "penalty level must be >= 0, got {lambda}"
            )));
        }
        match kind {
            PenaltyKind::Mcp if !(shape > 1.0) => {
                return Err(WitError::Spec(format!("MCP requires rho > 1, got {shape}")))
            }
            PenaltyKind::Scad if !(shape > 2.0) => {
                return Err(WitError::Spec(format!("SCAD requires a > 2, got {shape}")))
            }
            _ => {}
        }
        Ok(PenaltySpec {
            kind,
            lambda,
            shape,
        })
    }

    pub fn mcp(lambda: f64, rho: f64) -> Result<Self> {
        Self::new(PenaltyKind::Mcp, lambda, rho)
    }

    pub fn scad(lambda: f64, a: f64) -> Result<Self> {
        Self::new(PenaltyKind::Scad, lambda, a)
    }

    pub fn lasso(lambda: f64) -> Result<Self> {
        Self::new(PenaltyKind::Lasso, lambda, 1.0)
    }

    /// Same family and shape at a different level.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(self.kind, lambda, self.shape)
    }

    pub fn kind(&self) -> PenaltyKind {
        self.kind
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    /// Penalty value `p(t)`; even in `t`.
    pub fn value(&self, t: f64) -> f64 {
        let t = t.abs();
        let lam = self.lambda;
        match self.kind {
            PenaltyKind::Lasso => lam * t,
            PenaltyKind::Mcp => {
                let rho = self.shape;
                if t < lam * rho {
                    lam * t - t * t / (2.0 * rho)
                } else {
                    rho * lam * lam / 2.0
                }
            }
            PenaltyKind::Scad => {
                let a = self.shape;
                if t <= lam {
                    lam * t
                } else if t < a * lam {
                    (2.0 * a * lam * t - t * t - lam * lam) / (2.0 * (a - 1.0))
                } else {
                    lam * lam * (a + 1.0) / 2.0
                }
            }
        }
    }

    /// Derivative `p'(t)` for `t >= 0`; at `t = 0` the right limit `lambda`.
    pub fn derivative(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(WitError::Domain(format!(
                "penalty derivative needs t >= 0, got {t}"
            )));
        }
        Ok(self.weight(t))
    }

    /// `p'(|t|)` without the domain check; the local linear approximation weight.
    pub(crate) fn weight(&self, t: f64) -> f64 {
        let t = t.abs();
        let lam = self.lambda;
        match self.kind {
            PenaltyKind::Lasso => lam,
            PenaltyKind::Mcp => (lam - t / self.shape).max(0.0),
            PenaltyKind::Scad => {
                if t <= lam {
                    lam
                } else {
                    (self.shape * lam - t).max(0.0) / (self.shape - 1.0)
                }
            }
        }
    }
}

/// Componentwise soft threshold `sgn(x_j) (|x_j| - a_j)_+`.
pub fn soft_threshold(x: &DVector<f64>, a: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != a.len() {
        return Err(WitError::Dimension(format!(
            "soft threshold: {} values, {} thresholds",
            x.len(),
            a.len()
        )));
    }
    Ok(x.zip_map(a, shrink))
}

#[inline]
pub(crate) fn shrink(x: f64, a: f64) -> f64 {
    let m = x.abs() - a;
    if m > 0.0 {
        m.copysign(x)
    } else {
        0.0
    }
}
