//! Folded-concave and L1 penalty functions used on both layers of the
//! estimator: P_1 (tuning constant `v`) penalizes the Lagrange
//! multipliers, P_2 (tuning constant `omega`) penalizes the regression
//! coefficients.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RpelError};

/// Penalty family. All three are coordinate-separable; SCAD and MCP are
/// folded-concave with a second shape parameter `a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenaltyKind {
    Scad,
    L1,
    Mcp,
}

/// One penalty: family, strength `eta >= 0`, and concavity parameter `a`.
///
/// For SCAD the default is `a = 3.7`; for MCP a common default is `a = 3.0`.
/// `a` is ignored by L1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub kind: PenaltyKind,
    pub eta: f64,
    pub a: f64,
}

impl PenaltyConfig {
    pub fn scad(eta: f64) -> Result<Self> {
        Self::new(PenaltyKind::Scad, eta, 3.7)
    }

    pub fn l1(eta: f64) -> Result<Self> {
        Self::new(PenaltyKind::L1, eta, f64::INFINITY)
    }

    pub fn mcp(eta: f64) -> Result<Self> {
        Self::new(PenaltyKind::Mcp, eta, 3.0)
    }

    pub fn new(kind: PenaltyKind, eta: f64, a: f64) -> Result<Self> {
        if !(eta.is_finite() && eta >= 0.0) {
            return Err(RpelError::InvalidData(format!(
                "penalty strength must be a nonnegative real, got {eta}"
            )));
        }
        let a_ok = match kind {
            PenaltyKind::Scad => a.is_finite() && a > 2.0,
            PenaltyKind::Mcp => a.is_finite() && a > 1.0,
            PenaltyKind::L1 => true,
        };
        if !a_ok {
            return Err(RpelError::InvalidData(format!(
                "shape parameter a = {a} invalid for {kind:?} (SCAD needs a > 2, MCP a > 1)"
            )));
        }
        Ok(Self { kind, eta, a })
    }

    /// Penalty value at `theta >= 0` (callers pass |coefficient|).
    pub fn value(&self, theta: f64) -> f64 {
        debug_assert!(theta >= 0.0);
        let eta = self.eta;
        let a = self.a;
        match self.kind {
            PenaltyKind::L1 => eta * theta,
            PenaltyKind::Scad => {
                if theta <= eta {
                    eta * theta
                } else if theta <= a * eta {
                    (2.0 * a * eta * theta - theta * theta - eta * eta) / (2.0 * (a - 1.0))
                } else {
                    eta * eta * (a + 1.0) / 2.0
                }
            }
            PenaltyKind::Mcp => {
                if theta <= a * eta {
                    eta * theta - theta * theta / (2.0 * a)
                } else {
                    a * eta * eta / 2.0
                }
            }
        }
    }

    /// First derivative dP/dtheta at `theta >= 0`, taking the right-hand
    /// limit at the knots so that `d1(0)` is the threshold `eta`.
    pub fn d1(&self, theta: f64) -> f64 {
        debug_assert!(theta >= 0.0);
        let eta = self.eta;
        let a = self.a;
        match self.kind {
            PenaltyKind::L1 => eta,
            PenaltyKind::Scad => {
                if theta <= eta {
                    eta
                } else if theta < a * eta {
                    (a * eta - theta) / (a - 1.0)
                } else {
                    0.0
                }
            }
            PenaltyKind::Mcp => {
                if theta < a * eta {
                    eta - theta / a
                } else {
                    0.0
                }
            }
        }
    }

    /// Second derivative, right-hand limit at the knots. Zero wherever the
    /// penalty is linear or flat.
    pub fn d2(&self, theta: f64) -> f64 {
        debug_assert!(theta >= 0.0);
        let eta = self.eta;
        let a = self.a;
        match self.kind {
            PenaltyKind::L1 => 0.0,
            PenaltyKind::Scad => {
                if theta < eta {
                    0.0
                } else if theta < a * eta {
                    -1.0 / (a - 1.0)
                } else {
                    0.0
                }
            }
            PenaltyKind::Mcp => {
                if theta < a * eta {
                    -1.0 / a
                } else {
                    0.0
                }
            }
        }
    }
}
