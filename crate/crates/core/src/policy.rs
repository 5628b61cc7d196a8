//! Mapping a matrix-wide tolerance `ε` to per-block budgets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Block-wise relative error: `‖E_i‖_F ≤ ε‖B_i‖_F`.
    Brem,
    /// Matrix-wise relative error: `‖E_i‖_F ≤ ε·√(m_i n_i)/N·‖B‖_F`.
    Mrem,
    /// Element-wise: `‖E_i‖_max ≤ ε·‖B‖₁/N`.
    MremMax,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Brem, Method::Mrem, Method::MremMax];

    pub fn name(self) -> &'static str {
        match self {
            Method::Brem => "BREM",
            Method::Mrem => "MREM",
            Method::MremMax => "MREMmax",
        }
    }

    pub fn needs_matrix_norm(self) -> bool {
        !matches!(self, Method::Brem)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "brem" => Ok(Method::Brem),
            "mrem" => Ok(Method::Mrem),
            "mremmax" | "mrem-max" | "mrem_max" => Ok(Method::MremMax),
            other => Err(Error::invalid(
                "method",
                format!("unknown method `{other}` (expected BREM, MREM or MREMmax)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BudgetKind {
    RelativeFro,
    AbsoluteFro,
    AbsoluteMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockBudget {
    pub kind: BudgetKind,
    pub value: f64,
}

/// Requested tolerance plus the rule for distributing it over blocks.
///
/// `matrix_norm` is `‖B‖_F` for MREM and the induced 1-norm (maximum absolute
/// column sum) for MREMmax. An estimated Frobenius norm should already carry
/// any safety reduction; the policy uses it as given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TolerancePolicy {
    method: Method,
    epsilon: f64,
    matrix_norm: Option<f64>,
    n: usize,
}

impl TolerancePolicy {
    pub fn new(method: Method, epsilon: f64, matrix_norm: Option<f64>, n: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid("epsilon", format!("must be positive, got {epsilon}")));
        }
        if n == 0 {
            return Err(Error::invalid("n", "matrix dimension must be positive"));
        }
        let matrix_norm = if method.needs_matrix_norm() {
            match matrix_norm {
                Some(v) if v > 0.0 && v.is_finite() => Some(v),
                _ => return Err(Error::MissingMatrixNorm(method.name())),
            }
        } else {
            None
        };
        Ok(TolerancePolicy {
            method,
            epsilon,
            matrix_norm,
            n,
        })
    }

    pub fn brem(epsilon: f64, n: usize) -> Result<Self> {
        Self::new(Method::Brem, epsilon, None, n)
    }

    pub fn mrem(epsilon: f64, n: usize, fro_norm: f64) -> Result<Self> {
        Self::new(Method::Mrem, epsilon, Some(fro_norm), n)
    }

    pub fn mrem_max(epsilon: f64, n: usize, one_norm: f64) -> Result<Self> {
        Self::new(Method::MremMax, epsilon, Some(one_norm), n)
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn matrix_norm(&self) -> Option<f64> {
        self.matrix_norm
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// `ε̄ = ε‖B‖₁/N`, the element-wise bound targeted by MREMmax.
    pub fn max_norm_tolerance(&self) -> Option<f64> {
        match self.method {
            Method::MremMax => self.matrix_norm.map(|b| self.epsilon * b / self.n as f64),
            _ => None,
        }
    }

    pub fn block_budget(&self, m: usize, n: usize) -> Result<BlockBudget> {
        if m == 0 || n == 0 {
            return Err(Error::invalid("block", format!("empty {m}x{n} block")));
        }
        let norm = || self.matrix_norm.ok_or(Error::MissingMatrixNorm(self.method.name()));
        let big_n = self.n as f64;
        Ok(match self.method {
            Method::Brem => BlockBudget {
                kind: BudgetKind::RelativeFro,
                value: self.epsilon,
            },
            Method::Mrem => BlockBudget {
                kind: BudgetKind::AbsoluteFro,
                value: self.epsilon * ((m as f64) * (n as f64)).sqrt() / big_n * norm()?,
            },
            Method::MremMax => BlockBudget {
                kind: BudgetKind::AbsoluteMax,
                value: self.epsilon * norm()? / big_n,
            },
        })
    }
}

/// Frobenius norm squared per element, `‖·‖_F² / (mn)`.
pub fn fnpe(fro_norm_sq: f64, m: usize, n: usize) -> f64 {
    fro_norm_sq / ((m as f64) * (n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalBoundReport {
    /// `(Σ ‖E_i‖_F²)^½`.
    pub error_fro: f64,
    /// `ε‖B‖_F`.
    pub allowed: f64,
    /// `error_fro / allowed`.
    pub ratio: f64,
    pub holds: bool,
}

/// Checks `‖E‖_F ≤ ε‖B‖_F` from per-block `(m, n, ‖E_i‖_F)` reports.
pub fn verify_global_bound(
    block_errors: &[(usize, usize, f64)],
    policy: &TolerancePolicy,
    true_fro_norm: f64,
) -> Result<GlobalBoundReport> {
    let covered: u128 = block_errors.iter().map(|&(m, n, _)| (m as u128) * (n as u128)).sum();
    let expected = (policy.dim() as u128).pow(2);
    if covered != expected {
        return Err(Error::TilingMismatch { covered, expected });
    }
    let error_fro = block_errors.iter().map(|&(_, _, e)| e * e).sum::<f64>().sqrt();
    let allowed = policy.epsilon() * true_fro_norm;
    let ratio = if allowed > 0.0 {
        error_fro / allowed
    } else if error_fro == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(GlobalBoundReport {
        error_fro,
        allowed,
        ratio,
        holds: error_fro <= allowed,
    })
}
