//! Estimating `‖B‖_F` and `‖B‖₁` of an implicit matrix.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmatrix::HMatrix;
use crate::oracle::EntryOracle;

/// Stop once the jackknife standard deviation is at most this fraction of `μ`.
pub const DEFAULT_REL_JSD_TOL: f64 = 1.0 / 50.0;
pub const DEFAULT_MIN_COLS: usize = 8;

/// Column-sampling estimate of `‖B‖_F²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    /// Mean of the samples `X_i = N·‖B e_i‖²`, estimating `‖B‖_F²`.
    pub mu: f64,
    /// Delete-1 jackknife standard deviation of `mu`.
    pub jsd: f64,
    pub n_samples: usize,
    /// `√max(μ − 2·JSD, 0)`, the conservative value handed to MREM.
    pub safe_fro_norm: f64,
    /// Whether the JSD target was met (sampling every column also counts).
    pub converged: bool,
}

impl NormEstimate {
    /// `population` is the number of columns the samples were drawn from
    /// without replacement; the spread carries the finite-population factor
    /// `√(1 − k/N)`, so sampling every column gives `jsd = 0`.
    fn from_samples(samples: &[f64], population: usize, converged: bool) -> Self {
        let (mu, jsd) = mean_and_jsd(samples);
        let jsd = jsd * finite_population_factor(samples.len(), population);
        NormEstimate {
            mu,
            jsd,
            n_samples: samples.len(),
            safe_fro_norm: (mu - 2.0 * jsd).max(0.0).sqrt(),
            converged,
        }
    }

    pub fn fro_norm(&self) -> f64 {
        self.mu.sqrt()
    }

    /// `JSD / μ`; zero for a zero matrix.
    pub fn rel_jsd(&self) -> f64 {
        if self.mu > 0.0 {
            self.jsd / self.mu
        } else {
            0.0
        }
    }

    /// Errors out unless the estimate converged.
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NormNotConverged {
                cols: self.n_samples,
                rel_jsd: self.rel_jsd(),
            })
        }
    }
}

fn finite_population_factor(k: usize, n: usize) -> f64 {
    (1.0 - k as f64 / n as f64).max(0.0).sqrt()
}

/// Sample mean and delete-1 jackknife standard deviation of the mean,
/// `(Σ (X_i − μ)² / (n(n − 1)))^½`.
pub fn mean_and_jsd(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mu = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mu, 0.0);
    }
    let ss: f64 = samples.iter().map(|x| (x - mu).powi(2)).sum();
    (mu, (ss / (n as f64 * (n - 1) as f64)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub rel_jsd_tol: f64,
    pub seed: u64,
    pub min_cols: usize,
    /// Defaults to every column.
    pub max_cols: Option<usize>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            rel_jsd_tol: DEFAULT_REL_JSD_TOL,
            seed: 0,
            min_cols: DEFAULT_MIN_COLS,
            max_cols: None,
        }
    }
}

/// A fixed random order of the columns `0..n`.
pub(crate) fn column_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Samples columns without replacement, doubling the sample until
/// `JSD ≤ rel_jsd_tol·μ` or `max_cols` columns have been read.
pub fn estimate_fro_stochastic<O: EntryOracle + ?Sized>(oracle: &O, cfg: &SamplingConfig) -> Result<NormEstimate> {
    let n = oracle.dim();
    if n == 0 {
        return Err(Error::invalid("n", "matrix dimension must be positive"));
    }
    if !(cfg.rel_jsd_tol > 0.0) {
        return Err(Error::invalid("rel_jsd_tol", "must be positive"));
    }
    if cfg.min_cols < 2 {
        return Err(Error::invalid(
            "min_cols",
            "at least two columns are needed for a jackknife",
        ));
    }
    let max_cols = cfg.max_cols.unwrap_or(n).clamp(1, n);
    let order = column_order(n, cfg.seed);
    let scale = n as f64;
    let mut samples: Vec<f64> = Vec::new();
    let mut target = cfg.min_cols.min(max_cols);
    loop {
        let fresh: Vec<f64> = order[samples.len()..target]
            .par_iter()
            .map_init(
                || vec![0.0; n],
                |buf, &j| {
                    oracle.column_into(j, buf);
                    scale * buf.iter().map(|x| x * x).sum::<f64>()
                },
            )
            .collect();
        samples.extend(fresh);
        let est = NormEstimate::from_samples(&samples, n, false);
        if est.jsd <= cfg.rel_jsd_tol * est.mu {
            return Ok(NormEstimate { converged: true, ..est });
        }
        if samples.len() >= max_cols {
            return Ok(est);
        }
        target = (2 * samples.len()).min(max_cols);
    }
}

/// `(1 + ε̃)⁻¹‖B̃‖_F` for an approximation `B̃` built at relative tolerance `ε̃`;
/// never exceeds `‖B‖_F` when the coarse build met its tolerance.
pub fn estimate_fro_via_coarse(coarse: &HMatrix, eps_tilde: f64) -> f64 {
    coarse.fro_norm() / (1.0 + eps_tilde)
}

/// `max_j Σ_i |B_ij|` by an exact column sweep.
pub fn induced_one_norm<O: EntryOracle + ?Sized>(oracle: &O) -> f64 {
    let n = oracle.dim();
    (0..n)
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |buf, j| {
                oracle.column_into(j, buf);
                buf.iter().map(|x| x.abs()).sum::<f64>()
            },
        )
        .reduce(|| 0.0, f64::max)
}

/// `‖B‖_F` by an exact column sweep.
pub fn exact_fro_norm<O: EntryOracle + ?Sized>(oracle: &O) -> f64 {
    let n = oracle.dim();
    let cols: Vec<f64> = (0..n)
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |buf, j| {
                oracle.column_into(j, buf);
                buf.iter().map(|x| x * x).sum::<f64>()
            },
        )
        .collect();
    cols.iter().sum::<f64>().sqrt()
}
