//! Low-rank block approximation: partially pivoted adaptive cross
//! approximation (ACA) followed by SVD recompression of the outer product.
//!
//! [`build_block`] runs the two stages with the tolerance split that keeps
//! the final error within the block budget: ACA gets `α·τ·safety`, the
//! recompression gets `β·τ` with `β = 1 − α` for absolute budgets and
//! `β = (1 − α)/(1 + αε)` for relative ones.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{BlockBudget, BudgetKind};

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_ACA_SAFETY: f64 = 0.1;

/// `U Vᵀ` with `U: m×r` and `V: n×r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    u: DMatrix<f64>,
    v: DMatrix<f64>,
}

impl LowRankFactors {
    pub fn new(u: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        if u.ncols() != v.ncols() {
            return Err(Error::invalid(
                "factors",
                format!("U has {} columns but V has {}", u.ncols(), v.ncols()),
            ));
        }
        Ok(LowRankFactors { u, v })
    }

    pub fn zero(m: usize, n: usize) -> Self {
        LowRankFactors {
            u: DMatrix::zeros(m, 0),
            v: DMatrix::zeros(n, 0),
        }
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn rows(&self) -> usize {
        self.u.nrows()
    }

    pub fn cols(&self) -> usize {
        self.v.nrows()
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    /// Stored numbers, `(m + n)·r`.
    pub fn nnz(&self) -> usize {
        (self.rows() + self.cols()) * self.rank()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        &self.u * self.v.transpose()
    }

    /// `‖U Vᵀ‖_F` via `trace((UᵀU)(VᵀV))`, without forming the product.
    pub fn fro_norm(&self) -> f64 {
        if self.rank() == 0 {
            return 0.0;
        }
        let gu = self.u.tr_mul(&self.u);
        let gv = self.v.tr_mul(&self.v);
        gu.component_mul(&gv).sum().max(0.0).sqrt()
    }

    /// `y += U (Vᵀ x)`.
    pub fn apply_add(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols());
        debug_assert_eq!(y.len(), self.rows());
        for l in 0..self.rank() {
            let vl = self.v.column(l);
            let coef: f64 = vl.iter().zip(x).map(|(a, b)| a * b).sum();
            if coef == 0.0 {
                continue;
            }
            for (yi, ui) in y.iter_mut().zip(self.u.column(l).iter()) {
                *yi += coef * ui;
            }
        }
    }

    /// Entry `(i, j)` of `U Vᵀ`.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        (0..self.rank()).map(|l| self.u[(i, l)] * self.v[(j, l)]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopKind {
    /// Stop when `‖u_k‖‖v_k‖ ≤ tol·‖B̄_k‖_F`.
    RelativeFro,
    /// Stop when `‖u_k‖‖v_k‖ ≤ tol`.
    AbsoluteFro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopCriterion {
    pub kind: StopKind,
    pub tol: f64,
    pub max_rank: usize,
}

#[derive(Debug, Clone)]
pub struct AcaOutcome {
    pub factors: LowRankFactors,
    /// False when `max_rank` was reached before the stopping test passed.
    pub converged: bool,
    /// Number of oracle evaluations.
    pub evaluations: usize,
}

/// Partially pivoted ACA of the `m×n` block whose entries `entry(i, j)` returns.
///
/// The next pivot row is the unused row where the latest column has its
/// largest magnitude; the pivot column is the largest unused entry of the
/// residual row. A residual row with no usable pivot is skipped. Running out
/// of rows means the block is reproduced exactly. When the stopping test
/// passes, a random row and column of the residual are checked as well, and
/// the iteration resumes if they show unexplored mass.
pub fn aca<F>(entry: F, m: usize, n: usize, stop: StopCriterion) -> Result<AcaOutcome>
where
    F: Fn(usize, usize) -> f64,
{
    if m == 0 || n == 0 {
        return Err(Error::invalid("block", format!("empty {m}x{n} block")));
    }
    if !(stop.tol > 0.0) {
        return Err(Error::invalid("tol", format!("must be positive, got {}", stop.tol)));
    }
    let max_rank = stop.max_rank.min(m).min(n);

    let mut us: Vec<Vec<f64>> = Vec::new();
    let mut vs: Vec<Vec<f64>> = Vec::new();
    let mut row_used = vec![false; m];
    let mut col_used = vec![false; n];
    let mut rows_left = m;
    let mut evaluations = 0usize;
    // ‖Σ u_l v_lᵀ‖_F², kept exact including cross terms.
    let mut approx_sq = 0.0f64;
    // Largest entry magnitude read so far; pivots below eps·scale are noise.
    let mut scale = 0.0f64;
    let mut next_row = Some(0usize);
    let mut converged = false;

    let mut row = vec![0.0; n];
    let mut col = vec![0.0; m];
    let mut rng = ChaCha8Rng::seed_from_u64(((m as u64) << 32) ^ n as u64);

    while let Some(i) = next_row {
        if us.len() >= max_rank {
            break;
        }
        row_used[i] = true;
        rows_left -= 1;
        for (j, r) in row.iter_mut().enumerate() {
            *r = entry(i, j);
            scale = scale.max(r.abs());
        }
        evaluations += n;
        for (u, v) in us.iter().zip(&vs) {
            let ui = u[i];
            if ui != 0.0 {
                row.iter_mut().zip(v).for_each(|(r, vj)| *r -= ui * vj);
            }
        }
        let pivot_col = argmax_unused(&row, &col_used);
        let pivot = pivot_col.map_or(0.0, |j| row[j]);
        if pivot_col.is_none() || pivot.abs() <= f64::EPSILON * scale || pivot == 0.0 {
            // This row is already reproduced; try the next unused one.
            next_row = next_unused_after(&row_used, i);
            if next_row.is_none() {
                converged = true;
            }
            continue;
        }
        let j = pivot_col.unwrap();
        col_used[j] = true;
        for (k, c) in col.iter_mut().enumerate() {
            *c = entry(k, j);
            scale = scale.max(c.abs());
        }
        evaluations += m;
        for (u, v) in us.iter().zip(&vs) {
            let vj = v[j];
            if vj != 0.0 {
                col.iter_mut().zip(u).for_each(|(c, uk)| *c -= vj * uk);
            }
        }
        let v_new: Vec<f64> = row.iter().map(|r| r / pivot).collect();
        let u_new = col.clone();

        let u_sq = dot(&u_new, &u_new);
        let v_sq = dot(&v_new, &v_new);
        let cross: f64 = us.iter().zip(&vs).map(|(u, v)| dot(u, &u_new) * dot(v, &v_new)).sum();
        approx_sq = (approx_sq + 2.0 * cross + u_sq * v_sq).max(0.0);
        let step = (u_sq * v_sq).sqrt();

        us.push(u_new);
        vs.push(v_new);

        let threshold = match stop.kind {
            StopKind::AbsoluteFro => stop.tol,
            StopKind::RelativeFro => stop.tol * approx_sq.sqrt(),
        };
        if step <= threshold {
            let probe = Probe {
                us: &us,
                vs: &vs,
                row_used: &row_used,
                col_used: &col_used,
            };
            let (restart, evals) = probe.check(&entry, &mut rng, threshold, &mut scale);
            evaluations += evals;
            match restart {
                Some(r) => {
                    next_row = Some(r);
                    continue;
                }
                None => {
                    converged = true;
                    break;
                }
            }
        }
        if rows_left == 0 {
            converged = true;
            break;
        }
        next_row = argmax_unused(us.last().unwrap(), &row_used).or_else(|| next_unused_after(&row_used, i));
    }
    // A full-rank cross approximation interpolates every entry.
    if next_row.is_none() || us.len() == m.min(n) {
        converged = true;
    }

    let r = us.len();
    let u = DMatrix::from_fn(m, r, |i, l| us[l][i]);
    let v = DMatrix::from_fn(n, r, |j, l| vs[l][j]);
    Ok(AcaOutcome {
        factors: LowRankFactors { u, v },
        converged,
        evaluations,
    })
}

/// Residual spot check run when the stopping test passes. Candidate rows are
/// one random unused row and the unused row in the middle of the widest run
/// of unused rows; columns likewise. Clusters are contiguous in the tree
/// ordering, so the widest run is where an unexplored sub-cluster would sit.
/// Residual norms scaled by `√m` (rows) or `√n` (columns) estimate the full
/// residual.
struct Probe<'a> {
    us: &'a [Vec<f64>],
    vs: &'a [Vec<f64>],
    row_used: &'a [bool],
    col_used: &'a [bool],
}

impl Probe<'_> {
    /// Returns the row to continue from if an estimate exceeds `threshold`,
    /// and the number of entries evaluated.
    fn check<F, R>(&self, entry: &F, rng: &mut R, threshold: f64, scale: &mut f64) -> (Option<usize>, usize)
    where
        F: Fn(usize, usize) -> f64,
        R: Rng,
    {
        let (m, n) = (self.row_used.len(), self.col_used.len());
        let mut evals = 0;
        // (estimate, row to resume from)
        let mut worst: (f64, Option<usize>) = (0.0, None);

        for i in probe_indices(self.row_used, rng) {
            let mut res: Vec<f64> = (0..n).map(|j| entry(i, j)).collect();
            evals += n;
            for (u, v) in self.us.iter().zip(self.vs) {
                res.iter_mut().zip(v).for_each(|(r, vj)| *r -= u[i] * vj);
            }
            *scale = res.iter().fold(*scale, |a, x| a.max(x.abs()));
            let est = (m as f64).sqrt() * dot(&res, &res).sqrt();
            if est > worst.0 {
                worst = (est, Some(i));
            }
        }
        for j in probe_indices(self.col_used, rng) {
            let mut res: Vec<f64> = (0..m).map(|k| entry(k, j)).collect();
            evals += m;
            for (u, v) in self.us.iter().zip(self.vs) {
                res.iter_mut().zip(u).for_each(|(c, uk)| *c -= v[j] * uk);
            }
            *scale = res.iter().fold(*scale, |a, x| a.max(x.abs()));
            let est = (n as f64).sqrt() * dot(&res, &res).sqrt();
            if est > worst.0 {
                worst = (est, argmax_unused(&res, self.row_used));
            }
        }
        match worst {
            (est, Some(i)) if est > threshold => (Some(i), evals),
            _ => (None, evals),
        }
    }
}

/// Up to two distinct unused indices: the middle of the widest unused run and
/// a random unused index.
fn probe_indices<R: Rng>(used: &[bool], rng: &mut R) -> Vec<usize> {
    let free: Vec<usize> = (0..used.len()).filter(|&k| !used[k]).collect();
    if free.is_empty() {
        return Vec::new();
    }
    let (mut best, mut run_start) = ((0usize, 0usize), None);
    for k in 0..=used.len() {
        let is_free = k < used.len() && !used[k];
        match (is_free, run_start) {
            (true, None) => run_start = Some(k),
            (false, Some(s)) => {
                if k - s > best.1 - best.0 {
                    best = (s, k);
                }
                run_start = None;
            }
            _ => {}
        }
    }
    let mid = (best.0 + best.1) / 2;
    let random = free[rng.gen_range(0..free.len())];
    if random == mid {
        vec![mid]
    } else {
        vec![mid, random]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmax_unused(values: &[f64], used: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, (&x, &u)) in values.iter().zip(used).enumerate() {
        if u {
            continue;
        }
        if best.is_none_or(|(_, b)| x.abs() > b) {
            best = Some((k, x.abs()));
        }
    }
    best.map(|(k, _)| k)
}

fn next_unused_after(used: &[bool], after: usize) -> Option<usize> {
    let m = used.len();
    (1..=m).map(|d| (after + d) % m).find(|&k| !used[k])
}

/// Thin SVD `left · diag(sigma) · rightᵀ` of a factored matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterProductSvd {
    pub left: DMatrix<f64>,
    /// Nonincreasing and nonnegative.
    pub sigma: Vec<f64>,
    pub right: DMatrix<f64>,
}

impl OuterProductSvd {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn rows(&self) -> usize {
        self.left.nrows()
    }

    pub fn cols(&self) -> usize {
        self.right.nrows()
    }

    pub fn fro_norm(&self) -> f64 {
        self.tail_norm(0)
    }

    /// `(Σ_{i ≥ k} σ_i²)^½` (zero-based), the Frobenius distance between the
    /// rank-`k` truncation and the full product.
    pub fn tail_norm(&self, k: usize) -> f64 {
        self.sigma[k.min(self.rank())..]
            .iter()
            .map(|s| s * s)
            .sum::<f64>()
            .sqrt()
    }

    /// Keeps the `k` leading triplets: `U = left_k·Σ_k`, `V = right_k`.
    pub fn truncate(&self, k: usize) -> LowRankFactors {
        let k = k.min(self.rank());
        let mut u = self.left.columns(0, k).into_owned();
        for (l, s) in self.sigma[..k].iter().enumerate() {
            u.column_mut(l).scale_mut(*s);
        }
        LowRankFactors {
            u,
            v: self.right.columns(0, k).into_owned(),
        }
    }

    /// Dense `Σ_{i ≥ k} σ_i left_i right_iᵀ`, the part discarded by [`truncate`](Self::truncate).
    pub fn tail_dense(&self, k: usize) -> DMatrix<f64> {
        let r = self.rank();
        let k = k.min(r);
        if k == r {
            return DMatrix::zeros(self.rows(), self.cols());
        }
        let mut l = self.left.columns(k, r - k).into_owned();
        for (c, s) in self.sigma[k..].iter().enumerate() {
            l.column_mut(c).scale_mut(*s);
        }
        l * self.right.columns(k, r - k).transpose()
    }

    /// `‖B̄_k − B̄‖_max` for the rank-`k` truncation.
    pub fn max_deviation(&self, k: usize) -> f64 {
        self.tail_dense(k).iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
    }
}

/// SVD of `U Vᵀ` from thin QR factorizations of both factors and a small
/// dense SVD of `R_U R_Vᵀ`; the block itself is never formed.
pub fn outer_product_svd(f: &LowRankFactors) -> OuterProductSvd {
    let (m, n, r) = (f.rows(), f.cols(), f.rank());
    if r == 0 {
        return OuterProductSvd {
            left: DMatrix::zeros(m, 0),
            sigma: Vec::new(),
            right: DMatrix::zeros(n, 0),
        };
    }
    let qr_u = f.u.clone().qr();
    let qr_v = f.v.clone().qr();
    let (q_u, r_u) = (qr_u.q(), qr_u.r());
    let (q_v, r_v) = (qr_v.q(), qr_v.r());
    let core = &r_u * r_v.transpose();
    let svd = core.svd(true, true);
    let w = svd.u.expect("left singular vectors requested");
    let z = svd.v_t.expect("right singular vectors requested").transpose();
    let s: DVector<f64> = svd.singular_values;

    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let w = DMatrix::from_fn(w.nrows(), order.len(), |i, c| w[(i, order[c])]);
    let z = DMatrix::from_fn(z.nrows(), order.len(), |i, c| z[(i, order[c])]);
    let sigma = order.iter().map(|&k| s[k].max(0.0)).collect();
    OuterProductSvd {
        left: q_u * w,
        sigma,
        right: q_v * z,
    }
}

fn check_budget(budget: f64) -> Result<()> {
    if budget >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid("budget", format!("must be nonnegative, got {budget}")))
    }
}

/// Smallest `k` whose Frobenius tail `(Σ_{i>k} σ_i²)^½` fits in `budget`.
pub fn fro_truncation_rank(s: &OuterProductSvd, budget: f64) -> Result<usize> {
    check_budget(budget)?;
    let r = s.rank();
    let mut tail_sq = vec![0.0; r + 1];
    for k in (0..r).rev() {
        tail_sq[k] = tail_sq[k + 1] + s.sigma[k] * s.sigma[k];
    }
    Ok((0..=r).find(|&k| tail_sq[k].sqrt() <= budget).unwrap_or(r))
}

pub fn truncate_fro(s: &OuterProductSvd, budget: f64) -> Result<LowRankFactors> {
    Ok(s.truncate(fro_truncation_rank(s, budget)?))
}

/// Binary search over the ordered singular values for the smallest `k` whose
/// truncation deviates from the full product by at most `budget` in every entry.
pub fn maxnorm_truncation_rank(s: &OuterProductSvd, budget: f64) -> Result<usize> {
    check_budget(budget)?;
    let (mut lo, mut hi) = (0usize, s.rank());
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if s.max_deviation(mid) <= budget {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(hi)
}

pub fn truncate_maxnorm(s: &OuterProductSvd, budget: f64) -> Result<LowRankFactors> {
    Ok(s.truncate(maxnorm_truncation_rank(s, budget)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LraParams {
    /// Share of the block budget given to ACA; the rest goes to recompression.
    pub alpha: f64,
    /// Extra factor on the ACA tolerance, compensating for its loose termination.
    pub aca_safety: f64,
}

impl Default for LraParams {
    fn default() -> Self {
        LraParams {
            alpha: DEFAULT_ALPHA,
            aca_safety: DEFAULT_ACA_SAFETY,
        }
    }
}

impl LraParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(
                "alpha",
                format!("must lie in (0, 1), got {}", self.alpha),
            ));
        }
        if !(self.aca_safety > 0.0 && self.aca_safety <= 1.0) {
            return Err(Error::invalid(
                "aca_safety",
                format!("must lie in (0, 1], got {}", self.aca_safety),
            ));
        }
        Ok(())
    }

    /// The ACA stopping rule for a block budget. Max-norm budgets use an
    /// absolute Frobenius stop, which bounds the max norm from above.
    pub fn aca_stop(&self, budget: BlockBudget, max_rank: usize) -> StopCriterion {
        let kind = match budget.kind {
            BudgetKind::RelativeFro => StopKind::RelativeFro,
            BudgetKind::AbsoluteFro | BudgetKind::AbsoluteMax => StopKind::AbsoluteFro,
        };
        StopCriterion {
            kind,
            tol: self.alpha * budget.value * self.aca_safety,
            max_rank,
        }
    }

    /// `β`: `1 − α` for absolute budgets, `(1 − α)/(1 + αε)` for relative ones.
    pub fn beta(&self, budget: BlockBudget) -> f64 {
        match budget.kind {
            BudgetKind::RelativeFro => (1.0 - self.alpha) / (1.0 + self.alpha * budget.value),
            BudgetKind::AbsoluteFro | BudgetKind::AbsoluteMax => 1.0 - self.alpha,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockApprox {
    pub factors: LowRankFactors,
    /// Rank produced by ACA before recompression.
    pub aca_rank: usize,
    /// False if ACA hit its rank cap; the factors are then unrecompressed.
    pub converged: bool,
    pub evaluations: usize,
}

/// ACA at `α·τ·safety`, then SVD recompression at `β·τ`.
pub fn build_block<F>(entry: F, m: usize, n: usize, budget: BlockBudget, params: &LraParams) -> Result<BlockApprox>
where
    F: Fn(usize, usize) -> f64,
{
    params.validate()?;
    if !(budget.value > 0.0) {
        return Err(Error::invalid(
            "budget",
            format!("must be positive, got {}", budget.value),
        ));
    }
    let outcome = aca(entry, m, n, params.aca_stop(budget, m.min(n)))?;
    let aca_rank = outcome.factors.rank();
    if !outcome.converged || aca_rank == 0 {
        return Ok(BlockApprox {
            factors: outcome.factors,
            aca_rank,
            converged: outcome.converged,
            evaluations: outcome.evaluations,
        });
    }
    let svd = outer_product_svd(&outcome.factors);
    let beta = params.beta(budget);
    let factors = match budget.kind {
        BudgetKind::RelativeFro => truncate_fro(&svd, beta * budget.value * svd.fro_norm())?,
        BudgetKind::AbsoluteFro => truncate_fro(&svd, beta * budget.value)?,
        BudgetKind::AbsoluteMax => truncate_maxnorm(&svd, beta * budget.value)?,
    };
    Ok(BlockApprox {
        factors,
        aca_rank,
        converged: true,
        evaluations: outcome.evaluations,
    })
}
