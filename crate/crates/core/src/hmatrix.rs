//! H-matrix assembly, matrix-vector products and error measurement.
//!
//! Blocks are stored in the permuted ordering induced by the cluster tree;
//! [`HMatrix::mvp`] takes and returns vectors in the original ordering.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{Block, BlockPartition, ClusterTree, DEFAULT_ETA, DEFAULT_LEAF_SIZE};
use crate::error::{Error, Result};
use crate::geometry::{Kernel, PointCloud};
use crate::lra::{build_block, LowRankFactors, LraParams};
use crate::norm::{column_order, NormEstimate};
use crate::oracle::{EntryOracle, KernelMatrix};
use crate::policy::{Method, TolerancePolicy};

/// Dimension up to which [`ErrorMode::auto`] picks the exact sweep.
pub const DEFAULT_EXACT_ERROR_MAX_N: usize = 1 << 13;
pub const DEFAULT_ERROR_SAMPLE_COLS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub enum BlockData {
    Dense(DMatrix<f64>),
    LowRank(LowRankFactors),
}

impl BlockData {
    pub fn nnz(&self) -> usize {
        match self {
            BlockData::Dense(d) => d.len(),
            BlockData::LowRank(f) => f.nnz(),
        }
    }

    fn fro_norm_sq(&self) -> f64 {
        match self {
            BlockData::Dense(d) => d.norm_squared(),
            BlockData::LowRank(f) => f.fro_norm().powi(2),
        }
    }

    /// Column `j` of the block into `out`.
    fn column_into(&self, j: usize, out: &mut [f64]) {
        match self {
            BlockData::Dense(d) => out.copy_from_slice(d.column(j).as_slice()),
            BlockData::LowRank(f) => {
                out.fill(0.0);
                for l in 0..f.rank() {
                    let c = f.v()[(j, l)];
                    for (o, u) in out.iter_mut().zip(f.u().column(l).iter()) {
                        *o += c * u;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HMatrix {
    partition: BlockPartition,
    blocks: Vec<BlockData>,
    perm: Vec<usize>,
    inverse_perm: Vec<usize>,
}

impl HMatrix {
    /// Checks that every partition block has matching storage.
    pub fn from_parts(partition: BlockPartition, blocks: Vec<BlockData>, perm: Vec<usize>) -> Result<Self> {
        let n = partition.dim();
        if perm.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: perm.len(),
            });
        }
        let mut inverse_perm = vec![usize::MAX; n];
        for (k, &i) in perm.iter().enumerate() {
            if i >= n || inverse_perm[i] != usize::MAX {
                return Err(Error::invalid("perm", "not a permutation"));
            }
            inverse_perm[i] = k;
        }
        if blocks.len() != partition.len() {
            return Err(Error::invalid(
                "blocks",
                format!("{} blocks for a partition of {}", blocks.len(), partition.len()),
            ));
        }
        for (b, data) in partition.blocks().iter().zip(&blocks) {
            let (m, k) = match data {
                BlockData::Dense(d) => d.shape(),
                BlockData::LowRank(f) => (f.rows(), f.cols()),
            };
            if (m, k) != (b.rows(), b.cols()) {
                return Err(Error::invalid(
                    "blocks",
                    format!("storage {m}x{k} for a {}x{} block", b.rows(), b.cols()),
                ));
            }
            if !b.admissible && matches!(data, BlockData::LowRank(_)) {
                return Err(Error::invalid("blocks", "low-rank storage for an inadmissible block"));
            }
        }
        Ok(HMatrix {
            partition,
            blocks,
            perm,
            inverse_perm,
        })
    }

    pub fn dim(&self) -> usize {
        self.partition.dim()
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn block_data(&self) -> &[BlockData] {
        &self.blocks
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&Block, &BlockData)> {
        self.partition.blocks().iter().zip(&self.blocks)
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse_perm(&self) -> &[usize] {
        &self.inverse_perm
    }

    pub fn nnz(&self) -> usize {
        self.blocks.iter().map(BlockData::nnz).sum()
    }

    /// `N² / nnz`.
    pub fn compression(&self) -> f64 {
        compression(self.dim(), self.nnz())
    }

    /// `y = B̄ x`, in the original ordering.
    pub fn mvp(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        if x.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: x.len(),
            });
        }
        let xp: Vec<f64> = self.perm.iter().map(|&i| x[i]).collect();
        let mut yp = vec![0.0; n];
        for (b, data) in self.blocks() {
            let xs = &xp[b.col_start..b.col_end];
            let ys = &mut yp[b.row_start..b.row_end];
            match data {
                BlockData::Dense(d) => {
                    for (i, y) in ys.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (j, xj) in xs.iter().enumerate() {
                            acc += d[(i, j)] * xj;
                        }
                        *y += acc;
                    }
                }
                BlockData::LowRank(f) => f.apply_add(xs, ys),
            }
        }
        let mut y = vec![0.0; n];
        for (k, &i) in self.perm.iter().enumerate() {
            y[i] = yp[k];
        }
        Ok(y)
    }

    /// Exact `‖B̄‖_F` of the stored representation, in `O(nnz)` work for
    /// dense blocks and `O((m + n)r²)` for factored ones.
    pub fn fro_norm(&self) -> f64 {
        self.blocks.iter().map(BlockData::fro_norm_sq).sum::<f64>().sqrt()
    }

    /// Measures `‖B − B̄‖` against the matrix `oracle` (original ordering).
    ///
    /// `one_norm` is `‖B‖₁`, used to express the max-norm error relative to
    /// `‖B‖₁/N`; the exact sweep computes it when absent.
    pub fn achieved_error<O: EntryOracle + ?Sized>(&self, oracle: &O, mode: ErrorMode) -> Result<AchievedError> {
        if oracle.dim() != self.dim() {
            return Err(Error::LengthMismatch {
                expected: self.dim(),
                got: oracle.dim(),
            });
        }
        Ok(match mode {
            ErrorMode::Exact => self.exact_error(oracle),
            ErrorMode::Sampled { cols, seed } => self.sampled_error(oracle, cols, seed),
        })
    }

    fn exact_error<O: EntryOracle + ?Sized>(&self, oracle: &O) -> AchievedError {
        struct Partial {
            err_sq: f64,
            b_sq: f64,
            err_max: f64,
            col_abs: Vec<f64>,
        }
        let perm = &self.perm;
        let partials: Vec<Partial> = self
            .blocks()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|(b, data)| {
                let m = b.rows();
                let mut exact = vec![0.0; m];
                let mut approx = vec![0.0; m];
                let mut p = Partial {
                    err_sq: 0.0,
                    b_sq: 0.0,
                    err_max: 0.0,
                    col_abs: vec![0.0; b.cols()],
                };
                for j in 0..b.cols() {
                    let gj = perm[b.col_start + j];
                    for (i, e) in exact.iter_mut().enumerate() {
                        *e = oracle.entry(perm[b.row_start + i], gj);
                    }
                    data.column_into(j, &mut approx);
                    for (e, a) in exact.iter().zip(&approx) {
                        let d = e - a;
                        p.err_sq += d * d;
                        p.b_sq += e * e;
                        p.err_max = p.err_max.max(d.abs());
                        p.col_abs[j] += e.abs();
                    }
                }
                p
            })
            .collect();

        let mut col_abs = vec![0.0; self.dim()];
        let (mut err_sq, mut b_sq, mut err_max) = (0.0, 0.0, 0.0f64);
        for (b, p) in self.partition.blocks().iter().zip(&partials) {
            err_sq += p.err_sq;
            b_sq += p.b_sq;
            err_max = err_max.max(p.err_max);
            for (c, v) in col_abs[b.col_start..b.col_end].iter_mut().zip(&p.col_abs) {
                *c += v;
            }
        }
        let one_norm = col_abs.iter().copied().fold(0.0, f64::max);
        AchievedError::new(
            ErrorModeLabel::Exact,
            err_sq.sqrt(),
            b_sq.sqrt(),
            err_max,
            one_norm,
            self.dim(),
            None,
            self.dim(),
        )
    }

    fn sampled_error<O: EntryOracle + ?Sized>(&self, oracle: &O, cols: usize, seed: u64) -> AchievedError {
        let n = self.dim();
        let cols = cols.clamp(2, n.max(2)).min(n);
        let order = column_order(n, seed);
        let blocks: Vec<(&Block, &BlockData)> = self.blocks().collect();
        let perm = &self.perm;
        // (N‖E e_j‖², N‖B e_j‖², max |E_ij|, Σ_i |B_ij|) per sampled permuted column j.
        let samples: Vec<(f64, f64, f64, f64)> = order[..cols]
            .par_iter()
            .map(|&j| {
                let mut exact = vec![0.0; n];
                oracle.column_into(perm[j], &mut exact);
                let mut buf = Vec::new();
                let (mut e_sq, mut e_max) = (0.0, 0.0f64);
                let mut covered = vec![false; n];
                for (b, data) in blocks.iter().filter(|(b, _)| (b.col_start..b.col_end).contains(&j)) {
                    buf.resize(b.rows(), 0.0);
                    data.column_into(j - b.col_start, &mut buf);
                    for (i, a) in buf.iter().enumerate() {
                        let row = b.row_start + i;
                        covered[row] = true;
                        let d = exact[perm[row]] - a;
                        e_sq += d * d;
                        e_max = e_max.max(d.abs());
                    }
                }
                debug_assert!(covered.iter().all(|&c| c));
                let b_sq: f64 = exact.iter().map(|x| x * x).sum();
                let b_abs: f64 = exact.iter().map(|x| x.abs()).sum();
                (n as f64 * e_sq, n as f64 * b_sq, e_max, b_abs)
            })
            .collect();

        let sx: f64 = samples.iter().map(|s| s.0).sum();
        let sy: f64 = samples.iter().map(|s| s.1).sum();
        let ratio = |x: f64, y: f64| if y > 0.0 { (x / y).max(0.0).sqrt() } else { 0.0 };
        let rel = ratio(sx, sy);
        // Delete-1 jackknife of the ratio estimator.
        let k = samples.len() as f64;
        let loo: Vec<f64> = samples.iter().map(|s| ratio(sx - s.0, sy - s.1)).collect();
        let loo_mean = loo.iter().sum::<f64>() / k;
        let jsd = ((k - 1.0) / k * loo.iter().map(|r| (r - loo_mean).powi(2)).sum::<f64>()).sqrt();
        let rel_jsd = if rel > 0.0 { jsd / rel } else { 0.0 };

        let b_fro = (sy / k).sqrt();
        let err_max = samples.iter().map(|s| s.2).fold(0.0, f64::max);
        let one_norm = samples.iter().map(|s| s.3).fold(0.0, f64::max);
        let mut out = AchievedError::new(
            ErrorModeLabel::Sampled,
            rel * b_fro,
            b_fro,
            err_max,
            one_norm,
            n,
            Some(rel_jsd),
            cols,
        );
        out.rel_fro = rel;
        out
    }
}

pub fn compression(n: usize, nnz: usize) -> f64 {
    if nnz == 0 {
        f64::INFINITY
    } else {
        (n as f64).powi(2) / nnz as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorMode {
    /// Full sweep over every entry.
    Exact,
    /// Column sampling applied to `E` and `B` together.
    Sampled { cols: usize, seed: u64 },
}

impl ErrorMode {
    pub fn auto(n: usize, exact_max_n: usize, seed: u64) -> Self {
        if n <= exact_max_n {
            ErrorMode::Exact
        } else {
            ErrorMode::Sampled {
                cols: DEFAULT_ERROR_SAMPLE_COLS,
                seed,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorModeLabel {
    Exact,
    Sampled,
}

impl ErrorModeLabel {
    pub fn name(self) -> &'static str {
        match self {
            ErrorModeLabel::Exact => "exact",
            ErrorModeLabel::Sampled => "sampled",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AchievedError {
    pub mode: ErrorModeLabel,
    /// `‖B − B̄‖_F / ‖B‖_F`.
    pub rel_fro: f64,
    pub err_fro: f64,
    pub b_fro: f64,
    /// `‖B − B̄‖_max`; a lower bound when sampled.
    pub err_max: f64,
    /// `‖B‖₁`; a lower bound when sampled.
    pub b_one: f64,
    /// `‖B − B̄‖_max · N / ‖B‖₁`, comparable with `ε` under MREMmax.
    pub rel_max: f64,
    /// Relative jackknife standard deviation of `rel_fro` (sampled mode).
    pub rel_jsd: Option<f64>,
    pub cols: usize,
}

impl AchievedError {
    #[allow(clippy::too_many_arguments)]
    fn new(
        mode: ErrorModeLabel,
        err_fro: f64,
        b_fro: f64,
        err_max: f64,
        b_one: f64,
        n: usize,
        rel_jsd: Option<f64>,
        cols: usize,
    ) -> Self {
        let div = |a: f64, b: f64| {
            if b > 0.0 {
                a / b
            } else if a == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        };
        AchievedError {
            mode,
            rel_fro: div(err_fro, b_fro),
            err_fro,
            b_fro,
            err_max,
            b_one,
            rel_max: div(err_max * n as f64, b_one),
            rel_jsd,
            cols,
        }
    }

    /// The achieved error in the norm the method controls: max-norm relative
    /// to `‖B‖₁/N` for MREMmax, relative Frobenius otherwise.
    pub fn for_method(&self, method: Method) -> f64 {
        match method {
            Method::MremMax => self.rel_max,
            Method::Brem | Method::Mrem => self.rel_fro,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub policy: TolerancePolicy,
    pub lra: LraParams,
    pub eta: f64,
    pub leaf_size: usize,
    /// Seed for sampled error measurement.
    pub seed: u64,
    /// Achieved-error measurement after assembly; `None` skips it.
    pub error_mode: Option<ErrorMode>,
    /// The estimate behind an MREM policy's norm, if it was estimated.
    pub norm_estimate: Option<NormEstimate>,
    /// Build even if `norm_estimate` did not converge.
    pub allow_unconverged_norm: bool,
}

impl BuildConfig {
    pub fn new(policy: TolerancePolicy) -> Self {
        BuildConfig {
            policy,
            lra: LraParams::default(),
            eta: DEFAULT_ETA,
            leaf_size: DEFAULT_LEAF_SIZE,
            seed: 0,
            error_mode: None,
            norm_estimate: None,
            allow_unconverged_norm: false,
        }
    }

    pub fn with_error_mode(mut self, mode: ErrorMode) -> Self {
        self.error_mode = Some(mode);
        self
    }

    pub fn with_leaf_size(mut self, leaf_size: usize) -> Self {
        self.leaf_size = leaf_size;
        self
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn with_norm_estimate(mut self, est: NormEstimate) -> Self {
        self.norm_estimate = Some(est);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.lra.validate()?;
        if self.leaf_size == 0 {
            return Err(Error::invalid("leaf_size", "must be at least 1"));
        }
        if !(self.eta > 0.0) {
            return Err(Error::invalid("eta", "must be positive"));
        }
        if let Some(est) = self.norm_estimate {
            if !self.allow_unconverged_norm {
                est.require_converged()?;
            }
        }
        Ok(())
    }

    /// The tolerance actually targeted once the safety-reduced norm estimate
    /// is accounted for: `ε·safe/√μ` for MREM with an estimate, `ε` otherwise.
    pub fn effective_epsilon(&self) -> f64 {
        let eps = self.policy.epsilon();
        match (self.policy.method(), self.norm_estimate) {
            (Method::Mrem, Some(est)) if est.mu > 0.0 => eps * est.safe_fro_norm / est.fro_norm(),
            _ => eps,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub tree_ms: f64,
    pub assemble_ms: f64,
    pub error_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub n: usize,
    pub method: Method,
    pub epsilon: f64,
    pub effective_epsilon: f64,
    pub nnz: usize,
    pub compression: f64,
    pub blocks: usize,
    pub admissible_blocks: usize,
    /// Admissible blocks stored densely because factoring did not pay off.
    pub dense_fallbacks: usize,
    /// Admissible blocks where ACA hit its rank cap.
    pub unconverged_blocks: usize,
    /// `Σ m_i n_i` over the partition.
    pub covered_entries: u128,
    /// Ranks of the blocks stored in factored form, in partition order.
    pub ranks: Vec<usize>,
    pub evaluations: u64,
    pub achieved: Option<AchievedError>,
    pub timings: PhaseTimings,
}

impl BuildReport {
    /// `(min, median, max)` of the factored ranks; zeros if there are none.
    pub fn rank_summary(&self) -> (usize, usize, usize) {
        if self.ranks.is_empty() {
            return (0, 0, 0);
        }
        let mut r = self.ranks.clone();
        r.sort_unstable();
        (r[0], r[r.len() / 2], r[r.len() - 1])
    }
}

/// `nnz(B̄_BREM) / nnz(B̄_MREM)`; above one means MREM stores less.
pub fn improvement_factor(brem: &BuildReport, mrem: &BuildReport) -> f64 {
    brem.nnz as f64 / mrem.nnz as f64
}

/// The same ratio expressed through compressions, `c_MREM / c_BREM`.
pub fn improvement_factor_from_compression(brem: f64, mrem: f64) -> f64 {
    mrem / brem
}

/// An oracle addressed in the tree's permuted ordering.
struct Permuted<'a, O: ?Sized> {
    inner: &'a O,
    perm: &'a [usize],
}

impl<O: EntryOracle + ?Sized> Permuted<'_, O> {
    #[inline]
    fn entry(&self, i: usize, j: usize) -> f64 {
        self.inner.entry(self.perm[i], self.perm[j])
    }

    fn dense_block(&self, b: &Block) -> DMatrix<f64> {
        DMatrix::from_fn(b.rows(), b.cols(), |i, j| self.entry(b.row_start + i, b.col_start + j))
    }
}

/// Builds the cluster tree and partition, then assembles.
pub fn assemble(cloud: &PointCloud, kernel: Kernel, config: &BuildConfig) -> Result<(HMatrix, BuildReport)> {
    config.validate()?;
    let t0 = Instant::now();
    let tree = ClusterTree::build(cloud, config.leaf_size)?;
    let partition = BlockPartition::build(&tree, config.eta)?;
    let tree_ms = ms(t0);
    let oracle = KernelMatrix::new(cloud, kernel);
    let (h, mut report) = assemble_with_tree(&oracle, &tree, &partition, config)?;
    report.timings.tree_ms = tree_ms;
    Ok((h, report))
}

/// Assembles on an existing tree and partition, so several methods can be
/// compared on identical block structure. `config.eta` and
/// `config.leaf_size` are not consulted.
pub fn assemble_with_tree<O: EntryOracle + ?Sized>(
    oracle: &O,
    tree: &ClusterTree,
    partition: &BlockPartition,
    config: &BuildConfig,
) -> Result<(HMatrix, BuildReport)> {
    config.validate()?;
    let n = oracle.dim();
    if tree.dim() != n || partition.dim() != n || config.policy.dim() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: partition.dim(),
        });
    }
    let t0 = Instant::now();
    let pm = Permuted {
        inner: oracle,
        perm: tree.perm(),
    };

    struct Built {
        data: BlockData,
        fallback: bool,
        unconverged: bool,
        evaluations: usize,
    }

    let built: Vec<Result<Built>> = partition
        .blocks()
        .par_iter()
        .map(|b| {
            let (m, k) = (b.rows(), b.cols());
            if !b.admissible {
                return Ok(Built {
                    data: BlockData::Dense(pm.dense_block(b)),
                    fallback: false,
                    unconverged: false,
                    evaluations: m * k,
                });
            }
            let budget = config.policy.block_budget(m, k)?;
            let approx = build_block(
                |i, j| pm.entry(b.row_start + i, b.col_start + j),
                m,
                k,
                budget,
                &config.lra,
            )?;
            if !approx.converged || approx.factors.nnz() > m * k {
                return Ok(Built {
                    data: BlockData::Dense(pm.dense_block(b)),
                    fallback: true,
                    unconverged: !approx.converged,
                    evaluations: approx.evaluations + m * k,
                });
            }
            Ok(Built {
                data: BlockData::LowRank(approx.factors),
                fallback: false,
                unconverged: false,
                evaluations: approx.evaluations,
            })
        })
        .collect();

    let mut blocks = Vec::with_capacity(built.len());
    let (mut fallbacks, mut unconverged, mut evaluations) = (0, 0, 0u64);
    for b in built {
        let b = b?;
        fallbacks += usize::from(b.fallback);
        unconverged += usize::from(b.unconverged);
        evaluations += b.evaluations as u64;
        blocks.push(b.data);
    }
    let h = HMatrix::from_parts(partition.clone(), blocks, tree.perm().to_vec())?;
    let assemble_ms = ms(t0);

    let ranks = h
        .block_data()
        .iter()
        .filter_map(|d| match d {
            BlockData::LowRank(f) => Some(f.rank()),
            BlockData::Dense(_) => None,
        })
        .collect();

    let t1 = Instant::now();
    let achieved = config
        .error_mode
        .map(|mode| h.achieved_error(oracle, mode))
        .transpose()?;
    let error_ms = if achieved.is_some() { ms(t1) } else { 0.0 };

    let nnz = h.nnz();
    let report = BuildReport {
        n,
        method: config.policy.method(),
        epsilon: config.policy.epsilon(),
        effective_epsilon: config.effective_epsilon(),
        nnz,
        compression: compression(n, nnz),
        blocks: partition.len(),
        admissible_blocks: partition.admissible_count(),
        dense_fallbacks: fallbacks,
        unconverged_blocks: unconverged,
        covered_entries: partition.covered_entries(),
        ranks,
        evaluations,
        achieved,
        timings: PhaseTimings {
            tree_ms: 0.0,
            assemble_ms,
            error_ms,
        },
    };
    Ok((h, report))
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}
