//! Experiment harness: sweeps over geometry, kernel, N, ε and method, writing
//! one CSV row per build.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use hmtol::hmatrix::{assemble_with_tree, ErrorMode, DEFAULT_EXACT_ERROR_MAX_N};
use hmtol::norm::{estimate_fro_stochastic, induced_one_norm, SamplingConfig, DEFAULT_REL_JSD_TOL};
use hmtol::{
    generate_points, BlockPartition, BuildConfig, ClusterTree, Geometry, Kernel, KernelMatrix, Method, NormEstimate,
    TolerancePolicy,
};
use serde::{Deserialize, Serialize};

pub const CSV_HEADER: &str = "geometry,kernel,N,epsilon,method,nnz,compression,achieved_rel_error,error_mode,\
norm_mu,norm_jsd,norm_cols,rank_min,rank_med,rank_max,t_tree_ms,t_norm_ms,t_assemble_ms,t_error_ms,seed";

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid argument: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] hmtol::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

fn usage(msg: impl Into<String>) -> BenchError {
    BenchError::Usage(msg.into())
}

/// Parses `"512,1024"` or `"2^9..2^13"` (every power of two in the range).
pub fn parse_n_list(s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let exp = |t: &str| -> Result<u32> {
            t.trim()
                .strip_prefix("2^")
                .and_then(|e| e.parse().ok())
                .filter(|&e: &u32| e < 40)
                .ok_or_else(|| usage(format!("expected 2^k in range bound, got '{t}'")))
        };
        let (lo, hi) = (exp(a)?, exp(b)?);
        if lo > hi {
            return Err(usage(format!("empty range {s}")));
        }
        return Ok((lo..=hi).map(|e| 1usize << e).collect());
    }
    let ns: Vec<usize> = parse_list(s)?;
    if ns.contains(&0) {
        return Err(usage("N must be positive"));
    }
    Ok(ns)
}

/// Comma-separated list of values.
pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let out: Vec<T> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|e| usage(format!("'{t}': {e}"))))
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(usage(format!("empty list '{s}'")));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub geometries: Vec<Geometry>,
    pub kernels: Vec<Kernel>,
    pub ns: Vec<usize>,
    pub epsilons: Vec<f64>,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub eta: f64,
    pub leaf_size: usize,
    /// Largest N measured with the exact error sweep; larger N are sampled.
    pub exact_error_max_n: usize,
    /// Relative JSD at which the norm estimate stops sampling.
    pub rel_jsd_tol: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            geometries: Geometry::ALL.to_vec(),
            kernels: vec![
                Kernel::InversePower(1),
                Kernel::InversePower(2),
                Kernel::InversePower(3),
                Kernel::Log,
            ],
            ns: (9..=13).map(|e| 1 << e).collect(),
            epsilons: vec![1e-5],
            methods: vec![Method::Brem, Method::Mrem],
            seed: 0,
            eta: hmtol::cluster::DEFAULT_ETA,
            leaf_size: hmtol::cluster::DEFAULT_LEAF_SIZE,
            exact_error_max_n: DEFAULT_EXACT_ERROR_MAX_N,
            rel_jsd_tol: DEFAULT_REL_JSD_TOL,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.geometries.is_empty()
            || self.kernels.is_empty()
            || self.ns.is_empty()
            || self.epsilons.is_empty()
            || self.methods.is_empty()
        {
            return Err(usage("geometry, kernel, N, epsilon and method lists must be nonempty"));
        }
        if let Some(e) = self.epsilons.iter().find(|&&e| !(e > 0.0 && e < 1.0)) {
            return Err(usage(format!("epsilon must lie in (0, 1), got {e}")));
        }
        if self.leaf_size == 0 {
            return Err(usage("leaf size must be at least 1"));
        }
        if !(self.eta > 0.0) {
            return Err(usage("eta must be positive"));
        }
        if !(self.rel_jsd_tol > 0.0) {
            return Err(usage("relative JSD tolerance must be positive"));
        }
        for &n in &self.ns {
            if n < 2 * self.leaf_size {
                log::warn!("N = {n} is below twice the leaf size; the partition is a single dense block");
            }
        }
        Ok(())
    }

    /// Number of rows [`run`] produces.
    pub fn row_count(&self) -> usize {
        self.geometries.len() * self.kernels.len() * self.ns.len() * self.epsilons.len() * self.methods.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub geometry: String,
    pub kernel: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub epsilon: f64,
    pub method: String,
    pub nnz: Option<usize>,
    pub compression: Option<f64>,
    /// Relative Frobenius error for BREM/MREM; `‖E‖_max·N/‖B‖₁` for MREMmax.
    pub achieved_rel_error: Option<f64>,
    /// `exact`, `sampled`, or `failed` for flagged rows.
    pub error_mode: String,
    pub norm_mu: Option<f64>,
    pub norm_jsd: Option<f64>,
    pub norm_cols: Option<usize>,
    pub rank_min: Option<usize>,
    pub rank_med: Option<usize>,
    pub rank_max: Option<usize>,
    pub t_tree_ms: f64,
    pub t_norm_ms: f64,
    pub t_assemble_ms: f64,
    pub t_error_ms: f64,
    pub seed: u64,
}

impl ResultRow {
    pub fn is_flagged(&self) -> bool {
        self.error_mode == "failed"
    }

    /// Key shared by rows that belong to the same spec point.
    pub fn point_key(&self) -> (String, String, usize, u64, u64) {
        (
            self.geometry.clone(),
            self.kernel.clone(),
            self.n,
            self.epsilon.to_bits(),
            self.seed,
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub rows: usize,
    pub flagged: usize,
}

enum MatrixNorm {
    Fro(NormEstimate),
    One(f64),
}

/// Runs every point of `spec`, writing the header and one row per build.
/// Rows are also returned. Methods at one point share the cloud and tree.
pub fn run<W: Write>(spec: &ExperimentSpec, out: W) -> Result<(Vec<ResultRow>, RunSummary)> {
    spec.validate()?;
    let mut w = csv::Writer::from_writer(out);
    let mut rows = Vec::with_capacity(spec.row_count());
    let mut summary = RunSummary::default();
    for &geometry in &spec.geometries {
        for &kernel in &spec.kernels {
            for &n in &spec.ns {
                for row in run_point(spec, geometry, kernel, n)? {
                    if row.is_flagged() {
                        summary.flagged += 1;
                    }
                    summary.rows += 1;
                    w.serialize(&row)?;
                    w.flush()?;
                    rows.push(row);
                }
            }
        }
    }
    if summary.rows == 0 {
        w.write_record(CSV_HEADER.split(','))?;
    }
    w.flush()?;
    Ok((rows, summary))
}

/// All ε × method builds for one (geometry, kernel, N).
pub fn run_point(spec: &ExperimentSpec, geometry: Geometry, kernel: Kernel, n: usize) -> Result<Vec<ResultRow>> {
    let t0 = Instant::now();
    let cloud = generate_points(geometry, n, spec.seed)?;
    let tree = ClusterTree::build(&cloud, spec.leaf_size)?;
    let partition = BlockPartition::build(&tree, spec.eta)?;
    let t_tree_ms = ms(t0);
    let oracle = KernelMatrix::new(&cloud, kernel);

    // Matrix norms are independent of ε, so each is computed once per point.
    let mut norms: BTreeMap<&'static str, (MatrixNorm, f64)> = BTreeMap::new();
    let error_mode = ErrorMode::auto(n, spec.exact_error_max_n, spec.seed);
    let mut rows = Vec::new();
    for &eps in &spec.epsilons {
        for &method in &spec.methods {
            let blank = ResultRow {
                geometry: geometry.name().to_string(),
                kernel: kernel.to_string(),
                n,
                epsilon: eps,
                method: method.name().to_string(),
                nnz: None,
                compression: None,
                achieved_rel_error: None,
                error_mode: "failed".to_string(),
                norm_mu: None,
                norm_jsd: None,
                norm_cols: None,
                rank_min: None,
                rank_med: None,
                rank_max: None,
                t_tree_ms,
                t_norm_ms: 0.0,
                t_assemble_ms: 0.0,
                t_error_ms: 0.0,
                seed: spec.seed,
            };
            let key = match method {
                Method::Brem => None,
                Method::Mrem => Some("fro"),
                Method::MremMax => Some("one"),
            };
            let mut row = blank;
            let mut config_norm = None;
            let mut estimate = None;
            if let Some(key) = key {
                let (norm, t) = match norms.get(key) {
                    Some((norm, t)) => (norm, *t),
                    None => {
                        let t1 = Instant::now();
                        let norm = if key == "fro" {
                            let cfg = SamplingConfig {
                                rel_jsd_tol: spec.rel_jsd_tol,
                                seed: spec.seed,
                                ..SamplingConfig::default()
                            };
                            MatrixNorm::Fro(estimate_fro_stochastic(&oracle, &cfg)?)
                        } else {
                            MatrixNorm::One(induced_one_norm(&oracle))
                        };
                        let entry = norms.entry(key).or_insert((norm, ms(t1)));
                        (&entry.0, entry.1)
                    }
                };
                row.t_norm_ms = t;
                match norm {
                    MatrixNorm::Fro(est) => {
                        row.norm_mu = Some(est.mu);
                        row.norm_jsd = Some(est.jsd);
                        row.norm_cols = Some(est.n_samples);
                        config_norm = Some(est.safe_fro_norm);
                        estimate = Some(*est);
                    }
                    MatrixNorm::One(one) => config_norm = Some(*one),
                }
            }

            let policy = TolerancePolicy::new(method, eps, config_norm, n)?;
            let mut config = BuildConfig::new(policy).with_error_mode(error_mode);
            config.seed = spec.seed;
            config.eta = spec.eta;
            config.leaf_size = spec.leaf_size;
            if let Some(est) = estimate {
                config = config.with_norm_estimate(est);
            }
            match assemble_with_tree(&oracle, &tree, &partition, &config) {
                Ok((_, report)) => {
                    let (lo, med, hi) = report.rank_summary();
                    let achieved = report.achieved.expect("error mode was set");
                    row.nnz = Some(report.nnz);
                    row.compression = Some(report.compression);
                    row.achieved_rel_error = Some(achieved.for_method(method));
                    row.error_mode = achieved.mode.name().to_string();
                    row.rank_min = Some(lo);
                    row.rank_med = Some(med);
                    row.rank_max = Some(hi);
                    row.t_assemble_ms = report.timings.assemble_ms;
                    row.t_error_ms = report.timings.error_ms;
                    log::info!(
                        "{} {} N={} eps={:e} {}: compression {:.3}, error {:.3e}",
                        row.geometry,
                        row.kernel,
                        n,
                        eps,
                        row.method,
                        report.compression,
                        achieved.for_method(method)
                    );
                }
                Err(e) => {
                    log::error!(
                        "{} {} N={} eps={:e} {}: build failed: {e}",
                        row.geometry,
                        row.kernel,
                        n,
                        eps,
                        row.method
                    );
                }
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(usage(format!("unexpected CSV header '{}'", header.join(","))));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IfRow {
    pub geometry: String,
    pub kernel: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub epsilon: f64,
    pub nnz_brem: usize,
    pub nnz_mrem: usize,
    pub improvement_factor: f64,
}

/// `nnz_BREM / nnz_MREM` for every point with both rows; unmatched or
/// flagged rows are skipped with a warning.
pub fn report_if(rows: &[ResultRow]) -> Vec<IfRow> {
    let mut pairs: BTreeMap<_, (Option<&ResultRow>, Option<&ResultRow>)> = BTreeMap::new();
    for row in rows {
        let slot = pairs.entry(row.point_key()).or_default();
        match row.method.parse::<Method>() {
            Ok(Method::Brem) => slot.0 = Some(row),
            Ok(Method::Mrem) => slot.1 = Some(row),
            _ => {}
        }
    }
    let mut out = Vec::new();
    for ((geometry, kernel, n, eps, _), pair) in pairs {
        let eps = f64::from_bits(eps);
        match pair {
            (Some(b), Some(m)) => match (b.nnz, m.nnz) {
                (Some(nb), Some(nm)) if nm > 0 => out.push(IfRow {
                    geometry,
                    kernel,
                    n,
                    epsilon: eps,
                    nnz_brem: nb,
                    nnz_mrem: nm,
                    improvement_factor: nb as f64 / nm as f64,
                }),
                _ => log::warn!("{geometry} {kernel} N={n} eps={eps:e}: flagged build, skipped"),
            },
            (None, None) => {}
            _ => log::warn!("{geometry} {kernel} N={n} eps={eps:e}: no matching BREM/MREM pair, skipped"),
        }
    }
    if out.is_empty() {
        log::warn!("no BREM/MREM pairs found");
    }
    out
}

pub fn write_if<W: Write>(rows: &[IfRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "geometry",
            "kernel",
            "N",
            "epsilon",
            "nnz_brem",
            "nnz_mrem",
            "improvement_factor",
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n_lists() {
        assert_eq!(parse_n_list("512, 1024").unwrap(), vec![512, 1024]);
        assert_eq!(parse_n_list("2^9..2^11").unwrap(), vec![512, 1024, 2048]);
        assert!(parse_n_list("2^11..2^9").is_err());
        assert!(parse_n_list("0").is_err());
        assert!(parse_n_list("").is_err());
        assert!(parse_n_list("abc").is_err());
    }

    #[test]
    fn header_matches_row_fields() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(ResultRow {
            geometry: "cube".into(),
            kernel: "log".into(),
            n: 1,
            epsilon: 0.1,
            method: "BREM".into(),
            nnz: None,
            compression: None,
            achieved_rel_error: None,
            error_mode: "failed".into(),
            norm_mu: None,
            norm_jsd: None,
            norm_cols: None,
            rank_min: None,
            rank_med: None,
            rank_max: None,
            t_tree_ms: 0.0,
            t_norm_ms: 0.0,
            t_assemble_ms: 0.0,
            t_error_ms: 0.0,
            seed: 0,
        })
        .unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    }

    #[test]
    fn invalid_specs() {
        let ok = ExperimentSpec::default();
        assert!(ok.validate().is_ok());
        assert!(ExperimentSpec {
            methods: vec![],
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(ExperimentSpec {
            epsilons: vec![0.0],
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(ExperimentSpec {
            leaf_size: 0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(ExperimentSpec { eta: -1.0, ..ok }.validate().is_err());
    }
}
