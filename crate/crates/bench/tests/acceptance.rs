//! Acceptance suite. Each check prints one PASS/FAIL line; the process exits
//! nonzero if any check fails. Pass check names as arguments to run a subset.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use hmtol::hmatrix::{assemble_with_tree, BlockData};
use hmtol::lra::{build_block, fro_truncation_rank, maxnorm_truncation_rank, outer_product_svd, LraParams};
use hmtol::norm::{estimate_fro_stochastic, estimate_fro_via_coarse, exact_fro_norm, induced_one_norm, SamplingConfig};
use hmtol::oracle::to_dense;
use hmtol::{
    assemble, generate_points, BlockBudget, BlockPartition, BudgetKind, BuildConfig, ClusterTree, ErrorMode, Geometry,
    Kernel, KernelMatrix, LowRankFactors, Method, TolerancePolicy,
};
use hmtol_bench::{report_if, run, ExperimentSpec, ResultRow};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KERNELS: [Kernel; 4] = [
    Kernel::InversePower(1),
    Kernel::InversePower(2),
    Kernel::InversePower(3),
    Kernel::Log,
];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn spec(geometries: &[Geometry], kernels: &[Kernel], ns: &[usize], eps: &[f64], methods: &[Method]) -> ExperimentSpec {
    ExperimentSpec {
        geometries: geometries.to_vec(),
        kernels: kernels.to_vec(),
        ns: ns.to_vec(),
        epsilons: eps.to_vec(),
        methods: methods.to_vec(),
        ..ExperimentSpec::default()
    }
}

fn rows_for(spec: &ExperimentSpec) -> Vec<ResultRow> {
    run(spec, std::io::sink()).expect("experiment run").0
}

/// Every method, kernel and geometry at N ∈ {512, 2048}, ε ∈ {1e-3, 1e-5}:
/// achieved error ≤ ε by an exact sweep.
fn global_bound() -> Outcome {
    let s = spec(&Geometry::ALL, &KERNELS, &[512, 2048], &[1e-3, 1e-5], &Method::ALL);
    let rows = rows_for(&s);
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    for r in &rows {
        let label = format!("{} {} N={} eps={:e} {}", r.geometry, r.kernel, r.n, r.epsilon, r.method);
        match r.achieved_rel_error {
            Some(e) if r.error_mode == "exact" => {
                let ratio = e / r.epsilon;
                if ratio > worst.0 {
                    worst = (ratio, label.clone());
                }
                if ratio > 1.0 {
                    failures.push(format!("{label}: {e:.3e}"));
                }
            }
            _ => failures.push(format!("{label}: no exact measurement")),
        }
    }
    let pass = failures.is_empty() && rows.len() == s.row_count();
    outcome(
        pass,
        format!(
            "{} builds, worst achieved/eps = {:.3} ({}){}",
            rows.len(),
            worst.0,
            worst.1,
            if failures.is_empty() {
                String::new()
            } else {
                format!("; violations: {}", failures.join(", "))
            }
        ),
    )
}

/// MREM error within a factor 100 of ε at N = 4096 for p ∈ {2, 3} on surf and edge.
fn mrem_tightness() -> Outcome {
    let eps = 1e-5;
    let s = spec(
        &[Geometry::Surf, Geometry::Edge],
        &[Kernel::InversePower(2), Kernel::InversePower(3)],
        &[4096],
        &[eps],
        &[Method::Brem, Method::Mrem],
    );
    let rows = rows_for(&s);
    let mut parts = Vec::new();
    let mut pass = true;
    let mut within_ten = 0;
    let mut mrem_count = 0;
    for pair in rows.chunks(2) {
        let (b, m) = (&pair[0], &pair[1]);
        let (eb, em) = (
            b.achieved_rel_error.unwrap_or(f64::NAN),
            m.achieved_rel_error.unwrap_or(f64::NAN),
        );
        let ok = em >= eps / 100.0 && em <= eps;
        pass &= ok;
        mrem_count += 1;
        within_ten += usize::from(em >= eps / 10.0);
        parts.push(format!(
            "{} {}: MREM {em:.2e}{} BREM {eb:.2e}",
            m.geometry,
            m.kernel,
            if ok { "" } else { " (below eps/100)" }
        ));
    }
    outcome(
        pass,
        format!("{}; {within_ten}/{mrem_count} within eps/10", parts.join("; ")),
    )
}

fn if_table(rows: &[ResultRow]) -> BTreeMap<(String, String), f64> {
    report_if(rows)
        .into_iter()
        .map(|r| ((r.geometry, r.kernel), r.improvement_factor))
        .collect()
}

/// Improvement factors at N = 8192, ε = 1e-5 on a shared cloud and tree.
fn improvement_factor(table: &BTreeMap<(String, String), f64>) -> Outcome {
    let mut pass = table.len() == 9;
    let mut parts = Vec::new();
    for ((geometry, kernel), &f) in table {
        let floor = match (geometry.as_str(), kernel.as_str()) {
            (_, "invpow:1") => 0.95,
            ("surf" | "edge", _) => 1.2,
            _ => 0.0,
        };
        let ok = f >= floor;
        pass &= ok;
        parts.push(format!(
            "{geometry} {kernel} {f:.3}{}",
            if ok { "" } else { " (below floor)" }
        ));
    }
    outcome(pass, parts.join(", "))
}

/// IF nondecreasing in p per geometry, with at most one inversion of at most 5%.
fn if_trend(table: &BTreeMap<(String, String), f64>) -> Outcome {
    let mut inversions = Vec::new();
    let mut parts = Vec::new();
    for g in Geometry::ALL {
        let seq: Vec<f64> = (1..=3)
            .filter_map(|p| table.get(&(g.name().to_string(), format!("invpow:{p}"))).copied())
            .collect();
        if seq.len() != 3 {
            return outcome(false, format!("missing IF values for {g}"));
        }
        for w in seq.windows(2) {
            if w[1] < w[0] {
                inversions.push((g, 1.0 - w[1] / w[0]));
            }
        }
        parts.push(format!("{g}: {:.3} -> {:.3} -> {:.3}", seq[0], seq[1], seq[2]));
    }
    let pass = inversions.len() <= 1 && inversions.iter().all(|&(_, drop)| drop <= 0.05);
    outcome(pass, format!("{}; {} inversion(s)", parts.join(", "), inversions.len()))
}

fn random_matrix(m: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0))
}

fn amax(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// Truncation and block-building checks on random noisy low-rank blocks.
fn recompression() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let trials = 120;
    let (mut tail_worst, mut tail_worst_rel_tail) = (0.0f64, 0.0f64);
    let (mut max_mismatch, mut block_failures) = (0, Vec::new());
    let params = LraParams::default();
    for t in 0..trials {
        let m = rng.gen_range(1..=128);
        let n = rng.gen_range(1..=128);
        let r = rng.gen_range(1..=12);
        let noise = 10f64.powi(-rng.gen_range(4..=9));
        // Signal with decaying strength plus a few noise-level terms.
        let mut u = random_matrix(m, r + 3, &mut rng);
        for l in 0..r + 3 {
            let s = if l < r { 0.5f64.powi(l as i32) } else { noise };
            u.column_mut(l).scale_mut(s);
        }
        let v = random_matrix(n, r + 3, &mut rng);
        let f = LowRankFactors::new(u, v).unwrap();
        let dense = f.to_dense();
        let svd = outer_product_svd(&f);

        // Frobenius truncation: dense residual against the singular-value tail.
        let budget = rng.gen_range(0.0..1.0) * svd.fro_norm();
        let k = fro_truncation_rank(&svd, budget).unwrap();
        let resid = (&dense - svd.truncate(k).to_dense()).norm();
        let tail = svd.tail_norm(k);
        // Relative to the block norm: forming the dense residual costs about
        // machine epsilon times ‖B̄¹‖_F whatever the size of the tail.
        tail_worst = tail_worst.max((resid - tail).abs() / svd.fro_norm().max(f64::MIN_POSITIVE));
        if tail > 0.0 {
            tail_worst_rel_tail = tail_worst_rel_tail.max((resid - tail).abs() / tail);
        }

        // Max-norm truncation: compare with a linear scan over k on dense matrices.
        let mbudget = rng.gen_range(0.0..1.0) * amax(&dense);
        let km = maxnorm_truncation_rank(&svd, mbudget).unwrap();
        let scan = (0..=svd.rank())
            .find(|&k| amax(&(&dense - svd.truncate(k).to_dense())) <= mbudget)
            .unwrap_or(svd.rank());
        if km != scan {
            max_mismatch += 1;
        }

        // End-to-end block build on the noisy dense block.
        let block = &dense + random_matrix(m, n, &mut rng) * (noise * 1e-3);
        let entry = |i: usize, j: usize| block[(i, j)];
        let eps = 10f64.powi(-rng.gen_range(2..=6));
        for kind in [
            BudgetKind::RelativeFro,
            BudgetKind::AbsoluteFro,
            BudgetKind::AbsoluteMax,
        ] {
            let value = match kind {
                BudgetKind::RelativeFro => eps,
                BudgetKind::AbsoluteFro => eps * block.norm(),
                BudgetKind::AbsoluteMax => eps * amax(&block),
            };
            let out = build_block(entry, m, n, BlockBudget { kind, value }, &params).unwrap();
            if !out.converged {
                // Stored densely by the assembler, so the block error would be zero.
                continue;
            }
            let err = &block - out.factors.to_dense();
            let (achieved, allowed) = match kind {
                BudgetKind::RelativeFro => (err.norm(), eps * block.norm()),
                BudgetKind::AbsoluteFro => (err.norm(), value),
                BudgetKind::AbsoluteMax => (amax(&err), value),
            };
            if achieved > allowed {
                block_failures.push(format!("trial {t} {m}x{n} {kind:?}: {achieved:.3e} > {allowed:.3e}"));
            }
        }
    }
    let pass = tail_worst <= 1e-10 && max_mismatch == 0 && block_failures.is_empty();
    outcome(
        pass,
        format!(
            "{trials} blocks: tail identity worst diff {tail_worst:.1e} relative to the block norm \
             ({tail_worst_rel_tail:.1e} relative to the tail), max-norm rank mismatches {max_mismatch}, \
             build_block violations {}{}",
            block_failures.len(),
            if block_failures.is_empty() {
                String::new()
            } else {
                format!(" ({})", block_failures.join("; "))
            }
        ),
    )
}

/// Sampled Frobenius norm at N = 1024, p = 2, surf over 100 seeds.
fn norm_calibration() -> Outcome {
    let runs = 100;
    let (mut inside, mut safe, mut full) = (0, 0, 0);
    for seed in 0..runs {
        let cloud = generate_points(Geometry::Surf, 1024, seed).unwrap();
        let oracle = KernelMatrix::new(&cloud, Kernel::InversePower(2));
        let cfg = SamplingConfig {
            seed,
            ..SamplingConfig::default()
        };
        let est = estimate_fro_stochastic(&oracle, &cfg).unwrap();
        let exact = exact_fro_norm(&oracle);
        // JSD is for μ ≈ ‖B‖²; halving the relative spread carries it to √μ.
        // The 1e-12 slack absorbs summation-order rounding.
        let half_width = 0.5 * est.rel_jsd() * exact;
        inside += usize::from((est.fro_norm() - exact).abs() <= 3.0 * half_width + 1e-12 * exact);
        safe += usize::from(est.safe_fro_norm <= exact * (1.0 + 1e-12));
        full += usize::from(est.n_samples == 1024);
    }
    outcome(
        inside >= 95 && safe >= 97,
        format!(
            "{inside}/{runs} within 3 half-widths, {safe}/{runs} safe norm below exact ({full} runs read every column)"
        ),
    )
}

/// The same calibration where the estimator stops early (cube, p = 1); reported only.
fn norm_calibration_early_stop() -> String {
    let runs = 100;
    let (mut inside, mut safe, mut cols) = (0, 0, 0);
    let cloud = generate_points(Geometry::Cube, 1024, 0).unwrap();
    let oracle = KernelMatrix::new(&cloud, Kernel::InversePower(1));
    let exact = exact_fro_norm(&oracle);
    for seed in 0..runs {
        let cfg = SamplingConfig {
            seed,
            ..SamplingConfig::default()
        };
        let est = estimate_fro_stochastic(&oracle, &cfg).unwrap();
        let half_width = 0.5 * est.rel_jsd() * exact;
        inside += usize::from((est.fro_norm() - exact).abs() <= 3.0 * half_width + 1e-12 * exact);
        safe += usize::from(est.safe_fro_norm <= exact * (1.0 + 1e-12));
        cols += est.n_samples;
    }
    format!(
        "cube p=1: {inside}/{runs} within 3 half-widths, {safe}/{runs} safe, mean {} columns",
        cols / runs as usize
    )
}

/// `(1 + ε̃)⁻¹‖B̃‖_F ≤ ‖B‖_F` for coarse BREM builds at N = 512.
fn coarse_norm() -> Outcome {
    let n = 512;
    let mut checks = 0;
    let mut failures = Vec::new();
    let mut closest = f64::INFINITY;
    for g in Geometry::ALL {
        let cloud = generate_points(g, n, 0).unwrap();
        for kernel in KERNELS {
            let oracle = KernelMatrix::new(&cloud, kernel);
            let exact = exact_fro_norm(&oracle);
            for eps_tilde in [0.5, 0.1] {
                let cfg =
                    BuildConfig::new(TolerancePolicy::brem(eps_tilde, n).unwrap()).with_error_mode(ErrorMode::Exact);
                let (h, report) = assemble(&cloud, kernel, &cfg).unwrap();
                let lower = estimate_fro_via_coarse(&h, eps_tilde);
                checks += 1;
                closest = closest.min(exact / lower);
                let achieved = report.achieved.unwrap().rel_fro;
                if lower > exact || achieved > eps_tilde {
                    failures.push(format!("{g} {kernel} eps~={eps_tilde}: {lower:.6e} vs {exact:.6e}"));
                }
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{checks} coarse builds, smallest exact/estimate = {closest:.4}{}",
            if failures.is_empty() {
                String::new()
            } else {
                format!("; violations: {}", failures.join(", "))
            }
        ),
    )
}

/// Matrix-vector products at N = 1024 against a dense multiply.
fn mvp_contract() -> Outcome {
    let n = 1024;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut builds = 0;
    let mut failures = Vec::new();
    for g in Geometry::ALL {
        let cloud = generate_points(g, n, 1).unwrap();
        for kernel in KERNELS {
            let oracle = KernelMatrix::new(&cloud, kernel);
            let b = to_dense(&oracle);
            let fro = b.norm();
            for eps in [1e-3, 1e-5] {
                for policy in [
                    TolerancePolicy::brem(eps, n).unwrap(),
                    TolerancePolicy::mrem(eps, n, fro).unwrap(),
                ] {
                    let (h, _) = assemble(&cloud, kernel, &BuildConfig::new(policy)).unwrap();
                    builds += 1;
                    for _ in 0..20 {
                        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        let xv = DVector::from_column_slice(&x);
                        let y = DVector::from_vec(h.mvp(&x).unwrap());
                        let ratio = (&b * &xv - y).norm() / (eps * fro * xv.norm());
                        worst = worst.max(ratio);
                        if ratio > 1.0 {
                            failures.push(format!("{g} {kernel} {}", policy.method()));
                        }
                    }
                }
            }
        }
    }
    failures.dedup();

    // One dense block: the product must match a sequential dense loop exactly.
    let cloud = generate_points(Geometry::Cube, n, 3).unwrap();
    let kernel = Kernel::InversePower(1);
    let cfg = BuildConfig::new(TolerancePolicy::brem(1e-5, n).unwrap()).with_leaf_size(n);
    let (h, _) = assemble(&cloud, kernel, &cfg).unwrap();
    let b = to_dense(&KernelMatrix::new(&cloud, kernel));
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y = h.mvp(&x).unwrap();
    let identical = (0..n).all(|i| {
        let mut acc = 0.0;
        for j in 0..n {
            acc += b[(i, j)] * x[j];
        }
        acc.to_bits() == y[i].to_bits()
    });
    outcome(
        failures.is_empty() && identical,
        format!(
            "{builds} builds x 20 vectors, worst |Bx - B~x| / (eps |B|_F |x|) = {worst:.3e}; single-block product {}",
            if identical { "bit-identical" } else { "differs" }
        ),
    )
}

/// Tiling for every N ≤ 512, nnz accounting, and CSV determinism.
fn structure() -> Outcome {
    let mut tiling_failures = 0;
    for g in Geometry::ALL {
        for n in 1..=512 {
            let cloud = generate_points(g, n, n as u64).unwrap();
            let tree = ClusterTree::build(&cloud, 16).unwrap();
            let part = BlockPartition::build(&tree, 2.0).unwrap();
            let mut hits = vec![0u8; n * n];
            for b in part.blocks() {
                for i in b.row_start..b.row_end {
                    for h in &mut hits[i * n + b.col_start..i * n + b.col_end] {
                        *h += 1;
                    }
                }
            }
            if part.covered_entries() != (n * n) as u128 || hits.iter().any(|&h| h != 1) {
                tiling_failures += 1;
            }
        }
    }

    let mut accounting_failures = 0;
    for g in Geometry::ALL {
        let n = 2000;
        let cloud = generate_points(g, n, 5).unwrap();
        let tree = ClusterTree::build(&cloud, 32).unwrap();
        let part = BlockPartition::build(&tree, 2.0).unwrap();
        let oracle = KernelMatrix::new(&cloud, Kernel::InversePower(2));
        let fro = exact_fro_norm(&oracle);
        let one = induced_one_norm(&oracle);
        for policy in [
            TolerancePolicy::brem(1e-4, n).unwrap(),
            TolerancePolicy::mrem(1e-4, n, fro).unwrap(),
            TolerancePolicy::mrem_max(1e-4, n, one).unwrap(),
        ] {
            let (h, report) = assemble_with_tree(&oracle, &tree, &part, &BuildConfig::new(policy)).unwrap();
            let manual: usize = h
                .blocks()
                .map(|(b, d)| match d {
                    BlockData::Dense(_) => b.area(),
                    BlockData::LowRank(f) => (b.rows() + b.cols()) * f.rank(),
                })
                .sum();
            let ok = report.nnz == manual
                && report.nnz == h.nnz()
                && (report.compression - (n * n) as f64 / manual as f64).abs() <= 1e-12 * report.compression
                && report.covered_entries == (n * n) as u128;
            accounting_failures += usize::from(!ok);
        }
    }

    let s = ExperimentSpec {
        geometries: vec![Geometry::Surf, Geometry::Edge],
        kernels: vec![Kernel::InversePower(2), Kernel::Log],
        ns: vec![600, 1500],
        epsilons: vec![1e-3, 1e-5],
        methods: Method::ALL.to_vec(),
        seed: 11,
        ..ExperimentSpec::default()
    };
    let csv_a = run_to_string(&s);
    let csv_b = run_to_string(&s);
    let deterministic = strip_timings(&csv_a) == strip_timings(&csv_b);

    outcome(
        tiling_failures == 0 && accounting_failures == 0 && deterministic,
        format!(
            "tiling failures {tiling_failures} over N = 1..512 x 3 geometries, nnz accounting failures \
             {accounting_failures}/9, CSV {}",
            if deterministic {
                "deterministic"
            } else {
                "differs between runs"
            }
        ),
    )
}

fn run_to_string(s: &ExperimentSpec) -> String {
    let mut buf = Vec::new();
    run(s, &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

/// Drops the `t_*_ms` columns.
fn strip_timings(csv: &str) -> Vec<Vec<String>> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let keep: Vec<usize> = (0..header.len()).filter(|&i| !header[i].starts_with("t_")).collect();
    std::iter::once(header.join(","))
        .chain(lines.map(str::to_string))
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            keep.iter().map(|&i| cols.get(i).unwrap_or(&"").to_string()).collect()
        })
        .collect()
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));

    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut record = |idx: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(name) {
            let t = Instant::now();
            let out = f();
            let secs = t.elapsed().as_secs_f64();
            println!(
                "acceptance {idx} {name}: {} ({secs:.1}s) {}",
                if out.pass { "PASS" } else { "FAIL" },
                out.detail
            );
            results.push((idx, name, out, secs));
        }
    };

    record(1, "global_bound", &mut global_bound);
    record(2, "mrem_tightness", &mut mrem_tightness);
    let mut table = None;
    let mut if_sweep = || {
        let s = spec(
            &Geometry::ALL,
            &[
                Kernel::InversePower(1),
                Kernel::InversePower(2),
                Kernel::InversePower(3),
            ],
            &[8192],
            &[1e-5],
            &[Method::Brem, Method::Mrem],
        );
        if_table(&rows_for(&s))
    };
    record(3, "improvement_factor", &mut || {
        let t = table.get_or_insert_with(&mut if_sweep);
        improvement_factor(t)
    });
    record(4, "if_trend", &mut || {
        let t = table.get_or_insert_with(&mut if_sweep);
        if_trend(t)
    });
    record(5, "recompression", &mut recompression);
    record(6, "norm_calibration", &mut || {
        let mut out = norm_calibration();
        out.detail = format!("{}; informational {}", out.detail, norm_calibration_early_stop());
        out
    });
    record(7, "coarse_norm", &mut coarse_norm);
    record(8, "mvp_contract", &mut mvp_contract);
    record(9, "structure", &mut structure);

    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.2.pass)
        .map(|r| format!("{} {}", r.0, r.1))
        .collect();
    println!(
        "acceptance summary: {}/{} passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed: {}", failed.join(", "))
        }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
