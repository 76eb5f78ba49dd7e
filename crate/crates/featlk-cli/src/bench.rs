//! Benchmark suites over generated primitives: per-pair CSV rows, aggregate
//! blocks, and success-ratio curves. Pairs are processed by a worker pool and
//! rows are written in input order; per-pair seeds derive from the configured
//! seed, so outputs are byte-stable for a fixed configuration.

use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use featlk::cloud::{
    corrupt_halfspace, corrupt_noise, corrupt_sparsify, generate_primitive, normalize_unit_box,
    sample_perturbation, PairSpec, PointCloud, PrimitiveKind,
};
use featlk::featnet::FeatureNet;
use featlk::icp::{icp_register, IcpConfig};
use featlk::metrics::{
    aggregate, auc, pair_error, success_curve_joint, success_curve_rot, success_curve_trans,
    PairError, SuccessCriterion,
};
use featlk::se3::exp_twist;
use featlk::solver::{
    register, register_voxelized, RegistrationResult, SolverConfig, SolverMethod,
    VoxelSolverConfig,
};

use crate::config::{parse_kinds, BenchSection, Config};

/// One benchmark row: a (case, pair, method) cell of a suite.
struct Row {
    case: String,
    pair: usize,
    kind: String,
    method: String,
    outcome: Outcome,
}

enum Outcome {
    Solved {
        error: PairError,
        iterations: usize,
        termination: String,
        wall_ms: f64,
        jacobian_builds: usize,
    },
    Failed {
        message: String,
        wall_ms: f64,
    },
}

impl Row {
    fn error(&self) -> Option<&PairError> {
        match &self.outcome {
            Outcome::Solved { error, .. } => Some(error),
            Outcome::Failed { .. } => None,
        }
    }
}

fn solver_config(bench: &BenchSection, method: SolverMethod) -> SolverConfig {
    SolverConfig {
        max_iters: bench.max_iters,
        method,
        ..SolverConfig::default()
    }
}

fn criterion(bench: &BenchSection) -> SuccessCriterion {
    SuccessCriterion {
        rot_thresh_deg: bench.rot_thresh_deg,
        trans_thresh: bench.trans_thresh,
    }
}

fn pair_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
        .wrapping_mul(0x2545_f491_4f6c_dd1d)
}

fn bench_pairs(bench: &BenchSection) -> Result<Vec<PairSpec>> {
    let kinds = parse_kinds(&bench.kinds).map_err(|e| anyhow::anyhow!(e))?;
    (0..bench.pairs)
        .map(|i| {
            PairSpec::synthesize(
                kinds[i % kinds.len()],
                bench.n_points,
                pair_seed(bench.seed, i),
                bench.max_rot_deg,
                bench.max_trans,
            )
            .map_err(Into::into)
        })
        .collect()
}

/// Dense composite scene: several primitives shrunk and scattered, then the
/// merged cloud is normalized. Exercises the regime where one global feature
/// vector at a fixed point budget cannot capture the geometry.
fn composite_pair(bench: &BenchSection, index: usize) -> Result<PairSpec> {
    let all_kinds = [
        PrimitiveKind::Cube,
        PrimitiveKind::Cylinder,
        PrimitiveKind::Torus,
        PrimitiveKind::PlaneWithBumps,
        PrimitiveKind::Sphere,
    ];
    let seed = pair_seed(bench.seed ^ 0xc0ffee, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    for obj in 0..bench.scene_objects {
        let kind = all_kinds[(index + obj) % all_kinds.len()];
        let part = normalize_unit_box(&generate_primitive(
            kind,
            bench.scene_points_per_object,
            seed.wrapping_add(obj as u64 + 1),
        )?)?;
        let offset = nalgebra::Vector3::from_fn(|_, _| rng.gen_range(-0.6..0.6));
        points.extend(part.points().iter().map(|p| p * 0.6 + offset));
    }
    let scene = normalize_unit_box(&PointCloud::new(points, format!("scene-{index}"))?)?;
    let gt = exp_twist(&sample_perturbation(
        &mut rng,
        bench.max_rot_deg,
        bench.max_trans,
    ));
    Ok(PairSpec {
        template: scene.apply(&gt),
        source: scene,
        gt,
    })
}

/// Voxelize the template and assign each source point to the cell of its
/// aligned position: the pairing a pipeline over roughly-aligned scans
/// establishes before the synthetic perturbation.
fn aligned_voxel_solve(
    net: &FeatureNet,
    pair: &PairSpec,
    cfg: &SolverConfig,
    grid_dims: (usize, usize, usize),
    min_points: usize,
    cap: usize,
    seed: u64,
) -> Result<RegistrationResult, featlk::solver::SolveError> {
    let partition =
        featlk::cloud::voxelize(&pair.template, grid_dims, min_points, cap, seed)?;
    let (nx, ny, nz) = partition.grid_dims;
    let mut cell_slot = vec![usize::MAX; nx * ny * nz];
    for (slot, voxel) in partition.voxels.iter().enumerate() {
        let (cx, cy, cz) = voxel.cell;
        cell_slot[(cx * ny + cy) * nz + cz] = slot;
    }
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); partition.voxels.len()];
    for (idx, p) in pair.source.points().iter().enumerate() {
        let (cx, cy, cz) = partition.cell_of(&pair.gt.apply_point(p));
        let slot = cell_slot[(cx * ny + cy) * nz + cz];
        if slot != usize::MAX {
            bins[slot].push(idx);
        }
    }
    featlk::solver::register_voxelized_paired(
        net,
        &pair.source,
        &pair.template,
        cfg,
        &partition,
        &bins,
    )
}

fn timed_register(
    net: &FeatureNet,
    source: &PointCloud,
    template: &PointCloud,
    gt: &featlk::se3::RigidTransform,
    cfg: &SolverConfig,
) -> Outcome {
    let t0 = Instant::now();
    match register(net, source, template, cfg) {
        Ok(result) => solved(result, gt, t0),
        Err(e) => Outcome::Failed {
            message: e.to_string(),
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        },
    }
}

fn solved(
    result: RegistrationResult,
    gt: &featlk::se3::RigidTransform,
    t0: Instant,
) -> Outcome {
    Outcome::Solved {
        error: pair_error(&result.estimate, gt),
        iterations: result.iterations,
        termination: result.termination.as_str().to_string(),
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        jacobian_builds: result.jacobian_builds,
    }
}

fn write_rows(path: &Path, suite: &str, rows: &[Row], crit: &SuccessCriterion) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    writer.write_record([
        "suite",
        "case",
        "pair",
        "kind",
        "method",
        "rot_err_deg",
        "trans_err",
        "success",
        "iterations",
        "termination",
        "wall_ms",
        "jacobian_builds",
    ])?;
    for row in rows {
        match &row.outcome {
            Outcome::Solved {
                error,
                iterations,
                termination,
                wall_ms,
                jacobian_builds,
            } => {
                writer.write_record([
                    suite,
                    &row.case,
                    &row.pair.to_string(),
                    &row.kind,
                    &row.method,
                    &format!("{:.9e}", error.rot_err_deg),
                    &format!("{:.9e}", error.trans_err),
                    &(crit.is_success(error) as u8).to_string(),
                    &iterations.to_string(),
                    termination,
                    &format!("{wall_ms:.3}"),
                    &jacobian_builds.to_string(),
                ])?;
            }
            Outcome::Failed { message, wall_ms } => {
                writer.write_record([
                    suite,
                    &row.case,
                    &row.pair.to_string(),
                    &row.kind,
                    &row.method,
                    "nan",
                    "nan",
                    "0",
                    "0",
                    &format!("error: {message}"),
                    &format!("{wall_ms:.3}"),
                    "0",
                ])?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

/// Aggregates per (case, method): failed rows count against the success ratio
/// but are excluded from RMSE/median.
fn write_aggregates(path: &Path, rows: &[Row], crit: &SuccessCriterion) -> Result<()> {
    let mut groups: Vec<(String, String)> = rows
        .iter()
        .map(|r| (r.case.clone(), r.method.clone()))
        .collect();
    groups.sort();
    groups.dedup();

    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record([
        "case",
        "method",
        "pairs",
        "failures",
        "rmse_rot",
        "median_rot",
        "rmse_trans",
        "median_trans",
        "success_ratio",
        "auc_joint",
        "auc_rot",
        "auc_trans",
        "mean_wall_ms",
    ])?;
    for (case, method) in groups {
        let members: Vec<&Row> = rows
            .iter()
            .filter(|r| r.case == case && r.method == method)
            .collect();
        let errors: Vec<PairError> = members.iter().filter_map(|r| r.error().copied()).collect();
        let failures = members.len() - errors.len();
        let total = members.len();
        let mean_wall = members
            .iter()
            .map(|r| match &r.outcome {
                Outcome::Solved { wall_ms, .. } | Outcome::Failed { wall_ms, .. } => *wall_ms,
            })
            .sum::<f64>()
            / total.max(1) as f64;
        if errors.is_empty() {
            writer.write_record([
                case.as_str(),
                method.as_str(),
                &total.to_string(),
                &failures.to_string(),
                "nan",
                "nan",
                "nan",
                "nan",
                "0",
                "nan",
                "nan",
                "nan",
                &format!("{mean_wall:.3}"),
            ])?;
            continue;
        }
        let agg = aggregate(&errors, crit)?;
        // Success counts failures in the denominator.
        let success_ratio =
            errors.iter().filter(|e| crit.is_success(e)).count() as f64 / total as f64;
        let joint = success_curve_joint(&errors, crit, 64);
        let rot = success_curve_rot(&errors, crit.rot_thresh_deg, 64);
        let trans = success_curve_trans(&errors, crit.trans_thresh, 64);
        writer.write_record([
            case.as_str(),
            method.as_str(),
            &total.to_string(),
            &failures.to_string(),
            &format!("{:.9e}", agg.rmse_rot),
            &format!("{:.9e}", agg.median_rot),
            &format!("{:.9e}", agg.rmse_trans),
            &format!("{:.9e}", agg.median_trans),
            &format!("{success_ratio:.6}"),
            &format!("{:.6}", auc(&joint[1..])?),
            &format!("{:.6}", auc(&rot[1..])?),
            &format!("{:.6}", auc(&trans[1..])?),
            &format!("{mean_wall:.3}"),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

fn write_curves(path: &Path, rows: &[Row], crit: &SuccessCriterion, samples: usize) -> Result<()> {
    let mut methods: Vec<String> = rows.iter().map(|r| r.method.clone()).collect();
    methods.sort();
    methods.dedup();

    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record([
        "method",
        "rot_thresh_deg",
        "trans_thresh",
        "ratio_joint",
        "ratio_rot",
        "ratio_trans",
    ])?;
    for method in methods {
        let errors: Vec<PairError> = rows
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| r.error().copied())
            .collect();
        if errors.is_empty() {
            continue;
        }
        let joint = success_curve_joint(&errors, crit, samples);
        let rot = success_curve_rot(&errors, crit.rot_thresh_deg, samples);
        let trans = success_curve_trans(&errors, crit.trans_thresh, samples);
        for i in 0..samples {
            writer.write_record([
                method.as_str(),
                &format!("{:.9e}", rot[i].0),
                &format!("{:.9e}", trans[i].0),
                &format!("{:.6}", joint[i].1),
                &format!("{:.6}", rot[i].1),
                &format!("{:.6}", trans[i].1),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

pub fn run_suite(suite: &str, cfg: &Config, net: &FeatureNet, out_dir: &Path) -> Result<()> {
    let bench = &cfg.bench;
    let crit = criterion(bench);
    let t0 = Instant::now();
    let rows = match suite {
        "accuracy" => accuracy_suite(bench, net)?,
        "fidelity" => fidelity_suite(bench, net)?,
        "noise" => noise_suite(bench, net)?,
        "sparsity" => sparsity_suite(bench, net)?,
        "partial" => partial_suite(bench, net)?,
        "voxel" => voxel_suite(bench, net)?,
        "icp-compare" => icp_compare_suite(bench, net)?,
        other => bail!(
            "unknown suite '{other}' \
             (accuracy | fidelity | noise | sparsity | partial | voxel | icp-compare)"
        ),
    };
    write_rows(&out_dir.join(format!("{suite}_rows.csv")), suite, &rows, &crit)?;
    write_aggregates(&out_dir.join(format!("{suite}_aggregates.csv")), &rows, &crit)?;
    if matches!(suite, "accuracy" | "icp-compare") {
        write_curves(
            &out_dir.join(format!("{suite}_curves.csv")),
            &rows,
            &crit,
            bench.curve_samples,
        )?;
    }
    if suite == "fidelity" {
        write_fidelity_curves(&out_dir.join("fidelity_curves.csv"), bench, &rows, &crit)?;
    }
    eprintln!(
        "suite {suite}: {} rows in {:.1}s -> {}",
        rows.len(),
        t0.elapsed().as_secs_f64(),
        out_dir.display()
    );
    Ok(())
}

fn accuracy_suite(bench: &BenchSection, net: &FeatureNet) -> Result<Vec<Row>> {
    let pairs = bench_pairs(bench)?;
    let cfg = solver_config(bench, SolverMethod::Analytical);
    Ok(pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| Row {
            case: "base".into(),
            pair: i,
            kind: pair.source.id().to_string(),
            method: "analytical".into(),
            outcome: timed_register(net, &pair.source, &pair.template, &pair.gt, &cfg),
        })
        .collect())
}

fn fidelity_suite(bench: &BenchSection, net: &FeatureNet) -> Result<Vec<Row>> {
    let pairs = bench_pairs(bench)?;
    let analytical = solver_config(bench, SolverMethod::Analytical);
    let numerical = solver_config(
        bench,
        SolverMethod::Numerical {
            step: bench.fidelity_step,
        },
    );
    Ok(pairs
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, pair)| {
            [
                Row {
                    case: "base".into(),
                    pair: i,
                    kind: pair.source.id().to_string(),
                    method: "analytical".into(),
                    outcome: timed_register(net, &pair.source, &pair.template, &pair.gt, &analytical),
                },
                Row {
                    case: "base".into(),
                    pair: i,
                    kind: pair.source.id().to_string(),
                    method: format!("numerical_t{:e}", bench.fidelity_step),
                    outcome: timed_register(net, &pair.source, &pair.template, &pair.gt, &numerical),
                },
            ]
        })
        .collect())
}

/// Success ratio per method at each fidelity threshold, joint scaling from the
/// criterion's rotation/translation proportion.
fn write_fidelity_curves(
    path: &Path,
    bench: &BenchSection,
    rows: &[Row],
    crit: &SuccessCriterion,
) -> Result<()> {
    let mut methods: Vec<String> = rows.iter().map(|r| r.method.clone()).collect();
    methods.sort();
    methods.dedup();
    let trans_per_rot = crit.trans_thresh / crit.rot_thresh_deg;

    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["method", "rot_thresh_deg", "trans_thresh", "ratio_joint", "ratio_rot"])?;
    let mut thresholds = bench.fidelity_thresholds_deg.clone();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for method in methods {
        let errors: Vec<PairError> = rows
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| r.error().copied())
            .collect();
        if errors.is_empty() {
            continue;
        }
        for &rot_thresh in &thresholds {
            let trans_thresh = rot_thresh * trans_per_rot;
            let joint = errors
                .iter()
                .filter(|e| e.rot_err_deg < rot_thresh && e.trans_err < trans_thresh)
                .count() as f64
                / errors.len() as f64;
            let rot_only = errors
                .iter()
                .filter(|e| e.rot_err_deg < rot_thresh)
                .count() as f64
                / errors.len() as f64;
            writer.write_record([
                method.as_str(),
                &format!("{rot_thresh:e}"),
                &format!("{trans_thresh:e}"),
                &format!("{joint:.6}"),
                &format!("{rot_only:.6}"),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

fn noise_suite(bench: &BenchSection, net: &FeatureNet) -> Result<Vec<Row>> {
    let pairs = bench_pairs(bench)?;
    let cfg = solver_config(bench, SolverMethod::Analytical);
    let mut jobs = Vec::new();
    for &std in &bench.noise_stds {
        for (i, pair) in pairs.iter().enumerate() {
            jobs.push((std, i, pair));
        }
    }
    jobs.par_iter()
        .map(|&(std, i, pair)| {
            // Noise only on the source, which breaks exact correspondences.
            let noisy = corrupt_noise(&pair.source, std, pair_seed(bench.seed ^ 0x401, i))?;
            Ok(Row {
                case: format!("std={std}"),
                pair: i,
                kind: pair.source.id().to_string(),
                method: "analytical".into(),
                outcome: timed_register(net, &noisy, &pair.template, &pair.gt, &cfg),
            })
        })
        .collect()
}

fn sparsity_suite(bench: &BenchSection, net: &FeatureNet) -> Result<Vec<Row>> {
    let pairs = bench_pairs(bench)?;
    let cfg = solver_config(bench, SolverMethod::Analytical);
    let mut jobs = Vec::new();
    for &fraction in &bench.sparsity_fractions {
        for (i, pair) in pairs.iter().enumerate() {
            jobs.push((fraction, i, pair));
        }
    }
    jobs.par_iter()
        .map(|&(fraction, i, pair)| {
            let sparse =
                corrupt_sparsify(&pair.source, fraction, pair_seed(bench.seed ^ 0x535, i))?;
            Ok(Row {
                case: format!("keep={fraction}"),
                pair: i,
                kind: pair.source.id().to_string(),
                method: "analytical".into(),
                outcome: timed_register(net, &sparse, &pair.template, &pair.gt, &cfg),
            })
        })
        .collect()
}

fn partial_suite(bench: &BenchSection, net: &FeatureNet) -> Result<Vec<Row>> {
    let pairs = bench_pairs(bench)?;
    let cfg = solver_config(bench, SolverMethod::Analytical);
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            // Independent culling directions make both clouds partial.
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(bench.seed ^ 0xbea, i));
            let dir_t = random_direction(&mut rng);
            let dir_s = random_direction(&mut rng);
            let template = corrupt_halfspace(&pair.template, &dir_t, bench.partial_keep)?;
            let source = corrupt_halfspace(&pair.source, &dir_s, bench.partial_keep)?;
            Ok(Row {
                case: format!("keep={}", bench.partial_keep),
                pair: i,
                kind: pair.source.id().to_string(),
                method: "analytical".into(),
                outcome: timed_register(net, &source, &template, &pair.gt, &cfg),
            })
        })
        .collect()
}

fn random_direction(rng: &mut ChaCha8Rng) -> nalgebra::Vector3<f64> {
    loop {
        let v = nalgebra::Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0f64));
        if let Some(unit) = v.try_normalize(1e-9) {
            return unit;
        }
    }
}

fn voxel_suite(bench: &BenchSection, net: &FeatureNet) -> Result<Vec<Row>> {
    let pairs: Vec<PairSpec> = (0..bench.pairs)
        .map(|i| composite_pair(bench, i))
        .collect::<Result<_>>()?;
    let cfg = solver_config(bench, SolverMethod::Analytical);

    enum Mode {
        WholeBudget,
        Aligned { grid: (usize, usize, usize), cap: usize },
        SelfBinned { rebin: bool },
    }
    let mut jobs: Vec<(String, Mode)> = vec![(
        format!("whole,budget={}", bench.n_points),
        Mode::WholeBudget,
    )];
    for grid in &bench.voxel_grids {
        for &cap in &bench.voxel_caps {
            jobs.push((
                format!("grid={}x{}x{},cap={cap}", grid[0], grid[1], grid[2]),
                Mode::Aligned {
                    grid: (grid[0], grid[1], grid[2]),
                    cap,
                },
            ));
        }
    }
    // Pairing-sensitivity variants at the first configured grid.
    if let Some(grid) = bench.voxel_grids.first() {
        let grid = (grid[0], grid[1], grid[2]);
        for rebin in [false, true] {
            jobs.push((
                format!(
                    "grid={}x{}x{},selfbin,rebin={rebin}",
                    grid.0, grid.1, grid.2
                ),
                Mode::SelfBinned { rebin },
            ));
        }
    }

    let mut work = Vec::new();
    for (job_idx, (case, _)) in jobs.iter().enumerate() {
        for (i, pair) in pairs.iter().enumerate() {
            work.push((job_idx, case.clone(), i, pair));
        }
    }
    Ok(work
        .par_iter()
        .map(|(job_idx, case, i, pair)| {
            let t0 = Instant::now();
            let (method, outcome) = match &jobs[*job_idx].1 {
                Mode::WholeBudget => {
                    let fraction = (bench.n_points as f64 / pair.source.len() as f64).min(1.0);
                    let run = || -> Result<RegistrationResult, anyhow::Error> {
                        let sub_source = corrupt_sparsify(
                            &pair.source,
                            fraction,
                            pair_seed(bench.seed ^ 0x5b1, *i),
                        )?;
                        let sub_template = corrupt_sparsify(
                            &pair.template,
                            fraction,
                            pair_seed(bench.seed ^ 0x5b2, *i),
                        )?;
                        Ok(register(net, &sub_source, &sub_template, &cfg)?)
                    };
                    (
                        "analytical".to_string(),
                        match run() {
                            Ok(result) => solved(result, &pair.gt, t0),
                            Err(e) => Outcome::Failed {
                                message: e.to_string(),
                                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                            },
                        },
                    )
                }
                Mode::Aligned { grid, cap } => (
                    "voxelized".to_string(),
                    match aligned_voxel_solve(
                        net,
                        pair,
                        &cfg,
                        *grid,
                        bench.voxel_min_points,
                        *cap,
                        bench.seed,
                    ) {
                        Ok(result) => solved(result, &pair.gt, t0),
                        Err(e) => Outcome::Failed {
                            message: e.to_string(),
                            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                        },
                    },
                ),
                Mode::SelfBinned { rebin } => {
                    let grid = bench.voxel_grids[0];
                    let vc = VoxelSolverConfig {
                        grid_dims: (grid[0], grid[1], grid[2]),
                        min_points: bench.voxel_min_points,
                        max_points_per_voxel: *bench.voxel_caps.first().unwrap_or(&1000),
                        seed: bench.seed,
                        rebin_every_iteration: *rebin,
                    };
                    (
                        "voxelized-selfbin".to_string(),
                        match register_voxelized(net, &pair.source, &pair.template, &cfg, &vc) {
                            Ok(result) => solved(result, &pair.gt, t0),
                            Err(e) => Outcome::Failed {
                                message: e.to_string(),
                                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                            },
                        },
                    )
                }
            };
            Row {
                case: case.clone(),
                pair: *i,
                kind: pair.source.id().to_string(),
                method,
                outcome,
            }
        })
        .collect())
}

fn icp_compare_suite(bench: &BenchSection, net: &FeatureNet) -> Result<Vec<Row>> {
    let pairs = bench_pairs(bench)?;
    let cfg = solver_config(bench, SolverMethod::Analytical);
    let icp_cfg = IcpConfig {
        max_iters: bench.max_iters,
        ..IcpConfig::default()
    };
    Ok(pairs
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, pair)| {
            let ours = Row {
                case: "base".into(),
                pair: i,
                kind: pair.source.id().to_string(),
                method: "analytical".into(),
                outcome: timed_register(net, &pair.source, &pair.template, &pair.gt, &cfg),
            };
            let t0 = Instant::now();
            let icp = Row {
                case: "base".into(),
                pair: i,
                kind: pair.source.id().to_string(),
                method: "icp".into(),
                outcome: match icp_register(&pair.source, &pair.template, &icp_cfg) {
                    Ok(result) => solved(result, &pair.gt, t0),
                    Err(e) => Outcome::Failed {
                        message: e.to_string(),
                        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                    },
                },
            };
            [ours, icp]
        })
        .collect())
}
