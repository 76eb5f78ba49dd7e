//! Subcommand implementations. Benchmark suites live in [`crate::bench`].

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;

use featlk::featnet::{FeatureNet, NetMode};
use featlk::io;
use featlk::jacobian::{analytical_jacobian_matrix, entry_correlation, numerical_jacobian};
use featlk::solver::{
    register, register_voxelized, SolverConfig, SolverMethod, Termination, VoxelSolverConfig,
};
use featlk::trainer::{synthesize_dataset, train_epoch, AdamState, TrainError};

use crate::config::{parse_kinds, Config};

#[derive(Args)]
pub struct TrainArgs {
    /// TOML or JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the checkpoint and the log CSV.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Resume from a checkpoint written by a previous run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

pub fn run_train(args: TrainArgs) -> Result<i32> {
    let cfg = Config::load(&args.config)?;
    let train_cfg = cfg.train_config();
    let kinds = parse_kinds(&cfg.train.kinds).map_err(|e| anyhow::anyhow!(e))?;

    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let ckpt_path = args.out_dir.join("checkpoint.json");
    let weights_path = args.out_dir.join("weights.json");
    let log_path = args.out_dir.join("train_log.csv");

    let (mut net, mut adam, start_epoch, master_seed, mut log) = match &args.resume {
        Some(path) => {
            let ckpt = io::load_checkpoint(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            let log = std::fs::read_to_string(&log_path).unwrap_or_else(|_| {
                "epoch,loss_transform,loss_feature,success_ratio\n".to_string()
            });
            (ckpt.net, ckpt.adam, ckpt.epoch_next, ckpt.master_seed, log)
        }
        None => {
            let net = FeatureNet::kaiming_init(&cfg.net.widths, cfg.net.init_seed);
            let adam = AdamState::new(&net);
            (
                net,
                adam,
                0,
                cfg.train.seed,
                "epoch,loss_transform,loss_feature,success_ratio\n".to_string(),
            )
        }
    };

    let dataset = synthesize_dataset(
        &kinds,
        cfg.train.pairs,
        cfg.train.n_points,
        master_seed,
        train_cfg.max_rot_deg,
        train_cfg.max_trans,
    )?;

    for epoch in start_epoch..start_epoch + train_cfg.epochs {
        let t0 = Instant::now();
        let stats = match train_epoch(&mut net, &dataset, &train_cfg, &mut adam, epoch) {
            Ok(stats) => stats,
            Err(e @ TrainError::NonFiniteLoss { .. }) => {
                bail!("epoch {epoch} aborted: {e}");
            }
            Err(e) => return Err(e.into()),
        };
        log.push_str(&format!(
            "{},{:.12e},{:.12e},{:.6}\n",
            stats.epoch, stats.mean_loss_transform, stats.mean_loss_feature, stats.success_ratio
        ));
        eprintln!(
            "epoch {}: transform loss {:.6}, feature loss {:.6}, success {:.3} ({:.1}s)",
            stats.epoch,
            stats.mean_loss_transform,
            stats.mean_loss_feature,
            stats.success_ratio,
            t0.elapsed().as_secs_f64()
        );
        let ckpt = io::Checkpoint {
            net: net.clone(),
            adam: adam.clone(),
            epoch_next: epoch + 1,
            master_seed,
        };
        io::save_checkpoint(&ckpt, &ckpt_path)?;
        std::fs::write(&log_path, &log)
            .with_context(|| format!("writing {}", log_path.display()))?;
    }

    io::save_weights(&net.fold_bn(), &weights_path)?;
    eprintln!(
        "wrote {} and {}",
        ckpt_path.display(),
        weights_path.display()
    );
    Ok(0)
}

#[derive(Args)]
pub struct RegisterArgs {
    /// Weight JSON produced by `train` (or any valid weight file).
    #[arg(long)]
    model: PathBuf,
    /// Source cloud (.xyz, .off, or ascii .ply).
    #[arg(long)]
    source: PathBuf,
    /// Template cloud.
    #[arg(long)]
    template: PathBuf,
    /// Voxelize the template on an nx,ny,nz grid and solve globally.
    #[arg(long, value_parser = parse_grid)]
    voxels: Option<(usize, usize, usize)>,
    /// Jacobian method: analytical (default) or numerical.
    #[arg(long, default_value = "analytical")]
    method: String,
    /// Step size for the numerical method.
    #[arg(long)]
    step: Option<f64>,
    /// Restrict the warp to the 3-DoF rigid motion in the xy-plane.
    #[arg(long)]
    planar: bool,
    #[arg(long, default_value_t = 10)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-7)]
    dx_tol: f64,
    #[arg(long, default_value_t = 16)]
    voxel_min_points: usize,
    #[arg(long, default_value_t = 1000)]
    voxel_max_points: usize,
}

fn parse_grid(text: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected nx,ny,nz, got '{text}'"));
    }
    let mut dims = [0usize; 3];
    for (d, p) in dims.iter_mut().zip(&parts) {
        *d = p
            .trim()
            .parse()
            .map_err(|_| format!("bad grid dimension '{p}'"))?;
    }
    Ok((dims[0], dims[1], dims[2]))
}

pub fn run_register(args: RegisterArgs) -> Result<i32> {
    let net = io::load_weights(&args.model)
        .with_context(|| format!("loading model {}", args.model.display()))?;
    let net = match net.mode() {
        NetMode::Inference => net,
        NetMode::Train => net.fold_bn(),
    };
    let source = io::load_cloud(&args.source)?;
    let template = io::load_cloud(&args.template)?;

    let method = match (args.method.as_str(), args.planar) {
        (_, true) => SolverMethod::Planar,
        ("analytical", _) => SolverMethod::Analytical,
        ("numerical", _) => SolverMethod::Numerical {
            step: args
                .step
                .ok_or_else(|| anyhow::anyhow!("--method numerical requires --step"))?,
        },
        (other, _) => bail!("unknown method '{other}' (analytical | numerical)"),
    };
    let cfg = SolverConfig {
        max_iters: args.max_iters,
        dx_tol: args.dx_tol,
        method,
        ..SolverConfig::default()
    };

    let result = match args.voxels {
        Some(grid_dims) => {
            if args.planar || matches!(method, SolverMethod::Numerical { .. }) {
                bail!("--voxels is only supported with the analytical method");
            }
            register_voxelized(
                &net,
                &source,
                &template,
                &cfg,
                &VoxelSolverConfig {
                    grid_dims,
                    min_points: args.voxel_min_points,
                    max_points_per_voxel: args.voxel_max_points,
                    seed: 0,
                    rebin_every_iteration: false,
                },
            )?
        }
        None => register(&net, &source, &template, &cfg)?,
    };

    println!(
        "{}",
        serde_json::to_string_pretty(&io::ResultJson::from_result(&result))?
    );
    Ok(match result.termination {
        Termination::Converged | Termination::MaxIters => 0,
        Termination::Diverged | Termination::RankDeficient => 2,
    })
}

#[derive(Args)]
pub struct BenchArgs {
    /// Suite: accuracy | fidelity | noise | sparsity | partial | voxel | icp-compare.
    #[arg(long)]
    suite: String,
    #[arg(long)]
    config: PathBuf,
    /// Weight JSON; omitted = a fresh Kaiming net from [net] in the config.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

pub fn run_bench(args: BenchArgs) -> Result<i32> {
    let cfg = Config::load(&args.config)?;
    let net = match &args.model {
        Some(path) => {
            let net = io::load_weights(path)
                .with_context(|| format!("loading model {}", path.display()))?;
            match net.mode() {
                NetMode::Inference => net,
                NetMode::Train => net.fold_bn(),
            }
        }
        None => {
            eprintln!("note: no --model given, using an untrained net from [net]");
            FeatureNet::kaiming_init(&cfg.net.widths, cfg.net.init_seed).fold_bn()
        }
    };
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    crate::bench::run_suite(&args.suite, &cfg, &net, &args.out_dir)?;
    Ok(0)
}

#[derive(Args)]
pub struct JacobianArgs {
    #[arg(long)]
    model: PathBuf,
    /// Template cloud the Jacobians are evaluated on.
    #[arg(long)]
    cloud: PathBuf,
    /// Comma-separated step sizes, e.g. "1e-10,1e-4,1e-2,1,10".
    #[arg(long, value_delimiter = ',')]
    steps: Vec<f64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

pub fn run_jacobian_analysis(args: JacobianArgs) -> Result<i32> {
    if args.steps.is_empty() {
        bail!("--steps requires at least one step size");
    }
    let net = io::load_weights(&args.model)?;
    let net = match net.mode() {
        NetMode::Inference => net,
        NetMode::Train => net.fold_bn(),
    };
    let cloud = io::load_cloud(&args.cloud)?;

    let analytical = analytical_jacobian_matrix(&net, &cloud)
        .map_err(|e| anyhow::anyhow!("analytical jacobian failed: {e}"))?;
    let numericals: Vec<_> = args
        .steps
        .iter()
        .map(|&t| numerical_jacobian(&net, &cloud, t).map(|b| (t, b.j)))
        .collect::<Result<_, _>>()
        .map_err(|e| anyhow::anyhow!("numerical jacobian failed: {e}"))?;

    std::fs::create_dir_all(&args.out_dir)?;
    // Entry dump: one row per (k, p) with the analytical value and one column
    // per requested step size.
    let entries_path = args.out_dir.join("jacobian_entries.csv");
    let mut writer = csv::Writer::from_path(&entries_path)?;
    let mut header = vec!["row".to_string(), "col".to_string(), "analytical".to_string()];
    header.extend(args.steps.iter().map(|t| format!("numerical_t{t:e}")));
    writer.write_record(&header)?;
    let (k_dim, dof) = analytical.shape();
    for k in 0..k_dim {
        for p in 0..dof {
            let mut record = vec![
                k.to_string(),
                p.to_string(),
                format!("{:.12e}", analytical[(k, p)]),
            ];
            record.extend(
                numericals
                    .iter()
                    .map(|(_, j)| format!("{:.12e}", j[(k, p)])),
            );
            writer.write_record(&record)?;
        }
    }
    writer.flush()?;

    // Correlation summary: whole-matrix Pearson plus the per-column slice the
    // single-dimension plots use (column 2 = rotation about z).
    let summary_path = args.out_dir.join("jacobian_correlation.csv");
    let mut writer = csv::Writer::from_path(&summary_path)?;
    let mut header = vec!["step".to_string(), "pearson_all".to_string()];
    header.extend((0..dof).map(|p| format!("pearson_col{p}")));
    writer.write_record(&header)?;
    for (t, j) in &numericals {
        let mut record = vec![
            format!("{t:e}"),
            format!("{:.9}", entry_correlation(j, &analytical)),
        ];
        for p in 0..dof {
            let a = analytical.column(p).clone_owned();
            let b = j.column(p).clone_owned();
            let a = nalgebra::DMatrix::from_column_slice(k_dim, 1, a.as_slice());
            let b = nalgebra::DMatrix::from_column_slice(k_dim, 1, b.as_slice());
            record.push(format!("{:.9}", entry_correlation(&b, &a)));
        }
        writer.write_record(&record)?;
        eprintln!(
            "t = {t:9.3e}: pearson(all) = {:+.6}",
            entry_correlation(j, &analytical)
        );
    }
    writer.flush()?;
    eprintln!(
        "wrote {} and {}",
        entries_path.display(),
        summary_path.display()
    );
    Ok(0)
}
