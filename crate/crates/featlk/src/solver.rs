//! The inverse-compositional registration loop.
//!
//! The Jacobian is built once on the template and models how the template's
//! features respond to a twist perturbation of the template itself. Each
//! iteration pulls the source back into the template frame with the current
//! estimate, compares its features against the fixed template features, and
//! solves for the increment that would perturb the template onto the
//! pulled-back source. Because the linearization point is always the unwarped
//! template, the frozen Jacobian is exact at every iteration, which is what
//! buys the scheme its fidelity near the optimum.
//!
//! Whole-cloud and voxelized variants share the iteration skeleton; the
//! voxelized solver re-bins the source against the template grid every
//! iteration while its conditioned Jacobian stays fixed.

use nalgebra::DVector;
use thiserror::Error;

use crate::cloud::{CloudError, PointCloud};
use crate::featnet::{FeatureNet, NetError};
use crate::jacobian::{
    analytical_jacobian, numerical_jacobian, planar_jacobian, voxel_global_jacobian,
    JacobianBundle, JacobianError,
};
use crate::se3::{compose, exp_twist, RigidTransform};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error("jacobian build failed: {0}")]
    Jacobian(JacobianError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverMethod {
    Analytical,
    Numerical { step: f64 },
    /// 3-DoF restriction to rigid motion in the xy-plane.
    Planar,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    /// Iteration cap η.
    pub max_iters: usize,
    /// Stop once the twist increment norm falls below this.
    pub dx_tol: f64,
    pub method: SolverMethod,
    /// Terminate as diverged once the feature residual grows by this factor
    /// over its initial value.
    pub divergence_factor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 10,
            dx_tol: 1e-7,
            method: SolverMethod::Analytical,
            divergence_factor: 10.0,
        }
    }
}

impl SolverConfig {
    /// Scene-scale preset: doubled iteration cap.
    pub fn scene() -> Self {
        Self {
            max_iters: 20,
            ..Self::default()
        }
    }
}

/// Voxelized-solver parameters; the grid is placed on the template's bounding
/// box.
#[derive(Debug, Clone, Copy)]
pub struct VoxelSolverConfig {
    pub grid_dims: (usize, usize, usize),
    pub min_points: usize,
    pub max_points_per_voxel: usize,
    pub seed: u64,
    /// Re-assign source points to voxels from the current estimate at every
    /// iteration instead of binning once at the start. Membership changes
    /// make the residual discontinuous in the pose, so this trades a fixed
    /// pairing bias for iteration noise; kept as an option for sensitivity
    /// studies.
    pub rebin_every_iteration: bool,
}

impl Default for VoxelSolverConfig {
    fn default() -> Self {
        Self {
            grid_dims: (2, 2, 2),
            min_points: 16,
            max_points_per_voxel: 1000,
            seed: 0,
            rebin_every_iteration: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIters,
    Diverged,
    RankDeficient,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxIters => "max_iters",
            Termination::Diverged => "diverged",
            Termination::RankDeficient => "rank_deficient",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Rigid transform mapping the source onto the template.
    pub estimate: RigidTransform,
    pub iterations: usize,
    /// One feature-residual norm per executed iteration.
    pub residual_norms: Vec<f64>,
    pub termination: Termination,
    /// How many times a Jacobian bundle was built during this call.
    pub jacobian_builds: usize,
}

fn rank_deficient_result(jacobian_builds: usize) -> RegistrationResult {
    RegistrationResult {
        estimate: RigidTransform::identity(),
        iterations: 0,
        residual_norms: Vec::new(),
        termination: Termination::RankDeficient,
        jacobian_builds,
    }
}

/// Shared iteration driver: `residual(estimate)` evaluates, in the template
/// frame, the feature difference between the pulled-back source and the fixed
/// template for the current source→template estimate.
fn iterate<F>(
    bundle: &JacobianBundle,
    cfg: &SolverConfig,
    jacobian_builds: usize,
    mut residual: F,
) -> Result<RegistrationResult, SolveError>
where
    F: FnMut(&RigidTransform) -> Result<Option<DVector<f64>>, SolveError>,
{
    let mut estimate = RigidTransform::identity();
    let mut residual_norms = Vec::new();
    let mut termination = Termination::MaxIters;
    let mut iterations = 0;
    let mut initial_norm = f64::NAN;

    for it in 1..=cfg.max_iters {
        iterations = it;
        let r = match residual(&estimate)? {
            Some(r) => r,
            // The pairing degenerated (e.g. no voxel holds source points).
            None => {
                residual_norms.push(f64::NAN);
                termination = Termination::Diverged;
                break;
            }
        };
        let norm = r.norm();
        residual_norms.push(norm);
        if !norm.is_finite() {
            termination = Termination::Diverged;
            break;
        }
        if it == 1 {
            initial_norm = norm;
        } else if norm > cfg.divergence_factor * initial_norm.max(f64::MIN_POSITIVE) {
            termination = Termination::Diverged;
            break;
        }

        // The increment perturbs the template onto the pulled-back source;
        // composing it onto the estimate cancels that offset.
        let dxi = bundle.solve_increment(&r);
        if !dxi.norm().is_finite() {
            termination = Termination::Diverged;
            break;
        }
        estimate = compose(&exp_twist(&dxi), &estimate);
        if dxi.norm() < cfg.dx_tol {
            termination = Termination::Converged;
            break;
        }
    }

    Ok(RegistrationResult {
        estimate,
        iterations,
        residual_norms,
        termination,
        jacobian_builds,
    })
}

/// Whole-cloud registration: aligns `source` onto `template` by minimizing the
/// global-feature difference. The Jacobian bundle and the template features
/// are both built exactly once; each iteration costs one forward pass on the
/// pulled-back source.
pub fn register(
    net: &FeatureNet,
    source: &PointCloud,
    template: &PointCloud,
    cfg: &SolverConfig,
) -> Result<RegistrationResult, SolveError> {
    let bundle = match build_bundle(net, template, cfg.method) {
        Ok(b) => b,
        Err(JacobianError::RankDeficient { .. }) => return Ok(rank_deficient_result(1)),
        Err(e) => return Err(SolveError::Jacobian(e)),
    };
    // The finite-difference baseline is a single-precision method end to end;
    // its residuals run through the same f32 pipeline as its Jacobian.
    if let SolverMethod::Numerical { .. } = cfg.method {
        let f32_net =
            crate::jacobian::F32Net::from_net(net).map_err(SolveError::Jacobian)?;
        let feat_template = f32_net.global_feature(template);
        return iterate(&bundle, cfg, 1, |estimate| {
            let feat_pulled = f32_net.global_feature(&source.apply(estimate));
            Ok(Some(DVector::from_fn(feat_pulled.len(), |k, _| {
                (feat_pulled[k] - feat_template[k]) as f64
            })))
        });
    }
    let (feat_template, _) = net.forward(template)?;
    iterate(&bundle, cfg, 1, |estimate| {
        let (feat_pulled, _) = net.forward(&source.apply(estimate))?;
        Ok(Some(&feat_pulled - &feat_template))
    })
}

fn build_bundle(
    net: &FeatureNet,
    template: &PointCloud,
    method: SolverMethod,
) -> Result<JacobianBundle, JacobianError> {
    match method {
        SolverMethod::Analytical => analytical_jacobian(net, template),
        SolverMethod::Numerical { step } => numerical_jacobian(net, template, step),
        SolverMethod::Planar => planar_jacobian(net, template),
    }
}

/// Voxelized registration for scenes a single global feature cannot capture.
///
/// The template is partitioned once and each voxel's centroid-centered
/// features are computed once. Each iteration pulls the source back into the
/// template frame, bins it against the fixed template grid, and compares each
/// voxel's pulled-back source points (centered on the voxel's template-frame
/// centroid) against that voxel's stored features. The per-voxel differences
/// are summed into one residual solved against the conditioned global
/// Jacobian, which stays fixed from iteration 0.
/// Voxelized registration with caller-established pairing: `source_bins[m]`
/// lists the source indices assigned to `partition.voxels[m]`. Benchmark
/// pipelines that voxelize roughly-aligned scans before perturbing them use
/// this entry point; memberships stay fixed through the solve.
pub fn register_voxelized_paired(
    net: &FeatureNet,
    source: &PointCloud,
    template: &PointCloud,
    cfg: &SolverConfig,
    partition: &crate::cloud::VoxelPartition,
    source_bins: &[Vec<usize>],
) -> Result<RegistrationResult, SolveError> {
    if source_bins.len() != partition.voxels.len() {
        return Err(SolveError::Cloud(crate::cloud::CloudError::InvalidArgument(
            format!(
                "{} source bins for {} voxels",
                source_bins.len(),
                partition.voxels.len()
            ),
        )));
    }
    let keep: Vec<usize> = (0..partition.voxels.len())
        .filter(|&m| !source_bins[m].is_empty())
        .collect();
    if keep.is_empty() {
        return Ok(rank_deficient_result(1));
    }
    let paired = crate::cloud::VoxelPartition {
        voxels: keep.iter().map(|&m| partition.voxels[m].clone()).collect(),
        grid_dims: partition.grid_dims,
        bounds: partition.bounds,
    };
    let bins: Vec<Vec<usize>> = keep.iter().map(|&m| source_bins[m].clone()).collect();
    solve_over_voxels(net, source, template, cfg, paired, Some(bins))
}

pub fn register_voxelized(
    net: &FeatureNet,
    source: &PointCloud,
    template: &PointCloud,
    cfg: &SolverConfig,
    voxel_cfg: &VoxelSolverConfig,
) -> Result<RegistrationResult, SolveError> {
    let mut partition = crate::cloud::voxelize(
        template,
        voxel_cfg.grid_dims,
        voxel_cfg.min_points,
        voxel_cfg.max_points_per_voxel,
        voxel_cfg.seed,
    )?;

    // cell -> slot lookup for source binning.
    let (nx, ny, nz) = partition.grid_dims;
    let slot_of = |partition: &crate::cloud::VoxelPartition, p: &nalgebra::Vector3<f64>| {
        let (cx, cy, cz) = partition.cell_of(p);
        (cx * ny + cy) * nz + cz
    };
    let bin_source = |partition: &crate::cloud::VoxelPartition,
                      cell_slot: &[usize],
                      pulled: &PointCloud| {
        let mut bins: Vec<Vec<usize>> = vec![Vec::new(); partition.voxels.len()];
        for (i, p) in pulled.points().iter().enumerate() {
            let slot = cell_slot[slot_of(partition, p)];
            if slot != usize::MAX {
                bins[slot].push(i);
            }
        }
        bins
    };
    let make_cell_slot = |partition: &crate::cloud::VoxelPartition| {
        let mut cell_slot = vec![usize::MAX; nx * ny * nz];
        for (slot, voxel) in partition.voxels.iter().enumerate() {
            let (cx, cy, cz) = voxel.cell;
            cell_slot[(cx * ny + cy) * nz + cz] = slot;
        }
        cell_slot
    };

    // Default mode bins the source once at the initial estimate and keeps the
    // memberships fixed: the residual stays smooth in the pose and voxels the
    // source never reaches are dropped from the solve (and from the global
    // Jacobian, keeping the two consistent).
    if voxel_cfg.rebin_every_iteration {
        solve_over_voxels(net, source, template, cfg, partition, None)
    } else {
        let cell_slot = make_cell_slot(&partition);
        let bins = bin_source(&partition, &cell_slot, source);
        let keep: Vec<usize> = (0..partition.voxels.len())
            .filter(|&m| !bins[m].is_empty())
            .collect();
        if keep.is_empty() {
            return Ok(rank_deficient_result(1));
        }
        partition.voxels = keep.iter().map(|&m| partition.voxels[m].clone()).collect();
        let bins: Vec<Vec<usize>> = keep.iter().map(|&m| bins[m].clone()).collect();
        solve_over_voxels(net, source, template, cfg, partition, Some(bins))
    }
}

/// Shared voxel iteration: fixed memberships when `fixed_bins` is given,
/// re-binning from the current estimate otherwise.
fn solve_over_voxels(
    net: &FeatureNet,
    source: &PointCloud,
    template: &PointCloud,
    cfg: &SolverConfig,
    partition: crate::cloud::VoxelPartition,
    fixed_bins: Option<Vec<Vec<usize>>>,
) -> Result<RegistrationResult, SolveError> {
    let bundle = match voxel_global_jacobian(net, template, &partition) {
        Ok(b) => b,
        Err(JacobianError::RankDeficient { .. }) => return Ok(rank_deficient_result(1)),
        Err(e) => return Err(SolveError::Jacobian(e)),
    };
    let (nx_, ny, nz) = partition.grid_dims;
    let _ = nx_;
    let mut cell_slot = vec![usize::MAX; partition.grid_dims.0 * ny * nz];
    for (slot, voxel) in partition.voxels.iter().enumerate() {
        let (cx, cy, cz) = voxel.cell;
        cell_slot[(cx * ny + cy) * nz + cz] = slot;
    }

    let mut template_feats = Vec::with_capacity(partition.voxels.len());
    for voxel in &partition.voxels {
        let local = template.select(&voxel.indices).recentered(&voxel.center);
        let (feat, _) = net.forward(&local)?;
        template_feats.push(feat);
    }

    let k = net.feature_dim();
    iterate(&bundle, cfg, 1, |estimate| {
        let pulled = source.apply(estimate);
        let rebinned;
        let bins: &Vec<Vec<usize>> = match &fixed_bins {
            Some(bins) => bins,
            None => {
                let mut fresh: Vec<Vec<usize>> = vec![Vec::new(); partition.voxels.len()];
                for (i, p) in pulled.points().iter().enumerate() {
                    let (cx, cy, cz) = partition.cell_of(p);
                    let slot = cell_slot[(cx * ny + cy) * nz + cz];
                    if slot != usize::MAX {
                        fresh[slot].push(i);
                    }
                }
                rebinned = fresh;
                &rebinned
            }
        };

        let mut sum = DVector::zeros(k);
        let mut paired = 0;
        for ((voxel, feat_t), bin) in
            partition.voxels.iter().zip(&template_feats).zip(bins)
        {
            if bin.is_empty() {
                continue;
            }
            let local_source = pulled.select(bin).recentered(&voxel.center);
            let (feat_s, _) = net.forward(&local_source)?;
            sum += feat_s - feat_t;
            paired += 1;
        }
        if paired == 0 {
            return Ok(None);
        }
        Ok(Some(sum))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{generate_primitive, normalize_unit_box, PairSpec, PrimitiveKind};
    use crate::featnet::NetMode;
    use crate::metrics::pair_error;
    use crate::se3::{exp_twist, Twist};
    use nalgebra::{DVector, Vector6};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn folded_net(widths: &[usize], seed: u64) -> FeatureNet {
        let mut net = crate::featnet::FeatureNet::kaiming_init(widths, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7777);
        for layer in net.layers_mut() {
            for v in layer.bias.iter_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
        net.fold_bn()
    }

    fn unit_cloud(kind: PrimitiveKind, n: usize, seed: u64) -> PointCloud {
        normalize_unit_box(&generate_primitive(kind, n, seed).unwrap()).unwrap()
    }

    #[test]
    fn identical_clouds_are_a_fixed_point() {
        let net = folded_net(&[16, 32, 24], 1);
        let cloud = unit_cloud(PrimitiveKind::Cube, 80, 2);
        let result = register(&net, &cloud, &cloud, &SolverConfig::default()).unwrap();
        assert_eq!(result.termination, Termination::Converged);
        assert_eq!(result.iterations, 1);
        assert!(
            (result.estimate.matrix() - RigidTransform::identity().matrix()).norm() < 1e-9
        );
    }

    #[test]
    fn residual_log_length_matches_iterations() {
        let net = folded_net(&[16, 32, 24], 3);
        let pair = PairSpec::synthesize(PrimitiveKind::Cube, 80, 4, 20.0, 0.2).unwrap();
        let result = register(&net, &pair.source, &pair.template, &SolverConfig::default())
            .unwrap();
        assert_eq!(result.residual_norms.len(), result.iterations);
    }

    #[test]
    fn jacobian_is_built_exactly_once_regardless_of_iterations() {
        let net = folded_net(&[16, 32, 24], 5);
        let pair = PairSpec::synthesize(PrimitiveKind::Torus, 100, 6, 30.0, 0.3).unwrap();
        for max_iters in [1, 20] {
            let cfg = SolverConfig {
                max_iters,
                dx_tol: 0.0,
                ..SolverConfig::default()
            };
            let result = register(&net, &pair.source, &pair.template, &cfg).unwrap();
            assert_eq!(result.jacobian_builds, 1);
        }
    }

    #[test]
    fn small_perturbation_is_recovered_by_an_untrained_net() {
        // Random folded features already define a usable local basin.
        let net = folded_net(&[16, 32, 32], 7);
        let pair = PairSpec::synthesize(PrimitiveKind::Cube, 120, 8, 8.0, 0.1).unwrap();
        let result = register(&net, &pair.source, &pair.template, &SolverConfig::default())
            .unwrap();
        let err = pair_error(&result.estimate, &pair.gt);
        assert!(
            err.rot_err_deg < 0.5 && err.trans_err < 0.01,
            "rot {} trans {} ({:?})",
            err.rot_err_deg,
            err.trans_err,
            result.termination
        );
        // Bookkeeping: the estimate actually moves the source onto the template.
        let moved = pair.source.apply(&result.estimate);
        let chamfer = moved
            .points()
            .iter()
            .map(|p| {
                pair.template
                    .points()
                    .iter()
                    .map(|q| (p - q).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max);
        assert!(chamfer < 1e-3, "chamfer {chamfer}");
    }

    #[test]
    fn rank_deficient_template_reports_identity() {
        let net = folded_net(&[8, 12], 9);
        let template = PointCloud::new(
            vec![
                nalgebra::Vector3::new(0.1, 0.0, 0.0),
                nalgebra::Vector3::new(0.2, 0.0, 0.0),
            ],
            "degenerate",
        )
        .unwrap();
        let source = template.clone();
        let result = register(&net, &source, &template, &SolverConfig::default()).unwrap();
        assert_eq!(result.termination, Termination::RankDeficient);
        assert_eq!(result.estimate.matrix(), RigidTransform::identity().matrix());
        assert_eq!(result.jacobian_builds, 1);
    }

    #[test]
    fn garbage_step_size_does_not_panic() {
        let net = folded_net(&[16, 32, 24], 11);
        let pair = PairSpec::synthesize(PrimitiveKind::Cube, 80, 12, 25.0, 0.3).unwrap();
        let cfg = SolverConfig {
            method: SolverMethod::Numerical { step: 10.0 },
            ..SolverConfig::default()
        };
        let result = register(&net, &pair.source, &pair.template, &cfg).unwrap();
        assert!(matches!(
            result.termination,
            Termination::Diverged | Termination::MaxIters | Termination::Converged
        ));
        assert!(result.estimate.matrix().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn voxelized_fixed_point() {
        let net = folded_net(&[16, 32, 24], 13);
        let cloud = unit_cloud(PrimitiveKind::Torus, 200, 14);
        let result = register_voxelized(
            &net,
            &cloud,
            &cloud,
            &SolverConfig::default(),
            &VoxelSolverConfig::default(),
        )
        .unwrap();
        assert_eq!(result.termination, Termination::Converged);
        assert_eq!(result.iterations, 1);
        assert!(
            (result.estimate.matrix() - RigidTransform::identity().matrix()).norm() < 1e-9
        );
        assert_eq!(result.jacobian_builds, 1);
    }

    #[test]
    fn single_voxel_reduces_to_whole_cloud_on_centered_clouds() {
        let net = folded_net(&[16, 32, 24], 15);
        let raw = unit_cloud(PrimitiveKind::Cube, 100, 16);
        let template = raw.recentered(&raw.centroid());
        let g = exp_twist(
            &Twist::new(Vector6::new(0.05, -0.03, 0.08, 0.05, -0.02, 0.04)).unwrap(),
        );
        let source = template.apply(&g);
        let cfg = SolverConfig::default();
        let voxel_cfg = VoxelSolverConfig {
            grid_dims: (1, 1, 1),
            min_points: 4,
            max_points_per_voxel: 10_000,
            seed: 0,
            rebin_every_iteration: false,
        };
        let whole = register(&net, &source, &template, &cfg).unwrap();
        let voxel = register_voxelized(&net, &source, &template, &cfg, &voxel_cfg).unwrap();
        assert_eq!(whole.iterations, voxel.iterations);
        assert!(
            (whole.estimate.matrix() - voxel.estimate.matrix()).norm() < 1e-9,
            "estimates differ by {}",
            (whole.estimate.matrix() - voxel.estimate.matrix()).norm()
        );
        for (a, b) in whole.residual_norms.iter().zip(&voxel.residual_norms) {
            assert!((a - b).abs() < 1e-9 * a.max(1.0));
        }
    }

    #[test]
    fn planar_solve_recovers_in_plane_twist() {
        let net = folded_net(&[16, 32, 32], 17);
        // A z-constant scene: flatten a bumpy plane onto z = 0.
        let flat = PointCloud::new(
            unit_cloud(PrimitiveKind::PlaneWithBumps, 150, 18)
                .points()
                .iter()
                .map(|p| nalgebra::Vector3::new(p.x, p.y, 0.0))
                .collect(),
            "flat",
        )
        .unwrap();
        let gt_twist =
            Twist::new(Vector6::new(0.0, 0.0, 0.12, 0.06, -0.04, 0.0)).unwrap();
        // The template is moved by exp(gt_twist), so the source→template
        // ground truth is its inverse.
        let source = flat.apply(&exp_twist(&gt_twist));
        let gt = crate::se3::inverse(&exp_twist(&gt_twist));
        let cfg = SolverConfig {
            method: SolverMethod::Planar,
            max_iters: 30,
            ..SolverConfig::default()
        };
        let result = register(&net, &source, &flat, &cfg).unwrap();
        let err = pair_error(&result.estimate, &gt);
        assert!(
            err.rot_err_deg < 0.1 && err.trans_err < 0.01,
            "rot {} trans {}",
            err.rot_err_deg,
            err.trans_err
        );
        // The increment never leaves the plane.
        let xi = crate::se3::log_transform(&result.estimate).unwrap();
        assert!(xi.omega().x.abs() < 1e-9 && xi.omega().y.abs() < 1e-9);
        assert!(xi.v().z.abs() < 1e-9);
    }

    #[test]
    fn equivariance_under_shared_rigid_motion_is_tracked() {
        // Regression metric, not a hard assert: pooling makes exact
        // equivariance approximate.
        let net = folded_net(&[16, 32, 32], 19);
        let pair = PairSpec::synthesize(PrimitiveKind::Cube, 120, 20, 10.0, 0.1).unwrap();
        let h = exp_twist(
            &Twist::new(Vector6::new(0.2, 0.1, -0.15, 0.2, -0.1, 0.15)).unwrap(),
        );
        let base = register(&net, &pair.source, &pair.template, &SolverConfig::default())
            .unwrap();
        let moved = register(
            &net,
            &pair.source.apply(&h),
            &pair.template.apply(&h),
            &SolverConfig::default(),
        )
        .unwrap();
        // est' should approximate h · est · h⁻¹.
        let expected = crate::se3::compose(
            &crate::se3::compose(&h, &base.estimate),
            &crate::se3::inverse(&h),
        );
        let drift = pair_error(&moved.estimate, &expected);
        println!(
            "equivariance drift: rot {:.4} deg, trans {:.5}",
            drift.rot_err_deg, drift.trans_err
        );
        assert!(drift.rot_err_deg.is_finite());
    }

    #[test]
    fn divergence_guard_fires_on_growing_residuals() {
        // A bundle with a huge step: force the update to overshoot by scaling
        // the pseudoinverse. Built from a real bundle to stay representative.
        let net = folded_net(&[16, 32, 24], 21);
        let pair = PairSpec::synthesize(PrimitiveKind::Cube, 80, 22, 20.0, 0.2).unwrap();
        let mut bundle = analytical_jacobian(&net, &pair.template).unwrap();
        bundle.pinv *= 50.0;
        let (feat_source, _) = net.forward(&pair.source).unwrap();
        let cfg = SolverConfig::default();
        let result = iterate(&bundle, &cfg, 1, |ginv| {
            let (feat_template, _) = net.forward(&pair.template.apply(ginv))?;
            Ok(Some(&feat_source - &feat_template))
        })
        .unwrap();
        assert_eq!(result.termination, Termination::Diverged);
    }

    #[test]
    fn nan_residual_terminates_as_diverged() {
        let net = folded_net(&[8, 12], 23);
        let cloud = unit_cloud(PrimitiveKind::Cube, 50, 24);
        let bundle = analytical_jacobian(&net, &cloud).unwrap();
        let cfg = SolverConfig::default();
        let k = net.feature_dim();
        let mut call = 0;
        let result = iterate(&bundle, &cfg, 1, |_| {
            call += 1;
            Ok(Some(if call == 1 {
                DVector::from_element(k, 0.1)
            } else {
                DVector::from_element(k, f64::NAN)
            }))
        })
        .unwrap();
        assert_eq!(result.termination, Termination::Diverged);
        assert_eq!(result.residual_norms.len(), result.iterations);
    }
}
