//! Jacobian assembly for the registration solver.
//!
//! Three variants share one bundle type: the exact analytical Jacobian (the
//! per-point feature gradient composed with the rigid warp Jacobian, routed
//! through the max-pool argmax), a finite-difference approximation driven by
//! a step size, and the voxel-conditioned global Jacobian that transfers
//! per-voxel local Jacobians into a shared frame via the translation adjoint.
//!
//! The finite-difference variant evaluates the feature function in single
//! precision. That is the precision regime of the baseline it reproduces, and
//! it is what makes the step-size pathologies observable: large steps bias
//! the quotient, small steps cancel catastrophically and the entries vanish.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x6, Vector3};
use thiserror::Error;

use crate::cloud::{PointCloud, VoxelPartition};
use crate::featnet::{FeatureNet, NetError};
use crate::se3::{adjoint_translation, skew, Twist};

/// Relative tolerance for the rank decision in the pseudoinverse:
/// singular values below `RANK_TOLERANCE * sigma_max` are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum JacobianError {
    #[error("step size {0} must be positive")]
    InvalidStep(f64),
    #[error(
        "rank-deficient Jacobian: rank {rank} of {dof}, cond(JtJ) = {condition_jtj:.3e}, \
         argmax coverage {argmax_coverage}, voxels {voxels}"
    )]
    RankDeficient {
        rank: usize,
        dof: usize,
        condition_jtj: f64,
        argmax_coverage: usize,
        voxels: usize,
    },
    #[error("Jacobian contains a non-finite entry")]
    NonFinite,
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JacobianMethod {
    Analytical,
    Numerical { step: f64 },
    Voxelized,
}

#[derive(Debug, Clone, Copy)]
pub struct BuildDiagnostics {
    /// Condition number of JᵀJ, i.e. (sigma_max / sigma_min)².
    pub condition_jtj: f64,
    /// Number of distinct template points selected by the pool argmax.
    pub argmax_coverage: usize,
    pub rank: usize,
    /// Voxel count for voxelized builds, 1 otherwise.
    pub voxels: usize,
}

/// A K×dof Jacobian with its precomputed pseudoinverse. `twist_columns` maps
/// bundle columns to twist indices, so constrained warps (e.g. the planar
/// 3-DoF restriction) embed their increments back into a full twist.
#[derive(Debug, Clone)]
pub struct JacobianBundle {
    pub j: DMatrix<f64>,
    pub pinv: DMatrix<f64>,
    pub method: JacobianMethod,
    pub diagnostics: BuildDiagnostics,
    pub twist_columns: Vec<usize>,
}

impl JacobianBundle {
    /// Least-squares twist increment for a feature residual.
    pub fn solve_increment(&self, residual: &DVector<f64>) -> Twist {
        let delta = &self.pinv * residual;
        let mut xi = nalgebra::Vector6::zeros();
        for (col, &twist_idx) in self.twist_columns.iter().enumerate() {
            xi[twist_idx] = delta[col];
        }
        Twist::new(xi).expect("finite by construction")
    }
}

/// Derivative of `exp(−Σ ξ_p T_p) · p` w.r.t. ξ at ξ = 0, spatial rows only:
/// `[skew(p) | −I₃]` under the rotation-first ordering.
pub fn warp_jacobian(p: &Vector3<f64>) -> Matrix3x6<f64> {
    let mut w = Matrix3x6::zeros();
    w.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(p));
    w.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-Matrix3::identity()));
    w
}

/// Twist indices of the in-plane restriction: rotation about z plus
/// translation in x and y.
pub const PLANAR_COLUMNS: [usize; 3] = [2, 3, 4];

/// [`warp_jacobian`] restricted to the 3-DoF rigid motion in the xy-plane.
/// Swapping this in requires no change to the feature side.
pub fn planar_warp_jacobian(p: &Vector3<f64>) -> Matrix3<f64> {
    let full = warp_jacobian(p);
    Matrix3::from_columns(&[
        full.column(PLANAR_COLUMNS[0]).into_owned(),
        full.column(PLANAR_COLUMNS[1]).into_owned(),
        full.column(PLANAR_COLUMNS[2]).into_owned(),
    ])
}

/// Steepest-descent feature rows pooled by the forward pass's argmax: row k of
/// the result is the k-th gradient row of the winning point composed with that
/// point's warp Jacobian columns.
fn pooled_jacobian_matrix(
    net: &FeatureNet,
    cloud: &PointCloud,
    columns: &[usize],
) -> Result<(DMatrix<f64>, usize), JacobianError> {
    let effective = net.effective_linear()?;
    let (_, acts) = net.forward(cloud)?;
    let k_dim = net.feature_dim();
    let layer_count = effective.len();

    let mut j = DMatrix::zeros(k_dim, columns.len());
    for k in 0..k_dim {
        let winner = acts.pool_argmax[k];
        // Row k of the chained per-layer factors diag(mask_l) · W_l.
        let mut row = DVector::zeros(k_dim);
        row[k] = 1.0;
        for l in (0..layer_count).rev() {
            for (c, v) in row.iter_mut().enumerate() {
                *v *= acts.masks[l][(c, winner)];
            }
            row = effective[l].transpose() * row;
        }
        // row is now 1×3 (as a length-3 vector): compose with the warp.
        let warp = warp_jacobian(&cloud.points()[winner]);
        for (out_col, &warp_col) in columns.iter().enumerate() {
            let mut s = 0.0;
            for axis in 0..3 {
                s += row[axis] * warp[(axis, warp_col)];
            }
            j[(k, out_col)] = s;
        }
    }

    let mut winners: Vec<usize> = acts.pool_argmax.clone();
    winners.sort_unstable();
    winners.dedup();
    Ok((j, winners.len()))
}

fn finish_bundle(
    j: DMatrix<f64>,
    method: JacobianMethod,
    argmax_coverage: usize,
    voxels: usize,
    twist_columns: Vec<usize>,
) -> Result<JacobianBundle, JacobianError> {
    if !j.iter().all(|v| v.is_finite()) {
        return Err(JacobianError::NonFinite);
    }
    let dof = j.ncols();
    let svd = j.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let tol = RANK_TOLERANCE * sigma_max;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let sigma_min = svd.singular_values.min();
    let condition_jtj = if sigma_min > 0.0 {
        (sigma_max / sigma_min).powi(2)
    } else {
        f64::INFINITY
    };
    let diagnostics = BuildDiagnostics {
        condition_jtj,
        argmax_coverage,
        rank,
        voxels,
    };
    if rank < dof {
        return Err(JacobianError::RankDeficient {
            rank,
            dof,
            condition_jtj,
            argmax_coverage,
            voxels,
        });
    }
    let pinv = svd.pseudo_inverse(tol).expect("svd computed with u and v");
    Ok(JacobianBundle {
        j,
        pinv,
        method,
        diagnostics,
        twist_columns,
    })
}

/// The analytical K×6 matrix alone, without the rank demand or the
/// pseudoinverse: analysis tooling wants the entries even for degenerate
/// clouds that cannot support a solve.
pub fn analytical_jacobian_matrix(
    net: &FeatureNet,
    template: &PointCloud,
) -> Result<DMatrix<f64>, JacobianError> {
    let (j, _) = pooled_jacobian_matrix(net, template, &[0, 1, 2, 3, 4, 5])?;
    if !j.iter().all(|v| v.is_finite()) {
        return Err(JacobianError::NonFinite);
    }
    Ok(j)
}

/// Exact Jacobian of the pooled feature w.r.t. the six twist parameters,
/// built once per registration on the template cloud.
pub fn analytical_jacobian(
    net: &FeatureNet,
    template: &PointCloud,
) -> Result<JacobianBundle, JacobianError> {
    let (j, coverage) = pooled_jacobian_matrix(net, template, &[0, 1, 2, 3, 4, 5])?;
    finish_bundle(j, JacobianMethod::Analytical, coverage, 1, (0..6).collect())
}

/// Analytical Jacobian restricted to the planar 3-DoF warp.
pub fn planar_jacobian(
    net: &FeatureNet,
    template: &PointCloud,
) -> Result<JacobianBundle, JacobianError> {
    let (j, coverage) = pooled_jacobian_matrix(net, template, &PLANAR_COLUMNS)?;
    finish_bundle(
        j,
        JacobianMethod::Analytical,
        coverage,
        1,
        PLANAR_COLUMNS.to_vec(),
    )
}

/// Single-precision mirror of the inference forward pass. The
/// finite-difference baseline is defined in this precision end to end, so the
/// solver reuses it for that method's residuals.
pub(crate) struct F32Net {
    layers: Vec<(DMatrix<f32>, DVector<f32>)>,
}

impl F32Net {
    pub(crate) fn from_net(net: &FeatureNet) -> Result<Self, JacobianError> {
        if net.mode() != crate::featnet::NetMode::Inference {
            // effective_linear carries the precise mode error.
            net.effective_linear()?;
        }
        let layers = net
            .layers()
            .iter()
            .map(|layer| {
                let out = layer.weight.nrows();
                let mut w32 = DMatrix::<f32>::zeros(out, layer.weight.ncols());
                let mut b32 = DVector::<f32>::zeros(out);
                for c in 0..out {
                    let sigma = layer.bn_var[c].sqrt();
                    let f = layer.bn_scale[c] / sigma;
                    for (j, v) in layer.weight.row(c).iter().enumerate() {
                        w32[(c, j)] = (v * f) as f32;
                    }
                    b32[c] = ((layer.bias[c] - layer.bn_mean[c]) * f + layer.bn_shift[c]) as f32;
                }
                (w32, b32)
            })
            .collect();
        Ok(Self { layers })
    }

    pub(crate) fn global_feature(&self, cloud: &PointCloud) -> DVector<f32> {
        let n = cloud.len();
        let mut z = DMatrix::<f32>::from_fn(3, n, |r, c| cloud.points()[c][r] as f32);
        for (w, b) in &self.layers {
            let mut y = w * &z;
            for mut col in y.column_iter_mut() {
                col += b;
            }
            z = y.map(|v| if v > 0.0 { v } else { 0.0 });
        }
        DVector::from_fn(z.nrows(), |k, _| {
            let mut best = z[(k, 0)];
            for col in 1..n {
                if z[(k, col)] > best {
                    best = z[(k, col)];
                }
            }
            best
        })
    }
}

/// One-sided finite-difference Jacobian: six perturbed forward evaluations of
/// the feature function, differenced against the unperturbed one and divided
/// by the shared step `t`.
pub fn numerical_jacobian(
    net: &FeatureNet,
    template: &PointCloud,
    step: f64,
) -> Result<JacobianBundle, JacobianError> {
    if step <= 0.0 {
        return Err(JacobianError::InvalidStep(step));
    }
    let f32_net = F32Net::from_net(net)?;
    let base = f32_net.global_feature(template);
    let k_dim = net.feature_dim();
    let mut j = DMatrix::zeros(k_dim, 6);
    for p in 0..6 {
        let mut xi = nalgebra::Vector6::zeros();
        xi[p] = -step;
        let g = crate::se3::exp_twist(&Twist::new(xi).expect("finite"));
        let perturbed = f32_net.global_feature(&template.apply(&g));
        for k in 0..k_dim {
            j[(k, p)] = ((perturbed[k] - base[k]) as f64) / step;
        }
    }
    // No rank demand here: degenerate steps legitimately produce zero columns,
    // and the bundle invariants are still reported through the diagnostics.
    if !j.iter().all(|v| v.is_finite()) {
        return Err(JacobianError::NonFinite);
    }
    let svd = j.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let tol = if sigma_max > 0.0 {
        RANK_TOLERANCE * sigma_max
    } else {
        RANK_TOLERANCE
    };
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let sigma_min = svd.singular_values.min();
    let pinv = svd.pseudo_inverse(tol).expect("svd computed with u and v");
    Ok(JacobianBundle {
        j,
        pinv,
        method: JacobianMethod::Numerical { step },
        diagnostics: BuildDiagnostics {
            condition_jtj: if sigma_min > 0.0 {
                (sigma_max / sigma_min).powi(2)
            } else {
                f64::INFINITY
            },
            argmax_coverage: 0,
            rank,
            voxels: 1,
        },
        twist_columns: (0..6).collect(),
    })
}

/// Global Jacobian over a voxel partition: each voxel's analytical Jacobian is
/// computed on centroid-centered points and transferred into the global frame
/// by the translation adjoint of its centroid, then accumulated.
pub fn voxel_global_jacobian(
    net: &FeatureNet,
    cloud: &PointCloud,
    partition: &VoxelPartition,
) -> Result<JacobianBundle, JacobianError> {
    let k_dim = net.feature_dim();
    let mut j_global = DMatrix::zeros(k_dim, 6);
    let mut coverage = 0;
    for voxel in &partition.voxels {
        let local_cloud = cloud.select(&voxel.indices).recentered(&voxel.center);
        let (j_local, cov) = pooled_jacobian_matrix(net, &local_cloud, &[0, 1, 2, 3, 4, 5])?;
        let conditioner = adjoint_translation(&voxel.center);
        // Accumulation in voxel-index order keeps builds bit-reproducible.
        for k in 0..k_dim {
            for col in 0..6 {
                let mut s = 0.0;
                for inner in 0..6 {
                    s += j_local[(k, inner)] * conditioner[(inner, col)];
                }
                j_global[(k, col)] += s;
            }
        }
        coverage += cov;
    }
    finish_bundle(
        j_global,
        JacobianMethod::Voxelized,
        coverage,
        partition.voxels.len(),
        (0..6).collect(),
    )
}

/// Pearson correlation over all entries of two equally-shaped matrices.
/// Returns 0 when either side has no variance (e.g. an all-zero Jacobian).
pub fn entry_correlation(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let n = (a.nrows() * a.ncols()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}
