//! SE(3)/se(3) algebra: twist parametrization, closed-form exponential and
//! logarithm maps, group operations, and the translation adjoint used to
//! condition voxel-local solves into a global frame.
//!
//! Twist ordering is rotation-first everywhere: `(ω_x, ω_y, ω_z, v_x, v_y, v_z)`.
//! Rotations are in radians, translations in scene units.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use thiserror::Error;

/// Threshold below which exp/log switch to their Taylor-series branches.
const SMALL_ANGLE: f64 = 1e-8;

/// Rotation angles above `π − ANGLE_SINGULARITY_MARGIN` are rejected by the log map.
const ANGLE_SINGULARITY_MARGIN: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum Se3Error {
    #[error("twist contains a non-finite entry: {0:?}")]
    NonFinite([f64; 6]),
    #[error("matrix is not a rigid transform: {reason}")]
    NotRigid { reason: &'static str },
    #[error("rotation angle {angle} is within {margin} of the log-map singularity at pi")]
    AngleSingularity { angle: f64, margin: f64 },
}

/// Element of se(3): six exponential-map parameters, rotation-first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    xi: Vector6<f64>,
}

impl Twist {
    /// Validates finiteness; ordering is `(ω_x, ω_y, ω_z, v_x, v_y, v_z)`.
    pub fn new(xi: Vector6<f64>) -> Result<Self, Se3Error> {
        if xi.iter().all(|x| x.is_finite()) {
            Ok(Self { xi })
        } else {
            Err(Se3Error::NonFinite(xi.into()))
        }
    }

    pub fn from_parts(omega: Vector3<f64>, v: Vector3<f64>) -> Result<Self, Se3Error> {
        Self::new(Vector6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z))
    }

    pub fn zero() -> Self {
        Self {
            xi: Vector6::zeros(),
        }
    }

    /// Rotation part `ω`.
    pub fn omega(&self) -> Vector3<f64> {
        self.xi.fixed_rows::<3>(0).into_owned()
    }

    /// Translation part `v` (twist coordinates, not the transform's translation column).
    pub fn v(&self) -> Vector3<f64> {
        self.xi.fixed_rows::<3>(3).into_owned()
    }

    pub fn as_vector(&self) -> &Vector6<f64> {
        &self.xi
    }

    pub fn norm(&self) -> f64 {
        self.xi.norm()
    }

    pub fn negated(&self) -> Self {
        Self { xi: -self.xi }
    }
}

/// Element of SE(3) stored as a homogeneous 4×4 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    mat: Matrix4<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            mat: Matrix4::identity(),
        }
    }

    /// Validates the SE(3) invariants: exact `(0,0,0,1)` bottom row,
    /// `‖RᵀR − I‖_F < 1e-9`, `det(R) > 0`.
    pub fn from_matrix(mat: Matrix4<f64>) -> Result<Self, Se3Error> {
        if !mat.iter().all(|x| x.is_finite()) {
            return Err(Se3Error::NotRigid {
                reason: "non-finite entry",
            });
        }
        if mat.row(3) != Matrix4::identity().row(3) {
            return Err(Se3Error::NotRigid {
                reason: "bottom row is not (0,0,0,1)",
            });
        }
        let r = mat.fixed_view::<3, 3>(0, 0).into_owned();
        if ((r.transpose() * r) - Matrix3::identity()).norm() >= 1e-9 {
            return Err(Se3Error::NotRigid {
                reason: "rotation block is not orthonormal",
            });
        }
        if r.determinant() <= 0.0 {
            return Err(Se3Error::NotRigid {
                reason: "rotation block has non-positive determinant",
            });
        }
        Ok(Self { mat })
    }

    pub(crate) fn from_rotation_translation(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        let mut mat = Matrix4::identity();
        mat.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        mat.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self { mat }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.mat
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.mat.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.mat.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }
}

/// Skew-symmetric matrix such that `skew(a) * b = a × b`.
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// The six se(3) generator matrices: `T_1..T_3` rotations about x, y, z and
/// `T_4..T_6` translations along x, y, z.
pub fn generators() -> [Matrix4<f64>; 6] {
    let mut gens = [Matrix4::zeros(); 6];
    for (axis, gen) in gens.iter_mut().take(3).enumerate() {
        let mut e = Vector3::zeros();
        e[axis] = 1.0;
        gen.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&e));
    }
    for (axis, gen) in gens.iter_mut().skip(3).enumerate() {
        gen[(axis, 3)] = 1.0;
    }
    gens
}

/// Closed-form matrix exponential of `Σ ξ_p T_p`: Rodrigues rotation block
/// plus the exact V-matrix for the translation column.
pub fn exp_twist(xi: &Twist) -> RigidTransform {
    let omega = xi.omega();
    let v = xi.v();
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();

    // a = sinθ/θ, b = (1−cosθ)/θ², c = (θ−sinθ)/θ³
    let (a, b, c) = if theta < SMALL_ANGLE {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };

    let w = skew(&omega);
    let w2 = w * w;
    let r = Matrix3::identity() + w * a + w2 * b;
    let vmat = Matrix3::identity() + w * b + w2 * c;
    RigidTransform::from_rotation_translation(r, vmat * v)
}

/// Inverse of [`exp_twist`]. Fails within `1e-6` of the rotation angle π,
/// where the axis is not recoverable from `R − Rᵀ`.
pub fn log_transform(g: &RigidTransform) -> Result<Twist, Se3Error> {
    let r = g.rotation();
    let cos_theta = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    if theta > core::f64::consts::PI - ANGLE_SINGULARITY_MARGIN {
        return Err(Se3Error::AngleSingularity {
            angle: theta,
            margin: ANGLE_SINGULARITY_MARGIN,
        });
    }

    // ω = f · vee(R − Rᵀ) with f = θ / (2 sinθ)
    let theta2 = theta * theta;
    let f = if theta < SMALL_ANGLE {
        0.5 * (1.0 + theta2 / 6.0 + 7.0 * theta2 * theta2 / 360.0)
    } else {
        theta / (2.0 * theta.sin())
    };
    let omega = vee(&(r - r.transpose())) * f;

    // V⁻¹ = I − ½[ω]ₓ + d[ω]ₓ² with d = (1 − θ sinθ / (2(1−cosθ))) / θ²
    let d = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    let w = skew(&omega);
    let v_inv = Matrix3::identity() - w * 0.5 + (w * w) * d;
    Twist::from_parts(omega, v_inv * g.translation())
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    let r = a.rotation() * b.rotation();
    let t = a.rotation() * b.translation() + a.translation();
    RigidTransform::from_rotation_translation(r, t)
}

pub fn inverse(g: &RigidTransform) -> RigidTransform {
    let rt = g.rotation().transpose();
    RigidTransform::from_rotation_translation(rt, -(rt * g.translation()))
}

/// 6×6 map taking a global twist to the first-order equivalent twist in a
/// frame translated to center `c`: block form `[[I, 0], [−skew(c), I]]` under
/// the rotation-first ordering. Its inverse is `adjoint_translation(−c)`.
pub fn adjoint_translation(c: &Vector3<f64>) -> Matrix6<f64> {
    let mut m = Matrix6::identity();
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-skew(c)));
    m
}
