//! Point-cloud registration by inverse-compositional alignment of learned
//! per-point features, with an exact analytical Jacobian.
//!
//! The library covers the full pipeline: SE(3) algebra ([`se3`]), cloud
//! generation and evaluation-protocol corruptions ([`cloud`]), the per-point
//! feature embedding with hand-derived gradients ([`featnet`]), Jacobian
//! assembly in analytical, finite-difference, and voxel-conditioned variants
//! ([`jacobian`]), the registration solvers ([`solver`]), training ([`trainer`]),
//! a point-to-point ICP baseline ([`icp`]), error metrics ([`metrics`]), and
//! file formats ([`io`]).

pub mod cloud;
pub mod featnet;
pub mod icp;
pub mod io;
pub mod jacobian;
pub mod metrics;
pub mod se3;
pub mod solver;
pub mod trainer;
