//! Registration error metrics and aggregates: per-pair rotation/translation
//! errors, RMSE/median summaries, success ratios, and the area under the
//! success-ratio curve.

use thiserror::Error;

use crate::se3::{compose, inverse, log_transform, RigidTransform};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Geodesic rotation error (degrees) and translation error (scene units) of
/// `est · gt⁻¹`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairError {
    pub rot_err_deg: f64,
    pub trans_err: f64,
}

/// A pair counts as successful when BOTH errors are strictly below their
/// thresholds.
#[derive(Debug, Clone, Copy)]
pub struct SuccessCriterion {
    pub rot_thresh_deg: f64,
    pub trans_thresh: f64,
}

impl Default for SuccessCriterion {
    fn default() -> Self {
        Self {
            rot_thresh_deg: 5.0,
            trans_thresh: 0.05,
        }
    }
}

impl SuccessCriterion {
    pub fn is_success(&self, e: &PairError) -> bool {
        e.rot_err_deg < self.rot_thresh_deg && e.trans_err < self.trans_thresh
    }
}

/// Error of an estimate against the ground truth, measured on `est · gt⁻¹`.
/// Rotations at the log-map singularity are reported as exactly 180 degrees.
pub fn pair_error(est: &RigidTransform, gt: &RigidTransform) -> PairError {
    let delta = compose(est, &inverse(gt));
    let rot_err_deg = match log_transform(&delta) {
        Ok(xi) => xi.omega().norm().to_degrees(),
        Err(_) => 180.0,
    };
    PairError {
        rot_err_deg,
        trans_err: delta.translation().norm(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregates {
    pub rmse_rot: f64,
    pub median_rot: f64,
    pub rmse_trans: f64,
    pub median_trans: f64,
    pub success_ratio: f64,
}

fn rmse(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    (values.map(|v| v * v).sum::<f64>() / n as f64).sqrt()
}

/// Lower of the two middle values for even-length inputs.
fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    values[(values.len() - 1) / 2]
}

pub fn aggregate(
    errors: &[PairError],
    criterion: &SuccessCriterion,
) -> Result<Aggregates, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::InvalidArgument(
            "aggregate over an empty error list".into(),
        ));
    }
    let n = errors.len();
    let successes = errors.iter().filter(|e| criterion.is_success(e)).count();
    Ok(Aggregates {
        rmse_rot: rmse(errors.iter().map(|e| e.rot_err_deg), n),
        median_rot: median(errors.iter().map(|e| e.rot_err_deg).collect()),
        rmse_trans: rmse(errors.iter().map(|e| e.trans_err), n),
        median_trans: median(errors.iter().map(|e| e.trans_err).collect()),
        success_ratio: successes as f64 / n as f64,
    })
}

/// Success ratio swept over `samples` thresholds from 0 to the criterion
/// maximum, scaling the rotation and translation thresholds jointly and
/// proportionally. The x-coordinate is the rotation threshold in degrees.
pub fn success_curve_joint(
    errors: &[PairError],
    criterion: &SuccessCriterion,
    samples: usize,
) -> Vec<(f64, f64)> {
    (0..samples)
        .map(|i| {
            let f = i as f64 / (samples - 1) as f64;
            let crit = SuccessCriterion {
                rot_thresh_deg: f * criterion.rot_thresh_deg,
                trans_thresh: f * criterion.trans_thresh,
            };
            let ratio = errors.iter().filter(|e| crit.is_success(e)).count() as f64
                / errors.len() as f64;
            (crit.rot_thresh_deg, ratio)
        })
        .collect()
}

/// Success ratio against the rotation threshold alone.
pub fn success_curve_rot(errors: &[PairError], max_deg: f64, samples: usize) -> Vec<(f64, f64)> {
    (0..samples)
        .map(|i| {
            let t = max_deg * i as f64 / (samples - 1) as f64;
            let ratio =
                errors.iter().filter(|e| e.rot_err_deg < t).count() as f64 / errors.len() as f64;
            (t, ratio)
        })
        .collect()
}

/// Success ratio against the translation threshold alone.
pub fn success_curve_trans(errors: &[PairError], max: f64, samples: usize) -> Vec<(f64, f64)> {
    (0..samples)
        .map(|i| {
            let t = max * i as f64 / (samples - 1) as f64;
            let ratio =
                errors.iter().filter(|e| e.trans_err < t).count() as f64 / errors.len() as f64;
            (t, ratio)
        })
        .collect()
}

/// Trapezoidal area under a success-ratio curve, normalized by the threshold
/// range so a constant ratio of 1 scores exactly 1.
pub fn auc(curve: &[(f64, f64)]) -> Result<f64, MetricsError> {
    if curve.len() < 2 {
        return Err(MetricsError::InvalidArgument(
            "auc needs at least two curve points".into(),
        ));
    }
    for pair in curve.windows(2) {
        if pair[1].0 <= pair[0].0 {
            return Err(MetricsError::InvalidArgument(
                "auc thresholds must be strictly increasing".into(),
            ));
        }
    }
    if curve.iter().any(|&(_, r)| !(0.0..=1.0).contains(&r)) {
        return Err(MetricsError::InvalidArgument(
            "auc ratios must lie in [0, 1]".into(),
        ));
    }
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let (t0, r0) = pair[0];
        let (t1, r1) = pair[1];
        area += (r0 + r1) / 2.0 * (t1 - t0);
    }
    Ok(area / (curve.last().unwrap().0 - curve[0].0))
}
