//! Training of the feature network on randomly perturbed synthetic pairs.
//!
//! Each step unrolls a few solver iterations. The Jacobian pseudoinverse and
//! the template-warp trajectory recorded during the forward unroll are treated
//! as constants of the step (a frozen trace); gradients then flow exactly
//! through every feature evaluation, the least-squares increments, and the
//! exponential-map composition of the estimate. Freezing the trace is what
//! makes the step's gradient well-defined and finite-difference checkable.

use nalgebra::{DVector, Matrix4, Vector6};
use thiserror::Error;

use crate::cloud::{PairSpec, PointCloud, PrimitiveKind};
use crate::featnet::{FeatureNet, NetError, ParamGradients};
use crate::jacobian::{analytical_jacobian, JacobianBundle, JacobianError};
use crate::metrics::{pair_error, SuccessCriterion};
use crate::se3::{compose, exp_twist, inverse, RigidTransform, Twist};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss on pair {pair_index}: transform {loss_transform}, feature {loss_feature}")]
    NonFiniteLoss {
        pair_index: usize,
        loss_transform: f64,
        loss_feature: f64,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("jacobian build failed: {0}")]
    Jacobian(JacobianError),
    #[error("empty dataset")]
    EmptyDataset,
}

/// How the configured decay rate is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayMode {
    /// Decoupled weight decay: parameters shrink by `lr · decay` per step.
    DecoupledWeightDecay,
    /// Learning-rate decay: `lr / (1 + decay · step)`, no shrinkage.
    LearningRateDecay,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub decay_mode: DecayMode,
    /// Unrolled solver iterations per training step.
    pub unroll: usize,
    pub lambda_transform: f64,
    pub lambda_feature: f64,
    pub seed: u64,
    pub max_rot_deg: f64,
    pub max_trans: f64,
    /// Running statistics are absorbed from batch statistics for this many
    /// leading epochs, then frozen so the optimizer sees a stationary
    /// normalization.
    pub bn_stats_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-3,
            decay: 1e-4,
            decay_mode: DecayMode::DecoupledWeightDecay,
            unroll: 2,
            lambda_transform: 1.0,
            lambda_feature: 1.0,
            seed: 0,
            max_rot_deg: 45.0,
            max_trans: 0.8,
            bn_stats_epochs: 0,
        }
    }
}

/// First/second moment accumulators for every parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub first: ParamGradients,
    pub second: ParamGradients,
    pub step: u64,
}

impl AdamState {
    pub fn new(net: &FeatureNet) -> Self {
        Self {
            first: ParamGradients::zeros_like(net),
            second: ParamGradients::zeros_like(net),
            step: 0,
        }
    }

    /// One Adam step on every parameter tensor.
    pub fn apply(&mut self, net: &mut FeatureNet, grads: &ParamGradients, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        let lr = match cfg.decay_mode {
            DecayMode::DecoupledWeightDecay => cfg.learning_rate,
            DecayMode::LearningRateDecay => {
                cfg.learning_rate / (1.0 + cfg.decay * self.step as f64)
            }
        };
        let shrink = match cfg.decay_mode {
            DecayMode::DecoupledWeightDecay => lr * cfg.decay,
            DecayMode::LearningRateDecay => 0.0,
        };

        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
            *p -= shrink * *p;
        };

        for (l, layer) in net.layers_mut().iter_mut().enumerate() {
            let g = &grads.layers[l];
            let m = &mut self.first.layers[l];
            let v = &mut self.second.layers[l];
            for (i, p) in layer.weight.iter_mut().enumerate() {
                update(p, g.weight[i], &mut m.weight[i], &mut v.weight[i]);
            }
            for (i, p) in layer.bias.iter_mut().enumerate() {
                update(p, g.bias[i], &mut m.bias[i], &mut v.bias[i]);
            }
            for (i, p) in layer.bn_scale.iter_mut().enumerate() {
                update(p, g.bn_scale[i], &mut m.bn_scale[i], &mut v.bn_scale[i]);
            }
            for (i, p) in layer.bn_shift.iter_mut().enumerate() {
                update(p, g.bn_shift[i], &mut m.bn_shift[i], &mut v.bn_shift[i]);
            }
        }
    }
}

/// Frobenius-norm-squared of `est · gt⁻¹ − I₄`.
pub fn loss_transform(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    (compose(est, &inverse(gt)).matrix() - Matrix4::identity()).norm_squared()
}

/// Squared global-feature difference under the estimated alignment:
/// `‖φ(est⁻¹ · P_T) − φ(P_S)‖²`.
pub fn loss_feature(
    net: &FeatureNet,
    est: &RigidTransform,
    template: &PointCloud,
    source: &PointCloud,
) -> Result<f64, NetError> {
    let (feat_t, _) = net.forward(&template.apply(&inverse(est)))?;
    let (feat_s, _) = net.forward(source)?;
    Ok((feat_t - feat_s).norm_squared())
}

/// The constants of one training step: the Jacobian bundle and the estimate
/// trajectory recorded during the forward unroll. `warps[j]` is the
/// source→template estimate used to pull the source back when forming
/// residual `j+1`; the last entry is the final estimate used by the feature
/// loss.
#[derive(Debug, Clone)]
pub struct UnrollTrace {
    pub bundle: JacobianBundle,
    pub warps: Vec<RigidTransform>,
}

/// Runs the forward unroll with the current parameters and freezes the
/// resulting trajectory. Returns `None` when the template's Jacobian is
/// rank-deficient (the pair is skipped).
///
/// Residuals mirror the solver exactly: the source is pulled back into the
/// template frame and compared against the fixed template features.
/// Evaluation uses the net's stored statistics (inference mode); per-cloud
/// batch statistics would make the feature map exactly translation-invariant
/// (the first layer's mean subtraction cancels any shared offset), which
/// destroys the translation channel of the residual.
pub fn unroll_trace(
    net: &FeatureNet,
    pair: &PairSpec,
    cfg: &TrainConfig,
) -> Result<Option<UnrollTrace>, TrainError> {
    let infer = net.to_inference();
    let bundle = match analytical_jacobian(&infer, &pair.template) {
        Ok(b) => b,
        Err(JacobianError::RankDeficient { .. }) => return Ok(None),
        Err(e) => return Err(TrainError::Jacobian(e)),
    };
    let (feat_template, _) = infer.forward(&pair.template)?;
    let mut warps = vec![RigidTransform::identity()];
    let mut estimate = RigidTransform::identity();
    for _ in 0..cfg.unroll {
        let (feat_pulled, _) = infer.forward(&pair.source.apply(&estimate))?;
        let residual = &feat_pulled - &feat_template;
        let dxi = bundle.solve_increment(&residual);
        estimate = compose(&exp_twist(&dxi), &estimate);
        warps.push(estimate);
    }
    Ok(Some(UnrollTrace { bundle, warps }))
}

/// Losses, estimate, and parameter gradients of one pair under a frozen trace.
#[derive(Debug)]
pub struct PairOutcome {
    pub loss_transform: f64,
    pub loss_feature: f64,
    pub estimate: RigidTransform,
    pub grads: ParamGradients,
}

/// Evaluates the unrolled losses as a pure function of the parameters, holding
/// the trace constant, and returns their exact gradients.
pub fn pair_loss_and_grads(
    net: &FeatureNet,
    pair: &PairSpec,
    cfg: &TrainConfig,
    trace: &UnrollTrace,
) -> Result<PairOutcome, TrainError> {
    let unroll = trace.warps.len() - 1;
    let infer = net.to_inference();
    let (feat_template, template_acts) = infer.forward(&pair.template)?;

    // Residual sites j = 1..=unroll pull the source back with the frozen
    // warps[j-1]; the final site feeds the feature loss.
    let mut source_sites = Vec::with_capacity(unroll + 1);
    let mut increments = Vec::with_capacity(unroll);
    for warp in &trace.warps[..unroll] {
        let pulled = pair.source.apply(warp);
        let (feat_pulled, acts) = infer.forward(&pulled)?;
        let residual = &feat_pulled - &feat_template;
        increments.push(trace.bundle.solve_increment(&residual));
        source_sites.push((pulled, acts));
    }
    let final_pulled = pair.source.apply(&trace.warps[unroll]);
    let (feat_final, final_acts) = infer.forward(&final_pulled)?;
    let final_residual = &feat_final - &feat_template;
    let l_phi = final_residual.norm_squared();
    source_sites.push((final_pulled, final_acts));

    // est(θ) = exp(Δξ_u)···exp(Δξ_1).
    let exps: Vec<RigidTransform> = increments.iter().map(exp_twist).collect();
    let mut est = RigidTransform::identity();
    for e in exps.iter() {
        est = compose(e, &est);
    }
    let gt_inv = inverse(&pair.gt);
    let m = compose(&est, &gt_inv);
    let l_g = (m.matrix() - Matrix4::identity()).norm_squared();

    // Backward: upstream per feature-evaluation site. The template site is
    // shared by every residual.
    let mut template_upstream = DVector::zeros(net.feature_dim());
    let mut source_upstreams: Vec<DVector<f64>> =
        vec![DVector::zeros(net.feature_dim()); unroll + 1];

    // Feature-loss path: dLφ/d(feat_final) = 2 r, dLφ/d(feat_template) = −2 r.
    source_upstreams[unroll] += &final_residual * (2.0 * cfg.lambda_feature);
    template_upstream -= &final_residual * (2.0 * cfg.lambda_feature);

    // Transform-loss path: dL_G/dΔξ_j through the exponential chain, then
    // dΔξ_j/dr_j = pinv.
    let m_minus_i = m.matrix() - Matrix4::identity();
    for j in 0..unroll {
        // Prefix = exp(Δξ_u)···exp(Δξ_{j+2}), Suffix = exp(Δξ_j)···exp(Δξ_1)·gt⁻¹.
        let mut prefix = RigidTransform::identity();
        for e in exps[j + 1..].iter() {
            prefix = compose(e, &prefix);
        }
        let mut suffix = gt_inv;
        for e in exps[..j].iter() {
            suffix = compose(e, &suffix);
        }
        let xi_mat = twist_matrix(&increments[j]);
        let mut dl_dxi = Vector6::zeros();
        for p in 0..6 {
            let (_, dexp) = exp_with_directional(&xi_mat, &generator_matrix(p));
            let dm = prefix.matrix() * dexp * suffix.matrix();
            dl_dxi[p] = 2.0 * m_minus_i.dot(&dm);
        }
        // Only the active columns of a constrained bundle map back to residuals.
        let mut dl_dcols = DVector::zeros(trace.bundle.twist_columns.len());
        for (col, &twist_idx) in trace.bundle.twist_columns.iter().enumerate() {
            dl_dcols[col] = dl_dxi[twist_idx];
        }
        let dl_dr = trace.bundle.pinv.transpose() * dl_dcols * cfg.lambda_transform;
        source_upstreams[j] += &dl_dr;
        template_upstream -= &dl_dr;
    }

    // Accumulate parameter gradients across all sites. The gradients are
    // taken on the inference view; the parameter values are shared with the
    // training net, so they apply directly.
    let mut grads = infer.param_gradient(&pair.template, &template_acts, &template_upstream)?;
    for ((pulled, acts), upstream) in source_sites.iter().zip(&source_upstreams) {
        if upstream.iter().all(|&v| v == 0.0) {
            continue;
        }
        let site_grads = infer.param_gradient(pulled, acts, upstream)?;
        grads.add_scaled(&site_grads, 1.0);
    }

    Ok(PairOutcome {
        loss_transform: l_g,
        loss_feature: l_phi,
        estimate: est,
        grads,
    })
}

fn twist_matrix(xi: &Twist) -> Matrix4<f64> {
    let gens = crate::se3::generators();
    let mut x = Matrix4::zeros();
    for (p, gen) in gens.iter().enumerate() {
        x += gen * xi.as_vector()[p];
    }
    x
}

fn generator_matrix(p: usize) -> Matrix4<f64> {
    crate::se3::generators()[p]
}

/// Matrix exponential of `x` together with its exact directional derivative
/// along `h`, via the block identity
/// `exp([[x, h], [0, x]]) = [[exp(x), D], [0, exp(x)]]`
/// evaluated by a scaled-and-squared power series.
fn exp_with_directional(x: &Matrix4<f64>, h: &Matrix4<f64>) -> (Matrix4<f64>, Matrix4<f64>) {
    let norm = x.norm();
    let squarings = if norm > 0.5 {
        ((norm / 0.5).log2().ceil() as i32).max(0)
    } else {
        0
    };
    let scale = 0.5f64.powi(squarings);
    let xs = x * scale;
    let hs = h * scale;

    let mut sum_a = Matrix4::identity();
    let mut sum_b = Matrix4::zeros();
    let mut term_a = Matrix4::identity();
    let mut term_b = Matrix4::zeros();
    for k in 1..=24 {
        let inv_k = 1.0 / k as f64;
        let next_b = (term_a * hs + term_b * xs) * inv_k;
        term_a = term_a * xs * inv_k;
        term_b = next_b;
        sum_a += term_a;
        sum_b += term_b;
    }
    for _ in 0..squarings {
        sum_b = sum_a * sum_b + sum_b * sum_a;
        sum_a = sum_a * sum_a;
    }
    (sum_a, sum_b)
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss_transform: f64,
    pub mean_loss_feature: f64,
    pub success_ratio: f64,
    pub pairs_used: usize,
}

/// One pass over the dataset: deterministic per-epoch shuffle, frozen-trace
/// gradients averaged per batch, one Adam step per batch, running statistics
/// absorbed from the source and final-template sites.
pub fn train_epoch(
    net: &mut FeatureNet,
    dataset: &[PairSpec],
    cfg: &TrainConfig,
    adam: &mut AdamState,
    epoch: usize,
) -> Result<EpochStats, TrainError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
        cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
    );
    order.shuffle(&mut rng);

    let criterion = SuccessCriterion::default();
    let mut sum_l_g = 0.0;
    let mut sum_l_phi = 0.0;
    let mut successes = 0;
    let mut pairs_used = 0;

    for batch in order.chunks(cfg.batch_size) {
        if epoch < cfg.bn_stats_epochs {
            // Track the data distribution in the running statistics before
            // they are used by this batch's inference views.
            for &idx in batch {
                let (_, source_stats) = net.forward(&dataset[idx].source)?;
                net.absorb_batch_stats(&source_stats);
            }
        }

        // Pair passes are independent; gradients are reduced in batch order
        // so the epoch stays bit-reproducible.
        let outcomes: Vec<Result<Option<PairOutcome>, TrainError>> = {
            use rayon::prelude::*;
            batch
                .par_iter()
                .map(|&idx| {
                    let pair = &dataset[idx];
                    match unroll_trace(net, pair, cfg)? {
                        Some(trace) => pair_loss_and_grads(net, pair, cfg, &trace).map(Some),
                        None => Ok(None),
                    }
                })
                .collect()
        };

        let mut batch_grads = ParamGradients::zeros_like(net);
        let mut batch_count = 0;
        for (&idx, outcome) in batch.iter().zip(outcomes) {
            let Some(outcome) = outcome? else { continue };
            if !outcome.loss_transform.is_finite() || !outcome.loss_feature.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    pair_index: idx,
                    loss_transform: outcome.loss_transform,
                    loss_feature: outcome.loss_feature,
                });
            }
            sum_l_g += outcome.loss_transform;
            sum_l_phi += outcome.loss_feature;
            if criterion.is_success(&pair_error(&outcome.estimate, &dataset[idx].gt)) {
                successes += 1;
            }
            batch_grads.add_scaled(&outcome.grads, 1.0);
            batch_count += 1;
            pairs_used += 1;
        }
        if batch_count == 0 {
            continue;
        }
        batch_grads.scale(1.0 / batch_count as f64);
        adam.apply(net, &batch_grads, cfg);
    }

    if pairs_used == 0 {
        return Err(TrainError::EmptyDataset);
    }
    Ok(EpochStats {
        epoch,
        mean_loss_transform: sum_l_g / pairs_used as f64,
        mean_loss_feature: sum_l_phi / pairs_used as f64,
        success_ratio: successes as f64 / pairs_used as f64,
        pairs_used,
    })
}

/// Synthesizes an exact-correspondence training set by cycling through the
/// given primitive kinds with per-pair seeds derived from `seed`.
pub fn synthesize_dataset(
    kinds: &[PrimitiveKind],
    count: usize,
    n_points: usize,
    seed: u64,
    max_rot_deg: f64,
    max_trans: f64,
) -> Result<Vec<PairSpec>, crate::cloud::CloudError> {
    (0..count)
        .map(|i| {
            PairSpec::synthesize(
                kinds[i % kinds.len()],
                n_points,
                seed.wrapping_add(i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d),
                max_rot_deg,
                max_trans,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::PrimitiveKind;
    use nalgebra::Vector3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transform_loss_is_zero_only_at_equality() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let g = exp_twist(
                &Twist::new(Vector6::from_fn(|_, _| rng.gen_range(-1.0..1.0))).unwrap(),
            );
            // g·g⁻¹ reconstructs the identity up to rounding.
            assert!(loss_transform(&g, &g) < 1e-24);
            let other = exp_twist(
                &Twist::new(Vector6::from_fn(|_, _| rng.gen_range(-1.0..1.0))).unwrap(),
            );
            if (other.matrix() - g.matrix()).norm() > 1e-12 {
                assert!(loss_transform(&other, &g) > 0.0);
            }
        }
    }

    #[test]
    fn transform_loss_half_turn_hand_value() {
        let gt = RigidTransform::identity();
        let est = exp_twist(
            &Twist::from_parts(
                Vector3::new(0.0, 0.0, core::f64::consts::PI),
                Vector3::zeros(),
            )
            .unwrap(),
        );
        // R(180°) − I = diag(−2, −2, 0): Frobenius norm squared 8.
        assert!((loss_transform(&est, &gt) - 8.0).abs() < 1e-10);
    }

    #[test]
    fn transform_loss_right_composition_invariance() {
        // (est·h)(gt·h)⁻¹ = est·gt⁻¹ exactly, for any rigid h.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let est = exp_twist(
                &Twist::new(Vector6::from_fn(|_, _| rng.gen_range(-1.0..1.0))).unwrap(),
            );
            let gt = exp_twist(
                &Twist::new(Vector6::from_fn(|_, _| rng.gen_range(-1.0..1.0))).unwrap(),
            );
            let h = exp_twist(
                &Twist::new(Vector6::from_fn(|_, _| rng.gen_range(-1.0..1.0))).unwrap(),
            );
            let base = loss_transform(&est, &gt);
            let shifted = loss_transform(&compose(&est, &h), &compose(&gt, &h));
            assert!((base - shifted).abs() < 1e-10 * base.max(1.0));
        }
    }

    #[test]
    fn transform_loss_rotation_left_invariance() {
        // Premultiplying both arguments by a pure rotation conjugates
        // est·gt⁻¹ orthogonally, which preserves the Frobenius norm.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let est = exp_twist(
                &Twist::new(Vector6::from_fn(|_, _| rng.gen_range(-1.0..1.0))).unwrap(),
            );
            let gt = exp_twist(
                &Twist::new(Vector6::from_fn(|_, _| rng.gen_range(-1.0..1.0))).unwrap(),
            );
            let h = exp_twist(
                &Twist::from_parts(
                    Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
                    Vector3::zeros(),
                )
                .unwrap(),
            );
            let base = loss_transform(&est, &gt);
            let shifted = loss_transform(&compose(&h, &est), &compose(&h, &gt));
            assert!((base - shifted).abs() < 1e-10 * base.max(1.0));
        }
    }

    fn small_net(seed: u64) -> FeatureNet {
        FeatureNet::kaiming_init(&[8, 12, 16], seed)
    }

    #[test]
    fn feature_loss_vanishes_at_exact_alignment() {
        let net = small_net(4).fold_bn();
        let pair = PairSpec::synthesize(PrimitiveKind::Cube, 60, 5, 30.0, 0.4).unwrap();
        let loss = loss_feature(&net, &pair.gt, &pair.template, &pair.source).unwrap();
        assert!(loss < 1e-10, "loss {loss}");
    }

    #[test]
    fn feature_loss_positive_when_misaligned() {
        let net = small_net(6).fold_bn();
        let pair = PairSpec::synthesize(PrimitiveKind::Cube, 60, 7, 45.0, 0.5).unwrap();
        let loss = loss_feature(
            &net,
            &RigidTransform::identity(),
            &pair.template,
            &pair.source,
        )
        .unwrap();
        assert!(loss > 1e-6, "loss {loss}");
    }

    #[test]
    fn feature_loss_is_permutation_invariant() {
        let net = small_net(8).fold_bn();
        let pair = PairSpec::synthesize(PrimitiveKind::Torus, 50, 9, 20.0, 0.2).unwrap();
        let mut perm: Vec<usize> = (0..pair.source.len()).collect();
        perm.rotate_left(17);
        let shuffled = PairSpec {
            source: pair.source.select(&perm),
            template: pair.template.clone(),
            gt: pair.gt,
        };
        let a = loss_feature(&net, &pair.gt, &pair.template, &pair.source).unwrap();
        let b = loss_feature(&net, &pair.gt, &shuffled.template, &shuffled.source).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exp_directional_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let xi = Twist::new(Vector6::from_fn(|_, _| rng.gen_range(-1.5..1.5))).unwrap();
            let x = twist_matrix(&xi);
            for p in 0..6 {
                let h = generator_matrix(p);
                let (a, d) = exp_with_directional(&x, &h);
                assert!((a - exp_twist(&xi).matrix()).norm() < 1e-12);
                let eps = 1e-6;
                let mut hi = *xi.as_vector();
                hi[p] += eps;
                let mut lo = *xi.as_vector();
                lo[p] -= eps;
                let fd = (exp_twist(&Twist::new(hi).unwrap()).matrix()
                    - exp_twist(&Twist::new(lo).unwrap()).matrix())
                    / (2.0 * eps);
                assert!((d - fd).norm() < 1e-8, "dir {p}: {}", (d - fd).norm());
            }
        }
    }

    #[test]
    fn zero_gradient_adam_step_only_shrinks() {
        let mut net = small_net(11);
        let before = net.clone();
        let mut adam = AdamState::new(&net);
        let cfg = TrainConfig::default();
        let zeros = ParamGradients::zeros_like(&net);
        adam.apply(&mut net, &zeros, &cfg);
        let factor = 1.0 - cfg.learning_rate * cfg.decay;
        for (a, b) in net.layers().iter().zip(before.layers()) {
            for (x, y) in a.weight.iter().zip(b.weight.iter()) {
                assert!((x - y * factor).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bit_identical() {
        let mut net = small_net(12);
        let before = net.clone();
        let dataset =
            synthesize_dataset(&[PrimitiveKind::Cube], 4, 40, 13, 20.0, 0.2).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            ..TrainConfig::default()
        };
        let mut adam = AdamState::new(&net);
        train_epoch(&mut net, &dataset, &cfg, &mut adam, 0).unwrap();
        for (a, b) in net.layers().iter().zip(before.layers()) {
            assert_eq!(a.weight, b.weight);
            assert_eq!(a.bias, b.bias);
            assert_eq!(a.bn_scale, b.bn_scale);
            assert_eq!(a.bn_shift, b.bn_shift);
        }
    }

    #[test]
    fn fixed_seed_training_is_reproducible() {
        let run = || -> f64 {
            let mut net = small_net(14);
            let dataset =
                synthesize_dataset(&[PrimitiveKind::Cube, PrimitiveKind::Sphere], 8, 40, 15, 30.0, 0.3)
                    .unwrap();
            let cfg = TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            };
            let mut adam = AdamState::new(&net);
            let mut last = 0.0;
            for epoch in 0..cfg.epochs {
                last = train_epoch(&mut net, &dataset, &cfg, &mut adam, epoch)
                    .unwrap()
                    .mean_loss_transform;
            }
            last
        };
        let a = run();
        let b = run();
        assert!((a - b).abs() < 1e-6);
        assert_eq!(a, b);
    }

    #[test]
    fn unrolled_gradient_matches_frozen_trace_finite_differences() {
        let net = small_net(16);
        let pair = PairSpec::synthesize(PrimitiveKind::Cube, 40, 17, 25.0, 0.3).unwrap();
        let cfg = TrainConfig::default();
        let trace = unroll_trace(&net, &pair, &cfg).unwrap().unwrap();
        let base = pair_loss_and_grads(&net, &pair, &cfg, &trace).unwrap();

        let loss_of = |n: &FeatureNet| -> f64 {
            let o = pair_loss_and_grads(n, &pair, &cfg, &trace).unwrap();
            cfg.lambda_transform * o.loss_transform + cfg.lambda_feature * o.loss_feature
        };

        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let h = 1e-5;
        for _ in 0..20 {
            let l = rng.gen_range(0..net.layers().len());
            let shape = &net.layers()[l];
            let dir_w = nalgebra::DMatrix::from_fn(
                shape.weight.nrows(),
                shape.weight.ncols(),
                |_, _| rng.gen_range(-1.0..1.0),
            );
            let dir_s = DVector::from_fn(shape.bias.len(), |_, _| rng.gen_range(-1.0..1.0));
            let analytic =
                base.grads.layers[l].weight.dot(&dir_w) + base.grads.layers[l].bn_scale.dot(&dir_s);
            let mut hi = net.clone();
            let mut lo = net.clone();
            for (target, delta) in [(&mut hi, h), (&mut lo, -h)] {
                let layer = &mut target.layers_mut()[l];
                layer.weight += &dir_w * delta;
                layer.bn_scale += &dir_s * delta;
            }
            let fd = (loss_of(&hi) - loss_of(&lo)) / (2.0 * h);
            let denom = analytic.abs().max(1e-5);
            assert!(
                ((fd - analytic) / denom).abs() < 1e-3,
                "layer {l}: fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn desk_scale_training_reduces_transform_loss() {
        // Training-run oracle, fully deterministic: unrolling through the
        // solver's working depth is what makes the transform loss trainable.
        let mut net = FeatureNet::kaiming_init(&[16, 32, 64], 20);
        let dataset = synthesize_dataset(
            &[PrimitiveKind::Sphere, PrimitiveKind::Cube],
            200,
            64,
            21,
            20.0,
            0.2,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            learning_rate: 3e-4,
            unroll: 10,
            max_rot_deg: 20.0,
            max_trans: 0.2,
            ..TrainConfig::default()
        };
        let mut adam = AdamState::new(&net);
        let mut first = f64::NAN;
        let mut last = f64::NAN;
        for epoch in 0..cfg.epochs {
            let stats = train_epoch(&mut net, &dataset, &cfg, &mut adam, epoch).unwrap();
            if epoch == 0 {
                first = stats.mean_loss_transform;
            }
            last = stats.mean_loss_transform;
        }
        assert!(
            last <= first / 10.0,
            "mean transform loss went {first} -> {last}"
        );
    }
}
