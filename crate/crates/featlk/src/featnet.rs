//! The per-point feature embedding: a stack of affine + batch-norm + ReLU
//! layers applied independently to every point, pooled into a global feature
//! by a coordinate-wise max. Widths default to 3→64→128→1024 and are
//! configurable.
//!
//! Both gradient directions are exact and hand-derived: [`FeatureNet::input_gradient`]
//! differentiates the embedding w.r.t. point coordinates (the solver's Jacobian
//! needs this), [`FeatureNet::param_gradient`] is reverse-mode w.r.t. the
//! parameters (training needs this).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cloud::PointCloud;

/// Variance floor used by batch normalization: `σ = sqrt(max(var, ε))`.
/// Stored `bn_var` entries always respect the floor, so pass-through
/// statistics (`var = 1`) normalize by exactly 1.
pub const EPSILON_BN: f64 = 1e-5;

/// Momentum for the running-statistics update during training forwards.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("operation requires {required:?} mode but the net is in {actual:?} mode")]
    Mode {
        required: NetMode,
        actual: NetMode,
    },
    #[error("stale activations: the cloud changed since the recorded forward pass")]
    StaleActivations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetMode {
    Train,
    Inference,
}

/// One affine + batch-norm layer. `weight` is `out × in`.
#[derive(Debug, Clone)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub bn_scale: DVector<f64>,
    pub bn_shift: DVector<f64>,
    pub bn_mean: DVector<f64>,
    pub bn_var: DVector<f64>,
}

impl Layer {
    fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn validate(&self) -> Result<(), NetError> {
        let out = self.out_dim();
        for (name, v) in [
            ("bias", &self.bias),
            ("bn_scale", &self.bn_scale),
            ("bn_shift", &self.bn_shift),
            ("bn_mean", &self.bn_mean),
            ("bn_var", &self.bn_var),
        ] {
            if v.len() != out {
                return Err(NetError::Config(format!(
                    "{name} has length {} but the layer has {out} outputs",
                    v.len()
                )));
            }
        }
        if self.bn_var.iter().any(|&v| !(v >= EPSILON_BN)) {
            return Err(NetError::Config(format!(
                "bn_var entries must be >= {EPSILON_BN}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FeatureNet {
    layers: Vec<Layer>,
    mode: NetMode,
}

/// Everything a forward pass records: per-layer activations column-per-point,
/// ReLU masks, the normalization actually applied, and the pool routing.
#[derive(Debug, Clone)]
pub struct PerPointActivations {
    /// `inputs[l]` is the input to layer `l` (`inputs[0]` = raw coordinates);
    /// `inputs[L]` is the per-point embedding before pooling.
    pub inputs: Vec<DMatrix<f64>>,
    /// Normalized pre-activations per layer.
    pub normalized: Vec<DMatrix<f64>>,
    /// 0/1 ReLU masks per layer; exactly-zero pre-activations get mask 0.
    pub masks: Vec<DMatrix<f64>>,
    /// Per-channel mean and sigma the normalization used (batch or stored).
    pub bn_mean_used: Vec<DVector<f64>>,
    pub bn_sigma_used: Vec<DVector<f64>>,
    /// Channels where the batch variance hit the floor (their sigma is
    /// constant w.r.t. the inputs).
    pub bn_floored: Vec<Vec<bool>>,
    /// Raw (unfloored) batch variance per layer; used for running-stat updates.
    batch_var_raw: Vec<DVector<f64>>,
    /// Point index achieving the max for each feature dimension (ties go to
    /// the lowest index).
    pub pool_argmax: Vec<usize>,
    fingerprint: u64,
}

impl PerPointActivations {
    pub fn global_feature(&self) -> DVector<f64> {
        let z = self.inputs.last().expect("at least one layer");
        DVector::from_fn(z.nrows(), |k, _| z[(k, self.pool_argmax[k])])
    }
}

/// Gradients of a scalar w.r.t. every trainable parameter, layer by layer.
#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub bn_scale: DVector<f64>,
    pub bn_shift: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct ParamGradients {
    pub layers: Vec<LayerGradients>,
}

impl ParamGradients {
    pub fn zeros_like(net: &FeatureNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradients {
                    weight: DMatrix::zeros(l.out_dim(), l.in_dim()),
                    bias: DVector::zeros(l.out_dim()),
                    bn_scale: DVector::zeros(l.out_dim()),
                    bn_shift: DVector::zeros(l.out_dim()),
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGradients, factor: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight * factor;
            a.bias.axpy(factor, &b.bias, 1.0);
            a.bn_scale.axpy(factor, &b.bn_scale, 1.0);
            a.bn_shift.axpy(factor, &b.bn_shift, 1.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
            l.bn_scale *= factor;
            l.bn_shift *= factor;
        }
    }
}

fn cloud_fingerprint(cloud: &PointCloud) -> u64 {
    // FNV-1a over the coordinate bit patterns.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in cloud.points() {
        for a in 0..3 {
            for byte in p[a].to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        }
    }
    h ^ cloud.len() as u64
}

impl FeatureNet {
    pub fn new(layers: Vec<Layer>, mode: NetMode) -> Result<Self, NetError> {
        if layers.is_empty() {
            return Err(NetError::Config("a net needs at least one layer".into()));
        }
        let mut expect_in = 3;
        for (l, layer) in layers.iter().enumerate() {
            if layer.in_dim() != expect_in {
                return Err(NetError::Config(format!(
                    "layer {l} expects input width {expect_in} but has {}",
                    layer.in_dim()
                )));
            }
            layer.validate()?;
            expect_in = layer.out_dim();
        }
        Ok(Self { layers, mode })
    }

    /// Kaiming-uniform fan-in weights, zero biases, pass-through batch norm,
    /// training mode. `hidden` lists the output width of every layer, e.g.
    /// `[64, 128, 1024]`.
    pub fn kaiming_init(hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(hidden.len());
        let mut fan_in = 3;
        for &out in hidden {
            let bound = (6.0 / fan_in as f64).sqrt();
            let weight = DMatrix::from_fn(out, fan_in, |_, _| rng.gen_range(-bound..bound));
            layers.push(Layer {
                weight,
                bias: DVector::zeros(out),
                bn_scale: DVector::from_element(out, 1.0),
                bn_shift: DVector::zeros(out),
                bn_mean: DVector::zeros(out),
                bn_var: DVector::from_element(out, 1.0),
            });
            fan_in = out;
        }
        Self {
            layers,
            mode: NetMode::Train,
        }
    }

    pub fn mode(&self) -> NetMode {
        self.mode
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Feature dimension K.
    pub fn feature_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![3];
        w.extend(self.layers.iter().map(|l| l.out_dim()));
        w
    }

    /// Per-point embedding and max-pooled global feature. Pure: train-mode
    /// nets normalize with batch statistics but running statistics are only
    /// touched by [`FeatureNet::forward_train`].
    pub fn forward(
        &self,
        cloud: &PointCloud,
    ) -> Result<(DVector<f64>, PerPointActivations), NetError> {
        let n = cloud.len();
        let mut z = DMatrix::from_fn(3, n, |r, c| cloud.points()[c][r]);

        let mut inputs = vec![z.clone()];
        let mut normalized = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut bn_mean_used = Vec::with_capacity(self.layers.len());
        let mut bn_sigma_used = Vec::with_capacity(self.layers.len());
        let mut bn_floored = Vec::with_capacity(self.layers.len());
        let mut batch_var_raw = Vec::with_capacity(self.layers.len());

        for layer in &self.layers {
            let mut y = &layer.weight * &z;
            for mut col in y.column_iter_mut() {
                col += &layer.bias;
            }

            let out = layer.out_dim();
            let (mean, sigma, floored, raw_var) = match self.mode {
                NetMode::Inference => (
                    layer.bn_mean.clone(),
                    layer.bn_var.map(|v| v.sqrt()),
                    vec![false; out],
                    DVector::zeros(0),
                ),
                NetMode::Train => {
                    let mean = DVector::from_fn(out, |c, _| y.row(c).mean());
                    let raw_var = DVector::from_fn(out, |c, _| {
                        let m = mean[c];
                        y.row(c).iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / n as f64
                    });
                    let mut floored = vec![false; out];
                    let sigma = DVector::from_fn(out, |c, _| {
                        if raw_var[c] < EPSILON_BN {
                            floored[c] = true;
                            EPSILON_BN.sqrt()
                        } else {
                            raw_var[c].sqrt()
                        }
                    });
                    (mean, sigma, floored, raw_var)
                }
            };

            let mut yhat = y;
            for c in 0..out {
                let inv = 1.0 / sigma[c];
                for v in yhat.row_mut(c).iter_mut() {
                    *v = (*v - mean[c]) * inv;
                }
            }

            let mut act = yhat.clone();
            for c in 0..out {
                for v in act.row_mut(c).iter_mut() {
                    *v = *v * layer.bn_scale[c] + layer.bn_shift[c];
                }
            }
            let mask = act.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            z = act.zip_map(&mask, |v, m| v * m);

            normalized.push(yhat);
            masks.push(mask);
            bn_mean_used.push(mean);
            bn_sigma_used.push(sigma);
            bn_floored.push(floored);
            batch_var_raw.push(raw_var);
            inputs.push(z.clone());
        }

        let k = self.feature_dim();
        let mut pool_argmax = vec![0usize; k];
        let z_final = inputs.last().expect("non-empty");
        for row in 0..k {
            let mut best = z_final[(row, 0)];
            for col in 1..n {
                if z_final[(row, col)] > best {
                    best = z_final[(row, col)];
                    pool_argmax[row] = col;
                }
            }
        }

        let acts = PerPointActivations {
            inputs,
            normalized,
            masks,
            bn_mean_used,
            bn_sigma_used,
            bn_floored,
            batch_var_raw,
            pool_argmax,
            fingerprint: cloud_fingerprint(cloud),
        };
        Ok((acts.global_feature(), acts))
    }

    /// Training forward: normalizes with batch statistics and updates the
    /// running statistics with momentum [`BN_MOMENTUM`].
    pub fn forward_train(
        &mut self,
        cloud: &PointCloud,
    ) -> Result<(DVector<f64>, PerPointActivations), NetError> {
        if self.mode != NetMode::Train {
            return Err(NetError::Mode {
                required: NetMode::Train,
                actual: self.mode,
            });
        }
        let (global, acts) = self.forward(cloud)?;
        self.absorb_batch_stats(&acts);
        Ok((global, acts))
    }

    /// Folds the batch statistics recorded by a train-mode forward into the
    /// running statistics, without re-running the forward pass. No-op on
    /// activations recorded in inference mode.
    pub fn absorb_batch_stats(&mut self, acts: &PerPointActivations) {
        for (layer, (mean, raw_var)) in self
            .layers
            .iter_mut()
            .zip(acts.bn_mean_used.iter().zip(&acts.batch_var_raw))
        {
            if raw_var.is_empty() {
                continue;
            }
            for c in 0..layer.out_dim() {
                layer.bn_mean[c] = BN_MOMENTUM * layer.bn_mean[c] + (1.0 - BN_MOMENTUM) * mean[c];
                let floored = raw_var[c].max(EPSILON_BN);
                layer.bn_var[c] = BN_MOMENTUM * layer.bn_var[c] + (1.0 - BN_MOMENTUM) * floored;
            }
        }
    }

    /// Per-layer linear factor of the inference-mode gradient:
    /// `diag(bn_scale / sqrt(bn_var)) · weight`.
    pub fn effective_linear(&self) -> Result<Vec<DMatrix<f64>>, NetError> {
        if self.mode != NetMode::Inference {
            return Err(NetError::Mode {
                required: NetMode::Inference,
                actual: self.mode,
            });
        }
        Ok(self
            .layers
            .iter()
            .map(|layer| {
                let mut w = layer.weight.clone();
                for c in 0..layer.out_dim() {
                    let s = layer.bn_scale[c] / layer.bn_var[c].sqrt();
                    for v in w.row_mut(c).iter_mut() {
                        *v *= s;
                    }
                }
                w
            })
            .collect())
    }

    /// Exact Jacobian of each point's embedding w.r.t. its own coordinates,
    /// one K×3 block per point. Cross-point blocks are identically zero, which
    /// is why this requires inference mode: batch statistics would couple
    /// points.
    pub fn input_gradient(&self, cloud: &PointCloud) -> Result<Vec<DMatrix<f64>>, NetError> {
        let effective = self.effective_linear()?;
        let (_, acts) = self.forward(cloud)?;
        let n = cloud.len();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut g: DMatrix<f64> = DMatrix::identity(3, 3);
            for (l, w) in effective.iter().enumerate() {
                let mut next = w * &g;
                for c in 0..next.nrows() {
                    let m = acts.masks[l][(c, i)];
                    if m == 0.0 {
                        next.row_mut(c).fill(0.0);
                    }
                }
                g = next;
            }
            out.push(g);
        }
        Ok(out)
    }

    /// Reverse-mode gradients of `⟨upstream, global_feature⟩` w.r.t. every
    /// parameter, routing through the pool argmax and, for train-mode nets,
    /// the batch statistics.
    pub fn param_gradient(
        &self,
        cloud: &PointCloud,
        acts: &PerPointActivations,
        upstream: &DVector<f64>,
    ) -> Result<ParamGradients, NetError> {
        if acts.fingerprint != cloud_fingerprint(cloud) {
            return Err(NetError::StaleActivations);
        }
        let k = self.feature_dim();
        if upstream.len() != k {
            return Err(NetError::Config(format!(
                "upstream has length {} but K = {k}",
                upstream.len()
            )));
        }

        let n = cloud.len();
        let l_total = self.layers.len();
        let mut grads = ParamGradients::zeros_like(self);

        // Pool routing: feature k flows to the winning point only.
        let mut d_z = DMatrix::zeros(k, n);
        for row in 0..k {
            d_z[(row, acts.pool_argmax[row])] = upstream[row];
        }

        for l in (0..l_total).rev() {
            let layer = &self.layers[l];
            let out = layer.out_dim();
            let d_pre = d_z.zip_map(&acts.masks[l], |v, m| v * m);
            let yhat = &acts.normalized[l];

            let mut d_scale = DVector::zeros(out);
            let mut d_shift = DVector::zeros(out);
            for c in 0..out {
                let mut s = 0.0;
                let mut t = 0.0;
                for col in 0..n {
                    s += d_pre[(c, col)] * yhat[(c, col)];
                    t += d_pre[(c, col)];
                }
                d_scale[c] = s;
                d_shift[c] = t;
            }

            // d_yhat = d_pre ⊙ scale, then through the normalization.
            let mut d_y = DMatrix::zeros(out, n);
            match self.mode {
                NetMode::Inference => {
                    for c in 0..out {
                        let f = layer.bn_scale[c] / acts.bn_sigma_used[l][c];
                        for col in 0..n {
                            d_y[(c, col)] = d_pre[(c, col)] * f;
                        }
                    }
                }
                NetMode::Train => {
                    for c in 0..out {
                        let scale = layer.bn_scale[c];
                        let inv_sigma = 1.0 / acts.bn_sigma_used[l][c];
                        let mut mean_dyhat = 0.0;
                        let mut mean_dyhat_yhat = 0.0;
                        for col in 0..n {
                            let dh = d_pre[(c, col)] * scale;
                            mean_dyhat += dh;
                            mean_dyhat_yhat += dh * yhat[(c, col)];
                        }
                        mean_dyhat /= n as f64;
                        mean_dyhat_yhat /= n as f64;
                        let var_term_active = !acts.bn_floored[l][c];
                        for col in 0..n {
                            let dh = d_pre[(c, col)] * scale;
                            let mut v = dh - mean_dyhat;
                            if var_term_active {
                                v -= yhat[(c, col)] * mean_dyhat_yhat;
                            }
                            d_y[(c, col)] = v * inv_sigma;
                        }
                    }
                }
            }

            grads.layers[l].weight = &d_y * acts.inputs[l].transpose();
            grads.layers[l].bias = DVector::from_fn(out, |c, _| d_y.row(c).sum());
            grads.layers[l].bn_scale = d_scale;
            grads.layers[l].bn_shift = d_shift;

            if l > 0 {
                d_z = layer.weight.transpose() * d_y;
            }
        }
        Ok(grads)
    }

    /// Absorbs the normalization into the affine parameters, producing an
    /// inference-mode net whose batch norm is a pass-through. Idempotent.
    pub fn fold_bn(&self) -> FeatureNet {
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let out = layer.out_dim();
                let mut weight = layer.weight.clone();
                let mut bias = DVector::zeros(out);
                for c in 0..out {
                    let f = layer.bn_scale[c] / layer.bn_var[c].sqrt();
                    for v in weight.row_mut(c).iter_mut() {
                        *v *= f;
                    }
                    bias[c] = (layer.bias[c] - layer.bn_mean[c]) * f + layer.bn_shift[c];
                }
                Layer {
                    weight,
                    bias,
                    bn_scale: DVector::from_element(out, 1.0),
                    bn_shift: DVector::zeros(out),
                    bn_mean: DVector::zeros(out),
                    bn_var: DVector::from_element(out, 1.0),
                }
            })
            .collect();
        FeatureNet {
            layers,
            mode: NetMode::Inference,
        }
    }

    /// Same parameters reinterpreted in inference mode (stored statistics are
    /// applied affinely rather than folded).
    pub fn to_inference(&self) -> FeatureNet {
        FeatureNet {
            layers: self.layers.clone(),
            mode: NetMode::Inference,
        }
    }
}
