//! Harness configuration: TOML with a JSON fallback. Every suite parameter
//! (thresholds, grids, seeds) lives here; nothing is hard-coded in the
//! commands. Validation reports offending fields by path.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use featlk::cloud::PrimitiveKind;
use featlk::trainer::{DecayMode, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    /// Per-layer output widths, input is always 3.
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_widths() -> Vec<usize> {
    vec![64, 128, 1024]
}

impl Default for NetSection {
    fn default() -> Self {
        Self {
            widths: default_widths(),
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_decay")]
    pub decay: f64,
    /// "weight-decay" (decoupled) or "lr-decay".
    #[serde(default = "d_decay_mode")]
    pub decay_mode: String,
    #[serde(default = "d_unroll")]
    pub unroll: usize,
    #[serde(default = "d_one")]
    pub lambda_transform: f64,
    #[serde(default = "d_one")]
    pub lambda_feature: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_rot45")]
    pub max_rot_deg: f64,
    #[serde(default = "d_trans08")]
    pub max_trans: f64,
    /// Leading epochs that absorb batch statistics into the running
    /// statistics; afterwards the normalization is frozen.
    #[serde(default)]
    pub bn_stats_epochs: usize,
    #[serde(default = "d_points")]
    pub n_points: usize,
    #[serde(default = "d_pairs")]
    pub pairs: usize,
    #[serde(default = "d_train_kinds")]
    pub kinds: Vec<String>,
}

fn d_epochs() -> usize {
    20
}
fn d_batch() -> usize {
    8
}
fn d_lr() -> f64 {
    1e-3
}
fn d_decay() -> f64 {
    1e-4
}
fn d_decay_mode() -> String {
    "weight-decay".into()
}
fn d_unroll() -> usize {
    2
}
fn d_one() -> f64 {
    1.0
}
fn d_rot45() -> f64 {
    45.0
}
fn d_trans08() -> f64 {
    0.8
}
fn d_points() -> usize {
    256
}
fn d_pairs() -> usize {
    500
}
fn d_train_kinds() -> Vec<String> {
    vec![
        "sphere".into(),
        "cylinder".into(),
        "torus".into(),
        "plane-with-bumps".into(),
    ]
}

impl Default for TrainSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    #[serde(default = "d_bench_pairs")]
    pub pairs: usize,
    #[serde(default = "d_points")]
    pub n_points: usize,
    #[serde(default = "d_bench_seed")]
    pub seed: u64,
    #[serde(default = "d_rot30")]
    pub max_rot_deg: f64,
    #[serde(default = "d_trans03")]
    pub max_trans: f64,
    #[serde(default = "d_bench_kinds")]
    pub kinds: Vec<String>,
    #[serde(default = "d_max_iters")]
    pub max_iters: usize,
    #[serde(default = "d_rot_thresh")]
    pub rot_thresh_deg: f64,
    #[serde(default = "d_trans_thresh")]
    pub trans_thresh: f64,
    #[serde(default = "d_curve_samples")]
    pub curve_samples: usize,
    #[serde(default = "d_noise_stds")]
    pub noise_stds: Vec<f64>,
    #[serde(default = "d_sparsity")]
    pub sparsity_fractions: Vec<f64>,
    #[serde(default = "d_partial_keep")]
    pub partial_keep: f64,
    #[serde(default = "d_voxel_grids")]
    pub voxel_grids: Vec<[usize; 3]>,
    #[serde(default = "d_voxel_caps")]
    pub voxel_caps: Vec<usize>,
    #[serde(default = "d_voxel_min_points")]
    pub voxel_min_points: usize,
    /// Re-bin source points every iteration instead of once (sensitivity
    /// study of the pairing decision).
    #[serde(default)]
    pub voxel_rebin: bool,
    /// Step size of the finite-difference solver in the fidelity suite.
    #[serde(default = "d_fidelity_step")]
    pub fidelity_step: f64,
    /// Rotation thresholds (degrees) for the fidelity sweep; translation
    /// thresholds scale proportionally from the success criterion.
    #[serde(default = "d_fidelity_thresholds")]
    pub fidelity_thresholds_deg: Vec<f64>,
    /// Primitives per composite scene in the voxel suite.
    #[serde(default = "d_scene_objects")]
    pub scene_objects: usize,
    /// Points sampled per primitive in the voxel suite's dense scenes; the
    /// whole-cloud rows subsample each scan down to `n_points`.
    #[serde(default = "d_scene_points")]
    pub scene_points_per_object: usize,
}

fn d_bench_pairs() -> usize {
    100
}
fn d_bench_seed() -> u64 {
    7
}
fn d_rot30() -> f64 {
    30.0
}
fn d_trans03() -> f64 {
    0.3
}
fn d_bench_kinds() -> Vec<String> {
    vec!["cube".into(), "plane-with-bumps".into()]
}
fn d_max_iters() -> usize {
    10
}
fn d_rot_thresh() -> f64 {
    5.0
}
fn d_trans_thresh() -> f64 {
    0.05
}
fn d_curve_samples() -> usize {
    64
}
fn d_noise_stds() -> Vec<f64> {
    vec![0.0, 0.01, 0.02, 0.04]
}
fn d_sparsity() -> Vec<f64> {
    vec![1.0, 0.75, 0.5, 0.25]
}
fn d_partial_keep() -> f64 {
    0.7
}
fn d_voxel_grids() -> Vec<[usize; 3]> {
    vec![[1, 1, 1], [2, 2, 2], [3, 3, 3]]
}
fn d_voxel_caps() -> Vec<usize> {
    vec![1000, 500, 148, 125, 37]
}
fn d_voxel_min_points() -> usize {
    16
}
fn d_fidelity_step() -> f64 {
    1e-2
}
fn d_fidelity_thresholds() -> Vec<f64> {
    vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 5.0]
}
fn d_scene_objects() -> usize {
    3
}
fn d_scene_points() -> usize {
    600
}

impl Default for BenchSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub net: NetSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub bench: BenchSection,
}

impl Config {
    /// Parses TOML first, then JSON; reports whichever error matches the
    /// extension when both fail.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let looks_json = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let parsed: Config = if looks_json {
            serde_json::from_str(&text)
                .with_context(|| format!("parsing JSON config {}", path.display()))?
        } else {
            match toml::from_str(&text) {
                Ok(cfg) => cfg,
                Err(toml_err) => serde_json::from_str(&text).map_err(|_| {
                    anyhow::anyhow!("parsing TOML config {}: {toml_err}", path.display())
                })?,
            }
        };
        parsed.validate().map_err(|field_error| {
            anyhow::anyhow!("config {}: {field_error}", path.display())
        })?;
        Ok(parsed)
    }

    /// Schema validation with field paths.
    pub fn validate(&self) -> Result<(), String> {
        if self.net.widths.is_empty() {
            return Err("net.widths: must list at least one layer width".into());
        }
        if self.net.widths.iter().any(|&w| w == 0) {
            return Err("net.widths: widths must be positive".into());
        }
        let t = &self.train;
        if t.epochs == 0 {
            return Err("train.epochs: must be >= 1".into());
        }
        if t.batch_size == 0 {
            return Err("train.batch_size: must be >= 1".into());
        }
        if !(t.learning_rate > 0.0) && t.learning_rate != 0.0 {
            return Err("train.learning_rate: must be >= 0".into());
        }
        if t.learning_rate < 0.0 {
            return Err("train.learning_rate: must be >= 0".into());
        }
        if t.decay < 0.0 {
            return Err("train.decay: must be >= 0".into());
        }
        if !matches!(t.decay_mode.as_str(), "weight-decay" | "lr-decay") {
            return Err(format!(
                "train.decay_mode: unknown mode '{}' (weight-decay | lr-decay)",
                t.decay_mode
            ));
        }
        if t.unroll == 0 {
            return Err("train.unroll: must be >= 1".into());
        }
        if t.lambda_transform < 0.0 {
            return Err("train.lambda_transform: must be >= 0".into());
        }
        if t.lambda_feature < 0.0 {
            return Err("train.lambda_feature: must be >= 0".into());
        }
        if !(0.0..180.0).contains(&t.max_rot_deg) {
            return Err("train.max_rot_deg: must lie in [0, 180)".into());
        }
        if t.max_trans < 0.0 {
            return Err("train.max_trans: must be >= 0".into());
        }
        if t.n_points < 8 {
            return Err("train.n_points: must be >= 8".into());
        }
        if t.pairs == 0 {
            return Err("train.pairs: must be >= 1".into());
        }
        parse_kinds(&t.kinds).map_err(|e| format!("train.kinds: {e}"))?;

        let b = &self.bench;
        if b.pairs == 0 {
            return Err("bench.pairs: must be >= 1".into());
        }
        if b.n_points < 8 {
            return Err("bench.n_points: must be >= 8".into());
        }
        if !(0.0..180.0).contains(&b.max_rot_deg) {
            return Err("bench.max_rot_deg: must lie in [0, 180)".into());
        }
        if b.max_iters == 0 {
            return Err("bench.max_iters: must be >= 1".into());
        }
        if b.rot_thresh_deg <= 0.0 {
            return Err("bench.rot_thresh_deg: must be positive".into());
        }
        if b.trans_thresh <= 0.0 {
            return Err("bench.trans_thresh: must be positive".into());
        }
        if b.curve_samples < 2 {
            return Err("bench.curve_samples: must be >= 2".into());
        }
        if b.noise_stds.iter().any(|&s| s < 0.0) {
            return Err("bench.noise_stds: entries must be >= 0".into());
        }
        if b
            .sparsity_fractions
            .iter()
            .any(|&f| !(0.0 < f && f <= 1.0))
        {
            return Err("bench.sparsity_fractions: entries must lie in (0, 1]".into());
        }
        if !(0.0 < b.partial_keep && b.partial_keep <= 1.0) {
            return Err("bench.partial_keep: must lie in (0, 1]".into());
        }
        if b.voxel_grids.iter().any(|g| g.iter().any(|&d| d == 0)) {
            return Err("bench.voxel_grids: grid dims must be >= 1".into());
        }
        if b.voxel_caps.iter().any(|&c| c < b.voxel_min_points) {
            return Err("bench.voxel_caps: caps must be >= bench.voxel_min_points".into());
        }
        if b.voxel_min_points < 4 {
            return Err("bench.voxel_min_points: must be >= 4".into());
        }
        if b.fidelity_step <= 0.0 {
            return Err("bench.fidelity_step: must be positive".into());
        }
        if b.fidelity_thresholds_deg.is_empty() {
            return Err("bench.fidelity_thresholds_deg: must not be empty".into());
        }
        if b.scene_objects == 0 {
            return Err("bench.scene_objects: must be >= 1".into());
        }
        if b.scene_points_per_object < 8 {
            return Err("bench.scene_points_per_object: must be >= 8".into());
        }
        parse_kinds(&b.kinds).map_err(|e| format!("bench.kinds: {e}"))?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            decay: self.train.decay,
            decay_mode: if self.train.decay_mode == "lr-decay" {
                DecayMode::LearningRateDecay
            } else {
                DecayMode::DecoupledWeightDecay
            },
            unroll: self.train.unroll,
            lambda_transform: self.train.lambda_transform,
            lambda_feature: self.train.lambda_feature,
            seed: self.train.seed,
            max_rot_deg: self.train.max_rot_deg,
            max_trans: self.train.max_trans,
            bn_stats_epochs: self.train.bn_stats_epochs,
        }
    }
}

pub fn parse_kinds(names: &[String]) -> Result<Vec<PrimitiveKind>, String> {
    if names.is_empty() {
        return Err("must list at least one primitive kind".into());
    }
    names
        .iter()
        .map(|n| PrimitiveKind::parse(n).map_err(|e| e.to_string()))
        .collect()
}
