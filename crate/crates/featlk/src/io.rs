//! File formats: point-cloud text formats (`.xyz`, OFF, ASCII PLY, vertex
//! elements only), the versioned weight JSON, training checkpoints, and
//! registration-result JSON. All text, locale-independent.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{CloudError, PointCloud};
use crate::featnet::{FeatureNet, Layer, NetError, NetMode, ParamGradients};
use crate::se3::{RigidTransform, Se3Error};
use crate::solver::{RegistrationResult, Termination};
use crate::trainer::AdamState;

pub const WEIGHT_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Se3(#[from] Se3Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Off,
    PlyAscii,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Result<Self, IoError> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("xyz") | Some("txt") => Ok(Self::Xyz),
            Some("off") => Ok(Self::Off),
            Some("ply") => Ok(Self::PlyAscii),
            other => Err(IoError::UnsupportedFormat(format!(
                "unknown cloud extension {other:?} for {}",
                path.display()
            ))),
        }
    }
}

fn read_to_string(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), IoError> {
    let mut f = fs::File::create(path).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(contents.as_bytes()).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_point(
    path: &Path,
    line_no: usize,
    line: &str,
) -> Result<Vector3<f64>, IoError> {
    let mut it = line.split_whitespace();
    let mut coords = [0.0; 3];
    for c in &mut coords {
        let token = it.next().ok_or_else(|| IoError::Parse {
            path: path.display().to_string(),
            line: line_no,
            message: format!("expected 3 coordinates, got '{line}'"),
        })?;
        *c = token.parse().map_err(|_| IoError::Parse {
            path: path.display().to_string(),
            line: line_no,
            message: format!("bad number '{token}'"),
        })?;
    }
    Ok(Vector3::new(coords[0], coords[1], coords[2]))
}

/// Loads a point cloud, inferring the format from the file extension.
pub fn load_cloud(path: &Path) -> Result<PointCloud, IoError> {
    load_cloud_as(path, CloudFormat::from_path(path)?)
}

pub fn load_cloud_as(path: &Path, format: CloudFormat) -> Result<PointCloud, IoError> {
    let text = read_to_string(path)?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("cloud")
        .to_string();
    let points = match format {
        CloudFormat::Xyz => parse_xyz(path, &text)?,
        CloudFormat::Off => parse_off(path, &text)?,
        CloudFormat::PlyAscii => parse_ply(path, &text)?,
    };
    Ok(PointCloud::new(points, id)?)
}

fn parse_xyz(path: &Path, text: &str) -> Result<Vec<Vector3<f64>>, IoError> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        points.push(parse_point(path, i + 1, trimmed)?);
    }
    Ok(points)
}

fn parse_off(path: &Path, text: &str) -> Result<Vec<Vector3<f64>>, IoError> {
    let err = |line: usize, message: String| IoError::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (line_no, header) = lines
        .next()
        .ok_or_else(|| err(1, "empty OFF file".into()))?;
    if !header.starts_with("OFF") {
        return Err(err(line_no, format!("expected OFF header, got '{header}'")));
    }
    // Counts may share the header line in some writers.
    let counts_text = header.trim_start_matches("OFF").trim();
    let (counts_line, counts_text) = if counts_text.is_empty() {
        lines
            .next()
            .ok_or_else(|| err(line_no, "missing OFF counts line".into()))?
    } else {
        (line_no, counts_text)
    };
    let n_vertices: usize = counts_text
        .split_whitespace()
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| err(counts_line, format!("bad counts line '{counts_text}'")))?;

    let mut points = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let (line_no, line) = lines
            .next()
            .ok_or_else(|| err(counts_line, format!("expected {n_vertices} vertices")))?;
        points.push(parse_point(path, line_no, line)?);
    }
    Ok(points)
}

fn parse_ply(path: &Path, text: &str) -> Result<Vec<Vector3<f64>>, IoError> {
    let err = |line: usize, message: String| IoError::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (l1, magic) = lines.next().ok_or_else(|| err(1, "empty PLY file".into()))?;
    if magic != "ply" {
        return Err(err(l1, format!("expected 'ply' magic, got '{magic}'")));
    }

    let mut n_vertices = None;
    let mut in_vertex_element = false;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut header_end = 0;
    for (line_no, line) in lines.by_ref() {
        if line == "end_header" {
            header_end = line_no;
            break;
        }
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("format") => {
                if tokens.next() != Some("ascii") {
                    return Err(err(line_no, "only ascii PLY is supported".into()));
                }
            }
            Some("element") => {
                let name = tokens.next().unwrap_or("");
                in_vertex_element = name == "vertex";
                if in_vertex_element {
                    let count = tokens.next().and_then(|t| t.parse().ok());
                    n_vertices = Some(count.ok_or_else(|| {
                        err(line_no, format!("bad vertex count in '{line}'"))
                    })?);
                }
            }
            Some("property") if in_vertex_element => {
                // "property <type> <name>"
                let _ty = tokens.next();
                if let Some(name) = tokens.next() {
                    vertex_props.push(name.to_string());
                }
            }
            _ => {}
        }
    }
    let n_vertices: usize =
        n_vertices.ok_or_else(|| err(header_end, "no vertex element in header".into()))?;
    let coord_cols: Vec<usize> = ["x", "y", "z"]
        .iter()
        .map(|axis| {
            vertex_props
                .iter()
                .position(|p| p == axis)
                .ok_or_else(|| err(header_end, format!("vertex element lacks property {axis}")))
        })
        .collect::<Result<_, _>>()?;

    let mut points = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let (line_no, line) = loop {
            let (line_no, line) = lines
                .next()
                .ok_or_else(|| err(header_end, format!("expected {n_vertices} vertices")))?;
            if !line.is_empty() {
                break (line_no, line);
            }
        };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let mut p = Vector3::zeros();
        for (axis, &col) in coord_cols.iter().enumerate() {
            let token = tokens.get(col).ok_or_else(|| {
                err(line_no, format!("vertex line has {} fields", tokens.len()))
            })?;
            p[axis] = token.parse().map_err(|_| {
                err(line_no, format!("bad number '{token}'"))
            })?;
        }
        points.push(p);
    }
    // Trailing elements (faces etc.) are ignored.
    Ok(points)
}

/// Writes a cloud with 9 significant digits per coordinate.
pub fn save_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<(), IoError> {
    let fmt = |p: &Vector3<f64>| format!("{:.8e} {:.8e} {:.8e}", p.x, p.y, p.z);
    let mut out = String::new();
    match format {
        CloudFormat::Xyz => {
            for p in cloud.points() {
                out.push_str(&fmt(p));
                out.push('\n');
            }
        }
        CloudFormat::Off => {
            out.push_str("OFF\n");
            out.push_str(&format!("{} 0 0\n", cloud.len()));
            for p in cloud.points() {
                out.push_str(&fmt(p));
                out.push('\n');
            }
        }
        CloudFormat::PlyAscii => {
            out.push_str("ply\nformat ascii 1.0\n");
            out.push_str(&format!("element vertex {}\n", cloud.len()));
            out.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
            for p in cloud.points() {
                out.push_str(&fmt(p));
                out.push('\n');
            }
        }
    }
    write_file(path, &out)
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerJson {
    /// Row-major `out × in` weight matrix.
    a: Vec<f64>,
    b: Vec<f64>,
    bn_scale: Vec<f64>,
    bn_shift: Vec<f64>,
    bn_mean: Vec<f64>,
    bn_var: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsJson {
    format_version: u32,
    widths: Vec<usize>,
    k: usize,
    mode: String,
    layers: Vec<LayerJson>,
}

fn net_to_json(net: &FeatureNet) -> WeightsJson {
    WeightsJson {
        format_version: WEIGHT_FORMAT_VERSION,
        widths: net.widths(),
        k: net.feature_dim(),
        mode: match net.mode() {
            NetMode::Train => "train".into(),
            NetMode::Inference => "inference".into(),
        },
        layers: net
            .layers()
            .iter()
            .map(|l| LayerJson {
                a: l.weight.transpose().as_slice().to_vec(),
                b: l.bias.as_slice().to_vec(),
                bn_scale: l.bn_scale.as_slice().to_vec(),
                bn_shift: l.bn_shift.as_slice().to_vec(),
                bn_mean: l.bn_mean.as_slice().to_vec(),
                bn_var: l.bn_var.as_slice().to_vec(),
            })
            .collect(),
    }
}

fn net_from_json(json: WeightsJson) -> Result<FeatureNet, IoError> {
    if json.format_version != WEIGHT_FORMAT_VERSION {
        return Err(IoError::Schema(format!(
            "unknown weight format_version {} (expected {WEIGHT_FORMAT_VERSION})",
            json.format_version
        )));
    }
    if json.widths.len() != json.layers.len() + 1 {
        return Err(IoError::Schema(format!(
            "widths lists {} entries for {} layers",
            json.widths.len(),
            json.layers.len()
        )));
    }
    let mode = match json.mode.as_str() {
        "train" => NetMode::Train,
        "inference" => NetMode::Inference,
        other => return Err(IoError::Schema(format!("unknown mode '{other}'"))),
    };
    let mut layers = Vec::with_capacity(json.layers.len());
    for (i, layer) in json.layers.iter().enumerate() {
        let rows = json.widths[i + 1];
        let cols = json.widths[i];
        if layer.a.len() != rows * cols {
            return Err(IoError::Schema(format!(
                "layers[{i}].a has {} entries, expected {rows}x{cols}",
                layer.a.len()
            )));
        }
        layers.push(Layer {
            weight: DMatrix::from_row_slice(rows, cols, &layer.a),
            bias: DVector::from_column_slice(&layer.b),
            bn_scale: DVector::from_column_slice(&layer.bn_scale),
            bn_shift: DVector::from_column_slice(&layer.bn_shift),
            bn_mean: DVector::from_column_slice(&layer.bn_mean),
            bn_var: DVector::from_column_slice(&layer.bn_var),
        });
    }
    Ok(FeatureNet::new(layers, mode)?)
}

pub fn save_weights(net: &FeatureNet, path: &Path) -> Result<(), IoError> {
    let text =
        serde_json::to_string_pretty(&net_to_json(net)).expect("weight schema serializes");
    write_file(path, &text)
}

pub fn load_weights(path: &Path) -> Result<FeatureNet, IoError> {
    let text = read_to_string(path)?;
    let json: WeightsJson = serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })?;
    net_from_json(json)
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamTensorsJson {
    weight: Vec<f64>,
    bias: Vec<f64>,
    bn_scale: Vec<f64>,
    bn_shift: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointJson {
    format_version: u32,
    weights: WeightsJson,
    /// Next epoch to run.
    epoch_next: usize,
    /// Master seed; per-epoch streams derive from it, so resumed runs
    /// reproduce uninterrupted ones.
    master_seed: u64,
    adam_step: u64,
    adam_first: Vec<AdamTensorsJson>,
    adam_second: Vec<AdamTensorsJson>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: FeatureNet,
    pub adam: AdamState,
    pub epoch_next: usize,
    pub master_seed: u64,
}

fn grads_to_json(g: &ParamGradients) -> Vec<AdamTensorsJson> {
    g.layers
        .iter()
        .map(|l| AdamTensorsJson {
            weight: l.weight.transpose().as_slice().to_vec(),
            bias: l.bias.as_slice().to_vec(),
            bn_scale: l.bn_scale.as_slice().to_vec(),
            bn_shift: l.bn_shift.as_slice().to_vec(),
        })
        .collect()
}

fn grads_from_json(
    tensors: &[AdamTensorsJson],
    like: &ParamGradients,
) -> Result<ParamGradients, IoError> {
    if tensors.len() != like.layers.len() {
        return Err(IoError::Schema(format!(
            "checkpoint has {} moment tensors for {} layers",
            tensors.len(),
            like.layers.len()
        )));
    }
    let mut out = like.clone();
    for (dst, src) in out.layers.iter_mut().zip(tensors) {
        if src.weight.len() != dst.weight.len() {
            return Err(IoError::Schema("moment tensor shape mismatch".into()));
        }
        dst.weight =
            DMatrix::from_row_slice(dst.weight.nrows(), dst.weight.ncols(), &src.weight);
        dst.bias = DVector::from_column_slice(&src.bias);
        dst.bn_scale = DVector::from_column_slice(&src.bn_scale);
        dst.bn_shift = DVector::from_column_slice(&src.bn_shift);
    }
    Ok(out)
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), IoError> {
    let json = CheckpointJson {
        format_version: CHECKPOINT_FORMAT_VERSION,
        weights: net_to_json(&checkpoint.net),
        epoch_next: checkpoint.epoch_next,
        master_seed: checkpoint.master_seed,
        adam_step: checkpoint.adam.step,
        adam_first: grads_to_json(&checkpoint.adam.first),
        adam_second: grads_to_json(&checkpoint.adam.second),
    };
    let text = serde_json::to_string(&json).expect("checkpoint schema serializes");
    write_file(path, &text)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let text = read_to_string(path)?;
    let json: CheckpointJson = serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })?;
    if json.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(IoError::Schema(format!(
            "unknown checkpoint format_version {}",
            json.format_version
        )));
    }
    let net = net_from_json(json.weights)?;
    let zeros = ParamGradients::zeros_like(&net);
    let adam = AdamState {
        first: grads_from_json(&json.adam_first, &zeros)?,
        second: grads_from_json(&json.adam_second, &zeros)?,
        step: json.adam_step,
    };
    Ok(Checkpoint {
        net,
        adam,
        epoch_next: json.epoch_next,
        master_seed: json.master_seed,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResultJson {
    /// Row-major 4×4 source→template transform.
    pub estimate_row_major: Vec<f64>,
    pub iterations: usize,
    pub residual_norms: Vec<f64>,
    pub termination: String,
    pub jacobian_builds: usize,
}

impl ResultJson {
    pub fn from_result(result: &RegistrationResult) -> Self {
        Self {
            estimate_row_major: result
                .estimate
                .matrix()
                .transpose()
                .as_slice()
                .to_vec(),
            iterations: result.iterations,
            residual_norms: result.residual_norms.clone(),
            termination: result.termination.as_str().to_string(),
            jacobian_builds: result.jacobian_builds,
        }
    }

    pub fn to_result(&self) -> Result<RegistrationResult, IoError> {
        if self.estimate_row_major.len() != 16 {
            return Err(IoError::Schema(format!(
                "estimate has {} entries, expected 16",
                self.estimate_row_major.len()
            )));
        }
        let mat = Matrix4::from_row_slice(&self.estimate_row_major);
        let termination = match self.termination.as_str() {
            "converged" => Termination::Converged,
            "max_iters" => Termination::MaxIters,
            "diverged" => Termination::Diverged,
            "rank_deficient" => Termination::RankDeficient,
            other => return Err(IoError::Schema(format!("unknown termination '{other}'"))),
        };
        Ok(RegistrationResult {
            estimate: RigidTransform::from_matrix(mat)?,
            iterations: self.iterations,
            residual_norms: self.residual_norms.clone(),
            termination,
            jacobian_builds: self.jacobian_builds,
        })
    }
}
