//! Point-cloud data model, synthetic shape generation, evaluation-protocol
//! corruptions (perturbation, noise, sparsification, partial culling),
//! unit-box normalization, and voxel partitioning.

use nalgebra::Vector3;
use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::se3::{RigidTransform, Twist};

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// An N×3 point set with a provenance label. `N ≥ 1`, all coordinates finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    id: String,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, id: impl Into<String>) -> Result<Self, CloudError> {
        if points.is_empty() {
            return Err(CloudError::DegenerateInput("empty point set".into()));
        }
        if !points.iter().all(|p| p.iter().all(|x| x.is_finite())) {
            return Err(CloudError::InvalidArgument(
                "non-finite coordinate".into(),
            ));
        }
        Ok(Self {
            points,
            id: id.into(),
        })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64
    }

    /// Per-point rigid map; preserves point count and ordering.
    pub fn apply(&self, g: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| g.apply_point(p)).collect(),
            id: self.id.clone(),
        }
    }

    /// Translate every point by `-c`.
    pub fn recentered(&self, c: &Vector3<f64>) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| p - c).collect(),
            id: self.id.clone(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            id: self.id.clone(),
        }
    }
}

/// Registration pair: `gt` maps the source onto the template.
#[derive(Debug, Clone)]
pub struct PairSpec {
    pub source: PointCloud,
    pub template: PointCloud,
    pub gt: RigidTransform,
}

impl PairSpec {
    /// Builds an exact-correspondence pair: the template is the source under a
    /// random rigid perturbation, so the ground truth is known by construction.
    pub fn synthesize(
        kind: PrimitiveKind,
        n_points: usize,
        seed: u64,
        max_rot_deg: f64,
        max_trans: f64,
    ) -> Result<Self, CloudError> {
        let raw = generate_primitive(kind, n_points, seed)?;
        let source = normalize_unit_box(&raw)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let gt = crate::se3::exp_twist(&sample_perturbation(&mut rng, max_rot_deg, max_trans));
        let template = source.apply(&gt);
        Ok(Self {
            source,
            template,
            gt,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveKind {
    Sphere,
    Cube,
    Cylinder,
    Torus,
    PlaneWithBumps,
}

impl PrimitiveKind {
    pub fn parse(name: &str) -> Result<Self, CloudError> {
        match name {
            "sphere" => Ok(Self::Sphere),
            "cube" => Ok(Self::Cube),
            "cylinder" => Ok(Self::Cylinder),
            "torus" => Ok(Self::Torus),
            "plane-with-bumps" => Ok(Self::PlaneWithBumps),
            other => Err(CloudError::InvalidArgument(format!(
                "unknown primitive kind '{other}'"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Cube => "cube",
            Self::Cylinder => "cylinder",
            Self::Torus => "torus",
            Self::PlaneWithBumps => "plane-with-bumps",
        }
    }
}

fn unit_direction(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Surface-uniform sampling of a synthetic shape; deterministic for a fixed seed.
pub fn generate_primitive(
    kind: PrimitiveKind,
    n_points: usize,
    seed: u64,
) -> Result<PointCloud, CloudError> {
    if n_points < 8 {
        return Err(CloudError::InvalidArgument(format!(
            "n_points = {n_points}, need at least 8"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = match kind {
        PrimitiveKind::Sphere => (0..n_points).map(|_| unit_direction(&mut rng)).collect(),
        PrimitiveKind::Cube => sample_cube(&mut rng, n_points),
        PrimitiveKind::Cylinder => sample_cylinder(&mut rng, n_points),
        PrimitiveKind::Torus => sample_torus(&mut rng, n_points),
        PrimitiveKind::PlaneWithBumps => sample_plane_with_bumps(&mut rng, n_points),
    };
    PointCloud::new(points, format!("{}-{}-{}", kind.name(), n_points, seed))
}

/// Unit cube surface centered at the origin; faces drawn proportionally to area.
fn sample_cube(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| {
            let face = rng.gen_range(0..6usize);
            let u = rng.gen_range(-0.5..0.5);
            let v = rng.gen_range(-0.5..0.5);
            let s = if face % 2 == 0 { 0.5 } else { -0.5 };
            match face / 2 {
                0 => Vector3::new(s, u, v),
                1 => Vector3::new(u, s, v),
                _ => Vector3::new(u, v, s),
            }
        })
        .collect()
}

/// Cylinder of radius 0.5 and height 1.0: lateral wall plus both caps,
/// weighted by surface area.
fn sample_cylinder(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
    let r = 0.5;
    let h = 1.0;
    let lateral = 2.0 * core::f64::consts::PI * r * h;
    let caps = 2.0 * core::f64::consts::PI * r * r;
    let p_lateral = lateral / (lateral + caps);
    (0..n)
        .map(|_| {
            let phi = rng.gen_range(0.0..core::f64::consts::TAU);
            if rng.gen_range(0.0..1.0) < p_lateral {
                Vector3::new(r * phi.cos(), r * phi.sin(), rng.gen_range(-h / 2.0..h / 2.0))
            } else {
                // Area-uniform radius on a disc.
                let rad = r * rng.gen_range(0.0f64..1.0).sqrt();
                let z = if rng.gen_range(0.0..1.0) < 0.5 { h / 2.0 } else { -h / 2.0 };
                Vector3::new(rad * phi.cos(), rad * phi.sin(), z)
            }
        })
        .collect()
}

/// Torus with major radius 0.35 and minor radius 0.15. The tube angle is
/// rejection-sampled against the 1 + (r/R)·cosθ area density.
fn sample_torus(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
    let major = 0.35;
    let minor = 0.15;
    let ratio = minor / major;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let theta = rng.gen_range(0.0..core::f64::consts::TAU);
        let accept = (1.0 + ratio * theta.cos()) / (1.0 + ratio);
        if rng.gen_range(0.0..1.0) >= accept {
            continue;
        }
        let phi = rng.gen_range(0.0..core::f64::consts::TAU);
        let ring = major + minor * theta.cos();
        out.push(Vector3::new(
            ring * phi.cos(),
            ring * phi.sin(),
            minor * theta.sin(),
        ));
    }
    out
}

/// Height field over the unit square: a fixed number of Gaussian bumps whose
/// layout is drawn from the seed, sampled area-uniformly by rejection against
/// the metric factor sqrt(1 + |∇z|²).
fn sample_plane_with_bumps(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
    const BUMPS: usize = 6;
    let bumps: Vec<(f64, f64, f64, f64)> = (0..BUMPS)
        .map(|_| {
            (
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(0.05..0.18),  // height
                rng.gen_range(0.06..0.14),  // width
            )
        })
        .collect();
    let height = |x: f64, y: f64| -> (f64, f64, f64) {
        let mut z = 0.0;
        let mut zx = 0.0;
        let mut zy = 0.0;
        for &(bx, by, h, s) in &bumps {
            let dx = x - bx;
            let dy = y - by;
            let e = h * (-(dx * dx + dy * dy) / (2.0 * s * s)).exp();
            z += e;
            zx += -dx / (s * s) * e;
            zy += -dy / (s * s) * e;
        }
        (z, zx, zy)
    };
    // Upper bound on the metric factor: each bump's gradient magnitude is at
    // most h/(s·sqrt(e)) per axis.
    let grad_bound: f64 = bumps
        .iter()
        .map(|&(_, _, h, s)| h / (s * core::f64::consts::E.sqrt()))
        .sum::<f64>()
        * core::f64::consts::SQRT_2;
    let w_max = (1.0 + grad_bound * grad_bound).sqrt();

    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x = rng.gen_range(-0.5..0.5);
        let y = rng.gen_range(-0.5..0.5);
        let (z, zx, zy) = height(x, y);
        let w = (1.0 + zx * zx + zy * zy).sqrt();
        if rng.gen_range(0.0..1.0) < w / w_max {
            out.push(Vector3::new(x, y, z));
        }
    }
    out
}

/// Centers the cloud at the origin and uniformly scales it so the maximum
/// absolute coordinate equals 0.5.
pub fn normalize_unit_box(cloud: &PointCloud) -> Result<PointCloud, CloudError> {
    let centroid = cloud.centroid();
    let mut max_abs: f64 = 0.0;
    for p in cloud.points() {
        let q = p - centroid;
        max_abs = max_abs.max(q.abs().max());
    }
    if max_abs < 1e-12 {
        return Err(CloudError::DegenerateInput(
            "cloud has zero spatial extent".into(),
        ));
    }
    let scale = 0.5 / max_abs;
    PointCloud::new(
        cloud.points().iter().map(|p| (p - centroid) * scale).collect(),
        cloud.id(),
    )
}

/// Random rigid perturbation: rotation axis uniform on the sphere with angle
/// uniform in `[0, max_rot_deg]`, translation direction uniform with magnitude
/// uniform in `[0, max_trans]`.
pub fn sample_perturbation(rng: &mut impl Rng, max_rot_deg: f64, max_trans: f64) -> Twist {
    let angle = rng.gen_range(0.0..=max_rot_deg).to_radians();
    let omega = if angle == 0.0 {
        Vector3::zeros()
    } else {
        unit_direction(rng) * angle
    };
    let mag = rng.gen_range(0.0..=max_trans);
    let v = if mag == 0.0 {
        Vector3::zeros()
    } else {
        unit_direction(rng) * mag
    };
    Twist::from_parts(omega, v).expect("finite by construction")
}

/// I.i.d. zero-mean Gaussian noise added to every coordinate.
pub fn corrupt_noise(cloud: &PointCloud, std: f64, seed: u64) -> Result<PointCloud, CloudError> {
    if std < 0.0 {
        return Err(CloudError::InvalidArgument(format!("std = {std} < 0")));
    }
    if std == 0.0 {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new(
        cloud
            .points()
            .iter()
            .map(|p| {
                p + Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                ) * std
            })
            .collect(),
        cloud.id(),
    )
}

fn keep_count(n: usize, keep_fraction: f64) -> Result<usize, CloudError> {
    if !(0.0..=1.0).contains(&keep_fraction) || keep_fraction <= 0.0 {
        return Err(CloudError::InvalidArgument(format!(
            "keep_fraction = {keep_fraction} outside (0, 1]"
        )));
    }
    let k = (keep_fraction * n as f64).round() as usize;
    if k < 4 {
        return Err(CloudError::DegenerateInput(format!(
            "keep_fraction {keep_fraction} leaves {k} < 4 points"
        )));
    }
    Ok(k.min(n))
}

/// Uniform subsample without replacement to `round(keep_fraction · N)` points.
pub fn corrupt_sparsify(
    cloud: &PointCloud,
    keep_fraction: f64,
    seed: u64,
) -> Result<PointCloud, CloudError> {
    let k = keep_count(cloud.len(), keep_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = index_sample(&mut rng, cloud.len(), k).into_vec();
    indices.sort_unstable();
    Ok(cloud.select(&indices))
}

/// Keeps the `keep_fraction` of points with the largest projection onto
/// `camera_dir`, a half-space stand-in for camera-visibility culling.
pub fn corrupt_halfspace(
    cloud: &PointCloud,
    camera_dir: &Vector3<f64>,
    keep_fraction: f64,
) -> Result<PointCloud, CloudError> {
    let k = keep_count(cloud.len(), keep_fraction)?;
    let dir = camera_dir
        .try_normalize(1e-12)
        .ok_or_else(|| CloudError::InvalidArgument("zero camera direction".into()))?;
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.sort_by(|&a, &b| {
        let pa = cloud.points()[a].dot(&dir);
        let pb = cloud.points()[b].dot(&dir);
        pb.partial_cmp(&pa).expect("finite projections")
    });
    let mut keep: Vec<usize> = order[..k].to_vec();
    keep.sort_unstable();
    Ok(cloud.select(&keep))
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn of(points: &[Vector3<f64>]) -> Self {
        let mut min = points[0];
        let mut max = points[0];
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        Self { min, max }
    }
}

/// One cell of a [`VoxelPartition`]: indices into the parent cloud plus the
/// arithmetic centroid of the retained points.
#[derive(Debug, Clone)]
pub struct Voxel {
    pub cell: (usize, usize, usize),
    pub indices: Vec<usize>,
    pub center: Vector3<f64>,
}

/// Uniform-grid partition of a cloud. Retained voxels are disjoint and each
/// holds at least `min_points` points.
#[derive(Debug, Clone)]
pub struct VoxelPartition {
    pub voxels: Vec<Voxel>,
    pub grid_dims: (usize, usize, usize),
    pub bounds: Aabb,
}

impl VoxelPartition {
    /// Grid cell for a point, clamped so boundary points land in the last cell.
    pub fn cell_of(&self, p: &Vector3<f64>) -> (usize, usize, usize) {
        let dims = [self.grid_dims.0, self.grid_dims.1, self.grid_dims.2];
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let extent = self.bounds.max[a] - self.bounds.min[a];
            let cell = if extent <= 0.0 {
                0
            } else {
                (((p[a] - self.bounds.min[a]) / extent) * dims[a] as f64).floor() as i64
            };
            idx[a] = cell.clamp(0, dims[a] as i64 - 1) as usize;
        }
        (idx[0], idx[1], idx[2])
    }
}

/// Partitions `cloud` over a uniform grid spanning its bounding box. Voxels
/// below `min_points` are dropped; voxels above `max_points_per_voxel` are
/// uniformly subsampled to the cap.
pub fn voxelize(
    cloud: &PointCloud,
    grid_dims: (usize, usize, usize),
    min_points: usize,
    max_points_per_voxel: usize,
    seed: u64,
) -> Result<VoxelPartition, CloudError> {
    voxelize_with_bounds(
        cloud,
        Aabb::of(cloud.points()),
        grid_dims,
        min_points,
        max_points_per_voxel,
        seed,
    )
}

/// [`voxelize`] with explicit grid bounds, for callers that must reuse one
/// grid placement across clouds.
pub fn voxelize_with_bounds(
    cloud: &PointCloud,
    bounds: Aabb,
    grid_dims: (usize, usize, usize),
    min_points: usize,
    max_points_per_voxel: usize,
    seed: u64,
) -> Result<VoxelPartition, CloudError> {
    let (nx, ny, nz) = grid_dims;
    if nx < 1 || ny < 1 || nz < 1 {
        return Err(CloudError::InvalidArgument(format!(
            "grid_dims = {grid_dims:?}, each must be >= 1"
        )));
    }
    if min_points < 4 {
        return Err(CloudError::InvalidArgument(format!(
            "min_points = {min_points}, need at least 4"
        )));
    }
    if max_points_per_voxel < min_points {
        return Err(CloudError::InvalidArgument(
            "max_points_per_voxel below min_points".into(),
        ));
    }

    let skeleton = VoxelPartition {
        voxels: Vec::new(),
        grid_dims,
        bounds,
    };
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); nx * ny * nz];
    for (i, p) in cloud.points().iter().enumerate() {
        let (cx, cy, cz) = skeleton.cell_of(p);
        bins[(cx * ny + cy) * nz + cz].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut voxels = Vec::new();
    for cx in 0..nx {
        for cy in 0..ny {
            for cz in 0..nz {
                let mut indices = core::mem::take(&mut bins[(cx * ny + cy) * nz + cz]);
                if indices.len() < min_points {
                    continue;
                }
                if indices.len() > max_points_per_voxel {
                    let chosen =
                        index_sample(&mut rng, indices.len(), max_points_per_voxel).into_vec();
                    let mut subset: Vec<usize> = chosen.iter().map(|&j| indices[j]).collect();
                    subset.sort_unstable();
                    indices = subset;
                }
                let center = indices
                    .iter()
                    .map(|&i| cloud.points()[i])
                    .sum::<Vector3<f64>>()
                    / indices.len() as f64;
                voxels.push(Voxel {
                    cell: (cx, cy, cz),
                    indices,
                    center,
                });
            }
        }
    }
    if voxels.is_empty() {
        return Err(CloudError::DegenerateInput(format!(
            "all voxels below min_points = {min_points}"
        )));
    }
    Ok(VoxelPartition {
        voxels,
        grid_dims,
        bounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{exp_twist, RigidTransform};
    use nalgebra::Vector6;

    fn cloud_from(points: Vec<Vector3<f64>>) -> PointCloud {
        PointCloud::new(points, "test").unwrap()
    }

    #[test]
    fn sphere_points_lie_on_unit_radius() {
        let c = generate_primitive(PrimitiveKind::Sphere, 1000, 3).unwrap();
        for p in c.points() {
            assert!((p.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        for kind in [
            PrimitiveKind::Sphere,
            PrimitiveKind::Cube,
            PrimitiveKind::Cylinder,
            PrimitiveKind::Torus,
            PrimitiveKind::PlaneWithBumps,
        ] {
            let a = generate_primitive(kind, 200, 42).unwrap();
            let b = generate_primitive(kind, 200, 42).unwrap();
            assert_eq!(a.points(), b.points());
        }
    }

    #[test]
    fn too_few_points_rejected() {
        assert!(generate_primitive(PrimitiveKind::Cube, 7, 0).is_err());
    }

    #[test]
    fn cube_faces_receive_area_proportional_counts() {
        let n = 10_000;
        let c = generate_primitive(PrimitiveKind::Cube, n, 5).unwrap();
        let mut counts = [0usize; 6];
        for p in c.points() {
            let axis = (0..3)
                .find(|&a| (p[a].abs() - 0.5).abs() < 1e-12)
                .expect("point on some face");
            let side = usize::from(p[axis] < 0.0);
            counts[2 * axis + side] += 1;
        }
        // Binomial: mean n/6, sigma = sqrt(n * 1/6 * 5/6).
        let mean = n as f64 / 6.0;
        let sigma = (n as f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
        for count in counts {
            assert!(
                (count as f64 - mean).abs() < 3.0 * sigma,
                "face count {count} outside 3 sigma of {mean}"
            );
        }
    }

    #[test]
    fn normalize_cube_spans_unit_box() {
        let mut pts = Vec::new();
        for x in [0.0, 2.0] {
            for y in [0.0, 2.0] {
                for z in [0.0, 2.0] {
                    pts.push(Vector3::new(x, y, z));
                }
            }
        }
        let n = normalize_unit_box(&cloud_from(pts)).unwrap();
        assert!(n.centroid().norm() < 1e-9);
        for p in n.points() {
            for a in 0..3 {
                assert!((p[a].abs() - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_is_idempotent() {
        let c = generate_primitive(PrimitiveKind::Torus, 300, 9).unwrap();
        let once = normalize_unit_box(&c).unwrap();
        let twice = normalize_unit_box(&once).unwrap();
        for (a, b) in once.points().iter().zip(twice.points()) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn normalize_preserves_aspect() {
        // Box corners with extents 4 x 2 x 1.
        let mut pts = Vec::new();
        for x in [0.0, 4.0] {
            for y in [0.0, 2.0] {
                for z in [0.0, 1.0] {
                    pts.push(Vector3::new(x, y, z));
                }
            }
        }
        let n = normalize_unit_box(&cloud_from(pts)).unwrap();
        let bounds = Aabb::of(n.points());
        let extents = bounds.max - bounds.min;
        assert!((extents.x - 1.0).abs() < 1e-12);
        assert!((extents.y - 0.5).abs() < 1e-12);
        assert!((extents.z - 0.25).abs() < 1e-12);
    }

    #[test]
    fn normalize_rejects_zero_extent() {
        let c = cloud_from(vec![Vector3::new(1.0, 1.0, 1.0); 5]);
        assert!(matches!(
            normalize_unit_box(&c),
            Err(CloudError::DegenerateInput(_))
        ));
    }

    #[test]
    fn zero_ranges_give_zero_twist() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xi = sample_perturbation(&mut rng, 0.0, 0.0);
        assert_eq!(xi.norm(), 0.0);
    }

    #[test]
    fn perturbation_is_reproducible() {
        let a = sample_perturbation(&mut ChaCha8Rng::seed_from_u64(77), 45.0, 0.8);
        let b = sample_perturbation(&mut ChaCha8Rng::seed_from_u64(77), 45.0, 0.8);
        assert_eq!(a.as_vector(), b.as_vector());
    }

    #[test]
    fn perturbation_angle_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mut sum = 0.0;
        let mut max_angle: f64 = 0.0;
        for _ in 0..n {
            let xi = sample_perturbation(&mut rng, 45.0, 0.8);
            let deg = xi.omega().norm().to_degrees();
            sum += deg;
            max_angle = max_angle.max(deg);
            assert!(xi.v().norm() <= 0.8 + 1e-12);
        }
        assert!(max_angle <= 45.0 + 1e-9);
        let mean = sum / n as f64;
        assert!((mean - 22.5).abs() < 0.2, "mean angle {mean}");
    }

    #[test]
    fn zero_noise_is_identity() {
        let c = generate_primitive(PrimitiveKind::Cube, 100, 1).unwrap();
        let noisy = corrupt_noise(&c, 0.0, 3).unwrap();
        assert_eq!(c.points(), noisy.points());
    }

    #[test]
    fn full_keep_fraction_is_set_equal() {
        let c = generate_primitive(PrimitiveKind::Cube, 100, 1).unwrap();
        let s = corrupt_sparsify(&c, 1.0, 3).unwrap();
        assert_eq!(s.len(), c.len());
        let mut a: Vec<_> = c.points().iter().map(|p| format!("{:?}", p)).collect();
        let mut b: Vec<_> = s.points().iter().map(|p| format!("{:?}", p)).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn sparsify_count_is_rounded_fraction() {
        let c = generate_primitive(PrimitiveKind::Sphere, 333, 8).unwrap();
        for f in [0.1, 0.25, 0.5, 0.77, 0.999] {
            let s = corrupt_sparsify(&c, f, 4).unwrap();
            assert_eq!(s.len(), (f * 333.0).round() as usize);
        }
    }

    #[test]
    fn sparsify_rejects_degenerate_fraction() {
        let c = generate_primitive(PrimitiveKind::Sphere, 100, 8).unwrap();
        assert!(matches!(
            corrupt_sparsify(&c, 0.01, 4),
            Err(CloudError::DegenerateInput(_))
        ));
    }

    #[test]
    fn halfspace_keeps_largest_projections() {
        let c = generate_primitive(PrimitiveKind::Sphere, 500, 6).unwrap();
        let dir = Vector3::new(0.0, 0.0, 1.0);
        let kept = corrupt_halfspace(&c, &dir, 0.5).unwrap();
        assert_eq!(kept.len(), 250);
        // Sort oracle: every kept projection >= the 250th largest projection.
        let mut projections: Vec<f64> = c.points().iter().map(|p| p.z).collect();
        projections.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let cutoff = projections[249];
        for p in kept.points() {
            assert!(p.z >= cutoff - 1e-12);
        }
    }

    #[test]
    fn single_voxel_holds_everything() {
        let c = generate_primitive(PrimitiveKind::Torus, 200, 4).unwrap();
        let part = voxelize(&c, (1, 1, 1), 4, 10_000, 0).unwrap();
        assert_eq!(part.voxels.len(), 1);
        assert_eq!(part.voxels[0].indices.len(), 200);
        assert!((part.voxels[0].center - c.centroid()).norm() < 1e-12);
    }

    #[test]
    fn symmetric_cloud_bins_evenly() {
        // Mirror one octant into all eight: counts must be exactly equal.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut pts = Vec::new();
        for _ in 0..25 {
            let base = Vector3::new(
                rng.gen_range(0.05..0.45),
                rng.gen_range(0.05..0.45),
                rng.gen_range(0.05..0.45),
            );
            for sx in [-1.0, 1.0] {
                for sy in [-1.0, 1.0] {
                    for sz in [-1.0, 1.0] {
                        pts.push(Vector3::new(base.x * sx, base.y * sy, base.z * sz));
                    }
                }
            }
        }
        let c = cloud_from(pts);
        let part = voxelize(&c, (2, 2, 2), 4, 10_000, 0).unwrap();
        assert_eq!(part.voxels.len(), 8);
        for v in &part.voxels {
            assert_eq!(v.indices.len(), 25);
        }
        // Direct binning oracle: recompute each point's cell from the bounds.
        let bounds = Aabb::of(c.points());
        for v in &part.voxels {
            for &i in &v.indices {
                let p = c.points()[i];
                for a in 0..3 {
                    let mid = (bounds.min[a] + bounds.max[a]) / 2.0;
                    let expect_high = [v.cell.0, v.cell.1, v.cell.2][a] == 1;
                    assert_eq!(p[a] >= mid, expect_high);
                }
            }
        }
    }

    #[test]
    fn table2_like_configuration_shape() {
        let c = generate_primitive(PrimitiveKind::PlaneWithBumps, 1000, 12).unwrap();
        let part = voxelize(&c, (3, 3, 3), 37, 37, 0).unwrap();
        assert!(part.voxels.len() <= 27);
        for v in &part.voxels {
            assert!(v.indices.len() == 37);
        }
    }

    #[test]
    fn partition_indices_are_disjoint() {
        let c = generate_primitive(PrimitiveKind::Cylinder, 800, 3).unwrap();
        let part = voxelize(&c, (3, 2, 4), 4, 50, 0).unwrap();
        let mut seen = vec![false; c.len()];
        for v in &part.voxels {
            for &i in &v.indices {
                assert!(i < c.len());
                assert!(!seen[i], "index {i} appears in two voxels");
                seen[i] = true;
            }
        }
    }

    #[test]
    fn cap_subsamples_to_limit() {
        let c = generate_primitive(PrimitiveKind::Sphere, 600, 3).unwrap();
        let part = voxelize(&c, (1, 1, 1), 4, 128, 9).unwrap();
        assert_eq!(part.voxels[0].indices.len(), 128);
    }

    #[test]
    fn voxel_centroids_track_rigid_moves_with_matching_grids() {
        // Translations and axis-permuting rotations keep the grid axis-aligned,
        // so identical grid placement in the moved frame is well-defined.
        let c = generate_primitive(PrimitiveKind::Torus, 500, 21).unwrap();
        let g = exp_twist(
            &crate::se3::Twist::new(Vector6::new(
                0.0,
                0.0,
                core::f64::consts::FRAC_PI_2,
                0.3,
                -0.2,
                0.7,
            ))
            .unwrap(),
        );
        let moved = c.apply(&g);
        let part = voxelize(&c, (2, 2, 2), 4, 10_000, 0).unwrap();
        let bounds = Aabb::of(c.points());
        let moved_bounds = Aabb {
            min: Vector3::new(
                g.apply_point(&bounds.min)
                    .inf(&g.apply_point(&bounds.max))
                    .x,
                g.apply_point(&bounds.min)
                    .inf(&g.apply_point(&bounds.max))
                    .y,
                g.apply_point(&bounds.min)
                    .inf(&g.apply_point(&bounds.max))
                    .z,
            ),
            max: Vector3::new(
                g.apply_point(&bounds.min)
                    .sup(&g.apply_point(&bounds.max))
                    .x,
                g.apply_point(&bounds.min)
                    .sup(&g.apply_point(&bounds.max))
                    .y,
                g.apply_point(&bounds.min)
                    .sup(&g.apply_point(&bounds.max))
                    .z,
            ),
        };
        let moved_part =
            voxelize_with_bounds(&moved, moved_bounds, (2, 2, 2), 4, 10_000, 0).unwrap();
        assert_eq!(part.voxels.len(), moved_part.voxels.len());
        for v in &part.voxels {
            let target = g.apply_point(&v.center);
            let hit = moved_part
                .voxels
                .iter()
                .any(|mv| (mv.center - target).norm() < 1e-9);
            assert!(hit, "no moved voxel centroid matches {target:?}");
        }
    }

    #[test]
    fn all_voxels_dropped_is_an_error() {
        let c = generate_primitive(PrimitiveKind::Sphere, 20, 3).unwrap();
        assert!(matches!(
            voxelize(&c, (8, 8, 8), 10, 100, 0),
            Err(CloudError::DegenerateInput(_))
        ));
    }

    #[test]
    fn pair_spec_has_exact_ground_truth() {
        let pair = PairSpec::synthesize(PrimitiveKind::Cube, 128, 7, 45.0, 0.8).unwrap();
        for (s, t) in pair.source.points().iter().zip(pair.template.points()) {
            assert!((pair.gt.apply_point(s) - t).norm() < 1e-12);
        }
    }

    #[test]
    fn apply_identity_is_exact() {
        let c = generate_primitive(PrimitiveKind::Cube, 64, 2).unwrap();
        let moved = c.apply(&RigidTransform::identity());
        assert_eq!(c.points(), moved.points());
    }
}
