//! Point-cloud containers, pinhole lifting, cluster filtering, SE(3) algebra,
//! and weighted rigid registration (Kabsch/Umeyama, no scale).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation matrix fails orthonormality/determinant check (max deviation {0:.3e})")]
    NotARotation(f64),
    #[error("non-finite component in {0}")]
    NonFinite(&'static str),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("filtering produced an empty point cloud ({context})")]
    EmptyCloud { context: String },
    #[error("rigid fit needs at least 3 point pairs, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate rigid-fit input: covariance rank {rank} < 2")]
    RankDeficient { rank: usize },
    #[error("weights must be non-negative with positive sum")]
    BadWeights,
    #[error("invalid camera intrinsics: {0}")]
    BadCamera(String),
    #[error("color component {0} outside [0,1]")]
    BadColor(f64),
}

/// A 3D point in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ZERO: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn add(&self, o: &Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(&self, o: &Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(&self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(&self, o: &Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(&self, o: &Point3) -> Point3 {
        Point3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(&self, o: &Point3) -> f64 {
        self.sub(o).norm()
    }

    pub fn normalized(&self) -> Point3 {
        let n = self.norm();
        self.scale(1.0 / n)
    }

    fn to_na(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    fn from_na(v: Vector3<f64>) -> Point3 {
        Point3::new(v.x, v.y, v.z)
    }
}

/// An SE(3) element: proper rotation plus translation.
///
/// The constructor enforces RᵀR = I and det(R) = +1 within 1e-9, so any
/// `RigidTransform` in circulation satisfies the group invariants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    rotation: [[f64; 3]; 3],
    translation: Point3,
}

const ROT_TOL: f64 = 1e-9;

impl RigidTransform {
    pub fn new(rotation: [[f64; 3]; 3], translation: Point3) -> Result<Self, GeometryError> {
        let r = Matrix3::from_fn(|i, j| rotation[i][j]);
        if !r.iter().all(|v| v.is_finite()) || !translation.is_finite() {
            return Err(GeometryError::NonFinite("rigid transform"));
        }
        let gram = r.transpose() * r;
        let mut dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((gram[(i, j)] - target).abs());
            }
        }
        dev = dev.max((r.determinant() - 1.0).abs());
        if dev > ROT_TOL {
            return Err(GeometryError::NotARotation(dev));
        }
        Ok(RigidTransform { rotation, translation })
    }

    pub fn identity() -> Self {
        RigidTransform {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: Point3::ZERO,
        }
    }

    pub fn translation_only(t: Point3) -> Self {
        RigidTransform { rotation: RigidTransform::identity().rotation, translation: t }
    }

    /// Rotation by `angle` radians about the unit `axis` through `pivot`.
    pub fn about_axis(axis: Point3, pivot: Point3, angle: f64) -> Self {
        let a = axis.normalized();
        let (s, c) = angle.sin_cos();
        let one_c = 1.0 - c;
        let (x, y, z) = (a.x, a.y, a.z);
        let rot = [
            [c + x * x * one_c, x * y * one_c - z * s, x * z * one_c + y * s],
            [y * x * one_c + z * s, c + y * y * one_c, y * z * one_c - x * s],
            [z * x * one_c - y * s, z * y * one_c + x * s, c + z * z * one_c],
        ];
        // t = pivot - R * pivot
        let rp = Point3::new(
            rot[0][0] * pivot.x + rot[0][1] * pivot.y + rot[0][2] * pivot.z,
            rot[1][0] * pivot.x + rot[1][1] * pivot.y + rot[1][2] * pivot.z,
            rot[2][0] * pivot.x + rot[2][1] * pivot.y + rot[2][2] * pivot.z,
        );
        RigidTransform { rotation: rot, translation: pivot.sub(&rp) }
    }

    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn translation(&self) -> Point3 {
        self.translation
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        let r = &self.rotation;
        Point3::new(
            r[0][0] * p.x + r[0][1] * p.y + r[0][2] * p.z + self.translation.x,
            r[1][0] * p.x + r[1][1] * p.y + r[1][2] * p.z + self.translation.y,
            r[2][0] * p.x + r[2][1] * p.y + r[2][2] * p.z + self.translation.z,
        )
    }

    /// Rotate a direction vector (no translation).
    pub fn apply_dir(&self, p: &Point3) -> Point3 {
        let r = &self.rotation;
        Point3::new(
            r[0][0] * p.x + r[0][1] * p.y + r[0][2] * p.z,
            r[1][0] * p.x + r[1][1] * p.y + r[1][2] * p.z,
            r[2][0] * p.x + r[2][1] * p.y + r[2][2] * p.z,
        )
    }

    /// self ∘ other: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let a = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        let b = Matrix3::from_fn(|i, j| other.rotation[i][j]);
        let r = a * b;
        let t = self.apply(&other.translation);
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i][j] = r[(i, j)];
            }
        }
        RigidTransform { rotation, translation: t }
    }

    pub fn invert(&self) -> RigidTransform {
        let mut rt = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rt[i][j] = self.rotation[j][i];
            }
        }
        let inv = RigidTransform { rotation: rt, translation: Point3::ZERO };
        let t = inv.apply(&self.translation).scale(-1.0);
        RigidTransform { rotation: rt, translation: t }
    }

    /// Rotation angle in radians, in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        let tr = self.rotation[0][0] + self.rotation[1][1] + self.rotation[2][2];
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Row-major 3x4 flattening [R | t], used by rollout logs.
    pub fn to_rows_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], t.x, //
            r[1][0], r[1][1], r[1][2], t.y, //
            r[2][0], r[2][1], r[2][2], t.z,
        ]
    }
}

/// Scene point cloud with per-point RGB in [0,1] and synthetic
/// (object-id, part-id) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePointCloud {
    pub points: Vec<Point3>,
    pub colors: Vec<[f64; 3]>,
    pub labels: Vec<(i32, i32)>,
}

impl ScenePointCloud {
    pub fn new(
        points: Vec<Point3>,
        colors: Vec<[f64; 3]>,
        labels: Vec<(i32, i32)>,
    ) -> Result<Self, GeometryError> {
        if points.is_empty() || points.len() != colors.len() || points.len() != labels.len() {
            return Err(GeometryError::LengthMismatch(format!(
                "points {}, colors {}, labels {} (all equal and >= 1 required)",
                points.len(),
                colors.len(),
                labels.len()
            )));
        }
        for p in &points {
            if !p.is_finite() {
                return Err(GeometryError::NonFinite("scene point"));
            }
        }
        for c in &colors {
            for &v in c {
                if !(0.0..=1.0).contains(&v) {
                    return Err(GeometryError::BadColor(v));
                }
            }
        }
        Ok(ScenePointCloud { points, colors, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn select(&self, keep: &[usize]) -> Result<ScenePointCloud, GeometryError> {
        ScenePointCloud::new(
            keep.iter().map(|&i| self.points[i]).collect(),
            keep.iter().map(|&i| self.colors[i]).collect(),
            keep.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Tool and target query point sets, tool first.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub tool: Vec<Point3>,
    pub target: Vec<Point3>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.tool.len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tool.is_empty() && self.target.is_empty()
    }

    /// All queries in input order: tool then target.
    pub fn all(&self) -> Vec<Point3> {
        self.tool.iter().chain(self.target.iter()).copied().collect()
    }

    /// 1 for tool queries, 0 for target queries, in input order.
    pub fn role_mask(&self) -> Vec<u8> {
        let mut m = vec![1u8; self.tool.len()];
        m.extend(std::iter::repeat(0u8).take(self.target.len()));
        m
    }
}

/// Pinhole camera with a camera-to-world pose.
#[derive(Debug, Clone, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub pose: RigidTransform,
}

impl PinholeCamera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        pose: RigidTransform,
    ) -> Result<Self, GeometryError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::BadCamera(format!("fx={fx}, fy={fy} must be > 0")));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(GeometryError::BadCamera(format!(
                "principal point ({cx},{cy}) outside {width}x{height} image"
            )));
        }
        Ok(PinholeCamera { fx, fy, cx, cy, width, height, pose })
    }

    /// Project a world point; `None` when behind the camera or out of frame.
    pub fn project(&self, p: &Point3) -> Option<(f64, f64, f64)> {
        let c = self.pose.invert().apply(p);
        if c.z <= 0.0 {
            return None;
        }
        let u = self.fx * c.x / c.z + self.cx;
        let v = self.fy * c.y / c.z + self.cy;
        if u < 0.0 || u >= self.width as f64 || v < 0.0 || v >= self.height as f64 {
            return None;
        }
        Some((u, v, c.z))
    }
}

/// Result of lifting pixel tracks to 3D: lifted points plus the count of
/// per-point rejections (non-positive depth).
#[derive(Debug, Clone)]
pub struct LiftResult {
    pub points: Vec<Point3>,
    /// Indices into the input that survived, aligned with `points`.
    pub kept: Vec<usize>,
    pub dropped: usize,
}

/// Lift tracked 2D pixels with depths into world-frame 3D points.
pub fn lift_to_3d(
    pixels: &[(f64, f64)],
    depths: &[f64],
    cam: &PinholeCamera,
) -> Result<LiftResult, GeometryError> {
    if pixels.len() != depths.len() {
        return Err(GeometryError::LengthMismatch(format!(
            "pixels {} vs depths {}",
            pixels.len(),
            depths.len()
        )));
    }
    let mut points = Vec::with_capacity(pixels.len());
    let mut kept = Vec::with_capacity(pixels.len());
    let mut dropped = 0usize;
    for (i, (&(u, v), &d)) in pixels.iter().zip(depths.iter()).enumerate() {
        if d <= 0.0 || !d.is_finite() {
            dropped += 1;
            continue;
        }
        let p_cam = Point3::new((u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d);
        points.push(cam.pose.apply(&p_cam));
        kept.push(i);
    }
    Ok(LiftResult { points, kept, dropped })
}

/// Remove connected components (radius adjacency) with fewer than
/// `min_cluster` points. Survivor order is preserved.
///
/// Neighbor lookup uses a uniform grid with cell size = radius, so each
/// point only checks the 27 surrounding cells.
pub fn remove_isolated_clusters(
    cloud: &ScenePointCloud,
    radius: f64,
    min_cluster: usize,
) -> Result<ScenePointCloud, GeometryError> {
    assert!(radius > 0.0, "radius must be positive");
    assert!(min_cluster >= 1, "min_cluster must be >= 1");
    let n = cloud.len();
    let cell = |p: &Point3| -> (i64, i64, i64) {
        (
            (p.x / radius).floor() as i64,
            (p.y / radius).floor() as i64,
            (p.z / radius).floor() as i64,
        )
    };
    let mut grid: std::collections::HashMap<(i64, i64, i64), Vec<usize>> =
        std::collections::HashMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    // union-find over radius adjacency
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let r2 = radius * radius;
    for (i, p) in cloud.points.iter().enumerate() {
        let (cx, cy, cz) = cell(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &j in bucket {
                            if j <= i {
                                continue;
                            }
                            let q = &cloud.points[j];
                            let d = p.sub(q);
                            if d.dot(&d) <= r2 {
                                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                                if ri != rj {
                                    parent[ri] = rj;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let mut sizes: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        *sizes.entry(r).or_insert(0) += 1;
    }
    let keep: Vec<usize> =
        (0..n).filter(|&i| sizes[&find(&mut parent, i)] >= min_cluster).collect();
    if keep.is_empty() {
        return Err(GeometryError::EmptyCloud {
            context: format!("remove_isolated_clusters(radius={radius}, min_cluster={min_cluster})"),
        });
    }
    cloud.select(&keep)
}

/// Keep only points within `radius` of `center`.
pub fn crop_interaction_region(
    cloud: &ScenePointCloud,
    center: Point3,
    radius: f64,
) -> Result<ScenePointCloud, GeometryError> {
    assert!(radius >= 0.0, "radius must be non-negative");
    let keep: Vec<usize> = cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.dist(&center) <= radius)
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(GeometryError::EmptyCloud {
            context: format!("crop_interaction_region(radius={radius})"),
        });
    }
    cloud.select(&keep)
}

/// Weighted rigid registration of corresponded point sets.
///
/// Returns argmin_T sum w_i |T(src_i) - dst_i|^2 over SE(3), via the
/// weighted cross-covariance SVD with the determinant-sign fix on the
/// smallest singular direction (Umeyama correction, no scale).
pub fn fit_rigid(
    src: &[Point3],
    dst: &[Point3],
    weights: Option<&[f64]>,
) -> Result<RigidTransform, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::LengthMismatch(format!(
            "src {} vs dst {}",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(GeometryError::TooFewPoints(src.len()));
    }
    let n = src.len();
    let w: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(GeometryError::LengthMismatch(format!(
                    "weights {} vs points {}",
                    w.len(),
                    n
                )));
            }
            if w.iter().any(|&x| x < 0.0 || !x.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
                return Err(GeometryError::BadWeights);
            }
            w.to_vec()
        }
        None => vec![1.0; n],
    };
    let wsum: f64 = w.iter().sum();
    let mut cs = Vector3::zeros();
    let mut cd = Vector3::zeros();
    for i in 0..n {
        cs += src[i].to_na() * w[i];
        cd += dst[i].to_na() * w[i];
    }
    cs /= wsum;
    cd /= wsum;
    let mut cov = Matrix3::zeros();
    for i in 0..n {
        let a = src[i].to_na() - cs;
        let b = dst[i].to_na() - cd;
        cov += b * a.transpose() * w[i];
    }
    cov /= wsum;
    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    // Rank check: a rigid motion is only determined when the centered source
    // spans at least a plane (covariance rank >= 2).
    let smax = svd.singular_values[0];
    let rank = svd.singular_values.iter().filter(|&&s| s > smax.max(1e-300) * 1e-9).count();
    if rank < 2 {
        return Err(GeometryError::RankDeficient { rank });
    }
    let d = (u * vt).determinant();
    let sign = if d < 0.0 { -1.0 } else { 1.0 };
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let r = u * fix * vt;
    let t = cd - r * cs;
    let mut rotation = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rotation[i][j] = r[(i, j)];
        }
    }
    // Re-orthonormalize through the constructor tolerance: SVD output is
    // orthonormal to machine precision already.
    RigidTransform::new(rotation, Point3::from_na(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn cam_centered() -> PinholeCamera {
        PinholeCamera::new(100.0, 100.0, 64.0, 64.0, 128, 128, RigidTransform::identity())
            .unwrap()
    }

    fn uniform_cloud(rng: &mut Rng, n: usize, scale: f64) -> ScenePointCloud {
        let points: Vec<Point3> = (0..n)
            .map(|_| {
                Point3::new(
                    rng.uniform(-scale, scale),
                    rng.uniform(-scale, scale),
                    rng.uniform(-scale, scale),
                )
            })
            .collect();
        ScenePointCloud::new(points, vec![[0.5, 0.5, 0.5]; n], vec![(0, 0); n]).unwrap()
    }

    fn random_rotation(rng: &mut Rng) -> RigidTransform {
        let axis = Point3::new(rng.normal(), rng.normal(), rng.normal()).normalized();
        let angle = rng.uniform(-3.0, 3.0);
        let pivot = Point3::ZERO;
        let rot = RigidTransform::about_axis(axis, pivot, angle);
        let t = Point3::new(rng.normal(), rng.normal(), rng.normal());
        RigidTransform::new(*rot.rotation(), t).unwrap()
    }

    #[test]
    fn lift_principal_point() {
        let cam = cam_centered();
        let res = lift_to_3d(&[(64.0, 64.0)], &[2.0], &cam).unwrap();
        assert_eq!(res.points.len(), 1);
        let p = res.points[0];
        assert!((p.x - 0.0).abs() < 1e-12 && (p.y - 0.0).abs() < 1e-12 && (p.z - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lift_off_axis_pixel() {
        let cam = cam_centered();
        let res = lift_to_3d(&[(164.0, 64.0)], &[2.0], &cam).unwrap();
        let p = res.points[0];
        assert!((p.x - 2.0).abs() < 1e-12 && p.y.abs() < 1e-12 && (p.z - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lift_drops_nonpositive_depth() {
        let cam = cam_centered();
        let res = lift_to_3d(&[(10.0, 10.0), (20.0, 20.0)], &[1.0, -0.5], &cam).unwrap();
        assert_eq!(res.points.len(), 1);
        assert_eq!(res.dropped, 1);
        assert_eq!(res.kept, vec![0]);
    }

    #[test]
    fn project_then_lift_round_trip() {
        // Oracle: project() is the independent inverse of the lift path.
        let mut rng = Rng::new(7);
        let pose = random_rotation(&mut rng);
        let cam = PinholeCamera::new(90.0, 110.0, 63.0, 60.0, 128, 128, pose).unwrap();
        let mut n_ok = 0;
        for _ in 0..200 {
            let world = Point3::new(rng.normal(), rng.normal(), rng.normal() + 4.0);
            let world = cam.pose.apply(&world); // in front of camera
            if let Some((u, v, d)) = cam.project(&world) {
                let res = lift_to_3d(&[(u, v)], &[d], &cam).unwrap();
                assert!(res.points[0].dist(&world) < 1e-9);
                n_ok += 1;
            }
        }
        assert!(n_ok > 50);
    }

    #[test]
    fn clusters_removes_floaters() {
        let mut rng = Rng::new(1);
        let mut points: Vec<Point3> = (0..100)
            .map(|_| {
                Point3::new(
                    rng.uniform(-0.02, 0.02),
                    rng.uniform(-0.02, 0.02),
                    rng.uniform(-0.02, 0.02),
                )
            })
            .collect();
        points.push(Point3::new(1.0, 0.0, 0.0));
        points.push(Point3::new(1.01, 0.0, 0.0));
        let n = points.len();
        let cloud =
            ScenePointCloud::new(points, vec![[0.0, 0.0, 0.0]; n], vec![(0, 0); n]).unwrap();
        let out = remove_isolated_clusters(&cloud, 0.05, 5).unwrap();
        assert_eq!(out.len(), 100);
        // Brute-force oracle: recompute components without the grid.
        let mut comp = vec![usize::MAX; cloud.len()];
        let mut next = 0;
        for i in 0..cloud.len() {
            if comp[i] != usize::MAX {
                continue;
            }
            let mut stack = vec![i];
            comp[i] = next;
            while let Some(a) = stack.pop() {
                for b in 0..cloud.len() {
                    if comp[b] == usize::MAX && cloud.points[a].dist(&cloud.points[b]) <= 0.05 {
                        comp[b] = next;
                        stack.push(b);
                    }
                }
            }
            next += 1;
        }
        let mut sizes = vec![0usize; next];
        for &c in &comp {
            sizes[c] += 1;
        }
        let expect: Vec<Point3> = (0..cloud.len())
            .filter(|&i| sizes[comp[i]] >= 5)
            .map(|i| cloud.points[i])
            .collect();
        assert_eq!(out.points, expect);
    }

    #[test]
    fn clusters_min_one_is_identity() {
        let mut rng = Rng::new(2);
        let cloud = uniform_cloud(&mut rng, 40, 0.5);
        let out = remove_isolated_clusters(&cloud, 0.01, 1).unwrap();
        assert_eq!(out, cloud);
    }

    #[test]
    fn clusters_all_singletons_errors() {
        let points = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ];
        let cloud =
            ScenePointCloud::new(points, vec![[0.0; 3]; 3], vec![(0, 0); 3]).unwrap();
        let err = remove_isolated_clusters(&cloud, 0.1, 2).unwrap_err();
        assert!(matches!(err, GeometryError::EmptyCloud { .. }));
    }

    #[test]
    fn clusters_idempotent() {
        let mut rng = Rng::new(3);
        let cloud = uniform_cloud(&mut rng, 200, 0.1);
        if let Ok(once) = remove_isolated_clusters(&cloud, 0.04, 3) {
            let twice = remove_isolated_clusters(&once, 0.04, 3).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn crop_matches_brute_force() {
        let mut rng = Rng::new(4);
        let cloud = uniform_cloud(&mut rng, 300, 1.0);
        let center = Point3::new(0.2, -0.1, 0.3);
        let out = crop_interaction_region(&cloud, center, 0.7).unwrap();
        let expect: Vec<Point3> =
            cloud.points.iter().filter(|p| p.dist(&center) <= 0.7).copied().collect();
        assert_eq!(out.points, expect);
    }

    #[test]
    fn crop_zero_radius_keeps_coincident() {
        let points = vec![Point3::new(0.1, 0.2, 0.3), Point3::new(0.5, 0.5, 0.5)];
        let cloud = ScenePointCloud::new(points, vec![[0.0; 3]; 2], vec![(0, 0); 2]).unwrap();
        let out = crop_interaction_region(&cloud, Point3::new(0.1, 0.2, 0.3), 0.0).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn fit_rigid_pure_translation() {
        let src = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
        ];
        let t = Point3::new(0.1, 0.2, 0.3);
        let dst: Vec<Point3> = src.iter().map(|p| p.add(&t)).collect();
        let fit = fit_rigid(&src, &dst, None).unwrap();
        assert!(fit.rotation_angle() < 1e-9);
        assert!(fit.translation().dist(&t) < 1e-9);
    }

    #[test]
    fn fit_rigid_exact_rotation() {
        let src = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
        ];
        let rot = RigidTransform::about_axis(
            Point3::new(0.0, 0.0, 1.0),
            Point3::ZERO,
            std::f64::consts::FRAC_PI_2,
        );
        let dst: Vec<Point3> = src.iter().map(|p| rot.apply(p)).collect();
        let fit = fit_rigid(&src, &dst, None).unwrap();
        let expect = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((fit.rotation()[i][j] - expect[i][j]).abs() < 1e-9);
            }
        }
        assert!(fit.translation().norm() < 1e-9);
    }

    #[test]
    fn fit_rigid_noisy_recovery() {
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let gt = random_rotation(&mut rng);
            let src: Vec<Point3> = (0..50)
                .map(|_| Point3::new(rng.normal(), rng.normal(), rng.normal()))
                .collect();
            let dst: Vec<Point3> = src
                .iter()
                .map(|p| {
                    gt.apply(p).add(&Point3::new(
                        rng.normal() * 1e-3,
                        rng.normal() * 1e-3,
                        rng.normal() * 1e-3,
                    ))
                })
                .collect();
            let fit = fit_rigid(&src, &dst, None).unwrap();
            let delta = fit.compose(&gt.invert());
            assert!(delta.rotation_angle() < 0.5_f64.to_radians());
            assert!(delta.translation().norm() < 2e-3);
        }
    }

    #[test]
    fn fit_rigid_collinear_errors() {
        let src: Vec<Point3> = (0..5).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let dst = src.clone();
        let err = fit_rigid(&src, &dst, None).unwrap_err();
        match err {
            GeometryError::RankDeficient { rank } => assert!(rank < 2),
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn fit_rigid_uniform_weights_match_unweighted() {
        let mut rng = Rng::new(12);
        let gt = random_rotation(&mut rng);
        let src: Vec<Point3> =
            (0..30).map(|_| Point3::new(rng.normal(), rng.normal(), rng.normal())).collect();
        let dst: Vec<Point3> = src.iter().map(|p| gt.apply(p)).collect();
        let a = fit_rigid(&src, &dst, None).unwrap();
        let b = fit_rigid(&src, &dst, Some(&vec![2.5; 30])).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((a.rotation()[i][j] - b.rotation()[i][j]).abs() < 1e-12);
            }
        }
        assert!(a.translation().dist(&b.translation()) < 1e-12);
    }

    #[test]
    fn fit_rigid_conjugation_invariance() {
        let mut rng = Rng::new(13);
        let g = random_rotation(&mut rng);
        let gt = random_rotation(&mut rng);
        let src: Vec<Point3> =
            (0..20).map(|_| Point3::new(rng.normal(), rng.normal(), rng.normal())).collect();
        let dst: Vec<Point3> = src.iter().map(|p| gt.apply(p)).collect();
        let base = fit_rigid(&src, &dst, None).unwrap();
        let src_g: Vec<Point3> = src.iter().map(|p| g.apply(p)).collect();
        let dst_g: Vec<Point3> = dst.iter().map(|p| g.apply(p)).collect();
        let fit_g = fit_rigid(&src_g, &dst_g, None).unwrap();
        let expect = g.compose(&base).compose(&g.invert());
        let delta = fit_g.compose(&expect.invert());
        assert!(delta.rotation_angle() < 1e-9);
        assert!(delta.translation().norm() < 1e-9);
    }

    #[test]
    fn se3_group_identities() {
        let mut rng = Rng::new(14);
        let t = random_rotation(&mut rng);
        let roundtrip = t.compose(&t.invert());
        assert!(roundtrip.rotation_angle() < 1e-12);
        assert!(roundtrip.translation().norm() < 1e-12);
        let p = Point3::new(0.3, -0.2, 0.9);
        assert!(RigidTransform::identity().apply(&p).dist(&p) == 0.0);
        // associativity on random triples
        for _ in 0..10 {
            let (a, b, c) =
                (random_rotation(&mut rng), random_rotation(&mut rng), random_rotation(&mut rng));
            let lhs = a.compose(&b).compose(&c);
            let rhs = a.compose(&b.compose(&c));
            let q = Point3::new(rng.normal(), rng.normal(), rng.normal());
            assert!(lhs.apply(&q).dist(&rhs.apply(&q)) < 1e-12);
        }
    }

    #[test]
    fn constructor_rejects_non_rotation() {
        let bad = [[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(RigidTransform::new(bad, Point3::ZERO).is_err());
        let reflect = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(RigidTransform::new(reflect, Point3::ZERO).is_err());
    }
}
