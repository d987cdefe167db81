//! Rotations and point-cloud geometry.
//!
//! Unit quaternions are kept on the canonical hemisphere (`w >= 0`), so `q`
//! and `-q` share one representative. Point clouds are plain `N x 3` arrays
//! in 64-bit reals. Patchification (farthest point sampling followed by
//! k-nearest-neighbour grouping) is brute force, which is fine at the sizes
//! this crate works with.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

/// Norms below this are treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("insufficient points: requested {requested}, cloud has {available}")]
    InsufficientPoints { requested: usize, available: usize },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("non-finite coordinate at point {index}")]
    NonFinite { index: usize },
    #[error("degenerate quaternion (norm {norm:e})")]
    DegenerateQuaternion { norm: f64 },
    #[error("center index {index} out of range for cloud of {len} points")]
    CenterOutOfRange { index: usize, len: usize },
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

/// A rotation stored as a unit quaternion with non-negative scalar part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes `(w, x, y, z)` and moves it to the `w >= 0` hemisphere.
    /// `sign(0)` counts as positive.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || norm < DEGENERATE_NORM {
            return Err(GeometryError::DegenerateQuaternion { norm });
        }
        let s = if w < 0.0 { -1.0 / norm } else { 1.0 / norm };
        Ok(Self {
            w: w * s,
            x: x * s,
            y: y * s,
            z: z * s,
        })
    }

    pub fn from_array(v: [f64; 4]) -> Result<Self, GeometryError> {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// Rotation by `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Result<Self, GeometryError> {
        let n = norm3(axis);
        if n < DEGENERATE_NORM {
            return Err(GeometryError::DegenerateQuaternion { norm: n });
        }
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Hamilton product `self * rhs` (apply `rhs` first, then `self`).
    pub fn mul(&self, rhs: &Self) -> Self {
        let (a, b) = (self, rhs);
        let w = a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z;
        let x = a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y;
        let y = a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x;
        let z = a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w;
        // product of unit quaternions is never degenerate
        Self::new(w, x, y, z).expect("product of unit quaternions")
    }

    /// Conjugate. The scalar part is untouched so the result stays canonical.
    pub fn inverse(&self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Row-major rotation matrix.
    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Rotates a point with the sandwich product `q v q*`.
    pub fn rotate_point(&self, v: [f64; 3]) -> [f64; 3] {
        let u = [self.x, self.y, self.z];
        let t = cross(u, v);
        let t = [2.0 * t[0], 2.0 * t[1], 2.0 * t[2]];
        let ut = cross(u, t);
        [
            v[0] + self.w * t[0] + ut[0],
            v[1] + self.w * t[1] + ut[1],
            v[2] + self.w * t[2] + ut[2],
        ]
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let v = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * v.atan2(self.w.abs())
    }
}

impl fmt::Display for UnitQuaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.w, self.x, self.y, self.z)
    }
}

pub fn quat_mul(a: &UnitQuaternion, b: &UnitQuaternion) -> UnitQuaternion {
    a.mul(b)
}

pub fn quat_inverse(q: &UnitQuaternion) -> UnitQuaternion {
    q.inverse()
}

/// Draws a rotation uniformly over SO(3): normalize a 4-D standard normal
/// draw and flip it onto the `w >= 0` hemisphere.
pub fn sample_uniform_quaternion<R: Rng + ?Sized>(rng: &mut R) -> UnitQuaternion {
    loop {
        let v: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        if let Ok(q) = UnitQuaternion::from_array(v) {
            return q;
        }
    }
}

/// Rotation with angle uniform in `[0, max_angle]` (radians) about a
/// uniformly random axis.
pub fn sample_rotation_up_to<R: Rng + ?Sized>(rng: &mut R, max_angle: f64) -> UnitQuaternion {
    let angle = if max_angle > 0.0 {
        rng.random::<f64>() * max_angle
    } else {
        0.0
    };
    loop {
        let axis: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        if norm3(axis) > 1e-9 {
            return UnitQuaternion::from_axis_angle(axis, angle).expect("non-degenerate axis");
        }
    }
}

/// Angle of the relative rotation between `est` and `gt`, in degrees.
pub fn rotation_error_deg(est: &UnitQuaternion, gt: &UnitQuaternion) -> f64 {
    // 4 atan2(|a - b|, |a + b|) is the double of the 4-D angle, and stays
    // accurate near zero where acos does not
    let s = if est.dot(gt) < 0.0 { -1.0 } else { 1.0 };
    let (a, b) = (est.to_array(), gt.to_array());
    let (mut minus, mut plus) = (0.0, 0.0);
    for i in 0..4 {
        minus += (a[i] - s * b[i]).powi(2);
        plus += (a[i] + s * b[i]).powi(2);
    }
    (4.0 * minus.sqrt().atan2(plus.sqrt())).to_degrees()
}

/// CDF of the rotation angle of a uniformly random rotation:
/// `(theta - sin theta) / pi` on `[0, pi]`.
pub fn so3_angle_cdf(theta: f64) -> f64 {
    let t = theta.clamp(0.0, PI);
    (t - t.sin()) / PI
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquareSummary {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson chi-square test of the rotation angles of `quats` against the
/// uniform-SO(3) angle density, over `bins` equal-width bins on `[0, pi]`.
pub fn angle_chi_square(quats: &[UnitQuaternion], bins: usize) -> ChiSquareSummary {
    assert!(bins >= 2, "need at least two bins");
    let n = quats.len() as f64;
    let mut counts = vec![0usize; bins];
    for q in quats {
        let b = ((q.angle() / PI) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let width = PI / bins as f64;
    let statistic = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let p = so3_angle_cdf((i + 1) as f64 * width) - so3_angle_cdf(i as f64 * width);
            let e = n * p;
            (c as f64 - e).powi(2) / e
        })
        .sum::<f64>();
    let dof = bins - 1;
    let p_value = ChiSquared::new(dof as f64)
        .map(|d| 1.0 - d.cdf(statistic))
        .unwrap_or(f64::NAN);
    ChiSquareSummary {
        statistic,
        dof,
        p_value,
    }
}

/// An `N x 3` point set with finite coordinates and `N >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        if let Some(index) = points
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(GeometryError::NonFinite { index });
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// Parses the text format: one point per line as three whitespace
    /// separated reals; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, GeometryError> {
        let mut points = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(GeometryError::Parse {
                    line: i + 1,
                    message: format!("expected 3 values, found {}", fields.len()),
                });
            }
            let mut p = [0.0; 3];
            for (slot, f) in p.iter_mut().zip(&fields) {
                *slot = f.parse().map_err(|_| GeometryError::Parse {
                    line: i + 1,
                    message: format!("invalid number {f:?}"),
                })?;
            }
            points.push(p);
        }
        Self::new(points)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.points.len() * 40);
        for p in &self.points {
            out.push_str(&format!("{:e} {:e} {:e}\n", p[0], p[1], p[2]));
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path).map_err(|e| GeometryError::Io(e.to_string()))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<(), GeometryError> {
        std::fs::write(path, self.to_text()).map_err(|e| GeometryError::Io(e.to_string()))
    }
}

pub fn rotate(cloud: &PointCloud, q: &UnitQuaternion) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| q.rotate_point(*p)).collect(),
    }
}

/// Farthest point sampling with a start index drawn from `seed`.
pub fn farthest_point_sample(
    cloud: &PointCloud,
    n: usize,
    seed: u64,
) -> Result<Vec<usize>, GeometryError> {
    check_count(cloud, n)?;
    let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..cloud.len());
    farthest_point_sample_from(cloud, n, start)
}

/// Farthest point sampling from a fixed start index. Each new index
/// maximizes the distance to the already selected set; ties go to the
/// lowest index.
pub fn farthest_point_sample_from(
    cloud: &PointCloud,
    n: usize,
    start: usize,
) -> Result<Vec<usize>, GeometryError> {
    check_count(cloud, n)?;
    let pts = cloud.points();
    if start >= pts.len() {
        return Err(GeometryError::CenterOutOfRange {
            index: start,
            len: pts.len(),
        });
    }
    let mut selected = Vec::with_capacity(n);
    let mut taken = vec![false; pts.len()];
    let mut min_d = vec![f64::INFINITY; pts.len()];
    let mut current = start;
    for _ in 0..n {
        selected.push(current);
        taken[current] = true;
        let c = pts[current];
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in pts.iter().enumerate() {
            let d = dist2(*p, c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && best.is_none_or(|(_, bd)| min_d[i] > bd) {
                best = Some((i, min_d[i]));
            }
        }
        match best {
            Some((i, _)) => current = i,
            None => break,
        }
    }
    Ok(selected)
}

/// Patches grouped around FPS centers, each expressed relative to its center.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub center_indices: Vec<usize>,
    pub centers: Vec<[f64; 3]>,
    /// Source indices of the neighbours, `patch_size` per center.
    pub neighbor_indices: Vec<usize>,
    /// Relative coordinates, `patch_size` rows per center.
    pub patches: Vec<[f64; 3]>,
    pub patch_size: usize,
}

impl PatchSet {
    pub fn num_patches(&self) -> usize {
        self.centers.len()
    }

    pub fn patch(&self, i: usize) -> &[[f64; 3]] {
        &self.patches[i * self.patch_size..(i + 1) * self.patch_size]
    }
}

/// For each center, the `k_nn` nearest points (the center included) ordered
/// by distance then index, translated so the center sits at the origin.
pub fn knn_patches(
    cloud: &PointCloud,
    centers: &[usize],
    k_nn: usize,
) -> Result<PatchSet, GeometryError> {
    check_count(cloud, k_nn)?;
    let pts = cloud.points();
    let mut neighbor_indices = Vec::with_capacity(centers.len() * k_nn);
    let mut patches = Vec::with_capacity(centers.len() * k_nn);
    let mut center_pts = Vec::with_capacity(centers.len());
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(pts.len());
    for &ci in centers {
        if ci >= pts.len() {
            return Err(GeometryError::CenterOutOfRange {
                index: ci,
                len: pts.len(),
            });
        }
        let c = pts[ci];
        order.clear();
        order.extend(pts.iter().enumerate().map(|(i, p)| (dist2(*p, c), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k_nn < order.len() {
            order.select_nth_unstable_by(k_nn - 1, cmp);
        }
        let nearest = &mut order[..k_nn];
        nearest.sort_unstable_by(cmp);
        for &(_, i) in nearest.iter() {
            neighbor_indices.push(i);
            let p = pts[i];
            patches.push([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
        }
        center_pts.push(c);
    }
    Ok(PatchSet {
        center_indices: centers.to_vec(),
        centers: center_pts,
        neighbor_indices,
        patches,
        patch_size: k_nn,
    })
}

/// Symmetric Chamfer distance (mean nearest squared distance both ways).
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> f64 {
    let one_way = |x: &PointCloud, y: &PointCloud| {
        x.points()
            .iter()
            .map(|p| {
                y.points()
                    .iter()
                    .map(|q| dist2(*p, *q))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / x.len() as f64
    };
    one_way(a, b) + one_way(b, a)
}

fn check_count(cloud: &PointCloud, requested: usize) -> Result<(), GeometryError> {
    if requested == 0 || requested > cloud.len() {
        return Err(GeometryError::InsufficientPoints {
            requested,
            available: cloud.len(),
        });
    }
    Ok(())
}

pub(crate) fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn matmul3(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    c[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        c
    }

    /// Shepperd-style matrix -> quaternion, independent of the product code.
    fn matrix_to_quat(m: [[f64; 3]; 3]) -> UnitQuaternion {
        let tr = m[0][0] + m[1][1] + m[2][2];
        let (w, x, y, z);
        if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[2][1] - m[1][2]) / s;
            y = (m[0][2] - m[2][0]) / s;
            z = (m[1][0] - m[0][1]) / s;
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            w = (m[2][1] - m[1][2]) / s;
            x = 0.25 * s;
            y = (m[0][1] + m[1][0]) / s;
            z = (m[0][2] + m[2][0]) / s;
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            w = (m[0][2] - m[2][0]) / s;
            x = (m[0][1] + m[1][0]) / s;
            y = 0.25 * s;
            z = (m[1][2] + m[2][1]) / s;
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            w = (m[1][0] - m[0][1]) / s;
            x = (m[0][2] + m[2][0]) / s;
            y = (m[1][2] + m[2][1]) / s;
            z = 0.25 * s;
        }
        UnitQuaternion::new(w, x, y, z).unwrap()
    }

    fn assert_quat_eq(a: &UnitQuaternion, b: &UnitQuaternion, tol: f64) {
        // same rotation up to sign
        let d = 1.0 - a.dot(b).abs();
        assert!(d < tol, "{a} vs {b}");
    }

    fn rz(deg: f64) -> UnitQuaternion {
        UnitQuaternion::from_axis_angle([0.0, 0.0, 1.0], deg.to_radians()).unwrap()
    }

    fn arb_quat() -> impl Strategy<Value = UnitQuaternion> {
        prop::array::uniform4(-1.0f64..1.0)
            .prop_filter("non-degenerate", |v| v.iter().map(|c| c * c).sum::<f64>() > 1e-3)
            .prop_map(|v| UnitQuaternion::from_array(v).unwrap())
    }

    #[test]
    fn identity_and_inverse() {
        let q = UnitQuaternion::new(0.3, -0.4, 0.5, 0.2).unwrap();
        assert_quat_eq(&quat_mul(&UnitQuaternion::IDENTITY, &q), &q, 1e-15);
        assert_quat_eq(&quat_mul(&q, &quat_inverse(&q)), &UnitQuaternion::IDENTITY, 1e-15);
        assert_eq!(quat_inverse(&UnitQuaternion::IDENTITY), UnitQuaternion::IDENTITY);
    }

    #[test]
    fn quarter_turns_compose_to_half_turn() {
        let m = matmul3(rz(90.0).to_matrix(), rz(90.0).to_matrix());
        let oracle = matrix_to_quat(m);
        let got = quat_mul(&rz(90.0), &rz(90.0));
        assert_quat_eq(&got, &oracle, 1e-12);
        assert_quat_eq(&got, &rz(180.0), 1e-12);
        assert!(got.w() >= 0.0);
    }

    #[test]
    fn inverse_quarter_turn_matches_transpose() {
        let m = rz(90.0).to_matrix();
        let v = [0.0, 1.0, 0.0];
        // transpose oracle
        let t: Vec<f64> = (0..3).map(|i| (0..3).map(|k| m[k][i] * v[k]).sum()).collect();
        let got = quat_inverse(&rz(90.0)).rotate_point(v);
        for i in 0..3 {
            assert_abs_diff_eq!(got[i], t[i], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(got[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rotate_examples() {
        let cloud = PointCloud::new(vec![[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(rotate(&cloud, &UnitQuaternion::IDENTITY), cloud);
        let r = rotate(&cloud, &rz(90.0));
        let p = r.points()[0];
        assert_abs_diff_eq!(p[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[2], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn gaussian_canonicalization() {
        let q = UnitQuaternion::from_array([-1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(q, UnitQuaternion::IDENTITY);
        let q = UnitQuaternion::from_array([0.0, -1.0, 0.0, 0.0]).unwrap();
        assert_eq!(q.x(), -1.0, "sign(0) is +1");
        assert!(UnitQuaternion::from_array([0.0; 4]).is_err());
    }

    #[test]
    fn rotation_error_examples() {
        let q = UnitQuaternion::new(0.1, 0.7, -0.2, 0.4).unwrap();
        assert_abs_diff_eq!(rotation_error_deg(&q, &q), 0.0, epsilon = 1e-6);
        let neg = UnitQuaternion {
            w: -q.w,
            x: -q.x,
            y: -q.y,
            z: -q.z,
        };
        assert_abs_diff_eq!(rotation_error_deg(&q, &neg), 0.0, epsilon = 1e-6);
        let rx = UnitQuaternion::from_axis_angle([1.0, 0.0, 0.0], PI / 2.0).unwrap();
        let m = rx.to_matrix();
        let oracle = ((m[0][0] + m[1][1] + m[2][2] - 1.0) / 2.0).acos().to_degrees();
        assert_abs_diff_eq!(rotation_error_deg(&UnitQuaternion::IDENTITY, &rx), oracle, epsilon = 1e-9);
        assert_abs_diff_eq!(oracle, 90.0, epsilon = 1e-9);
    }

    #[test]
    fn fps_examples() {
        let cloud = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [0.9, 0.0, 0.0],
        ])
        .unwrap();
        assert_eq!(farthest_point_sample_from(&cloud, 2, 0).unwrap(), vec![0, 1]);
        let mut all = farthest_point_sample(&cloud, 4, 11).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(matches!(
            farthest_point_sample(&cloud, 5, 0),
            Err(GeometryError::InsufficientPoints { requested: 5, available: 4 })
        ));

        let square = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ])
        .unwrap();
        let sel = farthest_point_sample_from(&square, 2, 0).unwrap();
        // brute force: the farthest corner from the origin
        let far = (0..4)
            .max_by(|&a, &b| {
                dist2(square.points()[a], [0.0; 3]).total_cmp(&dist2(square.points()[b], [0.0; 3]))
            })
            .unwrap();
        assert_eq!(sel, vec![0, far]);
        assert_eq!(far, 3);
    }

    #[test]
    fn fps_handles_duplicates() {
        let cloud = PointCloud::new(vec![[0.0; 3]; 5]).unwrap();
        let sel = farthest_point_sample_from(&cloud, 5, 2).unwrap();
        assert_eq!(sel, vec![2, 0, 1, 3, 4]);
    }

    #[test]
    fn knn_examples() {
        let cloud = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
        ])
        .unwrap();
        let one = knn_patches(&cloud, &[0, 1, 2, 3], 1).unwrap();
        assert!(one.patches.iter().all(|p| *p == [0.0; 3]));
        assert_eq!(one.neighbor_indices, vec![0, 1, 2, 3]);

        let p = knn_patches(&cloud, &[1], 3).unwrap();
        // brute force sort by distance then index
        let mut brute: Vec<(f64, usize)> =
            (0..4).map(|i| (dist2(cloud.points()[i], cloud.points()[1]), i)).collect();
        brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let want: Vec<usize> = brute[..3].iter().map(|x| x.1).collect();
        assert_eq!(p.neighbor_indices, want);
        assert_eq!(p.neighbor_indices, vec![1, 0, 2]);
        assert_eq!(p.patch(0), &[[0.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(knn_patches(&cloud, &[0], 5).is_err());
    }

    #[test]
    fn patches_rotate_with_the_cloud() {
        let mut rng = crate::rng::stream(3, "test", &[]);
        let pts: Vec<[f64; 3]> = (0..64)
            .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let q = sample_uniform_quaternion(&mut rng);
        let rotated = rotate(&cloud, &q);
        let c1 = farthest_point_sample(&cloud, 8, 5).unwrap();
        let c2 = farthest_point_sample(&rotated, 8, 5).unwrap();
        assert_eq!(c1, c2);
        let p1 = knn_patches(&cloud, &c1, 6).unwrap();
        let p2 = knn_patches(&rotated, &c2, 6).unwrap();
        assert_eq!(p1.neighbor_indices, p2.neighbor_indices);
        for (a, b) in p1.patches.iter().zip(&p2.patches) {
            let ra = q.rotate_point(*a);
            for i in 0..3 {
                assert_abs_diff_eq!(ra[i], b[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn text_round_trip_and_errors() {
        let text = "# header\n0 1 2\n\n3.5 -4 5e-1\n";
        let c = PointCloud::parse(text).unwrap();
        assert_eq!(c.points(), &[[0.0, 1.0, 2.0], [3.5, -4.0, 0.5]]);
        assert_eq!(PointCloud::parse(&c.to_text()).unwrap(), c);
        assert!(matches!(PointCloud::parse("1 2\n"), Err(GeometryError::Parse { line: 1, .. })));
        assert!(matches!(PointCloud::parse("# only\n"), Err(GeometryError::EmptyCloud)));
        assert!(PointCloud::parse("1 2 x\n").is_err());
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]]).is_err());
    }

    proptest! {
        #[test]
        fn rotate_matches_matrix_and_is_isometric(q in arb_quat(),
            pts in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 2..12)) {
            let cloud = PointCloud::new(pts).unwrap();
            let r = rotate(&cloud, &q);
            let m = q.to_matrix();
            for (p, rp) in cloud.points().iter().zip(r.points()) {
                for i in 0..3 {
                    let want = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2];
                    prop_assert!((rp[i] - want).abs() < 1e-12);
                }
            }
            for i in 0..cloud.len() {
                for j in 0..cloud.len() {
                    let d0 = dist2(cloud.points()[i], cloud.points()[j]).sqrt();
                    let d1 = dist2(r.points()[i], r.points()[j]).sqrt();
                    prop_assert!((d0 - d1).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn mul_is_associative(a in arb_quat(), b in arb_quat(), c in arb_quat()) {
            let l = quat_mul(&quat_mul(&a, &b), &c);
            let r = quat_mul(&a, &quat_mul(&b, &c));
            for (x, y) in l.to_array().iter().zip(r.to_array()) {
                prop_assert!((x - y).abs() < 1e-12 || (l.w().abs() < 1e-9));
            }
            prop_assert!(1.0 - l.dot(&r).abs() < 1e-12);
        }

        #[test]
        fn rotation_error_is_a_metric(a in arb_quat(), b in arb_quat(), c in arb_quat()) {
            let ab = rotation_error_deg(&a, &b);
            prop_assert!((ab - rotation_error_deg(&b, &a)).abs() < 1e-9);
            prop_assert!((0.0..=180.0).contains(&ab));
            let ac = rotation_error_deg(&a, &c);
            let cb = rotation_error_deg(&c, &b);
            prop_assert!(ab <= ac + cb + 1e-9);
        }

        #[test]
        fn samples_are_canonical_units(seed in any::<u64>()) {
            let mut rng = crate::rng::stream(seed, "prop", &[]);
            for _ in 0..16 {
                let q = sample_uniform_quaternion(&mut rng);
                prop_assert!((q.dot(&q) - 1.0).abs() < 1e-9);
                prop_assert!(q.w() >= 0.0);
            }
        }

        #[test]
        fn fps_and_knn_are_deterministic(seed in any::<u64>(),
            pts in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 8..40)) {
            let cloud = PointCloud::new(pts).unwrap();
            let a = farthest_point_sample(&cloud, 6, seed).unwrap();
            let b = farthest_point_sample(&cloud, 6, seed).unwrap();
            prop_assert_eq!(&a, &b);
            let mut dedup = a.clone();
            dedup.sort();
            dedup.dedup();
            prop_assert_eq!(dedup.len(), 6);
            prop_assert_eq!(knn_patches(&cloud, &a, 4).unwrap(), knn_patches(&cloud, &b, 4).unwrap());
        }
    }
}
