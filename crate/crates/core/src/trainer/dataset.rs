//! Procedural point clouds with no rotational symmetry.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{stream, RandomStream};
use crate::rot3::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    /// Edges of a box with three unequal sides, minus the three edges that
    /// meet at one corner.
    BoxEdges,
    /// A spherical cap with a wedge cut out of it.
    SphereCap,
    /// A conical helix.
    Helix,
    /// All three of the above, placed asymmetrically.
    Composite,
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::BoxEdges => "box_edges",
            ShapeKind::SphereCap => "sphere_cap",
            ShapeKind::Helix => "helix",
            ShapeKind::Composite => "composite",
        })
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "box_edges" => ShapeKind::BoxEdges,
            "sphere_cap" => ShapeKind::SphereCap,
            "helix" => ShapeKind::Helix,
            "composite" => ShapeKind::Composite,
            other => return Err(Error::Config(format!("unknown shape kind `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticShapeSpec {
    pub shape_kind: ShapeKind,
    pub points_per_cloud: usize,
    /// Standard deviation of the Gaussian noise added to every point, before
    /// normalization.
    pub jitter: f64,
    pub instances: usize,
    pub dataset_seed: u64,
}

impl Default for SyntheticShapeSpec {
    fn default() -> Self {
        Self {
            shape_kind: ShapeKind::Composite,
            points_per_cloud: 512,
            jitter: 0.01,
            instances: 256,
            dataset_seed: 7,
        }
    }
}

impl SyntheticShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.points_per_cloud < 16 {
            return Err(Error::Config("points_per_cloud must be >= 16".into()));
        }
        if self.instances == 0 {
            return Err(Error::Config("instances must be >= 1".into()));
        }
        if !(self.jitter >= 0.0) || !self.jitter.is_finite() {
            return Err(Error::Config(format!("jitter must be >= 0, got {}", self.jitter)));
        }
        Ok(())
    }
}

/// Deterministic in `spec`; clouds are centered at their mean and scaled
/// so the farthest point sits at distance 1.
pub fn generate_dataset(spec: &SyntheticShapeSpec) -> Result<Vec<PointCloud>> {
    spec.validate()?;
    (0..spec.instances)
        .map(|i| generate_cloud(spec, &mut stream(spec.dataset_seed, "dataset", &[i as u64])))
        .collect()
}

fn generate_cloud(spec: &SyntheticShapeSpec, rng: &mut RandomStream) -> Result<PointCloud> {
    let n = spec.points_per_cloud;
    let mut pts = match spec.shape_kind {
        ShapeKind::BoxEdges => box_edges(rng, n),
        ShapeKind::SphereCap => sphere_cap(rng, n),
        ShapeKind::Helix => helix(rng, n),
        ShapeKind::Composite => composite(rng, n),
    };
    for p in &mut pts {
        for c in p.iter_mut() {
            *c += spec.jitter * rng.sample::<f64, _>(StandardNormal);
        }
    }
    normalize(&mut pts);
    Ok(PointCloud::new(pts)?)
}

fn normalize(pts: &mut [[f64; 3]]) {
    let n = pts.len() as f64;
    let mut mean = [0.0; 3];
    for p in pts.iter() {
        for k in 0..3 {
            mean[k] += p[k] / n;
        }
    }
    let mut radius: f64 = 0.0;
    for p in pts.iter_mut() {
        for k in 0..3 {
            p[k] -= mean[k];
        }
        radius = radius.max((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
    }
    for p in pts.iter_mut() {
        for c in p.iter_mut() {
            *c /= radius;
        }
    }
}

fn box_edges(rng: &mut RandomStream, n: usize) -> Vec<[f64; 3]> {
    let h = [
        rng.random_range(0.7..1.0),
        rng.random_range(0.4..0.6),
        rng.random_range(0.15..0.3),
    ];
    let mut edges = Vec::new();
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for su in [-1.0, 1.0] {
            for sv in [-1.0, 1.0] {
                // drop the edges touching the (+, +, +) corner
                if su > 0.0 && sv > 0.0 {
                    continue;
                }
                let mut a = [0.0; 3];
                a[u] = su * h[u];
                a[v] = sv * h[v];
                let mut b = a;
                a[axis] = -h[axis];
                b[axis] = h[axis];
                edges.push((a, b));
            }
        }
    }
    let lengths: Vec<f64> = edges.iter().map(|(a, b)| dist(*a, *b)).collect();
    let total: f64 = lengths.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut e = 0;
            while e + 1 < edges.len() && pick > lengths[e] {
                pick -= lengths[e];
                e += 1;
            }
            let t = rng.random::<f64>();
            let (a, b) = edges[e];
            [0, 1, 2].map(|k| a[k] + t * (b[k] - a[k]))
        })
        .collect()
}

fn sphere_cap(rng: &mut RandomStream, n: usize) -> Vec<[f64; 3]> {
    let polar = rng.random_range(0.8..1.4f64);
    let wedge = rng.random_range(1.4 * PI..1.75 * PI);
    (0..n)
        .map(|_| {
            let c = rng.random_range(polar.cos()..1.0);
            let s = (1.0 - c * c).sqrt();
            let phi = rng.random::<f64>() * wedge;
            [s * phi.cos(), s * phi.sin(), c]
        })
        .collect()
}

fn helix(rng: &mut RandomStream, n: usize) -> Vec<[f64; 3]> {
    let turns = rng.random_range(1.5..2.5);
    let r0 = rng.random_range(0.3..0.5);
    let height = rng.random_range(1.0..1.6);
    (0..n)
        .map(|_| {
            let t = rng.random::<f64>();
            let r = r0 * (1.0 + 0.8 * t);
            let a = 2.0 * PI * turns * t;
            [r * a.cos(), r * a.sin(), height * (t - 0.5)]
        })
        .collect()
}

fn composite(rng: &mut RandomStream, n: usize) -> Vec<[f64; 3]> {
    let n_box = n * 2 / 5;
    let n_cap = n * 3 / 10;
    let n_helix = n - n_box - n_cap;
    let mut jiggle = |base: [f64; 3]| base.map(|c| c + rng.random_range(-0.08..0.08));
    let cap_offset = jiggle([0.55, 0.1, 0.45]);
    let helix_offset = jiggle([-0.5, 0.25, -0.2]);
    let mut pts = box_edges(rng, n_box);
    pts.extend(sphere_cap(rng, n_cap).into_iter().map(|p| add(scale(p, 0.45), cap_offset)));
    pts.extend(helix(rng, n_helix).into_iter().map(|p| add(scale(p, 0.55), helix_offset)));
    pts
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn scale(p: [f64; 3], s: f64) -> [f64; 3] {
    p.map(|c| c * s)
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
