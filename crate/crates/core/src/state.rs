//! Keypoint states in the object frame and the planar geometry used by the
//! reward and the metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ObjectPose, Vec3};
use crate::sim::SimState;

#[derive(Debug, Error, PartialEq)]
pub enum StateError {
    #[error("point cloud size must be positive")]
    EmptyCloud,
    #[error("requested {requested} points from a mesh with {available} vertices")]
    TooManyPoints { requested: usize, available: usize },
    #[error("expected {expected} coordinates, found {found}")]
    BadLength { expected: usize, found: usize },
}

/// Which mesh vertices make up the keypoint state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeypointLayout {
    /// Append the four edge midpoints (near, far, left, right) after the corners.
    pub include_midpoints: bool,
}

impl KeypointLayout {
    pub fn count(&self) -> usize {
        if self.include_midpoints {
            8
        } else {
            4
        }
    }

    /// Share of the left arm's displacement a keypoint follows when the
    /// fabric is translated rigidly per arm (1 = left, 0 = right).
    pub fn left_share(&self) -> Vec<f64> {
        let mut w = vec![1.0, 0.0, 1.0, 0.0];
        if self.include_midpoints {
            w.extend([0.5, 0.5, 1.0, 0.0]);
        }
        w
    }

    fn vertex_indices(&self, rows: usize, cols: usize) -> Vec<usize> {
        let idx = |r: usize, c: usize| r * cols + c;
        let mut v = vec![idx(0, 0), idx(0, cols - 1), idx(rows - 1, 0), idx(rows - 1, cols - 1)];
        if self.include_midpoints {
            v.extend([idx(0, cols / 2), idx(rows - 1, cols / 2), idx(rows / 2, 0), idx(rows / 2, cols - 1)]);
        }
        v
    }
}

/// Ordered keypoints: left grasped corner, right grasped corner, left far
/// corner, right far corner, then the optional edge midpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointState {
    pub points: Vec<Vec3>,
}

impl KeypointState {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn centroid(&self) -> Vec3 {
        self.points.iter().sum::<Vec3>() / self.points.len() as f64
    }

    /// Flat row-major `[x1, y1, z1, x2, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn write_flat(&self, out: &mut [f64]) {
        for (chunk, p) in out.chunks_exact_mut(3).zip(&self.points) {
            chunk.copy_from_slice(p.as_slice());
        }
    }

    pub fn from_flat(values: &[f64]) -> Result<Self, StateError> {
        if values.len() % 3 != 0 || values.is_empty() {
            return Err(StateError::BadLength { expected: 3 * (values.len() / 3).max(1), found: values.len() });
        }
        Ok(Self { points: values.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect() })
    }

    pub fn translated(&self, offset: &Vec3) -> Self {
        Self { points: self.points.iter().map(|p| p + offset).collect() }
    }

    /// Mean per-keypoint Euclidean distance.
    pub fn mean_distance(&self, other: &KeypointState) -> f64 {
        self.points.iter().zip(&other.points).map(|(a, b)| (a - b).norm()).sum::<f64>() / self.points.len() as f64
    }
}

/// Keypoints of the current mesh expressed in the scene's object frame.
pub fn extract_keypoints(state: &SimState, layout: &KeypointLayout) -> KeypointState {
    let frame = state.scene.frame();
    let idx = layout.vertex_indices(state.mesh.rows, state.mesh.cols);
    KeypointState { points: idx.into_iter().map(|i| frame.to_local(&state.mesh.positions[i])).collect() }
}

/// Rigid transform of world points into the frame of `pose`.
pub fn to_object_frame(points: &[Vec3], pose: &ObjectPose) -> Vec<Vec3> {
    points.iter().map(|p| pose.to_local(p)).collect()
}

/// Result of [`polygon_iou`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Iou {
    pub value: f64,
    /// One of the projected corner polygons had (numerically) zero area.
    pub degenerate: bool,
}

const AREA_EPS: f64 = 1e-12;

/// Area IoU of the convex hulls of the corner keypoints projected onto the
/// table plane.
pub fn polygon_iou(a: &KeypointState, b: &KeypointState) -> Iou {
    let pa = convex_hull(&project_corners(a));
    let pb = convex_hull(&project_corners(b));
    let (area_a, area_b) = (polygon_area(&pa), polygon_area(&pb));
    if area_a < AREA_EPS || area_b < AREA_EPS {
        return Iou { value: 0.0, degenerate: true };
    }
    let inter = polygon_area(&clip_convex(&pa, &pb));
    let union = area_a + area_b - inter;
    Iou { value: (inter / union).clamp(0.0, 1.0), degenerate: false }
}

/// Euclidean distance between keypoint centroids.
pub fn centroid_distance(a: &KeypointState, b: &KeypointState) -> f64 {
    (a.centroid() - b.centroid()).norm()
}

pub type Point2 = [f64; 2];

fn project_corners(s: &KeypointState) -> Vec<Point2> {
    s.points.iter().take(4).map(|p| [p.x, p.y]).collect()
}

fn cross(o: &Point2, a: &Point2, b: &Point2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise convex hull (Andrew's monotone chain).
pub fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap().then(a[1].partial_cmp(&b[1]).unwrap()));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Point2> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<Point2> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Shoelace area (absolute).
pub fn polygon_area(poly: &[Point2]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc.abs()
}

/// Sutherland-Hodgman clipping of a convex polygon by a CCW convex polygon.
pub fn clip_convex(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (e0, e1) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(&e0, &e1, &cur) >= 0.0;
            let prev_in = cross(&e0, &e1, &prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(intersect(&prev, &cur, &e0, &e1));
                }
                output.push(cur);
            } else if prev_in {
                output.push(intersect(&prev, &cur, &e0, &e1));
            }
        }
    }
    output
}

fn intersect(p: &Point2, q: &Point2, e0: &Point2, e1: &Point2) -> Point2 {
    let dp = cross(e0, e1, p);
    let dq = cross(e0, e1, q);
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Down-sampled mesh vertices, in the scene's object frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

/// Uniform-stride vertex sampling: vertex `floor(i * V / n)` for `i < n`.
pub fn sample_pointcloud(state: &SimState, n: usize) -> Result<PointCloud, StateError> {
    let available = state.mesh.vertex_count();
    if n == 0 {
        return Err(StateError::EmptyCloud);
    }
    if n > available {
        return Err(StateError::TooManyPoints { requested: n, available });
    }
    let frame = state.scene.frame();
    let points = (0..n).map(|i| frame.to_local(&state.mesh.positions[i * available / n])).collect();
    Ok(PointCloud { points })
}

/// Symmetric Chamfer distance (m^2): mean squared distance to the nearest
/// point of the other cloud, summed over both directions.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64, StateError> {
    if a.points.is_empty() || b.points.is_empty() {
        return Err(StateError::EmptyCloud);
    }
    let one_way = |from: &[Vec3], to: &[Vec3]| {
        from.iter().map(|p| to.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min)).sum::<f64>()
            / from.len() as f64
    };
    Ok(one_way(&a.points, &b.points) + one_way(&b.points, &a.points))
}
