use serde::{Deserialize, Serialize};

use super::mesh::FabricMesh;
use crate::geometry::{Aabb, ObjectPose, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectKind {
    None,
    Box,
    Hanger,
}

/// Fixed environment of an episode: table plane, workspace and at most one
/// immobile rigid object.
///
/// `object_dims` is (width x, depth y, height z) for a box whose bottom face
/// sits at the object origin, and (bar length x, bar thickness, bar top
/// height) for a hanger, whose bar is a square-section beam ending at the
/// given height above the origin. Hanger supports are not modelled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidScene {
    pub object_kind: ObjectKind,
    pub object_pose: ObjectPose,
    pub object_dims: [f64; 3],
    pub table_height: f64,
    pub workspace: Aabb,
}

/// Thresholds of the symbolic success predicates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuccessConfig {
    /// Fraction of the box top that must be covered.
    pub cover_fraction: f64,
    /// Raster step used for the coverage estimate (m).
    pub raster_step: f64,
    /// A fabric triangle counts as resting on the top if its centroid is at
    /// most this far below it (m).
    pub top_tolerance: f64,
    /// Max distance between the fabric and the bar for the fabric to count as
    /// supported by it (m).
    pub support_tolerance: f64,
}

impl Default for SuccessConfig {
    fn default() -> Self {
        Self { cover_fraction: 0.9, raster_step: 0.002, top_tolerance: 0.01, support_tolerance: 0.015 }
    }
}

impl RigidScene {
    pub fn contact_free(table_height: f64, workspace: Aabb) -> Self {
        Self {
            object_kind: ObjectKind::None,
            object_pose: ObjectPose::identity(),
            object_dims: [0.0; 3],
            table_height,
            workspace,
        }
    }

    /// Solid of the object in its own frame.
    pub fn solid_local(&self) -> Option<Aabb> {
        let [a, b, c] = self.object_dims;
        match self.object_kind {
            ObjectKind::None => None,
            ObjectKind::Box => Some(Aabb::new([-a / 2.0, -b / 2.0, 0.0], [a / 2.0, b / 2.0, c])),
            ObjectKind::Hanger => Some(Aabb::new([-a / 2.0, -b / 2.0, c - b], [a / 2.0, b / 2.0, c])),
        }
    }

    /// Frame in which keypoint states are expressed: the object frame, or the
    /// world frame for contact-free scenes.
    pub fn frame(&self) -> ObjectPose {
        match self.object_kind {
            ObjectKind::None => ObjectPose::identity(),
            _ => self.object_pose,
        }
    }

    /// Table height expressed in the keypoint frame.
    pub fn local_floor(&self) -> f64 {
        self.table_height - self.frame().position[2]
    }

    /// Signed distance of a world point to the table and object (negative inside).
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        let mut d = p.z - self.table_height;
        if let Some(solid) = self.solid_local() {
            let q = self.object_pose.to_local(p);
            let outside = solid.distance(&q);
            let sd = if outside > 0.0 {
                outside
            } else {
                -(0..3)
                    .flat_map(|i| [q[i] - solid.min[i], solid.max[i] - q[i]])
                    .fold(f64::INFINITY, f64::min)
            };
            d = d.min(sd);
        }
        d
    }

    /// Push a world point out of the object solid. Returns the corrected
    /// point, the outward world normal and the penetration depth.
    pub fn project_object(&self, p: &Vec3) -> Option<(Vec3, Vec3, f64)> {
        let solid = self.solid_local()?;
        let q = self.object_pose.to_local(p);
        if !solid.contains(&q) {
            return None;
        }
        let table_local = self.table_height - self.object_pose.position[2];
        let mut best: Option<(usize, f64, f64)> = None;
        for i in 0..3 {
            for (sign, depth) in [(-1.0, q[i] - solid.min[i]), (1.0, solid.max[i] - q[i])] {
                // the bottom face of a box resting on the table is not an exit
                if i == 2 && sign < 0.0 && solid.min[2] <= table_local + 1e-12 {
                    continue;
                }
                if best.map_or(true, |(_, _, d)| depth < d) {
                    best = Some((i, sign, depth));
                }
            }
        }
        let (axis, sign, depth) = best?;
        let mut q_out = q;
        q_out[axis] = if sign > 0.0 { solid.max[axis] } else { solid.min[axis] };
        let mut n_local = Vec3::zeros();
        n_local[axis] = sign;
        Some((self.object_pose.to_world(&q_out), self.object_pose.vector_to_world(&n_local), depth))
    }

    /// Fraction of the box top face covered by fabric lying on it.
    pub fn box_top_coverage(&self, mesh: &FabricMesh, cfg: &SuccessConfig) -> f64 {
        let Some(solid) = self.solid_local() else { return 0.0 };
        let local: Vec<Vec3> = mesh.positions.iter().map(|p| self.object_pose.to_local(p)).collect();
        let step = cfg.raster_step;
        let nx = ((solid.max[0] - solid.min[0]) / step).round().max(1.0) as usize;
        let ny = ((solid.max[1] - solid.min[1]) / step).round().max(1.0) as usize;
        let (dx, dy) = ((solid.max[0] - solid.min[0]) / nx as f64, (solid.max[1] - solid.min[1]) / ny as f64);
        let mut covered = vec![false; nx * ny];
        let top = solid.max[2];
        for tri in mesh.triangles() {
            let [a, b, c] = tri.map(|i| local[i]);
            if (a.z + b.z + c.z) / 3.0 < top - cfg.top_tolerance {
                continue;
            }
            let min_x = a.x.min(b.x).min(c.x);
            let max_x = a.x.max(b.x).max(c.x);
            let min_y = a.y.min(b.y).min(c.y);
            let max_y = a.y.max(b.y).max(c.y);
            let i0 = (((min_x - solid.min[0]) / dx - 0.5).floor().max(0.0)) as usize;
            let i1 = (((max_x - solid.min[0]) / dx - 0.5).ceil().max(-1.0) + 1.0).min(nx as f64) as usize;
            let j0 = (((min_y - solid.min[1]) / dy - 0.5).floor().max(0.0)) as usize;
            let j1 = (((max_y - solid.min[1]) / dy - 0.5).ceil().max(-1.0) + 1.0).min(ny as f64) as usize;
            for j in j0..j1 {
                let y = solid.min[1] + (j as f64 + 0.5) * dy;
                for i in i0..i1 {
                    let x = solid.min[0] + (i as f64 + 0.5) * dx;
                    if !covered[j * nx + i] && point_in_triangle(x, y, &a, &b, &c) {
                        covered[j * nx + i] = true;
                    }
                }
            }
        }
        covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64
    }

    /// Symbolic goal test; `None` for scenes without an object.
    pub fn is_goal_established(&self, mesh: &FabricMesh, cfg: &SuccessConfig) -> Option<bool> {
        let solid = self.solid_local()?;
        let local: Vec<Vec3> = mesh.positions.iter().map(|p| self.object_pose.to_local(p)).collect();
        match self.object_kind {
            ObjectKind::None => None,
            ObjectKind::Box => {
                let centroid = local.iter().sum::<Vec3>() / local.len() as f64;
                let over_top = centroid.x >= solid.min[0]
                    && centroid.x <= solid.max[0]
                    && centroid.y >= solid.min[1]
                    && centroid.y <= solid.max[1];
                Some(over_top && self.box_top_coverage(mesh, cfg) >= cfg.cover_fraction)
            }
            ObjectKind::Hanger => {
                // A row hanging straight down tucks its edge vertices under
                // the bar, so the side is judged from the row centroid.
                let row_side = |r: usize| -> i8 {
                    let row = &local[r * mesh.cols..(r + 1) * mesh.cols];
                    let y = row.iter().map(|p| p.y).sum::<f64>() / row.len() as f64;
                    if y < solid.min[1] {
                        -1
                    } else if y > solid.max[1] {
                        1
                    } else {
                        0
                    }
                };
                let sides: Vec<i8> = (0..mesh.rows).map(row_side).collect();
                let both_sides = sides.contains(&-1) && sides.contains(&1);
                let lowest = local.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
                let supported = local.iter().any(|p| p.z >= solid.min[2] && solid.distance(p) <= cfg.support_tolerance);
                Some(both_sides && lowest < solid.min[2] && supported)
            }
        }
    }
}

fn point_in_triangle(x: f64, y: f64, a: &Vec3, b: &Vec3, c: &Vec3) -> bool {
    let cross = |p: &Vec3, q: &Vec3| (q.x - p.x) * (y - p.y) - (q.y - p.y) * (x - p.x);
    let d1 = cross(a, b);
    let d2 = cross(b, c);
    let d3 = cross(c, a);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}
