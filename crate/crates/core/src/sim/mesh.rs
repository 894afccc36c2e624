use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpringKind {
    Structural,
    Shear,
    Bend,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spring {
    pub a: usize,
    pub b: usize,
    pub rest_length: f64,
    pub kind: SpringKind,
}

/// Rectangular cloth grid. Vertex `(r, c)` lives at index `r * cols + c`;
/// row 0 is the grasped edge and column 0 the left side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FabricMesh {
    pub rows: usize,
    pub cols: usize,
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub rest_edge_length: f64,
    pub springs: Vec<Spring>,
}

impl FabricMesh {
    /// Flat grid in its own frame: x across the grasped edge (centered),
    /// y from 0 at the grasped edge down to `-(rows-1)*spacing`.
    pub fn flat(rows: usize, cols: usize, spacing: f64) -> Self {
        let mut positions = Vec::with_capacity(rows * cols);
        let half_width = 0.5 * (cols - 1) as f64 * spacing;
        for r in 0..rows {
            for c in 0..cols {
                positions.push(Vec3::new(c as f64 * spacing - half_width, -(r as f64) * spacing, 0.0));
            }
        }
        let springs = build_springs(rows, cols, &positions);
        Self {
            rows,
            cols,
            velocities: vec![Vec3::zeros(); rows * cols],
            positions,
            rest_edge_length: spacing,
            springs,
        }
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn vertex_count(&self) -> usize {
        self.positions.len()
    }

    /// Grasped corners: (left, right).
    pub fn grasped_corners(&self) -> (usize, usize) {
        (self.index(0, 0), self.index(0, self.cols - 1))
    }

    /// Far corners: (left, right).
    pub fn far_corners(&self) -> (usize, usize) {
        (self.index(self.rows - 1, 0), self.index(self.rows - 1, self.cols - 1))
    }

    pub fn centroid(&self) -> Vec3 {
        self.positions.iter().sum::<Vec3>() / self.positions.len() as f64
    }

    /// Largest relative elongation over structural springs.
    pub fn max_structural_strain(&self) -> f64 {
        self.springs
            .iter()
            .filter(|s| s.kind == SpringKind::Structural)
            .map(|s| ((self.positions[s.a] - self.positions[s.b]).norm() - s.rest_length) / s.rest_length)
            .fold(0.0, f64::max)
    }

    /// Triangles of the grid, two per quad.
    pub fn triangles(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        (0..self.rows - 1).flat_map(move |r| {
            (0..self.cols - 1).flat_map(move |c| {
                let i = self.index(r, c);
                let right = i + 1;
                let down = i + self.cols;
                [[i, right, down], [right, down + 1, down]]
            })
        })
    }
}

fn build_springs(rows: usize, cols: usize, positions: &[Vec3]) -> Vec<Spring> {
    let idx = |r: usize, c: usize| r * cols + c;
    let mut springs = Vec::new();
    let mut push = |a: usize, b: usize, kind: SpringKind| {
        springs.push(Spring { a, b, rest_length: (positions[a] - positions[b]).norm(), kind });
    };
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                push(idx(r, c), idx(r, c + 1), SpringKind::Structural);
            }
            if r + 1 < rows {
                push(idx(r, c), idx(r + 1, c), SpringKind::Structural);
            }
            if r + 1 < rows && c + 1 < cols {
                push(idx(r, c), idx(r + 1, c + 1), SpringKind::Shear);
                push(idx(r, c + 1), idx(r + 1, c), SpringKind::Shear);
            }
            if c + 2 < cols {
                push(idx(r, c), idx(r, c + 2), SpringKind::Bend);
            }
            if r + 2 < rows {
                push(idx(r, c), idx(r + 2, c), SpringKind::Bend);
            }
        }
    }
    springs
}
