//! Mesh extraction and evaluation metrics: marching cubes over an SDF grid,
//! symmetric L1 Chamfer distance, normal consistency, PSNR, area-weighted
//! surface sampling, and OBJ export.

use crate::error::{Error, Result};
use crate::linalg::Tensor;
use rand::Rng;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Default)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    pub normals: Option<Vec<[f64; 3]>>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Per-vertex normals as the normalized sum of incident face normals
    /// (cross products, hence area-weighted).
    pub fn compute_vertex_normals(&mut self) {
        let mut acc = vec![[0.0f64; 3]; self.vertices.len()];
        for t in &self.triangles {
            let n = face_normal_raw(
                self.vertices[t[0]],
                self.vertices[t[1]],
                self.vertices[t[2]],
            );
            for &vi in t {
                for c in 0..3 {
                    acc[vi][c] += n[c];
                }
            }
        }
        for n in &mut acc {
            let l = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if l > 1e-12 {
                *n = [n[0] / l, n[1] / l, n[2] / l];
            } else {
                *n = [0.0, 0.0, 1.0];
            }
        }
        self.normals = Some(acc);
    }
}

fn face_normal_raw(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ]
}

// Corner k of the cell at (x,y,z) lives at (x,y,z) + CORNER_OFFSETS[k];
// EDGE_CORNERS pairs corner indices, EDGE_TABLE flags crossed edges per
// configuration, and TRIANGLE_TABLE lists edge triples terminated by -1.
const CORNER_OFFSETS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGE_CORNERS: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

const EDGE_TABLE: [u16; 256] = [
    0x0, 0x109, 0x203, 0x30a, 0x406, 0x50f, 0x605, 0x70c,
    0x80c, 0x905, 0xa0f, 0xb06, 0xc0a, 0xd03, 0xe09, 0xf00,
    0x190, 0x99, 0x393, 0x29a, 0x596, 0x49f, 0x795, 0x69c,
    0x99c, 0x895, 0xb9f, 0xa96, 0xd9a, 0xc93, 0xf99, 0xe90,
    0x230, 0x339, 0x33, 0x13a, 0x636, 0x73f, 0x435, 0x53c,
    0xa3c, 0xb35, 0x83f, 0x936, 0xe3a, 0xf33, 0xc39, 0xd30,
    0x3a0, 0x2a9, 0x1a3, 0xaa, 0x7a6, 0x6af, 0x5a5, 0x4ac,
    0xbac, 0xaa5, 0x9af, 0x8a6, 0xfaa, 0xea3, 0xda9, 0xca0,
    0x460, 0x569, 0x663, 0x76a, 0x66, 0x16f, 0x265, 0x36c,
    0xc6c, 0xd65, 0xe6f, 0xf66, 0x86a, 0x963, 0xa69, 0xb60,
    0x5f0, 0x4f9, 0x7f3, 0x6fa, 0x1f6, 0xff, 0x3f5, 0x2fc,
    0xdfc, 0xcf5, 0xfff, 0xef6, 0x9fa, 0x8f3, 0xbf9, 0xaf0,
    0x650, 0x759, 0x453, 0x55a, 0x256, 0x35f, 0x55, 0x15c,
    0xe5c, 0xf55, 0xc5f, 0xd56, 0xa5a, 0xb53, 0x859, 0x950,
    0x7c0, 0x6c9, 0x5c3, 0x4ca, 0x3c6, 0x2cf, 0x1c5, 0xcc,
    0xfcc, 0xec5, 0xdcf, 0xcc6, 0xbca, 0xac3, 0x9c9, 0x8c0,
    0x8c0, 0x9c9, 0xac3, 0xbca, 0xcc6, 0xdcf, 0xec5, 0xfcc,
    0xcc, 0x1c5, 0x2cf, 0x3c6, 0x4ca, 0x5c3, 0x6c9, 0x7c0,
    0x950, 0x859, 0xb53, 0xa5a, 0xd56, 0xc5f, 0xf55, 0xe5c,
    0x15c, 0x55, 0x35f, 0x256, 0x55a, 0x453, 0x759, 0x650,
    0xaf0, 0xbf9, 0x8f3, 0x9fa, 0xef6, 0xfff, 0xcf5, 0xdfc,
    0x2fc, 0x3f5, 0xff, 0x1f6, 0x6fa, 0x7f3, 0x4f9, 0x5f0,
    0xb60, 0xa69, 0x963, 0x86a, 0xf66, 0xe6f, 0xd65, 0xc6c,
    0x36c, 0x265, 0x16f, 0x66, 0x76a, 0x663, 0x569, 0x460,
    0xca0, 0xda9, 0xea3, 0xfaa, 0x8a6, 0x9af, 0xaa5, 0xbac,
    0x4ac, 0x5a5, 0x6af, 0x7a6, 0xaa, 0x1a3, 0x2a9, 0x3a0,
    0xd30, 0xc39, 0xf33, 0xe3a, 0x936, 0x83f, 0xb35, 0xa3c,
    0x53c, 0x435, 0x73f, 0x636, 0x13a, 0x33, 0x339, 0x230,
    0xe90, 0xf99, 0xc93, 0xd9a, 0xa96, 0xb9f, 0x895, 0x99c,
    0x69c, 0x795, 0x49f, 0x596, 0x29a, 0x393, 0x99, 0x190,
    0xf00, 0xe09, 0xd03, 0xc0a, 0xb06, 0xa0f, 0x905, 0x80c,
    0x70c, 0x605, 0x50f, 0x406, 0x30a, 0x203, 0x109, 0x0,
];

const TRIANGLE_TABLE: [[i8; 16]; 256] = [
    [-1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [0, 8, 3, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [0, 1, 9, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [1, 8, 3, 9, 8, 1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [1, 2, 10, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [0, 8, 3, 1, 2, 10, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [9, 2, 10, 0, 2, 9, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [2, 8, 3, 2, 10, 8, 10, 9, 8, -1, -1, -1, -1, -1, -1, -1],
    [3, 11, 2, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [0, 11, 2, 8, 11, 0, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [1, 9, 0, 2, 3, 11, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [1, 11, 2, 1, 9, 11, 9, 8, 11, -1, -1, -1, -1, -1, -1, -1],
    [3, 10, 1, 11, 10, 3, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [0, 10, 1, 0, 8, 10, 8, 11, 10, -1, -1, -1, -1, -1, -1, -1],
    [3, 9, 0, 3, 11, 9, 11, 10, 9, -1, -1, -1, -1, -1, -1, -1],
    [9, 8, 10, 10, 8, 11, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [4, 7, 8, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [4, 3, 0, 7, 3, 4, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [0, 1, 9, 8, 4, 7, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [4, 1, 9, 4, 7, 1, 7, 3, 1, -1, -1, -1, -1, -1, -1, -1],
    [1, 2, 10, 8, 4, 7, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [3, 4, 7, 3, 0, 4, 1, 2, 10, -1, -1, -1, -1, -1, -1, -1],
    [9, 2, 10, 9, 0, 2, 8, 4, 7, -1, -1, -1, -1, -1, -1, -1],
    [2, 10, 9, 2, 9, 7, 2, 7, 3, 7, 9, 4, -1, -1, -1, -1],
    [8, 4, 7, 3, 11, 2, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [11, 4, 7, 11, 2, 4, 2, 0, 4, -1, -1, -1, -1, -1, -1, -1],
    [9, 0, 1, 8, 4, 7, 2, 3, 11, -1, -1, -1, -1, -1, -1, -1],
    [4, 7, 11, 9, 4, 11, 9, 11, 2, 9, 2, 1, -1, -1, -1, -1],
    [3, 10, 1, 3, 11, 10, 7, 8, 4, -1, -1, -1, -1, -1, -1, -1],
    [1, 11, 10, 1, 4, 11, 1, 0, 4, 7, 11, 4, -1, -1, -1, -1],
    [4, 7, 8, 9, 0, 11, 9, 11, 10, 11, 0, 3, -1, -1, -1, -1],
    [4, 7, 11, 4, 11, 9, 9, 11, 10, -1, -1, -1, -1, -1, -1, -1],
    [9, 5, 4, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [9, 5, 4, 0, 8, 3, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [0, 5, 4, 1, 5, 0, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [8, 5, 4, 8, 3, 5, 3, 1, 5, -1, -1, -1, -1, -1, -1, -1],
    [1, 2, 10, 9, 5, 4, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [3, 0, 8, 1, 2, 10, 4, 9, 5, -1, -1, -1, -1, -1, -1, -1],
    [5, 2, 10, 5, 4, 2, 4, 0, 2, -1, -1, -1, -1, -1, -1, -1],
    [2, 10, 5, 3, 2, 5, 3, 5, 4, 3, 4, 8, -1, -1, -1, -1],
    [9, 5, 4, 2, 3, 11, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [0, 11, 2, 0, 8, 11, 4, 9, 5, -1, -1, -1, -1, -1, -1, -1],
    [0, 5, 4, 0, 1, 5, 2, 3, 11, -1, -1, -1, -1, -1, -1, -1],
    [2, 1, 5, 2, 5, 8, 2, 8, 11, 4, 8, 5, -1, -1, -1, -1],
    [10, 3, 11, 10, 1, 3, 9, 5, 4, -1, -1, -1, -1, -1, -1, -1],
    [4, 9, 5, 0, 8, 1, 8, 10, 1, 8, 11, 10, -1, -1, -1, -1],
    [5, 4, 0, 5, 0, 11, 5, 11, 10, 11, 0, 3, -1, -1, -1, -1],
    [5, 4, 8, 5, 8, 10, 10, 8, 11, -1, -1, -1, -1, -1, -1, -1],
    [9, 7, 8, 5, 7, 9, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [9, 3, 0, 9, 5, 3, 5, 7, 3, -1, -1, -1, -1, -1, -1, -1],
    [0, 7, 8, 0, 1, 7, 1, 5, 7, -1, -1, -1, -1, -1, -1, -1],
    [1, 5, 3, 3, 5, 7, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [9, 7, 8, 9, 5, 7, 10, 1, 2, -1, -1, -1, -1, -1, -1, -1],
    [10, 1, 2, 9, 5, 0, 5, 3, 0, 5, 7, 3, -1, -1, -1, -1],
    [8, 0, 2, 8, 2, 5, 8, 5, 7, 10, 5, 2, -1, -1, -1, -1],
    [2, 10, 5, 2, 5, 3, 3, 5, 7, -1, -1, -1, -1, -1, -1, -1],
    [7, 9, 5, 7, 8, 9, 3, 11, 2, -1, -1, -1, -1, -1, -1, -1],
    [9, 5, 7, 9, 7, 2, 9, 2, 0, 2, 7, 11, -1, -1, -1, -1],
    [2, 3, 11, 0, 1, 8, 1, 7, 8, 1, 5, 7, -1, -1, -1, -1],
    [11, 2, 1, 11, 1, 7, 7, 1, 5, -1, -1, -1, -1, -1, -1, -1],
    [9, 5, 8, 8, 5, 7, 10, 1, 3, 10, 3, 11, -1, -1, -1, -1],
    [5, 7, 0, 5, 0, 9, 7, 11, 0, 1, 0, 10, 11, 10, 0, -1],
    [11, 10, 0, 11, 0, 3, 10, 5, 0, 8, 0, 7, 5, 7, 0, -1],
    [11, 10, 5, 7, 11, 5, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [10, 6, 5, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [0, 8, 3, 5, 10, 6, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [9, 0, 1, 5, 10, 6, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [1, 8, 3, 1, 9, 8, 5, 10, 6, -1, -1, -1, -1, -1, -1, -1],
    [1, 6, 5, 2, 6, 1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [1, 6, 5, 1, 2, 6, 3, 0, 8, -1, -1, -1, -1, -1, -1, -1],
    [9, 6, 5, 9, 0, 6, 0, 2, 6, -1, -1, -1, -1, -1, -1, -1],
    [5, 9, 8, 5, 8, 2, 5, 2, 6, 3, 2, 8, -1, -1, -1, -1],
    [2, 3, 11, 10, 6, 5, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [11, 0, 8, 11, 2, 0, 10, 6, 5, -1, -1, -1, -1, -1, -1, -1],
    [0, 1, 9, 2, 3, 11, 5, 10, 6, -1, -1, -1, -1, -1, -1, -1],
    [5, 10, 6, 1, 9, 2, 9, 11, 2, 9, 8, 11, -1, -1, -1, -1],
    [6, 3, 11, 6, 5, 3, 5, 1, 3, -1, -1, -1, -1, -1, -1, -1],
    [0, 8, 11, 0, 11, 5, 0, 5, 1, 5, 11, 6, -1, -1, -1, -1],
    [3, 11, 6, 0, 3, 6, 0, 6, 5, 0, 5, 9, -1, -1, -1, -1],
    [6, 5, 9, 6, 9, 11, 11, 9, 8, -1, -1, -1, -1, -1, -1, -1],
    [5, 10, 6, 4, 7, 8, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [4, 3, 0, 4, 7, 3, 6, 5, 10, -1, -1, -1, -1, -1, -1, -1],
    [1, 9, 0, 5, 10, 6, 8, 4, 7, -1, -1, -1, -1, -1, -1, -1],
    [10, 6, 5, 1, 9, 7, 1, 7, 3, 7, 9, 4, -1, -1, -1, -1],
    [6, 1, 2, 6, 5, 1, 4, 7, 8, -1, -1, -1, -1, -1, -1, -1],
    [1, 2, 5, 5, 2, 6, 3, 0, 4, 3, 4, 7, -1, -1, -1, -1],
    [8, 4, 7, 9, 0, 5, 0, 6, 5, 0, 2, 6, -1, -1, -1, -1],
    [7, 3, 9, 7, 9, 4, 3, 2, 9, 5, 9, 6, 2, 6, 9, -1],
    [3, 11, 2, 7, 8, 4, 10, 6, 5, -1, -1, -1, -1, -1, -1, -1],
    [5, 10, 6, 4, 7, 2, 4, 2, 0, 2, 7, 11, -1, -1, -1, -1],
    [0, 1, 9, 4, 7, 8, 2, 3, 11, 5, 10, 6, -1, -1, -1, -1],
    [9, 2, 1, 9, 11, 2, 9, 4, 11, 7, 11, 4, 5, 10, 6, -1],
    [8, 4, 7, 3, 11, 5, 3, 5, 1, 5, 11, 6, -1, -1, -1, -1],
    [5, 1, 11, 5, 11, 6, 1, 0, 11, 7, 11, 4, 0, 4, 11, -1],
    [0, 5, 9, 0, 6, 5, 0, 3, 6, 11, 6, 3, 8, 4, 7, -1],
    [6, 5, 9, 6, 9, 11, 4, 7, 9, 7, 11, 9, -1, -1, -1, -1],
    [10, 4, 9, 6, 4, 10, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [4, 10, 6, 4, 9, 10, 0, 8, 3, -1, -1, -1, -1, -1, -1, -1],
    [10, 0, 1, 10, 6, 0, 6, 4, 0, -1, -1, -1, -1, -1, -1, -1],
    [8, 3, 1, 8, 1, 6, 8, 6, 4, 6, 1, 10, -1, -1, -1, -1],
    [1, 4, 9, 1, 2, 4, 2, 6, 4, -1, -1, -1, -1, -1, -1, -1],
    [3, 0, 8, 1, 2, 9, 2, 4, 9, 2, 6, 4, -1, -1, -1, -1],
    [0, 2, 4, 4, 2, 6, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [8, 3, 2, 8, 2, 4, 4, 2, 6, -1, -1, -1, -1, -1, -1, -1],
    [10, 4, 9, 10, 6, 4, 11, 2, 3, -1, -1, -1, -1, -1, -1, -1],
    [0, 8, 2, 2, 8, 11, 4, 9, 10, 4, 10, 6, -1, -1, -1, -1],
    [3, 11, 2, 0, 1, 6, 0, 6, 4, 6, 1, 10, -1, -1, -1, -1],
    [6, 4, 1, 6, 1, 10, 4, 8, 1, 2, 1, 11, 8, 11, 1, -1],
    [9, 6, 4, 9, 3, 6, 9, 1, 3, 11, 6, 3, -1, -1, -1, -1],
    [8, 11, 1, 8, 1, 0, 11, 6, 1, 9, 1, 4, 6, 4, 1, -1],
    [3, 11, 6, 3, 6, 0, 0, 6, 4, -1, -1, -1, -1, -1, -1, -1],
    [6, 4, 8, 11, 6, 8, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [7, 10, 6, 7, 8, 10, 8, 9, 10, -1, -1, -1, -1, -1, -1, -1],
    [0, 7, 3, 0, 10, 7, 0, 9, 10, 6, 7, 10, -1, -1, -1, -1],
    [10, 6, 7, 1, 10, 7, 1, 7, 8, 1, 8, 0, -1, -1, -1, -1],
    [10, 6, 7, 10, 7, 1, 1, 7, 3, -1, -1, -1, -1, -1, -1, -1],
    [1, 2, 6, 1, 6, 8, 1, 8, 9, 8, 6, 7, -1, -1, -1, -1],
    [2, 6, 9, 2, 9, 1, 6, 7, 9, 0, 9, 3, 7, 3, 9, -1],
    [7, 8, 0, 7, 0, 6, 6, 0, 2, -1, -1, -1, -1, -1, -1, -1],
    [7, 3, 2, 6, 7, 2, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [2, 3, 11, 10, 6, 8, 10, 8, 9, 8, 6, 7, -1, -1, -1, -1],
    [2, 0, 7, 2, 7, 11, 0, 9, 7, 6, 7, 10, 9, 10, 7, -1],
    [1, 8, 0, 1, 7, 8, 1, 10, 7, 6, 7, 10, 2, 3, 11, -1],
    [11, 2, 1, 11, 1, 7, 10, 6, 1, 6, 7, 1, -1, -1, -1, -1],
    [8, 9, 6, 8, 6, 7, 9, 1, 6, 11, 6, 3, 1, 3, 6, -1],
    [0, 9, 1, 11, 6, 7, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [7, 8, 0, 7, 0, 6, 3, 11, 0, 11, 6, 0, -1, -1, -1, -1],
    [7, 11, 6, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [7, 6, 11, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [3, 0, 8, 11, 7, 6, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [0, 1, 9, 11, 7, 6, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [8, 1, 9, 8, 3, 1, 11, 7, 6, -1, -1, -1, -1, -1, -1, -1],
    [10, 1, 2, 6, 11, 7, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [1, 2, 10, 3, 0, 8, 6, 11, 7, -1, -1, -1, -1, -1, -1, -1],
    [2, 9, 0, 2, 10, 9, 6, 11, 7, -1, -1, -1, -1, -1, -1, -1],
    [6, 11, 7, 2, 10, 3, 10, 8, 3, 10, 9, 8, -1, -1, -1, -1],
    [7, 2, 3, 6, 2, 7, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [7, 0, 8, 7, 6, 0, 6, 2, 0, -1, -1, -1, -1, -1, -1, -1],
    [2, 7, 6, 2, 3, 7, 0, 1, 9, -1, -1, -1, -1, -1, -1, -1],
    [1, 6, 2, 1, 8, 6, 1, 9, 8, 8, 7, 6, -1, -1, -1, -1],
    [10, 7, 6, 10, 1, 7, 1, 3, 7, -1, -1, -1, -1, -1, -1, -1],
    [10, 7, 6, 1, 7, 10, 1, 8, 7, 1, 0, 8, -1, -1, -1, -1],
    [0, 3, 7, 0, 7, 10, 0, 10, 9, 6, 10, 7, -1, -1, -1, -1],
    [7, 6, 10, 7, 10, 8, 8, 10, 9, -1, -1, -1, -1, -1, -1, -1],
    [6, 8, 4, 11, 8, 6, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [3, 6, 11, 3, 0, 6, 0, 4, 6, -1, -1, -1, -1, -1, -1, -1],
    [8, 6, 11, 8, 4, 6, 9, 0, 1, -1, -1, -1, -1, -1, -1, -1],
    [9, 4, 6, 9, 6, 3, 9, 3, 1, 11, 3, 6, -1, -1, -1, -1],
    [6, 8, 4, 6, 11, 8, 2, 10, 1, -1, -1, -1, -1, -1, -1, -1],
    [1, 2, 10, 3, 0, 11, 0, 6, 11, 0, 4, 6, -1, -1, -1, -1],
    [4, 11, 8, 4, 6, 11, 0, 2, 9, 2, 10, 9, -1, -1, -1, -1],
    [10, 9, 3, 10, 3, 2, 9, 4, 3, 11, 3, 6, 4, 6, 3, -1],
    [8, 2, 3, 8, 4, 2, 4, 6, 2, -1, -1, -1, -1, -1, -1, -1],
    [0, 4, 2, 4, 6, 2, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [1, 9, 0, 2, 3, 4, 2, 4, 6, 4, 3, 8, -1, -1, -1, -1],
    [1, 9, 4, 1, 4, 2, 2, 4, 6, -1, -1, -1, -1, -1, -1, -1],
    [8, 1, 3, 8, 6, 1, 8, 4, 6, 6, 10, 1, -1, -1, -1, -1],
    [10, 1, 0, 10, 0, 6, 6, 0, 4, -1, -1, -1, -1, -1, -1, -1],
    [4, 6, 3, 4, 3, 8, 6, 10, 3, 0, 3, 9, 10, 9, 3, -1],
    [10, 9, 4, 6, 10, 4, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [4, 9, 5, 7, 6, 11, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [0, 8, 3, 4, 9, 5, 11, 7, 6, -1, -1, -1, -1, -1, -1, -1],
    [5, 0, 1, 5, 4, 0, 7, 6, 11, -1, -1, -1, -1, -1, -1, -1],
    [11, 7, 6, 8, 3, 4, 3, 5, 4, 3, 1, 5, -1, -1, -1, -1],
    [9, 5, 4, 10, 1, 2, 7, 6, 11, -1, -1, -1, -1, -1, -1, -1],
    [6, 11, 7, 1, 2, 10, 0, 8, 3, 4, 9, 5, -1, -1, -1, -1],
    [7, 6, 11, 5, 4, 10, 4, 2, 10, 4, 0, 2, -1, -1, -1, -1],
    [3, 4, 8, 3, 5, 4, 3, 2, 5, 10, 5, 2, 11, 7, 6, -1],
    [7, 2, 3, 7, 6, 2, 5, 4, 9, -1, -1, -1, -1, -1, -1, -1],
    [9, 5, 4, 0, 8, 6, 0, 6, 2, 6, 8, 7, -1, -1, -1, -1],
    [3, 6, 2, 3, 7, 6, 1, 5, 0, 5, 4, 0, -1, -1, -1, -1],
    [6, 2, 8, 6, 8, 7, 2, 1, 8, 4, 8, 5, 1, 5, 8, -1],
    [9, 5, 4, 10, 1, 6, 1, 7, 6, 1, 3, 7, -1, -1, -1, -1],
    [1, 6, 10, 1, 7, 6, 1, 0, 7, 8, 7, 0, 9, 5, 4, -1],
    [4, 0, 10, 4, 10, 5, 0, 3, 10, 6, 10, 7, 3, 7, 10, -1],
    [7, 6, 10, 7, 10, 8, 5, 4, 10, 4, 8, 10, -1, -1, -1, -1],
    [6, 9, 5, 6, 11, 9, 11, 8, 9, -1, -1, -1, -1, -1, -1, -1],
    [3, 6, 11, 0, 6, 3, 0, 5, 6, 0, 9, 5, -1, -1, -1, -1],
    [0, 11, 8, 0, 5, 11, 0, 1, 5, 5, 6, 11, -1, -1, -1, -1],
    [6, 11, 3, 6, 3, 5, 5, 3, 1, -1, -1, -1, -1, -1, -1, -1],
    [1, 2, 10, 9, 5, 11, 9, 11, 8, 11, 5, 6, -1, -1, -1, -1],
    [0, 11, 3, 0, 6, 11, 0, 9, 6, 5, 6, 9, 1, 2, 10, -1],
    [11, 8, 5, 11, 5, 6, 8, 0, 5, 10, 5, 2, 0, 2, 5, -1],
    [6, 11, 3, 6, 3, 5, 2, 10, 3, 10, 5, 3, -1, -1, -1, -1],
    [5, 8, 9, 5, 2, 8, 5, 6, 2, 3, 8, 2, -1, -1, -1, -1],
    [9, 5, 6, 9, 6, 0, 0, 6, 2, -1, -1, -1, -1, -1, -1, -1],
    [1, 5, 8, 1, 8, 0, 5, 6, 8, 3, 8, 2, 6, 2, 8, -1],
    [1, 5, 6, 2, 1, 6, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [1, 3, 6, 1, 6, 10, 3, 8, 6, 5, 6, 9, 8, 9, 6, -1],
    [10, 1, 0, 10, 0, 6, 9, 5, 0, 5, 6, 0, -1, -1, -1, -1],
    [0, 3, 8, 5, 6, 10, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [10, 5, 6, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [11, 5, 10, 7, 5, 11, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [11, 5, 10, 11, 7, 5, 8, 3, 0, -1, -1, -1, -1, -1, -1, -1],
    [5, 11, 7, 5, 10, 11, 1, 9, 0, -1, -1, -1, -1, -1, -1, -1],
    [10, 7, 5, 10, 11, 7, 9, 8, 1, 8, 3, 1, -1, -1, -1, -1],
    [11, 1, 2, 11, 7, 1, 7, 5, 1, -1, -1, -1, -1, -1, -1, -1],
    [0, 8, 3, 1, 2, 7, 1, 7, 5, 7, 2, 11, -1, -1, -1, -1],
    [9, 7, 5, 9, 2, 7, 9, 0, 2, 2, 11, 7, -1, -1, -1, -1],
    [7, 5, 2, 7, 2, 11, 5, 9, 2, 3, 2, 8, 9, 8, 2, -1],
    [2, 5, 10, 2, 3, 5, 3, 7, 5, -1, -1, -1, -1, -1, -1, -1],
    [8, 2, 0, 8, 5, 2, 8, 7, 5, 10, 2, 5, -1, -1, -1, -1],
    [9, 0, 1, 5, 10, 3, 5, 3, 7, 3, 10, 2, -1, -1, -1, -1],
    [9, 8, 2, 9, 2, 1, 8, 7, 2, 10, 2, 5, 7, 5, 2, -1],
    [1, 3, 5, 3, 7, 5, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [0, 8, 7, 0, 7, 1, 1, 7, 5, -1, -1, -1, -1, -1, -1, -1],
    [9, 0, 3, 9, 3, 5, 5, 3, 7, -1, -1, -1, -1, -1, -1, -1],
    [9, 8, 7, 5, 9, 7, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [5, 8, 4, 5, 10, 8, 10, 11, 8, -1, -1, -1, -1, -1, -1, -1],
    [5, 0, 4, 5, 11, 0, 5, 10, 11, 11, 3, 0, -1, -1, -1, -1],
    [0, 1, 9, 8, 4, 10, 8, 10, 11, 10, 4, 5, -1, -1, -1, -1],
    [10, 11, 4, 10, 4, 5, 11, 3, 4, 9, 4, 1, 3, 1, 4, -1],
    [2, 5, 1, 2, 8, 5, 2, 11, 8, 4, 5, 8, -1, -1, -1, -1],
    [0, 4, 11, 0, 11, 3, 4, 5, 11, 2, 11, 1, 5, 1, 11, -1],
    [0, 2, 5, 0, 5, 9, 2, 11, 5, 4, 5, 8, 11, 8, 5, -1],
    [9, 4, 5, 2, 11, 3, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [2, 5, 10, 3, 5, 2, 3, 4, 5, 3, 8, 4, -1, -1, -1, -1],
    [5, 10, 2, 5, 2, 4, 4, 2, 0, -1, -1, -1, -1, -1, -1, -1],
    [3, 10, 2, 3, 5, 10, 3, 8, 5, 4, 5, 8, 0, 1, 9, -1],
    [5, 10, 2, 5, 2, 4, 1, 9, 2, 9, 4, 2, -1, -1, -1, -1],
    [8, 4, 5, 8, 5, 3, 3, 5, 1, -1, -1, -1, -1, -1, -1, -1],
    [0, 4, 5, 1, 0, 5, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [8, 4, 5, 8, 5, 3, 9, 0, 5, 0, 3, 5, -1, -1, -1, -1],
    [9, 4, 5, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [4, 11, 7, 4, 9, 11, 9, 10, 11, -1, -1, -1, -1, -1, -1, -1],
    [0, 8, 3, 4, 9, 7, 9, 11, 7, 9, 10, 11, -1, -1, -1, -1],
    [1, 10, 11, 1, 11, 4, 1, 4, 0, 7, 4, 11, -1, -1, -1, -1],
    [3, 1, 4, 3, 4, 8, 1, 10, 4, 7, 4, 11, 10, 11, 4, -1],
    [4, 11, 7, 9, 11, 4, 9, 2, 11, 9, 1, 2, -1, -1, -1, -1],
    [9, 7, 4, 9, 11, 7, 9, 1, 11, 2, 11, 1, 0, 8, 3, -1],
    [11, 7, 4, 11, 4, 2, 2, 4, 0, -1, -1, -1, -1, -1, -1, -1],
    [11, 7, 4, 11, 4, 2, 8, 3, 4, 3, 2, 4, -1, -1, -1, -1],
    [2, 9, 10, 2, 7, 9, 2, 3, 7, 7, 4, 9, -1, -1, -1, -1],
    [9, 10, 7, 9, 7, 4, 10, 2, 7, 8, 7, 0, 2, 0, 7, -1],
    [3, 7, 10, 3, 10, 2, 7, 4, 10, 1, 10, 0, 4, 0, 10, -1],
    [1, 10, 2, 8, 7, 4, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [4, 9, 1, 4, 1, 7, 7, 1, 3, -1, -1, -1, -1, -1, -1, -1],
    [4, 9, 1, 4, 1, 7, 0, 8, 1, 8, 7, 1, -1, -1, -1, -1],
    [4, 0, 3, 7, 4, 3, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [4, 8, 7, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [9, 10, 8, 10, 11, 8, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [3, 0, 9, 3, 9, 11, 11, 9, 10, -1, -1, -1, -1, -1, -1, -1],
    [0, 1, 10, 0, 10, 8, 8, 10, 11, -1, -1, -1, -1, -1, -1, -1],
    [3, 1, 10, 11, 3, 10, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [1, 2, 11, 1, 11, 9, 9, 11, 8, -1, -1, -1, -1, -1, -1, -1],
    [3, 0, 9, 3, 9, 11, 1, 2, 9, 2, 11, 9, -1, -1, -1, -1],
    [0, 2, 11, 8, 0, 11, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [3, 2, 11, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [2, 3, 8, 2, 8, 10, 10, 8, 9, -1, -1, -1, -1, -1, -1, -1],
    [9, 10, 2, 0, 9, 2, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [2, 3, 8, 2, 8, 10, 0, 1, 8, 1, 10, 8, -1, -1, -1, -1],
    [1, 10, 2, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [1, 3, 8, 9, 1, 8, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [0, 9, 1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [0, 3, 8, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [-1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
];

/// Samples a time-slice SDF onto a G^3 grid over [box_min, box_max]; index
/// order is (x*G + y)*G + z.
pub fn sdf_grid(
    g: usize,
    box_min: [f64; 3],
    box_max: [f64; 3],
    mut f: impl FnMut([f64; 3]) -> f64,
) -> Tensor {
    assert!(g >= 2);
    let coord = |i: usize, axis: usize| {
        box_min[axis] + (box_max[axis] - box_min[axis]) * i as f64 / (g - 1) as f64
    };
    let mut data = Vec::with_capacity(g * g * g);
    for x in 0..g {
        for y in 0..g {
            for z in 0..g {
                data.push(f([coord(x, 0), coord(y, 1), coord(z, 2)]));
            }
        }
    }
    Tensor::new(vec![g, g, g], data).unwrap()
}

/// Standard 256-case marching cubes with linear edge interpolation.
/// Crossing vertices are deduplicated by global edge key, so meshes of
/// surfaces strictly inside the box are watertight. An all-positive or
/// all-negative grid yields an empty mesh.
pub fn marching_cubes(
    grid: &Tensor,
    iso: f64,
    box_min: [f64; 3],
    box_max: [f64; 3],
) -> Result<TriMesh> {
    if grid.rank() != 3 {
        return Err(Error::shape("marching_cubes", "[GxGxG]", format!("{:?}", grid.shape())));
    }
    let g = grid.shape()[0];
    if grid.shape()[1] != g || grid.shape()[2] != g || g < 2 {
        return Err(Error::shape("marching_cubes", "cubic grid, G >= 2", format!("{:?}", grid.shape())));
    }
    if !grid.data().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("marching_cubes grid".into()));
    }
    let val = |x: usize, y: usize, z: usize| grid.data()[(x * g + y) * g + z];
    let world = |x: usize, y: usize, z: usize| {
        let c = |i: usize, axis: usize| {
            box_min[axis] + (box_max[axis] - box_min[axis]) * i as f64 / (g - 1) as f64
        };
        [c(x, 0), c(y, 1), c(z, 2)]
    };
    let corner_id = |x: usize, y: usize, z: usize| ((x * g + y) * g + z) as u64;
    let mut mesh = TriMesh::default();
    let mut edge_cache: HashMap<(u64, u64), usize> = HashMap::new();
    for x in 0..g - 1 {
        for y in 0..g - 1 {
            for z in 0..g - 1 {
                let corners: Vec<[usize; 3]> = CORNER_OFFSETS
                    .iter()
                    .map(|o| [x + o[0], y + o[1], z + o[2]])
                    .collect();
                let values: Vec<f64> = corners.iter().map(|c| val(c[0], c[1], c[2])).collect();
                let mut case = 0usize;
                for (i, &v) in values.iter().enumerate() {
                    if v < iso {
                        case |= 1 << i;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut edge_verts = [usize::MAX; 12];
                for (e, pair) in EDGE_CORNERS.iter().enumerate() {
                    if EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    let (a, b) = (pair[0], pair[1]);
                    let (ca, cb) = (corners[a], corners[b]);
                    let ida = corner_id(ca[0], ca[1], ca[2]);
                    let idb = corner_id(cb[0], cb[1], cb[2]);
                    let key = (ida.min(idb), ida.max(idb));
                    let vi = *edge_cache.entry(key).or_insert_with(|| {
                        // interpolate in a fixed corner order so shared
                        // edges produce bitwise-identical vertices
                        let (v1, v2, p1, p2) = if ida < idb {
                            (values[a], values[b], world(ca[0], ca[1], ca[2]), world(cb[0], cb[1], cb[2]))
                        } else {
                            (values[b], values[a], world(cb[0], cb[1], cb[2]), world(ca[0], ca[1], ca[2]))
                        };
                        let t = if (v2 - v1).abs() < 1e-12 {
                            0.5
                        } else {
                            ((iso - v1) / (v2 - v1)).clamp(0.0, 1.0)
                        };
                        let p = [
                            p1[0] + t * (p2[0] - p1[0]),
                            p1[1] + t * (p2[1] - p1[1]),
                            p1[2] + t * (p2[2] - p1[2]),
                        ];
                        mesh.vertices.push(p);
                        mesh.vertices.len() - 1
                    });
                    edge_verts[e] = vi;
                }
                let tri = &TRIANGLE_TABLE[case];
                let mut i = 0;
                while i + 2 < tri.len() && tri[i] >= 0 {
                    let t = [
                        edge_verts[tri[i] as usize],
                        edge_verts[tri[i + 1] as usize],
                        edge_verts[tri[i + 2] as usize],
                    ];
                    // drop triangles collapsed by vertex dedup
                    if t[0] != t[1] && t[1] != t[2] && t[0] != t[2] {
                        mesh.triangles.push(t);
                    }
                    i += 3;
                }
            }
        }
    }
    Ok(mesh)
}

// ---------------------------------------------------------------------------
// nearest neighbors

/// Exact nearest-neighbor distances from each point in `from` to the set
/// `to`, accelerated by a uniform grid hash; results are identical to the
/// brute-force scan because candidate rings are expanded until their lower
/// bound exceeds the best distance found.
pub fn nn_dists(from: &[[f64; 3]], to: &[[f64; 3]]) -> Result<Vec<f64>> {
    if to.is_empty() || from.is_empty() {
        return Err(Error::InvalidArgument("empty point set".into()));
    }
    if to.len() < 32 {
        return Ok(from.iter().map(|p| nn_brute(*p, to)).collect());
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in to {
        for c in 0..3 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let extent = (0..3).map(|c| hi[c] - lo[c]).fold(0.0f64, f64::max);
    let cell = (extent / (to.len() as f64).cbrt()).max(1e-12);
    let key = |p: &[f64; 3]| {
        [
            ((p[0] - lo[0]) / cell).floor() as i64,
            ((p[1] - lo[1]) / cell).floor() as i64,
            ((p[2] - lo[2]) / cell).floor() as i64,
        ]
    };
    let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in to.iter().enumerate() {
        cells.entry(key(p)).or_default().push(i);
    }
    let dist = |a: [f64; 3], b: [f64; 3]| {
        let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    };
    Ok(from
        .iter()
        .map(|p| {
            let k = key(p);
            let mut best = f64::INFINITY;
            let mut ring = 0i64;
            loop {
                // points in cells at Chebyshev ring r are at least
                // (r-1)*cell away from p
                if ring > 1 && (ring - 1) as f64 * cell > best {
                    break;
                }
                let mut any_cell = false;
                for dx in -ring..=ring {
                    for dy in -ring..=ring {
                        for dz in -ring..=ring {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                                continue;
                            }
                            if let Some(ids) = cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                                any_cell = true;
                                for &i in ids {
                                    best = best.min(dist(*p, to[i]));
                                }
                            }
                        }
                    }
                }
                let _ = any_cell;
                ring += 1;
                // bail out once the ring is past the whole cloud
                if ring as f64 * cell > extent + best + cell {
                    if best.is_finite() {
                        break;
                    }
                }
            }
            best
        })
        .collect())
}

/// Reference scan; public so callers can cross-check the accelerated path.
pub fn nn_brute(p: [f64; 3], to: &[[f64; 3]]) -> f64 {
    to.iter()
        .map(|q| {
            let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric mean nearest-neighbor Euclidean distance:
/// 0.5 (mean_a min_b |a-b| + mean_b min_a |b-a|). Report x10^3 for tables.
pub fn chamfer_l1(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    let da = nn_dists(a, b)?;
    let db = nn_dists(b, a)?;
    let ma = da.iter().sum::<f64>() / da.len() as f64;
    let mb = db.iter().sum::<f64>() / db.len() as f64;
    Ok(0.5 * (ma + mb))
}

/// Symmetric mean normal misalignment 0.5 (mean_a (1 - |n.n_nn|) + sym);
/// lower is better. Non-unit normals are normalized with a warning. Report
/// x10^2 for tables.
pub fn normal_consistency(
    a: &[([f64; 3], [f64; 3])],
    b: &[([f64; 3], [f64; 3])],
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("empty point set".into()));
    }
    let sanitize = |pts: &[([f64; 3], [f64; 3])]| -> Vec<([f64; 3], [f64; 3])> {
        let mut warned = false;
        pts.iter()
            .map(|&(p, n)| {
                let l = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if (l - 1.0).abs() > 1e-6 {
                    if !warned {
                        eprintln!("normal_consistency: normalizing non-unit normals");
                        warned = true;
                    }
                    if l > 1e-12 {
                        return (p, [n[0] / l, n[1] / l, n[2] / l]);
                    }
                }
                (p, n)
            })
            .collect()
    };
    let a = sanitize(a);
    let b = sanitize(b);
    let side = |from: &[([f64; 3], [f64; 3])], to: &[([f64; 3], [f64; 3])]| -> f64 {
        let acc: f64 = from
            .iter()
            .map(|&(p, n)| {
                let mut best = f64::INFINITY;
                let mut bn = [0.0; 3];
                for &(q, qn) in to {
                    let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                    let dd = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                    if dd < best {
                        best = dd;
                        bn = qn;
                    }
                }
                1.0 - (n[0] * bn[0] + n[1] * bn[1] + n[2] * bn[2]).abs()
            })
            .sum();
        acc / from.len() as f64
    };
    Ok(0.5 * (side(&a, &b) + side(&b, &a)))
}

/// 10 log10(peak^2 / MSE) in dB; infinite for an exact match.
pub fn psnr(pred: &Tensor, target: &Tensor, peak: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "psnr",
            format!("{:?}", target.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let mse = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Area-weighted point sample of a mesh surface with face normals.
pub fn sample_mesh_points<R: Rng>(
    mesh: &TriMesh,
    n: usize,
    rng: &mut R,
) -> Result<Vec<([f64; 3], [f64; 3])>> {
    if mesh.triangles.is_empty() {
        return Err(Error::InvalidArgument("cannot sample an empty mesh".into()));
    }
    let mut cum = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    let mut raw_normals = Vec::with_capacity(mesh.triangles.len());
    for t in &mesh.triangles {
        let nr = face_normal_raw(
            mesh.vertices[t[0]],
            mesh.vertices[t[1]],
            mesh.vertices[t[2]],
        );
        let area2 = (nr[0] * nr[0] + nr[1] * nr[1] + nr[2] * nr[2]).sqrt();
        total += 0.5 * area2;
        cum.push(total);
        let l = area2.max(1e-300);
        raw_normals.push([nr[0] / l, nr[1] / l, nr[2] / l]);
    }
    if total <= 0.0 {
        return Err(Error::InvalidArgument("mesh has zero area".into()));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let pick = rng.gen_range(0.0..total);
        let ti = cum.partition_point(|&c| c <= pick).min(cum.len() - 1);
        let t = &mesh.triangles[ti];
        let (a, b, c) = (
            mesh.vertices[t[0]],
            mesh.vertices[t[1]],
            mesh.vertices[t[2]],
        );
        let (mut u, mut v): (f64, f64) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        let p = [
            a[0] + u * (b[0] - a[0]) + v * (c[0] - a[0]),
            a[1] + u * (b[1] - a[1]) + v * (c[1] - a[1]),
            a[2] + u * (b[2] - a[2]) + v * (c[2] - a[2]),
        ];
        out.push((p, raw_normals[ti]));
    }
    Ok(out)
}

/// ASCII OBJ with v/f lines, 1-based indices.
pub fn write_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for t in &mesh.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::substream;

    fn sphere_grid(g: usize, r: f64) -> Tensor {
        sdf_grid(g, [-1.0; 3], [1.0; 3], |p| {
            (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - r
        })
    }

    #[test]
    fn constant_grid_gives_empty_mesh() {
        let grid = Tensor::filled(&[4, 4, 4], 1.0);
        let mesh = marching_cubes(&grid, 0.0, [-1.0; 3], [1.0; 3]).unwrap();
        assert!(mesh.is_empty());
        let grid = Tensor::filled(&[4, 4, 4], -1.0);
        assert!(marching_cubes(&grid, 0.0, [-1.0; 3], [1.0; 3])
            .unwrap()
            .is_empty());
    }

    #[test]
    fn sphere_vertex_radii() {
        let g = 64;
        let mesh = marching_cubes(&sphere_grid(g, 0.5), 0.0, [-1.0; 3], [1.0; 3]).unwrap();
        assert!(mesh.vertices.len() > 1000);
        let cell = 2.0 / (g - 1) as f64;
        let tol = 2.0 * cell * 3.0f64.sqrt();
        for v in &mesh.vertices {
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((r - 0.5).abs() < tol, "radius {r}");
        }
    }

    #[test]
    fn plane_mesh_is_planar() {
        let g = 32;
        let grid = sdf_grid(g, [-1.0; 3], [1.0; 3], |p| p[2] - 0.25);
        let mesh = marching_cubes(&grid, 0.0, [-1.0; 3], [1.0; 3]).unwrap();
        assert!(!mesh.is_empty());
        let cell = 2.0 / (g - 1) as f64;
        for v in &mesh.vertices {
            assert!((v[2] - 0.25).abs() < cell);
        }
    }

    #[test]
    fn sphere_mesh_is_watertight() {
        let mesh = marching_cubes(&sphere_grid(32, 0.5), 0.0, [-1.0; 3], [1.0; 3]).unwrap();
        let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &mesh.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *edge_count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        for (&e, &c) in &edge_count {
            assert_eq!(c, 2, "edge {:?} shared by {} triangles", e, c);
        }
    }

    #[test]
    fn chamfer_basics() {
        let a = vec![[0.0, 0.0, 0.0]];
        let b = vec![[3.0, 0.0, 0.0]];
        assert_eq!(chamfer_l1(&a, &a).unwrap(), 0.0);
        assert_eq!(chamfer_l1(&a, &b).unwrap(), 3.0);
        assert_eq!(chamfer_l1(&a, &b).unwrap(), chamfer_l1(&b, &a).unwrap());
    }

    #[test]
    fn chamfer_shifted_sphere_oracle() {
        let mesh = marching_cubes(&sphere_grid(48, 0.5), 0.0, [-1.0; 3], [1.0; 3]).unwrap();
        let mut rng = substream(1, "chamfer");
        // sparse relative to the 0.01 shift, so each point's nearest
        // neighbor in the shifted set is its own translate
        let pts: Vec<[f64; 3]> = sample_mesh_points(&mesh, 2000, &mut rng)
            .unwrap()
            .into_iter()
            .map(|(p, _)| p)
            .collect();
        let shifted: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] + 0.01, p[1], p[2]]).collect();
        let cd = chamfer_l1(&pts, &shifted).unwrap();
        assert!((cd - 0.01).abs() / 0.01 < 0.2, "cd {cd}");
    }

    #[test]
    fn grid_hash_matches_brute_force_exactly() {
        let mut rng = substream(2, "nn");
        use rand::Rng;
        let cloud: Vec<[f64; 3]> = (0..500)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let queries: Vec<[f64; 3]> = (0..200)
            .map(|_| {
                [
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.5..1.5),
                ]
            })
            .collect();
        let fast = nn_dists(&queries, &cloud).unwrap();
        for (q, f) in queries.iter().zip(&fast) {
            assert_eq!(*f, nn_brute(*q, &cloud), "hash and brute force disagree");
        }
    }

    #[test]
    fn normal_consistency_cases() {
        let mesh = marching_cubes(&sphere_grid(32, 0.5), 0.0, [-1.0; 3], [1.0; 3]).unwrap();
        let mut rng = substream(3, "nc");
        let a = sample_mesh_points(&mesh, 2000, &mut rng).unwrap();
        assert!(normal_consistency(&a, &a).unwrap().abs() < 1e-12);
        let flipped: Vec<_> = a
            .iter()
            .map(|&(p, n)| (p, [-n[0], -n[1], -n[2]]))
            .collect();
        assert!(normal_consistency(&a, &flipped).unwrap().abs() < 1e-12);
        // dent the sphere: consistency error grows with dent size
        let dent = |amp: f64| -> f64 {
            let grid = sdf_grid(32, [-1.0; 3], [1.0; 3], |p| {
                let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                r - 0.5 - amp * (8.0 * p[0]).sin() * (8.0 * p[1]).cos()
            });
            let m = marching_cubes(&grid, 0.0, [-1.0; 3], [1.0; 3]).unwrap();
            let mut rng = substream(4, "nc.dent");
            let b = sample_mesh_points(&m, 2000, &mut rng).unwrap();
            normal_consistency(&a, &b).unwrap()
        };
        let small = dent(0.01);
        let large = dent(0.06);
        assert!(small > 0.0);
        assert!(large > small);
    }

    #[test]
    fn psnr_values() {
        let t = Tensor::from_vec(vec![0.5; 16]);
        assert!(psnr(&t, &t, 1.0).unwrap().is_infinite());
        let mut p = t.clone();
        for v in p.data_mut() {
            *v += 0.1; // MSE = 0.01
        }
        assert!((psnr(&p, &t, 1.0).unwrap() - 20.0).abs() < 1e-12);
        // strictly decreasing in MSE
        let mut worse = t.clone();
        for v in worse.data_mut() {
            *v += 0.2;
        }
        assert!(psnr(&worse, &t, 1.0).unwrap() < psnr(&p, &t, 1.0).unwrap());
    }

    #[test]
    fn psnr_matches_two_pass_oracle() {
        let mut rng = substream(5, "psnr");
        let p = Tensor::rand_uniform(&[64], 0.0, 1.0, &mut rng);
        let t = Tensor::rand_uniform(&[64], 0.0, 1.0, &mut rng);
        let mse: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / 64.0;
        let want = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&p, &t, 1.0).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn obj_export_roundtrips_counts() {
        let mesh = marching_cubes(&sphere_grid(16, 0.5), 0.0, [-1.0; 3], [1.0; 3]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        write_obj(&path, &mesh).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let nv = text.lines().filter(|l| l.starts_with("v ")).count();
        let nf = text.lines().filter(|l| l.starts_with("f ")).count();
        assert_eq!(nv, mesh.vertices.len());
        assert_eq!(nf, mesh.triangles.len());
        // indices are 1-based and in range
        for l in text.lines().filter(|l| l.starts_with("f ")) {
            for tok in l.split_whitespace().skip(1) {
                let i: usize = tok.parse().unwrap();
                assert!(i >= 1 && i <= nv);
            }
        }
    }

    #[test]
    fn vertex_normals_point_radially_for_sphere() {
        let mut mesh =
            marching_cubes(&sphere_grid(32, 0.5), 0.0, [-1.0; 3], [1.0; 3]).unwrap();
        mesh.compute_vertex_normals();
        let normals = mesh.normals.as_ref().unwrap();
        for (v, n) in mesh.vertices.iter().zip(normals) {
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let radial = [v[0] / r, v[1] / r, v[2] / r];
            let dot = (n[0] * radial[0] + n[1] * radial[1] + n[2] * radial[2]).abs();
            assert!(dot > 0.9, "normal deviates from radial: {dot}");
        }
    }
}
