//! Quasi-uniform panelizations of the unit sphere and the test kernels
//! evaluated on them.
//!
//! The mesh is the surface of the cube `[-1,1]^3` with every face split
//! uniformly `level` times into four, projected radially onto the sphere.
//! This yields `6 * 4^level` panels. Matrix entries use the one-point
//! (midpoint) Galerkin rule `area_i * area_j * k(x_i, x_j)`.

use nalgebra::DMatrix;

use crate::error::{HmError, Result};
use crate::scalar::Real;

pub type Point3 = [f64; 3];

/// Deepest mesh level `build_sphere_mesh` accepts.
pub const MAX_MESH_LEVEL: u32 = 9;
/// Largest panel count for which dense matrices are materialized.
pub const MAX_DENSE_PANELS: usize = 6144;

/// Subdivision depth of the self-interaction quadrature of the single-layer kernel.
const SELF_QUADRATURE_DEPTH: u32 = 3;

/// A square patch `[u0,u1] x [v0,v1]` on one face of the cube.
///
/// `axis` is the coordinate that is fixed to `sign` on that face; `u` and `v`
/// run along the two remaining axes in increasing order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubePatch {
    pub axis: usize,
    pub sign: f64,
    pub u: [f64; 2],
    pub v: [f64; 2],
}

impl CubePatch {
    fn tangent_axes(&self) -> (usize, usize) {
        match self.axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        }
    }

    /// Point on the cube face at parameters `(u, v)`.
    pub fn cube_point(&self, u: f64, v: f64) -> Point3 {
        let (a, b) = self.tangent_axes();
        let mut p = [0.0; 3];
        p[self.axis] = self.sign;
        p[a] = u;
        p[b] = v;
        p
    }

    /// Radial projection of the patch midpoint.
    pub fn center(&self) -> Point3 {
        normalize(self.cube_point(
            0.5 * (self.u[0] + self.u[1]),
            0.5 * (self.v[0] + self.v[1]),
        ))
    }

    /// Exact spherical area of the projected patch.
    ///
    /// Cube edges are straight segments in planes avoiding the origin, so they
    /// project onto great-circle arcs and the patch is a spherical quadrilateral.
    pub fn spherical_area(&self) -> f64 {
        let c00 = normalize(self.cube_point(self.u[0], self.v[0]));
        let c10 = normalize(self.cube_point(self.u[1], self.v[0]));
        let c11 = normalize(self.cube_point(self.u[1], self.v[1]));
        let c01 = normalize(self.cube_point(self.u[0], self.v[1]));
        (signed_triangle_excess(c00, c10, c11) + signed_triangle_excess(c00, c11, c01)).abs()
    }

    /// The four sub-patches obtained by halving both parameter ranges,
    /// ordered row-major in `(v, u)`.
    pub fn quadrisect(&self) -> [CubePatch; 4] {
        let um = 0.5 * (self.u[0] + self.u[1]);
        let vm = 0.5 * (self.v[0] + self.v[1]);
        let mk = |u: [f64; 2], v: [f64; 2]| CubePatch {
            axis: self.axis,
            sign: self.sign,
            u,
            v,
        };
        [
            mk([self.u[0], um], [self.v[0], vm]),
            mk([um, self.u[1]], [self.v[0], vm]),
            mk([self.u[0], um], [vm, self.v[1]]),
            mk([um, self.u[1]], [vm, self.v[1]]),
        ]
    }

    /// Whether the cube point `p` (on this patch's face) lies in the closed patch.
    pub fn contains_cube_point(&self, p: Point3) -> bool {
        let (a, b) = self.tangent_axes();
        (p[self.axis] - self.sign).abs() < 1e-12
            && p[a] >= self.u[0]
            && p[a] <= self.u[1]
            && p[b] >= self.v[0]
            && p[b] <= self.v[1]
    }
}

/// Spherical excess of the triangle `(a, b, c)` of unit vectors, signed by orientation.
fn signed_triangle_excess(a: Point3, b: Point3, c: Point3) -> f64 {
    let triple = dot(a, cross(b, c));
    let denom = 1.0 + dot(a, b) + dot(b, c) + dot(c, a);
    2.0 * triple.atan2(denom)
}

pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

pub fn distance(a: Point3, b: Point3) -> f64 {
    norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

fn normalize(a: Point3) -> Point3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Projects a unit-sphere point back onto the surface of the cube.
pub fn to_cube(p: Point3) -> Point3 {
    let m = p[0].abs().max(p[1].abs()).max(p[2].abs());
    [p[0] / m, p[1] / m, p[2] / m]
}

/// Panels of the subdivided cube sphere.
#[derive(Debug, Clone)]
pub struct PanelSet {
    pub centers: Vec<Point3>,
    pub areas: Vec<f64>,
    pub level: u32,
    pub patches: Vec<CubePatch>,
}

impl PanelSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    /// Index of the level-`(level-1)` panel a panel was split from.
    ///
    /// Panels are numbered face-major, then row-major within the face grid.
    pub fn parent_index(&self, i: usize) -> Option<usize> {
        if self.level == 0 {
            return None;
        }
        let side = 1usize << self.level;
        let per_face = side * side;
        let (face, local) = (i / per_face, i % per_face);
        let (row, col) = (local / side, local % side);
        let parent_side = side / 2;
        Some(face * parent_side * parent_side + (row / 2) * parent_side + col / 2)
    }
}

/// Cube-face panelization of the unit sphere with `6 * 4^level` panels.
pub fn build_sphere_mesh(level: u32) -> Result<PanelSet> {
    if level > MAX_MESH_LEVEL {
        return Err(HmError::Capacity {
            what: "mesh level",
            requested: level as usize,
            limit: MAX_MESH_LEVEL as usize,
        });
    }
    let side = 1usize << level;
    let h = 2.0 / side as f64;
    let mut patches = Vec::with_capacity(6 * side * side);
    for axis in 0..3 {
        for sign in [1.0, -1.0] {
            for row in 0..side {
                for col in 0..side {
                    let u0 = -1.0 + col as f64 * h;
                    let v0 = -1.0 + row as f64 * h;
                    patches.push(CubePatch {
                        axis,
                        sign,
                        u: [u0, u0 + h],
                        v: [v0, v0 + h],
                    });
                }
            }
        }
    }
    let centers = patches.iter().map(CubePatch::center).collect();
    let areas = patches.iter().map(CubePatch::spherical_area).collect();
    Ok(PanelSet {
        centers,
        areas,
        level,
        patches,
    })
}

/// Kernels of the test problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    /// `exp(-|x - y|)`
    Exponential,
    /// `x_1 exp(-|x - y|)`, with `x_1` the first coordinate of the row point.
    ScaledExponential,
    /// `1 / |x - y|`
    SingleLayer,
}

impl KernelKind {
    pub const ALL: [KernelKind; 3] = [
        KernelKind::Exponential,
        KernelKind::ScaledExponential,
        KernelKind::SingleLayer,
    ];

    /// Point evaluation `k(x, y)`. Singular for `SingleLayer` at `x == y`.
    pub fn eval(self, x: Point3, y: Point3) -> f64 {
        let r = distance(x, y);
        match self {
            KernelKind::Exponential => (-r).exp(),
            KernelKind::ScaledExponential => x[0] * (-r).exp(),
            KernelKind::SingleLayer => 1.0 / r,
        }
    }

    pub fn is_symmetric(self) -> bool {
        !matches!(self, KernelKind::ScaledExponential)
    }
}

/// Galerkin entry `[K]_{ij}` with one-point quadrature on both panels.
///
/// The single-layer diagonal is integrated by splitting the panel
/// `SELF_QUADRATURE_DEPTH` times and summing over all non-coincident
/// sub-panel pairs.
pub fn kernel_entry(kind: KernelKind, i: usize, j: usize, panels: &PanelSet) -> f64 {
    if i == j && kind == KernelKind::SingleLayer {
        return single_layer_self_interaction(&panels.patches[i]);
    }
    panels.areas[i] * panels.areas[j] * kind.eval(panels.centers[i], panels.centers[j])
}

fn single_layer_self_interaction(patch: &CubePatch) -> f64 {
    let mut subs = vec![*patch];
    for _ in 0..SELF_QUADRATURE_DEPTH {
        subs = subs.iter().flat_map(CubePatch::quadrisect).collect();
    }
    let centers: Vec<Point3> = subs.iter().map(CubePatch::center).collect();
    let areas: Vec<f64> = subs.iter().map(CubePatch::spherical_area).collect();
    let mut sum = 0.0;
    for a in 0..subs.len() {
        for b in 0..subs.len() {
            if a != b {
                sum += areas[a] * areas[b] / distance(centers[a], centers[b]);
            }
        }
    }
    sum
}

/// Dense kernel matrix whose row/column `r` corresponds to panel `order[r]`.
pub fn assemble_dense_ordered<T: Real>(
    kind: KernelKind,
    panels: &PanelSet,
    order: &[usize],
) -> Result<DMatrix<T>> {
    let n = order.len();
    if n > MAX_DENSE_PANELS {
        return Err(HmError::Capacity {
            what: "dense panel count",
            requested: n,
            limit: MAX_DENSE_PANELS,
        });
    }
    Ok(DMatrix::from_fn(n, n, |r, c| {
        T::of(kernel_entry(kind, order[r], order[c], panels))
    }))
}

/// Dense kernel matrix in natural panel order.
pub fn assemble_dense<T: Real>(kind: KernelKind, panels: &PanelSet) -> Result<DMatrix<T>> {
    let order: Vec<usize> = (0..panels.len()).collect();
    assemble_dense_ordered(kind, panels, &order)
}
