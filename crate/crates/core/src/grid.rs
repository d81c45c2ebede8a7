//! Spatial mesh on the square (-1,1)², discrete-ordinate sets on the unit
//! circle, and the field containers every solver works with.
//!
//! Angular fields are stored ordinate-major (`values[k * n_cells + c]`) so a
//! transport sweep for one direction touches a contiguous slice.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{self, Write};

use crate::error::{check_len, Error, Result};

/// Directions with `|n·v|` below this are treated as tangent to a face.
pub const GRAZING_EPS: f64 = 1e-14;

/// What lies across a triangle face.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceNeighbor {
    Cell(usize),
    Boundary(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct Face {
    pub neighbor: FaceNeighbor,
    /// Outward unit normal with respect to the owning cell.
    pub normal: [f64; 2],
    pub length: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub cell: usize,
    pub normal: [f64; 2],
    pub length: f64,
    pub midpoint: [f64; 2],
}

/// Side of the square a boundary edge lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Bottom, Side::Top];

    pub fn outward_normal(self) -> [f64; 2] {
        match self {
            Side::Left => [-1.0, 0.0],
            Side::Right => [1.0, 0.0],
            Side::Bottom => [0.0, -1.0],
            Side::Top => [0.0, 1.0],
        }
    }
}

/// Conforming triangulation of (-1,1)².
#[derive(Debug, Clone)]
pub struct Mesh {
    n_per_side: usize,
    vertices: Vec<[f64; 2]>,
    cells: Vec<[usize; 3]>,
    faces: Vec<[Face; 3]>,
    boundary_edges: Vec<BoundaryEdge>,
    cell_areas: Vec<f64>,
    cell_centroids: Vec<[f64; 2]>,
}

/// Uniform split-square triangulation with `2 * n_per_side²` triangles. Each
/// square is cut along its lower-left to upper-right diagonal.
pub fn build_mesh(n_per_side: usize) -> Result<Mesh> {
    if n_per_side < 2 {
        return Err(Error::InvalidArgument(format!(
            "n_per_side must be at least 2, got {n_per_side}"
        )));
    }
    let n = n_per_side;
    let h = 2.0 / n as f64;
    let vid = |i: usize, j: usize| i + j * (n + 1);

    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            vertices.push([-1.0 + i as f64 * h, -1.0 + j as f64 * h]);
        }
    }

    let mut cells = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (v00, v10, v01, v11) = (vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1));
            cells.push([v00, v10, v11]);
            cells.push([v00, v11, v01]);
        }
    }

    let mut cell_areas = Vec::with_capacity(cells.len());
    let mut cell_centroids = Vec::with_capacity(cells.len());
    for tri in &cells {
        let [a, b, c] = tri.map(|v| vertices[v]);
        let area = 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]));
        cell_areas.push(area);
        cell_centroids.push([(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]);
    }

    // Edge (sorted vertex pair) -> owning (cell, local face) list.
    let mut edge_owners: HashMap<(usize, usize), Vec<(usize, usize)>> = HashMap::new();
    for (c, tri) in cells.iter().enumerate() {
        for f in 0..3 {
            let (a, b) = (tri[f], tri[(f + 1) % 3]);
            edge_owners.entry((a.min(b), a.max(b))).or_default().push((c, f));
        }
    }

    let placeholder = Face {
        neighbor: FaceNeighbor::Boundary(usize::MAX),
        normal: [0.0; 2],
        length: 0.0,
    };
    let mut faces = vec![[placeholder; 3]; cells.len()];
    let mut boundary_edges = Vec::new();

    // Deterministic traversal: cells in order, faces in order.
    for (c, tri) in cells.iter().enumerate() {
        for f in 0..3 {
            let (a, b) = (tri[f], tri[(f + 1) % 3]);
            let (pa, pb) = (vertices[a], vertices[b]);
            let (dx, dy) = (pb[0] - pa[0], pb[1] - pa[1]);
            let length = (dx * dx + dy * dy).sqrt();
            // Counter-clockwise triangles: the outward normal is the edge
            // tangent rotated clockwise.
            let normal = [dy / length, -dx / length];
            let owners = &edge_owners[&(a.min(b), a.max(b))];
            let neighbor = match owners.as_slice() {
                [_] => {
                    boundary_edges.push(BoundaryEdge {
                        vertices: [a, b],
                        cell: c,
                        normal,
                        length,
                        midpoint: [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])],
                    });
                    FaceNeighbor::Boundary(boundary_edges.len() - 1)
                }
                [(c0, _), (c1, _)] => FaceNeighbor::Cell(if *c0 == c { *c1 } else { *c0 }),
                _ => unreachable!("non-conforming edge"),
            };
            faces[c][f] = Face {
                neighbor,
                normal,
                length,
            };
        }
    }

    Ok(Mesh {
        n_per_side,
        vertices,
        cells,
        faces,
        boundary_edges,
        cell_areas,
        cell_centroids,
    })
}

impl Mesh {
    pub fn n_per_side(&self) -> usize {
        self.n_per_side
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_boundary_edges(&self) -> usize {
        self.boundary_edges.len()
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn cells(&self) -> &[[usize; 3]] {
        &self.cells
    }

    pub fn faces(&self, cell: usize) -> &[Face; 3] {
        &self.faces[cell]
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    pub fn cell_areas(&self) -> &[f64] {
        &self.cell_areas
    }

    pub fn cell_centroids(&self) -> &[[f64; 2]] {
        &self.cell_centroids
    }

    pub fn total_area(&self) -> f64 {
        self.cell_areas.iter().sum()
    }

    /// Largest edge length over all cells.
    pub fn max_cell_diameter(&self) -> f64 {
        self.faces
            .iter()
            .flat_map(|fs| fs.iter().map(|f| f.length))
            .fold(0.0, f64::max)
    }

    /// Side of the square containing a boundary edge.
    pub fn edge_side(&self, edge: usize) -> Side {
        let n = self.boundary_edges[edge].normal;
        if n[0] < -0.5 {
            Side::Left
        } else if n[0] > 0.5 {
            Side::Right
        } else if n[1] < -0.5 {
            Side::Bottom
        } else {
            Side::Top
        }
    }

    /// Evaluates `f` at every cell centroid.
    pub fn sample<F: Fn(f64, f64) -> f64>(&self, f: F) -> ScalarField {
        ScalarField::new(self.cell_centroids.iter().map(|p| f(p[0], p[1])).collect())
    }
}

/// Uniform discrete-ordinate quadrature on the unit circle, normalized so
/// the weights sum to one.
#[derive(Debug, Clone)]
pub struct OrdinateSet {
    directions: Vec<[f64; 2]>,
    weights: Vec<f64>,
}

/// `n_dirs` equally spaced directions at angles `2πk/n + π/n`; the half-step
/// offset keeps every direction off the coordinate axes.
pub fn build_ordinates(n_dirs: usize) -> Result<OrdinateSet> {
    if n_dirs < 4 || !n_dirs.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "ordinate count must be even and at least 4, got {n_dirs}"
        )));
    }
    let directions = (0..n_dirs)
        .map(|k| {
            let theta = 2.0 * PI * k as f64 / n_dirs as f64 + PI / n_dirs as f64;
            [theta.cos(), theta.sin()]
        })
        .collect();
    Ok(OrdinateSet {
        directions,
        weights: vec![1.0 / n_dirs as f64; n_dirs],
    })
}

impl OrdinateSet {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[[f64; 2]] {
        &self.directions
    }

    pub fn direction(&self, k: usize) -> [f64; 2] {
        self.directions[k]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Index of `-v_k`.
    pub fn opposite(&self, k: usize) -> usize {
        let n = self.len();
        (k + n / 2) % n
    }
}

/// Cellwise scalar coefficient or datum.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn constant(n_cells: usize, value: f64) -> Self {
        Self::new(vec![value; n_cells])
    }

    pub fn zeros(n_cells: usize) -> Self {
        Self::constant(n_cells, 0.0)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Self {
        Self::new(self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map<F: Fn(f64, f64) -> f64>(&self, other: &ScalarField, f: F) -> Self {
        debug_assert_eq!(self.len(), other.len());
        Self::new(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &ScalarField) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ScalarField) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &ScalarField) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Area-weighted mean over the domain.
    pub fn mean(&self, mesh: &Mesh) -> f64 {
        self.values
            .iter()
            .zip(mesh.cell_areas())
            .map(|(v, a)| v * a)
            .sum::<f64>()
            / mesh.total_area()
    }
}

/// Discrete L²(Ω) inner product.
pub fn inner_omega(mesh: &Mesh, a: &ScalarField, b: &ScalarField) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .zip(mesh.cell_areas())
        .map(|((x, y), w)| x * y * w)
        .sum()
}

pub fn norm_omega(mesh: &Mesh, a: &ScalarField) -> f64 {
    inner_omega(mesh, a, a).sqrt()
}

/// Photon density sampled on cells × ordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularField {
    n_cells: usize,
    n_ords: usize,
    values: Vec<f64>,
}

impl AngularField {
    pub fn zeros(n_cells: usize, n_ords: usize) -> Self {
        Self {
            n_cells,
            n_ords,
            values: vec![0.0; n_cells * n_ords],
        }
    }

    /// Builds a field from ordinate-major values.
    pub fn from_values(n_cells: usize, n_ords: usize, values: Vec<f64>) -> Result<Self> {
        check_len("angular field values", n_cells * n_ords, values.len())?;
        Ok(Self {
            n_cells,
            n_ords,
            values,
        })
    }

    pub fn from_fn<F: Fn(usize, usize) -> f64>(n_cells: usize, n_ords: usize, f: F) -> Self {
        let mut values = Vec::with_capacity(n_cells * n_ords);
        for k in 0..n_ords {
            for c in 0..n_cells {
                values.push(f(c, k));
            }
        }
        Self {
            n_cells,
            n_ords,
            values,
        }
    }

    /// Copies an isotropic field onto every ordinate.
    pub fn replicate(field: &ScalarField, n_ords: usize) -> Self {
        let n_cells = field.len();
        let mut values = Vec::with_capacity(n_cells * n_ords);
        for _ in 0..n_ords {
            values.extend_from_slice(field.values());
        }
        Self {
            n_cells,
            n_ords,
            values,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_ords(&self) -> usize {
        self.n_ords
    }

    pub fn get(&self, cell: usize, k: usize) -> f64 {
        self.values[k * self.n_cells + cell]
    }

    pub fn set(&mut self, cell: usize, k: usize, value: f64) {
        self.values[k * self.n_cells + cell] = value;
    }

    pub fn ordinate(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_cells..(k + 1) * self.n_cells]
    }

    pub fn ordinate_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.n_cells..(k + 1) * self.n_cells]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// Multiplies every ordinate by a cellwise factor.
    pub fn mul_scalar_field(&self, f: &ScalarField) -> Self {
        let mut out = self.clone();
        for k in 0..self.n_ords {
            for (v, s) in out.ordinate_mut(k).iter_mut().zip(f.values()) {
                *v *= s;
            }
        }
        out
    }

    /// Pointwise product of two fields of the same shape.
    pub fn mul_angular(&self, other: &AngularField) -> Self {
        assert_eq!((self.n_cells, self.n_ords), (other.n_cells, other.n_ords), "angular field shapes differ");
        let mut out = self.clone();
        out.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a *= b);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Maps `u(x, v_k)` to `u(x, -v_k)`.
    pub fn reflect(&self, ords: &OrdinateSet) -> Self {
        let mut out = Self::zeros(self.n_cells, self.n_ords);
        for k in 0..self.n_ords {
            out.ordinate_mut(ords.opposite(k)).copy_from_slice(self.ordinate(k));
        }
        out
    }
}

/// Discrete L²(X) inner product with the normalized angular measure.
pub fn inner_phase(mesh: &Mesh, ords: &OrdinateSet, a: &AngularField, b: &AngularField) -> f64 {
    let mut total = 0.0;
    for (k, w) in ords.weights().iter().enumerate() {
        let s: f64 = a
            .ordinate(k)
            .iter()
            .zip(b.ordinate(k))
            .zip(mesh.cell_areas())
            .map(|((x, y), area)| x * y * area)
            .sum();
        total += w * s;
    }
    total
}

/// Label of a boundary phase-space pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Inflow,
    Outflow,
}

/// Inflow iff `n·v < 0` by more than the grazing threshold.
pub fn classify(normal: [f64; 2], v: [f64; 2]) -> Flow {
    let nv = normal[0] * v[0] + normal[1] * v[1];
    if nv < -GRAZING_EPS {
        Flow::Inflow
    } else {
        Flow::Outflow
    }
}

#[derive(Debug, Clone, Default)]
pub struct BoundaryPartition {
    pub inflow: Vec<(usize, usize)>,
    pub outflow: Vec<(usize, usize)>,
}

pub fn classify_boundary(mesh: &Mesh, ords: &OrdinateSet) -> BoundaryPartition {
    let mut part = BoundaryPartition::default();
    for (e, edge) in mesh.boundary_edges().iter().enumerate() {
        for k in 0..ords.len() {
            match classify(edge.normal, ords.direction(k)) {
                Flow::Inflow => part.inflow.push((e, k)),
                Flow::Outflow => part.outflow.push((e, k)),
            }
        }
    }
    part
}

/// Prescribed trace on the inflow part of the phase-space boundary. Values
/// on outflow pairs are stored but never read by the forward sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySource {
    n_edges: usize,
    n_ords: usize,
    values: Vec<f64>,
}

impl BoundarySource {
    pub fn zeros(n_edges: usize, n_ords: usize) -> Self {
        Self {
            n_edges,
            n_ords,
            values: vec![0.0; n_edges * n_ords],
        }
    }

    /// Fills inflow pairs with `f(edge, ordinate)`; outflow pairs stay zero.
    pub fn from_fn<F: Fn(usize, usize) -> f64>(mesh: &Mesh, ords: &OrdinateSet, f: F) -> Self {
        let mut src = Self::zeros(mesh.n_boundary_edges(), ords.len());
        for (e, edge) in mesh.boundary_edges().iter().enumerate() {
            for k in 0..ords.len() {
                if classify(edge.normal, ords.direction(k)) == Flow::Inflow {
                    src.values[k * src.n_edges + e] = f(e, k);
                }
            }
        }
        src
    }

    /// Unit inflow on every side.
    pub fn uniform(mesh: &Mesh, ords: &OrdinateSet, value: f64) -> Self {
        Self::from_fn(mesh, ords, |_, _| value)
    }

    /// Inflow `value` on one side of the square, zero elsewhere.
    pub fn side(mesh: &Mesh, ords: &OrdinateSet, side: Side, value: f64) -> Self {
        Self::from_fn(mesh, ords, |e, _| if mesh.edge_side(e) == side { value } else { 0.0 })
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    pub fn n_ords(&self) -> usize {
        self.n_ords
    }

    pub fn get(&self, edge: usize, k: usize) -> f64 {
        self.values[k * self.n_edges + edge]
    }

    pub fn set(&mut self, edge: usize, k: usize, value: f64) {
        self.values[k * self.n_edges + edge] = value;
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }
}

/// Writes one row per cell: centroid coordinates followed by one column per
/// named field.
pub fn write_fields_csv<W: Write>(
    out: &mut W,
    mesh: &Mesh,
    fields: &[(&str, &ScalarField)],
) -> io::Result<()> {
    write!(out, "x,y")?;
    for (name, _) in fields {
        write!(out, ",{name}")?;
    }
    writeln!(out)?;
    for (c, p) in mesh.cell_centroids().iter().enumerate() {
        write!(out, "{},{}", p[0], p[1])?;
        for (_, f) in fields {
            write!(out, ",{}", f.values()[c])?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Angular field as CSV: centroid columns then one column `o<k>` per
/// ordinate.
pub fn write_angular_csv<W: Write>(out: &mut W, mesh: &Mesh, u: &AngularField) -> io::Result<()> {
    write!(out, "x,y")?;
    for k in 0..u.n_ords() {
        write!(out, ",o{k}")?;
    }
    writeln!(out)?;
    for (c, p) in mesh.cell_centroids().iter().enumerate() {
        write!(out, "{},{}", p[0], p[1])?;
        for k in 0..u.n_ords() {
            write!(out, ",{}", u.get(c, k))?;
        }
        writeln!(out)?;
    }
    Ok(())
}
