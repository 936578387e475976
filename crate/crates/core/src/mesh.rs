//! Simplicial meshes (intervals in 1D, triangles in 2D).
//!
//! Connectivity is fixed for the lifetime of a [`Mesh`]; coordinates are passed
//! separately to every geometric query so the same topology can be evaluated on
//! the physical mesh at any time, on the computational mesh, or on an
//! interpolated stage mesh.
//!
//! Local conventions:
//! - 2D: vertices counterclockwise, face `f` runs from local vertex `f` to
//!   `(f + 1) % 3` and is opposite local vertex `(f + 2) % 3`.
//! - 1D: face 0 is the left end point (outward normal -1), face 1 the right end
//!   point (outward normal +1).

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Marker for unused vertex slots of 1D elements.
pub const NO_VERTEX: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Self { x0, x1, y0, y1 }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Which part of the domain boundary a face lies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundaryTag {
    Left,
    Right,
    Bottom,
    Top,
    /// Any boundary face not on the bounding box (e.g. the forward step).
    Wall,
}

impl BoundaryTag {
    pub const ALL: [BoundaryTag; 5] = [
        BoundaryTag::Left,
        BoundaryTag::Right,
        BoundaryTag::Bottom,
        BoundaryTag::Top,
        BoundaryTag::Wall,
    ];

    pub fn index(self) -> usize {
        match self {
            BoundaryTag::Left => 0,
            BoundaryTag::Right => 1,
            BoundaryTag::Bottom => 2,
            BoundaryTag::Top => 3,
            BoundaryTag::Wall => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FaceLink {
    pub element: usize,
    pub face: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Face {
    Interior(FaceLink),
    /// Neighbor reached through a periodic identification of the boundary.
    Periodic(FaceLink),
    Boundary(BoundaryTag),
}

impl Face {
    pub fn neighbor(&self) -> Option<FaceLink> {
        match *self {
            Face::Interior(l) | Face::Periodic(l) => Some(l),
            Face::Boundary(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VertexClass {
    Interior,
    /// Boundary vertex constrained to a straight boundary segment.
    Sliding { tangent: Point },
    Fixed,
}

/// A unique mesh face with its incident elements.
#[derive(Clone, Debug)]
pub struct Edge {
    pub vertices: (usize, usize),
    pub left: FaceLink,
    pub right: Option<FaceLink>,
}

#[derive(Clone, Debug)]
pub struct Mesh {
    dim: usize,
    coords: Vec<Point>,
    elements: Vec<[usize; 3]>,
    faces: Vec<[Face; 3]>,
    vertex_class: Vec<VertexClass>,
    vertex_elements: Vec<Vec<(usize, usize)>>,
    vertex_neighbors: Vec<Vec<usize>>,
    periodic_partner: Vec<Option<usize>>,
    edges: Vec<Edge>,
    bbox: Rect,
    volume: f64,
}

/// Geometry of one affine simplex.
#[derive(Clone, Copy, Debug)]
pub struct ElementGeometry {
    pub dim: usize,
    pub vertices: [Point; 3],
    pub volume: f64,
    /// Edge matrix `[x1 - x0, x2 - x0]` (columns); `[[h, 0], [0, 1]]` in 1D.
    pub jacobian: [[f64; 2]; 2],
    pub inv_jacobian: [[f64; 2]; 2],
    pub face_lengths: [f64; 3],
    pub normals: [Point; 3],
    pub inradius: f64,
    pub barycenter: Point,
}

impl ElementGeometry {
    /// Returns `None` for non-positive volume.
    pub fn new(dim: usize, vertices: [Point; 3]) -> Option<Self> {
        if dim == 1 {
            let h = vertices[1][0] - vertices[0][0];
            if !(h > 0.0) {
                return None;
            }
            return Some(Self {
                dim,
                vertices,
                volume: h,
                jacobian: [[h, 0.0], [0.0, 1.0]],
                inv_jacobian: [[1.0 / h, 0.0], [0.0, 1.0]],
                face_lengths: [1.0, 1.0, 0.0],
                normals: [[-1.0, 0.0], [1.0, 0.0], [0.0, 0.0]],
                inradius: 0.5 * h,
                barycenter: [0.5 * (vertices[0][0] + vertices[1][0]), 0.0],
            });
        }
        let [a, b, c] = vertices;
        let e1 = [b[0] - a[0], b[1] - a[1]];
        let e2 = [c[0] - a[0], c[1] - a[1]];
        let det = e1[0] * e2[1] - e2[0] * e1[1];
        if !(det > 0.0) {
            return None;
        }
        let jacobian = [[e1[0], e2[0]], [e1[1], e2[1]]];
        let inv_jacobian = [
            [e2[1] / det, -e2[0] / det],
            [-e1[1] / det, e1[0] / det],
        ];
        let mut face_lengths = [0.0; 3];
        let mut normals = [[0.0; 2]; 3];
        for f in 0..3 {
            let p = vertices[f];
            let q = vertices[(f + 1) % 3];
            let dx = q[0] - p[0];
            let dy = q[1] - p[1];
            let len = (dx * dx + dy * dy).sqrt();
            face_lengths[f] = len;
            normals[f] = [dy / len, -dx / len];
        }
        let volume = 0.5 * det;
        let perimeter: f64 = face_lengths.iter().sum();
        Some(Self {
            dim,
            vertices,
            volume,
            jacobian,
            inv_jacobian,
            face_lengths,
            normals,
            inradius: 2.0 * volume / perimeter,
            barycenter: [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0],
        })
    }

    pub fn n_faces(&self) -> usize {
        self.dim + 1
    }

    /// Reference coordinates of a physical point (affine inverse map).
    pub fn to_reference(&self, x: Point) -> Point {
        let d = [x[0] - self.vertices[0][0], x[1] - self.vertices[0][1]];
        if self.dim == 1 {
            return [d[0] * self.inv_jacobian[0][0], 0.0];
        }
        let m = &self.inv_jacobian;
        [m[0][0] * d[0] + m[0][1] * d[1], m[1][0] * d[0] + m[1][1] * d[1]]
    }

    pub fn to_physical(&self, xi: Point) -> Point {
        let o = self.vertices[0];
        if self.dim == 1 {
            return [o[0] + self.jacobian[0][0] * xi[0], 0.0];
        }
        let m = &self.jacobian;
        [
            o[0] + m[0][0] * xi[0] + m[0][1] * xi[1],
            o[1] + m[1][0] * xi[0] + m[1][1] * xi[1],
        ]
    }

    /// Physical gradient from a reference gradient: `E^{-T} g`.
    #[inline]
    pub fn physical_gradient(&self, g: Point) -> Point {
        let m = &self.inv_jacobian;
        [m[0][0] * g[0] + m[1][0] * g[1], m[0][1] * g[0] + m[1][1] * g[1]]
    }

    pub fn face_midpoint(&self, f: usize) -> Point {
        if self.dim == 1 {
            return self.vertices[f];
        }
        let p = self.vertices[f];
        let q = self.vertices[(f + 1) % 3];
        [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]
    }

    /// Barycentric coordinates of a physical point with respect to this simplex.
    pub fn barycentric(&self, x: Point) -> [f64; 3] {
        let r = self.to_reference(x);
        if self.dim == 1 {
            [1.0 - r[0], r[0], 0.0]
        } else {
            [1.0 - r[0] - r[1], r[0], r[1]]
        }
    }
}

/// Reference coordinates of local vertex `v`.
pub fn reference_vertex(dim: usize, v: usize) -> Point {
    match (dim, v) {
        (1, 0) => [0.0, 0.0],
        (1, 1) => [1.0, 0.0],
        (_, 0) => [0.0, 0.0],
        (_, 1) => [1.0, 0.0],
        _ => [0.0, 1.0],
    }
}

/// Reference coordinates of the point at parameter `s` along face `f`.
pub fn reference_face_point(dim: usize, f: usize, s: f64) -> Point {
    if dim == 1 {
        return reference_vertex(1, f);
    }
    let a = reference_vertex(2, f);
    let b = reference_vertex(2, (f + 1) % 3);
    [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]
}

/// Result of a point-location query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Location {
    pub element: usize,
    pub barycentric: [f64; 3],
    /// The point lay outside the mesh and was projected onto the nearest element.
    pub outside: bool,
}

impl Mesh {
    /// Builds a mesh from raw simplices. Boundary faces are tagged by their
    /// position relative to the bounding box of `coords`.
    pub fn from_simplices(dim: usize, coords: Vec<Point>, elements: Vec<[usize; 3]>) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidArgument(format!("unsupported dimension {dim}")));
        }
        if elements.is_empty() {
            return Err(Error::InvalidArgument("mesh has no elements".into()));
        }
        let nv = coords.len();
        let nf = dim + 1;
        for (e, el) in elements.iter().enumerate() {
            for &v in &el[..nf] {
                if v >= nv {
                    return Err(Error::InvalidArgument(format!("element {e} references vertex {v}")));
                }
            }
        }
        let bbox = bounding_box(&coords);
        let mut mesh = Mesh {
            dim,
            coords,
            elements,
            faces: Vec::new(),
            vertex_class: Vec::new(),
            vertex_elements: vec![Vec::new(); nv],
            vertex_neighbors: vec![Vec::new(); nv],
            periodic_partner: vec![None; nv],
            edges: Vec::new(),
            bbox,
            volume: 0.0,
        };
        let mut volume = 0.0;
        for e in 0..mesh.n_elements() {
            volume += mesh.element_geometry(&mesh.coords, e, 0.0)?.volume;
        }
        mesh.volume = volume;
        mesh.build_connectivity()?;
        mesh.classify_vertices();
        Ok(mesh)
    }

    fn face_key(&self, e: usize, f: usize) -> (usize, usize) {
        let el = &self.elements[e];
        if self.dim == 1 {
            (el[f], NO_VERTEX)
        } else {
            let a = el[f];
            let b = el[(f + 1) % 3];
            (a.min(b), a.max(b))
        }
    }

    fn build_connectivity(&mut self) -> Result<()> {
        let nf = self.dim + 1;
        let mut open: HashMap<(usize, usize), (FaceLink, usize)> = HashMap::new();
        self.faces = vec![[Face::Boundary(BoundaryTag::Wall); 3]; self.elements.len()];
        let mut edges: Vec<Edge> = Vec::new();
        for e in 0..self.elements.len() {
            for f in 0..nf {
                let key = self.face_key(e, f);
                let link = FaceLink { element: e, face: f };
                if let Some((other, slot)) = open.remove(&key) {
                    self.faces[e][f] = Face::Interior(other);
                    self.faces[other.element][other.face] = Face::Interior(link);
                    edges[slot].right = Some(link);
                } else {
                    open.insert(key, (link, edges.len()));
                    edges.push(Edge {
                        vertices: key,
                        left: link,
                        right: None,
                    });
                }
            }
        }
        // Tag the faces that stayed open.
        let tol = 1e-10 * (self.bbox.x1 - self.bbox.x0).max(self.bbox.y1 - self.bbox.y0);
        for (link, _) in open.values() {
            let geom = self.element_geometry(&self.coords, link.element, 0.0)?;
            let m = geom.face_midpoint(link.face);
            let tag = if (m[0] - self.bbox.x0).abs() < tol && (self.dim == 1 || geom.normals[link.face][0] < 0.0) {
                BoundaryTag::Left
            } else if (m[0] - self.bbox.x1).abs() < tol && (self.dim == 1 || geom.normals[link.face][0] > 0.0) {
                BoundaryTag::Right
            } else if self.dim == 2 && (m[1] - self.bbox.y0).abs() < tol && geom.normals[link.face][1] < 0.0 {
                BoundaryTag::Bottom
            } else if self.dim == 2 && (m[1] - self.bbox.y1).abs() < tol && geom.normals[link.face][1] > 0.0 {
                BoundaryTag::Top
            } else {
                BoundaryTag::Wall
            };
            self.faces[link.element][link.face] = Face::Boundary(tag);
        }
        self.edges = edges;

        for (e, el) in self.elements.iter().enumerate() {
            for (lv, &v) in el[..nf].iter().enumerate() {
                self.vertex_elements[v].push((e, lv));
                for &w in &el[..nf] {
                    if w != v && !self.vertex_neighbors[v].contains(&w) {
                        self.vertex_neighbors[v].push(w);
                    }
                }
            }
        }
        for n in &mut self.vertex_neighbors {
            n.sort_unstable();
        }
        Ok(())
    }

    fn classify_vertices(&mut self) {
        let nv = self.coords.len();
        let mut dirs: Vec<Vec<Point>> = vec![Vec::new(); nv];
        let mut on_boundary = vec![false; nv];
        for e in 0..self.elements.len() {
            for f in 0..self.dim + 1 {
                if matches!(self.faces[e][f], Face::Interior(_)) {
                    continue;
                }
                if self.dim == 1 {
                    on_boundary[self.elements[e][f]] = true;
                    continue;
                }
                let a = self.elements[e][f];
                let b = self.elements[e][(f + 1) % 3];
                let pa = self.coords[a];
                let pb = self.coords[b];
                let d = [pb[0] - pa[0], pb[1] - pa[1]];
                let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
                let t = [d[0] / len, d[1] / len];
                for v in [a, b] {
                    on_boundary[v] = true;
                    dirs[v].push(t);
                }
            }
        }
        self.vertex_class = (0..nv)
            .map(|v| {
                if !on_boundary[v] {
                    return VertexClass::Interior;
                }
                if self.dim == 1 {
                    return VertexClass::Fixed;
                }
                let t0 = dirs[v][0];
                let collinear = dirs[v].iter().all(|t| (t0[0] * t[1] - t0[1] * t[0]).abs() < 1e-10);
                if collinear {
                    VertexClass::Sliding { tangent: t0 }
                } else {
                    VertexClass::Fixed
                }
            })
            .collect();
    }

    /// Identifies the `Left`/`Right` boundaries (`axis = 0`) or `Bottom`/`Top`
    /// boundaries (`axis = 1`) periodically. Faces must match pairwise.
    pub fn make_periodic(mut self, axis: usize) -> Result<Self> {
        let (lo, hi) = if axis == 0 {
            (BoundaryTag::Left, BoundaryTag::Right)
        } else {
            (BoundaryTag::Bottom, BoundaryTag::Top)
        };
        if self.dim == 1 && axis != 0 {
            return Err(Error::InvalidArgument("1D meshes are periodic in x only".into()));
        }
        let other = 1 - axis;
        let collect = |tag: BoundaryTag| -> Result<Vec<(f64, FaceLink)>> {
            let mut v = Vec::new();
            for e in 0..self.elements.len() {
                for f in 0..self.dim + 1 {
                    if self.faces[e][f] == Face::Boundary(tag) {
                        let g = self.element_geometry(&self.coords, e, 0.0)?;
                        v.push((g.face_midpoint(f)[other], FaceLink { element: e, face: f }));
                    }
                }
            }
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            Ok(v)
        };
        let low = collect(lo)?;
        let high = collect(hi)?;
        if low.len() != high.len() || low.is_empty() {
            return Err(Error::InvalidArgument("periodic boundaries do not match".into()));
        }
        let scale = (self.bbox.x1 - self.bbox.x0).max(self.bbox.y1 - self.bbox.y0);
        for (a, b) in low.iter().zip(&high) {
            if (a.0 - b.0).abs() > 1e-9 * scale {
                return Err(Error::InvalidArgument("periodic faces are not aligned".into()));
            }
            self.faces[a.1.element][a.1.face] = Face::Periodic(b.1);
            self.faces[b.1.element][b.1.face] = Face::Periodic(a.1);
            for edge in &mut self.edges {
                if edge.left == a.1 {
                    edge.right = Some(b.1);
                }
            }
            self.edges.retain(|edge| edge.left != b.1);
        }
        if self.dim == 2 {
            let bx = self.bbox;
            let (lo_val, hi_val) = if axis == 0 { (bx.x0, bx.x1) } else { (bx.y0, bx.y1) };
            let mut lows = Vec::new();
            let mut highs = Vec::new();
            for (v, p) in self.coords.iter().enumerate() {
                if !matches!(self.vertex_class[v], VertexClass::Sliding { .. }) {
                    continue;
                }
                if (p[axis] - lo_val).abs() < 1e-10 * scale {
                    lows.push((p[other], v));
                } else if (p[axis] - hi_val).abs() < 1e-10 * scale {
                    highs.push((p[other], v));
                }
            }
            lows.sort_by(|a, b| a.0.total_cmp(&b.0));
            highs.sort_by(|a, b| a.0.total_cmp(&b.0));
            if lows.len() != highs.len() {
                return Err(Error::InvalidArgument("periodic vertices do not match".into()));
            }
            for (a, b) in lows.iter().zip(&highs) {
                self.periodic_partner[a.1] = Some(b.1);
                self.periodic_partner[b.1] = Some(a.1);
            }
        }
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.coords.len()
    }

    /// Vertex coordinates the mesh was built with.
    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn element(&self, e: usize) -> &[usize] {
        &self.elements[e][..self.dim + 1]
    }

    pub fn faces(&self, e: usize) -> &[Face] {
        &self.faces[e][..self.dim + 1]
    }

    pub fn vertex_class(&self, v: usize) -> VertexClass {
        self.vertex_class[v]
    }

    /// Elements sharing vertex `v`, with the local index of `v` in each.
    pub fn vertex_elements(&self, v: usize) -> &[(usize, usize)] {
        &self.vertex_elements[v]
    }

    pub fn vertex_neighbors(&self, v: usize) -> &[usize] {
        &self.vertex_neighbors[v]
    }

    pub fn periodic_partner(&self, v: usize) -> Option<usize> {
        self.periodic_partner[v]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn bounding_box(&self) -> Rect {
        self.bbox
    }

    /// Domain volume (length in 1D, area in 2D).
    pub fn domain_volume(&self) -> f64 {
        self.volume
    }

    pub fn element_vertices(&self, coords: &[Point], e: usize) -> [Point; 3] {
        let el = &self.elements[e];
        if self.dim == 1 {
            [coords[el[0]], coords[el[1]], [0.0; 2]]
        } else {
            [coords[el[0]], coords[el[1]], coords[el[2]]]
        }
    }

    /// Geometry of element `e` under `coords`; a non-positive volume is reported
    /// as mesh tangling at `time`.
    pub fn element_geometry(&self, coords: &[Point], e: usize, time: f64) -> Result<ElementGeometry> {
        let verts = self.element_vertices(coords, e);
        ElementGeometry::new(self.dim, verts).ok_or_else(|| Error::MeshTangling {
            element: e,
            volume: signed_volume(self.dim, &verts),
            time,
        })
    }

    pub fn geometries(&self, coords: &[Point], time: f64) -> Result<Vec<ElementGeometry>> {
        (0..self.n_elements()).map(|e| self.element_geometry(coords, e, time)).collect()
    }

    pub fn signed_volume(&self, coords: &[Point], e: usize) -> f64 {
        signed_volume(self.dim, &self.element_vertices(coords, e))
    }

    /// Fails on the first element with non-positive volume.
    pub fn check_valid(&self, coords: &[Point], time: f64) -> Result<()> {
        for e in 0..self.n_elements() {
            let v = self.signed_volume(coords, e);
            if !(v > 0.0) {
                return Err(Error::MeshTangling { element: e, volume: v, time });
            }
        }
        Ok(())
    }

    pub fn min_inradius(&self, coords: &[Point]) -> Result<f64> {
        let mut r = f64::INFINITY;
        for e in 0..self.n_elements() {
            r = r.min(self.element_geometry(coords, e, 0.0)?.inradius);
        }
        Ok(r)
    }

    pub fn max_inradius(&self, coords: &[Point]) -> Result<f64> {
        let mut r: f64 = 0.0;
        for e in 0..self.n_elements() {
            r = r.max(self.element_geometry(coords, e, 0.0)?.inradius);
        }
        Ok(r)
    }

    /// Locates `p` by a neighbor walk from `hint`, falling back to an exhaustive scan.
    pub fn locate_point(&self, coords: &[Point], p: Point, hint: Option<usize>) -> Location {
        const TOL: f64 = 1e-12;
        let n = self.n_elements();
        let mut e = hint.unwrap_or(0).min(n - 1);
        for _ in 0..n {
            let verts = self.element_vertices(coords, e);
            let Some(g) = ElementGeometry::new(self.dim, verts) else { break };
            let bary = g.barycentric(p);
            let nf = self.dim + 1;
            let (vmin, lmin) = bary[..nf]
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (i, &l)| if l < acc.1 { (i, l) } else { acc });
            if lmin >= -TOL {
                return Location {
                    element: e,
                    barycentric: clamp_barycentric(bary, nf),
                    outside: false,
                };
            }
            let face = if self.dim == 1 { 1 - vmin } else { (vmin + 1) % 3 };
            match self.faces[e][face] {
                Face::Interior(l) => e = l.element,
                _ => break,
            }
        }
        self.locate_exhaustive(coords, p)
    }

    fn locate_exhaustive(&self, coords: &[Point], p: Point) -> Location {
        let nf = self.dim + 1;
        let mut best = (0, [0.0; 3], f64::NEG_INFINITY);
        for e in 0..self.n_elements() {
            let verts = self.element_vertices(coords, e);
            let Some(g) = ElementGeometry::new(self.dim, verts) else { continue };
            let bary = g.barycentric(p);
            let m = bary[..nf].iter().copied().fold(f64::INFINITY, f64::min);
            if m > best.2 {
                best = (e, bary, m);
            }
        }
        let outside = best.2 < -1e-10;
        if outside {
            log::warn!("point ({}, {}) outside the mesh; projected onto element {}", p[0], p[1], best.0);
        }
        Location {
            element: best.0,
            barycentric: clamp_barycentric(best.1, nf),
            outside,
        }
    }

    /// Legacy ASCII unstructured-grid export with optional per-cell scalars.
    pub fn write_vtk<W: Write>(&self, w: &mut W, coords: &[Point], cell_data: &[(&str, &[f64])]) -> std::io::Result<()> {
        let nf = self.dim + 1;
        writeln!(w, "# vtk DataFile Version 3.0")?;
        writeln!(w, "moving mesh snapshot")?;
        writeln!(w, "ASCII")?;
        writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
        writeln!(w, "POINTS {} double", coords.len())?;
        for p in coords {
            writeln!(w, "{:.17e} {:.17e} 0", p[0], p[1])?;
        }
        let ne = self.n_elements();
        writeln!(w, "CELLS {} {}", ne, ne * (nf + 1))?;
        for e in 0..ne {
            let ids: Vec<String> = self.element(e).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{} {}", nf, ids.join(" "))?;
        }
        writeln!(w, "CELL_TYPES {ne}")?;
        let cell_type = if self.dim == 1 { 3 } else { 5 };
        for _ in 0..ne {
            writeln!(w, "{cell_type}")?;
        }
        if !cell_data.is_empty() {
            writeln!(w, "CELL_DATA {ne}")?;
            for (name, values) in cell_data {
                writeln!(w, "SCALARS {name} double 1")?;
                writeln!(w, "LOOKUP_TABLE default")?;
                for v in values.iter() {
                    writeln!(w, "{:.17e}", v)?;
                }
            }
        }
        Ok(())
    }

    /// CSV vertex table: `id,x,y,boundary`.
    pub fn write_vertex_csv<W: Write>(&self, w: &mut W, coords: &[Point]) -> std::io::Result<()> {
        writeln!(w, "id,x,y,boundary")?;
        for (v, p) in coords.iter().enumerate() {
            let class = match self.vertex_class[v] {
                VertexClass::Interior => "interior",
                VertexClass::Sliding { .. } => "sliding",
                VertexClass::Fixed => "fixed",
            };
            writeln!(w, "{},{:.17e},{:.17e},{}", v, p[0], p[1], class)?;
        }
        Ok(())
    }
}

fn clamp_barycentric(mut b: [f64; 3], nf: usize) -> [f64; 3] {
    let mut s = 0.0;
    for l in b[..nf].iter_mut() {
        *l = l.max(0.0);
        s += *l;
    }
    for l in b[..nf].iter_mut() {
        *l /= s;
    }
    b
}

fn signed_volume(dim: usize, v: &[Point; 3]) -> f64 {
    if dim == 1 {
        v[1][0] - v[0][0]
    } else {
        0.5 * ((v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1]))
    }
}

fn bounding_box(coords: &[Point]) -> Rect {
    let mut r = Rect::new(f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in coords {
        r.x0 = r.x0.min(p[0]);
        r.x1 = r.x1.max(p[0]);
        r.y0 = r.y0.min(p[1]);
        r.y1 = r.y1.max(p[1]);
    }
    r
}

/// Uniform 1D mesh of `n` elements on `[a, b]`; both end points are fixed.
pub fn generate_interval(n: usize, a: f64, b: f64) -> Result<Mesh> {
    if n == 0 {
        return Err(Error::InvalidArgument("interval mesh needs at least one element".into()));
    }
    if !(a < b) {
        return Err(Error::InvalidArgument(format!("empty interval [{a}, {b}]")));
    }
    let h = (b - a) / n as f64;
    let mut coords: Vec<Point> = (0..=n).map(|i| [a + i as f64 * h, 0.0]).collect();
    coords[n][0] = b;
    let elements = (0..n).map(|i| [i, i + 1, NO_VERTEX]).collect();
    Mesh::from_simplices(1, coords, elements)
}

/// Criss-cross triangulation: every grid rectangle is split into four triangles
/// through its center.
pub fn generate_criss_cross(nx: usize, ny: usize, domain: Rect) -> Result<Mesh> {
    generate_criss_cross_masked(nx, ny, domain, |_, _| true)
}

/// Criss-cross triangulation restricted to the grid cells `(i, j)` for which
/// `active` returns true.
pub fn generate_criss_cross_masked(nx: usize, ny: usize, domain: Rect, active: impl Fn(usize, usize) -> bool) -> Result<Mesh> {
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidArgument("criss-cross mesh needs nx, ny >= 1".into()));
    }
    if !(domain.x0 < domain.x1 && domain.y0 < domain.y1) {
        return Err(Error::InvalidArgument("degenerate rectangle".into()));
    }
    let dx = (domain.x1 - domain.x0) / nx as f64;
    let dy = (domain.y1 - domain.y0) / ny as f64;
    let grid_x = |i: usize| if i == nx { domain.x1 } else { domain.x0 + i as f64 * dx };
    let grid_y = |j: usize| if j == ny { domain.y1 } else { domain.y0 + j as f64 * dy };

    let mut index = vec![NO_VERTEX; (nx + 1) * (ny + 1)];
    let mut coords = Vec::new();
    let mut elements = Vec::new();
    let mut grid_vertex = |i: usize, j: usize, coords: &mut Vec<Point>| {
        let k = j * (nx + 1) + i;
        if index[k] == NO_VERTEX {
            index[k] = coords.len();
            coords.push([grid_x(i), grid_y(j)]);
        }
        index[k]
    };
    for j in 0..ny {
        for i in 0..nx {
            if !active(i, j) {
                continue;
            }
            let v00 = grid_vertex(i, j, &mut coords);
            let v10 = grid_vertex(i + 1, j, &mut coords);
            let v11 = grid_vertex(i + 1, j + 1, &mut coords);
            let v01 = grid_vertex(i, j + 1, &mut coords);
            let c = coords.len();
            coords.push([0.5 * (grid_x(i) + grid_x(i + 1)), 0.5 * (grid_y(j) + grid_y(j + 1))]);
            elements.push([v00, v10, c]);
            elements.push([v10, v11, c]);
            elements.push([v11, v01, c]);
            elements.push([v01, v00, c]);
        }
    }
    Mesh::from_simplices(2, coords, elements)
}

/// Wind tunnel `(0, 3) x (0, 1)` with a step of height 0.2 starting at x = 0.6.
/// The grid must resolve both step coordinates exactly.
pub fn generate_forward_step(nx: usize, ny: usize) -> Result<Mesh> {
    let domain = Rect::new(0.0, 3.0, 0.0, 1.0);
    let sx = 0.6 * nx as f64 / 3.0;
    let sy = 0.2 * ny as f64;
    if (sx - sx.round()).abs() > 1e-9 || (sy - sy.round()).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "forward-step grid {nx}x{ny} does not align with the step"
        )));
    }
    let (si, sj) = (sx.round() as usize, sy.round() as usize);
    generate_criss_cross_masked(nx, ny, domain, |i, j| !(i >= si && j < sj))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn interval_generator() {
        let m = generate_interval(1, 0.0, 1.0).unwrap();
        assert_eq!(m.n_elements(), 1);
        assert_eq!(m.coords().iter().map(|p| p[0]).collect::<Vec<_>>(), vec![0.0, 1.0]);

        let m = generate_interval(4, 0.0, 2.0).unwrap();
        let xs: Vec<f64> = m.coords().iter().map(|p| p[0]).collect();
        assert_eq!(xs, vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(m.vertex_class(0), VertexClass::Fixed);
        assert_eq!(m.vertex_class(4), VertexClass::Fixed);
        assert_eq!(m.vertex_class(2), VertexClass::Interior);
        assert_eq!(m.faces(0)[0], Face::Boundary(BoundaryTag::Left));
        assert_eq!(m.faces(3)[1], Face::Boundary(BoundaryTag::Right));

        let m = generate_interval(100, -5.0, 5.0).unwrap();
        let hmin = (0..100).map(|e| m.element_geometry(m.coords(), e, 0.0).unwrap().volume).fold(f64::INFINITY, f64::min);
        assert!(close(hmin, 0.1, 1e-12));

        assert!(generate_interval(0, 0.0, 1.0).is_err());
        assert!(generate_interval(3, 1.0, 1.0).is_err());
    }

    #[test]
    fn criss_cross_counts() {
        for (nx, ny, ne, nv) in [(1, 1, 4, 5), (10, 10, 400, 221), (2, 2, 16, 13)] {
            let m = generate_criss_cross(nx, ny, Rect::new(0.0, 4.0, 0.0, 4.0)).unwrap();
            assert_eq!(m.n_elements(), ne);
            assert_eq!(m.n_vertices(), nv);
        }
        assert!(generate_criss_cross(0, 2, Rect::new(0.0, 1.0, 0.0, 1.0)).is_err());
        assert!(generate_criss_cross(2, 2, Rect::new(0.0, 0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn criss_cross_boundary_classes() {
        let m = generate_criss_cross(2, 2, Rect::new(0.0, 1.0, 0.0, 1.0)).unwrap();
        for (v, p) in m.coords().iter().enumerate() {
            let on_x = p[0] == 0.0 || p[0] == 1.0;
            let on_y = p[1] == 0.0 || p[1] == 1.0;
            match m.vertex_class(v) {
                VertexClass::Fixed => assert!(on_x && on_y),
                VertexClass::Sliding { tangent } => {
                    assert!(on_x ^ on_y);
                    if on_x {
                        assert!(tangent[0].abs() < 1e-14);
                    } else {
                        assert!(tangent[1].abs() < 1e-14);
                    }
                }
                VertexClass::Interior => assert!(!on_x && !on_y),
            }
        }
    }

    #[test]
    fn neighbors_are_symmetric() {
        let m = generate_criss_cross(3, 2, Rect::new(0.0, 3.0, 0.0, 2.0)).unwrap();
        let m = m.make_periodic(0).unwrap().make_periodic(1).unwrap();
        for e in 0..m.n_elements() {
            for (f, face) in m.faces(e).iter().enumerate() {
                let l = face.neighbor().expect("fully periodic mesh has no boundary");
                let back = m.faces(l.element)[l.face].neighbor().unwrap();
                assert_eq!(back, FaceLink { element: e, face: f });
            }
        }
        // Every edge has two incident elements once periodic.
        assert!(m.edges().iter().all(|e| e.right.is_some()));
        assert_eq!(m.edges().len(), 3 * m.n_elements() / 2);
    }

    #[test]
    fn right_triangle_geometry() {
        let g = ElementGeometry::new(2, [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(close(g.volume, 0.5, 1e-15));
        assert!(close(g.inradius, (2.0 - 2f64.sqrt()) / 2.0, 1e-15));
        let mut s = [0.0; 2];
        for f in 0..3 {
            let n = g.normals[f];
            assert!(close(n[0].hypot(n[1]), 1.0, 1e-15));
            s[0] += g.face_lengths[f] * n[0];
            s[1] += g.face_lengths[f] * n[1];
        }
        assert!(s[0].abs() < 1e-15 && s[1].abs() < 1e-15);
        assert!(ElementGeometry::new(2, [[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).is_none());
    }

    #[test]
    fn min_inradius_values() {
        let m = generate_interval(20, 0.0, 2.0).unwrap();
        assert!(close(m.min_inradius(m.coords()).unwrap(), 0.05, 1e-14));
        let m = generate_criss_cross(1, 1, Rect::new(0.0, 1.0, 0.0, 1.0)).unwrap();
        // Quarter triangle: base 1, legs sqrt(2)/2, area 1/4.
        let r = 2.0 * 0.25 / (1.0 + 2f64.sqrt());
        assert!(close(m.min_inradius(m.coords()).unwrap(), r, 1e-15));
    }

    #[test]
    fn tiling_volume() {
        let m = generate_forward_step(15, 5).unwrap();
        assert!(close(m.domain_volume(), 3.0 - 2.4 * 0.2, 1e-12));
        let corner = m.coords().iter().position(|p| close(p[0], 0.6, 1e-14) && close(p[1], 0.2, 1e-14)).unwrap();
        assert_eq!(m.vertex_class(corner), VertexClass::Fixed);
        assert!(generate_forward_step(7, 5).is_err());
    }

    #[test]
    fn locate_vertex_and_barycenter() {
        let m = generate_criss_cross(4, 4, Rect::new(0.0, 1.0, 0.0, 1.0)).unwrap();
        let g = m.element_geometry(m.coords(), 7, 0.0).unwrap();
        let loc = m.locate_point(m.coords(), g.barycenter, Some(0));
        assert_eq!(loc.element, 7);
        for l in &loc.barycentric {
            assert!(close(*l, 1.0 / 3.0, 1e-12));
        }
        let v = m.element(7)[1];
        let loc = m.locate_point(m.coords(), m.coords()[v], Some(30));
        assert!(m.element(loc.element).contains(&v));
        assert!(loc.barycentric.iter().any(|l| close(*l, 1.0, 1e-12)));
        let far = m.locate_point(m.coords(), [2.0, 0.5], None);
        assert!(far.outside);
    }

    #[test]
    fn vtk_has_expected_sections() {
        let m = generate_criss_cross(1, 1, Rect::new(0.0, 1.0, 0.0, 1.0)).unwrap();
        let mut buf = Vec::new();
        let data = vec![1.0; 4];
        m.write_vtk(&mut buf, m.coords(), &[("rho", &data)]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.contains("POINTS 5 double"));
        assert!(s.contains("CELLS 4 16"));
        assert!(s.contains("CELL_TYPES 4"));
        assert!(s.contains("SCALARS rho double 1"));
    }
}
