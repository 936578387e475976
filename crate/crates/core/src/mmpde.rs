//! Metric-driven mesh movement. A metric tensor is recovered from the current
//! solution; the computational coordinates then follow the gradient flow of a
//! discrete equidistribution/alignment energy (with the physical mesh frozen),
//! and the new physical mesh is obtained by inverting the resulting
//! piecewise-linear correspondence at the reference computational vertices.

use nalgebra::{DMatrix, DVector, Matrix2, SymmetricEigen};

use crate::error::{Error, Result};
use crate::mesh::{ElementGeometry, Mesh, Point, VertexClass};
use crate::physics::{AdaptationVariable, ConservationLaw};
use crate::solver::DgState;

/// Symmetric tensor; only the leading `d x d` block is meaningful.
pub type Tensor = [[f64; 2]; 2];

const IDENTITY: Tensor = [[1.0, 0.0], [0.0, 1.0]];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricField {
    pub dim: usize,
    pub tensors: Vec<Tensor>,
}

impl MetricField {
    pub fn uniform(dim: usize, n_vertices: usize, scale: f64) -> Self {
        let mut t = [[0.0; 2]; 2];
        for (i, row) in t.iter_mut().enumerate().take(dim) {
            row[i] = scale;
        }
        Self {
            dim,
            tensors: vec![t; n_vertices],
        }
    }

    /// Mean of the vertex tensors of element `e`.
    pub fn element_mean(&self, mesh: &Mesh, e: usize) -> Tensor {
        let verts = mesh.element(e);
        let nf = self.dim + 1;
        let mut m = [[0.0; 2]; 2];
        for &v in &verts[..nf] {
            add_scaled(&mut m, &self.tensors[v], 1.0 / nf as f64);
        }
        m
    }

    pub fn eigenvalues(&self, v: usize) -> [f64; 2] {
        eigenvalues(self.dim, &self.tensors[v])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricParams {
    /// Sensitivity of the gas-dynamics adaptation scalar.
    pub beta: f64,
    /// Low-pass smoothing sweeps applied to the metric.
    pub sweeps: usize,
}

impl MetricParams {
    pub fn new(dim: usize) -> Self {
        Self {
            beta: if dim == 1 { 10.0 } else { 1.0 },
            sweeps: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmpdeParams {
    /// Time scale of the mesh equation.
    pub tau: f64,
    /// Explicit Euler sub-steps per time step.
    pub substeps: usize,
    pub max_halvings: usize,
}

impl Default for MmpdeParams {
    fn default() -> Self {
        Self {
            tau: 0.1,
            substeps: 5,
            max_halvings: 10,
        }
    }
}

fn add_scaled(a: &mut Tensor, b: &Tensor, s: f64) {
    for i in 0..2 {
        for j in 0..2 {
            a[i][j] += s * b[i][j];
        }
    }
}

fn det(dim: usize, m: &Tensor) -> f64 {
    if dim == 1 {
        m[0][0]
    } else {
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }
}

fn inverse(dim: usize, m: &Tensor) -> Option<Tensor> {
    let d = det(dim, m);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    Some(if dim == 1 {
        [[1.0 / d, 0.0], [0.0, 0.0]]
    } else {
        [[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]]
    })
}

fn matmul(dim: usize, a: &Tensor, b: &Tensor) -> Tensor {
    let mut c = [[0.0; 2]; 2];
    for i in 0..dim {
        for j in 0..dim {
            for k in 0..dim {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

fn transpose(a: &Tensor) -> Tensor {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

fn eigenvalues(dim: usize, m: &Tensor) -> [f64; 2] {
    if dim == 1 {
        return [m[0][0], m[0][0]];
    }
    let e = SymmetricEigen::new(Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1]));
    let (a, b) = (e.eigenvalues[0], e.eigenvalues[1]);
    [a.min(b), a.max(b)]
}

/// Columns are the edge vectors `v_i - v_0`, `i = 1..d`.
fn edge_matrix(dim: usize, v: &[Point; 3]) -> Tensor {
    let mut e = [[0.0; 2]; 2];
    for c in 0..dim {
        for a in 0..dim {
            e[a][c] = v[c + 1][a] - v[0][a];
        }
    }
    e
}

/// Volume-weighted average of adjacent cell values at every vertex.
pub fn nodal_average(mesh: &Mesh, geoms: &[ElementGeometry], values: &[f64]) -> Vec<f64> {
    (0..mesh.n_vertices())
        .map(|v| {
            let (mut num, mut den) = (0.0, 0.0);
            for &(e, _) in mesh.vertex_elements(v) {
                num += geoms[e].volume * values[e];
                den += geoms[e].volume;
            }
            num / den
        })
        .collect()
}

/// Gas-dynamics adaptation scalar from nodal density and total energy.
pub fn adaptation_scalar_euler(rho: &[f64], energy: &[f64], beta: f64) -> Result<Vec<f64>> {
    let rmax = rho.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let emax = energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(rmax > 0.0 && emax > 0.0) {
        return Err(Error::Numerical("adaptation scalar needs positive density and energy maxima".into()));
    }
    Ok(rho
        .iter()
        .zip(energy)
        .map(|(r, e)| 0.5 * (1.0 + beta * (r / rmax).powi(2)).sqrt() + 0.5 * (1.0 + beta * (e / emax).powi(2)).sqrt())
        .collect())
}

fn patch(mesh: &Mesh, v: usize, min_points: usize) -> Vec<usize> {
    let mut p = vec![v];
    p.extend_from_slice(mesh.vertex_neighbors(v));
    if p.len() < min_points {
        let ring: Vec<usize> = p.clone();
        for &w in &ring[1..] {
            for &u in mesh.vertex_neighbors(w) {
                if !p.contains(&u) {
                    p.push(u);
                }
            }
        }
    }
    p
}

/// Hessian at every vertex from a least-squares quadratic fit over the
/// vertex patch (one ring, widened to two rings when too small).
pub fn recover_hessian(mesh: &Mesh, coords: &[Point], values: &[f64]) -> Vec<Tensor> {
    let dim = mesh.dim();
    let (n_unknowns, min_points) = if dim == 1 { (3, 3) } else { (6, 6) };
    let mut out: Vec<Tensor> = (0..mesh.n_vertices())
        .map(|v| {
            let pts = patch(mesh, v, min_points);
            let c = coords[v];
            let hs = pts
                .iter()
                .map(|&w| ((coords[w][0] - c[0]).powi(2) + (coords[w][1] - c[1]).powi(2)).sqrt())
                .fold(0.0, f64::max);
            if pts.len() < n_unknowns || hs == 0.0 {
                log::warn!("vertex {v}: Hessian patch too small, using zero");
                return [[0.0; 2]; 2];
            }
            let mut a = DMatrix::zeros(pts.len(), n_unknowns);
            let mut b = DVector::zeros(pts.len());
            for (r, &w) in pts.iter().enumerate() {
                let dx = (coords[w][0] - c[0]) / hs;
                let dy = (coords[w][1] - c[1]) / hs;
                b[r] = values[w];
                if dim == 1 {
                    a.row_mut(r).copy_from_slice(&[1.0, dx, 0.5 * dx * dx]);
                } else {
                    a.row_mut(r).copy_from_slice(&[1.0, dx, dy, 0.5 * dx * dx, dx * dy, 0.5 * dy * dy]);
                }
            }
            let smax = a.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
            let qr = a.qr();
            let r = qr.r();
            if (0..n_unknowns).any(|i| r[(i, i)].abs() <= 1e-10 * smax) {
                log::warn!("vertex {v}: rank-deficient Hessian patch, using zero");
                return [[0.0; 2]; 2];
            }
            let qtb = qr.q().transpose() * b;
            let Some(z) = r.solve_upper_triangular(&qtb) else {
                return [[0.0; 2]; 2];
            };
            let s = 1.0 / (hs * hs);
            if dim == 1 {
                [[z[2] * s, 0.0], [0.0, 0.0]]
            } else {
                [[z[3] * s, z[4] * s], [z[4] * s, z[5] * s]]
            }
        })
        .collect();
    average_partners(mesh, &mut out);
    out
}

/// Periodic partner vertices share one value.
fn average_partners(mesh: &Mesh, t: &mut [Tensor]) {
    for v in 0..mesh.n_vertices() {
        if let Some(w) = mesh.periodic_partner(v) {
            if v < w {
                let mut m = t[v];
                add_scaled(&mut m, &t[w], 1.0);
                for row in m.iter_mut() {
                    for x in row.iter_mut() {
                        *x *= 0.5;
                    }
                }
                t[v] = m;
                t[w] = m;
            }
        }
    }
}

/// `det(I + |H|)^{-1/(d+4)} (I + |H|)`.
pub fn metric_from_hessian(dim: usize, h: &Tensor) -> Tensor {
    let mut m = IDENTITY;
    if dim == 1 {
        let a = 1.0 + h[0][0].abs();
        m[0][0] = a.powf(-1.0 / 5.0) * a;
        m[1][1] = 0.0;
        return m;
    }
    let e = SymmetricEigen::new(Matrix2::new(h[0][0], 0.5 * (h[0][1] + h[1][0]), 0.5 * (h[0][1] + h[1][0]), h[1][1]));
    let q = e.eigenvectors;
    let l = [1.0 + e.eigenvalues[0].abs(), 1.0 + e.eigenvalues[1].abs()];
    let scale = (l[0] * l[1]).powf(-1.0 / 6.0);
    for i in 0..2 {
        for j in 0..2 {
            m[i][j] = scale * (l[0] * q[(i, 0)] * q[(j, 0)] + l[1] * q[(i, 1)] * q[(j, 1)]);
        }
    }
    let off = 0.5 * (m[0][1] + m[1][0]);
    m[0][1] = off;
    m[1][0] = off;
    m
}

/// Vertex-adjacency low-pass filter: `M_j <- (2 M_j + sum M_i) / (2 + n_j)`.
pub fn smooth_metric(mesh: &Mesh, field: &MetricField, sweeps: usize) -> MetricField {
    let mut cur = field.tensors.clone();
    for _ in 0..sweeps {
        let mut next: Vec<Tensor> = (0..mesh.n_vertices())
            .map(|v| {
                let nb = mesh.vertex_neighbors(v);
                let mut m = [[0.0; 2]; 2];
                add_scaled(&mut m, &cur[v], 2.0);
                for &w in nb {
                    add_scaled(&mut m, &cur[w], 1.0);
                }
                let s = 1.0 / (2.0 + nb.len() as f64);
                for row in m.iter_mut() {
                    for x in row.iter_mut() {
                        *x *= s;
                    }
                }
                m
            })
            .collect();
        average_partners(mesh, &mut next);
        cur = next;
    }
    MetricField {
        dim: field.dim,
        tensors: cur,
    }
}

/// Smoothed metric for the current solution.
pub fn metric_field<const M: usize, L: ConservationLaw<M> + ?Sized>(
    mesh: &Mesh,
    coords: &[Point],
    geoms: &[ElementGeometry],
    state: &DgState<M>,
    law: &L,
    params: &MetricParams,
) -> Result<MetricField> {
    let dim = mesh.dim();
    let means: Vec<[f64; M]> = (0..mesh.n_elements()).map(|e| state.cell_average(e)).collect();
    let component = |c: usize| -> Vec<f64> {
        let v: Vec<f64> = means.iter().map(|u| u[c]).collect();
        nodal_average(mesh, geoms, &v)
    };
    let values = match law.adaptation_variable() {
        AdaptationVariable::Solution => component(0),
        AdaptationVariable::DensityEnergy => adaptation_scalar_euler(&component(0), &component(M - 1), params.beta)?,
    };
    let hess = recover_hessian(mesh, coords, &values);
    let raw = MetricField {
        dim,
        tensors: hess.iter().map(|h| metric_from_hessian(dim, h)).collect(),
    };
    Ok(smooth_metric(mesh, &raw, params.sweeps))
}

/// Per-element quantities of the frozen physical mesh.
#[derive(Clone, Debug)]
struct Frame {
    dim: usize,
    volume: Vec<f64>,
    det_e: Vec<f64>,
    inv_e: Vec<Tensor>,
    metric: Vec<Tensor>,
}

impl Frame {
    fn new(mesh: &Mesh, x: &[Point], metric: &MetricField) -> Result<Self> {
        let dim = mesh.dim();
        let ne = mesh.n_elements();
        let mut f = Frame {
            dim,
            volume: Vec::with_capacity(ne),
            det_e: Vec::with_capacity(ne),
            inv_e: Vec::with_capacity(ne),
            metric: Vec::with_capacity(ne),
        };
        for e in 0..ne {
            let em = edge_matrix(dim, &mesh.element_vertices(x, e));
            let d = det(dim, &em);
            let inv = inverse(dim, &em).filter(|_| d > 0.0).ok_or_else(|| Error::MeshTangling {
                element: e,
                volume: d,
                time: f64::NAN,
            })?;
            f.volume.push(if dim == 1 { d } else { 0.5 * d });
            f.det_e.push(d);
            f.inv_e.push(inv);
            f.metric.push(metric.element_mean(mesh, e));
        }
        Ok(f)
    }
}

/// Energy density `G` and its derivatives with respect to the computational
/// vertices of one element. Returns `None` for an inverted computational element.
fn element_terms(dim: usize, inv_e: &Tensor, det_e: f64, xi: &[Point; 3], m: &Tensor, with_gradient: bool) -> Option<(f64, [Point; 3])> {
    let eh = edge_matrix(dim, xi);
    let det_eh = det(dim, &eh);
    let r = det_eh / det_e;
    if !(r > 0.0) {
        return None;
    }
    let j = matmul(dim, &eh, inv_e);
    let minv = inverse(dim, m)?;
    let det_m = det(dim, m);
    let sq = det_m.sqrt();
    let d = dim as f64;
    let jm = matmul(dim, &j, &minv);
    let mut q = 0.0;
    for a in 0..dim {
        for b in 0..dim {
            q += jm[a][b] * j[a][b];
        }
    }
    let p = 3.0 * d / 4.0;
    let dp = d.powf(p);
    let g = sq * q.powf(p) + dp * sq * (r / sq).powf(1.5);
    let mut v = [[0.0; 2]; 3];
    if with_gradient {
        // dG/dJ = (3d/2) sqrt(det M) q^{3d/4-1} J M^{-1}; dG/d(det J) = (3/2) d^{3d/4} (det J / sqrt(det M))^{1/2}.
        let cj = 1.5 * d * sq * q.powf(p - 1.0);
        let g_det = 1.5 * dp * (r / sq).sqrt();
        let gj = [[cj * jm[0][0], cj * jm[0][1]], [cj * jm[1][0], cj * jm[1][1]]];
        let a = matmul(dim, inv_e, &transpose(&gj));
        let ehinv = inverse(dim, &eh)?;
        for i in 0..dim {
            for c in 0..dim {
                v[i + 1][c] = -a[i][c] - g_det * r * ehinv[i][c];
                v[0][c] -= v[i + 1][c];
            }
        }
    }
    Some((g, v))
}

/// Local velocity contributions `-dG/dxi_i` of one element with physical
/// vertices `x`, computational vertices `xi` and element metric `m`.
pub fn local_velocities(dim: usize, x: &[Point; 3], xi: &[Point; 3], m: &Tensor) -> Result<[Point; 3]> {
    let em = edge_matrix(dim, x);
    let d = det(dim, &em);
    let inv = inverse(dim, &em).ok_or_else(|| Error::Numerical("singular physical element".into()))?;
    element_terms(dim, &inv, d, xi, m, true)
        .map(|(_, v)| v)
        .ok_or_else(|| Error::Numerical("inverted computational element".into()))
}

fn energy_with(mesh: &Mesh, frame: &Frame, xi: &[Point]) -> Option<f64> {
    let mut total = 0.0;
    for e in 0..mesh.n_elements() {
        let (g, _) = element_terms(frame.dim, &frame.inv_e[e], frame.det_e[e], &mesh.element_vertices(xi, e), &frame.metric[e], false)?;
        total += frame.volume[e] * g;
    }
    Some(total)
}

/// Discrete energy `sum_K |K| G_K` of the computational coordinates `xi`
/// relative to the physical mesh `x`.
pub fn mesh_energy(mesh: &Mesh, x: &[Point], xi: &[Point], metric: &MetricField) -> Result<f64> {
    let frame = Frame::new(mesh, x, metric)?;
    energy_with(mesh, &frame, xi).ok_or_else(|| Error::Numerical("inverted computational element".into()))
}

fn velocities_with(mesh: &Mesh, frame: &Frame, metric: &MetricField, xi: &[Point], tau: f64) -> Option<Vec<Point>> {
    let dim = frame.dim;
    let nf = dim + 1;
    let mut acc = vec![[0.0; 2]; mesh.n_vertices()];
    for e in 0..mesh.n_elements() {
        let (_, v) = element_terms(dim, &frame.inv_e[e], frame.det_e[e], &mesh.element_vertices(xi, e), &frame.metric[e], true)?;
        for (i, &vert) in mesh.element(e)[..nf].iter().enumerate() {
            acc[vert][0] += frame.volume[e] * v[i][0];
            acc[vert][1] += frame.volume[e] * v[i][1];
        }
    }
    for v in 0..mesh.n_vertices() {
        if let Some(w) = mesh.periodic_partner(v) {
            if v < w {
                let s = [acc[v][0] + acc[w][0], acc[v][1] + acc[w][1]];
                acc[v] = s;
                acc[w] = s;
            }
        }
    }
    for (v, a) in acc.iter_mut().enumerate() {
        match mesh.vertex_class(v) {
            VertexClass::Interior => {}
            VertexClass::Fixed => *a = [0.0, 0.0],
            VertexClass::Sliding { tangent } => {
                let s = a[0] * tangent[0] + a[1] * tangent[1];
                *a = [s * tangent[0], s * tangent[1]];
            }
        }
        let p = det(dim, &metric.tensors[v]).powf(0.25) / tau;
        a[0] *= p;
        a[1] *= p;
    }
    Some(acc)
}

/// Nodal computational velocities `d xi_j / dt` with boundary constraints applied.
pub fn mesh_velocities(mesh: &Mesh, x: &[Point], xi: &[Point], metric: &MetricField, tau: f64) -> Result<Vec<Point>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("mesh time scale must be positive, got {tau}")));
    }
    let frame = Frame::new(mesh, x, metric)?;
    velocities_with(mesh, &frame, metric, xi, tau).ok_or_else(|| Error::Numerical("inverted computational element".into()))
}

/// Outcome of one mesh-movement step.
#[derive(Clone, Debug, PartialEq)]
pub struct MoveReport {
    pub substeps: usize,
    pub halvings: usize,
    pub frozen: bool,
}

/// Mesh mover holding the reference computational mesh.
#[derive(Clone, Debug)]
pub struct MeshMover {
    pub params: MmpdeParams,
    reference: Vec<Point>,
    level_hint: usize,
}

impl MeshMover {
    pub fn new(reference: Vec<Point>, params: MmpdeParams) -> Result<Self> {
        if !(params.tau > 0.0) || params.substeps == 0 {
            return Err(Error::InvalidArgument("mesh mover needs tau > 0 and at least one sub-step".into()));
        }
        Ok(Self {
            params,
            reference,
            level_hint: 0,
        })
    }

    pub fn reference(&self) -> &[Point] {
        &self.reference
    }

    /// Integrates the mesh equation over `dt` from the reference computational
    /// mesh and returns the computational coordinates, or `None` if the step
    /// had to be abandoned.
    pub fn integrate(&mut self, mesh: &Mesh, x: &[Point], metric: &MetricField, dt: f64) -> Result<(Option<Vec<Point>>, MoveReport)> {
        let frame = Frame::new(mesh, x, metric)?;
        let mut xi = self.reference.clone();
        let Some(mut energy) = energy_with(mesh, &frame, &xi) else {
            return Ok((None, MoveReport { substeps: 0, halvings: 0, frozen: true }));
        };
        let max_level = self.params.max_halvings;
        let mut level = self.level_hint.min(max_level);
        let mut t = 0.0;
        let mut substeps = 0;
        let mut halvings = 0;
        let mut trial = xi.clone();
        while t < dt * (1.0 - 1e-12) {
            let h = (dt / (self.params.substeps as f64 * (1u64 << level) as f64)).min(dt - t);
            let Some(vel) = velocities_with(mesh, &frame, metric, &xi, self.params.tau) else {
                return Ok((None, MoveReport { substeps, halvings, frozen: true }));
            };
            for ((tr, x0), v) in trial.iter_mut().zip(&xi).zip(&vel) {
                tr[0] = x0[0] + h * v[0];
                tr[1] = x0[1] + h * v[1];
            }
            match energy_with(mesh, &frame, &trial) {
                Some(en) if en <= energy * (1.0 + 1e-14) => {
                    std::mem::swap(&mut xi, &mut trial);
                    energy = en;
                    t += h;
                    substeps += 1;
                }
                _ => {
                    if level >= max_level {
                        log::warn!("mesh equation did not accept a sub-step after {max_level} halvings; mesh frozen for this step");
                        self.level_hint = max_level;
                        return Ok((None, MoveReport { substeps, halvings, frozen: true }));
                    }
                    level += 1;
                    halvings += 1;
                }
            }
        }
        self.level_hint = if halvings == 0 { level.saturating_sub(1) } else { level };
        Ok((Some(xi), MoveReport { substeps, halvings, frozen: false }))
    }

    /// New physical coordinates after one step of length `dt`.
    pub fn step(&mut self, mesh: &Mesh, x: &[Point], metric: &MetricField, dt: f64, time: f64) -> Result<(Vec<Point>, MoveReport)> {
        let (xi, report) = self.integrate(mesh, x, metric, dt)?;
        let Some(xi) = xi else {
            return Ok((x.to_vec(), report));
        };
        let mut out = map_back(mesh, x, &xi, &self.reference);
        for v in 0..mesh.n_vertices() {
            match mesh.vertex_class(v) {
                VertexClass::Fixed => out[v] = x[v],
                VertexClass::Sliding { tangent } => {
                    let d = [out[v][0] - x[v][0], out[v][1] - x[v][1]];
                    let s = d[0] * tangent[0] + d[1] * tangent[1];
                    out[v] = [x[v][0] + s * tangent[0], x[v][1] + s * tangent[1]];
                }
                VertexClass::Interior => {}
            }
        }
        for v in 0..mesh.n_vertices() {
            if let Some(w) = mesh.periodic_partner(v) {
                if v < w {
                    out[w] = [out[v][0] + x[w][0] - x[v][0], out[v][1] + x[w][1] - x[v][1]];
                }
            }
        }
        mesh.check_valid(&out, time)?;
        Ok((out, report))
    }
}

/// Evaluates the piecewise-linear map with nodal values `x` on the mesh with
/// coordinates `xi` at the points `targets`.
pub fn map_back(mesh: &Mesh, x: &[Point], xi: &[Point], targets: &[Point]) -> Vec<Point> {
    let nf = mesh.dim() + 1;
    targets
        .iter()
        .enumerate()
        .map(|(v, &p)| {
            let hint = mesh.vertex_elements(v).first().map(|&(e, _)| e);
            let loc = mesh.locate_point(xi, p, hint);
            let verts = mesh.element(loc.element);
            let mut q = [0.0; 2];
            for i in 0..nf {
                q[0] += loc.barycentric[i] * x[verts[i]][0];
                q[1] += loc.barycentric[i] * x[verts[i]][1];
            }
            q
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_criss_cross, generate_interval, Rect};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn adaptation_scalar_values() {
        let s = adaptation_scalar_euler(&[1.0, 0.5], &[2.0, 1.0], 0.0).unwrap();
        assert_eq!(s, vec![1.0, 1.0]);
        let s = adaptation_scalar_euler(&[1.0, 0.5], &[2.0, 1.0], 1.0).unwrap();
        assert!(close(s[0], 2f64.sqrt(), 1e-15));
        let s = adaptation_scalar_euler(&[1.0, 0.5], &[2.0, 1.0], 100.0).unwrap();
        assert!(close(s[1], 26f64.sqrt(), 1e-14));
        assert!(adaptation_scalar_euler(&[0.0, 0.0], &[1.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn nodal_average_examples() {
        let mesh = generate_interval(2, 0.0, 2.0).unwrap();
        let geoms = mesh.geometries(mesh.coords(), 0.0).unwrap();
        assert_eq!(nodal_average(&mesh, &geoms, &[0.0, 1.0]), vec![0.0, 0.5, 1.0]);
        let mesh = generate_criss_cross(3, 2, Rect::new(0.0, 1.0, 0.0, 1.0)).unwrap();
        let geoms = mesh.geometries(mesh.coords(), 0.0).unwrap();
        let c = vec![2.5; mesh.n_elements()];
        assert!(nodal_average(&mesh, &geoms, &c).iter().all(|&v| close(v, 2.5, 1e-14)));
    }

    #[test]
    fn hessian_recovery_reproduces_quadratics() {
        let mesh = generate_criss_cross(6, 6, Rect::new(0.0, 1.0, 0.0, 1.0)).unwrap();
        let x = mesh.coords();
        let interior = |v: usize| mesh.vertex_class(v) == VertexClass::Interior;
        let lin: Vec<f64> = x.iter().map(|p| 1.0 + 2.0 * p[0] - p[1]).collect();
        for h in recover_hessian(&mesh, x, &lin) {
            assert!(h.iter().flatten().all(|v| v.abs() < 1e-10), "{h:?}");
        }
        let q: Vec<f64> = x.iter().map(|p| p[0] * p[0] + p[1] * p[1]).collect();
        for (v, h) in recover_hessian(&mesh, x, &q).iter().enumerate().filter(|(v, _)| interior(*v)) {
            assert!(close(h[0][0], 2.0, 1e-9) && close(h[1][1], 2.0, 1e-9) && h[0][1].abs() < 1e-9, "{v}: {h:?}");
        }
        let q: Vec<f64> = x.iter().map(|p| p[0] * p[1]).collect();
        for (_, h) in recover_hessian(&mesh, x, &q).iter().enumerate().filter(|(v, _)| interior(*v)) {
            assert!(close(h[0][1], 1.0, 1e-9) && h[0][0].abs() < 1e-9 && h[1][1].abs() < 1e-9);
        }
        let mesh = generate_interval(8, 0.0, 1.0).unwrap();
        let q: Vec<f64> = mesh.coords().iter().map(|p| 3.0 * p[0] * p[0] - p[0]).collect();
        for h in recover_hessian(&mesh, mesh.coords(), &q) {
            assert!(close(h[0][0], 6.0, 1e-9));
        }
    }

    #[test]
    fn metric_formula() {
        let m = metric_from_hessian(2, &[[0.0; 2]; 2]);
        assert!(close(m[0][0], 1.0, 1e-15) && close(m[1][1], 1.0, 1e-15) && m[0][1].abs() < 1e-15);
        let m = metric_from_hessian(1, &[[3.0, 0.0], [0.0, 0.0]]);
        assert!(close(m[0][0], 4f64.powf(0.8), 1e-14));
        assert!(close(m[0][0], 3.03143, 1e-5));
        let m = metric_from_hessian(2, &[[-2.0, 0.0], [0.0, 0.0]]);
        let s = 3f64.powf(-1.0 / 6.0);
        assert!(close(m[0][0], 3.0 * s, 1e-14) && close(m[1][1], s, 1e-14) && m[0][1].abs() < 1e-14);
    }

    #[test]
    fn smoothing_is_a_contraction_of_the_spectrum() {
        let mesh = generate_criss_cross(4, 4, Rect::new(0.0, 1.0, 0.0, 1.0)).unwrap();
        let field = MetricField {
            dim: 2,
            tensors: (0..mesh.n_vertices())
                .map(|v| metric_from_hessian(2, &[[(v as f64).sin() * 30.0, (v as f64 * 0.3).cos() * 10.0], [(v as f64 * 0.3).cos() * 10.0, v as f64]]))
                .collect(),
        };
        assert_eq!(smooth_metric(&mesh, &field, 0), field);
        let spectrum = |f: &MetricField| {
            (0..mesh.n_vertices())
                .map(|v| f.eigenvalues(v))
                .fold((f64::INFINITY, 0.0f64), |(lo, hi), e| (lo.min(e[0]), hi.max(e[1])))
        };
        let mut cur = field;
        let mut prev = spectrum(&cur);
        for _ in 0..4 {
            cur = smooth_metric(&mesh, &cur, 1);
            let s = spectrum(&cur);
            assert!(s.0 >= prev.0 - 1e-12 && s.1 <= prev.1 + 1e-12 && s.0 > 0.0);
            prev = s;
        }
        let c = MetricField::uniform(2, mesh.n_vertices(), 3.0);
        assert_eq!(smooth_metric(&mesh, &c, 3).tensors, c.tensors);
    }

    #[test]
    fn energy_hand_value_and_scaling() {
        let mesh = Mesh::from_simplices(2, vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap();
        let metric = MetricField::uniform(2, 3, 1.0);
        let e = mesh_energy(&mesh, mesh.coords(), mesh.coords(), &metric).unwrap();
        assert!(close(e / 0.5, 2f64.powf(2.5), 1e-13));

        let mesh = generate_criss_cross(3, 3, Rect::new(0.0, 1.0, 0.0, 1.0)).unwrap();
        let xi: Vec<Point> = mesh.coords().iter().map(|p| [p[0] + 0.02 * (7.0 * p[1]).sin() * p[0] * (1.0 - p[0]), p[1]]).collect();
        let m1 = MetricField::uniform(2, mesh.n_vertices(), 1.0);
        let m4 = MetricField::uniform(2, mesh.n_vertices(), 4.0);
        let e1 = mesh_energy(&mesh, mesh.coords(), &xi, &m1).unwrap();
        let e4 = mesh_energy(&mesh, mesh.coords(), &xi, &m4).unwrap();
        assert!(close(e4 / e1, 4f64.powf(-0.5), 1e-13));
    }

    #[test]
    fn velocities_sum_to_zero_and_vanish_at_identity() {
        let v = local_velocities(2, &[[0.0, 0.0], [1.0, 0.2], [0.3, 0.9]], &[[0.1, 0.0], [1.1, 0.1], [0.2, 1.0]], &[[2.0, 0.3], [0.3, 1.0]]).unwrap();
        assert!((v[0][0] + v[1][0] + v[2][0]).abs() < 1e-14);
        assert!((v[0][1] + v[1][1] + v[2][1]).abs() < 1e-14);

        let mesh = generate_criss_cross(5, 5, Rect::new(0.0, 2.0, 0.0, 2.0)).unwrap();
        let metric = MetricField::uniform(2, mesh.n_vertices(), 1.0);
        let vel = mesh_velocities(&mesh, mesh.coords(), mesh.coords(), &metric, 0.1).unwrap();
        for (v, w) in vel.iter().enumerate() {
            assert!(w[0].abs() + w[1].abs() <= 1e-10 * 2.0 / 0.1);
            if mesh.vertex_class(v) == VertexClass::Fixed {
                assert_eq!(*w, [0.0, 0.0]);
            }
        }
    }

    #[test]
    fn velocity_pattern_is_rotation_equivariant() {
        // J a rotation times a scalar: rotating the computational element
        // rotates the velocity contributions.
        let x = [[0.0, 0.0], [1.0, 0.0], [0.5, 3f64.sqrt() / 2.0]];
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = |p: Point| [1.3 * (c * p[0] - s * p[1]), 1.3 * (s * p[0] + c * p[1])];
        let xi = x.map(rot);
        let v = local_velocities(2, &x, &xi, &IDENTITY).unwrap();
        let v0 = local_velocities(2, &x, &x.map(|p| [1.3 * p[0], 1.3 * p[1]]), &IDENTITY).unwrap();
        for i in 0..3 {
            let r = [c * v0[i][0] - s * v0[i][1], s * v0[i][0] + c * v0[i][1]];
            assert!(close(v[i][0], r[0], 1e-12) && close(v[i][1], r[1], 1e-12));
        }
    }

    #[test]
    fn scaling_invariance_of_velocities() {
        let mesh = generate_criss_cross(4, 4, Rect::new(0.0, 1.0, 0.0, 1.0)).unwrap();
        let xi: Vec<Point> = mesh
            .coords()
            .iter()
            .map(|p| [p[0] + 0.03 * (3.0 * p[1]).sin() * p[0] * (1.0 - p[0]), p[1] + 0.02 * p[0] * p[1] * (1.0 - p[1])])
            .collect();
        let base = MetricField {
            dim: 2,
            tensors: mesh.coords().iter().map(|p| metric_from_hessian(2, &[[10.0 * p[0], 3.0], [3.0, -5.0 * p[1]]])).collect(),
        };
        let v1 = mesh_velocities(&mesh, mesh.coords(), &xi, &base, 0.1).unwrap();
        for c in [0.1, 16.0] {
            let scaled = MetricField {
                dim: 2,
                tensors: base.tensors.iter().map(|t| [[c * t[0][0], c * t[0][1]], [c * t[1][0], c * t[1][1]]]).collect(),
            };
            let vc = mesh_velocities(&mesh, mesh.coords(), &xi, &scaled, 0.1).unwrap();
            let scale = v1.iter().map(|v| v[0].abs().max(v[1].abs())).fold(0.0, f64::max);
            for (a, b) in v1.iter().zip(&vc) {
                assert!((a[0] - b[0]).abs() <= 1e-10 * scale && (a[1] - b[1]).abs() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn uniform_metric_keeps_generator_mesh() {
        let mesh = generate_criss_cross(4, 4, Rect::new(0.0, 1.0, 0.0, 1.0)).unwrap();
        let metric = MetricField::uniform(2, mesh.n_vertices(), 2.0);
        let mut mover = MeshMover::new(mesh.coords().to_vec(), MmpdeParams::default()).unwrap();
        let (x1, report) = mover.step(&mesh, mesh.coords(), &metric, 0.01, 0.0).unwrap();
        assert!(!report.frozen);
        for (a, b) in x1.iter().zip(mesh.coords()) {
            assert!((a[0] - b[0]).abs() < 1e-10 && (a[1] - b[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn two_element_equidistribution() {
        // Stationary point: m1 h1 = m2 h2 with h1 + h2 = 1.
        let mesh = generate_interval(2, 0.0, 1.0).unwrap();
        let (m1, m2) = (4.0, 1.0);
        let mid = 2.5;
        let metric = MetricField {
            dim: 1,
            tensors: [m1, mid, m2].iter().map(|&m| [[m, 0.0], [0.0, 0.0]]).collect(),
        };
        // Element metrics are vertex means.
        let k0 = 0.5 * (m1 + mid);
        let k1 = 0.5 * (mid + m2);
        let mut x = mesh.coords().to_vec();
        let mut mover = MeshMover::new(mesh.coords().to_vec(), MmpdeParams { tau: 0.1, substeps: 20, max_halvings: 10 }).unwrap();
        for _ in 0..200 {
            x = mover.step(&mesh, &x, &metric, 0.05, 0.0).unwrap().0;
        }
        // Equidistribution in the 1D metric: sqrt(m) h is equal across elements.
        let h0 = x[1][0] - x[0][0];
        let h1 = x[2][0] - x[1][0];
        let expected_h0 = k1.sqrt() / (k0.sqrt() + k1.sqrt());
        assert!(close(h0, expected_h0, 1e-6), "h0 = {h0}, expected {expected_h0}");
        assert!(close(h0 * k0.sqrt(), h1 * k1.sqrt(), 1e-6));
    }

    #[test]
    fn mesh_concentrates_where_metric_is_large() {
        let mesh = generate_interval(40, -1.0, 1.0).unwrap();
        let metric = MetricField {
            dim: 1,
            tensors: mesh.coords().iter().map(|p| [[1.0 + 50.0 * (-(20.0 * p[0]).powi(2)).exp(), 0.0], [0.0, 0.0]]).collect(),
        };
        let mut x = mesh.coords().to_vec();
        let mut mover = MeshMover::new(mesh.coords().to_vec(), MmpdeParams::default()).unwrap();
        let h_center = |x: &[Point]| x[21][0] - x[20][0];
        let mut prev = h_center(&x);
        for _ in 0..5 {
            x = mover.step(&mesh, &x, &metric, 0.01, 0.0).unwrap().0;
            let h = h_center(&x);
            assert!(h < prev);
            prev = h;
        }
    }
}
