//! Quasi-Lagrangian DG discretization on moving simplicial meshes.
//!
//! The solution on element `K` is `u_h = sum_j c_j phi_j(F_K^{-1}(x))` with a
//! fixed orthonormal reference basis, so the mass matrix is `|K|/|K^| I` and the
//! pulled-back basis is transported by the (piecewise linear) mesh velocity.
//! The time integrator advances the mass-weighted coefficients
//! `w = |K|/|K^| c`, which keeps the discrete total mass exactly conserved on
//! moving meshes while reproducing constant states exactly.

use std::sync::Arc;

use crate::approx::{edge_quadrature, element_quadrature, reference_volume, simplex_rule, Basis, QuadratureRule};
use crate::error::{Error, Result};
use crate::mesh::{reference_face_point, BoundaryTag, ElementGeometry, Face, Mesh, Point};
use crate::physics::{ConservationLaw, Inadmissible};

/// Coefficient table of a DG solution: `L` coefficients of `M` components per element.
#[derive(Clone, Debug, PartialEq)]
pub struct DgState<const M: usize> {
    pub dim: usize,
    pub degree: usize,
    pub time: f64,
    n_basis: usize,
    coeffs: Vec<[f64; M]>,
}

impl<const M: usize> DgState<M> {
    pub fn zeros(dim: usize, degree: usize, n_basis: usize, n_elements: usize) -> Self {
        Self {
            dim,
            degree,
            time: 0.0,
            n_basis,
            coeffs: vec![[0.0; M]; n_basis * n_elements],
        }
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn n_elements(&self) -> usize {
        self.coeffs.len() / self.n_basis
    }

    pub fn element(&self, e: usize) -> &[[f64; M]] {
        &self.coeffs[e * self.n_basis..(e + 1) * self.n_basis]
    }

    pub fn element_mut(&mut self, e: usize) -> &mut [[f64; M]] {
        &mut self.coeffs[e * self.n_basis..(e + 1) * self.n_basis]
    }

    pub fn as_slice(&self) -> &[[f64; M]] {
        &self.coeffs
    }

    /// Cell average over `K`: the constant-mode coefficient times `1/sqrt|K^|`.
    pub fn cell_average(&self, e: usize) -> [f64; M] {
        let s = 1.0 / reference_volume(self.dim).sqrt();
        let c = self.coeffs[e * self.n_basis];
        let mut out = [0.0; M];
        for (o, v) in out.iter_mut().zip(c) {
            *o = v * s;
        }
        out
    }

    /// Value at reference coordinates `xi` of element `e`.
    pub fn evaluate(&self, basis: &Basis, e: usize, xi: Point) -> [f64; M] {
        let mut phi = [0.0; crate::approx::MAX_BASIS];
        basis.eval(xi, &mut phi[..self.n_basis]);
        combine(self.element(e), &phi[..self.n_basis])
    }

    /// Total integral `sum_K int_K u_h` of every component.
    pub fn total_mass(&self, geoms: &[ElementGeometry]) -> [f64; M] {
        let mut out = [0.0; M];
        for (e, g) in geoms.iter().enumerate() {
            let avg = self.cell_average(e);
            for c in 0..M {
                out[c] += g.volume * avg[c];
            }
        }
        out
    }
}

#[inline]
pub(crate) fn combine<const M: usize>(coeffs: &[[f64; M]], phi: &[f64]) -> [f64; M] {
    let mut u = [0.0; M];
    for (c, p) in coeffs.iter().zip(phi) {
        for m in 0..M {
            u[m] += c[m] * p;
        }
    }
    u
}

/// Reference-element tables shared by all kernels.
#[derive(Clone, Debug)]
pub struct Discretization {
    pub dim: usize,
    pub degree: usize,
    pub basis: Basis,
    pub element_rule: QuadratureRule,
    pub edge_rule: QuadratureRule,
    n_basis: usize,
    elem_phi: Vec<f64>,
    elem_grad: Vec<Point>,
    elem_lin: Vec<[f64; 3]>,
    face_points: usize,
    face_weights: Vec<f64>,
    face_param: Vec<f64>,
    face_phi: Vec<f64>,
}

impl Discretization {
    pub fn new(dim: usize, degree: usize) -> Result<Self> {
        let basis = Basis::new(dim, degree)?;
        let n_basis = basis.len();
        let element_rule = element_quadrature(dim, degree);
        let edge_rule = edge_quadrature(degree);
        let mut elem_phi = Vec::with_capacity(element_rule.len() * n_basis);
        let mut elem_grad = Vec::with_capacity(element_rule.len() * n_basis);
        let mut elem_lin = Vec::with_capacity(element_rule.len());
        for &p in &element_rule.points {
            elem_phi.extend(basis.values(p));
            elem_grad.extend(basis.grads(p));
            elem_lin.push(linear_shape(dim, p));
        }
        let (face_weights, face_param): (Vec<f64>, Vec<f64>) = if dim == 1 {
            (vec![1.0], vec![0.0])
        } else {
            (edge_rule.weights.clone(), edge_rule.points.iter().map(|p| p[0]).collect())
        };
        let face_points = face_weights.len();
        let mut face_phi = Vec::with_capacity((dim + 1) * face_points * n_basis);
        for f in 0..dim + 1 {
            for &s in &face_param {
                face_phi.extend(basis.values(reference_face_point(dim, f, s)));
            }
        }
        Ok(Self {
            dim,
            degree,
            basis,
            element_rule,
            edge_rule,
            n_basis,
            elem_phi,
            elem_grad,
            elem_lin,
            face_points,
            face_weights,
            face_param,
            face_phi,
        })
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn zero_state<const M: usize>(&self, n_elements: usize) -> DgState<M> {
        DgState::zeros(self.dim, self.degree, self.n_basis, n_elements)
    }

    #[inline]
    fn face_values(&self, f: usize, g: usize) -> &[f64] {
        let o = (f * self.face_points + g) * self.n_basis;
        &self.face_phi[o..o + self.n_basis]
    }

    /// Gauss point on the neighbor's face matching point `g` on this side.
    #[inline]
    fn mirror(&self, g: usize) -> usize {
        self.face_points - 1 - g
    }

    /// Element-wise L2 projection of `u0` onto the DG space on `coords`.
    pub fn project<const M: usize>(&self, mesh: &Mesh, coords: &[Point], u0: &dyn Fn(Point) -> [f64; M]) -> Result<DgState<M>> {
        let rule = simplex_rule(self.dim, 2 * self.degree + 6);
        let phis: Vec<Vec<f64>> = rule.points.iter().map(|&p| self.basis.values(p)).collect();
        let mut state = self.zero_state(mesh.n_elements());
        for e in 0..mesh.n_elements() {
            let g = mesh.element_geometry(coords, e, 0.0)?;
            let ce = state.element_mut(e);
            for ((p, w), phi) in rule.points.iter().zip(&rule.weights).zip(&phis) {
                let u = u0(g.to_physical(*p));
                for (c, ph) in ce.iter_mut().zip(phi) {
                    for m in 0..M {
                        c[m] += w * ph * u[m];
                    }
                }
            }
        }
        Ok(state)
    }
}

/// Linear nodal shape functions at reference point `p`.
#[inline]
pub fn linear_shape(dim: usize, p: Point) -> [f64; 3] {
    if dim == 1 {
        [1.0 - p[0], p[0], 0.0]
    } else {
        [1.0 - p[0] - p[1], p[0], p[1]]
    }
}

const LINEAR_GRADS_1D: [Point; 3] = [[-1.0, 0.0], [1.0, 0.0], [0.0, 0.0]];
const LINEAR_GRADS_2D: [Point; 3] = [[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]];

/// Vertex positions of the mesh along the linear trajectory over one time step.
#[derive(Clone, Debug)]
pub struct MeshMotion {
    pub t0: f64,
    pub dt: f64,
    pub x0: Vec<Point>,
    pub x1: Vec<Point>,
    velocities: Vec<Point>,
}

impl MeshMotion {
    pub fn new(t0: f64, dt: f64, x0: Vec<Point>, x1: Vec<Point>) -> Result<Self> {
        if x0.len() != x1.len() {
            return Err(Error::InvalidArgument("mesh motion endpoints differ in size".into()));
        }
        if !(dt >= 0.0) {
            return Err(Error::InvalidArgument(format!("negative step {dt}")));
        }
        let velocities = if dt > 0.0 {
            x0.iter()
                .zip(&x1)
                .map(|(a, b)| [(b[0] - a[0]) / dt, (b[1] - a[1]) / dt])
                .collect()
        } else {
            vec![[0.0; 2]; x0.len()]
        };
        Ok(Self {
            t0,
            dt,
            x0,
            x1,
            velocities,
        })
    }

    /// A mesh at rest over `[t0, t0 + dt]`.
    pub fn stationary(t0: f64, dt: f64, x: Vec<Point>) -> Self {
        let n = x.len();
        Self {
            t0,
            dt,
            x1: x.clone(),
            x0: x,
            velocities: vec![[0.0; 2]; n],
        }
    }

    pub fn t1(&self) -> f64 {
        self.t0 + self.dt
    }

    pub fn velocities(&self) -> &[Point] {
        &self.velocities
    }

    pub fn is_stationary(&self) -> bool {
        self.velocities.iter().all(|v| v[0] == 0.0 && v[1] == 0.0)
    }

    /// Coordinates at `t`, exact at both end points.
    pub fn interpolate(&self, t: f64) -> Result<Vec<Point>> {
        let tol = 1e-12 * (self.t0.abs() + self.dt).max(1e-300);
        if t < self.t0 - tol || t > self.t1() + tol {
            return Err(Error::InvalidArgument(format!(
                "time {t} outside the step [{}, {}]",
                self.t0,
                self.t1()
            )));
        }
        if t == self.t0 || self.dt == 0.0 {
            return Ok(self.x0.clone());
        }
        if t == self.t1() {
            return Ok(self.x1.clone());
        }
        let a = (t - self.t0) / self.dt;
        Ok(self
            .x0
            .iter()
            .zip(&self.x1)
            .map(|(p, q)| [(1.0 - a) * p[0] + a * q[0], (1.0 - a) * p[1] + a * q[1]])
            .collect())
    }

    /// Geometry of all elements at `t`, with the step's constant vertex velocities.
    pub fn stage(&self, mesh: &Mesh, t: f64) -> Result<StageGeometry> {
        let coords = self.interpolate(t)?;
        StageGeometry::new(mesh, coords, self.velocities.clone(), t)
    }
}

/// Mesh geometry and vertex velocities frozen at one stage time.
#[derive(Clone, Debug)]
pub struct StageGeometry {
    pub time: f64,
    pub coords: Vec<Point>,
    pub velocities: Vec<Point>,
    pub geoms: Vec<ElementGeometry>,
}

impl StageGeometry {
    pub fn new(mesh: &Mesh, coords: Vec<Point>, velocities: Vec<Point>, time: f64) -> Result<Self> {
        let geoms = mesh.geometries(&coords, time)?;
        Ok(Self {
            time,
            coords,
            velocities,
            geoms,
        })
    }

    pub fn at_rest(mesh: &Mesh, coords: Vec<Point>, time: f64) -> Result<Self> {
        let n = coords.len();
        Self::new(mesh, coords, vec![[0.0; 2]; n], time)
    }

    fn element_velocities(&self, mesh: &Mesh, e: usize) -> [Point; 3] {
        let mut v = [[0.0; 2]; 3];
        for (o, &i) in v.iter_mut().zip(mesh.element(e)) {
            *o = self.velocities[i];
        }
        v
    }

    /// Mesh velocity at reference point `p` of element `e`.
    pub fn mesh_velocity(&self, mesh: &Mesh, e: usize, p: Point) -> Point {
        let lin = linear_shape(mesh.dim(), p);
        let v = self.element_velocities(mesh, e);
        let mut out = [0.0; 2];
        for l in 0..mesh.dim() + 1 {
            out[0] += lin[l] * v[l][0];
            out[1] += lin[l] * v[l][1];
        }
        out
    }

    /// `div X'` on element `e` (constant for affine motion).
    pub fn velocity_divergence(&self, mesh: &Mesh, e: usize) -> f64 {
        let g = &self.geoms[e];
        let v = self.element_velocities(mesh, e);
        let grads = if mesh.dim() == 1 { &LINEAR_GRADS_1D } else { &LINEAR_GRADS_2D };
        let mut div = 0.0;
        for l in 0..mesh.dim() + 1 {
            let gp = g.physical_gradient(grads[l]);
            div += gp[0] * v[l][0] + gp[1] * v[l][1];
        }
        div
    }

    /// Mass scale `|K| / |K^|` of element `e`.
    #[inline]
    pub fn scale(&self, e: usize) -> f64 {
        self.geoms[e].volume / reference_volume(self.geoms[e].dim)
    }
}

/// Data available to a boundary-condition callback.
#[derive(Clone, Copy, Debug)]
pub struct BoundaryPoint<const M: usize> {
    pub x: Point,
    pub time: f64,
    pub normal: Point,
    pub interior: [f64; M],
}

pub type BoundaryFn<const M: usize> = Arc<dyn Fn(&BoundaryPoint<M>) -> [f64; M] + Send + Sync>;

/// Exterior-trace provider for one boundary part.
#[derive(Clone)]
pub enum BoundaryCondition<const M: usize> {
    /// Zero-gradient outflow: the exterior state copies the interior trace.
    Transmissive,
    /// Reflecting wall (normal momentum mirrored).
    Reflective,
    /// Prescribed constant state (inflow).
    Dirichlet([f64; M]),
    /// Space/time dependent state.
    Custom(BoundaryFn<M>),
}

impl<const M: usize> std::fmt::Debug for BoundaryCondition<M> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Transmissive => write!(f, "Transmissive"),
            Self::Reflective => write!(f, "Reflective"),
            Self::Dirichlet(u) => write!(f, "Dirichlet({u:?})"),
            Self::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// Boundary conditions indexed by [`BoundaryTag`]. Periodic faces never consult them.
#[derive(Clone, Debug)]
pub struct BoundaryConditions<const M: usize> {
    parts: [BoundaryCondition<M>; 5],
}

impl<const M: usize> BoundaryConditions<M> {
    pub fn uniform(bc: BoundaryCondition<M>) -> Self {
        Self {
            parts: std::array::from_fn(|_| bc.clone()),
        }
    }

    pub fn with(mut self, tag: BoundaryTag, bc: BoundaryCondition<M>) -> Self {
        self.parts[tag.index()] = bc;
        self
    }

    pub fn get(&self, tag: BoundaryTag) -> &BoundaryCondition<M> {
        &self.parts[tag.index()]
    }

    pub fn exterior<L: ConservationLaw<M> + ?Sized>(&self, law: &L, tag: BoundaryTag, p: &BoundaryPoint<M>) -> [f64; M] {
        match &self.parts[tag.index()] {
            BoundaryCondition::Transmissive => p.interior,
            BoundaryCondition::Reflective => law.reflect(&p.interior, p.normal),
            BoundaryCondition::Dirichlet(u) => *u,
            BoundaryCondition::Custom(f) => f(p),
        }
    }
}

pub(crate) fn inadmissible(err: Inadmissible, element: usize, time: f64) -> Error {
    Error::Inadmissible {
        element,
        time,
        density: err.density,
        pressure: err.pressure,
    }
}

/// `H(u) = F(u) . n - u s` with mesh normal speed `s`.
#[inline]
pub fn mesh_flux<const M: usize, L: ConservationLaw<M> + ?Sized>(law: &L, u: &[f64; M], n: Point, s: f64) -> std::result::Result<[f64; M], Inadmissible> {
    let mut h = law.normal_flux(u, n)?;
    for (hi, ui) in h.iter_mut().zip(u) {
        *hi -= ui * s;
    }
    Ok(h)
}

/// Local Lax–Friedrichs flux `(H(a) + H(b) - alpha (b - a)) / 2`.
#[inline]
pub fn llf_flux<const M: usize, L: ConservationLaw<M> + ?Sized>(
    law: &L,
    a: &[f64; M],
    b: &[f64; M],
    n: Point,
    s: f64,
    alpha: f64,
) -> std::result::Result<[f64; M], Inadmissible> {
    let ha = mesh_flux(law, a, n, s)?;
    let hb = mesh_flux(law, b, n, s)?;
    let mut out = [0.0; M];
    for m in 0..M {
        out[m] = 0.5 * (ha[m] + hb[m] - alpha * (b[m] - a[m]));
    }
    Ok(out)
}

impl Discretization {
    /// Traces of element `e` on face `f` at all face Gauss points.
    #[inline]
    fn trace<const M: usize>(&self, state: &DgState<M>, e: usize, f: usize, g: usize) -> [f64; M] {
        combine(state.element(e), self.face_values(f, g))
    }

    /// Physical location and mesh normal speed at face point `g` of face `f` of `e`.
    fn face_point(&self, mesh: &Mesh, stage: &StageGeometry, e: usize, f: usize, g: usize) -> (Point, f64) {
        let geom = &stage.geoms[e];
        let n = geom.normals[f];
        let el = mesh.element(e);
        if self.dim == 1 {
            let v = stage.velocities[el[f]];
            return (geom.vertices[f], v[0] * n[0]);
        }
        let s = self.face_param[g];
        let (a, b) = (el[f], el[(f + 1) % 3]);
        let (pa, pb) = (geom.vertices[f], geom.vertices[(f + 1) % 3]);
        let (va, vb) = (stage.velocities[a], stage.velocities[b]);
        let x = [(1.0 - s) * pa[0] + s * pb[0], (1.0 - s) * pa[1] + s * pb[1]];
        let v = [(1.0 - s) * va[0] + s * vb[0], (1.0 - s) * va[1] + s * vb[1]];
        (x, v[0] * n[0] + v[1] * n[1])
    }

    fn face_midpoint_speed(&self, mesh: &Mesh, stage: &StageGeometry, e: usize, f: usize) -> f64 {
        let n = stage.geoms[e].normals[f];
        let el = mesh.element(e);
        if self.dim == 1 {
            return stage.velocities[el[f]][0] * n[0];
        }
        let va = stage.velocities[el[f]];
        let vb = stage.velocities[el[(f + 1) % 3]];
        0.5 * ((va[0] + vb[0]) * n[0] + (va[1] + vb[1]) * n[1])
    }

    /// Weak residual `d/dt (|K|/|K^| c)`: edge flux and volume terms of the
    /// moving-mesh weak form, with `-int u div(X' v)` rewritten via
    /// `div(X' v) = v div X' + X' . grad v`, the first part moving into the
    /// time derivative of the mass matrix.
    pub fn weak_residual<const M: usize, L: ConservationLaw<M> + ?Sized>(
        &self,
        mesh: &Mesh,
        stage: &StageGeometry,
        state: &DgState<M>,
        law: &L,
        bc: &BoundaryConditions<M>,
    ) -> Result<Vec<[f64; M]>> {
        let nb = self.n_basis;
        let ne = mesh.n_elements();
        let t = stage.time;
        let mut res = vec![[0.0; M]; ne * nb];
        let nq = self.element_rule.len();
        let dim = self.dim;

        // Volume terms.
        let mut grads = [[0.0; 2]; crate::approx::MAX_BASIS];
        for e in 0..ne {
            let geom = &stage.geoms[e];
            let scale = stage.scale(e);
            let ce = state.element(e);
            let vel = stage.element_velocities(mesh, e);
            let out = &mut res[e * nb..(e + 1) * nb];
            for q in 0..nq {
                let phi = &self.elem_phi[q * nb..(q + 1) * nb];
                let u = combine(ce, phi);
                let f = law.flux(&u).map_err(|err| inadmissible(err, e, t))?;
                let lin = self.elem_lin[q];
                let mut xd = [0.0; 2];
                for l in 0..dim + 1 {
                    xd[0] += lin[l] * vel[l][0];
                    xd[1] += lin[l] * vel[l][1];
                }
                let w = self.element_rule.weights[q] * scale;
                for j in 0..nb {
                    grads[j] = geom.physical_gradient(self.elem_grad[q * nb + j]);
                }
                for (j, o) in out.iter_mut().enumerate() {
                    let gj = grads[j];
                    let adv = xd[0] * gj[0] + xd[1] * gj[1];
                    for m in 0..M {
                        o[m] += w * (f[0][m] * gj[0] + f[1][m] * gj[1] - u[m] * adv);
                    }
                }
            }
        }

        // Face terms, once per unique face.
        let ng = self.face_points;
        for edge in mesh.edges() {
            let (e, f) = (edge.left.element, edge.left.face);
            let geom = &stage.geoms[e];
            let n = geom.normals[f];
            let len = geom.face_lengths[f];
            let s_mid = self.face_midpoint_speed(mesh, stage, e, f);
            let avg_e = state.cell_average(e);
            let speed_e = law.max_speed(&avg_e, n, s_mid).map_err(|err| inadmissible(err, e, t))?;
            match edge.right {
                Some(r) => {
                    let avg_r = state.cell_average(r.element);
                    let speed_r = law.max_speed(&avg_r, n, s_mid).map_err(|err| inadmissible(err, r.element, t))?;
                    let alpha = speed_e.max(speed_r);
                    for g in 0..ng {
                        let gr = self.mirror(g);
                        let a = self.trace(state, e, f, g);
                        let b = self.trace(state, r.element, r.face, gr);
                        let (_, s) = self.face_point(mesh, stage, e, f, g);
                        let h = llf_flux(law, &a, &b, n, s, alpha).map_err(|err| inadmissible(err, e, t))?;
                        let w = self.face_weights[g] * len;
                        let pl = self.face_values(f, g);
                        for (o, p) in res[e * nb..(e + 1) * nb].iter_mut().zip(pl) {
                            for m in 0..M {
                                o[m] -= w * p * h[m];
                            }
                        }
                        let pr = self.face_values(r.face, gr);
                        for (o, p) in res[r.element * nb..(r.element + 1) * nb].iter_mut().zip(pr) {
                            for m in 0..M {
                                o[m] += w * p * h[m];
                            }
                        }
                    }
                }
                None => {
                    let Face::Boundary(tag) = mesh.faces(e)[f] else {
                        return Err(Error::Numerical(format!("face {f} of element {e} has no neighbor")));
                    };
                    let mid = geom.face_midpoint(f);
                    let ghost_avg = bc.exterior(law, tag, &BoundaryPoint { x: mid, time: t, normal: n, interior: avg_e });
                    let speed_r = law.max_speed(&ghost_avg, n, s_mid).map_err(|err| inadmissible(err, e, t))?;
                    let alpha = speed_e.max(speed_r);
                    for g in 0..ng {
                        let a = self.trace(state, e, f, g);
                        let (x, s) = self.face_point(mesh, stage, e, f, g);
                        let b = bc.exterior(law, tag, &BoundaryPoint { x, time: t, normal: n, interior: a });
                        let h = llf_flux(law, &a, &b, n, s, alpha).map_err(|err| inadmissible(err, e, t))?;
                        let w = self.face_weights[g] * len;
                        let pl = self.face_values(f, g);
                        for (o, p) in res[e * nb..(e + 1) * nb].iter_mut().zip(pl) {
                            for m in 0..M {
                                o[m] -= w * p * h[m];
                            }
                        }
                    }
                }
            }
        }
        Ok(res)
    }

    /// Semi-discrete operator `dc/dt` for the coefficients at the stage geometry.
    pub fn semidiscrete_rhs<const M: usize, L: ConservationLaw<M> + ?Sized>(
        &self,
        mesh: &Mesh,
        stage: &StageGeometry,
        state: &DgState<M>,
        law: &L,
        bc: &BoundaryConditions<M>,
    ) -> Result<Vec<[f64; M]>> {
        let mut r = self.weak_residual(mesh, stage, state, law, bc)?;
        let nb = self.n_basis;
        for e in 0..mesh.n_elements() {
            let inv = 1.0 / stage.scale(e);
            let div = stage.velocity_divergence(mesh, e);
            for (o, c) in r[e * nb..(e + 1) * nb].iter_mut().zip(state.element(e)) {
                for m in 0..M {
                    o[m] = o[m] * inv - div * c[m];
                }
            }
        }
        Ok(r)
    }

    /// Largest signal speed over all face Gauss-point traces; with `moving`
    /// the mesh normal speed is subtracted.
    pub fn max_trace_speed<const M: usize, L: ConservationLaw<M> + ?Sized>(
        &self,
        mesh: &Mesh,
        stage: &StageGeometry,
        state: &DgState<M>,
        law: &L,
        moving: bool,
    ) -> Result<f64> {
        let mut smax: f64 = 0.0;
        for e in 0..mesh.n_elements() {
            let geom = &stage.geoms[e];
            for f in 0..self.dim + 1 {
                let n = geom.normals[f];
                for g in 0..self.face_points {
                    let u = self.trace(state, e, f, g);
                    let s = if moving { self.face_point(mesh, stage, e, f, g).1 } else { 0.0 };
                    let sp = law.max_speed(&u, n, s).map_err(|err| inadmissible(err, e, stage.time))?;
                    smax = smax.max(sp);
                }
            }
        }
        Ok(smax)
    }
}

/// Time-stepping parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepControls {
    pub cfl: f64,
    pub t_final: f64,
    /// Upper bound on any step (used when all signal speeds vanish).
    pub dt_max: f64,
    pub limiter: bool,
    pub moving: bool,
}

impl StepControls {
    pub fn new(cfl: f64, t_final: f64) -> Self {
        Self {
            cfl,
            t_final,
            dt_max: f64::INFINITY,
            limiter: true,
            moving: true,
        }
    }

    /// `CFL * r / speed`, capped by `dt_max` and the remaining time to `t_final`.
    pub fn bound(&self, t: f64, min_radius: f64, speed: f64) -> f64 {
        let raw = if speed > 0.0 { self.cfl * min_radius / speed } else { f64::INFINITY };
        let remaining = self.t_final - t;
        let cap = if self.dt_max.is_finite() { self.dt_max } else { remaining };
        raw.min(cap).min(remaining).max(0.0)
    }
}

/// Step size `min(dt', dt'')` for a step from `now` (at rest, with the
/// traces of `state`) to the mesh `next` reached with constant vertex
/// velocities `stage.velocities`.
pub fn compute_dt<const M: usize, L: ConservationLaw<M> + ?Sized>(
    dg: &Discretization,
    mesh: &Mesh,
    stage: &StageGeometry,
    next_coords: &[Point],
    state: &DgState<M>,
    law: &L,
    controls: &StepControls,
) -> Result<f64> {
    let r_now = stage.geoms.iter().map(|g| g.inradius).fold(f64::INFINITY, f64::min);
    let s_fixed = dg.max_trace_speed(mesh, stage, state, law, false)?;
    let dt1 = controls.bound(stage.time, r_now, s_fixed);
    if !controls.moving {
        return Ok(dt1);
    }
    let r_next = mesh.min_inradius(next_coords)?;
    let s_moving = dg.max_trace_speed(mesh, stage, state, law, true)?;
    let dt2 = controls.bound(stage.time, r_next, s_moving);
    Ok(dt1.min(dt2))
}

/// Limiter hook applied to every stage result at the geometry it lives on.
pub trait StageLimiter<const M: usize> {
    fn apply(&mut self, mesh: &Mesh, stage: &StageGeometry, state: &mut DgState<M>) -> Result<()>;
}

/// No limiting.
pub struct NoLimiter;

impl<const M: usize> StageLimiter<M> for NoLimiter {
    fn apply(&mut self, _: &Mesh, _: &StageGeometry, _: &mut DgState<M>) -> Result<()> {
        Ok(())
    }
}

/// One SSP-RK3 step over `motion`; stage times `t_n`, `t_n + dt`, `t_n + dt/2`.
pub fn rk3_step<const M: usize, L: ConservationLaw<M> + ?Sized>(
    dg: &Discretization,
    mesh: &Mesh,
    motion: &MeshMotion,
    state: &DgState<M>,
    law: &L,
    bc: &BoundaryConditions<M>,
    limiter: &mut dyn StageLimiter<M>,
) -> Result<DgState<M>> {
    let dt = motion.dt;
    let t0 = motion.t0;
    let g0 = motion.stage(mesh, t0)?;
    let g1 = motion.stage(mesh, motion.t1())?;
    let gh = motion.stage(mesh, t0 + 0.5 * dt)?;
    let nb = dg.n_basis;

    // Stage volumes follow the same RK combination of the discrete rates
    // d|K|/dt = |K| div X', so a constant state stays constant at every stage;
    // the last combination is Simpson's rule and reproduces |K(t_n + dt)|.
    let ne = mesh.n_elements();
    let rate = |g: &StageGeometry| -> Vec<f64> { (0..ne).map(|e| g.scale(e) * g.velocity_divergence(mesh, e)).collect() };
    let s0: Vec<f64> = (0..ne).map(|e| g0.scale(e)).collect();
    let (d0, d1) = (rate(&g0), rate(&g1));
    let s1: Vec<f64> = (0..ne).map(|e| s0[e] + dt * d0[e]).collect();
    let s2: Vec<f64> = (0..ne).map(|e| 0.75 * s0[e] + 0.25 * (s1[e] + dt * d1[e])).collect();
    let s3: Vec<f64> = (0..ne).map(|e| g1.scale(e)).collect();
    if let Some(e) = (0..ne).find(|&e| !(s1[e] > 0.0 && s2[e] > 0.0)) {
        return Err(Error::MeshTangling {
            element: e,
            volume: s1[e].min(s2[e]) * reference_volume(mesh.dim()),
            time: t0,
        });
    }

    // new = a * old * (s_old / s_new) + b * (stage * s_stage + dt R) / s_new, per element.
    let update = |base: &DgState<M>, a: f64, stage_state: &DgState<M>, s_stage: &[f64], r: &[[f64; M]], s_new: &[f64], b: f64, time: f64| {
        let mut out = base.clone();
        out.time = time;
        for e in 0..ne {
            let inv_new = 1.0 / s_new[e];
            let rb = s0[e] * inv_new;
            let rs = s_stage[e] * inv_new;
            let dst = &mut out.coeffs[e * nb..(e + 1) * nb];
            let src = stage_state.element(e);
            let rr = &r[e * nb..(e + 1) * nb];
            for j in 0..nb {
                for m in 0..M {
                    let stage_part = src[j][m] * rs + dt * (rr[j][m] * inv_new);
                    dst[j][m] = if a == 0.0 { stage_part } else { a * (dst[j][m] * rb) + b * stage_part };
                }
            }
        }
        out
    };

    let r0 = dg.weak_residual(mesh, &g0, state, law, bc)?;
    let mut u1 = update(state, 0.0, state, &s0, &r0, &s1, 1.0, motion.t1());
    limiter.apply(mesh, &g1, &mut u1)?;

    let r1 = dg.weak_residual(mesh, &g1, &u1, law, bc)?;
    let mut u2 = update(state, 0.75, &u1, &s1, &r1, &s2, 0.25, t0 + 0.5 * dt);
    limiter.apply(mesh, &gh, &mut u2)?;

    let r2 = dg.weak_residual(mesh, &gh, &u2, law, bc)?;
    let mut u3 = update(state, 1.0 / 3.0, &u2, &s2, &r2, &s3, 2.0 / 3.0, motion.t1());
    limiter.apply(mesh, &g1, &mut u3)?;
    Ok(u3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_criss_cross, generate_interval, Rect};
    use crate::physics::{Burgers, Euler2d, Primitive};

    fn perturbed_motion(mesh: &Mesh, amp: f64, dt: f64) -> MeshMotion {
        let x0 = mesh.coords().to_vec();
        let x1: Vec<Point> = x0
            .iter()
            .enumerate()
            .map(|(i, p)| match mesh.vertex_class(i) {
                crate::mesh::VertexClass::Interior => {
                    let s = (i as f64 * 0.731).sin();
                    let c = (i as f64 * 1.37).cos();
                    [p[0] + amp * s, p[1] + if mesh.dim() == 2 { amp * c } else { 0.0 }]
                }
                _ => *p,
            })
            .collect();
        MeshMotion::new(0.0, dt, x0, x1).unwrap()
    }

    #[test]
    fn llf_flux_hand_values() {
        let b = Burgers::new(1);
        let h = llf_flux(&b, &[0.0], &[2.0], [1.0, 0.0], 0.0, 2.0).unwrap();
        assert_eq!(h[0], -1.0);
        let h = llf_flux(&b, &[1.0], &[1.0], [1.0, 0.0], 1.0, 5.0).unwrap();
        assert_eq!(h[0], -0.5);
        let e = Euler2d::default();
        let u: [f64; 4] = e.conserved_of(&Primitive { density: 1.2, velocity: [0.3, -0.4], pressure: 0.9 });
        let h = llf_flux(&e, &u, &u, [0.6, 0.8], 0.3, 7.0).unwrap();
        let exact = mesh_flux(&e, &u, [0.6, 0.8], 0.3).unwrap();
        assert_eq!(h, exact);
    }

    #[test]
    fn motion_interpolation_endpoints() {
        let m = generate_interval(4, 0.0, 1.0).unwrap();
        let motion = perturbed_motion(&m, 0.05, 0.2);
        assert_eq!(motion.interpolate(0.0).unwrap(), motion.x0);
        assert_eq!(motion.interpolate(0.2).unwrap(), motion.x1);
        let mid = motion.interpolate(0.1).unwrap();
        for ((a, b), c) in motion.x0.iter().zip(&motion.x1).zip(&mid) {
            assert!((0.5 * (a[0] + b[0]) - c[0]).abs() < 1e-15);
        }
        assert!(motion.interpolate(0.3).is_err());
    }

    #[test]
    fn free_stream_residual_vanishes_on_moving_mesh() {
        let mesh = generate_criss_cross(3, 3, Rect::new(0.0, 1.0, 0.0, 1.0)).unwrap().make_periodic(0).unwrap().make_periodic(1).unwrap();
        let motion = perturbed_motion(&mesh, 0.03, 0.1);
        let law = Euler2d::default();
        let u: [f64; 4] = law.conserved_of(&Primitive { density: 1.1, velocity: [0.4, -0.2], pressure: 0.8 });
        let bc = BoundaryConditions::uniform(BoundaryCondition::Transmissive);
        for k in [1, 2] {
            let dg = Discretization::new(2, k).unwrap();
            let state = dg.project(&mesh, &motion.x0, &|_| u).unwrap();
            let stage = motion.stage(&mesh, 0.05).unwrap();
            let r = dg.semidiscrete_rhs(&mesh, &stage, &state, &law, &bc).unwrap();
            for v in &r {
                for x in v {
                    assert!(x.abs() < 1e-12, "{x}");
                }
            }
        }
    }

    #[test]
    fn rk3_amplification_factor() {
        // Linear decay u' = z u realized through a custom limiter-free operator:
        // a 1D element with Burgers flux is not linear, so check the stage algebra
        // directly on the update formula with a zero-velocity mesh.
        let z = -0.1f64;
        let u0 = 1.0f64;
        let u1 = u0 + z * u0;
        let u2 = 0.75 * u0 + 0.25 * (u1 + z * u1);
        let u3 = u0 / 3.0 + 2.0 / 3.0 * (u2 + z * u2);
        let amp = 1.0 + z + z * z / 2.0 + z * z * z / 6.0;
        assert!((u3 - amp).abs() < 1e-15);
        assert!((amp - 0.9048333333333334).abs() < 1e-15);
    }

    #[test]
    fn zero_operator_is_identity() {
        let mesh = generate_interval(8, 0.0, 1.0).unwrap().make_periodic(0).unwrap();
        let dg = Discretization::new(1, 2).unwrap();
        let law = Burgers::new(1);
        let state = dg.project(&mesh, mesh.coords(), &|_| [0.7]).unwrap();
        let motion = MeshMotion::stationary(0.0, 0.01, mesh.coords().to_vec());
        let bc = BoundaryConditions::uniform(BoundaryCondition::Transmissive);
        let next = rk3_step(&dg, &mesh, &motion, &state, &law, &bc, &mut NoLimiter).unwrap();
        for (a, b) in next.as_slice().iter().zip(state.as_slice()) {
            assert!((a[0] - b[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn dt_formula() {
        let c = StepControls::new(0.3, 10.0);
        assert!((c.bound(0.0, 0.005, 1.5) - 0.001).abs() < 1e-15);
        let capped = StepControls { dt_max: 0.01, ..c };
        assert_eq!(capped.bound(0.0, 0.005, 0.0), 0.01);
        assert_eq!(c.bound(9.9995, 0.005, 1.5), 10.0 - 9.9995);
    }
}
