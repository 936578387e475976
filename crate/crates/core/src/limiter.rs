//! Troubled-cell detection (TVB minmod test on edge-midpoint deviations) and
//! the reconstruction limiter: each troubled polynomial is replaced by a convex
//! combination of itself and mean-constrained least-squares modifications of
//! its neighbors' polynomials, with WENO-type nonlinear weights.

use nalgebra::{DMatrix, DVector};

use crate::approx::{reference_volume, Basis, QuadratureRule, MAX_BASIS};
use crate::error::Result;
use crate::mesh::{reference_face_point, ElementGeometry, Mesh, Point};
use crate::physics::{mat_vec, ConservationLaw};
use crate::solver::{combine, DgState, Discretization, StageGeometry, StageLimiter};

/// Why a cell was marked for limiting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TroubleReason {
    /// An edge-midpoint deviation was modified by the TVB minmod function.
    Minmod,
    /// No nonnegative barycenter expansion exists for some edge midpoint.
    MissingExpansion,
    /// The cell lacks a neighbor (physical boundary).
    Boundary,
}

impl TroubleReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Minmod => "minmod",
            Self::MissingExpansion => "missing-expansion",
            Self::Boundary => "boundary",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TroubleFlags {
    pub reasons: Vec<Option<TroubleReason>>,
}

impl TroubleFlags {
    pub fn is_flagged(&self, e: usize) -> bool {
        self.reasons[e].is_some()
    }

    pub fn count(&self) -> usize {
        self.reasons.iter().filter(|r| r.is_some()).count()
    }

    pub fn flagged(&self) -> impl Iterator<Item = (usize, TroubleReason)> + '_ {
        self.reasons.iter().enumerate().filter_map(|(e, r)| r.map(|r| (e, r)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LimiterParams {
    /// Factor multiplying the neighbor differences in the minmod test.
    pub tvb_gamma: f64,
    /// Regularization in the nonlinear weights.
    pub lambda: f64,
    /// Linear weights: central cell first, then one per neighbor (2D).
    pub linear_weights_2d: [f64; 4],
    pub linear_weights_1d: [f64; 3],
    /// Limit in characteristic fields when the law provides an eigensystem.
    pub characteristic: bool,
}

impl Default for LimiterParams {
    fn default() -> Self {
        Self {
            tvb_gamma: 1.5,
            lambda: 1e-6,
            linear_weights_2d: [0.997, 0.001, 0.001, 0.001],
            linear_weights_1d: [0.998, 0.001, 0.001],
            characteristic: true,
        }
    }
}

/// Standard minmod of two values.
pub fn minmod(a: f64, b: f64) -> f64 {
    if a > 0.0 && b > 0.0 {
        a.min(b)
    } else if a < 0.0 && b < 0.0 {
        a.max(b)
    } else {
        0.0
    }
}

/// TVB-modified minmod: `a1` passes unchanged when `|a1| <= threshold`.
pub fn minmod_tvb(a1: f64, a2: f64, threshold: f64) -> f64 {
    if a1.abs() <= threshold {
        a1
    } else {
        minmod(a1, a2)
    }
}

/// Coefficients of `x_m - x_b0 = a1 (x_b1 - x_b0) + a2 (x_bl - x_b0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Expansion {
    pub alpha: [f64; 2],
    /// Local face index of the second neighbor `l` (unused in 1D).
    pub second: usize,
}

/// Nonnegative expansion of the midpoint of face `i` in the barycenter
/// differences of the neighbor across `i` and one other neighbor.
/// `barycenters[f]` is the (periodically shifted) barycenter of the neighbor
/// across face `f`.
pub fn midpoint_expansion(dim: usize, midpoint: Point, center: Point, barycenters: &[Option<Point>; 3], i: usize) -> Option<Expansion> {
    const NEG_TOL: f64 = 1e-12;
    let b1 = barycenters[i]?;
    let d = [midpoint[0] - center[0], midpoint[1] - center[1]];
    let a = [b1[0] - center[0], b1[1] - center[1]];
    if dim == 1 {
        if a[0] == 0.0 {
            return None;
        }
        let alpha = d[0] / a[0];
        return (alpha >= -NEG_TOL).then_some(Expansion {
            alpha: [alpha.max(0.0), 0.0],
            second: i,
        });
    }
    for l in [(i + 1) % 3, (i + 2) % 3] {
        let Some(bl) = barycenters[l] else { continue };
        let b = [bl[0] - center[0], bl[1] - center[1]];
        let det = a[0] * b[1] - a[1] * b[0];
        let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
        let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
        if det.abs() <= 1e-12 * na * nb {
            continue;
        }
        let a1 = (d[0] * b[1] - d[1] * b[0]) / det;
        let a2 = (a[0] * d[1] - a[1] * d[0]) / det;
        if a1 >= -NEG_TOL && a2 >= -NEG_TOL {
            return Some(Expansion {
                alpha: [a1.max(0.0), a2.max(0.0)],
                second: l,
            });
        }
    }
    None
}

/// Neighbor of element `e` across face `f`, with its geometry translated into
/// the frame of `e` (relevant across periodic faces).
#[derive(Clone, Copy, Debug)]
pub struct NeighborGeometry {
    pub element: usize,
    pub geom: ElementGeometry,
}

pub fn neighbor_geometries(mesh: &Mesh, stage: &StageGeometry, e: usize) -> [Option<NeighborGeometry>; 3] {
    let mut out = [None; 3];
    let ge = &stage.geoms[e];
    for (f, face) in mesh.faces(e).iter().enumerate() {
        let Some(link) = face.neighbor() else { continue };
        let gn = &stage.geoms[link.element];
        let mk = ge.face_midpoint(f);
        let mn = gn.face_midpoint(link.face);
        let shift = [mk[0] - mn[0], mk[1] - mn[1]];
        let geom = if shift == [0.0, 0.0] {
            *gn
        } else {
            let mut v = gn.vertices;
            for p in v.iter_mut().take(mesh.dim() + 1) {
                p[0] += shift[0];
                p[1] += shift[1];
            }
            ElementGeometry::new(mesh.dim(), v).unwrap_or(*gn)
        };
        out[f] = Some(NeighborGeometry {
            element: link.element,
            geom,
        });
    }
    out
}

/// Least-squares data of one neighbor, expressed in the basis of the target cell `K`.
#[derive(Clone, Debug)]
struct NeighborFit {
    volume: f64,
    /// `int_{K_i} phi^K_a phi^K_b`.
    gram: DMatrix<f64>,
    /// `int_{K_i} phi^K_a phi^{K_i}_b`; maps neighbor coefficients to the load vector.
    cross: DMatrix<f64>,
    /// `int_{K_i} phi^K_a`.
    moment: DVector<f64>,
}

/// Geometric data for limiting one target cell.
#[derive(Clone, Debug)]
pub struct Stencil {
    dim: usize,
    n_basis: usize,
    /// Quadratic form of the smoothness indicator on `K`.
    beta_form: DMatrix<f64>,
    fits: Vec<Option<NeighborFit>>,
    /// `1/sqrt|K^|`: cell average of a coefficient vector is `c_0` times this.
    average_factor: f64,
}

impl Stencil {
    pub fn new(basis: &Basis, rule: &QuadratureRule, geom: &ElementGeometry, neighbors: &[Option<ElementGeometry>]) -> Self {
        let dim = geom.dim;
        let nb = basis.len();
        let ref_vol = reference_volume(dim);
        // Smoothness indicator form: first derivatives integrated by quadrature,
        // second derivatives (constant for k <= 2) in closed form.
        let mut beta_form = DMatrix::zeros(nb, nb);
        let scale = geom.volume / ref_vol;
        let mut g = [[0.0; 2]; MAX_BASIS];
        for (p, w) in rule.points.iter().zip(&rule.weights) {
            basis.eval_grad(*p, &mut g[..nb]);
            let pg: Vec<Point> = g[..nb].iter().map(|&r| geom.physical_gradient(r)).collect();
            for a in 0..nb {
                for b in 0..nb {
                    beta_form[(a, b)] += w * scale * (pg[a][0] * pg[b][0] + pg[a][1] * pg[b][1]);
                }
            }
        }
        if basis.degree() >= 2 {
            let hs = basis.hessians(rule.points[0]);
            let ph: Vec<[f64; 3]> = hs.iter().map(|h| physical_second_derivatives(geom, h)).collect();
            let factor = geom.volume * geom.volume * 0.25;
            let comps = if dim == 1 { 1 } else { 3 };
            for a in 0..nb {
                for b in 0..nb {
                    let mut s = 0.0;
                    for c in 0..comps {
                        s += ph[a][c] * ph[b][c];
                    }
                    beta_form[(a, b)] += factor * s;
                }
            }
        }
        let fits = neighbors
            .iter()
            .map(|n| {
                n.as_ref().map(|gn| {
                    let mut gram = DMatrix::zeros(nb, nb);
                    let mut cross = DMatrix::zeros(nb, nb);
                    let mut moment = DVector::zeros(nb);
                    let sn = gn.volume / ref_vol;
                    let mut pk = [0.0; MAX_BASIS];
                    let mut pn = [0.0; MAX_BASIS];
                    for (p, w) in rule.points.iter().zip(&rule.weights) {
                        let x = gn.to_physical(*p);
                        basis.eval(geom.to_reference(x), &mut pk[..nb]);
                        basis.eval(*p, &mut pn[..nb]);
                        let ww = w * sn;
                        for a in 0..nb {
                            moment[a] += ww * pk[a];
                            for b in 0..nb {
                                gram[(a, b)] += ww * pk[a] * pk[b];
                                cross[(a, b)] += ww * pk[a] * pn[b];
                            }
                        }
                    }
                    NeighborFit {
                        volume: gn.volume,
                        gram,
                        cross,
                        moment,
                    }
                })
            })
            .collect();
        Self {
            dim,
            n_basis: nb,
            beta_form,
            fits,
            average_factor: basis.constant_value(),
        }
    }

    pub fn n_neighbors(&self) -> usize {
        self.fits.len()
    }

    pub fn has_neighbor(&self, i: usize) -> bool {
        self.fits[i].is_some()
    }

    pub fn neighbor_volume(&self, i: usize) -> Option<f64> {
        self.fits[i].as_ref().map(|f| f.volume)
    }

    /// Smoothness indicator of the polynomial with coefficients `z` in the basis of `K`.
    pub fn smoothness_indicator(&self, z: &[f64]) -> f64 {
        let mut s = 0.0;
        for a in 0..self.n_basis {
            for b in 0..self.n_basis {
                s += z[a] * self.beta_form[(a, b)] * z[b];
            }
        }
        s.max(0.0)
    }

    /// Mean-constrained least-squares modification of neighbor `i`'s polynomial
    /// (coefficients `p[i]` in its own basis), expressed in the basis of `K`.
    /// `mean_set` lists the other neighbors whose integrals are matched.
    /// Returns `None` if the reduced system is singular.
    pub fn constrained_fit(&self, i: usize, p: &[Option<&[f64]>], z0: f64, mean_set: &[usize]) -> Option<Vec<f64>> {
        let fit = self.fits[i].as_ref()?;
        let pi = DVector::from_column_slice(p[i]?);
        let mut a = fit.gram.clone();
        let mut r = &fit.cross * pi;
        for &l in mean_set {
            let (Some(fl), Some(pl)) = (self.fits[l].as_ref(), p[l]) else { continue };
            let target = fl.volume * pl[0] * self.average_factor;
            a += &fl.moment * fl.moment.transpose();
            r += &fl.moment * target;
        }
        let n = self.n_basis;
        if n == 1 {
            return Some(vec![z0]);
        }
        let arr = a.view((1, 1), (n - 1, n - 1)).into_owned();
        let rhs = r.rows(1, n - 1) - a.view((1, 0), (n - 1, 1)) * z0;
        let chol = arr.cholesky()?;
        let zr = chol.solve(&rhs);
        if zr.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut z = Vec::with_capacity(n);
        z.push(z0);
        z.extend(zr.iter());
        Some(z)
    }

    /// Scalar reconstruction. `p[0]` is the target polynomial, `p[1 + i]` the
    /// polynomial of the neighbor across face `i` (each in its own basis).
    /// Returns the new coefficients on `K` and the nonlinear weights used.
    pub fn limit_scalar(&self, p0: &[f64], neighbors: &[Option<&[f64]>], params: &LimiterParams) -> (Vec<f64>, Vec<f64>) {
        let nf = self.fits.len();
        let gammas: &[f64] = if self.dim == 1 { &params.linear_weights_1d } else { &params.linear_weights_2d };
        let z0 = p0[0];
        let avg0 = z0 * self.average_factor;
        let dev = |l: usize| neighbors[l].map(|p| (p[0] * self.average_factor - avg0).abs());
        let mut candidates: Vec<(f64, Vec<f64>)> = vec![(gammas[0], p0.to_vec())];
        for i in 0..nf {
            if !self.has_neighbor(i) || neighbors[i].is_none() {
                continue;
            }
            let others: Vec<usize> = (0..nf).filter(|&l| l != i && self.has_neighbor(l) && neighbors[l].is_some()).collect();
            let dmax = others.iter().filter_map(|&l| dev(l)).fold(f64::NEG_INFINITY, f64::max);
            let mean_set: Vec<usize> = others.iter().copied().filter(|&l| dev(l).is_some_and(|d| d < dmax)).collect();
            let z = self.constrained_fit(i, neighbors, z0, &mean_set).unwrap_or_else(|| {
                let mut c = vec![0.0; self.n_basis];
                c[0] = z0;
                c
            });
            candidates.push((gammas[1 + i], z));
        }
        let betas: Vec<f64> = candidates.iter().map(|(_, z)| self.smoothness_indicator(z)).collect();
        let gam: Vec<f64> = candidates.iter().map(|(g, _)| *g).collect();
        let weights = nonlinear_weights(&gam, &betas, params.lambda);
        let mut out = vec![0.0; self.n_basis];
        for ((_, z), w) in candidates.iter().zip(&weights) {
            for (o, v) in out.iter_mut().zip(z) {
                *o += w * v;
            }
        }
        out[0] = z0;
        (out, weights)
    }
}

/// Physical second derivatives `(u_xx, u_xy, u_yy)` from a reference Hessian.
fn physical_second_derivatives(geom: &ElementGeometry, h: &[[f64; 2]; 2]) -> [f64; 3] {
    let a = &geom.inv_jacobian;
    if geom.dim == 1 {
        return [h[0][0] * a[0][0] * a[0][0], 0.0, 0.0];
    }
    // H_phys = A^T H A with A = E^{-1}.
    let mut ha = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            ha[i][j] = h[i][0] * a[0][j] + h[i][1] * a[1][j];
        }
    }
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[0][i] * ha[0][j] + a[1][i] * ha[1][j];
        }
    }
    [out[0][0], out[0][1], out[1][1]]
}

/// `w_l = wbar_l / sum wbar`, `wbar_l = gamma_l / (lambda + beta_l)^2`.
pub fn nonlinear_weights(gammas: &[f64], betas: &[f64], lambda: f64) -> Vec<f64> {
    let raw: Vec<f64> = gammas.iter().zip(betas).map(|(g, b)| g / ((lambda + b) * (lambda + b))).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|w| w / sum).collect()
}

/// Troubled-cell detector with reference tables for edge-midpoint evaluation.
#[derive(Clone, Debug)]
pub struct Detector {
    dim: usize,
    midpoint_phi: Vec<Vec<f64>>,
    pub params: LimiterParams,
}

impl Detector {
    pub fn new(basis: &Basis, params: LimiterParams) -> Self {
        let dim = basis.dim();
        let midpoint_phi = (0..dim + 1).map(|f| basis.values(reference_face_point(dim, f, 0.5))).collect();
        Self { dim, midpoint_phi, params }
    }

    /// Flags troubled cells of `state` at the stage geometry; every conserved
    /// component is tested.
    pub fn detect<const M: usize>(&self, mesh: &Mesh, stage: &StageGeometry, state: &DgState<M>) -> TroubleFlags {
        let nf = self.dim + 1;
        let r_max = stage.geoms.iter().map(|g| g.inradius).fold(0.0, f64::max);
        let threshold = (2.0 * r_max) * (2.0 * r_max);
        let averages: Vec<[f64; M]> = (0..mesh.n_elements()).map(|e| state.cell_average(e)).collect();
        let reasons = (0..mesh.n_elements())
            .map(|e| {
                let neigh = neighbor_geometries(mesh, stage, e);
                if neigh[..nf].iter().any(|n| n.is_none()) {
                    return Some(TroubleReason::Boundary);
                }
                let geom = &stage.geoms[e];
                let bary: [Option<Point>; 3] = std::array::from_fn(|f| neigh[f].map(|n| n.geom.barycenter));
                let avg0 = averages[e];
                let mut reason = None;
                for i in 0..nf {
                    let mid = geom.face_midpoint(i);
                    let Some(ex) = midpoint_expansion(self.dim, mid, geom.barycenter, &bary, i) else {
                        return Some(TroubleReason::MissingExpansion);
                    };
                    let u_mid = combine(state.element(e), &self.midpoint_phi[i]);
                    let a1 = averages[neigh[i].unwrap().element];
                    let al = if self.dim == 1 { avg0 } else { averages[neigh[ex.second].unwrap().element] };
                    for m in 0..M {
                        let tilde = u_mid[m] - avg0[m];
                        let delta = ex.alpha[0] * (a1[m] - avg0[m]) + ex.alpha[1] * (al[m] - avg0[m]);
                        let modified = minmod_tvb(tilde, self.params.tvb_gamma * delta, threshold);
                        if modified != tilde {
                            reason = Some(TroubleReason::Minmod);
                        }
                    }
                }
                reason
            })
            .collect();
        TroubleFlags { reasons }
    }
}

/// The complete limiting pass, usable as a stage hook of the time integrator.
pub struct Limiter<'a, const M: usize, L: ConservationLaw<M> + ?Sized> {
    dg: &'a Discretization,
    law: &'a L,
    detector: Detector,
    /// Flags of the most recent application.
    pub last_flags: TroubleFlags,
    /// Cells skipped because their average state was inadmissible for the eigensystem.
    pub skipped: usize,
}

impl<'a, const M: usize, L: ConservationLaw<M> + ?Sized> Limiter<'a, M, L> {
    pub fn new(dg: &'a Discretization, law: &'a L, params: LimiterParams) -> Self {
        Self {
            dg,
            law,
            detector: Detector::new(&dg.basis, params),
            last_flags: TroubleFlags::default(),
            skipped: 0,
        }
    }

    pub fn params(&self) -> &LimiterParams {
        &self.detector.params
    }

    /// Detects and limits; returns the flags used.
    pub fn limit(&mut self, mesh: &Mesh, stage: &StageGeometry, state: &mut DgState<M>) -> Result<TroubleFlags> {
        let flags = self.detector.detect(mesh, stage, state);
        let limited = self.limit_flagged(mesh, stage, state, &flags);
        for (e, coeffs) in limited {
            state.element_mut(e).copy_from_slice(&coeffs);
        }
        Ok(flags)
    }

    /// New coefficients for all flagged cells, computed from the unmodified input.
    pub fn limit_flagged(&mut self, mesh: &Mesh, stage: &StageGeometry, state: &DgState<M>, flags: &TroubleFlags) -> Vec<(usize, Vec<[f64; M]>)> {
        let dim = mesh.dim();
        let nf = dim + 1;
        let nb = self.dg.n_basis();
        let params = self.detector.params.clone();
        let mut out = Vec::with_capacity(flags.count());
        for (e, _) in flags.flagged() {
            let neigh = neighbor_geometries(mesh, stage, e);
            let ngeoms: Vec<Option<ElementGeometry>> = neigh[..nf].iter().map(|n| n.map(|n| n.geom)).collect();
            let stencil = Stencil::new(&self.dg.basis, &self.dg.element_rule, &stage.geoms[e], &ngeoms);
            let p0 = state.element(e);
            let pn: Vec<Option<&[[f64; M]]>> = neigh[..nf].iter().map(|n| n.map(|n| state.element(n.element))).collect();
            let avg = state.cell_average(e);

            let directions: Vec<Point> = if dim == 1 { vec![[1.0, 0.0]] } else { stage.geoms[e].normals.to_vec() };
            let mut eig = Vec::with_capacity(directions.len());
            let mut use_char = params.characteristic && M > 1;
            if use_char {
                let mut skip = false;
                for n in &directions {
                    match self.law.eigensystem(&avg, *n) {
                        Ok(Some(es)) => eig.push(es),
                        Ok(None) => {
                            use_char = false;
                            break;
                        }
                        Err(_) => {
                            skip = true;
                            break;
                        }
                    }
                }
                if skip {
                    log::warn!("element {e}: inadmissible average at t = {}, left unlimited", stage.time);
                    self.skipped += 1;
                    continue;
                }
            }

            let limit_fields = |poly0: &[[f64; M]], polys: &[Option<Vec<[f64; M]>>]| -> Vec<[f64; M]> {
                let mut res = vec![[0.0; M]; nb];
                for m in 0..M {
                    let f0: Vec<f64> = poly0.iter().map(|c| c[m]).collect();
                    let fi: Vec<Option<Vec<f64>>> = polys.iter().map(|p| p.as_ref().map(|p| p.iter().map(|c| c[m]).collect())).collect();
                    let refs: Vec<Option<&[f64]>> = fi.iter().map(|p| p.as_deref()).collect();
                    let (z, _) = stencil.limit_scalar(&f0, &refs, &params);
                    for (r, v) in res.iter_mut().zip(z) {
                        r[m] = v;
                    }
                }
                res
            };

            let mut new = vec![[0.0; M]; nb];
            if use_char {
                let mut wsum = 0.0;
                for (i, es) in eig.iter().enumerate() {
                    let project = |p: &[[f64; M]]| -> Vec<[f64; M]> { p.iter().map(|c| mat_vec(&es.left, c)).collect() };
                    let q0 = project(p0);
                    let qn: Vec<Option<Vec<[f64; M]>>> = pn.iter().map(|p| p.map(project)).collect();
                    let lim = limit_fields(&q0, &qn);
                    let w = if dim == 1 { 1.0 } else { stencil.neighbor_volume(i).unwrap_or(stage.geoms[e].volume) };
                    wsum += w;
                    for (o, c) in new.iter_mut().zip(&lim) {
                        let back = mat_vec(&es.right, c);
                        for m in 0..M {
                            o[m] += w * back[m];
                        }
                    }
                }
                for o in new.iter_mut() {
                    for v in o.iter_mut() {
                        *v /= wsum;
                    }
                }
            } else {
                let pn_owned: Vec<Option<Vec<[f64; M]>>> = pn.iter().map(|p| p.map(|p| p.to_vec())).collect();
                new = limit_fields(p0, &pn_owned);
            }
            // Averages are preserved exactly.
            new[0] = p0[0];
            out.push((e, new));
        }
        self.last_flags = flags.clone();
        out
    }
}

impl<const M: usize, L: ConservationLaw<M> + ?Sized> StageLimiter<M> for Limiter<'_, M, L> {
    fn apply(&mut self, mesh: &Mesh, stage: &StageGeometry, state: &mut DgState<M>) -> Result<()> {
        self.limit(mesh, stage, state).map(|_| ())
    }
}
