//! Reference-simplex quadrature and orthonormal polynomial bases.
//!
//! The reference interval is `[0, 1]` and the reference triangle has vertices
//! `(0,0), (1,0), (0,1)`. Bases are orthonormal in `L^2` of the reference
//! simplex, so on an affine element `K` the mass matrix is `|K| / |K^| I`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mesh::{ElementGeometry, Point};

/// Largest number of basis functions (`P^2` on triangles).
pub const MAX_BASIS: usize = 6;

/// Reference simplex measure: 1 for the interval, 1/2 for the triangle.
pub fn reference_volume(dim: usize) -> f64 {
    if dim == 1 {
        1.0
    } else {
        0.5
    }
}

#[derive(Clone, Debug)]
pub struct QuadratureRule {
    pub dim: usize,
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
    /// Polynomials of total degree up to this value are integrated exactly.
    pub degree: usize,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(Point) -> f64) -> f64 {
        self.points.iter().zip(&self.weights).map(|(&p, &w)| w * f(p)).sum()
    }
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        // Map from [-1, 1] to [0, 1], ascending order.
        nodes[n - 1 - i] = 0.5 * (x + 1.0);
        weights[n - 1 - i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Gauss rule on `[0, 1]` with `n` points as a 1D quadrature rule.
pub fn interval_rule(n: usize) -> QuadratureRule {
    let (x, w) = gauss_legendre(n);
    QuadratureRule {
        dim: 1,
        points: x.into_iter().map(|t| [t, 0.0]).collect(),
        weights: w,
        degree: 2 * n - 1,
    }
}

/// Collapsed-coordinate Gauss rule on the reference triangle, exact to `degree`.
pub fn collapsed_triangle_rule(degree: usize) -> QuadratureRule {
    let nu = degree / 2 + 1;
    let nv = (degree + 1) / 2 + 1;
    let (xu, wu) = gauss_legendre(nu);
    let (xv, wv) = gauss_legendre(nv);
    let mut points = Vec::with_capacity(nu * nv);
    let mut weights = Vec::with_capacity(nu * nv);
    for (v, wvv) in xv.iter().zip(&wv) {
        for (u, wuu) in xu.iter().zip(&wu) {
            points.push([u * (1.0 - v), *v]);
            weights.push(wuu * wvv * (1.0 - v));
        }
    }
    QuadratureRule {
        dim: 2,
        points,
        weights,
        degree,
    }
}

/// A rule on the reference simplex exact to at least `degree`.
pub fn simplex_rule(dim: usize, degree: usize) -> QuadratureRule {
    if dim == 1 {
        let mut r = interval_rule(degree / 2 + 1);
        r.degree = r.degree.max(degree);
        r
    } else {
        collapsed_triangle_rule(degree)
    }
}

/// Symmetric 7-point rule of degree 5 on the reference triangle.
fn triangle_rule_7() -> QuadratureRule {
    let s15 = 15f64.sqrt();
    let a1 = (6.0 - s15) / 21.0;
    let a2 = (6.0 + s15) / 21.0;
    let w0 = 9.0 / 40.0;
    let w1 = (155.0 - s15) / 1200.0;
    let w2 = (155.0 + s15) / 1200.0;
    let mut points = vec![[1.0 / 3.0, 1.0 / 3.0]];
    let mut weights = vec![w0];
    for (a, w) in [(a1, w1), (a2, w2)] {
        let b = 1.0 - 2.0 * a;
        for p in [[a, a], [b, a], [a, b]] {
            points.push(p);
            weights.push(w);
        }
    }
    for w in &mut weights {
        *w *= 0.5;
    }
    QuadratureRule {
        dim: 2,
        points,
        weights,
        degree: 5,
    }
}

/// Volume rule used by the solver for degree-`k` elements (exact to at least `2k + 1`).
pub fn element_quadrature(dim: usize, k: usize) -> QuadratureRule {
    if dim == 1 {
        interval_rule(k + 2)
    } else {
        triangle_rule_7()
    }
}

/// Face rule: `k + 1` Gauss–Legendre points on `[0, 1]`.
pub fn edge_quadrature(k: usize) -> QuadratureRule {
    interval_rule(k + 1)
}

/// Orthonormal basis of `P^k` on the reference simplex.
#[derive(Clone, Debug)]
pub struct Basis {
    dim: usize,
    degree: usize,
    exponents: Vec<(u32, u32)>,
    /// Row `i` holds the monomial coefficients of basis function `i`.
    coeffs: Vec<Vec<f64>>,
}

impl Basis {
    pub fn new(dim: usize, degree: usize) -> Result<Self> {
        if !(1..=2).contains(&degree) {
            return Err(Error::InvalidArgument(format!("unsupported polynomial degree {degree}")));
        }
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidArgument(format!("unsupported dimension {dim}")));
        }
        let mut exponents = Vec::new();
        for total in 0..=degree as u32 {
            if dim == 1 {
                exponents.push((total, 0));
            } else {
                for b in 0..=total {
                    exponents.push((total - b, b));
                }
            }
        }
        let n = exponents.len();
        let rule = simplex_rule(dim, 2 * degree);
        // Monomial values at quadrature points.
        let mono: Vec<Vec<f64>> = rule
            .points
            .iter()
            .map(|p| exponents.iter().map(|&(a, b)| p[0].powi(a as i32) * p[1].powi(b as i32)).collect())
            .collect();
        let inner = |u: &[f64], v: &[f64]| -> f64 {
            let mut s = 0.0;
            for (q, w) in rule.weights.iter().enumerate() {
                let fu: f64 = u.iter().zip(&mono[q]).map(|(c, m)| c * m).sum();
                let fv: f64 = v.iter().zip(&mono[q]).map(|(c, m)| c * m).sum();
                s += w * fu * fv;
            }
            s
        };
        // Modified Gram-Schmidt, applied twice for orthogonality at roundoff level.
        let mut coeffs: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut c = vec![0.0; n];
            c[i] = 1.0;
            for _ in 0..2 {
                for prev in &coeffs {
                    let proj = inner(&c, prev);
                    for (ci, pi) in c.iter_mut().zip(prev) {
                        *ci -= proj * pi;
                    }
                }
            }
            let norm = inner(&c, &c).sqrt();
            for ci in &mut c {
                *ci /= norm;
            }
            coeffs.push(c);
        }
        Ok(Self {
            dim,
            degree,
            exponents,
            coeffs,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of basis functions `L`.
    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    /// Value of the (constant) first basis function.
    pub fn constant_value(&self) -> f64 {
        1.0 / reference_volume(self.dim).sqrt()
    }

    pub fn eval(&self, xi: Point, out: &mut [f64]) {
        let mut mono = [0.0; MAX_BASIS];
        for (m, &(a, b)) in mono.iter_mut().zip(&self.exponents) {
            *m = xi[0].powi(a as i32) * xi[1].powi(b as i32);
        }
        for (o, c) in out.iter_mut().zip(&self.coeffs) {
            *o = c.iter().zip(&mono).map(|(c, m)| c * m).sum();
        }
    }

    pub fn values(&self, xi: Point) -> Vec<f64> {
        let mut v = vec![0.0; self.len()];
        self.eval(xi, &mut v);
        v
    }

    /// Reference gradients.
    pub fn eval_grad(&self, xi: Point, out: &mut [Point]) {
        let mut d = [[0.0; 2]; MAX_BASIS];
        for (di, &(a, b)) in d.iter_mut().zip(&self.exponents) {
            let dx = if a == 0 { 0.0 } else { a as f64 * xi[0].powi(a as i32 - 1) * xi[1].powi(b as i32) };
            let dy = if b == 0 { 0.0 } else { b as f64 * xi[0].powi(a as i32) * xi[1].powi(b as i32 - 1) };
            *di = [dx, dy];
        }
        for (o, c) in out.iter_mut().zip(&self.coeffs) {
            *o = [0.0, 0.0];
            for (ci, di) in c.iter().zip(&d) {
                o[0] += ci * di[0];
                o[1] += ci * di[1];
            }
        }
    }

    pub fn grads(&self, xi: Point) -> Vec<Point> {
        let mut v = vec![[0.0; 2]; self.len()];
        self.eval_grad(xi, &mut v);
        v
    }

    /// Reference Hessians.
    pub fn eval_hessian(&self, xi: Point, out: &mut [[[f64; 2]; 2]]) {
        let d2 = |a: u32, n: u32, x: f64| -> f64 {
            match n {
                0 => x.powi(a as i32),
                1 => {
                    if a == 0 {
                        0.0
                    } else {
                        a as f64 * x.powi(a as i32 - 1)
                    }
                }
                _ => {
                    if a < 2 {
                        0.0
                    } else {
                        (a * (a - 1)) as f64 * x.powi(a as i32 - 2)
                    }
                }
            }
        };
        for (o, c) in out.iter_mut().zip(&self.coeffs) {
            *o = [[0.0; 2]; 2];
            for (ci, &(a, b)) in c.iter().zip(&self.exponents) {
                o[0][0] += ci * d2(a, 2, xi[0]) * d2(b, 0, xi[1]);
                let mixed = ci * d2(a, 1, xi[0]) * d2(b, 1, xi[1]);
                o[0][1] += mixed;
                o[1][0] += mixed;
                o[1][1] += ci * d2(a, 0, xi[0]) * d2(b, 2, xi[1]);
            }
        }
    }

    pub fn hessians(&self, xi: Point) -> Vec<[[f64; 2]; 2]> {
        let mut v = vec![[[0.0; 2]; 2]; self.len()];
        self.eval_hessian(xi, &mut v);
        v
    }
}

/// Mass matrix of the pulled-back basis on an affine element.
pub fn mass_matrix(geom: &ElementGeometry, basis: &Basis) -> Result<DMatrix<f64>> {
    if !(geom.volume > 0.0) {
        return Err(Error::Numerical("degenerate element in mass matrix".into()));
    }
    let s = geom.volume / reference_volume(basis.dim());
    Ok(DMatrix::identity(basis.len(), basis.len()) * s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factorial(n: u32) -> f64 {
        (1..=n).map(|k| k as f64).product()
    }

    fn triangle_monomial(a: u32, b: u32) -> f64 {
        factorial(a) * factorial(b) / factorial(a + b + 2)
    }

    #[test]
    fn gauss_legendre_exactness() {
        let r = interval_rule(2);
        assert!((r.integrate(|p| p[0].powi(3)) - 0.25).abs() < 1e-15);
        for n in 1..8 {
            let r = interval_rule(n);
            assert!(r.weights.iter().all(|&w| w > 0.0));
            for p in 0..=(2 * n - 1) {
                let exact = 1.0 / (p as f64 + 1.0);
                assert!((r.integrate(|x| x[0].powi(p as i32)) - exact).abs() < 1e-14, "n={n} p={p}");
            }
        }
    }

    #[test]
    fn triangle_rules_exact_on_monomials() {
        for rule in [element_quadrature(2, 1), element_quadrature(2, 2), collapsed_triangle_rule(9)] {
            assert!(rule.weights.iter().all(|&w| w > 0.0));
            assert!((rule.weights.iter().sum::<f64>() - 0.5).abs() < 1e-15);
            let deg = rule.degree as u32;
            for t in 0..=deg {
                for b in 0..=t {
                    let a = t - b;
                    let q = rule.integrate(|p| p[0].powi(a as i32) * p[1].powi(b as i32));
                    assert!((q - triangle_monomial(a, b)).abs() < 1e-15, "x^{a} y^{b}");
                }
            }
        }
        let r = element_quadrature(2, 2);
        let q = r.integrate(|p| p[0].powi(2) * p[1].powi(3));
        assert!((q - triangle_monomial(2, 3)).abs() < 1e-16);
    }

    #[test]
    fn basis_sizes() {
        assert_eq!(Basis::new(1, 1).unwrap().len(), 2);
        assert_eq!(Basis::new(1, 2).unwrap().len(), 3);
        assert_eq!(Basis::new(2, 1).unwrap().len(), 3);
        assert_eq!(Basis::new(2, 2).unwrap().len(), 6);
        assert!(Basis::new(2, 3).is_err());
        assert!(Basis::new(2, 0).is_err());
    }

    #[test]
    fn basis_is_orthonormal() {
        for dim in 1..=2 {
            for k in 1..=2 {
                let b = Basis::new(dim, k).unwrap();
                let rule = simplex_rule(dim, 2 * k + 2);
                let n = b.len();
                let mut gram = vec![vec![0.0; n]; n];
                for (p, w) in rule.points.iter().zip(&rule.weights) {
                    let v = b.values(*p);
                    for i in 0..n {
                        for j in 0..n {
                            gram[i][j] += w * v[i] * v[j];
                        }
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        let e = if i == j { 1.0 } else { 0.0 };
                        assert!((gram[i][j] - e).abs() < 1e-13, "d={dim} k={k} ({i},{j})");
                    }
                }
                let v = b.values([0.2, 0.3]);
                assert!((v[0] - b.constant_value()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let b = Basis::new(2, 2).unwrap();
        let x = [0.23, 0.41];
        let h = 1e-6;
        let g = b.grads(x);
        let hs = b.hessians(x);
        for dir in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[dir] += h;
            xm[dir] -= h;
            let vp = b.values(xp);
            let vm = b.values(xm);
            let gp = b.grads(xp);
            let gm = b.grads(xm);
            for i in 0..b.len() {
                assert!(((vp[i] - vm[i]) / (2.0 * h) - g[i][dir]).abs() < 1e-8);
                for c in 0..2 {
                    assert!(((gp[i][c] - gm[i][c]) / (2.0 * h) - hs[i][c][dir]).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn mass_matrix_scaling_and_quadrature_oracle() {
        let b = Basis::new(2, 2).unwrap();
        let reference = ElementGeometry::new(2, [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let m = mass_matrix(&reference, &b).unwrap();
        assert!((m - DMatrix::identity(6, 6)).abs().max() < 1e-15);

        let doubled = ElementGeometry::new(2, [[0.0, 0.0], [2.0, 0.0], [0.0, 1.0]]).unwrap();
        let m = mass_matrix(&doubled, &b).unwrap();
        assert!((m - DMatrix::identity(6, 6) * 2.0).abs().max() < 1e-15);

        // Assemble directly in physical space on a skewed element.
        let g = ElementGeometry::new(2, [[0.3, -0.2], [1.7, 0.4], [0.1, 1.3]]).unwrap();
        let rule = collapsed_triangle_rule(6);
        let scale = g.volume / 0.5;
        let mut direct = DMatrix::zeros(6, 6);
        for (p, w) in rule.points.iter().zip(&rule.weights) {
            let x = g.to_physical(*p);
            let v = b.values(g.to_reference(x));
            for i in 0..6 {
                for j in 0..6 {
                    direct[(i, j)] += w * scale * v[i] * v[j];
                }
            }
        }
        let m = mass_matrix(&g, &b).unwrap();
        assert!((m - direct).abs().max() < 1e-12);
    }

    #[test]
    fn transport_identity_of_pulled_back_basis() {
        // phi(x, t) = phi^(F_t^{-1} x) with vertices moving linearly; check
        // d/dt phi at a fixed physical point equals -grad(phi) . Xdot.
        let b = Basis::new(2, 2).unwrap();
        let x0 = [[0.0, 0.0], [1.0, 0.1], [0.2, 0.9]];
        let vel = [[0.3, -0.1], [-0.2, 0.4], [0.1, 0.2]];
        let at = |t: f64| {
            let v: Vec<Point> = (0..3).map(|i| [x0[i][0] + t * vel[i][0], x0[i][1] + t * vel[i][1]]).collect();
            ElementGeometry::new(2, [v[0], v[1], v[2]]).unwrap()
        };
        let p = [0.35, 0.3];
        let g0 = at(0.0);
        let bary = g0.barycentric(p);
        let xdot = [
            (0..3).map(|i| bary[i] * vel[i][0]).sum::<f64>(),
            (0..3).map(|i| bary[i] * vel[i][1]).sum::<f64>(),
        ];
        let grads = b.grads(g0.to_reference(p));
        let mut errs = Vec::new();
        for dt in [1e-3, 5e-4] {
            let vp = b.values(at(dt).to_reference(p));
            let vm = b.values(at(-dt).to_reference(p));
            let mut err: f64 = 0.0;
            for i in 0..b.len() {
                let fd = (vp[i] - vm[i]) / (2.0 * dt);
                let gx = g0.physical_gradient(grads[i]);
                err = err.max((fd + gx[0] * xdot[0] + gx[1] * xdot[1]).abs());
            }
            errs.push(err);
        }
        assert!(errs[0] < 1e-4);
        // Second-order agreement under halving.
        assert!(errs[1] < errs[0] / 3.0);
    }
}
