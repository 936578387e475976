//! Conservation laws: scalar Burgers and the Euler equations of gas dynamics.

use crate::mesh::Point;

/// Minimum density and pressure accepted for Euler states.
pub const ADMISSIBILITY_FLOOR: f64 = 1e-13;

/// An inadmissible state was encountered (density or pressure below the floor).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Inadmissible {
    pub density: f64,
    pub pressure: f64,
}

pub type StateResult<T> = std::result::Result<T, Inadmissible>;

/// Left/right eigenvectors (`left` rows, `right` columns) of a directional flux Jacobian.
#[derive(Clone, Copy, Debug)]
pub struct Eigensystem<const M: usize> {
    pub left: [[f64; M]; M],
    pub right: [[f64; M]; M],
    pub eigenvalues: [f64; M],
}

/// What the mesh adaptation monitors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptationVariable {
    /// The (single) solution component.
    Solution,
    /// The density/energy blend used for gas dynamics.
    DensityEnergy,
}

/// `u_t + div F(u) = 0` with `M` conserved components.
pub trait ConservationLaw<const M: usize>: Send + Sync {
    fn dim(&self) -> usize;

    fn name(&self) -> &'static str;

    /// Flux components `[f_1(u), f_2(u)]`; `f_2` is zero in 1D.
    fn flux(&self, u: &[f64; M]) -> StateResult<[[f64; M]; 2]>;

    /// Largest `|lambda - s|` over eigenvalues `lambda` of `F'(u) . n`.
    fn max_speed(&self, u: &[f64; M], n: Point, s: f64) -> StateResult<f64>;

    /// Characteristic decomposition along `n`; `None` for scalar laws.
    fn eigensystem(&self, _u: &[f64; M], _n: Point) -> StateResult<Option<Eigensystem<M>>> {
        Ok(None)
    }

    fn check_admissible(&self, _u: &[f64; M]) -> StateResult<()> {
        Ok(())
    }

    /// Exterior state for a reflecting wall with unit normal `n`.
    fn reflect(&self, u: &[f64; M], _n: Point) -> [f64; M] {
        *u
    }

    fn adaptation_variable(&self) -> AdaptationVariable;

    fn normal_flux(&self, u: &[f64; M], n: Point) -> StateResult<[f64; M]> {
        let f = self.flux(u)?;
        let mut out = [0.0; M];
        for (c, o) in out.iter_mut().enumerate() {
            *o = f[0][c] * n[0] + f[1][c] * n[1];
        }
        Ok(out)
    }
}

/// Inviscid Burgers: `f_i(u) = u^2 / 2` in every coordinate direction.
#[derive(Clone, Copy, Debug)]
pub struct Burgers {
    pub dim: usize,
}

impl Burgers {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    fn direction_sum(&self, n: Point) -> f64 {
        if self.dim == 1 {
            n[0]
        } else {
            n[0] + n[1]
        }
    }
}

impl ConservationLaw<1> for Burgers {
    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> &'static str {
        "burgers"
    }

    fn flux(&self, u: &[f64; 1]) -> StateResult<[[f64; 1]; 2]> {
        let f = 0.5 * u[0] * u[0];
        Ok(if self.dim == 1 { [[f], [0.0]] } else { [[f], [f]] })
    }

    fn max_speed(&self, u: &[f64; 1], n: Point, s: f64) -> StateResult<f64> {
        Ok((u[0] * self.direction_sum(n) - s).abs())
    }

    fn adaptation_variable(&self) -> AdaptationVariable {
        AdaptationVariable::Solution
    }
}

/// Primitive variables of a gas state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub density: f64,
    pub velocity: Point,
    pub pressure: f64,
}

/// Euler equations for a polytropic gas, `E = P/(gamma-1) + rho |v|^2 / 2`.
/// `D` is the spatial dimension and `M = D + 2`.
#[derive(Clone, Copy, Debug)]
pub struct Euler<const D: usize> {
    pub gamma: f64,
}

pub type Euler1d = Euler<1>;
pub type Euler2d = Euler<2>;

impl<const D: usize> Default for Euler<D> {
    fn default() -> Self {
        Self { gamma: 1.4 }
    }
}

impl<const D: usize> Euler<D> {
    pub fn new(gamma: f64) -> Self {
        Self { gamma }
    }

    pub fn primitive_of<const M: usize>(&self, u: &[f64; M]) -> Primitive {
        let rho = u[0];
        let mut v = [0.0; 2];
        for d in 0..D {
            v[d] = u[1 + d] / rho;
        }
        let kinetic = 0.5 * rho * (v[0] * v[0] + v[1] * v[1]);
        Primitive {
            density: rho,
            velocity: v,
            pressure: (self.gamma - 1.0) * (u[M - 1] - kinetic),
        }
    }

    pub fn conserved_of<const M: usize>(&self, p: &Primitive) -> [f64; M] {
        let mut u = [0.0; M];
        u[0] = p.density;
        for d in 0..D {
            u[1 + d] = p.density * p.velocity[d];
        }
        let v2 = p.velocity[0] * p.velocity[0] + p.velocity[1] * p.velocity[1];
        u[M - 1] = p.pressure / (self.gamma - 1.0) + 0.5 * p.density * v2;
        u
    }

    fn checked<const M: usize>(&self, u: &[f64; M]) -> StateResult<Primitive> {
        let p = self.primitive_of(u);
        if !(p.density > ADMISSIBILITY_FLOOR && p.pressure > ADMISSIBILITY_FLOOR) {
            return Err(Inadmissible {
                density: p.density,
                pressure: p.pressure,
            });
        }
        Ok(p)
    }

    pub fn sound_speed(&self, p: &Primitive) -> f64 {
        (self.gamma * p.pressure / p.density).sqrt()
    }

    fn flux_impl<const M: usize>(&self, u: &[f64; M]) -> StateResult<[[f64; M]; 2]> {
        let p = self.checked(u)?;
        let mut f = [[0.0; M]; 2];
        for d in 0..D {
            let vd = p.velocity[d];
            f[d][0] = u[1 + d];
            for k in 0..D {
                f[d][1 + k] = u[1 + k] * vd;
            }
            f[d][1 + d] += p.pressure;
            f[d][M - 1] = vd * (u[M - 1] + p.pressure);
        }
        Ok(f)
    }

    fn max_speed_impl<const M: usize>(&self, u: &[f64; M], n: Point, s: f64) -> StateResult<f64> {
        let p = self.checked(u)?;
        let c = self.sound_speed(&p);
        let un = if D == 1 { p.velocity[0] * n[0] } else { p.velocity[0] * n[0] + p.velocity[1] * n[1] };
        let nn = if D == 1 { n[0].abs() } else { (n[0] * n[0] + n[1] * n[1]).sqrt() };
        let rel = un - s;
        Ok((rel - c * nn).abs().max((rel + c * nn).abs()))
    }

    fn reflect_impl<const M: usize>(&self, u: &[f64; M], n: Point) -> [f64; M] {
        let mut out = *u;
        let mn: f64 = (0..D).map(|d| u[1 + d] * n[d]).sum();
        for d in 0..D {
            out[1 + d] -= 2.0 * mn * n[d];
        }
        out
    }
}

impl ConservationLaw<3> for Euler<1> {
    fn dim(&self) -> usize {
        1
    }

    fn name(&self) -> &'static str {
        "euler1d"
    }

    fn flux(&self, u: &[f64; 3]) -> StateResult<[[f64; 3]; 2]> {
        self.flux_impl(u)
    }

    fn max_speed(&self, u: &[f64; 3], n: Point, s: f64) -> StateResult<f64> {
        self.max_speed_impl(u, n, s)
    }

    fn eigensystem(&self, u: &[f64; 3], n: Point) -> StateResult<Option<Eigensystem<3>>> {
        let p = self.checked(u)?;
        let nx = n[0];
        let c = self.sound_speed(&p);
        let v = p.velocity[0];
        let h = (u[2] + p.pressure) / p.density;
        let b1 = (self.gamma - 1.0) / (c * c);
        let b2 = 0.5 * b1 * v * v;
        let un = v * nx;
        let left = [
            [0.5 * (b2 + un / c), -0.5 * (b1 * v + nx / c), 0.5 * b1],
            [1.0 - b2, b1 * v, -b1],
            [0.5 * (b2 - un / c), -0.5 * (b1 * v - nx / c), 0.5 * b1],
        ];
        let right = [
            [1.0, 1.0, 1.0],
            [v - c * nx, v, v + c * nx],
            [h - c * un, 0.5 * v * v, h + c * un],
        ];
        Ok(Some(Eigensystem {
            left,
            right,
            eigenvalues: [un - c, un, un + c],
        }))
    }

    fn check_admissible(&self, u: &[f64; 3]) -> StateResult<()> {
        self.checked(u).map(|_| ())
    }

    fn reflect(&self, u: &[f64; 3], n: Point) -> [f64; 3] {
        self.reflect_impl(u, n)
    }

    fn adaptation_variable(&self) -> AdaptationVariable {
        AdaptationVariable::DensityEnergy
    }
}

impl ConservationLaw<4> for Euler<2> {
    fn dim(&self) -> usize {
        2
    }

    fn name(&self) -> &'static str {
        "euler2d"
    }

    fn flux(&self, u: &[f64; 4]) -> StateResult<[[f64; 4]; 2]> {
        self.flux_impl(u)
    }

    fn max_speed(&self, u: &[f64; 4], n: Point, s: f64) -> StateResult<f64> {
        self.max_speed_impl(u, n, s)
    }

    fn eigensystem(&self, u: &[f64; 4], n: Point) -> StateResult<Option<Eigensystem<4>>> {
        let p = self.checked(u)?;
        let [nx, ny] = n;
        let c = self.sound_speed(&p);
        let [mu, nu] = p.velocity;
        let h = (u[3] + p.pressure) / p.density;
        let b1 = (self.gamma - 1.0) / (c * c);
        let b2 = 0.5 * b1 * (mu * mu + nu * nu);
        let un = mu * nx + nu * ny;
        let left = [
            [0.5 * (b2 + un / c), -0.5 * (b1 * mu + nx / c), -0.5 * (b1 * nu + ny / c), 0.5 * b1],
            [ny * mu - nx * nu, -ny, nx, 0.0],
            [1.0 - b2, b1 * mu, b1 * nu, -b1],
            [0.5 * (b2 - un / c), -0.5 * (b1 * mu - nx / c), -0.5 * (b1 * nu - ny / c), 0.5 * b1],
        ];
        let right = [
            [1.0, 0.0, 1.0, 1.0],
            [mu - c * nx, -ny, mu, mu + c * nx],
            [nu - c * ny, nx, nu, nu + c * ny],
            [h - c * un, -ny * mu + nx * nu, 0.5 * (mu * mu + nu * nu), h + c * un],
        ];
        Ok(Some(Eigensystem {
            left,
            right,
            eigenvalues: [un - c, un, un, un + c],
        }))
    }

    fn check_admissible(&self, u: &[f64; 4]) -> StateResult<()> {
        self.checked(u).map(|_| ())
    }

    fn reflect(&self, u: &[f64; 4], n: Point) -> [f64; 4] {
        self.reflect_impl(u, n)
    }

    fn adaptation_variable(&self) -> AdaptationVariable {
        AdaptationVariable::DensityEnergy
    }
}

/// Matrix-vector product `A x` for small dense matrices.
#[inline]
pub fn mat_vec<const M: usize>(a: &[[f64; M]; M], x: &[f64; M]) -> [f64; M] {
    let mut y = [0.0; M];
    for (yi, row) in y.iter_mut().zip(a) {
        *yi = row.iter().zip(x).map(|(r, v)| r * v).sum();
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prim2(rho: f64, mu: f64, nu: f64, p: f64) -> [f64; 4] {
        Euler2d::default().conserved_of(&Primitive {
            density: rho,
            velocity: [mu, nu],
            pressure: p,
        })
    }

    fn fd_jacobian<const M: usize>(law: &dyn ConservationLaw<M>, u: &[f64; M], n: Point) -> [[f64; M]; M] {
        let mut jac = [[0.0; M]; M];
        for j in 0..M {
            let h = 1e-6 * u[j].abs().max(1.0);
            let mut up = *u;
            let mut um = *u;
            up[j] += h;
            um[j] -= h;
            let fp = law.normal_flux(&up, n).unwrap();
            let fm = law.normal_flux(&um, n).unwrap();
            for i in 0..M {
                jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        jac
    }

    #[test]
    fn burgers_flux_and_speed() {
        let b = Burgers::new(1);
        assert_eq!(b.flux(&[2.0]).unwrap()[0][0], 2.0);
        assert_eq!(b.max_speed(&[1.0], [1.0, 0.0], 0.0).unwrap(), 1.0);
        assert_eq!(b.max_speed(&[1.0], [1.0, 0.0], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn euler_1d_flux_by_hand() {
        let law = Euler1d::default();
        let u: [f64; 3] = law.conserved_of(&Primitive {
            density: 1.0,
            velocity: [1.0, 0.0],
            pressure: 1.0,
        });
        assert!((u[2] - 3.0).abs() < 1e-15);
        let f = law.flux(&u).unwrap()[0];
        assert!((f[0] - 1.0).abs() < 1e-15);
        assert!((f[1] - 2.0).abs() < 1e-15);
        assert!((f[2] - 4.0).abs() < 1e-15);
        assert!(law.flux(&[-1.0, 0.0, 1.0]).is_err());
        assert!(law.flux(&[1.0, 0.0, -1.0]).is_err());
    }

    #[test]
    fn euler_2d_zero_velocity_flux() {
        let law = Euler2d::default();
        let u = prim2(1.3, 0.0, 0.0, 0.7);
        let f = law.flux(&u).unwrap();
        assert_eq!(f[0], [0.0, 0.7, 0.0, 0.0]);
        assert_eq!(f[1], [0.0, 0.0, 0.7, 0.0]);
    }

    #[test]
    fn sound_speed_and_signal_speed() {
        let law = Euler2d::default();
        let u = prim2(1.0, 0.0, 0.0, 1.0);
        let s = law.max_speed(&u, [1.0, 0.0], 0.0).unwrap();
        assert!((s - 1.4f64.sqrt()).abs() < 1e-14);
        assert!((s - 1.18322).abs() < 1e-5);
    }

    #[test]
    fn eigensystems_biorthogonal_and_diagonalize() {
        let law2 = Euler2d::default();
        let states = [prim2(1.0, 0.0, 0.0, 1.0), prim2(0.4, 0.7, -1.2, 2.5), prim2(8.0, 57.1597, -33.0012, 116.5)];
        for u in states {
            for theta in [0.0, 0.7, 2.1, -1.3] {
                let n = [f64::cos(theta), f64::sin(theta)];
                let es = law2.eigensystem(&u, n).unwrap().unwrap();
                let jac = fd_jacobian(&law2, &u, n);
                for i in 0..4 {
                    for j in 0..4 {
                        let lr: f64 = (0..4).map(|k| es.left[i][k] * es.right[k][j]).sum();
                        assert!((lr - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                        let rl: f64 = (0..4).map(|k| es.right[i][k] * es.eigenvalues[k] * es.left[k][j]).sum();
                        let scale = jac[i][j].abs().max(1.0);
                        assert!((rl - jac[i][j]).abs() < 1e-6 * scale, "{i}{j}: {rl} vs {}", jac[i][j]);
                    }
                }
            }
        }
        let law1 = Euler1d::default();
        let u: [f64; 3] = law1.conserved_of(&Primitive {
            density: 0.445,
            velocity: [0.698, 0.0],
            pressure: 3.528,
        });
        for nx in [1.0, -1.0] {
            let es = law1.eigensystem(&u, [nx, 0.0]).unwrap().unwrap();
            let jac = fd_jacobian(&law1, &u, [nx, 0.0]);
            for i in 0..3 {
                for j in 0..3 {
                    let lr: f64 = (0..3).map(|k| es.left[i][k] * es.right[k][j]).sum();
                    assert!((lr - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                    let rl: f64 = (0..3).map(|k| es.right[i][k] * es.eigenvalues[k] * es.left[k][j]).sum();
                    assert!((rl - jac[i][j]).abs() < 1e-6 * jac[i][j].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn rotational_consistency() {
        let law = Euler2d::default();
        let u = prim2(1.7, 0.3, -0.8, 2.2);
        for theta in [0.1, 1.0, 2.5, 4.0] {
            let (c, s) = (f64::cos(theta), f64::sin(theta));
            let fn_ = law.normal_flux(&u, [c, s]).unwrap();
            // Rotate velocity into the normal frame, take the x-flux, rotate back.
            let rot = [u[0], c * u[1] + s * u[2], -s * u[1] + c * u[2], u[3]];
            let fx = law.flux(&rot).unwrap()[0];
            let back = [fx[0], c * fx[1] - s * fx[2], s * fx[1] + c * fx[2], fx[3]];
            for i in 0..4 {
                assert!((fn_[i] - back[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reflection_flips_normal_momentum() {
        let law = Euler2d::default();
        let u = prim2(1.0, 2.0, 1.0, 1.0);
        let r = law.reflect(&u, [0.0, 1.0]);
        assert_eq!(r, [u[0], u[1], -u[2], u[3]]);
    }
}
