//! Problem catalog: initial and boundary data, exact solutions where they are
//! known, and the mesh for each benchmark.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{generate_criss_cross, generate_forward_step, generate_interval, BoundaryTag, Mesh, Rect};
use crate::physics::{Euler, Primitive};
use crate::solver::{BoundaryCondition, BoundaryConditions, BoundaryPoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LawKind {
    Burgers,
    Euler,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Interval { a: f64, b: f64 },
    Rectangle { x0: f64, x1: f64, y0: f64, y1: f64 },
    /// `(0, 3) x (0, 1)` with a step of height 0.2 from x = 0.6.
    ForwardStep,
}

impl Domain {
    pub fn dim(&self) -> usize {
        match self {
            Self::Interval { .. } => 1,
            _ => 2,
        }
    }

    pub fn volume(&self) -> f64 {
        match *self {
            Self::Interval { a, b } => b - a,
            Self::Rectangle { x0, x1, y0, y1 } => (x1 - x0) * (y1 - y0),
            Self::ForwardStep => 3.0 - 2.4 * 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundarySetup {
    Periodic,
    /// Inflow/outflow by zero-gradient extrapolation.
    Transmissive,
    Reflective,
    DoubleMach,
    ForwardStep,
}

/// Initial data; the first four also define exact solutions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setup {
    /// `u0 = shift + amplitude sin(wavenumber z)`, `z = x` (1D) or `x + y` (2D).
    BurgersSine { shift: f64, amplitude: f64, wavenumber: f64 },
    BurgersRiemann { left: f64, right: f64, x0: f64 },
    /// `rho = 1 + amplitude sin(wavenumber (z - (v . 1) t))` with constant velocity and pressure.
    EulerAdvection { amplitude: f64, wavenumber: f64, velocity: [f64; 2], pressure: f64 },
    /// Primitive `(rho, u, p)` states separated at `x0`.
    EulerRiemann { left: [f64; 3], right: [f64; 3], x0: f64 },
    ShuOsher,
    BlastWave,
    DoubleMach,
    ForwardStep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExactKind {
    Closed,
    /// Compared against a self-generated fine-mesh reference.
    Reference,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub name: String,
    pub law: LawKind,
    pub domain: Domain,
    pub setup: Setup,
    pub boundary: BoundarySetup,
    pub t_final: f64,
    /// Mesh time scale.
    pub tau: f64,
    /// Adaptation-scalar sensitivity (gas dynamics).
    pub beta: f64,
    /// Default resolution (elements in 1D, grid cells along x in 2D).
    pub n: usize,
    pub exact: ExactKind,
    pub gamma: f64,
}

pub const DMR_POST: [f64; 4] = [8.0, 57.1597, -33.0012, 563.544];
pub const DMR_PRE: [f64; 4] = [1.4, 0.0, 0.0, 2.5];

impl ProblemSpec {
    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Number of conserved components.
    pub fn components(&self) -> usize {
        match self.law {
            LawKind::Burgers => 1,
            LawKind::Euler => self.dim() + 2,
        }
    }

    pub fn default_cfl(degree: usize) -> f64 {
        if degree <= 1 {
            0.3
        } else {
            0.15
        }
    }

    /// Initial mesh with `n` elements (1D) or `n` grid cells along x (2D).
    pub fn mesh(&self, n: usize) -> Result<Mesh> {
        if n == 0 {
            return Err(Error::InvalidArgument("resolution must be at least 1".into()));
        }
        let mesh = match self.domain {
            Domain::Interval { a, b } => generate_interval(n, a, b)?,
            Domain::Rectangle { x0, x1, y0, y1 } => {
                let ny = ((n as f64) * (y1 - y0) / (x1 - x0)).round().max(1.0) as usize;
                generate_criss_cross(n, ny, Rect::new(x0, x1, y0, y1))?
            }
            Domain::ForwardStep => generate_forward_step(n, ((n as f64) / 3.0).round() as usize)?,
        };
        if self.boundary == BoundarySetup::Periodic {
            let mesh = mesh.make_periodic(0)?;
            if self.dim() == 2 {
                return mesh.make_periodic(1);
            }
            return Ok(mesh);
        }
        Ok(mesh)
    }

    fn conserved(&self, rho: f64, vel: [f64; 2], p: f64) -> [f64; 4] {
        let prim = Primitive {
            density: rho,
            velocity: vel,
            pressure: p,
        };
        if self.dim() == 1 {
            let u: [f64; 3] = Euler::<1>::new(self.gamma).conserved_of(&prim);
            [u[0], u[1], u[2], 0.0]
        } else {
            Euler::<2>::new(self.gamma).conserved_of(&prim)
        }
    }

    /// Initial state padded to four components.
    pub fn initial(&self, x: [f64; 2]) -> [f64; 4] {
        match self.setup {
            Setup::ShuOsher => {
                if x[0] < -4.0 {
                    self.conserved(3.857143, [2.629369, 0.0], 10.333333)
                } else {
                    self.conserved(1.0 + 0.2 * (5.0 * x[0]).sin(), [0.0, 0.0], 1.0)
                }
            }
            Setup::BlastWave => {
                let p = if x[0] < 0.1 {
                    1000.0
                } else if x[0] < 0.9 {
                    0.01
                } else {
                    100.0
                };
                self.conserved(1.0, [0.0, 0.0], p)
            }
            Setup::DoubleMach => {
                if x[1] >= 3f64.sqrt() * (x[0] - 1.0 / 6.0) {
                    DMR_POST
                } else {
                    DMR_PRE
                }
            }
            Setup::ForwardStep => self.conserved(1.4, [3.0, 0.0], 1.0),
            _ => self.exact(x, 0.0).expect("closed-form setup"),
        }
    }

    /// Exact state padded to four components, for setups with a closed form.
    pub fn exact(&self, x: [f64; 2], t: f64) -> Option<[f64; 4]> {
        let z = if self.dim() == 1 { x[0] } else { x[0] + x[1] };
        match self.setup {
            Setup::BurgersSine { shift, amplitude, wavenumber } => {
                let c = self.dim() as f64;
                Some([exact_burgers_sine(z, t, shift, amplitude, wavenumber, c), 0.0, 0.0, 0.0])
            }
            Setup::BurgersRiemann { left, right, x0 } => Some([exact_burgers_riemann(x[0] - x0, t, left, right), 0.0, 0.0, 0.0]),
            Setup::EulerAdvection { amplitude, wavenumber, velocity, pressure } => {
                let drift = if self.dim() == 1 { velocity[0] } else { velocity[0] + velocity[1] };
                let rho = 1.0 + amplitude * (wavenumber * (z - drift * t)).sin();
                Some(self.conserved(rho, velocity, pressure))
            }
            Setup::EulerRiemann { left, right, x0 } => {
                let s = if t > 0.0 { (x[0] - x0) / t } else if x[0] < x0 { f64::NEG_INFINITY } else { f64::INFINITY };
                let w = riemann_exact_euler(self.gamma, left, right, s).ok()?;
                Some(self.conserved(w[0], [w[1], 0.0], w[2]))
            }
            _ => None,
        }
    }

    /// Typed initial-data closure.
    pub fn initial_fn<const M: usize>(&self) -> impl Fn([f64; 2]) -> [f64; M] + '_ {
        move |x| truncate(self.initial(x))
    }

    /// Boundary conditions for the `M`-component system.
    pub fn boundary_conditions<const M: usize>(&self) -> BoundaryConditions<M> {
        use BoundaryCondition as B;
        match self.boundary {
            BoundarySetup::Periodic | BoundarySetup::Transmissive => BoundaryConditions::uniform(B::Transmissive),
            BoundarySetup::Reflective => BoundaryConditions::uniform(B::Reflective),
            BoundarySetup::ForwardStep => BoundaryConditions::uniform(B::Reflective)
                .with(BoundaryTag::Left, B::Dirichlet(truncate(self.conserved(1.4, [3.0, 0.0], 1.0))))
                .with(BoundaryTag::Right, B::Transmissive),
            BoundarySetup::DoubleMach => {
                let post: [f64; M] = truncate(DMR_POST);
                let pre: [f64; M] = truncate(DMR_PRE);
                let bottom = Arc::new(move |p: &BoundaryPoint<M>| {
                    if p.x[0] < 1.0 / 6.0 {
                        post
                    } else {
                        reflect_momentum(&p.interior, p.normal)
                    }
                });
                let top = Arc::new(move |p: &BoundaryPoint<M>| {
                    if p.x[0] <= 1.0 / 6.0 + (1.0 + 20.0 * p.time) / 3f64.sqrt() {
                        post
                    } else {
                        pre
                    }
                });
                BoundaryConditions::uniform(B::Transmissive)
                    .with(BoundaryTag::Left, B::Dirichlet(post))
                    .with(BoundaryTag::Bottom, B::Custom(bottom))
                    .with(BoundaryTag::Top, B::Custom(top))
            }
        }
    }
}

/// Mirror of the normal momentum for a 2D Euler state (identity for other sizes).
fn reflect_momentum<const M: usize>(u: &[f64; M], n: [f64; 2]) -> [f64; M] {
    let mut out = *u;
    if M == 4 {
        let mn = u[1] * n[0] + u[2] * n[1];
        out[1] = u[1] - 2.0 * mn * n[0];
        out[2] = u[2] - 2.0 * mn * n[1];
    }
    out
}

fn truncate<const M: usize>(u: [f64; 4]) -> [f64; M] {
    std::array::from_fn(|i| u[i])
}

/// Entropy solution of `u_t + c (u^2/2)_z = 0` with `u0 = shift + amplitude sin(omega z)`
/// (`c = 1` in 1D, `c = 2` for the diagonal 2D problem), before or after shock
/// formation. Requires `amplitude > 0`. The shock sits where the moving-frame
/// phase hits the descending zero of the sine; each side takes its own
/// characteristic branch.
pub fn exact_burgers_sine(z: f64, t: f64, shift: f64, amplitude: f64, omega: f64, c: f64) -> f64 {
    if t == 0.0 {
        return shift + amplitude * (omega * z).sin();
    }
    let k = omega * c * amplitude * t;
    // Phase of the point in the frame moving with the mean speed, measured from
    // the descending zero and wrapped to (-pi, pi].
    let mut y = (omega * (z - c * shift * t) - PI).rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    if y == 0.0 {
        return shift;
    }
    // Solve y = phi - k sin(phi) with sign(phi) = sign(y).
    let (mut lo, mut hi) = if y > 0.0 { (0.0, PI) } else { (-PI, 0.0) };
    let g = |p: f64| p - k * p.sin() - y;
    let mut phi = 0.5 * (lo + hi);
    for _ in 0..200 {
        let gp = g(phi);
        if gp.abs() < 1e-15 {
            break;
        }
        if gp < 0.0 {
            lo = phi;
        } else {
            hi = phi;
        }
        let d = 1.0 - k * phi.cos();
        let newton = phi - gp / d;
        phi = if d != 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-15 {
            break;
        }
    }
    shift - amplitude * phi.sin()
}

/// Entropy solution of the Burgers Riemann problem at `x` (relative to the jump) and time `t`.
pub fn exact_burgers_riemann(x: f64, t: f64, left: f64, right: f64) -> f64 {
    if left > right {
        let s = 0.5 * (left + right);
        if x < s * t {
            left
        } else {
            right
        }
    } else if x <= left * t {
        left
    } else if x >= right * t {
        right
    } else {
        x / t
    }
}

/// Exact solution of the 1D Euler Riemann problem with primitive states
/// `(rho, u, p)`, sampled at `s = x / t`.
pub fn riemann_exact_euler(gamma: f64, left: [f64; 3], right: [f64; 3], s: f64) -> Result<[f64; 3]> {
    let [rl, ul, pl] = left;
    let [rr, ur, pr] = right;
    if !(rl > 0.0 && rr > 0.0 && pl > 0.0 && pr > 0.0) {
        return Err(Error::InvalidArgument("Riemann states must have positive density and pressure".into()));
    }
    if left == right {
        return Ok(left);
    }
    let g = gamma;
    let cl = (g * pl / rl).sqrt();
    let cr = (g * pr / rr).sqrt();
    if 2.0 / (g - 1.0) * (cl + cr) <= ur - ul {
        return Err(Error::Numerical("Riemann problem generates vacuum".into()));
    }
    // Pressure function of one side and its derivative.
    let side = |p: f64, rk: f64, pk: f64, ck: f64| -> (f64, f64) {
        if p > pk {
            let a = 2.0 / ((g + 1.0) * rk);
            let b = (g - 1.0) / (g + 1.0) * pk;
            let q = (a / (p + b)).sqrt();
            ((p - pk) * q, q * (1.0 - 0.5 * (p - pk) / (p + b)))
        } else {
            let r = (p / pk).powf((g - 1.0) / (2.0 * g));
            (2.0 * ck / (g - 1.0) * (r - 1.0), (p / pk).powf(-(g + 1.0) / (2.0 * g)) / (rk * ck))
        }
    };
    // Two-rarefaction initial guess.
    let z = (g - 1.0) / (2.0 * g);
    let mut p = ((cl + cr - 0.5 * (g - 1.0) * (ur - ul)) / (cl / pl.powf(z) + cr / pr.powf(z))).powf(1.0 / z);
    p = p.max(1e-12);
    let mut converged = false;
    for _ in 0..100 {
        let (fl, dl) = side(p, rl, pl, cl);
        let (fr, dr) = side(p, rr, pr, cr);
        let f = fl + fr + ur - ul;
        let next = (p - f / (dl + dr)).max(1e-3 * p);
        if (next - p).abs() <= 1e-14 * (next + p) {
            p = next;
            converged = true;
            break;
        }
        p = next;
    }
    if !converged {
        return Err(Error::Numerical("Riemann pressure iteration did not converge".into()));
    }
    let (fl, _) = side(p, rl, pl, cl);
    let (fr, _) = side(p, rr, pr, cr);
    let u = 0.5 * (ul + ur) + 0.5 * (fr - fl);
    let gr = (g - 1.0) / (g + 1.0);
    if s <= u {
        if p > pl {
            let rho = rl * (p / pl + gr) / (gr * p / pl + 1.0);
            let sl = ul - cl * ((g + 1.0) / (2.0 * g) * p / pl + (g - 1.0) / (2.0 * g)).sqrt();
            Ok(if s <= sl { left } else { [rho, u, p] })
        } else {
            let cstar = cl * (p / pl).powf(z);
            let head = ul - cl;
            let tail = u - cstar;
            if s <= head {
                Ok(left)
            } else if s >= tail {
                Ok([rl * (p / pl).powf(1.0 / g), u, p])
            } else {
                let c = 2.0 / (g + 1.0) * (cl + 0.5 * (g - 1.0) * (ul - s));
                let uf = 2.0 / (g + 1.0) * (cl + 0.5 * (g - 1.0) * ul + s);
                let rho = rl * (c / cl).powf(2.0 / (g - 1.0));
                Ok([rho, uf, pl * (c / cl).powf(2.0 * g / (g - 1.0))])
            }
        }
    } else if p > pr {
        let rho = rr * (p / pr + gr) / (gr * p / pr + 1.0);
        let sr = ur + cr * ((g + 1.0) / (2.0 * g) * p / pr + (g - 1.0) / (2.0 * g)).sqrt();
        Ok(if s >= sr { right } else { [rho, u, p] })
    } else {
        let cstar = cr * (p / pr).powf(z);
        let head = ur + cr;
        let tail = u + cstar;
        if s >= head {
            Ok(right)
        } else if s <= tail {
            Ok([rr * (p / pr).powf(1.0 / g), u, p])
        } else {
            let c = 2.0 / (g + 1.0) * (cr - 0.5 * (g - 1.0) * (ur - s));
            let uf = 2.0 / (g + 1.0) * (-cr + 0.5 * (g - 1.0) * ur + s);
            let rho = rr * (c / cr).powf(2.0 / (g - 1.0));
            Ok([rho, uf, pr * (c / cr).powf(2.0 * g / (g - 1.0))])
        }
    }
}

fn spec(name: &str, law: LawKind, domain: Domain, setup: Setup, boundary: BoundarySetup, t_final: f64, n: usize, exact: ExactKind) -> ProblemSpec {
    let dim = domain.dim();
    let (tau, beta) = match (law, exact) {
        (LawKind::Burgers, _) => (0.1, if dim == 1 { 10.0 } else { 1.0 }),
        (LawKind::Euler, ExactKind::Closed) if matches!(setup, Setup::EulerAdvection { .. }) => (0.1, 100.0),
        (LawKind::Euler, _) => (if dim == 1 { 1e-3 } else { 1e-4 }, if dim == 1 { 10.0 } else { 1.0 }),
    };
    ProblemSpec {
        name: name.to_string(),
        law,
        domain,
        setup,
        boundary,
        t_final,
        tau,
        beta,
        n,
        exact,
        gamma: 1.4,
    }
}

/// All benchmark problems.
pub fn catalog() -> Vec<ProblemSpec> {
    use BoundarySetup as B;
    use ExactKind as X;
    use LawKind::*;
    let sine_1d = Setup::BurgersSine { shift: 0.5, amplitude: 1.0, wavenumber: PI };
    let sine_2d = Setup::BurgersSine { shift: 0.5, amplitude: 1.0, wavenumber: 0.5 * PI };
    let unit = Domain::Interval { a: 0.0, b: 2.0 };
    let wide = Domain::Interval { a: -5.0, b: 5.0 };
    let square4 = Domain::Rectangle { x0: 0.0, x1: 4.0, y0: 0.0, y1: 4.0 };
    let mut blast = spec("blast-wave", Euler, Domain::Interval { a: 0.0, b: 1.0 }, Setup::BlastWave, B::Reflective, 0.038, 150, X::Reference);
    blast.beta = 1.0;
    vec![
        spec("burgers-smooth", Burgers, unit, sine_1d, B::Periodic, 0.5 / PI, 80, X::Closed),
        spec("burgers-shock", Burgers, unit, sine_1d, B::Periodic, 1.5 / PI, 80, X::Closed),
        spec("burgers-long", Burgers, unit, sine_1d, B::Periodic, 1.0, 80, X::Closed),
        spec(
            "burgers-riemann",
            Burgers,
            Domain::Interval { a: -1.0, b: 1.0 },
            Setup::BurgersRiemann { left: 1.0, right: 0.0, x0: 0.0 },
            B::Transmissive,
            1.0,
            100,
            X::Closed,
        ),
        spec(
            "euler-advection",
            Euler,
            unit,
            Setup::EulerAdvection { amplitude: 0.2, wavenumber: PI, velocity: [1.0, 0.0], pressure: 1.0 },
            B::Periodic,
            1.0,
            80,
            X::Closed,
        ),
        spec(
            "sod",
            Euler,
            wide,
            Setup::EulerRiemann { left: [1.0, 0.0, 1.0], right: [0.125, 0.0, 0.1], x0: 0.0 },
            B::Transmissive,
            2.0,
            100,
            X::Closed,
        ),
        spec(
            "lax",
            Euler,
            wide,
            Setup::EulerRiemann { left: [0.445, 0.698, 3.528], right: [0.5, 0.0, 0.571], x0: 0.0 },
            B::Transmissive,
            1.3,
            100,
            X::Closed,
        ),
        spec("shu-osher", Euler, wide, Setup::ShuOsher, B::Transmissive, 1.8, 150, X::Reference),
        blast,
        spec("burgers-2d", Burgers, square4, sine_2d, B::Periodic, 0.5 / PI, 16, X::Closed),
        spec("burgers-2d-shock", Burgers, square4, sine_2d, B::Periodic, 1.5 / PI, 16, X::Closed),
        spec(
            "euler-2d",
            Euler,
            square4,
            Setup::EulerAdvection { amplitude: 0.2, wavenumber: 0.5 * PI, velocity: [0.7, 0.3], pressure: 1.0 },
            B::Periodic,
            1.0,
            16,
            X::Closed,
        ),
        spec(
            "double-mach",
            Euler,
            Domain::Rectangle { x0: 0.0, x1: 4.0, y0: 0.0, y1: 1.0 },
            Setup::DoubleMach,
            B::DoubleMach,
            0.2,
            120,
            X::None,
        ),
        spec("forward-step", Euler, Domain::ForwardStep, Setup::ForwardStep, B::ForwardStep, 4.0, 120, X::None),
    ]
}

pub fn find(name: &str) -> Result<ProblemSpec> {
    catalog()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::UnknownProblem(name.to_string()))
}
