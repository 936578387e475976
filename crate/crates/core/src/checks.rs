//! Invariant suite: free-stream preservation, conservation, limiter
//! average preservation, eigensystems, mesh-equation gradients and
//! quadrature exactness. Each check reports a measured defect against a
//! tolerance.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::approx::{reference_volume, simplex_rule};
use crate::error::Result;
use crate::harness::{run, NormMode, RunConfig};
use crate::limiter::{Limiter, LimiterParams};
use crate::mesh::{generate_criss_cross, generate_interval, Mesh, Point, Rect, VertexClass};
use crate::mmpde::{mesh_energy, mesh_velocities, metric_from_hessian, MetricField};
use crate::physics::{Burgers, ConservationLaw, Euler1d, Euler2d, Primitive};
use crate::solver::{rk3_step, BoundaryCondition, BoundaryConditions, Discretization, MeshMotion, NoLimiter, StageGeometry};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub defect: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn new(name: &str, defect: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            defect,
            tolerance,
            passed: defect < tolerance,
        }
    }

    fn failed(name: &str, tolerance: f64, err: crate::Error) -> Self {
        log::error!("{name}: {err}");
        Self {
            name: name.to_string(),
            defect: f64::NAN,
            tolerance,
            passed: false,
        }
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<44} defect {:.3e} (tolerance {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.defect,
            self.tolerance
        )
    }
}

fn wrap(name: &str, tol: f64, r: Result<f64>) -> CheckOutcome {
    match r {
        Ok(d) => CheckOutcome::new(name, d, tol),
        Err(e) => CheckOutcome::failed(name, tol, e),
    }
}

/// Runs the whole suite.
pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        wrap("free stream, 1D Euler, random moving mesh", 1e-11, free_stream_1d(100, 11)),
        wrap("free stream, 2D Euler, random moving mesh", 1e-11, free_stream_2d(100, 12)),
        wrap("periodic conservation, 1D Burgers shock", 1e-11, conservation("burgers-shock", 40, None)),
        wrap("periodic conservation, 1D Euler", 1e-11, conservation("euler-advection", 40, Some(0.25))),
        wrap("periodic conservation, 2D Burgers shock", 1e-11, conservation("burgers-2d-shock", 8, None)),
        wrap("periodic conservation, 2D Euler", 1e-11, conservation("euler-2d", 6, Some(0.1))),
        wrap("limiter averages, scalar path", 1e-13, limiter_scalar_averages()),
        wrap("limiter averages, characteristic path", 1e-13, limiter_characteristic_averages()),
        wrap("eigensystem biorthogonality", 1e-12, eigensystem_biorthogonality(13)),
        wrap("eigensystem vs flux Jacobian", 1e-6, eigensystem_jacobian(14)),
        wrap("mesh-equation gradient, 20 random meshes", 1e-6, mmpde_gradient(20, 15)),
        wrap("metric scaling invariance of velocities", 1e-10, metric_scaling(16)),
        wrap("quadrature exactness", 1e-13, quadrature_exactness()),
    ]
}

fn jitter(mesh: &Mesh, base: &[Point], amp: f64, rng: &mut StdRng) -> Vec<Point> {
    base.iter()
        .enumerate()
        .map(|(v, p)| match mesh.vertex_class(v) {
            VertexClass::Interior => {
                let dy = if mesh.dim() == 2 { amp * rng.random_range(-1.0..1.0) } else { 0.0 };
                [p[0] + amp * rng.random_range(-1.0..1.0), p[1] + dy]
            }
            _ => *p,
        })
        .collect()
}

/// Runs `steps` RK3 steps of a constant state on a mesh jumping between random
/// perturbations of `mesh`; returns the largest coefficient drift. The mesh
/// speed is about `2 amp / dt`, so `amp` must stay well below the inradius.
fn free_stream<const M: usize, L: ConservationLaw<M>>(mesh: &Mesh, law: &L, u: [f64; M], amp: f64, dt: f64, steps: usize, seed: u64) -> Result<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    let bc = BoundaryConditions::uniform(BoundaryCondition::Transmissive);
    let mut drift: f64 = 0.0;
    for k in [1, 2] {
        let dg = Discretization::new(mesh.dim(), k)?;
        let mut x = jitter(mesh, mesh.coords(), amp, &mut rng);
        let mut state = dg.project(mesh, &x, &|_| u)?;
        let exact = state.clone();
        let mut t = 0.0;
        for _ in 0..steps {
            let next = jitter(mesh, mesh.coords(), amp, &mut rng);
            let motion = MeshMotion::new(t, dt, x, next.clone())?;
            state = rk3_step(&dg, mesh, &motion, &state, law, &bc, &mut NoLimiter)?;
            x = next;
            t += dt;
        }
        // Orthonormal basis: a constant has the same coefficients on every element.
        for (a, b) in state.as_slice().iter().zip(exact.as_slice()) {
            for m in 0..M {
                drift = drift.max((a[m] - b[m]).abs());
            }
        }
    }
    Ok(drift)
}

pub fn free_stream_1d(steps: usize, seed: u64) -> Result<f64> {
    let mesh = generate_interval(16, 0.0, 1.0)?.make_periodic(0)?;
    let law = Euler1d::default();
    let u: [f64; 3] = law.conserved_of(&Primitive {
        density: 1.3,
        velocity: [0.6, 0.0],
        pressure: 0.9,
    });
    free_stream(&mesh, &law, u, 0.04 / 16.0, 2e-3, steps, seed)
}

pub fn free_stream_2d(steps: usize, seed: u64) -> Result<f64> {
    let mesh = generate_criss_cross(6, 6, Rect::new(0.0, 1.0, 0.0, 1.0))?.make_periodic(0)?.make_periodic(1)?;
    let law = Euler2d::default();
    let u: [f64; 4] = law.conserved_of(&Primitive {
        density: 1.1,
        velocity: [0.4, -0.3],
        pressure: 0.8,
    });
    free_stream(&mesh, &law, u, 0.02 / 6.0, 2e-3, steps, seed)
}

/// Largest per-component mass change per unit time of a full moving-mesh run
/// with the limiter on.
pub fn conservation(problem: &str, n: usize, t_final: Option<f64>) -> Result<f64> {
    let mut cfg = RunConfig::new(problem, 2, n);
    cfg.t_final = t_final;
    cfg.norms = NormMode::FinalTime;
    let out = run(&cfg)?;
    let s = out.summary;
    let drift = s.mass_initial.iter().zip(&s.mass_final).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(drift / s.final_time)
}

fn require_flags(count: usize) -> Result<()> {
    if count == 0 {
        return Err(crate::Error::Numerical("limiter check flagged no cells".into()));
    }
    Ok(())
}

fn step_profile(x: Point) -> bool {
    x[0] + 0.3 * x[1] < 0.43
}

pub fn limiter_scalar_averages() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for dim in [1, 2] {
        let mesh = if dim == 1 {
            generate_interval(20, 0.0, 1.0)?.make_periodic(0)?
        } else {
            generate_criss_cross(6, 6, Rect::new(0.0, 1.0, 0.0, 1.0))?.make_periodic(0)?.make_periodic(1)?
        };
        let law = Burgers::new(dim);
        for k in [1, 2] {
            let dg = Discretization::new(dim, k)?;
            let stage = StageGeometry::at_rest(&mesh, mesh.coords().to_vec(), 0.0)?;
            let state = dg.project(&mesh, mesh.coords(), &|x| [if step_profile(x) { 2.0 } else { -0.5 } + 0.3 * (7.0 * x[1]).sin()])?;
            let mut limited = state.clone();
            let flags = Limiter::new(&dg, &law, LimiterParams::default()).limit(&mesh, &stage, &mut limited)?;
            require_flags(flags.count())?;
            for e in 0..mesh.n_elements() {
                worst = worst.max((state.cell_average(e)[0] - limited.cell_average(e)[0]).abs());
            }
        }
    }
    Ok(worst)
}

pub fn limiter_characteristic_averages() -> Result<f64> {
    let mut worst: f64 = 0.0;
    let sod = |x: Point| if step_profile(x) { (1.0, 1.0) } else { (0.125, 0.1) };
    let mesh1 = generate_interval(20, 0.0, 1.0)?;
    let law1 = Euler1d::default();
    let mesh2 = generate_criss_cross(6, 6, Rect::new(0.0, 1.0, 0.0, 1.0))?;
    let law2 = Euler2d::default();
    for k in [1, 2] {
        let dg = Discretization::new(1, k)?;
        let stage = StageGeometry::at_rest(&mesh1, mesh1.coords().to_vec(), 0.0)?;
        let state = dg.project(&mesh1, mesh1.coords(), &|x| {
            let (r, p) = sod(x);
            law1.conserved_of(&Primitive { density: r, velocity: [0.2, 0.0], pressure: p })
        })?;
        let mut limited = state.clone();
        require_flags(Limiter::new(&dg, &law1, LimiterParams::default()).limit(&mesh1, &stage, &mut limited)?.count())?;
        for e in 0..mesh1.n_elements() {
            let (a, b) = (state.cell_average(e), limited.cell_average(e));
            worst = (0..3).map(|m| (a[m] - b[m]).abs()).fold(worst, f64::max);
        }

        let dg = Discretization::new(2, k)?;
        let stage = StageGeometry::at_rest(&mesh2, mesh2.coords().to_vec(), 0.0)?;
        let state = dg.project(&mesh2, mesh2.coords(), &|x| {
            let (r, p) = sod(x);
            law2.conserved_of(&Primitive { density: r, velocity: [0.2, -0.1], pressure: p })
        })?;
        let mut limited = state.clone();
        require_flags(Limiter::new(&dg, &law2, LimiterParams::default()).limit(&mesh2, &stage, &mut limited)?.count())?;
        for e in 0..mesh2.n_elements() {
            let (a, b) = (state.cell_average(e), limited.cell_average(e));
            worst = (0..4).map(|m| (a[m] - b[m]).abs()).fold(worst, f64::max);
        }
    }
    Ok(worst)
}

fn random_primitive(rng: &mut StdRng, dim: usize) -> Primitive {
    Primitive {
        density: rng.random_range(0.1..10.0),
        velocity: [rng.random_range(-3.0..3.0), if dim == 2 { rng.random_range(-3.0..3.0) } else { 0.0 }],
        pressure: rng.random_range(0.1..100.0),
    }
}

fn random_normal(rng: &mut StdRng, dim: usize) -> Point {
    if dim == 1 {
        [if rng.random_bool(0.5) { 1.0 } else { -1.0 }, 0.0]
    } else {
        let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        [th.cos(), th.sin()]
    }
}

fn eigen_defects<const M: usize, L: ConservationLaw<M>>(law: &L, u: &[f64; M], n: Point) -> Result<(f64, f64)> {
    let es = law
        .eigensystem(u, n)
        .map_err(|e| crate::Error::Numerical(format!("{e:?}")))?
        .ok_or_else(|| crate::Error::Numerical("no eigensystem".into()))?;
    // Central-difference Jacobian of the normal flux.
    let mut jac = [[0.0; M]; M];
    for j in 0..M {
        let h = 1e-6 * u[j].abs().max(1.0);
        let (mut up, mut um) = (*u, *u);
        up[j] += h;
        um[j] -= h;
        let fp = law.normal_flux(&up, n).map_err(|e| crate::Error::Numerical(format!("{e:?}")))?;
        let fm = law.normal_flux(&um, n).map_err(|e| crate::Error::Numerical(format!("{e:?}")))?;
        for i in 0..M {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    let (mut ortho, mut fd): (f64, f64) = (0.0, 0.0);
    for i in 0..M {
        for j in 0..M {
            let lr: f64 = (0..M).map(|k| es.left[i][k] * es.right[k][j]).sum();
            ortho = ortho.max((lr - if i == j { 1.0 } else { 0.0 }).abs());
            let rl: f64 = (0..M).map(|k| es.right[i][k] * es.eigenvalues[k] * es.left[k][j]).sum();
            fd = fd.max((rl - jac[i][j]).abs() / jac[i][j].abs().max(1.0));
        }
    }
    Ok((ortho, fd))
}

fn eigen_sweep(seed: u64) -> Result<(f64, f64)> {
    let mut rng = StdRng::seed_from_u64(seed);
    let law2 = Euler2d::default();
    let law1 = Euler1d::default();
    let (mut a, mut b): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let u2: [f64; 4] = law2.conserved_of(&random_primitive(&mut rng, 2));
        let n2 = random_normal(&mut rng, 2);
        let (o, f) = eigen_defects(&law2, &u2, n2)?;
        a = a.max(o);
        b = b.max(f);
        let u1: [f64; 3] = law1.conserved_of(&random_primitive(&mut rng, 1));
        let n1 = random_normal(&mut rng, 1);
        let (o, f) = eigen_defects(&law1, &u1, n1)?;
        a = a.max(o);
        b = b.max(f);
    }
    Ok((a, b))
}

/// `max |L R - I|` over random admissible states and normals.
pub fn eigensystem_biorthogonality(seed: u64) -> Result<f64> {
    eigen_sweep(seed).map(|r| r.0)
}

/// `max |R Lambda L - dF.n/du|` (relative) against central differences.
pub fn eigensystem_jacobian(seed: u64) -> Result<f64> {
    eigen_sweep(seed).map(|r| r.1)
}

fn random_mesh_and_metric(rng: &mut StdRng) -> Result<(Mesh, Vec<Point>, Vec<Point>, MetricField)> {
    let nx = rng.random_range(2..5);
    let ny = rng.random_range(2..5);
    let mesh = generate_criss_cross(nx, ny, Rect::new(0.0, 1.0, 0.0, 1.0))?;
    let h = 1.0 / nx.max(ny) as f64;
    let x = jitter(&mesh, mesh.coords(), 0.08 * h, rng);
    let xi = jitter(&mesh, mesh.coords(), 0.08 * h, rng);
    mesh.check_valid(&x, 0.0)?;
    mesh.check_valid(&xi, 0.0)?;
    let (a, b, c): (f64, f64, f64) = (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
    let tensors = x
        .iter()
        .map(|p| metric_from_hessian(2, &[[a * p[0], c * p[0] * p[1]], [c * p[0] * p[1], b * (3.0 * p[1]).sin()]]))
        .collect();
    Ok((mesh, x, xi, MetricField { dim: 2, tensors }))
}

/// Relative error of the analytic nodal velocities against central
/// differences of the discrete energy, at interior vertices.
pub fn mmpde_gradient(meshes: usize, seed: u64) -> Result<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let tau = 0.1;
    for _ in 0..meshes {
        let (mesh, x, xi, metric) = random_mesh_and_metric(&mut rng)?;
        let vel = mesh_velocities(&mesh, &x, &xi, &metric, tau)?;
        let mut scale: f64 = 0.0;
        let mut err: f64 = 0.0;
        for v in 0..mesh.n_vertices() {
            if mesh.vertex_class(v) != VertexClass::Interior {
                continue;
            }
            let p = {
                let m = &metric.tensors[v];
                (m[0][0] * m[1][1] - m[0][1] * m[1][0]).powf(0.25) / tau
            };
            for c in 0..2 {
                let h = 1e-6;
                let (mut a, mut b) = (xi.clone(), xi.clone());
                a[v][c] += h;
                b[v][c] -= h;
                let g = (mesh_energy(&mesh, &x, &a, &metric)? - mesh_energy(&mesh, &x, &b, &metric)?) / (2.0 * h);
                let analytic = vel[v][c] / p;
                scale = scale.max(g.abs());
                err = err.max((analytic + g).abs());
            }
        }
        worst = worst.max(err / scale);
    }
    Ok(worst)
}

/// Relative change of the nodal velocities under `M -> c M`, `c in {0.1, 16}`.
pub fn metric_scaling(seed: u64) -> Result<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    let (mesh, x, xi, metric) = random_mesh_and_metric(&mut rng)?;
    let base = mesh_velocities(&mesh, &x, &xi, &metric, 0.1)?;
    let scale = base.iter().map(|v| v[0].abs().max(v[1].abs())).fold(0.0, f64::max);
    let mut worst: f64 = 0.0;
    for c in [0.1, 16.0] {
        let scaled = MetricField {
            dim: 2,
            tensors: metric.tensors.iter().map(|t| [[c * t[0][0], c * t[0][1]], [c * t[1][0], c * t[1][1]]]).collect(),
        };
        let v = mesh_velocities(&mesh, &x, &xi, &scaled, 0.1)?;
        for (a, b) in base.iter().zip(&v) {
            worst = worst.max((a[0] - b[0]).abs().max((a[1] - b[1]).abs()) / scale);
        }
    }
    Ok(worst)
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// Largest error over all monomials up to each rule's declared degree, for
/// the solver and error-norm rules in both dimensions.
pub fn quadrature_exactness() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for dim in [1, 2] {
        let mut rules: Vec<_> = (1..=2).map(|k| crate::approx::element_quadrature(dim, k)).collect();
        rules.extend((1..=7).map(|d| simplex_rule(dim, d)));
        if dim == 1 {
            rules.extend((1..=2).map(crate::approx::edge_quadrature));
        }
        for r in rules {
            let deg = r.degree as u32;
            let total: f64 = r.weights.iter().sum();
            worst = worst.max((total - reference_volume(dim)).abs());
            for a in 0..=deg {
                let bmax = if dim == 1 { 0 } else { deg - a };
                for b in 0..=bmax {
                    let q = r.integrate(|p| p[0].powi(a as i32) * p[1].powi(b as i32));
                    let exact = if dim == 1 {
                        1.0 / f64::from(a + 1)
                    } else {
                        factorial(a) * factorial(b) / factorial(a + b + 2)
                    };
                    worst = worst.max((q - exact).abs());
                }
            }
        }
    }
    Ok(worst)
}
