//! Run orchestration: configuration, the coupled step loop
//! (metric -> mesh move -> step size -> RK3 with limiting), error norms,
//! convergence tables, fine-mesh references and file output.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::approx::{simplex_rule, Basis, QuadratureRule, MAX_BASIS};
use crate::error::{Error, Result};
use crate::limiter::{Limiter, LimiterParams};
use crate::mesh::{Mesh, Point};
use crate::mmpde::{metric_field, MeshMover, MetricParams, MmpdeParams};
use crate::physics::{Burgers, ConservationLaw, Euler1d, Euler2d};
use crate::problems::{find, ExactKind, LawKind, ProblemSpec};
use crate::solver::{compute_dt, rk3_step, DgState, Discretization, MeshMotion, NoLimiter, StageGeometry, StageLimiter, StepControls};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    FinalTime,
    SpaceTime,
    Both,
}

/// Everything needed to reproduce one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub problem: String,
    pub degree: usize,
    pub n: usize,
    /// `None`: 0.3 for k = 1, 0.15 for k = 2.
    pub cfl: Option<f64>,
    pub tau: Option<f64>,
    pub beta: Option<f64>,
    pub sweeps: usize,
    pub substeps: usize,
    pub moving: bool,
    pub limiter: bool,
    pub t_final: Option<f64>,
    pub out: Option<PathBuf>,
    /// Write solution files every `cadence` steps (0: only the final state).
    pub cadence: usize,
    pub norms: NormMode,
    /// Abort with [`Error::Budget`] once a run exceeds this many seconds.
    pub wall_limit: Option<f64>,
}

impl RunConfig {
    pub fn new(problem: &str, degree: usize, n: usize) -> Self {
        Self {
            problem: problem.to_string(),
            degree,
            n,
            cfl: None,
            tau: None,
            beta: None,
            sweeps: 3,
            substeps: 5,
            moving: true,
            limiter: true,
            t_final: None,
            out: None,
            cadence: 0,
            norms: NormMode::Both,
            wall_limit: None,
        }
    }

    /// Parses a flat `key = value` file; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new("", 1, 0);
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "on" | "yes" | "1" => Ok(true),
                "false" | "off" | "no" | "0" => Ok(false),
                _ => Err(Error::Config(format!("bad value `{v}` for `{key}`"))),
            }
        }
        match key {
            "problem" => self.problem = value.to_string(),
            "k" | "degree" => self.degree = num(key, value)?,
            "n" => self.n = num(key, value)?,
            "cfl" => self.cfl = Some(num(key, value)?),
            "tau" => self.tau = Some(num(key, value)?),
            "beta" => self.beta = Some(num(key, value)?),
            "sweeps" => self.sweeps = num(key, value)?,
            "substeps" => self.substeps = num(key, value)?,
            "moving" => self.moving = flag(key, value)?,
            "limiter" => self.limiter = flag(key, value)?,
            "tfinal" | "t_final" => self.t_final = Some(num(key, value)?),
            "wall_limit" => self.wall_limit = Some(num(key, value)?),
            "out" => self.out = Some(PathBuf::from(value)),
            "cadence" => self.cadence = num(key, value)?,
            "norms" => {
                self.norms = match value {
                    "final" | "final-time" => NormMode::FinalTime,
                    "space-time" | "spacetime" => NormMode::SpaceTime,
                    "both" => NormMode::Both,
                    _ => return Err(Error::Config(format!("bad value `{value}` for `norms`"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        find(&self.problem)?;
        if !(1..=2).contains(&self.degree) {
            return Err(Error::Config(format!("degree must be 1 or 2, got {}", self.degree)));
        }
        if self.n == 0 {
            return Err(Error::Config("resolution must be at least 1".into()));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        for (name, v) in [("cfl", self.cfl), ("tau", self.tau), ("tfinal", self.t_final), ("wall_limit", self.wall_limit)] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return Err(Error::Config(format!("{name} must be positive")));
                }
            }
        }
        Ok(())
    }

    /// Flat `key = value` rendering (round-trips through [`RunConfig::parse`]).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "problem = {}", self.problem);
        let _ = writeln!(s, "k = {}", self.degree);
        let _ = writeln!(s, "n = {}", self.n);
        for (k, v) in [
            ("cfl", self.cfl),
            ("tau", self.tau),
            ("beta", self.beta),
            ("tfinal", self.t_final),
            ("wall_limit", self.wall_limit),
        ] {
            if let Some(v) = v {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        let _ = writeln!(s, "sweeps = {}", self.sweeps);
        let _ = writeln!(s, "substeps = {}", self.substeps);
        let _ = writeln!(s, "moving = {}", self.moving);
        let _ = writeln!(s, "limiter = {}", self.limiter);
        if let Some(o) = &self.out {
            let _ = writeln!(s, "out = {}", o.display());
        }
        let _ = writeln!(s, "cadence = {}", self.cadence);
        let norms = match self.norms {
            NormMode::FinalTime => "final",
            NormMode::SpaceTime => "space-time",
            NormMode::Both => "both",
        };
        let _ = writeln!(s, "norms = {norms}");
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub space_time: Norms,
    pub final_time: Norms,
}

/// Spatial error integrals of one component at one time.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SpatialError {
    pub l1: f64,
    pub l2_squared: f64,
    pub linf: f64,
}

/// Accumulates space-time norms with the right-endpoint rule in time.
#[derive(Clone, Debug, Default)]
pub struct ErrorAccumulator {
    l1: f64,
    l2: f64,
    linf: f64,
    last: SpatialError,
}

impl ErrorAccumulator {
    pub fn add(&mut self, dt: f64, e: SpatialError) {
        self.l1 += dt * e.l1;
        self.l2 += dt * e.l2_squared;
        self.linf = self.linf.max(e.linf);
        self.last = e;
    }

    pub fn set_final(&mut self, e: SpatialError) {
        self.last = e;
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport {
            space_time: Norms {
                l1: self.l1,
                l2: self.l2.sqrt(),
                linf: self.linf,
            },
            final_time: Norms {
                l1: self.last.l1,
                l2: self.last.l2_squared.sqrt(),
                linf: self.last.linf,
            },
        }
    }
}

/// Error of component `component` against `exact` with the given quadrature rule.
pub fn spatial_error<const M: usize>(
    mesh: &Mesh,
    coords: &[Point],
    basis: &Basis,
    rule: &QuadratureRule,
    state: &DgState<M>,
    component: usize,
    exact: &dyn Fn(Point) -> f64,
) -> Result<SpatialError> {
    let nb = basis.len();
    let tables: Vec<[f64; MAX_BASIS]> = rule
        .points
        .iter()
        .map(|p| {
            let mut phi = [0.0; MAX_BASIS];
            basis.eval(*p, &mut phi[..nb]);
            phi
        })
        .collect();
    let ref_vol = crate::approx::reference_volume(mesh.dim());
    let mut out = SpatialError::default();
    for e in 0..mesh.n_elements() {
        let g = mesh.element_geometry(coords, e, state.time)?;
        let scale = g.volume / ref_vol;
        let c = state.element(e);
        for ((p, w), phi) in rule.points.iter().zip(&rule.weights).zip(&tables) {
            let mut uh = 0.0;
            for j in 0..nb {
                uh += c[j][component] * phi[j];
            }
            let err = (uh - exact(g.to_physical(*p))).abs();
            out.l1 += w * scale * err;
            out.l2_squared += w * scale * err * err;
            out.linf = out.linf.max(err);
        }
    }
    Ok(out)
}

/// Final DG solution with its mesh, independent of the law's component count.
#[derive(Clone, Debug)]
pub struct Solution {
    pub mesh: Mesh,
    pub coords: Vec<Point>,
    pub degree: usize,
    pub components: usize,
    pub time: f64,
    basis: Basis,
    n_basis: usize,
    /// Element-major coefficients: `[(e * n_basis + j) * components + c]`.
    coeffs: Vec<f64>,
}

impl Solution {
    fn from_state<const M: usize>(mesh: &Mesh, coords: &[Point], basis: &Basis, state: &DgState<M>) -> Self {
        Self {
            mesh: mesh.clone(),
            coords: coords.to_vec(),
            degree: state.degree,
            components: M,
            time: state.time,
            basis: basis.clone(),
            n_basis: state.n_basis(),
            coeffs: state.as_slice().iter().flat_map(|c| c.iter().copied()).collect(),
        }
    }

    pub fn n_elements(&self) -> usize {
        self.mesh.n_elements()
    }

    pub fn cell_average(&self, e: usize) -> Vec<f64> {
        let s = 1.0 / crate::approx::reference_volume(self.mesh.dim()).sqrt();
        let base = e * self.n_basis * self.components;
        self.coeffs[base..base + self.components].iter().map(|v| v * s).collect()
    }

    fn evaluate_in(&self, e: usize, xi: Point) -> Vec<f64> {
        let mut phi = [0.0; MAX_BASIS];
        self.basis.eval(xi, &mut phi[..self.n_basis]);
        let mut out = vec![0.0; self.components];
        for (j, p) in phi[..self.n_basis].iter().enumerate() {
            let base = (e * self.n_basis + j) * self.components;
            for (c, o) in out.iter_mut().enumerate() {
                *o += self.coeffs[base + c] * p;
            }
        }
        out
    }

    /// Value at physical point `x`; `hint` speeds up the element search.
    pub fn evaluate(&self, x: Point, hint: Option<usize>) -> (usize, Vec<f64>) {
        let loc = self.mesh.locate_point(&self.coords, x, hint);
        let g = self.mesh.element_geometry(&self.coords, loc.element, self.time).expect("valid final mesh");
        (loc.element, self.evaluate_in(loc.element, g.to_reference(x)))
    }

    /// Element barycenters and volumes.
    pub fn cells(&self) -> Vec<(Point, f64)> {
        (0..self.n_elements())
            .map(|e| {
                let g = self.mesh.element_geometry(&self.coords, e, self.time).expect("valid final mesh");
                (g.barycenter, g.volume)
            })
            .collect()
    }

    /// Shortest element in 1D (its center and length).
    pub fn smallest_element(&self) -> (Point, f64) {
        self.cells().into_iter().fold(([0.0, 0.0], f64::INFINITY), |a, c| if c.1 < a.1 { c } else { a })
    }

    pub fn min_value(&self, component: usize) -> f64 {
        (0..self.n_elements()).map(|e| self.cell_average(e)[component]).fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self, component: usize) -> f64 {
        (0..self.n_elements()).map(|e| self.cell_average(e)[component]).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Solution CSV: element, barycenter, cell averages and vertex values of every component.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let nf = self.mesh.dim() + 1;
        write!(w, "element,x,y")?;
        for c in 0..self.components {
            write!(w, ",mean{c}")?;
        }
        for v in 0..nf {
            for c in 0..self.components {
                write!(w, ",v{v}_{c}")?;
            }
        }
        writeln!(w)?;
        for (e, (b, _)) in self.cells().iter().enumerate() {
            write!(w, "{e},{},{}", b[0], b[1])?;
            for v in self.cell_average(e) {
                write!(w, ",{v}")?;
            }
            for v in 0..nf {
                for val in self.evaluate_in(e, crate::mesh::reference_vertex(self.mesh.dim(), v)) {
                    write!(w, ",{val}")?;
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub problem: String,
    pub degree: usize,
    pub n: usize,
    pub moving: bool,
    pub steps: usize,
    pub final_time: f64,
    pub wall_seconds: f64,
    pub mass_initial: Vec<f64>,
    pub mass_final: Vec<f64>,
    /// Smallest element volume over all step ends.
    pub min_volume: f64,
    pub troubled_cells: usize,
    pub frozen_mesh_steps: usize,
    pub mesh_substeps: usize,
    pub errors: Option<ErrorReport>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub solution: Solution,
}

struct Output {
    dir: PathBuf,
    trajectory: BufWriter<File>,
    troubled: BufWriter<File>,
    /// Last step whose vertices went to the trajectory file.
    last_traced: Option<usize>,
}

impl Output {
    fn create(dir: &Path, config: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = dir.join("config.txt");
        fs::write(&cfg, config.to_text()).map_err(|e| Error::io(&cfg, e))?;
        let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            let mut w = BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?);
            writeln!(w, "{header}").map_err(|e| Error::io(&p, e))?;
            Ok(w)
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            trajectory: open("trajectory.csv", "step,time,vertex,x,y")?,
            last_traced: None,
            troubled: open("troubled.csv", "step,time,element,reason")?,
        })
    }

    fn snapshot(&mut self, name: &str, solution: &Solution, step: usize) -> Result<()> {
        let p = self.dir.join(format!("{name}.csv"));
        let mut w = BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?);
        solution.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&p, e))?;
        if solution.mesh.dim() == 2 {
            let p = self.dir.join(format!("{name}.vtk"));
            let means: Vec<Vec<f64>> = (0..solution.components)
                .map(|c| (0..solution.n_elements()).map(|e| solution.cell_average(e)[c]).collect())
                .collect();
            let names: Vec<String> = (0..solution.components).map(|c| format!("mean{c}")).collect();
            let data: Vec<(&str, &[f64])> = names.iter().map(|n| n.as_str()).zip(means.iter().map(|m| m.as_slice())).collect();
            let mut w = BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?);
            solution.mesh.write_vtk(&mut w, &solution.coords, &data).and_then(|_| w.flush()).map_err(|e| Error::io(&p, e))?;
        }
        if self.last_traced != Some(step) {
            self.last_traced = Some(step);
            for (v, x) in solution.coords.iter().enumerate() {
                writeln!(self.trajectory, "{step},{},{v},{},{}", solution.time, x[0], x[1]).map_err(|e| Error::io(&self.dir, e))?;
            }
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        self.trajectory.flush().map_err(|e| Error::io(&self.dir, e))?;
        self.troubled.flush().map_err(|e| Error::io(&self.dir, e))
    }
}

/// Runs one simulation.
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let spec = find(&config.problem)?;
    match (spec.law, spec.dim()) {
        (LawKind::Burgers, d) => run_law::<1, _>(config, &spec, Burgers::new(d)),
        (LawKind::Euler, 1) => run_law::<3, _>(config, &spec, Euler1d::new(spec.gamma)),
        (LawKind::Euler, _) => run_law::<4, _>(config, &spec, Euler2d::new(spec.gamma)),
    }
}

fn run_law<const M: usize, L: ConservationLaw<M>>(config: &RunConfig, spec: &ProblemSpec, law: L) -> Result<RunOutcome> {
    let started = Instant::now();
    let dim = spec.dim();
    let mesh = spec.mesh(config.n)?;
    let dg = Discretization::new(dim, config.degree)?;
    let t_final = config.t_final.unwrap_or(spec.t_final);
    let mut controls = StepControls::new(config.cfl.unwrap_or_else(|| ProblemSpec::default_cfl(config.degree)), t_final);
    controls.limiter = config.limiter;
    controls.moving = config.moving;
    let metric_params = MetricParams {
        beta: config.beta.unwrap_or(spec.beta),
        sweeps: config.sweeps,
    };
    let mut mover = if config.moving {
        Some(MeshMover::new(
            mesh.coords().to_vec(),
            MmpdeParams {
                tau: config.tau.unwrap_or(spec.tau),
                substeps: config.substeps,
                ..MmpdeParams::default()
            },
        )?)
    } else {
        None
    };
    let bc = spec.boundary_conditions::<M>();
    let init = spec.initial_fn::<M>();
    let mut coords = mesh.coords().to_vec();
    let mut state = dg.project(&mesh, &coords, &init)?;

    let has_exact = spec.exact == ExactKind::Closed;
    let err_rule = simplex_rule(dim, 2 * config.degree + 3);
    let exact_at = |t: f64| move |x: Point| spec.exact(x, t).map(|u| u[0]).unwrap_or(f64::NAN);
    let mut acc = ErrorAccumulator::default();

    let mut limiter = if config.limiter { Some(Limiter::new(&dg, &law, LimiterParams::default())) } else { None };
    // The projection of discontinuous data is limited like any stage.
    if let Some(lim) = limiter.as_mut() {
        let rest = StageGeometry::at_rest(&mesh, coords.clone(), 0.0)?;
        lim.limit(&mesh, &rest, &mut state)?;
    }
    let mut output = match &config.out {
        Some(d) => Some(Output::create(d, config)?),
        None => None,
    };

    let geoms = mesh.geometries(&coords, 0.0)?;
    let mass_initial = state.total_mass(&geoms).to_vec();
    let mut summary = RunSummary {
        problem: spec.name.clone(),
        degree: config.degree,
        n: config.n,
        moving: config.moving,
        min_volume: geoms.iter().map(|g| g.volume).fold(f64::INFINITY, f64::min),
        mass_initial,
        ..RunSummary::default()
    };
    if let (Some(out), true) = (output.as_mut(), config.cadence > 0) {
        out.snapshot("solution_000000", &Solution::from_state(&mesh, &coords, &dg.basis, &state), 0)?;
    }

    let mut t = 0.0;
    let mut step = 0;
    while t < t_final {
        if let Some(limit) = config.wall_limit {
            if started.elapsed().as_secs_f64() > limit {
                return Err(Error::Budget { limit, time: t, steps: step });
            }
        }
        let result = advance(
            &dg,
            &mesh,
            &law,
            &bc,
            &controls,
            &metric_params,
            mover.as_mut(),
            limiter.as_mut(),
            &coords,
            &state,
            t,
        );
        let (new_coords, new_state, dt, report) = match result {
            Ok(r) => r,
            Err(e) => {
                log::error!("step {step} at t = {t}: {e}");
                if let Some(out) = output.as_mut() {
                    let _ = out.snapshot("failure_state", &Solution::from_state(&mesh, &coords, &dg.basis, &state), step);
                    let _ = out.finish();
                }
                return Err(e);
            }
        };
        step += 1;
        t = if t_final - (t + dt) <= 1e-14 * t_final { t_final } else { t + dt };
        coords = new_coords;
        state = new_state;
        state.time = t;
        summary.frozen_mesh_steps += usize::from(report.0);
        summary.mesh_substeps += report.1;
        if step % 1000 == 0 {
            log::info!("{}: step {step}, t = {t:.6e}, dt = {dt:.3e}", spec.name);
        }

        let geoms = mesh.geometries(&coords, t)?;
        summary.min_volume = summary.min_volume.min(geoms.iter().map(|g| g.volume).fold(f64::INFINITY, f64::min));
        if let Some(lim) = limiter.as_ref() {
            summary.troubled_cells += lim.last_flags.count();
            if let Some(out) = output.as_mut() {
                for (e, r) in lim.last_flags.flagged() {
                    writeln!(out.troubled, "{step},{t},{e},{}", r.as_str()).map_err(|err| Error::io(&out.dir, err))?;
                }
            }
        }
        if has_exact && config.norms != NormMode::FinalTime {
            let e = spatial_error(&mesh, &coords, &dg.basis, &err_rule, &state, 0, &exact_at(t))?;
            acc.add(dt, e);
        }
        if let (Some(out), true) = (output.as_mut(), config.cadence > 0 && step % config.cadence.max(1) == 0) {
            out.snapshot(&format!("solution_{step:06}"), &Solution::from_state(&mesh, &coords, &dg.basis, &state), step)?;
        }
    }
    if has_exact {
        let e = spatial_error(&mesh, &coords, &dg.basis, &err_rule, &state, 0, &exact_at(t))?;
        acc.set_final(e);
        summary.errors = Some(acc.report());
    }
    let geoms = mesh.geometries(&coords, t)?;
    summary.mass_final = state.total_mass(&geoms).to_vec();
    summary.steps = step;
    summary.final_time = t;
    summary.wall_seconds = started.elapsed().as_secs_f64();
    log::info!("{}: finished at t = {t} after {step} steps in {:.2} s", spec.name, summary.wall_seconds);
    let solution = Solution::from_state(&mesh, &coords, &dg.basis, &state);
    if let Some(out) = output.as_mut() {
        out.snapshot("final", &solution, step)?;
        let p = out.dir.join("summary.json");
        let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Numerical(e.to_string()))?;
        fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        out.finish()?;
    }
    Ok(RunOutcome { summary, solution })
}

type StepResult<const M: usize> = (Vec<Point>, DgState<M>, f64, (bool, usize));

/// One coupled step from `t`.
#[allow(clippy::too_many_arguments)]
fn advance<const M: usize, L: ConservationLaw<M>>(
    dg: &Discretization,
    mesh: &Mesh,
    law: &L,
    bc: &crate::solver::BoundaryConditions<M>,
    controls: &StepControls,
    metric_params: &MetricParams,
    mover: Option<&mut MeshMover>,
    limiter: Option<&mut Limiter<'_, M, L>>,
    coords: &[Point],
    state: &DgState<M>,
    t: f64,
) -> Result<StepResult<M>> {
    let rest = StageGeometry::at_rest(mesh, coords.to_vec(), t)?;
    let r_now = rest.geoms.iter().map(|g| g.inradius).fold(f64::INFINITY, f64::min);
    let s_fixed = dg.max_trace_speed(mesh, &rest, state, law, false)?;
    let dt1 = controls.bound(t, r_now, s_fixed);
    if !(dt1 > 0.0) {
        return Err(Error::Numerical(format!("non-positive time step {dt1} at t = {t}")));
    }
    let (motion, report) = match mover {
        Some(mover) => {
            let metric = metric_field(mesh, coords, &rest.geoms, state, law, metric_params)?;
            let (target, rep) = mover.step(mesh, coords, &metric, dt1, t)?;
            let velocities: Vec<Point> = target.iter().zip(coords).map(|(a, b)| [(a[0] - b[0]) / dt1, (a[1] - b[1]) / dt1]).collect();
            let moving = StageGeometry::new(mesh, coords.to_vec(), velocities.clone(), t)?;
            let dt = compute_dt(dg, mesh, &moving, &target, state, law, controls)?;
            let next: Vec<Point> = coords.iter().zip(&velocities).map(|(x, v)| [x[0] + dt * v[0], x[1] + dt * v[1]]).collect();
            (MeshMotion::new(t, dt, coords.to_vec(), next)?, (rep.frozen, rep.substeps))
        }
        None => (MeshMotion::stationary(t, dt1, coords.to_vec()), (false, 0)),
    };
    let new_state = match limiter {
        Some(l) => rk3_step(dg, mesh, &motion, state, law, bc, l as &mut dyn StageLimiter<M>)?,
        None => rk3_step(dg, mesh, &motion, state, law, bc, &mut NoLimiter)?,
    };
    let next = motion.interpolate(motion.t1())?;
    mesh.check_valid(&next, motion.t1())?;
    Ok((next, new_state, motion.dt, report))
}

/// One row of a convergence table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub errors: Option<ErrorReport>,
    pub failure: Option<String>,
    pub wall_seconds: f64,
    /// Smallest element volume over the run (completed runs only).
    pub min_volume: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub problem: String,
    pub degree: usize,
    pub rows: Vec<ConvergenceRow>,
}

/// `ln(e_coarse / e_fine) / ln(n_fine / n_coarse)`.
pub fn observed_order(e_coarse: f64, e_fine: f64, n_coarse: usize, n_fine: usize) -> f64 {
    (e_coarse / e_fine).ln() / (n_fine as f64 / n_coarse as f64).ln()
}

impl ConvergenceTable {
    fn pick(r: &ConvergenceRow, space_time: bool) -> Option<Norms> {
        r.errors.map(|e| if space_time { e.space_time } else { e.final_time })
    }

    /// Observed orders between consecutive rows for the chosen norm.
    pub fn orders(&self, space_time: bool, norm: fn(&Norms) -> f64) -> Vec<Option<f64>> {
        self.rows
            .windows(2)
            .map(|w| match (Self::pick(&w[0], space_time), Self::pick(&w[1], space_time)) {
                (Some(a), Some(b)) => Some(observed_order(norm(&a), norm(&b), w[0].n, w[1].n)),
                _ => None,
            })
            .collect()
    }

    pub fn l1(&self, space_time: bool) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| Self::pick(r, space_time).map(|n| n.l1)).collect()
    }

    /// Aligned text table: N, L1, order, L2, order, Linf, order.
    pub fn to_text(&self, space_time: bool) -> String {
        let mut s = String::new();
        let label = if space_time { "space-time" } else { "final-time" };
        let _ = writeln!(s, "{} k={} ({label} norms)", self.problem, self.degree);
        let _ = writeln!(s, "{:>8} {:>12} {:>7} {:>12} {:>7} {:>12} {:>7}", "N", "L1", "order", "L2", "order", "Linf", "order");
        let o1 = self.orders(space_time, |n| n.l1);
        let o2 = self.orders(space_time, |n| n.l2);
        let oi = self.orders(space_time, |n| n.linf);
        let fmt_o = |o: Option<&Option<f64>>| o.and_then(|v| *v).map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
        for (i, r) in self.rows.iter().enumerate() {
            match Self::pick(r, space_time) {
                Some(n) => {
                    let prev = if i == 0 { None } else { Some(i - 1) };
                    let _ = writeln!(
                        s,
                        "{:>8} {:>12.3e} {:>7} {:>12.3e} {:>7} {:>12.3e} {:>7}",
                        r.n,
                        n.l1,
                        fmt_o(prev.and_then(|p| o1.get(p))),
                        n.l2,
                        fmt_o(prev.and_then(|p| o2.get(p))),
                        n.linf,
                        fmt_o(prev.and_then(|p| oi.get(p)))
                    );
                }
                None => {
                    let _ = writeln!(s, "{:>8} FAILED: {}", r.n, r.failure.as_deref().unwrap_or("no errors"));
                }
            }
        }
        s
    }

    pub fn to_csv(&self, space_time: bool) -> String {
        let mut s = String::from("N,L1,order_L1,L2,order_L2,Linf,order_Linf\n");
        let o1 = self.orders(space_time, |n| n.l1);
        let o2 = self.orders(space_time, |n| n.l2);
        let oi = self.orders(space_time, |n| n.linf);
        let f = |o: Option<f64>| o.map(|v| v.to_string()).unwrap_or_default();
        for (i, r) in self.rows.iter().enumerate() {
            let get = |o: &Vec<Option<f64>>| if i == 0 { None } else { o[i - 1] };
            match Self::pick(r, space_time) {
                Some(n) => {
                    let _ = writeln!(s, "{},{},{},{},{},{},{}", r.n, n.l1, f(get(&o1)), n.l2, f(get(&o2)), n.linf, f(get(&oi)));
                }
                None => {
                    let _ = writeln!(s, "{},,,,,,", r.n);
                }
            }
        }
        s
    }
}

/// Runs `template` at each resolution; failed runs are recorded and skipped.
pub fn convergence_study(template: &RunConfig, resolutions: &[usize]) -> Result<ConvergenceTable> {
    if resolutions.len() < 3 {
        return Err(Error::Config("a convergence study needs at least three resolutions".into()));
    }
    let spec = find(&template.problem)?;
    if spec.exact != ExactKind::Closed {
        return Err(Error::Config(format!("problem `{}` has no exact solution", spec.name)));
    }
    let rows = resolutions
        .iter()
        .map(|&n| {
            let mut cfg = template.clone();
            cfg.n = n;
            cfg.out = template.out.as_ref().map(|d| d.join(format!("n{n}")));
            match run(&cfg) {
                Ok(o) => ConvergenceRow {
                    n,
                    errors: o.summary.errors,
                    failure: None,
                    wall_seconds: o.summary.wall_seconds,
                    min_volume: Some(o.summary.min_volume),
                },
                Err(e) => {
                    log::error!("resolution {n}: {e}");
                    ConvergenceRow {
                        n,
                        errors: None,
                        failure: Some(e.to_string()),
                        wall_seconds: 0.0,
                        min_volume: None,
                    }
                }
            }
        })
        .collect();
    Ok(ConvergenceTable {
        problem: spec.name,
        degree: template.degree,
        rows,
    })
}

/// Fine-mesh reference: cell averages on a uniform 1D mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub problem: String,
    pub n: usize,
    pub degree: usize,
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
    /// Cell averages, one vector per cell.
    pub values: Vec<Vec<f64>>,
}

impl Reference {
    fn body(&self) -> String {
        let mut s = String::new();
        let comps = self.values.first().map_or(0, |v| v.len());
        s.push_str("x,h");
        for c in 0..comps {
            let _ = write!(s, ",mean{c}");
        }
        s.push('\n');
        for ((x, h), v) in self.centers.iter().zip(&self.widths).zip(&self.values) {
            let _ = write!(s, "{x},{h}");
            for val in v {
                let _ = write!(s, ",{val}");
            }
            s.push('\n');
        }
        s
    }

    /// SHA-256 of the data section.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.body().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_csv(&self) -> String {
        format!(
            "# problem={} n={} degree={} sha256={}\n{}",
            self.problem,
            self.n,
            self.degree,
            self.content_hash(),
            self.body()
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Config("empty reference file".into()))?;
        let field = |key: &str| -> Result<String> {
            header
                .split_whitespace()
                .find_map(|t| t.strip_prefix(&format!("{key}=")))
                .map(str::to_string)
                .ok_or_else(|| Error::Config(format!("reference header lacks `{key}`")))
        };
        let bad = |what: &str| Error::Config(format!("malformed reference file: {what}"));
        let mut r = Reference {
            problem: field("problem")?,
            n: field("n")?.parse().map_err(|_| bad("n"))?,
            degree: field("degree")?.parse().map_err(|_| bad("degree"))?,
            centers: Vec::new(),
            widths: Vec::new(),
            values: Vec::new(),
        };
        let hash = field("sha256")?;
        lines.next();
        for line in lines {
            let nums: Vec<f64> = line.split(',').map(|t| t.parse().map_err(|_| bad("number"))).collect::<Result<_>>()?;
            if nums.len() < 3 {
                return Err(bad("row"));
            }
            r.centers.push(nums[0]);
            r.widths.push(nums[1]);
            r.values.push(nums[2..].to_vec());
        }
        if r.content_hash() != hash {
            return Err(Error::Config("reference content hash mismatch".into()));
        }
        Ok(r)
    }

    /// Range of component `c`.
    pub fn range(&self, c: usize) -> (f64, f64) {
        self.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v[c]), hi.max(v[c])))
    }

    /// `sum_i h_i |u_ref,i - u_h(x_i)|` for component `c`.
    pub fn l1_deviation(&self, solution: &Solution, c: usize) -> f64 {
        let mut hint = None;
        let mut total = 0.0;
        for ((x, h), v) in self.centers.iter().zip(&self.widths).zip(&self.values) {
            let (e, u) = solution.evaluate([*x, 0.0], hint);
            hint = Some(e);
            total += h * (u[c] - v[c]).abs();
        }
        total
    }
}

/// Default fine-reference resolution and degree.
pub const REFERENCE_N: usize = 4000;
pub const REFERENCE_DEGREE: usize = 2;

/// Computes a uniform-mesh reference for a 1D problem.
pub fn make_reference(problem: &str, n: usize, degree: usize) -> Result<Reference> {
    let spec = find(problem)?;
    if spec.dim() != 1 {
        return Err(Error::Config("references are generated for 1D problems only".into()));
    }
    let mut cfg = RunConfig::new(problem, degree, n);
    cfg.moving = false;
    cfg.norms = NormMode::FinalTime;
    let out = run(&cfg)?;
    let cells = out.solution.cells();
    Ok(Reference {
        problem: problem.to_string(),
        n,
        degree,
        centers: cells.iter().map(|c| c.0[0]).collect(),
        widths: cells.iter().map(|c| c.1).collect(),
        values: (0..out.solution.n_elements()).map(|e| out.solution.cell_average(e)).collect(),
    })
}

/// Loads `dir/<problem>_n<N>_k<k>.csv` if present and valid, otherwise
/// generates and stores it.
pub fn cached_reference(dir: &Path, problem: &str, n: usize, degree: usize) -> Result<Reference> {
    let path = dir.join(format!("{problem}_n{n}_k{degree}.csv"));
    if let Ok(f) = File::open(&path) {
        let mut text = String::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            text.push_str(&line);
            text.push('\n');
        }
        match Reference::parse(&text) {
            Ok(r) if r.problem == problem && r.n == n && r.degree == degree => return Ok(r),
            Ok(_) => log::warn!("{}: reference parameters differ, regenerating", path.display()),
            Err(e) => log::warn!("{}: {e}, regenerating", path.display()),
        }
    }
    let r = make_reference(problem, n, degree)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fs::write(&path, r.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(r)
}
