//! Fixtures shared by the benchmarks.

use mmdg_core::mmpde::{metric_field, MetricField, MetricParams};
use mmdg_core::solver::{BoundaryConditions, StageGeometry};
use mmdg_core::{find, DgState, Discretization, Euler2d, Mesh};

/// A 2D Euler state on the smooth periodic test problem.
pub struct EulerFixture {
    pub mesh: Mesh,
    pub dg: Discretization,
    pub law: Euler2d,
    pub bc: BoundaryConditions<4>,
    pub state: DgState<4>,
    pub stage: StageGeometry,
    pub metric: MetricField,
}

impl EulerFixture {
    /// `n` x `n` criss-cross cells (4n^2 triangles), degree `k`.
    pub fn new(n: usize, k: usize) -> Self {
        let spec = find("euler-2d").expect("catalog entry");
        let mesh = spec.mesh(n).expect("mesh");
        let dg = Discretization::new(2, k).expect("degree");
        let law = Euler2d::new(spec.gamma);
        let state = dg.project(&mesh, mesh.coords(), &spec.initial_fn::<4>()).expect("projection");
        let stage = StageGeometry::at_rest(&mesh, mesh.coords().to_vec(), 0.0).expect("valid mesh");
        let metric = metric_field(&mesh, mesh.coords(), &stage.geoms, &state, &law, &MetricParams { beta: spec.beta, sweeps: 3 }).expect("metric");
        Self {
            bc: spec.boundary_conditions::<4>(),
            mesh,
            dg,
            law,
            state,
            stage,
            metric,
        }
    }
}
