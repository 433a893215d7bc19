//! Parameter-to-observation maps for the fine and multiscale models.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;
use serde::{Deserialize, Serialize};

use crate::caputo::{march, FractionalScheme, FullSystem, Load, ReducedSystem, Trajectory};
use crate::error::{Error, Result};
use crate::gmsfem::MultiscaleSpace;
use crate::linalg::{congruence, transpose_apply, DenseSolver};
use crate::mesh::{
    assemble_load, assemble_mass, assemble_mass_elementwise, assemble_stiffness_elementwise, BoundaryCondition,
    DofMap, ObservationOperator, ScalarField, StructuredMesh,
};
use crate::random_field::{CorrelatedFieldSet, KlBasis, MixedFieldSpec};

/// Anything mapping a parameter vector to `n_obs` predictions.
pub trait ForwardMap: Sync {
    fn n_params(&self) -> usize;
    fn n_obs(&self) -> usize;
    fn eval(&self, theta: &[f64]) -> Result<DVector<f64>>;
}

/// Forward map given by a closure.
pub struct FnMap<F> {
    pub n_params: usize,
    pub n_obs: usize,
    pub f: F,
}

impl<F> ForwardMap for FnMap<F>
where
    F: Fn(&[f64]) -> Result<DVector<f64>> + Sync,
{
    fn n_params(&self) -> usize {
        self.n_params
    }
    fn n_obs(&self) -> usize {
        self.n_obs
    }
    fn eval(&self, theta: &[f64]) -> Result<DVector<f64>> {
        if theta.len() != self.n_params {
            return Err(Error::DimensionMismatch { context: "parameter vector", expected: self.n_params, actual: theta.len() });
        }
        (self.f)(theta)
    }
}

impl<M: ForwardMap + ?Sized> ForwardMap for &M {
    fn n_params(&self) -> usize {
        (**self).n_params()
    }
    fn n_obs(&self) -> usize {
        (**self).n_obs()
    }
    fn eval(&self, theta: &[f64]) -> Result<DVector<f64>> {
        (**self).eval(theta)
    }
}

impl<M: ForwardMap + Send + ?Sized> ForwardMap for Arc<M> {
    fn n_params(&self) -> usize {
        (**self).n_params()
    }
    fn n_obs(&self) -> usize {
        (**self).n_obs()
    }
    fn eval(&self, theta: &[f64]) -> Result<DVector<f64>> {
        (**self).eval(theta)
    }
}

/// `h(x) = 1/2 + atan(x)/π`, a bijection from the real line onto (0, 1).
pub fn arctan_transform(x: f64) -> f64 {
    0.5 + x.atan() / std::f64::consts::PI
}

pub fn arctan_inverse(y: f64) -> Result<f64> {
    if !(y > 0.0 && y < 1.0) {
        return Err(Error::InvalidInput(format!("arctan inverse needs an argument in (0, 1), got {y}")));
    }
    Ok((std::f64::consts::PI * (y - 0.5)).tan())
}

/// How the leading parameter (if any) sets the fractional order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum GammaParam {
    /// Fixed order; no parameter slot.
    Known(f64),
    /// `θ_0 = γ`, clamped into the open interval.
    Direct,
    /// `γ = h(θ_0)` with the arctan transform.
    Arctan,
}

const GAMMA_CLAMP: f64 = 1e-4;

impl GammaParam {
    pub fn slots(&self) -> usize {
        match self {
            GammaParam::Known(_) => 0,
            _ => 1,
        }
    }

    pub fn resolve(&self, theta: &[f64]) -> f64 {
        match *self {
            GammaParam::Known(g) => g,
            GammaParam::Direct => theta[0].clamp(GAMMA_CLAMP, 1.0 - GAMMA_CLAMP),
            GammaParam::Arctan => arctan_transform(theta[0]).clamp(GAMMA_CLAMP, 1.0 - GAMMA_CLAMP),
        }
    }
}

/// How KL coefficients become coefficient fields.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldParam {
    /// `log k` from one basis; `q` fixed.
    Single(KlBasis),
    /// `(log k, log q)` from a correlated pair.
    Coupled(CorrelatedFieldSet),
    /// `log k` stitched from correlated subfields over a partition.
    Mixed(CorrelatedFieldSet, MixedFieldSpec),
}

impl FieldParam {
    pub fn n_params(&self) -> usize {
        match self {
            FieldParam::Single(b) => b.n_modes(),
            FieldParam::Coupled(s) | FieldParam::Mixed(s, _) => s.n_params(),
        }
    }
}

/// Per-element physical coefficients and the fractional order.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub gamma: f64,
    pub k: Vec<f64>,
    pub q: Vec<f64>,
}

/// `θ = [γ-slot?; z]` to physical coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterMap {
    pub mesh: StructuredMesh,
    pub gamma: GammaParam,
    pub field: FieldParam,
    /// Used when `q` is not parameterized.
    pub q_fixed: ScalarField,
}

impl ParameterMap {
    pub fn n_params(&self) -> usize {
        self.gamma.slots() + self.field.n_params()
    }

    pub fn split<'a>(&self, theta: &'a [f64]) -> Result<(f64, &'a [f64])> {
        if theta.len() != self.n_params() {
            return Err(Error::DimensionMismatch { context: "parameter vector", expected: self.n_params(), actual: theta.len() });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok((self.gamma.resolve(theta), &theta[self.gamma.slots()..]))
    }

    /// Log-fields on the mesh: `log k` first, then `log q` when coupled.
    pub fn log_fields(&self, z: &[f64]) -> Result<Vec<ScalarField>> {
        match &self.field {
            FieldParam::Single(b) => Ok(vec![b.realize(z)?]),
            FieldParam::Coupled(s) => s.realize(z),
            FieldParam::Mixed(s, spec) => Ok(vec![spec.stitch(&self.mesh, &s.realize(z)?)?]),
        }
    }

    pub fn coefficients(&self, theta: &[f64]) -> Result<Coefficients> {
        let (gamma, z) = self.split(theta)?;
        let logs = self.log_fields(z)?;
        let exp_elem = |f: &ScalarField| -> Result<Vec<f64>> {
            let v: Vec<f64> = f.element_values(&self.mesh)?.into_iter().map(f64::exp).collect();
            if let Some(e) = v.iter().position(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(Error::NonPositiveCoefficient { value: v[e], location: format!("element {e}") });
            }
            Ok(v)
        };
        let k = exp_elem(&logs[0])?;
        let q = match logs.get(1) {
            Some(lq) => exp_elem(lq)?,
            None => self.q_fixed.element_values(&self.mesh)?,
        };
        Ok(Coefficients { gamma, k, q })
    }
}

/// Geometry, boundary data, source and sampling layout shared by all models.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub mesh: StructuredMesh,
    pub bc: BoundaryCondition,
    /// Time-independent source.
    pub source: ScalarField,
    pub initial: ScalarField,
    pub t_end: f64,
    pub obs: ObservationOperator,
}

struct Prepared {
    dofs: DofMap,
    load: DVector<f64>,
    spatial: CsrMatrix<f64>,
}

impl Problem {
    fn prepare(&self) -> Result<Prepared> {
        self.obs.validate(&self.mesh, self.t_end)?;
        Ok(Prepared {
            dofs: self.bc.dof_map(&self.mesh),
            load: assemble_load(&self.mesh, &self.source)?,
            spatial: self.obs.spatial_matrix(&self.mesh)?,
        })
    }
}

/// Fine-grid model.
pub struct FullModel {
    pub problem: Problem,
    pub params: ParameterMap,
    pub dt: f64,
    prep: Prepared,
}

impl FullModel {
    pub fn new(problem: Problem, params: ParameterMap, dt: f64) -> Result<Self> {
        let prep = problem.prepare()?;
        Ok(FullModel { problem, params, dt, prep })
    }

    /// Nodal trajectory and observations for given physical coefficients.
    pub fn solve_coefficients(&self, c: &Coefficients) -> Result<(Trajectory, DVector<f64>)> {
        let mesh = &self.problem.mesh;
        let scheme = FractionalScheme::for_horizon(c.gamma, self.dt, self.problem.t_end)?;
        let k = assemble_stiffness_elementwise(mesh, &c.k);
        let b = assemble_mass_elementwise(mesh, &c.q);
        let mut u0 = self.problem.initial.to_dvector();
        for &(n, g) in &self.prep.dofs.constrained {
            u0[n] = g;
        }
        let sys = FullSystem::new(&scheme, self.prep.dofs.clone(), &b, &k, &Load::steady(self.prep.load.clone()))?;
        let traj = sys.to_nodal(&march(&scheme, &sys, sys.initial_from_nodal(&u0))?);
        let d = self.problem.obs.observe_with(&self.prep.spatial, &traj.times, &traj.states)?;
        Ok((traj, d))
    }

    pub fn solve(&self, theta: &[f64]) -> Result<(Trajectory, DVector<f64>)> {
        self.solve_coefficients(&self.params.coefficients(theta)?)
    }
}

impl ForwardMap for FullModel {
    fn n_params(&self) -> usize {
        self.params.n_params()
    }
    fn n_obs(&self) -> usize {
        self.problem.obs.n_obs()
    }
    fn eval(&self, theta: &[f64]) -> Result<DVector<f64>> {
        Ok(self.solve(theta)?.1)
    }
}

/// Multiscale model `u = g + R w`.
pub struct ReducedModel {
    pub problem: Problem,
    pub params: ParameterMap,
    pub dt: f64,
    pub r: CsrMatrix<f64>,
    lift: DVector<f64>,
    load: DVector<f64>,
    c_r: CsrMatrix<f64>,
    /// `C g` for every observed time.
    lift_obs: DVector<f64>,
    w0: DVector<f64>,
}

impl ReducedModel {
    pub fn new(problem: Problem, params: ParameterMap, dt: f64, space: &MultiscaleSpace) -> Result<Self> {
        Self::from_projection(problem, params, dt, space.r.clone())
    }

    /// Same as [`new`](Self::new) from a stored projection matrix.
    pub fn from_projection(problem: Problem, params: ParameterMap, dt: f64, r: CsrMatrix<f64>) -> Result<Self> {
        let prep = problem.prepare()?;
        if r.nrows() != problem.mesh.node_count() {
            return Err(Error::DimensionMismatch { context: "projection rows", expected: problem.mesh.node_count(), actual: r.nrows() });
        }
        let lift = prep.dofs.lift();
        let c_r = &prep.spatial * &r;
        let cg = &prep.spatial * &lift;
        let n_t = problem.obs.times.len();
        let lift_obs = DVector::from_fn(cg.len() * n_t, |i, _| cg[i % cg.len()]);
        // unweighted L2 projection of the initial state
        let u0 = problem.initial.to_dvector() - &lift;
        let w0 = if u0.amax() == 0.0 {
            DVector::zeros(r.ncols())
        } else {
            let m1 = assemble_mass(&problem.mesh, &ScalarField::constant(&problem.mesh, 1.0))?;
            let g = congruence(&r, &m1);
            DenseSolver::new(g)?.solve(&transpose_apply(&r, &(&m1 * u0)))
        };
        Ok(ReducedModel { problem, params, dt, load: prep.load, r, lift, c_r, lift_obs, w0 })
    }

    pub fn dim(&self) -> usize {
        self.r.ncols()
    }

    /// Reduced trajectory and observations.
    pub fn solve_coefficients(&self, c: &Coefficients) -> Result<(Trajectory, DVector<f64>)> {
        let mesh = &self.problem.mesh;
        let scheme = FractionalScheme::for_horizon(c.gamma, self.dt, self.problem.t_end)?;
        let k = assemble_stiffness_elementwise(mesh, &c.k);
        let b = assemble_mass_elementwise(mesh, &c.q);
        let kr = congruence(&self.r, &k);
        let br = congruence(&self.r, &b);
        let mut f = self.load.clone();
        if self.lift.amax() > 0.0 {
            f -= &k * &self.lift;
        }
        let sys = ReducedSystem::from_reduced(&scheme, br, &kr, Load::steady(transpose_apply(&self.r, &f)))?;
        let traj = march(&scheme, &sys, self.w0.clone())?;
        let d = self.problem.obs.observe_with(&self.c_r, &traj.times, &traj.states)? + &self.lift_obs;
        Ok((traj, d))
    }

    pub fn solve(&self, theta: &[f64]) -> Result<(Trajectory, DVector<f64>)> {
        self.solve_coefficients(&self.params.coefficients(theta)?)
    }

    /// Fine nodal trajectory `g + R w`.
    pub fn downscale(&self, traj: &Trajectory) -> Trajectory {
        traj.map_states(|w| &self.lift + &self.r * w)
    }
}

impl ForwardMap for ReducedModel {
    fn n_params(&self) -> usize {
        self.params.n_params()
    }
    fn n_obs(&self) -> usize {
        self.problem.obs.n_obs()
    }
    fn eval(&self, theta: &[f64]) -> Result<DVector<f64>> {
        Ok(self.solve(theta)?.1)
    }
}

/// Which model a transient solve runs on.
pub enum ModelRef<'a> {
    Full(&'a FullModel),
    Reduced(&'a ReducedModel),
}

/// Fine nodal trajectory and observations; the reduced model's states are
/// downscaled.
pub fn solve_transient(model: ModelRef<'_>, theta: &[f64]) -> Result<(Trajectory, DVector<f64>)> {
    match model {
        ModelRef::Full(m) => m.solve(theta),
        ModelRef::Reduced(m) => {
            let (t, d) = m.solve(theta)?;
            Ok((m.downscale(&t), d))
        }
    }
}

/// Relative L2 distance `‖a - b‖ / ‖b‖`.
pub fn relative_l2(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let nb = b.norm();
    if nb == 0.0 {
        (a - b).norm()
    } else {
        (a - b).norm() / nb
    }
}

/// Evaluate a forward map at many points (rows of `thetas`) in parallel.
pub fn eval_batch<M: ForwardMap + ?Sized>(model: &M, thetas: &DMatrix<f64>) -> Vec<Result<DVector<f64>>> {
    use rayon::prelude::*;
    (0..thetas.nrows())
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = thetas.row(i).iter().copied().collect();
            model.eval(&row)
        })
        .collect()
}
