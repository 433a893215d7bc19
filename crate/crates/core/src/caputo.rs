//! Caputo time stepping for `q D_t^γ u - div(k ∇u) = f`.
//!
//! The derivative at `t_{n}` is approximated with the L1-type weights
//! `b_k = (n+1-k)^{1-γ} - (n-k)^{1-γ}`, which turns every step into
//!
//! ```text
//! (B + τ K) u_n = Σ_{k=1..n} c_k B u_{k-1} + τ F(t_n),   τ = Δt^γ Γ(2-γ),
//! ```
//!
//! with `c_k = b_k - b_{k-1}` and `u_0` the initial state. The same recurrence
//! drives the fine model (sparse, free nodes only) and the multiscale reduced
//! model (dense, in reduced coordinates).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{transpose_apply, DenseSolver, SparseCholesky};
use crate::mesh::DofMap;

/// Γ(x) (Lanczos approximation, relative accuracy near machine precision).
pub fn gamma_fn(x: f64) -> f64 {
    statrs::function::gamma::gamma(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaputoWeights {
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidGamma(gamma))
    }
}

/// `w(j) = j^{1-γ} - (j-1)^{1-γ}` for `j = 1..=n`.
fn increments(gamma: f64, n: usize) -> Vec<f64> {
    let p = 1.0 - gamma;
    (1..=n).map(|j| (j as f64).powf(p) - ((j - 1) as f64).powf(p)).collect()
}

/// Weights `b_1..b_n` and `c_1..c_n` for the step that produces level `n`.
pub fn caputo_weights(gamma: f64, n: usize) -> Result<CaputoWeights> {
    check_gamma(gamma)?;
    if n == 0 {
        return Err(Error::InvalidInput("Caputo weights need n >= 1".into()));
    }
    let w = increments(gamma, n);
    Ok(weights_from_increments(&w, n))
}

fn weights_from_increments(w: &[f64], n: usize) -> CaputoWeights {
    // b_k = w(n + 1 - k)
    let b: Vec<f64> = (1..=n).map(|k| w[n - k]).collect();
    let c = (0..n).map(|i| if i == 0 { b[0] } else { b[i] - b[i - 1] }).collect();
    CaputoWeights { b, c }
}

/// Time grid plus cached Caputo increments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionalScheme {
    pub gamma: f64,
    pub dt: f64,
    pub n_steps: usize,
    #[serde(skip)]
    increments: Vec<f64>,
}

impl FractionalScheme {
    pub fn new(gamma: f64, dt: f64, n_steps: usize) -> Result<Self> {
        check_gamma(gamma)?;
        if !(dt > 0.0) || n_steps == 0 {
            return Err(Error::InvalidInput(format!("invalid time grid dt={dt}, steps={n_steps}")));
        }
        Ok(FractionalScheme { gamma, dt, n_steps, increments: increments(gamma, n_steps) })
    }

    /// Scheme covering `(0, t_end]` with steps of (at most) `dt`.
    pub fn for_horizon(gamma: f64, dt: f64, t_end: f64) -> Result<Self> {
        let n = (t_end / dt - 1e-9).ceil().max(1.0) as usize;
        Self::new(gamma, t_end / n as f64, n)
    }

    pub fn t_end(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn tau(&self) -> f64 {
        self.dt.powf(self.gamma) * gamma_fn(2.0 - self.gamma)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| k as f64 * self.dt).collect()
    }

    fn ensure_increments(&self) -> std::borrow::Cow<'_, [f64]> {
        if self.increments.len() == self.n_steps {
            std::borrow::Cow::Borrowed(&self.increments)
        } else {
            std::borrow::Cow::Owned(increments(self.gamma, self.n_steps))
        }
    }

    /// Weights for the step producing level `n` (`1 <= n <= n_steps`).
    pub fn weights(&self, n: usize) -> CaputoWeights {
        assert!(n >= 1 && n <= self.n_steps, "level {n} outside 1..={}", self.n_steps);
        weights_from_increments(&self.ensure_increments(), n)
    }
}

pub type TimeProfile = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Source term as a sum of spatial vectors times scalar time profiles.
#[derive(Clone, Default)]
pub struct Load {
    terms: Vec<(DVector<f64>, Option<TimeProfile>)>,
}

impl std::fmt::Debug for Load {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Load").field("terms", &self.terms.len()).finish()
    }
}

impl Load {
    pub fn steady(v: DVector<f64>) -> Self {
        Load { terms: vec![(v, None)] }
    }

    pub fn separable(v: DVector<f64>, profile: TimeProfile) -> Self {
        Load { terms: vec![(v, Some(profile))] }
    }

    pub fn with_term(mut self, v: DVector<f64>, profile: Option<TimeProfile>) -> Self {
        self.terms.push((v, profile));
        self
    }

    pub fn dim(&self) -> Option<usize> {
        self.terms.first().map(|(v, _)| v.len())
    }

    pub fn at(&self, t: f64, dim: usize) -> DVector<f64> {
        let mut out = DVector::zeros(dim);
        for (v, p) in &self.terms {
            match p {
                None => out += v,
                Some(p) => out.axpy(p(t), v, 1.0),
            }
        }
        out
    }

    /// Apply a linear map to every spatial vector.
    pub fn map_space(&self, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> Load {
        Load { terms: self.terms.iter().map(|(v, p)| (f(v), p.clone())).collect() }
    }
}

/// One linear system marched by the Caputo recurrence.
pub trait TransientSystem {
    fn dim(&self) -> usize;
    fn tau(&self) -> f64;
    fn apply_mass(&self, v: &DVector<f64>) -> DVector<f64>;
    fn load(&self, t: f64) -> DVector<f64>;
    /// Solve with `B + τ K`.
    fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>>;
}

/// Ordered states with time stamps starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has the initial state")
    }

    pub fn map_states(&self, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> Trajectory {
        Trajectory { times: self.times.clone(), states: self.states.iter().map(f).collect() }
    }
}

/// One step of the recurrence given the full history `u_0..u_{n-1}`.
pub fn step<S: TransientSystem + ?Sized>(
    scheme: &FractionalScheme,
    sys: &S,
    history: &[DVector<f64>],
) -> Result<DVector<f64>> {
    let n = history.len();
    if n == 0 || n > scheme.n_steps {
        return Err(Error::InvalidInput(format!("history length {n} outside 1..={}", scheme.n_steps)));
    }
    let w = scheme.weights(n);
    let mut acc = DVector::zeros(sys.dim());
    for (ck, u) in w.c.iter().zip(history) {
        acc.axpy(*ck, u, 1.0);
    }
    let t_next = n as f64 * scheme.dt;
    let mut rhs = sys.apply_mass(&acc);
    rhs.axpy(sys.tau(), &sys.load(t_next), 1.0);
    let u = sys.solve(&rhs)?;
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("solution at t = {t_next}")));
    }
    Ok(u)
}

/// March all `n_steps` levels from `u0`.
pub fn march<S: TransientSystem + ?Sized>(scheme: &FractionalScheme, sys: &S, u0: DVector<f64>) -> Result<Trajectory> {
    if u0.len() != sys.dim() {
        return Err(Error::DimensionMismatch { context: "initial state", expected: sys.dim(), actual: u0.len() });
    }
    let mut states = Vec::with_capacity(scheme.n_steps + 1);
    states.push(u0);
    for _ in 0..scheme.n_steps {
        let next = step(scheme, sys, &states)?;
        states.push(next);
    }
    Ok(Trajectory { times: scheme.times(), states })
}

/// Fine-grid system on the free nodes with Dirichlet data lifted to the
/// right-hand side.
pub struct FullSystem {
    dofs: DofMap,
    mass: CsrMatrix<f64>,
    tau: f64,
    load: Load,
    factor: SparseCholesky,
}

impl FullSystem {
    /// `mass` and `stiffness` are assembled over all nodes; `load` terms are
    /// full nodal vectors.
    pub fn new(
        scheme: &FractionalScheme,
        dofs: DofMap,
        mass: &CsrMatrix<f64>,
        stiffness: &CsrMatrix<f64>,
        load: &Load,
    ) -> Result<Self> {
        let tau = scheme.tau();
        let b_ff = dofs.restrict_matrix(mass);
        let k_ff = dofs.restrict_matrix(stiffness);
        let lhs = &b_ff + &(&k_ff * tau);
        let factor = SparseCholesky::new(&lhs)?;
        let lift = dofs.lift();
        let mut free_load = load.map_space(|v| dofs.restrict(v));
        if !dofs.constrained.is_empty() && lift.amax() > 0.0 {
            // constrained values are held fixed at every level, so only the
            // stiffness coupling survives: F_f - K_fc g
            let kg = dofs.restrict(&(stiffness * &lift));
            free_load = free_load.with_term(-kg, None);
        }
        Ok(FullSystem { dofs, mass: b_ff, tau, load: free_load, factor })
    }

    pub fn dofs(&self) -> &DofMap {
        &self.dofs
    }

    pub fn initial_from_nodal(&self, u0: &DVector<f64>) -> DVector<f64> {
        self.dofs.restrict(u0)
    }

    pub fn to_nodal(&self, traj: &Trajectory) -> Trajectory {
        traj.map_states(|u| self.dofs.expand(u))
    }
}

impl TransientSystem for FullSystem {
    fn dim(&self) -> usize {
        self.dofs.free_count()
    }
    fn tau(&self) -> f64 {
        self.tau
    }
    fn apply_mass(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.mass * v
    }
    fn load(&self, t: f64) -> DVector<f64> {
        self.load.at(t, self.dim())
    }
    fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.factor.solve(rhs))
    }
}

/// Multiscale reduced system `B̃ = RᵀBR`, `K̃ = RᵀKR`, source `Rᵀ(F - K g)`.
pub struct ReducedSystem {
    mass: DMatrix<f64>,
    tau: f64,
    load: Load,
    solver: DenseSolver,
}

impl ReducedSystem {
    /// `r` maps reduced coordinates to full nodal vectors and must vanish on
    /// Dirichlet nodes; `lift` carries the Dirichlet data.
    pub fn new(
        scheme: &FractionalScheme,
        reduced_mass: DMatrix<f64>,
        reduced_stiffness: &DMatrix<f64>,
        r: &CsrMatrix<f64>,
        stiffness: &CsrMatrix<f64>,
        lift: &DVector<f64>,
        load: &Load,
    ) -> Result<Self> {
        let tau = scheme.tau();
        let lhs = &reduced_mass + reduced_stiffness * tau;
        let solver = DenseSolver::new(lhs)?;
        let mut reduced_load = load.map_space(|v| transpose_apply(r, v));
        if lift.amax() > 0.0 {
            let kg = stiffness * lift;
            reduced_load = reduced_load.with_term(-transpose_apply(r, &kg), None);
        }
        Ok(ReducedSystem { mass: reduced_mass, tau, load: reduced_load, solver })
    }

    /// Build directly from reduced operators and an already projected load.
    pub fn from_reduced(
        scheme: &FractionalScheme,
        reduced_mass: DMatrix<f64>,
        reduced_stiffness: &DMatrix<f64>,
        reduced_load: Load,
    ) -> Result<Self> {
        let tau = scheme.tau();
        let solver = DenseSolver::new(&reduced_mass + reduced_stiffness * tau)?;
        Ok(ReducedSystem { mass: reduced_mass, tau, load: reduced_load, solver })
    }
}

impl TransientSystem for ReducedSystem {
    fn dim(&self) -> usize {
        self.mass.nrows()
    }
    fn tau(&self) -> f64 {
        self.tau
    }
    fn apply_mass(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.mass * v
    }
    fn load(&self, t: f64) -> DVector<f64> {
        self.load.at(t, self.dim())
    }
    fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.solver.solve(rhs))
    }
}

/// One fine-grid step (free-node coordinates).
pub fn step_full(scheme: &FractionalScheme, sys: &FullSystem, history: &[DVector<f64>]) -> Result<DVector<f64>> {
    step(scheme, sys, history)
}

/// One reduced step (multiscale coordinates).
pub fn step_reduced(scheme: &FractionalScheme, sys: &ReducedSystem, history: &[DVector<f64>]) -> Result<DVector<f64>> {
    step(scheme, sys, history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{assemble_mass, assemble_stiffness, BoundaryCondition, ScalarField, StructuredMesh};
    use approx::assert_relative_eq;

    #[test]
    fn single_step_weights() {
        for g in [0.1, 0.5, 0.9] {
            let w = caputo_weights(g, 1).unwrap();
            assert_eq!(w.b, vec![1.0]);
            assert_eq!(w.c, vec![1.0]);
        }
    }

    #[test]
    fn half_order_two_steps() {
        let w = caputo_weights(0.5, 2).unwrap();
        assert_relative_eq!(w.b[0], 2f64.sqrt() - 1.0, epsilon = 1e-15);
        assert_eq!(w.b[1], 1.0);
        assert_relative_eq!(w.c[1], 2.0 - 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn near_zero_order_gives_unit_weights() {
        let w = caputo_weights(1e-13, 3).unwrap();
        for b in w.b {
            assert!((b - 1.0).abs() < 1e-11);
        }
    }

    #[test]
    fn weights_reject_bad_gamma() {
        assert!(matches!(caputo_weights(1.0, 3), Err(Error::InvalidGamma(_))));
        assert!(matches!(caputo_weights(0.0, 3), Err(Error::InvalidGamma(_))));
        assert!(caputo_weights(0.5, 0).is_err());
    }

    #[test]
    fn b_positive_and_increasing() {
        let w = caputo_weights(0.3, 50).unwrap();
        assert!(w.b.iter().all(|&b| b > 0.0));
        assert!(w.b.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn gamma_function_values() {
        assert_relative_eq!(gamma_fn(1.5), std::f64::consts::PI.sqrt() / 2.0, max_relative = 1e-13);
        assert_relative_eq!(gamma_fn(5.0), 24.0, max_relative = 1e-13);
    }

    struct Scalar {
        b: f64,
        k: f64,
        f: f64,
        tau: f64,
    }

    impl TransientSystem for Scalar {
        fn dim(&self) -> usize {
            1
        }
        fn tau(&self) -> f64 {
            self.tau
        }
        fn apply_mass(&self, v: &DVector<f64>) -> DVector<f64> {
            v * self.b
        }
        fn load(&self, _t: f64) -> DVector<f64> {
            DVector::from_element(1, self.f)
        }
        fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(rhs / (self.b + self.tau * self.k))
        }
    }

    #[test]
    fn scalar_recurrence_by_hand() {
        let scheme = FractionalScheme::new(0.5, 0.04, 2).unwrap();
        let tau = 0.2 * gamma_fn(1.5);
        assert_relative_eq!(scheme.tau(), tau, max_relative = 1e-14);
        let sys = Scalar { b: 2.0, k: 3.0, f: 5.0, tau };
        let u1 = step(&scheme, &sys, &[DVector::from_element(1, 0.0)]).unwrap()[0];
        assert_relative_eq!(u1, tau * 5.0 / (2.0 + 3.0 * tau), max_relative = 1e-14);
        let traj = march(&scheme, &sys, DVector::from_element(1, 0.0)).unwrap();
        let c1 = 2f64.sqrt() - 1.0;
        let c2 = 2.0 - 2f64.sqrt();
        let u2 = (2.0 * (c1 * 0.0 + c2 * u1) + tau * 5.0) / (2.0 + 3.0 * tau);
        assert_relative_eq!(traj.states[2][0], u2, max_relative = 1e-14);
        assert_eq!(traj.times.len(), 3);
    }

    #[test]
    fn zero_source_stays_zero() {
        let mesh = StructuredMesh::unit_square(4, 4).unwrap();
        let one = ScalarField::constant(&mesh, 1.0);
        let b = assemble_mass(&mesh, &one).unwrap();
        let k = assemble_stiffness(&mesh, &one).unwrap();
        let scheme = FractionalScheme::new(0.5, 0.01, 10).unwrap();
        let sys = FullSystem::new(&scheme, BoundaryCondition::all_dirichlet(0.0).dof_map(&mesh), &b, &k, &Load::steady(DVector::zeros(25))).unwrap();
        let traj = march(&scheme, &sys, DVector::zeros(sys.dim())).unwrap();
        assert!(traj.states.iter().all(|u| u.amax() == 0.0));
    }

    #[test]
    fn dirichlet_lift_reaches_steady_state() {
        // constant Dirichlet data with zero source: the solution relaxes to
        // that constant
        let mesh = StructuredMesh::unit_square(4, 4).unwrap();
        let one = ScalarField::constant(&mesh, 1.0);
        let b = assemble_mass(&mesh, &one).unwrap();
        let k = assemble_stiffness(&mesh, &one).unwrap();
        let scheme = FractionalScheme::new(0.9, 0.5, 200).unwrap();
        let dofs = BoundaryCondition::all_dirichlet(2.0).dof_map(&mesh);
        let sys = FullSystem::new(&scheme, dofs, &b, &k, &Load::steady(DVector::zeros(25))).unwrap();
        let traj = march(&scheme, &sys, DVector::from_element(sys.dim(), 2.0)).unwrap();
        let nodal = sys.to_nodal(&traj);
        assert!((nodal.last() - DVector::from_element(25, 2.0)).amax() < 1e-10);
    }
}
