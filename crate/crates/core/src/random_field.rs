//! Karhunen-Loève parameterization of Gaussian log-fields.
//!
//! The covariance operator is discretized in Galerkin form on the bilinear
//! space, `M C M e = λ M e`, with `C` the kernel evaluated between nodes and
//! `M` the unit-weight mass matrix. Eigenvectors are `M`-orthonormal, so the
//! discrete modes are L2-orthonormal fields. Both implemented kernels are
//! separable in `x` and `y`, and on the tensor grid `M = M_y ⊗ M_x`, so the 2-D
//! problem factors into two 1-D problems. The dense route solves the same
//! discrete operator without exploiting that structure.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{fix_sign, symmetric_eigen_desc};
use crate::mesh::{assemble_mass, FieldLocation, ScalarField, StructuredMesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// `exp(-dx²/(2 lx²) - dy²/(2 ly²))`
    Gaussian,
    /// `exp(-|dx|/(2 lx²) - |dy|/(2 ly²))` by default; see [`ExponentForm`].
    Exponential,
}

/// Length normalization used by the exponential kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExponentForm {
    /// `|d| / (2 l²)`
    #[default]
    HalfSquaredLength,
    /// `|d| / l`
    Length,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceKernel {
    pub family: KernelFamily,
    pub lx: f64,
    pub ly: f64,
    pub sigma2: f64,
    #[serde(default)]
    pub exponent_form: ExponentForm,
}

impl CovarianceKernel {
    pub fn new(family: KernelFamily, lx: f64, ly: f64, sigma2: f64) -> Result<Self> {
        let k = CovarianceKernel { family, lx, ly, sigma2, exponent_form: ExponentForm::default() };
        k.validate()?;
        Ok(k)
    }

    pub fn gaussian(lx: f64, ly: f64, sigma2: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, lx, ly, sigma2)
    }

    pub fn exponential(lx: f64, ly: f64, sigma2: f64) -> Result<Self> {
        Self::new(KernelFamily::Exponential, lx, ly, sigma2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lx > 0.0 && self.ly > 0.0 && self.sigma2 > 0.0) {
            return Err(Error::InvalidInput(format!(
                "kernel needs positive lengths and variance, got lx={}, ly={}, sigma2={}",
                self.lx, self.ly, self.sigma2
            )));
        }
        Ok(())
    }

    /// Unit-variance factor along one axis.
    pub fn axis_factor(&self, d: f64, l: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => (-d * d / (2.0 * l * l)).exp(),
            KernelFamily::Exponential => match self.exponent_form {
                ExponentForm::HalfSquaredLength => (-d.abs() / (2.0 * l * l)).exp(),
                ExponentForm::Length => (-d.abs() / l).exp(),
            },
        }
    }

    pub fn eval(&self, dx: f64, dy: f64) -> f64 {
        self.sigma2 * self.axis_factor(dx, self.lx) * self.axis_factor(dy, self.ly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlSolver {
    /// Kronecker factorization into 1-D eigenproblems.
    #[default]
    Separable,
    /// Full `N_h x N_h` symmetric eigensolve.
    Dense,
}

/// Truncated KL eigenpairs of one field plus its mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlBasis {
    pub mesh: StructuredMesh,
    pub kernel: CovarianceKernel,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// `N_h x N` nodal modes, `M`-orthonormal.
    pub modes: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// `Σ λ_i / (σ² |Ω|)`
    pub energy_ratio: f64,
}

const INDEFINITE_TOL: f64 = 1e-10;

fn mass_1d(n_cells: usize, h: f64) -> DMatrix<f64> {
    let n = n_cells + 1;
    let mut m = DMatrix::zeros(n, n);
    for e in 0..n_cells {
        m[(e, e)] += h / 3.0;
        m[(e + 1, e + 1)] += h / 3.0;
        m[(e, e + 1)] += h / 6.0;
        m[(e + 1, e)] += h / 6.0;
    }
    m
}

/// Galerkin eigenpairs of a 1-D kernel: descending values, `M`-orthonormal
/// vectors.
fn kl_1d(coords: &[f64], h: f64, factor: impl Fn(f64) -> f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = coords.len();
    let m = mass_1d(n - 1, h);
    let c = DMatrix::from_fn(n, n, |i, j| factor(coords[i] - coords[j]));
    galerkin_eigen(&m, &c)
}

fn galerkin_eigen(m: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Eigen("mass matrix not positive definite".into()))?;
    let l = chol.l();
    let a = l.transpose() * c * &l;
    let (vals, w) = symmetric_eigen_desc(&a);
    let lt = l.transpose();
    let mut e = DMatrix::zeros(w.nrows(), w.ncols());
    for k in 0..w.ncols() {
        let mut x = lt
            .solve_upper_triangular(&w.column(k).into_owned())
            .ok_or_else(|| Error::Eigen("back substitution failed".into()))?;
        fix_sign(&mut x);
        e.set_column(k, &x);
    }
    Ok((vals, e))
}

fn check_spectrum(vals: &[f64]) -> Result<()> {
    let top = vals.iter().cloned().fold(0.0_f64, f64::max);
    if let Some(&neg) = vals.iter().find(|&&v| v < -INDEFINITE_TOL * top.max(1.0)) {
        return Err(Error::Eigen(format!("covariance operator is indefinite (eigenvalue {neg:.3e})")));
    }
    Ok(())
}

/// Build a truncated KL basis with the default (separable) solver.
pub fn build_kl(mesh: &StructuredMesh, kernel: CovarianceKernel, n_trunc: usize, mean: &ScalarField) -> Result<KlBasis> {
    build_kl_with(mesh, kernel, n_trunc, mean, KlSolver::Separable)
}

pub fn build_kl_with(
    mesh: &StructuredMesh,
    kernel: CovarianceKernel,
    n_trunc: usize,
    mean: &ScalarField,
    solver: KlSolver,
) -> Result<KlBasis> {
    kernel.validate()?;
    let nn = mesh.node_count();
    if n_trunc == 0 || n_trunc > nn {
        return Err(Error::InvalidInput(format!("truncation {n_trunc} must lie in 1..={nn}")));
    }
    if mean.location != FieldLocation::Node || mean.len() != nn {
        return Err(Error::DimensionMismatch { context: "KL mean field", expected: nn, actual: mean.len() });
    }
    let (eigenvalues, modes) = match solver {
        KlSolver::Separable => separable_modes(mesh, &kernel, n_trunc)?,
        KlSolver::Dense => dense_modes(mesh, &kernel, n_trunc)?,
    };
    let energy_ratio = eigenvalues.iter().sum::<f64>() / (kernel.sigma2 * mesh.domain.area());
    Ok(KlBasis { mesh: *mesh, kernel, eigenvalues, modes, mean: mean.to_dvector(), energy_ratio })
}

fn separable_modes(mesh: &StructuredMesh, kernel: &CovarianceKernel, n_trunc: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (vx, ex) = kl_1d(&mesh.x_coords(), mesh.hx(), |d| kernel.axis_factor(d, kernel.lx))?;
    let (vy, ey) = kl_1d(&mesh.y_coords(), mesh.hy(), |d| kernel.axis_factor(d, kernel.ly))?;
    check_spectrum(&vx)?;
    check_spectrum(&vy)?;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(vx.len() * vy.len());
    for (a, &mx) in vx.iter().enumerate() {
        for (b, &my) in vy.iter().enumerate() {
            pairs.push((kernel.sigma2 * mx * my, a, b));
        }
    }
    pairs.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)).then(p.2.cmp(&q.2)));
    let nx1 = mesh.nx + 1;
    let mut modes = DMatrix::zeros(mesh.node_count(), n_trunc);
    let mut vals = Vec::with_capacity(n_trunc);
    for (k, &(lam, a, b)) in pairs.iter().take(n_trunc).enumerate() {
        let mut v = DVector::from_fn(mesh.node_count(), |n, _| ex[(n % nx1, a)] * ey[(n / nx1, b)]);
        fix_sign(&mut v);
        modes.set_column(k, &v);
        vals.push(lam.max(0.0));
    }
    Ok((vals, modes))
}

fn dense_modes(mesh: &StructuredMesh, kernel: &CovarianceKernel, n_trunc: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let nn = mesh.node_count();
    let m = DMatrix::from(&assemble_mass(mesh, &ScalarField::constant(mesh, 1.0))?);
    let coords: Vec<[f64; 2]> = (0..nn).map(|n| mesh.node_coords(n)).collect();
    let c = DMatrix::from_fn(nn, nn, |i, j| kernel.eval(coords[i][0] - coords[j][0], coords[i][1] - coords[j][1]));
    let (vals, e) = galerkin_eigen(&m, &c)?;
    check_spectrum(&vals)?;
    Ok((vals.iter().take(n_trunc).map(|v| v.max(0.0)).collect(), e.columns(0, n_trunc).into_owned()))
}

impl KlBasis {
    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    fn check_len(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.n_modes() {
            return Err(Error::DimensionMismatch { context: "KL coefficients", expected: self.n_modes(), actual: z.len() });
        }
        Ok(())
    }

    /// `Σ √λ_i e_i z_i` without the mean.
    pub fn fluctuation(&self, z: &[f64]) -> Result<DVector<f64>> {
        self.check_len(z)?;
        let w = DVector::from_iterator(z.len(), z.iter().zip(&self.eigenvalues).map(|(zi, l)| zi * l.sqrt()));
        Ok(&self.modes * w)
    }

    /// Log-scale realization `mean + Σ √λ_i e_i z_i`.
    pub fn realize(&self, z: &[f64]) -> Result<ScalarField> {
        let y = &self.mean + self.fluctuation(z)?;
        ScalarField::nodal(&self.mesh, y.as_slice().to_vec())
    }

    /// Recover coefficients from a realization through the mass-weighted
    /// inner products.
    pub fn project(&self, field: &ScalarField) -> Result<Vec<f64>> {
        let m = assemble_mass(&self.mesh, &ScalarField::constant(&self.mesh, 1.0))?;
        let centered = field.to_dvector() - &self.mean;
        let mc = &m * centered;
        Ok((0..self.n_modes())
            .map(|i| self.modes.column(i).dot(&mc) / self.eigenvalues[i].sqrt())
            .collect())
    }

    /// `max |EᵀME - I|`.
    pub fn orthonormality_residual(&self) -> Result<f64> {
        let m = DMatrix::from(&assemble_mass(&self.mesh, &ScalarField::constant(&self.mesh, 1.0))?);
        let g = self.modes.transpose() * m * &self.modes;
        Ok((g - DMatrix::identity(self.n_modes(), self.n_modes())).amax())
    }
}

/// Realize one log-field from its coefficient vector.
pub fn realize_field(basis: &KlBasis, z: &[f64]) -> Result<ScalarField> {
    basis.realize(z)
}

/// How several correlated fields are assembled from their normalized parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// `Y_j = E[Y_j] + σ_j Σ_{k<=j} L_jk Y'_k` with `ρ = L Lᵀ`.
    #[default]
    Cholesky,
    /// Two fields where the second drives the first:
    /// `Y_1 = E[Y_1] + σ_1 (ρ Y'_2 + √(1-ρ²) Y'_1)`, `Y_2 = E[Y_2] + σ_2 Y'_2`.
    SecondDrivesFirst,
}

/// Correlated log-fields sharing a coefficient vector `z = (z¹, z², ...)`.
///
/// Each basis carries its own kernel variance `σ_j²`; the normalized part is
/// `Y'_j = (Y_j - E[Y_j]) / σ_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelatedFieldSet {
    pub bases: Vec<KlBasis>,
    pub rho: DMatrix<f64>,
    pub cholesky: DMatrix<f64>,
    pub mode: CorrelationMode,
}

impl CorrelatedFieldSet {
    pub fn new(bases: Vec<KlBasis>, rho: DMatrix<f64>, mode: CorrelationMode) -> Result<Self> {
        let m = bases.len();
        if m == 0 || rho.nrows() != m || rho.ncols() != m {
            return Err(Error::DimensionMismatch { context: "correlation matrix", expected: m, actual: rho.nrows() });
        }
        for i in 0..m {
            if (rho[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput("correlation matrix needs a unit diagonal".into()));
            }
            for j in 0..m {
                if (rho[(i, j)] - rho[(j, i)]).abs() > 1e-12 {
                    return Err(Error::InvalidInput("correlation matrix must be symmetric".into()));
                }
            }
        }
        if mode == CorrelationMode::SecondDrivesFirst && m != 2 {
            return Err(Error::InvalidInput("second-drives-first mode needs exactly two fields".into()));
        }
        let cholesky = rho
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidInput("correlation matrix is not positive definite".into()))?
            .l();
        Ok(CorrelatedFieldSet { bases, rho, cholesky, mode })
    }

    /// Two fields with scalar correlation `rho`.
    pub fn pair(first: KlBasis, second: KlBasis, rho: f64, mode: CorrelationMode) -> Result<Self> {
        let r = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        Self::new(vec![first, second], r, mode)
    }

    pub fn n_params(&self) -> usize {
        self.bases.iter().map(|b| b.n_modes()).sum()
    }

    fn normalized_parts(&self, z: &[f64]) -> Result<Vec<DVector<f64>>> {
        if z.len() != self.n_params() {
            return Err(Error::DimensionMismatch { context: "correlated coefficients", expected: self.n_params(), actual: z.len() });
        }
        let mut offset = 0;
        let mut parts = Vec::with_capacity(self.bases.len());
        for b in &self.bases {
            let n = b.n_modes();
            parts.push(b.fluctuation(&z[offset..offset + n])? / b.kernel.sigma2.sqrt());
            offset += n;
        }
        Ok(parts)
    }

    /// Log-fields in basis order.
    pub fn realize(&self, z: &[f64]) -> Result<Vec<ScalarField>> {
        let parts = self.normalized_parts(z)?;
        let sigma: Vec<f64> = self.bases.iter().map(|b| b.kernel.sigma2.sqrt()).collect();
        let fields: Vec<DVector<f64>> = match self.mode {
            CorrelationMode::Cholesky => (0..self.bases.len())
                .map(|j| {
                    let mut y = self.bases[j].mean.clone();
                    for k in 0..=j {
                        y.axpy(sigma[j] * self.cholesky[(j, k)], &parts[k], 1.0);
                    }
                    y
                })
                .collect(),
            CorrelationMode::SecondDrivesFirst => {
                let rho = self.rho[(0, 1)];
                let s = (1.0 - rho * rho).sqrt();
                let mut y1 = self.bases[0].mean.clone();
                y1.axpy(sigma[0] * rho, &parts[1], 1.0);
                y1.axpy(sigma[0] * s, &parts[0], 1.0);
                let mut y2 = self.bases[1].mean.clone();
                y2.axpy(sigma[1], &parts[1], 1.0);
                vec![y1, y2]
            }
        };
        fields
            .into_iter()
            .zip(&self.bases)
            .map(|(y, b)| ScalarField::nodal(&b.mesh, y.as_slice().to_vec()))
            .collect()
    }
}

pub fn realize_correlated(set: &CorrelatedFieldSet, z: &[f64]) -> Result<Vec<ScalarField>> {
    set.realize(z)
}

/// Piecewise field: element `e` takes its value from subfield `partition[e]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedFieldSpec {
    pub partition: Vec<usize>,
    pub n_subdomains: usize,
}

impl MixedFieldSpec {
    pub fn new(mesh: &StructuredMesh, partition: Vec<usize>, n_subdomains: usize) -> Result<Self> {
        if partition.len() != mesh.element_count() {
            return Err(Error::DimensionMismatch { context: "subdomain partition", expected: mesh.element_count(), actual: partition.len() });
        }
        if let Some(e) = partition.iter().position(|&p| p >= n_subdomains) {
            return Err(Error::InvalidInput(format!("element {e} is not covered by any of the {n_subdomains} subdomains")));
        }
        Ok(MixedFieldSpec { partition, n_subdomains })
    }

    /// Subdomain 1 on the horizontal band `y_lo < y < y_hi` (by element
    /// centre), subdomain 0 elsewhere.
    pub fn middle_layer(mesh: &StructuredMesh, y_lo: f64, y_hi: f64) -> Result<Self> {
        let p = (0..mesh.element_count())
            .map(|e| {
                let y = mesh.element_center(e)[1];
                usize::from(y > y_lo && y < y_hi)
            })
            .collect();
        Self::new(mesh, p, 2)
    }

    /// Stitch subfields (one per subdomain) into an element field.
    pub fn stitch(&self, mesh: &StructuredMesh, fields: &[ScalarField]) -> Result<ScalarField> {
        if fields.len() != self.n_subdomains {
            return Err(Error::DimensionMismatch { context: "mixed subfields", expected: self.n_subdomains, actual: fields.len() });
        }
        let per_elem: Vec<Vec<f64>> = fields.iter().map(|f| f.element_values(mesh)).collect::<Result<_>>()?;
        let vals = self.partition.iter().enumerate().map(|(e, &p)| per_elem[p][e]).collect();
        ScalarField::elemental(mesh, vals)
    }
}

/// Log-field of a mixed coefficient: subfields come from `set`, one per
/// subdomain in order.
pub fn realize_mixed(spec: &MixedFieldSpec, set: &CorrelatedFieldSet, z: &[f64]) -> Result<ScalarField> {
    let fields = set.realize(z)?;
    let mesh = set.bases[0].mesh;
    spec.stitch(&mesh, &fields)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mesh() -> StructuredMesh {
        StructuredMesh::unit_square(12, 10).unwrap()
    }

    #[test]
    fn kernel_validation() {
        assert!(CovarianceKernel::gaussian(0.0, 0.1, 1.0).is_err());
        assert!(CovarianceKernel::gaussian(0.1, 0.1, -1.0).is_err());
        let k = CovarianceKernel::exponential(0.1, 0.2, 2.0).unwrap();
        assert_relative_eq!(k.eval(0.1, 0.0), 2.0 * (-0.1f64 / 0.02).exp(), max_relative = 1e-14);
    }

    #[test]
    fn sigma_scaling_doubles_eigenvalues() {
        let m = mesh();
        let zero = ScalarField::constant(&m, 0.0);
        let a = build_kl(&m, CovarianceKernel::gaussian(0.2, 0.4, 1.0).unwrap(), 8, &zero).unwrap();
        let b = build_kl(&m, CovarianceKernel::gaussian(0.2, 0.4, 2.0).unwrap(), 8, &zero).unwrap();
        for i in 0..8 {
            assert_relative_eq!(b.eigenvalues[i], 2.0 * a.eigenvalues[i], max_relative = 1e-12);
        }
        assert!((a.modes.clone() - b.modes.clone()).amax() < 1e-9);
    }

    #[test]
    fn separable_matches_dense() {
        let m = StructuredMesh::unit_square(8, 6).unwrap();
        let zero = ScalarField::constant(&m, 0.0);
        let k = CovarianceKernel::gaussian(0.3, 0.5, 1.0).unwrap();
        let s = build_kl_with(&m, k, 10, &zero, KlSolver::Separable).unwrap();
        let d = build_kl_with(&m, k, 10, &zero, KlSolver::Dense).unwrap();
        for i in 0..10 {
            assert_relative_eq!(s.eigenvalues[i], d.eigenvalues[i], max_relative = 1e-9);
        }
        assert!(d.orthonormality_residual().unwrap() < 1e-10);
        assert!(s.orthonormality_residual().unwrap() < 1e-10);
    }

    #[test]
    fn energy_ratio_monotone_and_bounded() {
        let m = mesh();
        let zero = ScalarField::constant(&m, 0.0);
        let k = CovarianceKernel::gaussian(0.2, 0.4, 1.0).unwrap();
        let mut prev = 0.0;
        for n in [1, 5, 20, 80, m.node_count()] {
            let b = build_kl(&m, k, n, &zero).unwrap();
            assert!(b.energy_ratio >= prev);
            assert!(b.energy_ratio <= 1.0 + 1e-8);
            prev = b.energy_ratio;
        }
    }

    #[test]
    fn realization_identities() {
        let m = mesh();
        let mean = ScalarField::from_fn(&m, |x, y| x - y).unwrap();
        let b = build_kl(&m, CovarianceKernel::gaussian(0.2, 0.4, 1.0).unwrap(), 6, &mean).unwrap();
        assert_eq!(b.realize(&[0.0; 6]).unwrap().values, mean.values);
        let mut e = [0.0; 6];
        e[2] = 1.0;
        let f = b.realize(&e).unwrap().to_dvector() - mean.to_dvector();
        let expect = b.modes.column(2) * b.eigenvalues[2].sqrt();
        assert!((f - expect).amax() < 1e-14);
        let z = [0.3, -1.2, 0.8, 2.0, -0.4, 0.1];
        let back = b.project(&b.realize(&z).unwrap()).unwrap();
        for (a, c) in back.iter().zip(z) {
            assert!((a - c).abs() < 1e-8);
        }
        assert!(b.realize(&[0.0; 5]).is_err());
    }

    #[test]
    fn truncation_bounds() {
        let m = StructuredMesh::unit_square(2, 2).unwrap();
        let zero = ScalarField::constant(&m, 0.0);
        let k = CovarianceKernel::gaussian(0.2, 0.2, 1.0).unwrap();
        assert!(build_kl(&m, k, 10, &zero).is_err());
        assert!(build_kl(&m, k, 0, &zero).is_err());
    }

    #[test]
    fn identity_correlation_decouples() {
        let m = mesh();
        let zero = ScalarField::constant(&m, 0.0);
        let b1 = build_kl(&m, CovarianceKernel::gaussian(0.2, 0.4, 1.0).unwrap(), 3, &zero).unwrap();
        let b2 = build_kl(&m, CovarianceKernel::gaussian(0.3, 0.3, 4.0).unwrap(), 2, &ScalarField::constant(&m, 1.0)).unwrap();
        let set = CorrelatedFieldSet::pair(b1.clone(), b2.clone(), 0.0, CorrelationMode::Cholesky).unwrap();
        let z = [0.5, -0.3, 1.1, 0.7, -2.0];
        let f = set.realize(&z).unwrap();
        assert!((f[0].to_dvector() - b1.realize(&z[..3]).unwrap().to_dvector()).amax() < 1e-13);
        assert!((f[1].to_dvector() - b2.realize(&z[3..]).unwrap().to_dvector()).amax() < 1e-13);
    }

    #[test]
    fn second_drives_first_substitution() {
        let m = mesh();
        let b1 = build_kl(&m, CovarianceKernel::exponential(0.1, 0.01, 2.0).unwrap(), 3, &ScalarField::constant(&m, 0.0)).unwrap();
        let b2 = build_kl(&m, CovarianceKernel::gaussian(0.1, 0.3, 1.0).unwrap(), 4, &ScalarField::constant(&m, 1.0)).unwrap();
        let rho = -0.4;
        let set = CorrelatedFieldSet::pair(b1.clone(), b2.clone(), rho, CorrelationMode::SecondDrivesFirst).unwrap();
        let z = [0.2, 1.0, -0.7, 0.0, 0.0, 0.0, 0.0];
        let f = set.realize(&z).unwrap();
        assert!(f[1].values.iter().all(|&v| (v - 1.0).abs() < 1e-14));
        // σ_1 √(1-ρ²) Y'_1 with Y'_1 = fluctuation / σ_1
        let expect = b1.fluctuation(&z[..3]).unwrap() * (1.0 - rho * rho).sqrt();
        assert!((f[0].to_dvector() - expect).amax() < 1e-13);
    }

    #[test]
    fn mixed_field_partition() {
        let m = StructuredMesh::unit_square(6, 6).unwrap();
        let spec = MixedFieldSpec::middle_layer(&m, 1.0 / 3.0, 2.0 / 3.0).unwrap();
        let f = spec
            .stitch(&m, &[ScalarField::constant(&m, 1.0), ScalarField::constant(&m, 5.0)])
            .unwrap();
        for e in 0..m.element_count() {
            let y = m.element_center(e)[1];
            let expect = if y > 1.0 / 3.0 && y < 2.0 / 3.0 { 5.0 } else { 1.0 };
            assert_eq!(f.values[e], expect);
        }
        assert!(MixedFieldSpec::new(&m, vec![0; 36].into_iter().chain([3]).take(36).collect(), 2).is_ok());
        let mut bad = vec![0; 36];
        bad[7] = 2;
        assert!(MixedFieldSpec::new(&m, bad, 2).is_err());
    }
}
