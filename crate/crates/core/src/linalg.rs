//! Thin linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CscMatrix, CsrMatrix};

use crate::error::{Error, Result};

/// Sparse Cholesky factor of an SPD matrix.
pub struct SparseCholesky {
    factor: CscCholesky<f64>,
    n: usize,
}

impl SparseCholesky {
    pub fn new(a: &CsrMatrix<f64>) -> Result<Self> {
        let csc = CscMatrix::from(a);
        let factor = CscCholesky::factor(&csc).map_err(|e| {
            Error::SingularSystem(format!(
                "sparse Cholesky failed ({e:?}); diagonal range {:.3e}..{:.3e}",
                diag_min(a),
                diag_max(a)
            ))
        })?;
        Ok(SparseCholesky { factor, n: a.nrows() })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(b.len(), self.n);
        let x = self.factor.solve(b);
        x.column(0).into_owned()
    }
}

fn diag_min(a: &CsrMatrix<f64>) -> f64 {
    a.triplet_iter().filter(|(r, c, _)| r == c).map(|(_, _, &v)| v).fold(f64::INFINITY, f64::min)
}

fn diag_max(a: &CsrMatrix<f64>) -> f64 {
    a.triplet_iter().filter(|(r, c, _)| r == c).map(|(_, _, &v)| v).fold(f64::NEG_INFINITY, f64::max)
}

/// Dense SPD solver with an LU fallback for nearly singular reduced systems.
pub enum DenseSolver {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl DenseSolver {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if let Some(ch) = a.clone().cholesky() {
            return Ok(DenseSolver::Cholesky(ch));
        }
        let lu = a.lu();
        if !lu.is_invertible() {
            return Err(Error::SingularSystem(format!("reduced operator of size {} is singular", lu.l().nrows())));
        }
        log::warn!("reduced system matrix not numerically SPD; using LU");
        Ok(DenseSolver::Lu(lu))
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            DenseSolver::Cholesky(ch) => ch.solve(b),
            DenseSolver::Lu(lu) => lu.solve(b).expect("checked invertible"),
        }
    }
}

/// Flip sign so the first entry with magnitude above `1e-10 * max` is positive.
pub fn fix_sign(v: &mut DVector<f64>) {
    let amax = v.amax();
    if amax == 0.0 {
        return;
    }
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-10 * amax) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
}

/// Solve `A x = λ S x` for symmetric `A` and SPD `S`.
///
/// Returns eigenvalues ascending and `S`-orthonormal eigenvectors as columns.
pub fn generalized_symmetric_eigen(a: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Eigen(format!("right-hand matrix of size {n} is not positive definite")))?;
    let l = chol.l();
    // C = L^{-1} A L^{-T}
    let linv_a = l
        .solve_lower_triangular(a)
        .ok_or_else(|| Error::Eigen("triangular solve failed".into()))?;
    let c = l
        .solve_lower_triangular(&linv_a.transpose())
        .ok_or_else(|| Error::Eigen("triangular solve failed".into()))?;
    let c = (&c + c.transpose()) * 0.5;
    let eig = c.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]).then(i.cmp(&j)));
    let lt = l.transpose();
    let mut vals = Vec::with_capacity(n);
    let mut vecs = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vals.push(eig.eigenvalues[i]);
        let y = eig.eigenvectors.column(i).into_owned();
        let mut x = lt
            .solve_upper_triangular(&y)
            .ok_or_else(|| Error::Eigen("back substitution failed".into()))?;
        fix_sign(&mut x);
        vecs.set_column(k, &x);
    }
    Ok((vals, vecs))
}

/// Symmetric eigendecomposition sorted by descending eigenvalue with the
/// sign convention of [`fix_sign`].
pub fn symmetric_eigen_desc(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let mut vals = Vec::with_capacity(n);
    let mut vecs = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vals.push(eig.eigenvalues[i]);
        let mut v = eig.eigenvectors.column(i).into_owned();
        fix_sign(&mut v);
        vecs.set_column(k, &v);
    }
    (vals, vecs)
}

/// `R^T A R` for sparse `A` and sparse `R`, returned dense.
pub fn congruence(r: &CsrMatrix<f64>, a: &CsrMatrix<f64>) -> DMatrix<f64> {
    let ar = a * r;
    let rt = r.transpose();
    let out = &rt * &ar;
    let mut d = DMatrix::from(&out);
    // exact symmetry
    let dt = d.transpose();
    d += dt;
    d *= 0.5;
    d
}

/// `R^T v` for sparse `R`.
pub fn transpose_apply(r: &CsrMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(r.ncols());
    for (row, col, &val) in r.triplet_iter() {
        out[col] += val * v[row];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generalized_eigen_is_s_orthonormal() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0]);
        let s = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 4.0, 1.0, 0.0, 1.0, 4.0]);
        let (vals, vecs) = generalized_symmetric_eigen(&a, &s).unwrap();
        let gram = vecs.transpose() * &s * &vecs;
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-12);
        for k in 0..3 {
            let v = vecs.column(k);
            let r = &a * v - (&s * v) * vals[k];
            assert!(r.amax() < 1e-12);
        }
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn sparse_cholesky_solves() {
        let mut coo = nalgebra_sparse::CooMatrix::new(3, 3);
        for (r, c, v) in [(0, 0, 4.0), (1, 1, 5.0), (2, 2, 6.0), (0, 1, 1.0), (1, 0, 1.0)] {
            coo.push(r, c, v);
        }
        let a = CsrMatrix::from(&coo);
        let ch = SparseCholesky::new(&a).unwrap();
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x = ch.solve(&b);
        assert!((&a * &x - b).amax() < 1e-14);
    }
}
