//! Least-squares polynomial chaos surrogates.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward::ForwardMap;
use crate::io::{read_matrix_csv, read_json, write_json, write_matrix_csv};

/// Upper bound on the number of basis functions.
pub const MAX_TERMS: usize = 5_000_000;

/// Total-degree multi-indices, graded: degree ascending, then
/// lexicographically descending within a degree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiIndexSet {
    pub dim: usize,
    pub degree: usize,
    pub indices: Vec<Vec<u32>>,
}

/// `C(n + d, d)` with overflow detection.
pub fn total_degree_count(degree: usize, dim: usize) -> Option<usize> {
    let mut acc: u128 = 1;
    for i in 1..=degree.min(dim) as u128 {
        let big = (degree.max(dim)) as u128;
        acc = acc.checked_mul(big + i)? / i;
    }
    usize::try_from(acc).ok()
}

fn push_degree(dim: usize, remaining: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if prefix.len() + 1 == dim {
        prefix.push(remaining);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in (0..=remaining).rev() {
        prefix.push(first);
        push_degree(dim, remaining - first, prefix, out);
        prefix.pop();
    }
}

pub fn multi_indices(degree: usize, dim: usize) -> Result<MultiIndexSet> {
    if dim == 0 {
        return Err(Error::InvalidInput("multi-index dimension must be positive".into()));
    }
    let p = total_degree_count(degree, dim)
        .filter(|&p| p <= MAX_TERMS)
        .ok_or(Error::IndexOverflow { degree, dim })?;
    let mut indices = Vec::with_capacity(p);
    for d in 0..=degree as u32 {
        push_degree(dim, d, &mut Vec::with_capacity(dim), &mut indices);
    }
    debug_assert_eq!(indices.len(), p);
    Ok(MultiIndexSet { dim, degree, indices })
}

impl MultiIndexSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// SHA-256 of the index list, for manifests.
    pub fn order_hash(&self) -> String {
        let mut h = Sha256::new();
        for idx in &self.indices {
            for v in idx {
                h.update(v.to_le_bytes());
            }
            h.update([0xff]);
        }
        hex::encode(h.finalize())
    }
}

/// Orthonormal univariate family together with its measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "family")]
pub enum Family {
    /// `√(2n+1) P_n` after mapping `[lower, upper]` to `[-1, 1]`; uniform measure.
    Legendre { lower: f64, upper: f64 },
    /// `He_n / √(n!)`; standard normal measure.
    Hermite,
}

impl Family {
    /// Normalized values of degrees `0..=n` at `x`.
    pub fn values(&self, x: f64, n: usize, out: &mut [f64]) {
        out[0] = 1.0;
        match *self {
            Family::Legendre { lower, upper } => {
                let t = (2.0 * x - lower - upper) / (upper - lower);
                let (mut p0, mut p1) = (1.0, t);
                if n >= 1 {
                    out[1] = 3f64.sqrt() * t;
                }
                for k in 1..n {
                    let kf = k as f64;
                    let p2 = ((2.0 * kf + 1.0) * t * p1 - kf * p0) / (kf + 1.0);
                    out[k + 1] = (2.0 * kf + 3.0).sqrt() * p2;
                    p0 = p1;
                    p1 = p2;
                }
            }
            Family::Hermite => {
                let (mut h0, mut h1) = (1.0, x);
                if n >= 1 {
                    out[1] = x;
                }
                let mut fact = 1.0;
                for k in 1..n {
                    let kf = k as f64;
                    let h2 = x * h1 - kf * h0;
                    fact *= kf + 1.0;
                    out[k + 1] = h2 / fact.sqrt();
                    h0 = h1;
                    h1 = h2;
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Family::Legendre { lower, upper } => rng.random_range(lower..upper),
            Family::Hermite => rng.sample(StandardNormal),
        }
    }

    pub fn in_support(&self, x: f64) -> bool {
        match *self {
            Family::Legendre { lower, upper } => x >= lower && x <= upper,
            Family::Hermite => x.is_finite(),
        }
    }
}

/// Tensor-product basis `Φ_i(z) = Π_k φ_{i_k}(z_k)`.
pub fn eval_basis(set: &MultiIndexSet, families: &[Family], z: &[f64]) -> DVector<f64> {
    let mut out = DVector::zeros(set.len());
    eval_basis_into(set, families, z, out.as_mut_slice());
    out
}

fn eval_basis_into(set: &MultiIndexSet, families: &[Family], z: &[f64], out: &mut [f64]) {
    let n = set.degree;
    let mut table = vec![0.0; set.dim * (n + 1)];
    for (k, fam) in families.iter().enumerate() {
        if !fam.in_support(z[k]) {
            log::trace!("coordinate {k} = {} outside the basis support", z[k]);
        }
        fam.values(z[k], n, &mut table[k * (n + 1)..(k + 1) * (n + 1)]);
    }
    for (slot, idx) in out.iter_mut().zip(&set.indices) {
        let mut v = 1.0;
        for (k, &d) in idx.iter().enumerate() {
            if d != 0 {
                v *= table[k * (n + 1) + d as usize];
            }
        }
        *slot = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    #[default]
    Qr,
    NormalEquations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub n_train: usize,
    pub method: FitMethod,
    /// Root-mean-square training residual over all outputs.
    pub residual_rms: f64,
    /// Ratio of extreme diagonal magnitudes of the triangular factor.
    pub condition_estimate: f64,
    /// Forward failures replaced by fresh draws.
    pub failures: usize,
    pub seed: Option<u64>,
}

/// Coefficients `c` (`P x n_d`) of `G̃(z) = cᵀ Φ(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub set: MultiIndexSet,
    pub families: Vec<Family>,
    pub coeffs: DMatrix<f64>,
    pub diagnostics: FitDiagnostics,
}

const CONDITION_LIMIT: f64 = 1e13;

/// Least-squares fit on given nodes (rows) and responses (rows).
pub fn fit_from_samples(
    set: &MultiIndexSet,
    families: &[Family],
    nodes: &DMatrix<f64>,
    values: &DMatrix<f64>,
    method: FitMethod,
) -> Result<Surrogate> {
    if families.len() != set.dim || nodes.ncols() != set.dim {
        return Err(Error::DimensionMismatch { context: "gPC dimension", expected: set.dim, actual: nodes.ncols() });
    }
    let (q, p) = (nodes.nrows(), set.len());
    if q < p {
        return Err(Error::TooFewSamples(format!("{q} training points for {p} basis functions")));
    }
    if values.nrows() != q {
        return Err(Error::DimensionMismatch { context: "training responses", expected: q, actual: values.nrows() });
    }
    let mut a = DMatrix::zeros(q, p);
    let rows: Vec<Vec<f64>> = (0..q)
        .into_par_iter()
        .map(|i| {
            let z: Vec<f64> = nodes.row(i).iter().copied().collect();
            let mut row = vec![0.0; p];
            eval_basis_into(set, families, &z, &mut row);
            row
        })
        .collect();
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    let (coeffs, condition_estimate) = match method {
        FitMethod::Qr => {
            let qr = a.clone().qr();
            let r = qr.r();
            let cond = triangular_condition(&r);
            if !(cond < CONDITION_LIMIT) {
                return Err(Error::RankDeficient { condition: cond });
            }
            let qtb = qr.q().transpose() * values;
            let c = r.solve_upper_triangular(&qtb).ok_or(Error::RankDeficient { condition: cond })?;
            (c, cond)
        }
        FitMethod::NormalEquations => {
            let ata = a.transpose() * &a;
            let ch = ata.cholesky().ok_or(Error::RankDeficient { condition: f64::INFINITY })?;
            let cond = triangular_condition(&ch.l()).powi(2);
            (ch.solve(&(a.transpose() * values)), cond)
        }
    };
    let resid = &a * &coeffs - values;
    let residual_rms = (resid.norm_squared() / (resid.len().max(1)) as f64).sqrt();
    Ok(Surrogate {
        set: set.clone(),
        families: families.to_vec(),
        coeffs,
        diagnostics: FitDiagnostics { n_train: q, method, residual_rms, condition_estimate, failures: 0, seed: None },
    })
}

fn triangular_condition(r: &DMatrix<f64>) -> f64 {
    let d = r.diagonal();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    for v in d.iter() {
        lo = lo.min(v.abs());
        hi = hi.max(v.abs());
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Draw `q` training nodes from the product measure, evaluate `map` at each
/// (replacing failures with fresh draws) and fit.
pub fn fit_surrogate<M: ForwardMap + ?Sized>(
    map: &M,
    families: &[Family],
    set: &MultiIndexSet,
    q: usize,
    seed: u64,
    method: FitMethod,
) -> Result<Surrogate> {
    if map.n_params() != set.dim {
        return Err(Error::DimensionMismatch { context: "surrogate parameters", expected: map.n_params(), actual: set.dim });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { families.iter().map(|f| f.sample(rng)).collect() };
    let mut nodes: Vec<Vec<f64>> = (0..q).map(|_| draw(&mut rng)).collect();
    let mut values: Vec<Option<DVector<f64>>> = vec![None; q];
    let mut pending: Vec<usize> = (0..q).collect();
    let mut failures = 0;
    let budget = 10 * q.max(1);
    while !pending.is_empty() {
        let results: Vec<(usize, Result<DVector<f64>>)> =
            pending.par_iter().map(|&i| (i, map.eval(&nodes[i]))).collect();
        pending.clear();
        for (i, res) in results {
            match res {
                Ok(v) if v.iter().all(|x| x.is_finite()) => values[i] = Some(v),
                Ok(_) | Err(_) => {
                    failures += 1;
                    if failures > budget {
                        return Err(Error::TooFewSamples(format!("{failures} forward failures while training")));
                    }
                    pending.push(i);
                }
            }
        }
        pending.sort_unstable();
        for &i in &pending {
            nodes[i] = draw(&mut rng);
        }
    }
    if failures > 0 {
        log::warn!("{failures} training evaluations failed and were redrawn");
    }
    let z = DMatrix::from_fn(q, set.dim, |i, j| nodes[i][j]);
    let n_d = map.n_obs();
    let b = DMatrix::from_fn(q, n_d, |i, j| values[i].as_ref().expect("filled")[j]);
    let mut s = fit_from_samples(set, families, &z, &b, method)?;
    s.diagnostics.failures = failures;
    s.diagnostics.seed = Some(seed);
    Ok(s)
}

impl Surrogate {
    pub fn n_terms(&self) -> usize {
        self.set.len()
    }

    pub fn eval(&self, z: &[f64]) -> DVector<f64> {
        let phi = eval_basis(&self.set, &self.families, z);
        self.coeffs.tr_mul(&phi)
    }

    /// Relative RMS error against reference responses at the given nodes.
    pub fn relative_rms(&self, nodes: &[Vec<f64>], reference: &[DVector<f64>]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (z, r) in nodes.iter().zip(reference) {
            num += (self.eval(z) - r).norm_squared();
            den += r.norm_squared();
        }
        (num / den.max(f64::MIN_POSITIVE)).sqrt()
    }

    /// Coefficient CSV plus JSON manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_matrix_csv(&dir.join("surrogate_coeffs.csv"), &self.coeffs)?;
        let manifest = SurrogateManifest {
            dim: self.set.dim,
            degree: self.set.degree,
            n_terms: self.set.len(),
            n_obs: self.coeffs.ncols(),
            order_hash: self.set.order_hash(),
            families: self.families.clone(),
            diagnostics: self.diagnostics.clone(),
        };
        write_json(&dir.join("surrogate.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("surrogate.json");
        let m: SurrogateManifest = read_json(&manifest_path)?;
        let set = multi_indices(m.degree, m.dim)?;
        if set.order_hash() != m.order_hash {
            return Err(Error::Malformed { path: manifest_path.display().to_string(), reason: "multi-index order hash mismatch".into() });
        }
        let coeffs_path = dir.join("surrogate_coeffs.csv");
        let coeffs = read_matrix_csv(&coeffs_path)?;
        if coeffs.shape() != (m.n_terms, m.n_obs) {
            return Err(Error::Malformed { path: coeffs_path.display().to_string(), reason: format!("expected {}x{} coefficients", m.n_terms, m.n_obs) });
        }
        Ok(Surrogate { set, families: m.families, coeffs, diagnostics: m.diagnostics })
    }
}

impl ForwardMap for Surrogate {
    fn n_params(&self) -> usize {
        self.set.dim
    }
    fn n_obs(&self) -> usize {
        self.coeffs.ncols()
    }
    fn eval(&self, theta: &[f64]) -> Result<DVector<f64>> {
        if theta.len() != self.set.dim {
            return Err(Error::DimensionMismatch { context: "surrogate input", expected: self.set.dim, actual: theta.len() });
        }
        Ok(Surrogate::eval(self, theta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateManifest {
    pub dim: usize,
    pub degree: usize,
    pub n_terms: usize,
    pub n_obs: usize,
    pub order_hash: String,
    pub families: Vec<Family>,
    pub diagnostics: FitDiagnostics,
}
