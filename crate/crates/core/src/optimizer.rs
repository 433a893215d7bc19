//! Regularizing Levenberg-Marquardt, the OLS sampling distribution and the
//! intermediate box built from it.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ForwardMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub alpha: f64,
    /// Difference step for every coordinate not overridden below.
    pub h: f64,
    /// Step for the leading coordinate (e.g. the fractional order).
    pub h_first: Option<f64>,
    pub max_iters: usize,
    /// Stop when the relative residual decrease falls below this.
    pub rel_tol: f64,
    /// Consecutive residual increases tolerated before giving up.
    pub max_increases: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig { alpha: 0.01, h: 0.5, h_first: None, max_iters: 50, rel_tol: 1e-6, max_increases: 5 }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let h_ok = self.h > 0.0 && self.h_first.is_none_or(|h| h > 0.0);
        if !(self.alpha > 0.0 && h_ok && self.max_iters > 0) {
            return Err(Error::Config(format!(
                "LM needs alpha > 0, positive steps and max_iters > 0 (alpha={}, h={}, h_first={:?})",
                self.alpha, self.h, self.h_first
            )));
        }
        Ok(())
    }

    pub fn steps(&self, n: usize) -> Vec<f64> {
        let mut h = vec![self.h; n];
        if let (Some(f), Some(slot)) = (self.h_first, h.first_mut()) {
            *slot = f;
        }
        h
    }
}

/// Forward-difference Jacobian; `g0` is `G(z)` if already known.
pub fn fd_jacobian<M: ForwardMap + ?Sized>(
    map: &M,
    z: &[f64],
    h: &[f64],
    g0: Option<&DVector<f64>>,
) -> Result<DMatrix<f64>> {
    if h.len() != z.len() {
        return Err(Error::DimensionMismatch { context: "difference steps", expected: z.len(), actual: h.len() });
    }
    let base = match g0 {
        Some(g) => g.clone(),
        None => map.eval(z)?,
    };
    let cols: Vec<DVector<f64>> = (0..z.len())
        .into_par_iter()
        .map(|j| {
            let mut zp = z.to_vec();
            zp[j] += h[j];
            let gp = map.eval(&zp).map_err(|e| Error::InvalidInput(format!("forward solve failed at perturbation {j}: {e}")))?;
            Ok((gp - &base) / h[j])
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_columns(&cols))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ZeroResidual,
    SmallDecrease,
    MaxIterations,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmIterate {
    pub z: Vec<f64>,
    pub residual_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmResult {
    /// Best iterate by residual norm.
    pub z: Vec<f64>,
    pub residual_norm: f64,
    pub history: Vec<LmIterate>,
    pub stop: StopReason,
}

/// `z ← z + (JᵀJ + αI)⁻¹ Jᵀ (d − G(z))` with a fixed `α`.
pub fn lm_solve<M: ForwardMap + ?Sized>(map: &M, d: &DVector<f64>, z0: &[f64], cfg: &LmConfig) -> Result<LmResult> {
    cfg.validate()?;
    let n = z0.len();
    if d.len() < n {
        log::warn!("fewer observations ({}) than parameters ({n})", d.len());
    }
    let h = cfg.steps(n);
    let mut z = DVector::from_column_slice(z0);
    let mut g = map.eval(z.as_slice())?;
    let mut r = d - &g;
    let mut rn = r.norm();
    if !rn.is_finite() {
        return Err(Error::NonFinite("initial residual".into()));
    }
    let mut history = vec![LmIterate { z: z.as_slice().to_vec(), residual_norm: rn }];
    let mut best = (z.clone(), rn);
    let mut increases = 0;
    let mut stop = StopReason::MaxIterations;
    for _ in 0..cfg.max_iters {
        if rn == 0.0 {
            stop = StopReason::ZeroResidual;
            break;
        }
        let j = fd_jacobian(map, z.as_slice(), &h, Some(&g))?;
        let lhs = j.transpose() * &j + DMatrix::identity(n, n) * cfg.alpha;
        let rhs = j.transpose() * &r;
        let dz = lhs
            .cholesky()
            .ok_or_else(|| Error::SingularSystem("regularized normal matrix".into()))?
            .solve(&rhs);
        z += dz;
        g = map.eval(z.as_slice())?;
        r = d - &g;
        let rn_new = r.norm();
        if !rn_new.is_finite() {
            return Err(Error::NonFinite(format!("residual after {} iterations", history.len())));
        }
        history.push(LmIterate { z: z.as_slice().to_vec(), residual_norm: rn_new });
        let rel = (rn - rn_new) / rn;
        rn = rn_new;
        if rn < best.1 {
            best = (z.clone(), rn);
        }
        if rel < 0.0 {
            increases += 1;
            if increases >= cfg.max_increases {
                stop = StopReason::Diverged;
                log::warn!("LM residual grew for {increases} consecutive iterations");
                break;
            }
        } else {
            increases = 0;
            if rel < cfg.rel_tol {
                stop = StopReason::SmallDecrease;
                break;
            }
        }
    }
    if stop == StopReason::Diverged && best.1 >= history[0].residual_norm {
        return Err(Error::Diverged(history.len() - 1));
    }
    Ok(LmResult { z: best.0.as_slice().to_vec(), residual_norm: best.1, history, stop })
}

/// Asymptotic law of the least-squares estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingDistribution {
    pub z_ols: Vec<f64>,
    /// `rᵀr / (n_d − n_z)`
    pub sigma2: f64,
    /// Diagonal of `(JᵀJ)⁻¹`.
    pub delta: Vec<f64>,
    /// `σ² (JᵀJ)⁻¹`
    pub covariance: DMatrix<f64>,
    pub residual_norm: f64,
}

pub fn sampling_distribution<M: ForwardMap + ?Sized>(
    map: &M,
    z_ols: &[f64],
    d: &DVector<f64>,
    h: &[f64],
) -> Result<SamplingDistribution> {
    let (n_d, n_z) = (d.len(), z_ols.len());
    if n_d <= n_z {
        return Err(Error::InvalidInput(format!("residual variance needs n_d > n_z (n_d={n_d}, n_z={n_z})")));
    }
    let g = map.eval(z_ols)?;
    let r = d - &g;
    let j = fd_jacobian(map, z_ols, h, Some(&g))?;
    sampling_from_jacobian(z_ols, &r, &j)
}

/// Same as [`sampling_distribution`] with the residual and Jacobian given.
pub fn sampling_from_jacobian(z_ols: &[f64], r: &DVector<f64>, j: &DMatrix<f64>) -> Result<SamplingDistribution> {
    let (n_d, n_z) = (r.len(), z_ols.len());
    if n_d <= n_z {
        return Err(Error::InvalidInput(format!("residual variance needs n_d > n_z (n_d={n_d}, n_z={n_z})")));
    }
    let sigma2 = r.norm_squared() / (n_d - n_z) as f64;
    let jtj = j.transpose() * j;
    let inv = match jtj.clone().cholesky() {
        Some(c) => c.inverse(),
        None => {
            log::warn!("JᵀJ is singular at the estimate; using the pseudo-inverse");
            jtj.pseudo_inverse(1e-12).map_err(|e| Error::SingularSystem(e.to_string()))?
        }
    };
    let covariance = &inv * sigma2;
    Ok(SamplingDistribution {
        z_ols: z_ols.to_vec(),
        sigma2,
        delta: inv.diagonal().iter().copied().collect(),
        covariance,
        residual_norm: r.norm(),
    })
}

/// Fixed interval for one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxOverride {
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
}

/// Product of uniform intervals around the estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntermediateDistribution {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// `2 σ √δ_k` before adjustment.
    pub raw_half_width: Vec<f64>,
    /// Half-width actually used, `ν_k`.
    pub nu: Vec<f64>,
    pub overridden: Vec<bool>,
}

impl IntermediateDistribution {
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.len() == self.dim() && z.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (a, b))| v >= a && v <= b)
    }

    pub fn from_bounds(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.iter().zip(&upper).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::InvalidInput("box bounds must be finite with lower < upper".into()));
        }
        let nu = lower.iter().zip(&upper).map(|(a, b)| 0.5 * (b - a)).collect::<Vec<_>>();
        Ok(IntermediateDistribution { raw_half_width: nu.clone(), nu, overridden: vec![false; lower.len()], lower, upper })
    }
}

/// `ν = 1` when `2σ√δ ≤ 1`, otherwise `ν = 2σ√δ`.
pub fn adjusted_half_width(raw: f64) -> f64 {
    if raw <= 1.0 {
        1.0
    } else {
        raw
    }
}

pub fn build_intermediate(sd: &SamplingDistribution, overrides: &[BoxOverride]) -> Result<IntermediateDistribution> {
    let sigma = sd.sigma2.sqrt();
    let raw: Vec<f64> = sd.delta.iter().map(|d| 2.0 * sigma * d.max(0.0).sqrt()).collect();
    let nu: Vec<f64> = raw.iter().map(|&r| adjusted_half_width(r)).collect();
    let mut lower: Vec<f64> = sd.z_ols.iter().zip(&nu).map(|(z, n)| z - n).collect();
    let mut upper: Vec<f64> = sd.z_ols.iter().zip(&nu).map(|(z, n)| z + n).collect();
    let mut overridden = vec![false; nu.len()];
    for o in overrides {
        if o.index >= nu.len() || !(o.lower < o.upper) {
            return Err(Error::InvalidInput(format!("bad box override for coordinate {}", o.index)));
        }
        lower[o.index] = o.lower;
        upper[o.index] = o.upper;
        overridden[o.index] = true;
    }
    if lower.iter().chain(&upper).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("intermediate box bounds".into()));
    }
    Ok(IntermediateDistribution { lower, upper, raw_half_width: raw, nu, overridden })
}

/// Everything the optimization stage reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub residual_norms: Vec<f64>,
    pub stop: StopReason,
    pub z_ols: Vec<f64>,
    pub sigma2_ols: f64,
    pub delta: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub raw_half_width: Vec<f64>,
    pub nu: Vec<f64>,
}

impl OptimizationReport {
    pub fn new(lm: &LmResult, sd: &SamplingDistribution, bx: &IntermediateDistribution) -> Self {
        OptimizationReport {
            residual_norms: lm.history.iter().map(|h| h.residual_norm).collect(),
            stop: lm.stop,
            z_ols: sd.z_ols.clone(),
            sigma2_ols: sd.sigma2,
            delta: sd.delta.clone(),
            lower: bx.lower.clone(),
            upper: bx.upper.clone(),
            raw_half_width: bx.raw_half_width.clone(),
            nu: bx.nu.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::FnMap;

    fn linear(a: DMatrix<f64>) -> FnMap<impl Fn(&[f64]) -> Result<DVector<f64>> + Sync> {
        let (n_obs, n_params) = a.shape();
        FnMap { n_params, n_obs, f: move |z: &[f64]| Ok(&a * DVector::from_column_slice(z)) }
    }

    #[test]
    fn jacobian_of_linear_map_is_exact() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, 4.0]);
        let m = linear(a.clone());
        for h in [0.5, 1e-3] {
            let j = fd_jacobian(&m, &[0.3, -0.2], &[h, h], None).unwrap();
            assert!((j - &a).amax() < 1e-12);
        }
    }

    #[test]
    fn jacobian_of_constant_and_quadratic() {
        let c = FnMap { n_params: 2, n_obs: 1, f: |_: &[f64]| Ok(DVector::from_element(1, 5.0)) };
        assert_eq!(fd_jacobian(&c, &[1.0, 2.0], &[0.5, 0.5], None).unwrap().amax(), 0.0);
        let q = FnMap { n_params: 1, n_obs: 1, f: |z: &[f64]| Ok(DVector::from_element(1, z[0] * z[0])) };
        let j = fd_jacobian(&q, &[1.0], &[0.5], None).unwrap();
        assert!((j[(0, 0)] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn exact_start_stops_immediately() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, 4.0]);
        let m = linear(a.clone());
        let z = [0.7, -0.4];
        let d = &a * DVector::from_column_slice(&z);
        let res = lm_solve(&m, &d, &z, &LmConfig::default()).unwrap();
        assert_eq!(res.z, z.to_vec());
        assert_eq!(res.stop, StopReason::ZeroResidual);
    }

    #[test]
    fn step_shrinks_with_alpha() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, 4.0]);
        let m = linear(a.clone());
        let d = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let jtr = (a.transpose() * &d).norm();
        for alpha in [1e2, 1e4, 1e6] {
            let cfg = LmConfig { alpha, max_iters: 1, ..LmConfig::default() };
            let res = lm_solve(&m, &d, &[0.0, 0.0], &cfg).unwrap();
            let step = DVector::from_vec(res.history[1].z.clone()).norm();
            assert!(step <= jtr / alpha + 1e-15);
        }
    }

    #[test]
    fn nu_rule_and_overrides() {
        let sd = |raw: f64| SamplingDistribution {
            z_ols: vec![0.2, -1.0],
            sigma2: 0.25,
            // 2 σ √δ = √δ with σ = 0.5
            delta: vec![raw * raw, raw * raw],
            covariance: DMatrix::zeros(2, 2),
            residual_norm: 0.0,
        };
        let b = build_intermediate(&sd(0.3), &[]).unwrap();
        assert!((b.lower[0] - (-0.8)).abs() < 1e-15 && (b.upper[0] - 1.2).abs() < 1e-15);
        let b = build_intermediate(&sd(1.7), &[]).unwrap();
        assert!((b.upper[1] - 0.7).abs() < 1e-12 && (b.lower[1] + 2.7).abs() < 1e-12);
        let b = build_intermediate(&sd(1.7), &[BoxOverride { index: 0, lower: 0.0, upper: 1.0 }]).unwrap();
        assert_eq!((b.lower[0], b.upper[0]), (0.0, 1.0));
        assert!(b.overridden[0] && !b.overridden[1]);
    }

    #[test]
    fn sampling_distribution_identity_jacobian() {
        let mut a = DMatrix::zeros(5, 3);
        for i in 0..3 {
            a[(i, i)] = 1.0;
        }
        let m = linear(a);
        let d = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4, -0.4]);
        let sd = sampling_distribution(&m, &[0.1, 0.2, 0.3], &d, &[0.5; 3]).unwrap();
        assert!(sd.delta.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!((sd.sigma2 - 0.32 / 2.0).abs() < 1e-12);
        let zero = sampling_distribution(&m, &[0.1, 0.2, 0.3], &DVector::from_vec(vec![0.1, 0.2, 0.3, 0.0, 0.0]), &[0.5; 3]).unwrap();
        assert_eq!(zero.sigma2, 0.0);
        assert_eq!(zero.covariance.amax(), 0.0);
        assert!(sampling_distribution(&m, &[0.1, 0.2, 0.3], &DVector::zeros(3), &[0.5; 3]).is_err());
    }
}
