//! Likelihood, priors, the DREAM_ZS sampler and posterior summaries.

use std::path::Path;

use nalgebra::DVector;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ForwardMap;
use crate::optimizer::IntermediateDistribution;

/// Unnormalized log target density.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, z: &[f64]) -> f64;
}

/// Log density given by a closure.
pub struct FnDensity<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> LogDensity for FnDensity<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, z: &[f64]) -> f64 {
        (self.f)(z)
    }
}

/// `L(z) = (2πσ0²)^{-n_d/2} exp(-‖d - G(z)‖² / (2σ0²))`.
pub struct GaussianLikelihood<M> {
    pub data: DVector<f64>,
    pub sigma0: f64,
    pub model: M,
}

impl<M: ForwardMap> GaussianLikelihood<M> {
    pub fn new(data: DVector<f64>, sigma0: f64, model: M) -> Result<Self> {
        if !(sigma0 > 0.0) {
            return Err(Error::InvalidInput(format!("noise level must be positive, got {sigma0}")));
        }
        if model.n_obs() != data.len() {
            return Err(Error::DimensionMismatch { context: "likelihood data", expected: model.n_obs(), actual: data.len() });
        }
        Ok(GaussianLikelihood { data, sigma0, model })
    }

    /// Log likelihood of given predictions.
    pub fn log_likelihood_of(&self, pred: &DVector<f64>) -> f64 {
        gaussian_log_likelihood(&self.data, pred, self.sigma0)
    }

    pub fn log_likelihood(&self, z: &[f64]) -> f64 {
        match self.model.eval(z) {
            Ok(p) => self.log_likelihood_of(&p),
            Err(e) => {
                log::debug!("forward evaluation failed in likelihood: {e}");
                f64::NEG_INFINITY
            }
        }
    }
}

pub fn gaussian_log_likelihood(data: &DVector<f64>, pred: &DVector<f64>, sigma0: f64) -> f64 {
    let n = data.len() as f64;
    let misfit = (data - pred).norm_squared();
    if !misfit.is_finite() {
        log::debug!("non-finite forward output in likelihood");
        return f64::NEG_INFINITY;
    }
    -0.5 * n * (2.0 * std::f64::consts::PI * sigma0 * sigma0).ln() - misfit / (2.0 * sigma0 * sigma0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Prior {
    /// Product of uniform intervals.
    Uniform { lower: Vec<f64>, upper: Vec<f64> },
    /// Standard normal in every coordinate.
    Gaussian { dim: usize },
}

impl Prior {
    pub fn from_box(b: &IntermediateDistribution) -> Self {
        Prior::Uniform { lower: b.lower.clone(), upper: b.upper.clone() }
    }

    pub fn dim(&self) -> usize {
        match self {
            Prior::Uniform { lower, .. } => lower.len(),
            Prior::Gaussian { dim } => *dim,
        }
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        match self {
            Prior::Uniform { lower, upper } => {
                let mut lp = 0.0;
                for ((v, a), b) in z.iter().zip(lower).zip(upper) {
                    if !(v >= a && v <= b) {
                        return f64::NEG_INFINITY;
                    }
                    lp -= (b - a).ln();
                }
                lp
            }
            Prior::Gaussian { dim } => {
                -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * *dim as f64 * (2.0 * std::f64::consts::PI).ln()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Prior::Uniform { lower, upper } => lower.iter().zip(upper).map(|(a, b)| rng.random_range(*a..*b)).collect(),
            Prior::Gaussian { dim } => (0..*dim).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }
}

/// `log L + log π`; the likelihood is skipped outside the prior support.
pub struct Posterior<M> {
    pub likelihood: GaussianLikelihood<M>,
    pub prior: Prior,
}

impl<M: ForwardMap> Posterior<M> {
    pub fn log_posterior(&self, z: &[f64]) -> f64 {
        let lp = self.prior.log_density(z);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        lp + self.likelihood.log_likelihood(z)
    }
}

impl<M: ForwardMap> LogDensity for Posterior<M> {
    fn dim(&self) -> usize {
        self.prior.dim()
    }
    fn log_density(&self, z: &[f64]) -> f64 {
        self.log_posterior(z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DreamConfig {
    pub n_chains: usize,
    /// Number of difference pairs `β`.
    pub n_pairs: usize,
    /// Half-width of the multiplicative jitter `e`.
    pub h1: f64,
    /// Standard deviation of the additive jitter `ε`.
    pub h2: f64,
    pub n_cr: usize,
    /// Initial archive rows; `10 n_z` when absent.
    pub archive_init: Option<usize>,
    pub generations: usize,
    /// Every this-many generations the jump factor is 1.
    pub unit_jump_period: usize,
    /// Leading fraction of each chain discarded for statistics.
    pub burn_in: f64,
}

impl Default for DreamConfig {
    fn default() -> Self {
        DreamConfig {
            n_chains: 5,
            n_pairs: 2,
            h1: 0.01,
            h2: 1e-8,
            n_cr: 8,
            archive_init: None,
            generations: 10_000,
            unit_jump_period: 5,
            burn_in: 0.5,
        }
    }
}

impl DreamConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.n_chains < 3 {
            return Err(Error::Config(format!("DREAM needs at least 3 chains, got {}", self.n_chains)));
        }
        if !(self.h1.abs() < 1.0) || !(self.h2 >= 0.0) || self.n_pairs == 0 || self.n_cr == 0 || self.unit_jump_period == 0 {
            return Err(Error::Config("DREAM needs |h1| < 1, h2 >= 0, and positive pair/CR/period counts".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return Err(Error::Config(format!("burn-in fraction {} outside [0, 1)", self.burn_in)));
        }
        if self.archive_len0(dim) < 2 * self.n_pairs {
            return Err(Error::Config("initial archive smaller than 2 x pairs".into()));
        }
        Ok(())
    }

    pub fn archive_len0(&self, dim: usize) -> usize {
        self.archive_init.unwrap_or(10 * dim)
    }

    /// `2.38 / √(2 β n')`, or 1 on every `unit_jump_period`-th generation
    /// (1-based).
    pub fn jump(&self, generation: usize, n_selected: usize) -> f64 {
        if (generation + 1) % self.unit_jump_period == 0 {
            1.0
        } else {
            2.38 / ((2 * self.n_pairs * n_selected) as f64).sqrt()
        }
    }
}

/// Deterministic part of the proposal: selected coordinates move by
/// `(1 + e) g (Σ a_r1 − Σ a_r2) + ε`.
pub fn propose_with(
    z: &[f64],
    r1: &[&[f64]],
    r2: &[&[f64]],
    selected: &[bool],
    g: f64,
    e: &[f64],
    eps: &[f64],
) -> Vec<f64> {
    let mut q = z.to_vec();
    for k in 0..z.len() {
        if !selected[k] {
            continue;
        }
        let diff: f64 = r1.iter().map(|a| a[k]).sum::<f64>() - r2.iter().map(|a| a[k]).sum::<f64>();
        q[k] = z[k] + (1.0 + e[k]) * g * diff + eps[k];
    }
    q
}

/// Crossover mask: each coordinate updated with probability `CR`, at least
/// one forced.
pub fn crossover_mask<R: Rng + ?Sized>(dim: usize, cr: f64, rng: &mut R) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..dim).map(|_| rng.random::<f64>() > 1.0 - cr).collect();
    if !mask.iter().any(|&m| m) {
        mask[rng.random_range(0..dim)] = true;
    }
    mask
}

/// DREAM_ZS candidate for one chain against the archive.
pub fn dream_propose<R: Rng + ?Sized>(
    z: &[f64],
    archive: &[Vec<f64>],
    cfg: &DreamConfig,
    generation: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let dim = z.len();
    let b = cfg.n_pairs;
    if archive.len() < 2 * b {
        return Err(Error::InvalidInput(format!("archive has {} rows, need {}", archive.len(), 2 * b)));
    }
    let cr = rng.random_range(1..=cfg.n_cr) as f64 / cfg.n_cr as f64;
    let mask = crossover_mask(dim, cr, rng);
    let n_sel = mask.iter().filter(|&&m| m).count();
    let picks = sample_indices(rng, archive.len(), 2 * b).into_vec();
    let r1: Vec<&[f64]> = picks[..b].iter().map(|&i| archive[i].as_slice()).collect();
    let r2: Vec<&[f64]> = picks[b..].iter().map(|&i| archive[i].as_slice()).collect();
    let g = cfg.jump(generation, n_sel);
    let e: Vec<f64> = (0..dim).map(|_| if cfg.h1 > 0.0 { rng.random_range(-cfg.h1..cfg.h1) } else { 0.0 }).collect();
    let noise = Normal::new(0.0, cfg.h2).map_err(|e| Error::Config(e.to_string()))?;
    let eps: Vec<f64> = (0..dim).map(|_| noise.sample(rng)).collect();
    Ok(propose_with(z, &r1, &r2, &mask, g, &e, &eps))
}

/// Metropolis acceptance probability in log space.
pub fn acceptance_probability(current: f64, candidate: f64) -> f64 {
    if candidate == f64::NEG_INFINITY || candidate.is_nan() {
        return 0.0;
    }
    if current == f64::NEG_INFINITY {
        return 1.0;
    }
    (candidate - current).exp().min(1.0)
}

/// Accept or reject with a uniform draw `u`.
pub fn metropolis_step(current: f64, candidate: f64, u: f64) -> bool {
    if current == f64::NEG_INFINITY && candidate == f64::NEG_INFINITY {
        log::warn!("both current and candidate densities vanish; rejecting");
        return false;
    }
    u < acceptance_probability(current, candidate)
}

/// All stored states, generation-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DreamOutput {
    pub dim: usize,
    pub n_chains: usize,
    pub generations: usize,
    /// Row `g * n_chains + c`.
    pub states: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    pub accepted: Vec<bool>,
    pub acceptance_rates: Vec<f64>,
    /// Archive length after each generation.
    pub archive_lengths: Vec<usize>,
    pub seed: u64,
    pub burn_in: f64,
}

impl DreamOutput {
    pub fn state(&self, generation: usize, chain: usize) -> &[f64] {
        &self.states[generation * self.n_chains + chain]
    }

    pub fn chain(&self, c: usize) -> Vec<&[f64]> {
        (0..self.generations).map(|g| self.state(g, c)).collect()
    }

    pub fn first_retained(&self) -> usize {
        (self.generations as f64 * self.burn_in).floor() as usize
    }

    /// States after burn-in from every chain.
    pub fn retained(&self) -> Vec<Vec<f64>> {
        let start = self.first_retained();
        (start..self.generations)
            .flat_map(|g| (0..self.n_chains).map(move |c| (g, c)))
            .map(|(g, c)| self.state(g, c).to_vec())
            .collect()
    }

    pub fn mean_acceptance(&self) -> f64 {
        self.acceptance_rates.iter().sum::<f64>() / self.acceptance_rates.len() as f64
    }

    /// `generation,chain,z_1..z_n,log_posterior,accepted`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["generation".to_string(), "chain".to_string()];
        header.extend((1..=self.dim).map(|k| format!("z{k}")));
        header.push("log_posterior".into());
        header.push("accepted".into());
        w.write_record(&header)?;
        for g in 0..self.generations {
            for c in 0..self.n_chains {
                let i = g * self.n_chains + c;
                let mut rec = vec![g.to_string(), c.to_string()];
                rec.extend(self.states[i].iter().map(|v| format!("{v:e}")));
                rec.push(format!("{:e}", self.log_density[i]));
                rec.push(u8::from(self.accepted[i]).to_string());
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Inverse of [`write_csv`](Self::write_csv); acceptance rates are
    /// recounted and the archive history is not stored.
    pub fn read_csv(path: &Path, burn_in: f64) -> Result<Self> {
        let bad = |reason: String| Error::Malformed { path: path.display().to_string(), reason };
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        if headers.len() < 4 || &headers[0] != "generation" || &headers[1] != "chain" {
            return Err(bad("missing generation/chain columns".into()));
        }
        let dim = headers.len() - 4;
        let mut rows: Vec<(usize, usize, Vec<f64>, f64, bool)> = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != headers.len() {
                return Err(bad(format!("record {} has {} fields", line + 2, rec.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("record {}: {e}", line + 2)));
            let int = |s: &str| s.trim().parse::<usize>().map_err(|e| bad(format!("record {}: {e}", line + 2)));
            let z = (0..dim).map(|k| num(&rec[2 + k])).collect::<Result<Vec<_>>>()?;
            rows.push((int(&rec[0])?, int(&rec[1])?, z, num(&rec[2 + dim])?, int(&rec[3 + dim])? == 1));
        }
        if rows.is_empty() {
            return Err(bad("no samples".into()));
        }
        let n_chains = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
        let generations = rows.iter().map(|r| r.0).max().unwrap_or(0) + 1;
        if rows.len() != n_chains * generations {
            return Err(bad(format!("{} records do not fill {generations} generations of {n_chains} chains", rows.len())));
        }
        rows.sort_by_key(|r| (r.0, r.1));
        for (i, r) in rows.iter().enumerate() {
            if (r.0, r.1) != (i / n_chains, i % n_chains) {
                return Err(bad(format!("duplicate or missing record near generation {}", r.0)));
            }
        }
        let mut acc = vec![0usize; n_chains];
        for r in &rows {
            acc[r.1] += usize::from(r.4);
        }
        Ok(DreamOutput {
            dim,
            n_chains,
            generations,
            acceptance_rates: acc.iter().map(|&a| a as f64 / generations as f64).collect(),
            states: rows.iter().map(|r| r.2.clone()).collect(),
            log_density: rows.iter().map(|r| r.3).collect(),
            accepted: rows.iter().map(|r| r.4).collect(),
            archive_lengths: Vec::new(),
            seed: 0,
            burn_in,
        })
    }
}

/// `ChaCha8` generator on a numbered stream of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Run DREAM_ZS. The archive and initial population come from `init` on
/// stream 0; chain `i` draws from stream `i + 1`.
pub fn run_dream_zs<T: LogDensity + ?Sized>(target: &T, init: &Prior, cfg: &DreamConfig, seed: u64) -> Result<DreamOutput> {
    let dim = target.dim();
    if init.dim() != dim {
        return Err(Error::DimensionMismatch { context: "initial sampler", expected: dim, actual: init.dim() });
    }
    cfg.validate(dim)?;
    let nc = cfg.n_chains;
    let n0 = cfg.archive_len0(dim);
    let mut rng0 = stream_rng(seed, 0);
    let mut archive: Vec<Vec<f64>> = Vec::with_capacity(n0 + nc * cfg.generations);
    for _ in 0..n0 {
        archive.push(init.sample(&mut rng0));
    }
    let mut x: Vec<Vec<f64>> = (0..nc).map(|_| init.sample(&mut rng0)).collect();
    let mut lp: Vec<f64> = x.par_iter().map(|z| target.log_density(z)).collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..nc).map(|i| stream_rng(seed, i as u64 + 1)).collect();
    let mut states = Vec::with_capacity(nc * cfg.generations);
    let mut dens = Vec::with_capacity(nc * cfg.generations);
    let mut accepted = Vec::with_capacity(nc * cfg.generations);
    let mut n_acc = vec![0usize; nc];
    let mut archive_lengths = Vec::with_capacity(cfg.generations);
    for gen in 0..cfg.generations {
        let snapshot = &archive;
        let step: Vec<Result<(Vec<f64>, f64, bool)>> = x
            .par_iter()
            .zip(lp.par_iter())
            .zip(rngs.par_iter_mut())
            .map(|((z, &cur), rng)| {
                let q = dream_propose(z, snapshot, cfg, gen, rng)?;
                let cand = target.log_density(&q);
                let u: f64 = rng.random();
                if metropolis_step(cur, cand, u) {
                    Ok((q, cand, true))
                } else {
                    Ok((z.clone(), cur, false))
                }
            })
            .collect();
        for (c, res) in step.into_iter().enumerate() {
            let (z, l, a) = res?;
            x[c] = z;
            lp[c] = l;
            n_acc[c] += usize::from(a);
            accepted.push(a);
        }
        for c in 0..nc {
            states.push(x[c].clone());
            dens.push(lp[c]);
            archive.push(x[c].clone());
        }
        archive_lengths.push(archive.len());
    }
    let g = cfg.generations.max(1) as f64;
    Ok(DreamOutput {
        dim,
        n_chains: nc,
        generations: cfg.generations,
        states,
        log_density: dens,
        accepted,
        acceptance_rates: n_acc.iter().map(|&a| a as f64 / g).collect(),
        archive_lengths,
        seed,
        burn_in: cfg.burn_in,
    })
}

/// Nodewise mean and population standard deviation of pushed-forward
/// samples.
pub fn posterior_stats<F>(samples: &[Vec<f64>], push: F) -> Result<(DVector<f64>, DVector<f64>)>
where
    F: Fn(&[f64]) -> Result<DVector<f64>> + Sync,
{
    if samples.is_empty() {
        return Err(Error::TooFewSamples("no posterior samples".into()));
    }
    let fields: Vec<DVector<f64>> = samples.par_iter().map(|z| push(z)).collect::<Result<_>>()?;
    let n = fields.len() as f64;
    let mean = fields.iter().fold(DVector::zeros(fields[0].len()), |a, f| a + f) / n;
    let var = fields.iter().fold(DVector::zeros(mean.len()), |a: DVector<f64>, f| {
        let d = f - &mean;
        a + d.component_mul(&d)
    }) / n;
    Ok((mean, var.map(f64::sqrt)))
}

fn rank(x: f64) -> usize {
    (x - 1e-9).ceil().max(1.0) as usize
}

/// Order statistics at ranks `⌈Mα/2⌉` and `⌈M(1 − α/2)⌉`.
pub fn credible_interval(values: &[f64], alpha: f64) -> Result<(f64, f64)> {
    let m = values.len();
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidInput(format!("significance level {alpha} outside (0, 1]")));
    }
    if (m as f64) * alpha / 2.0 < 1.0 - 1e-9 {
        return Err(Error::TooFewSamples(format!("{m} samples for a {alpha} interval")));
    }
    let mut v = values.to_vec();
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("interval samples".into()));
    }
    v.sort_by(f64::total_cmp);
    let lo = rank(m as f64 * alpha / 2.0).min(m);
    let hi = rank(m as f64 * (1.0 - alpha / 2.0)).min(m);
    Ok((v[lo - 1], v[hi - 1]))
}

/// Pointwise credible and prediction bands over a response curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBand {
    pub credible_lower: Vec<f64>,
    pub credible_upper: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub mean: Vec<f64>,
}

/// `responses[s][p]` is the response of sample `s` at point `p`. Noise
/// `N(0, σ0²)` is added independently per sample and point.
pub fn prediction_interval<R: Rng + ?Sized>(
    responses: &[DVector<f64>],
    sigma0: f64,
    alpha: f64,
    rng: &mut R,
) -> Result<PredictionBand> {
    let m = responses.len();
    if m == 0 {
        return Err(Error::TooFewSamples("no responses".into()));
    }
    let np = responses[0].len();
    let noisy: Vec<DVector<f64>> = responses
        .iter()
        .map(|r| r.map(|v| v + sigma0 * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let mut band = PredictionBand {
        credible_lower: Vec::with_capacity(np),
        credible_upper: Vec::with_capacity(np),
        lower: Vec::with_capacity(np),
        upper: Vec::with_capacity(np),
        mean: Vec::with_capacity(np),
    };
    for p in 0..np {
        let col: Vec<f64> = responses.iter().map(|r| r[p]).collect();
        let (cl, cu) = credible_interval(&col, alpha)?;
        let ncol: Vec<f64> = noisy.iter().map(|r| r[p]).collect();
        let (pl, pu) = credible_interval(&ncol, alpha)?;
        band.credible_lower.push(cl);
        band.credible_upper.push(cu);
        band.lower.push(pl);
        band.upper.push(pu);
        band.mean.push(col.iter().sum::<f64>() / m as f64);
    }
    Ok(band)
}

/// `E[log L̃ − log L] + log E[L / L̃]` over samples from the surrogate
/// posterior.
pub fn kl_estimate(log_l_surrogate: &[f64], log_l_full: &[f64]) -> Result<f64> {
    if log_l_surrogate.len() != log_l_full.len() {
        return Err(Error::DimensionMismatch { context: "KL samples", expected: log_l_surrogate.len(), actual: log_l_full.len() });
    }
    let d: Vec<f64> = log_l_surrogate
        .iter()
        .zip(log_l_full)
        .filter(|(a, b)| a.is_finite() && b.is_finite())
        .map(|(a, b)| a - b)
        .collect();
    if d.is_empty() {
        return Err(Error::NonFinite("every likelihood pair in the KL estimate".into()));
    }
    let m = d.len() as f64;
    let first = d.iter().sum::<f64>() / m;
    let top = d.iter().map(|v| -v).fold(f64::NEG_INFINITY, f64::max);
    let lse = top + d.iter().map(|v| (-v - top).exp()).sum::<f64>().ln();
    Ok(first + lse - m.ln())
}

/// Per-run diagnostics echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DreamDiagnostics {
    pub seed: u64,
    pub acceptance_rates: Vec<f64>,
    pub mean_acceptance: f64,
    pub config: DreamConfig,
}
