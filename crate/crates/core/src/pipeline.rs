//! Staged experiment driver with persisted, hash-tracked artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayes::{
    credible_interval, gaussian_log_likelihood, kl_estimate, posterior_stats, prediction_interval, run_dream_zs,
    stream_rng, DreamDiagnostics, DreamOutput, GaussianLikelihood, Posterior, Prior,
};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::forward::{relative_l2, FullModel, GammaParam, ParameterMap, ReducedModel};
use crate::gmsfem::build_space;
use crate::gpc::{fit_surrogate, multi_indices, Family, Surrogate};
use crate::io::{
    read_json, read_matrix_csv, read_triplets, read_vector_csv, sha256_file, write_field, write_json,
    write_matrix_csv, write_trajectory, write_triplets, write_vector_csv,
};
use crate::mesh::{ScalarField, StructuredMesh};
use crate::optimizer::{build_intermediate, lm_solve, sampling_distribution, IntermediateDistribution, OptimizationReport};
use crate::random_field::{CovarianceKernel, KlBasis};

/// Which distribution the surrogate and sampler are built on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Uniform box around the regularized estimate with a Legendre basis.
    Intermediate,
    /// Standard Gaussian prior with a Hermite basis.
    PriorBased,
}

impl Mode {
    pub fn from_flag(prior_based: bool) -> Self {
        if prior_based {
            Mode::PriorBased
        } else {
            Mode::Intermediate
        }
    }

    pub fn dir(&self) -> &'static str {
        match self {
            Mode::Intermediate => "intermediate",
            Mode::PriorBased => "prior",
        }
    }

    /// Inversion stages in execution order.
    pub fn stages(&self) -> &'static [&'static str] {
        match self {
            Mode::Intermediate => &["offline", "optimize", "surrogate", "sample", "stats"],
            Mode::PriorBased => &["offline", "surrogate", "sample", "stats"],
        }
    }

    fn key(&self, stage: &str) -> String {
        if stage == "offline" {
            stage.to_string()
        } else {
            format!("{}/{stage}", self.dir())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Relative path to SHA-256 of every file the stage wrote.
    pub files: BTreeMap<String, String>,
    pub seconds: f64,
    pub seeds: BTreeMap<String, u64>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    /// Path-to-hash map over all recorded stages.
    pub fn file_hashes(&self) -> BTreeMap<String, String> {
        self.stages.values().flat_map(|s| s.files.clone()).collect()
    }
}

pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.output_dir = PathBuf::new();
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&c)?)))
}

/// Data, truth and expansion bases written by the synthesis stage.
#[derive(Debug, Clone)]
pub struct SynthArtifacts {
    pub data: DVector<f64>,
    pub clean: DVector<f64>,
    pub z_true: Vec<f64>,
    pub gamma_true: f64,
    pub bases: Vec<KlBasis>,
}

#[derive(Debug, Clone)]
pub struct OfflineArtifacts {
    /// Projection with `M_i` modes per neighborhood.
    pub r_train: CsrMatrix<f64>,
    /// Projection with `M_c` modes per neighborhood.
    pub r_opt: CsrMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SpaceManifest {
    coarse_nx: usize,
    coarse_ny: usize,
    n_samples: usize,
    seed: u64,
    nrows: usize,
    m_train: usize,
    m_opt: usize,
    cols_train: usize,
    cols_opt: usize,
    counts_train: Vec<usize>,
    counts_opt: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct KlManifest {
    mesh: StructuredMesh,
    kernel: CovarianceKernel,
    n_modes: usize,
    energy_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TruthRecord {
    gamma: f64,
    z: Vec<f64>,
    noise_sigma: f64,
    n_obs: usize,
}

/// Equal-width histogram with masses summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lower: f64,
    pub upper: f64,
    pub mass: Vec<f64>,
}

fn hist_range(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    (((v - lo) / (hi - lo) * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if values.is_empty() || bins == 0 {
        return Err(Error::TooFewSamples("histogram needs samples and bins".into()));
    }
    let (lower, upper) = hist_range(values);
    let mut mass = vec![0.0; bins];
    let w = 1.0 / values.len() as f64;
    for &v in values {
        mass[bin_of(v, lower, upper, bins)] += w;
    }
    Ok(Histogram { lower, upper, mass })
}

/// Joint histogram; rows index `x` bins, columns `y` bins.
pub fn histogram2d(x: &[f64], y: &[f64], bins: usize) -> Result<(Histogram, Histogram, DMatrix<f64>)> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { context: "2-D histogram", expected: x.len(), actual: y.len() });
    }
    let hx = histogram(x, bins)?;
    let hy = histogram(y, bins)?;
    let mut m = DMatrix::zeros(bins, bins);
    let w = 1.0 / x.len() as f64;
    for (&a, &b) in x.iter().zip(y) {
        m[(bin_of(a, hx.lower, hx.upper, bins), bin_of(b, hy.lower, hy.upper, bins))] += w;
    }
    Ok((hx, hy, m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRow {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub lower: f64,
    pub upper: f64,
    pub truth: f64,
    pub inside: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub mode: Mode,
    pub n_retained: usize,
    pub acceptance_rates: Vec<f64>,
    pub mean_acceptance: f64,
    pub alpha: f64,
    /// Fraction of true KL coefficients inside their credible intervals.
    pub coverage: f64,
    pub posterior_field_error: f64,
    pub prior_field_error: f64,
    pub gamma_mean: Option<f64>,
    pub kl: Option<f64>,
    pub intervals: Vec<IntervalRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertSummary {
    pub mode: Mode,
    pub optimization: Option<OptimizationReport>,
    pub stats: StatsSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateTestReport {
    pub mode: Mode,
    pub n_test: usize,
    pub relative_rms: f64,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ForwardRecord {
    gamma: f64,
    z: Vec<f64>,
    dt: f64,
    t_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PredictionRow {
    index: usize,
    time: f64,
    sensor: usize,
    x: f64,
    y: f64,
    data: f64,
    mean: f64,
    credible_lower: f64,
    credible_upper: f64,
    lower: f64,
    upper: f64,
}

fn stage_err(stage: &str) -> impl FnOnce(Error) -> Error + '_ {
    move |e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage { stage: stage.to_string(), source: Box::new(e) },
    }
}

/// Driver bound to one output directory.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub manifest: RunManifest,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.output_dir.clone();
        fs::create_dir_all(&out)?;
        let hash = config_hash(&cfg)?;
        let path = out.join("manifest.json");
        let stages = if path.exists() { read_json::<RunManifest>(&path)?.stages } else { BTreeMap::new() };
        let manifest = RunManifest { config: cfg.clone(), config_hash: hash, stages };
        Ok(Pipeline { cfg, out, manifest })
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.out.join("manifest.json")
    }

    fn save_manifest(&self) -> Result<()> {
        write_json(&self.manifest_path(), &self.manifest)
    }

    fn stage_dir(&self, key: &str) -> PathBuf {
        self.out.join(key)
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.out).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    /// Run `f` as stage `key`, hashing and recording whatever it writes.
    fn run_stage<T>(
        &mut self,
        key: &str,
        seeds: &[(&str, u64)],
        f: impl FnOnce(&Self, &Path) -> Result<(T, Vec<PathBuf>)>,
    ) -> Result<T> {
        let dir = self.stage_dir(key);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| stage_err(key)(e.into()))?;
        }
        fs::create_dir_all(&dir).map_err(|e| stage_err(key)(e.into()))?;
        self.manifest.stages.remove(key);
        log::info!("stage {key}: running");
        let start = Instant::now();
        let (value, files) = f(self, &dir).map_err(stage_err(key))?;
        let mut hashes = BTreeMap::new();
        for p in &files {
            hashes.insert(self.rel(p), sha256_file(p).map_err(stage_err(key))?);
        }
        let record = StageRecord {
            files: hashes,
            seconds: start.elapsed().as_secs_f64(),
            seeds: seeds.iter().map(|(n, v)| (n.to_string(), *v)).collect(),
            config_hash: self.manifest.config_hash.clone(),
        };
        log::info!("stage {key}: done in {:.2}s", record.seconds);
        self.manifest.stages.insert(key.to_string(), record);
        self.save_manifest().map_err(stage_err(key))?;
        Ok(value)
    }

    /// Check that a stage's recorded files exist unchanged.
    pub fn verify_stage(&self, key: &str) -> Result<()> {
        let fail = |reason: String| Error::Stage { stage: key.to_string(), source: Box::new(Error::InvalidInput(reason)) };
        let rec = self.manifest.stages.get(key).ok_or_else(|| fail("no completed run recorded".into()))?;
        for (rel, hash) in &rec.files {
            let p = self.out.join(rel);
            let actual = sha256_file(&p).map_err(|_| fail(format!("artifact {rel} is missing")))?;
            if &actual != hash {
                return Err(fail(format!("artifact {rel} changed since it was written")));
            }
        }
        if rec.config_hash != self.manifest.config_hash {
            log::warn!("stage {key} was produced with a different configuration");
        }
        Ok(())
    }

    fn truth_z(&self) -> Vec<f64> {
        match &self.cfg.truth {
            Some(z) => z.clone(),
            None => {
                let mut rng = stream_rng(self.cfg.seeds.data, 0);
                (0..self.cfg.n_field_params()).map(|_| rng.sample(StandardNormal)).collect()
            }
        }
    }

    fn truth_map(&self, bases: Vec<KlBasis>) -> Result<ParameterMap> {
        self.cfg.parameter_map(bases, GammaParam::Known(self.cfg.gamma.value))
    }

    /// Generate noisy data on the fine grid.
    pub fn synth(&mut self) -> Result<SynthArtifacts> {
        let seeds = [("data", self.cfg.seeds.data)];
        self.run_stage("synth", &seeds, |p, dir| {
            let cfg = &p.cfg;
            let bases = cfg.build_bases()?;
            let z = p.truth_z();
            let model = FullModel::new(cfg.problem()?, p.truth_map(bases.clone())?, cfg.time.dt_data)?;
            let (traj, clean) = model.solve(&z)?;
            let mut rng = stream_rng(cfg.seeds.data, 1);
            let data = clean.map(|v| v + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal));
            let mesh = model.problem.mesh;
            let files: Vec<PathBuf> = [
                "data.csv",
                "observations_clean.csv",
                "truth_z.csv",
                "truth_log_k.csv",
                "truth_log_k.json",
                "u_final.csv",
                "u_final.json",
                "truth.json",
            ]
            .iter()
            .map(|n| dir.join(n))
            .collect();
            write_vector_csv(&files[0], data.as_slice())?;
            write_vector_csv(&files[1], clean.as_slice())?;
            write_vector_csv(&files[2], &z)?;
            let logk = model.params.log_fields(&z)?.swap_remove(0);
            write_field(&files[3], &mesh, &logk, "log_k")?;
            let last = traj.states.last().expect("trajectory has an initial state").as_slice().to_vec();
            write_field(&files[5], &mesh, &ScalarField::nodal(&mesh, last)?, "u")?;
            let truth = TruthRecord { gamma: cfg.gamma.value, z: z.clone(), noise_sigma: cfg.noise_sigma, n_obs: data.len() };
            write_json(&files[7], &truth)?;
            let mut files = files;
            for (j, b) in bases.iter().enumerate() {
                files.extend(save_kl(dir, j, b)?);
            }
            Ok((SynthArtifacts { data, clean, z_true: z, gamma_true: cfg.gamma.value, bases }, files))
        })
    }

    pub fn load_synth(&self) -> Result<SynthArtifacts> {
        self.verify_stage("synth")?;
        let dir = self.stage_dir("synth");
        let load = || -> Result<SynthArtifacts> {
            let truth: TruthRecord = read_json(&dir.join("truth.json"))?;
            let bases = (0..self.cfg.field.kernels.len()).map(|j| load_kl(&dir, j)).collect::<Result<Vec<_>>>()?;
            Ok(SynthArtifacts {
                data: DVector::from_vec(read_vector_csv(&dir.join("data.csv"))?),
                clean: DVector::from_vec(read_vector_csv(&dir.join("observations_clean.csv"))?),
                z_true: truth.z,
                gamma_true: truth.gamma,
                bases,
            })
        };
        load().map_err(stage_err("synth"))
    }

    fn offline(&mut self, synth: &SynthArtifacts) -> Result<OfflineArtifacts> {
        let seeds = [("snapshots", self.cfg.seeds.snapshots)];
        let before = self.manifest.stages.get("offline").map(|r| r.files.clone());
        let art = self.run_stage("offline", &seeds, |p, dir| {
            let cfg = &p.cfg;
            let map = p.truth_map(synth.bases.clone())?;
            let mut rng = stream_rng(cfg.seeds.snapshots, 0);
            let nz = cfg.n_field_params();
            let draws: Vec<Vec<f64>> =
                (0..cfg.gmsfem.n_samples).map(|_| (0..nz).map(|_| rng.sample(StandardNormal)).collect()).collect();
            let k_samples = draws.iter().map(|z| Ok(map.coefficients(z)?.k)).collect::<Result<Vec<_>>>()?;
            let k_mean = map.coefficients(&vec![0.0; nz])?.k;
            let coarse = cfg.coarse()?;
            let dofs = cfg.physics.boundary.dof_map(&coarse.fine);
            let g = &cfg.gmsfem;
            let train = build_space(&coarse, &k_samples, &k_mean, g.m_snap, g.m_i, g.selection, &dofs)?;
            let opt = train.truncated(g.m_c, &dofs)?;
            let f_train = dir.join("r_train.csv");
            let f_opt = dir.join("r_opt.csv");
            let f_man = dir.join("space.json");
            write_triplets(&f_train, &train.r)?;
            write_triplets(&f_opt, &opt.r)?;
            let man = SpaceManifest {
                coarse_nx: cfg.mesh.coarse_nx,
                coarse_ny: cfg.mesh.coarse_ny,
                n_samples: g.n_samples,
                seed: cfg.seeds.snapshots,
                nrows: train.r.nrows(),
                m_train: g.m_i,
                m_opt: g.m_c,
                cols_train: train.dim(),
                cols_opt: opt.dim(),
                counts_train: train.counts.clone(),
                counts_opt: opt.counts.clone(),
            };
            write_json(&f_man, &man)?;
            log::info!("multiscale spaces: {} (training) and {} (optimization) basis functions", train.dim(), opt.dim());
            Ok((OfflineArtifacts { r_train: train.r, r_opt: opt.r }, vec![f_train, f_opt, f_man]))
        })?;
        let after = self.manifest.stages.get("offline").map(|r| r.files.clone());
        if before.is_some() && before != after {
            self.manifest.stages.retain(|k, _| k == "synth" || k == "offline");
            self.save_manifest()?;
        }
        Ok(art)
    }

    pub fn load_offline(&self) -> Result<OfflineArtifacts> {
        self.verify_stage("offline")?;
        let dir = self.stage_dir("offline");
        let load = || -> Result<OfflineArtifacts> {
            let m: SpaceManifest = read_json(&dir.join("space.json"))?;
            Ok(OfflineArtifacts {
                r_train: read_triplets(&dir.join("r_train.csv"), m.nrows, m.cols_train)?,
                r_opt: read_triplets(&dir.join("r_opt.csv"), m.nrows, m.cols_opt)?,
            })
        };
        load().map_err(stage_err("offline"))
    }

    fn reduced(&self, synth: &SynthArtifacts, r: &CsrMatrix<f64>, mode: Mode) -> Result<ReducedModel> {
        let params = self.cfg.parameter_map(synth.bases.clone(), self.cfg.inversion_gamma(mode == Mode::PriorBased))?;
        ReducedModel::from_projection(self.cfg.problem()?, params, self.cfg.time.dt_solver, r.clone())
    }

    fn optimize(&mut self, synth: &SynthArtifacts, off: &OfflineArtifacts) -> Result<OptimizationReport> {
        let key = Mode::Intermediate.key("optimize");
        self.run_stage(&key, &[], |p, dir| {
            let cfg = &p.cfg;
            let model = p.reduced(synth, &off.r_opt, Mode::Intermediate)?;
            let lm_cfg = cfg.lm_config();
            let mut z0 = vec![0.0; cfg.n_params()];
            if cfg.gamma.infer {
                z0[0] = cfg.gamma.initial;
            }
            let lm = lm_solve(&model, &synth.data, &z0, &lm_cfg)?;
            log::info!("LM stopped ({:?}) with residual {:.4e}", lm.stop, lm.residual_norm);
            let sd = sampling_distribution(&model, &lm.z, &synth.data, &lm_cfg.steps(z0.len()))?;
            let bx = build_intermediate(&sd, &cfg.effective_overrides())?;
            let report = OptimizationReport::new(&lm, &sd, &bx);
            let f_rep = dir.join("report.json");
            let f_box = dir.join("box.csv");
            write_json(&f_rep, &report)?;
            let n = bx.dim();
            write_matrix_csv(&f_box, &DMatrix::from_fn(n, 2, |i, j| if j == 0 { bx.lower[i] } else { bx.upper[i] }))?;
            Ok((report, vec![f_rep, f_box]))
        })
    }

    pub fn load_box(&self) -> Result<IntermediateDistribution> {
        let key = Mode::Intermediate.key("optimize");
        self.verify_stage(&key)?;
        let load = || -> Result<IntermediateDistribution> {
            let r: OptimizationReport = read_json(&self.stage_dir(&key).join("report.json"))?;
            Ok(IntermediateDistribution {
                lower: r.lower,
                upper: r.upper,
                raw_half_width: r.raw_half_width,
                nu: r.nu,
                overridden: vec![false; r.z_ols.len()],
            })
        };
        load().map_err(stage_err(&key))
    }

    fn families(&self, mode: Mode) -> Result<Vec<Family>> {
        Ok(match mode {
            Mode::Intermediate => {
                let b = self.load_box()?;
                b.lower.iter().zip(&b.upper).map(|(&lower, &upper)| Family::Legendre { lower, upper }).collect()
            }
            Mode::PriorBased => vec![Family::Hermite; self.cfg.n_params()],
        })
    }

    fn prior(&self, mode: Mode) -> Result<Prior> {
        Ok(match mode {
            Mode::Intermediate => Prior::from_box(&self.load_box()?),
            Mode::PriorBased => Prior::Gaussian { dim: self.cfg.n_params() },
        })
    }

    fn surrogate(&mut self, synth: &SynthArtifacts, off: &OfflineArtifacts, mode: Mode) -> Result<Surrogate> {
        let key = mode.key("surrogate");
        let seeds = [("training", self.cfg.seeds.training)];
        self.run_stage(&key, &seeds, |p, dir| {
            let cfg = &p.cfg;
            let model = p.reduced(synth, &off.r_train, mode)?;
            let families = p.families(mode)?;
            let set = multi_indices(cfg.gpc.order, cfg.n_params())?;
            let q = (cfg.gpc.oversampling * set.len() as f64).ceil() as usize;
            log::info!("fitting {} gPC terms from {q} training solves", set.len());
            let s = fit_surrogate(&model, &families, &set, q, cfg.seeds.training, cfg.gpc.method)?;
            s.save(dir)?;
            Ok((s, vec![dir.join("surrogate_coeffs.csv"), dir.join("surrogate.json")]))
        })
    }

    pub fn load_surrogate(&self, mode: Mode) -> Result<Surrogate> {
        let key = mode.key("surrogate");
        self.verify_stage(&key)?;
        Surrogate::load(&self.stage_dir(&key)).map_err(stage_err(&key))
    }

    fn sample(&mut self, synth: &SynthArtifacts, surrogate: &Surrogate, mode: Mode) -> Result<DreamOutput> {
        let key = mode.key("sample");
        let seeds = [("chains", self.cfg.seeds.chains)];
        self.run_stage(&key, &seeds, |p, dir| {
            let cfg = &p.cfg;
            let prior = p.prior(mode)?;
            let likelihood = GaussianLikelihood::new(synth.data.clone(), cfg.noise_sigma, surrogate)?;
            let post = Posterior { likelihood, prior: prior.clone() };
            let out = run_dream_zs(&post, &prior, &cfg.dream, cfg.seeds.chains)?;
            log::info!("DREAM_ZS mean acceptance {:.2}%", 100.0 * out.mean_acceptance());
            let f_chain = dir.join("chains.csv");
            let f_diag = dir.join("dream.json");
            out.write_csv(&f_chain)?;
            let diag = DreamDiagnostics {
                seed: cfg.seeds.chains,
                acceptance_rates: out.acceptance_rates.clone(),
                mean_acceptance: out.mean_acceptance(),
                config: cfg.dream.clone(),
            };
            write_json(&f_diag, &diag)?;
            Ok((out, vec![f_chain, f_diag]))
        })
    }

    pub fn load_chains(&self, mode: Mode) -> Result<DreamOutput> {
        let key = mode.key("sample");
        self.verify_stage(&key)?;
        DreamOutput::read_csv(&self.stage_dir(&key).join("chains.csv"), self.cfg.dream.burn_in).map_err(stage_err(&key))
    }

    /// Summaries, intervals, histograms and field moments from stored chains.
    pub fn stats(&mut self, mode: Mode) -> Result<StatsSummary> {
        let synth = self.load_synth()?;
        let chains = self.load_chains(mode)?;
        let surrogate = self.load_surrogate(mode)?;
        let offline = if self.cfg.stats.kl_samples > 0 { Some(self.load_offline()?) } else { None };
        self.stats_from(&synth, &chains, &surrogate, offline.as_ref(), mode)
    }

    fn stats_from(
        &mut self,
        synth: &SynthArtifacts,
        chains: &DreamOutput,
        surrogate: &Surrogate,
        offline: Option<&OfflineArtifacts>,
        mode: Mode,
    ) -> Result<StatsSummary> {
        let key = mode.key("stats");
        self.run_stage(&key, &[("chains", self.cfg.seeds.chains)], |p, dir| {
            p.write_stats(dir, synth, chains, surrogate, offline, mode)
        })
    }

    fn write_stats(
        &self,
        dir: &Path,
        synth: &SynthArtifacts,
        chains: &DreamOutput,
        surrogate: &Surrogate,
        offline: Option<&OfflineArtifacts>,
        mode: Mode,
    ) -> Result<(StatsSummary, Vec<PathBuf>)> {
        let cfg = &self.cfg;
        let samples = chains.retained();
        if samples.is_empty() {
            return Err(Error::TooFewSamples("no samples after burn-in".into()));
        }
        let mut files = Vec::new();
        let gamma = cfg.inversion_gamma(mode == Mode::PriorBased);
        let slots = gamma.slots();
        let n = chains.dim;
        let physical: Vec<Vec<f64>> = samples
            .iter()
            .map(|z| {
                let mut v = z.clone();
                if slots == 1 {
                    v[0] = gamma.resolve(z);
                }
                v
            })
            .collect();
        let mut truth = Vec::with_capacity(n);
        if slots == 1 {
            truth.push(synth.gamma_true);
        }
        truth.extend(&synth.z_true);
        let names: Vec<String> = (0..n)
            .map(|k| if k < slots { "gamma".to_string() } else { format!("z{}", k - slots + 1) })
            .collect();

        let column = |k: usize| -> Vec<f64> { physical.iter().map(|v| v[k]).collect() };
        let bins = cfg.stats.bins;
        let mut ranges = BTreeMap::new();
        for k in 0..n {
            let h = histogram(&column(k), bins)?;
            let f = dir.join(format!("hist_{}.csv", names[k]));
            let mut w = csv::Writer::from_path(&f)?;
            w.write_record(["bin_lower", "bin_upper", "mass"])?;
            let width = (h.upper - h.lower) / bins as f64;
            for (b, m) in h.mass.iter().enumerate() {
                let lo = h.lower + b as f64 * width;
                w.write_record([format!("{lo:e}"), format!("{:e}", lo + width), format!("{m:e}")])?;
            }
            w.flush()?;
            files.push(f);
            ranges.insert(names[k].clone(), [h.lower, h.upper]);
        }
        for a in 0..n {
            for b in a + 1..n {
                let (_, _, m) = histogram2d(&column(a), &column(b), bins)?;
                let f = dir.join(format!("hist2d_{}_{}.csv", names[a], names[b]));
                write_matrix_csv(&f, &m)?;
                files.push(f);
            }
        }
        let f_ranges = dir.join("histogram_ranges.json");
        write_json(&f_ranges, &ranges)?;
        files.push(f_ranges);

        let alpha = cfg.stats.alpha;
        let mut rows = Vec::with_capacity(n);
        for k in 0..n {
            let c = column(k);
            let m = c.len() as f64;
            let mean = c.iter().sum::<f64>() / m;
            let std = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m).sqrt();
            let (lower, upper) = credible_interval(&c, alpha)?;
            rows.push(IntervalRow {
                name: names[k].clone(),
                mean,
                std,
                lower,
                upper,
                truth: truth[k],
                inside: truth[k] >= lower && truth[k] <= upper,
            });
        }
        let f_int = dir.join("intervals.csv");
        let mut w = csv::Writer::from_path(&f_int)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        files.push(f_int);
        let field_rows = &rows[slots..];
        let coverage = field_rows.iter().filter(|r| r.inside).count() as f64 / field_rows.len().max(1) as f64;

        let map = self.truth_map(synth.bases.clone())?;
        let mesh = map.mesh;
        let logk = |z: &[f64]| -> Result<DVector<f64>> { Ok(map.log_fields(z)?.swap_remove(0).to_dvector()) };
        let z_part: Vec<Vec<f64>> = samples.iter().map(|s| s[slots..].to_vec()).collect();
        let (mean_f, std_f) = posterior_stats(&z_part, logk)?;
        let truth_f = logk(&synth.z_true)?;
        let prior_f = logk(&vec![0.0; synth.z_true.len()])?;
        let as_field = |v: &DVector<f64>| ScalarField::nodal(&mesh, v.as_slice().to_vec());
        for (name, v) in [("field_mean", &mean_f), ("field_std", &std_f)] {
            let f = dir.join(format!("{name}.csv"));
            write_field(&f, &mesh, &as_field(v)?, name)?;
            files.push(f);
            files.push(dir.join(format!("{name}.json")));
        }

        let thin = |count: usize| -> Vec<&Vec<f64>> {
            let step = (samples.len() / count.max(1)).max(1);
            samples.iter().step_by(step).take(count).collect()
        };
        if cfg.stats.prediction_samples > 0 && cfg.noise_sigma > 0.0 {
            let draws = thin(cfg.stats.prediction_samples);
            let responses: Vec<DVector<f64>> = draws.par_iter().map(|z| surrogate.eval(z)).collect();
            let mut rng = stream_rng(cfg.seeds.chains, cfg.dream.n_chains as u64 + 1);
            let band = prediction_interval(&responses, cfg.noise_sigma, alpha, &mut rng)?;
            let problem = cfg.problem()?;
            let ns = problem.obs.sensors.len();
            let f = dir.join("prediction.csv");
            let mut w = csv::Writer::from_path(&f)?;
            for i in 0..band.mean.len() {
                let s = i % ns;
                w.serialize(PredictionRow {
                    index: i,
                    time: problem.obs.times[i / ns],
                    sensor: s,
                    x: problem.obs.sensors[s][0],
                    y: problem.obs.sensors[s][1],
                    data: synth.data[i],
                    mean: band.mean[i],
                    credible_lower: band.credible_lower[i],
                    credible_upper: band.credible_upper[i],
                    lower: band.lower[i],
                    upper: band.upper[i],
                })?;
            }
            w.flush()?;
            files.push(f);
        }

        let kl = match offline {
            Some(off) if cfg.stats.kl_samples > 0 && cfg.noise_sigma > 0.0 => {
                let model = self.reduced(synth, &off.r_train, mode)?;
                let draws = thin(cfg.stats.kl_samples);
                let pairs: Vec<(f64, f64)> = draws
                    .par_iter()
                    .map(|z| {
                        let lt = gaussian_log_likelihood(&synth.data, &surrogate.eval(z), cfg.noise_sigma);
                        let l = match crate::forward::ForwardMap::eval(&model, z) {
                            Ok(g) => gaussian_log_likelihood(&synth.data, &g, cfg.noise_sigma),
                            Err(_) => f64::NEG_INFINITY,
                        };
                        (lt, l)
                    })
                    .collect();
                let (lt, l): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
                Some(kl_estimate(&lt, &l)?)
            }
            _ => None,
        };

        let summary = StatsSummary {
            mode,
            n_retained: samples.len(),
            acceptance_rates: chains.acceptance_rates.clone(),
            mean_acceptance: chains.mean_acceptance(),
            alpha,
            coverage,
            posterior_field_error: relative_l2(&mean_f, &truth_f),
            prior_field_error: relative_l2(&prior_f, &truth_f),
            gamma_mean: (slots == 1).then(|| rows[0].mean),
            kl,
            intervals: rows,
        };
        let f = dir.join("summary.json");
        write_json(&f, &summary)?;
        files.push(f);
        Ok((summary, files))
    }

    /// Run the inversion stages of `mode`. With `stage_from`, earlier stages
    /// are loaded from disk and must be intact.
    pub fn invert(&mut self, mode: Mode, stage_from: Option<&str>) -> Result<InvertSummary> {
        let stages = mode.stages();
        let start = match stage_from {
            None => 0,
            Some(s) => stages.iter().position(|x| *x == s).ok_or_else(|| {
                Error::Config(format!("unknown stage '{s}' for {} mode (expected one of {})", mode.dir(), stages.join(", ")))
            })?,
        };
        let synth = self.load_synth()?;
        let runs = |name: &str| stages.iter().position(|x| *x == name).is_some_and(|i| i >= start);
        for s in stages[start..].iter().filter(|s| **s != "offline") {
            self.manifest.stages.remove(&mode.key(s));
        }
        let off = if runs("offline") { self.offline(&synth)? } else { self.load_offline()? };
        let optimization = match mode {
            Mode::Intermediate if runs("optimize") => Some(self.optimize(&synth, &off)?),
            Mode::Intermediate => {
                let key = mode.key("optimize");
                self.verify_stage(&key)?;
                Some(read_json(&self.stage_dir(&key).join("report.json")).map_err(stage_err(&key))?)
            }
            Mode::PriorBased => None,
        };
        let surrogate = if runs("surrogate") { self.surrogate(&synth, &off, mode)? } else { self.load_surrogate(mode)? };
        let chains = if runs("sample") { self.sample(&synth, &surrogate, mode)? } else { self.load_chains(mode)? };
        let stats = self.stats_from(&synth, &chains, &surrogate, Some(&off), mode)?;
        Ok(InvertSummary { mode, optimization, stats })
    }

    /// One fine-grid solve at `theta` (default: the configured truth).
    pub fn forward(&mut self, z: Option<Vec<f64>>) -> Result<DVector<f64>> {
        let z = z.unwrap_or_else(|| self.truth_z());
        if z.len() != self.cfg.n_field_params() {
            return Err(Error::Config(format!("forward needs {} coefficients, got {}", self.cfg.n_field_params(), z.len())));
        }
        self.run_stage("forward", &[], |p, dir| {
            let cfg = &p.cfg;
            let model = FullModel::new(cfg.problem()?, p.truth_map(cfg.build_bases()?)?, cfg.time.dt_data)?;
            let (traj, obs) = model.solve(&z)?;
            let mesh = model.problem.mesh;
            let f_obs = dir.join("observations.csv");
            write_vector_csv(&f_obs, obs.as_slice())?;
            let f_u = dir.join("u_final.csv");
            let last = traj.states.last().expect("trajectory has an initial state").as_slice().to_vec();
            write_field(&f_u, &mesh, &ScalarField::nodal(&mesh, last)?, "u")?;
            let f_rec = dir.join("forward.json");
            write_json(&f_rec, &ForwardRecord { gamma: cfg.gamma.value, z: z.clone(), dt: cfg.time.dt_data, t_end: cfg.time.t_end })?;
            let traj_dir = dir.join("trajectory");
            fs::create_dir_all(&traj_dir)?;
            let mut files = write_trajectory(&traj_dir, &mesh, &traj, cfg.gamma.value, cfg.time.dt_data)?;
            files.extend([f_obs, f_u, dir.join("u_final.json"), f_rec]);
            Ok((obs, files))
        })
    }

    /// Surrogate against the training model at fresh draws from the training
    /// distribution.
    pub fn surrogate_test(&mut self, mode: Mode) -> Result<SurrogateTestReport> {
        let synth = self.load_synth()?;
        let off = self.load_offline()?;
        let surrogate = self.load_surrogate(mode)?;
        let key = mode.key("surrogate_test");
        self.run_stage(&key, &[("training", self.cfg.seeds.training)], |p, dir| {
            let model = p.reduced(&synth, &off.r_train, mode)?;
            let mut rng = stream_rng(p.cfg.seeds.training, 1);
            let nodes: Vec<Vec<f64>> =
                (0..p.cfg.gpc.n_test).map(|_| surrogate.families.iter().map(|f| f.sample(&mut rng)).collect()).collect();
            let reference: Vec<DVector<f64>> = nodes
                .par_iter()
                .map(|z| crate::forward::ForwardMap::eval(&model, z))
                .collect::<Result<_>>()?;
            let max_rel = nodes
                .iter()
                .zip(&reference)
                .map(|(z, r)| relative_l2(&surrogate.eval(z), r))
                .fold(0.0, f64::max);
            let report = SurrogateTestReport {
                mode,
                n_test: nodes.len(),
                relative_rms: surrogate.relative_rms(&nodes, &reference),
                max_relative_error: max_rel,
            };
            let f = dir.join("surrogate_test.json");
            write_json(&f, &report)?;
            Ok((report, vec![f]))
        })
    }
}

/// Eigenvalue, mode and mean CSVs plus a JSON manifest for basis `j`.
pub fn save_kl(dir: &Path, j: usize, b: &KlBasis) -> Result<Vec<PathBuf>> {
    let f_eig = dir.join(format!("kl_{j}_eigenvalues.csv"));
    let f_mean = dir.join(format!("kl_{j}_mean.csv"));
    let f_man = dir.join(format!("kl_{j}.json"));
    write_vector_csv(&f_eig, &b.eigenvalues)?;
    let mut files = vec![f_eig];
    for i in 0..b.n_modes() {
        let f = dir.join(format!("kl_{j}_mode_{i}.csv"));
        write_matrix_csv(&f, &node_grid(&b.mesh, b.modes.column(i).as_slice()))?;
        files.push(f);
    }
    write_matrix_csv(&f_mean, &node_grid(&b.mesh, b.mean.as_slice()))?;
    let man = KlManifest { mesh: b.mesh, kernel: b.kernel, n_modes: b.n_modes(), energy_ratio: b.energy_ratio };
    write_json(&f_man, &man)?;
    files.extend([f_mean, f_man]);
    Ok(files)
}

fn node_grid(mesh: &StructuredMesh, v: &[f64]) -> DMatrix<f64> {
    let w = mesh.nx + 1;
    DMatrix::from_fn(mesh.ny + 1, w, |r, c| v[r * w + c])
}

fn grid_values(path: &Path, mesh: &StructuredMesh) -> Result<Vec<f64>> {
    let g = read_matrix_csv(path)?;
    if g.shape() != (mesh.ny + 1, mesh.nx + 1) {
        return Err(Error::Malformed { path: path.display().to_string(), reason: "grid shape does not match the mesh".into() });
    }
    Ok(g.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect())
}

pub fn load_kl(dir: &Path, j: usize) -> Result<KlBasis> {
    let f_man = dir.join(format!("kl_{j}.json"));
    let man: KlManifest = read_json(&f_man)?;
    let eigenvalues = read_vector_csv(&dir.join(format!("kl_{j}_eigenvalues.csv")))?;
    if eigenvalues.len() != man.n_modes {
        return Err(Error::Malformed { path: f_man.display().to_string(), reason: "eigenvalue count does not match the manifest".into() });
    }
    let nh = man.mesh.node_count();
    let mut modes = DMatrix::zeros(nh, man.n_modes);
    for i in 0..man.n_modes {
        let v = grid_values(&dir.join(format!("kl_{j}_mode_{i}.csv")), &man.mesh)?;
        modes.column_mut(i).copy_from_slice(&v);
    }
    let mean = DVector::from_vec(grid_values(&dir.join(format!("kl_{j}_mean.csv")), &man.mesh)?);
    Ok(KlBasis { mesh: man.mesh, kernel: man.kernel, eigenvalues, modes, mean, energy_ratio: man.energy_ratio })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_masses() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin()).collect();
        let h = histogram(&v, 17).unwrap();
        assert!((h.mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let p = histogram(&[2.5; 10], 7).unwrap();
        assert_eq!(p.mass.iter().filter(|&&m| m > 0.0).count(), 1);
        assert!((p.mass[3] - 1.0).abs() < 1e-12);
        let (_, _, m) = histogram2d(&v, &v, 5).unwrap();
        assert!((m.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_persistence_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = StructuredMesh::unit_square(6, 5).unwrap();
        let k = CovarianceKernel::gaussian(0.3, 0.2, 1.5).unwrap();
        let b = crate::random_field::build_kl(&mesh, k, 4, &ScalarField::constant(&mesh, 0.2)).unwrap();
        save_kl(dir.path(), 0, &b).unwrap();
        assert_eq!(load_kl(dir.path(), 0).unwrap(), b);
    }
}
