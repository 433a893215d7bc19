//! Experiment configuration and its validation.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bayes::DreamConfig;
use crate::error::{Error, Result};
use crate::forward::{FieldParam, GammaParam, ParameterMap, Problem};
use crate::gmsfem::{CoarseGrid, ModeSelection};
use crate::gpc::FitMethod;
use crate::mesh::{BoundaryCondition, Domain, ObservationOperator, ScalarField, StructuredMesh};
use crate::optimizer::{BoxOverride, LmConfig};
use crate::random_field::{
    build_kl, CorrelatedFieldSet, CorrelationMode, CovarianceKernel, ExponentForm, KernelFamily, KlBasis,
    MixedFieldSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    pub fine_nx: usize,
    pub fine_ny: usize,
    pub coarse_nx: usize,
    pub coarse_ny: usize,
    pub domain: Domain,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig { fine_nx: 40, fine_ny: 40, coarse_nx: 4, coarse_ny: 4, domain: Domain { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    pub t_end: f64,
    /// Step used to generate data.
    pub dt_data: f64,
    /// Step used by every inversion model.
    pub dt_solver: f64,
}

impl Default for TimeConfig {
    fn default() -> Self {
        TimeConfig { t_end: 0.15, dt_data: 0.001, dt_solver: 0.002 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GammaConfig {
    /// True order used for data and, when not inferred, for inversion.
    pub value: f64,
    pub infer: bool,
    /// Initial guess for the optimizer when inferred.
    pub initial: f64,
    /// Difference step for the order in the Jacobian.
    pub fd_step: f64,
}

impl Default for GammaConfig {
    fn default() -> Self {
        GammaConfig { value: 0.5, infer: false, initial: 0.5, fd_step: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub lx: f64,
    pub ly: f64,
    pub sigma2: f64,
    pub exponent_form: ExponentForm,
    /// Constant mean of the log-field.
    pub mean: f64,
    pub n_modes: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            family: KernelFamily::Gaussian,
            lx: 0.2,
            ly: 0.4,
            sigma2: 1.0,
            exponent_form: ExponentForm::default(),
            mean: 0.0,
            n_modes: 10,
        }
    }
}

impl KernelConfig {
    pub fn kernel(&self) -> Result<CovarianceKernel> {
        let mut k = CovarianceKernel::new(self.family, self.lx, self.ly, self.sigma2)?;
        k.exponent_form = self.exponent_form;
        Ok(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    /// `log k` from one expansion.
    #[default]
    Single,
    /// Correlated `(log k, log q)`.
    Coupled,
    /// `log k` stitched from correlated subfields; the second covers a
    /// horizontal middle layer.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub kind: FieldKind,
    pub kernels: Vec<KernelConfig>,
    /// Correlation between the first two fields.
    pub rho: f64,
    pub correlation_mode: CorrelationMode,
    /// `[y_lo, y_hi]` of the middle layer for mixed fields.
    pub layer: [f64; 2],
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            kind: FieldKind::Single,
            kernels: vec![KernelConfig::default()],
            rho: 0.0,
            correlation_mode: CorrelationMode::default(),
            layer: [1.0 / 3.0, 2.0 / 3.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationConfig {
    /// Sensors per axis on the rectangle below.
    pub sensors_per_axis: usize,
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
    pub times: Vec<f64>,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        ObservationConfig {
            sensors_per_axis: 5,
            x0: 0.0,
            x1: 0.8,
            y0: 0.0,
            y1: 0.8,
            times: (2..=11).map(|i| i as f64 / 100.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsConfig {
    pub boundary: BoundaryCondition,
    pub source: f64,
    pub q: f64,
    pub initial: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        PhysicsConfig { boundary: BoundaryCondition::mixed_corner(), source: 10.0, q: 1.0, initial: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmsfemConfig {
    /// Coefficient samples `N_μ` for snapshots.
    pub n_samples: usize,
    /// Local eigenfunctions per sample `M_snap`.
    pub m_snap: usize,
    /// Modes per neighborhood for the optimizer `M_c`.
    pub m_c: usize,
    /// Modes per neighborhood for surrogate training `M_i`.
    pub m_i: usize,
    pub selection: ModeSelection,
}

impl Default for GmsfemConfig {
    fn default() -> Self {
        GmsfemConfig { n_samples: 10, m_snap: 20, m_c: 5, m_i: 10, selection: ModeSelection::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpcConfig {
    pub order: usize,
    /// `Q = ⌈oversampling · P⌉`.
    pub oversampling: f64,
    pub method: FitMethod,
    /// Held-out points for `surrogate-test`.
    pub n_test: usize,
}

impl Default for GpcConfig {
    fn default() -> Self {
        GpcConfig { order: 3, oversampling: 2.0, method: FitMethod::default(), n_test: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub alpha: f64,
    pub bins: usize,
    /// Posterior draws pushed through the surrogate for prediction bands.
    pub prediction_samples: usize,
    /// Posterior draws used for the KL estimate; 0 disables it.
    pub kl_samples: usize,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig { alpha: 0.05, bins: 30, prediction_samples: 2000, kl_samples: 0 }
    }
}

/// Named seeds; each drives an independent stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub snapshots: u64,
    pub training: u64,
    pub chains: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { data: 1, snapshots: 2, training: 3, chains: 4 }
    }
}

impl Seeds {
    pub fn set(&mut self, name: &str, value: u64) -> Result<()> {
        match name {
            "data" => self.data = value,
            "snapshots" => self.snapshots = value,
            "training" => self.training = value,
            "chains" => self.chains = value,
            other => {
                return Err(Error::Config(format!("unknown seed '{other}' (expected data, snapshots, training or chains)")))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mesh: MeshConfig,
    pub time: TimeConfig,
    pub gamma: GammaConfig,
    pub noise_sigma: f64,
    pub physics: PhysicsConfig,
    pub field: FieldConfig,
    pub observations: ObservationConfig,
    pub gmsfem: GmsfemConfig,
    pub lm: LmConfig,
    pub box_overrides: Vec<BoxOverride>,
    pub gpc: GpcConfig,
    pub dream: DreamConfig,
    pub stats: StatsConfig,
    pub seeds: Seeds,
    /// True KL coefficients; drawn from `N(0, I)` when absent.
    pub truth: Option<Vec<f64>>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mesh: MeshConfig::default(),
            time: TimeConfig::default(),
            gamma: GammaConfig::default(),
            noise_sigma: 0.01,
            physics: PhysicsConfig::default(),
            field: FieldConfig::default(),
            observations: ObservationConfig::default(),
            gmsfem: GmsfemConfig::default(),
            lm: LmConfig::default(),
            box_overrides: Vec::new(),
            gpc: GpcConfig::default(),
            dream: DreamConfig::default(),
            stats: StatsConfig::default(),
            seeds: Seeds::default(),
            truth: None,
            output_dir: PathBuf::from("run"),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

fn nonzero(name: &str, v: usize) -> Result<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive")))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.mesh;
        for (n, v) in [("mesh.fine_nx", m.fine_nx), ("mesh.fine_ny", m.fine_ny), ("mesh.coarse_nx", m.coarse_nx), ("mesh.coarse_ny", m.coarse_ny)] {
            nonzero(n, v)?;
        }
        if m.fine_nx % m.coarse_nx != 0 || m.fine_ny % m.coarse_ny != 0 {
            return Err(Error::Config("coarse grid must nest in the fine grid".into()));
        }
        positive("time.t_end", self.time.t_end)?;
        positive("time.dt_data", self.time.dt_data)?;
        positive("time.dt_solver", self.time.dt_solver)?;
        if !(self.gamma.value > 0.0 && self.gamma.value < 1.0) {
            return Err(Error::Config(format!("gamma.value {} outside (0, 1)", self.gamma.value)));
        }
        if self.gamma.infer {
            if !(self.gamma.initial > 0.0 && self.gamma.initial < 1.0) {
                return Err(Error::Config(format!("gamma.initial {} outside (0, 1)", self.gamma.initial)));
            }
            positive("gamma.fd_step", self.gamma.fd_step)?;
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be non-negative, got {}", self.noise_sigma)));
        }
        positive("physics.q", self.physics.q)?;
        let f = &self.field;
        let need = match f.kind {
            FieldKind::Single => 1,
            FieldKind::Coupled | FieldKind::Mixed => 2,
        };
        if f.kernels.len() != need {
            return Err(Error::Config(format!("{:?} field needs {need} kernels, got {}", f.kind, f.kernels.len())));
        }
        for k in &f.kernels {
            nonzero("field.kernels.n_modes", k.n_modes)?;
            k.kernel().map_err(|e| Error::Config(e.to_string()))?;
        }
        if !(f.rho > -1.0 && f.rho < 1.0) {
            return Err(Error::Config(format!("field.rho {} outside (-1, 1)", f.rho)));
        }
        if f.kind == FieldKind::Mixed && !(f.layer[0] < f.layer[1]) {
            return Err(Error::Config("field.layer must satisfy y_lo < y_hi".into()));
        }
        let o = &self.observations;
        nonzero("observations.sensors_per_axis", o.sensors_per_axis)?;
        if o.times.is_empty() {
            return Err(Error::Config("observations.times is empty".into()));
        }
        let g = &self.gmsfem;
        for (n, v) in [("gmsfem.n_samples", g.n_samples), ("gmsfem.m_snap", g.m_snap), ("gmsfem.m_c", g.m_c), ("gmsfem.m_i", g.m_i)] {
            nonzero(n, v)?;
        }
        if g.m_c > g.m_i {
            return Err(Error::Config(format!("gmsfem.m_c ({}) exceeds gmsfem.m_i ({})", g.m_c, g.m_i)));
        }
        self.lm.validate().map_err(|e| Error::Config(e.to_string()))?;
        nonzero("gpc.order", self.gpc.order)?;
        if !(self.gpc.oversampling >= 1.0) {
            return Err(Error::Config(format!("gpc.oversampling must be at least 1, got {}", self.gpc.oversampling)));
        }
        self.dream.validate(self.n_params())?;
        if !(self.stats.alpha > 0.0 && self.stats.alpha < 1.0) {
            return Err(Error::Config(format!("stats.alpha {} outside (0, 1)", self.stats.alpha)));
        }
        nonzero("stats.bins", self.stats.bins)?;
        if let Some(t) = &self.truth {
            if t.len() != self.n_field_params() {
                return Err(Error::Config(format!("truth has {} entries, expected {}", t.len(), self.n_field_params())));
            }
        }
        for o in &self.box_overrides {
            if o.index >= self.n_params() || !(o.lower < o.upper) {
                return Err(Error::Config(format!("bad box override for coordinate {}", o.index)));
            }
        }
        Ok(())
    }

    pub fn n_field_params(&self) -> usize {
        self.field.kernels.iter().map(|k| k.n_modes).sum()
    }

    /// Inverted parameters: the order (when inferred) then KL coefficients.
    pub fn n_params(&self) -> usize {
        usize::from(self.gamma.infer) + self.n_field_params()
    }

    pub fn mesh(&self) -> Result<StructuredMesh> {
        StructuredMesh::new(self.mesh.fine_nx, self.mesh.fine_ny, self.mesh.domain)
    }

    pub fn coarse(&self) -> Result<CoarseGrid> {
        CoarseGrid::new(self.mesh()?, self.mesh.coarse_nx, self.mesh.coarse_ny)
    }

    pub fn problem(&self) -> Result<Problem> {
        let mesh = self.mesh()?;
        let o = &self.observations;
        let sensors = ObservationOperator::grid_sensors(o.sensors_per_axis, o.x0, o.x1, o.y0, o.y1);
        Ok(Problem {
            mesh,
            bc: self.physics.boundary,
            source: ScalarField::constant(&mesh, self.physics.source),
            initial: ScalarField::constant(&mesh, self.physics.initial),
            t_end: self.time.t_end,
            obs: ObservationOperator::new(sensors, o.times.clone()),
        })
    }

    /// One KL basis per configured kernel.
    pub fn build_bases(&self) -> Result<Vec<KlBasis>> {
        let mesh = self.mesh()?;
        self.field
            .kernels
            .iter()
            .map(|k| build_kl(&mesh, k.kernel()?, k.n_modes, &ScalarField::constant(&mesh, k.mean)))
            .collect()
    }

    pub fn field_param(&self, bases: Vec<KlBasis>) -> Result<FieldParam> {
        let mesh = self.mesh()?;
        let pair = |bases: Vec<KlBasis>| -> Result<CorrelatedFieldSet> {
            let rho = DMatrix::from_row_slice(2, 2, &[1.0, self.field.rho, self.field.rho, 1.0]);
            CorrelatedFieldSet::new(bases, rho, self.field.correlation_mode)
        };
        Ok(match self.field.kind {
            FieldKind::Single => {
                FieldParam::Single(bases.into_iter().next().ok_or_else(|| Error::Config("no field kernel".into()))?)
            }
            FieldKind::Coupled => FieldParam::Coupled(pair(bases)?),
            FieldKind::Mixed => {
                let spec = MixedFieldSpec::middle_layer(&mesh, self.field.layer[0], self.field.layer[1])?;
                FieldParam::Mixed(pair(bases)?, spec)
            }
        })
    }

    pub fn parameter_map(&self, bases: Vec<KlBasis>, gamma: GammaParam) -> Result<ParameterMap> {
        let mesh = self.mesh()?;
        Ok(ParameterMap {
            mesh,
            gamma,
            field: self.field_param(bases)?,
            q_fixed: ScalarField::constant(&mesh, self.physics.q),
        })
    }

    /// Parameterization of the order during inversion.
    pub fn inversion_gamma(&self, prior_based: bool) -> GammaParam {
        match (self.gamma.infer, prior_based) {
            (false, _) => GammaParam::Known(self.gamma.value),
            (true, false) => GammaParam::Direct,
            (true, true) => GammaParam::Arctan,
        }
    }

    /// Optimizer settings with the order's difference step applied.
    pub fn lm_config(&self) -> LmConfig {
        let mut lm = self.lm.clone();
        if self.gamma.infer {
            lm.h_first = Some(self.gamma.fd_step);
        }
        lm
    }

    /// Box overrides, with the order confined to `[0, 1]` when inferred and
    /// not overridden explicitly.
    pub fn effective_overrides(&self) -> Vec<BoxOverride> {
        let mut o = self.box_overrides.clone();
        if self.gamma.infer && !o.iter().any(|b| b.index == 0) {
            o.push(BoxOverride { index: 0, lower: 0.0, upper: 1.0 });
        }
        o
    }

    /// Apply `NAME=INT` seed overrides.
    pub fn apply_seed_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for s in overrides {
            let (name, value) =
                s.split_once('=').ok_or_else(|| Error::Config(format!("seed override '{s}' is not NAME=INT")))?;
            let v: u64 =
                value.trim().parse().map_err(|e| Error::Config(format!("seed override '{s}': {e}")))?;
            self.seeds.set(name.trim(), v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.n_params(), 10);
        assert_eq!(c.observations.times.len(), 10);
        assert!((c.observations.times[9] - 0.11).abs() < 1e-15);
    }

    #[test]
    fn json_roundtrip_and_partial_documents() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), c);
        let p: ExperimentConfig = serde_json::from_str(r#"{"noise_sigma": 0.0, "mesh": {"fine_nx": 20}}"#).unwrap();
        assert_eq!(p.noise_sigma, 0.0);
        assert_eq!(p.mesh.fine_nx, 20);
        assert_eq!(p.mesh.fine_ny, 40);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"noise": 0.0}"#).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ExperimentConfig::default();
        c.mesh.fine_nx = 42;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.gmsfem.m_c = 11;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.field.kind = FieldKind::Coupled;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.truth = Some(vec![0.0; 3]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn seed_overrides() {
        let mut c = ExperimentConfig::default();
        c.apply_seed_overrides(&["chains=99".into(), "data = 7".into()]).unwrap();
        assert_eq!(c.seeds.chains, 99);
        assert_eq!(c.seeds.data, 7);
        assert!(c.apply_seed_overrides(&["bogus=1".into()]).is_err());
        assert!(c.apply_seed_overrides(&["chains=x".into()]).is_err());
    }

    #[test]
    fn gamma_inference_settings() {
        let mut c = ExperimentConfig::default();
        c.gamma.infer = true;
        assert_eq!(c.n_params(), 11);
        assert_eq!(c.lm_config().steps(3), vec![0.1, 0.5, 0.5]);
        assert_eq!(c.effective_overrides(), vec![BoxOverride { index: 0, lower: 0.0, upper: 1.0 }]);
        assert_eq!(c.inversion_gamma(true), GammaParam::Arctan);
    }
}
