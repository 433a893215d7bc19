#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use fracinv::caputo::{gamma_fn, march, FractionalScheme, FullSystem, Load};
use fracinv::config::ExperimentConfig;
use fracinv::forward::{relative_l2, ForwardMap, FullModel, GammaParam, ReducedModel};
use fracinv::gmsfem::build_space;
use fracinv::mesh::{assemble_mass, assemble_stiffness, BoundaryCondition, ScalarField, StructuredMesh};
use fracinv::pipeline::{InvertSummary, Mode, Pipeline};

/// Maximum nodal error of the scheme against `u = t^p s(x, y)` with the
/// discrete forcing `B s D^γ(t^p) + K s t^p`, so only the time error remains.
pub fn manufactured_error(n_cells: usize, gamma: f64, t_end: f64, n_steps: usize, p: i32) -> f64 {
    let mesh = StructuredMesh::unit_square(n_cells, n_cells).unwrap();
    let k = ScalarField::from_fn(&mesh, |x, y| 1.0 + 0.5 * x * y).unwrap();
    let q = ScalarField::constant(&mesh, 1.0);
    let s = ScalarField::from_fn(&mesh, |x, y| {
        (std::f64::consts::FRAC_PI_2 * x).cos() * (std::f64::consts::FRAC_PI_2 * y).cos()
    })
    .unwrap()
    .to_dvector();
    let b = assemble_mass(&mesh, &q).unwrap();
    let kk = assemble_stiffness(&mesh, &k).unwrap();
    let pf = p as f64;
    let caputo_coeff = gamma_fn(pf + 1.0) / gamma_fn(pf + 1.0 - gamma);
    let load = Load::separable(&b * &s, Arc::new(move |t: f64| caputo_coeff * t.powf(pf - gamma)))
        .with_term(&kk * &s, Some(Arc::new(move |t: f64| t.powf(pf))));
    let scheme = FractionalScheme::new(gamma, t_end / n_steps as f64, n_steps).unwrap();
    let sys = FullSystem::new(&scheme, BoundaryCondition::mixed_corner().dof_map(&mesh), &b, &kk, &load).unwrap();
    let u0 = sys.initial_from_nodal(&DVector::zeros(mesh.node_count()));
    let traj = sys.to_nodal(&march(&scheme, &sys, u0).unwrap());
    traj.times
        .iter()
        .zip(&traj.states)
        .map(|(t, u)| (u - &s * t.powf(pf)).amax())
        .fold(0.0, f64::max)
}

/// Least-squares slope of `log2(error)` against the halving index.
pub fn fitted_order(errors: &[f64]) -> f64 {
    let n = errors.len() as f64;
    let ys: Vec<f64> = errors.iter().map(|e| -e.log2()).collect();
    let xm = (n - 1.0) / 2.0;
    let ym = ys.iter().sum::<f64>() / n;
    let num: f64 = ys.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum();
    let den: f64 = (0..errors.len()).map(|i| (i as f64 - xm).powi(2)).sum();
    num / den
}

/// Relative observation error of the reduced model against the fine model on
/// the default configuration for each number of modes per neighborhood.
pub fn desk_reduction_errors(modes: &[usize], seed: u64) -> Vec<f64> {
    let cfg = ExperimentConfig::default();
    let bases = cfg.build_bases().unwrap();
    let map = cfg.parameter_map(bases, GammaParam::Known(cfg.gamma.value)).unwrap();
    let problem = cfg.problem().unwrap();
    let nz = cfg.n_field_params();
    let mut rng = fracinv::bayes::stream_rng(seed, 0);
    let draws: Vec<Vec<f64>> =
        (0..cfg.gmsfem.n_samples).map(|_| (0..nz).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let k_samples: Vec<Vec<f64>> = draws.iter().map(|z| map.coefficients(z).unwrap().k).collect();
    let k_mean = map.coefficients(&vec![0.0; nz]).unwrap().k;
    let z: Vec<f64> = (0..nz).map(|_| rng.sample(StandardNormal)).collect();
    let coarse = cfg.coarse().unwrap();
    let dofs = cfg.physics.boundary.dof_map(&coarse.fine);
    let m_max = *modes.iter().max().unwrap();
    let g = &cfg.gmsfem;
    let space = build_space(&coarse, &k_samples, &k_mean, g.m_snap, m_max, g.selection, &dofs).unwrap();
    let dt = cfg.time.dt_solver;
    let fine = FullModel::new(problem.clone(), map.clone(), dt).unwrap().eval(&z).unwrap();
    modes
        .iter()
        .map(|&m| {
            let sub = space.truncated(m, &dofs).unwrap();
            let reduced = ReducedModel::from_projection(problem.clone(), map.clone(), dt, sub.r).unwrap();
            relative_l2(&reduced.eval(&z).unwrap(), &fine)
        })
        .collect()
}

/// Scaled-down configuration for fast end-to-end runs.
pub fn small_config(out: &Path) -> ExperimentConfig {
    let mut cfg = desk_config(out);
    cfg.mesh.fine_nx = 16;
    cfg.mesh.fine_ny = 16;
    cfg.time.dt_data = 0.005;
    cfg.time.dt_solver = 0.01;
    cfg.time.t_end = 0.1;
    cfg.observations.sensors_per_axis = 3;
    cfg.observations.times = vec![0.04, 0.07, 0.1];
    cfg.field.kernels[0].n_modes = 3;
    cfg.gmsfem.n_samples = 3;
    cfg.gmsfem.m_snap = 6;
    cfg.gmsfem.m_c = 3;
    cfg.gmsfem.m_i = 5;
    cfg.gpc.order = 2;
    cfg.gpc.n_test = 10;
    cfg.dream.generations = 200;
    cfg.stats.prediction_samples = 200;
    cfg
}

pub fn desk_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig { output_dir: out.to_path_buf(), ..ExperimentConfig::default() }
}

/// Synthesize data, run the intermediate inversion, then the prior-based
/// comparison that reuses the offline stage.
pub fn desk_runs(out: &Path) -> (InvertSummary, InvertSummary) {
    let mut p = Pipeline::new(desk_config(out)).unwrap();
    p.synth().unwrap();
    let inter = p.invert(Mode::Intermediate, None).unwrap();
    let prior = p.invert(Mode::PriorBased, Some("surrogate")).unwrap();
    (inter, prior)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn std_pop(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}
