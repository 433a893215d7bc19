mod common;

use std::f64::consts::PI;

use approx::assert_relative_eq;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use fracinv::bayes::{
    acceptance_probability, credible_interval, dream_propose, gaussian_log_likelihood, kl_estimate, metropolis_step,
    posterior_stats, prediction_interval, propose_with, run_dream_zs, DreamConfig, DreamOutput, FnDensity,
    GaussianLikelihood, LogDensity, Posterior, Prior,
};
use fracinv::forward::FnMap;
use fracinv::mesh::{ScalarField, StructuredMesh};
use fracinv::random_field::{build_kl, realize_field, CovarianceKernel};

fn const_map(v: DVector<f64>) -> FnMap<impl Fn(&[f64]) -> fracinv::Result<DVector<f64>> + Sync> {
    FnMap { n_params: 2, n_obs: v.len(), f: move |_: &[f64]| Ok(v.clone()) }
}

#[test]
fn likelihood_examples() {
    let d = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.0]);
    let s = 0.2;
    assert_relative_eq!(gaussian_log_likelihood(&d, &d, s), -2.0 * (2.0 * PI * s * s).ln(), epsilon = 1e-12);
    assert_relative_eq!(
        gaussian_log_likelihood(&d, &d, 2.0 * s) - gaussian_log_likelihood(&d, &d, s),
        -4.0 * 2f64.ln(),
        epsilon = 1e-12
    );
    let one = DVector::from_element(1, 1.0);
    assert_relative_eq!(
        gaussian_log_likelihood(&DVector::zeros(1), &one, 1.0),
        -0.5 * (2.0 * PI).ln() - 0.5,
        epsilon = 1e-15
    );
    assert_eq!(gaussian_log_likelihood(&one, &DVector::from_element(1, f64::NAN), 1.0), f64::NEG_INFINITY);
    assert!(GaussianLikelihood::new(d.clone(), 0.0, const_map(d.clone())).is_err());
    assert!(GaussianLikelihood::new(d.clone(), 1.0, const_map(DVector::zeros(3))).is_err());
}

#[test]
fn posterior_examples() {
    let d = DVector::from_vec(vec![1.0, 2.0, 0.5]);
    let lin = FnMap { n_params: 2, n_obs: 3, f: |z: &[f64]| Ok(DVector::from_vec(vec![z[0], z[1], z[0] * z[1]])) };
    let post = Posterior {
        likelihood: GaussianLikelihood::new(d.clone(), 0.3, lin).unwrap(),
        prior: Prior::Uniform { lower: vec![-2.0, -2.0], upper: vec![2.0, 3.0] },
    };
    assert_eq!(post.log_posterior(&[2.5, 0.0]), f64::NEG_INFINITY);
    assert_eq!(post.log_posterior(&[0.0, 3.01]), f64::NEG_INFINITY);
    let (a, b) = ([0.4, 1.2], [-1.1, 0.3]);
    let ll = |z: &[f64]| post.likelihood.log_likelihood(z);
    assert_relative_eq!(post.log_posterior(&a) - post.log_posterior(&b), ll(&a) - ll(&b), epsilon = 1e-12);
    assert_eq!(post.dim(), 2);

    let flat = Posterior {
        likelihood: GaussianLikelihood::new(d.clone(), 1.0, const_map(d.clone())).unwrap(),
        prior: Prior::Gaussian { dim: 2 },
    };
    let at0 = flat.log_posterior(&[0.0, 0.0]);
    for z in [[0.1, 0.0], [0.0, -0.2], [1.0, 1.0]] {
        assert!(flat.log_posterior(&z) < at0);
    }
}

#[test]
fn proposal_examples() {
    let cfg = DreamConfig::default();
    assert_relative_eq!(cfg.jump(0, 10), 0.3763, epsilon = 5e-5);
    assert_eq!(cfg.jump(4, 10), 1.0);
    let z = [0.5, -0.5, 2.0];
    let (r1, r2) = ([1.0, 2.0, 3.0], [0.0, 1.0, -1.0]);
    let q = propose_with(&z, &[&r1], &[&r2], &[true; 3], 0.7, &[0.0; 3], &[0.0; 3]);
    for k in 0..3 {
        assert_relative_eq!(q[k], z[k] + 0.7 * (r1[k] - r2[k]), epsilon = 1e-15);
    }
    let q = propose_with(&z, &[&r1], &[&r2], &[false, true, false], 0.7, &[0.0; 3], &[0.0; 3]);
    assert_eq!((q[0], q[2]), (z[0], z[2]));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let archive: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i) as f64 * 0.1, -(i as f64)]).collect();
    let tight = DreamConfig { n_cr: 1, n_pairs: 1, h1: 0.0, h2: 0.0, ..DreamConfig::default() };
    for g in 0..50 {
        let q = dream_propose(&z, &archive, &tight, g, &mut rng).unwrap();
        assert!(q.iter().zip(&z).all(|(a, b)| a != b));
    }
    assert!(dream_propose(&z, &archive[..3], &DreamConfig::default(), 0, &mut rng).is_err());
}

#[test]
fn forced_single_dimension_without_crossover() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let m = fracinv::bayes::crossover_mask(5, 0.0, &mut rng);
        assert_eq!(m.iter().filter(|&&b| b).count(), 1);
    }
    let z = vec![0.0; 4];
    let a = vec![1.0; 4];
    let b = vec![-1.0; 4];
    let q = propose_with(&z, &[&a], &[&b], &[false, false, true, false], 0.5, &[0.0; 4], &[0.0; 4]);
    assert_eq!(q.iter().zip(&z).filter(|(x, y)| x != y).count(), 1);
}

#[test]
fn metropolis_frequency() {
    assert_eq!(acceptance_probability(-1.0, -1.0), 1.0);
    assert_eq!(acceptance_probability(-1.0, f64::NEG_INFINITY), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 10_000;
    let lr = 0.25f64.ln();
    let acc = (0..n).filter(|_| metropolis_step(0.0, lr, rng.random())).count();
    assert!((acc as f64 / n as f64 - 0.25).abs() <= 0.02);
}

#[test]
fn two_state_detailed_balance() {
    let p = [0.3f64, 0.7];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut state = 0usize;
    let mut visits = [0usize; 2];
    let n = 100_000;
    for _ in 0..n {
        let cand = 1 - state;
        if metropolis_step(p[state].ln(), p[cand].ln(), rng.random()) {
            state = cand;
        }
        visits[state] += 1;
    }
    for s in 0..2 {
        assert!((visits[s] as f64 / n as f64 - p[s]).abs() <= 0.02 * p[s].max(0.5), "{visits:?}");
    }
}

fn retained_moments(out: &DreamOutput) -> (Vec<f64>, Vec<f64>) {
    let r = out.retained();
    let n = r.len() as f64;
    let mean: Vec<f64> = (0..out.dim).map(|k| r.iter().map(|z| z[k]).sum::<f64>() / n).collect();
    let var: Vec<f64> = (0..out.dim).map(|k| r.iter().map(|z| (z[k] - mean[k]).powi(2)).sum::<f64>() / n).collect();
    (mean, var)
}

#[test]
fn uniform_target_mean() {
    let prior = Prior::Uniform { lower: vec![-1.0, 2.0, 0.0], upper: vec![3.0, 2.5, 10.0] };
    let target = FnDensity { dim: 3, f: |z: &[f64]| prior.log_density(z) };
    let cfg = DreamConfig { generations: 4000, ..DreamConfig::default() };
    let out = run_dream_zs(&target, &prior, &cfg, 31).unwrap();
    let (mean, _) = retained_moments(&out);
    let n_eff = (out.retained().len() / 20) as f64;
    if let Prior::Uniform { lower, upper } = &prior {
        for k in 0..3 {
            let centre = 0.5 * (lower[k] + upper[k]);
            let se = (upper[k] - lower[k]) / 12f64.sqrt() / n_eff.sqrt();
            assert!((mean[k] - centre).abs() <= 3.0 * se, "dim {k}: {} vs {centre}", mean[k]);
        }
    }
}

#[test]
fn gaussian_target_moments() {
    let (mu, s) = ([1.0, -2.0], [[1.0, 0.6], [0.6, 2.0]]);
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let target = FnDensity {
        dim: 2,
        f: |z: &[f64]| {
            let (a, b) = (z[0] - mu[0], z[1] - mu[1]);
            -0.5 * (s[1][1] * a * a - 2.0 * s[0][1] * a * b + s[0][0] * b * b) / det
        },
    };
    let init = Prior::Uniform { lower: vec![-5.0, -8.0], upper: vec![6.0, 4.0] };
    let out = run_dream_zs(&target, &init, &DreamConfig::default(), 8).unwrap();
    let r = out.retained();
    let (mean, var) = retained_moments(&out);
    let n = r.len() as f64;
    let cov: f64 = r.iter().map(|z| (z[0] - mean[0]) * (z[1] - mean[1])).sum::<f64>() / n;
    assert!((mean[0] - mu[0]).abs() <= 0.1 * mu[0].abs());
    assert!((mean[1] - mu[1]).abs() <= 0.1 * mu[1].abs());
    assert!((var[0] / s[0][0] - 1.0).abs() <= 0.1);
    assert!((var[1] / s[1][1] - 1.0).abs() <= 0.1);
    assert!((cov / s[0][1] - 1.0).abs() <= 0.1);
}

#[test]
fn determinism_archive_and_csv() {
    let target = FnDensity { dim: 2, f: |z: &[f64]| -0.5 * (z[0] * z[0] + 4.0 * z[1] * z[1]) };
    let init = Prior::Gaussian { dim: 2 };
    let cfg = DreamConfig { generations: 300, ..DreamConfig::default() };
    let a = run_dream_zs(&target, &init, &cfg, 5).unwrap();
    let b = run_dream_zs(&target, &init, &cfg, 5).unwrap();
    assert_eq!(a, b);
    let c = run_dream_zs(&target, &init, &cfg, 6).unwrap();
    assert_ne!(a.states, c.states);
    for (g, len) in a.archive_lengths.iter().enumerate() {
        assert_eq!(*len, 20 + (g + 1) * 5);
    }
    for (z, lp) in a.states.iter().zip(&a.log_density) {
        assert_eq!(target.log_density(z), *lp);
    }
    assert_eq!(a.retained().len(), 150 * 5);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("chains.csv");
    a.write_csv(&p).unwrap();
    let back = DreamOutput::read_csv(&p, cfg.burn_in).unwrap();
    assert_eq!(back.states, a.states);
    assert_eq!(back.log_density, a.log_density);
    assert_eq!(back.accepted, a.accepted);
    assert!(run_dream_zs(&target, &init, &DreamConfig { n_chains: 2, ..cfg.clone() }, 5).is_err());
    assert!(run_dream_zs(&target, &Prior::Gaussian { dim: 3 }, &cfg, 5).is_err());
}

#[test]
fn posterior_field_statistics() {
    let mesh = StructuredMesh::unit_square(8, 8).unwrap();
    let b = build_kl(&mesh, CovarianceKernel::gaussian(0.3, 0.3, 1.0).unwrap(), 3, &ScalarField::constant(&mesh, 0.2)).unwrap();
    let push = |z: &[f64]| Ok(realize_field(&b, z)?.to_dvector());
    let z = vec![0.4, -1.0, 0.3];
    let (m, s) = posterior_stats(&[z.clone()], push).unwrap();
    assert_eq!(m, push(&z).unwrap());
    assert_eq!(s.amax(), 0.0);
    let (_, s) = posterior_stats(&[z.clone(), z.clone(), z.clone()], push).unwrap();
    assert!(s.amax() < 1e-15);
    let (m, s) = posterior_stats(&[vec![1.5, 0.0, 0.0], vec![-1.5, 0.0, 0.0]], push).unwrap();
    let expected = b.modes.column(0).abs() * (b.eigenvalues[0].sqrt() * 1.5);
    assert!((s - expected).amax() < 1e-12);
    assert!((m - &b.mean).amax() < 1e-12);
    assert!(posterior_stats(&[], push).is_err());
}

#[test]
fn credible_interval_examples() {
    let v: Vec<f64> = (1..=1000).rev().map(f64::from).collect();
    assert_eq!(credible_interval(&v, 0.05).unwrap(), (25.0, 975.0));
    assert_eq!(credible_interval(&[4.2; 100], 0.05).unwrap(), (4.2, 4.2));
    assert_eq!(credible_interval(&v, 1.0).unwrap(), (500.0, 500.0));
    assert!(credible_interval(&v[..39], 0.05).is_err());
    assert!(credible_interval(&v, 0.0).is_err());
}

#[test]
fn prediction_interval_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let responses: Vec<DVector<f64>> = (0..2000)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            DVector::from_vec(vec![a, 2.0 * a + 1.0, 0.1 * a])
        })
        .collect();
    let band = prediction_interval(&responses, 0.0, 0.05, &mut rng).unwrap();
    assert_eq!(band.lower, band.credible_lower);
    assert_eq!(band.upper, band.credible_upper);

    let band = prediction_interval(&responses, 0.5, 0.05, &mut rng).unwrap();
    for p in 0..3 {
        assert!(band.lower[p] <= band.credible_lower[p] && band.upper[p] >= band.credible_upper[p]);
    }

    let point = vec![DVector::from_vec(vec![3.0, -1.0]); 25_000];
    let sigma = 0.2;
    let band = prediction_interval(&point, sigma, 0.05, &mut rng).unwrap();
    let q = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.975) * sigma;
    for (p, c) in [3.0, -1.0].iter().enumerate() {
        assert_eq!((band.credible_lower[p], band.credible_upper[p]), (*c, *c));
        assert!(((band.upper[p] - c) / q - 1.0).abs() <= 0.05);
        assert!(((c - band.lower[p]) / q - 1.0).abs() <= 0.05);
    }
}

#[test]
fn kl_estimator_examples() {
    let l = [-0.3, -1.7, -2.2, -0.9];
    assert_eq!(kl_estimate(&l, &l).unwrap(), 0.0);
    let scaled: Vec<f64> = l.iter().map(|v| v + 2f64.ln()).collect();
    assert!(kl_estimate(&scaled, &l).unwrap().abs() < 1e-12);
    assert!(kl_estimate(&l, &l[..3]).is_err());
    assert!(kl_estimate(&[f64::NEG_INFINITY], &[0.0]).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let logpdf = |x: f64, m: f64| -0.5 * (2.0 * PI).ln() - 0.5 * (x - m).powi(2);
    let xs: Vec<f64> = (0..100_000).map(|_| rng.sample(StandardNormal)).collect();
    let sur: Vec<f64> = xs.iter().map(|&x| logpdf(x, 0.0)).collect();
    let full: Vec<f64> = xs.iter().map(|&x| logpdf(x, 0.5)).collect();
    let kl = kl_estimate(&sur, &full).unwrap();
    assert!((kl / 0.125 - 1.0).abs() <= 0.1, "{kl}");
}
