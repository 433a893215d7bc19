use approx::assert_relative_eq;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use fracinv::mesh::{assemble_mass, ScalarField, StructuredMesh};
use fracinv::pipeline::{load_kl, save_kl};
use fracinv::random_field::{
    build_kl, build_kl_with, realize_correlated, realize_field, realize_mixed, CorrelatedFieldSet, CorrelationMode,
    CovarianceKernel, ExponentForm, KlBasis, KlSolver, MixedFieldSpec,
};

fn basis(nx: usize, kernel: CovarianceKernel, n: usize) -> KlBasis {
    let mesh = StructuredMesh::unit_square(nx, nx).unwrap();
    build_kl(&mesh, kernel, n, &ScalarField::constant(&mesh, 0.0)).unwrap()
}

#[test]
fn variance_scaling_doubles_eigenvalues() {
    let a = basis(10, CovarianceKernel::gaussian(0.3, 0.2, 1.0).unwrap(), 6);
    let b = basis(10, CovarianceKernel::gaussian(0.3, 0.2, 2.0).unwrap(), 6);
    for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
        assert_relative_eq!(2.0 * x, *y, max_relative = 1e-12);
    }
    assert!((a.modes - b.modes).amax() < 1e-9);
}

#[test]
fn separable_route_matches_dense_eigensolve() {
    let mesh = StructuredMesh::unit_square(8, 6).unwrap();
    let mean = ScalarField::constant(&mesh, 0.0);
    for kernel in [
        CovarianceKernel::gaussian(0.25, 0.5, 1.3).unwrap(),
        CovarianceKernel::exponential(0.5, 0.6, 0.7).unwrap(),
    ] {
        let s = build_kl_with(&mesh, kernel, 8, &mean, KlSolver::Separable).unwrap();
        let d = build_kl_with(&mesh, kernel, 8, &mean, KlSolver::Dense).unwrap();
        for (a, b) in s.eigenvalues.iter().zip(&d.eigenvalues) {
            assert_relative_eq!(a, b, max_relative = 1e-9);
        }
    }
}

#[test]
fn energy_ratio_non_decreasing_and_bounded() {
    let kernel = CovarianceKernel::gaussian(0.2, 0.4, 1.0).unwrap();
    let mut last = 0.0;
    for n in [1, 3, 10, 40, 121] {
        let b = basis(10, kernel, n);
        assert!(b.energy_ratio >= last && b.energy_ratio <= 1.0 + 1e-8);
        last = b.energy_ratio;
    }
    // full truncation recovers the discrete trace of C M
    let mesh = StructuredMesh::unit_square(10, 10).unwrap();
    let m = DMatrix::from(&assemble_mass(&mesh, &ScalarField::constant(&mesh, 1.0)).unwrap());
    let c = DMatrix::from_fn(mesh.node_count(), mesh.node_count(), |i, j| {
        let (a, b) = (mesh.node_coords(i), mesh.node_coords(j));
        kernel.eval(a[0] - b[0], a[1] - b[1])
    });
    assert_relative_eq!(last, (c * m).trace(), max_relative = 1e-9);
    let fine = basis(30, kernel, 400).energy_ratio;
    assert!(fine > last && fine <= 1.0 + 1e-8);
}

#[test]
fn eigen_invariants() {
    let b = basis(12, CovarianceKernel::gaussian(0.2, 0.4, 1.0).unwrap(), 10);
    assert!(b.eigenvalues.windows(2).all(|w| w[0] >= w[1]) && b.eigenvalues.iter().all(|&l| l >= 0.0));
    assert!(b.orthonormality_residual().unwrap() <= 1e-8);
    for k in 0..b.n_modes() {
        let first = b.modes.column(k).iter().copied().find(|v| v.abs() > 1e-12).unwrap();
        assert!(first > 0.0);
    }
    assert!(build_kl(&b.mesh, b.kernel, 10_000, &ScalarField::constant(&b.mesh, 0.0)).is_err());
}

#[test]
fn realization_examples() {
    let mesh = StructuredMesh::unit_square(10, 10).unwrap();
    let mean = ScalarField::from_fn(&mesh, |x, y| 0.5 * x - y).unwrap();
    let b = build_kl(&mesh, CovarianceKernel::gaussian(0.2, 0.4, 1.0).unwrap(), 5, &mean).unwrap();
    assert_eq!(realize_field(&b, &[0.0; 5]).unwrap(), mean);
    let mut e = [0.0; 5];
    e[2] = 1.0;
    let y = realize_field(&b, &e).unwrap().to_dvector() - mean.to_dvector();
    assert!((y - b.modes.column(2) * b.eigenvalues[2].sqrt()).amax() < 1e-14);
    let z = [0.3, -1.2, 2.0, 0.1, -0.7];
    let back = b.project(&realize_field(&b, &z).unwrap()).unwrap();
    for (a, c) in z.iter().zip(&back) {
        assert!((a - c).abs() < 1e-8);
    }
    assert!(realize_field(&b, &[0.0; 4]).is_err());
}

#[test]
fn exponential_kernel_as_printed() {
    let k = CovarianceKernel::exponential(0.5, 0.25, 2.0).unwrap();
    assert_relative_eq!(k.eval(0.3, 0.0), 2.0 * (-0.3f64 / (2.0 * 0.25)).exp(), epsilon = 1e-15);
    let mut alt = k;
    alt.exponent_form = ExponentForm::Length;
    assert_relative_eq!(alt.eval(0.0, 0.1), 2.0 * (-0.1 / 0.25f64).exp(), epsilon = 1e-15);
    assert!(CovarianceKernel::gaussian(0.0, 1.0, 1.0).is_err());
    assert!(CovarianceKernel::gaussian(1.0, 1.0, -1.0).is_err());
}

#[test]
fn identity_correlation_decouples() {
    let a = basis(8, CovarianceKernel::gaussian(0.3, 0.3, 1.0).unwrap(), 3);
    let b = basis(8, CovarianceKernel::gaussian(0.2, 0.5, 2.0).unwrap(), 4);
    let set = CorrelatedFieldSet::new(vec![a.clone(), b.clone()], DMatrix::identity(2, 2), CorrelationMode::Cholesky).unwrap();
    let z = [0.1, 0.2, 0.3, -1.0, 0.5, 0.0, 2.0];
    let f = realize_correlated(&set, &z).unwrap();
    assert!((f[0].to_dvector() - realize_field(&a, &z[..3]).unwrap().to_dvector()).amax() < 1e-14);
    assert!((f[1].to_dvector() - realize_field(&b, &z[3..]).unwrap().to_dvector()).amax() < 1e-14);
    assert!(realize_correlated(&set, &z[..6]).is_err());
}

#[test]
fn second_drives_first_substitution() {
    let k1 = CovarianceKernel::exponential(0.5, 0.5, 0.6).unwrap();
    let k2 = CovarianceKernel::exponential(0.5, 0.5, 1.4).unwrap();
    let (a, b) = (basis(8, k1, 3), basis(8, k2, 3));
    let rho = -0.4;
    let set = CorrelatedFieldSet::pair(a.clone(), b.clone(), rho, CorrelationMode::SecondDrivesFirst).unwrap();
    let z = [0.7, -0.2, 1.1, 0.0, 0.0, 0.0];
    let f = set.realize(&z).unwrap();
    assert!(f[1].to_dvector().amax() < 1e-15);
    let own = realize_field(&a, &z[..3]).unwrap().to_dvector();
    assert!((f[0].to_dvector() - own * (1.0 - rho * rho).sqrt()).amax() < 1e-14);
}

fn sample_correlation(set: &CorrelatedFieldSet, node: usize, n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..set.n_params()).map(|_| rng.sample(StandardNormal)).collect();
        let f = set.realize(&z).unwrap();
        xs.push(f[0].values[node]);
        ys.push(f[1].values[node]);
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn empirical_correlation_matches_rho() {
    let shape = |s2| CovarianceKernel::gaussian(0.3, 0.3, s2).unwrap();
    for (rho, mode) in [(-0.4, CorrelationMode::SecondDrivesFirst), (0.8, CorrelationMode::Cholesky)] {
        let set = CorrelatedFieldSet::pair(basis(6, shape(1.0), 8), basis(6, shape(2.5), 8), rho, mode).unwrap();
        let r = sample_correlation(&set, 17, 10_000);
        assert!((r - rho).abs() <= 0.05, "{mode:?}: {r} vs {rho}");
    }
}

#[test]
fn mixed_field_examples() {
    let mesh = StructuredMesh::unit_square(6, 6).unwrap();
    let b = build_kl(&mesh, CovarianceKernel::gaussian(0.3, 0.3, 1.0).unwrap(), 4, &ScalarField::constant(&mesh, 0.0)).unwrap();
    let single = CorrelatedFieldSet::new(vec![b.clone()], DMatrix::identity(1, 1), CorrelationMode::Cholesky).unwrap();
    let whole = MixedFieldSpec::new(&mesh, vec![0; mesh.element_count()], 1).unwrap();
    let z = [0.4, -0.3, 1.0, 0.2];
    let mixed = realize_mixed(&whole, &single, &z).unwrap();
    let direct = realize_field(&b, &z).unwrap().element_values(&mesh).unwrap();
    assert!(mixed.values.iter().zip(&direct).all(|(a, c)| (a - c).abs() < 1e-14));

    let layer = MixedFieldSpec::middle_layer(&mesh, 1.0 / 3.0, 2.0 / 3.0).unwrap();
    let fields = [ScalarField::constant(&mesh, 1.5), ScalarField::constant(&mesh, -2.0)];
    let s = layer.stitch(&mesh, &fields).unwrap();
    for e in 0..mesh.element_count() {
        let y = mesh.element_center(e)[1];
        let expected = if y > 1.0 / 3.0 && y < 2.0 / 3.0 { -2.0 } else { 1.5 };
        assert_eq!(s.values[e], expected);
    }
    assert!(MixedFieldSpec::new(&mesh, vec![2; mesh.element_count()], 2).is_err());
}

#[test]
fn layered_correlated_field_jumps_only_at_interfaces() {
    let mesh = StructuredMesh::unit_square(9, 9).unwrap();
    let mean = ScalarField::constant(&mesh, 0.0);
    let k = CovarianceKernel::gaussian(0.3, 0.3, 1.0).unwrap();
    let b1 = build_kl(&mesh, k, 3, &mean).unwrap();
    let b2 = build_kl(&mesh, k, 3, &ScalarField::constant(&mesh, 4.0)).unwrap();
    let set = CorrelatedFieldSet::pair(b1, b2, 0.8, CorrelationMode::SecondDrivesFirst).unwrap();
    let spec = MixedFieldSpec::middle_layer(&mesh, 1.0 / 3.0, 2.0 / 3.0).unwrap();
    let z = [0.5, -0.5, 0.2, 0.1, 0.3, -0.2];
    let f = realize_mixed(&spec, &set, &z).unwrap();
    let subs = set.realize(&z).unwrap();
    for e in 0..mesh.element_count() {
        let own = subs[spec.partition[e]].element_values(&mesh).unwrap()[e];
        assert_eq!(f.values[e], own);
    }
    // vertical neighbours within a layer differ little; across an interface by about the mean offset
    let idx = |i, j| mesh.element_index(i, j);
    let within = (f.values[idx(4, 4)] - f.values[idx(4, 3)]).abs();
    let across = (f.values[idx(4, 3)] - f.values[idx(4, 2)]).abs();
    assert!(across > 2.0 && within < 1.0, "{within} {across}");
}

#[test]
fn basis_persists_as_per_mode_grids() {
    let dir = tempfile::tempdir().unwrap();
    let b = basis(7, CovarianceKernel::gaussian(0.2, 0.4, 1.0).unwrap(), 3);
    let files = save_kl(dir.path(), 2, &b).unwrap();
    for i in 0..3 {
        assert!(dir.path().join(format!("kl_2_mode_{i}.csv")).exists());
    }
    assert_eq!(files.len(), 3 + 3);
    let grid = std::fs::read_to_string(dir.path().join("kl_2_mode_0.csv")).unwrap();
    assert_eq!(grid.lines().count(), 8);
    assert_eq!(load_kl(dir.path(), 2).unwrap(), b);
}
