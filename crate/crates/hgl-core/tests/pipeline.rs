use hgl_core::corrector::{CorrectorOptions, CorrectorSet};
use hgl_core::solver::green_column;
use hgl_core::{ConductanceLaw, Environment, LatticeGeometry, Snapshot, SolverConfig};

fn law() -> ConductanceLaw {
    ConductanceLaw::new_tanh(2.0, 1.0).unwrap()
}

#[test]
fn green_function_is_symmetric_and_positive() {
    let geom = LatticeGeometry::dirichlet(3, 9).unwrap();
    let env = Environment::sample(&geom, law(), 11);
    let a = env.conductances();
    let cfg = SolverConfig::with_tol(1e-12);
    let x = geom.site_index(&[2, 3, 4]).unwrap();
    let y = geom.site_index(&[6, 5, 1]).unwrap();
    let gx = green_column(&geom, &a, 0.0, x, &cfg).unwrap();
    let gy = green_column(&geom, &a, 0.0, y, &cfg).unwrap();
    assert!((gx.values[y] - gy.values[x]).abs() <= 1e-9 * gx.values[x]);
    assert!(gx.values.iter().all(|&v| v > 0.0));
    assert!(gx.values[x] >= gx.values.iter().cloned().fold(0.0, f64::max) - 1e-12);
}

#[test]
fn corrector_snapshot_survives_disk() {
    let geom = LatticeGeometry::torus(3, 6).unwrap();
    let env = Environment::sample(&geom, law(), 4);
    let opts = CorrectorOptions { with_sigma: true, solver: SolverConfig::with_tol(1e-11), ..Default::default() };
    let set = CorrectorSet::compute(&env, &opts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.hgl");
    Snapshot::from_corrector(&env, &set).save(&path).unwrap();
    let (env2, set2) = Snapshot::load(&path).unwrap().to_corrector().unwrap();
    assert_eq!(env2.zeta(), env.zeta());
    assert_eq!(env2.conductances(), env.conductances());
    assert_eq!(set2.a_hom, set.a_hom);
    assert_eq!(set2.phi, set.phi);
    assert_eq!(set2.sigma, set.sigma);
    assert_eq!(set2.iterations, set.iterations);
}

#[test]
fn homogenized_matrix_is_shift_invariant() {
    let geom = LatticeGeometry::torus(3, 6).unwrap();
    let env = Environment::sample(&geom, law(), 21);
    let opts = CorrectorOptions { solver: SolverConfig::with_tol(1e-12), ..Default::default() };
    let a = CorrectorSet::compute(&env, &opts).unwrap().a_hom;
    let b = CorrectorSet::compute(&env.shift(&[1, -2, 3]).unwrap(), &opts).unwrap().a_hom;
    for i in 0..3 {
        for j in 0..3 {
            assert!((a[i][j] - b[i][j]).abs() < 1e-9, "{i}{j}: {} vs {}", a[i][j], b[i][j]);
        }
    }
}

#[test]
fn constant_environment_pipeline() {
    let geom = LatticeGeometry::torus(3, 5).unwrap();
    let env = Environment::sample(&geom, ConductanceLaw::new_constant(0.7).unwrap(), 1);
    let set = CorrectorSet::compute(&env, &CorrectorOptions { with_sigma: true, ..Default::default() }).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { 0.7 } else { 0.0 };
            assert!((set.a_hom[i][j] - want).abs() < 1e-14);
        }
    }
    assert!(set.phi.iter().flatten().all(|&v| v == 0.0));
    assert!(set.sigma.unwrap().iter().flatten().flatten().flatten().all(|&v| v == 0.0));
}
