//! Correctors, homogenized matrix, fluxes, flux correctors and the Dirichlet
//! energy of boxes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::Environment;
use crate::error::{HglError, Result};
use crate::lattice::{Boundary, EdgeField, LatticeGeometry, SiteField};
use crate::solver::{apply_operator, solve_from, SolverConfig};
use crate::stats::RunningStats;

pub type Matrix = Vec<Vec<f64>>;

/// Right-hand side `-div*(a e_i)` of the corrector equation in direction `i`.
pub fn corrector_rhs(geom: &LatticeGeometry, a: &[f64], i: usize) -> SiteField {
    let mut ai = vec![0.0; geom.n_edges()];
    let (lo, hi) = (geom.edge_offset(i), geom.edge_offset(i) + geom.edges_in_direction(i));
    ai[lo..hi].copy_from_slice(&a[lo..hi]);
    let mut rhs = geom.div(&ai).expect("matching lengths");
    rhs.iter_mut().for_each(|v| *v = -*v);
    rhs
}

/// Result of one corrector solve.
#[derive(Clone, Debug)]
pub struct CorrectorSolve {
    pub phi: SiteField,
    pub iterations: usize,
    /// Max-norm of `lambda phi + div* a (grad phi + e_i)`.
    pub residual: f64,
}

/// Solves `lambda phi + div* a (grad phi + e_i) = 0` on a torus.
pub fn solve_corrector(env: &Environment, i: usize, lambda: f64, config: &SolverConfig) -> Result<CorrectorSolve> {
    solve_corrector_from(env, i, lambda, None, config)
}

pub fn solve_corrector_from(
    env: &Environment,
    i: usize,
    lambda: f64,
    guess: Option<&[f64]>,
    config: &SolverConfig,
) -> Result<CorrectorSolve> {
    let geom = env.geometry();
    if !geom.is_periodic() {
        return Err(HglError::invalid("correctors are computed on a torus"));
    }
    if i >= geom.d() {
        return Err(HglError::invalid(format!("direction {i} out of range")));
    }
    let a = env.conductances();
    let rhs = corrector_rhs(geom, &a, i);
    let sol = solve_from(geom, &a, lambda, &rhs, guess, config)?;
    let mut phi = sol.u;
    if lambda == 0.0 {
        let m = phi.iter().sum::<f64>() / phi.len() as f64;
        phi.iter_mut().for_each(|v| *v -= m);
    }
    let res = apply_operator(geom, &a, lambda, &phi)?;
    let residual = res.iter().zip(&rhs).map(|(x, b)| (x - b).abs()).fold(0.0, f64::max);
    Ok(CorrectorSolve { phi, iterations: sol.iterations, residual })
}

/// Per-environment homogenized matrix
/// `(a_h)_ik = mean_x sum_j a_j (delta_ij + grad_j phi_i)(delta_kj + grad_j phi_k)`.
pub fn homogenized_matrix(geom: &LatticeGeometry, a: &[f64], grad_phi: &[EdgeField]) -> Matrix {
    let d = geom.d();
    let n = geom.n_sites();
    let mut m = vec![vec![0.0; d]; d];
    for j in 0..d {
        let off = geom.edge_offset(j);
        for x in 0..n {
            let aj = a[off + x];
            for i in 0..d {
                let vi = if i == j { 1.0 } else { 0.0 } + grad_phi[i][off + x];
                for k in i..d {
                    let vk = if k == j { 1.0 } else { 0.0 } + grad_phi[k][off + x];
                    m[i][k] += aj * vi * vk;
                }
            }
        }
    }
    for i in 0..d {
        for k in i..d {
            m[i][k] /= n as f64;
            m[k][i] = m[i][k];
        }
    }
    m
}

/// Arithmetic and harmonic means of the conductances per direction.
pub fn voigt_reuss(env: &Environment) -> (Vec<f64>, Vec<f64>) {
    let geom = env.geometry();
    let a = env.conductances();
    (0..geom.d())
        .map(|i| {
            let block = &a[geom.edge_offset(i)..geom.edge_offset(i) + geom.edges_in_direction(i)];
            let n = block.len() as f64;
            let arith = block.iter().sum::<f64>() / n;
            let harm = n / block.iter().map(|v| 1.0 / v).sum::<f64>();
            (arith, harm)
        })
        .unzip()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AhomEstimate {
    pub mean: Matrix,
    pub se: Matrix,
    pub n: usize,
}

impl AhomEstimate {
    /// `trace / d`.
    pub fn a_bar(&self) -> f64 {
        let d = self.mean.len();
        (0..d).map(|i| self.mean[i][i]).sum::<f64>() / d as f64
    }
}

/// Ensemble mean of per-environment homogenized matrices with error bars.
pub fn estimate_ahom(per_env: &[Matrix]) -> AhomEstimate {
    let d = per_env.first().map(|m| m.len()).unwrap_or(0);
    let mut mean = vec![vec![0.0; d]; d];
    let mut se = vec![vec![0.0; d]; d];
    for i in 0..d {
        for k in 0..d {
            let s = RunningStats::from_slice(&per_env.iter().map(|m| m[i][k]).collect::<Vec<_>>());
            let e = s.mean_estimate();
            mean[i][k] = e.value;
            se[i][k] = if per_env.len() > 1 { e.se } else { 0.0 };
        }
    }
    AhomEstimate { mean, se, n: per_env.len() }
}

/// `q_ij(x) = a_j(x)(delta_ij + grad_j phi_i(x)) - (a_h)_ji`, indexed `[i][j]`.
pub fn flux(geom: &LatticeGeometry, a: &[f64], grad_phi: &[EdgeField], a_hom: &Matrix) -> Vec<Vec<SiteField>> {
    let d = geom.d();
    let n = geom.n_sites();
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    let off = geom.edge_offset(j);
                    let delta = if i == j { 1.0 } else { 0.0 };
                    (0..n).map(|x| a[off + x] * (delta + grad_phi[i][off + x]) - a_hom[j][i]).collect()
                })
                .collect()
        })
        .collect()
}

/// Right-hand side `grad_k q_ij - grad_j q_ik` of the flux-corrector equation.
pub fn flux_corrector_rhs(geom: &LatticeGeometry, q: &[Vec<SiteField>], i: usize, j: usize, k: usize) -> SiteField {
    let n = geom.n_sites();
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    geom.grad_direction_into(&q[i][j], k, &mut a);
    geom.grad_direction_into(&q[i][k], j, &mut b);
    a.iter().zip(&b).map(|(x, y)| x - y).collect()
}

/// Solves `(lambda - Laplacian) sigma_ijk = grad_k q_ij - grad_j q_ik` on a torus.
pub fn solve_flux_corrector(
    geom: &LatticeGeometry,
    q: &[Vec<SiteField>],
    i: usize,
    j: usize,
    k: usize,
    lambda: f64,
    config: &SolverConfig,
) -> Result<SiteField> {
    if !geom.is_periodic() {
        return Err(HglError::invalid("flux correctors are computed on a torus"));
    }
    let ones = vec![1.0; geom.n_edges()];
    let rhs = flux_corrector_rhs(geom, q, i, j, k);
    Ok(solve_from(geom, &ones, lambda, &rhs, None, config)?.u)
}

/// Flux correctors `sigma[i][j][k]`, antisymmetric in `(j, k)` by
/// construction: one solve per `j < k`, negated for `k < j`, zero on the
/// diagonal.
pub fn flux_correctors(
    geom: &LatticeGeometry,
    q: &[Vec<SiteField>],
    lambda: f64,
    config: &SolverConfig,
) -> Result<Vec<Vec<Vec<SiteField>>>> {
    let d = geom.d();
    let n = geom.n_sites();
    let jobs: Vec<(usize, usize, usize)> =
        (0..d).flat_map(|i| (0..d).flat_map(move |j| (j + 1..d).map(move |k| (i, j, k)))).collect();
    let solved: Vec<SiteField> = jobs
        .par_iter()
        .map(|&(i, j, k)| solve_flux_corrector(geom, q, i, j, k, lambda, config))
        .collect::<Result<_>>()?;
    let mut sigma = vec![vec![vec![vec![0.0; n]; d]; d]; d];
    for (&(i, j, k), s) in jobs.iter().zip(solved) {
        sigma[i][k][j] = s.iter().map(|v| -v).collect();
        sigma[i][j][k] = s;
    }
    Ok(sigma)
}

/// `sum_k div*_k sigma_ijk`.
pub fn sigma_divergence(geom: &LatticeGeometry, sigma: &[Vec<Vec<SiteField>>], i: usize, j: usize) -> SiteField {
    let mut out = vec![0.0; geom.n_sites()];
    for k in 0..geom.d() {
        geom.div_direction_add(&sigma[i][j][k], k, &mut out);
    }
    out
}

/// Max-norm of `div* q_i = sum_j div*_j q_ij`.
pub fn flux_divergence_norm(geom: &LatticeGeometry, q: &[Vec<SiteField>], i: usize) -> f64 {
    let mut out = vec![0.0; geom.n_sites()];
    for j in 0..geom.d() {
        geom.div_direction_add(&q[i][j], j, &mut out);
    }
    out.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Max-norm of the reconstruction error `sum_k div*_k sigma_ijk - (q_ij - mean q_ij)`,
/// together with `|mean q_ij|`.
pub fn sigma_reconstruction_error(
    geom: &LatticeGeometry,
    q: &[Vec<SiteField>],
    sigma: &[Vec<Vec<SiteField>>],
    i: usize,
    j: usize,
) -> (f64, f64) {
    let div = sigma_divergence(geom, sigma, i, j);
    let mean = q[i][j].iter().sum::<f64>() / q[i][j].len() as f64;
    let err = div.iter().zip(&q[i][j]).map(|(s, qv)| (s - (qv - mean)).abs()).fold(0.0, f64::max);
    (err, mean.abs())
}

/// Correctors with derived quantities for one environment.
#[derive(Clone, Debug)]
pub struct CorrectorSet {
    pub lambda: f64,
    pub phi: Vec<SiteField>,
    pub grad_phi: Vec<EdgeField>,
    pub a_hom: Matrix,
    /// `q[i][j]`.
    pub q: Vec<Vec<SiteField>>,
    /// `sigma[i][j][k]`, present when requested.
    pub sigma: Option<Vec<Vec<Vec<SiteField>>>>,
    /// Max-norm residual per corrector equation.
    pub residuals: Vec<f64>,
    pub iterations: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectorOptions {
    pub lambda: f64,
    pub with_sigma: bool,
    pub solver: SolverConfig,
    /// Tolerance for the constant-coefficient flux-corrector solves.
    pub sigma_tol: f64,
}

impl Default for CorrectorOptions {
    fn default() -> Self {
        CorrectorOptions { lambda: 0.0, with_sigma: false, solver: SolverConfig::default(), sigma_tol: 1e-11 }
    }
}

impl CorrectorSet {
    pub fn compute(env: &Environment, opts: &CorrectorOptions) -> Result<CorrectorSet> {
        Self::compute_from(env, opts, None)
    }

    /// As [`CorrectorSet::compute`], warm-starting each corrector from `guess`.
    pub fn compute_from(env: &Environment, opts: &CorrectorOptions, guess: Option<&[SiteField]>) -> Result<CorrectorSet> {
        let geom = env.geometry();
        let d = geom.d();
        let solves: Vec<CorrectorSolve> = (0..d)
            .into_par_iter()
            .map(|i| solve_corrector_from(env, i, opts.lambda, guess.map(|g| g[i].as_slice()), &opts.solver))
            .collect::<Result<_>>()?;
        let a = env.conductances();
        let grad_phi: Vec<EdgeField> = solves.iter().map(|s| geom.grad(&s.phi).expect("lengths")).collect();
        let a_hom = homogenized_matrix(geom, &a, &grad_phi);
        let q = flux(geom, &a, &grad_phi, &a_hom);
        let sigma = if opts.with_sigma {
            Some(flux_correctors(geom, &q, opts.lambda, &SolverConfig::with_tol(opts.sigma_tol))?)
        } else {
            None
        };
        Ok(CorrectorSet {
            lambda: opts.lambda,
            residuals: solves.iter().map(|s| s.residual).collect(),
            iterations: solves.iter().map(|s| s.iterations).collect(),
            phi: solves.into_iter().map(|s| s.phi).collect(),
            grad_phi,
            a_hom,
            q,
            sigma,
        })
    }

    pub fn d(&self) -> usize {
        self.phi.len()
    }
}

/// `nu(box_r, p)` for the box of base sites `corner + {0..r-1}^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyValue {
    pub r: usize,
    pub p: Vec<f64>,
    pub value: f64,
}

/// Minimal averaged Dirichlet energy `(1/r^d) sum_e (1/2) a_e (p_i + grad v)^2`
/// over `v` vanishing on the boundary of the closed box `corner + {0..r}^d`.
/// The sum runs over the `d r^d` edges with base in `corner + {0..r-1}^d`.
pub fn dirichlet_energy(env: &Environment, corner: &[i64], r: usize, p: &[f64], config: &SolverConfig) -> Result<EnergyValue> {
    let geom = env.geometry();
    let d = geom.d();
    if corner.len() != d || p.len() != d {
        return Err(HglError::GeometryMismatch("corner / direction dimension".into()));
    }
    if r < 1 {
        return Err(HglError::invalid("box side must be positive"));
    }
    let fits = match geom.bc() {
        Boundary::Periodic => geom.shape().iter().all(|&l| r <= l),
        Boundary::DirichletZero => (0..d).all(|i| corner[i] >= 0 && corner[i] + r as i64 <= geom.shape()[i] as i64 - 1),
    };
    if !fits {
        return Err(HglError::invalid("box does not fit in the geometry"));
    }
    let a = env.conductances();
    let cond = |base: &[i64], dir: usize| -> f64 {
        let e = crate::lattice::Edge { base: base.to_vec(), dir };
        a[geom.edge_index(&e).expect("edge inside geometry")]
    };
    let volume = (r as f64).powi(d as i32);

    // edges whose endpoints both lie on the boundary carry the constant field
    let mut boundary_energy = 0.0;
    let mut x = vec![0i64; d];
    loop {
        for i in 0..d {
            if (0..d).any(|j| j != i && x[j] == 0) {
                let base: Vec<i64> = (0..d).map(|j| corner[j] + x[j]).collect();
                boundary_energy += 0.5 * cond(&base, i) * p[i] * p[i];
            }
        }
        let mut j = 0;
        while j < d {
            x[j] += 1;
            if x[j] < r as i64 {
                break;
            }
            x[j] = 0;
            j += 1;
        }
        if j == d {
            break;
        }
    }
    if r == 1 {
        return Ok(EnergyValue { r, p: p.to_vec(), value: boundary_energy / volume });
    }

    // interior unknowns {1..r-1}^d as a Dirichlet box of side r - 1
    let inner = LatticeGeometry::new(vec![r - 1; d], Boundary::DirichletZero)?;
    let mut ai = vec![0.0; inner.n_edges()];
    for (e, v) in ai.iter_mut().enumerate() {
        let edge = inner.edge_from_index(e);
        let base: Vec<i64> = (0..d).map(|j| corner[j] + edge.base[j] + 1).collect();
        *v = cond(&base, edge.dir);
    }
    let mut pa = vec![0.0; inner.n_edges()];
    for i in 0..d {
        let off = inner.edge_offset(i);
        for k in 0..inner.edges_in_direction(i) {
            pa[off + k] = p[i] * ai[off + k];
        }
    }
    let mut rhs = inner.div(&pa)?;
    rhs.iter_mut().for_each(|v| *v = -*v);
    let v = solve_from(&inner, &ai, 0.0, &rhs, None, config)?.u;
    let dv = inner.grad(&v)?;
    let mut interior_energy = 0.0;
    for i in 0..d {
        let off = inner.edge_offset(i);
        for k in 0..inner.edges_in_direction(i) {
            let g = p[i] + dv[off + k];
            interior_energy += 0.5 * ai[off + k] * g * g;
        }
    }
    Ok(EnergyValue { r, p: p.to_vec(), value: (boundary_energy + interior_energy) / volume })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::ConductanceLaw;

    fn env3(l: usize, seed: u64) -> Environment {
        Environment::sample(&LatticeGeometry::torus(3, l).unwrap(), ConductanceLaw::default(), seed)
    }

    #[test]
    fn constant_conductances_give_trivial_correctors() {
        let env = env3(6, 1).with_law(ConductanceLaw::new_constant(1.7).unwrap());
        let opts = CorrectorOptions { with_sigma: true, ..Default::default() };
        let set = CorrectorSet::compute(&env, &opts).unwrap();
        for i in 0..3 {
            assert!(set.phi[i].iter().all(|v| v.abs() < 1e-14));
            for k in 0..3 {
                let expect = if i == k { 1.7 } else { 0.0 };
                assert!((set.a_hom[i][k] - expect).abs() < 1e-14);
                assert!(set.q[i][k].iter().all(|v| v.abs() < 1e-14));
            }
        }
        let sigma = set.sigma.unwrap();
        assert!(sigma.iter().flatten().flatten().flatten().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn large_mass_suppresses_corrector() {
        let env = env3(6, 2);
        let lambda = 1e6;
        let s = solve_corrector(&env, 0, lambda, &SolverConfig::default()).unwrap();
        let a = env.conductances();
        let rhs = corrector_rhs(env.geometry(), &a, 0);
        let bound = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs())) / lambda;
        assert!(s.phi.iter().all(|v| v.abs() <= bound * 1.0001));
    }

    /// On a ring, grad phi = H / a - 1 with H the harmonic mean.
    #[test]
    fn ring_corrector_closed_form() {
        let g = LatticeGeometry::torus(1, 12).unwrap();
        let env = Environment::sample(&g, ConductanceLaw::default(), 3);
        let a = env.conductances();
        let h = a.len() as f64 / a.iter().map(|v| 1.0 / v).sum::<f64>();
        let s = solve_corrector(&env, 0, 0.0, &SolverConfig::with_tol(1e-13)).unwrap();
        // phi(x) = sum_{y<x} (h/a_y - 1), shifted to mean zero
        let mut phi = vec![0.0; 12];
        for x in 1..12 {
            phi[x] = phi[x - 1] + h / a[x - 1] - 1.0;
        }
        let m = phi.iter().sum::<f64>() / 12.0;
        for x in 0..12 {
            assert!((s.phi[x] - (phi[x] - m)).abs() < 1e-8);
        }
        let set = CorrectorSet::compute(&env, &CorrectorOptions::default()).unwrap();
        assert!((set.a_hom[0][0] - h).abs() < 1e-10);
    }

    #[test]
    fn brackets_and_flux_identities() {
        let env = env3(8, 4);
        let opts = CorrectorOptions { with_sigma: true, ..Default::default() };
        let set = CorrectorSet::compute(&env, &opts).unwrap();
        let (arith, harm) = voigt_reuss(&env);
        for i in 0..3 {
            assert!(harm[i] <= set.a_hom[i][i] && set.a_hom[i][i] <= arith[i]);
            let div = flux_divergence_norm(env.geometry(), &set.q, i);
            assert!(div <= 10.0 * set.residuals[i].max(1e-13));
            for j in 0..3 {
                let m = set.q[i][j].iter().sum::<f64>() / set.q[i][j].len() as f64;
                assert!(m.abs() < 1e-8);
            }
        }
        let sigma = set.sigma.as_ref().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for x in 0..sigma[i][j][k].len() {
                        assert_eq!(sigma[i][j][k][x], -sigma[i][k][j][x]);
                    }
                }
                let (err, _) = sigma_reconstruction_error(env.geometry(), &set.q, sigma, i, j);
                assert!(err < 1e-7, "reconstruction error {err}");
            }
        }
    }

    #[test]
    fn corrector_solve_requires_torus() {
        let env = Environment::sample(&LatticeGeometry::dirichlet(2, 4).unwrap(), ConductanceLaw::default(), 1);
        assert!(solve_corrector(&env, 0, 0.0, &SolverConfig::default()).is_err());
    }

    #[test]
    fn energy_of_constant_medium() {
        let env = env3(8, 5).with_law(ConductanceLaw::new_constant(2.5).unwrap());
        let p = [0.3, -1.0, 0.5];
        let nu = dirichlet_energy(&env, &[1, 2, 0], 4, &p, &SolverConfig::default()).unwrap();
        let expect = 0.5 * 2.5 * p.iter().map(|v| v * v).sum::<f64>();
        assert!((nu.value - expect).abs() < 1e-12);
    }

    #[test]
    fn energy_bounds_and_subadditivity() {
        let env = env3(16, 6);
        let p = [1.0, 0.4, -0.2];
        let cfg = SolverConfig::with_tol(1e-12);
        let r = 4;
        let big = dirichlet_energy(&env, &[0, 0, 0], 2 * r, &p, &cfg).unwrap();
        let mut avg = 0.0;
        for b in 0..8 {
            let corner: Vec<i64> = (0..3).map(|j| ((b >> j) & 1) as i64 * r as i64).collect();
            avg += dirichlet_energy(&env, &corner, r, &p, &cfg).unwrap().value / 8.0;
        }
        assert!(big.value <= avg + 1e-10);
        assert!(big.value >= 0.0);
        // the competitor v = 0 bounds nu by the box-averaged arithmetic mean
        let a = env.conductances();
        let g = env.geometry();
        let mut upper = 0.0;
        for x in 0..8i64.pow(3) {
            let c = [x % 8, (x / 8) % 8, x / 64];
            for i in 0..3 {
                let e = crate::lattice::Edge { base: c.to_vec(), dir: i };
                upper += 0.5 * a[g.edge_index(&e).unwrap()] * p[i] * p[i];
            }
        }
        assert!(big.value <= upper / 512.0 + 1e-12);
    }
}
