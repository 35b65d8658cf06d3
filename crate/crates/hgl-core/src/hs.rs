//! Vertical derivatives, the Ornstein-Uhlenbeck resolvent `(1 + L)^{-1}`,
//! Helffer-Sjostrand covariances and the covariance tensor of the
//! homogenization limit.

use std::num::NonZeroUsize;

use gauss_quad::GaussHermite;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::{estimate_ahom, AhomEstimate, CorrectorOptions, CorrectorSet, Matrix};
use crate::environment::{ConductanceLaw, Environment};
use crate::error::{HglError, Result};
use crate::lattice::{EdgeField, LatticeGeometry};
use crate::solver::{green_column, SolverConfig};
use crate::stats::{derive_seed, Estimate, RunningStats};

/// A real random variable of the environment.
pub trait Functional: Sync {
    fn eval(&self, env: &Environment) -> Result<f64>;

    /// Vertical derivatives `d_e F` for every edge, when known in closed form.
    fn gradient(&self, _env: &Environment) -> Result<Option<EdgeField>> {
        Ok(None)
    }
}

/// Wraps a closure without an analytic gradient.
pub struct FnFunctional<F>(pub F);

impl<F> Functional for FnFunctional<F>
where
    F: Fn(&Environment) -> Result<f64> + Sync,
{
    fn eval(&self, env: &Environment) -> Result<f64> {
        (self.0)(env)
    }
}

/// `zeta_e^power - offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgePower {
    pub edge: usize,
    pub power: i32,
    pub offset: f64,
}

impl Functional for EdgePower {
    fn eval(&self, env: &Environment) -> Result<f64> {
        let z = *env.zeta().get(self.edge).ok_or_else(|| HglError::invalid("edge out of range"))?;
        Ok(z.powi(self.power) - self.offset)
    }

    fn gradient(&self, env: &Environment) -> Result<Option<EdgeField>> {
        let mut g = vec![0.0; env.zeta().len()];
        let z = *env.zeta().get(self.edge).ok_or_else(|| HglError::invalid("edge out of range"))?;
        g[self.edge] = self.power as f64 * z.powi(self.power - 1);
        Ok(Some(g))
    }
}

/// `G(x, y)` of the environment's own geometry (at `lambda`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GreenValue {
    pub x: usize,
    pub y: usize,
    pub lambda: f64,
    pub solver: SolverConfig,
}

impl Functional for GreenValue {
    fn eval(&self, env: &Environment) -> Result<f64> {
        let g = green_column(env.geometry(), &env.conductances(), self.lambda, self.y, &self.solver)?;
        g.values.get(self.x).copied().ok_or_else(|| HglError::invalid("site out of range"))
    }

    fn gradient(&self, env: &Environment) -> Result<Option<EdgeField>> {
        let geom = env.geometry();
        let a = env.conductances();
        let gx = geom.grad(&green_column(geom, &a, self.lambda, self.x, &self.solver)?.values)?;
        let gy = if self.x == self.y {
            gx.clone()
        } else {
            geom.grad(&green_column(geom, &a, self.lambda, self.y, &self.solver)?.values)?
        };
        let ep = env.eta_prime();
        Ok(Some((0..gx.len()).map(|e| -ep[e] * gx[e] * gy[e]).collect()))
    }
}

/// `sum_k c_k F_k`.
pub struct Combination<'a>(pub Vec<(f64, &'a dyn Functional)>);

impl Functional for Combination<'_> {
    fn eval(&self, env: &Environment) -> Result<f64> {
        self.0.iter().map(|(c, f)| Ok(c * f.eval(env)?)).sum()
    }

    fn gradient(&self, env: &Environment) -> Result<Option<EdgeField>> {
        let mut out = vec![0.0; env.zeta().len()];
        for (c, f) in &self.0 {
            match f.gradient(env)? {
                Some(g) => out.iter_mut().zip(g).for_each(|(o, v)| *o += c * v),
                None => return Ok(None),
            }
        }
        Ok(Some(out))
    }
}

/// `d_e G(x, y) = -eta'(zeta_e) grad G(x, e) grad G(y, e)`.
pub fn vertical_derivative_green(
    env: &Environment,
    x: usize,
    y: usize,
    e: usize,
    lambda: f64,
    config: &SolverConfig,
) -> Result<f64> {
    if e >= env.zeta().len() {
        return Err(HglError::invalid("edge out of range"));
    }
    let g = GreenValue { x, y, lambda, solver: *config };
    Ok(g.gradient(env)?.expect("analytic")[e])
}

/// Central difference `[F(zeta_e + h) - F(zeta_e - h)] / 2h`.
pub fn fd_vertical_derivative(f: &dyn Functional, env: &Environment, e: usize, h: f64) -> Result<f64> {
    let z = *env.zeta().get(e).ok_or_else(|| HglError::invalid("edge out of range"))?;
    let plus = f.eval(&env.set_edge(e, z + h)?)?;
    let minus = f.eval(&env.set_edge(e, z - h)?)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Vertical derivatives on `edges`, analytic when available.
pub fn vertical_gradient(f: &dyn Functional, env: &Environment, edges: &[usize], fd_step: f64) -> Result<Vec<f64>> {
    match f.gradient(env)? {
        Some(g) => Ok(edges.iter().map(|&e| g[e]).collect()),
        None => edges.iter().map(|&e| fd_vertical_derivative(f, env, e, fd_step)).collect(),
    }
}

/// OU time `T ~ Exp(1)` and the fresh-noise seed of resolvent sample `s`.
pub fn ou_draw(seed: u64, s: u64) -> (f64, u64) {
    let child = derive_seed(seed, s);
    let t: f64 = ChaCha8Rng::seed_from_u64(child).sample(Exp1);
    (t, derive_seed(child, 1))
}

/// `(1 + L)^{-1} F(zeta) = E[F(OU_T zeta)]` with `T ~ Exp(1)`, estimated from
/// `n_samples` independent draws.
pub fn resolvent_apply(f: &dyn Functional, env: &Environment, n_samples: usize, seed: u64) -> Result<Estimate> {
    if n_samples == 0 {
        return Err(HglError::invalid("need at least one sample"));
    }
    let vals: Vec<f64> = (0..n_samples as u64)
        .into_par_iter()
        .map(|s| {
            let (t, fresh) = ou_draw(seed, s);
            f.eval(&env.ou_resample(t, fresh)?)
        })
        .collect::<Result<_>>()?;
    let st = RunningStats::from_slice(&vals);
    let mut est = st.mean_estimate();
    if n_samples == 1 || st.variance() == 0.0 {
        est.se = 0.0;
    }
    Ok(est)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HsParams {
    pub geometry: LatticeGeometry,
    pub law: ConductanceLaw,
    pub n_env: usize,
    /// OU draws per environment.
    pub n_ou: usize,
    pub seed: u64,
    /// Edges entering the sum; all edges when absent.
    pub edges: Option<Vec<usize>>,
    pub fd_step: f64,
}

impl Default for HsParams {
    fn default() -> Self {
        HsParams {
            geometry: LatticeGeometry::torus(3, 4).expect("valid"),
            law: ConductanceLaw::default(),
            n_env: 1000,
            n_ou: 1,
            seed: 0,
            edges: None,
            fd_step: 1e-4,
        }
    }
}

/// Covariance estimated two ways over the same ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsComparison {
    /// `sum_e <d_e F, (1 + L)^{-1} d_e G>`.
    pub hs: Estimate,
    /// Plain sample covariance.
    pub direct: Estimate,
    pub failures: usize,
}

impl HsComparison {
    pub fn z_score(&self) -> f64 {
        self.hs.z_score(&self.direct)
    }
}

/// Helffer-Sjostrand representation `Cov{F, G} = sum_e <d_e F, (1 + L)^{-1} d_e G>`
/// against the sample covariance of the same environments.
pub fn hs_covariance(f: &dyn Functional, g: &dyn Functional, params: &HsParams) -> Result<HsComparison> {
    let edges: Vec<usize> = params.edges.clone().unwrap_or_else(|| (0..params.geometry.n_edges()).collect());
    let rows: Vec<Result<(f64, f64, f64)>> = (0..params.n_env as u64)
        .into_par_iter()
        .map(|k| {
            let env_seed = derive_seed(params.seed, 2 * k);
            let env = Environment::sample(&params.geometry, params.law, env_seed);
            let df = vertical_gradient(f, &env, &edges, params.fd_step)?;
            let mut acc = 0.0;
            for s in 0..params.n_ou as u64 {
                let (t, fresh) = ou_draw(derive_seed(params.seed, 2 * k + 1), s);
                let moved = env.ou_resample(t, fresh)?;
                let dg = vertical_gradient(g, &moved, &edges, params.fd_step)?;
                acc += df.iter().zip(&dg).map(|(a, b)| a * b).sum::<f64>();
            }
            Ok((acc / params.n_ou as f64, f.eval(&env)?, g.eval(&env)?))
        })
        .collect();
    let failures = rows.iter().filter(|r| r.is_err()).count();
    let ok: Vec<(f64, f64, f64)> = rows.into_iter().filter_map(|r| r.ok()).collect();
    if ok.len() < 4 {
        return Err(HglError::invalid("too few successful environments"));
    }
    let hs = RunningStats::from_slice(&ok.iter().map(|r| r.0).collect::<Vec<_>>()).mean_estimate();
    let n = ok.len() as f64;
    let mf = ok.iter().map(|r| r.1).sum::<f64>() / n;
    let mg = ok.iter().map(|r| r.2).sum::<f64>() / n;
    let prods: Vec<f64> = ok.iter().map(|r| (r.1 - mf) * (r.2 - mg)).collect();
    let ps = RunningStats::from_slice(&prods);
    let direct = Estimate { value: ps.mean() * n / (n - 1.0), se: ps.mean_estimate().se, n: ok.len() };
    Ok(HsComparison { hs, direct, failures })
}

/// Covariance tensor `K~_ijkl = sum_n K_ijkl(e_n)` with Monte Carlo errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelTensor {
    pub d: usize,
    /// Row-major `[i][j][k][l]`.
    pub entries: Vec<f64>,
    pub se: Vec<f64>,
    pub n_env: usize,
    pub n_ou: usize,
    pub failures: usize,
    pub l: usize,
    pub lambda: f64,
    pub seed: u64,
    pub law: ConductanceLaw,
    /// Homogenized matrix of the same ensemble.
    #[serde(default)]
    pub a_hom: Option<AhomEstimate>,
}

impl KernelTensor {
    pub fn index(d: usize, i: usize, j: usize, k: usize, l: usize) -> usize {
        ((i * d + j) * d + k) * d + l
    }

    pub fn zeros(d: usize) -> Self {
        KernelTensor {
            d,
            entries: vec![0.0; d.pow(4)],
            se: vec![0.0; d.pow(4)],
            n_env: 0,
            n_ou: 0,
            failures: 0,
            l: 0,
            lambda: 0.0,
            seed: 0,
            law: ConductanceLaw::default(),
            a_hom: None,
        }
    }

    /// `kappa delta_ij delta_kl`.
    pub fn isotropic(d: usize, kappa: f64) -> Self {
        let mut t = Self::zeros(d);
        for i in 0..d {
            for k in 0..d {
                t.entries[Self::index(d, i, i, k, k)] = kappa;
            }
        }
        t
    }

    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.entries[Self::index(self.d, i, j, k, l)]
    }

    pub fn get_se(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.se[Self::index(self.d, i, j, k, l)]
    }

    /// Largest `|K_ijkl - K_klij| / sqrt(se^2 + se'^2)`.
    pub fn pair_swap_z(&self) -> f64 {
        let d = self.d;
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        let a = Estimate { value: self.get(i, j, k, l), se: self.get_se(i, j, k, l), n: self.n_env };
                        let b = Estimate { value: self.get(k, l, i, j), se: self.get_se(k, l, i, j), n: self.n_env };
                        if a.se > 0.0 || b.se > 0.0 {
                            worst = worst.max(a.z_score(&b));
                        }
                    }
                }
            }
        }
        worst
    }

    /// Largest z-score between an entry and its images under simultaneous
    /// permutations of the coordinate labels.
    pub fn cubic_symmetry_z(&self) -> f64 {
        let d = self.d;
        let perms = permutations(d);
        let mut worst = 0.0f64;
        for idx in 0..self.entries.len() {
            let ijkl = [idx / d.pow(3), (idx / d.pow(2)) % d, (idx / d) % d, idx % d];
            for p in &perms {
                let jdx = Self::index(d, p[ijkl[0]], p[ijkl[1]], p[ijkl[2]], p[ijkl[3]]);
                let a = Estimate { value: self.entries[idx], se: self.se[idx], n: self.n_env };
                let b = Estimate { value: self.entries[jdx], se: self.se[jdx], n: self.n_env };
                if a.se > 0.0 || b.se > 0.0 {
                    worst = worst.max(a.z_score(&b));
                }
            }
        }
        worst
    }

    /// Projection onto the positive semidefinite cone of the form
    /// `(A, B) -> sum K_ijkl A_ij B_kl` on symmetric matrices, after
    /// symmetrizing in `(ij) <-> (kl)`.
    pub fn psd_part(&self) -> KernelTensor {
        let d = self.d;
        let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect();
        let m = pairs.len();
        // orthonormal coordinates on symmetric matrices
        let w = |p: (usize, usize)| if p.0 == p.1 { 1.0 } else { std::f64::consts::SQRT_2 };
        let mut a = vec![vec![0.0; m]; m];
        for (r, &p) in pairs.iter().enumerate() {
            for (c, &q) in pairs.iter().enumerate() {
                let v = 0.5 * (self.get(p.0, p.1, q.0, q.1) + self.get(q.0, q.1, p.0, p.1));
                a[r][c] = v * w(p) * w(q);
            }
        }
        let (vals, vecs) = jacobi_eigen(a);
        let mut out = self.clone();
        for (r, &p) in pairs.iter().enumerate() {
            for (c, &q) in pairs.iter().enumerate() {
                let v: f64 = (0..m).map(|t| vals[t].max(0.0) * vecs[r][t] * vecs[c][t]).sum::<f64>() / (w(p) * w(q));
                for (i, j) in [(p.0, p.1), (p.1, p.0)] {
                    for (k, l) in [(q.0, q.1), (q.1, q.0)] {
                        out.entries[Self::index(d, i, j, k, l)] = v;
                    }
                }
            }
        }
        out
    }

    /// Smallest eigenvalue of the symmetrized form on symmetric matrices.
    pub fn min_eigenvalue(&self) -> f64 {
        let d = self.d;
        let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect();
        let w = |p: (usize, usize)| if p.0 == p.1 { 1.0 } else { std::f64::consts::SQRT_2 };
        let a: Vec<Vec<f64>> = pairs
            .iter()
            .map(|&p| {
                pairs
                    .iter()
                    .map(|&q| 0.5 * (self.get(p.0, p.1, q.0, q.1) + self.get(q.0, q.1, p.0, p.1)) * w(p) * w(q))
                    .collect()
            })
            .collect();
        jacobi_eigen(a).0.into_iter().fold(f64::INFINITY, f64::min)
    }
}

fn permutations(d: usize) -> Vec<Vec<usize>> {
    if d == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(d - 1) {
        for pos in 0..d {
            let mut q = p.clone();
            q.insert(pos, d - 1);
            out.push(q);
        }
    }
    out
}

/// Cyclic Jacobi eigendecomposition of a small symmetric matrix; columns of
/// the returned matrix are eigenvectors.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub d: usize,
    pub l: usize,
    pub law: ConductanceLaw,
    pub n_env: usize,
    pub n_ou: usize,
    pub seed: u64,
    pub lambda: f64,
    pub solver: SolverConfig,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            d: 3,
            l: 24,
            law: ConductanceLaw::default(),
            n_env: 200,
            n_ou: 4,
            seed: 7,
            lambda: 0.0,
            solver: SolverConfig::with_tol(1e-9),
        }
    }
}

/// `X[p][n][x] = eta'(zeta_e)(delta_in + grad_n phi_i(e))(delta_jn + grad_n phi_j(e))`
/// for the edge `e = (x, n)` and the `p`-th pair `i <= j`.
fn flux_products(env: &Environment, grad_phi: &[EdgeField], pairs: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let geom = env.geometry();
    let ep = env.eta_prime();
    pairs
        .iter()
        .map(|&(i, j)| {
            let mut out = vec![0.0; geom.n_edges()];
            for n in 0..geom.d() {
                let off = geom.edge_offset(n);
                let di = if i == n { 1.0 } else { 0.0 };
                let dj = if j == n { 1.0 } else { 0.0 };
                for x in 0..geom.edges_in_direction(n) {
                    let e = off + x;
                    out[e] = ep[e] * (di + grad_phi[i][e]) * (dj + grad_phi[j][e]);
                }
            }
            out
        })
        .collect()
}

/// Estimates `K~_ijkl = sum_n <X_ij(e_n), (1 + L)^{-1} X_kl(e_n)>` on a torus,
/// averaging over all translates of the origin edges. Correctors are
/// re-solved on each OU-resampled environment, warm-started from the
/// unresampled ones.
pub fn estimate_k_tensor(cfg: &KernelConfig) -> Result<KernelTensor> {
    let d = cfg.d;
    let geom = LatticeGeometry::torus(d, cfg.l)?;
    if cfg.n_env < 2 || cfg.n_ou == 0 {
        return Err(HglError::invalid("need n_env >= 2 and n_ou >= 1"));
    }
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect();
    let m = pairs.len();
    let opts = CorrectorOptions { lambda: cfg.lambda, solver: cfg.solver, ..Default::default() };
    let n_sites = geom.n_sites() as f64;
    let per_env: Vec<Result<(Vec<f64>, Matrix)>> = (0..cfg.n_env as u64)
        .into_par_iter()
        .map(|k| {
            let env = Environment::sample(&geom, cfg.law, derive_seed(cfg.seed, 2 * k));
            let mut acc = vec![0.0; m * m];
            let set = CorrectorSet::compute(&env, &opts)?;
            if env.law().is_constant() {
                return Ok((acc, set.a_hom));
            }
            let x0 = flux_products(&env, &set.grad_phi, &pairs);
            for s in 0..cfg.n_ou as u64 {
                let (t, fresh) = ou_draw(derive_seed(cfg.seed, 2 * k + 1), s);
                let moved = env.ou_resample(t, fresh)?;
                let set_t = CorrectorSet::compute_from(&moved, &opts, Some(&set.phi))?;
                let xt = flux_products(&moved, &set_t.grad_phi, &pairs);
                for p in 0..m {
                    for q in 0..m {
                        acc[p * m + q] += x0[p].iter().zip(&xt[q]).map(|(a, b)| a * b).sum::<f64>() / n_sites;
                    }
                }
            }
            acc.iter_mut().for_each(|v| *v /= cfg.n_ou as f64);
            Ok((acc, set.a_hom))
        })
        .collect();
    let failures = per_env.iter().filter(|r| r.is_err()).count();
    let (ok, ahs): (Vec<Vec<f64>>, Vec<Matrix>) = per_env.into_iter().filter_map(|r| r.ok()).unzip();
    if ok.len() < 2 {
        return Err(HglError::invalid("too few successful environments"));
    }
    let mut tensor = KernelTensor::zeros(d);
    tensor.n_env = ok.len();
    tensor.n_ou = cfg.n_ou;
    tensor.failures = failures;
    tensor.l = cfg.l;
    tensor.lambda = cfg.lambda;
    tensor.seed = cfg.seed;
    tensor.law = cfg.law;
    tensor.a_hom = Some(estimate_ahom(&ahs));
    for p in 0..m {
        for q in 0..m {
            let st = RunningStats::from_slice(&ok.iter().map(|v| v[p * m + q]).collect::<Vec<_>>());
            let est = st.mean_estimate();
            let (i, j) = pairs[p];
            let (k, l) = pairs[q];
            for (a, b) in [(i, j), (j, i)] {
                for (c, e) in [(k, l), (l, k)] {
                    let idx = KernelTensor::index(d, a, b, c, e);
                    tensor.entries[idx] = est.value;
                    tensor.se[idx] = est.se;
                }
            }
        }
    }
    Ok(tensor)
}

/// `E[f(Z)]` for a standard Gaussian `Z` by Gauss-Hermite quadrature.
pub fn gaussian_expectation(f: impl Fn(f64) -> f64, nodes: usize) -> f64 {
    let rule = GaussHermite::new(NonZeroUsize::new(nodes).expect("positive"));
    rule.integrate(|x| f(std::f64::consts::SQRT_2 * x)) / std::f64::consts::PI.sqrt()
}

/// `<h, (1 + L)^{-1} h>` for a function `h(zeta)` of one Gaussian, from its
/// Hermite coefficients: `sum_n n! c_n^2 / (n + 1)`.
pub fn single_site_resolvent_form(h: impl Fn(f64) -> f64, order: usize) -> f64 {
    let mut total = 0.0;
    let mut factorial = 1.0;
    for n in 0..=order {
        if n > 0 {
            factorial *= n as f64;
        }
        let proj = gaussian_expectation(|x| h(x) * hermite_he(n, x), 80);
        // c_n = proj / n!, weight n! c_n^2
        total += proj * proj / factorial / (n as f64 + 1.0);
    }
    total
}

/// Probabilists' Hermite polynomial `He_n`.
pub fn hermite_he(n: usize, x: f64) -> f64 {
    let (mut a, mut b) = (1.0, x);
    if n == 0 {
        return a;
    }
    for k in 1..n {
        let c = x * b - k as f64 * a;
        a = b;
        b = c;
    }
    b
}

/// Zero-contrast value of `K~_iiii`: `<eta', (1 + L)^{-1} eta'>` for one edge.
pub fn small_contrast_kernel(law: &ConductanceLaw) -> f64 {
    let law = *law;
    single_site_resolvent_form(move |t| law.eta_prime(t), 40)
}

/// One row of the fourth-moment spectral-gap check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralGapRow {
    pub name: String,
    pub fourth_moment: f64,
    pub rhs: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralGapReport {
    pub rows: Vec<SpectralGapRow>,
    pub rows_doubled: Vec<SpectralGapRow>,
    /// Fitted constant: the largest ratio.
    pub constant: f64,
    pub constant_doubled: f64,
    pub pass: bool,
}

/// `E[(F - EF)^4]` against `(sum_e sqrt(E|F - F^e|^4))^2`, with `F^e` the
/// functional of the environment with `zeta_e` resampled.
pub fn spectral_gap_row(name: &str, f: &dyn Functional, geom: &LatticeGeometry, law: ConductanceLaw, n: usize, seed: u64) -> Result<SpectralGapRow> {
    let n_edges = geom.n_edges();
    let rows: Vec<(f64, Vec<f64>)> = (0..n as u64)
        .into_par_iter()
        .map(|k| {
            let env = Environment::sample(geom, law, derive_seed(seed, k));
            let v = f.eval(&env)?;
            let diffs = (0..n_edges)
                .map(|e| {
                    let pe = env.perturb_edge(e, derive_seed(derive_seed(seed, k), e as u64 + 1))?;
                    Ok((v - f.eval(&pe)?).powi(4))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((v, diffs))
        })
        .collect::<Result<_>>()?;
    let mean = rows.iter().map(|r| r.0).sum::<f64>() / n as f64;
    let fourth = rows.iter().map(|r| (r.0 - mean).powi(4)).sum::<f64>() / n as f64;
    let rhs = (0..n_edges)
        .map(|e| (rows.iter().map(|r| r.1[e]).sum::<f64>() / n as f64).sqrt())
        .sum::<f64>()
        .powi(2);
    Ok(SpectralGapRow { name: name.to_string(), fourth_moment: fourth, rhs, ratio: fourth / rhs })
}

/// Default sweep of functionals for the spectral-gap check: normalized sums,
/// products, chaos of order two and a Green function value.
pub fn spectral_gap_check(n: usize, seed: u64, max_constant: f64) -> Result<SpectralGapReport> {
    let ring = LatticeGeometry::torus(1, 16)?;
    let cube = LatticeGeometry::dirichlet(3, 3)?;
    let law = ConductanceLaw::default();
    let sum = FnFunctional(|env: &Environment| Ok(env.zeta().iter().sum::<f64>() / (env.zeta().len() as f64).sqrt()));
    let prod = FnFunctional(|env: &Environment| Ok(env.zeta()[0] * env.zeta()[1]));
    let chaos2 = FnFunctional(|env: &Environment| {
        Ok(env.zeta().iter().map(|z| z * z - 1.0).sum::<f64>() / (2.0 * env.zeta().len() as f64).sqrt())
    });
    let tanh = FnFunctional(|env: &Environment| Ok(env.zeta().iter().map(|z| z.tanh()).sum::<f64>()));
    let green = GreenValue { x: 13, y: 13, lambda: 0.0, solver: SolverConfig::with_tol(1e-12) };
    let cases: Vec<(&str, &dyn Functional, &LatticeGeometry)> = vec![
        ("normalized-sum", &sum, &ring),
        ("product", &prod, &ring),
        ("second-chaos", &chaos2, &ring),
        ("tanh-sum", &tanh, &ring),
        ("green-center", &green, &cube),
    ];
    let run = |n: usize, seed: u64| -> Result<Vec<SpectralGapRow>> {
        cases.iter().map(|(name, f, g)| spectral_gap_row(name, *f, g, law, n, seed)).collect()
    };
    let rows = run(n, seed)?;
    let rows_doubled = run(2 * n, derive_seed(seed, 99))?;
    let constant = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let constant_doubled = rows_doubled.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let drift = (constant / constant_doubled).max(constant_doubled / constant);
    let pass = constant <= max_constant && constant_doubled <= max_constant && drift < 2.0;
    Ok(SpectralGapReport { rows, rows_doubled, constant, constant_doubled, pass })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(l: usize) -> LatticeGeometry {
        LatticeGeometry::torus(1, l).unwrap()
    }

    #[test]
    fn hermite_values() {
        assert_eq!(hermite_he(0, 0.3), 1.0);
        assert_eq!(hermite_he(1, 0.3), 0.3);
        assert!((hermite_he(3, 2.0) - (8.0 - 6.0)).abs() < 1e-14);
        assert!((gaussian_expectation(|x| x.powi(4), 20) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn resolvent_form_of_eta_prime_is_the_variance() {
        for law in [ConductanceLaw::default(), ConductanceLaw::small_contrast()] {
            let form = small_contrast_kernel(&law);
            let mean = gaussian_expectation(|t| law.eta(t), 80);
            let var = gaussian_expectation(|t| (law.eta(t) - mean).powi(2), 80);
            assert!((form - var).abs() < 1e-6 * var, "{form} vs {var}");
        }
        // h = He_2: <He_2, He_2> / 3 = 2 / 3
        assert!((single_site_resolvent_form(|x| x * x - 1.0, 6) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn resolvent_of_constant_is_exact() {
        let env = Environment::sample(&ring(4), ConductanceLaw::default(), 1);
        let c = FnFunctional(|_: &Environment| Ok(2.5));
        let est = resolvent_apply(&c, &env, 50, 3).unwrap();
        assert_eq!(est.value, 2.5);
        assert_eq!(est.se, 0.0);
    }

    #[test]
    fn resolvent_first_hermite() {
        let env = Environment::sample(&ring(2), ConductanceLaw::default(), 5);
        let f = EdgePower { edge: 0, power: 1, offset: 0.0 };
        let est = resolvent_apply(&f, &env, 20000, 9).unwrap();
        let target = env.zeta()[0] / 2.0;
        assert!((est.value - target).abs() < 3.0 * est.se, "{est:?} vs {target}");
    }

    #[test]
    fn vertical_derivative_constant_law_vanishes() {
        let g = LatticeGeometry::dirichlet(3, 4).unwrap();
        let env = Environment::sample(&g, ConductanceLaw::new_constant(2.0).unwrap(), 3);
        assert_eq!(vertical_derivative_green(&env, 5, 10, 7, 0.0, &SolverConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn vertical_derivative_matches_finite_difference() {
        let g = LatticeGeometry::dirichlet(3, 5).unwrap();
        let env = Environment::sample(&g, ConductanceLaw::default(), 11);
        let cfg = SolverConfig::with_tol(1e-13);
        let (x, y) = (31, 62);
        let f = GreenValue { x, y, lambda: 0.0, solver: cfg };
        for e in [0, 40, 77, 150] {
            let an = vertical_derivative_green(&env, x, y, e, 0.0, &cfg).unwrap();
            let sw = vertical_derivative_green(&env, y, x, e, 0.0, &cfg).unwrap();
            let fd = fd_vertical_derivative(&f, &env, e, 1e-4).unwrap();
            assert!((an - sw).abs() <= 1e-12 * an.abs().max(1e-12));
            assert!((an - fd).abs() <= 1e-3 * an.abs().max(1e-9), "{an} vs {fd}");
        }
    }

    #[test]
    fn hs_identity_for_single_gaussians() {
        let params = HsParams { geometry: ring(2), n_env: 4000, seed: 2, ..Default::default() };
        let z0 = EdgePower { edge: 0, power: 1, offset: 0.0 };
        let z1 = EdgePower { edge: 1, power: 1, offset: 0.0 };
        let same = hs_covariance(&z0, &z0, &params).unwrap();
        assert_eq!(same.hs.value, 1.0);
        let cross = hs_covariance(&z0, &z1, &params).unwrap();
        assert!(cross.hs.value.abs() < 1e-15);
        assert!(cross.direct.value.abs() < 3.0 * cross.direct.se);
    }

    #[test]
    fn kernel_vanishes_for_constant_law() {
        let cfg = KernelConfig { l: 4, n_env: 3, n_ou: 1, law: ConductanceLaw::new_constant(1.0).unwrap(), ..Default::default() };
        let k = estimate_k_tensor(&cfg).unwrap();
        assert!(k.entries.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_symmetric_in_pairs() {
        let cfg = KernelConfig { l: 6, n_env: 8, n_ou: 2, ..Default::default() };
        let k = estimate_k_tensor(&cfg).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for a in 0..3 {
                    for b in 0..3 {
                        assert_eq!(k.get(i, j, a, b), k.get(j, i, a, b));
                        assert_eq!(k.get(i, j, a, b), k.get(i, j, b, a));
                    }
                }
            }
        }
        assert!(k.get(0, 0, 0, 0) > 0.0);
    }

    #[test]
    fn psd_projection_of_indefinite_form() {
        let mut k = KernelTensor::isotropic(3, 1.0);
        k.entries[KernelTensor::index(3, 0, 1, 0, 1)] = -2.0;
        k.entries[KernelTensor::index(3, 1, 0, 1, 0)] = -2.0;
        k.entries[KernelTensor::index(3, 0, 1, 1, 0)] = -2.0;
        k.entries[KernelTensor::index(3, 1, 0, 0, 1)] = -2.0;
        assert!(k.min_eigenvalue() < 0.0);
        let p = k.psd_part();
        assert!(p.min_eigenvalue() > -1e-12);
        let iso = KernelTensor::isotropic(3, 0.7);
        let q = iso.psd_part();
        for (a, b) in iso.entries.iter().zip(&q.entries) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_gap_sum_case() {
        let f = FnFunctional(|env: &Environment| Ok(env.zeta().iter().sum::<f64>() / 4.0));
        let row = spectral_gap_row("sum", &f, &ring(16), ConductanceLaw::default(), 4000, 1).unwrap();
        // E F^4 = 3 and E|F - F^e|^4 = 12 / 16^2, so the ratio is 1/4
        assert!((row.ratio - 0.25).abs() < 0.05, "{row:?}");
    }
}
