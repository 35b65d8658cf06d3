//! Fluctuations of `U_eps(g) = eps^d sum_x u_eps(x) g(x)`, the prediction of
//! the two-scale expansion, the second-order Poincare quantity `kappa^2` and
//! the moment scaling of dilated test functions.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::{CorrectorOptions, CorrectorSet};
use crate::environment::{ConductanceLaw, Environment};
use crate::error::{HglError, Result};
use crate::hs::Functional;
use crate::kernels::{gradient_convolution, green_convolution, Grid, TestFunction, TestFunctionPair, VarianceQuadrature};
use crate::lattice::{dot, Edge, EdgeField, LatticeGeometry, SiteField};
use crate::solver::{solve, solve_from, SolverConfig};
use crate::stats::{derive_seed, ks_normal, log_log_fit, standardize, Estimate, LinearFit, RunningStats};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservableConfig {
    /// Box half-width in units of the largest support extent.
    pub pad: f64,
    /// Overrides the box side computed from `pad`.
    pub box_side: Option<usize>,
    pub solver: SolverConfig,
}

impl Default for ObservableConfig {
    fn default() -> Self {
        ObservableConfig { pad: 2.0, box_side: None, solver: SolverConfig::with_tol(1e-9) }
    }
}

/// Dirichlet box of side `side` whose site `y` sits at `eps (y - c)`,
/// `c = (side - 1) / 2` in every coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableBox {
    pub d: usize,
    pub eps: f64,
    pub side: usize,
}

impl ObservableBox {
    pub fn new(d: usize, eps: f64, extent: f64, cfg: &ObservableConfig) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(HglError::invalid("eps must be positive"));
        }
        let side = match cfg.box_side {
            Some(s) => s,
            None => 2 * (cfg.pad * extent / eps).ceil() as usize + 1,
        };
        let bx = ObservableBox { d, eps, side };
        if bx.half_width() < extent || side < 2 {
            return Err(HglError::invalid(format!(
                "box too small: half-width {:.4} below support extent {:.4}",
                bx.half_width(),
                extent
            )));
        }
        Ok(bx)
    }

    pub fn for_pair(eps: f64, pair: &TestFunctionPair, cfg: &ObservableConfig) -> Result<Self> {
        if pair.f.d() != pair.g.d() {
            return Err(HglError::GeometryMismatch("f and g dimensions".into()));
        }
        Self::new(pair.f.d(), eps, pair.f.extent().max(pair.g.extent()), cfg)
    }

    pub fn center(&self) -> f64 {
        (self.side as f64 - 1.0) / 2.0
    }

    pub fn half_width(&self) -> f64 {
        self.center() * self.eps
    }

    pub fn geometry(&self) -> LatticeGeometry {
        LatticeGeometry::dirichlet(self.d, self.side).expect("valid box")
    }

    /// Torus whose Dirichlet window is the box.
    pub fn torus(&self) -> LatticeGeometry {
        LatticeGeometry::torus(self.d, self.side + 1).expect("valid torus")
    }

    pub fn grid(&self) -> Grid {
        Grid { d: self.d, h: self.eps, n: self.side, origin: -self.center() * self.eps }
    }

    pub fn sample(&self, t: &TestFunction) -> SiteField {
        self.grid().sample(t)
    }

    pub fn torus_environment(&self, law: ConductanceLaw, seed: u64) -> Environment {
        Environment::sample(&self.torus(), law, seed)
    }

    pub fn environment(&self, law: ConductanceLaw, seed: u64) -> Result<Environment> {
        self.torus_environment(law, seed).dirichlet_window()
    }

    /// The environment restricted to the box: as is, or the Dirichlet window
    /// of the congruent torus.
    pub fn boxed<'a>(&self, env: &'a Environment) -> Result<Cow<'a, Environment>> {
        let g = env.geometry();
        if *g == self.geometry() {
            Ok(Cow::Borrowed(env))
        } else if *g == self.torus() {
            Ok(Cow::Owned(env.dirichlet_window()?))
        } else {
            Err(HglError::GeometryMismatch(format!("environment {:?} does not fit box side {}", g.shape(), self.side)))
        }
    }
}

/// The central sub-box of side `side` of a Dirichlet-box environment.
pub fn sub_box(env: &Environment, side: usize) -> Result<Environment> {
    let g = env.geometry();
    if g.is_periodic() || g.shape().iter().any(|&l| l < side || (l - side) % 2 != 0) {
        return Err(HglError::invalid("sub-box needs a larger Dirichlet box of matching parity"));
    }
    let off = ((g.shape()[0] - side) / 2) as i64;
    let small = LatticeGeometry::dirichlet(g.d(), side)?;
    let zeta: Vec<f64> = (0..small.n_edges())
        .map(|e| {
            let Edge { base, dir } = small.edge_from_index(e);
            let moved: Vec<i64> = base.iter().map(|b| b + off).collect();
            env.zeta()[g.edge_index(&Edge { base: moved, dir }).expect("inside")]
        })
        .collect();
    Environment::from_parts(small, zeta, env.seed(), env.law())
}

fn check_fields(env: &Environment, a: &[f64], b: &[f64]) -> Result<()> {
    let n = env.geometry().n_sites();
    if a.len() != n || b.len() != n {
        return Err(HglError::GeometryMismatch("gridded test functions do not match the box".into()));
    }
    Ok(())
}

/// `u` solving `div*(a grad u) = f(eps .)` on the box (zero when `f = 0`).
fn solve_box(env: &Environment, rhs: &[f64], solver: &SolverConfig) -> Result<SiteField> {
    if rhs.iter().all(|&v| v == 0.0) {
        return Ok(vec![0.0; rhs.len()]);
    }
    Ok(solve(env.geometry(), &env.conductances(), 0.0, rhs, solver)?.u)
}

/// `U_eps(g)` for one environment.
pub fn observable(env: &Environment, eps: f64, pair: &TestFunctionPair, cfg: &ObservableConfig) -> Result<f64> {
    let bx = ObservableBox::for_pair(eps, pair, cfg)?;
    let env = bx.boxed(env)?;
    let (fs, gs) = (bx.sample(&pair.f), bx.sample(&pair.g));
    observable_gridded(&env, eps, &fs, &[gs], &cfg.solver).map(|v| v[0])
}

/// `U_eps(g)` for several gridded `g` sharing one solve.
pub fn observable_gridded(env: &Environment, eps: f64, f: &[f64], gs: &[SiteField], solver: &SolverConfig) -> Result<Vec<f64>> {
    for g in gs {
        check_fields(env, f, g)?;
    }
    let u = solve_box(env, f, solver)?;
    let w = eps.powi(env.geometry().d() as i32 + 2);
    Ok(gs.iter().map(|g| w * dot(&u, g)).collect())
}

/// `U_eps(g)` as a functional of the environment, with the analytic vertical
/// derivative `d_e U = -eps^{d+2} eta'(zeta_e) grad_e v grad_e u`, where `v`
/// solves the problem with right-hand side `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservableFunctional {
    pub bx: ObservableBox,
    pub f: SiteField,
    pub g: SiteField,
    pub solver: SolverConfig,
}

impl ObservableFunctional {
    pub fn new(eps: f64, pair: &TestFunctionPair, cfg: &ObservableConfig) -> Result<Self> {
        let bx = ObservableBox::for_pair(eps, pair, cfg)?;
        Ok(ObservableFunctional { bx, f: bx.sample(&pair.f), g: bx.sample(&pair.g), solver: cfg.solver })
    }
}

impl Functional for ObservableFunctional {
    fn eval(&self, env: &Environment) -> Result<f64> {
        let env = self.bx.boxed(env)?;
        observable_gridded(&env, self.bx.eps, &self.f, std::slice::from_ref(&self.g), &self.solver).map(|v| v[0])
    }

    fn gradient(&self, env: &Environment) -> Result<Option<EdgeField>> {
        if *env.geometry() != self.bx.geometry() {
            return Err(HglError::GeometryMismatch("gradient needs the box environment".into()));
        }
        let geom = env.geometry();
        let gu = geom.grad(&solve_box(env, &self.f, &self.solver)?)?;
        let gv = geom.grad(&solve_box(env, &self.g, &self.solver)?)?;
        let w = self.bx.eps.powi(geom.d() as i32 + 2);
        let ep = env.eta_prime();
        Ok(Some((0..gu.len()).map(|e| -w * ep[e] * gu[e] * gv[e]).collect()))
    }
}

/// `u_h = G_h * f` and its gradient on a grid, for `a_h = a_bar I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomogenizedSolution {
    pub grid: Grid,
    pub a_bar: f64,
    pub u: Vec<f64>,
    pub grad: Vec<Vec<f64>>,
}

pub fn homogenized_solution(a_bar: f64, f: &[f64], grid: &Grid) -> Result<HomogenizedSolution> {
    if f.len() != grid.len() {
        return Err(HglError::GeometryMismatch("source does not match grid".into()));
    }
    if !(a_bar > 0.0) {
        return Err(HglError::NotPositiveDefinite);
    }
    Ok(HomogenizedSolution {
        grid: grid.clone(),
        a_bar,
        u: green_convolution(a_bar, grid, f),
        grad: gradient_convolution(a_bar, grid, f),
    })
}

impl HomogenizedSolution {
    /// Relative `l^2` defect of `-a_bar Delta_h u_h = f` at interior nodes.
    pub fn laplacian_residual(&self, f: &[f64]) -> f64 {
        let g = &self.grid;
        let n = g.n;
        let mut num = 0.0;
        let mut den = 0.0;
        let mut strides = vec![1usize; g.d];
        for j in 1..g.d {
            strides[j] = strides[j - 1] * n;
        }
        for idx in 0..g.len() {
            let interior = (0..g.d).all(|j| {
                let m = (idx / strides[j]) % n;
                m > 0 && m + 1 < n
            });
            if !interior {
                continue;
            }
            let lap: f64 = strides.iter().map(|&s| self.u[idx + s] + self.u[idx - s] - 2.0 * self.u[idx]).sum::<f64>()
                / (g.h * g.h);
            num += (-self.a_bar * lap - f[idx]).powi(2);
            den += f[idx] * f[idx];
        }
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }
}

/// Box-site weights `eps^{d+1} d_k u_h g` of the two-scale observable.
fn corrector_weights(uh: &HomogenizedSolution, g: &[f64]) -> Vec<Vec<f64>> {
    let d = uh.grid.d;
    let w = uh.grid.h.powi(d as i32 + 1);
    (0..d).map(|k| uh.grad[k].iter().zip(g).map(|(a, b)| w * a * b).collect()).collect()
}

fn corrector_sum(torus: &LatticeGeometry, side: usize, weights: &[Vec<f64>], correctors: &CorrectorSet) -> f64 {
    let d = weights.len();
    let n = side.pow(d as u32);
    let mut acc = 0.0;
    let mut c = vec![0i64; d];
    for y in 0..n {
        let mut t = y;
        for cj in c.iter_mut() {
            *cj = (t % side) as i64;
            t /= side;
        }
        let ty = torus.site_index(&c).expect("periodic");
        for k in 0..d {
            acc += weights[k][y] * correctors.phi[k][ty];
        }
    }
    acc
}

/// `eps^d sum_x eps grad u_h(x) . phi(x / eps) g(x)` over the box, with the
/// correctors of the congruent torus.
pub fn corrector_observable(env: &Environment, eps: f64, uh: &HomogenizedSolution, g: &TestFunction, correctors: &CorrectorSet) -> Result<f64> {
    let side = uh.grid.n;
    let bx = ObservableBox { d: uh.grid.d, eps, side };
    if (uh.grid.h - eps).abs() > 1e-12 * eps || *env.geometry() != bx.torus() {
        return Err(HglError::GeometryMismatch("correctors must live on the torus congruent to the box".into()));
    }
    if correctors.d() != bx.d || correctors.phi.iter().any(|p| p.len() != env.geometry().n_sites()) {
        return Err(HglError::GeometryMismatch("corrector fields do not match the torus".into()));
    }
    let gs = bx.sample(g);
    Ok(corrector_sum(env.geometry(), side, &corrector_weights(uh, &gs), correctors))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FluctuationConfig {
    pub law: ConductanceLaw,
    pub pair: TestFunctionPair,
    pub eps: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
    pub observable: ObservableConfig,
    /// Values of `eps` at which the two-scale observable is also sampled.
    pub corrector_eps: Vec<f64>,
    /// Scalar homogenized coefficient for `u_h`; required with `corrector_eps`.
    pub a_bar: Option<f64>,
    /// Environments recomputed in a box with doubled pad.
    pub pad_check: usize,
}

impl Default for FluctuationConfig {
    fn default() -> Self {
        let f = default_bump();
        FluctuationConfig {
            law: ConductanceLaw::default(),
            pair: TestFunctionPair { f: f.clone(), g: f },
            eps: vec![0.125, 0.0625],
            n_samples: 100,
            seed: 11,
            observable: ObservableConfig::default(),
            corrector_eps: Vec::new(),
            a_bar: None,
            pad_check: 0,
        }
    }
}

/// The bump used for `f` and `g` in the fluctuation experiments.
pub fn default_bump() -> TestFunction {
    TestFunction { center: vec![0.0; 3], amplitude: 1.0, width: 0.25, radius: 0.5 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectorComparison {
    pub variance: Estimate,
    pub rescaled: Estimate,
    /// Rescaled variance of the observable minus that of the two-scale one,
    /// with the combined standard error.
    pub difference: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCheck {
    pub n: usize,
    pub side: usize,
    /// Mean of `(U_big - U)` in units of the sample standard deviation of `U`.
    pub shift: Estimate,
    /// Sample variance in the big box over that in the nominal box.
    pub variance_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluctuationRow {
    pub eps: f64,
    pub side: usize,
    pub n: usize,
    pub failures: usize,
    pub mean: Estimate,
    pub variance: Estimate,
    /// `eps^{-d} Var U`.
    pub rescaled: Estimate,
    pub ks_statistic: f64,
    pub ks_p: f64,
    pub seeds: Vec<u64>,
    pub samples: Vec<f64>,
    pub standardized: Vec<f64>,
    pub corrector: Option<CorrectorComparison>,
    pub boundary: Option<BoundaryCheck>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluctuationReport {
    pub config: FluctuationConfig,
    pub rows: Vec<FluctuationRow>,
    pub sigma2: Option<VarianceQuadrature>,
    pub sigma_tilde2: Option<VarianceQuadrature>,
    pub kappa: Option<KappaReport>,
    pub moments: Option<MomentTable>,
}

impl FluctuationReport {
    /// `|eps^{-d} Var - sigma_g^2| / sigma_g^2` per row.
    pub fn relative_gaps(&self) -> Option<Vec<f64>> {
        let s = self.sigma2.as_ref()?.sigma2;
        Some(self.rows.iter().map(|r| (r.rescaled.value - s).abs() / s.abs()).collect())
    }

    /// Gaps strictly decreasing along rows ordered by decreasing `eps`.
    pub fn gaps_decreasing(&self) -> Option<bool> {
        let mut rows: Vec<(f64, f64)> =
            self.rows.iter().map(|r| r.eps).zip(self.relative_gaps()?).collect();
        rows.sort_by(|a, b| b.0.total_cmp(&a.0));
        Some(rows.windows(2).all(|w| w[1].1 < w[0].1))
    }
}

/// Seed of environment `k` at the `j`-th value of `eps`.
pub fn sample_seed(seed: u64, j: usize, k: usize) -> u64 {
    derive_seed(derive_seed(seed, j as u64), k as u64)
}

type SampleRow = (u64, f64, Option<f64>);

/// Monte Carlo samples of `U_eps(g)` (and the two-scale observable) at each
/// `eps`; failed solves are counted and excluded.
pub fn mc_fluctuation(cfg: &FluctuationConfig) -> Result<FluctuationReport> {
    if cfg.n_samples < 2 {
        return Err(HglError::invalid("need at least two samples"));
    }
    let d = cfg.pair.f.d();
    let mut rows = Vec::new();
    for (j, &eps) in cfg.eps.iter().enumerate() {
        let bx = ObservableBox::for_pair(eps, &cfg.pair, &cfg.observable)?;
        let fs = bx.sample(&cfg.pair.f);
        let gs = bx.sample(&cfg.pair.g);
        let with_corr = cfg.corrector_eps.iter().any(|&e| (e - eps).abs() < 1e-12 * eps);
        let weights = if with_corr {
            let a_bar = cfg.a_bar.ok_or_else(|| HglError::invalid("two-scale observable needs a_bar"))?;
            let uh = homogenized_solution(a_bar, &fs, &bx.grid())?;
            Some(corrector_weights(&uh, &gs))
        } else {
            None
        };
        let copts = CorrectorOptions { solver: cfg.observable.solver, ..Default::default() };
        let results: Vec<Result<SampleRow>> = (0..cfg.n_samples)
            .into_par_iter()
            .map(|k| {
                let seed = sample_seed(cfg.seed, j, k);
                let torus_env = bx.torus_environment(cfg.law, seed);
                let env = torus_env.dirichlet_window()?;
                let u = observable_gridded(&env, eps, &fs, std::slice::from_ref(&gs), &cfg.observable.solver)?[0];
                let c = match &weights {
                    Some(w) => {
                        let set = CorrectorSet::compute(&torus_env, &copts)?;
                        Some(corrector_sum(torus_env.geometry(), bx.side, w, &set))
                    }
                    None => None,
                };
                Ok((seed, u, c))
            })
            .collect();
        let failures = results.iter().filter(|r| r.is_err()).count();
        let ok: Vec<SampleRow> = results.into_iter().filter_map(|r| r.ok()).collect();
        if ok.len() < 2 {
            return Err(HglError::invalid(format!("too few successful samples at eps = {eps}")));
        }
        let samples: Vec<f64> = ok.iter().map(|r| r.1).collect();
        let st = RunningStats::from_slice(&samples);
        let variance = st.variance_estimate();
        let scale = eps.powi(-(d as i32));
        let rescaled = Estimate { value: variance.value * scale, se: variance.se * scale, n: variance.n };
        let standardized = if st.variance() > 0.0 { standardize(&samples) } else { vec![0.0; samples.len()] };
        let (ks_statistic, ks_p) = if st.variance() > 0.0 { ks_normal(&standardized) } else { (0.0, 1.0) };
        let corrector = weights.as_ref().map(|_| {
            let cs: Vec<f64> = ok.iter().map(|r| r.2.expect("sampled")).collect();
            let v = RunningStats::from_slice(&cs).variance_estimate();
            let r = Estimate { value: v.value * scale, se: v.se * scale, n: v.n };
            CorrectorComparison {
                variance: v,
                rescaled: r,
                difference: Estimate { value: rescaled.value - r.value, se: rescaled.se.hypot(r.se), n: v.n },
            }
        });
        let boundary = if cfg.pad_check > 0 {
            Some(boundary_check(cfg, j, &bx, st.std_dev())?)
        } else {
            None
        };
        rows.push(FluctuationRow {
            eps,
            side: bx.side,
            n: ok.len(),
            failures,
            mean: st.mean_estimate(),
            variance,
            rescaled,
            ks_statistic,
            ks_p,
            seeds: ok.iter().map(|r| r.0).collect(),
            samples,
            standardized,
            corrector,
            boundary,
        });
    }
    Ok(FluctuationReport { config: cfg.clone(), rows, sigma2: None, sigma_tilde2: None, kappa: None, moments: None })
}

/// Recomputes the first environments in a box with doubled pad; the nominal
/// box is the central sub-box of the big one.
fn boundary_check(cfg: &FluctuationConfig, j: usize, bx: &ObservableBox, sd: f64) -> Result<BoundaryCheck> {
    let eps = bx.eps;
    let big_side = 2 * bx.side - 1 + ((bx.side + 1) % 2);
    let big = ObservableBox { side: big_side, ..*bx };
    let (fb, gb) = (big.sample(&cfg.pair.f), big.sample(&cfg.pair.g));
    let (fs, gs) = (bx.sample(&cfg.pair.f), bx.sample(&cfg.pair.g));
    let n = cfg.pad_check.min(cfg.n_samples);
    let pairs: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let env = big.environment(cfg.law, derive_seed(sample_seed(cfg.seed, j, k), 99))?;
            let ub = observable_gridded(&env, eps, &fb, std::slice::from_ref(&gb), &cfg.observable.solver)?[0];
            let small = sub_box(&env, bx.side)?;
            let us = observable_gridded(&small, eps, &fs, std::slice::from_ref(&gs), &cfg.observable.solver)?[0];
            Ok((ub, us))
        })
        .collect::<Result<_>>()?;
    let shifts: Vec<f64> = pairs.iter().map(|(b, s)| if sd > 0.0 { (b - s) / sd } else { 0.0 }).collect();
    let vb = RunningStats::from_slice(&pairs.iter().map(|p| p.0).collect::<Vec<_>>()).variance();
    let vs = RunningStats::from_slice(&pairs.iter().map(|p| p.1).collect::<Vec<_>>()).variance();
    Ok(BoundaryCheck {
        n,
        side: big_side,
        shift: RunningStats::from_slice(&shifts).mean_estimate(),
        variance_ratio: if vs > 0.0 { vb / vs } else { 1.0 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KappaConfig {
    pub law: ConductanceLaw,
    pub pair: TestFunctionPair,
    pub eps: Vec<f64>,
    pub n_env: usize,
    /// Sampled edges `e'` per `eps`; the doubling check uses twice as many.
    pub n_edges: usize,
    pub seed: u64,
    pub observable: ObservableConfig,
    pub doubling: bool,
}

impl Default for KappaConfig {
    fn default() -> Self {
        let f = default_bump();
        KappaConfig {
            law: ConductanceLaw::default(),
            pair: TestFunctionPair { f: f.clone(), g: f },
            eps: vec![0.125, 0.0625, 0.03125],
            n_env: 12,
            n_edges: 24,
            seed: 13,
            observable: ObservableConfig::default(),
            doubling: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaRow {
    pub eps: f64,
    pub side: usize,
    pub n_env: usize,
    pub n_edges: usize,
    /// Horvitz-Thompson estimate over all sampled edges.
    pub kappa2: Estimate,
    /// The same estimate from the first half of the sample.
    pub kappa2_half: Option<Estimate>,
    pub variance: Estimate,
    pub ratio: f64,
    /// `eps^d |log eps|^2`.
    pub rate: f64,
}

impl KappaRow {
    /// `|kappa2 - kappa2_half|` in units of the half-sample standard error.
    pub fn doubling_z(&self) -> Option<f64> {
        let h = self.kappa2_half?;
        Some(if h.se > 0.0 { (self.kappa2.value - h.value).abs() / h.se } else { 0.0 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaReport {
    pub config: KappaConfig,
    pub rows: Vec<KappaRow>,
    /// Log-log fit of `kappa^2 / Var^2` against `eps`.
    pub slope: Option<LinearFit>,
}

/// Edge sampling probabilities proportional to `(1 + eps |e - c| / R)^{-2(d-1)}`,
/// the decay of the outer summand.
fn edge_weights(geom: &LatticeGeometry, bx: &ObservableBox, radius: f64) -> Vec<f64> {
    let d = geom.d();
    let c = bx.center();
    let w: Vec<f64> = (0..geom.n_edges())
        .map(|e| {
            let ed = geom.edge_from_index(e);
            let r: f64 = (0..d)
                .map(|i| {
                    let x = ed.base[i] as f64 + if i == ed.dir { 0.5 } else { 0.0 } - c;
                    x * x
                })
                .sum::<f64>()
                .sqrt();
            (1.0 + bx.eps * r / radius).powf(-2.0 * (d as f64 - 1.0))
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn sample_edges(probs: &[f64], m: usize, seed: u64) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in probs {
        acc += p;
        cdf.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * acc;
            cdf.partition_point(|&c| c < u).min(probs.len() - 1)
        })
        .collect()
}

struct EnvData {
    env: Environment,
    a: EdgeField,
    gu: EdgeField,
    gv: EdgeField,
    value: f64,
}

/// `kappa^2 = sum_{e'} (sum_e ||d_e U||_4 ||d_e d_{e'} U||_4)^2` with the
/// outer sum importance-sampled, together with `Var U` from the same
/// environments.
pub fn kappa_bound(cfg: &KappaConfig) -> Result<KappaReport> {
    if cfg.n_env < 4 || cfg.n_edges == 0 {
        return Err(HglError::invalid("need n_env >= 4 and n_edges >= 1"));
    }
    let d = cfg.pair.f.d();
    let mut rows = Vec::new();
    for (j, &eps) in cfg.eps.iter().enumerate() {
        let bx = ObservableBox::for_pair(eps, &cfg.pair, &cfg.observable)?;
        let geom = bx.geometry();
        let (fs, gs) = (bx.sample(&cfg.pair.f), bx.sample(&cfg.pair.g));
        let w = eps.powi(d as i32 + 2);
        let solver = cfg.observable.solver;
        let data: Vec<EnvData> = (0..cfg.n_env)
            .into_par_iter()
            .map(|k| {
                let env = bx.environment(cfg.law, sample_seed(cfg.seed, j, k))?;
                let a = env.conductances();
                let u = solve_box(&env, &fs, &solver)?;
                let v = solve_box(&env, &gs, &solver)?;
                let value = w * dot(&u, &gs);
                Ok(EnvData { gu: geom.grad(&u)?, gv: geom.grad(&v)?, env, a, value })
            })
            .collect::<Result<_>>()?;
        let m_env = data.len() as f64;
        let variance = RunningStats::from_slice(&data.iter().map(|x| x.value).collect::<Vec<_>>()).variance_estimate();
        let n_e = geom.n_edges();
        // ||d_e U||_4
        let mut first = vec![0.0; n_e];
        for x in &data {
            let ep = x.env.eta_prime();
            for e in 0..n_e {
                first[e] += (w * ep[e] * x.gu[e] * x.gv[e]).powi(4);
            }
        }
        first.iter_mut().for_each(|s| *s = (*s / m_env).powf(0.25));
        let law_constant = cfg.law.is_constant();
        let probs = edge_weights(&geom, &bx, cfg.pair.f.radius.max(cfg.pair.g.radius));
        let m_total = if cfg.doubling { 2 * cfg.n_edges } else { cfg.n_edges };
        let picks = sample_edges(&probs, m_total, derive_seed(cfg.seed, 1000 + j as u64));
        let terms: Vec<f64> = picks
            .iter()
            .map(|&ep_idx| {
                if law_constant {
                    return Ok(0.0);
                }
                let mut second = vec![0.0; n_e];
                let mut ind = vec![0.0; n_e];
                ind[ep_idx] = 1.0;
                let rhs = geom.div(&ind)?;
                for x in &data {
                    let eta1 = x.env.eta_prime();
                    let eta2 = x.env.eta_second();
                    let wsol = solve_from(&geom, &x.a, 0.0, &rhs, None, &solver)?.u;
                    let gw = geom.grad(&wsol)?;
                    let cu = -eta1[ep_idx] * x.gu[ep_idx];
                    let cv = -eta1[ep_idx] * x.gv[ep_idx];
                    for e in 0..n_e {
                        let mut val = eta1[e] * (cv * gw[e] * x.gu[e] + x.gv[e] * cu * gw[e]);
                        if e == ep_idx {
                            val += eta2[e] * x.gv[e] * x.gu[e];
                        }
                        second[e] += (w * val).powi(4);
                    }
                }
                let inner: f64 = (0..n_e).map(|e| first[e] * (second[e] / m_env).powf(0.25)).sum();
                Ok(inner * inner / probs[ep_idx])
            })
            .collect::<Result<_>>()?;
        let est = |ts: &[f64]| {
            let s = RunningStats::from_slice(ts);
            let mut e = s.mean_estimate();
            if ts.len() < 2 || s.variance() == 0.0 {
                e.se = 0.0;
            }
            e
        };
        let kappa2 = est(&terms);
        let kappa2_half = cfg.doubling.then(|| est(&terms[..cfg.n_edges]));
        let var2 = variance.value * variance.value;
        rows.push(KappaRow {
            eps,
            side: bx.side,
            n_env: data.len(),
            n_edges: m_total,
            kappa2,
            kappa2_half,
            variance,
            ratio: if var2 > 0.0 { kappa2.value / var2 } else { 0.0 },
            rate: eps.powi(d as i32) * eps.ln().powi(2),
        });
    }
    let slope = (rows.len() >= 2 && rows.iter().all(|r| r.ratio > 0.0)).then(|| {
        log_log_fit(&rows.iter().map(|r| r.eps).collect::<Vec<_>>(), &rows.iter().map(|r| r.ratio).collect::<Vec<_>>())
    });
    Ok(KappaReport { config: cfg.clone(), rows, slope })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MomentConfig {
    pub law: ConductanceLaw,
    pub f: TestFunction,
    /// `g_1`; the family is `g_lambda = lambda^{-d} g((x - c) / lambda + c)`.
    pub g: TestFunction,
    pub lambdas: Vec<f64>,
    pub ps: Vec<f64>,
    pub eps: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub observable: ObservableConfig,
}

impl Default for MomentConfig {
    fn default() -> Self {
        MomentConfig {
            law: ConductanceLaw::default(),
            f: default_bump(),
            g: TestFunction { center: vec![0.3, 0.0, 0.0], amplitude: 1.0, width: 0.5, radius: 1.0 },
            lambdas: vec![0.5, 0.25, 0.125],
            ps: vec![2.0, 4.0],
            eps: 0.0625,
            n_samples: 100,
            seed: 11,
            observable: ObservableConfig { pad: 1.25, ..Default::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub lambda: f64,
    pub p: f64,
    /// `(E|S U(g_lambda)|^p)^{1/p}` with `S U = eps^{-d/2}(U - mean)`.
    pub moment: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentTable {
    pub config: MomentConfig,
    pub side: usize,
    pub n: usize,
    pub rows: Vec<MomentRow>,
    /// Per `p`: log-log fit of the moment against `lambda`.
    pub slopes: Vec<(f64, LinearFit)>,
    /// Moments increase as `lambda` decreases, for every `p`.
    pub monotone: bool,
}

impl MomentTable {
    pub fn slope(&self, p: f64) -> Option<LinearFit> {
        self.slopes.iter().find(|(q, _)| (q - p).abs() < 1e-12).map(|(_, f)| *f)
    }
}

/// Moments of dilated test functions in one box with one solve per
/// environment.
pub fn moment_scaling(cfg: &MomentConfig) -> Result<MomentTable> {
    if cfg.n_samples < 2 || cfg.lambdas.is_empty() {
        return Err(HglError::invalid("need samples and dilation parameters"));
    }
    let d = cfg.f.d();
    let family: Vec<TestFunction> = cfg.lambdas.iter().map(|&l| cfg.g.dilate(l)).collect();
    let extent = family.iter().map(|g| g.extent()).fold(cfg.f.extent(), f64::max);
    let bx = ObservableBox::new(d, cfg.eps, extent, &cfg.observable)?;
    let fs = bx.sample(&cfg.f);
    let gs: Vec<SiteField> = family.iter().map(|g| bx.sample(g)).collect();
    let values: Vec<Vec<f64>> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|k| {
            let env = bx.environment(cfg.law, sample_seed(cfg.seed, 0, k))?;
            observable_gridded(&env, cfg.eps, &fs, &gs, &cfg.observable.solver)
        })
        .collect::<Result<_>>()?;
    let scale = cfg.eps.powf(-(d as f64) / 2.0);
    let mut rows = Vec::new();
    for (li, &lambda) in cfg.lambdas.iter().enumerate() {
        let xs: Vec<f64> = values.iter().map(|v| v[li]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        for &p in &cfg.ps {
            let m = xs.iter().map(|x| (scale * (x - mean)).abs().powf(p)).sum::<f64>() / xs.len() as f64;
            rows.push(MomentRow { lambda, p, moment: m.powf(1.0 / p) });
        }
    }
    let mut slopes = Vec::new();
    let mut monotone = true;
    for &p in &cfg.ps {
        let mut sel: Vec<&MomentRow> = rows.iter().filter(|r| r.p == p).collect();
        sel.sort_by(|a, b| b.lambda.total_cmp(&a.lambda));
        monotone &= sel.windows(2).all(|w| w[1].moment > w[0].moment);
        if sel.len() >= 2 && sel.iter().all(|r| r.moment > 0.0) {
            slopes.push((
                p,
                log_log_fit(&sel.iter().map(|r| r.lambda).collect::<Vec<_>>(), &sel.iter().map(|r| r.moment).collect::<Vec<_>>()),
            ));
        }
    }
    Ok(MomentTable { config: cfg.clone(), side: bx.side, n: values.len(), rows, slopes, monotone })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hs::{hs_covariance, vertical_gradient, HsParams};

    fn pair() -> TestFunctionPair {
        let f = default_bump();
        TestFunctionPair { f: f.clone(), g: f }
    }

    fn small_cfg() -> ObservableConfig {
        ObservableConfig { box_side: Some(8), ..Default::default() }
    }

    #[test]
    fn zero_test_functions_give_zero() {
        let bx = ObservableBox::for_pair(0.25, &pair(), &small_cfg()).unwrap();
        let env = bx.environment(ConductanceLaw::default(), 3).unwrap();
        let zf = TestFunctionPair { f: TestFunction::zero(3), g: default_bump() };
        assert_eq!(observable(&env, 0.25, &zf, &small_cfg()).unwrap(), 0.0);
        let zg = TestFunctionPair { f: default_bump(), g: TestFunction::zero(3) };
        assert_eq!(observable(&env, 0.25, &zg, &small_cfg()).unwrap(), 0.0);
    }

    #[test]
    fn box_too_small_is_rejected() {
        let cfg = ObservableConfig { box_side: Some(4), ..Default::default() };
        assert!(ObservableBox::for_pair(0.25, &pair(), &cfg).is_err());
    }

    #[test]
    fn observable_is_linear_in_f() {
        let cfg = ObservableConfig { box_side: Some(9), solver: SolverConfig::with_tol(1e-12), ..Default::default() };
        let bx = ObservableBox::for_pair(0.25, &pair(), &cfg).unwrap();
        let env = bx.environment(ConductanceLaw::default(), 5).unwrap();
        let f2 = TestFunction::bump(vec![0.25, 0.0, 0.0], 2.0, 0.2, 0.4).unwrap();
        let g = default_bump();
        let (f1s, f2s, gs) = (bx.sample(&pair().f), bx.sample(&f2), bx.sample(&g));
        let comb: Vec<f64> = f1s.iter().zip(&f2s).map(|(a, b)| 1.7 * a + b).collect();
        let s = &cfg.solver;
        let u1 = observable_gridded(&env, 0.25, &f1s, std::slice::from_ref(&gs), s).unwrap()[0];
        let u2 = observable_gridded(&env, 0.25, &f2s, std::slice::from_ref(&gs), s).unwrap()[0];
        let uc = observable_gridded(&env, 0.25, &comb, std::slice::from_ref(&gs), s).unwrap()[0];
        assert!((uc - 1.7 * u1 - u2).abs() < 1e-9 * uc.abs());
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let cfg = ObservableConfig { box_side: Some(8), solver: SolverConfig::with_tol(1e-13), ..Default::default() };
        let func = ObservableFunctional::new(0.25, &pair(), &cfg).unwrap();
        let env = func.bx.environment(ConductanceLaw::default(), 9).unwrap();
        let edges = [0, 100, 700, 1200];
        let an = vertical_gradient(&func, &env, &edges, 1e-4).unwrap();
        for (k, &e) in edges.iter().enumerate() {
            let fd = crate::hs::fd_vertical_derivative(&func, &env, e, 1e-4).unwrap();
            assert!((an[k] - fd).abs() < 1e-6 * (an[k].abs() + 1e-12) + 1e-14, "{e}: {} vs {fd}", an[k]);
        }
    }

    #[test]
    fn constant_conductances_match_continuum_and_converge() {
        let law = ConductanceLaw::new_constant(2.0).unwrap();
        let p = pair();
        let exact = {
            let grid = Grid::centered(3, 1.0 / 32.0, 0.6).unwrap();
            let fs = grid.sample(&p.f);
            let uh = homogenized_solution(2.0, &fs, &grid).unwrap();
            grid.cell_volume() * dot(&uh.u, &fs)
        };
        // the grounded box lowers U by a term ~ 1/H in the half-width H;
        // two pads remove it before comparing with the whole-space value
        let mut errs = Vec::new();
        for eps in [0.25, 0.125] {
            let mut vals = Vec::new();
            for pad in [4.0, 8.0] {
                let cfg = ObservableConfig { pad, solver: SolverConfig::with_tol(1e-11), ..Default::default() };
                let bx = ObservableBox::for_pair(eps, &p, &cfg).unwrap();
                let env = bx.environment(law, 1).unwrap();
                vals.push((bx.half_width(), observable(&env, eps, &p, &cfg).unwrap()));
            }
            let ((h1, u1), (h2, u2)) = (vals[0], vals[1]);
            let extrapolated = (h2 * u2 - h1 * u1) / (h2 - h1);
            errs.push((extrapolated - exact).abs() / exact);
        }
        assert!(errs[1] < errs[0], "{errs:?}");
        assert!(errs[1] < 0.05, "{errs:?}");
    }

    #[test]
    fn homogenized_solution_oracles() {
        let grid = Grid::centered(3, 1.0 / 32.0, 1.0).unwrap();
        let f = default_bump();
        let fs = grid.sample(&f);
        let uh = homogenized_solution(1.5, &fs, &grid).unwrap();
        assert!(uh.laplacian_residual(&fs) < 0.01, "{}", uh.laplacian_residual(&fs));
        let z = homogenized_solution(1.5, &vec![0.0; grid.len()], &grid).unwrap();
        assert!(z.u.iter().all(|&v| v == 0.0));
        // radial potential u(r) = int_r^inf m(s) / (a 4 pi s^2) ds
        let center = (grid.n / 2) * (1 + grid.n + grid.n * grid.n);
        let gl = gauss_quad::GaussLegendre::new(std::num::NonZeroUsize::new(80).unwrap());
        let expect = gl.integrate(0.0, 0.5, |s| f.mass_within(s) / (1.5 * 4.0 * std::f64::consts::PI * s * s))
            + f.mass() / (1.5 * 4.0 * std::f64::consts::PI * 0.5);
        assert!((uh.u[center] / expect - 1.0).abs() < 0.01);
    }

    #[test]
    fn corrector_observable_vanishes_for_constant_law_and_zero_f() {
        let eps = 0.125;
        let cfg = ObservableConfig { box_side: Some(9), ..Default::default() };
        let bx = ObservableBox::for_pair(eps, &pair(), &cfg).unwrap();
        let g = default_bump();
        let uh = homogenized_solution(1.0, &bx.sample(&pair().f), &bx.grid()).unwrap();
        let env = bx.torus_environment(ConductanceLaw::new_constant(1.0).unwrap(), 1);
        let set = CorrectorSet::compute(&env, &CorrectorOptions::default()).unwrap();
        assert!(corrector_observable(&env, eps, &uh, &g, &set).unwrap().abs() < 1e-12);
        let env = bx.torus_environment(ConductanceLaw::default(), 1);
        let set = CorrectorSet::compute(&env, &CorrectorOptions::default()).unwrap();
        let uz = homogenized_solution(1.0, &vec![0.0; bx.grid().len()], &bx.grid()).unwrap();
        assert_eq!(corrector_observable(&env, eps, &uz, &g, &set).unwrap(), 0.0);
        assert!(corrector_observable(&bx.environment(ConductanceLaw::default(), 1).unwrap(), eps, &uh, &g, &set).is_err());
    }

    #[test]
    fn constant_law_has_no_fluctuations() {
        let cfg = FluctuationConfig {
            law: ConductanceLaw::new_constant(1.5).unwrap(),
            eps: vec![0.25],
            n_samples: 6,
            observable: small_cfg(),
            ..Default::default()
        };
        let r = mc_fluctuation(&cfg).unwrap();
        let s = &r.rows[0].samples;
        assert!(s.iter().all(|v| *v == s[0]));
        assert_eq!(r.rows[0].variance.value, 0.0);
        let k = kappa_bound(&KappaConfig {
            law: ConductanceLaw::new_constant(1.5).unwrap(),
            eps: vec![0.25],
            n_env: 4,
            n_edges: 3,
            observable: small_cfg(),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(k.rows[0].kappa2.value, 0.0);
    }

    #[test]
    fn moment_scaling_at_unit_lambda_reproduces_mc() {
        let obs = ObservableConfig { box_side: Some(11), ..Default::default() };
        let g = default_bump();
        let m = moment_scaling(&MomentConfig {
            g: g.clone(),
            lambdas: vec![1.0],
            ps: vec![2.0],
            eps: 0.125,
            n_samples: 10,
            observable: obs,
            ..Default::default()
        })
        .unwrap();
        let r = mc_fluctuation(&FluctuationConfig { eps: vec![0.125], n_samples: 10, observable: obs, ..Default::default() }).unwrap();
        let n = 10.0;
        let sd = (r.rows[0].variance.value * (n - 1.0) / n).sqrt() * 0.125f64.powf(-1.5);
        assert!((m.rows[0].moment - sd).abs() < 1e-9 * sd);
    }

    #[test]
    fn sub_box_matches_window_geometry() {
        let bx = ObservableBox { d: 3, eps: 0.25, side: 9 };
        let env = bx.environment(ConductanceLaw::default(), 4).unwrap();
        let s = sub_box(&env, 5).unwrap();
        assert_eq!(s.geometry().shape(), &[5, 5, 5]);
        let e = s.geometry().edge_index(&Edge { base: vec![0, 0, 0], dir: 0 }).unwrap();
        let big = env.geometry().edge_index(&Edge { base: vec![2, 2, 2], dir: 0 }).unwrap();
        assert_eq!(s.zeta()[e], env.zeta()[big]);
    }

    #[test]
    fn hs_identity_on_a_small_box() {
        let cfg = ObservableConfig { box_side: Some(6), ..Default::default() };
        let p = TestFunctionPair {
            f: TestFunction::bump(vec![0.0; 3], 1.0, 0.25, 0.5).unwrap(),
            g: TestFunction::bump(vec![0.0; 3], 1.0, 0.25, 0.5).unwrap(),
        };
        let func = ObservableFunctional::new(0.2, &p, &cfg).unwrap();
        let params = HsParams { geometry: func.bx.geometry(), n_env: 600, n_ou: 1, seed: 3, ..Default::default() };
        let c = hs_covariance(&func, &func, &params).unwrap();
        assert!(c.z_score() < 4.0, "{c:?}");
    }
}
