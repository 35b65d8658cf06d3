//! Homogenized Green functions and the two-scale expansion of the
//! heterogeneous Green function.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::corrector::{CorrectorOptions, CorrectorSet, Matrix};
use crate::environment::{ConductanceLaw, Environment};
use crate::error::{HglError, Result};
use crate::fft::{for_each_mode, forward_real, inverse_real};
use crate::lattice::{star_norm, Edge, EdgeField, LatticeGeometry, SiteField};
use crate::solver::{green_column, SolverConfig};
use crate::stats::{derive_seed, linear_fit, log_log_fit, Estimate, LinearFit, RunningStats};

/// Cholesky test for positive definiteness.
pub fn is_positive_definite(m: &Matrix) -> bool {
    let d = m.len();
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        if m[i].len() != d {
            return false;
        }
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let v = m[i][i] - s;
                if !(v > 0.0) {
                    return false;
                }
                l[i][i] = v.sqrt();
            } else {
                l[i][j] = (m[i][j] - s) / l[j][j];
            }
        }
    }
    true
}

/// Fourier symbol `sum_ij a_ij conj(z_i) z_j` of `div* a grad`, `z_j = e^{i k_j} - 1`.
pub fn constant_symbol(a_hom: &Matrix, w: &[f64]) -> f64 {
    let z: Vec<Complex64> = w.iter().map(|&k| Complex64::from_polar(1.0, k) - 1.0).collect();
    let mut s = 0.0;
    for i in 0..w.len() {
        for j in 0..w.len() {
            s += a_hom[i][j] * (z[i].conj() * z[j]).re;
        }
    }
    s
}

/// `lambda u + sum_ij div*_i (a_ij grad_j u)` on a torus.
pub fn apply_constant_operator(geom: &LatticeGeometry, a_hom: &Matrix, lambda: f64, u: &[f64]) -> SiteField {
    let n = geom.n_sites();
    let d = geom.d();
    let grads: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mut g = vec![0.0; n];
            geom.grad_direction_into(u, j, &mut g);
            g
        })
        .collect();
    let mut out: Vec<f64> = u.iter().map(|v| lambda * v).collect();
    for i in 0..d {
        let flux: Vec<f64> = (0..n).map(|x| (0..d).map(|j| a_hom[i][j] * grads[j][x]).sum()).collect();
        geom.div_direction_add(&flux, i, &mut out);
    }
    out
}

/// Solves `(lambda + div* a_h grad) u = rhs` on a torus by FFT.
pub fn solve_constant_torus(geom: &LatticeGeometry, a_hom: &Matrix, lambda: f64, rhs: &[f64]) -> Result<SiteField> {
    if !geom.is_periodic() {
        return Err(HglError::invalid("FFT solves need a torus"));
    }
    if a_hom.len() != geom.d() || !is_positive_definite(a_hom) {
        return Err(HglError::NotPositiveDefinite);
    }
    if rhs.len() != geom.n_sites() {
        return Err(HglError::GeometryMismatch("rhs length".into()));
    }
    let mut spec = forward_real(rhs, geom.shape());
    if lambda == 0.0 {
        let scale = rhs.iter().map(|v| v.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
        if spec[0].re.abs() > 1e-10 * scale {
            return Err(HglError::NonZeroMean { mean: spec[0].re / rhs.len() as f64 });
        }
    }
    for_each_mode(geom.shape(), |idx, w| {
        let s = lambda + constant_symbol(a_hom, w);
        spec[idx] = if idx == 0 && lambda == 0.0 { Complex64::new(0.0, 0.0) } else { spec[idx] / s };
    });
    Ok(inverse_real(spec, geom.shape()))
}

/// Discrete homogenized Green function at the origin of a torus: source
/// `delta_0` for `lambda > 0`, `delta_0 - 1/#sites` at `lambda = 0`.
/// Symmetrized so that `G(x) = G(-x)` holds exactly.
pub fn homogenized_green_torus(a_hom: &Matrix, lambda: f64, geom: &LatticeGeometry) -> Result<SiteField> {
    if !(lambda >= 0.0) {
        return Err(HglError::invalid("lambda must be nonnegative"));
    }
    let n = geom.n_sites();
    let shift = if lambda == 0.0 { 1.0 / n as f64 } else { 0.0 };
    let mut rhs = vec![-shift; n];
    rhs[0] += 1.0;
    let g = solve_constant_torus(geom, a_hom, lambda, &rhs)?;
    let mut out = vec![0.0; n];
    for (idx, v) in out.iter_mut().enumerate() {
        let x: Vec<i64> = geom.site_coords(idx).iter().map(|c| -c).collect();
        let j = geom.site_index(&x).expect("torus wraps");
        *v = 0.5 * (g[idx] + g[j]);
    }
    Ok(out)
}

/// `c_h = Gamma(d/2 - 1) / (4 pi^{d/2} a_bar)`.
pub fn green_constant(d: usize, a_bar: f64) -> f64 {
    let h = d as f64 / 2.0;
    gamma(h - 1.0) / (4.0 * std::f64::consts::PI.powf(h) * a_bar)
}

/// `(G_h(x), grad G_h(x))` for `G_h(x) = c_h |x|^{2-d}`.
pub fn continuum_green(a_bar: f64, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let d = x.len();
    if d < 3 {
        return Err(HglError::invalid("continuum Green function needs d >= 3"));
    }
    if !(a_bar > 0.0) {
        return Err(HglError::NotPositiveDefinite);
    }
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if r == 0.0 {
        return Err(HglError::invalid("continuum Green function is singular at 0"));
    }
    let c = green_constant(d, a_bar);
    let value = c * r.powi(2 - d as i32);
    let grad = x.iter().map(|xi| c * (2.0 - d as f64) * xi / r.powi(d as i32)).collect();
    Ok((value, grad))
}

/// Discrete homogenized Green function with its continuum counterpart.
#[derive(Clone, Debug)]
pub struct HomogenizedGreen {
    pub a_hom: Matrix,
    pub lambda: f64,
    pub geometry: LatticeGeometry,
    pub values: SiteField,
}

impl HomogenizedGreen {
    pub fn torus(a_hom: &Matrix, lambda: f64, geometry: &LatticeGeometry) -> Result<Self> {
        let values = homogenized_green_torus(a_hom, lambda, geometry)?;
        Ok(HomogenizedGreen { a_hom: a_hom.clone(), lambda, geometry: geometry.clone(), values })
    }

    pub fn a_bar(&self) -> f64 {
        let d = self.a_hom.len();
        (0..d).map(|i| self.a_hom[i][i]).sum::<f64>() / d as f64
    }

    pub fn value_at(&self, x: &[i64]) -> f64 {
        self.values[self.geometry.site_index(x).expect("torus wraps")]
    }

    pub fn gradient(&self) -> EdgeField {
        self.geometry.grad(&self.values).expect("lengths")
    }

    pub fn continuum(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        continuum_green(self.a_bar(), x)
    }
}

/// `grad z(e) = grad G(0,e) - grad G_h(e) - sum_k grad_k G_h(base) grad phi_k(e)`.
pub fn two_scale_residual(
    geom: &LatticeGeometry,
    grad_g: &[f64],
    grad_gh: &[f64],
    grad_phi: &[EdgeField],
    edge: &Edge,
) -> Result<f64> {
    let idx = geom.edge_index(edge).ok_or_else(|| HglError::invalid("edge outside geometry"))?;
    Ok(two_scale_terms(geom, grad_g, grad_gh, grad_phi, idx, &edge.base).residual)
}

#[derive(Clone, Copy, Debug)]
struct Terms {
    residual: f64,
    grad_g: f64,
    grad_gh: f64,
    corrector: f64,
}

fn two_scale_terms(
    geom: &LatticeGeometry,
    grad_g: &[f64],
    grad_gh: &[f64],
    grad_phi: &[EdgeField],
    idx: usize,
    base: &[i64],
) -> Terms {
    let mut corrector = 0.0;
    for (k, gphi) in grad_phi.iter().enumerate() {
        let ek = geom.edge_index(&Edge { base: base.to_vec(), dir: k }).expect("torus wraps");
        corrector += grad_gh[ek] * gphi[idx];
    }
    Terms { residual: grad_g[idx] - grad_gh[idx] - corrector, grad_g: grad_g[idx], grad_gh: grad_gh[idx], corrector }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResidualStudyConfig {
    pub d: usize,
    pub l: usize,
    pub law: ConductanceLaw,
    pub n_env: usize,
    pub seed: u64,
    pub radii: Vec<usize>,
    /// Use the ensemble mean of `a_h` for `G_h` instead of each environment's own.
    pub ensemble_ahom: bool,
    pub solver: SolverConfig,
}

impl Default for ResidualStudyConfig {
    fn default() -> Self {
        ResidualStudyConfig {
            d: 3,
            l: 64,
            law: ConductanceLaw::default(),
            n_env: 100,
            seed: 1,
            radii: vec![4, 6, 8, 11, 16],
            ensemble_ahom: false,
            solver: SolverConfig::with_tol(1e-10),
        }
    }
}

/// Ensemble root-mean-square norms at one radius, pooled over the edges
/// `(+-r e_m, i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub radius: usize,
    pub residual: Estimate,
    pub grad_g: Estimate,
    pub grad_gh: Estimate,
    pub corrector_term: Estimate,
    /// Max over the edges of `|grad G_h(e) - d_i G_h(midpoint)|` with the continuum `G_h`.
    pub continuum_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub config: ResidualStudyConfig,
    pub rows: Vec<ResidualRow>,
    pub residual_slope: LinearFit,
    pub green_slope: LinearFit,
    /// Largest `||grad G(0,e)||_2 |e|_*^{d-1}` over the radii.
    pub gradient_bound_constant: f64,
    pub a_bar: Estimate,
    pub failures: usize,
}

fn rms(stats: &RunningStats) -> Estimate {
    let m = stats.mean_estimate();
    let v = m.value.max(0.0).sqrt();
    Estimate { value: v, se: if v > 0.0 { m.se / (2.0 * v) } else { m.se.sqrt() }, n: m.n }
}

/// Decay of the two-scale remainder of the Green function over an ensemble.
pub fn residual_study(cfg: &ResidualStudyConfig) -> Result<ResidualReport> {
    let geom = LatticeGeometry::torus(cfg.d, cfg.l)?;
    if cfg.radii.iter().any(|&r| r == 0 || 2 * r >= cfg.l) {
        return Err(HglError::invalid("radii must lie in (0, L/2)"));
    }
    let d = cfg.d;
    let opts = CorrectorOptions { solver: cfg.solver, ..Default::default() };

    struct PerEnv {
        a_hom: Matrix,
        grad_g: EdgeField,
        grad_phi: Vec<EdgeField>,
    }
    let results: Vec<Result<PerEnv>> = (0..cfg.n_env)
        .into_par_iter()
        .map(|k| {
            let env = Environment::sample(&geom, cfg.law, derive_seed(cfg.seed, k as u64));
            let set = CorrectorSet::compute(&env, &opts)?;
            let g = green_column(&geom, &env.conductances(), 0.0, 0, &cfg.solver)?;
            Ok(PerEnv { a_hom: set.a_hom, grad_g: geom.grad(&g.values)?, grad_phi: set.grad_phi })
        })
        .collect();
    let failures = results.iter().filter(|r| r.is_err()).count();
    let envs: Vec<PerEnv> = results.into_iter().filter_map(|r| r.ok()).collect();
    if envs.is_empty() {
        return Err(HglError::invalid("every environment failed"));
    }
    let a_bar = RunningStats::from_slice(
        &envs.iter().map(|e| (0..d).map(|i| e.a_hom[i][i]).sum::<f64>() / d as f64).collect::<Vec<_>>(),
    )
    .mean_estimate();
    let ensemble = crate::corrector::estimate_ahom(&envs.iter().map(|e| e.a_hom.clone()).collect::<Vec<_>>()).mean;
    let shared_gh = if cfg.ensemble_ahom { Some(HomogenizedGreen::torus(&ensemble, 0.0, &geom)?.gradient()) } else { None };

    let mut acc: Vec<[RunningStats; 4]> = vec![Default::default(); cfg.radii.len()];
    let mut gap = vec![0.0f64; cfg.radii.len()];
    for env in &envs {
        let own;
        let (grad_gh, a_gh) = match &shared_gh {
            Some(g) => (g, &ensemble),
            None => {
                own = HomogenizedGreen::torus(&env.a_hom, 0.0, &geom)?.gradient();
                (&own, &env.a_hom)
            }
        };
        let ab = (0..d).map(|i| a_gh[i][i]).sum::<f64>() / d as f64;
        for (ri, &r) in cfg.radii.iter().enumerate() {
            let mut sums = [0.0; 4];
            let mut count = 0.0;
            for m in 0..d {
                for sign in [-1i64, 1] {
                    let mut base = vec![0i64; d];
                    base[m] = sign * r as i64;
                    for i in 0..d {
                        let idx = geom.edge_index(&Edge { base: base.clone(), dir: i }).expect("torus");
                        let t = two_scale_terms(&geom, &env.grad_g, grad_gh, &env.grad_phi, idx, &base);
                        sums[0] += t.residual * t.residual;
                        sums[1] += t.grad_g * t.grad_g;
                        sums[2] += t.grad_gh * t.grad_gh;
                        sums[3] += t.corrector * t.corrector;
                        count += 1.0;
                        let mut mid: Vec<f64> = base.iter().map(|&v| v as f64).collect();
                        mid[i] += 0.5;
                        let (_, cg) = continuum_green(ab, &mid)?;
                        gap[ri] = gap[ri].max((t.grad_gh - cg[i]).abs());
                    }
                }
            }
            for q in 0..4 {
                acc[ri][q].push(sums[q] / count);
            }
        }
    }
    let rows: Vec<ResidualRow> = cfg
        .radii
        .iter()
        .enumerate()
        .map(|(ri, &r)| ResidualRow {
            radius: r,
            residual: rms(&acc[ri][0]),
            grad_g: rms(&acc[ri][1]),
            grad_gh: rms(&acc[ri][2]),
            corrector_term: rms(&acc[ri][3]),
            continuum_gap: gap[ri],
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.radius as f64).collect();
    let residual_slope = log_log_fit(&xs, &rows.iter().map(|r| r.residual.value).collect::<Vec<_>>());
    let green_slope = log_log_fit(&xs, &rows.iter().map(|r| r.grad_g.value).collect::<Vec<_>>());
    let mut probe = vec![0i64; d];
    let gradient_bound_constant = rows
        .iter()
        .map(|row| {
            probe[0] = row.radius as i64;
            row.grad_g.value * star_norm(&probe).powi(d as i32 - 1)
        })
        .fold(0.0, f64::max);
    Ok(ResidualReport {
        config: cfg.clone(),
        rows,
        residual_slope,
        green_slope,
        gradient_bound_constant,
        a_bar,
        failures,
    })
}

/// Fits `G_lambda(r) ~ C |r|_*^{2-d} exp(-c sqrt(lambda) r)` for `lambda > 0`,
/// returning `(C, c)`.
pub fn fit_massive_decay(d: usize, lambda: f64, radii: &[f64], values: &[f64]) -> Result<(f64, f64)> {
    if !(lambda > 0.0) || radii.len() < 2 || radii.len() != values.len() {
        return Err(HglError::invalid("need lambda > 0 and at least two matched points"));
    }
    let xs: Vec<f64> = radii.iter().map(|r| lambda.sqrt() * r).collect();
    let ys: Vec<f64> = radii
        .iter()
        .zip(values)
        .map(|(r, v)| (v * (2.0 + r).powi(d as i32 - 2)).ln())
        .collect();
    let fit = linear_fit(&xs, &ys);
    Ok((fit.intercept.exp(), -fit.slope))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::green_column;

    fn iso(d: usize, a: f64) -> Matrix {
        (0..d).map(|i| (0..d).map(|j| if i == j { a } else { 0.0 }).collect()).collect()
    }

    #[test]
    fn fft_green_round_trip_and_symmetry() {
        let geom = LatticeGeometry::new(vec![8, 6, 5], crate::lattice::Boundary::Periodic).unwrap();
        let a = vec![vec![1.3, 0.2, 0.0], vec![0.2, 0.9, -0.1], vec![0.0, -0.1, 1.1]];
        for lambda in [0.0, 0.3] {
            let g = homogenized_green_torus(&a, lambda, &geom).unwrap();
            let back = apply_constant_operator(&geom, &a, lambda, &g);
            let n = geom.n_sites() as f64;
            for (idx, v) in back.iter().enumerate() {
                let expect = if idx == 0 { 1.0 } else { 0.0 } - if lambda == 0.0 { 1.0 / n } else { 0.0 };
                assert!((v - expect).abs() < 1e-12);
            }
            for idx in 0..geom.n_sites() {
                let x = geom.site_coords(idx);
                let neg: Vec<i64> = x.iter().map(|c| -c).collect();
                assert_eq!(g[idx], g[geom.site_index(&neg).unwrap()]);
            }
        }
    }

    #[test]
    fn fft_green_decreases_with_mass() {
        let geom = LatticeGeometry::torus(3, 12).unwrap();
        let g1 = homogenized_green_torus(&iso(3, 1.0), 0.01, &geom).unwrap();
        let g2 = homogenized_green_torus(&iso(3, 1.0), 0.1, &geom).unwrap();
        for x in [[0, 0, 0], [2, 0, 0], [3, 1, 4], [6, 6, 6]] {
            let i = geom.site_index(&x).unwrap();
            assert!(g2[i] < g1[i]);
        }
    }

    #[test]
    fn singular_matrix_rejected() {
        let geom = LatticeGeometry::torus(2, 4).unwrap();
        let a = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        assert!(matches!(homogenized_green_torus(&a, 0.0, &geom), Err(HglError::NotPositiveDefinite)));
    }

    #[test]
    fn continuum_values() {
        let (v, _) = continuum_green(1.0, &[1.0, 0.0, 0.0]).unwrap();
        assert!((v - 0.079_577_471_545_947_67).abs() < 1e-12);
        let x = [0.7, -1.1, 2.0];
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let (a, _) = continuum_green(1.4, &x).unwrap();
        let (b, _) = continuum_green(1.4, &x2).unwrap();
        assert!((b - a / 2.0).abs() < 1e-14);
        let p = [3.0, 4.0, 0.0];
        let (_, g) = continuum_green(2.0, &p).unwrap();
        let h = 1e-4;
        for i in 0..3 {
            let mut hi = p;
            let mut lo = p;
            hi[i] += h;
            lo[i] -= h;
            let fd = (continuum_green(2.0, &hi).unwrap().0 - continuum_green(2.0, &lo).unwrap().0) / (2.0 * h);
            if g[i] != 0.0 {
                assert!(((fd - g[i]) / g[i]).abs() < 1e-6);
            } else {
                assert!(fd.abs() < 1e-12);
            }
        }
        assert!(continuum_green(1.0, &[0.0, 0.0, 0.0]).is_err());
        // four-dimensional constant: 1 / (4 pi^2)
        assert!((green_constant(4, 1.0) - 1.0 / (4.0 * std::f64::consts::PI.powi(2))).abs() < 1e-14);
    }

    #[test]
    fn constant_medium_has_zero_residual() {
        let geom = LatticeGeometry::torus(3, 10).unwrap();
        let env = Environment::sample(&geom, ConductanceLaw::new_constant(1.5).unwrap(), 1);
        let set = CorrectorSet::compute(&env, &CorrectorOptions::default()).unwrap();
        let cfg = SolverConfig::with_tol(1e-12);
        let g = green_column(&geom, &env.conductances(), 0.0, 0, &cfg).unwrap();
        let gg = geom.grad(&g.values).unwrap();
        let gh = HomogenizedGreen::torus(&set.a_hom, 0.0, &geom).unwrap().gradient();
        for x in [[2, 0, 0], [-3, 1, 0], [4, 4, 4]] {
            for i in 0..3 {
                let e = Edge { base: x.to_vec(), dir: i };
                assert!(two_scale_residual(&geom, &gg, &gh, &set.grad_phi, &e).unwrap().abs() < 1e-10);
            }
        }
    }

    #[test]
    fn massive_decay_fit_recovers_parameters() {
        let radii = [2.0, 4.0, 6.0, 8.0];
        let lambda: f64 = 0.04;
        let vals: Vec<f64> = radii.iter().map(|r| 0.3 / (2.0 + r) * (-0.8 * lambda.sqrt() * r).exp()).collect();
        let (c, k) = fit_massive_decay(3, lambda, &radii, &vals).unwrap();
        assert!((c - 0.3).abs() < 1e-10 && (k - 0.8).abs() < 1e-10);
    }
}
