//! Quadratures of the limiting variances, and the generalized Gaussian free
//! field (two-point function and spectral sampler).

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::corrector::Matrix;
use crate::environment::gaussian_field;
use crate::error::{HglError, Result};
use crate::fft::{fft_nd, for_each_mode, forward_real, inverse_real};
use crate::greens::{constant_symbol, green_constant, is_positive_definite};
use crate::hs::KernelTensor;
use crate::lattice::{LatticeGeometry, SiteField};
use crate::stats::{derive_seed, log_log_fit, Estimate, LinearFit, RunningStats};

/// Compactly supported bump
/// `amplitude * exp(-|x-c|^2 / 2 width^2) * (1 - |x-c|^2 / radius^2)^3_+`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub center: Vec<f64>,
    pub amplitude: f64,
    pub width: f64,
    pub radius: f64,
}

impl TestFunction {
    pub fn bump(center: Vec<f64>, amplitude: f64, width: f64, radius: f64) -> Result<Self> {
        if !(width > 0.0 && radius > 0.0) || center.is_empty() {
            return Err(HglError::invalid("bump needs positive width and radius"));
        }
        Ok(TestFunction { center, amplitude, width, radius })
    }

    pub fn zero(d: usize) -> Self {
        TestFunction { center: vec![0.0; d], amplitude: 0.0, width: 1.0, radius: 1.0 }
    }

    pub fn d(&self) -> usize {
        self.center.len()
    }

    pub fn is_zero(&self) -> bool {
        self.amplitude == 0.0
    }

    /// Profile as a function of the distance to the center.
    pub fn radial(&self, r: f64) -> f64 {
        if r >= self.radius {
            return 0.0;
        }
        let q = 1.0 - (r / self.radius).powi(2);
        self.amplitude * (-r * r / (2.0 * self.width * self.width)).exp() * q * q * q
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum();
        self.radial(r2.sqrt())
    }

    /// `g_lambda(x) = lambda^{-d} g(c + (x - c) / lambda)`.
    pub fn dilate(&self, lambda: f64) -> Self {
        TestFunction {
            center: self.center.clone(),
            amplitude: self.amplitude * lambda.powi(-(self.d() as i32)),
            width: self.width * lambda,
            radius: self.radius * lambda,
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        TestFunction { amplitude: self.amplitude * alpha, ..self.clone() }
    }

    /// Largest distance from the origin to the support.
    pub fn extent(&self) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        self.center.iter().map(|c| c * c).sum::<f64>().sqrt() + self.radius
    }

    /// `int_{|y - c| < r} f`.
    pub fn mass_within(&self, r: f64) -> f64 {
        let d = self.d();
        let top = r.min(self.radius);
        if top <= 0.0 {
            return 0.0;
        }
        let gl = legendre(64);
        sphere_area(d) * gl.integrate(0.0, top, |s| self.radial(s) * s.powi(d as i32 - 1))
    }

    pub fn mass(&self) -> f64 {
        self.mass_within(self.radius)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunctionPair {
    pub f: TestFunction,
    pub g: TestFunction,
}

fn legendre(n: usize) -> GaussLegendre {
    GaussLegendre::new(NonZeroUsize::new(n).expect("positive"))
}

/// Surface area of the unit sphere in `R^d`.
pub fn sphere_area(d: usize) -> f64 {
    2.0 * PI.powf(d as f64 / 2.0) / gamma(d as f64 / 2.0)
}

/// Cubic grid `origin + h m`, `m in {0..n-1}^d`, axis 0 fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub d: usize,
    pub h: f64,
    pub n: usize,
    pub origin: f64,
}

impl Grid {
    /// Grid symmetric about 0 covering `[-half_width, half_width]^d`.
    pub fn centered(d: usize, h: f64, half_width: f64) -> Result<Self> {
        if !(h > 0.0 && half_width > 0.0) {
            return Err(HglError::invalid("grid needs positive spacing and extent"));
        }
        let half = (half_width / h).ceil() as usize;
        let n = 2 * half + 1;
        Ok(Grid { d, h, n, origin: -(half as f64) * h })
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn half_width(&self) -> f64 {
        -self.origin
    }

    pub fn point(&self, mut idx: usize) -> Vec<f64> {
        (0..self.d)
            .map(|_| {
                let m = idx % self.n;
                idx /= self.n;
                self.origin + self.h * m as f64
            })
            .collect()
    }

    pub fn sample(&self, f: &TestFunction) -> Vec<f64> {
        (0..self.len()).into_par_iter().map(|i| f.eval(&self.point(i))).collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.d as i32)
    }
}

/// `d_i G_h(x) = c_h (2 - d) x_i / |x|^d`.
fn green_gradient(c: f64, x: &[f64], i: usize) -> f64 {
    let d = x.len();
    let r2: f64 = x.iter().map(|v| v * v).sum();
    c * (2.0 - d as f64) * x[i] / r2.powf(d as f64 / 2.0)
}

/// `d_m d_i G_h(x)`.
fn green_hessian(c: f64, x: &[f64], i: usize, m: usize) -> f64 {
    let d = x.len() as f64;
    let r2: f64 = x.iter().map(|v| v * v).sum();
    let delta = if i == m { 1.0 } else { 0.0 };
    c * (2.0 - d) * (delta / r2.powf(d / 2.0) - d * x[i] * x[m] / r2.powf(d / 2.0 + 1.0))
}

/// Average over the grid cell at integer offset `o` (units of `h`) of
/// `k(h y)`, with 9^d subcells. The central cell of the odd kernels
/// `d_i G_h` averages to zero.
fn cell_average(o: &[i64], h: f64, k: &dyn Fn(&[f64]) -> f64) -> f64 {
    let d = o.len();
    if o.iter().any(|&v| v.abs() > 1) {
        let x: Vec<f64> = o.iter().map(|&v| v as f64 * h).collect();
        return k(&x);
    }
    if o.iter().all(|&v| v == 0) {
        return 0.0;
    }
    let sub = 9usize;
    let total = sub.pow(d as u32);
    let mut acc = 0.0;
    let mut x = vec![0.0; d];
    for s in 0..total {
        let mut t = s;
        for j in 0..d {
            let m = (t % sub) as f64;
            t /= sub;
            x[j] = (o[j] as f64 + (m + 0.5) / sub as f64 - 0.5) * h;
        }
        acc += k(&x);
    }
    acc / total as f64
}

/// Cell average of `c |x|^{2-d}` over the cell at offset `o`; the central
/// cell uses the self-similarity of the kernel under 9-fold subdivision.
fn green_cell_average(o: &[i64], h: f64, c: f64) -> f64 {
    let d = o.len();
    let k = |x: &[f64]| c * x.iter().map(|v| v * v).sum::<f64>().powf((2.0 - d as f64) / 2.0);
    if o.iter().any(|&v| v.abs() > 1) {
        let x: Vec<f64> = o.iter().map(|&v| v as f64 * h).collect();
        return k(&x);
    }
    let sub = 9usize;
    let total = sub.pow(d as u32);
    let mut acc = 0.0;
    let mut x = vec![0.0; d];
    for s in 0..total {
        let mut t = s;
        let mut center = true;
        for j in 0..d {
            let m = t % sub;
            t /= sub;
            center &= m == sub / 2;
            x[j] = (o[j] as f64 + (m as f64 + 0.5) / sub as f64 - 0.5) * h;
        }
        if !(center && o.iter().all(|&v| v == 0)) {
            acc += k(&x);
        }
    }
    if o.iter().all(|&v| v == 0) {
        // A = (sum over non-central subcells) / (9^d - 9^{d-2})
        acc / (total as f64 - (sub as f64).powi(d as i32 - 2))
    } else {
        acc / total as f64
    }
}

/// Support box of a grid field: per-axis `[lo, hi]` of nonzero entries.
fn support_box(grid: &Grid, values: &[f64]) -> Option<Vec<(usize, usize)>> {
    let d = grid.d;
    let mut lo = vec![usize::MAX; d];
    let mut hi = vec![0usize; d];
    let mut any = false;
    for (idx, &v) in values.iter().enumerate() {
        if v != 0.0 {
            any = true;
            let mut t = idx;
            for j in 0..d {
                let m = t % grid.n;
                t /= grid.n;
                lo[j] = lo[j].min(m);
                hi[j] = hi[j].max(m);
            }
        }
    }
    any.then(|| lo.into_iter().zip(hi).collect())
}

/// Discrete convolutions `h^d sum_y k(x - y) s(y)` on a grid for a list of
/// kernels given by cell averages at integer offsets, zero-padded FFT.
fn convolve_kernels(grid: &Grid, source: &[f64], kernels: &[&(dyn Fn(&[i64]) -> f64 + Sync)]) -> Vec<Vec<f64>> {
    let d = grid.d;
    let n = grid.n;
    let Some(bx) = support_box(grid, source) else {
        return vec![vec![0.0; grid.len()]; kernels.len()];
    };
    let sizes: Vec<usize> = bx.iter().map(|&(lo, hi)| n + (hi - lo + 1) - 1).collect();
    let total: usize = sizes.iter().product();
    let unravel = |mut idx: usize| -> Vec<usize> {
        sizes
            .iter()
            .map(|&s| {
                let m = idx % s;
                idx /= s;
                m
            })
            .collect()
    };
    let mut src = vec![Complex64::new(0.0, 0.0); total];
    for (idx, v) in src.iter_mut().enumerate() {
        let m = unravel(idx);
        if m.iter().zip(&bx).all(|(&mi, &(lo, hi))| mi <= hi - lo) {
            let mut g = 0usize;
            let mut stride = 1usize;
            for j in 0..d {
                g += (m[j] + bx[j].0) * stride;
                stride *= n;
            }
            *v = Complex64::new(source[g], 0.0);
        }
    }
    fft_nd(&mut src, &sizes, false);
    let w = grid.cell_volume();
    kernels
        .iter()
        .map(|k| {
            // kernel at cyclic index o' holds the value at grid offset o' - lo,
            // with o' in [-(S - 1), n - 1]
            let mut ker: Vec<Complex64> = (0..total)
                .into_par_iter()
                .map(|idx| {
                    let m = unravel(idx);
                    let o: Vec<i64> = (0..d)
                        .map(|j| {
                            let s = (bx[j].1 - bx[j].0 + 1) as i64;
                            let mut op = m[j] as i64;
                            if op > n as i64 - 1 {
                                op -= sizes[j] as i64;
                            }
                            debug_assert!(op >= -(s - 1));
                            op - bx[j].0 as i64
                        })
                        .collect();
                    Complex64::new(k(&o) * w, 0.0)
                })
                .collect();
            fft_nd(&mut ker, &sizes, false);
            ker.iter_mut().zip(&src).for_each(|(a, b)| *a *= b);
            fft_nd(&mut ker, &sizes, true);
            let scale = 1.0 / total as f64;
            (0..grid.len())
                .map(|g| {
                    let mut t = g;
                    let mut c = 0usize;
                    let mut stride = 1usize;
                    for s in &sizes {
                        c += (t % n) * stride;
                        t /= n;
                        stride *= s;
                    }
                    ker[c].re * scale
                })
                .collect()
        })
        .collect()
}

/// `(d_i G_h * s)(x)` on the grid for `i = 1..d`.
pub fn gradient_convolution(a_bar: f64, grid: &Grid, source: &[f64]) -> Vec<Vec<f64>> {
    let c = green_constant(grid.d, a_bar);
    let h = grid.h;
    let ks: Vec<Box<dyn Fn(&[i64]) -> f64 + Sync>> = (0..grid.d)
        .map(|i| {
            Box::new(move |o: &[i64]| cell_average(o, h, &|x: &[f64]| green_gradient(c, x, i)))
                as Box<dyn Fn(&[i64]) -> f64 + Sync>
        })
        .collect();
    let refs: Vec<&(dyn Fn(&[i64]) -> f64 + Sync)> = ks.iter().map(|b| b.as_ref()).collect();
    convolve_kernels(grid, source, &refs)
}

/// `(G_h * s)(x)` on the grid.
pub fn green_convolution(a_bar: f64, grid: &Grid, source: &[f64]) -> Vec<f64> {
    let c = green_constant(grid.d, a_bar);
    let h = grid.h;
    let k = move |o: &[i64]| green_cell_average(o, h, c);
    convolve_kernels(grid, source, &[&k]).pop().expect("one kernel")
}

/// Direct summation counterpart of [`gradient_convolution`], for checks.
pub fn gradient_convolution_direct(a_bar: f64, grid: &Grid, source: &[f64]) -> Vec<Vec<f64>> {
    let c = green_constant(grid.d, a_bar);
    let d = grid.d;
    let w = grid.cell_volume();
    let coords = |mut idx: usize| -> Vec<i64> {
        (0..d)
            .map(|_| {
                let m = idx % grid.n;
                idx /= grid.n;
                m as i64
            })
            .collect()
    };
    (0..d)
        .map(|i| {
            (0..grid.len())
                .map(|x| {
                    let cx = coords(x);
                    source
                        .iter()
                        .enumerate()
                        .filter(|(_, v)| **v != 0.0)
                        .map(|(y, v)| {
                            let cy = coords(y);
                            let o: Vec<i64> = cx.iter().zip(&cy).map(|(a, b)| a - b).collect();
                            w * v * cell_average(&o, grid.h, &|p: &[f64]| green_gradient(c, p, i))
                        })
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// Monopole and dipole of a gridded source about `center`.
#[derive(Clone, Debug, PartialEq)]
struct Multipole {
    center: Vec<f64>,
    mass: f64,
    dipole: Vec<f64>,
}

impl Multipole {
    fn of(grid: &Grid, values: &[f64], center: &[f64]) -> Self {
        let w = grid.cell_volume();
        let mut mass = 0.0;
        let mut dipole = vec![0.0; grid.d];
        for (idx, &v) in values.iter().enumerate() {
            if v != 0.0 {
                let x = grid.point(idx);
                mass += w * v;
                for m in 0..grid.d {
                    dipole[m] += w * v * (x[m] - center[m]);
                }
            }
        }
        Multipole { center: center.to_vec(), mass, dipole }
    }

    /// Far field of `d_i G_h * s` at `v`.
    fn gradient(&self, c: f64, v: &[f64], i: usize) -> f64 {
        let x: Vec<f64> = v.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        let mut out = self.mass * green_gradient(c, &x, i);
        for m in 0..x.len() {
            out -= self.dipole[m] * green_hessian(c, &x, i, m);
        }
        out
    }
}

/// `int` of `f` over the exterior of the cube `[-w, w]^d`, mapped face by
/// face with `v = p / u`, `p` on the face and `u in (0, 1]`.
fn integrate_cube_exterior(d: usize, w: f64, nodes: usize, f: &(dyn Fn(&[f64]) -> f64 + Sync)) -> f64 {
    let gl = legendre(nodes);
    let pairs = gl.as_node_weight_pairs();
    let n_face = nodes.pow(d as u32 - 1);
    (0..2 * d)
        .into_par_iter()
        .map(|face| {
            let m = face / 2;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let mut acc = 0.0;
            let mut p = vec![0.0; d];
            let mut v = vec![0.0; d];
            for s in 0..n_face {
                let mut t = s;
                let mut wt = 1.0;
                for j in 0..d {
                    if j == m {
                        p[j] = sign * w;
                    } else {
                        let (x, wx) = pairs[t % nodes];
                        t /= nodes;
                        p[j] = w * x;
                        wt *= w * wx;
                    }
                }
                for &(x, wx) in pairs {
                    let u = 0.5 * (x + 1.0);
                    for j in 0..d {
                        v[j] = p[j] / u;
                    }
                    acc += wt * 0.5 * wx * w * u.powi(-(d as i32) - 1) * f(&v);
                }
            }
            acc
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadratureParams {
    /// Coarse spacing; the fine grid uses `h / 2`.
    pub h: f64,
    /// Half-width of the integration cube.
    pub half_width: f64,
    /// Fail when the relative error estimate exceeds this.
    pub max_rel_error: Option<f64>,
    pub tail_nodes: usize,
}

impl Default for QuadratureParams {
    fn default() -> Self {
        QuadratureParams { h: 1.0 / 16.0, half_width: 2.0, max_rel_error: None, tail_nodes: 24 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceQuadrature {
    /// Richardson-extrapolated value, tail included.
    pub sigma2: f64,
    pub fine: f64,
    pub coarse: f64,
    pub h: f64,
    pub half_width: f64,
    pub richardson_error: f64,
    /// Far-field contribution outside the cube.
    pub tail: f64,
    pub tail_error: f64,
    /// `richardson_error + tail_error`.
    pub error: f64,
}

impl VarianceQuadrature {
    pub fn relative_error(&self) -> f64 {
        if self.sigma2 == 0.0 {
            0.0
        } else {
            self.error / self.sigma2.abs()
        }
    }

    fn zero(params: &QuadratureParams) -> Self {
        VarianceQuadrature {
            sigma2: 0.0,
            fine: 0.0,
            coarse: 0.0,
            h: params.h / 2.0,
            half_width: params.half_width,
            richardson_error: 0.0,
            tail: 0.0,
            tail_error: 0.0,
            error: 0.0,
        }
    }
}

fn quadratic_form(k: &KernelTensor, a: &[f64]) -> f64 {
    let m = a.len();
    let mut s = 0.0;
    for p in 0..m {
        if a[p] == 0.0 {
            continue;
        }
        let row = &k.entries[p * m..(p + 1) * m];
        s += a[p] * row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
    }
    s
}

fn check_pair(k: &KernelTensor, pair: &TestFunctionPair, a_bar: f64) -> Result<()> {
    if pair.f.d() != k.d || pair.g.d() != k.d {
        return Err(HglError::GeometryMismatch("test functions and kernel dimension".into()));
    }
    if k.d < 3 {
        return Err(HglError::invalid("variance quadratures need d >= 3"));
    }
    if !(a_bar > 0.0) {
        return Err(HglError::NotPositiveDefinite);
    }
    Ok(())
}

/// One grid level: (value inside the cube, far-field tail, source radius).
fn sigma_level(k: &KernelTensor, a_bar: f64, pair: &TestFunctionPair, h: f64, half: f64, nodes: usize) -> Result<(f64, f64)> {
    let d = k.d;
    let grid = Grid::centered(d, h, half)?;
    let fs = grid.sample(&pair.f);
    let gs = grid.sample(&pair.g);
    let hf = gradient_convolution(a_bar, &grid, &fs);
    let hg = gradient_convolution(a_bar, &grid, &gs);
    let w = grid.cell_volume();
    let inside: f64 = (0..grid.len())
        .into_par_iter()
        .map(|x| {
            let a: Vec<f64> = (0..d * d).map(|p| hg[p / d][x] * hf[p % d][x]).collect();
            quadratic_form(k, &a)
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum::<f64>()
        * w;
    let c = green_constant(d, a_bar);
    let mf = Multipole::of(&grid, &fs, &pair.f.center);
    let mg = Multipole::of(&grid, &gs, &pair.g.center);
    let far = |v: &[f64]| {
        let a: Vec<f64> = (0..d * d).map(|p| mg.gradient(c, v, p / d) * mf.gradient(c, v, p % d)).collect();
        quadratic_form(k, &a)
    };
    let tail = integrate_cube_exterior(d, grid.half_width() + h / 2.0, nodes, &far);
    Ok((inside, tail))
}

fn sigma_tilde_level(k: &KernelTensor, a_bar: f64, pair: &TestFunctionPair, h: f64, half: f64, nodes: usize) -> Result<(f64, f64)> {
    let d = k.d;
    let grid = Grid::centered(d, h, half)?;
    let fs = grid.sample(&pair.f);
    let gs = grid.sample(&pair.g);
    let hf = gradient_convolution(a_bar, &grid, &fs);
    // w[i][j] = d_i G_h * (g h_j^f)
    let mut w: Vec<Vec<Vec<f64>>> = vec![Vec::new(); d];
    let mut poles = Vec::new();
    for j in 0..d {
        let s: Vec<f64> = gs.iter().zip(&hf[j]).map(|(a, b)| a * b).collect();
        poles.push(Multipole::of(&grid, &s, &pair.g.center));
        for (i, comp) in gradient_convolution(a_bar, &grid, &s).into_iter().enumerate() {
            w[i].push(comp);
        }
    }
    let vol = grid.cell_volume();
    let inside: f64 = (0..grid.len())
        .into_par_iter()
        .map(|x| {
            let a: Vec<f64> = (0..d * d).map(|p| w[p / d][p % d][x]).collect();
            quadratic_form(k, &a)
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum::<f64>()
        * vol;
    let c = green_constant(d, a_bar);
    let far = |v: &[f64]| {
        let a: Vec<f64> = (0..d * d).map(|p| poles[p % d].gradient(c, v, p / d)).collect();
        quadratic_form(k, &a)
    };
    let tail = integrate_cube_exterior(d, grid.half_width() + h / 2.0, nodes, &far);
    Ok((inside, tail))
}

type Level = fn(&KernelTensor, f64, &TestFunctionPair, f64, f64, usize) -> Result<(f64, f64)>;

fn richardson(level: Level, k: &KernelTensor, a_bar: f64, pair: &TestFunctionPair, params: &QuadratureParams, radius: f64) -> Result<VarianceQuadrature> {
    if pair.f.is_zero() || pair.g.is_zero() || k.entries.iter().all(|&v| v == 0.0) {
        return Ok(VarianceQuadrature::zero(params));
    }
    let (ci, ct) = level(k, a_bar, pair, params.h, params.half_width, params.tail_nodes)?;
    let (fi, ft) = level(k, a_bar, pair, params.h / 2.0, params.half_width, params.tail_nodes)?;
    let coarse = ci + ct;
    let fine = fi + ft;
    let richardson_error = (fine - coarse).abs() / 3.0;
    let tail_error = ft.abs() * (radius / params.half_width).min(1.0);
    let q = VarianceQuadrature {
        sigma2: fine + (fine - coarse) / 3.0,
        fine,
        coarse,
        h: params.h / 2.0,
        half_width: params.half_width,
        richardson_error,
        tail: ft,
        tail_error,
        error: richardson_error + tail_error,
    };
    if let Some(max) = params.max_rel_error {
        if q.relative_error() > max {
            return Err(HglError::invalid(format!(
                "quadrature relative error {:.3e} exceeds {max:.3e}; refine the grid",
                q.relative_error()
            )));
        }
    }
    Ok(q)
}

/// `sigma_g^2 = sum K~_ijkl int h_i^g h_j^f h_k^g h_l^f` with
/// `h_i^g = d_i G_h * g`.
pub fn sigma_g_squared(k: &KernelTensor, a_bar: f64, pair: &TestFunctionPair, params: &QuadratureParams) -> Result<VarianceQuadrature> {
    check_pair(k, pair, a_bar)?;
    let radius = pair.f.radius.max(pair.g.radius);
    richardson(sigma_level, k, a_bar, pair, params, radius)
}

/// `sigma~_g^2 = sum K~_ijkl int [d_i G_h * (g h_j^f)] [d_k G_h * (g h_l^f)]`.
pub fn sigma_tilde_g_squared(k: &KernelTensor, a_bar: f64, pair: &TestFunctionPair, params: &QuadratureParams) -> Result<VarianceQuadrature> {
    check_pair(k, pair, a_bar)?;
    richardson(sigma_tilde_level, k, a_bar, pair, params, pair.g.radius)
}

/// `sigma_g^2` for `K~ = kappa delta_ij delta_kl` and concentric radial bumps,
/// by one-dimensional quadrature.
pub fn radial_sigma_isotropic(kappa: f64, a_bar: f64, pair: &TestFunctionPair) -> f64 {
    let d = pair.f.d();
    let s = sphere_area(d);
    let h = |t: &TestFunction, r: f64| t.mass_within(r) / (a_bar * s * r.powi(d as i32 - 1));
    let top = pair.f.radius.max(pair.g.radius);
    let gl = legendre(200);
    let inner = gl.integrate(0.0, top, |r| s * r.powi(d as i32 - 1) * (h(&pair.f, r) * h(&pair.g, r)).powi(2));
    let mtot = pair.f.mass() * pair.g.mass() / (a_bar * a_bar * s * s);
    // beyond the supports the integrand is s r^{d-1} (m_f m_g / (a^2 s^2))^2 r^{4-4d}
    let tail = s * mtot * mtot * top.powi(4 - 3 * d as i32) / (3.0 * d as f64 - 4.0);
    kappa * (inner + tail)
}

/// `sigma~_g^2` for `K~ = kappa delta_ij delta_kl` and concentric radial
/// bumps: `kappa int Phi^2` with `Phi(r) = int_r^inf w / a`,
/// `w = -g m_f / (a |S| r^{d-1})`.
pub fn radial_sigma_tilde_isotropic(kappa: f64, a_bar: f64, pair: &TestFunctionPair) -> f64 {
    let d = pair.f.d();
    let s = sphere_area(d);
    let w = |r: f64| -pair.g.radial(r) * pair.f.mass_within(r) / (a_bar * s * r.powi(d as i32 - 1));
    let top = pair.g.radius;
    let gl = legendre(120);
    let phi = |r: f64| gl.integrate(r, top, |t| w(t) / a_bar);
    let outer = legendre(120);
    kappa * outer.integrate(0.0, top, |r| s * r.powi(d as i32 - 1) * phi(r).powi(2))
}

/// The two universal integrals of the GFF two-point function at `|x| = 1`:
/// `I_1 = int tau (tau - 1) rho^{d-2} / (|y|^d |y - e|^d)` and
/// `I_2 = int rho^d / (|y|^d |y - e|^d)` over the half-plane `rho > 0`, by
/// polar cubature about the origin on the half `tau < 1/2` (the integrands
/// are symmetric under `tau -> 1 - tau`).
pub fn gff_universal_integrals(d: usize) -> (f64, f64) {
    let gl = legendre(64);
    let pairs = gl.as_node_weight_pairs();
    let map = |a: f64, b: f64, x: f64| 0.5 * ((b - a) * x + a + b);
    let df = d as f64;
    let f = |r: f64, th: f64| -> (f64, f64) {
        let (s, c) = th.sin_cos();
        let d1 = (r * r - 2.0 * r * c + 1.0).powf(df / 2.0);
        (s.powi(d as i32 - 2) * c * (r * c - 1.0) / d1, r * s.powi(d as i32) / d1)
    };
    let mut i1 = 0.0;
    let mut i2 = 0.0;
    for (a, b) in [(0.0, PI / 3.0), (PI / 3.0, PI / 2.0), (PI / 2.0, PI)] {
        for &(xt, wt) in pairs {
            let th = map(a, b, xt);
            let wth = 0.5 * (b - a) * wt;
            let rmax = if th < PI / 2.0 { 0.5 / th.cos() } else { f64::INFINITY };
            let near = rmax.min(1.0);
            for &(xr, wr) in pairs {
                let r = map(0.0, near, xr);
                let (p, q) = f(r, th);
                i1 += wth * 0.5 * near * wr * p;
                i2 += wth * 0.5 * near * wr * q;
            }
            if rmax > 1.0 {
                let umin = 1.0 / rmax;
                for &(xu, wu) in pairs {
                    let u = map(umin, 1.0, xu);
                    let (p, q) = f(1.0 / u, th);
                    let jac = 0.5 * (1.0 - umin) * wu / (u * u);
                    i1 += wth * jac * p;
                    i2 += wth * jac * q;
                }
            }
        }
    }
    (2.0 * i1, 2.0 * i2)
}

fn mean_diagonal(m: &Matrix) -> f64 {
    m.iter().enumerate().map(|(i, r)| r[i]).sum::<f64>() / m.len() as f64
}

/// `E[Phi(0) Phi(x)] = int grad G_h(y) . Q grad G_h(y - x) dy` for
/// `a_h = a_bar I` with `a_bar` the mean diagonal of `a_hom`.
pub fn gff_two_point(q: &Matrix, a_hom: &Matrix, x: &[f64]) -> Result<f64> {
    let d = x.len();
    if d < 3 {
        return Err(HglError::invalid("GFF two-point function needs d >= 3"));
    }
    if q.len() != d || a_hom.len() != d {
        return Err(HglError::GeometryMismatch("matrix dimensions".into()));
    }
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if r == 0.0 {
        return Err(HglError::invalid("two-point function is singular at x = 0"));
    }
    let xhat: Vec<f64> = x.iter().map(|v| v / r).collect();
    let qxx: f64 = (0..d).map(|i| (0..d).map(|j| xhat[i] * q[i][j] * xhat[j]).sum::<f64>()).sum();
    let tr: f64 = (0..d).map(|i| q[i][i]).sum();
    let qperp = (tr - qxx) / (d as f64 - 1.0);
    if qxx == 0.0 && qperp == 0.0 {
        return Ok(0.0);
    }
    let (i1, i2) = gff_universal_integrals(d);
    let c = green_constant(d, mean_diagonal(a_hom));
    let pref = c * c * (d as f64 - 2.0).powi(2) * sphere_area(d - 1);
    Ok(r.powi(2 - d as i32) * pref * (qxx * i1 + qperp * i2))
}

fn cholesky(m: &Matrix) -> Result<Matrix> {
    let d = m.len();
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let v = m[i][i] - s;
                if v < -1e-12 * m[i][i].abs().max(1.0) {
                    return Err(HglError::NotPositiveDefinite);
                }
                l[i][i] = v.max(0.0).sqrt();
            } else {
                l[i][j] = if l[j][j] > 0.0 { (m[i][j] - s) / l[j][j] } else { 0.0 };
            }
        }
    }
    Ok(l)
}

/// Spectral sampler of `div* a_h grad Phi = div* W` on a torus, with `W`
/// i.i.d. `N(0, Q)` per site; the zero mode is dropped.
pub fn sample_gff(q: &Matrix, a_hom: &Matrix, geom: &LatticeGeometry, seed: u64) -> Result<SiteField> {
    let d = geom.d();
    if !geom.is_periodic() {
        return Err(HglError::invalid("GFF sampler needs a torus"));
    }
    if q.len() != d || a_hom.len() != d || !is_positive_definite(a_hom) {
        return Err(HglError::NotPositiveDefinite);
    }
    let l = cholesky(q)?;
    let n = geom.n_sites();
    let mut xi = vec![0.0; d * n];
    gaussian_field(seed, &mut xi);
    let spectra: Vec<Vec<Complex64>> = (0..d)
        .into_par_iter()
        .map(|i| {
            let w: Vec<f64> = (0..n).map(|x| (0..d).map(|k| l[i][k] * xi[k * n + x]).sum()).collect();
            forward_real(&w, geom.shape())
        })
        .collect();
    let mut phi = vec![Complex64::new(0.0, 0.0); n];
    for_each_mode(geom.shape(), |idx, w| {
        if idx == 0 {
            return;
        }
        let s = constant_symbol(a_hom, w);
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, &k) in w.iter().enumerate() {
            let z = Complex64::from_polar(1.0, k) - 1.0;
            acc += z.conj() * spectra[i][idx];
        }
        phi[idx] = acc / s;
    });
    Ok(inverse_real(phi, geom.shape()))
}

/// Exact torus covariance `E[Phi(0) Phi(r e_1)]` of the sampler, by direct
/// summation over Fourier modes, for every `r` in `radii`.
pub fn gff_torus_covariance(q: &Matrix, a_hom: &Matrix, d: usize, l: usize, radii: &[usize]) -> Vec<f64> {
    let z: Vec<Complex64> = (0..l).map(|k| Complex64::from_polar(1.0, crate::fft::frequency(k, l)) - 1.0).collect();
    let rest = l.pow(d as u32 - 1);
    let per_k0: Vec<f64> = (0..l)
        .into_par_iter()
        .map(|k0| {
            let mut acc = 0.0;
            let mut zs = vec![Complex64::new(0.0, 0.0); d];
            for r in 0..rest {
                let mut t = r;
                zs[0] = z[k0];
                for zj in zs.iter_mut().skip(1) {
                    *zj = z[t % l];
                    t /= l;
                }
                if k0 == 0 && r == 0 {
                    continue;
                }
                let mut s = 0.0;
                let mut num = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        let p = (zs[i].conj() * zs[j]).re;
                        s += a_hom[i][j] * p;
                        num += q[i][j] * p;
                    }
                }
                acc += num / (s * s);
            }
            acc
        })
        .collect();
    let n = (l as f64).powi(d as i32);
    radii
        .iter()
        .map(|&r| {
            per_k0
                .iter()
                .enumerate()
                .map(|(k0, v)| v * (crate::fft::frequency(k0, l) * r as f64).cos())
                .sum::<f64>()
                / n
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GffStudyConfig {
    pub d: usize,
    pub l: usize,
    pub q: Matrix,
    pub a_hom: Matrix,
    pub n_samples: usize,
    pub seed: u64,
    /// Continuum length of one lattice spacing.
    pub spacing: f64,
    /// Continuum distances of the two-point comparison.
    pub distances: Vec<f64>,
    /// Lattice box sides of the box-average variance.
    pub box_sides: Vec<usize>,
}

impl Default for GffStudyConfig {
    fn default() -> Self {
        let eye: Matrix = (0..3).map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        GffStudyConfig {
            d: 3,
            l: 128,
            q: eye.clone(),
            a_hom: eye.iter().map(|r| r.iter().map(|v| 2.0 * v).collect()).collect(),
            n_samples: 48,
            seed: 5,
            spacing: 0.25,
            distances: vec![2.0, 4.0, 8.0],
            box_sides: vec![2, 4, 8, 16],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoPointRow {
    pub distance: f64,
    pub lattice_distance: usize,
    pub quadrature: f64,
    /// Sampled value, rescaled to continuum units and corrected for the
    /// finite torus.
    pub sampled: Estimate,
    pub finite_volume_correction: f64,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxVarianceRow {
    pub side: usize,
    pub variance: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GffReport {
    pub config: GffStudyConfig,
    pub two_point: Vec<TwoPointRow>,
    pub box_variance: Vec<BoxVarianceRow>,
    pub box_slope: LinearFit,
}

/// Cyclic box sums of side `r` along every axis, divided by `r^d`.
fn box_average(geom: &LatticeGeometry, f: &[f64], r: usize) -> Vec<f64> {
    let mut cur = f.to_vec();
    for i in 0..geom.d() {
        let (outer, len, inner) = geom.lines(i);
        let mut next = vec![0.0; cur.len()];
        for o in 0..outer {
            for k in 0..inner {
                let at = |c: usize| o * len * inner + (c % len) * inner + k;
                let mut s: f64 = (0..r).map(|c| cur[at(c)]).sum();
                for c in 0..len {
                    next[at(c)] = s;
                    s += cur[at(c + r)] - cur[at(c)];
                }
            }
        }
        cur = next;
    }
    let vol = (r as f64).powi(geom.d() as i32);
    cur.iter().map(|v| v / vol).collect()
}

/// Two-point function and box-average scaling of sampled fields.
pub fn gff_study(cfg: &GffStudyConfig) -> Result<GffReport> {
    let d = cfg.d;
    let geom = LatticeGeometry::torus(d, cfg.l)?;
    let lattice: Vec<usize> = cfg.distances.iter().map(|x| (x / cfg.spacing).round() as usize).collect();
    if lattice.iter().any(|&r| r == 0 || 2 * r >= cfg.l) || cfg.box_sides.iter().any(|&r| r == 0 || r > cfg.l) {
        return Err(HglError::invalid("distances and box sides must fit in the torus"));
    }
    if cfg.n_samples < 2 {
        return Err(HglError::invalid("need at least two samples"));
    }
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.n_samples as u64)
        .map(|s| {
            let phi = sample_gff(&cfg.q, &cfg.a_hom, &geom, derive_seed(cfg.seed, s))?;
            let n = geom.n_sites();
            let two: Vec<f64> = lattice
                .iter()
                .map(|&r| {
                    let mut acc = 0.0;
                    for m in 0..d {
                        let (outer, len, inner) = geom.lines(m);
                        for o in 0..outer {
                            for c in 0..len {
                                let row = o * len * inner + c * inner;
                                let other = o * len * inner + ((c + r) % len) * inner;
                                for k in 0..inner {
                                    acc += phi[row + k] * phi[other + k];
                                }
                            }
                        }
                    }
                    acc / (n * d) as f64
                })
                .collect();
            let boxes: Vec<f64> = cfg
                .box_sides
                .iter()
                .map(|&r| {
                    let avg = box_average(&geom, &phi, r);
                    avg.iter().map(|v| v * v).sum::<f64>() / n as f64
                })
                .collect();
            Ok((two, boxes))
        })
        .collect::<Result<_>>()?;
    // finite-volume correction from exact sums at L, 2L, 4L:
    // C_L = C_inf + a / L + b / L^3
    let cl = |l: usize| gff_torus_covariance(&cfg.q, &cfg.a_hom, d, l, &lattice);
    let (c1, c2, c4) = (cl(cfg.l), cl(2 * cfg.l), cl(4 * cfg.l));
    let scale = cfg.spacing.powi(2 - d as i32);
    let mut two_point = Vec::new();
    for (k, &r) in lattice.iter().enumerate() {
        let l = cfg.l as f64;
        // solve the 3x3 system in (C_inf, a, b)
        let rows = [[1.0, 1.0 / l, l.powi(-3)], [1.0, 0.5 / l, (2.0 * l).powi(-3)], [1.0, 0.25 / l, (4.0 * l).powi(-3)]];
        let rhs = [c1[k], c2[k], c4[k]];
        let c_inf = solve3(rows, rhs)[0];
        let fv = c_inf - c1[k];
        let st = RunningStats::from_slice(&per_sample.iter().map(|p| p.0[k]).collect::<Vec<_>>());
        let m = st.mean_estimate();
        let sampled = Estimate { value: (m.value + fv) * scale, se: m.se * scale, n: m.n };
        let mut x = vec![0.0; d];
        x[0] = cfg.distances[k];
        let quadrature = gff_two_point(&cfg.q, &cfg.a_hom, &x)?;
        two_point.push(TwoPointRow {
            distance: cfg.distances[k],
            lattice_distance: r,
            quadrature,
            sampled,
            finite_volume_correction: fv * scale,
            z: (sampled.value - quadrature).abs() / sampled.se,
        });
    }
    let box_variance: Vec<BoxVarianceRow> = cfg
        .box_sides
        .iter()
        .enumerate()
        .map(|(k, &side)| BoxVarianceRow {
            side,
            variance: RunningStats::from_slice(&per_sample.iter().map(|p| p.1[k]).collect::<Vec<_>>()).mean_estimate(),
        })
        .collect();
    let box_slope = log_log_fit(
        &box_variance.iter().map(|r| r.side as f64).collect::<Vec<_>>(),
        &box_variance.iter().map(|r| r.variance.value).collect::<Vec<_>>(),
    );
    Ok(GffReport { config: cfg.clone(), two_point, box_variance, box_slope })
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for c in 0..3 {
        let p = (c..3).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).expect("rows");
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..3 {
            let f = a[r][c] / a[c][c];
            for k in c..3 {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = [0.0; 3];
    for c in (0..3).rev() {
        x[c] = (b[c] - (c + 1..3).map(|k| a[c][k] * x[k]).sum::<f64>()) / a[c][c];
    }
    x
}
