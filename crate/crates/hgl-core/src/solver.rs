//! Matrix-free conjugate gradient for `(lambda + div* a grad) u = rhs`.

use serde::{Deserialize, Serialize};

use crate::error::{HglError, Result};
use crate::lattice::{Boundary, LatticeGeometry, SiteField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Preconditioner {
    #[default]
    None,
    Diagonal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub rel_tol: f64,
    /// Iteration cap; `None` means ten times the number of sites.
    pub max_iter: Option<usize>,
    pub preconditioner: Preconditioner,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { rel_tol: 1e-10, max_iter: None, preconditioner: Preconditioner::None }
    }
}

impl SolverConfig {
    pub fn with_tol(rel_tol: f64) -> Self {
        SolverConfig { rel_tol, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0) {
            return Err(HglError::invalid("rel_tol must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub u: SiteField,
    pub iterations: usize,
    /// Final relative residual `|A u - rhs| / |rhs|`.
    pub residual: f64,
    /// True relative residuals recomputed at each restart.
    pub restart_residuals: Vec<f64>,
}

/// A column `G_lambda(., y)` of the Green function.
#[derive(Clone, Debug, PartialEq)]
pub struct GreenColumn {
    pub y: usize,
    pub lambda: f64,
    pub values: SiteField,
}

fn check_lengths(geom: &LatticeGeometry, a: &[f64], u: &[f64]) -> Result<()> {
    if a.len() != geom.n_edges() || u.len() != geom.n_sites() {
        return Err(HglError::GeometryMismatch(format!(
            "conductances {} / field {} vs geometry {} edges / {} sites",
            a.len(),
            u.len(),
            geom.n_edges(),
            geom.n_sites()
        )));
    }
    Ok(())
}

/// `out = lambda u + div*(a grad u)`.
pub fn apply_operator_into(geom: &LatticeGeometry, a: &[f64], lambda: f64, u: &[f64], out: &mut [f64]) {
    for (o, &x) in out.iter_mut().zip(u) {
        *o = lambda * x;
    }
    for i in 0..geom.d() {
        let ai = &a[geom.edge_offset(i)..geom.edge_offset(i) + geom.edges_in_direction(i)];
        let (outer, len, inner) = geom.lines(i);
        match geom.bc() {
            Boundary::Periodic => {
                for o in 0..outer {
                    let base = o * len * inner;
                    for c in 0..len {
                        let row = base + c * inner;
                        let next = if c + 1 == len { base } else { row + inner };
                        if inner == 1 {
                            let flux = ai[row] * (u[next] - u[row]);
                            out[row] -= flux;
                            out[next] += flux;
                        } else {
                            let (ar, ur, un) = (&ai[row..row + inner], &u[row..row + inner], &u[next..next + inner]);
                            for k in 0..inner {
                                let flux = ar[k] * (un[k] - ur[k]);
                                out[row + k] -= flux;
                                out[next + k] += flux;
                            }
                        }
                    }
                }
            }
            Boundary::DirichletZero => {
                for o in 0..outer {
                    let sbase = o * len * inner;
                    let ebase = o * (len + 1) * inner;
                    for s in 0..=len {
                        let erow = ebase + s * inner;
                        for k in 0..inner {
                            let ae = ai[erow + k];
                            match (s >= 1, s < len) {
                                (true, true) => {
                                    let t = sbase + (s - 1) * inner + k;
                                    let h = t + inner;
                                    let flux = ae * (u[h] - u[t]);
                                    out[t] -= flux;
                                    out[h] += flux;
                                }
                                (false, true) => {
                                    let h = sbase + s * inner + k;
                                    out[h] += ae * u[h];
                                }
                                (true, false) => {
                                    let t = sbase + (s - 1) * inner + k;
                                    out[t] += ae * u[t];
                                }
                                (false, false) => {}
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `lambda u + div*(a grad u)`, computed matrix-free.
pub fn apply_operator(geom: &LatticeGeometry, a: &[f64], lambda: f64, u: &[f64]) -> Result<SiteField> {
    check_lengths(geom, a, u)?;
    let mut out = vec![0.0; u.len()];
    apply_operator_into(geom, a, lambda, u, &mut out);
    Ok(out)
}

/// Diagonal of the operator: `lambda + sum of conductances at x`.
pub fn operator_diagonal(geom: &LatticeGeometry, a: &[f64], lambda: f64) -> SiteField {
    let mut diag = vec![lambda; geom.n_sites()];
    for e in 0..geom.n_edges() {
        let (t, h) = geom.edge_sites(e);
        if let Some(t) = t {
            diag[t] += a[e];
        }
        if let Some(h) = h {
            diag[h] += a[e];
        }
    }
    diag
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project_mean_zero(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Solves `(lambda + div* a grad) u = rhs`.
pub fn solve(geom: &LatticeGeometry, a: &[f64], lambda: f64, rhs: &[f64], config: &SolverConfig) -> Result<Solution> {
    solve_from(geom, a, lambda, rhs, None, config)
}

/// As [`solve`], starting from an initial guess.
pub fn solve_from(
    geom: &LatticeGeometry,
    a: &[f64],
    lambda: f64,
    rhs: &[f64],
    guess: Option<&[f64]>,
    config: &SolverConfig,
) -> Result<Solution> {
    config.validate()?;
    check_lengths(geom, a, rhs)?;
    if !(lambda >= 0.0) {
        return Err(HglError::invalid("lambda must be nonnegative"));
    }
    let singular = lambda == 0.0 && geom.is_periodic();
    let n = geom.n_sites();
    let mut b = rhs.to_vec();
    if singular {
        let scale: f64 = rhs.iter().map(|x| x.abs()).sum();
        let mean = rhs.iter().sum::<f64>() / n as f64;
        if mean.abs() * n as f64 > 1e-10 * scale.max(f64::MIN_POSITIVE) {
            return Err(HglError::NonZeroMean { mean });
        }
        project_mean_zero(&mut b);
    }
    let bnorm = norm2(&b);
    let max_iter = config.max_iter.unwrap_or(10 * n);
    if bnorm == 0.0 {
        return Ok(Solution { u: vec![0.0; n], iterations: 0, residual: 0.0, restart_residuals: vec![0.0] });
    }
    let inv_diag: Option<Vec<f64>> = match config.preconditioner {
        Preconditioner::None => None,
        Preconditioner::Diagonal => Some(operator_diagonal(geom, a, lambda).iter().map(|v| 1.0 / v).collect()),
    };
    let precondition = |r: &[f64], z: &mut [f64]| {
        match &inv_diag {
            None => z.copy_from_slice(r),
            Some(w) => {
                for ((zi, ri), wi) in z.iter_mut().zip(r).zip(w) {
                    *zi = ri * wi;
                }
            }
        }
        if singular {
            project_mean_zero(z);
        }
    };

    let mut u = match guess {
        Some(g) => {
            check_lengths(geom, a, g)?;
            let mut u = g.to_vec();
            if singular {
                project_mean_zero(&mut u);
            }
            u
        }
        None => vec![0.0; n],
    };
    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut q = vec![0.0; n];
    let tol = config.rel_tol * bnorm;
    let mut restart_residuals = Vec::new();
    let mut iterations = 0usize;

    loop {
        // true residual at the start of each cycle
        apply_operator_into(geom, a, lambda, &u, &mut r);
        for (ri, bi) in r.iter_mut().zip(&b) {
            *ri = bi - *ri;
        }
        if singular {
            project_mean_zero(&mut r);
        }
        let rnorm = norm2(&r);
        restart_residuals.push(rnorm / bnorm);
        if rnorm <= tol {
            return Ok(Solution { u, iterations, residual: rnorm / bnorm, restart_residuals });
        }
        if iterations >= max_iter {
            return Err(HglError::NotConverged { iterations, residual: rnorm / bnorm });
        }
        precondition(&r, &mut z);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut converged = false;
        let cycle_start = iterations;
        while iterations < max_iter {
            apply_operator_into(geom, a, lambda, &p, &mut q);
            if singular {
                project_mean_zero(&mut q);
            }
            let pq = dot(&p, &q);
            if !(pq > 0.0) {
                break;
            }
            let alpha = rz / pq;
            for i in 0..n {
                u[i] += alpha * p[i];
                r[i] -= alpha * q[i];
            }
            iterations += 1;
            if norm2(&r) <= tol {
                converged = true;
                break;
            }
            precondition(&r, &mut z);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        if !converged && (iterations >= max_iter || iterations == cycle_start) {
            apply_operator_into(geom, a, lambda, &u, &mut r);
            for (ri, bi) in r.iter_mut().zip(&b) {
                *ri = bi - *ri;
            }
            if singular {
                project_mean_zero(&mut r);
            }
            return Err(HglError::NotConverged { iterations, residual: norm2(&r) / bnorm });
        }
        if singular {
            project_mean_zero(&mut u);
        }
    }
}

/// Green column: source `delta_y` on a box or for `lambda > 0`, and the
/// mean-adjusted source `delta_y - 1/#sites` on a torus at `lambda = 0`.
pub fn green_column(
    geom: &LatticeGeometry,
    a: &[f64],
    lambda: f64,
    y: usize,
    config: &SolverConfig,
) -> Result<GreenColumn> {
    if y >= geom.n_sites() {
        return Err(HglError::invalid(format!("source site {y} out of range")));
    }
    let rhs = green_source(geom, lambda, y);
    let sol = solve(geom, a, lambda, &rhs, config)?;
    Ok(GreenColumn { y, lambda, values: sol.u })
}

pub fn green_source(geom: &LatticeGeometry, lambda: f64, y: usize) -> SiteField {
    let n = geom.n_sites();
    let shift = if lambda == 0.0 && geom.is_periodic() { 1.0 / n as f64 } else { 0.0 };
    let mut rhs = vec![-shift; n];
    rhs[y] += 1.0;
    rhs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{ConductanceLaw, Environment};
    use crate::lattice::dot as ldot;

    #[test]
    fn constants_are_in_the_kernel() {
        let g = LatticeGeometry::torus(3, 5).unwrap();
        let env = Environment::sample(&g, ConductanceLaw::default(), 1);
        let out = apply_operator(&g, &env.conductances(), 0.0, &vec![3.0; g.n_sites()]).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn ring_stencil() {
        let g = LatticeGeometry::torus(1, 4).unwrap();
        let out = apply_operator(&g, &[1.0; 4], 0.0, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(out, vec![2.0, -1.0, 0.0, -1.0]);
    }

    #[test]
    fn quadratic_form_is_the_energy() {
        for bc in [Boundary::Periodic, Boundary::DirichletZero] {
            let g = LatticeGeometry::new(vec![4, 5, 3], bc).unwrap();
            let env = Environment::sample(&g, ConductanceLaw::default(), 2);
            let a = env.conductances();
            let u: Vec<f64> = (0..g.n_sites()).map(|i| (i as f64 * 0.37).sin()).collect();
            let au = apply_operator(&g, &a, 0.0, &u).unwrap();
            let du = g.grad(&u).unwrap();
            let energy: f64 = a.iter().zip(&du).map(|(a, d)| a * d * d).sum();
            assert!((ldot(&u, &au) - energy).abs() < 1e-10 * energy);
            assert!(energy >= 0.0);
        }
    }

    #[test]
    fn operator_matches_grad_div_composition() {
        let g = LatticeGeometry::new(vec![3, 4, 5], Boundary::DirichletZero).unwrap();
        let env = Environment::sample(&g, ConductanceLaw::default(), 3);
        let a = env.conductances();
        let u: Vec<f64> = (0..g.n_sites()).map(|i| ((i * 31) % 7) as f64).collect();
        let du: Vec<f64> = g.grad(&u).unwrap().iter().zip(&a).map(|(d, a)| d * a).collect();
        let direct = g.div(&du).unwrap();
        let fused = apply_operator(&g, &a, 0.5, &u).unwrap();
        for i in 0..u.len() {
            assert!((fused[i] - 0.5 * u[i] - direct[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_recovers_field() {
        let g = LatticeGeometry::dirichlet(3, 10).unwrap();
        let env = Environment::sample(&g, ConductanceLaw::default(), 4);
        let a = env.conductances();
        let u0: Vec<f64> = (0..g.n_sites()).map(|i| (i as f64 * 0.11).cos()).collect();
        let rhs = apply_operator(&g, &a, 0.0, &u0).unwrap();
        let sol = solve(&g, &a, 0.0, &rhs, &SolverConfig::with_tol(1e-12)).unwrap();
        let err = norm2(&sol.u.iter().zip(&u0).map(|(x, y)| x - y).collect::<Vec<_>>()) / norm2(&u0);
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn rejects_non_mean_zero_rhs_on_torus() {
        let g = LatticeGeometry::torus(2, 4).unwrap();
        let mut rhs = vec![0.0; 16];
        rhs[0] = 1.0;
        let r = solve(&g, &[1.0; 32], 0.0, &rhs, &SolverConfig::default());
        assert!(matches!(r, Err(HglError::NonZeroMean { .. })));
        assert!(solve(&g, &[1.0; 32], 0.1, &rhs, &SolverConfig::default()).is_ok());
    }

    #[test]
    fn torus_solution_is_mean_zero() {
        let g = LatticeGeometry::torus(3, 6).unwrap();
        let env = Environment::sample(&g, ConductanceLaw::default(), 5);
        let rhs = green_source(&g, 0.0, 7);
        let sol = solve(&g, &env.conductances(), 0.0, &rhs, &SolverConfig::default()).unwrap();
        assert!(sol.u.iter().sum::<f64>().abs() < 1e-12);
        assert!(sol.residual <= 1e-10);
    }

    #[test]
    fn iteration_cap_reports_residual() {
        let g = LatticeGeometry::dirichlet(3, 12).unwrap();
        let cfg = SolverConfig { rel_tol: 1e-14, max_iter: Some(3), preconditioner: Preconditioner::None };
        let r = solve(&g, &vec![1.0; g.n_edges()], 0.0, &vec![1.0; g.n_sites()], &cfg);
        match r {
            Err(HglError::NotConverged { iterations, residual }) => {
                assert_eq!(iterations, 3);
                assert!(residual > 0.0 && residual < 1.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn diagonal_preconditioner_agrees() {
        let g = LatticeGeometry::torus(3, 8).unwrap();
        let env = Environment::sample(&g, ConductanceLaw::Tanh { base: 2.0, amp: 1.5 }, 6);
        let a = env.conductances();
        let rhs = green_source(&g, 0.0, 0);
        let plain = solve(&g, &a, 0.0, &rhs, &SolverConfig::with_tol(1e-12)).unwrap();
        let cfg = SolverConfig { preconditioner: Preconditioner::Diagonal, ..SolverConfig::with_tol(1e-12) };
        let pre = solve(&g, &a, 0.0, &rhs, &cfg).unwrap();
        for (x, y) in plain.u.iter().zip(&pre.u) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn warm_start_and_restart_history() {
        let g = LatticeGeometry::torus(3, 8).unwrap();
        let env = Environment::sample(&g, ConductanceLaw::default(), 7);
        let a = env.conductances();
        let rhs = green_source(&g, 0.0, 3);
        let cold = solve(&g, &a, 0.0, &rhs, &SolverConfig::with_tol(1e-6)).unwrap();
        let warm = solve_from(&g, &a, 0.0, &rhs, Some(&cold.u), &SolverConfig::with_tol(1e-11)).unwrap();
        assert!(warm.residual <= 1e-11);
        assert!(warm.restart_residuals.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn green_symmetry() {
        let g = LatticeGeometry::dirichlet(3, 9).unwrap();
        let env = Environment::sample(&g, ConductanceLaw::default(), 8);
        let a = env.conductances();
        let cfg = SolverConfig::with_tol(1e-12);
        let x = g.site_index(&[2, 3, 4]).unwrap();
        let y = g.site_index(&[6, 5, 1]).unwrap();
        let gx = green_column(&g, &a, 0.0, x, &cfg).unwrap();
        let gy = green_column(&g, &a, 0.0, y, &cfg).unwrap();
        assert!((gx.values[y] - gy.values[x]).abs() <= 10.0 * 1e-12 * gx.values[y].abs().max(1.0));
    }

    #[test]
    fn green_column_reproduces_source() {
        let g = LatticeGeometry::dirichlet(3, 7).unwrap();
        let env = Environment::sample(&g, ConductanceLaw::default(), 9);
        let a = env.conductances();
        let col = green_column(&g, &a, 0.0, 10, &SolverConfig::default()).unwrap();
        let back = apply_operator(&g, &a, 0.0, &col.values).unwrap();
        let src = green_source(&g, 0.0, 10);
        let err: f64 = back.iter().zip(&src).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(err <= 1e-10 * norm2(&src) * 1.0001);
    }
}
