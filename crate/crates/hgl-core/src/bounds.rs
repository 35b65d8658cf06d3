//! Brute-force checks of lattice convolution estimates: two-point and
//! multi-point convolutions, the four-point error function
//! `E(x1..x4) = sum_e sum_i log|e - x_i|_* / |e - x_i|_*^d prod_{j != i} |e - x_j|_*^{1-d}`
//! and two weighted sums over `eps`-scaled balls.
//!
//! Each check evaluates the left-hand side over the cube `|y|_inf <= R` and
//! again over `2R`, fits one constant `C = max LHS / RHS` and passes when
//! `C <= max_constant` and the two fits differ by less than a factor two.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HglError, Result};
use crate::hs::spectral_gap_check;

/// Exponent shift standing for `c-` in bounds of the form `|x|^{-(c-)}`.
pub const MINUS: f64 = 0.1;

fn star(x: &[f64]) -> f64 {
    2.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn star_between(a: &[f64], b: &[f64]) -> f64 {
    2.0 + a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `sum_{|y|_inf <= radius} f(y)` over `Z^d`.
pub fn lattice_sum(d: usize, radius: usize, f: &(dyn Fn(&[f64]) -> f64 + Sync)) -> f64 {
    let r = radius as i64;
    let side = (2 * r + 1) as usize;
    let inner = side.pow(d as u32 - 1);
    (-r..=r)
        .into_par_iter()
        .map(|y0| {
            let mut y = vec![0.0; d];
            y[0] = y0 as f64;
            let mut acc = 0.0;
            for s in 0..inner {
                let mut t = s;
                for yj in y.iter_mut().skip(1) {
                    *yj = (t % side) as f64 - r as f64;
                    t /= side;
                }
                acc += f(&y);
            }
            acc
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundPoint {
    pub label: String,
    pub lhs: f64,
    pub lhs_doubled: f64,
    pub rhs: f64,
    /// Differs from `rhs` only for Monte Carlo checks, where doubling means
    /// doubling the sample count.
    pub rhs_doubled: f64,
}

impl BoundPoint {
    fn deterministic(label: String, lhs: f64, lhs_doubled: f64, rhs: f64) -> Self {
        BoundPoint { label, lhs, lhs_doubled, rhs, rhs_doubled: rhs }
    }

    pub fn ratio(&self) -> f64 {
        self.lhs / self.rhs
    }

    pub fn ratio_doubled(&self) -> f64 {
        self.lhs_doubled / self.rhs_doubled
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub params: String,
    pub radius: usize,
    pub points: Vec<BoundPoint>,
    /// `max LHS / RHS` over the points at the nominal radius.
    pub constant: f64,
    pub constant_doubled: f64,
    pub max_constant: f64,
    pub pass: bool,
}

impl BoundCheck {
    fn assemble(name: &str, params: String, radius: usize, points: Vec<BoundPoint>, max_constant: f64) -> Self {
        let constant = points.iter().map(|p| p.ratio()).fold(0.0, f64::max);
        let constant_doubled = points.iter().map(|p| p.ratio_doubled()).fold(0.0, f64::max);
        let finite = points.iter().all(|p| p.lhs.is_finite() && p.rhs > 0.0);
        let pass = finite && constant <= max_constant && constant_doubled <= max_constant && Self::drift_of(constant, constant_doubled) < 2.0;
        BoundCheck { name: name.into(), params, radius, points, constant, constant_doubled, max_constant, pass }
    }

    fn drift_of(a: f64, b: f64) -> f64 {
        if a == 0.0 && b == 0.0 {
            1.0
        } else {
            a.max(b) / a.min(b)
        }
    }

    /// Change of the fitted constant under radius doubling, as a factor.
    pub fn drift(&self) -> f64 {
        Self::drift_of(self.constant, self.constant_doubled)
    }

    /// `max ratio / min ratio` across the points.
    pub fn spread(&self) -> f64 {
        let r: Vec<f64> = self.points.iter().map(|p| p.ratio()).collect();
        r.iter().cloned().fold(0.0, f64::max) / r.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn csv_header() -> &'static str {
        "check,params,label,radius,lhs,lhs_doubled,rhs,ratio,constant,pass"
    }

    pub fn csv_rows(&self) -> Vec<String> {
        self.points
            .iter()
            .map(|p| {
                format!(
                    "{},\"{}\",{},{},{:.10e},{:.10e},{:.10e},{:.6e},{:.6e},{}",
                    self.name,
                    self.params,
                    p.label,
                    self.radius,
                    p.lhs,
                    p.lhs_doubled,
                    p.rhs,
                    p.ratio(),
                    self.constant,
                    self.pass
                )
            })
            .collect()
    }
}

fn max_norm(points: &[Vec<f64>]) -> f64 {
    points.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max)
}

fn check_radius(points: &[Vec<f64>], radius: usize) -> Result<()> {
    if (radius as f64) < 4.0 * max_norm(points) {
        return Err(HglError::invalid(format!("radius {radius} below four times the largest point norm")));
    }
    Ok(())
}

fn label(x: &[f64]) -> String {
    let parts: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
    format!("({})", parts.join(" "))
}

/// `F_{a,b}(x)`: `|x|_*^{d-a-b}` if `max < d`, `|x|_*^{-min}` if `max > d`,
/// `log|x|_* |x|_*^{-min}` if `max = d`.
pub fn convolution_rhs(d: usize, alpha: f64, beta: f64, x: &[f64]) -> f64 {
    let r = star(x);
    let df = d as f64;
    let (mx, mn) = (alpha.max(beta), alpha.min(beta));
    if (mx - df).abs() < 1e-12 {
        r.ln() / r.powf(mn)
    } else if mx < df {
        r.powf(df - alpha - beta)
    } else {
        r.powf(-mn)
    }
}

/// `sum_y |y|_*^{-a} |x - y|_*^{-b}` against `F_{a,b}(x)`.
pub fn convolution_bound_check(d: usize, alpha: f64, beta: f64, xs: &[Vec<f64>], radius: usize, max_constant: f64) -> Result<BoundCheck> {
    if !(alpha > 0.0 && beta > 0.0 && alpha + beta > d as f64) {
        return Err(HglError::invalid("need alpha, beta > 0 and alpha + beta > d"));
    }
    check_radius(xs, radius)?;
    let points = xs
        .iter()
        .map(|x| {
            let f = |y: &[f64]| star(y).powf(-alpha) * star_between(x, y).powf(-beta);
            BoundPoint::deterministic(
                label(x),
                lattice_sum(d, radius, &f),
                lattice_sum(d, 2 * radius, &f),
                convolution_rhs(d, alpha, beta, x),
            )
        })
        .collect();
    Ok(BoundCheck::assemble("cvP", format!("d={d} alpha={alpha} beta={beta}"), radius, points, max_constant))
}

/// Right-hand side `sum_i prod_{j != i, ib} |x_j - x_i|_*^{-a_j} |x_i - x_ib|_*^{d - a_i - a_ib}`
/// with `ib` the nearest neighbour of `i`.
pub fn multi_convolution_rhs(d: usize, alphas: &[f64], xs: &[Vec<f64>]) -> f64 {
    let k = xs.len();
    (0..k)
        .map(|i| {
            let ib = (0..k)
                .filter(|&j| j != i)
                .min_by(|&a, &b| star_between(&xs[a], &xs[i]).total_cmp(&star_between(&xs[b], &xs[i])))
                .expect("k >= 2");
            let mut p = star_between(&xs[i], &xs[ib]).powf(d as f64 - alphas[i] - alphas[ib]);
            for j in 0..k {
                if j != i && j != ib {
                    p *= star_between(&xs[j], &xs[i]).powf(-alphas[j]);
                }
            }
            p
        })
        .sum()
}

fn check_multi_params(d: usize, alphas: &[f64], xs: &[Vec<f64>]) -> Result<()> {
    let k = alphas.len();
    if k < 2 || xs.len() != k {
        return Err(HglError::invalid("need matching exponent and point lists of length >= 2"));
    }
    let df = d as f64;
    for i in 0..k {
        if !(alphas[i] > 0.0 && alphas[i] < df) {
            return Err(HglError::invalid("exponents must lie in (0, d)"));
        }
        for j in 0..i {
            if alphas[i] + alphas[j] <= df {
                return Err(HglError::invalid("pairwise exponent sums must exceed d"));
            }
            if xs[i] == xs[j] {
                return Err(HglError::invalid("points must be mutually different"));
            }
        }
    }
    Ok(())
}

/// `sum_y prod_i |y - x_i|_*^{-a_i}` for one or more point configurations.
pub fn multi_convolution_check(d: usize, alphas: &[f64], configs: &[Vec<Vec<f64>>], radius: usize, max_constant: f64) -> Result<BoundCheck> {
    for xs in configs {
        check_multi_params(d, alphas, xs)?;
        check_radius(xs, radius)?;
    }
    let points = configs
        .iter()
        .map(|xs| {
            let f = |y: &[f64]| xs.iter().zip(alphas).map(|(x, a)| star_between(x, y).powf(-a)).product::<f64>();
            BoundPoint::deterministic(
                xs.iter().map(|x| label(x)).collect::<Vec<_>>().join(";"),
                lattice_sum(d, radius, &f),
                lattice_sum(d, 2 * radius, &f),
                multi_convolution_rhs(d, alphas, xs),
            )
        })
        .collect();
    Ok(BoundCheck::assemble("cvmP", format!("d={d} alphas={alphas:?}"), radius, points, max_constant))
}

/// `E(x_1, .., x_4)` summed over the edges with base in the cube; every
/// base carries `d` edges.
pub fn error_function(d: usize, xs: &[Vec<f64>; 4], radius: usize) -> f64 {
    let df = d as f64;
    let f = |v: &[f64]| {
        let r: [f64; 4] = std::array::from_fn(|i| star_between(v, &xs[i]));
        let mut acc = 0.0;
        for i in 0..4 {
            let mut t = r[i].ln() / r[i].powf(df);
            for j in 0..4 {
                if j != i {
                    t *= r[j].powf(1.0 - df);
                }
            }
            acc += t;
        }
        acc
    };
    df * lattice_sum(d, radius, &f)
}

/// The five coincidence patterns of `(x, y, z, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coincidence {
    AllEqual,
    ThreeEqual,
    TwoPairs,
    OnePair,
    Distinct,
}

impl Coincidence {
    pub fn classify(xs: &[Vec<f64>; 4]) -> Option<Coincidence> {
        let (x, y, z, w) = (&xs[0], &xs[1], &xs[2], &xs[3]);
        let distinct3 = |a: &Vec<f64>, b: &Vec<f64>, c: &Vec<f64>| a != b && b != c && a != c;
        if x == y && y == z && z == w {
            Some(Coincidence::AllEqual)
        } else if x == y && y == z && z != w {
            Some(Coincidence::ThreeEqual)
        } else if x == y && z == w && x != z {
            Some(Coincidence::TwoPairs)
        } else if x == y && distinct3(y, z, w) {
            Some(Coincidence::OnePair)
        } else if distinct3(x, y, z) && distinct3(x, y, w) && z != w && distinct3(x, z, w) {
            Some(Coincidence::Distinct)
        } else {
            None
        }
    }
}

/// Case bound for `E(x, y, z, w)`.
pub fn error_function_rhs(d: usize, xs: &[Vec<f64>; 4]) -> Result<f64> {
    let df = d as f64;
    let sum_over = |set: &[&Vec<f64>], exponent: f64| -> f64 {
        (0..set.len())
            .map(|v| (0..set.len()).filter(|&u| u != v).map(|u| star_between(set[u], set[v]).powf(-exponent)).product::<f64>())
            .sum()
    };
    match Coincidence::classify(xs) {
        Some(Coincidence::AllEqual) => Ok(1.0),
        Some(Coincidence::ThreeEqual) => Ok(star_between(&xs[0], &xs[3]).powf(1.0 - df)),
        Some(Coincidence::TwoPairs) => Ok(star_between(&xs[0], &xs[3]).powf(2.0 - 2.0 * df)),
        Some(Coincidence::OnePair) => Ok(sum_over(&[&xs[0], &xs[2], &xs[3]], df - 1.0)),
        Some(Coincidence::Distinct) => Ok(sum_over(&[&xs[0], &xs[1], &xs[2], &xs[3]], df - 1.0 - MINUS)),
        None => Err(HglError::invalid("coincidence pattern not covered by the case split")),
    }
}

/// Brute-force `E` against its case bound for configurations sharing one
/// coincidence pattern.
pub fn error_function_check(d: usize, configs: &[[Vec<f64>; 4]], radius: usize, max_constant: f64) -> Result<BoundCheck> {
    let case = configs.first().and_then(Coincidence::classify).ok_or_else(|| HglError::invalid("empty or unclassified configuration"))?;
    let mut points = Vec::new();
    for xs in configs {
        if Coincidence::classify(xs) != Some(case) {
            return Err(HglError::invalid("configurations mix coincidence patterns"));
        }
        check_radius(xs, radius)?;
        points.push(BoundPoint::deterministic(
            xs.iter().map(|x| label(x)).collect::<Vec<_>>().join(";"),
            error_function(d, xs, radius),
            error_function(d, xs, 2 * radius),
            error_function_rhs(d, xs)?,
        ));
    }
    Ok(BoundCheck::assemble("erCov", format!("d={d} case={case:?}"), radius, points, max_constant))
}

/// `x` in lattice units and `eps` for the weighted-sum checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MnPoint {
    pub x: Vec<f64>,
    pub eps: f64,
}

/// `sum_y |x - y|_*^{1-d} 1_{|y| <= 1/eps}` against `eps^{-1} |eps x|_*^{1-d}`
/// (`first`), or `sum_y |x - y|_*^{-d} |eps y|_*^{-p}` against
/// `|log eps| |eps x|_*^{-min(d, p)}` (second, truncated at `radius / eps_min`-scaled cubes).
pub fn mn_bound_check(d: usize, points: &[MnPoint], second: Option<f64>, radius: usize, max_constant: f64) -> Result<BoundCheck> {
    let df = d as f64;
    let min_eps = points.iter().map(|p| p.eps).fold(f64::INFINITY, f64::min);
    if points.iter().any(|p| !(p.eps > 0.0 && p.eps < 1.0)) {
        return Err(HglError::invalid("eps must lie in (0, 1)"));
    }
    if (radius as f64) < 2.0 / min_eps {
        return Err(HglError::invalid(format!("radius {radius} below 2 / eps_min")));
    }
    let rows = points
        .iter()
        .map(|pt| {
            let ex: Vec<f64> = pt.x.iter().map(|v| v * pt.eps).collect();
            let lbl = format!("x={} eps={}", label(&pt.x), pt.eps);
            match second {
                None => {
                    let ball = 1.0 / pt.eps;
                    let f = |y: &[f64]| {
                        if y.iter().map(|v| v * v).sum::<f64>().sqrt() <= ball {
                            star_between(&pt.x, y).powf(1.0 - df)
                        } else {
                            0.0
                        }
                    };
                    let r = (ball.ceil() as usize).min(radius);
                    let lhs = lattice_sum(d, r, &f);
                    BoundPoint::deterministic(lbl, lhs, lhs, star(&ex).powf(1.0 - df) / pt.eps)
                }
                Some(p) => {
                    let f = |y: &[f64]| {
                        let ey: Vec<f64> = y.iter().map(|v| v * pt.eps).collect();
                        star_between(&pt.x, y).powf(-df) * star(&ey).powf(-p)
                    };
                    BoundPoint::deterministic(
                        lbl,
                        lattice_sum(d, radius, &f),
                        lattice_sum(d, 2 * radius, &f),
                        pt.eps.ln().abs() / star(&ex).powf(df.min(p)),
                    )
                }
            }
        })
        .collect();
    let name = if second.is_some() { "MN2" } else { "MN1" };
    let params = match second {
        Some(p) => format!("d={d} p={p}"),
        None => format!("d={d}"),
    };
    Ok(BoundCheck::assemble(name, params, radius, rows, max_constant))
}

/// The fourth-moment spectral-gap sweep of [`crate::hs::spectral_gap_check`]
/// as a bound table; doubling doubles the number of environments.
pub fn spectral_gap_bound_check(n: usize, seed: u64, max_constant: f64) -> Result<BoundCheck> {
    let r = spectral_gap_check(n, seed, max_constant)?;
    let points = r
        .rows
        .iter()
        .zip(&r.rows_doubled)
        .map(|(a, b)| BoundPoint { label: a.name.clone(), lhs: a.fourth_moment, lhs_doubled: b.fourth_moment, rhs: a.rhs, rhs_doubled: b.rhs })
        .collect();
    Ok(BoundCheck::assemble("SG", format!("n={n} seed={seed}"), n, points, max_constant))
}

fn axis(d: usize, r: f64) -> Vec<f64> {
    let mut x = vec![0.0; d];
    x[0] = r;
    x
}

/// The default sweep of all deterministic checks in `d = 3`, followed by the
/// spectral-gap check with `sg_samples` environments.
pub fn default_sweep(max_constant: f64, sg_samples: usize) -> Result<Vec<BoundCheck>> {
    let mut out = deterministic_sweep(max_constant)?;
    out.push(spectral_gap_bound_check(sg_samples, 17, max_constant)?);
    Ok(out)
}

/// The brute-force lattice-sum checks of the default sweep.
pub fn deterministic_sweep(max_constant: f64) -> Result<Vec<BoundCheck>> {
    let d = 3;
    let mut out = Vec::new();
    let xs: Vec<Vec<f64>> = [0.0, 5.0, 10.0, 20.0].iter().map(|&r| axis(d, r)).collect();
    for (a, b) in [(2.0, 2.0), (3.0, 2.0), (4.0, 2.0), (2.5, 1.5)] {
        out.push(convolution_bound_check(d, a, b, &xs, 80, max_constant)?);
    }
    let tri = |s: f64| vec![vec![-s / 2.0, 0.0, 0.0], vec![s / 2.0, 0.0, 0.0], vec![0.0, s * 0.866, 0.0]];
    out.push(multi_convolution_check(d, &[2.0, 2.0, 2.0], &[tri(10.0), tri(20.0)], 80, max_constant)?);
    let tet = |s: f64| {
        vec![vec![s / 2.0, 0.0, -s * 0.354], vec![-s / 2.0, 0.0, -s * 0.354], vec![0.0, s / 2.0, s * 0.354], vec![0.0, -s / 2.0, s * 0.354]]
    };
    out.push(multi_convolution_check(d, &[2.0, 2.0, 1.8, 2.2], &[tet(8.0), tet(16.0)], 64, max_constant)?);
    let o = vec![0.0; d];
    out.push(error_function_check(d, &[[o.clone(), o.clone(), o.clone(), o.clone()]], 24, max_constant)?);
    let three: Vec<[Vec<f64>; 4]> = [6.0, 12.0].iter().map(|&r| [o.clone(), o.clone(), o.clone(), axis(d, r)]).collect();
    out.push(error_function_check(d, &three, 48, max_constant)?);
    let pairs: Vec<[Vec<f64>; 4]> = [6.0, 12.0].iter().map(|&r| [o.clone(), o.clone(), axis(d, r), axis(d, r)]).collect();
    out.push(error_function_check(d, &pairs, 48, max_constant)?);
    let one: Vec<[Vec<f64>; 4]> = [8.0, 12.0]
        .iter()
        .map(|&s| {
            let t = tri(s);
            [t[0].clone(), t[0].clone(), t[1].clone(), t[2].clone()]
        })
        .collect();
    out.push(error_function_check(d, &one, 48, max_constant)?);
    let four: Vec<[Vec<f64>; 4]> = [8.0, 12.0]
        .iter()
        .map(|&s| {
            let t = tet(s);
            [t[0].clone(), t[1].clone(), t[2].clone(), t[3].clone()]
        })
        .collect();
    out.push(error_function_check(d, &four, 48, max_constant)?);
    let mn: Vec<MnPoint> = [0.125, 0.0625, 0.03125]
        .iter()
        .flat_map(|&eps| [0.0, 1.0, 3.0].into_iter().map(move |s| MnPoint { x: axis(3, s / eps), eps }))
        .collect();
    out.push(mn_bound_check(d, &mn, None, 64, max_constant)?);
    for p in [1.5, 3.0, 4.0] {
        let pts: Vec<MnPoint> =
            [0.125, 0.0625, 0.03125].iter().flat_map(|&eps| [0.0, 1.0].into_iter().map(move |s| MnPoint { x: axis(3, s / eps), eps })).collect();
        out.push(mn_bound_check(d, &pts, Some(p), 64, max_constant)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_sum_counts_points() {
        assert_eq!(lattice_sum(3, 2, &|_| 1.0), 125.0);
        assert_eq!(lattice_sum(1, 5, &|y| y[0]), 0.0);
    }

    #[test]
    fn origin_is_dominated() {
        let c = convolution_bound_check(3, 2.0, 2.0, &[vec![0.0; 3]], 16, 100.0).unwrap();
        assert!(c.points[0].lhs.is_finite() && c.constant > 0.0);
    }

    #[test]
    fn two_two_decays_like_inverse_distance() {
        let xs: Vec<Vec<f64>> = [5.0, 10.0, 20.0].iter().map(|&r| axis(3, r)).collect();
        let c = convolution_bound_check(3, 2.0, 2.0, &xs, 80, 100.0).unwrap();
        assert!(c.pass, "{c:?}");
        assert!(c.spread() < 2.0, "{}", c.spread());
    }

    #[test]
    fn log_case_is_flat() {
        let xs: Vec<Vec<f64>> = [5.0, 10.0, 20.0].iter().map(|&r| axis(3, r)).collect();
        let c = convolution_bound_check(3, 3.0, 2.0, &xs, 80, 100.0).unwrap();
        assert!(c.spread() < 2.0, "{}", c.spread());
    }

    #[test]
    fn parameter_and_radius_errors() {
        assert!(convolution_bound_check(3, 1.0, 1.0, &[axis(3, 1.0)], 16, 100.0).is_err());
        assert!(convolution_bound_check(3, 2.0, 2.0, &[axis(3, 10.0)], 16, 100.0).is_err());
        assert!(multi_convolution_check(3, &[1.0, 1.5], &[vec![axis(3, 0.0), axis(3, 1.0)]], 16, 100.0).is_err());
        assert!(mn_bound_check(3, &[MnPoint { x: vec![0.0; 3], eps: 0.1 }], None, 10, 100.0).is_err());
    }

    #[test]
    fn two_point_multi_convolution_matches_convolution() {
        let o = vec![0.0; 3];
        let x = axis(3, 6.0);
        let m = multi_convolution_check(3, &[2.0, 2.0], &[vec![o.clone(), x.clone()]], 32, 100.0).unwrap();
        let c = convolution_bound_check(3, 2.0, 2.0, &[x], 32, 100.0).unwrap();
        assert!((m.points[0].lhs - c.points[0].lhs).abs() < 1e-12 * c.points[0].lhs);
        // each of the two points is the other's nearest neighbour
        assert!((m.points[0].rhs - 2.0 * c.points[0].rhs).abs() < 1e-12);
    }

    #[test]
    fn multi_convolution_is_translation_invariant() {
        let xs = vec![axis(3, 0.0), axis(3, 5.0), vec![0.0, 5.0, 0.0]];
        let shifted: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0] + 1.0, x[1] - 2.0, x[2] + 3.0]).collect();
        let f = |pts: &Vec<Vec<f64>>| {
            let g = |y: &[f64]| pts.iter().map(|x| star_between(x, y).powf(-2.0)).product::<f64>();
            lattice_sum(3, 100, &g)
        };
        // shifting moves mass across the truncation boundary only far away
        assert!((f(&xs) - f(&shifted)).abs() < 1e-6 * f(&xs));
        let a = multi_convolution_rhs(3, &[2.0, 2.0, 2.0], &xs);
        let b = multi_convolution_rhs(3, &[2.0, 2.0, 2.0], &shifted);
        assert_eq!(a, b);
    }

    #[test]
    fn triangle_at_distance_ten_passes() {
        let t = vec![vec![-5.0, 0.0, 0.0], vec![5.0, 0.0, 0.0], vec![0.0, 8.66, 0.0]];
        assert!(multi_convolution_check(3, &[2.0, 2.0, 2.0], &[t], 48, 100.0).unwrap().pass);
    }

    #[test]
    fn error_function_cases() {
        let o = vec![0.0; 3];
        let c1 = error_function_check(3, &[[o.clone(), o.clone(), o.clone(), o.clone()]], 16, 100.0).unwrap();
        assert!(c1.pass, "{c1:?}");
        let w = axis(3, 12.0);
        let c3 = error_function_check(3, &[[o.clone(), o.clone(), w.clone(), w.clone()]], 48, 100.0).unwrap();
        assert!(c3.pass, "{c3:?}");
        assert!(Coincidence::classify(&[o.clone(), w.clone(), o.clone(), w.clone()]).is_none());
    }

    #[test]
    fn mn_scaling_at_origin() {
        let pts: Vec<MnPoint> = [0.0625, 0.03125].iter().map(|&eps| MnPoint { x: vec![0.0; 3], eps }).collect();
        let c = mn_bound_check(3, &pts, None, 64, 100.0).unwrap();
        assert!(c.pass);
        let ratio = c.points[1].lhs / c.points[0].lhs;
        assert!((1.5..=3.0).contains(&ratio), "{ratio}");
        let bound_ratio = c.points[1].rhs / c.points[0].rhs;
        assert!((1.5..=2.5).contains(&bound_ratio), "{bound_ratio}");
        assert!(c.spread() < 1.5, "{}", c.spread());
    }

    #[test]
    fn mn_second_display_log_case_flat() {
        let pts: Vec<MnPoint> = [0.125, 0.0625, 0.03125].iter().map(|&eps| MnPoint { x: vec![0.0; 3], eps }).collect();
        let c = mn_bound_check(3, &pts, Some(3.0), 64, 100.0).unwrap();
        assert!(c.spread() < 2.0, "{}", c.spread());
    }

    #[test]
    fn spectral_gap_table_matches_report() {
        let c = spectral_gap_bound_check(200, 3, 100.0).unwrap();
        let r = spectral_gap_check(200, 3, 100.0).unwrap();
        assert_eq!(c.points.len(), r.rows.len());
        assert!((c.constant - r.constant).abs() < 1e-12 * r.constant);
        assert_eq!(c.pass, r.pass);
    }

    #[test]
    fn csv_rows_have_header_arity() {
        let c = convolution_bound_check(3, 2.0, 2.0, &[axis(3, 2.0)], 16, 100.0).unwrap();
        let n = BoundCheck::csv_header().split(',').count();
        for row in c.csv_rows() {
            // params are quoted and contain no commas
            assert_eq!(row.split(',').count(), n);
        }
    }
}
