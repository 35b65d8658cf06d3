//! Lattice geometry, site/edge indexing and discrete calculus.
//!
//! Sites are stored with axis 1 fastest: the linear index of `x` is
//! `x[0] + L[0]*(x[1] + L[1]*(x[2] + ...))`. Edges are grouped by
//! direction; within direction `i` they are indexed by their base site.
//!
//! On a torus the base site ranges over all sites. On a Dirichlet box the
//! base coordinate along axis `i` ranges over `-1..L[i]`, so that the edges
//! joining the box to the zero exterior on both faces are present; the other
//! coordinates range over the box. Fields on a box are zero outside it.

use serde::{Deserialize, Serialize};

use crate::error::{HglError, Result};

pub type SiteField = Vec<f64>;
pub type EdgeField = Vec<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    Periodic,
    DirichletZero,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct GeometrySpec {
    shape: Vec<usize>,
    bc: Boundary,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GeometrySpec", into = "GeometrySpec")]
pub struct LatticeGeometry {
    shape: Vec<usize>,
    bc: Boundary,
    strides: Vec<usize>,
    edge_offsets: Vec<usize>,
}

impl TryFrom<GeometrySpec> for LatticeGeometry {
    type Error = HglError;
    fn try_from(spec: GeometrySpec) -> Result<Self> {
        LatticeGeometry::new(spec.shape, spec.bc)
    }
}

impl From<LatticeGeometry> for GeometrySpec {
    fn from(g: LatticeGeometry) -> Self {
        GeometrySpec { shape: g.shape, bc: g.bc }
    }
}

/// An edge given by its base site and direction (0-based).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub base: Vec<i64>,
    pub dir: usize,
}

impl Edge {
    pub fn head(&self) -> Vec<i64> {
        let mut h = self.base.clone();
        h[self.dir] += 1;
        h
    }
}

impl LatticeGeometry {
    pub fn new(shape: Vec<usize>, bc: Boundary) -> Result<Self> {
        if shape.is_empty() {
            return Err(HglError::invalid("dimension must be at least 1"));
        }
        if shape.iter().any(|&l| l < 2) {
            return Err(HglError::invalid(format!("every extent must be >= 2, got {shape:?}")));
        }
        let d = shape.len();
        let mut strides = vec![1usize; d];
        for i in 1..d {
            strides[i] = strides[i - 1] * shape[i - 1];
        }
        let n_sites: usize = shape.iter().product();
        let mut edge_offsets = vec![0usize; d + 1];
        for i in 0..d {
            let count = match bc {
                Boundary::Periodic => n_sites,
                Boundary::DirichletZero => n_sites / shape[i] * (shape[i] + 1),
            };
            edge_offsets[i + 1] = edge_offsets[i] + count;
        }
        Ok(LatticeGeometry { shape, bc, strides, edge_offsets })
    }

    pub fn torus(d: usize, l: usize) -> Result<Self> {
        Self::new(vec![l; d], Boundary::Periodic)
    }

    pub fn dirichlet(d: usize, l: usize) -> Result<Self> {
        Self::new(vec![l; d], Boundary::DirichletZero)
    }

    pub fn d(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bc(&self) -> Boundary {
        self.bc
    }

    pub fn is_periodic(&self) -> bool {
        self.bc == Boundary::Periodic
    }

    pub fn n_sites(&self) -> usize {
        self.strides[self.d() - 1] * self.shape[self.d() - 1]
    }

    pub fn n_edges(&self) -> usize {
        self.edge_offsets[self.d()]
    }

    pub fn stride(&self, i: usize) -> usize {
        self.strides[i]
    }

    /// First linear edge index of direction `i`.
    pub fn edge_offset(&self, i: usize) -> usize {
        self.edge_offsets[i]
    }

    pub fn edges_in_direction(&self, i: usize) -> usize {
        self.edge_offsets[i + 1] - self.edge_offsets[i]
    }

    /// `(outer, len, inner)` such that sites are laid out as
    /// `[outer][len][inner]` with `len` the extent along axis `i`.
    pub fn lines(&self, i: usize) -> (usize, usize, usize) {
        let inner = self.strides[i];
        let len = self.shape[i];
        (self.n_sites() / (len * inner), len, inner)
    }

    pub fn site_index(&self, x: &[i64]) -> Option<usize> {
        if x.len() != self.d() {
            return None;
        }
        let mut idx = 0usize;
        for i in 0..self.d() {
            let l = self.shape[i] as i64;
            let c = match self.bc {
                Boundary::Periodic => x[i].rem_euclid(l),
                Boundary::DirichletZero => {
                    if x[i] < 0 || x[i] >= l {
                        return None;
                    }
                    x[i]
                }
            };
            idx += c as usize * self.strides[i];
        }
        Some(idx)
    }

    pub fn site_coords(&self, mut idx: usize) -> Vec<i64> {
        let mut x = vec![0i64; self.d()];
        for i in 0..self.d() {
            x[i] = (idx % self.shape[i]) as i64;
            idx /= self.shape[i];
        }
        x
    }

    pub fn edge_index(&self, edge: &Edge) -> Option<usize> {
        let d = self.d();
        if edge.base.len() != d || edge.dir >= d {
            return None;
        }
        match self.bc {
            Boundary::Periodic => {
                self.site_index(&edge.base).map(|s| self.edge_offsets[edge.dir] + s)
            }
            Boundary::DirichletZero => {
                let mut idx = 0usize;
                let mut stride = 1usize;
                for j in 0..d {
                    let (lo, ext) = if j == edge.dir {
                        (-1i64, self.shape[j] + 1)
                    } else {
                        (0i64, self.shape[j])
                    };
                    let c = edge.base[j] - lo;
                    if c < 0 || c >= ext as i64 {
                        return None;
                    }
                    idx += c as usize * stride;
                    stride *= ext;
                }
                Some(self.edge_offsets[edge.dir] + idx)
            }
        }
    }

    pub fn edge_from_index(&self, idx: usize) -> Edge {
        let d = self.d();
        let dir = (0..d).rev().find(|&i| self.edge_offsets[i] <= idx).unwrap_or(0);
        let mut local = idx - self.edge_offsets[dir];
        match self.bc {
            Boundary::Periodic => Edge { base: self.site_coords(local), dir },
            Boundary::DirichletZero => {
                let mut base = vec![0i64; d];
                for j in 0..d {
                    let (lo, ext) = if j == dir {
                        (-1i64, self.shape[j] + 1)
                    } else {
                        (0i64, self.shape[j])
                    };
                    base[j] = (local % ext) as i64 + lo;
                    local /= ext;
                }
                Edge { base, dir }
            }
        }
    }

    /// Site indices of the base and head of an edge; `None` for an endpoint
    /// outside a Dirichlet box.
    pub fn edge_sites(&self, idx: usize) -> (Option<usize>, Option<usize>) {
        let e = self.edge_from_index(idx);
        (self.site_index(&e.base), self.site_index(&e.head()))
    }

    /// Shortest displacement from `a` to `b` (wrapped on a torus).
    pub fn displacement(&self, a: &[i64], b: &[i64]) -> Vec<i64> {
        (0..self.d())
            .map(|i| {
                let mut v = b[i] - a[i];
                if self.is_periodic() {
                    let l = self.shape[i] as i64;
                    v = v.rem_euclid(l);
                    if v > l / 2 {
                        v -= l;
                    }
                }
                v
            })
            .collect()
    }

    fn check_sites(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.n_sites() {
            return Err(HglError::GeometryMismatch(format!(
                "site field of length {} on geometry with {} sites",
                f.len(),
                self.n_sites()
            )));
        }
        Ok(())
    }

    fn check_edges(&self, g: &[f64]) -> Result<()> {
        if g.len() != self.n_edges() {
            return Err(HglError::GeometryMismatch(format!(
                "edge field of length {} on geometry with {} edges",
                g.len(),
                self.n_edges()
            )));
        }
        Ok(())
    }

    /// Forward difference along axis `i`, written into the direction-`i`
    /// block layout of edges.
    pub fn grad_direction_into(&self, f: &[f64], i: usize, out: &mut [f64]) {
        let (outer, len, inner) = self.lines(i);
        match self.bc {
            Boundary::Periodic => {
                for o in 0..outer {
                    let base = o * len * inner;
                    for c in 0..len {
                        let row = base + c * inner;
                        let next = if c + 1 == len { base } else { row + inner };
                        for k in 0..inner {
                            out[row + k] = f[next + k] - f[row + k];
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
                            let tail = if s >= 1 { f[sbase + (s - 1) * inner + k] } else { 0.0 };
                            let head = if s < len { f[sbase + s * inner + k] } else { 0.0 };
                            out[erow + k] = head - tail;
                        }
                    }
                }
            }
        }
    }

    /// Adds the direction-`i` part of the divergence, `g_i(x - e_i) - g_i(x)`.
    pub fn div_direction_add(&self, g: &[f64], i: usize, out: &mut [f64]) {
        let (outer, len, inner) = self.lines(i);
        match self.bc {
            Boundary::Periodic => {
                for o in 0..outer {
                    let base = o * len * inner;
                    for c in 0..len {
                        let row = base + c * inner;
                        let next = if c + 1 == len { base } else { row + inner };
                        for k in 0..inner {
                            let v = g[row + k];
                            out[row + k] -= v;
                            out[next + k] += v;
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
                            let v = g[erow + k];
                            if s >= 1 {
                                out[sbase + (s - 1) * inner + k] -= v;
                            }
                            if s < len {
                                out[sbase + s * inner + k] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn grad_into(&self, f: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_sites(f)?;
        self.check_edges(out)?;
        for i in 0..self.d() {
            let (lo, hi) = (self.edge_offsets[i], self.edge_offsets[i + 1]);
            self.grad_direction_into(f, i, &mut out[lo..hi]);
        }
        Ok(())
    }

    /// Discrete gradient `(grad f)(e) = f(head) - f(base)`.
    pub fn grad(&self, f: &[f64]) -> Result<EdgeField> {
        let mut out = vec![0.0; self.n_edges()];
        self.grad_into(f, &mut out)?;
        Ok(out)
    }

    pub fn div_into(&self, g: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_edges(g)?;
        self.check_sites(out)?;
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.d() {
            let (lo, hi) = (self.edge_offsets[i], self.edge_offsets[i + 1]);
            self.div_direction_add(&g[lo..hi], i, out);
        }
        Ok(())
    }

    /// Discrete divergence `(div* g)(x) = sum_i g_i(x - e_i) - g_i(x)`,
    /// the adjoint of [`LatticeGeometry::grad`].
    pub fn div(&self, g: &[f64]) -> Result<SiteField> {
        let mut out = vec![0.0; self.n_sites()];
        self.div_into(g, &mut out)?;
        Ok(out)
    }

    /// Iterator over all site coordinates in linear order.
    pub fn sites(&self) -> impl Iterator<Item = Vec<i64>> + '_ {
        (0..self.n_sites()).map(move |i| self.site_coords(i))
    }
}

/// `|x|_* = 2 + |x|`.
pub fn star_norm(x: &[i64]) -> f64 {
    2.0 + x.iter().map(|&v| (v * v) as f64).sum::<f64>().sqrt()
}

pub fn star_norm_f(x: &[f64]) -> f64 {
    2.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ring_gradient() {
        let g = LatticeGeometry::torus(1, 4).unwrap();
        assert_eq!(g.grad(&[0.0, 1.0, 2.0, 3.0]).unwrap(), vec![1.0, 1.0, 1.0, -3.0]);
    }

    #[test]
    fn gradient_of_constant_vanishes() {
        for bc in [Boundary::Periodic, Boundary::DirichletZero] {
            let g = LatticeGeometry::new(vec![3, 4, 5], bc).unwrap();
            let f = vec![2.5; g.n_sites()];
            let df = g.grad(&f).unwrap();
            if bc == Boundary::Periodic {
                assert!(df.iter().all(|&v| v == 0.0));
            } else {
                // only the boundary edges see the zero exterior
                let interior = (0..g.n_edges()).filter(|&e| {
                    let (a, b) = g.edge_sites(e);
                    a.is_some() && b.is_some()
                });
                assert!(interior.into_iter().all(|e| df[e] == 0.0));
            }
        }
    }

    #[test]
    fn zero_edge_field_has_zero_divergence() {
        let g = LatticeGeometry::torus(2, 5).unwrap();
        assert!(g.div(&vec![0.0; g.n_edges()]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn star_norm_examples() {
        assert_eq!(star_norm(&[0, 0, 0]), 2.0);
        assert_eq!(star_norm(&[3, 4, 0]), 7.0);
        assert_eq!(star_norm(&[1, 0, 0]), 3.0);
    }

    #[test]
    fn edge_counts() {
        let t = LatticeGeometry::torus(3, 16).unwrap();
        assert_eq!(t.n_edges(), 3 * 16 * 16 * 16);
        let b = LatticeGeometry::new(vec![2, 3], Boundary::DirichletZero).unwrap();
        assert_eq!(b.n_edges(), 3 * 3 + 2 * 4);
    }

    #[test]
    fn rejects_degenerate_shapes() {
        assert!(LatticeGeometry::new(vec![], Boundary::Periodic).is_err());
        assert!(LatticeGeometry::new(vec![4, 1], Boundary::Periodic).is_err());
    }

    #[test]
    fn index_round_trips_are_bijections() {
        for bc in [Boundary::Periodic, Boundary::DirichletZero] {
            let g = LatticeGeometry::new(vec![3, 2, 4], bc).unwrap();
            for s in 0..g.n_sites() {
                assert_eq!(g.site_index(&g.site_coords(s)), Some(s));
            }
            let mut seen = vec![false; g.n_edges()];
            for e in 0..g.n_edges() {
                let edge = g.edge_from_index(e);
                assert_eq!(g.edge_index(&edge), Some(e));
                assert!(!seen[e]);
                seen[e] = true;
            }
        }
    }

    #[test]
    fn dirichlet_edges_see_zero_exterior() {
        let g = LatticeGeometry::new(vec![3], Boundary::DirichletZero).unwrap();
        let df = g.grad(&[1.0, 2.0, 4.0]).unwrap();
        assert_eq!(df, vec![1.0, 1.0, 2.0, -4.0]);
    }

    #[test]
    fn divergence_of_gradient_sums_to_zero_on_torus() {
        let g = LatticeGeometry::new(vec![5, 4, 3], Boundary::Periodic).unwrap();
        let f: Vec<f64> = (0..g.n_sites()).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let s: f64 = g.div(&g.grad(&f).unwrap()).unwrap().iter().sum();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn displacement_wraps_on_torus() {
        let g = LatticeGeometry::torus(2, 8).unwrap();
        assert_eq!(g.displacement(&[7, 0], &[1, 5]), vec![2, -3]);
    }

    fn geometry_strategy() -> impl Strategy<Value = LatticeGeometry> {
        (1usize..=3, prop::collection::vec(2usize..6, 3), any::<bool>()).prop_map(|(d, l, p)| {
            let bc = if p { Boundary::Periodic } else { Boundary::DirichletZero };
            LatticeGeometry::new(l[..d].to_vec(), bc).unwrap()
        })
    }

    proptest! {
        #[test]
        fn summation_by_parts(geom in geometry_strategy(), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let f: Vec<f64> = (0..geom.n_sites()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g: Vec<f64> = (0..geom.n_edges()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lhs = dot(&geom.grad(&f).unwrap(), &g);
            let rhs = dot(&f, &geom.div(&g).unwrap());
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }
}
