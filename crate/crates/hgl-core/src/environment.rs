//! Gaussian environments on edges and the conductance laws applied to them.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{HglError, Result};
use crate::lattice::{Boundary, Edge, EdgeField, LatticeGeometry};

/// Number of consecutive edges sharing one ChaCha stream.
const BLOCK: usize = 1024;

/// `sup |tanh''|`, attained at `tanh(t) = 1/sqrt(3)`.
const TANH2_SUP: f64 = 0.769_800_358_919_501_2;

/// Map from the Gaussian variable of an edge to its conductance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum ConductanceLaw {
    /// `base + amp * tanh(t)`.
    Tanh { base: f64, amp: f64 },
    /// `value` for every `t`.
    Constant { value: f64 },
}

impl Default for ConductanceLaw {
    fn default() -> Self {
        ConductanceLaw::Tanh { base: 2.0, amp: 1.0 }
    }
}

impl ConductanceLaw {
    pub fn new_tanh(base: f64, amp: f64) -> Result<Self> {
        if amp.abs() >= base {
            return Err(HglError::invalid("tanh law requires |amp| < base"));
        }
        Ok(ConductanceLaw::Tanh { base, amp })
    }

    pub fn new_constant(value: f64) -> Result<Self> {
        if value <= 0.0 {
            return Err(HglError::invalid("constant conductance must be positive"));
        }
        Ok(ConductanceLaw::Constant { value })
    }

    /// `1 + 0.05 tanh`, close to the constant law.
    pub fn small_contrast() -> Self {
        ConductanceLaw::Tanh { base: 1.0, amp: 0.05 }
    }

    #[inline]
    pub fn eta(&self, t: f64) -> f64 {
        match *self {
            ConductanceLaw::Tanh { base, amp } => base + amp * t.tanh(),
            ConductanceLaw::Constant { value } => value,
        }
    }

    #[inline]
    pub fn eta_prime(&self, t: f64) -> f64 {
        match *self {
            ConductanceLaw::Tanh { amp, .. } => {
                let c = t.cosh();
                amp / (c * c)
            }
            ConductanceLaw::Constant { .. } => 0.0,
        }
    }

    #[inline]
    pub fn eta_second(&self, t: f64) -> f64 {
        match *self {
            ConductanceLaw::Tanh { amp, .. } => {
                let th = t.tanh();
                -2.0 * amp * th * (1.0 - th * th)
            }
            ConductanceLaw::Constant { .. } => 0.0,
        }
    }

    pub fn c_min(&self) -> f64 {
        match *self {
            ConductanceLaw::Tanh { base, amp } => base - amp.abs(),
            ConductanceLaw::Constant { value } => value,
        }
    }

    pub fn c_max(&self) -> f64 {
        match *self {
            ConductanceLaw::Tanh { base, amp } => base + amp.abs(),
            ConductanceLaw::Constant { value } => value,
        }
    }

    /// Bound on `|eta'|`.
    pub fn m1(&self) -> f64 {
        match *self {
            ConductanceLaw::Tanh { amp, .. } => amp.abs(),
            ConductanceLaw::Constant { .. } => 0.0,
        }
    }

    /// Bound on `|eta''|`.
    pub fn m2(&self) -> f64 {
        match *self {
            ConductanceLaw::Tanh { amp, .. } => amp.abs() * TANH2_SUP,
            ConductanceLaw::Constant { .. } => 0.0,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, ConductanceLaw::Constant { .. })
    }
}

impl fmt::Display for ConductanceLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConductanceLaw::Tanh { base, amp } => write!(f, "tanh({base:?},{amp:?})"),
            ConductanceLaw::Constant { value } => write!(f, "constant({value:?})"),
        }
    }
}

impl FromStr for ConductanceLaw {
    type Err = HglError;

    /// Parses the names produced by `Display`, e.g. `tanh(2.0,1.0)` or
    /// `constant(1.5)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || HglError::Format(format!("unknown conductance law `{s}`"));
        let open = s.find('(').ok_or_else(bad)?;
        if !s.ends_with(')') {
            return Err(bad());
        }
        let args: Vec<f64> = s[open + 1..s.len() - 1]
            .split(',')
            .map(|a| a.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        match (&s[..open], args.as_slice()) {
            ("tanh", [b, a]) => ConductanceLaw::new_tanh(*b, *a),
            ("constant", [v]) => ConductanceLaw::new_constant(*v),
            _ => Err(bad()),
        }
    }
}

/// I.i.d. standard Gaussians on the edges of a geometry together with the
/// conductance law.
#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    geometry: LatticeGeometry,
    zeta: EdgeField,
    seed: u64,
    law: ConductanceLaw,
}

/// Fills `out` with standard Gaussians keyed by `(seed, block of the index)`.
pub fn gaussian_field(seed: u64, out: &mut [f64]) {
    for (block, chunk) in out.chunks_mut(BLOCK).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(block as u64);
        for v in chunk.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }
}

fn single_gaussian(seed: u64) -> f64 {
    ChaCha8Rng::seed_from_u64(seed).sample(StandardNormal)
}

impl Environment {
    pub fn sample(geometry: &LatticeGeometry, law: ConductanceLaw, seed: u64) -> Self {
        let mut zeta = vec![0.0; geometry.n_edges()];
        gaussian_field(seed, &mut zeta);
        Environment { geometry: geometry.clone(), zeta, seed, law }
    }

    pub fn from_parts(
        geometry: LatticeGeometry,
        zeta: EdgeField,
        seed: u64,
        law: ConductanceLaw,
    ) -> Result<Self> {
        if zeta.len() != geometry.n_edges() {
            return Err(HglError::GeometryMismatch(format!(
                "{} Gaussian values for {} edges",
                zeta.len(),
                geometry.n_edges()
            )));
        }
        Ok(Environment { geometry, zeta, seed, law })
    }

    pub fn geometry(&self) -> &LatticeGeometry {
        &self.geometry
    }

    pub fn zeta(&self) -> &[f64] {
        &self.zeta
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn law(&self) -> ConductanceLaw {
        self.law
    }

    pub fn with_law(&self, law: ConductanceLaw) -> Self {
        Environment { law, ..self.clone() }
    }

    /// `a_e = eta(zeta_e)`.
    pub fn conductances(&self) -> EdgeField {
        self.zeta.iter().map(|&t| self.law.eta(t)).collect()
    }

    pub fn eta_prime(&self) -> EdgeField {
        self.zeta.iter().map(|&t| self.law.eta_prime(t)).collect()
    }

    pub fn eta_second(&self) -> EdgeField {
        self.zeta.iter().map(|&t| self.law.eta_second(t)).collect()
    }

    fn check_edge(&self, e: usize) -> Result<()> {
        if e >= self.zeta.len() {
            return Err(HglError::invalid(format!(
                "edge {e} out of range ({} edges)",
                self.zeta.len()
            )));
        }
        Ok(())
    }

    /// Replaces `zeta_e` by an independent standard Gaussian drawn from
    /// `fresh_seed`.
    pub fn perturb_edge(&self, e: usize, fresh_seed: u64) -> Result<Self> {
        self.check_edge(e)?;
        self.set_edge(e, single_gaussian(fresh_seed))
    }

    /// Copy with `zeta_e` set to `value`.
    pub fn set_edge(&self, e: usize, value: f64) -> Result<Self> {
        self.check_edge(e)?;
        let mut out = self.clone();
        out.zeta[e] = value;
        Ok(out)
    }

    /// Ornstein-Uhlenbeck evolution for time `t`:
    /// `e^{-t} zeta + sqrt(1 - e^{-2t}) zeta'` with fresh `zeta'`.
    pub fn ou_resample(&self, t: f64, fresh_seed: u64) -> Result<Self> {
        if !(t >= 0.0) {
            return Err(HglError::invalid(format!("OU time must be nonnegative, got {t}")));
        }
        if t == 0.0 {
            return Ok(self.clone());
        }
        let mut fresh = vec![0.0; self.zeta.len()];
        gaussian_field(fresh_seed, &mut fresh);
        let a = (-t).exp();
        let b = (-(-2.0 * t).exp_m1()).sqrt();
        let zeta = self.zeta.iter().zip(&fresh).map(|(z, w)| a * z + b * w).collect();
        Ok(Environment { zeta, ..self.clone() })
    }

    /// Shift `(tau_x zeta)_e = zeta_{x+e}` on a torus.
    pub fn shift(&self, x: &[i64]) -> Result<Self> {
        let g = &self.geometry;
        if !g.is_periodic() {
            return Err(HglError::invalid("shift requires a periodic geometry"));
        }
        if x.len() != g.d() {
            return Err(HglError::GeometryMismatch("shift vector has wrong dimension".into()));
        }
        let mut zeta = vec![0.0; self.zeta.len()];
        for (s, coords) in g.sites().enumerate() {
            let moved: Vec<i64> = coords.iter().zip(x).map(|(c, v)| c + v).collect();
            let src = g.site_index(&moved).expect("periodic index");
            for i in 0..g.d() {
                let off = g.edge_offset(i);
                zeta[off + s] = self.zeta[off + src];
            }
        }
        Ok(Environment { zeta, ..self.clone() })
    }

    /// The Dirichlet box of shape `L_i - 1` carved out of a torus environment:
    /// box site `y` is torus site `y`, and the box edges leaving through both
    /// faces are the torus edges through the last plane, which plays the role
    /// of the grounded exterior.
    pub fn dirichlet_window(&self) -> Result<Self> {
        let g = &self.geometry;
        if !g.is_periodic() || g.shape().iter().any(|&l| l < 3) {
            return Err(HglError::invalid("window requires a torus with extents >= 3"));
        }
        let shape: Vec<usize> = g.shape().iter().map(|l| l - 1).collect();
        let boxg = LatticeGeometry::new(shape, Boundary::DirichletZero)?;
        let mut zeta = vec![0.0; boxg.n_edges()];
        for (e, z) in zeta.iter_mut().enumerate() {
            let Edge { base, dir } = boxg.edge_from_index(e);
            let src = g.edge_index(&Edge { base, dir }).expect("periodic edge");
            *z = self.zeta[src];
        }
        Ok(Environment { geometry: boxg, zeta, seed: self.seed, law: self.law })
    }
}
