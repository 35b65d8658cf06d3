//! Binary snapshots of environments and corrector sets.
//!
//! Layout, all integers and floats little-endian:
//! `"HGL1"`, `u32 d`, `u8` boundary (0 periodic, 1 Dirichlet), `u64 L` per
//! axis, `u64 seed`, `u32` length + UTF-8 law name, `u8` element type
//! (1 = f64), `u32` section count, then per section `u32` length + UTF-8
//! name, `u64` element count and the elements. Environments carry one
//! section `zeta` in edge-index order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::corrector::CorrectorSet;
use crate::environment::{ConductanceLaw, Environment};
use crate::error::{HglError, Result};
use crate::lattice::{Boundary, LatticeGeometry};

pub const MAGIC: &[u8; 4] = b"HGL1";
const ELEMENT_F64: u8 = 1;
const MAX_NAME: u32 = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub geometry: LatticeGeometry,
    pub seed: u64,
    pub law: ConductanceLaw,
    pub sections: Vec<(String, Vec<f64>)>,
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn get<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => HglError::Format("truncated file".into()),
        _ => HglError::Io(e),
    })?;
    Ok(b)
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(get(r)?))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(get(r)?))
}

fn get_str<R: Read>(r: &mut R) -> Result<String> {
    let n = get_u32(r)?;
    if n > MAX_NAME {
        return Err(HglError::Format(format!("string of length {n}")));
    }
    let mut b = vec![0u8; n as usize];
    r.read_exact(&mut b).map_err(|_| HglError::Format("truncated file".into()))?;
    String::from_utf8(b).map_err(|_| HglError::Format("string is not UTF-8".into()))
}

impl Snapshot {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let g = &self.geometry;
        w.write_all(MAGIC)?;
        w.write_all(&(g.d() as u32).to_le_bytes())?;
        w.write_all(&[if g.is_periodic() { 0 } else { 1 }])?;
        for &l in g.shape() {
            w.write_all(&(l as u64).to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        put_str(w, &self.law.to_string())?;
        w.write_all(&[ELEMENT_F64])?;
        w.write_all(&(self.sections.len() as u32).to_le_bytes())?;
        for (name, data) in &self.sections {
            put_str(w, name)?;
            w.write_all(&(data.len() as u64).to_le_bytes())?;
            let mut buf = Vec::with_capacity(8 * data.len());
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Snapshot> {
        if &get::<4, _>(r)? != MAGIC {
            return Err(HglError::Format("bad magic".into()));
        }
        let d = get_u32(r)? as usize;
        if d == 0 || d > 8 {
            return Err(HglError::Format(format!("dimension {d}")));
        }
        let bc = match get::<1, _>(r)?[0] {
            0 => Boundary::Periodic,
            1 => Boundary::DirichletZero,
            b => return Err(HglError::Format(format!("boundary tag {b}"))),
        };
        let shape = (0..d).map(|_| get_u64(r).map(|l| l as usize)).collect::<Result<Vec<_>>>()?;
        let geometry = LatticeGeometry::new(shape, bc).map_err(|e| HglError::Format(e.to_string()))?;
        let seed = get_u64(r)?;
        let law: ConductanceLaw = get_str(r)?.parse()?;
        let ty = get::<1, _>(r)?[0];
        if ty != ELEMENT_F64 {
            return Err(HglError::Format(format!("element type {ty}")));
        }
        let n_sections = get_u32(r)?;
        let mut sections = Vec::new();
        for _ in 0..n_sections {
            let name = get_str(r)?;
            let n = get_u64(r)?;
            // reject lengths no plausible field reaches before allocating
            if n > 64 * (geometry.n_edges() as u64).max(1) {
                return Err(HglError::Format(format!("section `{name}` of length {n}")));
            }
            let mut buf = vec![0u8; 8 * n as usize];
            r.read_exact(&mut buf).map_err(|_| HglError::Format("truncated file".into()))?;
            let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
            sections.push((name, data));
        }
        Ok(Snapshot { geometry, seed, law, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Snapshot> {
        Snapshot::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn section(&self, name: &str) -> Result<&[f64]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
            .ok_or_else(|| HglError::Format(format!("missing section `{name}`")))
    }

    fn sized_section(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        let s = self.section(name)?;
        if s.len() != len {
            return Err(HglError::Format(format!("section `{name}` has {} values, expected {len}", s.len())));
        }
        Ok(s.to_vec())
    }

    pub fn from_environment(env: &Environment) -> Snapshot {
        Snapshot {
            geometry: env.geometry().clone(),
            seed: env.seed(),
            law: env.law(),
            sections: vec![("zeta".into(), env.zeta().to_vec())],
        }
    }

    pub fn to_environment(&self) -> Result<Environment> {
        let zeta = self.sized_section("zeta", self.geometry.n_edges())?;
        Environment::from_parts(self.geometry.clone(), zeta, self.seed, self.law)
    }

    /// Environment header and `zeta` followed by every field of the set.
    pub fn from_corrector(env: &Environment, set: &CorrectorSet) -> Snapshot {
        let mut s = Snapshot::from_environment(env);
        let d = set.phi.len();
        s.sections.push(("lambda".into(), vec![set.lambda]));
        s.sections.push(("a_hom".into(), set.a_hom.iter().flatten().copied().collect()));
        for i in 0..d {
            s.sections.push((format!("phi/{i}"), set.phi[i].clone()));
            s.sections.push((format!("grad_phi/{i}"), set.grad_phi[i].clone()));
            for j in 0..d {
                s.sections.push((format!("q/{i}/{j}"), set.q[i][j].clone()));
            }
        }
        if let Some(sigma) = &set.sigma {
            for (i, si) in sigma.iter().enumerate() {
                for (j, sij) in si.iter().enumerate() {
                    for (k, f) in sij.iter().enumerate() {
                        s.sections.push((format!("sigma/{i}/{j}/{k}"), f.clone()));
                    }
                }
            }
        }
        s.sections.push(("residuals".into(), set.residuals.clone()));
        s.sections.push(("iterations".into(), set.iterations.iter().map(|&n| n as f64).collect()));
        s
    }

    pub fn to_corrector(&self) -> Result<(Environment, CorrectorSet)> {
        let env = self.to_environment()?;
        let g = &self.geometry;
        let (d, ns, ne) = (g.d(), g.n_sites(), g.n_edges());
        let lambda = self.sized_section("lambda", 1)?[0];
        let flat = self.sized_section("a_hom", d * d)?;
        let a_hom = flat.chunks(d).map(|r| r.to_vec()).collect();
        let phi = (0..d).map(|i| self.sized_section(&format!("phi/{i}"), ns)).collect::<Result<Vec<_>>>()?;
        let grad_phi = (0..d).map(|i| self.sized_section(&format!("grad_phi/{i}"), ne)).collect::<Result<Vec<_>>>()?;
        let q = (0..d)
            .map(|i| (0..d).map(|j| self.sized_section(&format!("q/{i}/{j}"), ns)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let sigma = if self.sections.iter().any(|(n, _)| n.starts_with("sigma/")) {
            Some(
                (0..d)
                    .map(|i| {
                        (0..d)
                            .map(|j| (0..d).map(|k| self.sized_section(&format!("sigma/{i}/{j}/{k}"), ns)).collect::<Result<Vec<_>>>())
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let residuals = self.sized_section("residuals", d)?;
        let iterations = self.sized_section("iterations", d)?.into_iter().map(|v| v as usize).collect();
        Ok((env, CorrectorSet { lambda, phi, grad_phi, a_hom, q, sigma, residuals, iterations }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrector::CorrectorOptions;

    fn bytes(s: &Snapshot) -> Vec<u8> {
        let mut v = Vec::new();
        s.write_to(&mut v).unwrap();
        v
    }

    #[test]
    fn environment_round_trip_is_bitwise() {
        for geom in [LatticeGeometry::torus(3, 4).unwrap(), LatticeGeometry::new(vec![3, 5], Boundary::DirichletZero).unwrap()] {
            let env = Environment::sample(&geom, ConductanceLaw::new_tanh(2.0, 0.5).unwrap(), 99);
            let b = bytes(&Snapshot::from_environment(&env));
            let back = Snapshot::read_from(&mut b.as_slice()).unwrap().to_environment().unwrap();
            assert_eq!(back, env);
            assert_eq!(b, bytes(&Snapshot::from_environment(&back)));
        }
    }

    #[test]
    fn header_layout() {
        let env = Environment::sample(&LatticeGeometry::torus(2, 3).unwrap(), ConductanceLaw::default(), 7);
        let b = bytes(&Snapshot::from_environment(&env));
        assert_eq!(&b[0..4], b"HGL1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(b[8], 0);
        assert_eq!(u64::from_le_bytes(b[9..17].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(b[25..33].try_into().unwrap()), 7);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let env = Environment::sample(&LatticeGeometry::torus(2, 3).unwrap(), ConductanceLaw::default(), 7);
        let b = bytes(&Snapshot::from_environment(&env));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Snapshot::read_from(&mut bad.as_slice()), Err(HglError::Format(_))));
        let short = &b[..b.len() - 3];
        assert!(matches!(Snapshot::read_from(&mut &short[..]), Err(HglError::Format(_))));
        let mut tag = b.clone();
        tag[8] = 7;
        assert!(matches!(Snapshot::read_from(&mut tag.as_slice()), Err(HglError::Format(_))));
        let mut s = Snapshot::from_environment(&env);
        s.sections[0].1.pop();
        assert!(s.to_environment().is_err());
        s.sections.clear();
        assert!(s.to_environment().is_err());
    }

    #[test]
    fn corrector_round_trip() {
        let env = Environment::sample(&LatticeGeometry::torus(2, 6).unwrap(), ConductanceLaw::default(), 3);
        let opts = CorrectorOptions { with_sigma: true, ..CorrectorOptions::default() };
        let set = CorrectorSet::compute(&env, &opts).unwrap();
        let snap = Snapshot::from_corrector(&env, &set);
        let b = bytes(&snap);
        let (env2, set2) = Snapshot::read_from(&mut b.as_slice()).unwrap().to_corrector().unwrap();
        assert_eq!(env2, env);
        assert_eq!(set2.phi, set.phi);
        assert_eq!(set2.sigma, set.sigma);
        assert_eq!(set2.a_hom, set.a_hom);
        assert_eq!(set2.iterations, set.iterations);
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("hgl-snap-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("env.hgl");
        let env = Environment::sample(&LatticeGeometry::torus(3, 3).unwrap(), ConductanceLaw::new_constant(1.5).unwrap(), 1);
        Snapshot::from_environment(&env).save(&path).unwrap();
        assert_eq!(Snapshot::load(&path).unwrap().to_environment().unwrap(), env);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
