//! Time grids, the finite mark space standing in for the Lévy measure, and
//! reproducible Brownian / Poisson noise panels.
//!
//! Noise for particle `p` is drawn from `ChaCha8Rng::seed_from_u64(seed)` switched
//! to stream `p`; within a stream the draws run node by node, `d` normals then
//! `M` Poisson counts. Panels are therefore independent of the particle count
//! for the particles they share.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GENERATOR: &str = "ChaCha8Rng/stream-per-particle";
const MAGIC: &[u8; 5] = b"MFJN1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::NonPositiveHorizon(horizon));
        }
        if steps == 0 {
            return Err(Error::ZeroSteps);
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.node(i)).collect()
    }
}

pub fn make_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(horizon, steps)
}

/// Finite set of marks `e_j` with intensities `λ_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkSpace {
    marks: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl MarkSpace {
    pub fn new(marks: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if marks.len() != weights.len() {
            return Err(Error::InvalidMarks(format!("{} marks but {} weights", marks.len(), weights.len())));
        }
        if let Some(first) = marks.first() {
            let l = first.len();
            for (j, e) in marks.iter().enumerate() {
                if e.len() != l || l == 0 {
                    return Err(Error::InvalidMarks(format!("mark {j} has dimension {}", e.len())));
                }
                if e.iter().all(|v| *v == 0.0) {
                    return Err(Error::InvalidMarks(format!("mark {j} is zero")));
                }
                if e.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidMarks(format!("mark {j} is not finite")));
                }
            }
        }
        for (j, w) in weights.iter().enumerate() {
            if !(*w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidMarks(format!("weight {j} = {w} must be positive")));
            }
        }
        Ok(Self { marks, weights })
    }

    /// One scalar mark with the given intensity.
    pub fn single(mark: f64, weight: f64) -> Result<Self> {
        Self::new(vec![vec![mark]], vec![weight])
    }

    pub fn empty() -> Self {
        Self { marks: Vec::new(), weights: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mark(&self, j: usize) -> &[f64] {
        &self.marks[j]
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Total mass `C0 = Σ λ_j`.
    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn integral<F: Fn(&[f64]) -> f64>(&self, g: F) -> f64 {
        mark_integral(self, g)
    }
}

pub fn mark_integral<F: Fn(&[f64]) -> f64>(marks: &MarkSpace, g: F) -> f64 {
    marks.marks.iter().zip(&marks.weights).map(|(e, w)| g(e) * w).sum()
}

/// Brownian increments and Poisson counts, stored node-major:
/// entry `(i, p)` lives at `(i * P + p) * d` (resp. `* M`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePanel {
    seed: u64,
    particles: usize,
    steps: usize,
    brownian_dim: usize,
    dt: f64,
    intensities: Vec<f64>,
    db: Vec<f64>,
    dn: Vec<u32>,
}

impl NoisePanel {
    pub fn generate(
        grid: &TimeGrid,
        marks: &MarkSpace,
        particles: usize,
        brownian_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if particles == 0 {
            return Err(Error::InvalidInput("particle count must be positive".into()));
        }
        let n = grid.steps();
        let m = marks.len();
        let dt = grid.dt();
        let sd = dt.sqrt();
        let poissons = marks
            .weights()
            .iter()
            .map(|w| Poisson::new(w * dt).map_err(|e| Error::InvalidMarks(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let mut db = vec![0.0; particles * n * brownian_dim];
        let mut dn = vec![0u32; particles * n * m];
        for p in 0..particles {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            for i in 0..n {
                let b0 = (i * particles + p) * brownian_dim;
                for l in 0..brownian_dim {
                    let g: f64 = rng.sample(StandardNormal);
                    db[b0 + l] = g * sd;
                }
                let n0 = (i * particles + p) * m;
                for (j, pois) in poissons.iter().enumerate() {
                    let c: f64 = rng.sample(pois);
                    dn[n0 + j] = c as u32;
                }
            }
        }
        Ok(Self { seed, particles, steps: n, brownian_dim, dt, intensities: marks.weights().to_vec(), db, dn })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn brownian_dim(&self) -> usize {
        self.brownian_dim
    }

    pub fn marks(&self) -> usize {
        self.intensities.len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn generator(&self) -> &'static str {
        GENERATOR
    }

    pub fn db(&self, i: usize, p: usize) -> &[f64] {
        let d = self.brownian_dim;
        let o = (i * self.particles + p) * d;
        &self.db[o..o + d]
    }

    pub fn counts(&self, i: usize, p: usize) -> &[u32] {
        let m = self.marks();
        let o = (i * self.particles + p) * m;
        &self.dn[o..o + m]
    }

    /// Compensated increment `ΔN − λ_j Δt`.
    pub fn compensated(&self, i: usize, p: usize, j: usize) -> f64 {
        let m = self.marks();
        self.dn[(i * self.particles + p) * m + j] as f64 - self.intensities[j] * self.dt
    }

    /// Checks that the panel was drawn for this grid / mark space / dimension.
    pub fn check(&self, grid: &TimeGrid, marks: &MarkSpace, brownian_dim: usize) -> Result<()> {
        if self.steps != grid.steps()
            || (self.dt - grid.dt()).abs() > 1e-15 * grid.dt()
            || self.intensities.as_slice() != marks.weights()
            || self.brownian_dim != brownian_dim
        {
            return Err(Error::ShapeMismatch(format!(
                "noise panel (N={}, d={}, M={}) does not match grid N={}, d={}, M={}",
                self.steps,
                self.brownian_dim,
                self.marks(),
                grid.steps(),
                brownian_dim,
                marks.len()
            )));
        }
        Ok(())
    }

    /// Binary cache: magic, then seed, P, N, d, M as little-endian u64, then Δt
    /// and the intensities as f64, then increments (f64) and counts (u32).
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        for v in [self.seed, self.particles as u64, self.steps as u64, self.brownian_dim as u64, self.marks() as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.dt.to_le_bytes())?;
        for v in &self.intensities {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.db {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.dn {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Cache("bad magic".into()));
        }
        let mut u = [0u64; 5];
        for v in u.iter_mut() {
            *v = read_u64(&mut r)?;
        }
        let [seed, particles, steps, d, m] = u.map(|v| v as usize);
        let dt = f64::from_bits(read_u64(&mut r)?);
        let intensities = (0..m).map(|_| read_u64(&mut r).map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        let db =
            (0..particles * steps * d).map(|_| read_u64(&mut r).map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        let mut dn = Vec::with_capacity(particles * steps * m);
        let mut b4 = [0u8; 4];
        for _ in 0..particles * steps * m {
            r.read_exact(&mut b4)?;
            dn.push(u32::from_le_bytes(b4));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Cache(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { seed: seed as u64, particles, steps, brownian_dim: d, dt, intensities, db, dn })
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn sample_noise(
    grid: &TimeGrid,
    marks: &MarkSpace,
    particles: usize,
    brownian_dim: usize,
    seed: u64,
) -> Result<NoisePanel> {
    NoisePanel::generate(grid, marks, particles, brownian_dim, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_nodes() {
        let g = make_grid(1.0, 4).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = make_grid(0.75 * std::f64::consts::PI, 600).unwrap();
        assert!((g.dt() - std::f64::consts::PI / 800.0).abs() < 1e-16);
        assert_eq!(g.node(600), g.horizon());
    }

    #[test]
    fn grid_preconditions() {
        assert!(matches!(make_grid(0.0, 10), Err(Error::NonPositiveHorizon(_))));
        assert!(matches!(make_grid(-1.0, 10), Err(Error::NonPositiveHorizon(_))));
        assert!(matches!(make_grid(1.0, 0), Err(Error::ZeroSteps)));
    }

    #[test]
    fn mark_integrals() {
        let one = MarkSpace::single(1.0, 1.0).unwrap();
        assert_eq!(mark_integral(&one, |_| 1.0), 1.0);
        assert_eq!(mark_integral(&one, |_| 0.0), 0.0);
        let two = MarkSpace::new(vec![vec![1.0], vec![-1.0]], vec![0.5, 2.0]).unwrap();
        assert_eq!(mark_integral(&two, |e| e[0] * e[0]), 2.5);
        assert_eq!(two.total_mass(), 2.5);
    }

    #[test]
    fn mark_space_validation() {
        assert!(MarkSpace::single(0.0, 1.0).is_err());
        assert!(MarkSpace::single(1.0, 0.0).is_err());
        assert!(MarkSpace::new(vec![vec![1.0]], vec![]).is_err());
        assert!(MarkSpace::new(vec![vec![1.0], vec![1.0, 2.0]], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn panels_are_reproducible() {
        let g = make_grid(1.0, 20).unwrap();
        let marks = MarkSpace::single(1.0, 3.0).unwrap();
        let a = sample_noise(&g, &marks, 50, 2, 7).unwrap();
        let b = sample_noise(&g, &marks, 50, 2, 7).unwrap();
        assert_eq!(a, b);
        let c = sample_noise(&g, &marks, 50, 2, 8).unwrap();
        assert_ne!(a, c);
        // substreams do not depend on the particle count
        let small = sample_noise(&g, &marks, 10, 2, 7).unwrap();
        assert_eq!(small.db(5, 3), a.db(5, 3));
        assert_eq!(small.counts(19, 9), a.counts(19, 9));
    }

    #[test]
    fn cache_round_trip() {
        let g = make_grid(1.0, 8).unwrap();
        let marks = MarkSpace::new(vec![vec![1.0], vec![-0.5]], vec![1.0, 0.5]).unwrap();
        let a = sample_noise(&g, &marks, 13, 1, 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("noise.bin");
        a.write_cache(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..5], b"MFJN1");
        assert_eq!(u64::from_le_bytes(bytes[5..13].try_into().unwrap()), 99);
        assert_eq!(u64::from_le_bytes(bytes[13..21].try_into().unwrap()), 13);
        let b = NoisePanel::read_cache(&path).unwrap();
        assert_eq!(a, b);
    }
}
