//! Control processes: feedback laws, open-loop paths and box constraints.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Produces `v_{p,i}` from the node index, particle index, time and state.
pub trait ControlLaw: Send + Sync {
    fn eval(&self, i: usize, p: usize, t: f64, x: &[f64], out: &mut [f64]);
}

struct Feedback<F>(F);

impl<F> ControlLaw for Feedback<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Send + Sync,
{
    fn eval(&self, _i: usize, _p: usize, t: f64, x: &[f64], out: &mut [f64]) {
        (self.0)(t, x, out)
    }
}

struct OpenLoop {
    dim: usize,
    particles: usize,
    values: Vec<f64>,
}

impl ControlLaw for OpenLoop {
    fn eval(&self, i: usize, p: usize, _t: f64, _x: &[f64], out: &mut [f64]) {
        let o = (i * self.particles + p) * self.dim;
        out.copy_from_slice(&self.values[o..o + self.dim]);
    }
}

struct Sum {
    base: ControlPath,
    rho: f64,
    direction: ControlPath,
}

impl ControlLaw for Sum {
    fn eval(&self, i: usize, p: usize, t: f64, x: &[f64], out: &mut [f64]) {
        let mut tmp = vec![0.0; out.len()];
        self.base.eval_raw(i, p, t, x, out);
        self.direction.eval_raw(i, p, t, x, &mut tmp);
        for (o, d) in out.iter_mut().zip(tmp) {
            *o += self.rho * d;
        }
    }
}

/// Box `U = Π [lo_i, hi_i]`; infinite bounds allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ControlBox {
    pub fn unbounded(dim: usize) -> Self {
        Self { lo: vec![f64::NEG_INFINITY; dim], hi: vec![f64::INFINITY; dim] }
    }

    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(a, b)| !(a <= b)) {
            return Err(Error::InvalidInput("control box must satisfy lo <= hi".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.iter().chain(&self.hi).all(|v| v.is_finite())
    }

    /// Projects in place; returns whether anything moved.
    pub fn project(&self, v: &mut [f64]) -> bool {
        let mut moved = false;
        for ((a, lo), hi) in v.iter_mut().zip(&self.lo).zip(&self.hi) {
            let c = a.clamp(*lo, *hi);
            if c != *a {
                moved = true;
                *a = c;
            }
        }
        moved
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.iter().zip(&self.lo).zip(&self.hi).all(|((a, lo), hi)| a >= lo && a <= hi)
    }
}

/// A control process, evaluated on the fly by the simulators.
#[derive(Clone)]
pub struct ControlPath {
    dim: usize,
    law: Option<Arc<dyn ControlLaw>>,
    bounds: Option<ControlBox>,
}

impl std::fmt::Debug for ControlPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlPath")
            .field("dim", &self.dim)
            .field("zero", &self.law.is_none())
            .field("bounds", &self.bounds)
            .finish()
    }
}

impl ControlPath {
    /// `v ≡ 0` of dimension `dim` (dimension 0 for uncontrolled problems).
    pub fn zero(dim: usize) -> Self {
        Self { dim, law: None, bounds: None }
    }

    pub fn feedback<F>(dim: usize, f: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self { dim, law: Some(Arc::new(Feedback(f))), bounds: None }
    }

    /// Deterministic open-loop control `v(t)`.
    pub fn deterministic<F>(dim: usize, f: F) -> Self
    where
        F: Fn(f64, &mut [f64]) + Send + Sync + 'static,
    {
        Self::feedback(dim, move |t, _x, out| f(t, out))
    }

    pub fn constant(value: Vec<f64>) -> Self {
        let dim = value.len();
        Self::deterministic(dim, move |_t, out| out.copy_from_slice(&value))
    }

    /// Values stored node-major: `(i * P + p) * dim`.
    pub fn open_loop(dim: usize, particles: usize, steps: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != (steps + 1) * particles * dim {
            return Err(Error::ShapeMismatch(format!(
                "open-loop control has {} values, expected {}",
                values.len(),
                (steps + 1) * particles * dim
            )));
        }
        Ok(Self { dim, law: Some(Arc::new(OpenLoop { dim, particles, values })), bounds: None })
    }

    pub fn from_law(dim: usize, law: Arc<dyn ControlLaw>) -> Self {
        Self { dim, law: Some(law), bounds: None }
    }

    /// `self + ρ·direction`, keeping this path's bounds.
    pub fn plus(&self, rho: f64, direction: &ControlPath) -> Self {
        let bounds = self.bounds.clone();
        let base = Self { bounds: None, ..self.clone() };
        let direction = Self { bounds: None, ..direction.clone() };
        Self { dim: self.dim, law: Some(Arc::new(Sum { base, rho, direction })), bounds }
    }

    /// Values outside `U` are projected when evaluated.
    pub fn with_bounds(mut self, bounds: ControlBox) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_zero(&self) -> bool {
        self.law.is_none()
    }

    fn eval_raw(&self, i: usize, p: usize, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.law {
            Some(l) => l.eval(i, p, t, x, out),
            None => out.fill(0.0),
        }
    }

    /// Evaluates and projects; returns whether projection was needed.
    pub fn eval(&self, i: usize, p: usize, t: f64, x: &[f64], out: &mut [f64]) -> bool {
        if self.dim == 0 {
            return false;
        }
        self.eval_raw(i, p, t, x, out);
        match &self.bounds {
            Some(b) => b.project(out),
            None => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_and_sum() {
        let u = ControlPath::feedback(1, |t, x, out| out[0] = t + x[0]);
        let v = ControlPath::constant(vec![1.0]);
        let w = u.plus(0.5, &v);
        let mut out = [0.0];
        assert!(!w.eval(0, 0, 1.0, &[2.0], &mut out));
        assert_eq!(out[0], 3.5);
        let b = w.clone().with_bounds(ControlBox::new(vec![-1.0], vec![1.0]).unwrap());
        assert!(b.eval(0, 0, 1.0, &[2.0], &mut out));
        assert_eq!(out[0], 1.0);
    }

    #[test]
    fn open_loop_lookup() {
        let c = ControlPath::open_loop(1, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut out = [0.0];
        c.eval(1, 0, 0.0, &[], &mut out);
        assert_eq!(out[0], 3.0);
        assert!(ControlPath::open_loop(1, 2, 1, vec![1.0]).is_err());
    }
}
