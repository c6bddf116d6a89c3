//! Particle ensembles and the explicit Euler scheme for mean-field SDEs with jumps.
//!
//! Storage is node-major: the values of all particles at node `i` are
//! contiguous, so the per-step reductions (ensemble means, regressions) walk
//! memory linearly. Jump coefficients are evaluated at the left point `t_i`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coefficients::{Args, Coefficients, Dims, State};
use crate::control::ControlPath;
use crate::error::{Error, Result};
use crate::grid::{MarkSpace, NoisePanel, TimeGrid};
use crate::report::fmt17;

/// How `E'[c(λ_p, λ')]` is estimated from the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanFieldEstimator {
    /// Affine shortcut when the coefficients declare affinity in primed slots,
    /// pairwise otherwise.
    #[default]
    Auto,
    /// `(1/P) Σ_q c(λ_p, λ_q)`.
    FullPairwise,
    /// `c(λ_p, mean)`.
    AffineShortcut,
}

impl MeanFieldEstimator {
    pub fn resolve(self, coeffs: &dyn Coefficients) -> Self {
        match self {
            Self::Auto if coeffs.primed_affine() => Self::AffineShortcut,
            Self::Auto => Self::FullPairwise,
            other => other,
        }
    }
}

/// Per-particle auxiliary data handed to coefficients through `Args::aux`.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxPaths {
    pub dim: usize,
    pub particles: usize,
    pub steps: usize,
    pub data: Vec<f64>,
    /// Leading coordinates that also enter the regression basis of the
    /// backward step, for systems whose own forward state is not Markov.
    pub regressors: usize,
}

impl AuxPaths {
    pub fn zeros(dim: usize, particles: usize, steps: usize) -> Self {
        Self { dim, particles, steps, data: vec![0.0; dim * particles * (steps + 1)], regressors: 0 }
    }

    pub fn with_regressors(mut self, count: usize) -> Self {
        self.regressors = count.min(self.dim);
        self
    }

    pub fn node(&self, i: usize) -> &[f64] {
        let len = self.dim * self.particles;
        &self.data[i * len..(i + 1) * len]
    }

    pub fn at_mut(&mut self, i: usize, p: usize) -> &mut [f64] {
        let o = (i * self.particles + p) * self.dim;
        &mut self.data[o..o + self.dim]
    }
}

/// Deterministic perturbation processes `(φ, ψ, ϕ, γ, ξ)` sampled on the grid;
/// empty vectors mean zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Perturbations {
    /// `(N+1) × n`.
    pub drift: Vec<f64>,
    /// `(N+1) × n×d`.
    pub diffusion: Vec<f64>,
    /// `(N+1) × M × n`.
    pub jump: Vec<f64>,
    /// `(N+1) × m`.
    pub driver: Vec<f64>,
    /// `m`.
    pub terminal: Vec<f64>,
}

impl Perturbations {
    fn sample<F: Fn(f64, &mut [f64])>(grid: &TimeGrid, width: usize, f: F) -> Vec<f64> {
        let mut out = vec![0.0; (grid.steps() + 1) * width];
        for i in 0..=grid.steps() {
            f(grid.node(i), &mut out[i * width..(i + 1) * width]);
        }
        out
    }

    pub fn with_drift<F: Fn(f64, &mut [f64])>(mut self, grid: &TimeGrid, n: usize, f: F) -> Self {
        self.drift = Self::sample(grid, n, f);
        self
    }

    pub fn with_diffusion<F: Fn(f64, &mut [f64])>(mut self, grid: &TimeGrid, nd: usize, f: F) -> Self {
        self.diffusion = Self::sample(grid, nd, f);
        self
    }

    /// `f(t, out)` fills `M × n` values, mark-major.
    pub fn with_jump<F: Fn(f64, &mut [f64])>(mut self, grid: &TimeGrid, mn: usize, f: F) -> Self {
        self.jump = Self::sample(grid, mn, f);
        self
    }

    pub fn with_driver<F: Fn(f64, &mut [f64])>(mut self, grid: &TimeGrid, m: usize, f: F) -> Self {
        self.driver = Self::sample(grid, m, f);
        self
    }

    pub fn with_terminal(mut self, xi: Vec<f64>) -> Self {
        self.terminal = xi;
        self
    }

    pub fn is_zero(&self) -> bool {
        [&self.drift, &self.diffusion, &self.jump, &self.driver, &self.terminal]
            .iter()
            .all(|v| v.iter().all(|a| *a == 0.0))
    }
}

/// `P` particles × `(N+1)` nodes of `(x, y, z, k, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    dims: Dims,
    particles: usize,
    grid: TimeGrid,
    weights: Vec<f64>,
    pub(crate) x: Vec<f64>,
    pub(crate) y: Vec<f64>,
    pub(crate) z: Vec<f64>,
    pub(crate) k: Vec<f64>,
    pub(crate) v: Vec<f64>,
    pub(crate) projections: usize,
}

/// Cross-section of an ensemble (or a mix of ensembles) at one node.
#[derive(Debug, Clone, Copy)]
pub struct NodeView<'a> {
    pub dims: Dims,
    pub particles: usize,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub k: &'a [f64],
    pub v: &'a [f64],
    pub aux: &'a [f64],
    pub aux_dim: usize,
}

impl<'a> NodeView<'a> {
    pub fn args(&self, p: usize) -> Args<'a> {
        let d = self.dims;
        let sl = |v: &'a [f64], w: usize| -> &'a [f64] { &v[p * w..(p + 1) * w] };
        Args {
            x: sl(self.x, d.n),
            y: sl(self.y, d.m),
            z: sl(self.z, d.z_len()),
            k: sl(self.k, d.k_len()),
            v: sl(self.v, d.k_ctrl),
            aux: sl(self.aux, self.aux_dim),
        }
    }

    pub fn mean(&self) -> State {
        let avg = |v: &[f64], w: usize| -> Vec<f64> {
            let mut out = vec![0.0; w];
            if w == 0 {
                return out;
            }
            for chunk in v.chunks_exact(w) {
                for (o, a) in out.iter_mut().zip(chunk) {
                    *o += a;
                }
            }
            let inv = 1.0 / self.particles as f64;
            out.iter_mut().for_each(|o| *o *= inv);
            out
        };
        let d = self.dims;
        State {
            x: avg(self.x, d.n),
            y: avg(self.y, d.m),
            z: avg(self.z, d.z_len()),
            k: avg(self.k, d.k_len()),
            v: avg(self.v, d.k_ctrl),
            aux: avg(self.aux, self.aux_dim),
        }
    }
}

/// Evaluates `E'[c(λ_p, λ')]` for every particle of `view` into `out`
/// (`width` values per particle).
pub(crate) fn mean_field_apply<F>(
    est: MeanFieldEstimator,
    view: &NodeView,
    mean: &State,
    width: usize,
    out: &mut [f64],
    f: F,
) where
    F: Fn(&Args, &Args, &mut [f64]),
{
    let pn = view.particles;
    match est {
        MeanFieldEstimator::FullPairwise => {
            let mut tmp = vec![0.0; width];
            let inv = 1.0 / pn as f64;
            for p in 0..pn {
                let own = view.args(p);
                let o = &mut out[p * width..(p + 1) * width];
                o.fill(0.0);
                for q in 0..pn {
                    f(&own, &view.args(q), &mut tmp);
                    for (a, b) in o.iter_mut().zip(&tmp) {
                        *a += b;
                    }
                }
                o.iter_mut().for_each(|a| *a *= inv);
            }
        }
        _ => {
            let m = mean.args();
            for p in 0..pn {
                f(&view.args(p), &m, &mut out[p * width..(p + 1) * width]);
            }
        }
    }
}

impl ParticleEnsemble {
    pub fn zeros(dims: Dims, particles: usize, grid: TimeGrid, marks: &MarkSpace) -> Self {
        let nodes = grid.steps() + 1;
        let len = |w: usize| vec![0.0; w * particles * nodes];
        Self {
            dims,
            particles,
            grid,
            weights: marks.weights().to_vec(),
            x: len(dims.n),
            y: len(dims.m),
            z: len(dims.z_len()),
            k: len(dims.k_len()),
            v: len(dims.k_ctrl),
            projections: 0,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of control evaluations that had to be projected onto `U`.
    pub fn projections(&self) -> usize {
        self.projections
    }

    fn at(v: &[f64], w: usize, pn: usize, i: usize, p: usize) -> &[f64] {
        let o = (i * pn + p) * w;
        &v[o..o + w]
    }

    fn at_mut(v: &mut [f64], w: usize, pn: usize, i: usize, p: usize) -> &mut [f64] {
        let o = (i * pn + p) * w;
        &mut v[o..o + w]
    }

    pub fn x(&self, i: usize, p: usize) -> &[f64] {
        Self::at(&self.x, self.dims.n, self.particles, i, p)
    }

    pub fn y(&self, i: usize, p: usize) -> &[f64] {
        Self::at(&self.y, self.dims.m, self.particles, i, p)
    }

    pub fn z(&self, i: usize, p: usize) -> &[f64] {
        Self::at(&self.z, self.dims.z_len(), self.particles, i, p)
    }

    pub fn k(&self, i: usize, p: usize) -> &[f64] {
        Self::at(&self.k, self.dims.k_len(), self.particles, i, p)
    }

    pub fn v(&self, i: usize, p: usize) -> &[f64] {
        Self::at(&self.v, self.dims.k_ctrl, self.particles, i, p)
    }

    pub fn x_mut(&mut self, i: usize, p: usize) -> &mut [f64] {
        Self::at_mut(&mut self.x, self.dims.n, self.particles, i, p)
    }

    pub fn y_mut(&mut self, i: usize, p: usize) -> &mut [f64] {
        Self::at_mut(&mut self.y, self.dims.m, self.particles, i, p)
    }

    pub fn z_mut(&mut self, i: usize, p: usize) -> &mut [f64] {
        let w = self.dims.z_len();
        Self::at_mut(&mut self.z, w, self.particles, i, p)
    }

    pub fn k_mut(&mut self, i: usize, p: usize) -> &mut [f64] {
        let w = self.dims.k_len();
        Self::at_mut(&mut self.k, w, self.particles, i, p)
    }

    pub fn v_mut(&mut self, i: usize, p: usize) -> &mut [f64] {
        let w = self.dims.k_ctrl;
        Self::at_mut(&mut self.v, w, self.particles, i, p)
    }

    fn node(v: &[f64], w: usize, pn: usize, i: usize) -> &[f64] {
        &v[i * pn * w..(i + 1) * pn * w]
    }

    pub fn view<'a>(&'a self, i: usize, aux: Option<&'a AuxPaths>) -> NodeView<'a> {
        let (d, pn) = (self.dims, self.particles);
        NodeView {
            dims: d,
            particles: pn,
            x: Self::node(&self.x, d.n, pn, i),
            y: Self::node(&self.y, d.m, pn, i),
            z: Self::node(&self.z, d.z_len(), pn, i),
            k: Self::node(&self.k, d.k_len(), pn, i),
            v: Self::node(&self.v, d.k_ctrl, pn, i),
            aux: aux.map_or(&[][..], |a| a.node(i)),
            aux_dim: aux.map_or(0, |a| a.dim),
        }
    }

    pub fn mean_x(&self, i: usize) -> Vec<f64> {
        self.view(i, None).mean().x
    }

    pub fn mean_y(&self, i: usize) -> Vec<f64> {
        self.view(i, None).mean().y
    }

    /// Component `c` of the particle mean of `x` over all nodes.
    pub fn mean_x_path(&self, c: usize) -> Vec<f64> {
        (0..=self.steps()).map(|i| self.mean_x(i)[c]).collect()
    }

    pub fn mean_y_path(&self, c: usize) -> Vec<f64> {
        (0..=self.steps()).map(|i| self.mean_y(i)[c]).collect()
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims
            || self.particles != other.particles
            || self.grid != other.grid
            || self.weights != other.weights
        {
            return Err(Error::ShapeMismatch(format!(
                "ensembles differ: {:?}/P={} vs {:?}/P={}",
                self.dims, self.particles, other.dims, other.particles
            )));
        }
        Ok(())
    }

    /// `(y, z, k) ← (1−ω)(y, z, k) + ω·other`.
    pub fn blend_backward(&mut self, other: &Self, omega: f64) {
        for (a, b) in [(&mut self.y, &other.y), (&mut self.z, &other.z), (&mut self.k, &other.k)] {
            for (u, w) in a.iter_mut().zip(b.iter()) {
                *u += omega * (w - *u);
            }
        }
    }

    pub fn copy_backward_from(&mut self, other: &Self) {
        self.y.copy_from_slice(&other.y);
        self.z.copy_from_slice(&other.z);
        self.k.copy_from_slice(&other.k);
    }

    pub fn is_finite(&self) -> bool {
        [&self.x, &self.y, &self.z, &self.k, &self.v].iter().all(|v| v.iter().all(|a| a.is_finite()))
    }

    /// Paths in CSV: one row per (particle, node).
    pub fn write_paths_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.header(true))?;
        for p in 0..self.particles {
            for i in 0..=self.steps() {
                let mut row = vec![p.to_string(), i.to_string(), fmt17(self.grid.node(i))];
                self.push_row(&mut row, |v, wd| Self::at(v, wd, self.particles, i, p).to_vec());
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Particle means in CSV: one row per node.
    pub fn write_means_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.header(false))?;
        for i in 0..=self.steps() {
            let mean = self.view(i, None).mean();
            let mut row = vec![i.to_string(), fmt17(self.grid.node(i))];
            let parts = [&mean.x, &mean.y, &mean.z, &mean.k, &mean.v];
            for part in parts {
                row.extend(part.iter().map(|a| fmt17(*a)));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    fn header(&self, per_particle: bool) -> Vec<String> {
        let d = self.dims;
        let mut h: Vec<String> = if per_particle {
            vec!["particle".into(), "node".into(), "t".into()]
        } else {
            vec!["node".into(), "t".into()]
        };
        h.extend((1..=d.n).map(|c| format!("x_{c}")));
        h.extend((1..=d.m).map(|c| format!("y_{c}")));
        for r in 1..=d.m {
            h.extend((1..=d.d).map(|l| format!("z_{r}_{l}")));
        }
        for r in 1..=d.m {
            h.extend((1..=d.marks).map(|j| format!("k_{r}_{j}")));
        }
        h.extend((1..=d.k_ctrl).map(|c| format!("v_{c}")));
        h
    }

    fn push_row<F: Fn(&[f64], usize) -> Vec<f64>>(&self, row: &mut Vec<String>, get: F) {
        let d = self.dims;
        for (v, w) in [(&self.x, d.n), (&self.y, d.m), (&self.z, d.z_len()), (&self.k, d.k_len()), (&self.v, d.k_ctrl)]
        {
            row.extend(get(v, w).into_iter().map(fmt17));
        }
    }
}

/// Discrete weighted norm `Ê[Σ_{i<N} Δt(|x̂|²+|ŷ|²+|ẑ|²+Σ_j λ_j|k̂_j|²) + |x̂_N|²]`.
pub fn ensemble_norm(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<f64> {
    a.same_shape(b)?;
    Ok(weighted_distance(a, b, true))
}

/// Same norm restricted to `(y, z, k)`, with `|ŷ_N|²` as terminal term.
pub fn backward_distance(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<f64> {
    a.same_shape(b)?;
    Ok(weighted_distance(a, b, false))
}

fn weighted_distance(a: &ParticleEnsemble, b: &ParticleEnsemble, with_x: bool) -> f64 {
    let d = a.dims;
    let pn = a.particles;
    let nn = a.steps();
    let dt = a.grid.dt();
    let sq = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    let mut total = 0.0;
    for i in 0..nn {
        let mut node = 0.0;
        let r = |w: usize| i * pn * w..(i + 1) * pn * w;
        if with_x {
            node += sq(&a.x[r(d.n)], &b.x[r(d.n)]);
        }
        node += sq(&a.y[r(d.m)], &b.y[r(d.m)]);
        node += sq(&a.z[r(d.z_len())], &b.z[r(d.z_len())]);
        if d.marks > 0 {
            let rk = r(d.k_len());
            for (idx, (u, v)) in a.k[rk.clone()].iter().zip(&b.k[rk]).enumerate() {
                node += a.weights[idx % d.marks] * (u - v) * (u - v);
            }
        }
        total += dt * node;
    }
    let last = |w: usize| nn * pn * w..(nn + 1) * pn * w;
    total += if with_x { sq(&a.x[last(d.n)], &b.x[last(d.n)]) } else { sq(&a.y[last(d.m)], &b.y[last(d.m)]) };
    total / pn as f64
}

/// Everything the forward Euler step needs.
pub struct ForwardSpec<'a> {
    pub coeffs: &'a dyn Coefficients,
    pub estimator: MeanFieldEstimator,
    /// Weight of the `Λ` slot (evolving `X` with frozen `(y, z, k)`).
    pub alpha0: f64,
    /// Weight of the `λ` slot (the input ensemble).
    pub delta: f64,
    pub frozen: Option<&'a ParticleEnsemble>,
    pub input: Option<&'a ParticleEnsemble>,
    pub perturbations: Option<&'a Perturbations>,
    pub control: &'a ControlPath,
    pub aux: Option<&'a AuxPaths>,
    pub x0: &'a [f64],
    /// Precomputed input and perturbation terms; replaces `input` and `perturbations` when set.
    pub base: Option<&'a ForwardBase>,
}

/// The `δ`-weighted input coefficients plus perturbations at every node.
/// They do not depend on the evolving `X`, so an inner loop evaluates them once.
#[derive(Debug, Clone)]
pub struct ForwardBase {
    drift: Vec<f64>,
    vol: Vec<f64>,
    jump: Vec<f64>,
}

impl ForwardBase {
    pub fn new(spec: &ForwardSpec, particles: usize, grid: &TimeGrid) -> Result<Self> {
        let d = spec.coeffs.dims();
        let (n, dd, mk) = (d.n, d.d, d.marks);
        if let Some(e) = spec.input {
            if e.particles != particles || e.grid.steps() != grid.steps() {
                return Err(Error::ShapeMismatch("input ensemble does not match".into()));
            }
        }
        let nn = grid.steps();
        let est = spec.estimator.resolve(spec.coeffs);
        let mut buf = ForwardBuffers::new(particles, n, dd, mk);
        let mut vin = vec![0.0; particles * d.k_ctrl];
        let (ld, lv, lj) = (buf.drift.len(), buf.vol.len(), buf.jump.len());
        let mut base = ForwardBase {
            drift: Vec::with_capacity(nn * ld),
            vol: Vec::with_capacity(nn * lv),
            jump: Vec::with_capacity(nn * lj),
        };
        for i in 0..nn {
            buf.clear();
            constant_terms(spec, est, i, grid.node(i), particles, &mut vin, &mut buf);
            base.drift.extend_from_slice(&buf.drift);
            base.vol.extend_from_slice(&buf.vol);
            base.jump.extend_from_slice(&buf.jump);
        }
        Ok(base)
    }

    fn load(&self, i: usize, buf: &mut ForwardBuffers) {
        let (ld, lv, lj) = (buf.drift.len(), buf.vol.len(), buf.jump.len());
        buf.drift.copy_from_slice(&self.drift[i * ld..(i + 1) * ld]);
        buf.vol.copy_from_slice(&self.vol[i * lv..(i + 1) * lv]);
        buf.jump.copy_from_slice(&self.jump[i * lj..(i + 1) * lj]);
    }
}

struct ForwardBuffers {
    drift: Vec<f64>,
    vol: Vec<f64>,
    jump: Vec<f64>,
    tb: Vec<f64>,
    ts: Vec<f64>,
    th: Vec<f64>,
}

impl ForwardBuffers {
    fn new(pn: usize, n: usize, dd: usize, mk: usize) -> Self {
        ForwardBuffers {
            drift: vec![0.0; pn * n],
            vol: vec![0.0; pn * n * dd],
            jump: vec![0.0; pn * n * mk],
            tb: vec![0.0; n],
            ts: vec![0.0; n * dd],
            th: vec![0.0; n],
        }
    }

    fn clear(&mut self) {
        self.drift.fill(0.0);
        self.vol.fill(0.0);
        self.jump.fill(0.0);
    }
}

/// Input and perturbation contributions at node `i`, added into `buf`.
#[allow(clippy::too_many_arguments)]
fn constant_terms(
    spec: &ForwardSpec,
    est: MeanFieldEstimator,
    i: usize,
    t: f64,
    pn: usize,
    vin: &mut [f64],
    buf: &mut ForwardBuffers,
) {
    let d = spec.coeffs.dims();
    let (n, dd, mk, kc) = (d.n, d.d, d.marks, d.k_ctrl);
    if spec.delta != 0.0 {
        if let Some(input) = spec.input {
            for p in 0..pn {
                spec.control.eval(i, p, t, input.x(i, p), &mut vin[p * kc..(p + 1) * kc]);
            }
            let mut view = input.view(i, spec.aux);
            view.v = vin;
            accumulate_forward(spec.coeffs, est, t, spec.delta, &view, buf);
        }
    }
    if let Some(pert) = spec.perturbations {
        add_node(&mut buf.drift, &pert.drift, i, n, pn);
        add_node(&mut buf.vol, &pert.diffusion, i, n * dd, pn);
        if !pert.jump.is_empty() {
            for j in 0..mk {
                for p in 0..pn {
                    for c in 0..n {
                        buf.jump[(j * pn + p) * n + c] += pert.jump[(i * mk + j) * n + c];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn accumulate_forward(
    coeffs: &dyn Coefficients,
    est: MeanFieldEstimator,
    t: f64,
    weight: f64,
    view: &NodeView,
    buf: &mut ForwardBuffers,
) {
    let d = view.dims;
    let (n, nd, mk, pn) = (d.n, d.n * d.d, d.marks, view.particles);
    let mean = view.mean();
    let m = mean.args();
    let pairwise = est == MeanFieldEstimator::FullPairwise;
    let scale = if pairwise { weight / pn as f64 } else { weight };
    let add = |p: usize, own: &Args, other: &Args, buf: &mut ForwardBuffers| {
        coeffs.drift(t, own, other, &mut buf.tb);
        for (a, b) in buf.drift[p * n..(p + 1) * n].iter_mut().zip(&buf.tb) {
            *a += scale * b;
        }
        if nd > 0 {
            coeffs.diffusion(t, own, other, &mut buf.ts);
            for (a, b) in buf.vol[p * nd..(p + 1) * nd].iter_mut().zip(&buf.ts) {
                *a += scale * b;
            }
        }
        for j in 0..mk {
            coeffs.jump(t, j, own, other, &mut buf.th);
            let o = (j * pn + p) * n;
            for (a, b) in buf.jump[o..o + n].iter_mut().zip(&buf.th) {
                *a += scale * b;
            }
        }
    };
    for p in 0..pn {
        let own = view.args(p);
        if pairwise {
            for q in 0..pn {
                add(p, &own, &view.args(q), buf);
            }
        } else {
            add(p, &own, &m, buf);
        }
    }
}

/// Euler scheme for `dX = [α0 E'b(Λ) + δ E'b(λ) + φ]dt + [...]dB + Σ_j [...]dÑ_j`
/// where `Λ = (X, frozen y, z, k)` and `λ` is the input ensemble. Writes `x`
/// and the control `v` of `out`; `(y, z, k)` of `out` are left untouched.
pub fn forward_given_backward(spec: &ForwardSpec, noise: &NoisePanel, out: &mut ParticleEnsemble) -> Result<()> {
    let d = out.dims;
    let pn = out.particles;
    let grid = out.grid;
    let nn = grid.steps();
    let dt = grid.dt();
    let (n, m, dd, mk, kc) = (d.n, d.m, d.d, d.marks, d.k_ctrl);
    if spec.coeffs.dims() != d {
        return Err(Error::ShapeMismatch("coefficient dims differ from ensemble dims".into()));
    }
    if spec.x0.len() != n {
        return Err(Error::ShapeMismatch(format!("x0 has length {}, expected {n}", spec.x0.len())));
    }
    if noise.particles() < pn || noise.steps() != nn || noise.brownian_dim() != dd || noise.marks() != mk {
        return Err(Error::ShapeMismatch("noise panel does not match ensemble".into()));
    }
    for e in [spec.frozen, spec.input].into_iter().flatten() {
        out.same_shape(e)?;
    }
    if spec.control.dim() != kc {
        return Err(Error::ShapeMismatch("control dimension differs from dims.k_ctrl".into()));
    }
    if let Some(a) = spec.aux {
        if a.particles != pn || a.steps != nn {
            return Err(Error::ShapeMismatch("auxiliary paths do not match ensemble".into()));
        }
    }
    let est = spec.estimator.resolve(spec.coeffs);
    let zeros_y = vec![0.0; pn * m];
    let zeros_z = vec![0.0; pn * d.z_len()];
    let zeros_k = vec![0.0; pn * d.k_len()];
    let mut vin = vec![0.0; pn * kc];
    let mut buf = ForwardBuffers::new(pn, n, dd, mk);
    let mut projections = 0;
    for p in 0..pn {
        out.x[p * n..(p + 1) * n].copy_from_slice(spec.x0);
    }
    let node_len = pn * n;
    for i in 0..=nn {
        let t = grid.node(i);
        for p in 0..pn {
            let (xs, vs) = (&out.x[(i * pn + p) * n..(i * pn + p + 1) * n], &mut out.v);
            let vo = (i * pn + p) * kc;
            if spec.control.eval(i, p, t, xs, &mut vs[vo..vo + kc]) {
                projections += 1;
            }
        }
        if i == nn {
            break;
        }
        match spec.base {
            Some(base) => base.load(i, &mut buf),
            None => {
                buf.clear();
                constant_terms(spec, est, i, t, pn, &mut vin, &mut buf);
            }
        }
        let aux = spec.aux.map_or(&[][..], |a| a.node(i));
        let aux_dim = spec.aux.map_or(0, |a| a.dim);
        if spec.alpha0 != 0.0 {
            let (y, z, k) = match spec.frozen {
                Some(f) => (
                    &f.y[i * pn * m..(i + 1) * pn * m],
                    &f.z[i * pn * d.z_len()..(i + 1) * pn * d.z_len()],
                    &f.k[i * pn * d.k_len()..(i + 1) * pn * d.k_len()],
                ),
                None => (&zeros_y[..], &zeros_z[..], &zeros_k[..]),
            };
            let view = NodeView {
                dims: d,
                particles: pn,
                x: &out.x[i * node_len..(i + 1) * node_len],
                y,
                z,
                k,
                v: &out.v[i * pn * kc..(i + 1) * pn * kc],
                aux,
                aux_dim,
            };
            accumulate_forward(spec.coeffs, est, t, spec.alpha0, &view, &mut buf);
        }
        let (head, tail) = out.x.split_at_mut((i + 1) * node_len);
        let cur = &head[i * node_len..];
        let next = &mut tail[..node_len];
        for p in 0..pn {
            let db = noise.db(i, p);
            for c in 0..n {
                let mut v = cur[p * n + c] + buf.drift[p * n + c] * dt;
                for l in 0..dd {
                    v += buf.vol[(p * n + c) * dd + l] * db[l];
                }
                for j in 0..mk {
                    v += buf.jump[(j * pn + p) * n + c] * noise.compensated(i, p, j);
                }
                if !v.is_finite() {
                    return Err(Error::NonFiniteState { node: i + 1, particle: p });
                }
                next[p * n + c] = v;
            }
        }
    }
    out.projections = projections;
    Ok(())
}

fn add_node(acc: &mut [f64], pert: &[f64], i: usize, width: usize, pn: usize) {
    if pert.is_empty() || width == 0 {
        return;
    }
    let row = &pert[i * width..(i + 1) * width];
    for p in 0..pn {
        for (a, b) in acc[p * width..(p + 1) * width].iter_mut().zip(row) {
            *a += b;
        }
    }
}

/// Euler particle scheme for the mean-field SDE `dx = E'b dt + E'σ dB + Σ_j E'h_j dÑ_j`.
/// Only `x` (and `v`) of the returned ensemble are populated.
#[allow(clippy::too_many_arguments)]
pub fn simulate_mckean_vlasov(
    coeffs: &dyn Coefficients,
    grid: &TimeGrid,
    marks: &MarkSpace,
    noise: &NoisePanel,
    particles: usize,
    x0: &[f64],
    estimator: MeanFieldEstimator,
    control: &ControlPath,
) -> Result<ParticleEnsemble> {
    noise.check(grid, marks, coeffs.dims().d)?;
    let mut out = ParticleEnsemble::zeros(coeffs.dims(), particles, *grid, marks);
    let spec = ForwardSpec {
        coeffs,
        estimator,
        alpha0: 1.0,
        delta: 0.0,
        frozen: None,
        input: None,
        perturbations: None,
        control,
        aux: None,
        x0,
        base: None,
    };
    forward_given_backward(&spec, noise, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{example_3_1, LinearMf, Slot};
    use crate::grid::{make_grid, sample_noise};

    fn setup(p: usize, n: usize, t: f64) -> (TimeGrid, MarkSpace, NoisePanel) {
        let g = make_grid(t, n).unwrap();
        let marks = MarkSpace::single(1.0, 1.0).unwrap();
        let noise = sample_noise(&g, &marks, p, 1, 5).unwrap();
        (g, marks, noise)
    }

    #[test]
    fn zero_dynamics_stay_put() {
        let (g, marks, noise) = setup(20, 10, 1.0);
        let c = LinearMf::zeros(Dims::scalar(1));
        let e =
            simulate_mckean_vlasov(&c, &g, &marks, &noise, 20, &[1.5], MeanFieldEstimator::Auto, &ControlPath::zero(0))
                .unwrap();
        assert!(e.x.iter().all(|v| *v == 1.5));
    }

    #[test]
    fn mean_follows_exponential() {
        let (g, marks, noise) = setup(2000, 200, 1.0);
        let mut c = LinearMf::zeros(Dims::scalar(1));
        c.set_drift(Slot::X, 0.0, 1.0);
        c.diffusion.c0[0] = 0.3;
        let e = simulate_mckean_vlasov(
            &c,
            &g,
            &marks,
            &noise,
            2000,
            &[1.0],
            MeanFieldEstimator::Auto,
            &ControlPath::zero(0),
        )
        .unwrap();
        let mean = e.mean_x(200)[0];
        let tol = g.dt() * std::f64::consts::E + 5.0 * 0.3 * 2f64.sqrt() * std::f64::consts::E / (2000f64).sqrt();
        assert!((mean - 1f64.exp()).abs() < tol, "{mean}");
    }

    #[test]
    fn pairwise_matches_affine_exactly_for_affine_coefficients() {
        let (g, marks, noise) = setup(30, 8, 0.5);
        let mut c = LinearMf::zeros(Dims::scalar(1));
        c.set_drift(Slot::X, -0.5, 0.25);
        c.set_diffusion(Slot::X, 0.2, 0.1);
        c.set_jump(0, Slot::X, 0.1, -0.3);
        let a = simulate_mckean_vlasov(
            &c,
            &g,
            &marks,
            &noise,
            30,
            &[1.0],
            MeanFieldEstimator::AffineShortcut,
            &ControlPath::zero(0),
        )
        .unwrap();
        let b = simulate_mckean_vlasov(
            &c,
            &g,
            &marks,
            &noise,
            30,
            &[1.0],
            MeanFieldEstimator::FullPairwise,
            &ControlPath::zero(0),
        )
        .unwrap();
        for (u, v) in a.x.iter().zip(&b.x) {
            assert!((u - v).abs() <= 1e-13 * u.abs().max(1.0));
        }
    }

    #[test]
    fn frozen_constant_y_drives_minus_three_c() {
        let (g, marks, noise) = setup(10, 10, 1.0);
        let c = example_3_1(1);
        let mut input = ParticleEnsemble::zeros(c.dims(), 10, g, &marks);
        input.y.fill(0.4);
        let mut out = input.clone();
        let spec = ForwardSpec {
            coeffs: &c,
            estimator: MeanFieldEstimator::Auto,
            alpha0: 0.0,
            delta: 1.0,
            frozen: None,
            input: Some(&input),
            perturbations: None,
            control: &ControlPath::zero(0),
            aux: None,
            x0: &[1.0],
            base: None,
        };
        forward_given_backward(&spec, &noise, &mut out).unwrap();
        for i in 0..=10 {
            for p in 0..10 {
                assert!((out.x(i, p)[0] - (1.0 - 1.2 * g.node(i))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn drift_perturbation_integrates() {
        let (g, marks, noise) = setup(4, 50, 1.0);
        let c = example_3_1(1);
        let pert = Perturbations::default().with_drift(&g, 1, |t, o| o[0] = 2.0 * t);
        let mut out = ParticleEnsemble::zeros(c.dims(), 4, g, &marks);
        let spec = ForwardSpec {
            coeffs: &c,
            estimator: MeanFieldEstimator::Auto,
            alpha0: 0.0,
            delta: 0.0,
            frozen: None,
            input: None,
            perturbations: Some(&pert),
            control: &ControlPath::zero(0),
            aux: None,
            x0: &[0.0],
            base: None,
        };
        forward_given_backward(&spec, &noise, &mut out).unwrap();
        // left-point Euler of ∫2t dt = t² has error −Δt·t
        let x1 = out.x(50, 0)[0];
        assert!((x1 - (1.0 - g.dt())).abs() < 1e-12);
    }

    #[test]
    fn norm_examples() {
        let g = make_grid(1.0, 10).unwrap();
        let marks = MarkSpace::single(1.0, 2.0).unwrap();
        let a = ParticleEnsemble::zeros(Dims::scalar(1), 3, g, &marks);
        let mut b = a.clone();
        assert_eq!(ensemble_norm(&a, &b).unwrap(), 0.0);
        b.x.iter_mut().for_each(|v| *v += 1.0);
        assert!((ensemble_norm(&a, &b).unwrap() - 2.0).abs() < 1e-12);
        let mut c = a.clone();
        c.k.iter_mut().for_each(|v| *v = 1.0);
        // λ = 2 on the k block, terminal node excluded
        assert!((ensemble_norm(&a, &c).unwrap() - 2.0).abs() < 1e-12);
    }
}
