//! Coefficient callbacks for coupled mean-field FBSDEs with jumps, the assembled
//! monotonicity field `A = (−Gᵀf, Gb, Gσ, Gh)` and the built-in linear problems.
//!
//! Every callback receives the particle's own arguments and the "primed"
//! arguments of an independent copy. The estimator in [`crate::particles`]
//! turns them into `E'[·]`.
//!
//! Layout conventions: `z` is `m×d` row-major, `k` is `m×M` row-major (one
//! column per mark) and `σ` is `n×d` row-major. The drift, diffusion and driver
//! take the whole mark-indexed `k` slice and return values already integrated
//! against the mark weights; the jump coefficient is evaluated per mark.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::MarkSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub k_ctrl: usize,
    pub marks: usize,
}

impl Dims {
    pub fn scalar(marks: usize) -> Self {
        Self { n: 1, m: 1, d: 1, k_ctrl: 0, marks }
    }

    pub fn with_control(mut self, k_ctrl: usize) -> Self {
        self.k_ctrl = k_ctrl;
        self
    }

    pub fn z_len(&self) -> usize {
        self.m * self.d
    }

    pub fn k_len(&self) -> usize {
        self.m * self.marks
    }

    /// Length of the concatenated argument `(x, y, z, k, v)`.
    pub fn state_len(&self) -> usize {
        self.n + self.m + self.z_len() + self.k_len() + self.k_ctrl
    }

    /// Length of one stacked `A` evaluation.
    pub fn field_len(&self) -> usize {
        self.n + self.m + self.z_len() + self.k_len()
    }
}

/// Borrowed argument tuple `λ = (x, y, z, k)` plus control and auxiliary data.
#[derive(Debug, Clone, Copy)]
pub struct Args<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub k: &'a [f64],
    pub v: &'a [f64],
    pub aux: &'a [f64],
}

impl<'a> Args<'a> {
    pub fn k_at(&self, r: usize, j: usize, marks: usize) -> f64 {
        self.k[r * marks + j]
    }
}

/// Owned counterpart of [`Args`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct State {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub aux: Vec<f64>,
}

impl State {
    pub fn zeros(dims: &Dims, aux: usize) -> Self {
        Self {
            x: vec![0.0; dims.n],
            y: vec![0.0; dims.m],
            z: vec![0.0; dims.z_len()],
            k: vec![0.0; dims.k_len()],
            v: vec![0.0; dims.k_ctrl],
            aux: vec![0.0; aux],
        }
    }

    pub fn args(&self) -> Args<'_> {
        Args { x: &self.x, y: &self.y, z: &self.z, k: &self.k, v: &self.v, aux: &self.aux }
    }

    pub fn from_args(a: &Args) -> Self {
        Self {
            x: a.x.to_vec(),
            y: a.y.to_vec(),
            z: a.z.to_vec(),
            k: a.k.to_vec(),
            v: a.v.to_vec(),
            aux: a.aux.to_vec(),
        }
    }

    /// Concatenation `(x, y, z, k, v)`.
    pub fn flat(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.x.len() + self.y.len() + self.z.len() + self.k.len() + self.v.len());
        s.extend_from_slice(&self.x);
        s.extend_from_slice(&self.y);
        s.extend_from_slice(&self.z);
        s.extend_from_slice(&self.k);
        s.extend_from_slice(&self.v);
        s
    }

    pub fn set_flat(&mut self, s: &[f64]) {
        let mut o = 0;
        for part in [&mut self.x, &mut self.y, &mut self.z, &mut self.k, &mut self.v] {
            let len = part.len();
            part.copy_from_slice(&s[o..o + len]);
            o += len;
        }
    }

    /// `|x|² + |y|² + |z|² + Σ_j λ_j |k_j|²`.
    pub fn weighted_norm_sq(&self, weights: &[f64]) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        let marks = weights.len();
        let mut kk = 0.0;
        if marks > 0 {
            for (idx, v) in self.k.iter().enumerate() {
                kk += weights[idx % marks] * v * v;
            }
        }
        sq(&self.x) + sq(&self.y) + sq(&self.z) + kk
    }
}

/// Declared Lipschitz metadata; `None` means not asserted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Lipschitz {
    pub l_a: Option<f64>,
    pub l_phi: Option<f64>,
    pub l_f: Option<f64>,
    pub l_g: Option<f64>,
}

/// The coefficient bundle `(b, σ, h, f, Φ)`.
pub trait Coefficients: Send + Sync {
    fn dims(&self) -> Dims;
    /// `b`, length `n`.
    fn drift(&self, t: f64, own: &Args, other: &Args, out: &mut [f64]);
    /// `σ`, `n×d` row-major.
    fn diffusion(&self, t: f64, own: &Args, other: &Args, out: &mut [f64]);
    /// `h(·, e_j)`, length `n`.
    fn jump(&self, t: f64, mark: usize, own: &Args, other: &Args, out: &mut [f64]);
    /// `f`, length `m`.
    fn driver(&self, t: f64, own: &Args, other: &Args, out: &mut [f64]);
    /// `Φ(x, x')`, length `m`; only `x` and `aux` of the arguments are read.
    fn terminal(&self, own: &Args, other: &Args, out: &mut [f64]);

    /// Dependence on primed arguments is `C(t)·λ'` with `C` independent of `λ`,
    /// so `E'[c(λ, λ')] = c(λ, E[λ'])`.
    fn primed_affine(&self) -> bool {
        false
    }

    /// `b`, `σ`, `h` ignore `(y, z, k)` in both slots.
    fn forward_decoupled(&self) -> bool {
        false
    }

    fn lipschitz(&self) -> Lipschitz {
        Lipschitz::default()
    }
}

/// `A(t, λ, λ', e) = (−Gᵀf, Gb, Gσ, Gh)`.
#[derive(Clone)]
pub struct AssembledField {
    coeffs: Arc<dyn Coefficients>,
    g: DMatrix<f64>,
}

impl AssembledField {
    pub fn dims(&self) -> Dims {
        self.coeffs.dims()
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn coefficients(&self) -> &Arc<dyn Coefficients> {
        &self.coeffs
    }

    /// Stacked evaluation: `[−Gᵀf (n), Gb (m), Gσ (m×d), Gh (m×M)]`, the last
    /// block in the same layout as `k`.
    pub fn eval(&self, t: f64, own: &Args, other: &Args, out: &mut [f64]) {
        let dims = self.coeffs.dims();
        let (n, m, d, mk) = (dims.n, dims.m, dims.d, dims.marks);
        let mut f = vec![0.0; m];
        let mut b = vec![0.0; n];
        let mut s = vec![0.0; n * d];
        let mut h = vec![0.0; n];
        self.coeffs.driver(t, own, other, &mut f);
        self.coeffs.drift(t, own, other, &mut b);
        self.coeffs.diffusion(t, own, other, &mut s);
        for i in 0..n {
            out[i] = -(0..m).map(|r| self.g[(r, i)] * f[r]).sum::<f64>();
        }
        for r in 0..m {
            out[n + r] = (0..n).map(|i| self.g[(r, i)] * b[i]).sum();
        }
        for r in 0..m {
            for l in 0..d {
                out[n + m + r * d + l] = (0..n).map(|i| self.g[(r, i)] * s[i * d + l]).sum();
            }
        }
        let off = n + m + m * d;
        for j in 0..mk {
            self.coeffs.jump(t, j, own, other, &mut h);
            for r in 0..m {
                out[off + r * mk + j] = (0..n).map(|i| self.g[(r, i)] * h[i]).sum();
            }
        }
    }

    /// `∫⟨a, λ⟩λ(de)`-style pairing of a stacked field value with an argument difference.
    pub fn pair(&self, field: &[f64], diff: &State, weights: &[f64]) -> f64 {
        let dims = self.dims();
        let (n, m, d, mk) = (dims.n, dims.m, dims.d, dims.marks);
        let mut acc = 0.0;
        for i in 0..n {
            acc += field[i] * diff.x[i];
        }
        for r in 0..m {
            acc += field[n + r] * diff.y[r];
        }
        for q in 0..m * d {
            acc += field[n + m + q] * diff.z[q];
        }
        let off = n + m + m * d;
        for r in 0..m {
            for j in 0..mk {
                acc += weights[j] * field[off + r * mk + j] * diff.k[r * mk + j];
            }
        }
        acc
    }

    /// Squared norm of a stacked field value, with the mark block weighted.
    pub fn field_norm_sq(&self, field: &[f64], weights: &[f64]) -> f64 {
        let dims = self.dims();
        let off = dims.n + dims.m + dims.z_len();
        let mk = dims.marks;
        let head: f64 = field[..off].iter().map(|a| a * a).sum();
        let tail: f64 = field[off..].iter().enumerate().map(|(idx, a)| weights[idx % mk] * a * a).sum();
        head + tail
    }
}

pub fn matrix_rank(g: &DMatrix<f64>) -> usize {
    if g.is_empty() {
        return 0;
    }
    let sv = g.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    let tol = max * 1e-12 * (g.nrows().max(g.ncols()) as f64);
    sv.iter().filter(|s| **s > tol).count()
}

/// Spectral norm of `G`, the tight `λ1` with `|Gℓ| ≤ λ1|ℓ|`.
pub fn spectral_norm(g: &DMatrix<f64>) -> f64 {
    g.clone().svd(false, false).singular_values.iter().cloned().fold(0.0, f64::max)
}

pub fn assemble_a(coeffs: Arc<dyn Coefficients>, g: DMatrix<f64>) -> Result<AssembledField> {
    let dims = coeffs.dims();
    if g.nrows() != dims.m || g.ncols() != dims.n {
        return Err(Error::ShapeMismatch(format!("G is {}x{}, expected {}x{}", g.nrows(), g.ncols(), dims.m, dims.n)));
    }
    let expected = dims.m.min(dims.n);
    let rank = matrix_rank(&g);
    if rank < expected {
        return Err(Error::RankDeficientG { rank, expected });
    }
    Ok(AssembledField { coeffs, g })
}

/// Uniform sampling box for probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeBox {
    pub half_width: f64,
    pub horizon: f64,
}

impl Default for ProbeBox {
    fn default() -> Self {
        Self { half_width: 10.0, horizon: 1.0 }
    }
}

pub(crate) fn random_state(dims: &Dims, half_width: f64, rng: &mut ChaCha8Rng) -> State {
    let mut s = State::zeros(dims, 0);
    let mut fill = |v: &mut Vec<f64>| {
        for a in v.iter_mut() {
            *a = rng.random_range(-half_width..=half_width);
        }
    };
    fill(&mut s.x);
    fill(&mut s.y);
    fill(&mut s.z);
    fill(&mut s.k);
    fill(&mut s.v);
    s
}

/// Random perturbation of a state: every coordinate with probability 1/2,
/// otherwise a single random coordinate of `(x, y, z, k)`.
pub(crate) fn random_direction(dims: &Dims, half_width: f64, rng: &mut ChaCha8Rng) -> State {
    let mut s = random_state(dims, half_width, rng);
    s.v.iter_mut().for_each(|a| *a = 0.0);
    if rng.random_bool(0.5) {
        let len = dims.field_len();
        let keep = rng.random_range(0..len);
        let mut flat = s.flat();
        for (idx, a) in flat.iter_mut().enumerate() {
            if idx != keep && idx < len {
                *a = 0.0;
            }
        }
        s.set_flat(&flat);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub l_a_hat: f64,
    pub l_phi_hat: f64,
}

/// Empirical Lipschitz constants of `A` and `Φ` with respect to the primed
/// arguments. Points are drawn uniformly in the probe box; `G` defaults to the
/// identity when `m = n`.
pub fn probe_lipschitz(
    coeffs: Arc<dyn Coefficients>,
    g: Option<DMatrix<f64>>,
    marks: &MarkSpace,
    samples: usize,
    seed: u64,
    probe: ProbeBox,
) -> Result<LipschitzEstimate> {
    let dims = coeffs.dims();
    if marks.len() != dims.marks {
        return Err(Error::ShapeMismatch("mark count differs from coefficient dims".into()));
    }
    let g = match g {
        Some(g) => g,
        None if dims.m == dims.n => DMatrix::identity(dims.m, dims.n),
        None => return Err(Error::InvalidInput("G required when m != n".into())),
    };
    let field = assemble_a(coeffs.clone(), g)?;
    let w = marks.weights();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fa = vec![0.0; dims.field_len()];
    let mut fb = vec![0.0; dims.field_len()];
    let mut pa = vec![0.0; dims.m];
    let mut pb = vec![0.0; dims.m];
    let (mut la, mut lp) = (0.0f64, 0.0f64);
    for _ in 0..samples.max(2) {
        let t = rng.random_range(0.0..=probe.horizon);
        let own = random_state(&dims, probe.half_width, &mut rng);
        let o1 = random_state(&dims, probe.half_width, &mut rng);
        let dir = random_direction(&dims, probe.half_width, &mut rng);
        let mut o2 = o1.clone();
        let mut flat = o2.flat();
        for (a, b) in flat.iter_mut().zip(dir.flat()) {
            *a += b;
        }
        o2.set_flat(&flat);
        let dn = dir.weighted_norm_sq(w).sqrt();
        if dn > 0.0 {
            field.eval(t, &own.args(), &o1.args(), &mut fa);
            field.eval(t, &own.args(), &o2.args(), &mut fb);
            let diff: Vec<f64> = fa.iter().zip(&fb).map(|(a, b)| a - b).collect();
            la = la.max(field.field_norm_sq(&diff, w).sqrt() / dn);
        }
        let dx: f64 = dir.x.iter().map(|a| a * a).sum::<f64>().sqrt();
        if dx > 0.0 {
            coeffs.terminal(&own.args(), &o1.args(), &mut pa);
            coeffs.terminal(&own.args(), &o2.args(), &mut pb);
            let d2: f64 = pa.iter().zip(&pb).map(|(a, b)| (a - b) * (a - b)).sum();
            lp = lp.max(d2.sqrt() / dx);
        }
    }
    Ok(LipschitzEstimate { l_a_hat: la, l_phi_hat: lp })
}

/// Affine map `c0 + A·s + Ã·s'` with `s = (x, y, z, k, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub c0: Vec<f64>,
    pub own: DMatrix<f64>,
    pub primed: DMatrix<f64>,
}

impl AffineMap {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { c0: vec![0.0; rows], own: DMatrix::zeros(rows, cols), primed: DMatrix::zeros(rows, cols) }
    }

    fn apply(&self, own: &Args, other: &Args, out: &mut [f64]) {
        // column-major storage: accumulate one contiguous column per argument entry
        let rows = out.len();
        if rows == 1 {
            let mut s = self.c0[0];
            for (mat, arg) in [(&self.own, own), (&self.primed, other)] {
                let mut w = mat.as_slice().iter();
                for part in [arg.x, arg.y, arg.z, arg.k, arg.v] {
                    for (&a, &c) in part.iter().zip(w.by_ref()) {
                        s += c * a;
                    }
                }
            }
            out[0] = s;
            return;
        }
        out.copy_from_slice(&self.c0);
        for (mat, arg) in [(&self.own, own), (&self.primed, other)] {
            let data = mat.as_slice();
            let mut c = 0;
            for part in [arg.x, arg.y, arg.z, arg.k, arg.v] {
                for &a in part {
                    if a != 0.0 {
                        let col = &data[c * rows..(c + 1) * rows];
                        for (o, w) in out.iter_mut().zip(col) {
                            *o += w * a;
                        }
                    }
                    c += 1;
                }
            }
        }
    }

    fn ignores(&self, cols: std::ops::Range<usize>) -> bool {
        cols.clone().all(|c| (0..self.own.nrows()).all(|r| self.own[(r, c)] == 0.0 && self.primed[(r, c)] == 0.0))
    }
}

/// Coefficients affine in `(λ, E[λ])`: each of `b`, `σ`, `h_j`, `f` is an
/// [`AffineMap`] over `(x, y, z, k, v)` and `Φ = φ0 + Px·x + P̃x·x'`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMf {
    pub dims: Dims,
    pub drift: AffineMap,
    pub diffusion: AffineMap,
    pub jumps: Vec<AffineMap>,
    pub driver: AffineMap,
    pub terminal_c0: Vec<f64>,
    pub terminal_own: DMatrix<f64>,
    pub terminal_primed: DMatrix<f64>,
    pub lipschitz: Lipschitz,
}

impl LinearMf {
    /// All-zero coefficients.
    pub fn zeros(dims: Dims) -> Self {
        let s = dims.state_len();
        Self {
            dims,
            drift: AffineMap::zeros(dims.n, s),
            diffusion: AffineMap::zeros(dims.n * dims.d, s),
            jumps: (0..dims.marks).map(|_| AffineMap::zeros(dims.n, s)).collect(),
            driver: AffineMap::zeros(dims.m, s),
            terminal_c0: vec![0.0; dims.m],
            terminal_own: DMatrix::zeros(dims.m, dims.n),
            terminal_primed: DMatrix::zeros(dims.m, dims.n),
            lipschitz: Lipschitz::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        let s = d.state_len();
        let check = |name: &str, a: &AffineMap, rows: usize| {
            if a.c0.len() != rows || a.own.shape() != (rows, s) || a.primed.shape() != (rows, s) {
                Err(Error::ShapeMismatch(format!("{name}: expected {rows}x{s}")))
            } else {
                Ok(())
            }
        };
        check("drift", &self.drift, d.n)?;
        check("diffusion", &self.diffusion, d.n * d.d)?;
        check("driver", &self.driver, d.m)?;
        if self.jumps.len() != d.marks {
            return Err(Error::ShapeMismatch("one jump map per mark required".into()));
        }
        for j in &self.jumps {
            check("jump", j, d.n)?;
        }
        if self.terminal_own.shape() != (d.m, d.n) || self.terminal_primed.shape() != (d.m, d.n) {
            return Err(Error::ShapeMismatch("terminal matrices must be m x n".into()));
        }
        Ok(())
    }

    /// Column offsets of `(x, y, z, k, v)` inside the argument vector.
    pub fn offsets(&self) -> [usize; 5] {
        let d = self.dims;
        [0, d.n, d.n + d.m, d.n + d.m + d.z_len(), d.n + d.m + d.z_len() + d.k_len()]
    }
}

impl Coefficients for LinearMf {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn drift(&self, _t: f64, own: &Args, other: &Args, out: &mut [f64]) {
        self.drift.apply(own, other, out);
    }

    fn diffusion(&self, _t: f64, own: &Args, other: &Args, out: &mut [f64]) {
        self.diffusion.apply(own, other, out);
    }

    fn jump(&self, _t: f64, mark: usize, own: &Args, other: &Args, out: &mut [f64]) {
        self.jumps[mark].apply(own, other, out);
    }

    fn driver(&self, _t: f64, own: &Args, other: &Args, out: &mut [f64]) {
        self.driver.apply(own, other, out);
    }

    fn terminal(&self, own: &Args, other: &Args, out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = self.terminal_c0[r];
            for i in 0..self.dims.n {
                acc += self.terminal_own[(r, i)] * own.x[i] + self.terminal_primed[(r, i)] * other.x[i];
            }
            *o = acc;
        }
    }

    fn primed_affine(&self) -> bool {
        true
    }

    fn forward_decoupled(&self) -> bool {
        let [_, oy, _, ok, _] = self.offsets();
        let yzk = oy..ok + self.dims.k_len();
        self.drift.ignores(yzk.clone())
            && self.diffusion.ignores(yzk.clone())
            && self.jumps.iter().all(|j| j.ignores(yzk.clone()))
    }

    fn lipschitz(&self) -> Lipschitz {
        self.lipschitz
    }
}

/// Scalar helper: set the own / primed coefficient of a named scalar slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    X,
    Y,
    Z,
    /// `k` at the given mark.
    K(usize),
    V,
}

impl LinearMf {
    fn col(&self, slot: Slot) -> usize {
        let [ox, oy, oz, ok, ov] = self.offsets();
        match slot {
            Slot::X => ox,
            Slot::Y => oy,
            Slot::Z => oz,
            Slot::K(j) => ok + j,
            Slot::V => ov,
        }
    }

    /// Scalar problems only: entry of row 0 for `slot` in the own (`primed = false`)
    /// or primed matrix.
    pub fn coef(map: &mut AffineMap, col: usize, primed: bool, value: f64) {
        if primed {
            map.primed[(0, col)] = value;
        } else {
            map.own[(0, col)] = value;
        }
    }

    pub fn set_drift(&mut self, slot: Slot, own: f64, primed: f64) -> &mut Self {
        let c = self.col(slot);
        Self::coef(&mut self.drift, c, false, own);
        Self::coef(&mut self.drift, c, true, primed);
        self
    }

    pub fn set_diffusion(&mut self, slot: Slot, own: f64, primed: f64) -> &mut Self {
        let c = self.col(slot);
        Self::coef(&mut self.diffusion, c, false, own);
        Self::coef(&mut self.diffusion, c, true, primed);
        self
    }

    pub fn set_jump(&mut self, mark: usize, slot: Slot, own: f64, primed: f64) -> &mut Self {
        let c = self.col(slot);
        Self::coef(&mut self.jumps[mark], c, false, own);
        Self::coef(&mut self.jumps[mark], c, true, primed);
        self
    }

    pub fn set_driver(&mut self, slot: Slot, own: f64, primed: f64) -> &mut Self {
        let c = self.col(slot);
        Self::coef(&mut self.driver, c, false, own);
        Self::coef(&mut self.driver, c, true, primed);
        self
    }

    pub fn set_terminal(&mut self, own: f64, primed: f64) -> &mut Self {
        self.terminal_own[(0, 0)] = own;
        self.terminal_primed[(0, 0)] = primed;
        self
    }
}

/// `b = E'[−y'−2y]`, `σ = E'[−z'−2z]`, `h = E'[−k'−2k]`, `f = E'[x'+2x]`,
/// `Φ = E'[x'+2x]` with `terminal_own` as the coefficient on `x` in `Φ`.
pub fn example_3_1_with_terminal(marks: usize, terminal_own: f64) -> LinearMf {
    let mut c = LinearMf::zeros(Dims::scalar(marks));
    c.set_drift(Slot::Y, -2.0, -1.0)
        .set_diffusion(Slot::Z, -2.0, -1.0)
        .set_driver(Slot::X, 2.0, 1.0)
        .set_terminal(terminal_own, 1.0);
    for j in 0..marks {
        c.set_jump(j, Slot::K(j), -2.0, -1.0);
    }
    c.lipschitz = Lipschitz { l_a: Some(1.0), l_phi: Some(1.0), l_f: None, l_g: None };
    c
}

pub fn example_3_1(marks: usize) -> LinearMf {
    example_3_1_with_terminal(marks, 2.0)
}

/// `dx = E[y]dt + dB + ∫k dÑ`, `−dy = E[x]dt`, `y(T) = −E[x(T)]`.
pub fn example_3_2(marks: usize) -> LinearMf {
    let mut c = LinearMf::zeros(Dims::scalar(marks));
    c.set_drift(Slot::Y, 0.0, 1.0).set_driver(Slot::X, 0.0, 1.0).set_terminal(0.0, -1.0);
    c.diffusion.c0[0] = 1.0;
    for j in 0..marks {
        c.set_jump(j, Slot::K(j), 1.0, 0.0);
    }
    c.lipschitz = Lipschitz { l_a: Some(1.0), l_phi: Some(1.0), l_f: None, l_g: None };
    c
}

/// `Y(T) + X(T)` for the reduced ODE `Ẋ = Y, Ẏ = −X, X(0) = 1`
/// with free constant `c`: `X = cos t + c sin t`, `Y = −sin t + c cos t`.
pub fn example_3_2_reduced_gap(horizon: f64, c: f64) -> f64 {
    let (s, co) = horizon.sin_cos();
    (co + c * s) + (-s + c * co)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s1(x: f64, y: f64, z: f64, k: f64) -> State {
        State { x: vec![x], y: vec![y], z: vec![z], k: vec![k], v: vec![], aux: vec![] }
    }

    #[test]
    fn zero_field() {
        let c: Arc<dyn Coefficients> = Arc::new(LinearMf::zeros(Dims::scalar(1)));
        let a = assemble_a(c, DMatrix::identity(1, 1)).unwrap();
        let mut out = vec![1.0; 4];
        a.eval(0.3, &s1(1.0, 2.0, 3.0, 4.0).args(), &s1(-1.0, 0.5, 2.0, 1.0).args(), &mut out);
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn example_3_1_field() {
        let c: Arc<dyn Coefficients> = Arc::new(example_3_1(1));
        let a = assemble_a(c, DMatrix::identity(1, 1)).unwrap();
        let own = s1(0.7, -1.3, 2.0, 0.4);
        let other = s1(-0.2, 0.9, 1.1, -3.0);
        let mut out = vec![0.0; 4];
        a.eval(0.1, &own.args(), &other.args(), &mut out);
        assert_eq!(out[0], -(-0.2 + 2.0 * 0.7));
        assert_eq!(out[1], -(0.9 + 2.0 * -1.3));
        assert_eq!(out[2], -(1.1 + 2.0 * 2.0));
        assert_eq!(out[3], -(-3.0 + 2.0 * 0.4));
    }

    #[test]
    fn rank_deficient_g() {
        let c: Arc<dyn Coefficients> = Arc::new(example_3_1(1));
        assert!(matches!(
            assemble_a(c.clone(), DMatrix::zeros(1, 1)),
            Err(Error::RankDeficientG { rank: 0, expected: 1 })
        ));
        assert!(matches!(assemble_a(c, DMatrix::zeros(2, 1)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn lipschitz_probes() {
        let marks = MarkSpace::single(1.0, 1.0).unwrap();
        let c: Arc<dyn Coefficients> = Arc::new(example_3_1(1));
        let est = probe_lipschitz(c, None, &marks, 400, 1, ProbeBox::default()).unwrap();
        assert!((est.l_a_hat - 1.0).abs() < 1e-12, "{est:?}");
        assert!((est.l_phi_hat - 1.0).abs() < 1e-12);

        let mut lin = LinearMf::zeros(Dims::scalar(1));
        lin.set_drift(Slot::X, 0.0, -2.0);
        let est = probe_lipschitz(Arc::new(lin), None, &marks, 400, 2, ProbeBox::default()).unwrap();
        assert!((est.l_a_hat - 2.0).abs() < 1e-12);
        assert_eq!(est.l_phi_hat, 0.0);

        let mut constant = LinearMf::zeros(Dims::scalar(1));
        constant.drift.c0[0] = 3.0;
        constant.terminal_c0[0] = -1.0;
        let est = probe_lipschitz(Arc::new(constant), None, &marks, 100, 3, ProbeBox::default()).unwrap();
        assert_eq!(est.l_a_hat, 0.0);
        assert_eq!(est.l_phi_hat, 0.0);
    }

    #[test]
    fn decoupling_flags() {
        assert!(!example_3_1(1).forward_decoupled());
        assert!(!example_3_2(1).forward_decoupled());
        let mut c = LinearMf::zeros(Dims::scalar(1));
        c.set_drift(Slot::X, 1.0, 1.0).set_driver(Slot::Y, 1.0, 0.0);
        assert!(c.forward_decoupled());
    }

    #[test]
    fn reduced_gap_is_constant() {
        let t = 0.75 * std::f64::consts::PI;
        for c in [-3.0, 0.0, 0.5, 10.0] {
            assert!((example_3_2_reduced_gap(t, c) + 2f64.sqrt()).abs() < 1e-12);
        }
    }
}
