//! Maximum-principle workbench for controlled mean-field FBSDEs with jumps:
//! cost evaluation, variational and adjoint equations, the Hamiltonian, the
//! first-order residual and the convexity checks of the sufficient condition.
//!
//! Derivatives of user callbacks are central differences with step
//! `1e-5·max(1, |argument|)`. The variational and adjoint systems are ordinary
//! [`Coefficients`] whose auxiliary data is the base trajectory
//! `θ = (x, y, z, k, u)`, so both are solved by the continuation solver.
//!
//! Convention: drift, diffusion, driver and running cost are already
//! integrated against the mark weights, so the Hamiltonian here is
//! `∫_E H λ(de) = ⟨q, b⟩ + ⟨m, σ⟩ + Σ_j λ_j ⟨n_j, h_j⟩ − ⟨p, f⟩ + g`, and the
//! adjoint jump coefficient of mark `j` is the `k_j`-gradient divided by `λ_j`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coefficients::{Args, Coefficients, Dims};
use crate::continuation::{solve_fbsde, FamilySign, FbsdeProblem, SolveReport, SolverContext};
use crate::control::{ControlBox, ControlPath};
use crate::error::{Error, Result};
use crate::particles::{mean_field_apply, AuxPaths, MeanFieldEstimator, ParticleEnsemble};

const FD_STEP: f64 = 1e-5;

/// Running cost `g`, terminal cost `φ` and initial cost `γ`.
pub trait CostFunctional: Send + Sync {
    /// `g(t, λ, λ', v)`, integrated against the mark weights.
    fn running(&self, _t: f64, _own: &Args, _other: &Args) -> f64 {
        0.0
    }
    /// `φ(x, x')`.
    fn terminal(&self, _x: &[f64], _x_other: &[f64]) -> f64 {
        0.0
    }
    /// `γ(y)`.
    fn initial(&self, _y: &[f64]) -> f64 {
        0.0
    }
    /// `g` and `φ` are affine in their primed arguments.
    fn primed_affine(&self) -> bool {
        false
    }
}

type RunningFn = dyn Fn(f64, &Args, &Args) -> f64 + Send + Sync;
type TerminalFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;
type InitialFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Cost assembled from closures; missing pieces are zero.
#[derive(Clone, Default)]
pub struct FnCost {
    running: Option<Arc<RunningFn>>,
    terminal: Option<Arc<TerminalFn>>,
    initial: Option<Arc<InitialFn>>,
    primed_affine: bool,
}

impl FnCost {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_running<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &Args, &Args) -> f64 + Send + Sync + 'static,
    {
        self.running = Some(Arc::new(f));
        self
    }

    pub fn with_terminal<F>(mut self, f: F) -> Self
    where
        F: Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        self.terminal = Some(Arc::new(f));
        self
    }

    pub fn with_initial<F>(mut self, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        self.initial = Some(Arc::new(f));
        self
    }

    pub fn primed_affine(mut self, yes: bool) -> Self {
        self.primed_affine = yes;
        self
    }
}

impl CostFunctional for FnCost {
    fn running(&self, t: f64, own: &Args, other: &Args) -> f64 {
        self.running.as_ref().map_or(0.0, |f| f(t, own, other))
    }

    fn terminal(&self, x: &[f64], x_other: &[f64]) -> f64 {
        self.terminal.as_ref().map_or(0.0, |f| f(x, x_other))
    }

    fn initial(&self, y: &[f64]) -> f64 {
        self.initial.as_ref().map_or(0.0, |f| f(y))
    }

    fn primed_affine(&self) -> bool {
        self.primed_affine
    }
}

/// A controlled system with its cost and the data of its continuation family.
#[derive(Clone)]
pub struct ControlProblem {
    pub coeffs: Arc<dyn Coefficients>,
    pub cost: Arc<dyn CostFunctional>,
    pub g: DMatrix<f64>,
    pub beta1: f64,
    pub sign: FamilySign,
    pub x0: Vec<f64>,
    pub admissible: ControlBox,
    pub estimator: MeanFieldEstimator,
}

impl ControlProblem {
    pub fn new(coeffs: Arc<dyn Coefficients>, cost: Arc<dyn CostFunctional>, x0: Vec<f64>) -> Self {
        let d = coeffs.dims();
        let g = DMatrix::from_fn(d.m, d.n, |r, c| if r == c { 1.0 } else { 0.0 });
        Self {
            coeffs,
            cost,
            g,
            beta1: 1.0,
            sign: FamilySign::Dissipative,
            x0,
            admissible: ControlBox::unbounded(d.k_ctrl),
            estimator: MeanFieldEstimator::Auto,
        }
    }

    pub fn with_family(mut self, g: DMatrix<f64>, beta1: f64, sign: FamilySign) -> Self {
        self.g = g;
        self.beta1 = beta1;
        self.sign = sign;
        self
    }

    pub fn with_admissible(mut self, admissible: ControlBox) -> Self {
        self.admissible = admissible;
        self
    }

    pub fn dims(&self) -> Dims {
        self.coeffs.dims()
    }

    /// The state equation driven by `control`, projected onto `U` when bounded.
    pub fn fbsde(&self, control: &ControlPath) -> FbsdeProblem {
        let mut control = control.clone();
        if self.admissible.lo.iter().chain(&self.admissible.hi).any(|v| v.is_finite()) {
            control = control.with_bounds(self.admissible.clone());
        }
        let mut p = FbsdeProblem::new(self.coeffs.clone(), self.g.clone(), self.beta1, self.x0.clone())
            .with_control(control)
            .with_sign(self.sign);
        p.estimator = self.estimator;
        p
    }

    fn estimator(&self) -> MeanFieldEstimator {
        match self.estimator {
            MeanFieldEstimator::Auto if self.coeffs.primed_affine() && self.cost.primed_affine() => {
                MeanFieldEstimator::AffineShortcut
            }
            MeanFieldEstimator::Auto => MeanFieldEstimator::FullPairwise,
            e => e,
        }
    }

    fn cost_estimator(&self) -> MeanFieldEstimator {
        match self.estimator {
            MeanFieldEstimator::Auto if self.cost.primed_affine() => MeanFieldEstimator::AffineShortcut,
            MeanFieldEstimator::Auto => MeanFieldEstimator::FullPairwise,
            e => e,
        }
    }
}

fn solved(report: SolveReport) -> Result<ParticleEnsemble> {
    match report.solution {
        Some(s) => Ok(s),
        None => Err(Error::NotSolved(format!(
            "{:?} at alpha {}: {}",
            report.status,
            report.alpha_reached,
            report.diagnostics.join("; ")
        ))),
    }
}

/// Solves the state equation under `control`.
pub fn solve_controlled_fbsde(
    problem: &ControlProblem,
    control: &ControlPath,
    ctx: &SolverContext,
) -> Result<ParticleEnsemble> {
    if control.dim() != problem.dims().k_ctrl {
        return Err(Error::ShapeMismatch("control dimension differs from dims.k_ctrl".into()));
    }
    solved(solve_fbsde(&problem.fbsde(control), ctx)?)
}

/// The realized control of `ens` as an open-loop path, so perturbations act on
/// the process `u(t)` rather than on a feedback law.
pub fn freeze_control(ens: &ParticleEnsemble) -> Result<ControlPath> {
    let kc = ens.dims().k_ctrl;
    ControlPath::open_loop(kc, ens.particles(), ens.steps(), ens.v.clone())
}

/// `J = Ê[Σ_i Δt Ê'g + Ê'φ(x_N, x_N') + γ(y_0)]`, split into its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub running: f64,
    pub terminal: f64,
    pub initial: f64,
    pub total: f64,
}

pub fn evaluate_cost(problem: &ControlProblem, ens: &ParticleEnsemble) -> Result<CostBreakdown> {
    if ens.dims() != problem.dims() {
        return Err(Error::ShapeMismatch("ensemble dims differ from the problem".into()));
    }
    let est = problem.cost_estimator();
    let pn = ens.particles();
    let nn = ens.steps();
    let dt = ens.grid().dt();
    let cost = problem.cost.as_ref();
    let mut buf = vec![0.0; pn];
    let mut running = 0.0;
    for i in 0..nn {
        let t = ens.grid().node(i);
        let view = ens.view(i, None);
        let mean = view.mean();
        mean_field_apply(est, &view, &mean, 1, &mut buf, |a, b, o| o[0] = cost.running(t, a, b));
        running += dt * buf.iter().sum::<f64>() / pn as f64;
    }
    let view = ens.view(nn, None);
    let mean = view.mean();
    mean_field_apply(est, &view, &mean, 1, &mut buf, |a, b, o| o[0] = cost.terminal(a.x, b.x));
    let terminal = buf.iter().sum::<f64>() / pn as f64;
    let initial = (0..pn).map(|p| cost.initial(ens.y(0, p))).sum::<f64>() / pn as f64;
    let total = running + terminal + initial;
    if !total.is_finite() {
        return Err(Error::NonFiniteState { node: 0, particle: 0 });
    }
    Ok(CostBreakdown { running, terminal, initial, total })
}

/// Offsets of `(x, y, z, k, v)` inside a flattened state.
#[derive(Debug, Clone, Copy)]
struct Layout {
    x: usize,
    y: usize,
    z: usize,
    k: usize,
    v: usize,
    len: usize,
}

impl Layout {
    fn of(d: &Dims) -> Self {
        let y = d.n;
        let z = y + d.m;
        let k = z + d.z_len();
        let v = k + d.k_len();
        Self { x: 0, y, z, k, v, len: v + d.k_ctrl }
    }
}

fn split<'a>(d: &Dims, s: &'a [f64]) -> Args<'a> {
    let (x, r) = s.split_at(d.n);
    let (y, r) = r.split_at(d.m);
    let (z, r) = r.split_at(d.z_len());
    let (k, v) = r.split_at(d.k_len());
    Args { x, y, z, k, v: &v[..d.k_ctrl], aux: &[] }
}

fn flatten_into(a: &Args, out: &mut Vec<f64>) {
    out.clear();
    for part in [a.x, a.y, a.z, a.k, a.v] {
        out.extend_from_slice(part);
    }
}

/// Base trajectory `θ = (x, y, z, k, u)` as auxiliary paths.
pub fn trajectory_aux(ens: &ParticleEnsemble) -> AuxPaths {
    let d = ens.dims();
    let lay = Layout::of(&d);
    let pn = ens.particles();
    let nn = ens.steps();
    let mut aux = AuxPaths::zeros(lay.len, pn, nn).with_regressors(d.n);
    for i in 0..=nn {
        for p in 0..pn {
            let o = (i * pn + p) * lay.len;
            let dst = &mut aux.data[o..o + lay.len];
            let mut c = 0;
            for part in [ens.x(i, p), ens.y(i, p), ens.z(i, p), ens.k(i, p), ens.v(i, p)] {
                dst[c..c + part.len()].copy_from_slice(part);
                c += part.len();
            }
        }
    }
    aux
}

fn fd_step(v: f64) -> f64 {
    FD_STEP * v.abs().max(1.0)
}

/// Central difference of `f(a, b)` in coordinate `idx` of `a` (or of `b`).
fn partial<F>(f: &F, a: &[f64], b: &[f64], in_b: bool, idx: usize, sa: &mut Vec<f64>, sb: &mut Vec<f64>) -> f64
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    sa.clear();
    sa.extend_from_slice(a);
    sb.clear();
    sb.extend_from_slice(b);
    let target = if in_b { &mut *sb } else { &mut *sa };
    let x0 = target[idx];
    let h = fd_step(x0);
    target[idx] = x0 + h;
    let up = f(sa, sb);
    let target = if in_b { &mut *sb } else { &mut *sa };
    target[idx] = x0 - h;
    let dn = f(sa, sb);
    (up - dn) / (2.0 * h)
}

/// Adjoint values `(p, q, m, n)`; `m` is `n×d`, `n` is `n×M`, both row-major.
#[derive(Debug, Clone, Copy)]
pub struct AdjointArgs<'a> {
    pub p: &'a [f64],
    pub q: &'a [f64],
    pub m: &'a [f64],
    pub n: &'a [f64],
}

impl<'a> AdjointArgs<'a> {
    fn from_args(a: &Args<'a>) -> Self {
        Self { p: a.x, q: a.y, m: a.z, n: a.k }
    }
}

/// The five pieces `[⟨q,b⟩, ⟨m,σ⟩, Σλ⟨n,h⟩, −⟨p,f⟩, g]` of the integrated Hamiltonian.
fn hamiltonian_parts(
    coeffs: &dyn Coefficients,
    cost: &dyn CostFunctional,
    weights: &[f64],
    t: f64,
    own: &Args,
    other: &Args,
    adj: &AdjointArgs,
) -> [f64; 5] {
    let d = coeffs.dims();
    let (n, m, dd, mk) = (d.n, d.m, d.d, d.marks);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let mut b = vec![0.0; n];
    coeffs.drift(t, own, other, &mut b);
    let mut s = vec![0.0; n * dd];
    coeffs.diffusion(t, own, other, &mut s);
    let mut hj = vec![0.0; n];
    let mut jumps = 0.0;
    for (j, w) in weights.iter().enumerate().take(mk) {
        coeffs.jump(t, j, own, other, &mut hj);
        jumps += w * (0..n).map(|i| adj.n[i * mk + j] * hj[i]).sum::<f64>();
    }
    let mut f = vec![0.0; m];
    coeffs.driver(t, own, other, &mut f);
    [dot(adj.q, &b), dot(adj.m, &s), jumps, -dot(adj.p, &f), cost.running(t, own, other)]
}

/// `∫_E H λ(de)` at `(t, λ, λ', v; p, q, m, n)`.
pub fn hamiltonian(
    coeffs: &dyn Coefficients,
    cost: &dyn CostFunctional,
    weights: &[f64],
    t: f64,
    own: &Args,
    other: &Args,
    adj: &AdjointArgs,
) -> f64 {
    hamiltonian_parts(coeffs, cost, weights, t, own, other, adj).iter().sum()
}

/// The linearized state equation along a base trajectory. Own and primed
/// arguments carry `(x¹, y¹, z¹, k¹, v)`; `aux` carries `θ`.
struct Variational {
    base: Arc<dyn Coefficients>,
    dims: Dims,
}

impl Variational {
    /// Directional central difference of `c` at `(θ, θ')` along `(own, other)`.
    fn directional<F>(&self, own: &Args, other: &Args, width: usize, out: &mut [f64], c: F)
    where
        F: Fn(&Args, &Args, &mut [f64]),
    {
        let d = self.dims;
        let mut da = Vec::new();
        let mut db = Vec::new();
        flatten_into(own, &mut da);
        flatten_into(other, &mut db);
        let scale = da.iter().chain(&db).fold(0.0f64, |a, v| a.max(v.abs()));
        if scale == 0.0 {
            out[..width].fill(0.0);
            return;
        }
        let th = own.aux.iter().chain(other.aux).fold(1.0f64, |a, v| a.max(v.abs()));
        let h = FD_STEP * th / scale;
        let shift =
            |base: &[f64], dir: &[f64], s: f64| -> Vec<f64> { base.iter().zip(dir).map(|(a, b)| a + s * b).collect() };
        let (ap, bp) = (shift(own.aux, &da, h), shift(other.aux, &db, h));
        let (am, bm) = (shift(own.aux, &da, -h), shift(other.aux, &db, -h));
        let mut up = vec![0.0; width];
        let mut dn = vec![0.0; width];
        c(&split(&d, &ap), &split(&d, &bp), &mut up);
        c(&split(&d, &am), &split(&d, &bm), &mut dn);
        for ((o, u), w) in out.iter_mut().zip(&up).zip(&dn) {
            *o = (u - w) / (2.0 * h);
        }
    }
}

impl Coefficients for Variational {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn drift(&self, t: f64, own: &Args, other: &Args, out: &mut [f64]) {
        self.directional(own, other, self.dims.n, out, |a, b, o| self.base.drift(t, a, b, o));
    }

    fn diffusion(&self, t: f64, own: &Args, other: &Args, out: &mut [f64]) {
        self.directional(own, other, self.dims.n * self.dims.d, out, |a, b, o| self.base.diffusion(t, a, b, o));
    }

    fn jump(&self, t: f64, mark: usize, own: &Args, other: &Args, out: &mut [f64]) {
        self.directional(own, other, self.dims.n, out, |a, b, o| self.base.jump(t, mark, a, b, o));
    }

    fn driver(&self, t: f64, own: &Args, other: &Args, out: &mut [f64]) {
        self.directional(own, other, self.dims.m, out, |a, b, o| self.base.driver(t, a, b, o));
    }

    fn terminal(&self, own: &Args, other: &Args, out: &mut [f64]) {
        let d = self.dims;
        let (ta, tb) = (split(&d, own.aux), split(&d, other.aux));
        let scale = own.x.iter().chain(other.x).fold(0.0f64, |a, v| a.max(v.abs()));
        if scale == 0.0 {
            out.fill(0.0);
            return;
        }
        let th = ta.x.iter().chain(tb.x).fold(1.0f64, |a, v| a.max(v.abs()));
        let h = FD_STEP * th / scale;
        let shift =
            |x: &[f64], dir: &[f64], s: f64| -> Vec<f64> { x.iter().zip(dir).map(|(a, b)| a + s * b).collect() };
        let eval = |s: f64, o: &mut [f64]| {
            let (xa, xb) = (shift(ta.x, own.x, s), shift(tb.x, other.x, s));
            let a = Args { x: &xa, ..ta };
            let b = Args { x: &xb, ..tb };
            self.base.terminal(&a, &b, o);
        };
        let mut up = vec![0.0; d.m];
        let mut dn = vec![0.0; d.m];
        eval(h, &mut up);
        eval(-h, &mut dn);
        for ((o, u), w) in out.iter_mut().zip(&up).zip(&dn) {
            *o = (u - w) / (2.0 * h);
        }
    }

    fn primed_affine(&self) -> bool {
        self.base.primed_affine()
    }

    fn forward_decoupled(&self) -> bool {
        self.base.forward_decoupled()
    }
}

fn along_base(control: &ControlPath, base: &ParticleEnsemble) -> Result<ControlPath> {
    let kc = control.dim();
    let pn = base.particles();
    let nn = base.steps();
    let mut vals = vec![0.0; (nn + 1) * pn * kc];
    for i in 0..=nn {
        let t = base.grid().node(i);
        for p in 0..pn {
            let o = (i * pn + p) * kc;
            control.eval(i, p, t, base.x(i, p), &mut vals[o..o + kc]);
        }
    }
    ControlPath::open_loop(kc, pn, nn, vals)
}

/// Solves the variational equation at `base` in the direction `direction`,
/// which is evaluated along the base trajectory. The returned ensemble holds
/// `(x¹, y¹, z¹, k¹)` and the direction in its control slot.
pub fn solve_variational_equation(
    problem: &ControlProblem,
    ctx: &SolverContext,
    base: &ParticleEnsemble,
    direction: &ControlPath,
) -> Result<ParticleEnsemble> {
    let d = problem.dims();
    if base.dims() != d || direction.dim() != d.k_ctrl {
        return Err(Error::ShapeMismatch("base ensemble or direction does not match the problem".into()));
    }
    let coeffs = Arc::new(Variational { base: problem.coeffs.clone(), dims: d });
    let mut fb = FbsdeProblem::new(coeffs, problem.g.clone(), problem.beta1, vec![0.0; d.n])
        .with_control(along_base(direction, base)?)
        .with_sign(problem.sign)
        .with_aux(trajectory_aux(base));
    fb.estimator = problem.estimator();
    solved(solve_fbsde(&fb, ctx)?)
}

/// The adjoint system as an FBSDE: forward `p` (dimension `m`), backward
/// `(q, m, n)` (dimension `n`). Own and primed arguments carry adjoint values;
/// `aux` carries `θ`.
struct Adjoint {
    base: Arc<dyn Coefficients>,
    cost: Arc<dyn CostFunctional>,
    weights: Vec<f64>,
    base_dims: Dims,
    dims: Dims,
}

impl Adjoint {
    /// `∂H(θ, θ')` in coordinate `idx` of the own slot plus the swapped term
    /// `∂H(θ', θ)` in coordinate `idx` of the primed slot, with the primed copy's
    /// adjoint values.
    fn gradient(&self, t: f64, own: &Args, other: &Args, idx: &[usize], out: &mut [f64]) {
        let d = self.base_dims;
        let (adj_own, adj_other) = (AdjointArgs::from_args(own), AdjointArgs::from_args(other));
        let h_own = |a: &[f64], b: &[f64]| {
            hamiltonian(
                self.base.as_ref(),
                self.cost.as_ref(),
                &self.weights,
                t,
                &split(&d, a),
                &split(&d, b),
                &adj_own,
            )
        };
        let h_swap = |a: &[f64], b: &[f64]| {
            hamiltonian(
                self.base.as_ref(),
                self.cost.as_ref(),
                &self.weights,
                t,
                &split(&d, a),
                &split(&d, b),
                &adj_other,
            )
        };
        let (mut sa, mut sb) = (Vec::new(), Vec::new());
        for (o, &c) in out.iter_mut().zip(idx) {
            *o = partial(&h_own, own.aux, other.aux, false, c, &mut sa, &mut sb)
                + partial(&h_swap, other.aux, own.aux, true, c, &mut sa, &mut sb);
        }
    }
}

impl Coefficients for Adjoint {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn drift(&self, t: f64, own: &Args, other: &Args, out: &mut [f64]) {
        let lay = Layout::of(&self.base_dims);
        let idx: Vec<usize> = (lay.y..lay.z).collect();
        self.gradient(t, own, other, &idx, out);
        out.iter_mut().for_each(|v| *v = -*v);
    }

    fn diffusion(&self, t: f64, own: &Args, other: &Args, out: &mut [f64]) {
        let lay = Layout::of(&self.base_dims);
        let idx: Vec<usize> = (lay.z..lay.k).collect();
        self.gradient(t, own, other, &idx, out);
        out.iter_mut().for_each(|v| *v = -*v);
    }

    fn jump(&self, t: f64, mark: usize, own: &Args, other: &Args, out: &mut [f64]) {
        let lay = Layout::of(&self.base_dims);
        let mk = self.base_dims.marks;
        let idx: Vec<usize> = (0..self.base_dims.m).map(|r| lay.k + r * mk + mark).collect();
        self.gradient(t, own, other, &idx, out);
        let w = self.weights[mark];
        out.iter_mut().for_each(|v| *v = -*v / w);
    }

    fn driver(&self, t: f64, own: &Args, other: &Args, out: &mut [f64]) {
        let lay = Layout::of(&self.base_dims);
        let idx: Vec<usize> = (lay.x..lay.y).collect();
        self.gradient(t, own, other, &idx, out);
    }

    fn terminal(&self, own: &Args, other: &Args, out: &mut [f64]) {
        let d = self.base_dims;
        let (ta, tb) = (split(&d, own.aux), split(&d, other.aux));
        let (p_own, p_other) = (own.x, other.x);
        let value = |x: &[f64], xo: &[f64], p: &[f64], ctx_own: &Args, ctx_other: &Args| {
            let mut phi = vec![0.0; d.m];
            self.base.terminal(&Args { x, ..*ctx_own }, &Args { x: xo, ..*ctx_other }, &mut phi);
            self.cost.terminal(x, xo) - p.iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>()
        };
        let t_own = |a: &[f64], b: &[f64]| value(a, b, p_own, &ta, &tb);
        let t_swap = |a: &[f64], b: &[f64]| value(a, b, p_other, &tb, &ta);
        let (mut sa, mut sb) = (Vec::new(), Vec::new());
        for (c, o) in out.iter_mut().enumerate().take(d.n) {
            *o = partial(&t_own, ta.x, tb.x, false, c, &mut sa, &mut sb)
                + partial(&t_swap, tb.x, ta.x, true, c, &mut sa, &mut sb);
        }
    }

    fn primed_affine(&self) -> bool {
        self.base.primed_affine() && self.cost.primed_affine()
    }

    fn forward_decoupled(&self) -> bool {
        self.base.forward_decoupled()
    }
}

/// Adjoint processes stored as an ensemble: `x ↦ p`, `y ↦ q`, `z ↦ m`, `k ↦ n`.
#[derive(Debug, Clone)]
pub struct AdjointEnsemble {
    pub ensemble: ParticleEnsemble,
}

impl AdjointEnsemble {
    pub fn p(&self, i: usize, particle: usize) -> &[f64] {
        self.ensemble.x(i, particle)
    }

    pub fn q(&self, i: usize, particle: usize) -> &[f64] {
        self.ensemble.y(i, particle)
    }

    pub fn m(&self, i: usize, particle: usize) -> &[f64] {
        self.ensemble.z(i, particle)
    }

    pub fn n(&self, i: usize, particle: usize) -> &[f64] {
        self.ensemble.k(i, particle)
    }

    pub fn mean_p(&self, i: usize) -> Vec<f64> {
        self.ensemble.mean_x(i)
    }

    pub fn mean_q(&self, i: usize) -> Vec<f64> {
        self.ensemble.mean_y(i)
    }
}

/// `−γ_y` at the ensemble mean of `y(0)`.
fn initial_adjoint(problem: &ControlProblem, base: &ParticleEnsemble) -> Vec<f64> {
    let y0 = base.mean_y(0);
    let f = |a: &[f64], _b: &[f64]| problem.cost.initial(a);
    let (mut sa, mut sb) = (Vec::new(), Vec::new());
    (0..y0.len()).map(|r| -partial(&f, &y0, &[], false, r, &mut sa, &mut sb)).collect()
}

/// Solves the adjoint equation along `base`. Its continuation family uses
/// `Gᵀ` and the opposite family sign of the state equation: the adjoint's
/// monotonicity form is the negative of the state's.
pub fn solve_adjoint(
    problem: &ControlProblem,
    ctx: &SolverContext,
    base: &ParticleEnsemble,
) -> Result<AdjointEnsemble> {
    let bd = problem.dims();
    if base.dims() != bd {
        return Err(Error::ShapeMismatch("base ensemble does not match the problem".into()));
    }
    let dims = Dims { n: bd.m, m: bd.n, d: bd.d, k_ctrl: 0, marks: bd.marks };
    let coeffs = Arc::new(Adjoint {
        base: problem.coeffs.clone(),
        cost: problem.cost.clone(),
        weights: ctx.marks.weights().to_vec(),
        base_dims: bd,
        dims,
    });
    let sign = match problem.sign {
        FamilySign::Dissipative => FamilySign::Reversed,
        FamilySign::Reversed => FamilySign::Dissipative,
    };
    let mut fb = FbsdeProblem::new(coeffs, problem.g.transpose(), problem.beta1, initial_adjoint(problem, base))
        .with_sign(sign)
        .with_aux(trajectory_aux(base));
    fb.estimator = problem.estimator();
    Ok(AdjointEnsemble { ensemble: solved(solve_fbsde(&fb, ctx)?)? })
}

/// `E'[H_v]` per particle at node `i`, plus the sum of absolute values of its
/// five pieces (the residual scale).
fn hv_node(
    problem: &ControlProblem,
    weights: &[f64],
    adjoint: &AdjointEnsemble,
    theta: &AuxPaths,
    i: usize,
) -> (Vec<f64>, Vec<f64>) {
    let d = problem.dims();
    let kc = d.k_ctrl;
    let lay = Layout::of(&d);
    let pn = adjoint.ensemble.particles();
    let t = adjoint.ensemble.grid().node(i);
    let view = adjoint.ensemble.view(i, Some(theta));
    let mean = view.mean();
    let mut out = vec![0.0; pn * 6 * kc];
    let coeffs = problem.coeffs.as_ref();
    let cost = problem.cost.as_ref();
    mean_field_apply(problem.estimator(), &view, &mean, 6 * kc, &mut out, |own, other, o| {
        let adj = AdjointArgs::from_args(own);
        let (mut sa, mut sb) = (Vec::new(), Vec::new());
        for c in 0..kc {
            for piece in 0..5 {
                let f = |a: &[f64], b: &[f64]| {
                    hamiltonian_parts(coeffs, cost, weights, t, &split(&d, a), &split(&d, b), &adj)[piece]
                };
                o[piece * kc + c] = partial(&f, own.aux, other.aux, false, lay.v + c, &mut sa, &mut sb);
            }
            o[5 * kc + c] = 0.0;
        }
    });
    let mut hv = vec![0.0; pn * kc];
    let mut mag = vec![0.0; pn * kc];
    for p in 0..pn {
        let o = &out[p * 6 * kc..(p + 1) * 6 * kc];
        for c in 0..kc {
            let pieces = (0..5).map(|q| o[q * kc + c]);
            hv[p * kc + c] = pieces.clone().sum();
            mag[p * kc + c] = pieces.map(f64::abs).sum();
        }
    }
    (hv, mag)
}

/// Options of [`smp_residual`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmpOptions {
    /// `c` in `tol = c·(Δt + P^{-1/2})·scale`.
    pub tol_factor: f64,
    pub random_probes: usize,
    pub seed: u64,
}

impl Default for SmpOptions {
    fn default() -> Self {
        Self { tol_factor: 5.0, random_probes: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeResidual {
    pub node: usize,
    pub t: f64,
    /// Smallest `Ê⟨E'H_v, v − u⟩ / Ê|v − u|` over the probes.
    pub min_residual: f64,
    pub worst_probe: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmpReport {
    pub tol: f64,
    pub scale: f64,
    pub min_residual: f64,
    pub pass: bool,
    pub failing_nodes: Vec<usize>,
    pub nodes: Vec<NodeResidual>,
}

/// Probe points relative to `u`: for each coordinate its lower and upper face
/// (a unit step where the box is unbounded), then random points.
fn probe_offsets(bx: &ControlBox, u: &[f64], probes: &[Vec<f64>], out: &mut Vec<Vec<f64>>) {
    out.clear();
    let kc = u.len();
    for c in 0..kc {
        for side in [0, 1] {
            let mut v = vec![0.0; kc];
            let bound = if side == 0 { bx.lo[c] } else { bx.hi[c] };
            v[c] = if bound.is_finite() {
                bound - u[c]
            } else if side == 0 {
                -1.0
            } else {
                1.0
            };
            out.push(v);
        }
    }
    for r in probes {
        let v = (0..kc)
            .map(|c| {
                if bx.lo[c].is_finite() && bx.hi[c].is_finite() {
                    bx.lo[c] + r[c] * (bx.hi[c] - bx.lo[c]) - u[c]
                } else {
                    r[c]
                }
            })
            .collect();
        out.push(v);
    }
}

/// The first-order condition `∫_E Ê'⟨H_v, v − u⟩λ(de) ≥ 0` checked node by
/// node on the particle average, for every probe `v ∈ U`.
pub fn smp_residual(
    problem: &ControlProblem,
    ctx: &SolverContext,
    base: &ParticleEnsemble,
    adjoint: &AdjointEnsemble,
    options: &SmpOptions,
) -> Result<SmpReport> {
    let d = problem.dims();
    let kc = d.k_ctrl;
    let pn = base.particles();
    let nn = base.steps();
    if adjoint.ensemble.particles() != pn || adjoint.ensemble.steps() != nn {
        return Err(Error::ShapeMismatch("adjoint does not match the base ensemble".into()));
    }
    if problem.admissible.dim() != kc {
        return Err(Error::ShapeMismatch("admissible box dimension differs from dims.k_ctrl".into()));
    }
    let theta = trajectory_aux(base);
    let weights = ctx.marks.weights().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let bx = &problem.admissible;
    let mut scale_acc = 0.0;
    let mut raw = Vec::with_capacity(nn);
    let mut offs = Vec::new();
    for i in 0..nn {
        let (hv, mag) = hv_node(problem, &weights, adjoint, &theta, i);
        scale_acc += mag.iter().sum::<f64>() / pn as f64;
        let probes: Vec<Vec<f64>> = (0..options.random_probes)
            .map(|_| {
                (0..kc)
                    .map(|c| {
                        if bx.lo[c].is_finite() && bx.hi[c].is_finite() {
                            rng.random::<f64>()
                        } else {
                            rng.sample(StandardNormal)
                        }
                    })
                    .collect()
            })
            .collect();
        let nprobe = 2 * kc + probes.len();
        let mut num = vec![0.0; nprobe];
        let mut den = vec![0.0; nprobe];
        for p in 0..pn {
            let u = base.v(i, p);
            probe_offsets(bx, u, &probes, &mut offs);
            for (j, off) in offs.iter().enumerate() {
                num[j] += (0..kc).map(|c| hv[p * kc + c] * off[c]).sum::<f64>();
                den[j] += off.iter().map(|a| a * a).sum::<f64>().sqrt();
            }
        }
        let vals: Vec<f64> = num.iter().zip(&den).map(|(a, b)| if *b > 0.0 { a / b } else { 0.0 }).collect();
        raw.push(vals);
    }
    let scale = if nn > 0 { scale_acc / nn as f64 } else { 0.0 };
    let tol = options.tol_factor * (ctx.grid.dt() + 1.0 / (pn as f64).sqrt()) * scale;
    let mut nodes = Vec::with_capacity(nn);
    let mut failing = Vec::new();
    let mut overall = f64::INFINITY;
    for (i, vals) in raw.iter().enumerate() {
        let (worst, min) =
            vals.iter()
                .cloned()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (j, v)| if v < acc.1 { (j, v) } else { acc });
        let min = if vals.is_empty() { 0.0 } else { min };
        let pass = min >= -tol;
        if !pass {
            failing.push(i);
        }
        overall = overall.min(min);
        nodes.push(NodeResidual { node: i, t: ctx.grid.node(i), min_residual: min, worst_probe: worst, pass });
    }
    if !overall.is_finite() {
        overall = 0.0;
    }
    Ok(SmpReport { tol, scale, min_residual: overall, pass: failing.is_empty(), failing_nodes: failing, nodes })
}

/// Outcome of one condition of the sufficient maximum principle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub pass: bool,
    /// Largest violation found (secant mismatch or midpoint excess).
    pub worst: f64,
    /// The offending points, flattened, when the check fails.
    pub witness: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyReport {
    pub terminal_affine: ConditionCheck,
    pub terminal_cost_convex: ConditionCheck,
    pub initial_cost_convex: ConditionCheck,
    pub hamiltonian_convex: ConditionCheck,
}

impl SufficiencyReport {
    pub fn pass(&self) -> bool {
        self.terminal_affine.pass
            && self.terminal_cost_convex.pass
            && self.initial_cost_convex.pass
            && self.hamiltonian_convex.pass
    }
}

fn sample(rng: &mut ChaCha8Rng, len: usize, half_width: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-half_width..=half_width)).collect()
}

fn midpoint_check<F>(f: F, len: usize, samples: usize, half_width: f64, rng: &mut ChaCha8Rng) -> ConditionCheck
where
    F: Fn(&[f64]) -> f64,
{
    let mut out = ConditionCheck { pass: true, worst: 0.0, witness: None };
    for _ in 0..samples {
        let a = sample(rng, len, half_width);
        let b = sample(rng, len, half_width);
        let mid: Vec<f64> = a.iter().zip(&b).map(|(u, v)| 0.5 * (u + v)).collect();
        let (fa, fb, fm) = (f(&a), f(&b), f(&mid));
        let excess = fm - 0.5 * (fa + fb);
        let tol = 1e-9 * (1.0 + fa.abs() + fb.abs());
        if excess > out.worst {
            out.worst = excess;
        }
        if excess > tol && out.pass {
            out.pass = false;
            out.witness = Some((a, b));
        }
    }
    out
}

/// Sampling checks of the sufficient conditions: `Φ` affine in `(x, x')`,
/// `φ` and `γ` convex, `H` convex in `(λ, λ', v)`. Adjoint values and times
/// are drawn at random, so the Hamiltonian check is the strong form (for
/// every adjoint value).
pub fn check_sufficiency(
    problem: &ControlProblem,
    weights: &[f64],
    horizon: f64,
    samples: usize,
    seed: u64,
    half_width: f64,
) -> SufficiencyReport {
    let d = problem.dims();
    let lay = Layout::of(&d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coeffs = problem.coeffs.as_ref();
    let cost = problem.cost.as_ref();
    let zero_ctx = vec![0.0; lay.len];
    let ctx_args = split(&d, &zero_ctx);

    let mut affine = ConditionCheck { pass: true, worst: 0.0, witness: None };
    let phi = |s: &[f64]| {
        let mut o = vec![0.0; d.m];
        coeffs.terminal(&Args { x: &s[..d.n], ..ctx_args }, &Args { x: &s[d.n..], ..ctx_args }, &mut o);
        o
    };
    for _ in 0..samples {
        let a = sample(&mut rng, 2 * d.n, half_width);
        let b = sample(&mut rng, 2 * d.n, half_width);
        let s: f64 = rng.random();
        let c: Vec<f64> = a.iter().zip(&b).map(|(u, v)| s * u + (1.0 - s) * v).collect();
        let (pa, pb, pc) = (phi(&a), phi(&b), phi(&c));
        for r in 0..d.m {
            let mis = (pc[r] - s * pa[r] - (1.0 - s) * pb[r]).abs();
            let tol = 1e-9 * (1.0 + pa[r].abs() + pb[r].abs());
            affine.worst = affine.worst.max(mis);
            if mis > tol && affine.pass {
                affine.pass = false;
                affine.witness = Some((a.clone(), b.clone()));
            }
        }
    }

    let terminal_cost_convex =
        midpoint_check(|s: &[f64]| cost.terminal(&s[..d.n], &s[d.n..]), 2 * d.n, samples, half_width, &mut rng);
    let initial_cost_convex = midpoint_check(|s: &[f64]| cost.initial(s), d.m, samples, half_width, &mut rng);

    let mut ham = ConditionCheck { pass: true, worst: 0.0, witness: None };
    let adj_len = d.m + d.n + d.n * d.d + d.n * d.marks;
    for _ in 0..samples.div_ceil(4).max(1) {
        let t = rng.random_range(0.0..=horizon);
        let adj = sample(&mut rng, adj_len, half_width);
        let (p, r) = adj.split_at(d.m);
        let (q, r) = r.split_at(d.n);
        let (m, n) = r.split_at(d.n * d.d);
        let a = AdjointArgs { p, q, m, n };
        // point = (λ, λ' without v', v); the primed control is held at zero
        let len = 2 * lay.len;
        let h = |s: &[f64]| {
            let mut other = s[lay.len..].to_vec();
            other[lay.v..].fill(0.0);
            hamiltonian(coeffs, cost, weights, t, &split(&d, &s[..lay.len]), &split(&d, &other), &a)
        };
        let c = midpoint_check(h, len, 4, half_width, &mut rng);
        ham.worst = ham.worst.max(c.worst);
        if !c.pass && ham.pass {
            ham = ConditionCheck { pass: false, worst: ham.worst, witness: c.witness };
        }
    }

    SufficiencyReport { terminal_affine: affine, terminal_cost_convex, initial_cost_convex, hamiltonian_convex: ham }
}

/// Left-hand side of the variational inequality: the directional derivative
/// of `J` computed from the variational solution.
pub fn variational_cost_derivative(
    problem: &ControlProblem,
    base: &ParticleEnsemble,
    variational: &ParticleEnsemble,
) -> Result<f64> {
    let d = problem.dims();
    if base.dims() != d || variational.dims() != d || base.particles() != variational.particles() {
        return Err(Error::ShapeMismatch("variational ensemble does not match the base".into()));
    }
    let pn = base.particles();
    let nn = base.steps();
    let dt = base.grid().dt();
    let cost = problem.cost.as_ref();
    let theta = trajectory_aux(base);
    let est = problem.cost_estimator();
    let mut buf = vec![0.0; pn];
    let lin = Variational { base: problem.coeffs.clone(), dims: d };
    let mut total = 0.0;
    for i in 0..nn {
        let t = base.grid().node(i);
        let view = variational.view(i, Some(&theta));
        let mean = view.mean();
        mean_field_apply(est, &view, &mean, 1, &mut buf, |a, b, o| {
            lin.directional(a, b, 1, o, |x, y, out| out[0] = cost.running(t, x, y));
        });
        total += dt * buf.iter().sum::<f64>() / pn as f64;
    }
    let view = variational.view(nn, Some(&theta));
    let mean = view.mean();
    mean_field_apply(est, &view, &mean, 1, &mut buf, |a, b, o| {
        let (ta, tb) = (split(&d, a.aux), split(&d, b.aux));
        let scale = a.x.iter().chain(b.x).fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            o[0] = 0.0;
            return;
        }
        let h = FD_STEP * ta.x.iter().chain(tb.x).fold(1.0f64, |m, v| m.max(v.abs())) / scale;
        let f = |s: f64| {
            let xa: Vec<f64> = ta.x.iter().zip(a.x).map(|(u, v)| u + s * v).collect();
            let xb: Vec<f64> = tb.x.iter().zip(b.x).map(|(u, v)| u + s * v).collect();
            cost.terminal(&xa, &xb)
        };
        o[0] = (f(h) - f(-h)) / (2.0 * h);
    });
    total += buf.iter().sum::<f64>() / pn as f64;
    let y0 = base.mean_y(0);
    let y1 = variational.mean_y(0);
    let scale = y1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale > 0.0 {
        let h = FD_STEP * y0.iter().fold(1.0f64, |m, v| m.max(v.abs())) / scale;
        let f = |s: f64| {
            let y: Vec<f64> = y0.iter().zip(&y1).map(|(u, v)| u + s * v).collect();
            cost.initial(&y)
        };
        total += (f(h) - f(-h)) / (2.0 * h);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalRow {
    pub rho: f64,
    pub cost: f64,
    /// `(J(u + ρv) − J(u)) / ρ`.
    pub quotient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalReport {
    pub base_cost: f64,
    pub rows: Vec<DirectionalRow>,
    /// Variational-inequality left-hand side.
    pub variational: f64,
    /// Least-squares slope of `quotient − variational` against `ρ`.
    pub remainder_slope: f64,
}

/// Difference quotients of `J` along `u + ρv` under common random numbers,
/// next to the variational-inequality left-hand side. `u` is frozen along its
/// own trajectory first, so the perturbation acts on the control process.
pub fn directional_cost_check(
    problem: &ControlProblem,
    ctx: &SolverContext,
    u: &ControlPath,
    v: &ControlPath,
    rhos: &[f64],
) -> Result<DirectionalReport> {
    let base = solve_controlled_fbsde(problem, u, ctx)?;
    let frozen = freeze_control(&base)?;
    let base_cost = evaluate_cost(problem, &base)?.total;
    let var = solve_variational_equation(problem, ctx, &base, v)?;
    let variational = variational_cost_derivative(problem, &base, &var)?;
    let dir = along_base(v, &base)?;
    let mut rows = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        if rho == 0.0 {
            rows.push(DirectionalRow { rho, cost: base_cost, quotient: 0.0 });
            continue;
        }
        let ens = solve_controlled_fbsde(problem, &frozen.plus(rho, &dir), ctx)?;
        let cost = evaluate_cost(problem, &ens)?.total;
        rows.push(DirectionalRow { rho, cost, quotient: (cost - base_cost) / rho });
    }
    let pts: Vec<(f64, f64)> =
        rows.iter().filter(|r| r.rho != 0.0).map(|r| (r.rho, r.quotient - variational)).collect();
    let remainder_slope = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        if sxx > 0.0 {
            sxy / sxx
        } else {
            0.0
        }
    } else {
        0.0
    };
    Ok(DirectionalReport { base_cost, rows, variational, remainder_slope })
}

/// The discrete integration-by-parts identity behind the maximum principle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualityCheck {
    /// `Ê[⟨x¹_N, q_N⟩ + ⟨y¹_N, p_N⟩ − ⟨x¹_0, q_0⟩ − ⟨y¹_0, p_0⟩]`.
    pub boundary: f64,
    /// `Σ_i Δt Ê[⟨E'H_v, v⟩ − E'(Dg·θ¹)]`.
    pub integral: f64,
    pub gap: f64,
}

pub fn duality_check(
    problem: &ControlProblem,
    ctx: &SolverContext,
    base: &ParticleEnsemble,
    variational: &ParticleEnsemble,
    adjoint: &AdjointEnsemble,
) -> Result<DualityCheck> {
    let d = problem.dims();
    let pn = base.particles();
    let nn = base.steps();
    let dt = base.grid().dt();
    let adj = &adjoint.ensemble;
    if variational.particles() != pn || adj.particles() != pn || adj.steps() != nn || variational.steps() != nn {
        return Err(Error::ShapeMismatch("ensembles do not match".into()));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let pair = |i: usize| {
        (0..pn).map(|p| dot(variational.x(i, p), adj.y(i, p)) + dot(variational.y(i, p), adj.x(i, p))).sum::<f64>()
            / pn as f64
    };
    let boundary = pair(nn) - pair(0);
    let theta = trajectory_aux(base);
    let weights = ctx.marks.weights().to_vec();
    let cost = problem.cost.as_ref();
    let est = problem.cost_estimator();
    let lin = Variational { base: problem.coeffs.clone(), dims: d };
    let kc = d.k_ctrl;
    let mut buf = vec![0.0; pn];
    let mut integral = 0.0;
    for i in 0..nn {
        let t = base.grid().node(i);
        let (hv, _) = hv_node(problem, &weights, adjoint, &theta, i);
        let control_term: f64 =
            (0..pn).map(|p| dot(&hv[p * kc..(p + 1) * kc], variational.v(i, p))).sum::<f64>() / pn as f64;
        let view = variational.view(i, Some(&theta));
        let mean = view.mean();
        mean_field_apply(est, &view, &mean, 1, &mut buf, |a, b, o| {
            lin.directional(a, b, 1, o, |x, y, out| out[0] = cost.running(t, x, y));
        });
        let g_term = buf.iter().sum::<f64>() / pn as f64;
        integral += dt * (control_term - g_term);
    }
    Ok(DualityCheck { boundary, integral, gap: boundary - integral })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{LinearMf, Slot};
    use crate::grid::{MarkSpace, NoisePanel, TimeGrid};

    fn lq_like(dims: Dims) -> LinearMf {
        // dx = (−0.5x + 0.2E[x])dt + (0.2x + v)dB + 0.5v dÑ; −dy = (x + 0.5y + 0.3v)dt
        let mut c = LinearMf::zeros(dims);
        c.set_drift(Slot::X, -0.5, 0.2)
            .set_diffusion(Slot::X, 0.2, 0.0)
            .set_diffusion(Slot::V, 1.0, 0.0)
            .set_jump(0, Slot::V, 0.5, 0.0)
            .set_driver(Slot::X, 1.0, 0.0)
            .set_driver(Slot::Y, 0.5, 0.0)
            .set_driver(Slot::V, 0.3, 0.0)
            .set_terminal(1.0, 0.0);
        c
    }

    fn setup(p: usize, n: usize) -> (TimeGrid, MarkSpace, NoisePanel) {
        let g = TimeGrid::new(1.0, n).unwrap();
        let marks = MarkSpace::single(1.0, 1.0).unwrap();
        let noise = NoisePanel::generate(&g, &marks, p, 1, 11).unwrap();
        (g, marks, noise)
    }

    fn quad_cost() -> FnCost {
        FnCost::new()
            .with_running(|_t, a, _b| 0.5 * a.x[0] * a.x[0])
            .with_terminal(|x, _| 0.5 * x[0] * x[0])
            .with_initial(|y| 0.5 * y[0] * y[0])
            .primed_affine(true)
    }

    #[test]
    fn hamiltonian_arithmetic() {
        let dims = Dims::scalar(1).with_control(1);
        let mut c = LinearMf::zeros(dims);
        c.set_drift(Slot::V, 1.0, 0.0);
        let cost = FnCost::new();
        let s = vec![0.0, 0.0, 0.0, 0.0, 3.0];
        let a = split(&dims, &s);
        let adj = AdjointArgs { p: &[0.0], q: &[2.0], m: &[0.0], n: &[0.0] };
        assert_eq!(hamiltonian(&c, &cost, &[1.0], 0.0, &a, &a, &adj), 6.0);
        let g = FnCost::new().with_running(|_t, a, _| a.v[0] * 7.0);
        let zero = LinearMf::zeros(dims);
        assert_eq!(hamiltonian(&zero, &g, &[1.0], 0.0, &a, &a, &adj), 21.0);
    }

    #[test]
    fn zero_direction_gives_zero_variation() {
        let dims = Dims::scalar(1).with_control(1);
        let (g, marks, noise) = setup(200, 20);
        let prob = ControlProblem::new(Arc::new(lq_like(dims)), Arc::new(quad_cost()), vec![1.0]);
        let ctx = SolverContext::new(g, &marks, &noise);
        let base = solve_controlled_fbsde(&prob, &ControlPath::constant(vec![0.3]), &ctx).unwrap();
        let var = solve_variational_equation(&prob, &ctx, &base, &ControlPath::zero(1)).unwrap();
        assert!(var.x.iter().chain(&var.y).chain(&var.z).chain(&var.k).all(|v| *v == 0.0));
    }

    #[test]
    fn variation_of_linear_problem_is_exact_difference() {
        let dims = Dims::scalar(1).with_control(1);
        let (g, marks, noise) = setup(300, 20);
        let prob = ControlProblem::new(Arc::new(lq_like(dims)), Arc::new(quad_cost()), vec![1.0]);
        let ctx = SolverContext::new(g, &marks, &noise);
        let u = ControlPath::feedback(1, |_t, x, o| o[0] = -0.4 * x[0]);
        let base = solve_controlled_fbsde(&prob, &u, &ctx).unwrap();
        let frozen = freeze_control(&base).unwrap();
        let v = ControlPath::deterministic(1, |t, o| o[0] = 1.0 - t);
        let var = solve_variational_equation(&prob, &ctx, &base, &v).unwrap();
        let rho = 0.5;
        let pert = solve_controlled_fbsde(&prob, &frozen.plus(rho, &v), &ctx).unwrap();
        for idx in [0, 7, 3000, base.x.len() - 1] {
            let q = (pert.x[idx] - base.x[idx]) / rho;
            assert!((q - var.x[idx]).abs() < 1e-6, "x at {idx}: {q} vs {}", var.x[idx]);
        }
        // particle values of y are projections on different bases; node means are not
        for i in [0, 8, 19] {
            let q = (pert.mean_y(i)[0] - base.mean_y(i)[0]) / rho;
            assert!((q - var.mean_y(i)[0]).abs() < 1e-5, "y at node {i}: {q} vs {}", var.mean_y(i)[0]);
        }
    }

    #[test]
    fn zero_costs_give_zero_adjoint() {
        let dims = Dims::scalar(1).with_control(1);
        let (g, marks, noise) = setup(100, 10);
        let mut c = lq_like(dims);
        c.set_terminal(0.0, 0.0);
        let prob = ControlProblem::new(Arc::new(c), Arc::new(FnCost::new().primed_affine(true)), vec![1.0]);
        let ctx = SolverContext::new(g, &marks, &noise);
        let base = solve_controlled_fbsde(&prob, &ControlPath::constant(vec![0.1]), &ctx).unwrap();
        let adj = solve_adjoint(&prob, &ctx, &base).unwrap();
        let e = &adj.ensemble;
        assert!(e.x.iter().chain(&e.y).chain(&e.z).chain(&e.k).all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn duality_identity_holds() {
        let dims = Dims::scalar(1).with_control(1);
        let (g, marks, noise) = setup(2000, 40);
        let cost = FnCost::new()
            .with_terminal(|x, _| 0.5 * x[0] * x[0])
            .with_initial(|y| 0.5 * y[0] * y[0])
            .primed_affine(true);
        let prob = ControlProblem::new(Arc::new(lq_like(dims)), Arc::new(cost), vec![1.0]);
        let ctx = SolverContext::new(g, &marks, &noise);
        let u = ControlPath::constant(vec![0.2]);
        let base = solve_controlled_fbsde(&prob, &u, &ctx).unwrap();
        let v = ControlPath::deterministic(1, |t, o| o[0] = t);
        let var = solve_variational_equation(&prob, &ctx, &base, &v).unwrap();
        let adj = solve_adjoint(&prob, &ctx, &base).unwrap();
        let dual = duality_check(&prob, &ctx, &base, &var, &adj).unwrap();
        let vi = variational_cost_derivative(&prob, &base, &var).unwrap();
        let scale = dual.boundary.abs().max(dual.integral.abs());
        let tol = 2.0 * (ctx.grid.dt() + 1.0 / 2000f64.sqrt()) * scale;
        assert!(dual.gap.abs() < tol, "{dual:?}");
        // without running cost the boundary term is the directional derivative
        assert!((vi - dual.boundary).abs() < 1e-6 * (1.0 + vi.abs()), "{vi} vs {dual:?}");
    }

    #[test]
    fn sufficiency_witnesses() {
        let dims = Dims::scalar(1).with_control(1);
        let prob = ControlProblem::new(Arc::new(lq_like(dims)), Arc::new(quad_cost()), vec![1.0]);
        let rep = check_sufficiency(&prob, &[1.0], 1.0, 200, 3, 5.0);
        assert!(rep.pass(), "{rep:?}");
        let concave = FnCost::new().with_initial(|y| -y[0] * y[0]);
        let bad = ControlProblem::new(Arc::new(lq_like(dims)), Arc::new(concave), vec![1.0]);
        let rep = check_sufficiency(&bad, &[1.0], 1.0, 200, 3, 5.0);
        assert!(!rep.initial_cost_convex.pass && rep.initial_cost_convex.witness.is_some());
        let scaled = FnCost::new().with_initial(|y| 3.0 * 0.5 * y[0] * y[0]);
        let ok = ControlProblem::new(Arc::new(lq_like(dims)), Arc::new(scaled), vec![1.0]);
        assert!(check_sufficiency(&ok, &[1.0], 1.0, 200, 3, 5.0).initial_cost_convex.pass);
    }

    #[test]
    fn zero_problem_has_zero_residual() {
        let dims = Dims::scalar(1).with_control(1);
        let (g, marks, noise) = setup(100, 10);
        let prob = ControlProblem::new(
            Arc::new(LinearMf::zeros(dims)),
            Arc::new(FnCost::new().primed_affine(true)),
            vec![0.0],
        );
        let ctx = SolverContext::new(g, &marks, &noise);
        let base = solve_controlled_fbsde(&prob, &ControlPath::zero(1), &ctx).unwrap();
        let adj = solve_adjoint(&prob, &ctx, &base).unwrap();
        let rep = smp_residual(&prob, &ctx, &base, &adj, &SmpOptions::default()).unwrap();
        assert!(rep.pass);
        assert!(rep.nodes.iter().all(|n| n.min_residual == 0.0));
    }
}
