//! Continuation in `α` for fully coupled mean-field FBSDEs with jumps.
//!
//! The family interpolates between a decoupled problem at `α = 0` and the
//! target at `α = 1`. With sign `s = +1` for the dissipative case and `s = −1`
//! for the reversed one, the member at `α` has forward coefficients `α·(b, σ, h)`,
//! driver `s(1−α)β1·G·x + α·f` and terminal `α·Φ + s(1−α)·G·x(T)`, each plus
//! the optional perturbations.
//!
//! Knowing how to solve at `α0`, the member at `α0 + δ` is the fixed point of a
//! map `I`. `I(λ)` solves the `α0` member with extra `δ`-weighted terms frozen at
//! `λ`. Each evaluation of `I` is itself a damped Picard loop coupling the
//! forward Euler step with the backward regression. All stages share one noise
//! panel.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bsde::{solve_mf_bsde, BackwardDriver, BsdeDiagnostics, CoefficientDriver, RegressionConfig};
use crate::coefficients::{Args, Coefficients};
use crate::control::ControlPath;
use crate::error::{Error, Result};
use crate::grid::{MarkSpace, NoisePanel, TimeGrid};
use crate::particles::{
    backward_distance, ensemble_norm, forward_given_backward, mean_field_apply, AuxPaths, ForwardBase, ForwardSpec,
    MeanFieldEstimator, NodeView, ParticleEnsemble, Perturbations,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinuationConfig {
    pub delta_init: f64,
    pub delta_min: f64,
    /// Root-norm tolerance for the last stage.
    pub picard_tol: f64,
    /// Root-norm tolerance for intermediate stages; their accuracy only
    /// affects the warm start of the next stage.
    pub stage_tol: f64,
    pub picard_max: usize,
    /// Successive-difference ratio above which an iteration counts as non-contracting.
    pub contraction_guard: f64,
    /// Inner loop stops at `inner_factor ×` the previous outer residual (or the stage tolerance).
    pub inner_factor: f64,
    pub inner_max: usize,
    pub inner_damping: f64,
    pub max_stages: usize,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self {
            delta_init: 0.25,
            delta_min: 1.0 / 64.0,
            picard_tol: 1e-8,
            stage_tol: 1e-6,
            picard_max: 40,
            contraction_guard: 0.9,
            inner_factor: 0.05,
            inner_max: 60,
            inner_damping: 0.5,
            max_stages: 200,
        }
    }
}

impl ContinuationConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.delta_init > 0.0
            && self.delta_init <= 1.0
            && self.delta_min > 0.0
            && self.delta_min <= self.delta_init
            && self.picard_tol > 0.0
            && self.stage_tol > 0.0
            && self.picard_max >= 2
            && self.contraction_guard > 0.0
            && self.contraction_guard < 1.0
            && self.inner_factor > 0.0
            && self.inner_max >= 1
            && self.inner_damping > 0.0
            && self.inner_damping <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid continuation config: {self:?}")))
        }
    }
}

/// Which monotonicity orientation the family follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilySign {
    /// `⟨ΔA, Δλ⟩ ≤ −β|Δ|²` and `⟨ΔΦ, GΔx⟩ ≥ μ1|Δx|²`.
    #[default]
    Dissipative,
    /// The reversed inequalities.
    Reversed,
}

impl FamilySign {
    pub fn value(self) -> f64 {
        match self {
            FamilySign::Dissipative => 1.0,
            FamilySign::Reversed => -1.0,
        }
    }
}

/// A fully coupled problem together with the data of its continuation family.
#[derive(Clone)]
pub struct FbsdeProblem {
    pub coeffs: Arc<dyn Coefficients>,
    /// `m × n`, full rank.
    pub g: DMatrix<f64>,
    pub beta1: f64,
    pub sign: FamilySign,
    pub x0: Vec<f64>,
    pub control: ControlPath,
    pub aux: Option<AuxPaths>,
    pub estimator: MeanFieldEstimator,
    pub perturbations: Perturbations,
}

impl FbsdeProblem {
    pub fn new(coeffs: Arc<dyn Coefficients>, g: DMatrix<f64>, beta1: f64, x0: Vec<f64>) -> Self {
        let kc = coeffs.dims().k_ctrl;
        Self {
            coeffs,
            g,
            beta1,
            sign: FamilySign::Dissipative,
            x0,
            control: ControlPath::zero(kc),
            aux: None,
            estimator: MeanFieldEstimator::Auto,
            perturbations: Perturbations::default(),
        }
    }

    /// Scalar problems with `G = 1`.
    pub fn scalar(coeffs: Arc<dyn Coefficients>, beta1: f64, x0: f64) -> Self {
        Self::new(coeffs, DMatrix::identity(1, 1), beta1, vec![x0])
    }

    pub fn with_control(mut self, control: ControlPath) -> Self {
        self.control = control;
        self
    }

    pub fn with_sign(mut self, sign: FamilySign) -> Self {
        self.sign = sign;
        self
    }

    pub fn with_aux(mut self, aux: AuxPaths) -> Self {
        self.aux = Some(aux);
        self
    }

    fn check(&self) -> Result<()> {
        let d = self.coeffs.dims();
        if self.g.shape() != (d.m, d.n) {
            return Err(Error::ShapeMismatch(format!("G must be {}x{}", d.m, d.n)));
        }
        if self.x0.len() != d.n {
            return Err(Error::ShapeMismatch("x0 length differs from n".into()));
        }
        Ok(())
    }
}

/// Shared numerical setting of a solve.
#[derive(Clone, Copy)]
pub struct SolverContext<'a> {
    pub grid: TimeGrid,
    pub marks: &'a MarkSpace,
    pub noise: &'a NoisePanel,
    pub particles: usize,
    pub regression: RegressionConfig,
    pub config: ContinuationConfig,
}

impl<'a> SolverContext<'a> {
    pub fn new(grid: TimeGrid, marks: &'a MarkSpace, noise: &'a NoisePanel) -> Self {
        Self {
            grid,
            marks,
            noise,
            particles: noise.particles(),
            regression: RegressionConfig::default(),
            config: ContinuationConfig::default(),
        }
    }

    pub fn zeros(&self, problem: &FbsdeProblem) -> ParticleEnsemble {
        ParticleEnsemble::zeros(problem.coeffs.dims(), self.particles, self.grid, self.marks)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InnerStats {
    pub sweeps: usize,
    pub residual: f64,
    pub damping: f64,
}

/// `s(1−α0)β1·G·X + α0·E'f(Λ) + δ·pre + γ`.
struct FamilyDriver<'a> {
    coeffs: &'a dyn Coefficients,
    est: MeanFieldEstimator,
    alpha0: f64,
    s_beta1: f64,
    g: &'a DMatrix<f64>,
    /// `δ(−sβ1·G·x + E'f(λ))`, node-major `(N+1)·P·m`, empty when zero.
    pre: &'a [f64],
    gamma: &'a [f64],
}

impl BackwardDriver for FamilyDriver<'_> {
    fn eval_node(&self, i: usize, t: f64, view: &NodeView, out: &mut [f64]) {
        let d = view.dims;
        let (n, m, pn) = (d.n, d.m, view.particles);
        if self.alpha0 != 0.0 {
            let mean = view.mean();
            mean_field_apply(self.est, view, &mean, m, out, |a, b, o| self.coeffs.driver(t, a, b, o));
            out.iter_mut().for_each(|o| *o *= self.alpha0);
        } else {
            out.fill(0.0);
        }
        let w = (1.0 - self.alpha0) * self.s_beta1;
        for p in 0..pn {
            for r in 0..m {
                let mut acc = out[p * m + r];
                if w != 0.0 {
                    acc += w * (0..n).map(|c| self.g[(r, c)] * view.x[p * n + c]).sum::<f64>();
                }
                if !self.pre.is_empty() {
                    acc += self.pre[(i * pn + p) * m + r];
                }
                if !self.gamma.is_empty() {
                    acc += self.gamma[i * m + r];
                }
                out[p * m + r] = acc;
            }
        }
    }
}

fn eval_terminal(coeffs: &dyn Coefficients, est: MeanFieldEstimator, view: &NodeView, out: &mut [f64]) {
    let mean = view.mean();
    mean_field_apply(est, view, &mean, view.dims.m, out, |a, b, o| coeffs.terminal(a, b, o));
}

fn g_times(g: &DMatrix<f64>, x: &[f64], r: usize) -> f64 {
    (0..x.len()).map(|c| g[(r, c)] * x[c]).sum()
}

/// Control evaluated along the input's `x` at every node.
fn input_controls(problem: &FbsdeProblem, input: &ParticleEnsemble) -> Vec<f64> {
    let kc = problem.coeffs.dims().k_ctrl;
    let pn = input.particles();
    let mut v = vec![0.0; (input.steps() + 1) * pn * kc];
    if kc == 0 {
        return v;
    }
    for i in 0..=input.steps() {
        let t = input.grid().node(i);
        for p in 0..pn {
            let o = (i * pn + p) * kc;
            problem.control.eval(i, p, t, input.x(i, p), &mut v[o..o + kc]);
        }
    }
    v
}

fn input_view<'a>(input: &'a ParticleEnsemble, vin: &'a [f64], aux: Option<&'a AuxPaths>, i: usize) -> NodeView<'a> {
    let kc = input.dims().k_ctrl;
    let pn = input.particles();
    let mut view = input.view(i, aux);
    view.v = &vin[i * pn * kc..(i + 1) * pn * kc];
    view
}

/// One evaluation of `I_{α0+δ}` at `input`. The inner loop starts from
/// `warm` (or `input`) and stops at the root-norm tolerance `inner_tol`.
#[allow(clippy::too_many_arguments)]
pub fn inner_map_with(
    problem: &FbsdeProblem,
    ctx: &SolverContext,
    alpha0: f64,
    delta: f64,
    input: &ParticleEnsemble,
    warm: Option<&ParticleEnsemble>,
    inner_tol: f64,
) -> Result<(ParticleEnsemble, InnerStats, BsdeDiagnostics)> {
    problem.check()?;
    if !(alpha0 >= 0.0 && delta >= 0.0 && alpha0 + delta <= 1.0 + 1e-12) {
        return Err(Error::InvalidInput(format!(
            "need 0 <= alpha0, delta and alpha0 + delta <= 1 (got {alpha0}, {delta})"
        )));
    }
    let coeffs = problem.coeffs.as_ref();
    let d = coeffs.dims();
    let (n, m) = (d.n, d.m);
    let pn = ctx.particles;
    let nn = ctx.grid.steps();
    let est = problem.estimator.resolve(coeffs);
    let s = problem.sign.value();
    let aux = problem.aux.as_ref();
    let pert = &problem.perturbations;
    let mut out = warm.unwrap_or(input).clone();
    out.same_shape(input)?;

    // δ-weighted input terms are fixed across the inner loop
    let vin = input_controls(problem, input);
    let mut pre = Vec::new();
    let mut term_pre = vec![0.0; pn * m];
    if delta != 0.0 {
        pre = vec![0.0; (nn + 1) * pn * m];
        let mut buf = vec![0.0; pn * m];
        for i in 0..nn {
            let t = ctx.grid.node(i);
            let view = input_view(input, &vin, aux, i);
            let mean = view.mean();
            mean_field_apply(est, &view, &mean, m, &mut buf, |a, b, o| coeffs.driver(t, a, b, o));
            for p in 0..pn {
                let x = input.x(i, p);
                for r in 0..m {
                    pre[(i * pn + p) * m + r] =
                        delta * (buf[p * m + r] - s * problem.beta1 * g_times(&problem.g, x, r));
                }
            }
        }
        let view = input_view(input, &vin, aux, nn);
        eval_terminal(coeffs, est, &view, &mut buf);
        for p in 0..pn {
            let x = input.x(nn, p);
            for r in 0..m {
                term_pre[p * m + r] = delta * (buf[p * m + r] - s * g_times(&problem.g, x, r));
            }
        }
    }
    let xi_pert = &pert.terminal;

    // forward independent of (y, z, k): one sweep is exact
    let single = alpha0 == 0.0 || coeffs.forward_decoupled();
    let mut omega = ctx.config.inner_damping;
    if single {
        omega = 1.0;
    }
    let mut frozen = out.clone();
    let mut prev_res = f64::INFINITY;
    let mut high = 0;
    let mut stats = InnerStats::default();
    let mut diag;
    let mut term = vec![0.0; pn * m];
    let base = if single {
        None
    } else {
        let spec = ForwardSpec {
            coeffs,
            estimator: est,
            alpha0,
            delta,
            frozen: None,
            input: Some(input),
            perturbations: Some(pert),
            control: &problem.control,
            aux,
            x0: &problem.x0,
            base: None,
        };
        Some(ForwardBase::new(&spec, pn, &ctx.grid)?)
    };
    loop {
        stats.sweeps += 1;
        {
            let spec = ForwardSpec {
                coeffs,
                estimator: est,
                alpha0,
                delta,
                frozen: Some(&frozen),
                input: Some(input),
                perturbations: Some(pert),
                control: &problem.control,
                aux,
                x0: &problem.x0,
                base: base.as_ref(),
            };
            forward_given_backward(&spec, ctx.noise, &mut out)?;
        }
        // terminal: α0·E'Φ(X_T) + s(1−α0)·G·X_T + δ-terms + ξ
        {
            if alpha0 != 0.0 {
                let view = out.view(nn, aux);
                eval_terminal(coeffs, est, &view, &mut term);
            } else {
                term.fill(0.0);
            }
            for p in 0..pn {
                let x = out.x(nn, p).to_vec();
                for r in 0..m {
                    let mut v = alpha0 * term[p * m + r]
                        + s * (1.0 - alpha0) * g_times(&problem.g, &x, r)
                        + term_pre[p * m + r];
                    if !xi_pert.is_empty() {
                        v += xi_pert[r];
                    }
                    term[p * m + r] = v;
                }
            }
        }
        let driver = FamilyDriver {
            coeffs,
            est,
            alpha0,
            s_beta1: s * problem.beta1,
            g: &problem.g,
            pre: &pre,
            gamma: &pert.driver,
        };
        diag = solve_mf_bsde(&driver, &term, &mut out, ctx.noise, &ctx.regression, aux)?;
        if single {
            stats.residual = 0.0;
            break;
        }
        let res = backward_distance(&out, &frozen)?.sqrt();
        stats.residual = res;
        if res <= inner_tol {
            break;
        }
        let ratio = res / prev_res;
        if ratio > 0.95 {
            high += 1;
        } else {
            high = 0;
        }
        if ratio > 1.0 {
            omega *= 0.5;
        }
        if high >= 5 || stats.sweeps >= ctx.config.inner_max || omega < 1.0 / 64.0 || !res.is_finite() {
            return Err(Error::NonContracting {
                alpha0,
                delta,
                reason: format!(
                    "inner coupling loop stalled after {} sweeps (residual {res:.3e}, damping {omega})",
                    stats.sweeps
                ),
            });
        }
        prev_res = res;
        frozen.blend_backward(&out, omega);
        let _ = n;
    }
    stats.damping = omega;
    Ok((out, stats, diag))
}

/// One evaluation of `I_{α0+δ}(input)` with a tight inner tolerance.
pub fn inner_map(
    problem: &FbsdeProblem,
    ctx: &SolverContext,
    alpha0: f64,
    delta: f64,
    input: &ParticleEnsemble,
) -> Result<ParticleEnsemble> {
    let tol = ctx.config.inner_factor * ctx.config.picard_tol;
    inner_map_with(problem, ctx, alpha0, delta, input, None, tol).map(|r| r.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRecord {
    pub alpha0: f64,
    pub delta: f64,
    pub iteration: usize,
    /// `‖Λ_new − Λ_old‖` (root of the ensemble norm).
    pub residual: f64,
    pub inner_sweeps: usize,
}

pub struct AlphaSolve {
    pub solution: ParticleEnsemble,
    pub iterations: usize,
    pub ratios: Vec<f64>,
    pub residuals: Vec<ResidualRecord>,
    pub diagnostics: BsdeDiagnostics,
}

/// Picard iteration of `I_{α0+δ}` from `warm` until the root-norm change is
/// at most `tol`.
pub fn solve_at_alpha(
    problem: &FbsdeProblem,
    ctx: &SolverContext,
    alpha0: f64,
    delta: f64,
    warm: &ParticleEnsemble,
    tol: f64,
) -> Result<AlphaSolve> {
    ctx.config.validate()?;
    let cfg = ctx.config;
    let mut lam = warm.clone();
    let mut ratios = Vec::new();
    let mut residuals = Vec::new();
    let mut prev: Option<f64> = None;
    let mut over = 0;
    for k in 1..=cfg.picard_max {
        let inner_tol = cfg.inner_factor * prev.unwrap_or(1.0).max(tol);
        let (new, stats, diag) = inner_map_with(problem, ctx, alpha0, delta, &lam, Some(&lam), inner_tol)?;
        let res = ensemble_norm(&new, &lam)?.sqrt();
        residuals.push(ResidualRecord { alpha0, delta, iteration: k, residual: res, inner_sweeps: stats.sweeps });
        lam = new;
        if delta == 0.0 || res <= tol {
            return Ok(AlphaSolve { solution: lam, iterations: k, ratios, residuals, diagnostics: diag });
        }
        if !res.is_finite() {
            break;
        }
        if let Some(p) = prev {
            let r = res / p;
            ratios.push(r);
            if r > cfg.contraction_guard {
                over += 1;
                if over >= 3 {
                    return Err(Error::NonContracting {
                        alpha0,
                        delta,
                        reason: format!(
                            "ratio above {} for 3 consecutive iterations (last {r:.3})",
                            cfg.contraction_guard
                        ),
                    });
                }
            } else {
                over = 0;
            }
        }
        prev = Some(res);
    }
    Err(Error::NonContracting { alpha0, delta, reason: format!("no convergence within {} iterations", cfg.picard_max) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Solved,
    Unsolvable,
    BudgetExceeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub alpha0: f64,
    pub delta: f64,
    pub accepted: bool,
    pub iterations: usize,
    pub max_ratio: Option<f64>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub alpha_reached: f64,
    pub residual_history: Vec<ResidualRecord>,
    pub stages: Vec<StageRecord>,
    pub diagnostics: Vec<String>,
    #[serde(skip)]
    pub solution: Option<ParticleEnsemble>,
    #[serde(skip)]
    pub bsde: Option<BsdeDiagnostics>,
}

impl SolveReport {
    pub fn solved(&self) -> bool {
        self.status == SolveStatus::Solved
    }
}

/// Homotopy from `α = 0` to `α = 1` with adaptive step.
pub fn solve_fbsde(problem: &FbsdeProblem, ctx: &SolverContext) -> Result<SolveReport> {
    ctx.config.validate()?;
    ctx.noise.check(&ctx.grid, ctx.marks, problem.coeffs.dims().d)?;
    if problem.coeffs.forward_decoupled() && problem.perturbations.is_zero() {
        return solve_decoupled(problem, ctx);
    }
    let cfg = ctx.config;
    let zero = ctx.zeros(problem);
    let mut report = SolveReport {
        status: SolveStatus::Unsolvable,
        alpha_reached: 0.0,
        residual_history: Vec::new(),
        stages: Vec::new(),
        diagnostics: Vec::new(),
        solution: None,
        bsde: None,
    };
    let start = solve_at_alpha(problem, ctx, 0.0, 0.0, &zero, cfg.stage_tol)?;
    drop(zero);
    report.residual_history.extend(start.residuals);
    let mut sol = start.solution;
    let mut bsde = start.diagnostics;
    let mut alpha = 0.0;
    let mut delta = cfg.delta_init;
    let mut stages = 0;
    while 1.0 - alpha > 1e-12 {
        if stages >= cfg.max_stages {
            report.status = SolveStatus::BudgetExceeded;
            report.diagnostics.push(format!("stage budget {} exhausted at alpha {alpha}", cfg.max_stages));
            report.alpha_reached = alpha;
            return Ok(report);
        }
        stages += 1;
        let d = delta.min(1.0 - alpha);
        let last = alpha + d >= 1.0 - 1e-12;
        let tol = if last { cfg.picard_tol } else { cfg.stage_tol.max(cfg.picard_tol) };
        match solve_at_alpha(problem, ctx, alpha, d, &sol, tol) {
            Ok(step) => {
                report.residual_history.extend(step.residuals);
                report.stages.push(StageRecord {
                    alpha0: alpha,
                    delta: d,
                    accepted: true,
                    iterations: step.iterations,
                    max_ratio: step.ratios.iter().cloned().reduce(f64::max),
                    message: None,
                });
                sol = step.solution;
                bsde = step.diagnostics;
                alpha = if last { 1.0 } else { alpha + d };
                delta = (2.0 * delta).min(cfg.delta_init);
            }
            Err(
                e @ (Error::NonContracting { .. } | Error::NonFiniteState { .. } | Error::SingularRegression { .. }),
            ) => {
                report.stages.push(StageRecord {
                    alpha0: alpha,
                    delta: d,
                    accepted: false,
                    iterations: 0,
                    max_ratio: None,
                    message: Some(e.to_string()),
                });
                delta = d / 2.0;
                if delta < cfg.delta_min {
                    report.status = SolveStatus::Unsolvable;
                    report.alpha_reached = alpha;
                    report.diagnostics.push(format!(
                        "continuation stalled at alpha {alpha:.6}: step fell below {} with persistent non-contraction",
                        cfg.delta_min
                    ));
                    return Ok(report);
                }
            }
            Err(e) => return Err(e),
        }
    }
    report.status = SolveStatus::Solved;
    report.alpha_reached = 1.0;
    report.solution = Some(sol);
    report.bsde = Some(bsde);
    Ok(report)
}

/// Forward coefficients that ignore `(y, z, k)`: one forward pass and one
/// backward induction solve the target problem directly, no homotopy needed.
pub fn solve_decoupled(problem: &FbsdeProblem, ctx: &SolverContext) -> Result<SolveReport> {
    problem.check()?;
    let coeffs = problem.coeffs.as_ref();
    let est = problem.estimator.resolve(coeffs);
    let aux = problem.aux.as_ref();
    let mut ens = ctx.zeros(problem);
    let spec = ForwardSpec {
        coeffs,
        estimator: est,
        alpha0: 1.0,
        delta: 0.0,
        frozen: None,
        input: None,
        perturbations: None,
        control: &problem.control,
        aux,
        x0: &problem.x0,
        base: None,
    };
    forward_given_backward(&spec, ctx.noise, &mut ens)?;
    let nn = ctx.grid.steps();
    let mut term = vec![0.0; ctx.particles * coeffs.dims().m];
    eval_terminal(coeffs, est, &ens.view(nn, aux), &mut term);
    let driver = CoefficientDriver { coeffs, estimator: est };
    let bsde = solve_mf_bsde(&driver, &term, &mut ens, ctx.noise, &ctx.regression, aux)?;
    Ok(SolveReport {
        status: SolveStatus::Solved,
        alpha_reached: 1.0,
        residual_history: Vec::new(),
        stages: vec![StageRecord {
            alpha0: 0.0,
            delta: 1.0,
            accepted: true,
            iterations: 1,
            max_ratio: None,
            message: Some("decoupled forward: direct solve".into()),
        }],
        diagnostics: Vec::new(),
        solution: Some(ens),
        bsde: Some(bsde),
    })
}

/// One row of a continuity sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub status: SolveStatus,
    /// Root ensemble norm distance to the solution at the base parameter.
    pub distance: Option<f64>,
    /// Root of `Ê[|Φ̂(T)|² + Σ_i Δt(|b̂|² + |σ̂|² + Σ_j λ_j|ĥ_j|² + |f̂|²)]` along the base solution.
    pub perturbation: Option<f64>,
}

/// Solves each member of a parameterized family with common noise and reports
/// distances to the member at `base_alpha`.
pub fn continuity_sweep<F>(family: F, base_alpha: f64, alphas: &[f64], ctx: &SolverContext) -> Result<Vec<SweepRow>>
where
    F: Fn(f64) -> FbsdeProblem,
{
    let base_problem = family(base_alpha);
    let base = solve_fbsde(&base_problem, ctx)?;
    let base_sol =
        base.solution.ok_or_else(|| Error::InvalidInput(format!("base member alpha = {base_alpha} was not solved")))?;
    let mut rows = Vec::new();
    for &a in alphas {
        let prob = family(a);
        let pert = coefficient_gap(&prob, &base_problem, &base_sol, ctx)?;
        let rep = solve_fbsde(&prob, ctx)?;
        let distance = match &rep.solution {
            Some(s) => Some(ensemble_norm(s, &base_sol)?.sqrt()),
            None => None,
        };
        rows.push(SweepRow { alpha: a, status: rep.status, distance, perturbation: Some(pert) });
    }
    Ok(rows)
}

fn coefficient_gap(a: &FbsdeProblem, b: &FbsdeProblem, sol: &ParticleEnsemble, ctx: &SolverContext) -> Result<f64> {
    let (ca, cb) = (a.coeffs.as_ref(), b.coeffs.as_ref());
    let d = ca.dims();
    if cb.dims() != d {
        return Err(Error::ShapeMismatch("family members differ in dimension".into()));
    }
    let pn = sol.particles();
    let nn = sol.steps();
    let dt = ctx.grid.dt();
    let est = MeanFieldEstimator::AffineShortcut;
    let w = sol.weights();
    let mut total = 0.0;
    let (n, m, nd) = (d.n, d.m, d.n * d.d);
    let mut oa = vec![0.0; pn * n.max(nd).max(m)];
    let mut ob = oa.clone();
    let mut sq = |fa: &dyn Fn(&Args, &Args, &mut [f64]),
                  fb: &dyn Fn(&Args, &Args, &mut [f64]),
                  view: &NodeView,
                  width: usize| {
        let mean = view.mean();
        let (ba, bb) = (&mut oa[..pn * width], &mut ob[..pn * width]);
        mean_field_apply(est, view, &mean, width, ba, fa);
        mean_field_apply(est, view, &mean, width, bb, fb);
        ba.iter().zip(bb.iter()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>()
    };
    for i in 0..nn {
        let t = ctx.grid.node(i);
        let view = sol.view(i, a.aux.as_ref());
        let mut node = sq(&|x, y, o| ca.drift(t, x, y, o), &|x, y, o| cb.drift(t, x, y, o), &view, n);
        if nd > 0 {
            node += sq(&|x, y, o| ca.diffusion(t, x, y, o), &|x, y, o| cb.diffusion(t, x, y, o), &view, nd);
        }
        for (j, wj) in w.iter().enumerate() {
            node += wj * sq(&|x, y, o| ca.jump(t, j, x, y, o), &|x, y, o| cb.jump(t, j, x, y, o), &view, n);
        }
        node += sq(&|x, y, o| ca.driver(t, x, y, o), &|x, y, o| cb.driver(t, x, y, o), &view, m);
        total += dt * node;
    }
    let view = sol.view(nn, a.aux.as_ref());
    total += sq(&|x, y, o| ca.terminal(x, y, o), &|x, y, o| cb.terminal(x, y, o), &view, m);
    Ok((total / pn as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub delta: f64,
    /// Largest `‖I(λ1) − I(λ2)‖ / ‖λ1 − λ2‖` over the trials.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionProbe {
    pub alpha0: f64,
    pub rows: Vec<ProbeRow>,
    /// Least-squares slope of ratio against δ through the origin.
    pub slope: f64,
    /// `1/(2·slope)`, capped at `1 − α0`.
    pub fitted_delta: f64,
}

/// Random ensemble with `x(0) = x0` and standard normal entries elsewhere.
pub fn random_ensemble(problem: &FbsdeProblem, ctx: &SolverContext, seed: u64) -> ParticleEnsemble {
    let mut e = ctx.zeros(problem);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in e.x.iter_mut().chain(e.y.iter_mut()).chain(e.z.iter_mut()).chain(e.k.iter_mut()) {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    let n = problem.x0.len();
    for p in 0..ctx.particles {
        e.x[p * n..(p + 1) * n].copy_from_slice(&problem.x0);
    }
    e
}

/// Steps each random pair is followed along the map. Random pairs alone
/// underestimate the gain on the smooth directions Picard iteration visits.
const PROBE_ORBIT: usize = 4;

/// `b ← a + s(b − a)` on every path.
fn rescale_toward(b: &mut ParticleEnsemble, a: &ParticleEnsemble, s: f64) {
    let pairs = [(&mut b.x, &a.x), (&mut b.y, &a.y), (&mut b.z, &a.z), (&mut b.k, &a.k)];
    for (bv, av) in pairs {
        for (u, v) in bv.iter_mut().zip(av.iter()) {
            *u = v + s * (*u - v);
        }
    }
}

/// Observed Lipschitz ratio of `I_{α0+δ}` along short orbits of random input
/// pairs, per `δ`.
pub fn contraction_probe(
    problem: &FbsdeProblem,
    ctx: &SolverContext,
    alpha0: f64,
    deltas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<ContractionProbe> {
    let mut pairs = Vec::new();
    for t in 0..trials {
        let a = random_ensemble(problem, ctx, seed.wrapping_add(2 * t as u64));
        let b = random_ensemble(problem, ctx, seed.wrapping_add(2 * t as u64 + 1));
        pairs.push((a, b));
    }
    let mut rows = Vec::new();
    for &delta in deltas {
        let mut worst = 0.0f64;
        for (a, b) in &pairs {
            let (mut a, mut b) = (a.clone(), b.clone());
            let mut gap = ensemble_norm(&a, &b)?.sqrt();
            for _ in 0..PROBE_ORBIT {
                let ia = inner_map(problem, ctx, alpha0, delta, &a)?;
                let mut ib = inner_map(problem, ctx, alpha0, delta, &b)?;
                let new_gap = ensemble_norm(&ia, &ib)?.sqrt();
                worst = worst.max(new_gap / gap);
                if !(new_gap > 0.0 && new_gap.is_finite()) {
                    break;
                }
                // keep the difference at unit size so the orbit neither
                // collapses to rounding noise nor overflows
                rescale_toward(&mut ib, &ia, 1.0 / new_gap);
                gap = 1.0;
                (a, b) = (ia, ib);
            }
        }
        rows.push(ProbeRow { delta, ratio: worst });
    }
    let num: f64 = rows.iter().map(|r| r.delta * r.ratio).sum();
    let den: f64 = rows.iter().map(|r| r.delta * r.delta).sum();
    let slope = if den > 0.0 { num / den } else { 0.0 };
    let fitted_delta = if slope > 0.0 { (0.5 / slope).min(1.0 - alpha0) } else { 1.0 - alpha0 };
    Ok(ContractionProbe { alpha0, rows, slope, fitted_delta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{example_3_1, Dims, LinearMf, Slot};
    use crate::grid::{make_grid, sample_noise};

    fn ctx_for<'a>(grid: TimeGrid, marks: &'a MarkSpace, noise: &'a NoisePanel) -> SolverContext<'a> {
        SolverContext::new(grid, marks, noise)
    }

    #[test]
    fn trivial_inner_map() {
        let g = make_grid(1.0, 10).unwrap();
        let marks = MarkSpace::single(1.0, 1.0).unwrap();
        let noise = sample_noise(&g, &marks, 50, 1, 1).unwrap();
        let ctx = ctx_for(g, &marks, &noise);
        // the family's terminal (1−α)G·x(T) vanishes only for a = 0
        let prob = FbsdeProblem::scalar(Arc::new(LinearMf::zeros(Dims::scalar(1))), 0.0, 0.0);
        let input = random_ensemble(&prob, &ctx, 3);
        let out = inner_map(&prob, &ctx, 0.0, 0.0, &input).unwrap();
        assert!(out.x.iter().all(|v| *v == 0.0));
        assert!(out.y.iter().chain(&out.z).chain(&out.k).all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn decoupled_start_solves_linear_bsde() {
        // α0 = δ = 0, β1 = 1, G = 1: −dY = X dt, Y(T) = X(T) with X ≡ x0
        let g = make_grid(1.0, 20).unwrap();
        let marks = MarkSpace::single(1.0, 1.0).unwrap();
        let noise = sample_noise(&g, &marks, 40, 1, 1).unwrap();
        let mut ctx = ctx_for(g, &marks, &noise);
        ctx.regression = RegressionConfig::affine_exact();
        let prob = FbsdeProblem::scalar(Arc::new(LinearMf::zeros(Dims::scalar(1))), 1.0, 2.0);
        let out = inner_map(&prob, &ctx, 0.0, 0.0, &ctx.zeros(&prob)).unwrap();
        for i in 0..=20 {
            let exact = 2.0 + 2.0 * (1.0 - g.node(i));
            assert!((out.y(i, 5)[0] - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_problem_solves_in_one_step() {
        let g = make_grid(1.0, 10).unwrap();
        let marks = MarkSpace::single(1.0, 1.0).unwrap();
        let noise = sample_noise(&g, &marks, 30, 1, 1).unwrap();
        let mut ctx = ctx_for(g, &marks, &noise);
        ctx.config.delta_init = 1.0;
        let prob = FbsdeProblem::scalar(Arc::new(LinearMf::zeros(Dims::scalar(1))), 1.0, 1.5);
        let rep = solve_fbsde(&prob, &ctx).unwrap();
        assert!(rep.solved());
        assert_eq!(rep.stages.len(), 1);
        let sol = rep.solution.unwrap();
        assert!(sol.x.iter().all(|v| *v == 1.5));
        assert!(sol.y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn example_3_1_small_solves_and_is_a_fixed_point() {
        let g = make_grid(0.25, 25).unwrap();
        let marks = MarkSpace::single(1.0, 1.0).unwrap();
        let noise = sample_noise(&g, &marks, 400, 1, 9).unwrap();
        let ctx = ctx_for(g, &marks, &noise);
        let prob = FbsdeProblem::scalar(Arc::new(example_3_1(1)), 2.0, 1.0);
        let rep = solve_fbsde(&prob, &ctx).unwrap();
        assert!(rep.solved(), "{:?}", rep.stages);
        let sol = rep.solution.unwrap();
        let again = inner_map(&prob, &ctx, 1.0 - 0.25, 0.25, &sol).unwrap();
        assert!(ensemble_norm(&again, &sol).unwrap().sqrt() < 1e-7);
    }

    #[test]
    fn delta_zero_is_one_iteration() {
        let g = make_grid(0.5, 10).unwrap();
        let marks = MarkSpace::single(1.0, 1.0).unwrap();
        let noise = sample_noise(&g, &marks, 50, 1, 2).unwrap();
        let ctx = ctx_for(g, &marks, &noise);
        let mut c = LinearMf::zeros(Dims::scalar(1));
        c.set_drift(Slot::Y, -1.0, 0.0).set_driver(Slot::X, 1.0, 0.0).set_terminal(1.0, 0.0);
        let prob = FbsdeProblem::scalar(Arc::new(c), 1.0, 1.0);
        let warm = random_ensemble(&prob, &ctx, 4);
        let s = solve_at_alpha(&prob, &ctx, 0.5, 0.0, &warm, 1e-8).unwrap();
        assert_eq!(s.iterations, 1);
    }
}
