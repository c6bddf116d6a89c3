//! Backward induction for mean-field BSDEs with jumps on a particle ensemble.
//!
//! Conditional expectations given `x_i` are least-squares projections on a
//! polynomial basis of the (standardized) forward state. In `Regression` mode
//! `z` and `k` come from regressing the centred increment `e = y_{i+1} − ŷ`
//! against the Brownian and compensated Poisson increments. `AffineExact`
//! regresses `y_{i+1}` jointly on `basis(x_i) ⊗ (1, ΔB/√Δt, ΔÑ/√(λΔt))`; when
//! the whole system is affine, `y_{i+1}` lies in that span and the projection
//! is exact up to rounding.
//!
//! The scheme is explicit: `y_i = ŷ + f(t_i, x_i, ŷ, z_i, k_i) Δt`, with the
//! mean-field slot fed by the cross-sectional means at `t_i`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::coefficients::{Args, Coefficients};
use crate::error::{Error, Result};
use crate::grid::NoisePanel;
use crate::particles::{mean_field_apply, AuxPaths, MeanFieldEstimator, NodeView, ParticleEnsemble};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    AffineInState,
    /// Total degree 1 to 3.
    Polynomial(u8),
}

impl Basis {
    fn degree(self) -> u8 {
        match self {
            Basis::AffineInState => 1,
            Basis::Polynomial(q) => q,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionMode {
    Regression,
    AffineExact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressionConfig {
    pub basis: Basis,
    /// Ridge added to the Gram diagonal (intercept excluded), relative to its trace.
    pub ridge: f64,
    pub mode: RegressionMode,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self { basis: Basis::AffineInState, ridge: 1e-8, mode: RegressionMode::Regression }
    }
}

impl RegressionConfig {
    pub fn affine_exact() -> Self {
        Self { mode: RegressionMode::AffineExact, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::InvalidInput("ridge must be finite and nonnegative".into()));
        }
        if !(1..=3).contains(&self.basis.degree()) {
            return Err(Error::InvalidInput("polynomial degree must be 1, 2 or 3".into()));
        }
        Ok(())
    }
}

/// Driver of the backward equation evaluated for a whole node at once.
/// `view` carries `(x_i, ŷ, z_i, k_i, v_i)`; `out` receives `P·m` values.
pub trait BackwardDriver {
    fn eval_node(&self, i: usize, t: f64, view: &NodeView, out: &mut [f64]);
}

/// `E'[f(t, λ_p, λ')]` from a coefficient set.
pub struct CoefficientDriver<'a> {
    pub coeffs: &'a dyn Coefficients,
    pub estimator: MeanFieldEstimator,
}

impl BackwardDriver for CoefficientDriver<'_> {
    fn eval_node(&self, _i: usize, t: f64, view: &NodeView, out: &mut [f64]) {
        let est = self.estimator.resolve(self.coeffs);
        let mean = view.mean();
        mean_field_apply(est, view, &mean, view.dims.m, out, |a, b, o| self.coeffs.driver(t, a, b, o));
    }
}

/// Driver depending on the particle's own state and the node means only.
pub struct FnDriver<F>(pub F);

impl<F> BackwardDriver for FnDriver<F>
where
    F: Fn(f64, &Args, &Args, &mut [f64]),
{
    fn eval_node(&self, _i: usize, t: f64, view: &NodeView, out: &mut [f64]) {
        let mean = view.mean();
        mean_field_apply(MeanFieldEstimator::AffineShortcut, view, &mean, view.dims.m, out, |a, b, o| {
            (self.0)(t, a, b, o)
        });
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub node: usize,
    /// RMS of the regression residual of `y_{i+1}`.
    pub residual_rms: f64,
    /// Particle mean of `y_{i+1} − y_i + fΔt − zΔB − Σ_j k_j ΔÑ_j`.
    pub martingale_mean: f64,
    /// Standard error of that mean.
    pub martingale_stderr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BsdeDiagnostics {
    pub steps: Vec<StepDiagnostics>,
}

impl BsdeDiagnostics {
    /// Largest `|mean| − c·stderr` over steps; nonpositive means every step
    /// passes the `|mean| ≤ c·stderr + floor` test.
    pub fn worst_martingale_excess(&self, c: f64, floor: f64) -> f64 {
        self.steps
            .iter()
            .map(|s| s.martingale_mean.abs() - c * s.martingale_stderr - floor)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Exponents of all monomials in `n` variables with total degree ≤ `q`.
fn monomials(n: usize, q: u8) -> Vec<Vec<u8>> {
    let mut out = vec![vec![0u8; n]];
    for deg in 1..=q {
        let mut cur = vec![0u8; n];
        fill(&mut out, &mut cur, 0, deg);
    }
    fn fill(out: &mut Vec<Vec<u8>>, cur: &mut Vec<u8>, pos: usize, left: u8) {
        if pos + 1 == cur.len() {
            cur[pos] = left;
            out.push(cur.clone());
            cur[pos] = 0;
            return;
        }
        for e in (0..=left).rev() {
            cur[pos] = e;
            fill(out, cur, pos + 1, left - e);
        }
        cur[pos] = 0;
    }
    out
}

/// Design matrix `P × c` of standardized monomials; degenerate components
/// (constant across particles) are dropped.
fn design(x: &[f64], n: usize, pn: usize, basis: Basis) -> DMatrix<f64> {
    let mut keep = Vec::new();
    let mut scale = Vec::new();
    for c in 0..n {
        let mean = (0..pn).map(|p| x[p * n + c]).sum::<f64>() / pn as f64;
        let var = (0..pn).map(|p| (x[p * n + c] - mean).powi(2)).sum::<f64>() / pn as f64;
        let sd = var.sqrt();
        if sd > 1e-12 * mean.abs().max(1.0) {
            keep.push(c);
            scale.push((mean, sd));
        }
    }
    let mons = if keep.is_empty() { vec![vec![]] } else { monomials(keep.len(), basis.degree()) };
    DMatrix::from_fn(pn, mons.len(), |p, col| {
        mons[col]
            .iter()
            .enumerate()
            .map(|(a, e)| {
                let (mu, sd) = scale[a];
                ((x[p * n + keep[a]] - mu) / sd).powi(*e as i32)
            })
            .product()
    })
}

fn solve_ridge(phi: &DMatrix<f64>, rhs: &DMatrix<f64>, ridge: f64, node: usize) -> Result<DMatrix<f64>> {
    let mut g = phi.tr_mul(phi);
    let tr = g.trace();
    let c = g.nrows();
    // column 0 is the intercept and is left unpenalized
    for r in 1..c {
        g[(r, r)] += ridge * tr;
    }
    let b = phi.tr_mul(rhs);
    match nalgebra::linalg::Cholesky::new(g) {
        Some(ch) => Ok(ch.solve(&b)),
        None => Err(Error::SingularRegression { node }),
    }
}

fn solve_pinv(phi: &DMatrix<f64>, rhs: &DMatrix<f64>, node: usize) -> Result<DMatrix<f64>> {
    let g = phi.tr_mul(phi);
    let b = phi.tr_mul(rhs);
    let svd = g.svd(true, true);
    let eps = 1e-13 * svd.singular_values.max();
    svd.solve(&b, eps).map_err(|_| Error::SingularRegression { node })
}

/// Backward recursion writing `(y, z, k)` into `ens` (whose `x`, `v` are the
/// forward paths). `terminal` holds `ξ_p` for every particle (`P·m` values).
pub fn solve_mf_bsde(
    driver: &dyn BackwardDriver,
    terminal: &[f64],
    ens: &mut ParticleEnsemble,
    noise: &NoisePanel,
    config: &RegressionConfig,
    aux: Option<&AuxPaths>,
) -> Result<BsdeDiagnostics> {
    config.validate()?;
    let d = ens.dims();
    let pn = ens.particles();
    let nn = ens.steps();
    let dt = ens.grid().dt();
    let (n, m, dd, mk) = (d.n, d.m, d.d, d.marks);
    let (zl, kl) = (d.z_len(), d.k_len());
    if terminal.len() != pn * m {
        return Err(Error::ShapeMismatch(format!("terminal has {} values, expected {}", terminal.len(), pn * m)));
    }
    if noise.particles() < pn || noise.steps() != nn || noise.brownian_dim() != dd || noise.marks() != mk {
        return Err(Error::ShapeMismatch("noise panel does not match ensemble".into()));
    }
    if let Some(p) = terminal.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState { node: nn, particle: p / m.max(1) });
    }
    let weights = ens.weights().to_vec();
    ens.y[nn * pn * m..].copy_from_slice(terminal);
    ens.z[nn * pn * zl..].fill(0.0);
    ens.k[nn * pn * kl..].fill(0.0);
    let mut diag = BsdeDiagnostics::default();
    let mut yhat = vec![0.0; pn * m];
    let mut zbuf = vec![0.0; pn * zl];
    let mut kbuf = vec![0.0; pn * kl];
    let mut fbuf = vec![0.0; pn * m];
    let sqdt = dt.sqrt();
    for i in (0..nn).rev() {
        let t = ens.grid().node(i);
        let xi = &ens.x[i * pn * n..(i + 1) * pn * n];
        let ynext = &ens.y[(i + 1) * pn * m..(i + 2) * pn * m];
        let phi = match aux.filter(|a| a.regressors > 0) {
            Some(a) => {
                let r = a.regressors;
                let an = a.node(i);
                let w = n + r;
                let mut joint = vec![0.0; pn * w];
                for p in 0..pn {
                    joint[p * w..p * w + n].copy_from_slice(&xi[p * n..(p + 1) * n]);
                    joint[p * w + n..(p + 1) * w].copy_from_slice(&an[p * a.dim..p * a.dim + r]);
                }
                design(&joint, w, pn, config.basis)
            }
            None => design(xi, n, pn, config.basis),
        };
        let c = phi.ncols();
        let target = DMatrix::from_fn(pn, m, |p, r| ynext[p * m + r]);
        let mut resid_sq = 0.0;
        match config.mode {
            RegressionMode::Regression => {
                let beta = solve_ridge(&phi, &target, config.ridge, i)?;
                let fit = &phi * beta;
                for p in 0..pn {
                    for r in 0..m {
                        yhat[p * m + r] = fit[(p, r)];
                    }
                }
                let cols = zl + kl;
                if cols > 0 {
                    let rhs = DMatrix::from_fn(pn, cols, |p, col| {
                        if col < zl {
                            let (r, l) = (col / dd, col % dd);
                            (ynext[p * m + r] - fit[(p, r)]) * noise.db(i, p)[l] / dt
                        } else {
                            let (r, j) = ((col - zl) / mk, (col - zl) % mk);
                            (ynext[p * m + r] - fit[(p, r)]) * noise.compensated(i, p, j) / (weights[j] * dt)
                        }
                    });
                    let coef = solve_ridge(&phi, &rhs, config.ridge, i)?;
                    let zk = &phi * coef;
                    for p in 0..pn {
                        for col in 0..zl {
                            zbuf[p * zl + col] = zk[(p, col)];
                        }
                        for col in 0..kl {
                            kbuf[p * kl + col] = zk[(p, zl + col)];
                        }
                    }
                }
                for p in 0..pn {
                    for r in 0..m {
                        resid_sq += (ynext[p * m + r] - yhat[p * m + r]).powi(2);
                    }
                }
            }
            RegressionMode::AffineExact => {
                // Noise block j is (basis ⊗ ΔÑ_j). With few jumping particles its x-dependent
                // columns are collinear with the intercept block, so the mark keeps only its
                // constant column (fewer than 2c jumpers) or is dropped (no jumpers).
                let mut cols: Vec<(usize, usize)> = Vec::new();
                for b in 0..=dd {
                    cols.extend((0..c).map(|a| (b, a)));
                }
                for j in 0..mk {
                    let jumpers = (0..pn).filter(|&p| noise.counts(i, p)[j] > 0).count();
                    if jumpers >= 2 * c {
                        cols.extend((0..c).map(|a| (1 + dd + j, a)));
                    } else if jumpers > 0 {
                        cols.push((1 + dd + j, 0));
                    }
                }
                let psi = DMatrix::from_fn(pn, cols.len(), |p, col| {
                    let (b, a) = cols[col];
                    let w = if b == 0 {
                        1.0
                    } else if b <= dd {
                        noise.db(i, p)[b - 1] / sqdt
                    } else {
                        let j = b - 1 - dd;
                        noise.compensated(i, p, j) / (weights[j] * dt).sqrt()
                    };
                    phi[(p, a)] * w
                });
                let beta = solve_pinv(&psi, &target, i)?;
                let full = &psi * &beta;
                for p in 0..pn {
                    for r in 0..m {
                        let at = |b: usize| {
                            cols.iter()
                                .enumerate()
                                .filter(|(_, (bb, _))| *bb == b)
                                .map(|(col, (_, a))| phi[(p, *a)] * beta[(col, r)])
                                .sum::<f64>()
                        };
                        yhat[p * m + r] = at(0);
                        for l in 0..dd {
                            zbuf[p * zl + r * dd + l] = at(1 + l) / sqdt;
                        }
                        for j in 0..mk {
                            kbuf[p * kl + r * mk + j] = at(1 + dd + j) / (weights[j] * dt).sqrt();
                        }
                        resid_sq += (ynext[p * m + r] - full[(p, r)]).powi(2);
                    }
                }
            }
        }
        {
            let view = NodeView {
                dims: d,
                particles: pn,
                x: xi,
                y: &yhat,
                z: &zbuf,
                k: &kbuf,
                v: &ens.v[i * pn * d.k_ctrl..(i + 1) * pn * d.k_ctrl],
                aux: aux.map_or(&[][..], |a| a.node(i)),
                aux_dim: aux.map_or(0, |a| a.dim),
            };
            driver.eval_node(i, t, &view, &mut fbuf);
        }
        let mut mart = Vec::with_capacity(pn);
        for p in 0..pn {
            let mut r_sum = 0.0;
            for r in 0..m {
                let y = yhat[p * m + r] + fbuf[p * m + r] * dt;
                if !y.is_finite() {
                    return Err(Error::NonFiniteState { node: i, particle: p });
                }
                let mut inc = ens.y[((i + 1) * pn + p) * m + r] - y + fbuf[p * m + r] * dt;
                for l in 0..dd {
                    inc -= zbuf[p * zl + r * dd + l] * noise.db(i, p)[l];
                }
                for j in 0..mk {
                    inc -= kbuf[p * kl + r * mk + j] * noise.compensated(i, p, j);
                }
                r_sum += inc;
                ens.y[(i * pn + p) * m + r] = y;
            }
            mart.push(r_sum);
        }
        ens.z[i * pn * zl..(i + 1) * pn * zl].copy_from_slice(&zbuf);
        ens.k[i * pn * kl..(i + 1) * pn * kl].copy_from_slice(&kbuf);
        let mean = mart.iter().sum::<f64>() / pn as f64;
        let var = mart.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (pn.max(2) - 1) as f64;
        diag.steps.push(StepDiagnostics {
            node: i,
            residual_rms: (resid_sq / (pn * m.max(1)) as f64).sqrt(),
            martingale_mean: mean,
            martingale_stderr: (var / pn as f64).sqrt(),
        });
    }
    diag.steps.reverse();
    Ok(diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{Dims, LinearMf, Slot};
    use crate::control::ControlPath;
    use crate::grid::{make_grid, sample_noise, MarkSpace};
    use crate::particles::simulate_mckean_vlasov;

    fn forward(p: usize, steps: usize, t: f64) -> (ParticleEnsemble, NoisePanel) {
        let g = make_grid(t, steps).unwrap();
        let marks = MarkSpace::single(1.0, 1.0).unwrap();
        let noise = sample_noise(&g, &marks, p, 1, 11).unwrap();
        let mut c = LinearMf::zeros(Dims::scalar(1));
        c.set_drift(Slot::X, -0.2, 0.0);
        c.diffusion.c0[0] = 0.5;
        c.jumps[0].c0[0] = 0.3;
        let e =
            simulate_mckean_vlasov(&c, &g, &marks, &noise, p, &[1.0], MeanFieldEstimator::Auto, &ControlPath::zero(0))
                .unwrap();
        (e, noise)
    }

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(1, 3).len(), 4);
        assert_eq!(monomials(2, 2).len(), 6);
        assert_eq!(monomials(3, 1).len(), 4);
    }

    #[test]
    fn constant_terminal_is_a_constant_martingale() {
        let (mut e, noise) = forward(500, 20, 1.0);
        let f = FnDriver(|_t: f64, _a: &Args, _b: &Args, o: &mut [f64]| o[0] = 0.0);
        solve_mf_bsde(&f, &vec![2.5; 500], &mut e, &noise, &RegressionConfig::default(), None).unwrap();
        assert!(e.y.iter().all(|v| (v - 2.5).abs() < 1e-9));
        assert!(e.z.iter().chain(&e.k).all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn unit_driver_integrates_exactly() {
        let (mut e, noise) = forward(300, 40, 1.0);
        let f = FnDriver(|_t: f64, _a: &Args, _b: &Args, o: &mut [f64]| o[0] = 1.0);
        solve_mf_bsde(&f, &vec![0.0; 300], &mut e, &noise, &RegressionConfig::affine_exact(), None).unwrap();
        for i in 0..=40 {
            assert!((e.y(i, 7)[0] - (1.0 - e.grid().node(i))).abs() < 1e-10, "{i} {}", e.y(i, 7)[0]);
        }
    }

    #[test]
    fn linear_terminal_recovers_z_and_k() {
        // y_{i+1} = x_{i+1} with dx = −0.2x dt + 0.5 dB + 0.3 dÑ: z = 0.5, k = 0.3
        let (mut e, noise) = forward(400, 10, 1.0);
        let xi: Vec<f64> = (0..400).map(|p| e.x(10, p)[0]).collect();
        let f = FnDriver(|_t: f64, _a: &Args, _b: &Args, o: &mut [f64]| o[0] = 0.0);
        solve_mf_bsde(&f, &xi, &mut e, &noise, &RegressionConfig::affine_exact(), None).unwrap();
        assert!((e.z(9, 3)[0] - 0.5).abs() < 1e-9);
        assert!((e.k(9, 3)[0] - 0.3).abs() < 1e-9);
        // conditional expectation of x_{i+1} given x_i is x_i (1 − 0.2 Δt)
        assert!((e.y(9, 3)[0] - e.x(9, 3)[0] * (1.0 - 0.02)).abs() < 1e-9);
    }

    #[test]
    fn mean_field_driver_gives_exponential() {
        let (mut e, noise) = forward(2000, 200, 1.0);
        let f = FnDriver(|_t: f64, _a: &Args, m: &Args, o: &mut [f64]| o[0] = m.y[0]);
        let diag = solve_mf_bsde(&f, &vec![1.0; 2000], &mut e, &noise, &RegressionConfig::default(), None).unwrap();
        let y0 = e.mean_y(0)[0];
        assert!((y0 - 1f64.exp()).abs() < 3.0 * (0.005 + 1.0 / 2000f64.sqrt()), "{y0}");
        assert!(diag.worst_martingale_excess(5.0, 1e-12) <= 0.0);
    }

    #[test]
    fn zero_noise_is_explicit_euler() {
        let g = make_grid(1.0, 10).unwrap();
        let marks = MarkSpace::empty();
        let dims = Dims { n: 1, m: 1, d: 0, k_ctrl: 0, marks: 0 };
        let noise = sample_noise(&g, &marks, 3, 0, 1).unwrap();
        let mut e = ParticleEnsemble::zeros(dims, 3, g, &marks);
        let f = FnDriver(|_t: f64, a: &Args, _b: &Args, o: &mut [f64]| o[0] = 2.0 * a.y[0]);
        solve_mf_bsde(&f, &[1.0; 3], &mut e, &noise, &RegressionConfig::default(), None).unwrap();
        assert!((e.y(0, 1)[0] - 1.2f64.powi(10)).abs() < 1e-9);
    }

    #[test]
    fn polynomial_basis_tracks_square() {
        let (mut e, noise) = forward(3000, 5, 0.5);
        let xi: Vec<f64> = (0..3000).map(|p| e.x(5, p)[0].powi(2)).collect();
        let f = FnDriver(|_t: f64, _a: &Args, _b: &Args, o: &mut [f64]| o[0] = 0.0);
        let cfg = RegressionConfig { basis: Basis::Polynomial(2), ..Default::default() };
        solve_mf_bsde(&f, &xi, &mut e, &noise, &cfg, None).unwrap();
        // E[x_5² | x_4] = (0.98 x_4)² + 0.25·0.1 + 0.09·0.1
        for p in [0, 10, 100] {
            let x4 = e.x(4, p)[0];
            let exact = (0.98 * x4).powi(2) + 0.034;
            assert!((e.y(4, p)[0] - exact).abs() < 0.05, "{p}");
        }
    }
}
