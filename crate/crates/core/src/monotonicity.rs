//! Certificate arithmetic for the monotonicity conditions and a sampling probe
//! that tries to falsify them on an assembled field.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coefficients::{random_state, spectral_norm, AssembledField, ProbeBox, State};
use crate::error::{Error, Result};
use crate::grid::MarkSpace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityData {
    /// Rows of the `m×n` matrix `G`.
    pub g: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub mu1: f64,
    pub c0: f64,
    /// Defaults to the spectral norm of `G`.
    #[serde(default)]
    pub lambda1: Option<f64>,
    pub l_a: f64,
    pub l_phi: f64,
    #[serde(default)]
    pub l_f: f64,
    #[serde(default)]
    pub l_g: f64,
    #[serde(default)]
    pub horizon: f64,
}

impl MonotonicityData {
    pub fn g_matrix(&self) -> Result<DMatrix<f64>> {
        let rows = self.g.len();
        let cols = self.g.first().map_or(0, |r| r.len());
        if rows == 0 || cols == 0 || self.g.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("G must be a nonempty rectangular matrix".into()));
        }
        Ok(DMatrix::from_fn(rows, cols, |r, c| self.g[r][c]))
    }

    pub fn lambda1(&self) -> f64 {
        match self.lambda1 {
            Some(l) => l,
            None => self.g_matrix().map(|g| spectral_norm(&g)).unwrap_or(f64::NAN),
        }
    }

    /// `C_{L_g,T} = exp{[C0(4L_f + 12L_f² + 8L_f²C0) + 1]T}`.
    pub fn c_lg_t(&self) -> f64 {
        let lf = self.l_f;
        ((self.c0 * (4.0 * lf + 12.0 * lf * lf + 8.0 * lf * lf * self.c0) + 1.0) * self.horizon).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    H32,
    H33,
    R32i,
    R32ii,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConditionSet {
    #[serde(rename = "H32-case1")]
    H32Case1,
    #[serde(rename = "H32-case2")]
    H32Case2,
    #[serde(rename = "H33-case1")]
    H33Case1,
    #[serde(rename = "H33-case2")]
    H33Case2,
    #[serde(rename = "R32-i")]
    R32I,
    #[serde(rename = "R32-ii")]
    R32Ii,
    #[serde(rename = "none")]
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub variant: Variant,
    pub condition_set: ConditionSet,
    /// Left-minus-right of each inequality of the variant, in printed order.
    pub margin: Vec<f64>,
    pub pass: bool,
}

fn eq_tol(scale: &[f64]) -> f64 {
    1e-12 * scale.iter().fold(1.0f64, |a, b| a.max(b.abs()))
}

pub fn check_constants(data: &MonotonicityData, variant: Variant) -> CertificateReport {
    let finite = [data.beta1, data.beta2, data.beta3, data.mu1, data.c0, data.l_a, data.l_phi, data.l_f, data.horizon]
        .iter()
        .all(|v| v.is_finite());
    let lambda1 = data.lambda1();
    let (la_c0, lp_l1) = (data.l_a * data.c0, data.l_phi * lambda1);
    let eps = eq_tol(&[data.beta1, data.beta2, data.beta3, data.mu1, la_c0, lp_l1]);
    let pos = |s: f64| s > eps;
    let nonneg = |s: f64| s >= -eps;
    let zero = |s: f64| s.abs() <= eps;
    let fail = |margin: Vec<f64>| CertificateReport { variant, condition_set: ConditionSet::None, margin, pass: false };
    match variant {
        Variant::H32 | Variant::H33 => {
            let s = vec![data.beta1 - la_c0, data.beta2 - la_c0, data.beta3 - data.l_a, data.mu1 - lp_l1];
            if !finite || !lambda1.is_finite() {
                return fail(s);
            }
            let case1 = pos(s[0]) && nonneg(s[1]) && nonneg(s[2]) && pos(s[3]);
            let case2 = zero(s[0]) && pos(s[1]) && pos(s[2]) && pos(s[3]);
            let set = match (variant, case1, case2) {
                (Variant::H32, true, _) => ConditionSet::H32Case1,
                (Variant::H32, false, true) => ConditionSet::H32Case2,
                (Variant::H33, true, _) => ConditionSet::H33Case1,
                (Variant::H33, false, true) => ConditionSet::H33Case2,
                _ => return fail(s),
            };
            CertificateReport { variant, condition_set: set, margin: s, pass: true }
        }
        Variant::R32i => {
            let s = vec![data.beta1 - la_c0, data.beta2 - la_c0];
            let ok = finite && nonneg(s[0]) && nonneg(s[1]) && !(zero(s[0]) && zero(s[1]));
            if ok {
                CertificateReport { variant, condition_set: ConditionSet::R32I, margin: s, pass: true }
            } else {
                fail(s)
            }
        }
        Variant::R32ii => {
            let c = data.c_lg_t();
            let s = vec![
                data.beta1 - (data.l_a + 2.0 * data.l_a * c * data.c0 * data.c0),
                data.mu1 - (lp_l1 + 8.0 * c * data.l_phi * data.l_phi * data.l_a * data.c0),
            ];
            let ok = finite && lambda1.is_finite() && s.iter().all(|v| v.is_finite() && pos(*v));
            if ok {
                CertificateReport { variant, condition_set: ConditionSet::R32Ii, margin: s, pass: true }
            } else {
                fail(s)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// `"A"` for the field inequality, `"Phi"` for the terminal one.
    pub condition: String,
    pub t: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityProbe {
    pub beta1_hat: f64,
    pub beta2_hat: f64,
    pub beta3_hat: f64,
    pub mu1_hat: f64,
    pub violation_count: usize,
    /// First few violating samples.
    pub violations: Vec<Violation>,
}

const KEEP_VIOLATIONS: usize = 20;

/// Samples `⟨A(λ,λ̃) − A(λ̄,λ̃), λ − λ̄⟩` and `⟨Φ(x,x̃) − Φ(x̄,x̃), G(x − x̄)⟩`.
///
/// Each sample draws differences restricted to `x`, to `(y, z)`, to `k`, and an
/// unrestricted one. The restricted ratios give the largest admissible
/// constants; any sample whose slack is negative with those constants (clipped
/// at zero) is reported.
pub fn probe_monotonicity(
    field: &AssembledField,
    marks: &MarkSpace,
    samples: usize,
    seed: u64,
    probe: ProbeBox,
) -> Result<MonotonicityProbe> {
    let dims = field.dims();
    if marks.len() != dims.marks {
        return Err(Error::ShapeMismatch("mark count differs from coefficient dims".into()));
    }
    let w = marks.weights();
    let g = field.g();
    let coeffs = field.coefficients();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fa = vec![0.0; dims.field_len()];
    let mut fb = vec![0.0; dims.field_len()];
    let mut pa = vec![0.0; dims.m];
    let mut pb = vec![0.0; dims.m];
    let mut b = [f64::INFINITY; 3];
    let mut mu = f64::INFINITY;
    // (t, lhs, |x̂|², |ŷ|²+|ẑ|², Σλ|k̂|²) for the slack pass
    let mut records: Vec<(f64, f64, f64, f64, f64, f64)> = Vec::new();
    let mut phi_records: Vec<(f64, f64, f64, f64)> = Vec::new();
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    for _ in 0..samples.max(1) {
        let t = rng.random_range(0.0..=probe.horizon);
        let base = random_state(&dims, probe.half_width, &mut rng);
        let primed = random_state(&dims, probe.half_width, &mut rng);
        for kind in 0..4 {
            let mut diff = random_state(&dims, probe.half_width, &mut rng);
            diff.v.iter_mut().for_each(|a| *a = 0.0);
            match kind {
                0 => {
                    diff.y.fill(0.0);
                    diff.z.fill(0.0);
                    diff.k.fill(0.0);
                }
                1 => {
                    diff.x.fill(0.0);
                    diff.k.fill(0.0);
                }
                2 => {
                    diff.x.fill(0.0);
                    diff.y.fill(0.0);
                    diff.z.fill(0.0);
                }
                _ => {}
            }
            let mut bar = base.clone();
            let flat: Vec<f64> = base.flat().iter().zip(diff.flat()).map(|(a, d)| a - d).collect();
            bar.set_flat(&flat);
            field.eval(t, &base.args(), &primed.args(), &mut fa);
            field.eval(t, &bar.args(), &primed.args(), &mut fb);
            let delta: Vec<f64> = fa.iter().zip(&fb).map(|(a, c)| a - c).collect();
            let lhs = field.pair(&delta, &diff, w);
            let nx = sq(&diff.x);
            let nyz = sq(&diff.y) + sq(&diff.z);
            let nk = State { x: vec![], y: vec![], z: vec![], ..diff.clone() }.weighted_norm_sq(w);
            let denom = [nx, nyz, nk];
            if kind < 3 && denom[kind] > 0.0 {
                b[kind] = b[kind].min(-lhs / denom[kind]);
            }
            let scale = fa.iter().chain(&fb).fold(0.0f64, |m, v| m.max(v.abs()))
                * diff.flat().iter().fold(0.0f64, |m, v| m.max(v.abs()))
                * (dims.field_len() as f64);
            records.push((t, lhs, nx, nyz, nk, scale));
        }
        let dx = random_state(&dims, probe.half_width, &mut rng).x;
        let xbar: Vec<f64> = base.x.iter().zip(&dx).map(|(a, d)| a - d).collect();
        let bar = State { x: xbar, ..base.clone() };
        coeffs.terminal(&base.args(), &primed.args(), &mut pa);
        coeffs.terminal(&bar.args(), &primed.args(), &mut pb);
        let gx: Vec<f64> = (0..dims.m).map(|r| (0..dims.n).map(|i| g[(r, i)] * dx[i]).sum()).collect();
        let val: f64 = (0..dims.m).map(|r| (pa[r] - pb[r]) * gx[r]).sum();
        let nx = sq(&dx);
        if nx > 0.0 {
            mu = mu.min(val / nx);
        }
        let scale = pa.iter().chain(&pb).fold(0.0f64, |m, v| m.max(v.abs()))
            * gx.iter().fold(0.0f64, |m, v| m.max(v.abs()))
            * (dims.m as f64);
        phi_records.push((t, val, nx, scale.max(nx)));
    }
    let clip = |v: f64| if v.is_finite() { v.max(0.0) } else { 0.0 };
    let (b1, b2, b3, m1) = (clip(b[0]), clip(b[1]), clip(b[2]), clip(mu));
    let mut violations = Vec::new();
    let mut count = 0;
    for (t, lhs, nx, nyz, nk, scale) in records {
        let slack = -b1 * nx - b2 * nyz - b3 * nk - lhs;
        if slack < -1e-9 * scale.max(1.0) {
            count += 1;
            if violations.len() < KEEP_VIOLATIONS {
                violations.push(Violation { condition: "A".into(), t, slack });
            }
        }
    }
    for (t, val, nx, scale) in phi_records {
        let slack = val - m1 * nx;
        if slack < -1e-9 * scale.max(1.0) {
            count += 1;
            if violations.len() < KEEP_VIOLATIONS {
                violations.push(Violation { condition: "Phi".into(), t, slack });
            }
        }
    }
    Ok(MonotonicityProbe {
        beta1_hat: b1,
        beta2_hat: b2,
        beta3_hat: b3,
        mu1_hat: m1,
        violation_count: count,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{assemble_a, example_3_1, example_3_2, Coefficients, Dims, LinearMf, Slot};
    use std::sync::Arc;

    fn ex31_data() -> MonotonicityData {
        MonotonicityData {
            g: vec![vec![1.0]],
            beta1: 2.0,
            beta2: 2.0,
            beta3: 2.0,
            mu1: 2.0,
            c0: 1.0,
            lambda1: Some(1.0),
            l_a: 1.0,
            l_phi: 1.0,
            l_f: 0.0,
            l_g: 0.0,
            horizon: 0.25,
        }
    }

    #[test]
    fn example_3_1_certificate() {
        let r = check_constants(&ex31_data(), Variant::H32);
        assert!(r.pass);
        assert_eq!(r.condition_set, ConditionSet::H32Case1);
        assert_eq!(r.margin, vec![1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_constants_fail_everywhere() {
        let d = MonotonicityData {
            g: vec![vec![1.0]],
            beta1: 0.0,
            beta2: 0.0,
            beta3: 0.0,
            mu1: 0.0,
            c0: 0.0,
            lambda1: Some(0.0),
            l_a: 0.0,
            l_phi: 0.0,
            l_f: 0.0,
            l_g: 0.0,
            horizon: 0.0,
        };
        for v in [Variant::H32, Variant::H33, Variant::R32i, Variant::R32ii] {
            let r = check_constants(&d, v);
            assert!(!r.pass, "{v:?}");
            assert_eq!(r.condition_set, ConditionSet::None);
        }
    }

    #[test]
    fn equality_branch() {
        let d = MonotonicityData { beta1: 1.0, ..ex31_data() };
        let r = check_constants(&d, Variant::H32);
        assert!(r.pass);
        assert_eq!(r.condition_set, ConditionSet::H32Case2);
        let r = check_constants(&d, Variant::H33);
        assert_eq!(r.condition_set, ConditionSet::H33Case2);
    }

    #[test]
    fn remark_variants() {
        let d = ex31_data();
        let r = check_constants(&MonotonicityData { beta1: 1.0, beta2: 1.0, ..d.clone() }, Variant::R32i);
        assert!(!r.pass);
        let r = check_constants(&MonotonicityData { beta1: 1.0, ..d.clone() }, Variant::R32i);
        assert!(r.pass);
        // C = e^{T} with L_f = 0: β1 > 1 + 2e^{T}, μ1 > 1 + 8e^{T}
        let c = (0.25f64).exp();
        let r = check_constants(&d, Variant::R32ii);
        assert_eq!(r.margin, vec![2.0 - (1.0 + 2.0 * c), 2.0 - (1.0 + 8.0 * c)]);
        assert!(!r.pass);
        let r = check_constants(&MonotonicityData { beta1: 10.0, mu1: 20.0, ..d }, Variant::R32ii);
        assert!(r.pass);
        assert_eq!(r.condition_set, ConditionSet::R32Ii);
    }

    #[test]
    fn lambda1_defaults_to_spectral_norm() {
        let d = MonotonicityData { g: vec![vec![3.0, 0.0], vec![0.0, -4.0]], lambda1: None, ..ex31_data() };
        assert!((d.lambda1() - 4.0).abs() < 1e-12);
    }

    fn probe(c: LinearMf, samples: usize) -> MonotonicityProbe {
        let marks = MarkSpace::single(1.0, 1.0).unwrap();
        let f = assemble_a(Arc::new(c), DMatrix::identity(1, 1)).unwrap();
        probe_monotonicity(&f, &marks, samples, 11, ProbeBox::default()).unwrap()
    }

    #[test]
    fn probe_example_3_1() {
        let p = probe(example_3_1(1), 300);
        for b in [p.beta1_hat, p.beta2_hat, p.beta3_hat, p.mu1_hat] {
            assert!((b - 2.0).abs() < 1e-9, "{p:?}");
        }
        assert_eq!(p.violation_count, 0);
    }

    #[test]
    fn probe_example_3_2_violates() {
        let p = probe(example_3_2(1), 100);
        assert!(p.violation_count > 0);
        assert!(!p.violations.is_empty());
        assert_eq!(p.beta3_hat, 0.0);
    }

    #[test]
    fn probe_zero_field() {
        let p = probe(LinearMf::zeros(Dims::scalar(1)), 50);
        assert_eq!([p.beta1_hat, p.beta2_hat, p.beta3_hat, p.mu1_hat], [0.0; 4]);
        assert_eq!(p.violation_count, 0);
    }

    #[test]
    fn probe_matches_eigenvalue_oracle() {
        // (y, z) block of the quadratic form: b = a·y + c·z, σ = e·y + g·z
        let (a, c, e, gg) = (-1.5, 0.8, -0.3, -2.0);
        let mut lin = LinearMf::zeros(Dims::scalar(1));
        lin.set_drift(Slot::Y, a, 0.0).set_drift(Slot::Z, c, 0.0);
        lin.set_diffusion(Slot::Y, e, 0.0).set_diffusion(Slot::Z, gg, 0.0);
        lin.set_driver(Slot::X, 0.7, 0.0).set_terminal(1.5, 0.0);
        let sym = nalgebra::Matrix2::new(a, 0.5 * (c + e), 0.5 * (c + e), gg);
        let oracle = -sym.symmetric_eigenvalues().max();
        assert!(lin.primed_affine());
        let p = probe(lin, 4000);
        assert!((p.beta2_hat - oracle).abs() < 1e-2 * oracle.abs(), "{} vs {oracle}", p.beta2_hat);
        assert!(p.beta2_hat >= oracle - 1e-12);
        assert!((p.beta1_hat - 0.7).abs() < 1e-9);
        assert!((p.mu1_hat - 1.5).abs() < 1e-9);
    }
}
