//! Frozen reference values of the registry instances.

use mfbsde::applications::{lq_riccati, portfolio_riccati};
use mfbsde::continuation::{solve_fbsde, SolverContext};
use mfbsde::grid::{make_grid, MarkSpace, NoisePanel};
use mfbsde::registry;

#[test]
fn derived_market_constants() {
    let pf = registry::portfolio();
    assert!((pf.big_lambda(0.0) - 0.1).abs() < 1e-15);
    assert!((pf.kappa(0.0) - 0.049).abs() < 1e-15);
    let lq = registry::lq();
    assert!((lq.big_lambda() - 1.25).abs() < 1e-15);
    assert!((lq.kappa() + 0.992).abs() < 1e-15);
}

#[test]
fn portfolio_phi_matches_its_exponential() {
    // φ(t) = exp{(2ρ − κ)(T − t)} with constant coefficients
    let pf = registry::portfolio();
    let grid = make_grid(1.0, 2_000).unwrap();
    let sol = portfolio_riccati(&pf, &grid).unwrap();
    assert!((sol.phi[0] - 0.051f64.exp()).abs() < 1e-12);
    assert_eq!(*sol.phi.last().unwrap(), 1.0);
}

#[test]
fn printed_discrepancies_are_flagged() {
    let grid = make_grid(1.0, 2_000).unwrap();
    let pf = portfolio_riccati(&registry::portfolio(), &grid).unwrap();
    let lq = lq_riccati(&registry::lq(), &grid, 1.0).unwrap();
    let flags: Vec<&str> = pf.discrepancies().into_iter().chain(lq.discrepancies()).collect();
    for name in ["portfolio_psi_integral_sign", "lq_phi_exponent", "lq_theta_exponent"] {
        assert!(flags.contains(&name), "{name} not flagged: {flags:?}");
    }
    assert!(!flags.contains(&"portfolio_phi"), "{flags:?}");
}

#[test]
fn solvable_example_initial_value() {
    // y(0) = 1 − 2c₁, c₁ = 1/(1 − 2e^{1.5})
    let exact = 1.0 - 2.0 / (1.0 - 2.0 * 1.5f64.exp());
    assert!((exact - 1.251_150_6).abs() < 1e-6);
    let grid = make_grid(0.25, 100).unwrap();
    let marks = MarkSpace::single(1.0, 1.0).unwrap();
    let noise = NoisePanel::generate(&grid, &marks, 4_000, 1, 42).unwrap();
    let ctx = SolverContext::new(grid, &marks, &noise);
    let report = solve_fbsde(&registry::example_3_1(), &ctx).unwrap();
    assert!(report.solved(), "{:?}", report.status);
    let y0 = report.solution.unwrap().mean_y(0)[0];
    let tol = 3.0 * (0.0025 + 1.0 / 4_000f64.sqrt()) * 1.0;
    assert!((y0 - exact).abs() < tol, "y(0) = {y0}, exact {exact}");
}
