//! Oracle outputs checked against closed forms derived independently here.

use std::collections::BTreeMap;

use boundary_rl::critic::{BasisSet, RegulatorDirection};
use boundary_rl::dynamics::{make_benchmark, Benchmark, BoundaryProblem, State};
use boundary_rl::oracle::{
    cubic_value, linear_regulator, project_value_on_basis, quadratic_weights, regulator_values,
    solve_tpbvp_shooting, SHOOTING_TOL,
};
use boundary_rl::sim::{simulate, IntegratorConfig, TimeDirection};
use nalgebra::DVector;

fn problem(name: &str) -> BoundaryProblem {
    make_benchmark(name, &BTreeMap::new()).unwrap()
}

/// Circuit `ẋ = -x + u`, cost `x² + u²`: the Hamiltonian flow has matrix
/// `M = [[-1, -½], [-2, 1]]` with `M² = 2I`, so
/// `e^{Mt} = cosh(√2 t) I + sinh(√2 t)/√2 · M`.
fn circuit_tpbvp(x0: f64, xt: f64, t: f64) -> (f64, f64, f64) {
    let r2 = 2f64.sqrt();
    let (c, s) = ((r2 * t).cosh(), (r2 * t).sinh() / r2);
    // x(T) = c·x0 + s·(-x0 - λ0/2)
    let lambda0 = 2.0 * ((c - s) * x0 - xt) / s;
    // Propagated back from T: x0 = (c + s)·xT + s·λT/2.
    let lambda_t = 2.0 * (x0 - (c + s) * xt) / s;
    let cost = 0.5 * (lambda0 * x0 - lambda_t * xt);
    (lambda0, lambda_t, cost)
}

#[test]
fn circuit_shooting_matches_closed_form() {
    let integ = IntegratorConfig::default();
    for horizon in [2.0, 5.0, 20.0] {
        let p = problem("rl_circuit").with_horizon(horizon).unwrap();
        let sol = solve_tpbvp_shooting(&p, &integ, SHOOTING_TOL).unwrap();
        let (lambda0, _, cost) = circuit_tpbvp(p.x0[0], p.xt[0], horizon);
        assert!(sol.converged);
        assert!((sol.costate_init[0] - lambda0).abs() < 1e-4, "T={horizon}: {} vs {lambda0}", sol.costate_init[0]);
        assert!((sol.optimal_cost - cost).abs() < 1e-4, "T={horizon}: {} vs {cost}", sol.optimal_cost);
        assert!((sol.trajectory.final_state()[0] - p.xt[0]).abs() < 1e-6);
    }
}

#[test]
fn circuit_regulator_values_match_scalar_riccati() {
    // 2p + p² = 1 for the forward regulator, -2p + p² = 1 for the reverse-time one.
    let p = problem("rl_circuit");
    let (v_fwd, v_bwd) = regulator_values(&p, &IntegratorConfig::default()).unwrap();
    let p_fwd = 2f64.sqrt() - 1.0;
    let p_bwd = 1.0 + 2f64.sqrt();
    assert!((v_fwd - p_fwd * p.x0[0].powi(2)).abs() < 1e-10);
    assert!((v_bwd - p_bwd * p.xt[0].powi(2)).abs() < 1e-10);

    // Over a long horizon the optimal cost approaches the sum of both.
    let (_, _, cost) = circuit_tpbvp(p.x0[0], p.xt[0], 20.0);
    assert!((v_fwd + v_bwd - cost).abs() < 1e-10);
}

#[test]
fn manipulator_riccati_matches_hand_solution() {
    // A = [[0, s], [a, b]], B = [0, s]ᵀ, Q = [[10, 1], [1, 10]], R = 1, with
    // (s, a, b) = (1, -10, -2) forward and (-1, 10, 2) for the reversed plant.
    // Componentwise the Riccati equation reads
    //   2a·p₂ + 10 - p₂² = 0,  2(s·p₂ + b·p₃) + 10 - p₃² = 0,
    //   s·p₁ + a·p₃ + b·p₂ + 1 - p₂p₃ = 0.
    let p = problem("manipulator");
    let basis = BasisSet::for_benchmark(Benchmark::Manipulator);
    for (dir, s, a, b) in [
        (RegulatorDirection::Forward, 1.0, -10.0, -2.0),
        (RegulatorDirection::Backward, -1.0, 10.0, 2.0),
    ] {
        let p2 = a + s * (a * a + 10.0f64).sqrt();
        let p3 = b + (b * b + 2.0 * s * p2 + 10.0).sqrt();
        let p1 = (p2 * p3 - a * p3 - b * p2 - 1.0) / s;
        let sol = linear_regulator(&p, dir).unwrap();
        let w = quadratic_weights(&sol.p, &basis, dir).unwrap().w;
        let expect = [p1, 2.0 * p2, p3];
        for k in 0..3 {
            assert!((w[k] - expect[k]).abs() < 1e-9, "{dir} term {k}: {} vs {}", w[k], expect[k]);
        }
        assert!(sol.closed_loop_eigs.iter().all(|e| e.re < 0.0));
        assert!(w.rows(3, 4).iter().all(|v| *v == 0.0));
    }
}

#[test]
fn cubic_optimal_closed_loop_follows_closed_form() {
    // With u = -½V₊', ẋ = -x√(1+x⁴), which integrates to
    // asinh(1/x²) = 2t + asinh(1/x0²).
    let p = problem("cubic");
    let policy = |x: &State| DVector::from_element(1, -0.5 * cubic_value(x[0], RegulatorDirection::Forward).1);
    let x0 = DVector::from_element(1, 1.5);
    let traj = simulate(&p.system, &p.cost, &policy, &x0, 3.0, &IntegratorConfig::default(), TimeDirection::Forward, None)
        .unwrap();
    for (t, x) in traj.times.iter().zip(&traj.states).step_by(250) {
        let exact = 1.0 / (2.0 * t + (1.0 / 2.25f64).asinh()).sinh().sqrt();
        assert!((x[0] - exact).abs() < 1e-9, "t={t}: {} vs {exact}", x[0]);
    }
    // Accumulated cost plus the value left at t = 3 is V₊(x0), up to the
    // trapezoidal error of the steep initial transient.
    let v = cubic_value(1.5, RegulatorDirection::Forward).0;
    let rest = cubic_value(traj.final_state()[0], RegulatorDirection::Forward).0;
    assert!((traj.total_cost() + rest - v).abs() < 1e-4, "{} vs {v}", traj.total_cost() + rest);
}

#[test]
fn cubic_projection_matches_continuous_least_squares() {
    // L² projection of V₊ onto [x², x⁴] over [-1.5, 1.5] by Simpson quadrature.
    let n = 3000;
    let h = 3.0 / n as f64;
    let mut gram = [[0.0; 2]; 2];
    let mut rhs = [0.0; 2];
    for i in 0..=n {
        let x = -1.5 + i as f64 * h;
        let wt = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let phi = [x * x, x.powi(4)];
        let v = cubic_value(x, RegulatorDirection::Forward).0;
        for a in 0..2 {
            rhs[a] += wt * phi[a] * v;
            for b in 0..2 {
                gram[a][b] += wt * phi[a] * phi[b];
            }
        }
    }
    let det = gram[0][0] * gram[1][1] - gram[0][1] * gram[1][0];
    let w0 = (rhs[0] * gram[1][1] - rhs[1] * gram[0][1]) / det;
    let w1 = (gram[0][0] * rhs[1] - gram[1][0] * rhs[0]) / det;

    let basis = BasisSet::for_benchmark(Benchmark::Cubic);
    let proj = project_value_on_basis(
        |x| cubic_value(x[0], RegulatorDirection::Forward).0,
        &basis,
        &vec![(-1.5, 1.5)],
        301,
    )
    .unwrap();
    assert!((proj[0] - w0).abs() < 5e-3, "{} vs {w0}", proj[0]);
    assert!((proj[1] - w1).abs() < 5e-3, "{} vs {w1}", proj[1]);
}

#[test]
fn cubic_long_horizon_shooting() {
    let p = problem("cubic").with_horizon(10.0).unwrap();
    let integ = IntegratorConfig::default();
    let sol = solve_tpbvp_shooting(&p, &integ, SHOOTING_TOL).unwrap();
    assert!(sol.converged && sol.residual <= 1e-6, "residual {}", sol.residual);
    // At mid-horizon the state is the sum of the two optimal boundary
    // layers, 1/√sinh(2t + asinh(1/x²)) from each end.
    let layer = |x: f64, t: f64| 1.0 / (2.0 * t + (1.0 / (x * x)).asinh()).sinh().sqrt();
    let expect = layer(p.x0[0], 5.0) + layer(p.xt[0], 5.0);
    let mid = sol.trajectory.states[sol.trajectory.len() / 2][0];
    assert!((mid - expect).abs() < 0.05 * expect, "x(5) = {mid}, layers give {expect}");
    // Regulator values bound the optimal cost from above up to the layers'
    // exponentially small overlap.
    let (v_fwd, v_bwd) = regulator_values(&p, &integ).unwrap();
    assert!(sol.optimal_cost > 0.0);
    assert!((sol.optimal_cost - (v_fwd + v_bwd)).abs() < 1e-3, "{} vs {}", sol.optimal_cost, v_fwd + v_bwd);
}

#[test]
fn zero_boundary_costs_nothing() {
    for name in ["rl_circuit", "cubic", "manipulator"] {
        let p = problem(name);
        let zero = State::zeros(p.x0.len());
        let p = p.with_boundary(zero.clone(), zero).unwrap();
        let sol = solve_tpbvp_shooting(&p, &IntegratorConfig::default(), SHOOTING_TOL).unwrap();
        assert_eq!(sol.optimal_cost, 0.0, "{name}");
        assert!(sol.trajectory.states.iter().all(|x| x.norm() == 0.0));
    }
}

#[test]
fn cubic_shooting_far_from_origin() {
    // The linearized guess is far off at |x| = 2 (V₊'(2) ≈ 50 against 4).
    let p = problem("cubic").with_horizon(10.0).unwrap();
    let p = p.with_boundary(DVector::from_element(1, 2.0), DVector::from_element(1, 2.0)).unwrap();
    let sol = solve_tpbvp_shooting(&p, &IntegratorConfig::default(), SHOOTING_TOL).unwrap();
    let layers = cubic_value(2.0, RegulatorDirection::Forward).0 + cubic_value(2.0, RegulatorDirection::Backward).0;
    assert!((sol.optimal_cost - layers).abs() < 1e-3, "{} vs {layers}", sol.optimal_cost);
    let lambda0 = cubic_value(2.0, RegulatorDirection::Forward).1;
    assert!((sol.costate_init[0] - lambda0).abs() < 1e-3 * lambda0);
}
