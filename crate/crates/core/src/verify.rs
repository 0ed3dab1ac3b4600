//! The acceptance suite: seven end-to-end checks over learner, composer and
//! oracle, shared by `boundary-rl verify` and the `acceptance` test target.

use std::collections::HashMap;
use std::fmt;
use std::time::Instant;

use nalgebra::DVector;

use crate::composer::{interior_quietness, near_optimality_gap, terminal_error, CompositeController, CompositionMode};
use crate::config::ExperimentConfig;
use crate::critic::{policy_from_weights, BasisSet, CriticWeights, RegulatorDirection};
use crate::dynamics::{make_benchmark, Benchmark, BoundaryProblem, State};
use crate::error::{Error, Result};
use crate::learner::{held_out_bellman_residual, train_regulator, LearnerConfig, TrainingOutcome};
use crate::oracle::{
    cubic_value, hjb_residual, linear_regulator, linearize, project_value_on_basis, regulator_values,
    riccati_residual, solve_tpbvp_shooting, SHOOTING_TOL,
};
use crate::sim::{simulate, FeedbackLaw, IntegratorConfig, TimeDirection};

/// Identifier and title of every check, in order.
pub const CHECKS: [(u8, &str); 7] = [
    (1, "circuit forward weight"),
    (2, "circuit backward weight and eigenvalue"),
    (3, "cubic critic vs analytic value"),
    (4, "near-optimality gap monotone in epsilon"),
    (5, "manipulator composite boundary behaviour"),
    (6, "invariant suites"),
    (7, "persistent excitation"),
];

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{}] {} ({:.1} s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.seconds,
            self.detail
        )
    }
}

#[derive(Clone)]
struct Trained {
    outcome: TrainingOutcome,
    converged: bool,
    status: String,
    seconds: f64,
}

/// Runs the checks, training each regulator at most once.
pub struct Verifier {
    seed: u64,
    integ: IntegratorConfig,
    trained: HashMap<(Benchmark, RegulatorDirection), std::result::Result<Trained, String>>,
}

fn problem(bench: Benchmark) -> BoundaryProblem {
    make_benchmark(bench.name(), &Default::default()).expect("reference benchmark builds")
}

fn grid_1d(lo: f64, hi: f64, count: usize) -> Vec<State> {
    (0..count)
        .map(|i| DVector::from_element(1, lo + (hi - lo) * i as f64 / (count - 1) as f64))
        .collect()
}

fn grid_2d(lo: f64, hi: f64, per_axis: usize) -> Vec<State> {
    let axis: Vec<f64> = (0..per_axis)
        .map(|i| lo + (hi - lo) * i as f64 / (per_axis - 1) as f64)
        .collect();
    axis.iter()
        .flat_map(|&a| axis.iter().map(move |&b| DVector::from_vec(vec![a, b])))
        .collect()
}

/// Grid of start states over a problem's training box, origin excluded.
fn held_out_starts(p: &BoundaryProblem) -> Vec<State> {
    let starts = match p.system.state_dim() {
        1 => grid_1d(p.training_box[0].0, p.training_box[0].1, 13),
        _ => grid_2d(p.training_box[0].0, p.training_box[0].1, 5),
    };
    starts.into_iter().filter(|x| x.norm() > 0.0).collect()
}

struct Check {
    passed: bool,
    notes: Vec<String>,
}

impl Check {
    fn new() -> Self {
        Self {
            passed: true,
            notes: Vec::new(),
        }
    }

    fn expect(&mut self, ok: bool, note: String) {
        self.passed &= ok;
        self.notes.push(if ok { note } else { format!("FAILED {note}") });
    }
}

impl Verifier {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            integ: IntegratorConfig::default(),
            trained: HashMap::new(),
        }
    }

    fn seed_for(&self, bench: Benchmark, direction: RegulatorDirection) -> u64 {
        let mut cfg = ExperimentConfig::default_for(bench);
        cfg.seed = self.seed;
        cfg.phase_seed(&format!("train-{direction}"))
    }

    fn train(&mut self, bench: Benchmark, direction: RegulatorDirection) -> std::result::Result<Trained, String> {
        if let Some(t) = self.trained.get(&(bench, direction)) {
            return t.clone();
        }
        let p = problem(bench);
        let basis = BasisSet::for_benchmark(bench);
        let cfg = LearnerConfig::for_benchmark(bench);
        let start = Instant::now();
        let res = train_regulator(&p, &basis, &cfg, &self.integ, direction, self.seed_for(bench, direction));
        let seconds = start.elapsed().as_secs_f64();
        let entry = match res {
            Ok(outcome) => Ok(Trained {
                outcome,
                converged: true,
                status: "converged".into(),
                seconds,
            }),
            Err(Error::NonConvergence { outcome, iterations, .. }) => Ok(Trained {
                outcome: *outcome,
                converged: false,
                status: format!("not converged after {iterations} checkpoints"),
                seconds,
            }),
            Err(Error::PeViolation { outcome, lambda_min, .. }) => Ok(Trained {
                outcome: *outcome,
                converged: false,
                status: format!("excitation lost (lambda_min {lambda_min:.2e})"),
                seconds,
            }),
            Err(e) => Err(format!("{bench} {direction} training failed: {e}")),
        };
        self.trained.insert((bench, direction), entry.clone());
        entry
    }

    pub fn run(&mut self, id: u8) -> CheckResult {
        let name = CHECKS
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, n)| *n)
            .unwrap_or("unknown check");
        let start = Instant::now();
        let outcome = match id {
            1 => self.circuit_forward(),
            2 => self.circuit_backward(),
            3 => self.cubic(),
            4 => self.gap_monotonicity(),
            5 => self.manipulator_composite(),
            6 => self.invariants(),
            7 => self.persistent_excitation(),
            _ => Err(format!("no check with id {id}")),
        };
        let seconds = start.elapsed().as_secs_f64();
        let (passed, detail) = match outcome {
            Ok(c) => (c.passed, c.notes.join("; ")),
            Err(msg) => (false, msg),
        };
        CheckResult {
            id,
            name,
            passed,
            detail,
            seconds,
        }
    }

    pub fn run_all(&mut self) -> Vec<CheckResult> {
        CHECKS.iter().map(|(id, _)| self.run(*id)).collect()
    }

    fn circuit_forward(&mut self) -> std::result::Result<Check, String> {
        let t = self.train(Benchmark::RlCircuit, RegulatorDirection::Forward)?;
        let mut c = Check::new();
        let w = t.outcome.weights.w[0];
        let target = 2f64.sqrt() - 1.0;
        c.expect(t.converged, t.status.clone());
        c.expect((w - target).abs() <= 0.05, format!("w+ = {w:.5} (oracle {target:.5})"));
        c.expect(t.seconds <= 60.0, format!("trained in {:.2} s", t.seconds));
        Ok(c)
    }

    fn circuit_backward(&mut self) -> std::result::Result<Check, String> {
        let t = self.train(Benchmark::RlCircuit, RegulatorDirection::Backward)?;
        let p = problem(Benchmark::RlCircuit);
        let basis = BasisSet::for_benchmark(Benchmark::RlCircuit);
        let mut c = Check::new();
        let w = t.outcome.weights.w[0];
        let target = 1.0 + 2f64.sqrt();
        c.expect(t.converged, t.status.clone());
        c.expect((w.abs() - target).abs() <= 0.1, format!("|w-| = {:.5} (oracle {target:.5})", w.abs()));
        let eig = reverse_time_slope(&p, &basis, &t.outcome.weights).map_err(|e| e.to_string())?;
        c.expect(
            (eig + 2f64.sqrt()).abs() <= 0.1,
            format!("reverse-time closed-loop eigenvalue {eig:.5} (oracle {:.5})", -2f64.sqrt()),
        );
        Ok(c)
    }

    fn cubic(&mut self) -> std::result::Result<Check, String> {
        let start = Instant::now();
        let t = self.train(Benchmark::Cubic, RegulatorDirection::Forward)?;
        let p = problem(Benchmark::Cubic);
        let basis = BasisSet::for_benchmark(Benchmark::Cubic);
        let cfg = LearnerConfig::for_benchmark(Benchmark::Cubic);
        let mut c = Check::new();
        c.expect(t.converged, t.status.clone());
        let w = &t.outcome.weights.w;
        let residual = held_out_bellman_residual(&p, &basis, &t.outcome.weights, &self.integ, cfg.window, 3.0, &held_out_starts(&p))
            .map_err(|e| e.to_string())?;
        c.expect(residual <= 0.05, format!("held-out Bellman residual {:.2}%", 100.0 * residual));
        let proj = project_value_on_basis(
            |x| cubic_value(x[0], RegulatorDirection::Forward).0,
            &basis,
            &p.training_box,
            301,
        )
        .map_err(|e| e.to_string())?;
        let dist = (w - &proj).amax();
        c.expect(
            dist <= 0.2,
            format!(
                "w+ = [{:.4}, {:.4}], projection of V+ = [{:.4}, {:.4}], max deviation {dist:.3}",
                w[0], w[1], proj[0], proj[1]
            ),
        );
        let elapsed = start.elapsed().as_secs_f64();
        c.expect(elapsed <= 120.0, format!("{elapsed:.2} s"));
        Ok(c)
    }

    fn gap_monotonicity(&mut self) -> std::result::Result<Check, String> {
        let base = problem(Benchmark::RlCircuit);
        let (v_fwd, v_bwd) = regulator_values(&base, &self.integ).map_err(|e| e.to_string())?;
        let mut c = Check::new();
        let mut gaps = Vec::new();
        let mut last_cost = 0.0;
        for eps in [0.5, 0.2, 0.1, 0.05] {
            let p = base.with_horizon(1.0 / eps).map_err(|e| e.to_string())?;
            let sol = solve_tpbvp_shooting(&p, &self.integ, SHOOTING_TOL).map_err(|e| e.to_string())?;
            gaps.push(near_optimality_gap(v_fwd, v_bwd, sol.optimal_cost));
            last_cost = sol.optimal_cost;
        }
        let strictly = gaps.windows(2).all(|g| g[1] < g[0]);
        c.expect(
            strictly,
            format!(
                "gaps over eps 0.5/0.2/0.1/0.05: {}",
                gaps.iter().map(|g| format!("{g:.3e}")).collect::<Vec<_>>().join(", ")
            ),
        );
        let rel = gaps[3] / last_cost;
        c.expect(rel <= 0.02, format!("gap at eps 0.05 is {:.2e} of J*", rel));
        Ok(c)
    }

    fn manipulator_composite(&mut self) -> std::result::Result<Check, String> {
        let start = Instant::now();
        let fwd = self.train(Benchmark::Manipulator, RegulatorDirection::Forward)?;
        let bwd = self.train(Benchmark::Manipulator, RegulatorDirection::Backward)?;
        let p = problem(Benchmark::Manipulator);
        let basis = BasisSet::for_benchmark(Benchmark::Manipulator);
        let cfg = LearnerConfig::for_benchmark(Benchmark::Manipulator);
        let mut c = Check::new();
        c.expect(fwd.converged, format!("forward {}", fwd.status));
        c.expect(bwd.converged, format!("backward {}", bwd.status));
        for t in [&fwd, &bwd] {
            let r = held_out_bellman_residual(&p, &basis, &t.outcome.weights, &self.integ, cfg.window, 3.0, &held_out_starts(&p))
                .map_err(|e| e.to_string())?;
            c.expect(
                r <= 0.10,
                format!("{} held-out Bellman residual {:.2}%", t.outcome.weights.direction, 100.0 * r),
            );
        }
        let make = |w: &CriticWeights| -> Result<_> { Ok(policy_from_weights(&p.system, &p.cost, &basis, w)?.into()) };
        let mut quiet = Vec::new();
        for horizon in [5.0, 10.0, 20.0] {
            let ph = p.with_horizon(horizon).map_err(|e| e.to_string())?;
            let ctrl = CompositeController::new(
                make(&fwd.outcome.weights).map_err(|e| e.to_string())?,
                make(&bwd.outcome.weights).map_err(|e| e.to_string())?,
                horizon,
                CompositionMode::Overlay,
            )
            .map_err(|e| e.to_string())?;
            let traj = ctrl.run(&ph, &self.integ).map_err(|e| e.to_string())?;
            quiet.push(interior_quietness(&traj));
            if horizon == 20.0 {
                let q = interior_quietness(&traj);
                let err = terminal_error(&traj, &ph.xt);
                c.expect(q <= 0.02, format!("T=20 interior max |x| {q:.2e}"));
                c.expect(err <= 0.05, format!("T=20 terminal error {err:.2e}"));
            }
        }
        c.expect(
            quiet.windows(2).all(|q| q[1] < q[0]),
            format!(
                "interior max |x| for T=5/10/20: {}",
                quiet.iter().map(|q| format!("{q:.2e}")).collect::<Vec<_>>().join(", ")
            ),
        );
        let elapsed = start.elapsed().as_secs_f64();
        c.expect(elapsed <= 600.0, format!("{elapsed:.1} s"));
        Ok(c)
    }

    fn invariants(&mut self) -> std::result::Result<Check, String> {
        let start = Instant::now();
        let mut c = Check::new();

        // Filter matrix stays symmetric PSD in every training run so far.
        let mut worst_asym = 0.0_f64;
        let mut worst_eig = f64::INFINITY;
        let mut runs = 0;
        for bench in Benchmark::ALL {
            for dir in [RegulatorDirection::Forward, RegulatorDirection::Backward] {
                if let Ok(t) = self.train(bench, dir) {
                    let scale = t.outcome.xi.amax().max(1.0);
                    worst_asym = worst_asym.max(t.outcome.max_xi_asymmetry);
                    worst_eig = worst_eig.min(t.outcome.min_xi_eigenvalue / scale);
                    runs += 1;
                }
            }
        }
        c.expect(
            runs == 6 && worst_asym <= 1e-9 && worst_eig >= -1e-10,
            format!("xi over {runs} runs: asymmetry {worst_asym:.1e}, min eigenvalue {worst_eig:.1e}"),
        );

        let grad_err = Benchmark::ALL
            .iter()
            .map(|b| basis_gradient_error(&BasisSet::for_benchmark(*b)))
            .fold(0.0, f64::max);
        c.expect(grad_err <= 1e-6, format!("basis gradient vs finite differences {grad_err:.1e}"));

        let order = rk4_observed_order().map_err(|e| e.to_string())?;
        c.expect((order - 4.0).abs() <= 0.2, format!("RK4 observed order {order:.3}"));

        let ric = riccati_residuals().map_err(|e| e.to_string())?;
        c.expect(ric <= 1e-10, format!("Riccati residual {ric:.1e}"));

        let hjb = cubic_hjb_residual().map_err(|e| e.to_string())?;
        c.expect(hjb <= 1e-10, format!("cubic HJB residual {hjb:.1e}"));

        let stat = shooting_stationarity(&self.integ).map_err(|e| e.to_string())?;
        c.expect(stat <= 1e-8, format!("shooting stationarity {stat:.1e}"));

        let same = self.determinism().map_err(|e| e.to_string())?;
        c.expect(same, "repeat training bitwise identical".into());

        let elapsed = start.elapsed().as_secs_f64();
        c.expect(elapsed <= 120.0, format!("{elapsed:.1} s"));
        Ok(c)
    }

    fn determinism(&self) -> Result<bool> {
        let p = problem(Benchmark::RlCircuit);
        let basis = BasisSet::for_benchmark(Benchmark::RlCircuit);
        let cfg = LearnerConfig::for_benchmark(Benchmark::RlCircuit);
        let seed = self.seed_for(Benchmark::RlCircuit, RegulatorDirection::Forward);
        let run = || -> Result<Vec<u8>> {
            let out = train_regulator(&p, &basis, &cfg, &self.integ, RegulatorDirection::Forward, seed)?;
            let mut buf = Vec::new();
            out.log.write_csv(&mut buf)?;
            buf.extend(out.weights.w.iter().flat_map(|w| w.to_le_bytes()));
            Ok(buf)
        };
        Ok(run()? == run()?)
    }

    fn persistent_excitation(&mut self) -> std::result::Result<Check, String> {
        let mut c = Check::new();
        for bench in Benchmark::ALL {
            for dir in [RegulatorDirection::Forward, RegulatorDirection::Backward] {
                let t = self.train(bench, dir)?;
                let at = t.outcome.pe_established_at;
                c.expect(
                    at.is_some_and(|s| s <= 5.0),
                    format!("{bench} {dir}: floor reached at {}", at.map_or("never".into(), |s| format!("{s:.2} s"))),
                );
            }
        }
        for bench in Benchmark::ALL {
            for dir in [RegulatorDirection::Forward, RegulatorDirection::Backward] {
                let p = problem(bench);
                let basis = BasisSet::for_benchmark(bench);
                let mut cfg = LearnerConfig::for_benchmark(bench);
                cfg.noise.amplitude = 0.0;
                cfg.resets = false;
                let res = train_regulator(&p, &basis, &cfg, &self.integ, dir, self.seed_for(bench, dir));
                let raised = matches!(res, Err(Error::PeViolation { .. }));
                c.expect(
                    raised,
                    format!(
                        "{bench} {dir} without exploration: {}",
                        match &res {
                            Err(Error::PeViolation { to, .. }) => format!("violation at t = {to:.0} s"),
                            Err(e) => format!("unexpected error: {e}"),
                            Ok(_) => "converged".into(),
                        }
                    ),
                );
            }
        }
        Ok(c)
    }
}

/// `d/dx` of the reverse-time closed loop at the origin for a scalar plant.
fn reverse_time_slope(p: &BoundaryProblem, basis: &BasisSet, w: &CriticWeights) -> Result<f64> {
    let policy = policy_from_weights(&p.system, &p.cost, basis, w)?;
    let field = |x: f64| -> Result<f64> {
        let s = DVector::from_element(1, x);
        let v = p.system.eval_drift(&s)? + p.system.eval_input_map(&s)? * policy.control(&s);
        Ok(-v[0])
    };
    let h = 1e-4;
    Ok((field(h)? - field(-h)?) / (2.0 * h))
}

fn basis_gradient_error(basis: &BasisSet) -> f64 {
    let n = basis.state_dim();
    let mut worst = 0.0_f64;
    for k in 0..25 {
        let x = State::from_fn(n, |i, _| ((k * (i + 3)) as f64 * 0.37).sin() * 1.3);
        let grad = basis.gradient(&x);
        for j in 0..n {
            let h = 1e-6;
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[j] += h;
            lo[j] -= h;
            let fd = (basis.eval(&hi) - basis.eval(&lo)) / (2.0 * h);
            for r in 0..basis.len() {
                worst = worst.max((fd[r] - grad[(r, j)]).abs() / (1.0 + grad[(r, j)].abs()));
            }
        }
    }
    worst
}

/// Observed order of the integrator on the circuit's free response.
fn rk4_observed_order() -> Result<f64> {
    let p = problem(Benchmark::RlCircuit);
    let zero = |_: &State| DVector::zeros(1);
    let x0 = DVector::from_element(1, 1.0);
    let exact = (-2.0f64).exp();
    let err = |h: f64| -> Result<f64> {
        let cfg = IntegratorConfig {
            step: h,
            ..IntegratorConfig::default()
        };
        let traj = simulate(&p.system, &p.cost, &zero, &x0, 2.0, &cfg, TimeDirection::Forward, None)?;
        Ok((traj.final_state()[0] - exact).abs())
    };
    Ok((err(0.2)? / err(0.1)?).log2())
}

fn riccati_residuals() -> Result<f64> {
    let mut worst = 0.0_f64;
    for bench in [Benchmark::RlCircuit, Benchmark::Manipulator] {
        let p = problem(bench);
        let (a, b) = linearize(&p)?;
        let q = p.cost.state_weight();
        let r_inv = p.cost.control_weight_inv();
        for dir in [RegulatorDirection::Forward, RegulatorDirection::Backward] {
            let sol = linear_regulator(&p, dir)?;
            let (a_own, b_own) = match dir {
                RegulatorDirection::Forward => (a.clone(), b.clone()),
                RegulatorDirection::Backward => (-&a, -&b),
            };
            worst = worst.max(riccati_residual(&a_own, &b_own, q, r_inv, &sol.p).amax());
        }
    }
    Ok(worst)
}

fn cubic_hjb_residual() -> Result<f64> {
    let p = problem(Benchmark::Cubic);
    let mut worst = 0.0_f64;
    for x in grid_1d(-2.0, 2.0, 1000) {
        for dir in [RegulatorDirection::Forward, RegulatorDirection::Backward] {
            let grad = DVector::from_element(1, cubic_value(x[0], dir).1);
            worst = worst.max(hjb_residual(&p, &x, &grad, dir)?.abs());
        }
    }
    Ok(worst)
}

/// `max |u + ½R⁻¹gᵀλ|` along shooting solutions of every benchmark.
fn shooting_stationarity(integ: &IntegratorConfig) -> Result<f64> {
    let mut worst = 0.0_f64;
    for bench in Benchmark::ALL {
        let p = problem(bench);
        let sol = solve_tpbvp_shooting(&p, integ, SHOOTING_TOL)?;
        for ((x, u), lambda) in sol.trajectory.states.iter().zip(&sol.trajectory.controls).zip(&sol.costates) {
            let g = p.system.eval_input_map(x)?;
            let resid = u + p.cost.control_weight_inv() * g.transpose() * lambda * 0.5;
            worst = worst.max(resid.amax());
        }
    }
    Ok(worst)
}
