//! Finite-horizon boundary control assembled from a forward and a backward
//! regulator.
//!
//! Over a long horizon `T = 1/ε` the optimal trajectory splits into an
//! initial layer leaving `x0` (governed by the forward regulator), a quiet
//! interior near the origin, and a terminal layer arriving at `xT`
//! (governed by the backward regulator run in reverse time).

use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::critic::{CriticPolicy, RegulatorDirection};
use crate::dynamics::{BoundaryProblem, Control, CostSpec, State};
use crate::error::{Error, Result};
use crate::oracle::finite_horizon_cost;
use crate::sim::{fmt_num, parse_row, simulate, FeedbackLaw, IntegratorConfig, TimeDirection, Trajectory};

/// `(τ, ε) = (t/T, 1/T)`.
pub fn scale_time(t: f64, horizon: f64) -> Result<(f64, f64)> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }
    Ok((t / horizon, 1.0 / horizon))
}

/// A state-feedback law tagged with the boundary layer it serves.
#[derive(Clone)]
pub struct RegulatorPolicy {
    law: Arc<dyn FeedbackLaw>,
    direction: RegulatorDirection,
}

impl RegulatorPolicy {
    pub fn new(law: impl FeedbackLaw + 'static, direction: RegulatorDirection) -> Self {
        Self {
            law: Arc::new(law),
            direction,
        }
    }

    pub fn direction(&self) -> RegulatorDirection {
        self.direction
    }
}

impl From<CriticPolicy> for RegulatorPolicy {
    fn from(p: CriticPolicy) -> Self {
        let direction = p.direction();
        Self::new(p, direction)
    }
}

impl FeedbackLaw for RegulatorPolicy {
    fn control(&self, x: &State) -> Control {
        self.law.control(x)
    }
}

impl std::fmt::Debug for RegulatorPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RegulatorPolicy").field("direction", &self.direction).finish()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompositionMode {
    /// Experimental: one closed-loop run with `u₊(x - x̄₋(t)) + u₋(x̄₋(t))`.
    Additive,
    /// Sum of the two separately simulated boundary layers.
    #[default]
    Overlay,
}

#[derive(Clone, Debug)]
pub struct CompositeController {
    forward: RegulatorPolicy,
    backward: RegulatorPolicy,
    horizon: f64,
    mode: CompositionMode,
}

impl CompositeController {
    pub fn new(
        forward: RegulatorPolicy,
        backward: RegulatorPolicy,
        horizon: f64,
        mode: CompositionMode,
    ) -> Result<Self> {
        if forward.direction() != RegulatorDirection::Forward || backward.direction() != RegulatorDirection::Backward {
            return Err(Error::InvalidArgument(
                "composite needs a forward and a backward regulator, in that order".into(),
            ));
        }
        scale_time(0.0, horizon)?;
        Ok(Self {
            forward,
            backward,
            horizon,
            mode,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn mode(&self) -> CompositionMode {
        self.mode
    }

    pub fn forward(&self) -> &RegulatorPolicy {
        &self.forward
    }

    pub fn backward(&self) -> &RegulatorPolicy {
        &self.backward
    }

    /// Runs the composite on `problem` in the controller's mode.
    pub fn run(&self, problem: &BoundaryProblem, cfg: &IntegratorConfig) -> Result<Trajectory> {
        match self.mode {
            CompositionMode::Additive => compose_additive(self, problem, cfg),
            CompositionMode::Overlay => {
                let (fwd, bwd) = boundary_layers(self, problem, cfg)?;
                compose_overlay(&fwd, &bwd, self.horizon, &problem.cost)
            }
        }
    }
}

/// Simulates the two boundary layers: forward from `x0` under `u₊`, and in
/// reverse time from `xT` under `u₋` (not yet reflected).
pub fn boundary_layers(
    ctrl: &CompositeController,
    problem: &BoundaryProblem,
    cfg: &IntegratorConfig,
) -> Result<(Trajectory, Trajectory)> {
    check_dims(problem, ctrl)?;
    let fwd = simulate(
        &problem.system,
        &problem.cost,
        &ctrl.forward,
        &problem.x0,
        ctrl.horizon,
        cfg,
        TimeDirection::Forward,
        None,
    )?;
    let bwd = simulate(
        &problem.system,
        &problem.cost,
        &ctrl.backward,
        &problem.xt,
        ctrl.horizon,
        cfg,
        TimeDirection::Reverse,
        None,
    )?;
    Ok((fwd, bwd))
}

fn check_dims(problem: &BoundaryProblem, ctrl: &CompositeController) -> Result<()> {
    let n = problem.system.state_dim();
    let m = problem.system.input_dim();
    let probe = State::zeros(n);
    for (what, law) in [("forward control", &ctrl.forward), ("backward control", &ctrl.backward)] {
        let u = law.control(&probe);
        if u.len() != m {
            return Err(Error::Dimension {
                what,
                expected: m,
                got: u.len(),
            });
        }
    }
    Ok(())
}

/// Pointwise sum of the forward layer and the time-reflected backward layer.
///
/// `backward_traj` must start at `xT` on the reverse clock; sample `k` of the
/// result combines forward sample `k` with backward sample `N - k`. The cost
/// column is recomputed from the summed states and controls.
pub fn compose_overlay(
    forward_traj: &Trajectory,
    backward_traj: &Trajectory,
    horizon: f64,
    cost: &CostSpec,
) -> Result<Trajectory> {
    let n = forward_traj.len();
    if n < 2 || backward_traj.len() != n {
        return Err(Error::GridMismatch(format!(
            "forward has {} samples, backward {}",
            n,
            backward_traj.len()
        )));
    }
    let (hf, hb) = (forward_traj.step(), backward_traj.step());
    if (hf - hb).abs() > 1e-12 * hf.abs().max(1.0) {
        return Err(Error::GridMismatch(format!("steps differ: {hf} vs {hb}")));
    }
    if (forward_traj.end_time() - forward_traj.start_time() - horizon).abs() > 0.5 * hf {
        return Err(Error::GridMismatch(format!(
            "trajectories span {} s, horizon is {horizon} s",
            forward_traj.end_time() - forward_traj.start_time()
        )));
    }
    if forward_traj.state_dim() != backward_traj.state_dim() || forward_traj.input_dim() != backward_traj.input_dim() {
        return Err(Error::GridMismatch("state or input dimensions differ".into()));
    }
    let mut out = Trajectory {
        times: forward_traj.times.clone(),
        states: Vec::with_capacity(n),
        controls: Vec::with_capacity(n),
        cost_integral: Vec::with_capacity(n),
    };
    for k in 0..n {
        out.states.push(&forward_traj.states[k] + &backward_traj.states[n - 1 - k]);
        out.controls.push(&forward_traj.controls[k] + &backward_traj.controls[n - 1 - k]);
    }
    accumulate_cost(&mut out, cost);
    Ok(out)
}

fn accumulate_cost(traj: &mut Trajectory, cost: &CostSpec) {
    traj.cost_integral.clear();
    let mut total = 0.0;
    traj.cost_integral.push(0.0);
    for k in 1..traj.len() {
        let h = traj.times[k] - traj.times[k - 1];
        total += 0.5
            * h
            * (cost.running_cost(&traj.states[k - 1], &traj.controls[k - 1])
                + cost.running_cost(&traj.states[k], &traj.controls[k]));
        traj.cost_integral.push(total);
    }
}

/// One closed-loop run of `ẋ = f + g·(u₊(x - x̄₋(t)) + u₋(x̄₋(t)))`, where
/// `x̄₋` is the reflected backward layer. The forward regulator corrects the
/// deviation from the terminal layer, which itself is followed open loop.
/// Between grid points `x̄₋` is cubic-Hermite interpolated.
pub fn compose_additive(ctrl: &CompositeController, problem: &BoundaryProblem, cfg: &IntegratorConfig) -> Result<Trajectory> {
    check_dims(problem, ctrl)?;
    let sys = &problem.system;
    let bwd = simulate(
        sys,
        &problem.cost,
        &ctrl.backward,
        &problem.xt,
        ctrl.horizon,
        cfg,
        TimeDirection::Reverse,
        None,
    )?;
    let n = bwd.len();
    let h = cfg.step;
    let reference: Vec<State> = (0..n).map(|k| bwd.states[n - 1 - k].clone()).collect();
    let slopes: Vec<State> = reference
        .iter()
        .map(|x| Ok(sys.eval_drift(x)? + sys.eval_input_map(x)? * ctrl.backward.control(x)))
        .collect::<Result<_>>()?;
    let reference_at = |k: usize, frac: f64| -> State {
        if frac == 0.0 || k + 1 >= n {
            return reference[k.min(n - 1)].clone();
        }
        let (s, s2, s3) = (frac, frac * frac, frac * frac * frac);
        &reference[k] * (2.0 * s3 - 3.0 * s2 + 1.0)
            + &slopes[k] * ((s3 - 2.0 * s2 + s) * h)
            + &reference[k + 1] * (-2.0 * s3 + 3.0 * s2)
            + &slopes[k + 1] * ((s3 - s2) * h)
    };
    let control = |x: &State, xr: &State| -> Control { ctrl.forward.control(&(x - xr)) + ctrl.backward.control(xr) };
    let field = |x: &State, xr: &State| -> Result<State> {
        Ok(sys.eval_drift(x)? + sys.eval_input_map(x)? * control(x, xr))
    };

    let mut traj = Trajectory {
        times: Vec::with_capacity(n),
        states: Vec::with_capacity(n),
        controls: Vec::with_capacity(n),
        cost_integral: Vec::new(),
    };
    let mut x = problem.x0.clone();
    traj.times.push(0.0);
    traj.controls.push(control(&x, &reference[0]));
    traj.states.push(x.clone());
    for k in 0..n - 1 {
        let mid = reference_at(k, 0.5);
        let k1 = field(&x, &reference[k])?;
        let k2 = field(&(&x + &k1 * (h / 2.0)), &mid)?;
        let k3 = field(&(&x + &k2 * (h / 2.0)), &mid)?;
        let k4 = field(&(&x + &k3 * h), &reference[k + 1])?;
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let norm = x.norm();
        if !norm.is_finite() || norm > cfg.max_state_norm {
            accumulate_cost(&mut traj, &problem.cost);
            return Err(Error::Divergence {
                time: (k + 1) as f64 * h,
                norm,
                partial: Some(Box::new(traj)),
            });
        }
        traj.times.push((k + 1) as f64 * h);
        traj.controls.push(control(&x, &reference[k + 1]));
        traj.states.push(x.clone());
    }
    accumulate_cost(&mut traj, &problem.cost);
    Ok(traj)
}

/// `|(V₊(x0) + V₋(xT)) - J*(T)|` with both regulator values taken in the
/// crate's convention, where `V₋ ≥ 0` is the reverse-time cost of reaching
/// `xT` from the origin.
pub fn near_optimality_gap(v_fwd: f64, v_bwd: f64, oracle_cost: f64) -> f64 {
    (v_fwd + v_bwd - oracle_cost).abs()
}

/// `max ‖x(t)‖` over the middle of the horizon, `t ∈ [0.3T, 0.7T]`.
pub fn interior_quietness(traj: &Trajectory) -> f64 {
    max_norm_between(traj, 0.3, 0.7)
}

/// `max ‖x(t)‖` for `t` between the fractions `lo` and `hi` of the span.
pub fn max_norm_between(traj: &Trajectory, lo: f64, hi: f64) -> f64 {
    let (t0, t1) = (traj.start_time(), traj.end_time());
    let span = t1 - t0;
    traj.times
        .iter()
        .zip(&traj.states)
        .filter(|(t, _)| **t >= t0 + lo * span - 1e-12 && **t <= t0 + hi * span + 1e-12)
        .map(|(_, x)| x.norm())
        .fold(0.0, f64::max)
}

pub fn terminal_error(traj: &Trajectory, xt: &State) -> f64 {
    (traj.final_state() - xt).norm()
}

/// Cost of a composed trajectory, recomputed from its samples.
pub fn composite_cost(traj: &Trajectory, cost: &CostSpec) -> f64 {
    finite_horizon_cost(traj, cost)
}

/// One row of an ε-sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub epsilon: f64,
    pub horizon: f64,
    pub terminal_error: f64,
    pub j_learned: f64,
    pub j_oracle: f64,
    pub gap: f64,
}

pub const SWEEP_HEADER: &str = "epsilon,T,terminal_error,J_learned,J_oracle,gap";

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        let vals = [r.epsilon, r.horizon, r.terminal_error, r.j_learned, r.j_oracle, r.gap];
        writeln!(w, "{}", vals.iter().map(|v| fmt_num(*v)).collect::<Vec<_>>().join(","))?;
    }
    Ok(())
}

pub fn read_sweep_csv<R: BufRead>(r: R) -> Result<Vec<SweepRow>> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty sweep csv".into()))??;
    if header.trim() != SWEEP_HEADER {
        return Err(Error::Parse(format!("unexpected sweep header `{header}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = parse_row(&line, 6, i + 2)?;
        rows.push(SweepRow {
            epsilon: v[0],
            horizon: v[1],
            terminal_error: v[2],
            j_learned: v[3],
            j_oracle: v[4],
            gap: v[5],
        });
    }
    Ok(rows)
}
