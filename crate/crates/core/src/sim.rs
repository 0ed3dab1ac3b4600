//! Fixed-step RK4 integration of closed loops in forward or reverse time.

use std::io::{BufRead, Write};

use crate::dynamics::{AffineSystem, Control, CostSpec, State};
use crate::error::{Error, Result};

/// State-feedback law `x ↦ u`.
pub trait FeedbackLaw: Send + Sync {
    fn control(&self, x: &State) -> Control;
}

impl<F> FeedbackLaw for F
where
    F: Fn(&State) -> Control + Send + Sync,
{
    fn control(&self, x: &State) -> Control {
        self(x)
    }
}

/// Exogenous input added to the feedback, as a function of the integration clock.
pub type NoiseFn<'a> = &'a dyn Fn(f64) -> Control;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeDirection {
    Forward,
    /// Integrates `dx/ds = -(f(x) + g(x)u)`.
    Reverse,
}

impl TimeDirection {
    pub fn sign(self) -> f64 {
        match self {
            TimeDirection::Forward => 1.0,
            TimeDirection::Reverse => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegratorConfig {
    pub step: f64,
    pub method: Method,
    pub max_state_norm: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            method: Method::Rk4,
            max_state_norm: 1e3,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::InvalidArgument(format!("integrator step must be positive, got {}", self.step)));
        }
        if !(self.max_state_norm > 0.0) {
            return Err(Error::InvalidArgument("max_state_norm must be positive".into()));
        }
        Ok(())
    }
}

fn closed_loop_field(
    sys: &AffineSystem,
    policy: &dyn FeedbackLaw,
    x: &State,
    t: f64,
    direction: TimeDirection,
    noise: Option<NoiseFn<'_>>,
) -> Result<State> {
    let mut u = policy.control(x);
    if let Some(e) = noise {
        u += e(t);
    }
    let v = sys.drift_raw(x)? + sys.input_map_raw(x) * u;
    Ok(v * direction.sign())
}

/// One RK4 step of the closed loop driven by `policy(x) + noise(t)`.
pub fn rk4_step_driven(
    sys: &AffineSystem,
    policy: &dyn FeedbackLaw,
    x: &State,
    t: f64,
    cfg: &IntegratorConfig,
    direction: TimeDirection,
    noise: Option<NoiseFn<'_>>,
) -> Result<State> {
    let h = cfg.step;
    let k1 = closed_loop_field(sys, policy, x, t, direction, noise)?;
    let k2 = closed_loop_field(sys, policy, &(x + &k1 * (h / 2.0)), t + h / 2.0, direction, noise)?;
    let k3 = closed_loop_field(sys, policy, &(x + &k2 * (h / 2.0)), t + h / 2.0, direction, noise)?;
    let k4 = closed_loop_field(sys, policy, &(x + &k3 * h), t + h, direction, noise)?;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    let norm = next.norm();
    if !norm.is_finite() || norm > cfg.max_state_norm {
        return Err(Error::Divergence {
            time: t + h,
            norm,
            partial: None,
        });
    }
    Ok(next)
}

pub fn rk4_step(
    sys: &AffineSystem,
    policy: &dyn FeedbackLaw,
    x: &State,
    cfg: &IntegratorConfig,
    direction: TimeDirection,
) -> Result<State> {
    rk4_step_driven(sys, policy, x, 0.0, cfg, direction, None)
}

/// Uniformly sampled closed-loop trajectory.
///
/// `cost_integral[k]` is the trapezoidal integral of the noiseless running
/// cost from the first sample up to sample `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub controls: Vec<Control>,
    pub cost_integral: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn step(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }

    pub fn start_time(&self) -> f64 {
        self.times.first().copied().unwrap_or(0.0)
    }

    pub fn end_time(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    pub fn final_state(&self) -> &State {
        self.states.last().expect("trajectory has at least one sample")
    }

    pub fn total_cost(&self) -> f64 {
        self.cost_integral.last().copied().unwrap_or(0.0)
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, |x| x.len())
    }

    pub fn input_dim(&self) -> usize {
        self.controls.first().map_or(0, |u| u.len())
    }

    /// Cumulative cost at an arbitrary time inside the support (linear
    /// interpolation, consistent with trapezoidal accumulation).
    fn cost_at(&self, t: f64) -> f64 {
        let h = self.step();
        if h == 0.0 {
            return self.cost_integral[0];
        }
        let pos = (t - self.start_time()) / h;
        let k = (pos.floor() as usize).min(self.len() - 2);
        let frac = (pos - k as f64).clamp(0.0, 1.0);
        self.cost_integral[k] + frac * (self.cost_integral[k + 1] - self.cost_integral[k])
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.state_dim();
        let m = self.input_dim();
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.push("J".into());
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut row = vec![fmt_num(self.times[k])];
            row.extend(self.states[k].iter().map(|v| fmt_num(*v)));
            row.extend(self.controls[k].iter().map(|v| fmt_num(*v)));
            row.push(fmt_num(self.cost_integral[k]));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty trajectory csv".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        let n = cols.iter().filter(|c| c.starts_with('x')).count();
        let m = cols.iter().filter(|c| c.starts_with('u')).count();
        if cols.first() != Some(&"t") || cols.last() != Some(&"J") || cols.len() != n + m + 2 {
            return Err(Error::Parse(format!("unexpected trajectory header `{header}`")));
        }
        let mut traj = Trajectory {
            times: Vec::new(),
            states: Vec::new(),
            controls: Vec::new(),
            cost_integral: Vec::new(),
        };
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals = parse_row(&line, cols.len(), lineno + 2)?;
            traj.times.push(vals[0]);
            traj.states.push(State::from_column_slice(&vals[1..=n]));
            traj.controls.push(Control::from_column_slice(&vals[n + 1..=n + m]));
            traj.cost_integral.push(vals[n + m + 1]);
        }
        Ok(traj)
    }
}

/// Shortest representation that parses back to exactly `v`; scientific
/// notation outside `[1e-4, 1e15)`.
pub fn fmt_num(v: f64) -> String {
    let mag = v.abs();
    if !v.is_finite() || v == 0.0 || (1e-4..1e15).contains(&mag) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub(crate) fn parse_row(line: &str, expected: usize, lineno: usize) -> Result<Vec<f64>> {
    let vals = line
        .trim()
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<f64>, _>>()
        .map_err(|e| Error::Parse(format!("line {lineno}: {e}")))?;
    if vals.len() != expected {
        return Err(Error::Parse(format!(
            "line {lineno}: expected {expected} fields, found {}",
            vals.len()
        )));
    }
    Ok(vals)
}

/// Simulates the closed loop for `duration` seconds of the integration clock.
///
/// The stored control includes the noise; the cost integral charges only
/// the feedback part `policy(x)`.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    sys: &AffineSystem,
    cost: &CostSpec,
    policy: &dyn FeedbackLaw,
    x_init: &State,
    duration: f64,
    cfg: &IntegratorConfig,
    direction: TimeDirection,
    noise: Option<NoiseFn<'_>>,
) -> Result<Trajectory> {
    cfg.validate()?;
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::InvalidArgument(format!("duration must be positive, got {duration}")));
    }
    if x_init.len() != sys.state_dim() {
        return Err(Error::Dimension {
            what: "initial state",
            expected: sys.state_dim(),
            got: x_init.len(),
        });
    }
    let h = cfg.step;
    let steps = (duration / h + 1e-9).floor() as usize;
    let mut traj = Trajectory {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        controls: Vec::with_capacity(steps + 1),
        cost_integral: Vec::with_capacity(steps + 1),
    };

    let mut x = x_init.clone();
    let mut u_fb = policy.control(&x);
    let mut rate = cost.running_cost(&x, &u_fb);
    let mut total = 0.0;
    let applied = |u_fb: &Control, t: f64| match noise {
        Some(e) => u_fb + e(t),
        None => u_fb.clone(),
    };
    traj.times.push(0.0);
    traj.controls.push(applied(&u_fb, 0.0));
    traj.states.push(x.clone());
    traj.cost_integral.push(0.0);

    for k in 0..steps {
        let t = k as f64 * h;
        x = match rk4_step_driven(sys, policy, &x, t, cfg, direction, noise) {
            Ok(next) => next,
            Err(Error::Divergence { time, norm, .. }) => {
                return Err(Error::Divergence {
                    time,
                    norm,
                    partial: Some(Box::new(traj)),
                })
            }
            Err(e) => return Err(e),
        };
        let t_next = (k + 1) as f64 * h;
        u_fb = policy.control(&x);
        let next_rate = cost.running_cost(&x, &u_fb);
        total += 0.5 * h * (rate + next_rate);
        rate = next_rate;
        traj.times.push(t_next);
        traj.controls.push(applied(&u_fb, t_next));
        traj.states.push(x.clone());
        traj.cost_integral.push(total);
    }
    Ok(traj)
}

/// Integral of the running cost over `[t_lo, t_hi]`.
pub fn window_cost(traj: &Trajectory, t_lo: f64, t_hi: f64) -> Result<f64> {
    let (start, end) = (traj.start_time(), traj.end_time());
    let tol = 1e-9 * (1.0 + end.abs());
    if traj.is_empty() || t_lo > t_hi || t_lo < start - tol || t_hi > end + tol {
        return Err(Error::Range {
            lo: t_lo,
            hi: t_hi,
            start,
            end,
        });
    }
    if t_lo == t_hi {
        return Ok(0.0);
    }
    Ok(traj.cost_at(t_hi.min(end)) - traj.cost_at(t_lo.max(start)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::make_benchmark;
    use std::collections::BTreeMap;

    fn circuit() -> (AffineSystem, CostSpec) {
        let p = make_benchmark("rl_circuit", &BTreeMap::new()).unwrap();
        (p.system, p.cost)
    }

    fn zero(_: &State) -> Control {
        Control::zeros(1)
    }

    #[test]
    fn single_step_matches_exponential() {
        let (sys, _) = circuit();
        let cfg = IntegratorConfig {
            step: 0.01,
            ..Default::default()
        };
        let x = State::from_element(1, 1.0);
        let fwd = rk4_step(&sys, &zero, &x, &cfg, TimeDirection::Forward).unwrap();
        assert!((fwd[0] - (-0.01f64).exp()).abs() < 1e-10);
        let rev = rk4_step(&sys, &zero, &x, &cfg, TimeDirection::Reverse).unwrap();
        assert!((rev[0] - 0.01f64.exp()).abs() < 1e-10);
    }

    #[test]
    fn tiny_step_recovers_slope() {
        let (sys, _) = circuit();
        let cfg = IntegratorConfig {
            step: 1e-7,
            ..Default::default()
        };
        let x = State::from_element(1, 1.0);
        let next = rk4_step(&sys, &zero, &x, &cfg, TimeDirection::Forward).unwrap();
        assert!(((next[0] - 1.0) / 1e-7 + 1.0).abs() < 1e-6);
    }

    #[test]
    fn sample_count_and_free_decay_cost() {
        let (sys, cost) = circuit();
        let cfg = IntegratorConfig::default();
        let x = State::from_element(1, 1.0);
        let short = simulate(&sys, &cost, &zero, &x, cfg.step, &cfg, TimeDirection::Forward, None).unwrap();
        assert_eq!(short.len(), 2);

        let traj = simulate(&sys, &cost, &zero, &x, 1.0, &cfg, TimeDirection::Forward, None).unwrap();
        assert_eq!(traj.len(), 1001);
        let exact = (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((traj.total_cost() - exact).abs() < 1e-4);
        assert!((window_cost(&traj, 0.0, 1.0).unwrap() - exact).abs() < 1e-4);
        assert_eq!(window_cost(&traj, 0.0, 1.0).unwrap(), traj.total_cost());
        assert_eq!(window_cost(&traj, 0.4, 0.4).unwrap(), 0.0);
        assert!(matches!(window_cost(&traj, 0.5, 1.5), Err(Error::Range { .. })));
    }

    #[test]
    fn stabilizing_policy_settles() {
        let (sys, cost) = circuit();
        let gain = 2f64.sqrt() - 1.0;
        let policy = move |x: &State| x * (-gain);
        let traj = simulate(
            &sys,
            &cost,
            &policy,
            &State::from_element(1, 0.5),
            10.0,
            &IntegratorConfig::default(),
            TimeDirection::Forward,
            None,
        )
        .unwrap();
        assert!(traj.final_state()[0].abs() < 1e-3);
        assert!(traj.cost_integral.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn noise_drives_dynamics_but_not_cost() {
        let (sys, cost) = circuit();
        let cfg = IntegratorConfig::default();
        let noise = |t: f64| Control::from_element(1, 2.0 * t.sin());
        let x = State::from_element(1, 0.0);
        let traj = simulate(&sys, &cost, &zero, &x, 1.0, &cfg, TimeDirection::Forward, Some(&noise)).unwrap();
        assert!(traj.final_state()[0] > 0.1);
        assert!((traj.controls[500][0] - 2.0 * 0.5f64.sin()).abs() < 1e-12);
        // cost only sees x² because the feedback is zero
        let mut expect = 0.0;
        for k in 1..traj.len() {
            expect += 0.5e-3 * (traj.states[k - 1][0].powi(2) + traj.states[k][0].powi(2));
        }
        assert!((traj.total_cost() - expect).abs() < 1e-12);
    }

    #[test]
    fn divergence_carries_partial_trajectory() {
        let (sys, cost) = circuit();
        let cfg = IntegratorConfig {
            max_state_norm: 10.0,
            ..Default::default()
        };
        let unstable = |x: &State| x * 3.0;
        let err = simulate(&sys, &cost, &unstable, &State::from_element(1, 1.0), 10.0, &cfg, TimeDirection::Forward, None)
            .unwrap_err();
        match err {
            Error::Divergence { partial: Some(p), .. } => assert!(p.len() > 100),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_learner_view() {
        let (sys, cost) = circuit();
        let err = simulate(
            &sys.learner_view(),
            &cost,
            &zero,
            &State::from_element(1, 1.0),
            0.1,
            &IntegratorConfig::default(),
            TimeDirection::Forward,
            None,
        );
        assert!(matches!(err, Err(Error::Visibility)));
    }

    #[test]
    fn csv_format() {
        let (sys, cost) = circuit();
        let cfg = IntegratorConfig {
            step: 0.25,
            ..Default::default()
        };
        let traj = simulate(&sys, &cost, &zero, &State::from_element(1, 1.0), 0.5, &cfg, TimeDirection::Forward, None).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x1,u1,J\n0,1,0,0\n0.25,"));
        let back = Trajectory::read_csv(text.as_bytes()).unwrap();
        assert_eq!(back.len(), 3);
        assert!((back.states[2][0] - traj.states[2][0]).abs() < 1e-11);
    }

    #[test]
    fn number_formatting_is_exact() {
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(0.25), "0.25");
        assert_eq!(fmt_num(1e-20 / 3.0), "3.3333333333333333e-21");
        for v in [2f64.sqrt() - 1.0, -1234567.891234567, 1e-20 / 3.0, 7e300, -0.1] {
            assert_eq!(fmt_num(v).parse::<f64>().unwrap(), v);
        }
    }
}
