//! Online policy iteration for one regulator direction.
//!
//! The closed loop runs with the current critic's greedy policy plus a known
//! exploration signal `e(t)`. Over a sliding window of length `T_w` the
//! integral Bellman identity `ρ + wᵀd = 0` supplies one regression sample,
//! where `d` is the change of the basis vector with the exploration's own
//! contribution `∫∇φ g e` removed. Only `g` is needed for that correction,
//! so the drift stays hidden from the learner. Samples are low-pass filtered
//! into `ξ = ∫e^{-ℓ(t-τ)} d dᵀ` and `ψ = ∫e^{-ℓ(t-τ)} d ρ`, and the weights
//! follow the normalized law `ẇ = -Γ ξ G / max(‖G‖, δ)` with `G = ξw + ψ`.
//!
//! The weight law is advanced with a linearly-implicit Euler step, which is
//! stable for any gain; the explicit step chatters once `hΓλ²/δ > 2`.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{policy_from_weights, BasisSet, CriticWeights, RegulatorDirection};
use crate::dynamics::{Benchmark, BoundaryProblem, Control, DomainBox, State};
use crate::error::{Error, Result};
use crate::linalg::{max_asymmetry, min_eigenvalue};
use crate::sim::{fmt_num, parse_row, rk4_step_driven, simulate, FeedbackLaw, IntegratorConfig, TimeDirection};

/// How often (in integration steps) `λ_min(ξ)` is sampled between checkpoints.
const PE_STRIDE: usize = 10;

/// Learning gain: a scalar times the identity, or a full SPD matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gain {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

impl Gain {
    pub fn matrix(&self, n: usize) -> Result<DMatrix<f64>> {
        let m = match self {
            Gain::Scalar(g) => DMatrix::identity(n, n) * *g,
            Gain::Matrix(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Dimension {
                        what: "learning gain",
                        expected: n,
                        got: rows.len(),
                    });
                }
                DMatrix::from_fn(n, n, |i, j| rows[i][j])
            }
        };
        if m.iter().any(|v| !v.is_finite()) || max_asymmetry(&m) > 1e-12 || m.clone().cholesky().is_none() {
            return Err(Error::InvalidArgument("learning gain must be symmetric positive definite".into()));
        }
        Ok(m)
    }
}

/// Exploration signal `e(t) = amplitude · sin(frequency · t)` on every input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exploration {
    pub amplitude: f64,
    pub frequency: f64,
}

impl Default for Exploration {
    fn default() -> Self {
        Self {
            amplitude: 2.0,
            frequency: 1.0,
        }
    }
}

impl Exploration {
    pub fn eval(&self, t: f64, input_dim: usize) -> Control {
        DVector::from_element(input_dim, self.amplitude * (self.frequency * t).sin())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InitialWeights {
    /// Independent uniform draws; a single range applies to every weight.
    Uniform { ranges: Vec<(f64, f64)> },
    Fixed { w: Vec<f64> },
}

impl InitialWeights {
    /// Ranges whose greedy policies are admissible for each reference problem.
    pub fn default_for(bench: Benchmark, direction: RegulatorDirection) -> Self {
        use RegulatorDirection::*;
        let ranges = match (bench, direction) {
            (Benchmark::RlCircuit, Forward) => vec![(0.0, 1.0)],
            (Benchmark::RlCircuit, Backward) => vec![(1.5, 2.5)],
            (Benchmark::Cubic, Forward) => vec![(0.0, 1.0), (0.5, 1.0)],
            (Benchmark::Cubic, Backward) => vec![(0.0, 1.0)],
            (Benchmark::Manipulator, Forward) => vec![(0.0, 1.0)],
            (Benchmark::Manipulator, Backward) => {
                let mut r = vec![(0.0, 1.0), (0.0, 1.0), (3.0, 4.0)];
                r.extend([(0.0, 0.1); 4]);
                r
            }
        };
        InitialWeights::Uniform { ranges }
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<DVector<f64>> {
        match self {
            InitialWeights::Fixed { w } => {
                if w.len() != n {
                    return Err(Error::Dimension {
                        what: "initial weights",
                        expected: n,
                        got: w.len(),
                    });
                }
                Ok(DVector::from_column_slice(w))
            }
            InitialWeights::Uniform { ranges } => {
                if ranges.len() != n && ranges.len() != 1 {
                    return Err(Error::Dimension {
                        what: "initial weight ranges",
                        expected: n,
                        got: ranges.len(),
                    });
                }
                if ranges.iter().any(|(lo, hi)| !(lo <= hi)) {
                    return Err(Error::InvalidArgument("initial weight range with lo > hi".into()));
                }
                Ok(DVector::from_fn(n, |i, _| {
                    let (lo, hi) = ranges[i.min(ranges.len() - 1)];
                    if lo == hi {
                        lo
                    } else {
                        rng.random_range(lo..hi)
                    }
                }))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    /// Bellman window `T_w` in seconds.
    pub window: f64,
    /// Filter pole `ℓ`.
    pub ell: f64,
    pub gamma: Gain,
    /// Dead zone `δ` on `‖G‖`.
    pub deadzone: f64,
    /// PE threshold on `λ_min(ξ)`.
    pub pe_floor: f64,
    pub noise: Exploration,
    /// Seconds of data collection before the weights may adapt.
    pub warmup: f64,
    /// Seconds between checkpoints, and between state resets when enabled.
    pub reset_period: f64,
    /// Re-sample the state at every checkpoint. Without resets a run is one
    /// continuous trajectory and only the exploration signal keeps it excited.
    pub resets: bool,
    /// Box for uniform resets; the problem's training box when absent.
    pub reset_box: Option<DomainBox>,
    /// Relative weight change per checkpoint counted as settled.
    pub convergence_eps: f64,
    /// Consecutive settled checkpoints required to stop.
    pub patience: usize,
    /// Checkpoint budget.
    pub max_iterations: usize,
    /// Initial weights; per-benchmark admissible ranges when absent.
    pub init: Option<InitialWeights>,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            window: 0.1,
            ell: 1.0,
            gamma: Gain::Scalar(10.0),
            deadzone: 1e-6,
            pe_floor: 1e-3,
            noise: Exploration::default(),
            warmup: 0.0,
            reset_period: 2.0,
            resets: true,
            reset_box: None,
            convergence_eps: 1e-3,
            patience: 3,
            max_iterations: 100,
            init: None,
        }
    }
}

impl LearnerConfig {
    /// Tuned settings for each reference problem.
    pub fn for_benchmark(bench: Benchmark) -> Self {
        let base = Self::default();
        match bench {
            Benchmark::RlCircuit => Self {
                pe_floor: 2e-3,
                ..base
            },
            Benchmark::Cubic => Self {
                ell: 0.2,
                pe_floor: 5e-4,
                convergence_eps: 2e-2,
                ..base
            },
            Benchmark::Manipulator => Self {
                window: 0.5,
                ell: 0.2,
                gamma: Gain::Scalar(1e7),
                deadzone: 1e-3,
                pe_floor: 5e-9,
                warmup: 4.0,
                convergence_eps: 2e-3,
                max_iterations: 200,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window", self.window),
            ("ell", self.ell),
            ("deadzone", self.deadzone),
            ("pe_floor", self.pe_floor),
            ("reset_period", self.reset_period),
            ("convergence_eps", self.convergence_eps),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("learner.{name} must be positive, got {v}")));
            }
        }
        if !(self.warmup.is_finite() && self.warmup >= 0.0) {
            return Err(Error::Config(format!("learner.warmup must be non-negative, got {}", self.warmup)));
        }
        if !(self.noise.amplitude.is_finite() && self.noise.amplitude >= 0.0 && self.noise.frequency.is_finite()) {
            return Err(Error::Config("learner.noise must have finite amplitude >= 0 and finite frequency".into()));
        }
        if self.patience == 0 || self.max_iterations == 0 {
            return Err(Error::Config("learner.patience and learner.max_iterations must be at least 1".into()));
        }
        if self.reset_period <= self.window {
            return Err(Error::Config("learner.reset_period must exceed learner.window".into()));
        }
        if let Some(b) = &self.reset_box {
            if b.iter().any(|(lo, hi)| !(lo < hi)) {
                return Err(Error::Config("learner.reset_box needs lo < hi on every axis".into()));
            }
        }
        if let Gain::Scalar(g) = self.gamma {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::Config(format!("learner.gamma must be positive, got {g}")));
            }
        }
        Ok(())
    }
}

fn orientation(direction: RegulatorDirection) -> f64 {
    match direction {
        RegulatorDirection::Forward => 1.0,
        RegulatorDirection::Backward => -1.0,
    }
}

fn time_direction(direction: RegulatorDirection) -> TimeDirection {
    match direction {
        RegulatorDirection::Forward => TimeDirection::Forward,
        RegulatorDirection::Backward => TimeDirection::Reverse,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub t: f64,
    pub x: State,
    /// Applied control, exploration included.
    pub u: Control,
    /// Running integral of the noiseless running cost.
    pub cost_integral: f64,
    /// Running integral of `∇φ·ẋ_e`, the exploration's share of `dφ/dt`.
    pub noise_integral: DVector<f64>,
}

/// Most recent samples on a uniform grid, enough to span one window.
#[derive(Clone, Debug)]
pub struct WindowBuffer {
    samples: VecDeque<WindowSample>,
    capacity: usize,
}

impl WindowBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "window buffer needs room for one sample");
        Self {
            samples: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    /// Buffer holding a whole noiseless trajectory.
    pub fn from_trajectory(traj: &crate::sim::Trajectory, n_basis: usize) -> Self {
        let mut buf = Self::new(traj.len().max(1));
        for k in 0..traj.len() {
            buf.push(WindowSample {
                t: traj.times[k],
                x: traj.states[k].clone(),
                u: traj.controls[k].clone(),
                cost_integral: traj.cost_integral[k],
                noise_integral: DVector::zeros(n_basis),
            });
        }
        buf
    }

    pub fn push(&mut self, sample: WindowSample) {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(sample);
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() == self.capacity
    }

    pub fn oldest(&self) -> Option<&WindowSample> {
        self.samples.front()
    }

    pub fn newest(&self) -> Option<&WindowSample> {
        self.samples.back()
    }

    fn range_error(&self, lo: f64, hi: f64) -> Error {
        Error::Range {
            lo,
            hi,
            start: self.oldest().map_or(f64::NAN, |s| s.t),
            end: self.newest().map_or(f64::NAN, |s| s.t),
        }
    }

    /// The samples at `t - window` and `t`.
    fn endpoints(&self, t: f64, window: f64) -> Result<(&WindowSample, &WindowSample)> {
        let lo = t - window;
        let (Some(first), Some(last)) = (self.oldest(), self.newest()) else {
            return Err(self.range_error(lo, t));
        };
        let h = if self.len() > 1 {
            (last.t - first.t) / (self.len() - 1) as f64
        } else {
            0.0
        };
        let tol = 1e-6 * h.max(1e-12);
        if window < 0.0 || lo < first.t - tol || t > last.t + tol {
            return Err(self.range_error(lo, t));
        }
        let index = |time: f64| -> usize {
            if h == 0.0 {
                0
            } else {
                (((time - first.t) / h).round() as usize).min(self.len() - 1)
            }
        };
        Ok((&self.samples[index(lo)], &self.samples[index(t)]))
    }
}

/// `φ(x(t)) - φ(x(t - window))`.
pub fn delta_phi(buffer: &WindowBuffer, basis: &BasisSet, t: f64, window: f64) -> Result<DVector<f64>> {
    let (a, b) = buffer.endpoints(t, window)?;
    Ok(basis.eval(&b.x) - basis.eval(&a.x))
}

/// Window cost, `+∫ℛ` for the forward and `-∫ℛ` for the backward regulator.
pub fn rho(buffer: &WindowBuffer, t: f64, window: f64, direction: RegulatorDirection) -> Result<f64> {
    let (a, b) = buffer.endpoints(t, window)?;
    Ok(orientation(direction) * (b.cost_integral - a.cost_integral))
}

/// Regressor `d` with `ρ + wᵀd = 0` for the true value weights: the
/// exploration-free change of `φ`, oriented in forward time.
pub fn regressor(
    buffer: &WindowBuffer,
    basis: &BasisSet,
    t: f64,
    window: f64,
    direction: RegulatorDirection,
) -> Result<DVector<f64>> {
    let (a, b) = buffer.endpoints(t, window)?;
    let dphi = basis.eval(&b.x) - basis.eval(&a.x);
    Ok((dphi - (&b.noise_integral - &a.noise_integral)) * orientation(direction))
}

#[derive(Clone, Debug)]
pub struct LearnerState {
    pub xi: DMatrix<f64>,
    pub psi: DVector<f64>,
    pub w_hat: CriticWeights,
    pub window_buffer: WindowBuffer,
}

impl LearnerState {
    pub fn new(w_hat: CriticWeights, window_capacity: usize) -> Self {
        let n = w_hat.len();
        Self {
            xi: DMatrix::zeros(n, n),
            psi: DVector::zeros(n),
            w_hat,
            window_buffer: WindowBuffer::new(window_capacity),
        }
    }

    /// `G = ξŵ + ψ`.
    pub fn filtered_error(&self) -> DVector<f64> {
        &self.xi * &self.w_hat.w + &self.psi
    }
}

/// Advances `ξ̇ = -ℓξ + ddᵀ`, `ψ̇ = -ℓψ + dρ` by `h` with `d`, `ρ` held
/// constant (exact for that input).
pub fn filter_step(state: &mut LearnerState, dphi: &DVector<f64>, rho_val: f64, ell: f64, h: f64) {
    let a = (-ell * h).exp();
    let b = -(-ell * h).exp_m1() / ell;
    state.xi *= a;
    state.xi += (dphi * dphi.transpose()) * b;
    state.psi *= a;
    state.psi += dphi * (rho_val * b);
}

/// `-Γ ξ G / max(‖G‖, δ)`.
pub fn weight_update_direction(state: &LearnerState, gamma: &DMatrix<f64>, deadzone: f64) -> DVector<f64> {
    let g = state.filtered_error();
    let scale = g.norm().max(deadzone);
    -(gamma * (&state.xi * g)) / scale
}

/// One linearly-implicit step of the weight law: the normalizer is frozen
/// at the current `‖G‖` and `(I + (h/s)Γξξ) w⁺ = w - (h/s)Γξψ` is solved.
pub fn implicit_weight_step(state: &LearnerState, gamma: &DMatrix<f64>, deadzone: f64, h: f64) -> Result<DVector<f64>> {
    let n = state.psi.len();
    let c = h / state.filtered_error().norm().max(deadzone);
    let gx = gamma * &state.xi;
    let lhs = DMatrix::identity(n, n) + &gx * &state.xi * c;
    let rhs = &state.w_hat.w - &gx * &state.psi * c;
    lhs.lu()
        .solve(&rhs)
        .filter(|w| w.iter().all(|v| v.is_finite()))
        .ok_or(Error::NonFinite("weight update"))
}

/// `λ_min(ξ)`.
pub fn pe_metric(xi: &DMatrix<f64>) -> f64 {
    min_eigenvalue(xi)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub t: f64,
    pub w: Vec<f64>,
    pub pe_metric: f64,
    pub g_norm: f64,
    /// Mean `|ρ + ŵᵀd|` over the windows of the preceding period.
    pub bellman_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.rows.first().map_or(0, |r| r.w.len());
        let mut header = vec!["iter".to_string(), "t".to_string()];
        header.extend((1..=n).map(|i| format!("w_{i}")));
        header.extend(["pe_metric", "g_norm", "bellman_residual"].map(String::from));
        writeln!(out, "{}", header.join(","))?;
        for r in &self.rows {
            let mut cells = vec![r.iter.to_string(), fmt_num(r.t)];
            cells.extend(r.w.iter().map(|v| fmt_num(*v)));
            cells.extend([r.pe_metric, r.g_norm, r.bellman_residual].map(fmt_num));
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty training log".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        let n = cols.len().checked_sub(5).ok_or_else(|| Error::Parse("training log header too short".into()))?;
        let expected_tail = ["pe_metric", "g_norm", "bellman_residual"];
        if cols[0] != "iter" || cols[1] != "t" || cols[2 + n..] != expected_tail {
            return Err(Error::Parse(format!("unexpected training log header `{header}`")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v = parse_row(&line, n + 5, i + 2)?;
            if v[0] < 0.0 || v[0].fract() != 0.0 {
                return Err(Error::Parse(format!("line {}: iteration must be a whole number", i + 2)));
            }
            rows.push(LogRow {
                iter: v[0] as usize,
                t: v[1],
                w: v[2..2 + n].to_vec(),
                pe_metric: v[2 + n],
                g_norm: v[3 + n],
                bellman_residual: v[4 + n],
            });
        }
        Ok(Self { rows })
    }
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub weights: CriticWeights,
    pub log: TrainingLog,
    /// Integration time at which `λ_min(ξ)` first reached the PE floor.
    pub pe_established_at: Option<f64>,
    /// Largest `|ξ_ij - ξ_ji|` seen at any checkpoint.
    pub max_xi_asymmetry: f64,
    /// Smallest eigenvalue of `ξ` seen at any sample point.
    pub min_xi_eigenvalue: f64,
    pub xi: DMatrix<f64>,
    pub psi: DVector<f64>,
}

impl TrainingOutcome {
    pub fn final_g_norm(&self) -> f64 {
        (&self.xi * &self.weights.w + &self.psi).norm()
    }
}

/// Runs online policy iteration for one direction until the weights settle.
///
/// The backward regulator is trained on the reverse-time plant. Weights only
/// adapt after the warm-up and once `λ_min(ξ)` has reached `pe_floor`. A
/// checkpoint counts towards convergence only if `λ_min(ξ)` stayed above the
/// floor for its whole period; a whole period below the floor (after the
/// first) aborts with `PeViolation`.
pub fn train_regulator(
    problem: &BoundaryProblem,
    basis: &BasisSet,
    cfg: &LearnerConfig,
    integ: &IntegratorConfig,
    direction: RegulatorDirection,
    seed: u64,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    integ.validate()?;
    let sys = &problem.system;
    let n_state = sys.state_dim();
    let m = sys.input_dim();
    let nb = basis.len();
    if basis.state_dim() != n_state {
        return Err(Error::Dimension {
            what: "basis state dimension",
            expected: n_state,
            got: basis.state_dim(),
        });
    }
    let gamma = cfg.gamma.matrix(nb)?;
    let reset_box = cfg.reset_box.clone().unwrap_or_else(|| problem.training_box.clone());
    if reset_box.len() != n_state {
        return Err(Error::Dimension {
            what: "reset box",
            expected: n_state,
            got: reset_box.len(),
        });
    }

    let h = integ.step;
    let window_steps = (cfg.window / h).round() as usize;
    let period_steps = (cfg.reset_period / h).round() as usize;
    if window_steps == 0 {
        return Err(Error::Config("learner.window is shorter than one integration step".into()));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reset_rng = init_rng.clone();
    reset_rng.set_stream(1);
    let init = match &cfg.init {
        Some(init) => init.clone(),
        None => Benchmark::parse(&problem.name)
            .map(|b| InitialWeights::default_for(b, direction))
            .unwrap_or(InitialWeights::Uniform { ranges: vec![(0.0, 1.0)] }),
    };
    let w0 = CriticWeights::new(init.sample(nb, &mut init_rng)?, direction)?;

    let mut policy = policy_from_weights(&sys.learner_view(), &problem.cost, basis, &w0)?;
    let mut state = LearnerState::new(w0, window_steps + 1);
    let kappa = orientation(direction);
    let tdir = time_direction(direction);
    let noise_cfg = cfg.noise;
    let noise = move |t: f64| noise_cfg.eval(t, m);
    let sample_box = |rng: &mut ChaCha8Rng| -> State {
        DVector::from_iterator(n_state, reset_box.iter().map(|&(lo, hi)| rng.random_range(lo..hi)))
    };

    let mut x = sample_box(&mut reset_rng);
    let mut step_index: u64 = 0;
    let mut cost_cum = 0.0;
    let mut noise_cum = DVector::zeros(nb);
    state.window_buffer.push(WindowSample {
        t: 0.0,
        x: x.clone(),
        u: policy.control(&x) + noise(0.0),
        cost_integral: 0.0,
        noise_integral: noise_cum.clone(),
    });

    let mut log = TrainingLog::default();
    let mut pe_established_at: Option<f64> = None;
    let mut max_asym = 0.0_f64;
    let mut min_eig = f64::INFINITY;
    let mut prev_w = state.w_hat.w.clone();
    let mut settled = 0usize;
    let mut last_change = f64::INFINITY;

    for iter in 1..=cfg.max_iterations {
        let mut period_pe_max = 0.0_f64;
        let mut period_pe_min = f64::INFINITY;
        let mut period_gram = DMatrix::zeros(nb, nb);
        let mut resid_sum = 0.0;
        let mut resid_count = 0usize;

        for k in 0..period_steps {
            let t = step_index as f64 * h;
            let u0 = policy.control(&x);
            let r0 = problem.cost.running_cost(&x, &u0);
            let n0 = policy.basis_rate_along_input(&x, &noise(t)) * kappa;

            x = rk4_step_driven(sys, &policy, &x, t, integ, tdir, Some(&noise))?;
            step_index += 1;
            let t1 = step_index as f64 * h;
            let u1 = policy.control(&x);
            let e1 = noise(t1);
            let r1 = problem.cost.running_cost(&x, &u1);
            let n1 = policy.basis_rate_along_input(&x, &e1) * kappa;
            cost_cum += 0.5 * h * (r0 + r1);
            noise_cum += (n0 + n1) * (0.5 * h);
            state.window_buffer.push(WindowSample {
                t: t1,
                x: x.clone(),
                u: u1 + e1,
                cost_integral: cost_cum,
                noise_integral: noise_cum.clone(),
            });

            if state.window_buffer.is_full() {
                let d = regressor(&state.window_buffer, basis, t1, cfg.window, direction)?;
                let rho_val = rho(&state.window_buffer, t1, cfg.window, direction)?;
                resid_sum += (rho_val + state.w_hat.w.dot(&d)).abs();
                resid_count += 1;
                period_gram += (&d * d.transpose()) * h;
                filter_step(&mut state, &d, rho_val, cfg.ell, h);
            }

            if k % PE_STRIDE == 0 || k + 1 == period_steps {
                let lam = pe_metric(&state.xi);
                min_eig = min_eig.min(lam);
                period_pe_max = period_pe_max.max(lam);
                period_pe_min = period_pe_min.min(lam);
                if pe_established_at.is_none() && lam >= cfg.pe_floor {
                    pe_established_at = Some(t1);
                }
            }

            if pe_established_at.is_some() && t1 >= cfg.warmup {
                let w = implicit_weight_step(&state, &gamma, cfg.deadzone, h)?;
                policy.set_weights(&w);
                state.w_hat.w = w;
            }
        }

        let t_now = step_index as f64 * h;
        max_asym = max_asym.max(max_asymmetry(&state.xi));
        let g_norm = state.filtered_error().norm();
        log.rows.push(LogRow {
            iter,
            t: t_now,
            w: state.w_hat.w.iter().copied().collect(),
            pe_metric: pe_metric(&state.xi),
            g_norm,
            bellman_residual: if resid_count > 0 { resid_sum / resid_count as f64 } else { 0.0 },
        });
        log::debug!(
            "{direction} iter {iter} t={t_now:.1} w={:?} pe={:.3e} |G|={g_norm:.2e}",
            state.w_hat.w.as_slice(),
            log.rows.last().map_or(0.0, |r| r.pe_metric)
        );

        let outcome = |state: &LearnerState, log: &TrainingLog| TrainingOutcome {
            weights: state.w_hat.clone(),
            log: log.clone(),
            pe_established_at,
            max_xi_asymmetry: max_asym,
            min_xi_eigenvalue: min_eig,
            xi: state.xi.clone(),
            psi: state.psi.clone(),
        };

        if iter >= 2 && period_pe_max < cfg.pe_floor {
            return Err(Error::PeViolation {
                lambda_min: period_pe_max,
                floor: cfg.pe_floor,
                from: t_now - cfg.reset_period,
                to: t_now,
                outcome: Box::new(outcome(&state, &log)),
            });
        }

        let scale = state.w_hat.w.amax().max(1.0);
        last_change = (&state.w_hat.w - &prev_w).amax() / scale;
        prev_w.copy_from(&state.w_hat.w);
        // Unchanged weights only count as settled if this period's own data
        // was informative, not merely because nothing new arrived. The period
        // Gramian is scaled to the level it would hold `ξ` at in steady state.
        let excited = pe_established_at.is_some()
            && t_now >= cfg.warmup
            && period_pe_min >= cfg.pe_floor
            && min_eigenvalue(&period_gram) / (cfg.ell * cfg.reset_period) >= cfg.pe_floor;
        if excited && last_change < cfg.convergence_eps {
            settled += 1;
        } else {
            settled = 0;
        }
        if settled >= cfg.patience {
            return Ok(outcome(&state, &log));
        }

        if !cfg.resets {
            continue;
        }
        x = sample_box(&mut reset_rng);
        cost_cum = 0.0;
        noise_cum.fill(0.0);
        state.window_buffer.clear();
        state.window_buffer.push(WindowSample {
            t: t_now,
            x: x.clone(),
            u: policy.control(&x) + noise(t_now),
            cost_integral: 0.0,
            noise_integral: noise_cum.clone(),
        });
    }

    Err(Error::NonConvergence {
        iterations: cfg.max_iterations,
        last_change,
        outcome: Box::new(TrainingOutcome {
            weights: state.w_hat.clone(),
            log,
            pe_established_at,
            max_xi_asymmetry: max_asym,
            min_xi_eigenvalue: min_eig,
            xi: state.xi.clone(),
            psi: state.psi.clone(),
        }),
    })
}

/// Relative Bellman residual `Σ|ρ + ŵᵀΔφ| / Σ|ρ|` of a trained critic over
/// noiseless closed-loop runs from `starts`, using consecutive windows.
pub fn held_out_bellman_residual(
    problem: &BoundaryProblem,
    basis: &BasisSet,
    weights: &CriticWeights,
    integ: &IntegratorConfig,
    window: f64,
    duration: f64,
    starts: &[State],
) -> Result<f64> {
    let policy = policy_from_weights(&problem.system.learner_view(), &problem.cost, basis, weights)?;
    let kappa = orientation(weights.direction);
    let tdir = time_direction(weights.direction);
    let stride = (window / integ.step).round() as usize;
    if stride == 0 {
        return Err(Error::InvalidArgument("window shorter than one step".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for x0 in starts {
        let traj = simulate(&problem.system, &problem.cost, &policy, x0, duration, integ, tdir, None)?;
        let phis: Vec<DVector<f64>> = traj.states.iter().step_by(stride).map(|x| basis.eval(x)).collect();
        let costs: Vec<f64> = traj.cost_integral.iter().copied().step_by(stride).collect();
        for j in 1..phis.len() {
            let rho_val = kappa * (costs[j] - costs[j - 1]);
            let d = (&phis[j] - &phis[j - 1]) * kappa;
            num += (rho_val + weights.w.dot(&d)).abs();
            den += rho_val.abs();
        }
    }
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::make_benchmark;
    use crate::sim::simulate;
    use std::collections::BTreeMap;

    fn circuit() -> BoundaryProblem {
        make_benchmark("rl_circuit", &BTreeMap::new()).unwrap()
    }

    fn free_decay_buffer() -> (WindowBuffer, BasisSet) {
        let p = circuit();
        let zero = |_: &State| DVector::zeros(1);
        let traj = simulate(
            &p.system,
            &p.cost,
            &zero,
            &DVector::from_element(1, 1.0),
            1.0,
            &IntegratorConfig::default(),
            TimeDirection::Forward,
            None,
        )
        .unwrap();
        let basis = BasisSet::for_benchmark(Benchmark::RlCircuit);
        (WindowBuffer::from_trajectory(&traj, 1), basis)
    }

    #[test]
    fn delta_phi_and_rho_on_free_decay() {
        let (buf, basis) = free_decay_buffer();
        let d = delta_phi(&buf, &basis, 1.0, 1.0).unwrap();
        assert!((d[0] - ((-2.0f64).exp() - 1.0)).abs() < 1e-10);
        let cost = (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((rho(&buf, 1.0, 1.0, RegulatorDirection::Forward).unwrap() - cost).abs() < 1e-6);
        assert!((rho(&buf, 1.0, 1.0, RegulatorDirection::Backward).unwrap() + cost).abs() < 1e-6);
        assert_eq!(delta_phi(&buf, &basis, 0.5, 0.0).unwrap()[0], 0.0);
        assert!(matches!(delta_phi(&buf, &basis, 0.5, 0.6), Err(Error::Range { .. })));
        assert!(matches!(rho(&buf, 1.2, 0.1, RegulatorDirection::Forward), Err(Error::Range { .. })));
    }

    #[test]
    fn constant_trajectory_has_no_regressor() {
        let mut buf = WindowBuffer::new(11);
        for k in 0..11 {
            buf.push(WindowSample {
                t: k as f64 * 0.01,
                x: DVector::from_element(1, 0.7),
                u: DVector::zeros(1),
                cost_integral: 0.0,
                noise_integral: DVector::zeros(1),
            });
        }
        let basis = BasisSet::for_benchmark(Benchmark::RlCircuit);
        assert_eq!(delta_phi(&buf, &basis, 0.1, 0.1).unwrap()[0], 0.0);
        assert_eq!(rho(&buf, 0.1, 0.1, RegulatorDirection::Forward).unwrap(), 0.0);
    }

    fn state_with(xi: DMatrix<f64>, psi: DVector<f64>, w: DVector<f64>) -> LearnerState {
        let mut s = LearnerState::new(CriticWeights::new(w, RegulatorDirection::Forward).unwrap(), 2);
        s.xi = xi;
        s.psi = psi;
        s
    }

    #[test]
    fn filter_decays_and_accumulates_exactly() {
        let xi0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let mut s = state_with(xi0.clone(), DVector::zeros(2), DVector::zeros(2));
        filter_step(&mut s, &DVector::zeros(2), 0.0, 1.5, 0.01);
        assert!((s.xi.norm() - (-0.015f64).exp() * xi0.norm()).abs() < 1e-14);

        let d = DVector::from_vec(vec![0.3, -0.2]);
        let mut s = state_with(DMatrix::zeros(2, 2), DVector::zeros(2), DVector::zeros(2));
        let (ell, h) = (1.0, 1e-3);
        for _ in 0..2000 {
            filter_step(&mut s, &d, 0.0, ell, h);
        }
        let expect = &d * d.transpose() * ((1.0 - (-2.0f64).exp()) / ell);
        assert!((&s.xi - expect).amax() < 1e-12);
        assert_eq!(s.psi.amax(), 0.0);
        assert_eq!(max_asymmetry(&s.xi), 0.0);
    }

    #[test]
    fn update_direction_examples() {
        let s = state_with(DMatrix::from_element(1, 1, 2.0), DVector::from_element(1, -1.0), DVector::zeros(1));
        let g = DMatrix::identity(1, 1);
        assert!((weight_update_direction(&s, &g, 1e-6)[0] - 2.0).abs() < 1e-15);
        assert!((weight_update_direction(&s, &(g * 3.0), 1e-6)[0] - 6.0).abs() < 1e-15);
        let eq = state_with(DMatrix::from_element(1, 1, 2.0), DVector::from_element(1, -1.0), DVector::from_element(1, 0.5));
        assert_eq!(weight_update_direction(&eq, &DMatrix::identity(1, 1), 1e-6)[0], 0.0);
    }

    #[test]
    fn implicit_step_moves_toward_equilibrium_without_overshoot() {
        let s = state_with(DMatrix::from_element(1, 1, 2.0), DVector::from_element(1, -1.0), DVector::zeros(1));
        let g = DMatrix::from_element(1, 1, 1e9);
        let w = implicit_weight_step(&s, &g, 1e-6, 1e-3).unwrap();
        assert!(w[0] > 0.0 && w[0] <= 0.5 + 1e-12);
    }

    #[test]
    fn pe_metric_examples() {
        assert_eq!(pe_metric(&DMatrix::zeros(2, 2)), 0.0);
        assert_eq!(pe_metric(&DMatrix::identity(3, 3)), 1.0);
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert!((pe_metric(&m) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn gain_validation() {
        assert!(Gain::Scalar(-1.0).matrix(2).is_err());
        assert!(Gain::Matrix(vec![vec![1.0, 2.0], vec![0.0, 1.0]]).matrix(2).is_err());
        assert_eq!(Gain::Scalar(2.0).matrix(2).unwrap(), DMatrix::identity(2, 2) * 2.0);
    }

    #[test]
    fn log_csv_roundtrip() {
        let log = TrainingLog {
            rows: vec![LogRow {
                iter: 1,
                t: 2.0,
                w: vec![0.414213562373, -1e-9],
                pe_metric: 0.01,
                g_norm: 3e-15,
                bellman_residual: 0.25,
            }],
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("iter,t,w_1,w_2,pe_metric,g_norm,bellman_residual\n"));
        let back = TrainingLog::read_csv(&buf[..]).unwrap();
        assert_eq!(back, log);
    }
}
