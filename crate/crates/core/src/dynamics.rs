//! Control-affine plants `ẋ = f(x) + g(x)u`, quadratic running costs and the
//! two-point boundary problems built from them.
//!
//! The drift `f` plays the role of the unknown model. An [`AffineSystem`]
//! handle can be downgraded with [`AffineSystem::learner_view`]; the resulting
//! view still evaluates `g` but refuses to evaluate `f`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

pub type State = DVector<f64>;
pub type Control = DVector<f64>;

/// A plant in control-affine form.
pub trait ControlAffine: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn drift(&self, x: &State) -> State;
    fn input_map(&self, x: &State) -> DMatrix<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Visibility {
    Full,
    InputMapOnly,
}

#[derive(Clone, Debug)]
pub struct AffineSystem {
    plant: Arc<dyn ControlAffine>,
    visibility: Visibility,
}

impl AffineSystem {
    pub fn new(plant: impl ControlAffine + 'static) -> Self {
        Self {
            plant: Arc::new(plant),
            visibility: Visibility::Full,
        }
    }

    /// Same plant, with the drift hidden.
    pub fn learner_view(&self) -> Self {
        Self {
            plant: Arc::clone(&self.plant),
            visibility: Visibility::InputMapOnly,
        }
    }

    pub fn visibility(&self) -> Visibility {
        self.visibility
    }

    pub fn state_dim(&self) -> usize {
        self.plant.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.plant.input_dim()
    }

    fn check_state(&self, x: &State) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::Dimension {
                what: "state",
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state"));
        }
        Ok(())
    }

    pub fn eval_drift(&self, x: &State) -> Result<State> {
        if self.visibility != Visibility::Full {
            return Err(Error::Visibility);
        }
        self.check_state(x)?;
        Ok(self.plant.drift(x))
    }

    pub fn eval_input_map(&self, x: &State) -> Result<DMatrix<f64>> {
        self.check_state(x)?;
        Ok(self.plant.input_map(x))
    }

    /// Unchecked `g(x)` for hot loops whose callers validated dimensions once.
    pub(crate) fn input_map_raw(&self, x: &State) -> DMatrix<f64> {
        self.plant.input_map(x)
    }

    /// Unchecked `f(x)`; still honours visibility.
    pub(crate) fn drift_raw(&self, x: &State) -> Result<State> {
        match self.visibility {
            Visibility::Full => Ok(self.plant.drift(x)),
            Visibility::InputMapOnly => Err(Error::Visibility),
        }
    }

    /// Central-difference Jacobian of the drift.
    pub fn drift_jacobian(&self, x: &State) -> Result<DMatrix<f64>> {
        self.check_state(x)?;
        let n = self.state_dim();
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let step = 1e-6 * (1.0 + x[j].abs());
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[j] += step;
            lo[j] -= step;
            let col = (self.drift_raw(&hi)? - self.drift_raw(&lo)?) / (2.0 * step);
            jac.set_column(j, &col);
        }
        Ok(jac)
    }

    /// Central-difference Jacobian of `x ↦ g(x)u` for a fixed `u`.
    pub fn input_term_jacobian(&self, x: &State, u: &Control) -> Result<DMatrix<f64>> {
        self.check_state(x)?;
        let n = self.state_dim();
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let step = 1e-6 * (1.0 + x[j].abs());
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[j] += step;
            lo[j] -= step;
            let col = (self.plant.input_map(&hi) * u - self.plant.input_map(&lo) * u) / (2.0 * step);
            jac.set_column(j, &col);
        }
        Ok(jac)
    }
}

/// Series RL circuit: `ẋ = -(r/l) x + (1/l) u`, state is the loop current.
#[derive(Clone, Debug)]
pub struct RlCircuit {
    pub resistance: f64,
    pub inductance: f64,
}

impl Default for RlCircuit {
    fn default() -> Self {
        Self {
            resistance: 1.0,
            inductance: 1.0,
        }
    }
}

impl ControlAffine for RlCircuit {
    fn state_dim(&self) -> usize {
        1
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &State) -> State {
        x * (-self.resistance / self.inductance)
    }
    fn input_map(&self, _x: &State) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0 / self.inductance)
    }
}

/// Scalar cubic plant `ẋ = x³ + u`.
#[derive(Clone, Debug, Default)]
pub struct CubicPlant;

impl ControlAffine for CubicPlant {
    fn state_dim(&self) -> usize {
        1
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &State) -> State {
        x.map(|v| v * v * v)
    }
    fn input_map(&self, _x: &State) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0)
    }
}

/// Single-link manipulator: `ẋ₁ = x₂`, `ẋ₂ = -c x₂ - k sin x₁ + u`.
#[derive(Clone, Debug)]
pub struct Manipulator {
    pub damping: f64,
    pub stiffness: f64,
}

impl Default for Manipulator {
    fn default() -> Self {
        Self {
            damping: 2.0,
            stiffness: 10.0,
        }
    }
}

impl ControlAffine for Manipulator {
    fn state_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &State) -> State {
        DVector::from_vec(vec![
            x[1],
            -self.damping * x[1] - self.stiffness * x[0].sin(),
        ])
    }
    fn input_map(&self, _x: &State) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[0.0, 1.0])
    }
}

/// Running cost `xᵀQx + uᵀRu`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostSpec {
    state_weight: DMatrix<f64>,
    control_weight: DMatrix<f64>,
    control_weight_inv: DMatrix<f64>,
}

impl CostSpec {
    pub fn new(state_weight: DMatrix<f64>, control_weight: DMatrix<f64>) -> Result<Self> {
        let n = state_weight.nrows();
        let m = control_weight.nrows();
        if state_weight.ncols() != n || control_weight.ncols() != m || n == 0 || m == 0 {
            return Err(Error::InvalidArgument("cost weights must be square".into()));
        }
        if state_weight.iter().chain(control_weight.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost weights"));
        }
        if linalg::max_asymmetry(&state_weight) > 1e-12 || linalg::max_asymmetry(&control_weight) > 1e-12 {
            return Err(Error::InvalidArgument("cost weights must be symmetric".into()));
        }
        if linalg::min_eigenvalue(&state_weight) <= 0.0 {
            return Err(Error::InvalidArgument("state weight must be positive definite".into()));
        }
        if linalg::min_eigenvalue(&control_weight) <= 0.0 {
            return Err(Error::InvalidArgument("control weight must be positive definite".into()));
        }
        let control_weight_inv = control_weight
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("control weight is singular".into()))?;
        Ok(Self {
            state_weight,
            control_weight,
            control_weight_inv,
        })
    }

    pub fn scalar(q: f64, r: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(1, 1, q), DMatrix::from_element(1, 1, r))
    }

    pub fn state_weight(&self) -> &DMatrix<f64> {
        &self.state_weight
    }

    pub fn control_weight(&self) -> &DMatrix<f64> {
        &self.control_weight
    }

    pub fn control_weight_inv(&self) -> &DMatrix<f64> {
        &self.control_weight_inv
    }

    pub fn state_dim(&self) -> usize {
        self.state_weight.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.control_weight.nrows()
    }

    pub fn state_cost(&self, x: &State) -> f64 {
        x.dot(&(&self.state_weight * x))
    }

    pub fn state_cost_gradient(&self, x: &State) -> State {
        &self.state_weight * x * 2.0
    }

    pub fn running_cost(&self, x: &State, u: &Control) -> f64 {
        self.state_cost(x) + u.dot(&(&self.control_weight * u))
    }
}

/// Axis-aligned box, one `(lo, hi)` pair per state coordinate.
pub type DomainBox = Vec<(f64, f64)>;

#[derive(Clone, Debug)]
pub struct BoundaryProblem {
    pub name: String,
    pub system: AffineSystem,
    pub cost: CostSpec,
    pub x0: State,
    pub xt: State,
    horizon: f64,
    pub training_box: DomainBox,
}

impl BoundaryProblem {
    pub fn new(
        name: impl Into<String>,
        system: AffineSystem,
        cost: CostSpec,
        x0: State,
        xt: State,
        horizon: f64,
        training_box: DomainBox,
    ) -> Result<Self> {
        let n = system.state_dim();
        for (what, v) in [("x0", &x0), ("xT", &xt)] {
            if v.len() != n {
                return Err(Error::Dimension {
                    what,
                    expected: n,
                    got: v.len(),
                });
            }
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite(what));
            }
        }
        if cost.state_dim() != n || cost.input_dim() != system.input_dim() {
            return Err(Error::InvalidArgument("cost dimensions do not match the system".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        if training_box.len() != n || training_box.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::InvalidArgument("training box must have one lo < hi pair per state".into()));
        }
        Ok(Self {
            name: name.into(),
            system,
            cost,
            x0,
            xt,
            horizon,
            training_box,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn epsilon(&self) -> f64 {
        1.0 / self.horizon
    }

    /// Copy of the problem over a different horizon.
    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        Self::new(
            self.name.clone(),
            self.system.clone(),
            self.cost.clone(),
            self.x0.clone(),
            self.xt.clone(),
            horizon,
            self.training_box.clone(),
        )
    }

    pub fn with_boundary(&self, x0: State, xt: State) -> Result<Self> {
        Self::new(
            self.name.clone(),
            self.system.clone(),
            self.cost.clone(),
            x0,
            xt,
            self.horizon,
            self.training_box.clone(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    RlCircuit,
    Cubic,
    Manipulator,
}

impl Benchmark {
    pub const ALL: [Benchmark; 3] = [Benchmark::RlCircuit, Benchmark::Cubic, Benchmark::Manipulator];

    pub fn name(self) -> &'static str {
        match self {
            Benchmark::RlCircuit => "rl_circuit",
            Benchmark::Cubic => "cubic",
            Benchmark::Manipulator => "manipulator",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "rl_circuit" => Ok(Benchmark::RlCircuit),
            "cubic" => Ok(Benchmark::Cubic),
            "manipulator" => Ok(Benchmark::Manipulator),
            other => Err(Error::UnknownBenchmark(other.to_string())),
        }
    }

    pub fn default_horizon(self) -> f64 {
        match self {
            Benchmark::RlCircuit => 20.0,
            Benchmark::Cubic => 10.0,
            Benchmark::Manipulator => 20.0,
        }
    }

    fn param_keys(self) -> &'static [&'static str] {
        match self {
            Benchmark::RlCircuit => &["r", "l", "q", "control_weight", "horizon"],
            Benchmark::Cubic => &["q", "control_weight", "horizon"],
            Benchmark::Manipulator => &["damping", "stiffness", "q11", "q12", "q22", "control_weight", "horizon"],
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Builds one of the three reference problems; `params` overrides defaults.
///
/// Scalar benchmarks use `𝒮(x) = q·x²` (q = 1), the manipulator `xᵀQx` with
/// `Q = [[10, 1], [1, 10]]`; the control weight defaults to 1 everywhere.
pub fn make_benchmark(name: &str, params: &BTreeMap<String, f64>) -> Result<BoundaryProblem> {
    let bench = Benchmark::parse(name)?;
    let allowed = bench.param_keys();
    if let Some(bad) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::Config(format!(
            "unknown parameter `{bad}` for benchmark {name} (allowed: {})",
            allowed.join(", ")
        )));
    }
    let get = |key: &str, default: f64| params.get(key).copied().unwrap_or(default);
    let horizon = get("horizon", bench.default_horizon());
    let r_weight = get("control_weight", 1.0);
    match bench {
        Benchmark::RlCircuit => {
            let plant = RlCircuit {
                resistance: get("r", 1.0),
                inductance: get("l", 1.0),
            };
            if plant.inductance == 0.0 {
                return Err(Error::Config("inductance must be nonzero".into()));
            }
            BoundaryProblem::new(
                bench.name(),
                AffineSystem::new(plant),
                CostSpec::scalar(get("q", 1.0), r_weight)?,
                DVector::from_element(1, 0.5),
                DVector::from_element(1, 0.9),
                horizon,
                vec![(-1.5, 1.5)],
            )
        }
        Benchmark::Cubic => BoundaryProblem::new(
            bench.name(),
            AffineSystem::new(CubicPlant),
            CostSpec::scalar(get("q", 1.0), r_weight)?,
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.5),
            horizon,
            vec![(-1.5, 1.5)],
        ),
        Benchmark::Manipulator => {
            let q12 = get("q12", 1.0);
            let q = DMatrix::from_row_slice(2, 2, &[get("q11", 10.0), q12, q12, get("q22", 10.0)]);
            BoundaryProblem::new(
                bench.name(),
                AffineSystem::new(Manipulator {
                    damping: get("damping", 2.0),
                    stiffness: get("stiffness", 10.0),
                }),
                CostSpec::new(q, DMatrix::from_element(1, 1, r_weight))?,
                DVector::from_vec(vec![0.3, 0.0]),
                DVector::from_vec(vec![0.1, 0.0]),
                horizon,
                vec![(-0.5, 0.5), (-0.5, 0.5)],
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> State {
        DVector::from_column_slice(xs)
    }

    fn bench(name: &str) -> BoundaryProblem {
        make_benchmark(name, &BTreeMap::new()).unwrap()
    }

    #[test]
    fn drift_values() {
        let c = bench("rl_circuit");
        assert_eq!(c.system.eval_drift(&v(&[0.5])).unwrap(), v(&[-0.5]));
        let cu = bench("cubic");
        assert_eq!(cu.system.eval_drift(&v(&[0.0])).unwrap(), v(&[0.0]));
        let m = bench("manipulator");
        let f = m.system.eval_drift(&v(&[0.3, 0.0])).unwrap();
        assert_eq!(f[0], 0.0);
        assert!((f[1] + 2.9552).abs() < 1e-4);
    }

    #[test]
    fn input_maps() {
        let c = bench("rl_circuit");
        assert_eq!(c.system.eval_input_map(&v(&[3.0])).unwrap(), DMatrix::from_element(1, 1, 1.0));
        let cu = bench("cubic");
        assert_eq!(cu.system.eval_input_map(&v(&[-2.0])).unwrap(), DMatrix::from_element(1, 1, 1.0));
        let m = bench("manipulator");
        assert_eq!(
            m.system.eval_input_map(&v(&[0.1, 0.2])).unwrap(),
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0])
        );
    }

    #[test]
    fn learner_view_refuses_drift() {
        let c = bench("cubic");
        let view = c.system.learner_view();
        assert!(matches!(view.eval_drift(&v(&[1.0])), Err(Error::Visibility)));
        assert!(matches!(view.drift_jacobian(&v(&[1.0])), Err(Error::Visibility)));
        assert!(view.eval_input_map(&v(&[1.0])).is_ok());
    }

    #[test]
    fn every_drift_vanishes_at_origin() {
        for b in Benchmark::ALL {
            let p = bench(b.name());
            let zero = DVector::zeros(p.system.state_dim());
            assert_eq!(p.system.eval_drift(&zero).unwrap().amax(), 0.0, "{b}");
        }
    }

    #[test]
    fn running_cost_examples() {
        let c = CostSpec::scalar(1.0, 1.0).unwrap();
        assert_eq!(c.running_cost(&v(&[1.0]), &v(&[1.0])), 2.0);
        assert_eq!(c.running_cost(&v(&[0.0]), &v(&[0.0])), 0.0);
        let m = bench("manipulator");
        assert!((m.cost.running_cost(&v(&[0.3, 0.0]), &v(&[0.0])) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn benchmark_defaults_and_errors() {
        let c = bench("rl_circuit");
        assert_eq!(c.x0, v(&[0.5]));
        assert_eq!(c.xt, v(&[0.9]));
        let cu = bench("cubic");
        assert_eq!((cu.x0[0], cu.xt[0]), (1.0, 1.5));
        let m = bench("manipulator");
        assert_eq!(m.x0, v(&[0.3, 0.0]));
        assert_eq!(m.xt, v(&[0.1, 0.0]));
        for b in Benchmark::ALL {
            let p = bench(b.name());
            assert_eq!(p.epsilon() * p.horizon(), 1.0);
        }
        assert!(matches!(make_benchmark("pendulum", &BTreeMap::new()), Err(Error::UnknownBenchmark(_))));
        let mut bad = BTreeMap::new();
        bad.insert("mass".to_string(), 1.0);
        assert!(matches!(make_benchmark("cubic", &bad), Err(Error::Config(_))));
    }

    #[test]
    fn circuit_params_override() {
        let mut p = BTreeMap::new();
        p.insert("r".to_string(), 2.0);
        p.insert("l".to_string(), 0.5);
        let c = make_benchmark("rl_circuit", &p).unwrap();
        assert_eq!(c.system.eval_drift(&v(&[1.0])).unwrap(), v(&[-4.0]));
        assert_eq!(c.system.eval_input_map(&v(&[1.0])).unwrap()[(0, 0)], 2.0);
    }

    #[test]
    fn cost_rejects_bad_weights() {
        assert!(CostSpec::scalar(1.0, 0.0).is_err());
        assert!(CostSpec::scalar(1.0, -1.0).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(CostSpec::new(asym, DMatrix::identity(1, 1)).is_err());
    }

    #[test]
    fn positive_definite_cost_vanishes_only_at_origin() {
        let m = bench("manipulator");
        let zero_u = v(&[0.0]);
        assert_eq!(m.cost.running_cost(&v(&[0.0, 0.0]), &zero_u), 0.0);
        for x in [[1e-3, 0.0], [0.0, -1e-3], [0.2, -0.2]] {
            assert!(m.cost.running_cost(&v(&x), &zero_u) > 0.0);
        }
        assert!(m.cost.running_cost(&v(&[0.0, 0.0]), &v(&[1e-3])) > 0.0);
    }
}
