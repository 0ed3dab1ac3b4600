//! Polynomial critic `V̂(x) = wᵀφ(x)` and the state feedback it induces.
//!
//! Basis terms are plain monomials `∏ xᵢ^αᵢ` with total degree at least two,
//! so `φ(0) = 0`, `∇φ(0) = 0` and every induced policy vanishes at the origin.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{AffineSystem, Benchmark, Control, CostSpec, State};
use crate::error::{Error, Result};
use crate::sim::FeedbackLaw;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegulatorDirection {
    /// Stabilizes the plant in forward time (initial boundary layer).
    Forward,
    /// Stabilizes the plant in reverse time (terminal boundary layer).
    Backward,
}

impl RegulatorDirection {
    /// Sign in front of `½R⁻¹gᵀ∇V` in the induced control law.
    pub fn control_sign(self) -> f64 {
        match self {
            RegulatorDirection::Forward => -1.0,
            RegulatorDirection::Backward => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RegulatorDirection::Forward => "forward",
            RegulatorDirection::Backward => "backward",
        }
    }
}

impl fmt::Display for RegulatorDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BasisSet {
    state_dim: usize,
    terms: Vec<Vec<u32>>,
}

impl BasisSet {
    pub fn new(state_dim: usize, terms: Vec<Vec<u32>>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidArgument("basis needs at least one term".into()));
        }
        for (k, term) in terms.iter().enumerate() {
            if term.len() != state_dim {
                return Err(Error::Dimension {
                    what: "basis multi-index",
                    expected: state_dim,
                    got: term.len(),
                });
            }
            if term.iter().sum::<u32>() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "basis term {k} {term:?} has total degree below 2"
                )));
            }
            if terms[..k].contains(term) {
                return Err(Error::InvalidArgument(format!("duplicate basis term {term:?}")));
            }
        }
        Ok(Self { state_dim, terms })
    }

    /// The monomial bases used for each reference problem.
    pub fn for_benchmark(bench: Benchmark) -> Self {
        let terms = match bench {
            Benchmark::RlCircuit => vec![vec![2]],
            Benchmark::Cubic => vec![vec![2], vec![4]],
            Benchmark::Manipulator => vec![
                vec![2, 0],
                vec![1, 1],
                vec![0, 2],
                vec![3, 0],
                vec![2, 1],
                vec![1, 2],
                vec![0, 3],
            ],
        };
        let n = terms[0].len();
        Self::new(n, terms).expect("built-in bases are valid")
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn terms(&self) -> &[Vec<u32>] {
        &self.terms
    }

    fn check(&self, x: &State) {
        assert_eq!(x.len(), self.state_dim, "basis evaluated on a state of the wrong dimension");
    }

    pub fn eval(&self, x: &State) -> DVector<f64> {
        self.check(x);
        DVector::from_iterator(
            self.terms.len(),
            self.terms.iter().map(|alpha| {
                alpha
                    .iter()
                    .zip(x.iter())
                    .map(|(&p, &xi)| xi.powi(p as i32))
                    .product::<f64>()
            }),
        )
    }

    /// Row `k` is `∇φ_k(x)ᵀ`.
    pub fn gradient(&self, x: &State) -> DMatrix<f64> {
        self.check(x);
        let n = self.state_dim;
        let mut jac = DMatrix::zeros(self.terms.len(), n);
        for (k, alpha) in self.terms.iter().enumerate() {
            for i in 0..n {
                if alpha[i] == 0 {
                    continue;
                }
                let mut d = alpha[i] as f64;
                for (j, (&p, &xj)) in alpha.iter().zip(x.iter()).enumerate() {
                    let p = if j == i { p - 1 } else { p };
                    d *= xj.powi(p as i32);
                }
                jac[(k, i)] = d;
            }
        }
        jac
    }

    pub fn describe(&self) -> Vec<String> {
        self.terms
            .iter()
            .map(|alpha| {
                let parts: Vec<String> = alpha
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0)
                    .map(|(i, &p)| if p == 1 { format!("x{}", i + 1) } else { format!("x{}^{}", i + 1, p) })
                    .collect();
                parts.join("*")
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticWeights {
    pub w: DVector<f64>,
    pub direction: RegulatorDirection,
}

impl CriticWeights {
    pub fn new(w: DVector<f64>, direction: RegulatorDirection) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("critic weights"));
        }
        Ok(Self { w, direction })
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

pub fn eval_value(basis: &BasisSet, weights: &CriticWeights, x: &State) -> f64 {
    assert_eq!(basis.len(), weights.len(), "weights do not match basis");
    weights.w.dot(&basis.eval(x))
}

/// `u(x) = σ ½ R⁻¹ g(x)ᵀ ∇φ(x)ᵀ w`, σ = -1 forward and +1 backward.
#[derive(Clone, Debug)]
pub struct CriticPolicy {
    input_map: AffineSystem,
    control_weight_inv: DMatrix<f64>,
    basis: BasisSet,
    weights: DVector<f64>,
    direction: RegulatorDirection,
}

impl CriticPolicy {
    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn direction(&self) -> RegulatorDirection {
        self.direction
    }

    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }

    /// Swaps in new weights (used while weights adapt).
    pub fn set_weights(&mut self, weights: &DVector<f64>) {
        assert_eq!(weights.len(), self.basis.len(), "weights do not match basis");
        self.weights.copy_from(weights);
    }

    /// `∇φ(x) g(x) v`: rate of change of the basis along the input direction `v`.
    pub fn basis_rate_along_input(&self, x: &State, v: &Control) -> DVector<f64> {
        self.basis.gradient(x) * (self.input_map.input_map_raw(x) * v)
    }
}

impl FeedbackLaw for CriticPolicy {
    fn control(&self, x: &State) -> Control {
        let grad_v = self.basis.gradient(x).transpose() * &self.weights;
        let g = self.input_map.input_map_raw(x);
        (&self.control_weight_inv * g.transpose() * grad_v) * (0.5 * self.direction.control_sign())
    }
}

/// Builds the greedy policy of a critic. Only `g` is read from `sys`, so a
/// learner view is sufficient.
pub fn policy_from_weights(
    sys: &AffineSystem,
    cost: &CostSpec,
    basis: &BasisSet,
    weights: &CriticWeights,
) -> Result<CriticPolicy> {
    if basis.state_dim() != sys.state_dim() {
        return Err(Error::Dimension {
            what: "basis state dimension",
            expected: sys.state_dim(),
            got: basis.state_dim(),
        });
    }
    if basis.len() != weights.len() {
        return Err(Error::Dimension {
            what: "critic weights",
            expected: basis.len(),
            got: weights.len(),
        });
    }
    if cost.input_dim() != sys.input_dim() {
        return Err(Error::Dimension {
            what: "control weight",
            expected: sys.input_dim(),
            got: cost.input_dim(),
        });
    }
    Ok(CriticPolicy {
        input_map: sys.learner_view(),
        control_weight_inv: cost.control_weight_inv().clone(),
        basis: basis.clone(),
        weights: weights.w.clone(),
        direction: weights.direction,
    })
}

/// On-disk form of trained weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightRecord {
    pub direction: RegulatorDirection,
    pub basis_terms: Vec<Vec<u32>>,
    pub w: Vec<f64>,
    pub benchmark: String,
    pub trained_at_config_hash: String,
}

impl WeightRecord {
    pub fn new(benchmark: &str, basis: &BasisSet, weights: &CriticWeights, config_hash: &str) -> Self {
        Self {
            direction: weights.direction,
            basis_terms: basis.terms().to_vec(),
            w: weights.w.iter().copied().collect(),
            benchmark: benchmark.to_string(),
            trained_at_config_hash: config_hash.to_string(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: Self = serde_json::from_str(text)?;
        if rec.basis_terms.len() != rec.w.len() {
            return Err(Error::Parse(format!(
                "weight record has {} terms but {} weights",
                rec.basis_terms.len(),
                rec.w.len()
            )));
        }
        Ok(rec)
    }

    pub fn basis(&self) -> Result<BasisSet> {
        let n = self.basis_terms.first().map_or(0, |t| t.len());
        BasisSet::new(n, self.basis_terms.clone())
    }

    pub fn weights(&self) -> Result<CriticWeights> {
        CriticWeights::new(DVector::from_vec(self.w.clone()), self.direction)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::make_benchmark;
    use std::collections::BTreeMap;

    fn s(xs: &[f64]) -> State {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn basis_values() {
        let b = BasisSet::for_benchmark(Benchmark::Cubic);
        assert_eq!(b.eval(&s(&[2.0])), s(&[4.0, 16.0]));
        let m = BasisSet::for_benchmark(Benchmark::Manipulator);
        assert_eq!(m.eval(&s(&[1.0, 2.0])), s(&[1.0, 2.0, 4.0, 1.0, 2.0, 4.0, 8.0]));
        assert_eq!(m.eval(&s(&[0.0, 0.0])).amax(), 0.0);
        assert_eq!(m.describe()[4], "x1^2*x2");
    }

    #[test]
    fn basis_gradients() {
        let b = BasisSet::new(1, vec![vec![2]]).unwrap();
        assert_eq!(b.gradient(&s(&[3.0])), DMatrix::from_element(1, 1, 6.0));
        let p = BasisSet::new(2, vec![vec![1, 1]]).unwrap();
        assert_eq!(p.gradient(&s(&[0.7, -1.3])), DMatrix::from_row_slice(1, 2, &[-1.3, 0.7]));
        let m = BasisSet::for_benchmark(Benchmark::Manipulator);
        assert_eq!(m.gradient(&s(&[0.0, 0.0])).amax(), 0.0);
    }

    #[test]
    fn basis_validation() {
        assert!(BasisSet::new(1, vec![vec![1]]).is_err());
        assert!(BasisSet::new(1, vec![vec![2], vec![2]]).is_err());
        assert!(BasisSet::new(2, vec![vec![2]]).is_err());
        assert!(BasisSet::new(1, vec![]).is_err());
    }

    #[test]
    fn value_examples() {
        let b = BasisSet::for_benchmark(Benchmark::RlCircuit);
        let w = CriticWeights::new(s(&[0.41]), RegulatorDirection::Forward).unwrap();
        assert!((eval_value(&b, &w, &s(&[1.0])) - 0.41).abs() < 1e-15);
        let w = CriticWeights::new(s(&[2f64.sqrt() - 1.0]), RegulatorDirection::Forward).unwrap();
        assert!((eval_value(&b, &w, &s(&[2.0])) - 1.65685).abs() < 1e-5);
        let zero = CriticWeights::new(s(&[0.0]), RegulatorDirection::Forward).unwrap();
        assert_eq!(eval_value(&b, &zero, &s(&[5.0])), 0.0);
    }

    #[test]
    fn induced_policies_on_circuit() {
        let p = make_benchmark("rl_circuit", &BTreeMap::new()).unwrap();
        let view = p.system.learner_view();
        let b = BasisSet::for_benchmark(Benchmark::RlCircuit);
        let fw = CriticWeights::new(s(&[2f64.sqrt() - 1.0]), RegulatorDirection::Forward).unwrap();
        let fwd = policy_from_weights(&view, &p.cost, &b, &fw).unwrap();
        assert!((fwd.control(&s(&[0.5]))[0] + 0.20711).abs() < 1e-5);
        assert_eq!(fwd.control(&s(&[0.0]))[0], 0.0);

        let bw = CriticWeights::new(s(&[1.0 + 2f64.sqrt()]), RegulatorDirection::Backward).unwrap();
        let bwd = policy_from_weights(&view, &p.cost, &b, &bw).unwrap();
        let x = 0.3;
        let u = bwd.control(&s(&[x]))[0];
        assert!((u - (1.0 + 2f64.sqrt()) * x).abs() < 1e-12);
        // reverse-time closed loop dx/ds = x - u = -√2 x
        assert!(((x - u) / x + 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn opposite_weights_give_identical_laws_across_directions() {
        let p = make_benchmark("manipulator", &BTreeMap::new()).unwrap();
        let b = BasisSet::for_benchmark(Benchmark::Manipulator);
        let w = s(&[2.0, 0.1, 0.3, -0.2, 0.05, 0.0, 0.4]);
        let f = policy_from_weights(&p.system, &p.cost, &b, &CriticWeights::new(w.clone(), RegulatorDirection::Forward).unwrap()).unwrap();
        let g = policy_from_weights(&p.system, &p.cost, &b, &CriticWeights::new(-w, RegulatorDirection::Backward).unwrap()).unwrap();
        for x in [[0.1, 0.2], [-0.4, 0.3], [0.25, -0.05]] {
            assert_eq!(f.control(&s(&x)), g.control(&s(&x)));
        }
    }

    #[test]
    fn weight_record_json() {
        let b = BasisSet::for_benchmark(Benchmark::Cubic);
        let w = CriticWeights::new(s(&[0.8, 0.7]), RegulatorDirection::Backward).unwrap();
        let rec = WeightRecord::new("cubic", &b, &w, "abc123");
        let text = rec.to_json().unwrap();
        assert!(text.contains("\"direction\": \"backward\""));
        let back = WeightRecord::from_json(&text).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.basis().unwrap(), b);
        assert!(WeightRecord::from_json("{\"direction\":\"forward\"}").is_err());
    }
}
