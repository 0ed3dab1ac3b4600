//! Model-based reference solutions: Riccati regulators, the closed-form
//! cubic value functions, a shooting solver for the finite-horizon
//! optimality system, and least-squares projection onto a critic basis.
//!
//! Everything here reads the drift, so it needs a full-visibility system.

use nalgebra::{Complex, DMatrix, DVector};
use serde::Serialize;

use crate::critic::{BasisSet, CriticWeights, RegulatorDirection};
use crate::dynamics::{Benchmark, BoundaryProblem, CostSpec, DomainBox, State, Visibility};
use crate::error::{Error, Result};
use crate::linalg::{self, solve_lyapunov, symmetrize};
use crate::sim::{IntegratorConfig, Trajectory};

const NEWTON_KLEINMAN_MAX_ITER: usize = 100;

/// Quadratic value `V(x) = xᵀPx` of a linear regulator.
///
/// For the backward direction `p` is the stabilizing solution for the
/// reverse-time pair `(-A, -B)`, so it is positive definite and the
/// backward policy is `u = +R⁻¹BᵀPx`. `closed_loop_eigs` are those of the
/// loop in the regulator's own clock (reverse time for backward), so they
/// all have negative real part.
#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    pub p: DMatrix<f64>,
    pub direction: RegulatorDirection,
    pub closed_loop_eigs: Vec<Complex<f64>>,
}

impl RiccatiSolution {
    /// Feedback gain `K` with `u = -Kx` in the regulator's own clock.
    pub fn gain(&self, b: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let r_inv = r
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("control weight is singular".into()))?;
        let b_own = b * orientation(self.direction);
        Ok(r_inv * b_own.transpose() * &self.p)
    }
}

fn orientation(direction: RegulatorDirection) -> f64 {
    match direction {
        RegulatorDirection::Forward => 1.0,
        RegulatorDirection::Backward => -1.0,
    }
}

fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    m.clone().complex_eigenvalues().iter().all(|e| e.re < 0.0)
}

/// Bass' construction of a stabilizing gain: with `β > ‖A‖` solve
/// `(A + βI)Z + Z(A + βI)ᵀ = 2BBᵀ`; then `A - BBᵀZ⁻¹` is Hurwitz whenever
/// `(A, B)` is controllable.
fn stabilizing_seed(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if is_hurwitz(a) {
        return Ok(DMatrix::zeros(b.ncols(), n));
    }
    let beta = a.norm() + 1.0;
    let shifted = a + DMatrix::identity(n, n) * beta;
    let z = solve_lyapunov(&(-shifted.transpose()), &(b * b.transpose() * 2.0))
        .map_err(|_| Error::NoStabilizingSolution("seed Lyapunov equation is singular".into()))?;
    let z_inv = symmetrize(&z)
        .try_inverse()
        .ok_or_else(|| Error::NoStabilizingSolution("pair is not controllable (seed Gramian singular)".into()))?;
    let k = b.transpose() * z_inv;
    if !is_hurwitz(&(a - b * &k)) {
        return Err(Error::NoStabilizingSolution("could not construct a stabilizing seed gain".into()));
    }
    Ok(k)
}

/// Residual `AᵀP + PA - PBR⁻¹BᵀP + Q` of the algebraic Riccati equation.
pub fn riccati_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    a.transpose() * p + p * a - p * b * r_inv * b.transpose() * p + q
}

/// Stabilizing solution of the continuous algebraic Riccati equation by
/// Newton–Kleinman iteration.
pub fn solve_riccati(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    direction: RegulatorDirection,
) -> Result<RiccatiSolution> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::InvalidArgument("riccati: inconsistent matrix shapes".into()));
    }
    if n == 0 || n > 8 {
        return Err(Error::InvalidArgument(format!("riccati: state dimension {n} outside 1..=8")));
    }
    if linalg::min_eigenvalue(&symmetrize(q)) < -1e-12 {
        return Err(Error::InvalidArgument("riccati: Q must be positive semidefinite".into()));
    }
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("riccati: R is singular".into()))?;
    let sign = orientation(direction);
    let a_own = a * sign;
    let b_own = b * sign;

    let mut k = stabilizing_seed(&a_own, &b_own)?;
    let mut p = DMatrix::<f64>::zeros(n, n);
    for iter in 0..NEWTON_KLEINMAN_MAX_ITER {
        let closed = &a_own - &b_own * &k;
        let rhs = q + k.transpose() * r * &k;
        let next = symmetrize(
            &solve_lyapunov(&closed, &rhs).map_err(|e| Error::NoStabilizingSolution(e.to_string()))?,
        );
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NoStabilizingSolution("Newton–Kleinman iterate is not finite".into()));
        }
        let change = (&next - &p).amax();
        p = next;
        k = &r_inv * b_own.transpose() * &p;
        if iter > 0 && change <= 1e-14 * (1.0 + p.amax()) {
            break;
        }
    }
    let closed = &a_own - &b_own * &k;
    let eigs: Vec<Complex<f64>> = closed.clone().complex_eigenvalues().iter().copied().collect();
    if eigs.iter().any(|e| e.re >= 0.0) {
        return Err(Error::NoStabilizingSolution("closed loop is not Hurwitz".into()));
    }
    Ok(RiccatiSolution {
        p,
        direction,
        closed_loop_eigs: eigs,
    })
}

/// Jacobian linearization `(A, B)` of the plant about the origin.
pub fn linearize(problem: &BoundaryProblem) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let zero = State::zeros(problem.system.state_dim());
    Ok((problem.system.drift_jacobian(&zero)?, problem.system.eval_input_map(&zero)?))
}

/// Riccati solution for the linearization of a benchmark about the origin.
pub fn linear_regulator(problem: &BoundaryProblem, direction: RegulatorDirection) -> Result<RiccatiSolution> {
    let (a, b) = linearize(problem)?;
    solve_riccati(
        &a,
        &b,
        problem.cost.state_weight(),
        problem.cost.control_weight(),
        direction,
    )
}

/// Expresses `xᵀPx` in a polynomial basis: degree-two monomials receive the
/// matching entries of `P` (off-diagonals doubled), all other terms zero.
/// Fails if the basis lacks a needed quadratic monomial.
pub fn quadratic_weights(p: &DMatrix<f64>, basis: &BasisSet, direction: RegulatorDirection) -> Result<CriticWeights> {
    let n = basis.state_dim();
    if p.shape() != (n, n) {
        return Err(Error::Dimension {
            what: "value Hessian",
            expected: n,
            got: p.nrows(),
        });
    }
    let mut w = DVector::zeros(basis.len());
    let mut covered = DMatrix::from_element(n, n, false);
    for (k, term) in basis.terms().iter().enumerate() {
        if term.iter().sum::<u32>() != 2 {
            continue;
        }
        let idx: Vec<usize> = term
            .iter()
            .enumerate()
            .flat_map(|(i, &e)| std::iter::repeat_n(i, e as usize))
            .collect();
        let (i, j) = (idx[0], idx[1]);
        w[k] = if i == j { p[(i, i)] } else { p[(i, j)] + p[(j, i)] };
        covered[(i, j)] = true;
        covered[(j, i)] = true;
    }
    for i in 0..n {
        for j in 0..n {
            if !covered[(i, j)] && p[(i, j)].abs() > 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "basis has no monomial for the x{}·x{} entry",
                    i + 1,
                    j + 1
                )));
            }
        }
    }
    CriticWeights::new(w, direction)
}

/// Closed-form value functions of the cubic benchmark `ẋ = x³ + u`,
/// `ℛ = x² + u²`. Returns `(V(x), V'(x))`.
///
/// Forward: `V₊' = 2x³ + 2x√(1+x⁴)`,
/// `V₊ = ½x⁴ + ½x²√(1+x⁴) + ½ln(x² + √(1+x⁴))`.
/// Backward (the reverse-time stabilizing root): `V₋' = -2x³ + 2x√(1+x⁴)`,
/// `V₋ = -½x⁴ + ½x²√(1+x⁴) + ½ln(x² + √(1+x⁴))`. The backward forms are
/// evaluated in a cancellation-free arrangement. Intended for `|x| ≤ 10`.
pub fn cubic_value(x: f64, direction: RegulatorDirection) -> (f64, f64) {
    let x2 = x * x;
    let s = (1.0 + x2 * x2).sqrt();
    let log_term = 0.5 * (x2 + s).ln();
    match direction {
        RegulatorDirection::Forward => (0.5 * x2 * x2 + 0.5 * x2 * s + log_term, 2.0 * x * x2 + 2.0 * x * s),
        RegulatorDirection::Backward => {
            let damped = 1.0 / (s + x2);
            (0.5 * x2 * damped + log_term, 2.0 * x * damped)
        }
    }
}

/// Pointwise HJB residual `𝒮(x) + κ∇Vᵀf(x) - ¼∇VᵀgR⁻¹gᵀ∇V` of a candidate
/// value gradient; `κ = -1` for the backward (reverse-time) equation.
pub fn hjb_residual(
    problem: &BoundaryProblem,
    x: &State,
    grad: &DVector<f64>,
    direction: RegulatorDirection,
) -> Result<f64> {
    let f = problem.system.eval_drift(x)?;
    let g = problem.system.eval_input_map(x)?;
    let gt_grad = g.transpose() * grad;
    let quad = gt_grad.dot(&(problem.cost.control_weight_inv() * &gt_grad));
    Ok(problem.cost.state_cost(x) + orientation(direction) * grad.dot(&f) - 0.25 * quad)
}

/// Result of the finite-horizon shooting solve.
///
/// `costates[k]` is `λ(t_k)`, the gradient of the cost-to-go, and
/// `trajectory.cost_integral` is the accumulated optimal cost.
#[derive(Clone, Debug)]
pub struct BvpSolution {
    pub trajectory: Trajectory,
    pub costates: Vec<State>,
    pub costate_init: State,
    pub optimal_cost: f64,
    pub converged: bool,
    pub residual: f64,
    /// Number of shooting segments that produced the solution.
    pub segments: usize,
}

#[derive(Serialize)]
struct OracleSummary<'a> {
    benchmark: &'a str,
    #[serde(rename = "T")]
    horizon: f64,
    optimal_cost: f64,
    costate_init: Vec<f64>,
    residual: f64,
}

impl BvpSolution {
    pub fn summary_json(&self, benchmark: &str, horizon: f64) -> Result<String> {
        let s = OracleSummary {
            benchmark,
            horizon,
            optimal_cost: self.optimal_cost,
            costate_init: self.costate_init.iter().copied().collect(),
            residual: self.residual,
        };
        Ok(serde_json::to_string_pretty(&s)?)
    }
}

/// Segment counts tried in turn; a count is used only if the previous one
/// failed to converge.
const SHOOTING_SCHEDULE: [usize; 6] = [1, 4, 8, 16, 32, 64];
const NEWTON_MAX_ITER: usize = 40;
const DIVERGENCE_NORM: f64 = 1e8;
/// Default tolerance on the shooting residual.
pub const SHOOTING_TOL: f64 = 1e-9;
const LONG_HORIZON: f64 = 40.0;
/// First boundary scale and smallest admissible step of the continuation.
const CONTINUATION_START: f64 = 0.1;
const CONTINUATION_MIN_STEP: f64 = 1e-3;

/// Pontryagin system `z = (x, λ, J)` of a boundary problem.
struct OptimalitySystem<'a> {
    problem: &'a BoundaryProblem,
    n: usize,
}

impl OptimalitySystem<'_> {
    fn control(&self, x: &State, lambda: &State) -> DVector<f64> {
        let g = self.problem.system.input_map_raw(x);
        (self.problem.cost.control_weight_inv() * g.transpose() * lambda) * -0.5
    }

    fn field(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.n;
        let x = z.rows(0, n).into_owned();
        let lambda = z.rows(n, n).into_owned();
        let u = self.control(&x, &lambda);
        let sys = &self.problem.system;
        let cost: &CostSpec = &self.problem.cost;
        let xdot = sys.eval_drift(&x)? + sys.input_map_raw(&x) * &u;
        let jf = sys.drift_jacobian(&x)?;
        let jg = sys.input_term_jacobian(&x, &u)?;
        let ldot = -(cost.state_cost_gradient(&x) + jf.transpose() * &lambda + jg.transpose() * &lambda);
        let mut out = DVector::zeros(2 * n + 1);
        out.rows_mut(0, n).copy_from(&xdot);
        out.rows_mut(n, n).copy_from(&ldot);
        out[2 * n] = cost.running_cost(&x, &u);
        Ok(out)
    }

    /// RK4 over `steps` steps; returns every sample, starting with `z0`.
    fn integrate(&self, z0: &DVector<f64>, steps: usize, h: f64) -> Result<Vec<DVector<f64>>> {
        let mut out = Vec::with_capacity(steps + 1);
        let mut z = z0.clone();
        out.push(z.clone());
        for k in 0..steps {
            let k1 = self.field(&z)?;
            let k2 = self.field(&(&z + &k1 * (h / 2.0)))?;
            let k3 = self.field(&(&z + &k2 * (h / 2.0)))?;
            let k4 = self.field(&(&z + &k3 * h))?;
            z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            let norm = z.rows(0, 2 * self.n).norm();
            if !norm.is_finite() || norm > DIVERGENCE_NORM {
                return Err(Error::Divergence {
                    time: (k + 1) as f64 * h,
                    norm,
                    partial: None,
                });
            }
            out.push(z.clone());
        }
        Ok(out)
    }

    fn end_of_segment(&self, node: &DVector<f64>, steps: usize, h: f64) -> Result<DVector<f64>> {
        let mut z0 = DVector::zeros(2 * self.n + 1);
        z0.rows_mut(0, 2 * self.n).copy_from(node);
        let path = self.integrate(&z0, steps, h)?;
        Ok(path.last().expect("integrate returns at least one sample").rows(0, 2 * self.n).into_owned())
    }
}

/// Multiple-shooting layout: the unknowns are `λ(0)` and the full
/// `(x, λ)` at every interior node.
struct Shooter<'a> {
    sys: OptimalitySystem<'a>,
    bounds: Vec<usize>,
    h: f64,
    guide: Option<&'a LinearGuide>,
}

/// Initial guess from the linearization: the state is the sum of a forward
/// boundary layer leaving `x0` and a backward one arriving at `xT`, and the
/// costate is `2P₊x₊ - 2P₋x₋`.
struct LinearGuide {
    forward_loop: DMatrix<f64>,
    forward_p: DMatrix<f64>,
    reverse_loop: DMatrix<f64>,
    backward_p: DMatrix<f64>,
}

impl LinearGuide {
    fn new(problem: &BoundaryProblem) -> Option<Self> {
        let (a, b) = linearize(problem).ok()?;
        let r = problem.cost.control_weight();
        let fwd = linear_regulator(problem, RegulatorDirection::Forward).ok()?;
        let bwd = linear_regulator(problem, RegulatorDirection::Backward).ok()?;
        Some(Self {
            forward_loop: &a - &b * fwd.gain(&b, r).ok()?,
            forward_p: fwd.p,
            reverse_loop: -&a + &b * bwd.gain(&b, r).ok()?,
            backward_p: bwd.p,
        })
    }

    fn at(&self, problem: &BoundaryProblem, t: f64) -> (State, State) {
        let xf = (&self.forward_loop * t).exp() * &problem.x0;
        let xb = (&self.reverse_loop * (problem.horizon() - t)).exp() * &problem.xt;
        let lambda = (&self.forward_p * &xf - &self.backward_p * &xb) * 2.0;
        (xf + xb, lambda)
    }
}

impl<'a> Shooter<'a> {
    fn new(
        problem: &'a BoundaryProblem,
        n: usize,
        total: usize,
        h: f64,
        guide: Option<&'a LinearGuide>,
        segments: usize,
    ) -> Self {
        Self {
            sys: OptimalitySystem { problem, n },
            bounds: (0..=segments).map(|i| i * total / segments).collect(),
            h,
            guide,
        }
    }

    fn segments(&self) -> usize {
        self.bounds.len() - 1
    }

    fn node(&self, unknowns: &DVector<f64>, i: usize) -> DVector<f64> {
        let n = self.sys.n;
        if i == 0 {
            let mut z = DVector::zeros(2 * n);
            z.rows_mut(0, n).copy_from(&self.sys.problem.x0);
            z.rows_mut(n, n).copy_from(&unknowns.rows(0, n));
            z
        } else {
            unknowns.rows(n + 2 * n * (i - 1), 2 * n).into_owned()
        }
    }

    fn segment_steps(&self, i: usize) -> usize {
        self.bounds[i + 1] - self.bounds[i]
    }

    /// Residual block of segment `i` given the end state of that segment.
    fn block(&self, unknowns: &DVector<f64>, i: usize, end: &DVector<f64>) -> DVector<f64> {
        let n = self.sys.n;
        if i + 1 == self.segments() {
            end.rows(0, n) - &self.sys.problem.xt
        } else {
            end - self.node(unknowns, i + 1)
        }
    }

    fn block_offset(&self, i: usize) -> usize {
        2 * self.sys.n * i
    }

    fn residual(&self, unknowns: &DVector<f64>) -> Result<DVector<f64>> {
        let dim = unknowns.len();
        let mut r = DVector::zeros(dim);
        for i in 0..self.segments() {
            let end = self.sys.end_of_segment(&self.node(unknowns, i), self.segment_steps(i), self.h)?;
            let blk = self.block(unknowns, i, &end);
            r.rows_mut(self.block_offset(i), blk.len()).copy_from(&blk);
        }
        Ok(r)
    }

    /// Finite-difference Jacobian exploiting the block structure: a node only
    /// affects its own segment's block and the continuity block before it.
    fn jacobian(&self, unknowns: &DVector<f64>, r: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.sys.n;
        let dim = unknowns.len();
        let mut jac = DMatrix::zeros(dim, dim);
        for i in 0..self.segments() {
            let (col0, width) = if i == 0 { (0, n) } else { (n + 2 * n * (i - 1), 2 * n) };
            for c in 0..width {
                let col = col0 + c;
                let step = 1e-7 * (1.0 + unknowns[col].abs());
                let mut pert = unknowns.clone();
                pert[col] += step;
                let end = self.sys.end_of_segment(&self.node(&pert, i), self.segment_steps(i), self.h)?;
                let blk = self.block(&pert, i, &end);
                let off = self.block_offset(i);
                for row in 0..blk.len() {
                    jac[(off + row, col)] = (blk[row] - r[off + row]) / step;
                }
                if i > 0 {
                    // continuity block i-1 depends on node i with coefficient -1
                    jac[(self.block_offset(i - 1) + c, col)] = -1.0;
                }
            }
        }
        Ok(jac)
    }

    fn initial_guess(&self) -> DVector<f64> {
        let n = self.sys.n;
        let p = self.sys.problem;
        let dim = n + 2 * n * (self.segments() - 1);
        let mut u = DVector::zeros(dim);
        let Some(guide) = self.guide else {
            return u;
        };
        u.rows_mut(0, n).copy_from(&guide.at(p, 0.0).1);
        for i in 1..self.segments() {
            let (x, lambda) = guide.at(p, self.bounds[i] as f64 * self.h);
            u.rows_mut(n + 2 * n * (i - 1), n).copy_from(&x);
            u.rows_mut(2 * n * i, n).copy_from(&lambda);
        }
        u
    }

    /// Damped Newton with backtracking on the residual norm.
    fn solve(&self, tol: f64, guess: DVector<f64>) -> (DVector<f64>, f64, bool) {
        let mut u = guess;
        let mut r = match self.residual(&u) {
            Ok(r) => r,
            Err(_) => return (u, f64::INFINITY, false),
        };
        let mut norm = r.norm();
        for _ in 0..NEWTON_MAX_ITER {
            if norm <= tol {
                return (u, norm, true);
            }
            let Ok(jac) = self.jacobian(&u, &r) else {
                return (u, norm, false);
            };
            let Some(delta) = jac.lu().solve(&(-&r)) else {
                return (u, norm, false);
            };
            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha >= 1.0 / 1024.0 {
                let trial = &u + &delta * alpha;
                if let Ok(rt) = self.residual(&trial) {
                    let nt = rt.norm();
                    if nt < (1.0 - 1e-4 * alpha) * norm {
                        u = trial;
                        r = rt;
                        norm = nt;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                return (u, norm, norm <= tol);
            }
        }
        (u, norm, norm <= tol)
    }

    fn assemble(&self, unknowns: &DVector<f64>) -> Result<(Trajectory, Vec<State>)> {
        let n = self.sys.n;
        let mut traj = Trajectory {
            times: Vec::new(),
            states: Vec::new(),
            controls: Vec::new(),
            cost_integral: Vec::new(),
        };
        let mut costates = Vec::new();
        let mut accumulated = 0.0;
        for i in 0..self.segments() {
            let mut z0 = DVector::zeros(2 * n + 1);
            z0.rows_mut(0, 2 * n).copy_from(&self.node(unknowns, i));
            let path = self.sys.integrate(&z0, self.segment_steps(i), self.h)?;
            let skip = usize::from(i > 0);
            for (k, z) in path.iter().enumerate().skip(skip) {
                let x = z.rows(0, n).into_owned();
                let lambda = z.rows(n, n).into_owned();
                traj.times.push((self.bounds[i] + k) as f64 * self.h);
                traj.controls.push(self.sys.control(&x, &lambda));
                traj.states.push(x);
                costates.push(lambda);
                traj.cost_integral.push(accumulated + z[2 * n]);
            }
            accumulated += path.last().map_or(0.0, |z| z[2 * n]);
        }
        Ok((traj, costates))
    }
}

/// Solves the Pontryagin two-point problem `x(0) = x0`, `x(T) = xT` by
/// damped Newton shooting on the unknown costates. Single shooting is tried
/// first; on failure the horizon is split into progressively more segments.
pub fn solve_tpbvp_shooting(problem: &BoundaryProblem, cfg: &IntegratorConfig, tol: f64) -> Result<BvpSolution> {
    cfg.validate()?;
    if problem.system.visibility() != Visibility::Full {
        return Err(Error::Visibility);
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("shooting tolerance must be positive".into()));
    }
    let h = cfg.step;
    let total = (problem.horizon() / h).round() as usize;
    if total == 0 {
        return Err(Error::InvalidArgument("horizon shorter than one integration step".into()));
    }
    let n = problem.system.state_dim();
    let guide = LinearGuide::new(problem);
    let mut best = f64::INFINITY;
    let finish = |shooter: &Shooter, unknowns: &DVector<f64>, residual: f64| -> Result<BvpSolution> {
        let (trajectory, costates) = shooter.assemble(unknowns)?;
        let optimal_cost = trajectory.total_cost();
        Ok(BvpSolution {
            costate_init: costates[0].clone(),
            trajectory,
            costates,
            optimal_cost,
            converged: true,
            residual,
            segments: shooter.segments(),
        })
    };
    let mut finest = 1;
    for &segments in &SHOOTING_SCHEDULE {
        if segments > total {
            break;
        }
        finest = segments;
        let shooter = Shooter::new(problem, n, total, h, guide.as_ref(), segments);
        let (unknowns, residual, converged) = shooter.solve(tol, shooter.initial_guess());
        log::debug!("shooting with {segments} segment(s): residual {residual:e}");
        best = best.min(residual);
        if converged {
            return finish(&shooter, &unknowns, residual);
        }
    }

    // Far from the origin the linearized guess can be poor enough that the
    // flow escapes within a segment. Continue from shrunken boundary values,
    // where it is good, towards the real ones.
    let scaled = |s: f64| problem.with_boundary(&problem.x0 * s, &problem.xt * s);
    let mut s = CONTINUATION_START;
    let start_problem = scaled(s)?;
    let start = Shooter::new(&start_problem, n, total, h, guide.as_ref(), finest);
    let (mut unknowns, residual, converged) = start.solve(tol, start.initial_guess());
    if !converged {
        return Err(Error::ShootingDiverged { residual: best.min(residual) });
    }
    let mut ds = CONTINUATION_START;
    while s < 1.0 {
        let next = (s + ds).min(1.0);
        let p = scaled(next)?;
        let shooter = Shooter::new(&p, n, total, h, guide.as_ref(), finest);
        let (trial, residual, converged) = shooter.solve(tol, unknowns.clone());
        log::debug!("continuation to {next}: residual {residual:e}");
        if converged {
            if next == 1.0 {
                return finish(&Shooter::new(problem, n, total, h, guide.as_ref(), finest), &trial, residual);
            }
            unknowns = trial;
            s = next;
            ds *= 1.5;
        } else {
            ds *= 0.5;
            if ds < CONTINUATION_MIN_STEP {
                return Err(Error::ShootingDiverged { residual: best.min(residual) });
            }
        }
    }
    unreachable!("continuation ends when s reaches 1")
}

/// Infinite-horizon regulator values `(V₊(x0), V₋(xT))` of a problem.
///
/// Closed forms are used where they exist (the linear circuit, the cubic
/// plant with unit weights); otherwise each value is the optimal cost of
/// steering to, or from, the origin over a horizon long enough for the
/// boundary layers to decouple.
pub fn regulator_values(problem: &BoundaryProblem, cfg: &IntegratorConfig) -> Result<(f64, f64)> {
    let unit_cost = CostSpec::scalar(1.0, 1.0).ok();
    match Benchmark::parse(&problem.name) {
        Ok(Benchmark::RlCircuit) => {
            let fwd = linear_regulator(problem, RegulatorDirection::Forward)?;
            let bwd = linear_regulator(problem, RegulatorDirection::Backward)?;
            let quad = |p: &DMatrix<f64>, x: &State| x.dot(&(p * x));
            Ok((quad(&fwd.p, &problem.x0), quad(&bwd.p, &problem.xt)))
        }
        Ok(Benchmark::Cubic) if Some(&problem.cost) == unit_cost.as_ref() => Ok((
            cubic_value(problem.x0[0], RegulatorDirection::Forward).0,
            cubic_value(problem.xt[0], RegulatorDirection::Backward).0,
        )),
        _ => {
            let long = problem.with_horizon(LONG_HORIZON.max(2.0 * problem.horizon()))?;
            let zero = State::zeros(problem.system.state_dim());
            let to_origin = long.with_boundary(problem.x0.clone(), zero.clone())?;
            let from_origin = long.with_boundary(zero, problem.xt.clone())?;
            Ok((
                solve_tpbvp_shooting(&to_origin, cfg, SHOOTING_TOL)?.optimal_cost,
                solve_tpbvp_shooting(&from_origin, cfg, SHOOTING_TOL)?.optimal_cost,
            ))
        }
    }
}

/// Least-squares coefficients of `value_fn` on `basis` over a uniform grid
/// of `domain` holding at least `n_samples` points.
pub fn project_value_on_basis(
    value_fn: impl Fn(&State) -> f64,
    basis: &BasisSet,
    domain: &DomainBox,
    n_samples: usize,
) -> Result<DVector<f64>> {
    let dim = basis.state_dim();
    if domain.len() != dim {
        return Err(Error::Dimension {
            what: "projection domain",
            expected: dim,
            got: domain.len(),
        });
    }
    if n_samples < 10 * basis.len() {
        return Err(Error::InvalidArgument(format!(
            "need at least {} samples for {} basis terms",
            10 * basis.len(),
            basis.len()
        )));
    }
    let mut per_axis = 2usize;
    while per_axis.pow(dim as u32) < n_samples {
        per_axis += 1;
    }
    let count = per_axis.pow(dim as u32);
    let mut phi = DMatrix::zeros(count, basis.len());
    let mut target = DVector::zeros(count);
    for row in 0..count {
        let mut rem = row;
        let x = State::from_iterator(
            dim,
            domain.iter().map(|&(lo, hi)| {
                let k = rem % per_axis;
                rem /= per_axis;
                lo + (hi - lo) * k as f64 / (per_axis - 1) as f64
            }),
        );
        phi.set_row(row, &basis.eval(&x).transpose());
        target[row] = value_fn(&x);
    }
    let svd = phi.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax == 0.0 || smin / smax < 1e-12 {
        return Err(Error::RankDeficient(if smax == 0.0 { 0.0 } else { smin / smax }));
    }
    svd.solve(&target, 0.0)
        .map_err(|e| Error::InvalidArgument(format!("least squares failed: {e}")))
}

/// Trapezoidal total of the running cost along a trajectory.
pub fn finite_horizon_cost(traj: &Trajectory, cost: &CostSpec) -> f64 {
    let rates: Vec<f64> = traj
        .states
        .iter()
        .zip(&traj.controls)
        .map(|(x, u)| cost.running_cost(x, u))
        .collect();
    traj.times
        .windows(2)
        .zip(rates.windows(2))
        .map(|(t, r)| 0.5 * (t[1] - t[0]) * (r[0] + r[1]))
        .sum()
}
