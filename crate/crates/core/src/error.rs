use thiserror::Error;

use crate::learner::TrainingOutcome;
use crate::sim::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// The learner-facing view of a plant was asked for its drift term.
    #[error("drift evaluation refused: system handle only exposes the input map")]
    Visibility,

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("state diverged at t = {time}: |x| = {norm:e}")]
    Divergence {
        time: f64,
        norm: f64,
        partial: Option<Box<Trajectory>>,
    },

    #[error("requested window [{lo}, {hi}] outside available data [{start}, {end}]")]
    Range {
        lo: f64,
        hi: f64,
        start: f64,
        end: f64,
    },

    #[error("unknown benchmark `{0}` (expected rl_circuit, cubic or manipulator)")]
    UnknownBenchmark(String),

    #[error("persistent excitation lost: lambda_min(xi) = {lambda_min:e} stayed below {floor:e} over [{from}, {to}]")]
    PeViolation {
        lambda_min: f64,
        floor: f64,
        from: f64,
        to: f64,
        outcome: Box<TrainingOutcome>,
    },

    #[error("weights did not settle within {iterations} iterations (last change {last_change:e})")]
    NonConvergence {
        iterations: usize,
        last_change: f64,
        outcome: Box<TrainingOutcome>,
    },

    #[error("no stabilizing Riccati solution: {0}")]
    NoStabilizingSolution(String),

    #[error("shooting failed to converge: best terminal residual {residual:e}")]
    ShootingDiverged { residual: f64 },

    #[error("regressor matrix is rank deficient (smallest singular value {0:e})")]
    RankDeficient(f64),

    #[error("trajectory grids differ: {0}")]
    GridMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed record: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
