//! The `boundary-rl` experiment runner.
//!
//! Exit codes: 0 success, 1 bad configuration or failed checks,
//! 2 training did not converge, 3 persistent excitation lost,
//! 4 trained weights missing, 5 shooting oracle diverged,
//! 6 corrupt weight file.

use std::ffi::OsString;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;

use crate::composer::{
    interior_quietness, near_optimality_gap, terminal_error, write_sweep_csv, CompositeController, SweepRow,
};
use crate::config::ExperimentConfig;
use crate::critic::{eval_value, policy_from_weights, BasisSet, CriticWeights, RegulatorDirection, WeightRecord};
use crate::dynamics::{Benchmark, BoundaryProblem};
use crate::error::Error;
use crate::learner::{train_regulator, TrainingOutcome};
use crate::oracle::{solve_tpbvp_shooting, SHOOTING_TOL};
use crate::verify::{Verifier, CHECKS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_NON_CONVERGENCE: i32 = 2;
pub const EXIT_PE_VIOLATION: i32 = 3;
pub const EXIT_MISSING_WEIGHTS: i32 = 4;
pub const EXIT_SHOOTING_DIVERGED: i32 = 5;
pub const EXIT_CORRUPT_WEIGHTS: i32 = 6;

#[derive(Parser, Debug)]
#[command(name = "boundary-rl", version, about = "Learn two-point boundary controllers from forward and backward regulators")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in benchmark to use when no config is given.
    #[arg(long, global = true)]
    benchmark: Option<String>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the forward and backward regulators.
    Train,
    /// Run the composite controller over the configured horizon.
    Simulate,
    /// Compose, cost and compare against the oracle for every epsilon.
    Sweep {
        /// Train both regulators before sweeping.
        #[arg(long)]
        train_first: bool,
    },
    /// Solve the boundary problem with the model-based shooting oracle.
    Oracle,
    /// Run the acceptance checks.
    Verify {
        /// Print the check names without running them.
        #[arg(long)]
        list: bool,
        /// Run only these checks (repeatable).
        #[arg(long = "check")]
        checks: Vec<u8>,
    },
}

/// A failure carried to the top level together with its exit code.
struct Failure {
    code: i32,
    message: String,
}

type CmdResult = std::result::Result<i32, Failure>;

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonConvergence { .. } => EXIT_NON_CONVERGENCE,
            Error::PeViolation { .. } => EXIT_PE_VIOLATION,
            Error::ShootingDiverged { .. } => EXIT_SHOOTING_DIVERGED,
            _ => EXIT_FAILURE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_FAILURE,
        message: format!("{}: {e}", path.display()),
    }
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_FAILURE } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cli: &Cli) -> CmdResult {
    if let Command::Verify { list, checks } = &cli.command {
        return cmd_verify(cli, *list, checks);
    }
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Simulate => cmd_simulate(&cfg),
        Command::Sweep { train_first } => {
            if *train_first {
                let code = cmd_train(&cfg)?;
                if code != EXIT_OK {
                    return Ok(code);
                }
            }
            cmd_sweep(&cfg)
        }
        Command::Oracle => cmd_oracle(&cfg),
        Command::Verify { .. } => unreachable!(),
    }
}

fn resolve_config(cli: &Cli) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = match (&cli.config, &cli.benchmark) {
        (Some(path), None) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::default_for(Benchmark::parse(name)?),
        (Some(_), Some(_)) => {
            return Err(Failure {
                code: EXIT_FAILURE,
                message: "--config and --benchmark are mutually exclusive".into(),
            })
        }
        (None, None) => {
            return Err(Failure {
                code: EXIT_FAILURE,
                message: "this command needs --config <path> or --benchmark <name>".into(),
            })
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn weights_path(cfg: &ExperimentConfig, dir: RegulatorDirection) -> PathBuf {
    cfg.output_dir.join(format!("{}_{}_weights.json", cfg.benchmark, dir))
}

fn log_path(cfg: &ExperimentConfig, dir: RegulatorDirection) -> PathBuf {
    cfg.output_dir.join(format!("{}_{}_log.csv", cfg.benchmark, dir))
}

fn create_file(path: &Path) -> std::result::Result<BufWriter<fs::File>, Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
    }
    fs::File::create(path).map(BufWriter::new).map_err(|e| io_failure(path, e))
}

fn write_text(path: &Path, text: &str) -> std::result::Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn write_log(path: &Path, outcome: &TrainingOutcome) -> std::result::Result<(), Failure> {
    outcome.log.write_csv(create_file(path)?)?;
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig) -> CmdResult {
    let problem = cfg.problem()?;
    let basis = BasisSet::for_benchmark(cfg.benchmark);
    let integ = cfg.integrator_config();
    for dir in [RegulatorDirection::Forward, RegulatorDirection::Backward] {
        let seed = cfg.phase_seed(&format!("train-{dir}"));
        info!("training {} {dir} regulator (seed {seed})", cfg.benchmark);
        match train_regulator(&problem, &basis, &cfg.learner, &integ, dir, seed) {
            Ok(outcome) => {
                write_log(&log_path(cfg, dir), &outcome)?;
                let record = WeightRecord::new(cfg.benchmark.name(), &basis, &outcome.weights, &cfg.hash());
                write_text(&weights_path(cfg, dir), &record.to_json()?)?;
                println!(
                    "{} {dir}: w = [{}] after {} checkpoints",
                    cfg.benchmark,
                    fmt_list(outcome.weights.w.as_slice()),
                    outcome.log.rows.len()
                );
            }
            Err(e) => {
                if let Error::NonConvergence { outcome, .. } | Error::PeViolation { outcome, .. } = &e {
                    write_log(&log_path(cfg, dir), outcome)?;
                }
                return Err(Failure {
                    message: format!("{} {dir} regulator: {e}", cfg.benchmark),
                    ..Failure::from(e)
                });
            }
        }
    }
    Ok(EXIT_OK)
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(", ")
}

/// Reads one stored regulator, checking it matches the benchmark.
fn load_weights(cfg: &ExperimentConfig, dir: RegulatorDirection) -> std::result::Result<CriticWeights, Failure> {
    let path = weights_path(cfg, dir);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Failure {
                code: EXIT_MISSING_WEIGHTS,
                message: format!("{} not found; run `train` first or pass --train-first", path.display()),
            })
        }
        Err(e) => return Err(io_failure(&path, e)),
    };
    check_record(&text, cfg.benchmark, Some(dir)).map_err(|msg| Failure {
        code: EXIT_CORRUPT_WEIGHTS,
        message: format!("{}: {msg}", path.display()),
    })
}

/// Validates the contents of a weight file.
fn check_record(
    text: &str,
    bench: Benchmark,
    dir: Option<RegulatorDirection>,
) -> std::result::Result<CriticWeights, String> {
    let rec = WeightRecord::from_json(text).map_err(|e| e.to_string())?;
    if rec.benchmark != bench.name() {
        return Err(format!("record is for `{}`", rec.benchmark));
    }
    if rec.basis_terms != BasisSet::for_benchmark(bench).terms() {
        return Err("basis does not match the benchmark".into());
    }
    if dir.is_some_and(|d| d != rec.direction) {
        return Err(format!("record holds the {} regulator", rec.direction));
    }
    if rec.w.iter().any(|w| !w.is_finite()) {
        return Err("non-finite weight".into());
    }
    rec.weights().map_err(|e| e.to_string())
}

fn composite(
    problem: &BoundaryProblem,
    cfg: &ExperimentConfig,
    fwd: &CriticWeights,
    bwd: &CriticWeights,
) -> std::result::Result<CompositeController, Failure> {
    let basis = BasisSet::for_benchmark(cfg.benchmark);
    let f = policy_from_weights(&problem.system, &problem.cost, &basis, fwd)?;
    let b = policy_from_weights(&problem.system, &problem.cost, &basis, bwd)?;
    Ok(CompositeController::new(f.into(), b.into(), problem.horizon(), cfg.composer.mode)?)
}

fn cmd_simulate(cfg: &ExperimentConfig) -> CmdResult {
    let problem = cfg.problem()?;
    let fwd = load_weights(cfg, RegulatorDirection::Forward)?;
    let bwd = load_weights(cfg, RegulatorDirection::Backward)?;
    let ctrl = composite(&problem, cfg, &fwd, &bwd)?;
    let traj = ctrl.run(&problem, &cfg.integrator_config())?;
    let path = cfg.output_dir.join(format!("{}_trajectory.csv", cfg.benchmark));
    traj.write_csv(create_file(&path)?)?;
    println!(
        "{} T = {}: cost {:.6}, terminal error {:.3e}, interior max |x| {:.3e}",
        cfg.benchmark,
        problem.horizon(),
        traj.total_cost(),
        terminal_error(&traj, &problem.xt),
        interior_quietness(&traj)
    );
    Ok(EXIT_OK)
}

fn cmd_sweep(cfg: &ExperimentConfig) -> CmdResult {
    if cfg.composer.epsilon_list.is_empty() {
        return Err(Failure {
            code: EXIT_FAILURE,
            message: "composer.epsilon_list is empty".into(),
        });
    }
    let base = cfg.problem()?;
    let basis = BasisSet::for_benchmark(cfg.benchmark);
    let integ = cfg.integrator_config();
    let fwd = load_weights(cfg, RegulatorDirection::Forward)?;
    let bwd = load_weights(cfg, RegulatorDirection::Backward)?;
    let v_fwd = eval_value(&basis, &fwd, &base.x0);
    let v_bwd = eval_value(&basis, &bwd, &base.xt);
    let mut rows = Vec::new();
    for &eps in &cfg.composer.epsilon_list {
        let problem = base.with_horizon(1.0 / eps)?;
        let traj = composite(&problem, cfg, &fwd, &bwd)?.run(&problem, &integ)?;
        traj.write_csv(create_file(&cfg.output_dir.join(format!("{}_eps{eps}_trajectory.csv", cfg.benchmark)))?)?;
        let oracle = solve_tpbvp_shooting(&problem, &integ, SHOOTING_TOL)?;
        let row = SweepRow {
            epsilon: eps,
            horizon: problem.horizon(),
            terminal_error: terminal_error(&traj, &problem.xt),
            j_learned: traj.total_cost(),
            j_oracle: oracle.optimal_cost,
            gap: near_optimality_gap(v_fwd, v_bwd, oracle.optimal_cost),
        };
        println!(
            "eps {eps}: T = {}, terminal error {:.3e}, J = {:.6}, J* = {:.6}, gap {:.3e}, interior max |x| {:.3e}",
            row.horizon,
            row.terminal_error,
            row.j_learned,
            row.j_oracle,
            row.gap,
            interior_quietness(&traj)
        );
        rows.push(row);
    }
    write_sweep_csv(&rows, create_file(&cfg.output_dir.join(format!("{}_sweep.csv", cfg.benchmark)))?)?;
    Ok(EXIT_OK)
}

fn cmd_oracle(cfg: &ExperimentConfig) -> CmdResult {
    let problem = cfg.problem()?;
    let horizon = problem.horizon();
    let sol = solve_tpbvp_shooting(&problem, &cfg.integrator_config(), SHOOTING_TOL)?;
    let stem = cfg.output_dir.join(format!("oracle_T{horizon}"));
    sol.trajectory.write_csv(create_file(&stem.with_extension("csv"))?)?;
    write_text(&stem.with_extension("json"), &sol.summary_json(cfg.benchmark.name(), horizon)?)?;
    println!(
        "{} T = {horizon}: J* = {:.9}, residual {:.2e}, {} segments",
        cfg.benchmark, sol.optimal_cost, sol.residual, sol.segments
    );
    Ok(EXIT_OK)
}

fn cmd_verify(cli: &Cli, list: bool, only: &[u8]) -> CmdResult {
    if list {
        for (id, name) in CHECKS {
            println!("{id}. {name}");
        }
        return Ok(EXIT_OK);
    }
    if let Some(bad) = only.iter().find(|id| !CHECKS.iter().any(|(i, _)| i == *id)) {
        return Err(Failure {
            code: EXIT_FAILURE,
            message: format!("no check with id {bad}"),
        });
    }
    let seed = match (&cli.config, cli.seed) {
        (_, Some(s)) => s,
        (Some(path), None) => ExperimentConfig::load(path)?.seed,
        (None, None) => 0,
    };
    let out = match (&cli.out, &cli.config) {
        (Some(dir), _) => Some(dir.clone()),
        (None, Some(path)) => Some(ExperimentConfig::load(path)?.output_dir),
        (None, None) => None,
    };

    let mut all_passed = true;
    let mut corrupt = false;
    let mut verifier = Verifier::new(seed);
    for (id, _) in CHECKS {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let r = verifier.run(id);
        all_passed &= r.passed;
        println!("{r}");
    }
    if let Some(dir) = out {
        for (name, problem) in stored_weight_files(&dir) {
            match problem {
                None => println!("PASS [w] weight file {name}"),
                Some(msg) => {
                    corrupt = true;
                    println!("FAIL [w] weight file {name}: {msg}");
                }
            }
        }
    }
    Ok(if corrupt {
        EXIT_CORRUPT_WEIGHTS
    } else if all_passed {
        EXIT_OK
    } else {
        EXIT_FAILURE
    })
}

/// Every `<benchmark>_<direction>_weights.json` in `dir`, with the reason
/// it fails validation, if any.
fn stored_weight_files(dir: &Path) -> Vec<(String, Option<String>)> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with("_weights.json"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|name| {
            let verdict = (|| {
                let stem = name.trim_end_matches("_weights.json");
                let (bench, dir_name) = stem
                    .rsplit_once('_')
                    .ok_or_else(|| "name is not <benchmark>_<direction>_weights.json".to_string())?;
                let bench = Benchmark::parse(bench).map_err(|e| e.to_string())?;
                let direction = match dir_name {
                    "forward" => RegulatorDirection::Forward,
                    "backward" => RegulatorDirection::Backward,
                    other => return Err(format!("unknown direction `{other}`")),
                };
                let text = fs::read_to_string(dir.join(&name)).map_err(|e| e.to_string())?;
                check_record(&text, bench, Some(direction)).map(|_| ())
            })();
            (name, verdict.err())
        })
        .collect()
}
