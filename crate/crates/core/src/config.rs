//! Experiment configuration files (TOML).
//!
//! ```toml
//! seed = 42
//! output_dir = "runs/circuit"
//!
//! [benchmark]
//! name = "rl_circuit"
//! params = { horizon = 20.0 }
//!
//! [learner]            # any subset; the rest comes from the benchmark defaults
//! gamma = 10.0
//! noise = { amplitude = 2.0 }
//!
//! [integrator]
//! step = 0.001
//!
//! [composer]
//! mode = "overlay"
//! epsilon_list = [0.5, 0.1, 0.05]
//! ```
//!
//! Unknown keys anywhere are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::composer::CompositionMode;
use crate::dynamics::{make_benchmark, Benchmark, BoundaryProblem, State};
use crate::error::{Error, Result};
use crate::learner::LearnerConfig;
use crate::sim::{IntegratorConfig, Method};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    benchmark: RawBenchmark,
    learner: Option<toml::Table>,
    integrator: Option<IntegratorSection>,
    composer: Option<RawComposer>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBenchmark {
    name: String,
    #[serde(default)]
    params: BTreeMap<String, f64>,
    x0: Option<Vec<f64>>,
    xt: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawComposer {
    mode: Option<CompositionMode>,
    epsilon_list: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorSection {
    pub step: f64,
    pub max_state_norm: f64,
}

impl Default for IntegratorSection {
    fn default() -> Self {
        let d = IntegratorConfig::default();
        Self {
            step: d.step,
            max_state_norm: d.max_state_norm,
        }
    }
}

impl From<IntegratorSection> for IntegratorConfig {
    fn from(s: IntegratorSection) -> Self {
        IntegratorConfig {
            step: s.step,
            method: Method::Rk4,
            max_state_norm: s.max_state_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComposerSection {
    pub mode: CompositionMode,
    pub epsilon_list: Vec<f64>,
}

/// Fully resolved experiment description.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub benchmark: Benchmark,
    pub params: BTreeMap<String, f64>,
    /// Boundary values replacing the benchmark's own, when given.
    pub x0: Option<Vec<f64>>,
    pub xt: Option<Vec<f64>>,
    pub learner: LearnerConfig,
    pub integrator: IntegratorSection,
    pub composer: ComposerSection,
    pub seed: u64,
    #[serde(skip)]
    pub output_dir: PathBuf,
}

/// Default ε values for the sweep of each reference problem.
pub fn default_epsilons(bench: Benchmark) -> Vec<f64> {
    match bench {
        Benchmark::RlCircuit => vec![0.5, 0.1, 0.05],
        Benchmark::Cubic => vec![0.5, 0.2, 0.1],
        Benchmark::Manipulator => vec![0.2, 0.1, 0.05],
    }
}

/// Recursively overlays `patch` onto `base` (objects merge, everything else
/// replaces).
fn merge_json(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_json(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

impl ExperimentConfig {
    /// Built-in configuration for a reference problem.
    pub fn default_for(bench: Benchmark) -> Self {
        Self {
            benchmark: bench,
            params: BTreeMap::new(),
            x0: None,
            xt: None,
            learner: LearnerConfig::for_benchmark(bench),
            integrator: IntegratorSection::default(),
            composer: ComposerSection {
                mode: CompositionMode::Overlay,
                epsilon_list: default_epsilons(bench),
            },
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let bench = Benchmark::parse(&raw.benchmark.name).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = Self::default_for(bench);
        cfg.params = raw.benchmark.params;
        cfg.x0 = raw.benchmark.x0;
        cfg.xt = raw.benchmark.xt;
        if let Some(table) = raw.learner {
            let mut base = serde_json::to_value(&cfg.learner)?;
            let patch = serde_json::to_value(table)?;
            merge_json(&mut base, patch);
            cfg.learner = serde_json::from_value(base).map_err(|e| Error::Config(format!("[learner]: {e}")))?;
        }
        if let Some(integ) = raw.integrator {
            cfg.integrator = integ;
        }
        if let Some(c) = raw.composer {
            if let Some(mode) = c.mode {
                cfg.composer.mode = mode;
            }
            if let Some(list) = c.epsilon_list {
                cfg.composer.epsilon_list = list;
            }
        }
        if let Some(seed) = raw.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = raw.output_dir {
            cfg.output_dir = dir;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.learner.validate()?;
        IntegratorConfig::from(self.integrator)
            .validate()
            .map_err(|e| Error::Config(format!("[integrator]: {e}")))?;
        if self.composer.epsilon_list.is_empty() {
            return Err(Error::Config("composer.epsilon_list must not be empty".into()));
        }
        if let Some(bad) = self.composer.epsilon_list.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
            return Err(Error::Config(format!("composer.epsilon_list entry {bad} outside (0, 1]")));
        }
        self.problem()?;
        Ok(())
    }

    pub fn problem(&self) -> Result<BoundaryProblem> {
        let p = make_benchmark(self.benchmark.name(), &self.params)?;
        if self.x0.is_none() && self.xt.is_none() {
            return Ok(p);
        }
        let pick = |v: &Option<Vec<f64>>, default: &State| {
            v.as_ref().map_or_else(|| default.clone(), |v| State::from_column_slice(v))
        };
        let (x0, xt) = (pick(&self.x0, &p.x0), pick(&self.xt, &p.xt));
        p.with_boundary(x0, xt).map_err(|e| Error::Config(format!("[benchmark] boundary values: {e}")))
    }

    pub fn integrator_config(&self) -> IntegratorConfig {
        self.integrator.into()
    }

    /// Seed of one named phase (e.g. `train-forward`), derived from the
    /// master seed so that each phase can be reproduced on its own.
    pub fn phase_seed(&self, phase: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(b"boundary-rl/");
        h.update(phase.as_bytes());
        h.update(self.seed.to_le_bytes());
        let digest = h.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }

    /// SHA-256 of the resolved configuration (output directory excluded).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_benchmark_defaults() {
        let cfg = ExperimentConfig::from_toml_str("[benchmark]\nname = \"cubic\"\n").unwrap();
        assert_eq!(cfg, ExperimentConfig::default_for(Benchmark::Cubic));
    }

    #[test]
    fn partial_learner_section_merges() {
        let text = r#"
seed = 9
[benchmark]
name = "rl_circuit"
params = { horizon = 5.0 }
[learner]
gamma = 3.0
noise = { amplitude = 0.0 }
[composer]
epsilon_list = [0.5, 0.2]
"#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.learner.noise.amplitude, 0.0);
        assert_eq!(cfg.learner.noise.frequency, 1.0);
        assert_eq!(cfg.learner.pe_floor, LearnerConfig::for_benchmark(Benchmark::RlCircuit).pe_floor);
        assert_eq!(cfg.problem().unwrap().horizon(), 5.0);
        assert_eq!(cfg.composer.epsilon_list, vec![0.5, 0.2]);
    }

    #[test]
    fn boundary_override() {
        let cfg = ExperimentConfig::from_toml_str("[benchmark]\nname = \"manipulator\"\nxt = [0.0, 0.0]\n").unwrap();
        let p = cfg.problem().unwrap();
        assert_eq!(p.x0.as_slice(), &[0.3, 0.0]);
        assert_eq!(p.xt.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let cases = [
            "[benchmark]\nname = \"cubic\"\ntypo = 1\n",
            "[benchmark]\nname = \"cubic\"\n[learner]\ngama = 1.0\n",
            "[benchmark]\nname = \"cubic\"\n[learner]\nnoise = { amplitud = 1.0 }\n",
            "[benchmark]\nname = \"pendulum\"\n",
            "[benchmark]\nname = \"cubic\"\nparams = { r = 2.0 }\n",
            "[benchmark]\nname = \"cubic\"\n[composer]\nepsilon_list = []\n",
            "[benchmark]\nname = \"cubic\"\n[composer]\nepsilon_list = [1.5]\n",
            "[benchmark]\nname = \"cubic\"\n[learner]\nell = -1.0\n",
            "[benchmark]\nname = \"cubic\"\n[integrator]\nstep = 0.0\n",
            "seed = \"x\"\n[benchmark]\nname = \"cubic\"\n",
            "[benchmark]\nname = \"cubic\"\nx0 = [1.0, 2.0]\n",
        ];
        for text in cases {
            assert!(matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn parse_errors_carry_location() {
        let err = ExperimentConfig::from_toml_str("[benchmark]\nname = \n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn phase_seeds_and_hash_are_stable_and_distinct() {
        let a = ExperimentConfig::default_for(Benchmark::RlCircuit);
        let mut b = a.clone();
        assert_eq!(a.phase_seed("train-forward"), b.phase_seed("train-forward"));
        assert_ne!(a.phase_seed("train-forward"), a.phase_seed("train-backward"));
        assert_eq!(a.hash(), b.hash());
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.phase_seed("train-forward"), b.phase_seed("train-forward"));
        assert_eq!(a.hash().len(), 64);
    }
}
