//! Experiment configuration. Every field except `seed` has a default, and the
//! resolved config (defaults filled in, paths made absolute) is what gets
//! written next to the results.

use std::path::{Path, PathBuf};

use dadil::barycenter::{BarycenterConfig, BarycenterInit};
use dadil::data::SynthSpec;
use dadil::dictionary::{InitStrategy, OptimizerConfig};
use dadil::inference::{ClassifierConfig, ReconstructionConfig};
use dadil::ot::Solver;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Decentralized,
    Federated,
}

/// How the federated server builds its first public atoms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerInit {
    /// Index-wise mean of the clients' initial atoms, collected once before
    /// the first round and not counted in the round ledger.
    #[default]
    ClientMean,
    /// Supports from `N(0, I)` with the shared class layout.
    Gaussian,
}

/// Where the domains come from. Client `ℓ` holds domain `ℓ`; `target` is the
/// client whose labels are withheld during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        spec: SynthSpec,
        target: usize,
    },
    Csv {
        /// Relative paths are resolved against the config file's directory.
        domains: Vec<PathBuf>,
        target: usize,
        n_classes: usize,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        let spec = SynthSpec::default();
        let target = spec.n_domains - 1;
        DataSource::Synthetic { spec, target }
    }
}

impl DataSource {
    pub fn target(&self) -> usize {
        match self {
            DataSource::Synthetic { target, .. } | DataSource::Csv { target, .. } => *target,
        }
    }

    pub fn n_domains(&self) -> usize {
        match self {
            DataSource::Synthetic { spec, .. } => spec.n_domains,
            DataSource::Csv { domains, .. } => domains.len(),
        }
    }
}

/// Settings for target prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub reconstruction: ReconstructionConfig,
    pub classifier: ClassifierConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            reconstruction: ReconstructionConfig {
                barycenter: BarycenterConfig {
                    solver: Solver::Exact,
                    ..Default::default()
                },
                ..Default::default()
            },
            classifier: ClassifierConfig::default(),
        }
    }
}

/// Settings for the consensus curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusConfig {
    pub n_support: Option<usize>,
    pub iters: usize,
    pub solver: Solver,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            n_support: None,
            iters: 10,
            solver: Solver::Exact,
        }
    }
}

impl ConsensusConfig {
    pub fn barycenter(&self) -> BarycenterConfig {
        BarycenterConfig {
            n_support: self.n_support,
            iters: self.iters,
            init: BarycenterInit::FirstAtomSubsample,
            label_weight: 0.0,
            solver: self.solver,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub data: DataSource,
    /// Number of atoms `K`.
    #[serde(default = "default_atoms")]
    pub atoms: usize,
    /// Support points per atom.
    #[serde(default = "default_atom_size")]
    pub atom_size: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_snapshot_interval")]
    pub snapshot_interval: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub init: InitStrategy,
    /// Federated mode only.
    #[serde(default)]
    pub server_init: ServerInit,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub consensus: ConsensusConfig,
    /// Also write the transport trace as JSON lines.
    #[serde(default)]
    pub event_log: bool,
}

fn default_atoms() -> usize {
    3
}

fn default_atom_size() -> usize {
    30
}

fn default_rounds() -> usize {
    20
}

fn default_snapshot_interval() -> usize {
    1
}

fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: 0.3,
        local_epochs: 1,
        batch_size: 30,
        label_weight: 1.0,
        barycenter_iters: 5,
        solver: Solver::Exact,
        last_iterate: true,
    }
}

impl ExperimentConfig {
    /// Parses a config file, applying `seed_override` before validation.
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, seed_override)
    }

    pub fn parse(text: &str, base_dir: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;
        if let Some(seed) = seed_override {
            obj.insert("seed".into(), Value::from(seed));
        }
        // Keys missing from a partial optimizer object take the defaults
        // below, not the library ones.
        if let Some(Value::Object(given)) = obj.get_mut("optimizer") {
            if let Value::Object(defaults) = serde_json::to_value(default_optimizer()).expect("optimizer serializes") {
                for (key, value) in defaults {
                    given.entry(key).or_insert(value);
                }
            }
        }
        let mut cfg: Self =
            serde_json::from_value(value).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        if let DataSource::Csv { domains, .. } = &mut cfg.data {
            for path in domains.iter_mut() {
                if path.is_relative() {
                    *path = base_dir.join(&*path);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        let n_domains = self.data.n_domains();
        if n_domains < 2 {
            return bad(format!("need at least 2 domains, got {n_domains}"));
        }
        if self.data.target() >= n_domains {
            return bad(format!("target {} outside 0..{n_domains}", self.data.target()));
        }
        match &self.data {
            DataSource::Synthetic { spec, .. } => spec.validate().map_err(|e| CliError::Config(e.to_string()))?,
            DataSource::Csv { domains, n_classes, .. } => {
                if *n_classes == 0 {
                    return bad("n_classes must be >= 1".into());
                }
                if let Some(missing) = domains.iter().find(|p| !p.is_file()) {
                    return bad(format!("domain file {} does not exist", missing.display()));
                }
            }
        }
        if self.atoms == 0 || self.atom_size == 0 {
            return bad("atoms and atom_size must be >= 1".into());
        }
        if self.optimizer.batch_size > self.atom_size {
            return bad(format!(
                "batch_size {} exceeds atom_size {}",
                self.optimizer.batch_size, self.atom_size
            ));
        }
        self.optimizer.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.consensus.iters == 0 {
            return bad("consensus iters must be >= 1".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }
}
