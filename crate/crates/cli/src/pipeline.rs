//! End-to-end experiment steps, in memory and as directory-to-directory
//! commands.
//!
//! Results directory layout written by [`cmd_run`]:
//!
//! ```text
//! config.json            resolved configuration
//! losses.csv             round,client,loss
//! ledger.json            communication counts
//! snapshots.json         every client's atoms at each snapshot round
//! events.jsonl           transport trace (only with `event_log`)
//! clients/client-<l>/    atom-<k>.csv and alpha.json per client
//! server/                atom-<k>.csv (federated only)
//! ```
//!
//! [`cmd_eval`] adds `accuracy-<m>.csv` and `predictions-<m>.csv`, and
//! [`cmd_consensus`] adds `consensus.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use dadil::data::{generate, load_csv, load_soft_csv, save_csv, save_soft_csv};
use dadil::dictionary::{gaussian_atoms, init_dictionary, Dictionary};
use dadil::inference::{predict_e, predict_r, Prediction, SoftmaxClassifier};
use dadil::metrics::{accuracy, consensus, weight_grid, ConsensusCurve};
use dadil::protocol::{
    average_atoms, derive_seed, run_decentralized, run_federated, ClientState, CommLedger, InMemoryTransport, RunHistory,
    RunOptions, ServerState, Snapshot, TransportEvent,
};
use dadil::LabeledDistribution;
use ndarray::{concatenate, Array1, Axis};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig, Mode, ServerInit};
use crate::CliError;

const SEED_INIT: u32 = 0;
const SEED_SERVER: u32 = 1;
const SEED_EVAL: u32 = 2;
const SEED_GRID: u32 = 3;
const SEED_CONSENSUS: u32 = 4;

/// Prediction method for [`evaluate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    /// Label reconstruction through the target barycenter.
    R,
    /// Ensemble of per-atom classifiers.
    E,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::R => "r",
            Method::E => "e",
        }
    }
}

/// All domains with their true labels, plus which one is the target.
#[derive(Clone, Debug)]
pub struct Domains {
    pub data: Vec<LabeledDistribution>,
    pub target: usize,
    pub n_classes: usize,
}

impl Domains {
    pub fn target_data(&self) -> &LabeledDistribution {
        &self.data[self.target]
    }

    pub fn sources(&self) -> impl Iterator<Item = &LabeledDistribution> {
        self.data.iter().enumerate().filter(|(l, _)| *l != self.target).map(|(_, d)| d)
    }
}

pub fn load_domains(cfg: &ExperimentConfig) -> Result<Domains, CliError> {
    let (data, target, n_classes) = match &cfg.data {
        DataSource::Synthetic { spec, target } => (generate(spec)?, *target, spec.n_classes),
        DataSource::Csv {
            domains,
            target,
            n_classes,
        } => {
            let data = domains
                .iter()
                .map(|p| load_csv(p, Some(*n_classes)))
                .collect::<dadil::Result<Vec<_>>>()?;
            (data, *target, *n_classes)
        }
    };
    let dims: Vec<usize> = data.iter().map(|d| d.dim()).collect();
    if dims.iter().any(|&d| d != dims[0]) {
        return Err(CliError::Config(format!("domains disagree on feature dimension: {dims:?}")));
    }
    if let Some(l) = (0..data.len()).find(|&l| l != target && !data[l].is_labeled()) {
        return Err(CliError::Config(format!("source domain {l} has no labels")));
    }
    Ok(Domains {
        data,
        target,
        n_classes,
    })
}

/// State after training.
#[derive(Clone, Debug)]
pub struct Trained {
    pub clients: Vec<ClientState>,
    pub server: Option<ServerState>,
    pub ledger: CommLedger,
    pub history: RunHistory,
    pub events: Vec<TransportEvent>,
}

impl Trained {
    /// The dictionary used to predict on the target: the target client's own
    /// atoms, or the server's public atoms in federated mode. Always with the
    /// target client's private weights.
    pub fn target_dictionary(&self, target: usize) -> Result<Dictionary, CliError> {
        let local = &self.clients[target].dict;
        match &self.server {
            None => Ok(local.clone()),
            Some(server) => Ok(Dictionary::new(server.atoms.clone(), local.alpha().to_vec())?),
        }
    }
}

/// Builds the clients (the target without labels) and trains them.
pub fn train(cfg: &ExperimentConfig, domains: &Domains) -> Result<Trained, CliError> {
    let mut clients = domains
        .data
        .iter()
        .enumerate()
        .map(|(id, d)| {
            let labeled = id != domains.target;
            let data = if labeled { d.clone() } else { d.without_labels() };
            let dict = init_dictionary(
                &data,
                cfg.atoms,
                cfg.atom_size,
                domains.n_classes,
                derive_seed(cfg.seed, SEED_INIT, id as u32),
                cfg.init,
            )?;
            Ok(ClientState::new(id, data, labeled, dict, cfg.optimizer, cfg.seed))
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let opts = RunOptions {
        rounds: cfg.rounds,
        snapshot_interval: cfg.snapshot_interval,
    };
    let mut transport = InMemoryTransport::new();
    let mut ledger = CommLedger::new();
    let (history, server) = match cfg.mode {
        Mode::Decentralized => (run_decentralized(&mut clients, &opts, &mut transport, &mut ledger)?, None),
        Mode::Federated => {
            let atoms = match cfg.server_init {
                ServerInit::ClientMean => {
                    let initial: Vec<&[LabeledDistribution]> = clients.iter().map(|c| c.dict.atoms()).collect();
                    average_atoms(&initial)
                }
                ServerInit::Gaussian => {
                    let dim = domains.data[0].dim();
                    let mut rng = dadil::protocol::client_rng(derive_seed(cfg.seed, SEED_SERVER, 0), 0);
                    gaussian_atoms(
                        cfg.atoms,
                        cfg.atom_size,
                        dim,
                        domains.n_classes,
                        &Array1::zeros(dim),
                        &Array1::ones(dim),
                        &mut rng,
                    )
                }
            };
            let mut server = ServerState { atoms };
            let history = run_federated(&mut clients, &mut server, &opts, &mut transport, &mut ledger)?;
            (history, Some(server))
        }
    };
    Ok(Trained {
        clients,
        server,
        ledger,
        history,
        events: transport.events().to_vec(),
    })
}

/// Target prediction with the given method.
pub fn predict(cfg: &ExperimentConfig, domains: &Domains, dict: &Dictionary, method: Method) -> Result<Prediction, CliError> {
    let target = domains.target_data().features();
    let pred = match method {
        Method::R => predict_r(dict, target, &cfg.evaluation.reconstruction, derive_seed(cfg.seed, SEED_EVAL, 0))?,
        Method::E => predict_e(dict.atoms(), dict.alpha(), target, &cfg.evaluation.classifier)?,
    };
    Ok(pred)
}

/// A softmax classifier fit on all source domains pooled, applied to the
/// target.
pub fn source_only_baseline(cfg: &ExperimentConfig, domains: &Domains) -> Result<Prediction, CliError> {
    let sources: Vec<&LabeledDistribution> = domains.sources().collect();
    let x = concatenate(Axis(0), &sources.iter().map(|d| d.features()).collect::<Vec<_>>())
        .map_err(|e| dadil::Error::InvalidArgument(e.to_string()))?;
    let classes: Vec<usize> = sources.iter().flat_map(|d| d.hard_labels().expect("sources are labeled")).collect();
    let clf = SoftmaxClassifier::fit(x.view(), &classes, domains.n_classes, &cfg.evaluation.classifier)?;
    Ok(clf.predict(domains.target_data().features())?)
}

/// Target accuracy, if the target's true labels are known.
pub fn target_accuracy(domains: &Domains, pred: &Prediction) -> Result<Option<f64>, CliError> {
    match domains.target_data().hard_labels() {
        None => Ok(None),
        Some(truth) => Ok(Some(accuracy(pred, &truth)?)),
    }
}

pub fn consensus_curve(cfg: &ExperimentConfig, snapshots: &[Snapshot]) -> Result<ConsensusCurve, CliError> {
    let grid = weight_grid(cfg.atoms, derive_seed(cfg.seed, SEED_GRID, 0));
    Ok(consensus(
        snapshots,
        &grid,
        &cfg.consensus.barycenter(),
        derive_seed(cfg.seed, SEED_CONSENSUS, 0),
    )?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(dadil::Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(dadil::Error::from)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{} is malformed: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(dadil::Error::from)?;
    Ok(())
}

fn client_dir(out: &Path, id: usize) -> PathBuf {
    out.join("clients").join(format!("client-{id}"))
}

fn write_atoms(dir: &Path, atoms: &[LabeledDistribution]) -> Result<(), CliError> {
    create_dir(dir)?;
    for (k, atom) in atoms.iter().enumerate() {
        save_soft_csv(atom, dir.join(format!("atom-{k}.csv")))?;
    }
    Ok(())
}

fn read_atoms(dir: &Path, k: usize, n_classes: usize) -> Result<Vec<LabeledDistribution>, CliError> {
    (0..k)
        .map(|i| Ok(load_soft_csv(dir.join(format!("atom-{i}.csv")), n_classes)?))
        .collect()
}

/// Writes one CSV per synthetic domain and a `manifest.json` that can be used
/// verbatim as a `csv` data section.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let DataSource::Synthetic { spec, target } = &cfg.data else {
        return Err(CliError::Config("generate needs a synthetic data source".into()));
    };
    create_dir(out)?;
    let domains = generate(spec)?;
    let mut names = Vec::new();
    for (l, d) in domains.iter().enumerate() {
        let name = format!("domain-{l}.csv");
        save_csv(d, out.join(&name))?;
        names.push(PathBuf::from(name));
    }
    let manifest = DataSource::Csv {
        domains: names,
        target: *target,
        n_classes: spec.n_classes,
    };
    write_json(&out.join("manifest.json"), &manifest)
}

/// Trains and writes the results directory.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<Trained, CliError> {
    create_dir(out)?;
    fs::write(out.join("config.json"), cfg.to_json()).map_err(dadil::Error::from)?;
    let domains = load_domains(cfg)?;
    let trained = train(cfg, &domains)?;

    let mut losses = String::from("round,client,loss\n");
    for (r, row) in trained.history.losses.iter().enumerate() {
        for (l, loss) in row.iter().enumerate() {
            losses.push_str(&format!("{},{l},{loss}\n", r + 1));
        }
    }
    fs::write(out.join("losses.csv"), losses).map_err(dadil::Error::from)?;
    write_json(&out.join("ledger.json"), &trained.ledger)?;
    write_json(&out.join("snapshots.json"), &trained.history.snapshots)?;
    for c in &trained.clients {
        let dir = client_dir(out, c.id);
        write_atoms(&dir, c.dict.atoms())?;
        write_json(&dir.join("alpha.json"), &c.dict.alpha())?;
    }
    if let Some(server) = &trained.server {
        write_atoms(&out.join("server"), &server.atoms)?;
    }
    if cfg.event_log {
        let mut lines = String::new();
        for e in &trained.events {
            lines.push_str(&serde_json::to_string(e).map_err(dadil::Error::from)?);
            lines.push('\n');
        }
        fs::write(out.join("events.jsonl"), lines).map_err(dadil::Error::from)?;
    }
    Ok(trained)
}

/// Reads back the resolved config of a results directory.
pub fn load_results_config(results: &Path) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::load(&results.join("config.json"), None)
}

/// Predicts target labels from a results directory. Writes
/// `predictions-<m>.csv` and `accuracy-<m>.csv` (the method's accuracy next to
/// the source-only baseline; empty values when the target has no labels).
pub fn cmd_eval(results: &Path, method: Method) -> Result<Option<f64>, CliError> {
    let cfg = load_results_config(results)?;
    let domains = load_domains(&cfg)?;
    let target_dir = client_dir(results, domains.target);
    let alpha: Vec<f64> = read_json(&target_dir.join("alpha.json"))?;
    let atoms_dir = match cfg.mode {
        Mode::Decentralized => target_dir,
        Mode::Federated => results.join("server"),
    };
    let dict = Dictionary::new(read_atoms(&atoms_dir, cfg.atoms, domains.n_classes)?, alpha)?;

    let pred = predict(&cfg, &domains, &dict, method)?;
    pred.write_csv(results.join(format!("predictions-{}.csv", method.name())))?;
    let acc = target_accuracy(&domains, &pred)?;
    let baseline = target_accuracy(&domains, &source_only_baseline(&cfg, &domains)?)?;
    let fmt = |v: Option<f64>| v.map(|a| a.to_string()).unwrap_or_default();
    let table = format!(
        "method,accuracy\n{},{}\nsource_only,{}\n",
        method.name(),
        fmt(acc),
        fmt(baseline)
    );
    fs::write(results.join(format!("accuracy-{}.csv", method.name())), table).map_err(dadil::Error::from)?;
    Ok(acc)
}

/// Writes `consensus.csv` from the run's snapshots.
pub fn cmd_consensus(results: &Path) -> Result<ConsensusCurve, CliError> {
    let cfg = load_results_config(results)?;
    let snapshots: Vec<Snapshot> = read_json(&results.join("snapshots.json"))?;
    if snapshots.is_empty() {
        return Err(CliError::Config("the run recorded no snapshots".into()));
    }
    let curve = consensus_curve(&cfg, &snapshots)?;
    curve.write_csv(results.join("consensus.csv"))?;
    Ok(curve)
}
