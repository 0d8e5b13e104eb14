//! Reproducible runs: one JSON configuration, a fingerprint of its canonical
//! form, an immutable run directory and a manifest listing inputs and outputs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataset::{
    export_dataset, make_eval_scenarios, synthesize, synthetic_catalog, DatasetManifest, MmhclDataset, Scenario,
    SyntheticSpec,
};
use crate::evaluation::{
    ablation_suite, evaluate, format_reports, own_seen_dominance, topk_sweep, uncertainty_dump, write_records_csv,
    write_sweep_csv, write_uncertainty_csv, AverageFusion, ConfidenceMax, MetricsReport,
};
use crate::semantic_space::ClassCatalog;
use crate::training::{
    load_checkpoint, save_checkpoint, train, write_loss_log, ModelState, TrainConfig, CHECKPOINT_VERSION,
};
use crate::{Error, Execution, Result};

pub const RUN_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Command {
    GenData,
    Train,
    Eval,
    Ablate,
    SweepK,
    DumpUncertainty,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::GenData,
        Command::Train,
        Command::Eval,
        Command::Ablate,
        Command::SweepK,
        Command::DumpUncertainty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::SweepK => "sweep-k",
            Command::DumpUncertainty => "dump-uncertainty",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown command `{s}`")))
    }
}

/// Files a run reads. A missing dataset is synthesized from `data`; a missing
/// checkpoint is trained from `train`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    /// A dataset manifest as written by `gen-data`.
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Also score average fusion and the confidence-max dual model.
    pub baselines: bool,
    /// Minimum accuracy (percent) of the full model per scenario, enforced by
    /// `eval --check`.
    pub checks: BTreeMap<Scenario, f64>,
    pub k_values: Vec<usize>,
    pub uncertainty_samples: usize,
    /// Defaults to the training seed.
    pub uncertainty_seed: Option<u64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            baselines: true,
            checks: BTreeMap::new(),
            k_values: vec![1, 2, 3, 5, 8, 10, 15, 20],
            uncertainty_samples: 30,
            uncertainty_seed: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub paths: InputPaths,
    pub eval: EvalOptions,
    /// Not part of the fingerprint: both modes give identical results.
    #[serde(skip)]
    pub execution: Execution,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key.path=value` overrides. Values parse as JSON, falling back
    /// to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut tree, key, value)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.execution = self.execution;
        Ok(cfg)
    }

    /// Sorted-key compact JSON of the whole configuration.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&canonicalize(serde_json::to_value(self)?))?)
    }

    /// SHA-256 of [`RunConfig::canonical_json`], hex encoded.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }

    pub fn seed(&self, command: Command) -> u64 {
        match command {
            Command::GenData => self.data.seed,
            _ => self.train.seed,
        }
    }

    pub fn validate(&self, command: Command) -> Result<()> {
        let config = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        if command == Command::GenData || self.paths.dataset.is_none() {
            self.data.validate().map_err(config)?;
        }
        if command != Command::GenData {
            self.train.validate().map_err(config)?;
        }
        for p in [&self.paths.dataset, &self.paths.checkpoint].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        if command == Command::Eval {
            for (s, t) in &self.eval.checks {
                if !(0.0..=100.0).contains(t) {
                    return Err(Error::Config(format!(
                        "check threshold for {s} must lie in [0, 100], got {t}"
                    )));
                }
            }
        }
        if command == Command::DumpUncertainty && self.eval.uncertainty_samples == 0 {
            return Err(Error::Config("eval.uncertainty_samples must be positive".into()));
        }
        Ok(())
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut node = tree;
    for p in parents {
        node = node
            .get_mut(*p)
            .filter(|n| n.is_object())
            .ok_or_else(|| Error::Config(format!("unknown configuration key `{key}`")))?;
    }
    let map = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("unknown configuration key `{key}`")))?;
    map.insert(last.to_string(), value);
    Ok(())
}

fn canonicalize(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let sorted: BTreeMap<String, Value> = map.into_iter().map(|(k, v)| (k, canonicalize(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonicalize).collect()),
        other => other,
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Incomplete,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versions {
    pub mmhcl: String,
    pub checkpoint_format: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Versions {
            mmhcl: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: CHECKPOINT_VERSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub scenario: Scenario,
    pub threshold: f64,
    /// `None` when the scenario had no samples.
    pub accuracy: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub fingerprint: String,
    pub seed: u64,
    pub config: Value,
    pub versions: Versions,
    pub inputs: Vec<InputRecord>,
    /// Relative to the run directory.
    pub outputs: Vec<PathBuf>,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<CheckOutcome>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::load(path, e.to_string()))
    }

    /// The configuration this run was started with.
    pub fn run_config(&self) -> Result<RunConfig> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Config(e.to_string()))
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
}

impl RunOutcome {
    pub fn checks_passed(&self) -> bool {
        self.manifest.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(#[source] Error),
    #[error("run failed: {source}")]
    Runtime {
        #[source]
        source: Error,
        /// Set once the run directory exists; its manifest is marked failed.
        run_dir: Option<PathBuf>,
    },
}

impl RunError {
    pub fn kind(&self) -> &'static str {
        match self {
            RunError::Config(_) => "config",
            RunError::Runtime { .. } => "runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            RunError::Runtime { .. } => 2,
        }
    }

    /// JSON error report for machine consumers.
    pub fn report(&self) -> Value {
        let (message, run_dir) = match self {
            RunError::Config(e) => (e.to_string(), None),
            RunError::Runtime { source, run_dir } => (source.to_string(), run_dir.clone()),
        };
        serde_json::json!({
            "status": "error",
            "kind": self.kind(),
            "exit_code": self.exit_code(),
            "message": message,
            "run_dir": run_dir,
        })
    }
}

/// 0 on success, 1 for configuration errors, 2 for runtime errors, 3 when an
/// `eval` check failed.
pub fn exit_code(result: &std::result::Result<RunOutcome, RunError>) -> i32 {
    match result {
        Ok(o) if o.checks_passed() => 0,
        Ok(_) => 3,
        Err(e) => e.exit_code(),
    }
}

/// Creates `<out>/<command>-<fingerprint prefix>-seed<seed>`, adding a numeric
/// suffix when that directory already exists.
fn create_run_dir(out: &Path, command: Command, fingerprint: &str, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let stem = format!("{command}-{}-seed{seed}", &fingerprint[..12]);
    for n in 1.. {
        let name = if n == 1 { stem.clone() } else { format!("{stem}-{n}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("run directory suffixes exhausted")
}

struct Artifacts {
    dir: PathBuf,
    written: Vec<PathBuf>,
    checks: Vec<CheckOutcome>,
}

impl Artifacts {
    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(PathBuf::from(name));
        self.dir.join(name)
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(&path, e))
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Executes `command` and leaves its artifacts plus a manifest in a fresh run
/// directory under `out`.
pub fn run(command: Command, config: &RunConfig, out: &Path) -> std::result::Result<RunOutcome, RunError> {
    config.validate(command).map_err(RunError::Config)?;
    let fingerprint = config.fingerprint().map_err(RunError::Config)?;
    let runtime = |source| RunError::Runtime { source, run_dir: None };
    let inputs = input_records(config, command).map_err(runtime)?;
    let seed = config.seed(command);
    let run_dir = create_run_dir(out, command, &fingerprint, seed).map_err(runtime)?;
    let mut manifest = RunManifest {
        command: command.to_string(),
        fingerprint: fingerprint.clone(),
        seed,
        config: canonicalize(serde_json::to_value(config).map_err(|e| runtime(e.into()))?),
        versions: Versions::default(),
        inputs,
        outputs: Vec::new(),
        status: RunStatus::Incomplete,
        error: None,
        checks: Vec::new(),
    };
    let fail = |source, run_dir: &Path| RunError::Runtime {
        source,
        run_dir: Some(run_dir.to_path_buf()),
    };
    manifest.write(&run_dir).map_err(|e| fail(e, &run_dir))?;

    let mut art = Artifacts {
        dir: run_dir.clone(),
        written: Vec::new(),
        checks: Vec::new(),
    };
    let result = execute(command, config, &fingerprint, &mut art);
    manifest.outputs = art.written;
    manifest.checks = art.checks;
    match result {
        Ok(()) => {
            manifest.status = RunStatus::Complete;
            manifest.write(&run_dir).map_err(|e| fail(e, &run_dir))?;
            Ok(RunOutcome { run_dir, manifest })
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
            if let Err(w) = manifest.write(&run_dir) {
                log::error!("could not record failure in manifest: {w}");
            }
            Err(fail(e, &run_dir))
        }
    }
}

fn input_records(config: &RunConfig, command: Command) -> Result<Vec<InputRecord>> {
    if command == Command::GenData {
        return Ok(Vec::new());
    }
    let mut paths = Vec::new();
    if let Some(ds) = &config.paths.dataset {
        let m = DatasetManifest::read(ds)?;
        paths.push(ds.clone());
        paths.extend(m.input_paths(ds.parent().unwrap_or(Path::new("."))));
    }
    let uses_model = !matches!(command, Command::Train | Command::Ablate);
    if let (true, Some(ck)) = (uses_model, &config.paths.checkpoint) {
        paths.push(ck.clone());
    }
    paths
        .into_iter()
        .map(|path| {
            let sha256 = sha256_file(&path)?;
            Ok(InputRecord { path, sha256 })
        })
        .collect()
}

fn train_config(config: &RunConfig) -> TrainConfig {
    TrainConfig {
        execution: config.execution,
        ..config.train.clone()
    }
}

fn obtain_data(config: &RunConfig) -> Result<(MmhclDataset, ClassCatalog)> {
    match &config.paths.dataset {
        Some(path) => DatasetManifest::open(path),
        None => {
            let catalog = synthetic_catalog(&config.data)?;
            let ds = synthesize(&config.data, &catalog)?;
            Ok((ds, catalog))
        }
    }
}

/// Loads the checkpoint when one is given, with inference settings taken from
/// the run configuration; otherwise trains and saves a fresh model.
fn obtain_model(
    config: &RunConfig,
    ds: &MmhclDataset,
    catalog: &ClassCatalog,
    art: &mut Artifacts,
) -> Result<ModelState> {
    let cfg = train_config(config);
    let Some(path) = &config.paths.checkpoint else {
        let model = train(ds, catalog, &cfg)?;
        save_checkpoint(&model, &art.path("model.ckpt"))?;
        write_loss_log(&model.log, &art.path("loss.csv"))?;
        return Ok(model);
    };
    let model = load_checkpoint(path)?;
    if model.catalog != *catalog || model.partition != ds.partition {
        return Err(Error::InvalidState(format!(
            "checkpoint {} was trained on a different catalog or class partition",
            path.display()
        )));
    }
    if (model.dim(crate::Modality::A), model.dim(crate::Modality::B)) != (ds.dim_a, ds.dim_b) {
        return Err(Error::InvalidState(format!(
            "checkpoint {} expects feature dims ({}, {}), dataset has ({}, {})",
            path.display(),
            model.dim(crate::Modality::A),
            model.dim(crate::Modality::B),
            ds.dim_a,
            ds.dim_b
        )));
    }
    model.with_inference(TrainConfig {
        use_osrs: cfg.use_osrs,
        use_dmss: cfg.use_dmss,
        use_csmf: cfg.use_csmf,
        top_k: cfg.top_k,
        prune_scope: cfg.prune_scope,
        row_normalize: cfg.row_normalize,
        force_dominant_on_missing: cfg.force_dominant_on_missing,
        execution: cfg.execution,
        ..model.config.clone()
    })
}

fn execute(command: Command, config: &RunConfig, fingerprint: &str, art: &mut Artifacts) -> Result<()> {
    let seed = config.seed(command);
    let identity = |r: MetricsReport| r.with_identity(fingerprint, seed);
    if command == Command::GenData {
        let catalog = synthetic_catalog(&config.data)?;
        let ds = synthesize(&config.data, &catalog)?;
        let written = export_dataset(&ds, &catalog, Some(&config.data), &art.dir)?;
        art.written.extend(written);
        return Ok(());
    }
    let (ds, catalog) = obtain_data(config)?;
    let exec = config.execution;
    match command {
        Command::GenData => unreachable!("handled above"),
        Command::Train => {
            let model = train(&ds, &catalog, &train_config(config))?;
            save_checkpoint(&model, &art.path("model.ckpt"))?;
            write_loss_log(&model.log, &art.path("loss.csv"))?;
        }
        Command::Eval => {
            let model = obtain_model(config, &ds, &catalog, art)?;
            let scenarios = make_eval_scenarios(&ds)?;
            let full = evaluate(&model, &ds, &scenarios, exec)?;
            write_records_csv(&full.records, &art.path("predictions.csv"))?;
            let mut reports = vec![identity(full.report)];
            if config.eval.baselines {
                reports.push(identity(
                    evaluate(&AverageFusion(&model), &ds, &scenarios, exec)?.report,
                ));
                let cm = ConfidenceMax::train(&ds, &catalog, &train_config(config))?;
                reports.push(identity(evaluate(&cm, &ds, &scenarios, exec)?.report));
            }
            art.json("metrics.json", &reports)?;
            art.text("metrics.txt", &format_reports(&reports))?;
            art.checks = config
                .eval
                .checks
                .iter()
                .map(|(&scenario, &threshold)| {
                    let accuracy = reports[0].accuracy(scenario);
                    CheckOutcome {
                        scenario,
                        threshold,
                        accuracy,
                        passed: accuracy.is_some_and(|a| a >= threshold),
                    }
                })
                .collect();
        }
        Command::Ablate => {
            let ablation = ablation_suite(&ds, &catalog, &train_config(config))?;
            let reports: Vec<MetricsReport> = ablation.reports.into_iter().map(identity).collect();
            art.json("ablation.json", &reports)?;
            art.text("ablation.txt", &format_reports(&reports))?;
        }
        Command::SweepK => {
            let model = obtain_model(config, &ds, &catalog, art)?;
            let mut rows = topk_sweep(&model, &ds, &config.eval.k_values)?;
            for r in &mut rows {
                r.report = identity(r.report.clone());
            }
            write_sweep_csv(&rows, &art.path("sweep.csv"))?;
            art.json("sweep.json", &rows)?;
        }
        Command::DumpUncertainty => {
            let model = obtain_model(config, &ds, &catalog, art)?;
            let n = config.eval.uncertainty_samples.min(ds.test.len());
            let rows = uncertainty_dump(&model, &ds.test, n, config.eval.uncertainty_seed.unwrap_or(seed))?;
            write_uncertainty_csv(&rows, &art.path("uncertainty.csv"))?;
            art.json("dominance.json", &own_seen_dominance(&model, &ds)?)?;
        }
    }
    Ok(())
}
