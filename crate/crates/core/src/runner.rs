//! Experiment configuration, presets and artifact-writing drivers.
//!
//! A config is resolved in layers: a named preset, then an optional JSON
//! file merged over it, then dotted `key=value` overrides. Unknown keys are
//! rejected at every layer. Every run directory receives a `manifest.json`
//! holding the resolved config, so `eval` and `export-pca` can rebuild the
//! world from the directory alone.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::encoders::{load_store, save_store, synth_world, EmbeddingStore, SurrogateEncoder, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{eval_protocol, prompt_points, write_metrics_csv, write_pca_csv, EvalPlan, MetricsRecord, ModelSet};
use crate::fedcore::{run_federation, FedOutcome, FedRun, FederationConfig, Trained};
use crate::models::{Method, ModelSnapshot, ModelSpec, PredictConfig, PromptModel};
use crate::partition::{build_shards, PartitionConfig, Partition};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STORE_FILE: &str = "store.ftpg";
pub const PCA_FILE: &str = "pca.csv";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub heads: usize,
    /// Weight of the text-embedding anchor penalty used by `fedkgcoop`.
    pub kg_lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { heads: 4, kg_lambda: 8.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// 3 for the local/base/new harmonic mean, 2 for base/new only.
    pub hm_terms: usize,
    /// Datasets kept away from every client and scored as unseen.
    pub withheld_datasets: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { hm_terms: 3, withheld_datasets: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Drives partitioning, initialization, sampling and local batches.
    pub seed: u64,
    /// Load this store instead of synthesizing `world`.
    pub store: Option<PathBuf>,
    pub world: SynthConfig,
    pub partition: PartitionConfig,
    pub fed: FederationConfig,
    pub model: ModelConfig,
    pub predict: PredictConfig,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Preset::Desk.config()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Small world that trains in seconds on one core.
    Desk,
    /// Full-size dimensions and optimizer settings.
    Full,
}

impl Preset {
    pub const NAMES: [&'static str; 2] = ["desk", "full"];

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            other => Err(Error::Config(format!("unknown preset {other:?}, expected one of {:?}", Self::NAMES))),
        }
    }

    pub fn config(self) -> ExperimentConfig {
        match self {
            Preset::Desk => ExperimentConfig {
                method: Method::FedTpg,
                seed: 0,
                store: None,
                world: SynthConfig::default(),
                partition: PartitionConfig { classes_per_client: 10, shots: 8, ..Default::default() },
                fed: FederationConfig { rounds: 100, lr: 0.3, batch_size: 32, eval_every: 25, ..Default::default() },
                model: ModelConfig::default(),
                predict: PredictConfig::default(),
                eval: EvalConfig::default(),
                out_dir: PathBuf::from("runs/desk"),
            },
            Preset::Full => ExperimentConfig {
                method: Method::FedTpg,
                seed: 0,
                store: None,
                world: SynthConfig {
                    dim: 512,
                    prompt_len: 4,
                    num_datasets: 9,
                    classes_per_dataset: 134,
                    ..Default::default()
                },
                partition: PartitionConfig { classes_per_client: 20, shots: 8, allow_mixed_shards: true, ..Default::default() },
                fed: FederationConfig { rounds: 500, lr: 0.003, batch_size: 200, eval_every: 25, ..Default::default() },
                model: ModelConfig::default(),
                predict: PredictConfig::default(),
                eval: EvalConfig::default(),
                out_dir: PathBuf::from("runs/full"),
            },
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.fed.validate()?;
        self.predict.validate()?;
        if self.model.heads == 0 || !self.world.dim.is_multiple_of(self.model.heads) {
            return Err(Error::Config(format!(
                "model.heads = {} must divide world.dim = {}",
                self.model.heads, self.world.dim
            )));
        }
        if !(self.model.kg_lambda >= 0.0 && self.model.kg_lambda.is_finite()) {
            return Err(Error::Config(format!("model.kg_lambda must be finite and >= 0, got {}", self.model.kg_lambda)));
        }
        if !matches!(self.eval.hm_terms, 2 | 3) {
            return Err(Error::Config(format!("eval.hm_terms must be 2 or 3, got {}", self.eval.hm_terms)));
        }
        if self.partition.classes_per_client == 0 || self.partition.shots == 0 {
            return Err(Error::Config("partition.classes_per_client and partition.shots must be >= 1".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            method: self.method,
            prompt_len: self.world.prompt_len,
            dim: self.world.dim,
            heads: self.model.heads,
        }
    }

    /// Datasets clients never see: explicit partition exclusions plus the
    /// evaluation's withheld set.
    fn excluded(&self) -> PartitionConfig {
        let mut p = self.partition.clone();
        for d in &self.eval.withheld_datasets {
            if !p.exclude_datasets.contains(d) {
                p.exclude_datasets.push(d.clone());
            }
        }
        p
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON, falling back to a
/// plain string.
pub fn apply_override(cfg: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let last = path.pop().unwrap_or_default();
    let mut node = cfg;
    for part in path {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .filter(|v| v.is_object())
            .ok_or_else(|| Error::Config(format!("override key {key:?}: no section {part:?}")))?;
    }
    let map = node.as_object_mut().ok_or_else(|| Error::Config(format!("override key {key:?} is not in a section")))?;
    map.insert(last.to_string(), value);
    Ok(())
}

/// Preset, then `file` merged over it, then `overrides` in order.
pub fn resolve_config(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut value = serde_json::to_value(preset.config()).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = fs::read_to_string(path)?;
        let over: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !over.is_object() {
            return Err(Error::Config(format!("{}: config must be a JSON object", path.display())));
        }
        merge(&mut value, over);
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// The world a config describes, together with its partition and eval plan.
pub struct Prepared {
    pub store: EmbeddingStore,
    pub encoder: SurrogateEncoder,
    pub partition: Partition,
    pub plan: EvalPlan,
}

pub fn load_world(cfg: &ExperimentConfig) -> Result<EmbeddingStore> {
    let store = match &cfg.store {
        Some(path) => load_store(path)?,
        None => synth_world(&cfg.world)?,
    };
    if store.dim != cfg.world.dim || store.prompt_len != cfg.world.prompt_len {
        return Err(Error::Config(format!(
            "store has d={}, m={} but config has world.dim={}, world.prompt_len={}",
            store.dim, store.prompt_len, cfg.world.dim, cfg.world.prompt_len
        )));
    }
    Ok(store)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let store = load_world(cfg)?;
    let encoder = SurrogateEncoder::from_seed(store.encoder_seed, store.prompt_len, store.dim)?;
    let partition = build_shards(&store, &cfg.excluded(), cfg.seed)?;
    let plan = EvalPlan::new(&store, &partition.shards, &cfg.eval.withheld_datasets)?;
    Ok(Prepared { store, encoder, partition, plan })
}

fn fed_run(cfg: &ExperimentConfig) -> FedRun<'_> {
    FedRun {
        method: cfg.method,
        seed: cfg.seed,
        fed: &cfg.fed,
        spec: cfg.model_spec(),
        predict: cfg.predict,
        kg_lambda: cfg.model.kg_lambda,
        hm_terms: cfg.eval.hm_terms,
    }
}

/// Trains in memory without writing anything.
pub fn train_in_memory(cfg: &ExperimentConfig, world: &Prepared) -> Result<FedOutcome> {
    run_federation(&fed_run(cfg), &world.partition.shards, &world.plan, &world.encoder)
}

/// Snapshot file names: one global model, or one per client.
pub fn snapshot_files(method: Method, num_clients: usize) -> Vec<String> {
    if method == Method::CoopLocal {
        (0..num_clients).map(|i| format!("client{i:03}.snap")).collect()
    } else {
        vec!["model.snap".to_string()]
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_manifest(dir: &Path, cfg: &ExperimentConfig, extra: Map<String, Value>) -> Result<()> {
    let mut body = Map::new();
    body.insert("config".into(), serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?);
    body.extend(extra);
    let mut w = create(&dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut w, &Value::Object(body)).map_err(|e| Error::Io(e.into()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Reads the resolved config back from a run directory's manifest.
pub fn read_manifest(dir: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let cfg = v.get("config").cloned().ok_or_else(|| Error::Format("manifest has no config".into()))?;
    let cfg: ExperimentConfig = serde_json::from_value(cfg).map_err(|e| Error::Config(format!("manifest: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Writes the world's store file to `path`.
pub fn gen_data(cfg: &ExperimentConfig, path: &Path) -> Result<EmbeddingStore> {
    cfg.validate()?;
    let store = synth_world(&cfg.world)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    save_store(&store, path)?;
    info!("wrote {} classes to {}", store.num_classes(), path.display());
    Ok(store)
}

/// Trains and writes the manifest, snapshots and metrics CSV to
/// `cfg.out_dir`.
pub fn train(cfg: &ExperimentConfig) -> Result<FedOutcome> {
    let world = prepare(cfg)?;
    info!(
        "{} on {} clients, {} rounds, seed {}",
        cfg.method,
        world.partition.shards.len(),
        cfg.fed.rounds,
        cfg.seed
    );
    let outcome = train_in_memory(cfg, &world)?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir)?;
    let spec = cfg.model_spec();
    let snaps = outcome.trained.snapshots(&spec);
    let files = snapshot_files(cfg.method, snaps.len());
    for (snap, name) in snaps.iter().zip(&files) {
        snap.save(dir.join(name))?;
    }
    write_metrics_csv(&outcome.records, create(&dir.join(METRICS_FILE))?)?;
    let mut extra = Map::new();
    extra.insert("num_clients".into(), json!(world.partition.shards.len()));
    extra.insert("param_count".into(), json!(spec.param_count()));
    extra.insert("snapshots".into(), json!(files));
    extra.insert("metrics".into(), json!(METRICS_FILE));
    write_manifest(dir, cfg, extra)?;
    Ok(outcome)
}

/// Loads the trained model(s) of a run directory.
pub fn load_trained(cfg: &ExperimentConfig, dir: &Path, num_clients: usize) -> Result<Trained> {
    let spec = cfg.model_spec();
    let models = snapshot_files(cfg.method, num_clients)
        .iter()
        .map(|f| spec.from_snapshot(&ModelSnapshot::load(dir.join(f))?))
        .collect::<Result<Vec<PromptModel>>>()?;
    Ok(if cfg.method == Method::CoopLocal {
        Trained::PerClient(models)
    } else {
        Trained::Global(models.into_iter().next().ok_or_else(|| Error::Data("no snapshot".into()))?)
    })
}

/// Scores the snapshots of run directory `dir` on its own world.
pub fn evaluate(dir: &Path) -> Result<MetricsRecord> {
    let cfg = read_manifest(dir)?;
    let world = prepare(&cfg)?;
    let trained = load_trained(&cfg, dir, world.partition.shards.len())?;
    let s = eval_protocol(trained.model_set(), &world.plan, &world.encoder, &cfg.predict, cfg.eval.hm_terms)?;
    let run = fed_run(&cfg);
    let trainer = run.trainer(&world.encoder);
    let losses = world
        .partition
        .shards
        .iter()
        .enumerate()
        .map(|(i, shard)| {
            let model = match trained.model_set() {
                ModelSet::Shared(m) => m,
                ModelSet::PerClient(ms) => &ms[i],
            };
            trainer.shard_loss(model, shard)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(MetricsRecord {
        round: if cfg.method == Method::ZeroShot { 0 } else { cfg.fed.rounds },
        method: cfg.method,
        seed: cfg.seed,
        train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
        local_acc: s.local,
        base_acc: s.base,
        new_acc: s.new,
        hm: s.hm,
    })
}

/// Writes the PCA projection of every generated prompt vector of run
/// directory `dir` to `out`.
pub fn export_pca(dir: &Path, out: &Path) -> Result<()> {
    let cfg = read_manifest(dir)?;
    let world = prepare(&cfg)?;
    let trained = load_trained(&cfg, dir, world.partition.shards.len())?;
    let points = prompt_points(cfg.method, trained.model_set(), &world.store, &world.plan)?;
    let pca = write_pca_csv(&points, create(out)?)?;
    info!("explained variance {:?}", pca.explained);
    Ok(())
}

/// Axes of a sweep; an empty axis keeps the base config's value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepGrid {
    pub classes_per_client: Vec<usize>,
    pub shots: Vec<usize>,
    pub participation: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub classes_per_client: usize,
    pub shots: usize,
    pub participation: f64,
}

impl SweepCell {
    pub fn dir_name(&self) -> String {
        format!("n{}_shots{}_p{}", self.classes_per_client, self.shots, self.participation)
    }
}

impl SweepGrid {
    pub fn cells(&self, base: &ExperimentConfig) -> Vec<SweepCell> {
        let or = |v: &Vec<usize>, d| if v.is_empty() { vec![d] } else { v.clone() };
        let ns = or(&self.classes_per_client, base.partition.classes_per_client);
        let shots = or(&self.shots, base.partition.shots);
        let ps = if self.participation.is_empty() { vec![base.fed.participation_rate] } else { self.participation.clone() };
        let mut out = Vec::new();
        for &n in &ns {
            for &s in &shots {
                for &p in &ps {
                    out.push(SweepCell { classes_per_client: n, shots: s, participation: p });
                }
            }
        }
        out
    }
}

/// Trains every grid cell into its own subdirectory of `base.out_dir` and
/// writes `sweep.csv` with each cell's final record.
pub fn sweep(base: &ExperimentConfig, grid: &SweepGrid) -> Result<Vec<(SweepCell, MetricsRecord)>> {
    let cells = grid.cells(base);
    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut cfg = base.clone();
        cfg.partition.classes_per_client = cell.classes_per_client;
        cfg.partition.shots = cell.shots;
        cfg.world.train_shots = cfg.world.train_shots.max(cell.shots);
        cfg.fed.participation_rate = cell.participation;
        cfg.out_dir = base.out_dir.join(cell.dir_name());
        let outcome = train(&cfg)?;
        let last = outcome.records.last().cloned().ok_or_else(|| Error::Data("run produced no records".into()))?;
        results.push((cell, last));
    }
    fs::create_dir_all(&base.out_dir)?;
    let mut w = create(&base.out_dir.join("sweep.csv"))?;
    writeln!(w, "classes_per_client,shots,participation,{}", crate::eval::METRICS_HEADER)?;
    for (cell, r) in &results {
        writeln!(w, "{},{},{},{}", cell.classes_per_client, cell.shots, cell.participation, r.csv_line())?;
    }
    w.flush()?;
    Ok(results)
}
