//! Experiment configuration, execution and result emission.
//!
//! An experiment runs every arm for every trial. Arms of one trial share the
//! same initial network, and every random stream is keyed by
//! `(master_seed, purpose, trial)` so that changing which metrics are
//! captured never perturbs training.

pub mod emit;
pub mod presets;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{self, CifarVariant, Dataset, TransformSpec};
use crate::error::{bail, Error, Result};
use crate::learn::{self, Rule, TrainConfig, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::metrics::{self, MetaConfig};
use crate::net::{self, Mlp};
use crate::noise::{self, NoiseConfig, NoiseDistribution};
use crate::record::{Phase, RunRecord};
use crate::seed;

pub use emit::{emit_csv, emit_plot, format_sig, records_to_csv, Chart, Series};

pub const DATA_DIR_ENV: &str = "PREALIGN_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl NetSpec {
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.hidden);
        d.push(self.classes);
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSpec {
    pub distribution: NoiseDistribution,
    pub total_samples: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default = "default_rule")]
    pub rule: Rule,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

fn default_rule() -> Rule {
    Rule::Fa
}

fn default_true() -> bool {
    true
}

fn default_one() -> f64 {
    1.0
}

/// Where a dataset's bytes live, relative to the data root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase")]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Cifar { files: Vec<PathBuf>, variant: CifarVariant },
    Usps { path: PathBuf },
    Stl10 { images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub source: DataSource,
    /// Seeded sample of this many rows.
    #[serde(default)]
    pub subset: Option<usize>,
    /// Random per-image affine transform applied after subsetting.
    #[serde(default)]
    pub transform: Option<TransformSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitSpec {
    /// He-initialised weights and independent feedback.
    He,
    /// He-initialised feedback with forward weights set to its transpose.
    Aligned,
    Checkpoint(PathBuf),
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec::He
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Stage {
    Noise {
        #[serde(default)]
        distribution: Option<NoiseDistribution>,
    },
    Data {
        #[serde(default)]
        rule: Option<Rule>,
        train: String,
        test: String,
    },
}

impl Stage {
    pub fn phase(&self) -> Phase {
        match self {
            Stage::Noise { .. } => Phase::Pretrain,
            Stage::Data { .. } => Phase::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub name: String,
    #[serde(default)]
    pub init: InitSpec,
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GramSpec {
    pub dataset: String,
    /// 1-based hidden layer; defaults to the last hidden layer.
    #[serde(default)]
    pub layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaSpec {
    pub tasks: Vec<String>,
    pub shots_per_class: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub query_per_class: usize,
    /// Evaluate at epoch 0 and every `every` epochs of each phase.
    pub every: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSpec {
    /// Layers whose mean alignment angle is recorded as `angle_l<i>`.
    #[serde(default)]
    pub angles: Vec<usize>,
    /// `dist_l<i>` = ‖W_i − B_iᵀ‖_F.
    #[serde(default)]
    pub distance: Vec<usize>,
    /// `erank_w<i>` = effective rank of W_i.
    #[serde(default)]
    pub effective_rank: Vec<usize>,
    /// `gen_gap` = test loss − train loss on data epochs.
    #[serde(default)]
    pub gap: bool,
    #[serde(default)]
    pub gram: Option<GramSpec>,
    #[serde(default)]
    pub meta: Option<MetaSpec>,
    /// Layer whose weights are snapshotted every epoch for a PCA trajectory.
    #[serde(default)]
    pub trajectory: Option<usize>,
}

/// Named values for a set of dotted config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    pub set: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub name: String,
    pub points: Vec<SweepPoint>,
}

impl SweepAxis {
    /// An axis over one key.
    pub fn over(key: &str, values: impl IntoIterator<Item = Value>) -> Self {
        let points = values
            .into_iter()
            .map(|v| SweepPoint { label: sweep_label(&v), set: BTreeMap::from([(key.to_string(), v)]) })
            .collect();
        SweepAxis { name: key.to_string(), points }
    }
}

fn sweep_label(v: &Value) -> String {
    let raw = match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    raw.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub net: NetSpec,
    pub trials: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Divides noise samples, data epochs and metric intervals.
    #[serde(default = "default_one")]
    pub scale: f64,
    #[serde(default)]
    pub pretrain: Option<PretrainSpec>,
    #[serde(default)]
    pub train: Option<TrainSpec>,
    #[serde(default)]
    pub datasets: BTreeMap<String, DatasetSpec>,
    pub arms: Vec<ArmSpec>,
    #[serde(default)]
    pub metrics: MetricsSpec,
    /// Datasets evaluated after an arm's last stage.
    #[serde(default)]
    pub evals: Vec<String>,
    #[serde(default)]
    pub sweep: Vec<SweepAxis>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub save_models: bool,
    #[serde(default = "default_true")]
    pub plots: bool,
}

impl ExperimentConfig {
    pub fn dims(&self) -> Vec<usize> {
        self.net.dims()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid experiment config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Applies `key=value` overrides on dotted paths. Values parse as JSON
    /// when possible and as plain strings otherwise.
    pub fn with_overrides(&self, overrides: &[(String, Value)]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut v = serde_json::to_value(self).expect("config serialises");
        for (k, val) in overrides {
            set_path(&mut v, k, val.clone())?;
        }
        serde_json::from_value(v).map_err(|e| Error::Config(format!("override produced an invalid config: {e}")))
    }

    /// Copy with `scale` folded into sample counts, epochs and intervals,
    /// leaving `scale` itself as the record of what was applied.
    pub fn scaled(&self) -> Result<Self> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            bail!(Config, "scale must be positive, got {}", self.scale);
        }
        let s = self.scale;
        let div = |n: usize| ((n as f64 / s).ceil() as usize).max(1);
        let mut c = self.clone();
        if let Some(p) = c.pretrain.as_mut() {
            p.total_samples = div(p.total_samples);
        }
        if let Some(t) = c.train.as_mut() {
            t.epochs = div(t.epochs);
        }
        if let Some(m) = c.metrics.meta.as_mut() {
            m.every = ((m.every as f64 / s).round() as usize).max(1);
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            bail!(Config, "trials must be at least 1");
        }
        let dims = self.dims();
        if dims.iter().any(|&d| d == 0) {
            bail!(Config, "layer sizes must be positive, got {dims:?}");
        }
        if self.arms.is_empty() {
            bail!(Config, "experiment '{}' has no arms", self.experiment_id);
        }
        let mut names = std::collections::BTreeSet::new();
        for arm in &self.arms {
            if arm.name.is_empty() || arm.name.contains(['/', '\\']) || !names.insert(&arm.name) {
                bail!(Config, "arm names must be unique path-safe identifiers, got '{}'", arm.name);
            }
            let mut phases = std::collections::BTreeSet::new();
            for st in &arm.stages {
                if !phases.insert(st.phase()) {
                    bail!(Config, "arm '{}' has more than one {} stage", arm.name, st.phase());
                }
                match st {
                    Stage::Noise { distribution } => {
                        if self.pretrain.is_none() {
                            bail!(Config, "arm '{}' has a noise stage but no pretrain settings", arm.name);
                        }
                        if let Some(d) = distribution {
                            d.validate()?;
                        }
                    }
                    Stage::Data { train, test, .. } => {
                        if self.train.is_none() {
                            bail!(Config, "arm '{}' has a data stage but no train settings", arm.name);
                        }
                        self.require_dataset(train)?;
                        self.require_dataset(test)?;
                    }
                }
            }
        }
        if let Some(p) = &self.pretrain {
            self.noise_config(p, None, 0).validate()?;
        }
        if let Some(t) = &self.train {
            self.train_config(t, None, 0).validate()?;
        }
        for l in self.metrics.angles.iter().chain(&self.metrics.distance).chain(&self.metrics.effective_rank) {
            if *l >= dims.len() - 1 {
                bail!(Config, "metric layer {l} out of range for dims {dims:?}");
            }
        }
        if let Some(l) = self.metrics.trajectory {
            if l >= dims.len() - 1 {
                bail!(Config, "trajectory layer {l} out of range for dims {dims:?}");
            }
        }
        if let Some(g) = &self.metrics.gram {
            self.require_dataset(&g.dataset)?;
            let hidden = dims.len() - 2;
            if hidden == 0 || g.layer.is_some_and(|l| l == 0 || l > hidden) {
                bail!(Config, "gram layer {:?} invalid for dims {dims:?}", g.layer);
            }
        }
        if let Some(m) = &self.metrics.meta {
            for t in &m.tasks {
                self.require_dataset(t)?;
            }
            if m.every == 0 {
                bail!(Config, "meta-loss interval must be at least 1");
            }
            self.meta_config(m, 0).validate()?;
        }
        for e in &self.evals {
            self.require_dataset(e)?;
        }
        Ok(())
    }

    fn require_dataset(&self, name: &str) -> Result<()> {
        if !self.datasets.contains_key(name) {
            bail!(Config, "dataset '{name}' is referenced but not defined");
        }
        Ok(())
    }

    fn noise_config(&self, p: &PretrainSpec, dist: Option<NoiseDistribution>, trial: usize) -> NoiseConfig {
        NoiseConfig {
            distribution: dist.unwrap_or(p.distribution),
            total_samples: p.total_samples,
            samples_per_epoch: p.samples_per_epoch,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            seed: trial_seeds(self.master_seed, trial).noise,
        }
    }

    fn train_config(&self, t: &TrainSpec, rule: Option<Rule>, trial: usize) -> TrainConfig {
        TrainConfig {
            rule: rule.unwrap_or(t.rule),
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            patience: t.patience,
            seed: trial_seeds(self.master_seed, trial).train,
            shuffle: t.shuffle,
        }
    }

    fn meta_config(&self, m: &MetaSpec, trial: usize) -> MetaConfig {
        MetaConfig {
            shots_per_class: m.shots_per_class,
            inner_steps: m.inner_steps,
            inner_lr: m.inner_lr,
            query_per_class: m.query_per_class,
            seed: trial_seeds(self.master_seed, trial).meta,
        }
    }

    /// Every dataset name the run will touch.
    pub fn referenced_datasets(&self) -> Vec<String> {
        let mut names = std::collections::BTreeSet::new();
        for arm in &self.arms {
            for st in &arm.stages {
                if let Stage::Data { train, test, .. } = st {
                    names.insert(train.clone());
                    names.insert(test.clone());
                }
            }
        }
        if let Some(g) = &self.metrics.gram {
            names.insert(g.dataset.clone());
        }
        if let Some(m) = &self.metrics.meta {
            names.extend(m.tasks.iter().cloned());
        }
        names.extend(self.evals.iter().cloned());
        names.into_iter().collect()
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(Usage, "malformed override key '{path}'");
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = root;
    for part in parents {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        cur = match cur {
            Value::Object(map) => map.entry(part.to_string()).or_insert(Value::Null),
            Value::Array(items) => array_slot(items, part, path)?,
            _ => bail!(Usage, "cannot descend into '{part}' of '{path}'"),
        };
    }
    if cur.is_null() {
        *cur = Value::Object(Default::default());
    }
    match cur {
        Value::Object(map) => {
            map.insert(last.to_string(), value);
        }
        Value::Array(items) => *array_slot(items, last, path)? = value,
        _ => bail!(Usage, "cannot set '{last}' of '{path}'"),
    }
    Ok(())
}

fn array_slot<'v>(items: &'v mut [Value], part: &str, path: &str) -> Result<&'v mut Value> {
    let idx: usize = part.parse().map_err(|_| Error::Usage(format!("'{part}' in '{path}' is not an index")))?;
    let len = items.len();
    items.get_mut(idx).ok_or_else(|| Error::Usage(format!("index {idx} in '{path}' out of range ({len})")))
}

/// Parses `key=value`; the value is JSON if it parses, else a string.
pub fn parse_override(raw: &str) -> Result<(String, Value)> {
    let Some((k, v)) = raw.split_once('=') else {
        bail!(Usage, "override '{raw}' must look like key=value");
    };
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TrialSeeds {
    pub init: u64,
    pub noise: u64,
    pub train: u64,
    pub meta: u64,
}

pub fn trial_seeds(master: u64, trial: usize) -> TrialSeeds {
    let t = trial as u64;
    TrialSeeds {
        init: seed::derive(master, "init", t),
        noise: seed::derive(master, "noise", t),
        train: seed::derive(master, "train", t),
        meta: seed::derive(master, "meta", t),
    }
}

/// Dataset root: explicit value, then `PREALIGN_DATA_DIR`, then `./data`.
pub fn resolve_data_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Resolves `rel` under `root`, also accepting a `.gz` sibling.
fn locate(root: &Path, rel: &Path) -> Result<PathBuf> {
    let p = if rel.is_absolute() { rel.to_path_buf() } else { root.join(rel) };
    if p.is_file() {
        return Ok(p);
    }
    let mut gz = p.clone().into_os_string();
    gz.push(".gz");
    let gz = PathBuf::from(gz);
    if gz.is_file() {
        return Ok(gz);
    }
    bail!(Data, "dataset file {} not found", p.display())
}

fn source_paths(root: &Path, src: &DataSource) -> Result<Vec<PathBuf>> {
    match src {
        DataSource::Idx { images, labels } | DataSource::Stl10 { images, labels } => {
            Ok(vec![locate(root, images)?, locate(root, labels)?])
        }
        DataSource::Cifar { files, .. } => files.iter().map(|f| locate(root, f)).collect(),
        DataSource::Usps { path } => Ok(vec![locate(root, path)?]),
    }
}

fn load_source(root: &Path, src: &DataSource) -> Result<Dataset> {
    let p = source_paths(root, src)?;
    match src {
        DataSource::Idx { .. } => data::load_idx(&p[0], &p[1]),
        DataSource::Stl10 { .. } => data::load_stl10(&p[0], &p[1]),
        DataSource::Cifar { variant, .. } => data::load_cifar(&p, *variant),
        DataSource::Usps { .. } => data::load_usps_libsvm(&p[0]),
    }
}

/// Loads every referenced dataset, applying subsets and transforms. Subset
/// seeds depend on the master seed and the dataset name only, so all trials
/// and arms see the same rows.
pub fn load_datasets(cfg: &ExperimentConfig, root: &Path) -> Result<BTreeMap<String, Arc<Dataset>>> {
    let names = cfg.referenced_datasets();
    for n in &names {
        source_paths(root, &cfg.datasets[n].source)?;
    }
    let mut raw_cache: BTreeMap<String, Arc<Dataset>> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for name in names {
        let spec = &cfg.datasets[&name];
        let key = serde_json::to_string(&spec.source).expect("source serialises");
        let base = match raw_cache.get(&key) {
            Some(d) => d.clone(),
            None => {
                let d = Arc::new(load_source(root, &spec.source)?);
                raw_cache.insert(key, d.clone());
                d
            }
        };
        let mut ds = match spec.subset {
            Some(n) => data::subset(&base, n, seed::derive(cfg.master_seed, &format!("subset:{name}"), 0))?,
            None => (*base).clone(),
        };
        if let Some(t) = &spec.transform {
            let side = (ds.input_dim() as f64).sqrt().round() as usize;
            ds = data::transform_affine(&ds, t, side)?;
        }
        out.insert(name.clone(), Arc::new(ds.renamed(name)));
    }
    // Raw full-size copies are dropped here; only the derived sets are kept.
    drop(raw_cache);
    Ok(out)
}

/// Metric capture shared by both phases.
struct Probe<'a> {
    cfg: &'a ExperimentConfig,
    meta: Option<(MetaConfig, Vec<&'a Dataset>, usize)>,
    gram: Option<(&'a Dataset, usize)>,
    trajectory: Vec<(String, usize, Vec<f64>)>,
}

impl<'a> Probe<'a> {
    fn new(cfg: &'a ExperimentConfig, datasets: &'a BTreeMap<String, Arc<Dataset>>, trial: usize) -> Self {
        let meta = cfg.metrics.meta.as_ref().map(|m| {
            let tasks = m.tasks.iter().map(|t| datasets[t].as_ref()).collect();
            (cfg.meta_config(m, trial), tasks, m.every)
        });
        let hidden = cfg.dims().len() - 2;
        let gram = cfg.metrics.gram.as_ref().map(|g| (datasets[&g.dataset].as_ref(), g.layer.unwrap_or(hidden)));
        Probe { cfg, meta, gram, trajectory: Vec::new() }
    }

    fn capture(&mut self, mlp: &Mlp, rec: &mut RunRecord) -> Result<()> {
        let m = &self.cfg.metrics;
        for &l in &m.angles {
            rec.metrics.insert(format!("angle_l{l}"), metrics::alignment_angles(mlp, l)?.mean_deg);
        }
        for &l in &m.distance {
            rec.metrics.insert(format!("dist_l{l}"), metrics::weight_feedback_distance(mlp, l)?);
        }
        for &l in &m.effective_rank {
            rec.metrics.insert(format!("erank_w{l}"), metrics::effective_rank(&mlp.weights()[l])?);
        }
        if m.gap && rec.phase == Phase::Train {
            if let (Some(tr), Some(te)) = (rec.train_loss, rec.test_loss) {
                rec.metrics.insert("gen_gap".into(), metrics::generalization_gap(tr, te));
            }
        }
        if let Some((ds, layer)) = self.gram {
            let h = net::hidden_activations(mlp, ds.images(), layer)?;
            rec.metrics.insert("gram_dim".into(), metrics::gram_effective_dim(&h)?);
        }
        if let Some((mc, tasks, every)) = &self.meta {
            if rec.epoch % every == 0 {
                let ml = metrics::meta_loss(mlp, mc, tasks)?;
                rec.metrics.insert("meta_loss".into(), ml.total);
                for (t, v) in tasks.iter().zip(&ml.per_task) {
                    rec.metrics.insert(format!("meta_{}", t.name()), *v);
                }
            }
        }
        if let Some(l) = m.trajectory {
            let label = if rec.epoch == 0 { "init".to_string() } else { rec.phase.to_string() };
            self.trajectory.push((label, rec.epoch, mlp.weights()[l].as_slice().to_vec()));
        }
        Ok(())
    }
}

/// Everything one `(arm, trial)` run produces.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub arm: String,
    pub trial: usize,
    pub records: Vec<RunRecord>,
    pub summary: Vec<(String, f64)>,
    pub trajectory: Vec<(String, usize, Vec<f64>)>,
    pub feedback_target: Option<Vec<f64>>,
    pub models: Vec<(String, Mlp)>,
}

pub fn initial_network(cfg: &ExperimentConfig, init: &InitSpec, trial: usize, data_root: &Path) -> Result<Mlp> {
    let dims = cfg.dims();
    let seed = trial_seeds(cfg.master_seed, trial).init;
    let mlp = match init {
        InitSpec::He => net::init_mlp(&dims, seed)?,
        InitSpec::Aligned => net::init_mlp(&dims, seed)?.with_weights_aligned_to_feedback(),
        InitSpec::Checkpoint(p) => {
            let path = if p.is_absolute() || p.exists() { p.clone() } else { data_root.join(p) };
            let m = Mlp::load(&path)?;
            if m.dims() != dims.as_slice() {
                bail!(Config, "checkpoint {} has dims {:?}, config wants {dims:?}", path.display(), m.dims());
            }
            m
        }
    };
    Ok(mlp)
}

fn final_values(prefix: &str, rec: &RunRecord, out: &mut Vec<(String, f64)>) {
    for (k, v) in [
        ("train_loss", rec.train_loss),
        ("test_loss", rec.test_loss),
        ("train_acc", rec.train_acc),
        ("test_acc", rec.test_acc),
    ] {
        if let Some(v) = v {
            out.push((format!("{prefix}{k}"), v));
        }
    }
    for (k, v) in &rec.metrics {
        out.push((format!("{prefix}{k}"), *v));
    }
}

/// Runs one arm for one trial.
pub fn run_trial(
    cfg: &ExperimentConfig,
    arm: &ArmSpec,
    trial: usize,
    datasets: &BTreeMap<String, Arc<Dataset>>,
    data_root: &Path,
) -> Result<TrialResult> {
    let mut mlp = initial_network(cfg, &arm.init, trial, data_root)?;
    let mut probe = Probe::new(cfg, datasets, trial);
    let mut summary = Vec::new();
    let mut initial = RunRecord::new(Phase::Pretrain, 0);
    probe.capture(&mlp, &mut initial)?;
    final_values("initial_", &initial, &mut summary);

    let mut records = Vec::new();
    let mut models = Vec::new();
    for stage in &arm.stages {
        let phase = stage.phase();
        let mut stage_records = match stage {
            Stage::Noise { distribution } => {
                let nc = cfg.noise_config(cfg.pretrain.as_ref().expect("validated"), *distribution, trial);
                let mut hook = |m: &Mlp, r: &mut RunRecord| probe.capture(m, r);
                noise::pretrain_random_noise(&mut mlp, &nc, Some(&mut hook))?.records
            }
            Stage::Data { rule, train, test } => {
                let tc = cfg.train_config(cfg.train.as_ref().expect("validated"), *rule, trial);
                let mut hook = |m: &Mlp, r: &mut RunRecord| probe.capture(m, r);
                let out = learn::train(&mut mlp, &datasets[train], &datasets[test], &tc, Some(&mut hook))?;
                let curve: Vec<f64> = out.records.iter().filter_map(|r| r.test_acc).collect();
                summary.push(("train_auc_test_acc".into(), metrics::accuracy_auc(&curve)?));
                summary.push(("train_best_epoch".into(), out.best_epoch as f64));
                out.records
            }
        };
        for r in &mut stage_records {
            r.trial = trial;
        }
        if let Some(last) = stage_records.last() {
            final_values(&format!("{phase}_final_"), last, &mut summary);
            summary.push((format!("{phase}_epochs"), stage_records.len() as f64));
        }
        if let Some(first) = stage_records.first() {
            if let Some(l) = first.train_loss {
                summary.push((format!("{phase}_first_train_loss"), l));
            }
        }
        records.extend(stage_records);
        models.push((phase.to_string(), mlp.clone()));
    }
    for name in &cfg.evals {
        let ds = &datasets[name];
        let (loss, acc) = net::evaluate(&mlp, ds.images(), ds.labels())?;
        summary.push((format!("eval_{name}_loss"), loss));
        summary.push((format!("eval_{name}_acc"), acc));
    }
    if let Some(last) = records.last() {
        final_values("end_", last, &mut summary);
    }
    let feedback_target = match cfg.metrics.trajectory {
        Some(l) => Some(metrics::feedback_target(&mlp, l)?),
        None => None,
    };
    Ok(TrialResult {
        arm: arm.name.clone(),
        trial,
        records,
        summary,
        trajectory: probe.trajectory,
        feedback_target,
        models,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub arm: String,
    pub trial: usize,
    pub error: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub results: Vec<TrialResult>,
    pub failures: Vec<Failure>,
}

impl RunReport {
    /// Summary value for `(arm, trial, key)`.
    pub fn value(&self, arm: &str, trial: usize, key: &str) -> Option<f64> {
        self.results
            .iter()
            .find(|r| r.arm == arm && r.trial == trial)
            .and_then(|r| r.summary.iter().find(|(k, _)| k == key).map(|(_, v)| *v))
    }

    pub fn records(&self, arm: &str, trial: usize) -> Option<&[RunRecord]> {
        self.results.iter().find(|r| r.arm == arm && r.trial == trial).map(|r| r.records.as_slice())
    }
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Runs the experiment (or its sweep) and writes all outputs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunReport>> {
    if cfg.sweep.is_empty() {
        return Ok(vec![run_single(cfg)?]);
    }
    let mut points: Vec<(String, Vec<(String, Value)>)> = vec![(String::new(), Vec::new())];
    for axis in &cfg.sweep {
        if axis.points.is_empty() {
            bail!(Config, "sweep axis '{}' has no points", axis.name);
        }
        let mut next = Vec::new();
        for (label, sets) in &points {
            for p in &axis.points {
                let l = if label.is_empty() { p.label.clone() } else { format!("{label}_{}", p.label) };
                let mut s = sets.clone();
                s.extend(p.set.iter().map(|(k, v)| (k.clone(), v.clone())));
                next.push((l, s));
            }
        }
        points = next;
    }
    let mut base = cfg.clone();
    base.sweep.clear();
    let mut reports = Vec::new();
    let mut index = Vec::new();
    for (label, sets) in points {
        let mut point = base.with_overrides(&sets)?;
        point.output_dir = cfg.output_dir.join(&label);
        point.experiment_id = format!("{}/{label}", cfg.experiment_id);
        let report = run_single(&point)?;
        index.push(json!({ "label": label, "set": sets.iter().cloned().collect::<BTreeMap<_, _>>(), "output_dir": point.output_dir, "failures": report.failures.len() }));
        reports.push(report);
    }
    let manifest =
        json!({ "experiment_id": cfg.experiment_id, "sweep": cfg.sweep, "points": index, "timestamp": unix_time() });
    emit::write_file(
        &cfg.output_dir.join("sweep.json"),
        serde_json::to_string_pretty(&manifest).expect("json").as_bytes(),
    )?;
    Ok(reports)
}

fn run_single(original: &ExperimentConfig) -> Result<RunReport> {
    let cfg = original.scaled()?;
    cfg.validate()?;
    let root = resolve_data_dir(cfg.data_dir.as_deref());
    let datasets = load_datasets(&cfg, &root)?;
    for arm in &cfg.arms {
        if let InitSpec::Checkpoint(p) = &arm.init {
            let path = if p.is_absolute() || p.exists() { p.clone() } else { root.join(p) };
            if !path.is_file() {
                bail!(Data, "checkpoint {} not found", path.display());
            }
        }
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.trials).flat_map(|t| (0..cfg.arms.len()).map(move |a| (t, a))).collect();
    let outcomes: Vec<((usize, usize), Result<TrialResult>)> =
        jobs.par_iter().map(|&(t, a)| ((t, a), run_trial(&cfg, &cfg.arms[a], t, &datasets, &root))).collect();

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for ((t, a), out) in outcomes {
        match out {
            Ok(r) => results.push(r),
            Err(e) => failures.push(Failure {
                arm: cfg.arms[a].name.clone(),
                trial: t,
                error: e.to_string(),
                exit_code: e.exit_code(),
            }),
        }
    }
    write_outputs(original, &cfg, &results, &failures, &root)?;
    Ok(RunReport { output_dir: cfg.output_dir.clone(), results, failures })
}

fn arm_dir(cfg: &ExperimentConfig, arm: &str) -> PathBuf {
    if cfg.arms.len() == 1 {
        cfg.output_dir.clone()
    } else {
        cfg.output_dir.join(arm)
    }
}

fn write_outputs(
    original: &ExperimentConfig,
    cfg: &ExperimentConfig,
    results: &[TrialResult],
    failures: &[Failure],
    root: &Path,
) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    for arm in &cfg.arms {
        let dir = arm_dir(cfg, &arm.name);
        let mut mine: Vec<&TrialResult> = results.iter().filter(|r| r.arm == arm.name).collect();
        mine.sort_by_key(|r| r.trial);
        let records: Vec<RunRecord> = mine.iter().flat_map(|r| r.records.iter().cloned()).collect();
        if !records.is_empty() {
            emit_csv(&records, &dir.join("records.csv"))?;
        }
        if cfg.save_models {
            for r in &mine {
                for (phase, m) in &r.models {
                    m.save(&dir.join(format!("model_{}_{phase}.bin", r.trial)))?;
                }
            }
        }
    }

    let mut summary = String::from("arm,trial,key,value\n");
    let mut sorted: Vec<&TrialResult> = results.iter().collect();
    sorted.sort_by_key(|r| (cfg.arms.iter().position(|a| a.name == r.arm), r.trial));
    for r in &sorted {
        for (k, v) in &r.summary {
            summary.push_str(&format!("{},{},{k},{}\n", r.arm, r.trial, format_sig(*v)));
        }
    }
    emit::write_file(&cfg.output_dir.join("summary.csv"), summary.as_bytes())?;

    if cfg.metrics.trajectory.is_some() {
        write_trajectories(cfg, &sorted)?;
    }
    if cfg.plots && !results.is_empty() {
        write_plots(cfg, &sorted)?;
    }

    let seeds: Vec<TrialSeeds> = (0..cfg.trials).map(|t| trial_seeds(cfg.master_seed, t)).collect();
    let manifest = json!({
        "experiment_id": cfg.experiment_id,
        "version": env!("CARGO_PKG_VERSION"),
        "config": original,
        "resolved": cfg,
        "dims": cfg.dims(),
        "scale": cfg.scale,
        "data_dir": root,
        "seeds": seeds,
        "adam": { "beta1": ADAM_BETA1, "beta2": ADAM_BETA2, "eps": ADAM_EPS },
        "pixel_normalization": "u8 / 255 into [0, 1]",
        "log_floor": net::LOG_FLOOR,
        "failures": failures,
        "timestamp": unix_time(),
    });
    emit::write_file(
        &cfg.output_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("json").as_bytes(),
    )
}

/// Per trial, one PCA over every arm's snapshots plus the feedback target.
fn write_trajectories(cfg: &ExperimentConfig, results: &[&TrialResult]) -> Result<()> {
    let mut out = String::from("trial,arm,phase,epoch,pc1,pc2\n");
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for t in 0..cfg.trials {
        let rs: Vec<&&TrialResult> = results.iter().filter(|r| r.trial == t).collect();
        let Some(target) = rs.iter().find_map(|r| r.feedback_target.clone()) else { continue };
        let snaps: Vec<Vec<f64>> = rs.iter().flat_map(|r| r.trajectory.iter().map(|s| s.2.clone())).collect();
        if snaps.len() < 3 {
            continue;
        }
        let tr = metrics::weight_trajectory_pca(&snaps, &target, 2.min(snaps.len()))?;
        let mut i = 0;
        for r in &rs {
            for (phase, epoch, _) in &r.trajectory {
                let c = &tr.coords[i];
                i += 1;
                let pc2 = c.get(1).copied().unwrap_or(0.0);
                out.push_str(&format!("{t},{},{phase},{epoch},{},{}\n", r.arm, format_sig(c[0]), format_sig(pc2)));
                if t == 0 {
                    series.entry(r.arm.clone()).or_default().push((c[0], pc2));
                }
            }
        }
        let f = &tr.feedback_coord;
        out.push_str(&format!(
            "{t},feedback,,,{},{}\n",
            format_sig(f[0]),
            format_sig(f.get(1).copied().unwrap_or(0.0))
        ));
        if t == 0 {
            series.insert("feedback".into(), vec![(f[0], f.get(1).copied().unwrap_or(0.0))]);
        }
    }
    emit::write_file(&cfg.output_dir.join("trajectory.csv"), out.as_bytes())?;
    if cfg.plots && !series.is_empty() {
        let chart = Chart {
            title: format!("{}: weight trajectory (trial 0)", cfg.experiment_id),
            x_label: "PC1".into(),
            y_label: "PC2".into(),
            series: series.into_iter().map(|(label, points)| Series { label, points }).collect(),
        };
        emit_plot(&chart, &cfg.output_dir.join("trajectory.svg"))?;
    }
    Ok(())
}

/// Trial-mean curve per arm for every recorded quantity of each phase.
fn write_plots(cfg: &ExperimentConfig, results: &[&TrialResult]) -> Result<()> {
    for phase in [Phase::Pretrain, Phase::Train] {
        let mut columns: Vec<String> =
            ["train_loss", "test_loss", "train_acc", "test_acc"].iter().map(|s| s.to_string()).collect();
        let all: Vec<RunRecord> =
            results.iter().flat_map(|r| r.records.iter().filter(|x| x.phase == phase).cloned()).collect();
        if all.is_empty() {
            continue;
        }
        columns.extend(emit::metric_columns(&all));
        for col in columns {
            let mut series = Vec::new();
            for arm in &cfg.arms {
                let mut by_epoch: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
                for r in results.iter().filter(|r| r.arm == arm.name) {
                    for rec in r.records.iter().filter(|x| x.phase == phase) {
                        let v = match col.as_str() {
                            "train_loss" => rec.train_loss,
                            "test_loss" => rec.test_loss,
                            "train_acc" => rec.train_acc,
                            "test_acc" => rec.test_acc,
                            other => rec.metrics.get(other).copied(),
                        };
                        if let Some(v) = v {
                            let e = by_epoch.entry(rec.epoch).or_insert((0.0, 0));
                            e.0 += v;
                            e.1 += 1;
                        }
                    }
                }
                let points: Vec<(f64, f64)> =
                    by_epoch.into_iter().map(|(e, (s, n))| (e as f64, s / n as f64)).collect();
                if !points.is_empty() {
                    series.push(Series { label: arm.name.clone(), points });
                }
            }
            if series.is_empty() {
                continue;
            }
            let chart = Chart {
                title: format!("{} {phase}: {col}", cfg.experiment_id),
                x_label: format!("{phase} epoch"),
                y_label: col.clone(),
                series,
            };
            emit_plot(&chart, &cfg.output_dir.join(format!("{phase}_{col}.svg")))?;
        }
    }
    Ok(())
}

/// Sample mean and standard deviation of a summary key over trials.
pub fn trial_stats(report: &RunReport, arm: &str, key: &str) -> Option<(f64, f64, usize)> {
    let vals: Vec<f64> =
        report.results.iter().filter(|r| r.arm == arm).filter_map(|r| report.value(arm, r.trial, key)).collect();
    if vals.is_empty() {
        return None;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd =
        if vals.len() > 1 { (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    Some((mean, sd, vals.len()))
}
