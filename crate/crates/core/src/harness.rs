//! Experiment orchestration shared by the command line and the bindings:
//! fully materialized run configurations, run manifests, dataset
//! fingerprints, single runs and grid sweeps.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::adapter::AdapterKind;
use crate::backbone::Backbone;
use crate::checkpoint::save_checkpoint;
use crate::dataset::{Dataset, DATASET_FILES};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, RegLevel};
use crate::optim::OptimizerKind;
use crate::routing::RoutingOutcome;
use crate::train::{
    evaluate, metrics_csv, pretrain_backbone, train, EvalResult, MetricsRow, PretrainConfig, TrainConfig, EVAL_HEADER,
    METRICS_HEADER,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MAX_GRID_AXES: usize = 2;

/// Everything that determines a training run besides the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub d_hidden: usize,
    pub depth: usize,
    pub adapters: usize,
    pub rank: usize,
    pub insertion: Option<Vec<usize>>,
    pub adapter_kind: AdapterKind,
    pub per_layer_routing: bool,
    pub reg_level: RegLevel,
    pub min_rank_ratio: usize,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        RunConfig {
            seed: 7,
            d_hidden: m.d_hidden,
            depth: m.depth,
            adapters: m.adapters,
            rank: m.rank,
            insertion: m.insertion,
            adapter_kind: m.adapter_kind,
            per_layer_routing: m.per_layer_routing,
            reg_level: m.reg_level,
            min_rank_ratio: m.min_rank_ratio,
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

/// Short names accepted on grids and flags.
fn canonical_key(key: &str) -> &str {
    match key {
        "tau" => "routing.tau",
        "theta" => "routing.theta",
        "lambda" => "objective.lambda",
        "rho" => "objective.rho",
        "lr" => "train.lr",
        "epochs" => "train.epochs",
        "rank" => "model.rank",
        "adapters" => "model.adapters",
        other => other,
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    pub fn model_config(&self, d_in: usize, tasks: usize) -> ModelConfig {
        ModelConfig {
            d_in,
            d_hidden: self.d_hidden,
            depth: self.depth,
            tasks,
            adapters: self.adapters,
            rank: self.rank,
            insertion: self.insertion.clone(),
            adapter_kind: self.adapter_kind,
            per_layer_routing: self.per_layer_routing,
            reg_level: self.reg_level,
            min_rank_ratio: self.min_rank_ratio,
        }
    }

    /// Every setting as `key=value`, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let insertion = match &self.insertion {
            None => "all".to_string(),
            Some(l) => l.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
        };
        let t = &self.train;
        [
            ("seed", self.seed.to_string()),
            ("model.d_hidden", self.d_hidden.to_string()),
            ("model.depth", self.depth.to_string()),
            ("model.adapters", self.adapters.to_string()),
            ("model.rank", self.rank.to_string()),
            ("model.insertion", insertion),
            ("model.adapter_kind", self.adapter_kind.name().to_string()),
            ("model.per_layer_routing", self.per_layer_routing.to_string()),
            ("model.reg_level", self.reg_level.name().to_string()),
            ("model.min_rank_ratio", self.min_rank_ratio.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.optimizer", t.optimizer.name().to_string()),
            ("train.freeze_backbone", t.freeze_backbone.to_string()),
            ("routing.tau", t.routing.tau.to_string()),
            ("routing.theta", t.routing.theta.to_string()),
            ("objective.lambda", t.objective.lambda.to_string()),
            ("objective.rho", t.objective.rho.to_string()),
            ("pretrain.epochs", self.pretrain.epochs.to_string()),
            ("pretrain.batch_size", self.pretrain.batch_size.to_string()),
            ("pretrain.lr", self.pretrain.lr.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Sets one entry by its full or short key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = canonical_key(key);
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                self.train.seed = self.seed;
                self.pretrain.seed = self.seed;
            }
            "model.d_hidden" => self.d_hidden = parse(key, value)?,
            "model.depth" => self.depth = parse(key, value)?,
            "model.adapters" => self.adapters = parse(key, value)?,
            "model.rank" => self.rank = parse(key, value)?,
            "model.insertion" => {
                self.insertion = match value.trim() {
                    "all" => None,
                    "" => Some(Vec::new()),
                    list => Some(list.split(',').map(|l| parse(key, l)).collect::<Result<_>>()?),
                }
            }
            "model.adapter_kind" => self.adapter_kind = AdapterKind::parse(value)?,
            "model.per_layer_routing" => self.per_layer_routing = parse(key, value)?,
            "model.reg_level" => self.reg_level = RegLevel::parse(value)?,
            "model.min_rank_ratio" => self.min_rank_ratio = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.optimizer" => self.train.optimizer = OptimizerKind::parse(value)?,
            "train.freeze_backbone" => self.train.freeze_backbone = parse(key, value)?,
            "routing.tau" => self.train.routing.tau = parse(key, value)?,
            "routing.theta" => self.train.routing.theta = parse(key, value)?,
            "objective.lambda" => self.train.objective.lambda = parse(key, value)?,
            "objective.rho" => self.train.objective.rho = parse(key, value)?,
            "pretrain.epochs" => self.pretrain.epochs = parse(key, value)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(key, value)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, value)?,
            other => return Err(Error::config(format!("unknown setting {other:?}"))),
        }
        Ok(())
    }

    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = RunConfig::default();
        for (k, v) in entries {
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model_config(crate::graph::DEGREE_BUCKETS, 1).validate()?;
        if self.pretrain.epochs > 0 && self.pretrain.batch_size == 0 {
            return Err(Error::config("pretraining batch size must be at least 1"));
        }
        if !(self.pretrain.lr >= 0.0 && self.pretrain.lr.is_finite()) {
            return Err(Error::config(
                "pretraining learning rate must be finite and non-negative",
            ));
        }
        Ok(())
    }

    /// Entries that decide the pretrained backbone.
    fn pretrain_key(&self) -> String {
        self.entries()
            .into_iter()
            .filter(|(k, _)| k == "seed" || k == "model.d_hidden" || k == "model.depth" || k.starts_with("pretrain."))
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// SHA-256 over the dataset files, each prefixed by its name.
pub fn dataset_fingerprint(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for f in DATASET_FILES {
        let path = dir.join(f);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(f.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub config: RunConfig,
    pub version: String,
    pub data_dir: PathBuf,
    pub dataset_fingerprint: String,
    pub started: u64,
    pub finished: u64,
}

impl RunManifest {
    pub fn new(config: RunConfig, data_dir: &Path) -> Result<Self> {
        Ok(RunManifest {
            config,
            version: VERSION.to_string(),
            data_dir: data_dir.to_path_buf(),
            dataset_fingerprint: dataset_fingerprint(data_dir)?,
            started: unix_now(),
            finished: 0,
        })
    }

    pub fn finish(&mut self) {
        self.finished = unix_now();
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "version={}\ndata={}\ndataset_sha256={}\n",
            self.version,
            self.data_dir.display(),
            self.dataset_fingerprint
        );
        for (k, v) in self.config.entries() {
            s.push_str(&format!("{k}={v}\n"));
        }
        s.push_str(&format!(
            "started_unix={}\nfinished_unix={}\n",
            self.started, self.finished
        ));
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut meta = HashMap::new();
        let mut config = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("manifest line {}: expected key=value", i + 1)))?;
            match k {
                "version" | "data" | "dataset_sha256" | "started_unix" | "finished_unix" => {
                    meta.insert(k, v);
                }
                _ => config.push((k, v)),
            }
        }
        let get = |k: &str| {
            meta.get(k)
                .copied()
                .ok_or_else(|| Error::config(format!("manifest lacks {k}")))
        };
        Ok(RunManifest {
            config: RunConfig::from_entries(config)?,
            version: get("version")?.to_string(),
            data_dir: PathBuf::from(get("data")?),
            dataset_fingerprint: get("dataset_sha256")?.to_string(),
            started: meta.get("started_unix").and_then(|s| s.parse().ok()).unwrap_or(0),
            finished: meta.get("finished_unix").and_then(|s| s.parse().ok()).unwrap_or(0),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub model: Model,
    pub rows: Vec<MetricsRow>,
    pub eval: EvalResult,
}

impl RunOutput {
    pub fn routing(&self) -> &[RoutingOutcome] {
        &self.eval.routing
    }

    pub fn relation_norm(&self) -> f64 {
        self.model
            .relations
            .iter()
            .map(|r| r.scores.sq_norm())
            .sum::<f64>()
            .sqrt()
    }
}

/// Builds a model for `data`, pretrains its backbone unless a pretrained one
/// is supplied, trains it and evaluates the held-out split.
pub fn run_training(cfg: &RunConfig, data: &Dataset, pretrained: Option<&Backbone>) -> Result<RunOutput> {
    cfg.validate()?;
    let d_in = data.graphs[0].features().cols();
    let mut model = Model::new(cfg.model_config(d_in, data.num_tasks()), cfg.seed)?;
    match pretrained {
        Some(b) => {
            if b.d_in() != d_in || b.d_hidden() != cfg.d_hidden || b.depth() != cfg.depth {
                return Err(Error::contract("pretrained backbone does not fit the configuration"));
            }
            model.backbone = b.clone();
        }
        None => {
            if cfg.pretrain.epochs > 0 {
                pretrain_backbone(&mut model.backbone, data.train(), &cfg.pretrain)?;
            }
        }
    }
    let planted = data.meta.cluster_map.as_deref();
    let rows = train(&mut model, data.train(), data.test(), planted, &cfg.train)?;
    let held_out = if data.test().is_empty() {
        data.train()
    } else {
        data.test()
    };
    let eval = evaluate(&model, held_out, &cfg.train.routing, cfg.train.batch_size, planted)?;
    Ok(RunOutput { model, rows, eval })
}

pub fn routing_csv(outcomes: &[RoutingOutcome]) -> String {
    match outcomes {
        [] => "task_id,adapter_id,weight,active\n".to_string(),
        [one] => one.to_csv(),
        many => {
            let mut s = String::from("layer_slot,task_id,adapter_id,weight,active\n");
            for (i, o) in many.iter().enumerate() {
                for line in o.to_csv().lines().skip(1) {
                    s.push_str(&format!("{i},{line}\n"));
                }
            }
            s
        }
    }
}

pub fn eval_csv(e: &EvalResult) -> String {
    format!("{EVAL_HEADER}\n{}\n", e.to_csv_line())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv`, `alpha.csv`, `eval.csv`, `manifest.txt` and the
/// `checkpoint/` directory under `out`.
pub fn write_run(out: &Path, run: &RunOutput, manifest: &RunManifest) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("metrics.csv"), &metrics_csv(&run.rows))?;
    write(&out.join("alpha.csv"), &routing_csv(run.routing()))?;
    write(&out.join("eval.csv"), &eval_csv(&run.eval))?;
    let t = &manifest.config.train;
    save_checkpoint(
        &out.join("checkpoint"),
        &run.model,
        &[
            ("routing.tau".into(), t.routing.tau.to_string()),
            ("routing.theta".into(), t.routing.theta.to_string()),
            ("train.batch_size".into(), t.batch_size.to_string()),
        ],
    )?;
    write(&out.join("manifest.txt"), &manifest.to_text())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridAxis {
    /// As written by the caller, used as the column name.
    pub name: String,
    pub values: Vec<String>,
}

/// Parses `name=v1,v2|name2=...` specs (one or more strings) into at most
/// two axes. Every value is checked against a default configuration.
pub fn parse_grid(specs: &[String]) -> Result<Vec<GridAxis>> {
    let mut axes: Vec<GridAxis> = Vec::new();
    for part in specs.iter().flat_map(|s| s.split('|')) {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (name, values) = part
            .split_once('=')
            .ok_or_else(|| Error::config(format!("grid axis {part:?} is not name=v1,v2,...")))?;
        let name = name.trim().to_string();
        if canonical_key(&name) == "seed" {
            return Err(Error::config("seeds are set with --seeds, not on the grid"));
        }
        if axes.iter().any(|a| canonical_key(&a.name) == canonical_key(&name)) {
            return Err(Error::config(format!("grid axis {name} given twice")));
        }
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
        if values.iter().any(String::is_empty) {
            return Err(Error::config(format!("grid axis {name} has an empty value")));
        }
        let mut probe = RunConfig::default();
        for v in &values {
            probe.set(&name, v)?;
            probe.validate()?;
        }
        axes.push(GridAxis { name, values });
    }
    if axes.is_empty() {
        return Err(Error::config("the grid needs at least one axis"));
    }
    if axes.len() > MAX_GRID_AXES {
        return Err(Error::config(format!(
            "a grid has at most {MAX_GRID_AXES} axes, got {}",
            axes.len()
        )));
    }
    Ok(axes)
}

/// Grid points in lexicographic order of value positions, first axis slowest.
pub fn grid_points(axes: &[GridAxis]) -> Vec<Vec<String>> {
    let mut points = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(v.clone());
                    q
                })
            })
            .collect();
    }
    points
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub values: Vec<String>,
    pub seed: u64,
    pub last: MetricsRow,
    pub relation_norm: f64,
}

/// Trains every grid point from the same initialization for each seed.
/// `progress` is called after each finished run.
pub fn sweep(
    base: &RunConfig,
    axes: &[GridAxis],
    seeds: &[u64],
    data: &Dataset,
    mut progress: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(Error::config("a sweep needs at least one seed"));
    }
    let mut backbones: BTreeMap<String, Backbone> = BTreeMap::new();
    let mut rows = Vec::new();
    for point in grid_points(axes) {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.set("seed", &seed.to_string())?;
            for (axis, v) in axes.iter().zip(&point) {
                cfg.set(&axis.name, v)?;
            }
            cfg.validate()?;
            let key = cfg.pretrain_key();
            if cfg.pretrain.epochs > 0 && !backbones.contains_key(&key) {
                let d_in = data.graphs[0].features().cols();
                let mut model = Model::new(cfg.model_config(d_in, data.num_tasks()), cfg.seed)?;
                pretrain_backbone(&mut model.backbone, data.train(), &cfg.pretrain)?;
                backbones.insert(key.clone(), model.backbone);
            }
            let run = run_training(&cfg, data, backbones.get(&key))?;
            let last = run
                .rows
                .last()
                .cloned()
                .ok_or_else(|| Error::State("run produced no epochs".into()))?;
            let row = SweepRow {
                values: point.clone(),
                seed,
                last,
                relation_norm: run.relation_norm(),
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn sweep_csv(axes: &[GridAxis], rows: &[SweepRow]) -> String {
    let mut header: Vec<String> = axes.iter().map(|a| a.name.clone()).collect();
    header.push("seed".into());
    header.push(METRICS_HEADER.to_string());
    header.push("compose_ops".into());
    header.push("relation_norm".into());
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let mut fields = r.values.clone();
        fields.push(r.seed.to_string());
        fields.extend(r.last.csv_fields());
        fields.push(r.last.compose_ops.to_string());
        fields.push(r.relation_norm.to_string());
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    s
}
