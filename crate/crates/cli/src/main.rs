use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use graphprior::checkpoint::load_checkpoint;
use graphprior::dataset::{load_dataset, save_dataset};
use graphprior::harness::{
    dataset_fingerprint, eval_csv, parse_grid, run_training, sweep, sweep_csv, write_run, RunConfig, RunManifest,
    VERSION,
};
use graphprior::routing::RoutingConfig;
use graphprior::synth::{generate, SynthSpec};
use graphprior::train::evaluate;
use graphprior::{Error, ErrorClass};

#[derive(Parser)]
#[command(
    name = "graphprior",
    version,
    about = "Composable graph adapters with relation-matrix routing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-cluster synthetic dataset.
    Gen(GenArgs),
    /// Train adapters, relation matrix and task heads on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Train every point of a one- or two-axis hyperparameter grid.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 800)]
    graphs: usize,
    #[arg(long, default_value_t = 6)]
    tasks: usize,
    #[arg(long, default_value_t = 3)]
    clusters: usize,
    /// Task-to-cluster map, e.g. 0,1,2,0,1,2 (default: task mod clusters).
    #[arg(long, value_delimiter = ',')]
    cluster_map: Option<Vec<usize>>,
    #[arg(long, default_value_t = 10)]
    n_min: usize,
    #[arg(long, default_value_t = 30)]
    n_max: usize,
    #[arg(long, default_value_t = 0.2)]
    edge_prob: f64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0.1)]
    missing: f64,
    #[arg(long, default_value_t = 0.75)]
    train_fraction: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Overrides on top of the defaults (or a replayed manifest).
#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    adapters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    d_hidden: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    /// Backbone layers followed by adapters: "all" or a list such as 0,2.
    #[arg(long)]
    insertion: Option<String>,
    /// linear or relu
    #[arg(long)]
    adapter_kind: Option<String>,
    /// sgd or adam
    #[arg(long)]
    optimizer: Option<String>,
    /// One relation matrix per insertion layer.
    #[arg(long)]
    per_layer_routing: bool,
    /// Consistency regularizer on pooled (default) or node states.
    #[arg(long)]
    reg_level: Option<String>,
    /// Train the backbone together with the adapters.
    #[arg(long)]
    unfreeze_backbone: bool,
    /// Epochs of backbone pretext pretraining (0 disables it).
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    pretrain_lr: Option<f64>,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) -> graphprior::Result<()> {
        let mut set = |k: &str, v: Option<String>| v.map_or(Ok(()), |v| cfg.set(k, &v));
        set("train.epochs", self.epochs.map(|v| v.to_string()))?;
        set("train.lr", self.lr.map(|v| v.to_string()))?;
        set("routing.tau", self.tau.map(|v| v.to_string()))?;
        set("routing.theta", self.theta.map(|v| v.to_string()))?;
        set("objective.lambda", self.lambda.map(|v| v.to_string()))?;
        set("objective.rho", self.rho.map(|v| v.to_string()))?;
        set("model.rank", self.rank.map(|v| v.to_string()))?;
        set("model.adapters", self.adapters.map(|v| v.to_string()))?;
        set("seed", self.seed.map(|v| v.to_string()))?;
        set("train.batch_size", self.batch_size.map(|v| v.to_string()))?;
        set("model.d_hidden", self.d_hidden.map(|v| v.to_string()))?;
        set("model.depth", self.depth.map(|v| v.to_string()))?;
        set("model.insertion", self.insertion.clone())?;
        set("model.adapter_kind", self.adapter_kind.clone())?;
        set("train.optimizer", self.optimizer.clone())?;
        set("model.reg_level", self.reg_level.clone())?;
        set("pretrain.epochs", self.pretrain_epochs.map(|v| v.to_string()))?;
        set("pretrain.lr", self.pretrain_lr.map(|v| v.to_string()))?;
        if self.per_layer_routing {
            cfg.per_layer_routing = true;
        }
        if self.unfreeze_backbone {
            cfg.train.freeze_backbone = false;
        }
        cfg.validate()
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (taken from the manifest when replaying).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Replay the configuration recorded in a run manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Axes as name=v1,v2,... separated by '|' or given as repeated flags.
    #[arg(long, required = true)]
    grid: Vec<String>,
    /// Seeds run at every grid point.
    #[arg(long, value_delimiter = ',', default_value = "7")]
    seeds: Vec<u64>,
    #[command(flatten)]
    flags: TrainFlags,
}

fn write(path: &Path, text: &str) -> graphprior::Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_gen(a: GenArgs) -> graphprior::Result<()> {
    let spec = SynthSpec {
        num_graphs: a.graphs,
        n_min: a.n_min,
        n_max: a.n_max,
        edge_prob: a.edge_prob,
        num_tasks: a.tasks,
        num_clusters: a.clusters,
        cluster_map: a.cluster_map,
        label_noise: a.noise,
        missing_prob: a.missing,
        train_fraction: a.train_fraction,
        seed: a.seed,
    };
    let data = generate(&spec)?;
    save_dataset(&a.out, &data)?;
    let mut manifest = format!("version={VERSION}\ncommand=gen\nseed={}\n", spec.seed);
    manifest.push_str(&format!(
        "tasks={}\nclusters={}\ngraphs={}\n",
        spec.num_tasks, spec.num_clusters, spec.num_graphs
    ));
    for (k, v) in spec.echo() {
        manifest.push_str(&format!("{k}={v}\n"));
    }
    manifest.push_str(&format!("dataset_sha256={}\n", dataset_fingerprint(&a.out)?));
    write(&a.out.join("manifest.txt"), &manifest)?;
    eprintln!("wrote {} graphs to {}", data.graphs.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> graphprior::Result<()> {
    let (mut cfg, data_dir, expected) = match &a.manifest {
        Some(path) => {
            let m = RunManifest::load(path)?;
            let dir = a.data.clone().unwrap_or(m.data_dir.clone());
            (m.config, dir, Some(m.dataset_fingerprint))
        }
        None => {
            let dir = a
                .data
                .clone()
                .ok_or_else(|| Error::config("--data is required without --manifest"))?;
            (RunConfig::default(), dir, None)
        }
    };
    a.flags.apply(&mut cfg)?;
    let data = load_dataset(&data_dir)?;
    let mut manifest = RunManifest::new(cfg.clone(), &data_dir)?;
    if let Some(fp) = expected {
        if fp != manifest.dataset_fingerprint {
            return Err(Error::integrity(format!(
                "dataset in {} differs from the one recorded in the manifest",
                data_dir.display()
            )));
        }
    }
    let run = run_training(&cfg, &data, None)?;
    manifest.finish();
    write_run(&a.out, &run, &manifest)?;
    if let Some(last) = run.rows.last() {
        eprintln!(
            "epoch {}: l_total {:.4}, held-out AP {}, AWA {}",
            last.epoch,
            last.l_total,
            last.ap_mean.map_or("NA".into(), |v| format!("{v:.4}")),
            last.awa.map_or("NA".into(), |v| format!("{v:.4}")),
        );
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> graphprior::Result<()> {
    let (model, extra) = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    let d_in = data.graphs[0].features().cols();
    if data.num_tasks() != model.config.tasks || d_in != model.config.d_in {
        return Err(Error::integrity(format!(
            "checkpoint expects {} tasks and {} input features, dataset has {} and {}",
            model.config.tasks,
            model.config.d_in,
            data.num_tasks(),
            d_in
        )));
    }
    let stored = |k: &str| -> graphprior::Result<Option<f64>> {
        extra
            .get(k)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::integrity(format!("checkpoint has a bad {k}")))
            })
            .transpose()
    };
    let defaults = RoutingConfig::default();
    let routing = RoutingConfig::new(
        a.tau.or(stored("routing.tau")?).unwrap_or(defaults.tau),
        a.theta.or(stored("routing.theta")?).unwrap_or(defaults.theta),
    )?;
    let batch_size = match a.batch_size {
        Some(b) => b,
        None => stored("train.batch_size")?.map_or(32, |b| b as usize),
    };
    let held_out = if data.test().is_empty() {
        data.train()
    } else {
        data.test()
    };
    let result = evaluate(&model, held_out, &routing, batch_size, data.meta.cluster_map.as_deref())?;
    print!("{}", eval_csv(&result));
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> graphprior::Result<()> {
    let axes = parse_grid(&a.grid)?;
    let mut base = RunConfig::default();
    a.flags.apply(&mut base)?;
    let data = load_dataset(&a.data)?;
    let manifest = RunManifest::new(base.clone(), &a.data)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let rows = sweep(&base, &axes, &a.seeds, &data, |r| {
        eprintln!(
            "{} seed {}: AP {} AWA {}",
            r.values.join(" "),
            r.seed,
            r.last.ap_mean.map_or("NA".into(), |v| format!("{v:.4}")),
            r.last.awa.map_or("NA".into(), |v| format!("{v:.4}")),
        )
    })?;
    write(&a.out.join("sweep.csv"), &sweep_csv(&axes, &rows))?;
    let mut text = manifest.to_text();
    for axis in &axes {
        text.push_str(&format!("grid.{}={}\n", axis.name, axis.values.join(",")));
    }
    let seeds: Vec<String> = a.seeds.iter().map(|s| s.to_string()).collect();
    text.push_str(&format!("grid.seeds={}\n", seeds.join(",")));
    write(&a.out.join("manifest.txt"), &text)
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Usage => 2,
        ErrorClass::File => 3,
        ErrorClass::Integrity => 4,
        ErrorClass::Numeric => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
