//! Trains on the reference synthetic benchmark and prints the metrics stream.
//!
//! Usage: cargo run --release --example reference_run [key=value ...]
//! Keys: epochs, pretrain, tau, theta, lambda, rho, lr, rank, adapters, seed, data_seed.

use std::collections::HashMap;

use graphprior::model::{Model, ModelConfig};
use graphprior::routing::RoutingConfig;
use graphprior::synth::{generate, SynthSpec};
use graphprior::train::{metrics_csv, pretrain_backbone, train, PretrainConfig, TrainConfig};
use graphprior::ObjectiveConfig;

fn main() -> graphprior::Result<()> {
    let args: HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: f64| args.get(k).map_or(d, |v| v.parse().expect("number"));

    let data = generate(&SynthSpec {
        seed: get("data_seed", 7.0) as u64,
        ..SynthSpec::default()
    })?;
    let seed = get("seed", 7.0) as u64;
    let mut model = Model::new(
        ModelConfig {
            rank: get("rank", 4.0) as usize,
            adapters: get("adapters", 3.0) as usize,
            ..ModelConfig::default()
        },
        seed,
    )?;
    let start = std::time::Instant::now();
    let pre = pretrain_backbone(
        &mut model.backbone,
        data.train(),
        &PretrainConfig {
            epochs: get("pretrain", 20.0) as usize,
            seed,
            ..PretrainConfig::default()
        },
    )?;
    eprintln!("pretext loss {:?} in {:?}", pre.last(), start.elapsed());
    let cfg = TrainConfig {
        epochs: get("epochs", 60.0) as usize,
        lr: get("lr", 1e-3),
        seed,
        routing: RoutingConfig::new(get("tau", 0.1), get("theta", 0.0))?,
        objective: ObjectiveConfig {
            lambda: get("lambda", 0.1),
            rho: get("rho", 1e-3),
        },
        ..TrainConfig::default()
    };
    let rows = train(
        &mut model,
        data.train(),
        data.test(),
        data.meta.cluster_map.as_deref(),
        &cfg,
    )?;
    print!("{}", metrics_csv(&rows));
    eprintln!("total {:?}", start.elapsed());
    let alpha = model.routing(&cfg.routing)?;
    eprint!("{}", alpha[0].to_csv());
    Ok(())
}
