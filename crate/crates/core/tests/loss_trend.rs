//! Training loss falls on the planted benchmark across seeds.

use graphprior::dataset::Dataset;
use graphprior::harness::{run_training, RunConfig};
use graphprior::synth::{generate, SynthSpec};

/// Seeds (out of `seeds`) whose last-epoch training loss is below the first.
fn falling_runs(data: &Dataset, base: &RunConfig, seeds: u64) -> u64 {
    (0..seeds)
        .filter(|&seed| {
            let mut cfg = base.clone();
            cfg.set("seed", &seed.to_string()).unwrap();
            let run = run_training(&cfg, data, None).unwrap();
            let (first, last) = (run.rows.first().unwrap(), run.rows.last().unwrap());
            last.l_total < first.l_total
        })
        .count() as u64
}

#[test]
fn loss_falls_on_a_small_benchmark() {
    let data = generate(&SynthSpec {
        num_graphs: 120,
        ..SynthSpec::default()
    })
    .unwrap();
    let mut cfg = RunConfig::default();
    cfg.set("epochs", "10").unwrap();
    cfg.set("model.d_hidden", "16").unwrap();
    cfg.set("pretrain.epochs", "5").unwrap();
    let falling = falling_runs(&data, &cfg, 10);
    assert!(falling >= 9, "loss fell in {falling} of 10 runs");
}

/// The full-scale version: 100 seeds of 50 epochs on the reference benchmark.
#[test]
#[ignore = "about an hour on one core"]
fn loss_falls_on_the_reference_benchmark() {
    let data = generate(&SynthSpec::default()).unwrap();
    let mut cfg = RunConfig::default();
    cfg.set("epochs", "50").unwrap();
    let falling = falling_runs(&data, &cfg, 100);
    assert!(falling >= 95, "loss fell in {falling} of 100 runs");
}
