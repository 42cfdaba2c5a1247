//! Mini-batch training of the composed objective, backbone pretraining and
//! held-out evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::backbone::{glorot_uniform, Backbone};
use crate::error::{Error, Result};
use crate::graph::{make_batch, mean_pool, Graph, GraphBatch};
use crate::metrics::{average_precision, awa, ApReport};
use crate::model::{Model, OpCount};
use crate::objectives::{relation_reg, task_loss, total_loss, LossParts, LossReport, ObjectiveConfig};
use crate::optim::{Optimizer, OptimizerKind};
use crate::routing::{RoutingConfig, RoutingOutcome};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub freeze_backbone: bool,
    pub routing: RoutingConfig,
    pub objective: ObjectiveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 32,
            lr: 1e-3,
            seed: 7,
            optimizer: OptimizerKind::Adam,
            freeze_backbone: true,
            routing: RoutingConfig::default(),
            objective: ObjectiveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        self.routing.validate()?;
        self.objective.validate()
    }
}

/// Settings of the backbone pretext pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 1e-2,
            seed: 7,
        }
    }
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub l_task: f64,
    pub l_reg: f64,
    pub l_rel: f64,
    pub l_total: f64,
    pub ap_mean: Option<f64>,
    pub awa: Option<f64>,
    pub active_adapters_mean: f64,
    pub trainable_params: usize,
    pub epoch_ms: u64,
    /// Composition operations of one pass over the evaluation split.
    pub compose_ops: u64,
}

pub const METRICS_HEADER: &str =
    "epoch,l_task,l_reg,l_rel,l_total,ap_mean,awa,active_adapters_mean,trainable_params,epoch_ms";

fn opt_field(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl MetricsRow {
    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            self.l_task.to_string(),
            self.l_reg.to_string(),
            self.l_rel.to_string(),
            self.l_total.to_string(),
            opt_field(self.ap_mean),
            opt_field(self.awa),
            self.active_adapters_mean.to_string(),
            self.trainable_params.to_string(),
            self.epoch_ms.to_string(),
        ]
    }

    pub fn to_csv_line(&self) -> String {
        self.csv_fields().join(",")
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

/// Mean active adapters per task, over every relation matrix.
pub fn active_adapters_mean(routing: &[RoutingOutcome]) -> f64 {
    let rows: usize = routing.iter().map(|o| o.tasks()).sum();
    if rows == 0 {
        return 0.0;
    }
    routing.iter().map(|o| o.active_count()).sum::<usize>() as f64 / rows as f64
}

fn batches<'a>(graphs: &'a [Graph], order: &[usize], size: usize) -> Vec<Vec<&'a Graph>> {
    order
        .chunks(size)
        .map(|c| c.iter().map(|i| &graphs[*i]).collect())
        .collect()
}

pub fn prepare_batches(graphs: &[Graph], size: usize) -> Result<Vec<GraphBatch>> {
    if size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    graphs.chunks(size).map(make_batch).collect()
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    /// `[graphs x tasks]` logits.
    pub logits: Tensor,
    pub ap: Option<ApReport>,
    pub awa: Option<f64>,
    pub routing: Vec<RoutingOutcome>,
    pub active_adapters_mean: f64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub ops: OpCount,
}

impl EvalResult {
    pub fn ap_mean(&self) -> Option<f64> {
        self.ap.as_ref().map(|a| a.mean)
    }
}

pub const EVAL_HEADER: &str =
    "ap_mean,awa,active_adapters_mean,trainable_params,total_params,compose_ops,adapter_ops,backbone_ops";

impl EvalResult {
    pub fn to_csv_line(&self) -> String {
        [
            opt_field(self.ap_mean()),
            opt_field(self.awa),
            self.active_adapters_mean.to_string(),
            self.trainable_params.to_string(),
            self.total_params.to_string(),
            self.ops.composition().to_string(),
            self.ops.adapter.to_string(),
            self.ops.backbone.to_string(),
        ]
        .join(",")
    }
}

/// Scores `graphs` in fixed-size batches. AP is `None` when no task has both
/// classes among the valid labels; AWA needs a planted cluster map.
pub fn evaluate(
    model: &Model,
    graphs: &[Graph],
    routing: &RoutingConfig,
    batch_size: usize,
    planted: Option<&[usize]>,
) -> Result<EvalResult> {
    if graphs.is_empty() {
        return Err(Error::contract("nothing to evaluate"));
    }
    let batches = prepare_batches(graphs, batch_size)?;
    evaluate_batches(model, &batches, routing, planted)
}

pub fn evaluate_batches(
    model: &Model,
    batches: &[GraphBatch],
    routing: &RoutingConfig,
    planted: Option<&[usize]>,
) -> Result<EvalResult> {
    let tasks = model.config.tasks;
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    let mut mask = Vec::new();
    let mut ops = OpCount::default();
    for b in batches {
        let (l, o) = model.predict(b, routing)?;
        logits.extend_from_slice(l.data());
        labels.extend_from_slice(&b.y);
        mask.extend_from_slice(&b.mask);
        ops.add(&o);
    }
    let rows = logits.len() / tasks;
    let logits = Tensor::from_vec(rows, tasks, logits)?;
    let ap = match average_precision(&logits, &labels, &mask) {
        Ok(r) => Some(r),
        Err(Error::Contract(_)) => None,
        Err(e) => return Err(e),
    };
    let outcomes = model.routing(routing)?;
    let awa = match (planted, outcomes.first()) {
        (Some(map), Some(o)) => Some(awa(o, map)?),
        _ => None,
    };
    let (trainable_params, total_params) = model.count_params();
    Ok(EvalResult {
        logits,
        ap,
        awa,
        active_adapters_mean: active_adapters_mean(&outcomes),
        routing: outcomes,
        trainable_params,
        total_params,
        ops,
    })
}

fn diverged(epoch: usize, step: usize, e: Error, last: &Option<LossReport>) -> Error {
    match e {
        Error::Numeric(cause) => Error::Diverged {
            epoch,
            step,
            cause,
            last_finite: last.clone().map(Box::new),
        },
        other => other,
    }
}

/// Trains `model` in place on `train`, scoring `eval` after every epoch.
/// Gradient flows into every parameter that requires grad; with
/// `freeze_backbone` the backbone weights are left bitwise unchanged.
pub fn train(
    model: &mut Model,
    train: &[Graph],
    eval: &[Graph],
    planted: Option<&[usize]>,
    cfg: &TrainConfig,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::contract("no training graphs"));
    }
    model.freeze_backbone(cfg.freeze_backbone);
    let eval_batches = if eval.is_empty() {
        Vec::new()
    } else {
        prepare_batches(eval, cfg.batch_size)?
    };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut last: Option<LossReport> = None;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut steps = 0usize;
        for (step, group) in batches(train, &order, cfg.batch_size).into_iter().enumerate() {
            let batch = make_batch(&group)?;
            if !batch.mask.iter().any(|m| *m) {
                continue;
            }
            let report = train_step(model, &batch, cfg, &mut opt).map_err(|e| diverged(epoch, step, e, &last))?;
            sums[0] += report.l_task;
            sums[1] += report.l_reg;
            sums[2] += report.l_rel;
            sums[3] += report.l_total;
            steps += 1;
            last = Some(report);
        }
        let epoch_ms = start.elapsed().as_millis() as u64;
        let n = steps.max(1) as f64;
        let (ap_mean, awa, ops) = if eval_batches.is_empty() {
            (None, None, OpCount::default())
        } else {
            let r = evaluate_batches(model, &eval_batches, &cfg.routing, planted)?;
            (r.ap_mean(), r.awa, r.ops)
        };
        let outcomes = model.routing(&cfg.routing)?;
        rows.push(MetricsRow {
            epoch,
            l_task: sums[0] / n,
            l_reg: sums[1] / n,
            l_rel: sums[2] / n,
            l_total: sums[3] / n,
            ap_mean,
            awa,
            active_adapters_mean: active_adapters_mean(&outcomes),
            trainable_params: model.count_params().0,
            epoch_ms,
            compose_ops: ops.composition(),
        });
    }
    Ok(rows)
}

/// One forward/backward/update on a batch; returns the step's loss terms.
pub fn train_step(model: &mut Model, batch: &GraphBatch, cfg: &TrainConfig, opt: &mut Optimizer) -> Result<LossReport> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, batch, &cfg.routing)?;
    let task = task_loss(&mut tape, out.logits, batch.y.clone(), batch.mask.clone())?;
    let mut rel = None;
    for r in &out.params.relations {
        let term = relation_reg(&mut tape, *r)?;
        rel = Some(match rel {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let (loss, report) = total_loss(
        &mut tape,
        LossParts {
            task,
            reg: out.reg,
            rel,
        },
        &cfg.objective,
    )?;
    tape.backward(loss)?;
    model.store_grads(&tape, &out.params)?;
    opt.step(&mut model.parameters_mut())?;
    Ok(report)
}

/// Fits the backbone on a pretext objective: a single scorer shared by all
/// tasks reads the pooled final state and is trained on every valid label.
/// The shared scorer is discarded afterwards. Returns the mean loss per epoch.
pub fn pretrain_backbone(backbone: &mut Backbone, train: &[Graph], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::contract("no pretraining graphs"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let tasks = train[0].num_tasks();
    let was_frozen = backbone.frozen();
    backbone.set_frozen(false);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut head_w = glorot_uniform(backbone.d_hidden(), 1, &mut rng).with_requires_grad(true);
    let mut head_b = Tensor::zeros(1, 1).with_requires_grad(true);
    let mut opt = Optimizer::adam(cfg.lr)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for group in batches(train, &order, cfg.batch_size) {
            let batch = make_batch(&group)?;
            if !batch.mask.iter().any(|m| *m) {
                continue;
            }
            let mut tape = Tape::new();
            let weights = backbone.register(&mut tape);
            let w = tape.leaf(&head_w);
            let b = tape.leaf(&head_b);
            let a_hat = tape.sparse_constant(batch.a_hat.clone());
            let x = tape.constant(batch.x.clone());
            let h = backbone.forward_plain(&mut tape, &weights, a_hat, x)?;
            let pooled = mean_pool(&mut tape, h, &batch)?;
            let lin = tape.matmul(pooled, w)?;
            let score = tape.add_bias(lin, b)?;
            let cols = vec![score; tasks];
            let logits = tape.concat_cols(&cols)?;
            let loss = task_loss(&mut tape, logits, batch.y.clone(), batch.mask.clone())?;
            total += tape.value(loss).item()?;
            steps += 1;
            tape.backward(loss)?;
            let mut params: Vec<&mut Tensor> = backbone.layers_mut().iter_mut().map(|l| &mut l.w).collect();
            for (p, v) in params.iter_mut().zip(&weights) {
                tape.store_grad(*v, p)?;
            }
            tape.store_grad(w, &mut head_w)?;
            tape.store_grad(b, &mut head_b)?;
            params.push(&mut head_w);
            params.push(&mut head_b);
            opt.step(&mut params)?;
        }
        losses.push(total / steps.max(1) as f64);
    }
    backbone.set_frozen(was_frozen);
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{generate, SynthSpec};

    fn tiny() -> (Model, crate::dataset::Dataset) {
        let data = generate(&SynthSpec {
            num_graphs: 24,
            n_min: 5,
            n_max: 8,
            num_tasks: 4,
            num_clusters: 2,
            ..SynthSpec::default()
        })
        .unwrap();
        let model = Model::new(
            ModelConfig {
                d_hidden: 8,
                depth: 2,
                tasks: 4,
                adapters: 2,
                rank: 2,
                ..ModelConfig::default()
            },
            5,
        )
        .unwrap();
        (model, data)
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (mut model, data) = tiny();
        let before: Vec<Tensor> = model.parameters().into_iter().cloned().collect();
        let c = TrainConfig { lr: 0.0, ..cfg(2) };
        train(
            &mut model,
            data.train(),
            data.test(),
            data.meta.cluster_map.as_deref(),
            &c,
        )
        .unwrap();
        let after: Vec<Tensor> = model.parameters().into_iter().cloned().collect();
        assert_eq!(before, after);
    }

    #[test]
    fn frozen_backbone_untouched_and_rest_moves() {
        let (mut model, data) = tiny();
        let backbone: Vec<Tensor> = model.backbone.layers().iter().map(|l| l.w.clone()).collect();
        let head = model.head_w.clone();
        train(&mut model, data.train(), data.test(), None, &cfg(2)).unwrap();
        let after: Vec<Tensor> = model.backbone.layers().iter().map(|l| l.w.clone()).collect();
        assert_eq!(backbone, after);
        assert_ne!(head, model.head_w);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let run = || {
            let (mut model, data) = tiny();
            let rows = train(
                &mut model,
                data.train(),
                data.test(),
                data.meta.cluster_map.as_deref(),
                &cfg(3),
            )
            .unwrap();
            (rows, model.parameters().into_iter().cloned().collect::<Vec<_>>())
        };
        let (mut a, pa) = run();
        let (mut b, pb) = run();
        for r in a.iter_mut().chain(b.iter_mut()) {
            r.epoch_ms = 0;
        }
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn rejects_invalid_config() {
        let (mut model, data) = tiny();
        assert!(train(&mut model, data.train(), data.test(), None, &cfg(0)).is_err());
        let c = TrainConfig {
            batch_size: 0,
            ..cfg(1)
        };
        assert!(train(&mut model, data.train(), data.test(), None, &c).is_err());
        assert!(train(&mut model, &[], data.test(), None, &cfg(1)).is_err());
    }

    #[test]
    fn pretraining_reduces_pretext_loss() {
        let (mut model, data) = tiny();
        let losses = pretrain_backbone(
            &mut model.backbone,
            data.train(),
            &PretrainConfig {
                epochs: 15,
                batch_size: 8,
                ..PretrainConfig::default()
            },
        )
        .unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn metrics_csv_layout() {
        let row = MetricsRow {
            epoch: 1,
            l_task: 0.5,
            l_reg: 0.0,
            l_rel: 0.25,
            l_total: 0.75,
            ap_mean: Some(0.8),
            awa: None,
            active_adapters_mean: 3.0,
            trainable_params: 10,
            epoch_ms: 4,
            compose_ops: 99,
        };
        assert_eq!(
            metrics_csv(&[row]),
            format!("{METRICS_HEADER}\n1,0.5,0,0.25,0.75,0.8,NA,3,10,4\n")
        );
    }
}
