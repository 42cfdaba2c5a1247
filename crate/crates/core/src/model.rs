//! The full model: frozen-able GCN backbone, adapter bank, relation-matrix
//! routing and one linear scorer per task.
//!
//! Forward pass: the backbone runs layer by layer. After every insertion
//! layer each task gets its own composed state `z''(t) = Σ_i α_ti z'_i`, so
//! from the first insertion layer on the pass carries one node-state stream
//! per task (tasks whose routing collapses to the same single adapter share a
//! stream). Each task head reads the mean-pooled final state of its stream.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{adapter_forward, check_rank, AdapterBank, AdapterKind};
use crate::autodiff::{Tape, Var};
use crate::backbone::{glorot_uniform, layer_forward, Backbone};
use crate::error::{Error, Result};
use crate::graph::{mean_pool, GraphBatch};
use crate::objectives::{beta_from_alpha, consistency_reg_subset, CoactivationWeights};
use crate::routing::{route, route_on_tape, RelationMatrix, RoutingConfig, RoutingOutcome};
use crate::tensor::Tensor;

/// Where the consistency regularizer compares adapter outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RegLevel {
    /// Mean-pooled per-graph representations.
    #[default]
    Pooled,
    /// Raw node states.
    Nodes,
}

impl RegLevel {
    pub fn name(self) -> &'static str {
        match self {
            RegLevel::Pooled => "pooled",
            RegLevel::Nodes => "nodes",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(RegLevel::Pooled),
            "nodes" => Ok(RegLevel::Nodes),
            other => Err(Error::config(format!("unknown regularizer level {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub depth: usize,
    pub tasks: usize,
    /// Adapters per insertion layer (`k`).
    pub adapters: usize,
    pub rank: usize,
    /// Backbone layers followed by an adapter bank; `None` means every layer.
    pub insertion: Option<Vec<usize>>,
    pub adapter_kind: AdapterKind,
    /// One relation matrix per insertion layer instead of a shared one.
    pub per_layer_routing: bool,
    pub reg_level: RegLevel,
    /// Rank must satisfy `rank * min_rank_ratio <= d_hidden`.
    pub min_rank_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: crate::graph::DEGREE_BUCKETS,
            d_hidden: 64,
            depth: 3,
            tasks: 6,
            adapters: 3,
            rank: 4,
            insertion: None,
            adapter_kind: AdapterKind::Linear,
            per_layer_routing: false,
            reg_level: RegLevel::Pooled,
            min_rank_ratio: 4,
        }
    }
}

impl ModelConfig {
    pub fn insertion_layers(&self) -> Vec<usize> {
        match &self.insertion {
            Some(layers) => {
                let mut l = layers.clone();
                l.sort_unstable();
                l.dedup();
                l
            }
            None => (0..self.depth).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.d_in == 0 || self.d_hidden == 0 {
            return Err(Error::config("depth and widths must be positive"));
        }
        if self.tasks == 0 {
            return Err(Error::config("at least one task is required"));
        }
        if self.adapters == 0 {
            return Err(Error::config("at least one adapter is required"));
        }
        if let Some(bad) = self.insertion_layers().iter().find(|l| **l >= self.depth) {
            return Err(Error::config(format!(
                "insertion layer {bad} outside a depth-{} backbone",
                self.depth
            )));
        }
        check_rank(self.d_hidden, self.rank, self.min_rank_ratio)
    }

    pub fn relation_count(&self) -> usize {
        let n = self.insertion_layers().len();
        if self.per_layer_routing {
            n
        } else {
            n.min(1)
        }
    }
}

/// Deterministic operation counts of one forward pass (multiply-adds).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCount {
    /// Low-rank adapter evaluations, `2 N d r` each.
    pub adapter: u64,
    /// Weighted sums of adapter outputs, `N d` per participating adapter.
    pub compose: u64,
    /// Backbone propagation `Â (H W)`.
    pub backbone: u64,
}

impl OpCount {
    /// Work attributable to adapter composition.
    pub fn composition(&self) -> u64 {
        self.adapter + self.compose
    }

    pub fn add(&mut self, other: &OpCount) {
        self.adapter += other.adapter;
        self.compose += other.compose;
        self.backbone += other.backbone;
    }
}

/// Tape handles of every parameter, in [`Model::parameters`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub all: Vec<Var>,
    backbone: Vec<Var>,
    adapters: Vec<Vec<crate::adapter::AdapterVars>>,
    pub relations: Vec<Var>,
    head_w: Var,
    head_b: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub params: ParamVars,
    /// `[graphs x tasks]` logits.
    pub logits: Var,
    /// Consistency regularizer, averaged over insertion layers; `None` when
    /// no two coupled adapters were evaluated on a shared input.
    pub reg: Option<Var>,
    pub routing: Vec<RoutingOutcome>,
    /// Final node states per task.
    pub task_states: Vec<Var>,
    pub ops: OpCount,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub bank: AdapterBank,
    pub relations: Vec<RelationMatrix>,
    /// `[d_hidden x tasks]`; column `t` scores task `t`.
    pub head_w: Tensor,
    /// `[1 x tasks]`.
    pub head_b: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(config.d_in, config.d_hidden, config.depth, &mut rng)?;
        let bank = AdapterBank::new(
            &config.insertion_layers(),
            config.adapters,
            config.d_hidden,
            config.rank,
            config.adapter_kind,
            &mut rng,
        )?;
        let relations = (0..config.relation_count())
            .map(|_| RelationMatrix::zeros(config.tasks, config.adapters))
            .collect();
        let head_w = glorot_uniform(config.d_hidden, config.tasks, &mut rng).with_requires_grad(true);
        let head_b = Tensor::zeros(1, config.tasks).with_requires_grad(true);
        Ok(Model {
            config,
            backbone,
            bank,
            relations,
            head_w,
            head_b,
        })
    }

    /// Every parameter tensor: backbone layers, adapters (layer-major, `U`
    /// before `V`), relation matrices, head weight, head bias.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.backbone.layers().iter().map(|l| &l.w).collect();
        for a in self.bank.iter() {
            p.push(&a.u);
            p.push(&a.v);
        }
        p.extend(self.relations.iter().map(|r| &r.scores));
        p.push(&self.head_w);
        p.push(&self.head_b);
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self.backbone.layers_mut().iter_mut().map(|l| &mut l.w).collect();
        for a in self.bank.iter_mut() {
            p.push(&mut a.u);
            p.push(&mut a.v);
        }
        p.extend(self.relations.iter_mut().map(|r| &mut r.scores));
        p.push(&mut self.head_w);
        p.push(&mut self.head_b);
        p
    }

    /// `(trainable, total)` parameter counts.
    pub fn count_params(&self) -> (usize, usize) {
        let total: usize = self.parameters().iter().map(|t| t.len()).sum();
        let trainable = self
            .parameters()
            .iter()
            .filter(|t| t.requires_grad())
            .map(|t| t.len())
            .sum();
        (trainable, total)
    }

    pub fn freeze_backbone(&mut self, frozen: bool) {
        self.backbone.set_frozen(frozen);
    }

    fn relation_index(&self, slot: usize) -> usize {
        if self.config.per_layer_routing {
            slot
        } else {
            0
        }
    }

    /// Routing outcome of every relation matrix.
    pub fn routing(&self, cfg: &RoutingConfig) -> Result<Vec<RoutingOutcome>> {
        self.relations.iter().map(|r| route(r, cfg)).collect()
    }

    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let backbone = self.backbone.register(tape);
        let adapters = self.bank.register(tape);
        let relations: Vec<Var> = self.relations.iter().map(|r| tape.leaf(&r.scores)).collect();
        let head_w = tape.leaf(&self.head_w);
        let head_b = tape.leaf(&self.head_b);
        let mut all = backbone.clone();
        for slot in &adapters {
            for a in slot {
                all.push(a.u);
                all.push(a.v);
            }
        }
        all.extend(&relations);
        all.push(head_w);
        all.push(head_b);
        ParamVars {
            all,
            backbone,
            adapters,
            relations,
            head_w,
            head_b,
        }
    }

    /// Copies parameter gradients from a differentiated tape.
    pub fn store_grads(&mut self, tape: &Tape, vars: &ParamVars) -> Result<()> {
        for (p, v) in self.parameters_mut().into_iter().zip(&vars.all) {
            tape.store_grad(*v, p)?;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, batch: &GraphBatch, routing: &RoutingConfig) -> Result<ForwardOutput> {
        self.forward_with_beta(tape, batch, routing, None)
    }

    /// Co-activation weights of every relation matrix under `routing`.
    pub fn coactivation(&self, routing: &RoutingConfig) -> Result<Vec<CoactivationWeights>> {
        Ok(self.routing(routing)?.iter().map(beta_from_alpha).collect())
    }

    /// [`Model::forward`] with the regularizer's co-activation weights fixed
    /// to `beta` (one entry per relation matrix) instead of derived from the
    /// current routing. Used to differentiate numerically with β held constant.
    pub fn forward_with_beta(
        &self,
        tape: &mut Tape,
        batch: &GraphBatch,
        routing: &RoutingConfig,
        beta: Option<&[CoactivationWeights]>,
    ) -> Result<ForwardOutput> {
        if let Some(b) = beta {
            if b.len() != self.relations.len() {
                return Err(Error::contract(format!(
                    "{} co-activation matrices for {} relation matrices",
                    b.len(),
                    self.relations.len()
                )));
            }
        }
        if batch.x.cols() != self.config.d_in {
            return Err(Error::Dimension {
                op: "model input",
                lhs: batch.x.shape(),
                rhs: (batch.x.rows(), self.config.d_in),
            });
        }
        if batch.num_tasks != self.config.tasks {
            return Err(Error::contract(format!(
                "batch has {} tasks, model has {}",
                batch.num_tasks, self.config.tasks
            )));
        }
        let params = self.register(tape);
        let a_hat = tape.sparse_constant(batch.a_hat.clone());
        let x = tape.constant(batch.x.clone());

        let mut alphas = Vec::with_capacity(params.relations.len());
        let mut outcomes = Vec::with_capacity(params.relations.len());
        for r in &params.relations {
            let (a, o) = route_on_tape(tape, *r, routing)?;
            alphas.push(a);
            outcomes.push(o);
        }

        let n = batch.num_nodes() as u64;
        let d = self.config.d_hidden as u64;
        let rank = self.bank.rank() as u64;
        let tasks = self.config.tasks;
        let mut ops = OpCount::default();
        let mut streams = vec![x];
        let mut task_stream = vec![0usize; tasks];
        let mut reg_terms: Vec<Var> = Vec::new();
        let insertion = self.bank.layers();
        let a_nnz = batch.a_hat.data().iter().filter(|v| **v != 0.0).count() as u64;

        for (l, layer) in self.backbone.layers().iter().enumerate() {
            let d_layer_in = layer.w.rows() as u64;
            for s in streams.iter_mut() {
                *s = layer_forward(tape, params.backbone[l], a_hat, *s, layer.activation)?;
                ops.backbone += n * d_layer_in * d + a_nnz * d;
            }
            if !insertion.contains(&l) {
                continue;
            }
            let slot = self.bank.slot_index(l)?;
            let rel = self.relation_index(slot);
            let (alpha, outcome) = (alphas[rel], &outcomes[rel]);
            let vars = &params.adapters[slot];

            // (stream, adapter id) -> adapter output
            let mut evaluated: Vec<Vec<(usize, Var)>> = vec![Vec::new(); streams.len()];
            let mut next_streams: Vec<Var> = Vec::new();
            let mut index_of: HashMap<Var, usize> = HashMap::new();
            let mut next_task_stream = vec![0usize; tasks];
            for t in 0..tasks {
                let s = task_stream[t];
                let mut terms = Vec::new();
                for i in outcome.active_adapters(t) {
                    let out = match evaluated[s].iter().find(|(id, _)| *id == i) {
                        Some((_, v)) => *v,
                        None => {
                            let v = adapter_forward(tape, vars[i].u, vars[i].v, streams[s], self.bank.kind())?;
                            ops.adapter += 2 * n * d * rank;
                            evaluated[s].push((i, v));
                            v
                        }
                    };
                    terms.push((i, out));
                }
                let state = if terms.len() == 1 {
                    // A single survivor carries weight exactly 1.
                    terms[0].1
                } else {
                    ops.compose += terms.len() as u64 * n * d;
                    tape.weighted_sum(&terms, alpha, t)?
                };
                let idx = *index_of.entry(state).or_insert_with(|| {
                    next_streams.push(state);
                    next_streams.len() - 1
                });
                next_task_stream[t] = idx;
            }

            let derived;
            let beta = match beta {
                Some(b) => &b[rel],
                None => {
                    derived = beta_from_alpha(outcome);
                    &derived
                }
            };
            for (s, outs) in evaluated.iter_mut().enumerate() {
                if outs.len() < 2 {
                    continue;
                }
                outs.sort_by_key(|(id, _)| *id);
                let share = task_stream.iter().filter(|ts| **ts == s).count() as f64 / tasks as f64;
                let (compared, norm) = match self.config.reg_level {
                    RegLevel::Pooled => {
                        let pooled = outs
                            .iter()
                            .map(|(i, v)| Ok((*i, mean_pool(tape, *v, batch)?)))
                            .collect::<Result<Vec<_>>>()?;
                        (pooled, batch.num_graphs() as f64)
                    }
                    RegLevel::Nodes => (outs.clone(), batch.num_nodes() as f64),
                };
                let r = consistency_reg_subset(tape, &compared, beta)?;
                reg_terms.push(tape.scale(r, share / norm / insertion.len() as f64)?);
            }

            streams = next_streams;
            task_stream = next_task_stream;
        }

        let reg = match reg_terms.split_first() {
            None => None,
            Some((first, rest)) => {
                let mut acc = *first;
                for r in rest {
                    acc = tape.add(acc, *r)?;
                }
                Some(acc)
            }
        };

        let mut scores = Vec::with_capacity(streams.len());
        for s in &streams {
            let pooled = mean_pool(tape, *s, batch)?;
            let lin = tape.matmul(pooled, params.head_w)?;
            scores.push(tape.add_bias(lin, params.head_b)?);
        }
        let columns = (0..tasks)
            .map(|t| tape.select_column(scores[task_stream[t]], t))
            .collect::<Result<Vec<_>>>()?;
        let logits = tape.concat_cols(&columns)?;
        let task_states = task_stream.iter().map(|s| streams[*s]).collect();

        Ok(ForwardOutput {
            params,
            logits,
            reg,
            routing: outcomes,
            task_states,
            ops,
        })
    }

    /// Logits without recording gradients for later use.
    pub fn predict(&self, batch: &GraphBatch, routing: &RoutingConfig) -> Result<(Tensor, OpCount)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, routing)?;
        Ok((tape.value(out.logits).clone(), out.ops))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{make_batch, Graph};

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_in: 5,
            d_hidden: 8,
            depth: 2,
            tasks: 3,
            adapters: 2,
            rank: 2,
            ..ModelConfig::default()
        }
    }

    fn batch() -> GraphBatch {
        let a = Graph::new(
            4,
            vec![(0, 1), (1, 2), (2, 3), (0, 2)],
            vec![Some(true), None, Some(false)],
        )
        .unwrap();
        let b = Graph::new(3, vec![(0, 1), (1, 2)], vec![Some(false), Some(true), Some(true)]).unwrap();
        make_batch(&[a, b]).unwrap()
    }

    #[test]
    fn zero_adapters_reproduce_plain_backbone() {
        let model = Model::new(small_config(), 1).unwrap();
        let b = batch();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &b, &RoutingConfig::default()).unwrap();

        let mut plain = Tape::new();
        let w = model.backbone.register(&mut plain);
        let a = plain.sparse_constant(b.a_hat.clone());
        let x = plain.constant(b.x.clone());
        let h = model.backbone.forward_plain(&mut plain, &w, a, x).unwrap();
        for s in &out.task_states {
            assert_eq!(tape.value(*s), plain.value(h));
        }
    }

    #[test]
    fn parameter_order_matches_registration() {
        let model = Model::new(small_config(), 2).unwrap();
        let mut tape = Tape::new();
        let vars = model.register(&mut tape);
        let params = model.parameters();
        assert_eq!(vars.all.len(), params.len());
        for (v, p) in vars.all.iter().zip(params) {
            assert_eq!(tape.value(*v), p);
        }
    }

    #[test]
    fn counts_trainable_params() {
        let mut model = Model::new(small_config(), 3).unwrap();
        model.freeze_backbone(true);
        let (trainable, total) = model.count_params();
        let adapters = 2 * 2 * (2 * 8 * 2);
        assert_eq!(trainable, adapters + 3 * 2 + 8 * 3 + 3);
        assert_eq!(total, trainable + 5 * 8 + 8 * 8);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = small_config();
        c.rank = 0;
        assert!(Model::new(c.clone(), 0).is_err());
        c.rank = 2;
        c.insertion = Some(vec![5]);
        assert!(Model::new(c, 0).is_err());
    }

    #[test]
    fn single_active_tasks_share_streams() {
        let mut model = Model::new(small_config(), 4).unwrap();
        model.relations[0].scores = Tensor::from_rows(&[[5.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
            .unwrap()
            .with_requires_grad(true);
        let b = batch();
        let mut tape = Tape::new();
        let cfg = RoutingConfig::new(1.0, 0.1).unwrap();
        let out = model.forward(&mut tape, &b, &cfg).unwrap();
        assert_eq!(out.task_states[0], out.task_states[1]);
        assert_ne!(out.task_states[0], out.task_states[2]);
        assert_eq!(out.ops.compose, 0);
    }
}
