//! Relation-matrix routing: per-task composition weights from a learnable
//! task x adapter score table, sharpened by a temperature and sparsified by a
//! gating threshold.
//!
//! For task row `t`, `p = softmax(R[t] / tau)`. Adapters with `p_i < theta`
//! are dropped and the survivors renormalized. If every entry falls below the
//! threshold only the arg-max (lowest index on ties) survives. Routing does
//! not look at the input graph, so one relation matrix yields one `alpha` for
//! the whole dataset.

use std::fmt::Write as _;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoutingConfig {
    pub tau: f64,
    pub theta: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig { tau: 0.1, theta: 0.0 }
    }
}

impl RoutingConfig {
    pub fn new(tau: f64, theta: f64) -> Result<Self> {
        let cfg = RoutingConfig { tau, theta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!(
                "routing temperature must be > 0, got {}",
                self.tau
            )));
        }
        if !(0.0..1.0).contains(&self.theta) {
            return Err(Error::config(format!(
                "gating threshold must lie in [0, 1), got {}",
                self.theta
            )));
        }
        Ok(())
    }
}

/// Learnable `[tasks x adapters]` routing scores.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMatrix {
    pub scores: Tensor,
}

impl RelationMatrix {
    /// All-zero scores: uniform routing.
    pub fn zeros(tasks: usize, adapters: usize) -> Self {
        RelationMatrix {
            scores: Tensor::zeros(tasks, adapters).with_requires_grad(true),
        }
    }

    pub fn from_tensor(scores: Tensor) -> Result<Self> {
        if !scores.all_finite() {
            return Err(Error::Numeric("relation matrix".into()));
        }
        Ok(RelationMatrix {
            scores: scores.with_requires_grad(true),
        })
    }

    pub fn tasks(&self) -> usize {
        self.scores.rows()
    }

    pub fn adapters(&self) -> usize {
        self.scores.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingOutcome {
    /// `[tasks x adapters]`, each row on the simplex.
    pub alpha: Tensor,
    /// Row-major gate mask; `alpha` is zero exactly where this is false.
    pub active: Vec<bool>,
}

impl RoutingOutcome {
    pub fn tasks(&self) -> usize {
        self.alpha.rows()
    }

    pub fn adapters(&self) -> usize {
        self.alpha.cols()
    }

    pub fn is_active(&self, task: usize, adapter: usize) -> bool {
        self.active[task * self.adapters() + adapter]
    }

    pub fn active_adapters(&self, task: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.adapters()).filter(move |i| self.is_active(task, *i))
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    /// Arg-max adapter per task, lowest index on ties.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.tasks()).map(|t| argmax_first(self.alpha.row(t))).collect()
    }

    /// One line per `(task, adapter)`: `task_id,adapter_id,weight,active`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_id,adapter_id,weight,active\n");
        for t in 0..self.tasks() {
            for i in 0..self.adapters() {
                let _ = writeln!(
                    out,
                    "{t},{i},{},{}",
                    self.alpha.get(t, i),
                    u8::from(self.is_active(t, i))
                );
            }
        }
        out
    }
}

pub(crate) fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn gate_mask(scaled: &Tensor, theta: f64) -> Vec<bool> {
    let (rows, cols) = scaled.shape();
    let mut mask = vec![false; rows * cols];
    for t in 0..rows {
        let row = scaled.row(t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let m = &mut mask[t * cols..(t + 1) * cols];
        for (i, x) in row.iter().enumerate() {
            let p = (x - max).exp() / total;
            // An underflowed probability carries no weight, so it is dropped
            // even at theta = 0.
            m[i] = p >= theta && p > 0.0;
        }
        if !m.iter().any(|a| *a) {
            m[argmax_first(row)] = true;
        }
    }
    mask
}

fn scaled_scores(rm: &RelationMatrix, cfg: &RoutingConfig) -> Tensor {
    let factor = 1.0 / cfg.tau;
    let s = &rm.scores;
    Tensor::from_vec(s.rows(), s.cols(), s.data().iter().map(|x| x * factor).collect()).expect("same shape")
}

/// Composition weights for every task.
pub fn route(rm: &RelationMatrix, cfg: &RoutingConfig) -> Result<RoutingOutcome> {
    cfg.validate()?;
    let scaled = scaled_scores(rm, cfg);
    let active = gate_mask(&scaled, cfg.theta);
    let mut tape = Tape::new();
    let x = tape.constant(scaled);
    let alpha = tape.masked_row_softmax(x, &active)?;
    Ok(RoutingOutcome {
        alpha: tape.value(alpha).clone(),
        active,
    })
}

/// Differentiable routing: returns `alpha` on the tape (bitwise equal to
/// [`route`]) together with the outcome. The gate itself is a constant mask.
pub fn route_on_tape(tape: &mut Tape, scores: Var, cfg: &RoutingConfig) -> Result<(Var, RoutingOutcome)> {
    cfg.validate()?;
    let scaled = tape.scale(scores, 1.0 / cfg.tau)?;
    let active = gate_mask(tape.value(scaled), cfg.theta);
    let alpha = tape.masked_row_softmax(scaled, &active)?;
    let outcome = RoutingOutcome {
        alpha: tape.value(alpha).clone(),
        active,
    };
    Ok((alpha, outcome))
}

/// `z'' = Σ_i alpha[row, i] z'_i` over all `k` outputs.
pub fn compose(tape: &mut Tape, outputs: &[Var], alpha: Var, row: usize) -> Result<Var> {
    let k = tape.value(alpha).cols();
    if outputs.len() != k {
        return Err(Error::contract(format!(
            "{} adapter outputs for {k} weights",
            outputs.len()
        )));
    }
    let terms: Vec<(usize, Var)> = outputs.iter().copied().enumerate().collect();
    tape.weighted_sum(&terms, alpha, row)
}

/// Like [`compose`] but over a subset of adapters; absent ones must carry zero weight.
pub fn compose_active(tape: &mut Tape, terms: &[(usize, Var)], alpha: Var, row: usize) -> Result<Var> {
    tape.weighted_sum(terms, alpha, row)
}

/// Shannon entropy (nats) of each `alpha` row over its active entries.
pub fn routing_entropy(o: &RoutingOutcome) -> Vec<f64> {
    (0..o.tasks())
        .map(|t| {
            -o.alpha
                .row(t)
                .iter()
                .filter(|a| **a > 0.0)
                .map(|a| a * a.ln())
                .sum::<f64>()
        })
        .collect()
}
