//! Training objective `L = L_task + λ L_reg + ρ L_R`.
//!
//! * `L_task`: masked multi-label binary cross-entropy.
//! * `L_reg`: `Σ_i Σ_j β_ij ‖z'_i − z'_j‖²` over ordered adapter pairs, with
//!   `β` the (gradient-free) co-activation of adapters under the current routing.
//! * `L_R`: squared Frobenius norm of the relation matrix.

use std::rc::Rc;

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::routing::RoutingOutcome;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    /// Weight of the adapter-consistency term.
    pub lambda: f64,
    /// Weight of the relation-matrix penalty.
    pub rho: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { lambda: 0.1, rho: 1e-3 }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::config(format!("rho must be >= 0, got {}", self.rho)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_task: f64,
    pub l_reg: f64,
    pub l_rel: f64,
    pub l_total: f64,
    /// Mean BCE per task over its valid entries; `None` if the task had none.
    pub per_task: Vec<Option<f64>>,
}

/// Symmetric `[k x k]` coupling with zero diagonal and entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoactivationWeights {
    pub beta: Tensor,
}

impl CoactivationWeights {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.beta.get(i, j)
    }

    pub fn k(&self) -> usize {
        self.beta.rows()
    }
}

/// Mean masked BCE over a `[graphs x tasks]` logit matrix.
pub fn task_loss(tape: &mut Tape, logits: Var, y: Rc<[f64]>, mask: Rc<[bool]>) -> Result<Var> {
    tape.bce_with_logits(logits, y, mask)
}

/// Per-task mean BCE, evaluated without recording.
pub fn per_task_loss(logits: &Tensor, y: &[f64], mask: &[bool]) -> Vec<Option<f64>> {
    let tasks = logits.cols();
    (0..tasks)
        .map(|t| {
            let mut total = 0.0;
            let mut n = 0usize;
            for g in 0..logits.rows() {
                let i = g * tasks + t;
                if mask[i] {
                    let x = logits.get(g, t);
                    total += x.max(0.0) - x * y[i] + (-x.abs()).exp().ln_1p();
                    n += 1;
                }
            }
            (n > 0).then(|| total / n as f64)
        })
        .collect()
}

/// Predicted probabilities for a logit matrix.
pub fn probabilities(logits: &Tensor) -> Tensor {
    Tensor::from_vec(
        logits.rows(),
        logits.cols(),
        logits.data().iter().map(|x| sigmoid(*x)).collect(),
    )
    .expect("same shape")
}

/// `β_ij = (1/T) Σ_t α_ti α_tj` off the diagonal, zero on it.
pub fn beta_from_alpha(o: &RoutingOutcome) -> CoactivationWeights {
    let (tasks, k) = o.alpha.shape();
    let mut beta = Tensor::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let s: f64 = (0..tasks).map(|t| o.alpha.get(t, i) * o.alpha.get(t, j)).sum();
            beta.set(i, j, s / tasks as f64);
        }
    }
    CoactivationWeights { beta }
}

/// `Σ_i Σ_j β_ij ‖outputs[i] − outputs[j]‖²`, both orders counted.
pub fn consistency_reg(tape: &mut Tape, outputs: &[Var], beta: &CoactivationWeights) -> Result<Var> {
    let pairs: Vec<(usize, Var)> = outputs.iter().copied().enumerate().collect();
    consistency_reg_subset(tape, &pairs, beta)
}

/// [`consistency_reg`] over the adapters listed as `(adapter id, output)`.
pub fn consistency_reg_subset(tape: &mut Tape, outputs: &[(usize, Var)], beta: &CoactivationWeights) -> Result<Var> {
    if outputs.is_empty() {
        return Err(Error::contract("consistency regularizer needs at least one output"));
    }
    let shape = tape.value(outputs[0].1).shape();
    for (_, o) in outputs {
        if tape.value(*o).shape() != shape {
            return Err(Error::Dimension {
                op: "consistency_reg",
                lhs: shape,
                rhs: tape.value(*o).shape(),
            });
        }
    }
    let mut acc: Option<Var> = None;
    for (a, &(i, zi)) in outputs.iter().enumerate() {
        for &(j, zj) in &outputs[a + 1..] {
            // Ordered pairs (i, j) and (j, i) share one squared distance.
            let w = beta.get(i, j) + beta.get(j, i);
            if w == 0.0 {
                continue;
            }
            let diff = tape.sub(zi, zj)?;
            let sq = tape.sq_frobenius(diff)?;
            let term = tape.scale(sq, w)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, term)?,
                None => term,
            });
        }
    }
    match acc {
        Some(v) => Ok(v),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

/// `‖R‖²_F`.
pub fn relation_reg(tape: &mut Tape, scores: Var) -> Result<Var> {
    tape.sq_frobenius(scores)
}

/// The recorded loss terms of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub task: Var,
    pub reg: Option<Var>,
    pub rel: Option<Var>,
}

pub fn total_loss(tape: &mut Tape, parts: LossParts, cfg: &ObjectiveConfig) -> Result<(Var, LossReport)> {
    cfg.validate()?;
    let read = |tape: &Tape, v: Option<Var>, name: &str| -> Result<f64> {
        let x = v.map_or(Ok(0.0), |v| tape.value(v).item())?;
        if !x.is_finite() {
            return Err(Error::Numeric(name.into()));
        }
        Ok(x)
    };
    let l_task = read(tape, Some(parts.task), "L_task")?;
    let l_reg = read(tape, parts.reg, "L_reg")?;
    let l_rel = read(tape, parts.rel, "L_R")?;

    let mut total = parts.task;
    if let Some(reg) = parts.reg {
        let scaled = tape.scale(reg, cfg.lambda)?;
        total = tape.add(total, scaled)?;
    }
    if let Some(rel) = parts.rel {
        let scaled = tape.scale(rel, cfg.rho)?;
        total = tape.add(total, scaled)?;
    }
    let l_total = tape.value(total).item()?;
    Ok((
        total,
        LossReport {
            l_task,
            l_reg,
            l_rel,
            l_total,
            per_task: Vec::new(),
        },
    ))
}
