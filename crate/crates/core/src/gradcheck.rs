//! Central finite-difference checks of tape gradients.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::graph::{make_batch, Graph, GraphBatch};
use crate::model::{Model, ModelConfig};
use crate::objectives::{relation_reg, task_loss, total_loss, CoactivationWeights, LossParts, ObjectiveConfig};
use crate::routing::RoutingConfig;
use crate::synth::random_edges;
use crate::tensor::Tensor;

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, or the plain difference norm when both are
/// below `floor`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale(analytic).max(scale(numeric)).max(floor)
}

/// Central differences of a scalar function over every entry of `inputs`.
pub fn numeric_grads<F>(inputs: &[Tensor], step: f64, mut f: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for (j, slot) in g.iter_mut().enumerate() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + step;
            let plus = f(&work)?;
            work[i].data_mut()[j] = x - step;
            let minus = f(&work)?;
            work[i].data_mut()[j] = x;
            *slot = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Full training objective of `model` on `batch`: returns the loss and, when
/// `with_grads`, the gradient of every parameter in [`Model::parameters`] order.
/// `beta` pins the co-activation weights (see [`Model::forward_with_beta`]).
pub fn model_loss(
    model: &Model,
    batch: &GraphBatch,
    routing: &RoutingConfig,
    objective: &ObjectiveConfig,
    beta: Option<&[CoactivationWeights]>,
    with_grads: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let out = model.forward_with_beta(&mut tape, batch, routing, beta)?;
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
        objective,
    )?;
    if !with_grads {
        return Ok((report.l_total, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = model
        .parameters()
        .iter()
        .zip(&out.params.all)
        .map(|(p, v)| tape.grad(*v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();
    Ok((report.l_total, grads))
}

/// Relative error between tape and finite-difference gradients of the full
/// objective over all parameters. The co-activation weights carry no
/// gradient, so the perturbed evaluations keep them at their base value.
pub fn check_model(
    model: &Model,
    batch: &GraphBatch,
    routing: &RoutingConfig,
    objective: &ObjectiveConfig,
    step: f64,
) -> Result<f64> {
    let beta = model.coactivation(routing)?;
    let (_, analytic) = model_loss(model, batch, routing, objective, None, true)?;
    let params: Vec<Tensor> = model.parameters().into_iter().cloned().collect();
    let mut probe = model.clone();
    let numeric = numeric_grads(&params, step, |ps| {
        for (dst, src) in probe.parameters_mut().into_iter().zip(ps) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(model_loss(&probe, batch, routing, objective, Some(&beta), false)?.0)
    })?;
    let a: Vec<f64> = analytic.concat();
    let n: Vec<f64> = numeric.concat();
    Ok(relative_error(&a, &n, 1e-12))
}

/// Worst relative error seen for one tape op.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub trials: usize,
    pub worst: f64,
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::from_vec(rows, cols, data)
        .expect("shape")
        .with_requires_grad(true)
}

/// Values kept away from the relu kink.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
        .expect("shape")
        .with_requires_grad(true)
}

/// Reduces any output to a scalar with a random column weighting plus a
/// quadratic term, so every output entry influences the loss differently.
fn reduce(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let lin = tape.matmul(out, w)?;
    let lin = tape.sum(lin)?;
    let sq = tape.sq_frobenius(out)?;
    let sq = tape.scale(sq, 0.5)?;
    tape.add(lin, sq)
}

fn eval_op<F>(inputs: &[Tensor], weights: &Tensor, op: &F, with_grads: bool) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = op(&mut tape, &vars)?;
    let loss = reduce(&mut tape, out, weights)?;
    let value = tape.value(loss).item()?;
    if !with_grads {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    Ok((value, grads))
}

fn check_op<G, F>(name: &'static str, trials: usize, step: f64, mut gen: G, out_cols: usize, op: F) -> Result<OpCheck>
where
    G: FnMut(&mut ChaCha8Rng) -> Vec<Tensor>,
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let inputs = gen(&mut rng);
        let weights = random(&mut rng, out_cols, 1);
        let (_, analytic) = eval_op(&inputs, &weights, &op, true)?;
        let numeric = numeric_grads(&inputs, step, |ts| Ok(eval_op(ts, &weights, &op, false)?.0))?;
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            if inputs[i].requires_grad() {
                worst = worst.max(relative_error(a, n, 1e-12));
            }
        }
    }
    Ok(OpCheck { name, trials, worst })
}

/// Checks every differentiable tape op on `trials` random inputs each.
pub fn op_suite(trials: usize, step: f64) -> Result<Vec<OpCheck>> {
    let mask = [
        true, false, true, true, false, true, true, true, true, false, false, true,
    ];
    let segments: Rc<[usize]> = vec![0, 0, 1, 1, 1, 2].into();
    let targets: Rc<[f64]> = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0].into();
    let label_mask: Rc<[bool]> = vec![true, true, false, true, true, true].into();
    Ok(vec![
        check_op(
            "matmul",
            trials,
            step,
            |r| vec![random(r, 3, 4), random(r, 4, 2)],
            2,
            |t, v| t.matmul(v[0], v[1]),
        )?,
        check_op(
            "add",
            trials,
            step,
            |r| vec![random(r, 2, 3), random(r, 2, 3)],
            3,
            |t, v| t.add(v[0], v[1]),
        )?,
        check_op(
            "sub",
            trials,
            step,
            |r| vec![random(r, 2, 3), random(r, 2, 3)],
            3,
            |t, v| t.sub(v[0], v[1]),
        )?,
        check_op(
            "scale",
            trials,
            step,
            |r| vec![random(r, 3, 2)],
            2,
            |t, v| t.scale(v[0], -1.75),
        )?,
        check_op(
            "scale_by",
            trials,
            step,
            |r| vec![random(r, 3, 2), random(r, 1, 1)],
            2,
            |t, v| t.scale_by(v[0], v[1]),
        )?,
        check_op(
            "relu",
            trials,
            step,
            |r| vec![away_from_zero(r, 3, 4)],
            4,
            |t, v| t.relu(v[0]),
        )?,
        check_op(
            "row_softmax",
            trials,
            step,
            |r| vec![random(r, 3, 4)],
            4,
            |t, v| t.row_softmax(v[0]),
        )?,
        check_op(
            "masked_row_softmax",
            trials,
            step,
            |r| vec![random(r, 3, 4)],
            4,
            move |t, v| t.masked_row_softmax(v[0], &mask),
        )?,
        check_op("sum", trials, step, |r| vec![random(r, 3, 2)], 1, |t, v| t.sum(v[0]))?,
        check_op("mean", trials, step, |r| vec![random(r, 3, 2)], 1, |t, v| t.mean(v[0]))?,
        check_op(
            "sq_frobenius",
            trials,
            step,
            |r| vec![random(r, 2, 3)],
            1,
            |t, v| t.sq_frobenius(v[0]),
        )?,
        check_op(
            "mean_pool",
            trials,
            step,
            |r| vec![random(r, 6, 3)],
            3,
            move |t, v| t.mean_pool(v[0], segments.clone(), 3),
        )?,
        check_op(
            "select_column",
            trials,
            step,
            |r| vec![random(r, 4, 3)],
            1,
            |t, v| t.select_column(v[0], 2),
        )?,
        check_op(
            "concat_cols",
            trials,
            step,
            |r| vec![random(r, 3, 1), random(r, 3, 2)],
            4,
            |t, v| t.concat_cols(&[v[0], v[1], v[0]]),
        )?,
        check_op(
            "add_bias",
            trials,
            step,
            |r| vec![random(r, 4, 3), random(r, 1, 3)],
            3,
            |t, v| t.add_bias(v[0], v[1]),
        )?,
        check_op(
            "weighted_sum",
            trials,
            step,
            |r| vec![random(r, 3, 2), random(r, 3, 2), random(r, 3, 2), random(r, 2, 3)],
            2,
            |t, v| t.weighted_sum(&[(0, v[0]), (2, v[2]), (1, v[1])], v[3], 1),
        )?,
        check_op(
            "bce_with_logits",
            trials,
            step,
            |r| vec![random(r, 3, 2)],
            1,
            move |t, v| t.bce_with_logits(v[0], targets.clone(), label_mask.clone()),
        )?,
    ])
}

/// A batch of `graphs` random graphs with 4 to 8 nodes and some missing labels.
pub fn small_batch(rng: &mut ChaCha8Rng, graphs: usize, tasks: usize) -> Result<GraphBatch> {
    let gs = (0..graphs)
        .map(|_| {
            let n = rng.gen_range(4..=8);
            let edges = random_edges(n, 0.4, rng);
            let y = (0..tasks)
                .map(|_| {
                    if rng.gen_bool(0.15) {
                        None
                    } else {
                        Some(rng.gen_bool(0.5))
                    }
                })
                .collect();
            Graph::new(n, edges, y)
        })
        .collect::<Result<Vec<_>>>()?;
    make_batch(&gs)
}

/// Depth 2, width 8, 3 adapters of rank 2, 4 tasks, with V and R moved off
/// their zero initialization and the backbone trainable, so every path
/// carries gradient.
pub fn perturbed_model(seed: u64) -> Result<Model> {
    let mut model = Model::new(
        ModelConfig {
            d_hidden: 8,
            depth: 2,
            tasks: 4,
            adapters: 3,
            rank: 2,
            ..ModelConfig::default()
        },
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for a in model.bank.iter_mut() {
        for v in a.v.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    for rel in &mut model.relations {
        for v in rel.scores.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    model.freeze_backbone(false);
    Ok(model)
}

/// Full-objective check on [`perturbed_model`] over `seeds` batches of four
/// graphs. Returns the worst relative error.
pub fn model_suite(seeds: u64, routing: &RoutingConfig, objective: &ObjectiveConfig, step: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = small_batch(&mut rng, 4, 4)?;
        worst = worst.max(check_model(&perturbed_model(seed)?, &batch, routing, objective, step)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_grad_of_square() {
        let x = Tensor::from_vec(1, 2, vec![3.0, -1.0]).unwrap();
        let g = numeric_grads(&[x], 1e-5, |t| Ok(t[0].sq_norm())).unwrap();
        assert!(relative_error(&g[0], &[6.0, -2.0], 1e-12) < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(&[0.0], &[0.0], 1e-12), 0.0);
        assert!((relative_error(&[1.0], &[2.0], 1e-12) - 0.5).abs() < 1e-15);
    }
}
