//! Evaluation metrics: masked multi-task average precision and adapter
//! weight allocation accuracy (AWA).

use crate::error::{Error, Result};
use crate::routing::RoutingOutcome;
use crate::tensor::Tensor;

/// Largest adapter count the brute-force matcher accepts.
pub const AWA_MAX_ADAPTERS: usize = 8;

/// AP of one ranking. Sorted by descending score, ties by ascending index.
/// `None` unless there is at least one positive and one negative.
pub fn average_precision_single(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|l| **l).count();
    if positives == 0 || positives == labels.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(total / positives as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApReport {
    /// `None` for tasks lacking a valid positive or negative.
    pub per_task: Vec<Option<f64>>,
    pub mean: f64,
    pub skipped: Vec<usize>,
}

/// Per-task AP over valid entries of a `[graphs x tasks]` score matrix and
/// the mean over included tasks.
pub fn average_precision(scores: &Tensor, labels: &[f64], mask: &[bool]) -> Result<ApReport> {
    let (g, t) = scores.shape();
    if labels.len() != g * t || mask.len() != g * t {
        return Err(Error::contract(format!(
            "scores are {g}x{t} but got {} labels and {} mask entries",
            labels.len(),
            mask.len()
        )));
    }
    let mut per_task = Vec::with_capacity(t);
    let mut skipped = Vec::new();
    for task in 0..t {
        let mut s = Vec::new();
        let mut y = Vec::new();
        for row in 0..g {
            let idx = row * t + task;
            if mask[idx] {
                s.push(scores.data()[idx]);
                y.push(labels[idx] > 0.5);
            }
        }
        let ap = average_precision_single(&s, &y);
        if ap.is_none() {
            skipped.push(task);
        }
        per_task.push(ap);
    }
    let included: Vec<f64> = per_task.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::contract(
            "no task has both a positive and a negative valid label",
        ));
    }
    let mean = included.iter().sum::<f64>() / included.len() as f64;
    Ok(ApReport {
        per_task,
        mean,
        skipped,
    })
}

/// Fraction of tasks whose argmax adapter agrees with their planted cluster
/// under the best one-to-one cluster-to-adapter assignment.
pub fn awa(outcome: &RoutingOutcome, planted: &[usize]) -> Result<f64> {
    awa_from_argmax(&outcome.argmax(), outcome.adapters(), planted)
}

pub fn awa_from_argmax(argmax: &[usize], adapters: usize, planted: &[usize]) -> Result<f64> {
    if planted.len() != argmax.len() {
        return Err(Error::contract(format!(
            "cluster map covers {} tasks, routing has {}",
            planted.len(),
            argmax.len()
        )));
    }
    if argmax.is_empty() {
        return Err(Error::contract("no tasks to score"));
    }
    let clusters = planted.iter().max().map_or(0, |m| m + 1);
    if adapters < clusters {
        return Err(Error::contract(format!(
            "{adapters} adapters cannot cover {clusters} clusters"
        )));
    }
    if adapters > AWA_MAX_ADAPTERS {
        return Err(Error::contract(format!(
            "brute-force matching supports at most {AWA_MAX_ADAPTERS} adapters, got {adapters}"
        )));
    }
    if let Some(a) = argmax.iter().find(|a| **a >= adapters) {
        return Err(Error::contract(format!("argmax adapter {a} out of range")));
    }
    // hits[c][a]: tasks of cluster c routed to adapter a
    let mut hits = vec![vec![0usize; adapters]; clusters];
    for (c, a) in planted.iter().zip(argmax) {
        hits[*c][*a] += 1;
    }
    let mut used = vec![false; adapters];
    let best = best_matching(&hits, 0, &mut used);
    Ok(best as f64 / argmax.len() as f64)
}

fn best_matching(hits: &[Vec<usize>], cluster: usize, used: &mut [bool]) -> usize {
    if cluster == hits.len() {
        return 0;
    }
    let mut best = 0;
    for a in 0..used.len() {
        if used[a] {
            continue;
        }
        used[a] = true;
        best = best.max(hits[cluster][a] + best_matching(hits, cluster + 1, used));
        used[a] = false;
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::{route, RelationMatrix, RoutingConfig};

    #[test]
    fn perfect_ranking() {
        let ap = average_precision_single(&[0.9, 0.8, 0.1, 0.05], &[true, true, false, false]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn hand_computed_ap() {
        let ap = average_precision_single(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn ties_break_by_index() {
        // Index order [neg, pos] under a tie ranks the negative first.
        assert_eq!(average_precision_single(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(average_precision_single(&[0.5, 0.5], &[true, false]), Some(1.0));
    }

    #[test]
    fn degenerate_tasks_skipped() {
        let scores = Tensor::from_rows(&[[0.1, 0.9], [0.2, 0.3], [0.4, 0.5]]).unwrap();
        let labels = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let mask = [true, true, true, true, true, false];
        let r = average_precision(&scores, &labels, &mask).unwrap();
        assert_eq!(r.skipped, vec![1]);
        assert_eq!(r.per_task[1], None);
        assert_eq!(r.mean, r.per_task[0].unwrap());

        let none = [false; 6];
        assert!(average_precision(&scores, &labels, &none).is_err());
    }

    #[test]
    fn block_diagonal_routing_is_perfect() {
        assert_eq!(
            awa_from_argmax(&[2, 2, 0, 0, 1, 1], 3, &[0, 0, 1, 1, 2, 2]).unwrap(),
            1.0
        );
    }

    #[test]
    fn uniform_routing_fixture() {
        let o = route(&RelationMatrix::zeros(6, 3), &RoutingConfig::default()).unwrap();
        assert_eq!(o.argmax(), vec![0; 6]);
        // One cluster of two tasks can claim adapter 0.
        assert!((awa(&o, &[0, 1, 2, 0, 1, 2]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn awa_errors() {
        assert!(awa_from_argmax(&[0, 1], 1, &[0, 1]).is_err());
        assert!(awa_from_argmax(&[0], 9, &[0]).is_err());
        assert!(awa_from_argmax(&[0, 1], 2, &[0]).is_err());
    }
}
