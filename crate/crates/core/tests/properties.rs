//! Property tests for the invariants of each component.

use std::rc::Rc;

use graphprior::autodiff::Tape;
use graphprior::graph::{make_batch, normalize_adjacency, Graph};
use graphprior::metrics::{average_precision_single, awa_from_argmax};
use graphprior::model::{Model, ModelConfig};
use graphprior::objectives::{beta_from_alpha, consistency_reg, task_loss};
use graphprior::routing::{route, routing_entropy, RelationMatrix, RoutingConfig};
use graphprior::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Tensor::from_vec(rows, cols, d).unwrap())
}

fn graph(max_n: usize) -> impl Strategy<Value = Graph> {
    (1..=max_n)
        .prop_flat_map(|n| (Just(n), prop::collection::vec(any::<bool>(), n * (n - 1) / 2)))
        .prop_map(|(n, bits)| {
            let mut edges = Vec::new();
            let mut b = bits.into_iter();
            for u in 0..n {
                for v in u + 1..n {
                    if b.next().unwrap() {
                        edges.push((u, v));
                    }
                }
            }
            Graph::new(n, edges, vec![Some(true)]).unwrap()
        })
}

fn scores_matrix() -> impl Strategy<Value = Tensor> {
    (1usize..5, 1usize..6).prop_flat_map(|(t, k)| matrix(t, k, -5.0, 5.0))
}

proptest! {
    #[test]
    fn row_softmax_on_simplex(x in matrix(3, 5, -30.0, 30.0)) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.row_softmax(v).unwrap();
        let out = tape.value(s);
        for r in 0..3 {
            let row = out.row(r);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn routing_outcome_invariants(scores in scores_matrix(), tau in 0.01f64..10.0, theta in 0.0f64..0.99) {
        let o = route(&RelationMatrix::from_tensor(scores).unwrap(), &RoutingConfig::new(tau, theta).unwrap()).unwrap();
        for t in 0..o.tasks() {
            let row = o.alpha.row(t);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(o.active_adapters(t).count() >= 1);
            for (i, a) in row.iter().enumerate() {
                prop_assert!(*a >= 0.0);
                prop_assert_eq!(*a == 0.0, !o.is_active(t, i));
            }
        }
    }

    #[test]
    fn active_count_non_increasing_in_theta(scores in scores_matrix(), tau in 0.05f64..5.0) {
        let rm = RelationMatrix::from_tensor(scores).unwrap();
        let mut prev = usize::MAX;
        for i in 0..24 {
            let theta = i as f64 / 24.0;
            let n = route(&rm, &RoutingConfig::new(tau, theta).unwrap()).unwrap().active_count();
            prop_assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn entropy_non_decreasing_in_tau(scores in scores_matrix()) {
        let rm = RelationMatrix::from_tensor(scores).unwrap();
        let mut prev = vec![-1.0; rm.tasks()];
        for tau in [0.05, 0.1, 0.3, 0.5, 1.0, 2.0, 5.0, 20.0] {
            let h = routing_entropy(&route(&rm, &RoutingConfig::new(tau, 0.0).unwrap()).unwrap());
            for (a, b) in h.iter().zip(&prev) {
                prop_assert!(*a >= *b - 1e-12);
            }
            prev = h;
        }
    }

    #[test]
    fn shift_invariance(scores in scores_matrix(), shift in -50.0f64..50.0, tau in 0.1f64..5.0, theta in 0.0f64..0.5) {
        let cfg = RoutingConfig::new(tau, theta).unwrap();
        let a = route(&RelationMatrix::from_tensor(scores.clone()).unwrap(), &cfg).unwrap();
        let mut shifted = scores;
        for v in shifted.data_mut() {
            *v += shift;
        }
        let b = route(&RelationMatrix::from_tensor(shifted).unwrap(), &cfg).unwrap();
        prop_assert!(a.alpha.max_abs_diff(&b.alpha) <= 1e-12);
    }

    #[test]
    fn temperature_limits(row in prop::collection::vec(-3.0f64..3.0, 2..6)) {
        let k = row.len();
        let rm = RelationMatrix::from_tensor(Tensor::from_vec(1, k, row.clone()).unwrap()).unwrap();
        let hot = route(&rm, &RoutingConfig::new(1e4, 0.0).unwrap()).unwrap();
        prop_assert!(hot.alpha.data().iter().all(|a| (a - 1.0 / k as f64).abs() <= 1e-3));
        let mut sorted = row.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted[k - 1] - sorted[k - 2] >= 0.1 {
            let cold = route(&rm, &RoutingConfig::new(1e-4, 0.0).unwrap()).unwrap();
            let max = cold.alpha.data().iter().copied().fold(0.0, f64::max);
            prop_assert!(max >= 1.0 - 1e-3);
        }
    }

    #[test]
    fn beta_is_symmetric_bounded(scores in scores_matrix(), tau in 0.1f64..3.0) {
        let o = route(&RelationMatrix::from_tensor(scores).unwrap(), &RoutingConfig::new(tau, 0.0).unwrap()).unwrap();
        let b = beta_from_alpha(&o);
        for i in 0..b.k() {
            prop_assert_eq!(b.get(i, i), 0.0);
            for j in 0..b.k() {
                prop_assert_eq!(b.get(i, j), b.get(j, i));
                prop_assert!((0.0..=1.0).contains(&b.get(i, j)));
            }
        }
    }

    #[test]
    fn consistency_reg_nonnegative_and_zero_on_equal(z in matrix(2, 3, -2.0, 2.0), other in matrix(2, 3, -2.0, 2.0), scores in matrix(4, 3, -2.0, 2.0)) {
        let o = route(&RelationMatrix::from_tensor(scores).unwrap(), &RoutingConfig::default()).unwrap();
        let beta = beta_from_alpha(&o);
        let mut tape = Tape::new();
        let a = tape.constant(z.clone());
        let b = tape.constant(z);
        let c = tape.constant(other);
        let same = consistency_reg(&mut tape, &[a, b, a], &beta).unwrap();
        prop_assert_eq!(tape.value(same).item().unwrap(), 0.0);
        let mixed = consistency_reg(&mut tape, &[a, c, b], &beta).unwrap();
        prop_assert!(tape.value(mixed).item().unwrap() >= 0.0);
    }

    #[test]
    fn masked_labels_never_matter(logits in matrix(3, 2, -4.0, 4.0), junk in prop::collection::vec(-9.0f64..9.0, 6)) {
        let mask: Rc<[bool]> = vec![true, false, true, true, false, true].into();
        let y = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let run = |targets: Vec<f64>| {
            let mut tape = Tape::new();
            let v = tape.leaf(&logits.clone().with_requires_grad(true));
            let l = task_loss(&mut tape, v, targets.into(), mask.clone()).unwrap();
            tape.backward(l).unwrap();
            (tape.value(l).item().unwrap(), tape.grad(v).unwrap().to_vec())
        };
        let clean = run(y.to_vec());
        let noisy: Vec<f64> = y.iter().zip(&junk).zip(mask.iter()).map(|((y, j), m)| if *m { *y } else { *j }).collect();
        let dirty = run(noisy);
        prop_assert_eq!(clean.0.to_bits(), dirty.0.to_bits());
        prop_assert_eq!(clean.1, dirty.1);
    }

    #[test]
    fn normalized_adjacency_symmetric_and_equivariant(g in graph(8), seed in any::<u64>()) {
        let a = normalize_adjacency(&g);
        let n = g.num_nodes();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(a.get(i, j), a.get(j, i));
            }
        }
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let pa = normalize_adjacency(&g.permuted(&perm).unwrap());
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(pa.get(perm[i], perm[j]), a.get(i, j));
            }
        }
    }

    #[test]
    fn batch_is_block_diagonal(gs in prop::collection::vec(graph(6), 1..5)) {
        let b = make_batch(&gs).unwrap();
        let mut offset = 0;
        for g in &gs {
            let a = normalize_adjacency(g);
            let n = g.num_nodes();
            for i in 0..n {
                for j in 0..b.num_nodes() {
                    let expected = if (offset..offset + n).contains(&j) { a.get(i, j - offset) } else { 0.0 };
                    prop_assert_eq!(b.a_hat.get(offset + i, j), expected);
                }
            }
            offset += n;
        }
    }

    #[test]
    fn ap_invariant_under_monotone_maps(
        raw in prop::collection::vec((0u32..64, any::<bool>()), 2..40)
    ) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 64.0).collect();
        let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
        let base = average_precision_single(&scores, &labels);
        for f in [|x: f64| 2.0 * x, |x: f64| x * x * x, |x: f64| x.exp(), |x: f64| x - 7.0] {
            let mapped: Vec<f64> = scores.iter().map(|x| f(*x)).collect();
            prop_assert_eq!(average_precision_single(&mapped, &labels), base);
        }
    }

    #[test]
    fn awa_absorbs_adapter_relabeling(
        argmax in prop::collection::vec(0usize..4, 6),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()
    ) {
        let planted = [0, 1, 2, 0, 1, 2];
        let relabeled: Vec<usize> = argmax.iter().map(|a| perm[*a]).collect();
        prop_assert_eq!(
            awa_from_argmax(&argmax, 4, &planted).unwrap(),
            awa_from_argmax(&relabeled, 4, &planted).unwrap()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Fixed relation scores: raising θ never adds composition work.
    #[test]
    fn compose_ops_non_increasing_in_theta(scores in matrix(3, 3, -2.0, 2.0), seed in 0u64..100) {
        let mut model = Model::new(
            ModelConfig { d_hidden: 8, depth: 2, tasks: 3, adapters: 3, rank: 2, ..ModelConfig::default() },
            seed,
        ).unwrap();
        model.relations[0] = RelationMatrix::from_tensor(scores).unwrap();
        let g = Graph::new(5, vec![(0, 1), (1, 2), (2, 3), (3, 4)], vec![Some(true), Some(false), None]).unwrap();
        let batch = make_batch(&[g]).unwrap();
        let mut prev = u64::MAX;
        for i in 0..20 {
            let cfg = RoutingConfig::new(0.5, i as f64 * 0.05).unwrap();
            let ops = model.predict(&batch, &cfg).unwrap().1.composition();
            prop_assert!(ops <= prev);
            prev = ops;
        }
    }
}
