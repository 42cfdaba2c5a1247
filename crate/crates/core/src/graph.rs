//! Graphs, symmetric adjacency normalization and block-diagonal batching.

use std::borrow::Borrow;
use std::collections::HashSet;
use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width of the default node features: one-hot degree buckets 0, 1, 2, 3, >=4.
pub const DEGREE_BUCKETS: usize = 5;

/// A binary label that may be missing.
pub type Label = Option<bool>;

/// Undirected simple graph with node features and per-task labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    x: Tensor,
    y: Vec<Label>,
}

impl Graph {
    /// Builds a graph whose features are the one-hot degree buckets.
    pub fn new(n: usize, edges: Vec<(usize, usize)>, y: Vec<Label>) -> Result<Self> {
        validate_edges(n, &edges)?;
        let x = degree_features(n, &edges);
        Ok(Graph { n, edges, x, y })
    }

    pub fn with_features(n: usize, edges: Vec<(usize, usize)>, x: Tensor, y: Vec<Label>) -> Result<Self> {
        validate_edges(n, &edges)?;
        if x.rows() != n {
            return Err(Error::contract(format!(
                "feature matrix has {} rows for {n} nodes",
                x.rows()
            )));
        }
        Ok(Graph { n, edges, x, y })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Tensor {
        &self.x
    }

    pub fn labels(&self) -> &[Label] {
        &self.y
    }

    pub fn num_tasks(&self) -> usize {
        self.y.len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Adjacency lists, sorted.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }

    /// Relabels nodes: node `i` becomes `perm[i]`. Features move with their node.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        if perm.len() != self.n {
            return Err(Error::contract("permutation length differs from node count"));
        }
        let edges = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let mut x = Tensor::zeros(self.n, self.x.cols());
        for (i, &to) in perm.iter().enumerate() {
            for j in 0..self.x.cols() {
                x.set(to, j, self.x.get(i, j));
            }
        }
        Graph::with_features(self.n, edges, x, self.y.clone())
    }
}

fn validate_edges(n: usize, edges: &[(usize, usize)]) -> Result<()> {
    let mut seen = HashSet::with_capacity(edges.len());
    for &(u, v) in edges {
        if u >= n || v >= n {
            return Err(Error::integrity(format!("edge ({u}, {v}) outside 0..{n}")));
        }
        if u == v {
            return Err(Error::integrity(format!("self-loop on node {u}")));
        }
        if !seen.insert((u.min(v), u.max(v))) {
            return Err(Error::integrity(format!("duplicate edge ({u}, {v})")));
        }
    }
    Ok(())
}

fn degree_features(n: usize, edges: &[(usize, usize)]) -> Tensor {
    let mut deg = vec![0usize; n];
    for &(u, v) in edges {
        deg[u] += 1;
        deg[v] += 1;
    }
    let mut x = Tensor::zeros(n, DEGREE_BUCKETS);
    for (i, d) in deg.into_iter().enumerate() {
        x.set(i, d.min(DEGREE_BUCKETS - 1), 1.0);
    }
    x
}

/// `D^-1/2 A D^-1/2` with `d^-1/2 := 0` for isolated nodes. No self-loops are added.
pub fn normalize_adjacency(g: &Graph) -> Tensor {
    let deg = g.degrees();
    let inv_sqrt: Vec<f64> = deg
        .iter()
        .map(|&d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
        .collect();
    let mut a = Tensor::zeros(g.n, g.n);
    for &(u, v) in &g.edges {
        let w = inv_sqrt[u] * inv_sqrt[v];
        a.set(u, v, w);
        a.set(v, u, w);
    }
    a
}

/// Several graphs stacked into one disconnected graph.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub a_hat: Tensor,
    pub x: Tensor,
    pub segment_ids: Rc<[usize]>,
    /// Row-major `[graphs x tasks]` targets; 0.0 where missing.
    pub y: Rc<[f64]>,
    /// Row-major `[graphs x tasks]`; false exactly where the label is missing.
    pub mask: Rc<[bool]>,
    pub sizes: Vec<usize>,
    pub num_tasks: usize,
}

impl GraphBatch {
    pub fn num_graphs(&self) -> usize {
        self.sizes.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.x.rows()
    }

    pub fn label(&self, graph: usize, task: usize) -> Label {
        let i = graph * self.num_tasks + task;
        self.mask[i].then(|| self.y[i] == 1.0)
    }
}

pub fn make_batch<G: Borrow<Graph>>(graphs: &[G]) -> Result<GraphBatch> {
    let Some(first) = graphs.first() else {
        return Err(Error::contract("cannot batch an empty list of graphs"));
    };
    let first = first.borrow();
    let d_in = first.x.cols();
    let tasks = first.num_tasks();
    let total: usize = graphs.iter().map(|g| g.borrow().n).sum();

    let mut a_hat = Tensor::zeros(total, total);
    let mut x = Tensor::zeros(total, d_in);
    let mut segment_ids = Vec::with_capacity(total);
    let mut y = Vec::with_capacity(graphs.len() * tasks);
    let mut mask = Vec::with_capacity(graphs.len() * tasks);
    let mut sizes = Vec::with_capacity(graphs.len());
    let mut offset = 0;
    for (gi, g) in graphs.iter().enumerate() {
        let g = g.borrow();
        if g.x.cols() != d_in || g.num_tasks() != tasks {
            return Err(Error::contract(format!(
                "graph {gi} has {} features / {} tasks, expected {d_in} / {tasks}",
                g.x.cols(),
                g.num_tasks()
            )));
        }
        let block = normalize_adjacency(g);
        for i in 0..g.n {
            for j in 0..g.n {
                a_hat.set(offset + i, offset + j, block.get(i, j));
            }
            for j in 0..d_in {
                x.set(offset + i, j, g.x.get(i, j));
            }
            segment_ids.push(gi);
        }
        for l in &g.y {
            y.push(if *l == Some(true) { 1.0 } else { 0.0 });
            mask.push(l.is_some());
        }
        sizes.push(g.n);
        offset += g.n;
    }
    Ok(GraphBatch {
        a_hat,
        x,
        segment_ids: segment_ids.into(),
        y: y.into(),
        mask: mask.into(),
        sizes,
        num_tasks: tasks,
    })
}

/// Graph-level readout: mean of each graph's node rows.
pub fn mean_pool(tape: &mut Tape, h: Var, batch: &GraphBatch) -> Result<Var> {
    tape.mean_pool(h, batch.segment_ids.clone(), batch.num_graphs())
}
