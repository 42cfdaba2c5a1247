//! Planted-cluster synthetic benchmark. Every task belongs to a cluster and
//! each cluster is labelled by thresholding one structural graph statistic at
//! its sample median, so tasks in the same cluster share their signal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::graph::{Graph, Label};

/// Planted statistics, in cluster order.
pub const STATISTICS: [&str; 5] = [
    "edges_per_node",
    "triangles_per_node",
    "max_degree_per_node",
    "mean_clustering",
    "degree_variance_per_node",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_graphs: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub edge_prob: f64,
    pub num_tasks: usize,
    pub num_clusters: usize,
    /// Task to cluster; `None` assigns task `t` to cluster `t % C`.
    pub cluster_map: Option<Vec<usize>>,
    pub label_noise: f64,
    pub missing_prob: f64,
    /// Leading share of graphs used for training.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_graphs: 800,
            n_min: 10,
            n_max: 30,
            edge_prob: 0.2,
            num_tasks: 6,
            num_clusters: 3,
            cluster_map: None,
            label_noise: 0.05,
            missing_prob: 0.1,
            train_fraction: 0.75,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn resolved_cluster_map(&self) -> Vec<usize> {
        self.cluster_map
            .clone()
            .unwrap_or_else(|| (0..self.num_tasks).map(|t| t % self.num_clusters.max(1)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clusters > STATISTICS.len() {
            return Err(Error::contract(format!(
                "only {} planted statistics exist, asked for {} clusters",
                STATISTICS.len(),
                self.num_clusters
            )));
        }
        if self.num_clusters == 0 || self.num_clusters > self.num_tasks {
            return Err(Error::contract(format!(
                "need 1 <= clusters <= tasks, got {} clusters for {} tasks",
                self.num_clusters, self.num_tasks
            )));
        }
        if self.num_graphs == 0 {
            return Err(Error::contract("at least one graph is required"));
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(Error::contract(format!(
                "bad node range [{}, {}]",
                self.n_min, self.n_max
            )));
        }
        for (name, p) in [
            ("edge probability", self.edge_prob),
            ("label noise", self.label_noise),
            ("missing probability", self.missing_prob),
            ("train fraction", self.train_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::contract(format!("{name} {p} outside [0, 1]")));
            }
        }
        let map = self.resolved_cluster_map();
        if map.len() != self.num_tasks {
            return Err(Error::contract(format!(
                "cluster map has {} entries for {} tasks",
                map.len(),
                self.num_tasks
            )));
        }
        for c in 0..self.num_clusters {
            if !map.contains(&c) {
                return Err(Error::contract(format!("cluster {c} has no task")));
            }
        }
        if let Some(c) = map.iter().find(|c| **c >= self.num_clusters) {
            return Err(Error::contract(format!("cluster id {c} out of range")));
        }
        Ok(())
    }

    pub fn train_graphs(&self) -> usize {
        (self.num_graphs as f64 * self.train_fraction).floor() as usize
    }

    /// Key/value echo stored in the dataset manifest.
    pub fn echo(&self) -> Vec<(String, String)> {
        vec![
            ("spec.num_graphs".into(), self.num_graphs.to_string()),
            ("spec.n_min".into(), self.n_min.to_string()),
            ("spec.n_max".into(), self.n_max.to_string()),
            ("spec.edge_prob".into(), self.edge_prob.to_string()),
            ("spec.label_noise".into(), self.label_noise.to_string()),
            ("spec.missing_prob".into(), self.missing_prob.to_string()),
            ("spec.train_fraction".into(), self.train_fraction.to_string()),
        ]
    }
}

fn graph_rng(seed: u64, graph_id: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ graph_id as u64);
    rng.set_stream(stream);
    rng
}

/// Edge-independent random graph, edges listed as `(u, v)` with `u < v`.
pub fn random_edges<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    edges
}

pub fn triangle_count(g: &Graph) -> usize {
    let adj = g.neighbors();
    let mut count = 0;
    for &(u, v) in g.edges() {
        let (a, b) = (&adj[u], &adj[v]);
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    count += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
    }
    count / 3
}

/// Mean over all nodes of the local clustering coefficient; nodes of
/// degree < 2 contribute 0.
pub fn mean_clustering(g: &Graph) -> f64 {
    let n = g.num_nodes();
    if n == 0 {
        return 0.0;
    }
    let adj = g.neighbors();
    let mut total = 0.0;
    for nb in &adj {
        let d = nb.len();
        if d < 2 {
            continue;
        }
        let mut links = 0usize;
        for (i, &a) in nb.iter().enumerate() {
            for &b in &nb[i + 1..] {
                if adj[a].binary_search(&b).is_ok() {
                    links += 1;
                }
            }
        }
        total += links as f64 / (d * (d - 1) / 2) as f64;
    }
    total / n as f64
}

/// The five planted statistics, in [`STATISTICS`] order.
pub fn statistics(g: &Graph) -> [f64; 5] {
    let n = g.num_nodes() as f64;
    let deg = g.degrees();
    let max_deg = deg.iter().copied().max().unwrap_or(0) as f64;
    let mean_deg = deg.iter().sum::<usize>() as f64 / n;
    let var = deg.iter().map(|d| (*d as f64 - mean_deg).powi(2)).sum::<f64>() / n;
    [
        g.edges().len() as f64 / n,
        triangle_count(g) as f64 / n,
        max_deg / n,
        mean_clustering(g),
        var / n,
    ]
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let map = spec.resolved_cluster_map();
    let structures: Vec<(usize, Vec<(usize, usize)>)> = (0..spec.num_graphs)
        .map(|id| {
            let mut rng = graph_rng(spec.seed, id, 0);
            let n = rng.gen_range(spec.n_min..=spec.n_max);
            (n, random_edges(n, spec.edge_prob, &mut rng))
        })
        .collect();
    let unlabeled = structures
        .iter()
        .map(|(n, e)| Graph::new(*n, e.clone(), Vec::new()))
        .collect::<Result<Vec<_>>>()?;
    let stats: Vec<[f64; 5]> = unlabeled.iter().map(statistics).collect();
    let thresholds: Vec<f64> = (0..spec.num_clusters)
        .map(|c| median(&stats.iter().map(|s| s[c]).collect::<Vec<_>>()))
        .collect();

    let mut graphs = Vec::with_capacity(spec.num_graphs);
    for (id, ((n, edges), s)) in structures.into_iter().zip(&stats).enumerate() {
        let mut rng = graph_rng(spec.seed, id, 1);
        let labels: Vec<Label> = map
            .iter()
            .map(|&c| {
                let flip = rng.gen::<f64>() < spec.label_noise;
                let missing = rng.gen::<f64>() < spec.missing_prob;
                let y = (s[c] > thresholds[c]) != flip;
                (!missing).then_some(y)
            })
            .collect();
        graphs.push(Graph::new(n, edges, labels)?);
    }
    let meta = DatasetMeta {
        tasks: spec.num_tasks,
        train_graphs: spec.train_graphs(),
        cluster_map: Some(map),
        seed: Some(spec.seed),
        extra: spec.echo(),
    };
    Dataset::new(graphs, meta)
}
