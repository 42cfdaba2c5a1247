//! Dataset container and its on-disk form:
//!
//! ```text
//! graphs.csv  graph_id,n
//! edges.csv   graph_id,u,v
//! labels.csv  graph_id,task_0,...,task_{T-1}   (1, 0, or empty for missing)
//! meta.txt    key=value lines
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::{Graph, Label};

pub const GRAPHS_FILE: &str = "graphs.csv";
pub const EDGES_FILE: &str = "edges.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const META_FILE: &str = "meta.txt";
pub const DATASET_FILES: [&str; 4] = [GRAPHS_FILE, EDGES_FILE, LABELS_FILE, META_FILE];
const FORMAT: &str = "graphprior-dataset/1";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub tasks: usize,
    /// The first `train_graphs` graphs form the training split.
    pub train_graphs: usize,
    /// Planted task clusters, when known.
    pub cluster_map: Option<Vec<usize>>,
    pub seed: Option<u64>,
    /// Free-form generator settings, written back verbatim.
    pub extra: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub graphs: Vec<Graph>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(graphs: Vec<Graph>, meta: DatasetMeta) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::integrity("dataset has no graphs"));
        }
        if meta.train_graphs > graphs.len() {
            return Err(Error::integrity(format!(
                "train split of {} exceeds {} graphs",
                meta.train_graphs,
                graphs.len()
            )));
        }
        if let Some(g) = graphs.iter().position(|g| g.num_tasks() != meta.tasks) {
            return Err(Error::integrity(format!(
                "graph {g} has {} labels, dataset declares {} tasks",
                graphs[g].num_tasks(),
                meta.tasks
            )));
        }
        if let Some(map) = &meta.cluster_map {
            if map.len() != meta.tasks {
                return Err(Error::integrity("cluster map length differs from task count"));
            }
        }
        Ok(Dataset { graphs, meta })
    }

    pub fn num_tasks(&self) -> usize {
        self.meta.tasks
    }

    pub fn train(&self) -> &[Graph] {
        &self.graphs[..self.meta.train_graphs]
    }

    pub fn test(&self) -> &[Graph] {
        &self.graphs[self.meta.train_graphs..]
    }

    pub fn num_clusters(&self) -> Option<usize> {
        self.meta
            .cluster_map
            .as_ref()
            .map(|m| m.iter().max().map_or(0, |c| c + 1))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{kind:?}"),
        },
    }
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<T> {
    field.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("bad {what} {field:?}"),
    })
}

fn read_records(path: &Path, header: &[&str]) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let found = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let matches = if header.last() == Some(&"*") {
        found.len() >= header.len() - 1
            && header[..header.len() - 1]
                .iter()
                .zip(found.iter())
                .all(|(a, b)| *a == b)
    } else {
        found.iter().eq(header.iter().copied())
    };
    if !matches {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("unexpected header {:?}", found.iter().collect::<Vec<_>>()),
        });
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        out.push((line, rec));
    }
    Ok(out)
}

/// Dataset keys, plus the generator-setting echo lines in file order.
type MetaFields = (BTreeMap<String, String>, Vec<(String, String)>);

fn parse_meta(path: &Path) -> Result<MetaFields> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    let mut extra = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        if k.starts_with("spec.") {
            extra.push((k.to_string(), v.to_string()));
        } else {
            map.insert(k.to_string(), v.to_string());
        }
    }
    Ok((map, extra))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    let (meta, extra) = parse_meta(&meta_path)?;
    let get = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::integrity(format!("{} lacks key {k}", meta_path.display())))
    };
    let tasks: usize = parse_field(&meta_path, 0, get("tasks")?, "task count")?;
    let cluster_map = match meta.get("cluster_map") {
        Some(s) if !s.is_empty() => Some(
            s.split(',')
                .map(|c| parse_field(&meta_path, 0, c, "cluster id"))
                .collect::<Result<Vec<usize>>>()?,
        ),
        _ => None,
    };
    let seed = meta
        .get("seed")
        .map(|s| parse_field(&meta_path, 0, s, "seed"))
        .transpose()?;

    let graphs_path = dir.join(GRAPHS_FILE);
    let mut sizes: Vec<usize> = Vec::new();
    for (line, rec) in read_records(&graphs_path, &["graph_id", "n"])? {
        let id: usize = parse_field(&graphs_path, line, &rec[0], "graph id")?;
        if id != sizes.len() {
            return Err(Error::Parse {
                path: graphs_path.clone(),
                line,
                msg: format!("graph ids must be 0, 1, 2, ...; found {id}"),
            });
        }
        sizes.push(parse_field(&graphs_path, line, &rec[1], "node count")?);
    }
    if sizes.is_empty() {
        return Err(Error::integrity(format!("{} lists no graphs", graphs_path.display())));
    }
    let train_graphs = match meta.get("train_graphs") {
        Some(s) => parse_field(&meta_path, 0, s, "train split")?,
        None => sizes.len(),
    };

    let edges_path = dir.join(EDGES_FILE);
    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); sizes.len()];
    for (line, rec) in read_records(&edges_path, &["graph_id", "u", "v"])? {
        let g: usize = parse_field(&edges_path, line, &rec[0], "graph id")?;
        let u: usize = parse_field(&edges_path, line, &rec[1], "node id")?;
        let v: usize = parse_field(&edges_path, line, &rec[2], "node id")?;
        let n = *sizes
            .get(g)
            .ok_or_else(|| Error::integrity(format!("{}:{line}: unknown graph {g}", edges_path.display())))?;
        if u >= n || v >= n {
            return Err(Error::integrity(format!(
                "{}:{line}: edge ({u}, {v}) references a node outside graph {g} with {n} nodes",
                edges_path.display()
            )));
        }
        edges[g].push((u, v));
    }

    let labels_path = dir.join(LABELS_FILE);
    let mut header = vec!["graph_id".to_string()];
    header.extend((0..tasks).map(|t| format!("task_{t}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut labels: Vec<Option<Vec<Label>>> = vec![None; sizes.len()];
    for (line, rec) in read_records(&labels_path, &header_refs)? {
        let g: usize = parse_field(&labels_path, line, &rec[0], "graph id")?;
        let slot = labels
            .get_mut(g)
            .ok_or_else(|| Error::integrity(format!("{}:{line}: unknown graph {g}", labels_path.display())))?;
        let row = (1..=tasks)
            .map(|i| match rec[i].trim() {
                "" => Ok(None),
                "1" => Ok(Some(true)),
                "0" => Ok(Some(false)),
                other => Err(Error::Parse {
                    path: labels_path.clone(),
                    line,
                    msg: format!("label must be 0, 1 or empty, got {other:?}"),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        if slot.replace(row).is_some() {
            return Err(Error::integrity(format!(
                "{}:{line}: duplicate labels for graph {g}",
                labels_path.display()
            )));
        }
    }

    let graphs = sizes
        .into_iter()
        .zip(edges)
        .zip(labels)
        .enumerate()
        .map(|(g, ((n, e), y))| {
            let y = y.ok_or_else(|| Error::integrity(format!("graph {g} has no label row")))?;
            Graph::new(n, e, y).map_err(|err| Error::integrity(format!("graph {g}: {err}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        graphs,
        DatasetMeta {
            tasks,
            train_graphs,
            cluster_map,
            seed,
            extra,
        },
    )
}

fn write_csv(path: &Path, rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_dataset(dir: &Path, d: &Dataset) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tasks = d.meta.tasks;

    let graphs = std::iter::once(vec!["graph_id".into(), "n".into()]).chain(
        d.graphs
            .iter()
            .enumerate()
            .map(|(i, g)| vec![i.to_string(), g.num_nodes().to_string()]),
    );
    write_csv(&dir.join(GRAPHS_FILE), graphs)?;

    let edges = std::iter::once(vec!["graph_id".into(), "u".into(), "v".into()]).chain(
        d.graphs.iter().enumerate().flat_map(|(i, g)| {
            g.edges()
                .iter()
                .map(move |(u, v)| vec![i.to_string(), u.to_string(), v.to_string()])
        }),
    );
    write_csv(&dir.join(EDGES_FILE), edges)?;

    let mut header = vec!["graph_id".to_string()];
    header.extend((0..tasks).map(|t| format!("task_{t}")));
    let labels = std::iter::once(header).chain(d.graphs.iter().enumerate().map(|(i, g)| {
        let mut row = vec![i.to_string()];
        row.extend(g.labels().iter().map(|l| match l {
            Some(true) => "1".to_string(),
            Some(false) => "0".to_string(),
            None => String::new(),
        }));
        row
    }));
    write_csv(&dir.join(LABELS_FILE), labels)?;

    let mut meta = format!(
        "format={FORMAT}\ngraphs={}\ntasks={tasks}\ntrain_graphs={}\n",
        d.graphs.len(),
        d.meta.train_graphs
    );
    if let Some(map) = &d.meta.cluster_map {
        let clusters = map.iter().max().map_or(0, |c| c + 1);
        let joined: Vec<String> = map.iter().map(|c| c.to_string()).collect();
        meta.push_str(&format!("clusters={clusters}\ncluster_map={}\n", joined.join(",")));
    }
    if let Some(seed) = d.meta.seed {
        meta.push_str(&format!("seed={seed}\n"));
    }
    for (k, v) in &d.meta.extra {
        meta.push_str(&format!("{k}={v}\n"));
    }
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    Ok(DATASET_FILES.iter().map(|f| dir.join(f)).collect())
}
