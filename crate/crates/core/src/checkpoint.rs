//! Checkpoint directory: a text manifest, `model.bin` with the backbone,
//! relation matrices and heads, and one `adapter.<layer>.<id>.bin` per adapter
//! so adapters can be swapped or removed individually.
//!
//! Tensor file layout (little endian): magic `GPTN`, `u32` version, `u32`
//! tensor count, then per tensor `u32` name length, name bytes, `u64` rows,
//! `u64` cols and `rows * cols` `f64` values in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::adapter::{AdapterBank, AdapterKind, AdapterParams};
use crate::backbone::{Activation, Backbone, GcnLayer};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, RegLevel};
use crate::routing::RelationMatrix;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MODEL_FILE: &str = "model.bin";
const MAGIC: &[u8; 4] = b"GPTN";
const VERSION: u32 = 1;
const FORMAT: &str = "graphprior-checkpoint/1";

pub fn encode_tensors(tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::integrity(format!("{} is truncated", self.file)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8], file: &str) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0, file };
    if r.take(4)? != MAGIC {
        return Err(Error::integrity(format!("{file} is not a tensor file")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::integrity(format!("{file} has unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::integrity(format!("{file} holds a non-UTF-8 tensor name")))?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::integrity(format!("{file}: tensor {name} has an impossible shape")))?;
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::from_vec(rows, cols, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::integrity(format!("{file} has trailing bytes")));
    }
    Ok(out)
}

fn config_entries(c: &ModelConfig, frozen: bool) -> Vec<(String, String)> {
    let layers: Vec<String> = c.insertion_layers().iter().map(|l| l.to_string()).collect();
    vec![
        ("model.d_in".into(), c.d_in.to_string()),
        ("model.d_hidden".into(), c.d_hidden.to_string()),
        ("model.depth".into(), c.depth.to_string()),
        ("model.tasks".into(), c.tasks.to_string()),
        ("model.adapters".into(), c.adapters.to_string()),
        ("model.rank".into(), c.rank.to_string()),
        ("model.insertion".into(), layers.join(",")),
        ("model.adapter_kind".into(), c.adapter_kind.name().into()),
        ("model.per_layer_routing".into(), c.per_layer_routing.to_string()),
        ("model.reg_level".into(), c.reg_level.name().into()),
        ("model.min_rank_ratio".into(), c.min_rank_ratio.to_string()),
        ("model.frozen".into(), frozen.to_string()),
    ]
}

fn adapter_file(a: &AdapterParams) -> String {
    format!("{}.bin", a.name())
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `model` to `dir`. `extra` key/value pairs (for example routing
/// settings) are stored in the manifest and handed back by [`load_checkpoint`].
pub fn save_checkpoint(dir: &Path, model: &Model, extra: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("format={FORMAT}\n");
    for (k, v) in config_entries(&model.config, model.backbone.frozen())
        .iter()
        .chain(extra)
    {
        manifest.push_str(&format!("{k}={v}\n"));
    }

    let mut main: Vec<(String, &Tensor)> = model
        .backbone
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| (format!("backbone.{l}.w"), &layer.w))
        .collect();
    for (i, r) in model.relations.iter().enumerate() {
        main.push((format!("relation.{i}"), &r.scores));
    }
    main.push(("head.w".into(), &model.head_w));
    main.push(("head.b".into(), &model.head_b));

    let mut files: Vec<(String, Vec<(String, &Tensor)>)> = vec![(MODEL_FILE.into(), main)];
    for a in model.bank.iter() {
        files.push((
            adapter_file(a),
            vec![(format!("{}.u", a.name()), &a.u), (format!("{}.v", a.name()), &a.v)],
        ));
    }
    for (file, tensors) in &files {
        let bytes = encode_tensors(tensors);
        let path = dir.join(file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        manifest.push_str(&format!("file={file},{}\n", digest(&bytes)));
        for (name, t) in tensors {
            manifest.push_str(&format!("tensor={file},{name},{},{}\n", t.rows(), t.cols()));
        }
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

struct Manifest {
    keys: BTreeMap<String, String>,
    files: Vec<(String, String)>,
    tensors: Vec<(String, String, usize, usize)>,
}

fn parse_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut m = Manifest {
        keys: BTreeMap::new(),
        files: Vec::new(),
        tensors: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        let bad = |msg: &str| Error::Parse {
            path: path.clone(),
            line: i + 1,
            msg: msg.to_string(),
        };
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
        match k {
            "file" => {
                let (f, h) = v.split_once(',').ok_or_else(|| bad("expected file=<name>,<sha256>"))?;
                m.files.push((f.to_string(), h.to_string()));
            }
            "tensor" => {
                let parts: Vec<&str> = v.split(',').collect();
                let [f, name, rows, cols] = parts[..] else {
                    return Err(bad("expected tensor=<file>,<name>,<rows>,<cols>"));
                };
                let rows = rows.parse().map_err(|_| bad("bad row count"))?;
                let cols = cols.parse().map_err(|_| bad("bad column count"))?;
                m.tensors.push((f.to_string(), name.to_string(), rows, cols));
            }
            _ => {
                m.keys.insert(k.to_string(), v.to_string());
            }
        }
    }
    if m.keys.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(Error::integrity(format!(
            "{} is not a {FORMAT} manifest",
            path.display()
        )));
    }
    Ok(m)
}

fn config_from(keys: &BTreeMap<String, String>) -> Result<(ModelConfig, bool)> {
    let get = |k: &str| {
        keys.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::integrity(format!("checkpoint manifest lacks {k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::integrity(format!("checkpoint manifest has a bad {k}")))
    };
    let flag = |k: &str| -> Result<bool> {
        get(k)?
            .parse()
            .map_err(|_| Error::integrity(format!("checkpoint manifest has a bad {k}")))
    };
    let insertion = get("model.insertion")?;
    let insertion = if insertion.is_empty() {
        Vec::new()
    } else {
        insertion
            .split(',')
            .map(|l| {
                l.parse()
                    .map_err(|_| Error::integrity("checkpoint manifest has a bad model.insertion"))
            })
            .collect::<Result<Vec<usize>>>()?
    };
    let config = ModelConfig {
        d_in: num("model.d_in")?,
        d_hidden: num("model.d_hidden")?,
        depth: num("model.depth")?,
        tasks: num("model.tasks")?,
        adapters: num("model.adapters")?,
        rank: num("model.rank")?,
        insertion: Some(insertion),
        adapter_kind: AdapterKind::parse(get("model.adapter_kind")?)?,
        per_layer_routing: flag("model.per_layer_routing")?,
        reg_level: RegLevel::parse(get("model.reg_level")?)?,
        min_rank_ratio: num("model.min_rank_ratio")?,
    };
    config
        .validate()
        .map_err(|e| Error::integrity(format!("checkpoint config: {e}")))?;
    Ok((config, flag("model.frozen")?))
}

/// Reads a checkpoint written by [`save_checkpoint`]. Returns the model and
/// every manifest key that is not part of the model description.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, BTreeMap<String, String>)> {
    let m = parse_manifest(dir)?;
    let (config, frozen) = config_from(&m.keys)?;

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for (file, expected) in &m.files {
        let path = dir.join(file);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let what = file.strip_suffix(".bin").unwrap_or(file);
                return Err(Error::integrity(format!("checkpoint is missing {what} (file {file})")));
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        if digest(&bytes) != *expected {
            return Err(Error::integrity(format!("{file} does not match its recorded checksum")));
        }
        for (name, t) in decode_tensors(&bytes, file)? {
            tensors.insert(name, t);
        }
    }
    for (file, name, rows, cols) in &m.tensors {
        match tensors.get(name) {
            Some(t) if t.shape() == (*rows, *cols) => {}
            Some(t) => {
                return Err(Error::integrity(format!(
                    "{file}: {name} is {:?}, manifest says ({rows}, {cols})",
                    t.shape()
                )))
            }
            None => return Err(Error::integrity(format!("{file} lacks tensor {name}"))),
        }
    }
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::integrity(format!("checkpoint is missing {name}")))
    };

    let layers = (0..config.depth)
        .map(|l| {
            Ok(GcnLayer {
                w: take(&format!("backbone.{l}.w"))?,
                activation: if l + 1 == config.depth {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let backbone = Backbone::from_layers(layers, frozen)?;

    let mut slots = Vec::new();
    for layer in config.insertion_layers() {
        let mut adapters = Vec::new();
        for id in 0..config.adapters {
            let name = format!("adapter.{layer}.{id}");
            let (u, v) = match (take(&format!("{name}.u")), take(&format!("{name}.v"))) {
                (Ok(u), Ok(v)) => (u, v),
                _ => return Err(Error::integrity(format!("checkpoint is missing {name}"))),
            };
            if u.shape() != (config.d_hidden, config.rank) || v.shape() != (config.rank, config.d_hidden) {
                return Err(Error::integrity(format!("{name} has the wrong shape")));
            }
            adapters.push(AdapterParams {
                id,
                layer,
                u: u.with_requires_grad(true),
                v: v.with_requires_grad(true),
            });
        }
        slots.push((layer, adapters));
    }
    let bank = AdapterBank::from_slots(slots, config.adapter_kind)?;

    let relations = (0..config.relation_count())
        .map(|i| {
            let r = take(&format!("relation.{i}"))?;
            if r.shape() != (config.tasks, config.adapters) {
                return Err(Error::integrity(format!("relation.{i} has the wrong shape")));
            }
            RelationMatrix::from_tensor(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let head_w = take("head.w")?;
    let head_b = take("head.b")?;
    if head_w.shape() != (config.d_hidden, config.tasks) || head_b.shape() != (1, config.tasks) {
        return Err(Error::integrity("task heads have the wrong shape"));
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::integrity(format!("checkpoint holds unexpected tensor {name}")));
    }
    if backbone.d_in() != config.d_in || backbone.d_hidden() != config.d_hidden {
        return Err(Error::integrity("backbone shapes disagree with the manifest"));
    }

    let extra = m
        .keys
        .into_iter()
        .filter(|(k, _)| k != "format" && !k.starts_with("model."))
        .collect();
    Ok((
        Model {
            config,
            backbone,
            bank,
            relations,
            head_w: head_w.with_requires_grad(true),
            head_b: head_b.with_requires_grad(true),
        },
        extra,
    ))
}
