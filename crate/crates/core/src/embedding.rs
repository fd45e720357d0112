//! The embedding table and the skip-gram objective with negative
//! sampling.
//!
//! One vector per graph node, plus one scalar weight per diagnostic
//! event type used when composing patient vectors at prediction time.
//! Updates compute every gradient at pre-update values, then apply
//! weight decay and the gradient step together, so a step with rate
//! `lr` moves each touched vector to `(1 - lr*lambda)*x - lr*grad`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ehr::{EventType, DIAGNOSTIC_TYPES};
use crate::hin::{HeteroGraph, NodeType};

/// Dot-product arguments to the sigmoid are clamped to this magnitude.
pub const SIGMOID_CLAMP: f64 = 40.0;
/// Sigmoid outputs are kept this far from 0 and 1 before logs.
pub const LOG_EPS: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
    1.0 / (1.0 + (-x).exp())
}

fn ln_sigmoid(x: f64) -> f64 {
    sigmoid(x).clamp(LOG_EPS, 1.0 - LOG_EPS).ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeLabel {
    pub node_type: NodeType,
    pub identity: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: {msg}")]
    Binary { path: PathBuf, msg: String },
}

/// Dense embedding table addressed by node row. Built over a graph, row
/// ids coincide with graph node ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    dim: usize,
    vectors: Vec<f64>,
    labels: Vec<NodeLabel>,
    index: HashMap<(NodeType, String), usize>,
    type_weights: BTreeMap<EventType, f64>,
}

fn default_type_weights() -> BTreeMap<EventType, f64> {
    DIAGNOSTIC_TYPES
        .into_iter()
        .map(|t| (t, 1.0 / DIAGNOSTIC_TYPES.len() as f64))
        .collect()
}

impl EmbeddingModel {
    fn from_labels(labels: Vec<NodeLabel>, dim: usize, seed: u64) -> EmbeddingModel {
        assert!(dim > 0, "embedding dimension must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half_range = 0.5 / dim as f64;
        let vectors: Vec<f64> = (0..labels.len() * dim)
            .map(|_| (rng.random::<f64>() - 0.5) * 2.0 * half_range)
            .collect();
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| ((l.node_type, l.identity.clone()), i))
            .collect();
        EmbeddingModel {
            dim,
            vectors,
            labels,
            index,
            type_weights: default_type_weights(),
        }
    }

    /// Anonymous table for numeric work; rows are labeled `node<i>`.
    pub fn init(node_count: usize, dim: usize, seed: u64) -> EmbeddingModel {
        let labels = (0..node_count)
            .map(|i| NodeLabel {
                node_type: NodeType::Patient,
                identity: format!("node{i}"),
            })
            .collect();
        EmbeddingModel::from_labels(labels, dim, seed)
    }

    /// Table aligned with a graph: row i embeds graph node i.
    pub fn for_graph(graph: &HeteroGraph, dim: usize, seed: u64) -> EmbeddingModel {
        let labels = graph
            .nodes()
            .iter()
            .map(|n| NodeLabel {
                node_type: n.node_type,
                identity: n.identity.clone(),
            })
            .collect();
        EmbeddingModel::from_labels(labels, dim, seed)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node_count(&self) -> usize {
        self.labels.len()
    }

    pub fn vector(&self, id: usize) -> &[f64] {
        &self.vectors[id * self.dim..(id + 1) * self.dim]
    }

    pub fn vector_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.vectors[id * self.dim..(id + 1) * self.dim]
    }

    pub fn label(&self, id: usize) -> &NodeLabel {
        &self.labels[id]
    }

    pub fn lookup(&self, node_type: NodeType, identity: &str) -> Option<usize> {
        self.index.get(&(node_type, identity.to_string())).copied()
    }

    pub fn ids_of_type(&self, node_type: NodeType) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.node_type == node_type)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn type_weight(&self, t: EventType) -> f64 {
        *self.type_weights.get(&t).unwrap_or(&0.0)
    }

    pub fn set_type_weight(&mut self, t: EventType, w: f64) {
        self.type_weights.insert(t, w);
    }

    pub fn type_weights(&self) -> &BTreeMap<EventType, f64> {
        &self.type_weights
    }

    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "hinmodel 1")?;
        writeln!(out, "dim {}", self.dim)?;
        writeln!(out, "weights {}", self.type_weights.len())?;
        for (t, w) in &self.type_weights {
            writeln!(out, "{}\t{:.17e}", t.abbrev(), w)?;
        }
        writeln!(out, "nodes {}", self.labels.len())?;
        for (i, label) in self.labels.iter().enumerate() {
            write!(out, "{}\t{}\t", label.node_type.abbrev(), label.identity)?;
            let row = self.vector(i);
            for (k, x) in row.iter().enumerate() {
                if k > 0 {
                    write!(out, " ")?;
                }
                write!(out, "{x:.17e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn save_text(&self, path: &Path) -> Result<(), ModelError> {
        let io_err = |source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = fs::File::create(path).map_err(io_err)?;
        self.write_text(BufWriter::new(file)).map_err(io_err)
    }

    pub fn load_text(path: &Path) -> Result<EmbeddingModel, ModelError> {
        let file = fs::File::open(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_text(BufReader::new(file), path)
    }

    fn read_text<R: BufRead>(reader: R, path: &Path) -> Result<EmbeddingModel, ModelError> {
        let mut lines = reader.lines().enumerate();
        let mut next = || -> Result<(usize, String), ModelError> {
            match lines.next() {
                Some((i, Ok(line))) => Ok((i + 1, line)),
                Some((i, Err(e))) => Err(ModelError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: e.to_string(),
                }),
                None => Err(ModelError::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    msg: "unexpected end of file".into(),
                }),
            }
        };
        let parse_err = |line: usize, msg: String| ModelError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };

        let (ln, header) = next()?;
        if header.trim() != "hinmodel 1" {
            return Err(parse_err(ln, format!("bad header {header:?}")));
        }
        let (ln, dim_line) = next()?;
        let dim: usize = dim_line
            .strip_prefix("dim ")
            .and_then(|v| v.parse().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| parse_err(ln, format!("bad dim line {dim_line:?}")))?;
        let (ln, weights_line) = next()?;
        let weight_count: usize = weights_line
            .strip_prefix("weights ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| parse_err(ln, format!("bad weights line {weights_line:?}")))?;
        let mut type_weights = BTreeMap::new();
        for _ in 0..weight_count {
            let (ln, line) = next()?;
            let Some((ty, w)) = line.split_once('\t') else {
                return Err(parse_err(ln, format!("bad weight line {line:?}")));
            };
            let t = EventType::parse(ty)
                .ok_or_else(|| parse_err(ln, format!("unknown event type {ty:?}")))?;
            let w: f64 = w
                .parse()
                .map_err(|_| parse_err(ln, format!("bad weight value {w:?}")))?;
            if type_weights.insert(t, w).is_some() {
                return Err(parse_err(ln, format!("duplicate weight for {ty}")));
            }
        }
        let (ln, nodes_line) = next()?;
        let node_count: usize = nodes_line
            .strip_prefix("nodes ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| parse_err(ln, format!("bad nodes line {nodes_line:?}")))?;

        let mut labels = Vec::with_capacity(node_count);
        let mut vectors = Vec::with_capacity(node_count * dim);
        let mut index = HashMap::with_capacity(node_count);
        for _ in 0..node_count {
            let (ln, line) = next()?;
            let mut parts = line.splitn(3, '\t');
            let (Some(ty), Some(identity), Some(row)) =
                (parts.next(), parts.next(), parts.next())
            else {
                return Err(parse_err(ln, format!("bad node line {line:?}")));
            };
            let node_type = NodeType::parse(ty)
                .ok_or_else(|| parse_err(ln, format!("unknown node type {ty:?}")))?;
            if identity.is_empty() {
                return Err(parse_err(ln, "empty node identity".into()));
            }
            let mut count = 0;
            for piece in row.split(' ') {
                let x: f64 = piece
                    .parse()
                    .map_err(|_| parse_err(ln, format!("bad vector component {piece:?}")))?;
                vectors.push(x);
                count += 1;
            }
            if count != dim {
                return Err(parse_err(ln, format!("expected {dim} components, got {count}")));
            }
            let id = labels.len();
            if index
                .insert((node_type, identity.to_string()), id)
                .is_some()
            {
                return Err(parse_err(ln, format!("duplicate node {ty} {identity:?}")));
            }
            labels.push(NodeLabel {
                node_type,
                identity: identity.to_string(),
            });
        }
        Ok(EmbeddingModel {
            dim,
            vectors,
            labels,
            index,
            type_weights,
        })
    }

    pub fn write_binary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(BINARY_MAGIC)?;
        out.write_all(&(self.dim as u64).to_le_bytes())?;
        out.write_all(&(self.type_weights.len() as u64).to_le_bytes())?;
        for (t, w) in &self.type_weights {
            write_str(&mut out, t.abbrev())?;
            out.write_all(&w.to_le_bytes())?;
        }
        out.write_all(&(self.labels.len() as u64).to_le_bytes())?;
        for (i, label) in self.labels.iter().enumerate() {
            write_str(&mut out, label.node_type.abbrev())?;
            write_str(&mut out, &label.identity)?;
            for x in self.vector(i) {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save_binary(&self, path: &Path) -> Result<(), ModelError> {
        let io_err = |source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = fs::File::create(path).map_err(io_err)?;
        self.write_binary(BufWriter::new(file)).map_err(io_err)
    }

    pub fn load_binary(path: &Path) -> Result<EmbeddingModel, ModelError> {
        let bytes = fs::read(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_binary(&bytes, path)
    }

    fn read_binary(bytes: &[u8], path: &Path) -> Result<EmbeddingModel, ModelError> {
        let err = |msg: &str| ModelError::Binary {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let mut cursor = bytes;
        let mut magic = [0u8; 8];
        cursor
            .read_exact(&mut magic)
            .map_err(|_| err("file too short for magic"))?;
        if &magic != BINARY_MAGIC {
            return Err(err("bad magic"));
        }
        let dim = read_u64(&mut cursor).ok_or_else(|| err("truncated dim"))? as usize;
        if dim == 0 {
            return Err(err("zero dim"));
        }
        let weight_count =
            read_u64(&mut cursor).ok_or_else(|| err("truncated weight count"))? as usize;
        let mut type_weights = BTreeMap::new();
        for _ in 0..weight_count {
            let ty = read_str(&mut cursor).ok_or_else(|| err("truncated weight type"))?;
            let t = EventType::parse(&ty).ok_or_else(|| err("unknown weight type"))?;
            let w = read_f64(&mut cursor).ok_or_else(|| err("truncated weight"))?;
            if type_weights.insert(t, w).is_some() {
                return Err(err("duplicate weight type"));
            }
        }
        let node_count =
            read_u64(&mut cursor).ok_or_else(|| err("truncated node count"))? as usize;
        let mut labels = Vec::with_capacity(node_count);
        let mut vectors = Vec::with_capacity(node_count.saturating_mul(dim));
        let mut index = HashMap::with_capacity(node_count);
        for _ in 0..node_count {
            let ty = read_str(&mut cursor).ok_or_else(|| err("truncated node type"))?;
            let node_type = NodeType::parse(&ty).ok_or_else(|| err("unknown node type"))?;
            let identity = read_str(&mut cursor).ok_or_else(|| err("truncated identity"))?;
            if identity.is_empty() {
                return Err(err("empty node identity"));
            }
            for _ in 0..dim {
                vectors.push(read_f64(&mut cursor).ok_or_else(|| err("truncated vector"))?);
            }
            let id = labels.len();
            if index.insert((node_type, identity.clone()), id).is_some() {
                return Err(err("duplicate node"));
            }
            labels.push(NodeLabel {
                node_type,
                identity,
            });
        }
        if !cursor.is_empty() {
            return Err(err("trailing bytes"));
        }
        Ok(EmbeddingModel {
            dim,
            vectors,
            labels,
            index,
            type_weights,
        })
    }

    /// Loads either on-disk form, telling them apart by the magic bytes.
    pub fn load(path: &Path) -> Result<EmbeddingModel, ModelError> {
        let bytes = fs::read(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if bytes.starts_with(BINARY_MAGIC) {
            Self::read_binary(&bytes, path)
        } else {
            Self::read_text(BufReader::new(bytes.as_slice()), path)
        }
    }
}

const BINARY_MAGIC: &[u8; 8] = b"HINMDL01";

fn write_str<W: Write>(out: &mut W, s: &str) -> std::io::Result<()> {
    out.write_all(&(s.len() as u32).to_le_bytes())?;
    out.write_all(s.as_bytes())
}

fn read_u64(cursor: &mut &[u8]) -> Option<u64> {
    let mut buf = [0u8; 8];
    cursor.read_exact(&mut buf).ok()?;
    Some(u64::from_le_bytes(buf))
}

fn read_f64(cursor: &mut &[u8]) -> Option<f64> {
    read_u64(cursor).map(f64::from_bits)
}

fn read_str(cursor: &mut &[u8]) -> Option<String> {
    let mut buf = [0u8; 4];
    cursor.read_exact(&mut buf).ok()?;
    let len = u32::from_le_bytes(buf) as usize;
    if cursor.len() < len {
        return None;
    }
    let (head, rest) = cursor.split_at(len);
    let s = String::from_utf8(head.to_vec()).ok()?;
    *cursor = rest;
    Some(s)
}

/// Skip-gram loss with negative sampling for one positive pair (v, c)
/// and drawn negatives: `-ln s(f(c)*f(v)) - sum_u ln s(-f(u)*f(v))`.
pub fn unsup_loss(model: &EmbeddingModel, v: usize, c: usize, negatives: &[usize]) -> f64 {
    let fv = model.vector(v);
    let mut loss = -ln_sigmoid(dot(model.vector(c), fv));
    for &u in negatives {
        loss -= ln_sigmoid(-dot(model.vector(u), fv));
    }
    loss
}

/// Accumulates `coeff * src` into the gradient slot for `id`.
fn accumulate(grads: &mut BTreeMap<usize, Vec<f64>>, dim: usize, id: usize, coeff: f64, src: &[f64]) {
    let slot = grads.entry(id).or_insert_with(|| vec![0.0; dim]);
    for (g, &x) in slot.iter_mut().zip(src) {
        *g += coeff * x;
    }
}

/// Applies decay plus gradient to every touched vector, ascending by id.
pub(crate) fn apply_updates(
    model: &mut EmbeddingModel,
    grads: &BTreeMap<usize, Vec<f64>>,
    lr: f64,
    lambda: f64,
) {
    let decay = 1.0 - lr * lambda;
    for (&id, grad) in grads {
        let row = model.vector_mut(id);
        for (x, &g) in row.iter_mut().zip(grad) {
            *x = decay * *x - lr * g;
        }
    }
}

/// One skip-gram step without regularization. Returns the pre-update loss.
pub fn unsup_step(
    model: &mut EmbeddingModel,
    v: usize,
    c: usize,
    negatives: &[usize],
    lr: f64,
) -> f64 {
    unsup_step_with_decay(model, v, c, negatives, lr, 0.0)
}

/// One skip-gram step moving every participant (v, c, each negative) to
/// `(1 - lr*lambda)*x - lr*grad`, all gradients taken pre-update.
pub fn unsup_step_with_decay(
    model: &mut EmbeddingModel,
    v: usize,
    c: usize,
    negatives: &[usize],
    lr: f64,
    lambda: f64,
) -> f64 {
    let dim = model.dim();
    let fv = model.vector(v).to_vec();
    let fc = model.vector(c).to_vec();
    let mut grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();

    let s_pos = dot(&fc, &fv);
    let mut loss = -ln_sigmoid(s_pos);
    let g_pos = -(1.0 - sigmoid(s_pos));
    accumulate(&mut grads, dim, c, g_pos, &fv);
    accumulate(&mut grads, dim, v, g_pos, &fc);

    for &u in negatives {
        let fu = model.vector(u).to_vec();
        let s_neg = dot(&fu, &fv);
        loss -= ln_sigmoid(-s_neg);
        let g_neg = sigmoid(s_neg);
        accumulate(&mut grads, dim, u, g_neg, &fv);
        accumulate(&mut grads, dim, v, g_neg, &fu);
    }

    apply_updates(model, &grads, lr, lambda);
    loss
}
