//! Spatial graphs and the two propagation operators used by the streams:
//! the symmetric-normalized static adjacency and the embedding-derived
//! adaptive adjacency.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Undirected, non-negatively weighted graph over `n_nodes` nodes.
///
/// Edges are stored once per unordered pair with `src < dst`; duplicates
/// in the input are summed.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGraph {
    n_nodes: usize,
    edges: Vec<(usize, usize, f64)>,
}

impl SpatialGraph {
    pub fn new(n_nodes: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::Validation("graph needs at least one node".into()));
        }
        let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (src, dst, w) in edges {
            if src >= n_nodes || dst >= n_nodes {
                return Err(Error::Validation(format!(
                    "edge ({src}, {dst}) references a node >= {n_nodes}"
                )));
            }
            if src == dst {
                return Err(Error::Validation(format!("self-loop on node {src}")));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Validation(format!("edge ({src}, {dst}) has weight {w}")));
            }
            *merged.entry((src.min(dst), src.max(dst))).or_insert(0.0) += w;
        }
        Ok(SpatialGraph {
            n_nodes,
            edges: merged.into_iter().map(|((s, d), w)| (s, d, w)).collect(),
        })
    }

    /// Ring in which every node links to its `k` nearest neighbours on each side.
    pub fn ring_lattice(n_nodes: usize, k: usize) -> Result<Self> {
        // wrap-around pairs can repeat on small rings; keep one copy of each
        let mut pairs = std::collections::BTreeSet::new();
        for i in 0..n_nodes {
            for off in 1..=k {
                let j = (i + off) % n_nodes;
                if j != i {
                    pairs.insert((i.min(j), i.max(j)));
                }
            }
        }
        Self::new(n_nodes, pairs.into_iter().map(|(a, b)| (a, b, 1.0)))
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    /// Dense symmetric adjacency without self-loops.
    pub fn dense_adjacency(&self) -> Tensor {
        let n = self.n_nodes;
        let mut a = Tensor::zeros(&[n, n]);
        let d = a.data_mut();
        for &(s, t, w) in &self.edges {
            d[s * n + t] += w;
            d[t * n + s] += w;
        }
        a
    }

    /// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
    pub fn normalize_adjacency(&self) -> Tensor {
        let n = self.n_nodes;
        let mut a = self.dense_adjacency();
        let d = a.data_mut();
        for i in 0..n {
            d[i * n + i] += 1.0;
        }
        let inv_sqrt: Vec<f64> = (0..n)
            .map(|i| 1.0 / d[i * n..(i + 1) * n].iter().sum::<f64>().sqrt())
            .collect();
        for i in 0..n {
            for j in 0..n {
                d[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
            }
        }
        a
    }

    /// Read an edge-list CSV with header `src,dst,weight`.
    pub fn load(path: &Path, n_nodes: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, col: Option<usize>, detail: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            col,
            detail,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == "src,dst,weight" => {}
            Some((_, header)) => {
                return Err(parse_err(1, None, format!("expected header `src,dst,weight`, got `{header}`")))
            }
            None => return Err(parse_err(1, None, "missing header".into())),
        }
        let mut edges = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(parse_err(lineno, None, format!("expected 3 fields, got {}", fields.len())));
            }
            let idx = |col: usize| {
                fields[col]
                    .parse::<usize>()
                    .map_err(|e| parse_err(lineno, Some(col + 1), format!("`{}`: {e}", fields[col])))
            };
            let (src, dst) = (idx(0)?, idx(1)?);
            let w = fields[2]
                .parse::<f64>()
                .map_err(|e| parse_err(lineno, Some(3), format!("`{}`: {e}", fields[2])))?;
            edges.push((src, dst, w));
        }
        Self::new(n_nodes, edges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("src,dst,weight\n");
        for &(s, d, w) in &self.edges {
            out.push_str(&format!("{s},{d},{w}\n"));
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Learnable per-node embedding table `[N, d_e]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddings {
    table: Tensor,
}

impl NodeEmbeddings {
    pub fn new(table: Tensor) -> Result<Self> {
        if table.shape().len() != 2 {
            return Err(Error::dim("node_embeddings", format!("{:?}", table.shape())));
        }
        Ok(NodeEmbeddings { table })
    }

    pub fn n_nodes(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut Tensor {
        &mut self.table
    }

    pub fn into_table(self) -> Tensor {
        self.table
    }
}

/// Row-normalized `relu(E·Eᵀ)` recorded on the tape so gradients reach `E`.
/// Rows that are entirely zero fall back to the uniform `1/N`.
pub fn adaptive_adjacency(tape: &mut Tape, embeddings: Var) -> Result<Var> {
    let et = tape.transpose(embeddings)?;
    let gram = tape.matmul(embeddings, et)?;
    let pos = tape.relu(gram)?;
    tape.row_normalize(pos)
}

/// Gradient-free evaluation of [`adaptive_adjacency`].
pub fn adaptive_adjacency_value(emb: &NodeEmbeddings) -> Result<Tensor> {
    let mut tape = Tape::new();
    let e = tape.constant(emb.table().clone());
    let a = adaptive_adjacency(&mut tape, e)?;
    Ok(tape.value(a).clone())
}
