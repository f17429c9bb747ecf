//! Attributed graph data model and the edge / feature text formats.
//!
//! Edge file: a header line `n m` (node count, attribute count) followed by one
//! undirected edge per line, `u<TAB>v`, with 0-based ids. Feature file: sparse
//! triplets `node<TAB>attr<TAB>value`; absent entries are zero.

use std::io::{BufRead, Write};

use crate::error::{DealError, Result};

pub type NodeId = usize;

/// Canonical undirected edge key with `u < v`.
#[inline]
pub fn edge_key(u: NodeId, v: NodeId) -> (NodeId, NodeId) {
    if u < v {
        (u, v)
    } else {
        (v, u)
    }
}

/// Compressed neighbour lists. Every list is sorted, so membership is a binary search.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    neighbors: Vec<NodeId>,
}

impl Adjacency {
    /// Builds the symmetric adjacency of `edges` over `num_nodes` nodes.
    /// Edges must be canonical, deduplicated, and in range.
    pub fn from_edges(num_nodes: usize, edges: &[(NodeId, NodeId)]) -> Self {
        let mut degree = vec![0usize; num_nodes];
        for &(u, v) in edges {
            degree[u] += 1;
            degree[v] += 1;
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut fill = offsets[..num_nodes].to_vec();
        let mut neighbors = vec![0; offsets[num_nodes]];
        for &(u, v) in edges {
            neighbors[fill[u]] = v;
            fill[u] += 1;
            neighbors[fill[v]] = u;
            fill[v] += 1;
        }
        for i in 0..num_nodes {
            neighbors[offsets[i]..offsets[i + 1]].sort_unstable();
        }
        Adjacency { offsets, neighbors }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    pub fn neighbors(&self, u: NodeId) -> &[NodeId] {
        &self.neighbors[self.offsets[u]..self.offsets[u + 1]]
    }

    #[inline]
    pub fn degree(&self, u: NodeId) -> usize {
        self.offsets[u + 1] - self.offsets[u]
    }

    #[inline]
    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        let (a, b) = if self.degree(u) <= self.degree(v) {
            (u, v)
        } else {
            (v, u)
        };
        self.neighbors(a).binary_search(&b).is_ok()
    }
}

/// Row-compressed sparse matrix; one row per node, columns are attribute ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    width: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseRows {
    /// Builds rows from `(row, col, value)` triplets. Entries within a row are
    /// sorted by column; duplicate coordinates are rejected.
    pub fn from_triplets(
        num_rows: usize,
        width: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut offsets = vec![0usize; num_rows + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals = Vec::with_capacity(triplets.len());
        let mut prev: Option<(usize, usize)> = None;
        for &(r, c, x) in &triplets {
            if r >= num_rows {
                return Err(DealError::Validation(format!(
                    "feature row {r} out of range (n = {num_rows})"
                )));
            }
            if c >= width {
                return Err(DealError::Validation(format!(
                    "attribute id {c} out of range (m = {width})"
                )));
            }
            if !x.is_finite() {
                return Err(DealError::Validation(format!(
                    "non-finite feature value at ({r}, {c})"
                )));
            }
            if prev == Some((r, c)) {
                return Err(DealError::Validation(format!(
                    "duplicate feature entry ({r}, {c})"
                )));
            }
            prev = Some((r, c));
            offsets[r + 1] += 1;
            cols.push(c);
            vals.push(x);
        }
        for i in 0..num_rows {
            offsets[i + 1] += offsets[i];
        }
        Ok(SparseRows {
            width,
            offsets,
            cols,
            vals,
        })
    }

    /// A single-row matrix from a dense vector (zeros are dropped).
    pub fn from_dense_row(values: &[f64]) -> Result<Self> {
        let triplets = values
            .iter()
            .enumerate()
            .filter(|(_, x)| **x != 0.0)
            .map(|(c, &x)| (0, c, x))
            .collect();
        Self::from_triplets(1, values.len(), triplets)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.num_rows()).flat_map(move |i| {
            let (c, v) = self.row(i);
            c.iter().zip(v).map(move |(&c, &v)| (i, c, v))
        })
    }
}

/// Counts of input lines that were repaired rather than rejected.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub self_loops_dropped: usize,
    pub duplicates_dropped: usize,
}

impl LoadReport {
    pub fn warnings(&self) -> usize {
        self.self_loops_dropped + self.duplicates_dropped
    }
}

/// Undirected, unweighted graph with sparse per-node attribute vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributedGraph {
    num_nodes: usize,
    num_attrs: usize,
    edges: Vec<(NodeId, NodeId)>,
    adjacency: Adjacency,
    features: SparseRows,
}

impl AttributedGraph {
    /// Validates and assembles a graph. Self-loops and duplicate (including
    /// reversed) edges are dropped and counted in the returned report.
    pub fn new(
        num_nodes: usize,
        num_attrs: usize,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
        features: SparseRows,
    ) -> Result<(Self, LoadReport)> {
        let mut report = LoadReport::default();
        let mut canon = Vec::new();
        for (u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(DealError::Validation(format!(
                    "edge ({u}, {v}) has endpoint out of range (n = {num_nodes})"
                )));
            }
            if u == v {
                report.self_loops_dropped += 1;
                continue;
            }
            canon.push(edge_key(u, v));
        }
        let before = canon.len();
        canon.sort_unstable();
        canon.dedup();
        report.duplicates_dropped = before - canon.len();
        if canon.is_empty() {
            return Err(DealError::Validation("graph has no edges".into()));
        }
        if features.num_rows() != num_nodes || features.width() != num_attrs {
            return Err(DealError::Shape(format!(
                "features are {}x{}, graph is {}x{}",
                features.num_rows(),
                features.width(),
                num_nodes,
                num_attrs
            )));
        }
        let adjacency = Adjacency::from_edges(num_nodes, &canon);
        Ok((
            AttributedGraph {
                num_nodes,
                num_attrs,
                edges: canon,
                adjacency,
                features,
            },
            report,
        ))
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_attrs(&self) -> usize {
        self.num_attrs
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Canonical (`u < v`) edges in sorted order.
    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn features(&self) -> &SparseRows {
        &self.features
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        u != v && self.adjacency.has_edge(u, v)
    }

    /// Writes the edge file format.
    pub fn write_edges(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{} {}", self.num_nodes, self.num_attrs)?;
        for &(u, v) in &self.edges {
            writeln!(out, "{u}\t{v}")?;
        }
        Ok(())
    }

    /// Writes the feature file format. Values use the shortest round-trip
    /// decimal representation.
    pub fn write_features(&self, mut out: impl Write) -> Result<()> {
        for (r, c, x) in self.features.triplets() {
            writeln!(out, "{r}\t{c}\t{x:?}")?;
        }
        Ok(())
    }
}

fn parse_field<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| DealError::parse(line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| DealError::parse(line, format!("invalid {what} `{tok}`")))
}

/// Reads a graph from an edge stream and a feature stream.
pub fn load_graph(edges: impl BufRead, features: impl BufRead) -> Result<(AttributedGraph, LoadReport)> {
    let mut lines = edges.lines().enumerate();
    let (num_nodes, num_attrs) = loop {
        let Some((i, line)) = lines.next() else {
            return Err(DealError::parse(1, "missing `n m` header"));
        };
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        let n: usize = parse_field(tok.next(), i + 1, "node count")?;
        let m: usize = parse_field(tok.next(), i + 1, "attribute count")?;
        if tok.next().is_some() {
            return Err(DealError::parse(i + 1, "header must be `n m`"));
        }
        break (n, m);
    };

    let mut edge_list = Vec::new();
    for (i, line) in lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        let u: usize = parse_field(tok.next(), i + 1, "source id")?;
        let v: usize = parse_field(tok.next(), i + 1, "target id")?;
        if tok.next().is_some() {
            return Err(DealError::parse(i + 1, "expected `u<TAB>v`"));
        }
        edge_list.push((u, v));
    }

    let mut triplets = Vec::new();
    for (i, line) in features.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        let r: usize = parse_field(tok.next(), i + 1, "node id")?;
        let c: usize = parse_field(tok.next(), i + 1, "attribute id")?;
        let x: f64 = parse_field(tok.next(), i + 1, "value")?;
        if tok.next().is_some() {
            return Err(DealError::parse(i + 1, "expected `node<TAB>attr<TAB>value`"));
        }
        triplets.push((r, c, x));
    }
    let features = SparseRows::from_triplets(num_nodes, num_attrs, triplets)?;
    AttributedGraph::new(num_nodes, num_attrs, edge_list, features)
}

/// Convenience wrapper over [`load_graph`] for file paths.
pub fn load_graph_files(
    edges: impl AsRef<std::path::Path>,
    features: impl AsRef<std::path::Path>,
) -> Result<(AttributedGraph, LoadReport)> {
    let open = |p: &std::path::Path| {
        std::fs::File::open(p).map(std::io::BufReader::new).map_err(|e| {
            DealError::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", p.display()),
            ))
        })
    };
    load_graph(open(edges.as_ref())?, open(features.as_ref())?)
}
