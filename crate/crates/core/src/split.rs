//! Deterministic train / validation / test partitions of node pairs.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DealError, Result};
use crate::graph::{edge_key, AttributedGraph, NodeId};

pub type Pair = (NodeId, NodeId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitMode {
    Transductive,
    Inductive,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::Transductive => "transductive",
            SplitMode::Inductive => "inductive",
        })
    }
}

impl FromStr for SplitMode {
    type Err = DealError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transductive" => Ok(SplitMode::Transductive),
            "inductive" => Ok(SplitMode::Inductive),
            _ => Err(DealError::Argument(format!("unknown split mode `{s}`"))),
        }
    }
}

/// Which evaluation pairs to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSet {
    Val,
    Test,
}

impl FromStr for EvalSet {
    type Err = DealError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" => Ok(EvalSet::Val),
            "test" => Ok(EvalSet::Test),
            _ => Err(DealError::Argument(format!("unknown evaluation set `{s}`"))),
        }
    }
}

/// A train / validation / test partition.
///
/// In inductive mode `hidden_nodes` are the test nodes and `val_hidden_nodes`
/// the validation nodes; neither set touches any training edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub train_edges: Vec<Pair>,
    pub val_pos: Vec<Pair>,
    pub val_neg: Vec<Pair>,
    pub test_pos: Vec<Pair>,
    pub test_neg: Vec<Pair>,
    pub hidden_nodes: Vec<NodeId>,
    pub val_hidden_nodes: Vec<NodeId>,
    pub seed: u64,
}

/// Recipe for regenerating splits per trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitRecipe {
    Transductive { val_frac: f64, test_frac: f64 },
    Inductive { hidden_frac: f64, val_frac: f64 },
}

impl SplitRecipe {
    pub fn mode(&self) -> SplitMode {
        match self {
            SplitRecipe::Transductive { .. } => SplitMode::Transductive,
            SplitRecipe::Inductive { .. } => SplitMode::Inductive,
        }
    }

    pub fn make(&self, graph: &AttributedGraph, seed: u64) -> Result<SplitSpec> {
        match *self {
            SplitRecipe::Transductive {
                val_frac,
                test_frac,
            } => split_transductive(graph, val_frac, test_frac, seed),
            SplitRecipe::Inductive {
                hidden_frac,
                val_frac,
            } => split_inductive(graph, hidden_frac, val_frac, seed),
        }
    }
}

fn frac_count(frac: f64, total: usize) -> usize {
    (frac * total as f64).floor() as usize
}

fn check_frac(name: &str, f: f64) -> Result<()> {
    if !(0.0..1.0).contains(&f) || !f.is_finite() {
        return Err(DealError::Argument(format!("{name} must lie in [0, 1), got {f}")));
    }
    Ok(())
}

/// Draws `count` distinct non-edges uniformly from pairs of `pool`, skipping
/// anything in `exclude`. Rejection sampling with a cap of `100 * count` draws.
fn sample_non_edges(
    graph: &AttributedGraph,
    pool: &[NodeId],
    count: usize,
    exclude: &mut HashSet<Pair>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Pair>> {
    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return Ok(out);
    }
    if pool.len() < 2 {
        return Err(DealError::Split("fewer than two candidate nodes for negative sampling".into()));
    }
    let cap = 100 * count;
    let mut tries = 0;
    while out.len() < count {
        if tries == cap {
            return Err(DealError::Split(format!(
                "insufficient non-edges: drew {} of {count} negatives in {cap} attempts",
                out.len()
            )));
        }
        tries += 1;
        let u = pool[rng.random_range(0..pool.len())];
        let v = pool[rng.random_range(0..pool.len())];
        if u == v || graph.has_edge(u, v) {
            continue;
        }
        let key = edge_key(u, v);
        if exclude.insert(key) {
            out.push(key);
        }
    }
    Ok(out)
}

/// Holds out `val_frac` and `test_frac` of the edges (floor rounding) plus an
/// equal number of non-edges each; the remaining edges train the model.
pub fn split_transductive(
    graph: &AttributedGraph,
    val_frac: f64,
    test_frac: f64,
    seed: u64,
) -> Result<SplitSpec> {
    check_frac("val_frac", val_frac)?;
    check_frac("test_frac", test_frac)?;
    if val_frac + test_frac >= 1.0 {
        return Err(DealError::Argument(format!(
            "val_frac + test_frac must be < 1, got {}",
            val_frac + test_frac
        )));
    }
    let m = graph.num_edges();
    if m < 10 {
        return Err(DealError::Split(format!("graph has {m} edges; need at least 10")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = graph.edges().to_vec();
    edges.shuffle(&mut rng);
    let n_val = frac_count(val_frac, m);
    let n_test = frac_count(test_frac, m);
    let val_pos: Vec<Pair> = edges[..n_val].to_vec();
    let test_pos: Vec<Pair> = edges[n_val..n_val + n_test].to_vec();
    let mut train_edges = edges[n_val + n_test..].to_vec();
    train_edges.sort_unstable();

    let pool: Vec<NodeId> = (0..graph.num_nodes()).collect();
    let mut taken = HashSet::new();
    let val_neg = sample_non_edges(graph, &pool, n_val, &mut taken, &mut rng)?;
    let test_neg = sample_non_edges(graph, &pool, n_test, &mut taken, &mut rng)?;
    Ok(SplitSpec {
        mode: SplitMode::Transductive,
        train_edges,
        val_pos,
        val_neg,
        test_pos,
        test_neg,
        hidden_nodes: Vec::new(),
        val_hidden_nodes: Vec::new(),
        seed,
    })
}

/// Hides `hidden_frac` of the nodes for testing and a disjoint `val_frac` of
/// the remaining nodes for validation. Edges inside each hidden set become its
/// positives, equal-count non-edges inside the set its negatives; edges with
/// any hidden endpoint never reach training.
pub fn split_inductive(
    graph: &AttributedGraph,
    hidden_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<SplitSpec> {
    if !(hidden_frac > 0.0 && hidden_frac < 1.0) {
        return Err(DealError::Argument(format!(
            "hidden_frac must lie in (0, 1), got {hidden_frac}"
        )));
    }
    check_frac("val_frac", val_frac)?;
    let n = graph.num_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes: Vec<NodeId> = (0..n).collect();
    nodes.shuffle(&mut rng);
    let n_hidden = frac_count(hidden_frac, n);
    let n_val = frac_count(val_frac, n - n_hidden);
    let mut hidden = nodes[..n_hidden].to_vec();
    let mut val_hidden = nodes[n_hidden..n_hidden + n_val].to_vec();
    hidden.sort_unstable();
    val_hidden.sort_unstable();

    // 0 = retained, 1 = test-hidden, 2 = validation-hidden
    let mut group = vec![0u8; n];
    for &u in &hidden {
        group[u] = 1;
    }
    for &u in &val_hidden {
        group[u] = 2;
    }
    let mut train_edges = Vec::new();
    let mut test_pos = Vec::new();
    let mut val_pos = Vec::new();
    for &(u, v) in graph.edges() {
        match (group[u], group[v]) {
            (0, 0) => train_edges.push((u, v)),
            (1, 1) => test_pos.push((u, v)),
            (2, 2) => val_pos.push((u, v)),
            _ => {}
        }
    }
    if test_pos.is_empty() {
        return Err(DealError::Split(format!(
            "no edges among the {n_hidden} hidden nodes for seed {seed}; choose a new seed"
        )));
    }
    if n_val > 0 && val_pos.is_empty() {
        return Err(DealError::Split(format!(
            "no edges among the {n_val} validation nodes for seed {seed}; choose a new seed"
        )));
    }
    if train_edges.is_empty() {
        return Err(DealError::Split("no training edges remain".into()));
    }
    test_pos.shuffle(&mut rng);
    val_pos.shuffle(&mut rng);
    let mut taken = HashSet::new();
    let test_neg = sample_non_edges(graph, &hidden, test_pos.len(), &mut taken, &mut rng)?;
    let val_neg = sample_non_edges(graph, &val_hidden, val_pos.len(), &mut taken, &mut rng)?;
    Ok(SplitSpec {
        mode: SplitMode::Inductive,
        train_edges,
        val_pos,
        val_neg,
        test_pos,
        test_neg,
        hidden_nodes: hidden,
        val_hidden_nodes: val_hidden,
        seed,
    })
}

impl SplitSpec {
    pub fn pairs(&self, set: EvalSet) -> (&[Pair], &[Pair]) {
        match set {
            EvalSet::Val => (&self.val_pos, &self.val_neg),
            EvalSet::Test => (&self.test_pos, &self.test_neg),
        }
    }

    /// Nodes whose structure is visible during training: every node in
    /// transductive mode, the non-hidden nodes in inductive mode.
    pub fn training_nodes(&self, num_nodes: usize) -> Vec<NodeId> {
        let mut excluded = vec![false; num_nodes];
        for &u in self.hidden_nodes.iter().chain(&self.val_hidden_nodes) {
            if u < num_nodes {
                excluded[u] = true;
            }
        }
        (0..num_nodes).filter(|&u| !excluded[u]).collect()
    }

    /// Checks every partition invariant against the source graph.
    pub fn validate(&self, graph: &AttributedGraph) -> Result<()> {
        let n = graph.num_nodes();
        let bad = |msg: String| Err(DealError::Validation(msg));
        let mut seen_pos: HashSet<Pair> = HashSet::new();
        for (name, list) in [
            ("train", &self.train_edges),
            ("val_pos", &self.val_pos),
            ("test_pos", &self.test_pos),
        ] {
            for &(u, v) in list {
                if u >= n || v >= n || !graph.has_edge(u, v) {
                    return bad(format!("{name} pair ({u}, {v}) is not an edge"));
                }
                if !seen_pos.insert(edge_key(u, v)) {
                    return bad(format!("{name} pair ({u}, {v}) appears in more than one positive set"));
                }
            }
        }
        for (name, list) in [("val_neg", &self.val_neg), ("test_neg", &self.test_neg)] {
            for &(u, v) in list {
                if u >= n || v >= n || u == v || graph.has_edge(u, v) {
                    return bad(format!("{name} pair ({u}, {v}) is not a non-edge"));
                }
            }
        }
        if self.val_pos.len() != self.val_neg.len() || self.test_pos.len() != self.test_neg.len() {
            return bad("negative counts must equal positive counts".into());
        }
        if self.mode == SplitMode::Inductive {
            let mut hidden = vec![0u8; n];
            for &u in &self.hidden_nodes {
                if u >= n {
                    return bad(format!("hidden node {u} out of range"));
                }
                hidden[u] = 1;
            }
            for &u in &self.val_hidden_nodes {
                if u >= n || hidden[u] == 1 {
                    return bad(format!("validation node {u} out of range or also a test node"));
                }
                hidden[u] = 2;
            }
            for &(u, v) in self.test_pos.iter().chain(&self.test_neg) {
                if hidden[u] != 1 || hidden[v] != 1 {
                    return bad(format!("test pair ({u}, {v}) has a non-hidden endpoint"));
                }
            }
            for &(u, v) in &self.train_edges {
                if hidden[u] != 0 || hidden[v] != 0 {
                    return bad(format!("train edge ({u}, {v}) touches a hidden node"));
                }
            }
        } else if !self.hidden_nodes.is_empty() || !self.val_hidden_nodes.is_empty() {
            return bad("transductive split lists hidden nodes".into());
        }
        Ok(())
    }

    /// Writes the line-oriented split file.
    pub fn write(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "#mode\n{}", self.mode)?;
        writeln!(out, "#hidden")?;
        for u in &self.hidden_nodes {
            writeln!(out, "{u}")?;
        }
        writeln!(out, "#val_hidden")?;
        for u in &self.val_hidden_nodes {
            writeln!(out, "{u}")?;
        }
        for (name, list) in [
            ("#train", &self.train_edges),
            ("#val_pos", &self.val_pos),
            ("#val_neg", &self.val_neg),
            ("#test_pos", &self.test_pos),
            ("#test_neg", &self.test_neg),
        ] {
            writeln!(out, "{name}")?;
            for (u, v) in list {
                writeln!(out, "{u}\t{v}")?;
            }
        }
        writeln!(out, "#seed\n{}", self.seed)?;
        Ok(())
    }

    /// Parses the split file format written by [`SplitSpec::write`].
    pub fn read(input: impl BufRead) -> Result<Self> {
        let mut spec = SplitSpec {
            mode: SplitMode::Transductive,
            train_edges: vec![],
            val_pos: vec![],
            val_neg: vec![],
            test_pos: vec![],
            test_neg: vec![],
            hidden_nodes: vec![],
            val_hidden_nodes: vec![],
            seed: 0,
        };
        let mut section: Option<String> = None;
        let mut seen_mode = false;
        let mut seen_seed = false;
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('#') {
                match name {
                    "mode" | "hidden" | "val_hidden" | "train" | "val_pos" | "val_neg"
                    | "test_pos" | "test_neg" | "seed" => section = Some(name.to_string()),
                    _ => return Err(DealError::parse(lineno, format!("unknown section `{line}`"))),
                }
                continue;
            }
            let pair = |line: &str| -> Result<Pair> {
                let mut t = line.split_whitespace();
                let mut next = || -> Result<NodeId> {
                    t.next()
                        .and_then(|x| x.parse().ok())
                        .ok_or_else(|| DealError::parse(lineno, "expected `u<TAB>v`"))
                };
                let p = (next()?, next()?);
                if t.next().is_some() {
                    return Err(DealError::parse(lineno, "expected `u<TAB>v`"));
                }
                Ok(p)
            };
            let node = |line: &str| -> Result<NodeId> {
                line.parse()
                    .map_err(|_| DealError::parse(lineno, format!("invalid node id `{line}`")))
            };
            match section.as_deref() {
                Some("mode") => {
                    spec.mode = line.parse().map_err(|_| DealError::parse(lineno, "invalid mode"))?;
                    seen_mode = true;
                }
                Some("seed") => {
                    spec.seed = line
                        .parse()
                        .map_err(|_| DealError::parse(lineno, "invalid seed"))?;
                    seen_seed = true;
                }
                Some("hidden") => spec.hidden_nodes.push(node(line)?),
                Some("val_hidden") => spec.val_hidden_nodes.push(node(line)?),
                Some("train") => spec.train_edges.push(pair(line)?),
                Some("val_pos") => spec.val_pos.push(pair(line)?),
                Some("val_neg") => spec.val_neg.push(pair(line)?),
                Some("test_pos") => spec.test_pos.push(pair(line)?),
                Some("test_neg") => spec.test_neg.push(pair(line)?),
                _ => return Err(DealError::parse(lineno, "data before the first section header")),
            }
        }
        if !seen_mode || !seen_seed {
            return Err(DealError::parse(0, "split file lacks #mode or #seed"));
        }
        Ok(spec)
    }
}
