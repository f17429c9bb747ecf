//! Link scoring, ranking metrics, multi-trial aggregation and the per-hop
//! similarity diagnostic.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distance::bfs_capped;
use crate::encoders::{cosine, encode_attributes, encode_structure, EmbeddingKind, Matrix, ModelParams};
use crate::error::{DealError, Result};
use crate::graph::{AttributedGraph, NodeId, SparseRows};
use crate::split::{EvalSet, Pair, SplitMode, SplitRecipe, SplitSpec};
use crate::training::{train, TrainConfig, TrainedModel};

/// Pairs sampled per hop by [`hop_similarity_profile`].
pub const MAX_PAIRS_PER_HOP: usize = 20_000;

/// Score weights used before any grid search.
pub fn default_lambda(mode: SplitMode) -> [f64; 3] {
    match mode {
        SplitMode::Transductive => [1.0 / 3.0; 3],
        SplitMode::Inductive => [0.0, 0.7, 0.3],
    }
}

/// Embeddings of every node under one parameter set. Structure rows exist
/// for all nodes but only `known` ones were trained.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddings {
    pub z_s: Matrix,
    pub z_a: Matrix,
    pub known: Vec<bool>,
}

impl NodeEmbeddings {
    pub fn compute(params: &ModelParams, features: &SparseRows, known: Vec<bool>) -> Result<Self> {
        let n = params.structure.num_nodes();
        if features.num_rows() != n || known.len() != n {
            return Err(DealError::Shape(format!(
                "model has {n} nodes, features {} rows, mask {} entries",
                features.num_rows(),
                known.len()
            )));
        }
        let ids: Vec<NodeId> = (0..n).collect();
        Ok(NodeEmbeddings {
            z_s: encode_structure(&params.structure, &ids)?.rows,
            z_a: encode_attributes(&params.attr, features)?.rows,
            known,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.known.len()
    }

    fn structure(&self, u: NodeId) -> Option<&[f64]> {
        self.known[u].then(|| self.z_s.row(u))
    }

    fn check(&self, u: NodeId) -> Result<()> {
        if u < self.num_nodes() {
            Ok(())
        } else {
            Err(DealError::Argument(format!("node {u} out of range (n = {})", self.num_nodes())))
        }
    }

    /// Eq.-10 style score of a stored pair; new endpoints use attributes only.
    pub fn pair_score(&self, p: NodeId, q: NodeId, lambda: [f64; 3]) -> f64 {
        combine(
            self.structure(p),
            self.z_a.row(p),
            self.structure(q),
            self.z_a.row(q),
            lambda,
        )
    }

    pub fn score_pairs(&self, pairs: &[Pair], lambda: [f64; 3], symmetrize: bool) -> Result<Vec<f64>> {
        pairs
            .iter()
            .map(|&(p, q)| {
                self.check(p)?;
                self.check(q)?;
                Ok(if symmetrize {
                    0.5 * (self.pair_score(p, q, lambda) + self.pair_score(q, p, lambda))
                } else {
                    self.pair_score(p, q, lambda)
                })
            })
            .collect()
    }
}

fn combine(zs_p: Option<&[f64]>, za_p: &[f64], zs_q: Option<&[f64]>, za_q: &[f64], lambda: [f64; 3]) -> f64 {
    let [l1, l2, l3] = lambda;
    let mut s = 0.0;
    if let (Some(a), Some(b)) = (zs_p, zs_q) {
        if l1 != 0.0 {
            s += l1 * cosine(a, b);
        }
    }
    if l2 != 0.0 {
        s += l2 * cosine(za_p, za_q);
    }
    if let Some(a) = zs_p {
        if l3 != 0.0 {
            s += l3 * cosine(a, za_q);
        }
    }
    s
}

/// One side of a scored pair.
#[derive(Debug, Clone, Copy)]
pub enum Endpoint<'a> {
    /// A node of the training graph.
    Node(NodeId),
    /// A new node given only by its dense attribute vector.
    Attributes(&'a [f64]),
}

/// Score of an arbitrary pair. Terms needing a structure embedding that an
/// endpoint lacks are dropped.
pub fn link_score(model: &TrainedModel, p: Endpoint, q: Endpoint, lambda: [f64; 3]) -> Result<f64> {
    let resolve = |e: Endpoint| -> Result<(Option<Vec<f64>>, Vec<f64>)> {
        match e {
            Endpoint::Node(u) => {
                model.embeddings.check(u)?;
                Ok((
                    model.embeddings.structure(u).map(<[f64]>::to_vec),
                    model.embeddings.z_a.row(u).to_vec(),
                ))
            }
            Endpoint::Attributes(x) => {
                let width = model.params.attr.input_dim();
                if x.len() != width {
                    return Err(DealError::Shape(format!(
                        "attribute vector has width {}, model expects {width}",
                        x.len()
                    )));
                }
                let row = SparseRows::from_dense_row(x)?;
                let (c, v) = row.row(0);
                Ok((None, model.params.attr.forward_sparse(c, v)))
            }
        }
    };
    let (sp, ap) = resolve(p)?;
    let (sq, aq) = resolve(q)?;
    Ok(combine(sp.as_deref(), &ap, sq.as_deref(), &aq, lambda))
}

fn check_metric_input(labels: &[bool], scores: &[f64]) -> Result<(usize, usize)> {
    if labels.len() != scores.len() {
        return Err(DealError::Metric(format!(
            "{} labels but {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DealError::Metric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DealError::Metric(format!(
            "need both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve via the Mann-Whitney statistic with average
/// ranks for ties.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = check_metric_input(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their average
        let avg = (i + j + 1) as f64 / 2.0;
        rank_sum += avg * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean precision at the rank of each positive after a stable descending
/// sort (ties keep their input order).
pub fn average_precision(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (pos, _) = check_metric_input(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if labels[k] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialMetrics {
    pub auc: f64,
    pub ap: f64,
}

/// Per-trial metrics with their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub auc: f64,
    pub ap: f64,
    pub auc_stddev: f64,
    pub ap_stddev: f64,
    pub trial_values: Vec<TrialMetrics>,
}

fn mean_stddev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Metrics {
    pub fn from_trials(trials: Vec<TrialMetrics>) -> Result<Self> {
        if trials.is_empty() {
            return Err(DealError::Metric("no trials".into()));
        }
        let aucs: Vec<f64> = trials.iter().map(|t| t.auc).collect();
        let aps: Vec<f64> = trials.iter().map(|t| t.ap).collect();
        let (auc, auc_stddev) = mean_stddev(&aucs);
        let (ap, ap_stddev) = mean_stddev(&aps);
        Ok(Metrics {
            auc,
            ap,
            auc_stddev,
            ap_stddev,
            trial_values: trials,
        })
    }

    /// `trial,auc,ap` rows followed by `mean` and `stddev` rows.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "trial,auc,ap")?;
        for (t, m) in self.trial_values.iter().enumerate() {
            writeln!(out, "{t},{},{}", m.auc, m.ap)?;
        }
        writeln!(out, "mean,{},{}", self.auc, self.ap)?;
        writeln!(out, "stddev,{},{}", self.auc_stddev, self.ap_stddev)?;
        Ok(())
    }
}

/// AUC and AP of precomputed embeddings on one positive/negative pair set.
pub fn evaluate_pairs(
    emb: &NodeEmbeddings,
    pos: &[Pair],
    neg: &[Pair],
    lambda: [f64; 3],
    symmetrize: bool,
) -> Result<TrialMetrics> {
    let mut scores = emb.score_pairs(pos, lambda, symmetrize)?;
    scores.extend(emb.score_pairs(neg, lambda, symmetrize)?);
    let labels: Vec<bool> = (0..scores.len()).map(|i| i < pos.len()).collect();
    Ok(TrialMetrics {
        auc: auc(&labels, &scores)?,
        ap: average_precision(&labels, &scores)?,
    })
}

/// Single-trial metrics of a trained model on the validation or test pairs.
pub fn evaluate(model: &TrainedModel, split: &SplitSpec, lambda: [f64; 3], set: EvalSet) -> Result<Metrics> {
    let (pos, neg) = split.pairs(set);
    let m = evaluate_pairs(&model.embeddings, pos, neg, lambda, model.hp.symmetrize_scores)?;
    Metrics::from_trials(vec![m])
}

/// Trains and tests `trials` times; trial `t` uses seed `cfg.seed + t` for
/// both its split and its training run.
pub fn run_trials(graph: &AttributedGraph, recipe: &SplitRecipe, cfg: &TrainConfig, trials: usize) -> Result<Metrics> {
    if trials == 0 {
        return Err(DealError::Argument("trials must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(trials);
    for t in 0..trials {
        let wrap = |e| DealError::Trial {
            trial: t,
            source: Box::new(e),
        };
        let seed = cfg.seed.wrapping_add(t as u64);
        let split = recipe.make(graph, seed).map_err(wrap)?;
        let trial_cfg = TrainConfig { seed, ..cfg.clone() };
        let model = train(graph, &split, &trial_cfg).map_err(wrap)?;
        let m = evaluate(&model, &split, cfg.hp.lambda, EvalSet::Test).map_err(wrap)?;
        out.push(m.trial_values[0]);
    }
    Metrics::from_trials(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HopSimilarity {
    pub hop: u32,
    pub mean_cosine: f64,
    pub pair_count: usize,
}

/// Mean cosine similarity of node pairs at each exact hop distance
/// `1..=h_max`, from structure embeddings (trained nodes only) or attribute
/// embeddings (all nodes). Each hop keeps a uniform sample of at most
/// [`MAX_PAIRS_PER_HOP`] pairs; hops without pairs are omitted.
pub fn hop_similarity_profile(
    model: &TrainedModel,
    graph: &AttributedGraph,
    h_max: u32,
    kind: EmbeddingKind,
    seed: u64,
) -> Result<Vec<HopSimilarity>> {
    if h_max == 0 {
        return Err(DealError::Argument("h_max must be at least 1".into()));
    }
    let n = graph.num_nodes();
    let emb = &model.embeddings;
    if emb.num_nodes() != n {
        return Err(DealError::Shape(format!(
            "model has {} nodes, graph {n}",
            emb.num_nodes()
        )));
    }
    let (z, usable): (&Matrix, Vec<bool>) = match kind {
        EmbeddingKind::Structure => (&emb.z_s, emb.known.clone()),
        EmbeddingKind::Attribute => (&emb.z_a, vec![true; n]),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hops = h_max as usize;
    let mut seen_count = vec![0usize; hops];
    let mut reservoir: Vec<Vec<Pair>> = vec![Vec::new(); hops];
    let mut seen = vec![u32::MAX; n];
    for u in 0..n {
        if !usable[u] {
            continue;
        }
        for (v, d) in bfs_capped(graph.adjacency(), u, h_max, &mut seen, u as u32) {
            if v <= u || d == 0 || !usable[v] {
                continue;
            }
            let h = d as usize - 1;
            seen_count[h] += 1;
            if reservoir[h].len() < MAX_PAIRS_PER_HOP {
                reservoir[h].push((u, v));
            } else {
                let j = rng.random_range(0..seen_count[h]);
                if j < MAX_PAIRS_PER_HOP {
                    reservoir[h][j] = (u, v);
                }
            }
        }
    }
    Ok(reservoir
        .iter()
        .enumerate()
        .filter(|(_, pairs)| !pairs.is_empty())
        .map(|(h, pairs)| HopSimilarity {
            hop: h as u32 + 1,
            mean_cosine: pairs.iter().map(|&(u, v)| cosine(z.row(u), z.row(v))).sum::<f64>() / pairs.len() as f64,
            pair_count: pairs.len(),
        })
        .collect())
}

pub fn write_hop_profile_csv(profile: &[HopSimilarity], mut out: impl Write) -> Result<()> {
    writeln!(out, "hop,mean_cosine,pair_count")?;
    for h in profile {
        writeln!(out, "{},{},{}", h.hop, h.mean_cosine, h.pair_count)?;
    }
    Ok(())
}
