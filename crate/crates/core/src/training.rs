//! Mini-batch sampling and the training loop with validation-based model
//! selection.

use std::collections::HashSet;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distance::{distances_over, DistanceCache, DEFAULT_D_MAX};
use crate::encoders::ModelParams;
use crate::error::{DealError, Result};
use crate::eval::{evaluate_pairs, NodeEmbeddings};
use crate::grad::{loss_and_gradient, OptimizerConfig, OptimizerState};
use crate::graph::{edge_key, Adjacency, AttributedGraph, NodeId};
use crate::loss::{BatchPair, HyperParams, MiniBatch};
use crate::split::{Pair, SplitMode, SplitSpec};

/// Rejection sampling gives up after this many draws per requested negative.
pub const NEGATIVE_ATTEMPTS_PER_PAIR: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None` means `ceil(|train_edges| / (pos_frac * k))`.
    pub batches_per_epoch: Option<usize>,
    pub hp: HyperParams,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Epochs between validation evaluations.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub d_max: u32,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub elu_alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batches_per_epoch: None,
            hp: HyperParams::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
            eval_every: 5,
            patience: 10,
            d_max: DEFAULT_D_MAX,
            hidden: vec![256],
            embed_dim: 64,
            elu_alpha: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let arg = |m: String| Err(DealError::Argument(m));
        self.hp.validate()?;
        if self.epochs == 0 {
            return arg("epochs must be at least 1".into());
        }
        if self.hp.batch_size < 2 {
            return arg(format!("batch size must be at least 2, got {}", self.hp.batch_size));
        }
        if positives_per_batch(&self.hp) == 0 || positives_per_batch(&self.hp) >= self.hp.batch_size {
            return arg(format!(
                "pos_frac {} with batch size {} leaves no positives or no negatives",
                self.hp.pos_frac, self.hp.batch_size
            ));
        }
        if self.batches_per_epoch == Some(0) {
            return arg("batches_per_epoch must be at least 1".into());
        }
        if self.eval_every == 0 || self.patience == 0 {
            return arg("eval_every and patience must be at least 1".into());
        }
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return arg("layer widths must be positive".into());
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return arg(format!("learning rate must be positive, got {}", self.optimizer.lr));
        }
        if !(self.elu_alpha > 0.0) {
            return arg(format!("elu alpha must be positive, got {}", self.elu_alpha));
        }
        Ok(())
    }

    pub fn batches_for(&self, num_train_edges: usize) -> usize {
        self.batches_per_epoch.unwrap_or_else(|| {
            let per = self.hp.pos_frac * self.hp.batch_size as f64;
            ((num_train_edges as f64 / per).ceil() as usize).max(1)
        })
    }
}

fn positives_per_batch(hp: &HyperParams) -> usize {
    (hp.pos_frac * hp.batch_size as f64).round() as usize
}

/// Draws mini-batches from the training graph: positives uniformly from the
/// training edges, negatives uniformly from non-edge pairs of training nodes.
pub struct BatchSampler<'a> {
    train_edges: &'a [Pair],
    nodes: Vec<NodeId>,
    edge_set: HashSet<Pair>,
    dist: &'a DistanceCache,
    k: usize,
    n_pos: usize,
}

impl<'a> BatchSampler<'a> {
    pub fn new(split: &'a SplitSpec, num_nodes: usize, hp: &HyperParams, dist: &'a DistanceCache) -> Result<Self> {
        if split.train_edges.is_empty() {
            return Err(DealError::Sampling("no training edges".into()));
        }
        Ok(BatchSampler {
            train_edges: &split.train_edges,
            nodes: split.training_nodes(num_nodes),
            edge_set: split.train_edges.iter().map(|&(u, v)| edge_key(u, v)).collect(),
            dist,
            k: hp.batch_size,
            n_pos: positives_per_batch(hp),
        })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<MiniBatch> {
        let mut pairs = Vec::with_capacity(self.k);
        for _ in 0..self.n_pos {
            let (u, v) = self.train_edges[rng.random_range(0..self.train_edges.len())];
            let (p, q) = if rng.random::<bool>() { (u, v) } else { (v, u) };
            pairs.push(BatchPair::positive(p, q));
        }
        let want = self.k - self.n_pos;
        let mut attempts = 0;
        let limit = NEGATIVE_ATTEMPTS_PER_PAIR * want;
        let m = self.nodes.len();
        while pairs.len() < self.k {
            attempts += 1;
            if attempts > limit || m < 2 {
                return Err(DealError::Sampling(format!(
                    "found {} of {want} negative pairs in {limit} draws",
                    pairs.len() - self.n_pos
                )));
            }
            let p = self.nodes[rng.random_range(0..m)];
            let q = self.nodes[rng.random_range(0..m)];
            if p == q || self.edge_set.contains(&edge_key(p, q)) {
                continue;
            }
            pairs.push(BatchPair::negative(p, q, self.dist.distance(p, q)));
        }
        Ok(MiniBatch::new(pairs))
    }
}

/// One mini-batch; see [`BatchSampler`].
pub fn sample_minibatch(
    graph: &AttributedGraph,
    split: &SplitSpec,
    hp: &HyperParams,
    dist: &DistanceCache,
    rng: &mut impl Rng,
) -> Result<MiniBatch> {
    BatchSampler::new(split, graph.num_nodes(), hp, dist)?.sample(rng)
}

/// Hop distances over the training edges, from every training node.
pub fn training_distances(graph: &AttributedGraph, split: &SplitSpec, d_max: u32) -> Result<DistanceCache> {
    let adj = Adjacency::from_edges(graph.num_nodes(), &split.train_edges);
    distances_over(&adj, &split.training_nodes(graph.num_nodes()), d_max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val_auc: Option<f64>,
    pub val_ap: Option<f64>,
    pub snapshot_taken: bool,
}

/// Writes the per-epoch run report.
pub fn write_run_report(log: &[EpochLog], mut out: impl Write) -> Result<()> {
    writeln!(out, "epoch,mean_train_loss,val_auc,val_ap,snapshot_taken")?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for e in log {
        writeln!(
            out,
            "{},{},{},{},{}",
            e.epoch,
            e.mean_train_loss,
            opt(e.val_auc),
            opt(e.val_ap),
            e.snapshot_taken
        )?;
    }
    Ok(())
}

/// Parameters of the best validation snapshot and the embeddings they give.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub embeddings: NodeEmbeddings,
    pub hp: HyperParams,
    pub mode: SplitMode,
    /// Validation (AUC, AP) of the returned snapshot, if validation ran.
    pub best_val: Option<(f64, f64)>,
    pub best_epoch: usize,
    pub curve: Vec<EpochLog>,
}

impl TrainedModel {
    pub fn from_parts(params: ModelParams, embeddings: NodeEmbeddings, hp: HyperParams, mode: SplitMode) -> Self {
        TrainedModel {
            params,
            embeddings,
            hp,
            mode,
            best_val: None,
            best_epoch: 0,
            curve: Vec::new(),
        }
    }

    pub fn write_report(&self, out: impl Write) -> Result<()> {
        write_run_report(&self.curve, out)
    }
}

fn known_mask(split: &SplitSpec, n: usize) -> Vec<bool> {
    let mut known = vec![false; n];
    for u in split.training_nodes(n) {
        known[u] = true;
    }
    known
}

fn describe_batch(batch: &MiniBatch) -> String {
    let head: Vec<String> = batch
        .pairs
        .iter()
        .take(8)
        .map(|e| format!("({},{},{})", e.p, e.q, if e.linked { "+" } else { "-" }))
        .collect();
    format!("{} pairs, first: {}", batch.len(), head.join(" "))
}

/// Runs the training loop; see [`train_logged`].
pub fn train(graph: &AttributedGraph, split: &SplitSpec, cfg: &TrainConfig) -> Result<TrainedModel> {
    let mut log = Vec::new();
    train_logged(graph, split, cfg, &mut log)
}

/// Trains both encoders jointly, one optimizer step per mini-batch, and
/// returns the snapshot with the best validation AUC. `log` receives one
/// entry per finished epoch, so it holds the partial curve if training
/// aborts.
pub fn train_logged(
    graph: &AttributedGraph,
    split: &SplitSpec,
    cfg: &TrainConfig,
    log: &mut Vec<EpochLog>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    split.validate(graph)?;
    let n = graph.num_nodes();
    let hp = &cfg.hp;
    let dist = training_distances(graph, split, cfg.d_max)?;
    let sampler = BatchSampler::new(split, n, hp, &dist)?;
    let all_nodes = split.training_nodes(n);
    let known = known_mask(split, n);

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(n, graph.num_attrs(), &cfg.hidden, cfg.embed_dim, cfg.elu_alpha, &mut init_rng);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut grads = params.zeros_like();
    let mut opt = OptimizerState::new(params.num_params(), cfg.optimizer);

    let has_val = !split.val_pos.is_empty() && !split.val_neg.is_empty();
    let batches = cfg.batches_for(split.train_edges.len());
    let mut best: Option<(f64, f64)> = None;
    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for b in 0..batches {
            let batch = sampler.sample(&mut batch_rng)?;
            if let Some(e) = batch.pairs.iter().find(|e| !known[e.p] || !known[e.q]) {
                return Err(DealError::Sampling(format!("held-out node in training pair ({}, {})", e.p, e.q)));
            }
            let loss = loss_and_gradient(&params, graph.features(), &batch, hp, &all_nodes, &mut grads).map_err(|e| {
                DealError::Diverged {
                    epoch,
                    batch: b,
                    msg: format!("{e}; batch {}", describe_batch(&batch)),
                }
            })?;
            opt.step_model(&mut params, &grads)?;
            total += loss;
        }
        let mut entry = EpochLog {
            epoch,
            mean_train_loss: total / batches as f64,
            val_auc: None,
            val_ap: None,
            snapshot_taken: false,
        };
        if has_val && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            let emb = NodeEmbeddings::compute(&params, graph.features(), known.clone())?;
            let m = evaluate_pairs(&emb, &split.val_pos, &split.val_neg, hp.lambda, hp.symmetrize_scores)?;
            entry.val_auc = Some(m.auc);
            entry.val_ap = Some(m.ap);
            if best.is_none_or(|(a, _)| m.auc > a) {
                best = Some((m.auc, m.ap));
                best_params.clone_from(&params);
                best_epoch = epoch;
                entry.snapshot_taken = true;
                stale = 0;
            } else {
                stale += 1;
            }
        }
        log.push(entry);
        if stale >= cfg.patience {
            break;
        }
    }
    if !has_val {
        best_params = params;
        best_epoch = log.len();
    }
    let embeddings = NodeEmbeddings::compute(&best_params, graph.features(), known)?;
    Ok(TrainedModel {
        params: best_params,
        embeddings,
        hp: hp.clone(),
        mode: split.mode,
        best_val: best,
        best_epoch,
        curve: log.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::HopDistance;
    use crate::graph::SparseRows;
    use crate::split::{split_inductive, split_transductive};

    fn cycle(n: usize, m: usize) -> AttributedGraph {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        let trip = (0..n).map(|i| (i, i % m, 1.0)).collect();
        let f = SparseRows::from_triplets(n, m, trip).unwrap();
        AttributedGraph::new(n, m, edges, f).unwrap().0
    }

    fn all_train(g: &AttributedGraph) -> SplitSpec {
        SplitSpec {
            mode: SplitMode::Transductive,
            train_edges: g.edges().to_vec(),
            val_pos: vec![],
            val_neg: vec![],
            test_pos: vec![],
            test_neg: vec![],
            hidden_nodes: vec![],
            val_hidden_nodes: vec![],
            seed: 0,
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            hidden: vec![8],
            embed_dim: 4,
            hp: HyperParams {
                batch_size: 10,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn batch_composition() {
        let g = cycle(12, 3);
        let split = all_train(&g);
        let hp = HyperParams {
            batch_size: 10,
            ..Default::default()
        };
        let dist = training_distances(&g, &split, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_minibatch(&g, &split, &hp, &dist, &mut rng).unwrap();
        assert_eq!(b.len(), 10);
        assert_eq!(b.num_positive(), 4);
        for e in &b.pairs {
            assert_ne!(e.p, e.q);
            assert_eq!(e.linked, g.has_edge(e.p, e.q));
            if !e.linked {
                assert_eq!(e.dist, dist.distance(e.p, e.q));
                assert!(e.dist > HopDistance::Finite(1));
            }
        }
        let mut again = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_minibatch(&g, &split, &hp, &dist, &mut again).unwrap(), b);
    }

    #[test]
    fn minimal_batch() {
        let f = SparseRows::from_triplets(2, 1, vec![]).unwrap();
        let g = AttributedGraph::new(2, 1, [(0, 1)], f).unwrap().0;
        let split = all_train(&g);
        let hp = HyperParams {
            batch_size: 2,
            pos_frac: 0.5,
            ..Default::default()
        };
        let dist = training_distances(&g, &split, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // the only pair is an edge, so no negative exists
        assert!(matches!(
            sample_minibatch(&g, &split, &hp, &dist, &mut rng),
            Err(DealError::Sampling(_))
        ));
        let f = SparseRows::from_triplets(3, 1, vec![]).unwrap();
        let g = AttributedGraph::new(3, 1, [(0, 1)], f).unwrap().0;
        let split = all_train(&g);
        let dist = training_distances(&g, &split, 5).unwrap();
        let b = sample_minibatch(&g, &split, &hp, &dist, &mut rng).unwrap();
        assert_eq!((b.num_positive(), b.len()), (1, 2));
    }

    #[test]
    fn inductive_batches_avoid_hidden_nodes() {
        let g = cycle(40, 5);
        let split = split_inductive(&g, 0.3, 0.2, 0)
            .or_else(|_| split_inductive(&g, 0.3, 0.2, 1))
            .unwrap();
        let dist = training_distances(&g, &split, 5).unwrap();
        let hp = HyperParams {
            batch_size: 50,
            ..Default::default()
        };
        let sampler = BatchSampler::new(&split, 40, &hp, &dist).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hidden: HashSet<_> = split.hidden_nodes.iter().chain(&split.val_hidden_nodes).copied().collect();
        for _ in 0..20 {
            let b = sampler.sample(&mut rng).unwrap();
            assert!(b.pairs.iter().all(|e| !hidden.contains(&e.p) && !hidden.contains(&e.q)));
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_cfg();
        c.hp.batch_size = 1;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.hp.batch_size = 2;
        c.hp.pos_frac = 0.1;
        assert!(c.validate().is_err());
        assert!(small_cfg().validate().is_ok());
        assert_eq!(TrainConfig::default().batches_for(4224), 21);
    }

    #[test]
    fn loss_decreases_on_cycle() {
        let g = cycle(6, 3);
        let split = all_train(&g);
        let cfg = TrainConfig {
            epochs: 2,
            batches_per_epoch: Some(20),
            ..small_cfg()
        };
        let m = train(&g, &split, &cfg).unwrap();
        assert_eq!(m.curve.len(), 2);
        assert!(m.curve[1].mean_train_loss < m.curve[0].mean_train_loss, "{:?}", m.curve);
    }

    #[test]
    fn separate_losses_decrease_without_alignment() {
        let g = cycle(10, 4);
        let split = all_train(&g);
        for theta in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] {
            let mut cfg = TrainConfig {
                epochs: 50,
                batches_per_epoch: Some(2),
                ..small_cfg()
            };
            cfg.hp.theta = theta;
            let m = train(&g, &split, &cfg).unwrap();
            let first = m.curve[0].mean_train_loss;
            assert!(m.curve[49].mean_train_loss < first, "{theta:?}");
        }
    }

    #[test]
    fn attribute_only_training_leaves_structure_untouched() {
        let g = cycle(8, 3);
        let split = all_train(&g);
        let mut cfg = small_cfg();
        cfg.hp.theta = [0.0, 1.0, 0.0];
        let m = train(&g, &split, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = ModelParams::init(8, 3, &cfg.hidden, cfg.embed_dim, cfg.elu_alpha, &mut rng);
        assert_eq!(m.params.structure, init.structure);
        assert_ne!(m.params.attr, init.attr);
    }

    #[test]
    fn training_is_deterministic_and_keeps_best_snapshot() {
        let g = cycle(30, 6);
        let split = split_transductive(&g, 0.2, 0.2, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 12,
            eval_every: 2,
            batches_per_epoch: Some(3),
            ..small_cfg()
        };
        let a = train(&g, &split, &cfg).unwrap();
        let b = train(&g, &split, &cfg).unwrap();
        assert_eq!(a, b);
        let (best, _) = a.best_val.unwrap();
        let logged: Vec<f64> = a.curve.iter().filter_map(|e| e.val_auc).collect();
        assert!(!logged.is_empty());
        assert!(logged.iter().all(|&v| best >= v));
        let emb = NodeEmbeddings::compute(&a.params, g.features(), a.embeddings.known.clone()).unwrap();
        let m = evaluate_pairs(&emb, &split.val_pos, &split.val_neg, cfg.hp.lambda, false).unwrap();
        assert_eq!(m.auc, best);
    }

    #[test]
    fn patience_stops_early() {
        let g = cycle(30, 6);
        let split = split_transductive(&g, 0.2, 0.2, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 400,
            eval_every: 1,
            patience: 2,
            batches_per_epoch: Some(1),
            optimizer: OptimizerConfig {
                lr: 1e-9,
                ..Default::default()
            },
            ..small_cfg()
        };
        let m = train(&g, &split, &cfg).unwrap();
        assert!(m.curve.len() < 400);
    }

    #[test]
    fn report_columns() {
        let log = [
            EpochLog {
                epoch: 1,
                mean_train_loss: 0.5,
                val_auc: None,
                val_ap: None,
                snapshot_taken: false,
            },
            EpochLog {
                epoch: 2,
                mean_train_loss: 0.25,
                val_auc: Some(0.75),
                val_ap: Some(0.5),
                snapshot_taken: true,
            },
        ];
        let mut buf = Vec::new();
        write_run_report(&log, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,mean_train_loss,val_auc,val_ap,snapshot_taken\n1,0.5,,,false\n2,0.25,0.75,0.5,true\n"
        );
    }
}
