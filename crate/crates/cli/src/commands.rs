//! Subcommand implementations. Each writes its outputs plus an
//! `effective_config.txt` echo into the configured output directory.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use deal_core::eval::{evaluate_pairs, write_hop_profile_csv};
use deal_core::{
    evaluate, hop_similarity_profile, link_score, load_checkpoint, load_graph_files, run_trials, save_checkpoint,
    train_logged, AttributedGraph, Checkpoint, EmbeddingKind, Endpoint, EvalSet, HopSimilarity, Metrics, SplitSpec,
    TrainConfig, TrainedModel, TrialMetrics,
};
use rayon::prelude::*;

use crate::config::{parse_triple, RunConfig};

pub const EFFECTIVE_CONFIG: &str = "effective_config.txt";
pub const TRAIN_REPORT: &str = "train_report.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_MATRIX_FILE: &str = "sweep_matrix.csv";
pub const SWEEP_BEST_FILE: &str = "sweep_best.txt";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

/// Writes the effective configuration into the output directory.
pub fn write_echo(cfg: &RunConfig) -> Result<PathBuf> {
    let path = cfg.out_dir().join(EFFECTIVE_CONFIG);
    let mut f = create(&path)?;
    f.write_all(cfg.echo().as_bytes())?;
    f.flush()?;
    Ok(path)
}

pub fn load_graph(cfg: &RunConfig) -> Result<AttributedGraph> {
    let (g, report) = load_graph_files(cfg.get("edges"), cfg.get("features"))
        .with_context(|| format!("loading graph from {} and {}", cfg.get("edges"), cfg.get("features")))?;
    if report.warnings() > 0 {
        eprintln!(
            "warning: dropped {} self-loops and {} duplicate edges",
            report.self_loops_dropped, report.duplicates_dropped
        );
    }
    Ok(g)
}

pub fn load_split(cfg: &RunConfig, graph: &AttributedGraph) -> Result<SplitSpec> {
    let path = cfg.split_path();
    let split = SplitSpec::read(open(&path)?).with_context(|| format!("reading split {}", path.display()))?;
    split
        .validate(graph)
        .with_context(|| format!("split {} does not match the graph", path.display()))?;
    Ok(split)
}

pub fn load_model(cfg: &RunConfig, graph: &AttributedGraph) -> Result<Checkpoint> {
    let path = cfg.checkpoint_path();
    load_checkpoint(open(&path)?, graph.features()).with_context(|| format!("reading checkpoint {}", path.display()))
}

/// `split`: writes the split file for the configured mode and seed.
pub fn cmd_split(cfg: &RunConfig) -> Result<SplitSpec> {
    cfg.check()?;
    write_echo(cfg)?;
    let graph = load_graph(cfg)?;
    let split = cfg.split_recipe()?.make(&graph, cfg.get_as("seed")?)?;
    let path = cfg.split_path();
    let mut f = create(&path)?;
    split.write(&mut f)?;
    f.flush()?;
    Ok(split)
}

fn config_meta(cfg: &RunConfig) -> Vec<(String, String)> {
    cfg.entries().map(|(k, v)| (format!("config.{k}"), v.to_string())).collect()
}

/// `train`: trains on the split file and writes the checkpoint and run report.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainedModel> {
    cfg.check()?;
    write_echo(cfg)?;
    let graph = load_graph(cfg)?;
    let split = load_split(cfg, &graph)?;
    let tc = cfg.train_config()?;
    let mut log = Vec::new();
    let result = train_logged(&graph, &split, &tc, &mut log);
    let report_path = cfg.out_dir().join(TRAIN_REPORT);
    let mut report = create(&report_path)?;
    deal_core::training::write_run_report(&log, &mut report)?;
    let model = match result {
        Ok(m) => m,
        Err(e) => {
            writeln!(report, "# aborted: {e}")?;
            report.flush()?;
            return Err(e.into());
        }
    };
    report.flush()?;
    let mut ck = create(&cfg.checkpoint_path())?;
    save_checkpoint(&model, &config_meta(cfg), &mut ck)?;
    ck.flush()?;
    Ok(model)
}

fn write_metrics(cfg: &RunConfig, m: &Metrics) -> Result<()> {
    let mut f = create(&cfg.out_dir().join(METRICS_FILE))?;
    m.write_csv(&mut f)?;
    f.flush()?;
    Ok(())
}

/// `eval`: with one trial, scores the checkpoint on the split file; with
/// more, runs the full split/train/test protocol once per seed.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Metrics> {
    cfg.check()?;
    write_echo(cfg)?;
    let graph = load_graph(cfg)?;
    let trials = cfg.trials()?;
    let metrics = if trials == 1 {
        let split = load_split(cfg, &graph)?;
        let ck = load_model(cfg, &graph)?;
        let mut model = ck.model;
        model.hp.symmetrize_scores = cfg.get_as("symmetrize_scores")?;
        evaluate(&model, &split, cfg.lambda()?, cfg.get_as::<EvalSet>("eval_set")?)?
    } else {
        run_trials(&graph, &cfg.split_recipe()?, &cfg.train_config()?, trials)?
    };
    write_metrics(cfg, &metrics)?;
    Ok(metrics)
}

/// One evaluated grid point of a sweep (means over trials).
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub values: Vec<String>,
    pub val_auc: f64,
    pub val_ap: f64,
    pub test_auc: f64,
    pub test_ap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    /// Swept keys, e.g. `gamma` or `beta`.
    pub keys: Vec<String>,
    pub points: Vec<SweepPoint>,
    /// Index of the point with the highest validation AUC.
    pub best: usize,
    /// Replayable configuration of the best point.
    pub best_config: RunConfig,
}

impl SweepReport {
    pub fn point(&self, assignment: &[(&str, &str)]) -> Option<&SweepPoint> {
        self.points.iter().find(|p| {
            assignment.iter().all(|(k, v)| {
                self.keys
                    .iter()
                    .position(|x| x == k)
                    .is_some_and(|i| p.values[i] == *v)
            })
        })
    }
}

/// Sets a swept key on a copy of the config.
fn apply_sweep_value(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "gamma" => {
            cfg.set("gamma1", value)?;
            cfg.set("gamma2", value)
        }
        "b" => {
            cfg.set("b1", value)?;
            cfg.set("b2", value)
        }
        k => cfg.set(k, value),
    }
}

fn sweep_grid(cfg: &RunConfig) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut keys = Vec::new();
    let mut axes: Vec<Vec<String>> = Vec::new();
    for (k, v) in cfg.entries() {
        let Some(name) = k.strip_prefix("sweep.") else {
            continue;
        };
        if v.trim().is_empty() {
            continue;
        }
        let vals: Vec<String> = v.split(';').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect();
        if vals.is_empty() {
            bail!("sweep key `{k}` has no values");
        }
        keys.push(name.to_string());
        axes.push(vals);
    }
    if keys.is_empty() {
        bail!("empty sweep grid: set at least one sweep.* key");
    }
    let mut points: Vec<Vec<String>> = vec![Vec::new()];
    for axis in &axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(v.clone());
                    q
                })
            })
            .collect();
    }
    Ok((keys, points))
}

fn run_point(graph: &AttributedGraph, cfg: &RunConfig) -> Result<(TrialMetrics, TrialMetrics)> {
    let recipe = cfg.split_recipe()?;
    let tc = cfg.train_config()?;
    let trials = cfg.trials()?;
    let mut val = Vec::new();
    let mut test = Vec::new();
    for t in 0..trials {
        let seed = tc.seed.wrapping_add(t as u64);
        let split = recipe.make(graph, seed)?;
        let model = deal_core::train(graph, &split, &TrainConfig { seed, ..tc.clone() })?;
        let lambda = tc.hp.lambda;
        let sym = tc.hp.symmetrize_scores;
        val.push(evaluate_pairs(&model.embeddings, &split.val_pos, &split.val_neg, lambda, sym)?);
        test.push(evaluate_pairs(&model.embeddings, &split.test_pos, &split.test_neg, lambda, sym)?);
    }
    let v = Metrics::from_trials(val)?;
    let t = Metrics::from_trials(test)?;
    Ok((TrialMetrics { auc: v.auc, ap: v.ap }, TrialMetrics { auc: t.auc, ap: t.ap }))
}

/// `sweep`: trains every grid point (averaging `trials` seeds), ranks by
/// validation AUC and writes the point table, a (gamma x beta) matrix when
/// both are swept, and the best configuration.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepReport> {
    cfg.check()?;
    write_echo(cfg)?;
    let (keys, grid) = sweep_grid(cfg)?;
    let graph = load_graph(cfg)?;
    let configs: Vec<RunConfig> = grid
        .iter()
        .map(|vals| {
            let mut c = cfg.clone();
            for (k, v) in keys.iter().zip(vals) {
                apply_sweep_value(&mut c, k, v).with_context(|| format!("sweep value {k} = {v}"))?;
            }
            for (k, _) in cfg.entries().filter(|(k, _)| k.starts_with("sweep.")) {
                c.set(k, "")?;
            }
            c.check().with_context(|| format!("sweep point {vals:?}"))?;
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let run = |c: &RunConfig| run_point(&graph, c);
    let results: Vec<Result<(TrialMetrics, TrialMetrics)>> = if cfg.get_as("sweep_parallel")? {
        configs.par_iter().map(run).collect()
    } else {
        configs.iter().map(run).collect()
    };
    let mut points = Vec::with_capacity(grid.len());
    for (vals, r) in grid.into_iter().zip(results) {
        let (v, t) = r.with_context(|| format!("sweep point {vals:?}"))?;
        points.push(SweepPoint {
            values: vals,
            val_auc: v.auc,
            val_ap: v.ap,
            test_auc: t.auc,
            test_ap: t.ap,
        });
    }
    // first maximum wins, so ties resolve to grid order
    let best = points
        .iter()
        .enumerate()
        .fold(0, |b, (i, p)| if p.val_auc > points[b].val_auc { i } else { b });
    let report = SweepReport {
        keys,
        points,
        best,
        best_config: configs[best].clone(),
    };
    write_sweep(cfg, &report)?;
    Ok(report)
}

fn write_sweep(cfg: &RunConfig, r: &SweepReport) -> Result<()> {
    let dir = cfg.out_dir();
    let mut f = create(&dir.join(SWEEP_FILE))?;
    writeln!(f, "point,{},val_auc,val_ap,test_auc,test_ap", r.keys.join(","))?;
    for (i, p) in r.points.iter().enumerate() {
        let vals: Vec<String> = p.values.iter().map(|v| format!("\"{v}\"")).collect();
        writeln!(f, "{i},{},{},{},{},{}", vals.join(","), p.val_auc, p.val_ap, p.test_auc, p.test_ap)?;
    }
    f.flush()?;

    let gamma_key = ["gamma", "gamma1", "gamma2"].into_iter().find(|k| r.keys.iter().any(|x| x == k));
    if let (Some(gk), true) = (gamma_key, r.keys.iter().any(|x| x == "beta")) {
        let gi = r.keys.iter().position(|x| x == gk).unwrap();
        let bi = r.keys.iter().position(|x| x == "beta").unwrap();
        let mut gammas: Vec<&str> = Vec::new();
        let mut betas: Vec<&str> = Vec::new();
        for p in &r.points {
            if !gammas.contains(&p.values[gi].as_str()) {
                gammas.push(&p.values[gi]);
            }
            if !betas.contains(&p.values[bi].as_str()) {
                betas.push(&p.values[bi]);
            }
        }
        let mut m = create(&dir.join(SWEEP_MATRIX_FILE))?;
        let header: Vec<String> = betas.iter().map(|b| format!("beta={b}")).collect();
        writeln!(m, "{gk},{}", header.join(","))?;
        for g in &gammas {
            // cells hold the best validation AUC over any other swept keys
            let cells: Vec<String> = betas
                .iter()
                .map(|b| {
                    r.points
                        .iter()
                        .filter(|p| p.values[gi] == *g && p.values[bi] == *b)
                        .map(|p| p.val_auc)
                        .fold(f64::NEG_INFINITY, f64::max)
                        .to_string()
                })
                .collect();
            writeln!(m, "{g},{}", cells.join(","))?;
        }
        m.flush()?;
    }

    let mut b = create(&dir.join(SWEEP_BEST_FILE))?;
    writeln!(
        b,
        "# best validation AUC {} (test AUC {}, AP {})",
        r.points[r.best].val_auc, r.points[r.best].test_auc, r.points[r.best].test_ap
    )?;
    b.write_all(r.best_config.echo().as_bytes())?;
    b.flush()?;
    Ok(())
}

fn kind_list(cfg: &RunConfig) -> Vec<EmbeddingKind> {
    match cfg.get("diagnose_kind") {
        "structure" => vec![EmbeddingKind::Structure],
        "attribute" => vec![EmbeddingKind::Attribute],
        _ => vec![EmbeddingKind::Structure, EmbeddingKind::Attribute],
    }
}

/// `diagnose`: per-hop mean cosine similarity of the checkpoint's embeddings.
pub fn cmd_diagnose(cfg: &RunConfig) -> Result<Vec<(EmbeddingKind, Vec<HopSimilarity>)>> {
    cfg.check()?;
    write_echo(cfg)?;
    let graph = load_graph(cfg)?;
    let ck = load_model(cfg, &graph)?;
    let h_max: u32 = cfg.get_as("h_max")?;
    let seed: u64 = cfg.get_as("seed")?;
    let mut out = Vec::new();
    for kind in kind_list(cfg) {
        let profile = hop_similarity_profile(&ck.model, &graph, h_max, kind, seed)?;
        let name = match kind {
            EmbeddingKind::Structure => "hop_structure.csv",
            EmbeddingKind::Attribute => "hop_attribute.csv",
        };
        let mut f = create(&cfg.out_dir().join(name))?;
        write_hop_profile_csv(&profile, &mut f)?;
        f.flush()?;
        out.push((kind, profile));
    }
    Ok(out)
}

/// Reads a dense attribute vector: whitespace- or comma-separated numbers.
pub fn read_attribute_file(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading attributes {}", path.display()))?;
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| anyhow!("{}: bad attribute value `{t}`", path.display()))
        })
        .collect()
}

enum Side {
    Node(usize),
    Attrs(Vec<f64>),
}

fn endpoint(s: &Side) -> Endpoint<'_> {
    match s {
        Side::Node(u) => Endpoint::Node(*u),
        Side::Attrs(x) => Endpoint::Attributes(x),
    }
}

fn parse_side(s: &str) -> Result<Side> {
    match s.strip_prefix('@') {
        Some(path) => Ok(Side::Attrs(read_attribute_file(Path::new(path))?)),
        None => Ok(Side::Node(
            s.parse().map_err(|_| anyhow!("endpoint `{s}` is neither a node id nor @file"))?,
        )),
    }
}

/// `predict`: scores `P:Q` pairs where each side is a node id or
/// `@attributes-file` for a new node.
pub fn cmd_predict(cfg: &RunConfig, pairs: &[String]) -> Result<Vec<(String, String, f64)>> {
    cfg.check()?;
    write_echo(cfg)?;
    if pairs.is_empty() {
        bail!("no pairs given; pass P:Q arguments");
    }
    let graph = load_graph(cfg)?;
    let ck = load_model(cfg, &graph)?;
    let lambda = match cfg.get("lambda") {
        "auto" => ck.model.hp.lambda,
        v => parse_triple("lambda", v)?,
    };
    let mut out = Vec::new();
    for pair in pairs {
        let (a, b) = pair
            .split_once(':')
            .ok_or_else(|| anyhow!("pair `{pair}` must look like P:Q"))?;
        let (sa, sb) = (parse_side(a)?, parse_side(b)?);
        let score = link_score(&ck.model, endpoint(&sa), endpoint(&sb), lambda)
            .with_context(|| format!("scoring {pair}"))?;
        out.push((a.to_string(), b.to_string(), score));
    }
    Ok(out)
}
