//! Plain-text model checkpoints.
//!
//! ```text
//! deal-checkpoint v1
//! meta <key> <value>
//! known <n> <0/1 string>
//! tensor <name> <rows> <cols>
//! <one line of space-separated values per row>
//! end
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a saved model
//! reloads bit for bit.

use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::encoders::{AttrEncoderParams, DenseLayer, Matrix, ModelParams, StructEncoderParams};
use crate::error::{DealError, Result};
use crate::eval::NodeEmbeddings;
use crate::graph::SparseRows;
use crate::loss::HyperParams;
use crate::split::SplitMode;
use crate::training::TrainedModel;

pub const CHECKPOINT_HEADER: &str = "deal-checkpoint v1";

fn join<T: std::fmt::Debug>(xs: &[T]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn hp_meta(hp: &HyperParams) -> Vec<(String, String)> {
    vec![
        ("hp.gamma1".into(), format!("{:?}", hp.gamma1)),
        ("hp.b1".into(), format!("{:?}", hp.b1)),
        ("hp.gamma2".into(), format!("{:?}", hp.gamma2)),
        ("hp.b2".into(), format!("{:?}", hp.b2)),
        ("hp.beta".into(), format!("{:?}", hp.beta)),
        ("hp.theta".into(), join(&hp.theta)),
        ("hp.lambda".into(), join(&hp.lambda)),
        ("hp.align_mode".into(), hp.align_mode.to_string()),
        ("hp.tight_scope".into(), hp.tight_scope.to_string()),
        ("hp.symmetrize_loose_align".into(), hp.symmetrize_loose_align.to_string()),
        ("hp.symmetrize_scores".into(), hp.symmetrize_scores.to_string()),
        ("hp.batch_size".into(), hp.batch_size.to_string()),
        ("hp.pos_frac".into(), format!("{:?}", hp.pos_frac)),
    ]
}

/// Writes `model` plus free-form `extra` metadata (e.g. a config echo).
/// Keys must not contain whitespace; values must not contain newlines.
pub fn save_checkpoint(model: &TrainedModel, extra: &[(String, String)], mut out: impl Write) -> Result<()> {
    writeln!(out, "{CHECKPOINT_HEADER}")?;
    let mut meta = vec![
        ("mode".to_string(), model.mode.to_string()),
        ("elu_alpha".to_string(), format!("{:?}", model.params.attr.elu_alpha)),
        ("layers".to_string(), model.params.attr.layers.len().to_string()),
        ("best_epoch".to_string(), model.best_epoch.to_string()),
    ];
    if let Some((auc, ap)) = model.best_val {
        meta.push(("best_val_auc".into(), format!("{auc:?}")));
        meta.push(("best_val_ap".into(), format!("{ap:?}")));
    }
    meta.extend(hp_meta(&model.hp));
    for (k, v) in meta.iter().chain(extra) {
        if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(DealError::Argument(format!("unwritable metadata entry `{k}`")));
        }
        writeln!(out, "meta {k} {v}")?;
    }
    let known: String = model.embeddings.known.iter().map(|&k| if k { '1' } else { '0' }).collect();
    writeln!(out, "known {} {known}", model.embeddings.known.len())?;
    let mut write_tensor = |name: &str, rows: usize, cols: usize, data: &[f64]| -> Result<()> {
        writeln!(out, "tensor {name} {rows} {cols}")?;
        for r in 0..rows {
            let line: Vec<String> = data[r * cols..(r + 1) * cols].iter().map(|x| format!("{x:?}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    };
    for (k, layer) in model.params.attr.layers.iter().enumerate() {
        let w = &layer.weight;
        write_tensor(&format!("attr.{k}.weight"), w.rows(), w.cols(), w.as_slice())?;
        write_tensor(&format!("attr.{k}.bias"), 1, layer.bias.len(), &layer.bias)?;
    }
    let d = &model.params.structure.directions;
    write_tensor("struct.directions", d.rows(), d.cols(), d.as_slice())?;
    let s = &model.params.structure.scales;
    write_tensor("struct.scales", 1, s.len(), s)?;
    writeln!(out, "end")?;
    Ok(())
}

/// A loaded checkpoint: the model (embeddings recomputed from `features`)
/// and every metadata entry in file order.
pub struct Checkpoint {
    pub model: TrainedModel,
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn parse_num<T: FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse().map_err(|_| DealError::parse(line, format!("bad {what} `{s}`")))
}

fn parse_triple(s: &str, line: usize, what: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| parse_num(x.trim(), line, what))
        .collect::<Result<_>>()?;
    v.try_into()
        .map_err(|_| DealError::parse(line, format!("{what} needs three values")))
}

fn hp_from_meta(meta: &[(String, String, usize)]) -> Result<HyperParams> {
    let mut hp = HyperParams::default();
    for (k, v, line) in meta {
        let line = *line;
        match k.as_str() {
            "hp.gamma1" => hp.gamma1 = parse_num(v, line, k)?,
            "hp.b1" => hp.b1 = parse_num(v, line, k)?,
            "hp.gamma2" => hp.gamma2 = parse_num(v, line, k)?,
            "hp.b2" => hp.b2 = parse_num(v, line, k)?,
            "hp.beta" => hp.beta = parse_num(v, line, k)?,
            "hp.theta" => hp.theta = parse_triple(v, line, k)?,
            "hp.lambda" => hp.lambda = parse_triple(v, line, k)?,
            "hp.align_mode" => hp.align_mode = v.parse().map_err(|e| DealError::parse(line, format!("{e}")))?,
            "hp.tight_scope" => hp.tight_scope = v.parse().map_err(|e| DealError::parse(line, format!("{e}")))?,
            "hp.symmetrize_loose_align" => hp.symmetrize_loose_align = parse_num(v, line, k)?,
            "hp.symmetrize_scores" => hp.symmetrize_scores = parse_num(v, line, k)?,
            "hp.batch_size" => hp.batch_size = parse_num(v, line, k)?,
            "hp.pos_frac" => hp.pos_frac = parse_num(v, line, k)?,
            _ => {}
        }
    }
    Ok(hp)
}

/// Reads a checkpoint written by [`save_checkpoint`]. `features` must be the
/// attribute matrix of the graph the model was trained on.
pub fn load_checkpoint(input: impl BufRead, features: &SparseRows) -> Result<Checkpoint> {
    let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = || -> Result<(usize, String)> {
        match lines.next() {
            Some((n, l)) => Ok((n, l?)),
            None => Err(DealError::parse(0, "unexpected end of checkpoint")),
        }
    };
    let (n0, header) = next()?;
    if header.trim_end() != CHECKPOINT_HEADER {
        return Err(DealError::parse(n0, format!("expected `{CHECKPOINT_HEADER}`")));
    }
    let mut meta: Vec<(String, String, usize)> = Vec::new();
    let mut known: Option<Vec<bool>> = None;
    let mut tensors: Vec<(String, Matrix)> = Vec::new();
    loop {
        let (ln, line) = next()?;
        let line = line.trim_end();
        if line == "end" {
            break;
        }
        let mut parts = line.splitn(2, ' ');
        let tag = parts.next().unwrap_or("");
        let rest = parts.next().unwrap_or("");
        match tag {
            "meta" => {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.push((k.to_string(), v.to_string(), ln));
            }
            "known" => {
                let (count, bits) = rest
                    .split_once(' ')
                    .ok_or_else(|| DealError::parse(ln, "known needs a count and a mask"))?;
                let count: usize = parse_num(count, ln, "node count")?;
                let mask: Vec<bool> = bits
                    .chars()
                    .map(|c| match c {
                        '1' => Ok(true),
                        '0' => Ok(false),
                        _ => Err(DealError::parse(ln, format!("bad mask character `{c}`"))),
                    })
                    .collect::<Result<_>>()?;
                if mask.len() != count {
                    return Err(DealError::parse(ln, format!("mask has {} entries, expected {count}", mask.len())));
                }
                known = Some(mask);
            }
            "tensor" => {
                let f: Vec<&str> = rest.split_whitespace().collect();
                if f.len() != 3 {
                    return Err(DealError::parse(ln, "tensor needs name, rows and cols"));
                }
                let rows: usize = parse_num(f[1], ln, "row count")?;
                let cols: usize = parse_num(f[2], ln, "column count")?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (rl, row) = next()?;
                    let before = data.len();
                    for tok in row.split_whitespace() {
                        let x: f64 = parse_num(tok, rl, "value")?;
                        if !x.is_finite() {
                            return Err(DealError::parse(rl, format!("non-finite value in `{}`", f[0])));
                        }
                        data.push(x);
                    }
                    if data.len() - before != cols {
                        return Err(DealError::parse(rl, format!("expected {cols} values in `{}`", f[0])));
                    }
                }
                tensors.push((f[0].to_string(), Matrix::from_vec(rows, cols, data)?));
            }
            _ => return Err(DealError::parse(ln, format!("unknown record `{tag}`"))),
        }
    }

    let get_meta = |key: &str| -> Result<(&str, usize)> {
        meta.iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, l)| (v.as_str(), *l))
            .ok_or_else(|| DealError::parse(0, format!("missing meta `{key}`")))
    };
    let mut take = |name: &str| -> Result<Matrix> {
        let i = tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| DealError::parse(0, format!("missing tensor `{name}`")))?;
        Ok(tensors.swap_remove(i).1)
    };
    let (mode, l) = get_meta("mode")?;
    let mode: SplitMode = mode.parse().map_err(|e| DealError::parse(l, format!("{e}")))?;
    let (alpha, l) = get_meta("elu_alpha")?;
    let elu_alpha: f64 = parse_num(alpha, l, "elu_alpha")?;
    let (depth, l) = get_meta("layers")?;
    let depth: usize = parse_num(depth, l, "layer count")?;
    let mut layers = Vec::with_capacity(depth);
    for k in 0..depth {
        let weight = take(&format!("attr.{k}.weight"))?;
        let bias = take(&format!("attr.{k}.bias"))?;
        if bias.rows() != 1 {
            return Err(DealError::Shape(format!("attr.{k}.bias must have one row")));
        }
        layers.push(DenseLayer {
            weight,
            bias: bias.as_slice().to_vec(),
        });
    }
    let directions = take("struct.directions")?;
    let scales = take("struct.scales")?;
    if scales.rows() != 1 || scales.cols() != directions.rows() {
        return Err(DealError::Shape("struct.scales must hold one value per node".into()));
    }
    let attr = AttrEncoderParams { layers, elu_alpha };
    attr.validate()?;
    if attr.output_dim() != directions.cols() {
        return Err(DealError::Shape(format!(
            "attribute encoder outputs {} dims, structure table has {}",
            attr.output_dim(),
            directions.cols()
        )));
    }
    let params = ModelParams {
        attr,
        structure: StructEncoderParams {
            directions,
            scales: scales.as_slice().to_vec(),
        },
    };
    let known = known.ok_or_else(|| DealError::parse(0, "missing known mask"))?;
    let hp = hp_from_meta(&meta)?;
    let best_epoch = match get_meta("best_epoch") {
        Ok((v, l)) => parse_num(v, l, "best_epoch")?,
        Err(_) => 0,
    };
    let best_val = match (get_meta("best_val_auc"), get_meta("best_val_ap")) {
        (Ok((a, la)), Ok((p, lp))) => Some((parse_num(a, la, "auc")?, parse_num(p, lp, "ap")?)),
        _ => None,
    };
    let embeddings = NodeEmbeddings::compute(&params, features, known)?;
    let mut model = TrainedModel::from_parts(params, embeddings, hp, mode);
    model.best_epoch = best_epoch;
    model.best_val = best_val;
    Ok(Checkpoint {
        model,
        meta: meta.into_iter().map(|(k, v, _)| (k, v)).collect(),
    })
}
