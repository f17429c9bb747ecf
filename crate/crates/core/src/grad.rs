//! Reverse-mode gradients of the training objective, a central-difference
//! checker, and the Adam / SGD parameter updates.
//!
//! The computation graph is fixed (table lookup with weight normalization,
//! an ELU MLP, cosine similarities, softplus margins), so each primitive has a
//! hand-written backward function instead of a general tape.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{
    cosine, dot, elu_derivative, encode_attribute_rows, encode_structure, norm, Matrix, ModelParams,
    COSINE_EPS,
};
use crate::error::{DealError, Result};
use crate::graph::{NodeId, SparseRows};
use crate::loss::{pair_term, total_loss, AlignMode, BatchPair, HyperParams, MiniBatch, TightScope};

/// Parameter vectors longer than this are checked on a random coordinate subset.
pub const FD_FULL_CHECK_MAX: usize = 2000;
pub const FD_SAMPLED_COORDS: usize = 500;
pub const ROUNDING_ULPS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSlot {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat copy of every trainable tensor with a name -> slice index.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    slots: Vec<TensorSlot>,
}

impl ParamVector {
    pub fn from_values(values: Vec<f64>) -> Self {
        let len = values.len();
        ParamVector {
            values,
            slots: vec![TensorSlot {
                name: "params".into(),
                offset: 0,
                len,
            }],
        }
    }

    pub fn from_model(model: &ModelParams) -> Self {
        let mut values = Vec::with_capacity(model.num_params());
        let mut slots = Vec::new();
        for (name, t) in model.tensors() {
            slots.push(TensorSlot {
                name,
                offset: values.len(),
                len: t.len(),
            });
            values.extend_from_slice(t);
        }
        ParamVector { values, slots }
    }

    /// Copies the flat values back into a model of the same layout.
    pub fn write_into(&self, model: &mut ModelParams) -> Result<()> {
        let tensors = model.tensors_mut();
        if tensors.len() != self.slots.len() {
            return Err(DealError::Shape("parameter layout mismatch".into()));
        }
        for ((name, t), slot) in tensors.into_iter().zip(&self.slots) {
            if name != slot.name || t.len() != slot.len {
                return Err(DealError::Shape(format!("tensor `{name}` does not match slot `{}`", slot.name)));
            }
            t.copy_from_slice(&self.values[slot.offset..slot.offset + slot.len]);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slots(&self) -> &[TensorSlot] {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&[f64]> {
        self.slots
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    /// Name of the tensor holding flat coordinate `i`.
    pub fn tensor_of(&self, i: usize) -> &str {
        self.slots
            .iter()
            .find(|s| (s.offset..s.offset + s.len).contains(&i))
            .map_or("params", |s| s.name.as_str())
    }
}

/// A differentiable scalar function of a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, at: &[f64]) -> Result<f64>;
    fn value_and_gradient(&self, at: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// An [`Objective`] from a pair of closures.
pub struct FnObjective<F, G> {
    dim: usize,
    f: F,
    g: G,
}

impl<F, G> FnObjective<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    pub fn new(dim: usize, f: F, g: G) -> Self {
        FnObjective { dim, f, g }
    }
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, at: &[f64]) -> Result<f64> {
        Ok((self.f)(at))
    }

    fn value_and_gradient(&self, at: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok(((self.f)(at), (self.g)(at)))
    }
}

/// Gradient of `objective` at `at`; fails on the first non-finite coordinate,
/// naming the tensor it belongs to.
pub fn gradient(objective: &dyn Objective, at: &ParamVector) -> Result<Vec<f64>> {
    if objective.dim() != at.len() {
        return Err(DealError::Shape(format!(
            "objective takes {} parameters, got {}",
            objective.dim(),
            at.len()
        )));
    }
    let (v, g) = objective.value_and_gradient(&at.values)?;
    if !v.is_finite() {
        return Err(DealError::NonFinite { tensor: "loss".into() });
    }
    if let Some(i) = g.iter().position(|x| !x.is_finite()) {
        return Err(DealError::NonFinite {
            tensor: format!("grad.{}", at.tensor_of(i)),
        });
    }
    Ok(g)
}

/// Largest relative error between the analytic gradient and central
/// differences, with denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// The absolute difference is first reduced by the rounding noise of the two
/// function evaluations (`ROUNDING_ULPS` ulps each, divided by `2·eps`).
/// Without this, coordinates the objective is flat in, such as the structure
/// scales under cosine similarity, report pure noise as error.
pub fn finite_difference_check(objective: &dyn Objective, at: &ParamVector, eps: f64) -> Result<f64> {
    let analytic = gradient(objective, at)?;
    let n = at.len();
    let coords: Vec<usize> = if n > FD_FULL_CHECK_MAX {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut c = sample(&mut rng, n, FD_SAMPLED_COORDS).into_vec();
        c.sort_unstable();
        c
    } else {
        (0..n).collect()
    };
    let mut probe = at.values.clone();
    let mut worst: f64 = 0.0;
    for i in coords {
        let x = probe[i];
        probe[i] = x + eps;
        let fp = objective.value(&probe)?;
        probe[i] = x - eps;
        let fm = objective.value(&probe)?;
        probe[i] = x;
        let numeric = (fp - fm) / (2.0 * eps);
        // a few ulps of each function value, divided by the step
        let noise = ROUNDING_ULPS * f64::EPSILON * fp.abs().max(fm.abs()) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(((analytic[i] - numeric).abs() - noise).max(0.0) / denom);
    }
    Ok(worst)
}

/// Accumulates the cosine backward pass: `g·∂cos(a,b)/∂a` into `da` and
/// `g·∂cos(a,b)/∂b` into `db`.
#[inline]
fn cosine_backward(a: &[f64], b: &[f64], g: f64, da: &mut [f64], db: &mut [f64]) {
    let na = norm(a);
    let nb = norm(b);
    if na < COSINE_EPS || nb < COSINE_EPS || g == 0.0 {
        return;
    }
    let inv = 1.0 / (na * nb);
    let c = dot(a, b) * inv;
    let ka = c / (na * na);
    let kb = c / (nb * nb);
    for i in 0..a.len() {
        da[i] += g * (b[i] * inv - ka * a[i]);
        db[i] += g * (a[i] * inv - kb * b[i]);
    }
}

/// Same as [`cosine_backward`] when both arguments alias the same row.
#[inline]
fn cosine_backward_rows(z: &Matrix, dz: &mut Matrix, p: usize, q: usize, g: f64) {
    let mut da = vec![0.0; z.cols()];
    let mut db = vec![0.0; z.cols()];
    cosine_backward(z.row(p), z.row(q), g, &mut da, &mut db);
    add_into(dz.row_mut(p), &da);
    add_into(dz.row_mut(q), &db);
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn check_finite(name: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DealError::NonFinite { tensor: name.into() })
    }
}

/// Local numbering of the nodes a batch touches.
struct LocalBatch {
    nodes: Vec<NodeId>,
    pairs: Vec<BatchPair>,
    tight_rows: Vec<usize>,
}

fn localize(batch: &MiniBatch, hp: &HyperParams, all_nodes: &[NodeId]) -> LocalBatch {
    let use_all = hp.theta[2] != 0.0 && hp.align_mode == AlignMode::Tight && hp.tight_scope == TightScope::All;
    let mut nodes = batch.nodes();
    if use_all {
        nodes.extend_from_slice(all_nodes);
        nodes.sort_unstable();
        nodes.dedup();
    }
    let index: HashMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let pairs = batch
        .pairs
        .iter()
        .map(|e| BatchPair {
            p: index[&e.p],
            q: index[&e.q],
            ..*e
        })
        .collect();
    let tight_rows = if use_all {
        let mut r: Vec<usize> = all_nodes.iter().map(|u| index[u]).collect();
        r.sort_unstable();
        r.dedup();
        r
    } else {
        (0..nodes.len()).collect()
    };
    LocalBatch {
        nodes,
        pairs,
        tight_rows,
    }
}

fn check_batch_ids(model: &ModelParams, features: &SparseRows, batch: &MiniBatch) -> Result<()> {
    if batch.is_empty() {
        return Err(DealError::Argument("empty mini-batch".into()));
    }
    let n = model.structure.num_nodes().min(features.num_rows());
    if let Some(e) = batch.pairs.iter().find(|e| e.p >= n || e.q >= n) {
        return Err(DealError::Argument(format!("pair ({}, {}) out of range (n = {n})", e.p, e.q)));
    }
    if features.width() != model.attr.input_dim() {
        return Err(DealError::Shape(format!(
            "features have width {}, encoder expects {}",
            features.width(),
            model.attr.input_dim()
        )));
    }
    Ok(())
}

/// Loss of one batch and its gradient with respect to every model tensor,
/// written into `grads` (which must have the model's shapes; it is zeroed
/// first). `all_nodes` is the node set used by whole-graph tight alignment.
pub fn loss_and_gradient(
    model: &ModelParams,
    features: &SparseRows,
    batch: &MiniBatch,
    hp: &HyperParams,
    all_nodes: &[NodeId],
    grads: &mut ModelParams,
) -> Result<f64> {
    check_batch_ids(model, features, batch)?;
    let local = localize(batch, hp, all_nodes);
    let u = local.nodes.len();
    let l = model.embed_dim();
    let [t1, t2, t3] = hp.theta;
    let need_s = t1 != 0.0 || t3 != 0.0;
    let need_a = t2 != 0.0 || t3 != 0.0;
    let alpha = model.attr.elu_alpha;

    // forward
    let mut zs = Matrix::zeros(u, l);
    if need_s {
        for (r, &id) in local.nodes.iter().enumerate() {
            model.structure.embed_into(id, zs.row_mut(r));
        }
        check_finite("z_s", zs.as_slice())?;
    }
    let mut za = Matrix::zeros(u, l);
    let mut traces = Vec::new();
    if need_a {
        traces.reserve(u);
        for (r, &id) in local.nodes.iter().enumerate() {
            let (c, v) = features.row(id);
            let trace = model.attr.forward_trace(c, v);
            za.row_mut(r).copy_from_slice(trace.act.last().unwrap());
            traces.push(trace);
        }
        check_finite("z_a", za.as_slice())?;
    }

    // loss and embedding gradients
    let inv_b = 1.0 / local.pairs.len() as f64;
    let mut loss = 0.0;
    let mut dzs = Matrix::zeros(u, l);
    let mut dza = Matrix::zeros(u, l);
    if t1 != 0.0 {
        for e in &local.pairs {
            let (v, dv) = pair_term(cosine(zs.row(e.p), zs.row(e.q)), e, hp);
            loss += t1 * v * inv_b;
            cosine_backward_rows(&zs, &mut dzs, e.p, e.q, t1 * dv * inv_b);
        }
    }
    if t2 != 0.0 {
        for e in &local.pairs {
            let (v, dv) = pair_term(cosine(za.row(e.p), za.row(e.q)), e, hp);
            loss += t2 * v * inv_b;
            cosine_backward_rows(&za, &mut dza, e.p, e.q, t2 * dv * inv_b);
        }
    }
    if t3 != 0.0 {
        let mut da = vec![0.0; l];
        let mut db = vec![0.0; l];
        match hp.align_mode {
            AlignMode::Tight => {
                let w = t3 / local.tight_rows.len() as f64;
                for &i in &local.tight_rows {
                    loss -= w * cosine(zs.row(i), za.row(i));
                    da.fill(0.0);
                    db.fill(0.0);
                    cosine_backward(zs.row(i), za.row(i), -w, &mut da, &mut db);
                    add_into(dzs.row_mut(i), &da);
                    add_into(dza.row_mut(i), &db);
                }
            }
            AlignMode::Loose => {
                let orientations: &[bool] = if hp.symmetrize_loose_align { &[false, true] } else { &[false] };
                let w = t3 * inv_b / orientations.len() as f64;
                for e in &local.pairs {
                    for &flip in orientations {
                        let (p, q) = if flip { (e.q, e.p) } else { (e.p, e.q) };
                        let (v, dv) = pair_term(cosine(zs.row(p), za.row(q)), e, hp);
                        loss += w * v;
                        da.fill(0.0);
                        db.fill(0.0);
                        cosine_backward(zs.row(p), za.row(q), w * dv, &mut da, &mut db);
                        add_into(dzs.row_mut(p), &da);
                        add_into(dza.row_mut(q), &db);
                    }
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(DealError::NonFinite { tensor: "loss".into() });
    }

    grads.tensors_mut().into_iter().for_each(|(_, t)| t.fill(0.0));

    // weight normalization: z = g v / |v|
    if need_s {
        for (r, &id) in local.nodes.iter().enumerate() {
            let dz = dzs.row(r);
            let v = model.structure.directions.row(id);
            let nv = norm(v);
            if nv == 0.0 {
                continue;
            }
            let g = model.structure.scales[id];
            let proj = dot(dz, v) / nv;
            grads.structure.scales[id] += proj;
            let k = g / nv;
            let gv = grads.structure.directions.row_mut(id);
            for i in 0..l {
                gv[i] += k * (dz[i] - proj * v[i] / nv);
            }
        }
    }

    // MLP backward, one node at a time
    if need_a {
        let layers = &model.attr.layers;
        let depth = layers.len();
        for (r, &id) in local.nodes.iter().enumerate() {
            let (pre, act) = (&traces[r].pre, &traces[r].act);
            let mut delta: Vec<f64> = dza
                .row(r)
                .iter()
                .zip(&pre[depth - 1])
                .map(|(d, &x)| d * elu_derivative(x, alpha))
                .collect();
            if delta.iter().all(|d| *d == 0.0) {
                continue;
            }
            for k in (0..depth).rev() {
                let gl = &mut grads.attr.layers[k];
                add_into(&mut gl.bias, &delta);
                if k == 0 {
                    let (c, v) = features.row(id);
                    for (&ci, &xi) in c.iter().zip(v) {
                        for (gw, d) in gl.weight.row_mut(ci).iter_mut().zip(&delta) {
                            *gw += xi * d;
                        }
                    }
                } else {
                    let below = &pre[k - 1];
                    let w = &layers[k].weight;
                    let mut next = vec![0.0; below.len()];
                    for (i, (&zi, &ai)) in below.iter().zip(&act[k - 1]).enumerate() {
                        let grow = gl.weight.row_mut(i);
                        for (gw, d) in grow.iter_mut().zip(&delta) {
                            *gw += ai * d;
                        }
                        next[i] = dot(w.row(i), &delta) * elu_derivative(zi, alpha);
                    }
                    delta = next;
                }
            }
        }
    }

    for (name, t) in grads.tensors() {
        check_finite(&format!("grad.{name}"), t)?;
    }
    Ok(loss)
}

/// The training objective of one batch as a function of the flattened model
/// parameters. Values go through the public encoders and [`total_loss`], a
/// separate path from the backward pass that supplies gradients.
pub struct BatchObjective<'a> {
    template: ModelParams,
    features: &'a SparseRows,
    batch: &'a MiniBatch,
    hp: &'a HyperParams,
    all_nodes: Vec<NodeId>,
}

impl<'a> BatchObjective<'a> {
    pub fn new(model: &ModelParams, features: &'a SparseRows, batch: &'a MiniBatch, hp: &'a HyperParams) -> Self {
        BatchObjective {
            template: model.clone(),
            features,
            batch,
            hp,
            all_nodes: (0..model.structure.num_nodes()).collect(),
        }
    }

    pub fn with_all_nodes(mut self, nodes: Vec<NodeId>) -> Self {
        self.all_nodes = nodes;
        self
    }

    fn model_at(&self, at: &[f64]) -> Result<ModelParams> {
        let mut m = self.template.clone();
        let mut pv = ParamVector::from_model(&m);
        if pv.len() != at.len() {
            return Err(DealError::Shape("parameter length mismatch".into()));
        }
        pv.values.copy_from_slice(at);
        pv.write_into(&mut m)?;
        Ok(m)
    }
}

impl Objective for BatchObjective<'_> {
    fn dim(&self) -> usize {
        self.template.num_params()
    }

    fn value(&self, at: &[f64]) -> Result<f64> {
        let m = self.model_at(at)?;
        let local = localize(self.batch, self.hp, &self.all_nodes);
        let zs = encode_structure(&m.structure, &local.nodes)?;
        let za = encode_attribute_rows(&m.attr, self.features, &local.nodes)?;
        total_loss(&MiniBatch::new(local.pairs), &zs, &za, self.hp)
    }

    fn value_and_gradient(&self, at: &[f64]) -> Result<(f64, Vec<f64>)> {
        let m = self.model_at(at)?;
        let mut g = m.zeros_like();
        let loss = loss_and_gradient(&m, self.features, self.batch, self.hp, &self.all_nodes, &mut g)?;
        Ok((loss, ParamVector::from_model(&g).values))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = DealError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(DealError::Argument(format!("unknown optimizer `{s}`"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates and step count for Adam (unused by plain SGD).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(len: usize, config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    fn update(&mut self, offset: usize, params: &mut [f64], grads: &[f64], bc1: f64, bc2: f64) {
        let c = self.config;
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= c.lr * g;
                }
            }
            OptimizerKind::Adam => {
                let m = &mut self.m[offset..offset + params.len()];
                let v = &mut self.v[offset..offset + params.len()];
                for i in 0..params.len() {
                    let g = grads[i];
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    params[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
                }
            }
        }
    }

    fn begin_step(&mut self) -> (f64, f64) {
        self.step += 1;
        let t = self.step as i32;
        (
            1.0 - self.config.beta1.powi(t),
            1.0 - self.config.beta2.powi(t),
        )
    }

    /// One update of a flat parameter slice.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(DealError::Shape(format!(
                "params {}, grads {}, optimizer state {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        let (bc1, bc2) = self.begin_step();
        self.update(0, params, grads, bc1, bc2);
        Ok(())
    }

    /// One update of every model tensor in place.
    pub fn step_model(&mut self, model: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        if model.num_params() != self.m.len() || grads.num_params() != self.m.len() {
            return Err(DealError::Shape("optimizer state does not match model".into()));
        }
        let (bc1, bc2) = self.begin_step();
        let mut offset = 0;
        for ((_, p), (_, g)) in model.tensors_mut().into_iter().zip(grads.tensors()) {
            self.update(offset, p, g, bc1, bc2);
            offset += p.len();
        }
        Ok(())
    }
}

/// Bias-corrected adaptive-moment update of `params` (plain SGD when the
/// state is configured for it).
pub fn adam_step(params: &mut ParamVector, grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    state.step(&mut params.values, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::HopDistance;
    use crate::loss::generalized_logistic;
    use rand::Rng;

    fn quad() -> impl Objective {
        FnObjective::new(1, |p: &[f64]| p[0] * p[0], |p: &[f64]| vec![2.0 * p[0]])
    }

    #[test]
    fn square_gradient() {
        let g = gradient(&quad(), &ParamVector::from_values(vec![3.0])).unwrap();
        assert_eq!(g, vec![6.0]);
    }

    #[test]
    fn cosine_is_stationary_at_its_target() {
        let c = [0.3, -1.2, 2.0];
        let at = ParamVector::from_values(c.to_vec());
        let obj = FnObjective::new(
            3,
            move |w: &[f64]| cosine(w, &c),
            move |w: &[f64]| {
                let mut dw = vec![0.0; 3];
                let mut dc = vec![0.0; 3];
                cosine_backward(w, &c, 1.0, &mut dw, &mut dc);
                dw
            },
        );
        let g = gradient(&obj, &at).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-15), "{g:?}");
        assert!(finite_difference_check(&obj, &ParamVector::from_values(vec![1.0, 0.5, -0.2]), 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_is_named() {
        let obj = FnObjective::new(2, |_: &[f64]| 1.0, |_: &[f64]| vec![0.0, f64::NAN]);
        let err = gradient(&obj, &ParamVector::from_values(vec![0.0, 0.0])).unwrap_err();
        assert!(matches!(err, DealError::NonFinite { ref tensor } if tensor == "grad.params"));
    }

    #[test]
    fn quadratic_finite_difference_is_exact() {
        let obj = FnObjective::new(
            3,
            |p: &[f64]| p[0] * p[0] + 3.0 * p[1] * p[2] - p[2],
            |p: &[f64]| vec![2.0 * p[0], 3.0 * p[2], 3.0 * p[1] - 1.0],
        );
        let at = ParamVector::from_values(vec![0.7, -1.3, 2.1]);
        assert!(finite_difference_check(&obj, &at, 1e-4).unwrap() < 1e-9);
    }

    #[test]
    fn slightly_wrong_gradient_is_caught() {
        let obj = FnObjective::new(1, |p: &[f64]| p[0] * p[0], |p: &[f64]| vec![2.001 * p[0]]);
        let err = finite_difference_check(&obj, &ParamVector::from_values(vec![1.5]), 1e-6).unwrap();
        assert!(err > 1e-4 && err < 1e-3, "{err}");
    }

    #[test]
    fn logistic_of_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let c: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c2 = c.clone();
        let (gamma, b) = (2.0, 0.5);
        let obj = FnObjective::new(
            8,
            move |w: &[f64]| generalized_logistic(dot(w, &c), gamma, b).unwrap(),
            move |w: &[f64]| {
                let x = dot(w, &c2);
                let d = -crate::loss::sigmoid(-gamma * x + b);
                c2.iter().map(|ci| d * ci).collect()
            },
        );
        let at = ParamVector::from_values((0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        assert!(finite_difference_check(&obj, &at, 1e-6).unwrap() < 1e-6);
    }

    fn toy_model(n: usize, m: usize, l: usize, seed: u64) -> (ModelParams, SparseRows) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = ModelParams::init(n, m, &[5], l, 1.0, &mut rng);
        // non-trivial scales and biases exercise every path
        model.structure.scales.iter_mut().for_each(|s| *s = rng.random_range(0.5..2.0));
        for layer in &mut model.attr.layers {
            layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        }
        let trip = (0..n)
            .flat_map(|r| (0..m).map(move |c| (r, c)))
            .filter(|_| rng.random::<f64>() < 0.6)
            .map(|(r, c)| (r, c, 1.0 + (r + c) as f64 * 0.1))
            .collect::<Vec<_>>();
        (model, SparseRows::from_triplets(n, m, trip).unwrap())
    }

    #[test]
    fn path_graph_total_loss_gradient() {
        let (model, feats) = toy_model(4, 3, 2, 1);
        let batch = MiniBatch::new(vec![
            BatchPair::positive(0, 1),
            BatchPair::positive(2, 1),
            BatchPair::positive(2, 3),
            BatchPair::negative(0, 2, HopDistance::Finite(2)),
            BatchPair::negative(3, 0, HopDistance::Finite(3)),
        ]);
        let hp = HyperParams {
            gamma1: 2.0,
            gamma2: 1.5,
            b1: 0.3,
            b2: -0.2,
            beta: 1.0,
            ..Default::default()
        };
        let obj = BatchObjective::new(&model, &feats, &batch, &hp);
        let err = finite_difference_check(&obj, &ParamVector::from_model(&model), 1e-6).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn random_batches_pass_finite_difference_check() {
        for seed in 0..50u64 {
            let (model, feats) = toy_model(7, 5, 3, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs = (0..6)
                .map(|i| {
                    let p = rng.random_range(0..7);
                    let q = (p + rng.random_range(1..7)) % 7;
                    if i % 2 == 0 {
                        BatchPair::positive(p, q)
                    } else {
                        let d = rng.random_range(2..6);
                        BatchPair::negative(p, q, if d == 5 { HopDistance::Infinite } else { HopDistance::Finite(d) })
                    }
                })
                .collect();
            let batch = MiniBatch::new(pairs);
            let hp = HyperParams {
                gamma1: rng.random_range(0.5..3.0),
                gamma2: rng.random_range(0.5..3.0),
                b1: rng.random_range(-1.0..1.0),
                b2: rng.random_range(-1.0..1.0),
                align_mode: if seed % 2 == 0 { AlignMode::Loose } else { AlignMode::Tight },
                tight_scope: if seed % 4 == 1 { TightScope::All } else { TightScope::Batch },
                symmetrize_loose_align: seed % 4 == 2,
                ..Default::default()
            };
            let obj = BatchObjective::new(&model, &feats, &batch, &hp);
            let err = finite_difference_check(&obj, &ParamVector::from_model(&model), 1e-6).unwrap();
            assert!(err < 1e-4, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn analytic_loss_matches_public_total_loss() {
        let (model, feats) = toy_model(6, 4, 3, 2);
        let batch = MiniBatch::new(vec![
            BatchPair::positive(0, 1),
            BatchPair::negative(2, 5, HopDistance::Infinite),
            BatchPair::negative(4, 1, HopDistance::Finite(2)),
        ]);
        for mode in [AlignMode::Loose, AlignMode::Tight] {
            let hp = HyperParams {
                align_mode: mode,
                ..Default::default()
            };
            let obj = BatchObjective::new(&model, &feats, &batch, &hp);
            let pv = ParamVector::from_model(&model);
            let (a, _) = obj.value_and_gradient(&pv.values).unwrap();
            let b = obj.value(&pv.values).unwrap();
            assert!((a - b).abs() < 1e-12, "{mode}: {a} vs {b}");
        }
    }

    #[test]
    fn gradient_is_deterministic() {
        let (model, feats) = toy_model(5, 4, 3, 3);
        let batch = MiniBatch::new(vec![BatchPair::positive(0, 1), BatchPair::negative(2, 4, HopDistance::Infinite)]);
        let hp = HyperParams::default();
        let obj = BatchObjective::new(&model, &feats, &batch, &hp);
        let pv = ParamVector::from_model(&model);
        let a = gradient(&obj, &pv).unwrap();
        let b = gradient(&obj, &pv).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn direction_gradient_is_orthogonal_to_direction() {
        // the loss depends on a direction row only through its unit vector
        let (model, feats) = toy_model(5, 4, 3, 4);
        let batch = MiniBatch::new(vec![BatchPair::positive(0, 1), BatchPair::negative(0, 3, HopDistance::Finite(2))]);
        let hp = HyperParams::default();
        let mut g = model.zeros_like();
        loss_and_gradient(&model, &feats, &batch, &hp, &[0, 1, 2, 3, 4], &mut g).unwrap();
        for id in [0, 1, 3] {
            let along = dot(g.structure.directions.row(id), model.structure.directions.row(id));
            assert!(along.abs() < 1e-12, "row {id}: {along}");
        }
    }

    #[test]
    fn attribute_only_theta_leaves_structure_gradient_zero() {
        let (model, feats) = toy_model(5, 4, 3, 5);
        let batch = MiniBatch::new(vec![BatchPair::positive(0, 1), BatchPair::negative(0, 3, HopDistance::Finite(2))]);
        let hp = HyperParams {
            theta: [0.0, 1.0, 0.0],
            ..Default::default()
        };
        let mut g = model.zeros_like();
        loss_and_gradient(&model, &feats, &batch, &hp, &[], &mut g).unwrap();
        assert!(g.structure.directions.as_slice().iter().all(|x| *x == 0.0));
        assert!(g.structure.scales.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = ParamVector::from_values(vec![1.0, -2.0]);
        let mut s = OptimizerState::new(2, OptimizerConfig::default());
        adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        assert_eq!(p.values, vec![1.0, -2.0]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let mut p = ParamVector::from_values(vec![1.0, 1.0, 1.0]);
        let mut s = OptimizerState::new(3, OptimizerConfig::default());
        adam_step(&mut p, &[0.5, -30.0, 0.0], &mut s).unwrap();
        assert!((p.values[0] - (1.0 - 0.01)).abs() < 1e-7);
        assert!((p.values[1] - (1.0 + 0.01)).abs() < 1e-7);
        assert_eq!(p.values[2], 1.0);
    }

    #[test]
    fn adam_converges_on_scalar_quadratic() {
        let mut p = ParamVector::from_values(vec![0.0]);
        let cfg = OptimizerConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut s = OptimizerState::new(1, cfg);
        for _ in 0..100 {
            let g = 2.0 * (p.values[0] - 2.0);
            adam_step(&mut p, &[g], &mut s).unwrap();
        }
        assert!((p.values[0] - 2.0).abs() < 0.05, "{}", p.values[0]);
    }

    #[test]
    fn optimizer_dimension_mismatch() {
        let mut p = ParamVector::from_values(vec![0.0; 3]);
        let mut s = OptimizerState::new(2, OptimizerConfig::default());
        assert!(matches!(adam_step(&mut p, &[0.0; 3], &mut s), Err(DealError::Shape(_))));
    }

    #[test]
    fn param_vector_round_trip() {
        let (model, _) = toy_model(4, 3, 2, 9);
        let pv = ParamVector::from_model(&model);
        assert_eq!(pv.len(), model.num_params());
        let mut other = model.zeros_like();
        pv.write_into(&mut other).unwrap();
        assert_eq!(other, model);
        assert_eq!(pv.slot("struct.scales").unwrap(), &model.structure.scales[..]);
        assert_eq!(pv.tensor_of(0), "attr.0.weight");
    }
}
