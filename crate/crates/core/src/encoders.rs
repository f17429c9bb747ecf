//! The attribute-oriented MLP encoder, the weight-normalized structure table,
//! and cosine similarity.

use rand::Rng;

use crate::error::{DealError, Result};
use crate::graph::{NodeId, SparseRows};

/// Norms below this are treated as zero vectors by [`cosine_similarity`].
pub const COSINE_EPS: f64 = 1e-12;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DealError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DealError::Shape("ragged rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// Uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot_uniform(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-a..=a)).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, x: f64) {
        self.data.fill(x);
    }
}

/// Dot product with four independent partial sums, which lets the compiler
/// vectorize; the summation order is fixed, so results are deterministic.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Exponential linear unit: `x` for `x > 0`, `alpha * (e^x - 1)` otherwise.
#[inline]
pub fn elu(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        alpha * x.exp_m1()
    }
}

#[inline]
pub fn elu_derivative(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        alpha * x.exp()
    }
}

/// Cosine similarity without a length check. Zero-norm inputs give 0.
#[inline]
pub(crate) fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let nu = norm(u);
    let nv = norm(v);
    if nu < COSINE_EPS || nv < COSINE_EPS {
        return 0.0;
    }
    (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)
}

/// `u·v / (‖u‖‖v‖)`, or 0 when either norm is below [`COSINE_EPS`].
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(DealError::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    Ok(cosine(u, v))
}

/// Fully connected layer. `weight` is stored input-major (`in x out`), so the
/// layer computes `y_j = sum_i x_i * weight[i][j] + bias_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub(crate) fn apply_dense(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (o, w) in out.iter_mut().zip(self.weight.row(i)) {
                    *o += xi * w;
                }
            }
        }
    }

    pub(crate) fn apply_sparse(&self, cols: &[usize], vals: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (&c, &xi) in cols.iter().zip(vals) {
            for (o, w) in out.iter_mut().zip(self.weight.row(c)) {
                *o += xi * w;
            }
        }
    }
}

pub(crate) struct LayerTrace {
    pub pre: Vec<Vec<f64>>,
    pub act: Vec<Vec<f64>>,
}

/// MLP `H_a`: every layer is affine followed by ELU, the last one included.
#[derive(Debug, Clone, PartialEq)]
pub struct AttrEncoderParams {
    pub layers: Vec<DenseLayer>,
    pub elu_alpha: f64,
}

impl AttrEncoderParams {
    /// Glorot-initialized weights and zero biases for widths
    /// `input_dim -> hidden[0] -> ... -> output_dim`.
    pub fn init(input_dim: usize, hidden: &[usize], output_dim: usize, elu_alpha: f64, rng: &mut impl Rng) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer {
                weight: Matrix::glorot_uniform(w[0], w[1], w[0], w[1], rng),
                bias: vec![0.0; w[1]],
            })
            .collect();
        AttrEncoderParams { layers, elu_alpha }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::output_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(DealError::Shape("attribute encoder has no layers".into()));
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(DealError::Shape(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    k + 1,
                    pair[1].input_dim()
                )));
            }
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(DealError::Shape(format!("layer {k} bias length mismatch")));
            }
        }
        Ok(())
    }

    /// Runs one sparse input through the MLP, keeping each layer's
    /// pre-activation and activation. The embedding is the last activation.
    pub(crate) fn forward_trace(&self, cols: &[usize], vals: &[f64]) -> LayerTrace {
        let mut t = LayerTrace {
            pre: Vec::with_capacity(self.layers.len()),
            act: Vec::with_capacity(self.layers.len()),
        };
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.output_dim()];
            if k == 0 {
                layer.apply_sparse(cols, vals, &mut z);
            } else {
                layer.apply_dense(&t.act[k - 1], &mut z);
            }
            t.act.push(z.iter().map(|&x| elu(x, self.elu_alpha)).collect());
            t.pre.push(z);
        }
        t
    }

    pub(crate) fn forward_sparse(&self, cols: &[usize], vals: &[f64]) -> Vec<f64> {
        let mut act: Vec<f64> = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.output_dim()];
            if k == 0 {
                layer.apply_sparse(cols, vals, &mut z);
            } else {
                layer.apply_dense(&act, &mut z);
            }
            z.iter_mut().for_each(|x| *x = elu(*x, self.elu_alpha));
            act = z;
        }
        act
    }
}

/// Weight-normalized embedding table `H_s`: node `i` maps to
/// `scales[i] * directions[i] / ‖directions[i]‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructEncoderParams {
    pub directions: Matrix,
    pub scales: Vec<f64>,
}

impl StructEncoderParams {
    /// Glorot-uniform directions (fan-in `n`, fan-out `dim`), unit scales.
    pub fn init(num_nodes: usize, dim: usize, rng: &mut impl Rng) -> Self {
        StructEncoderParams {
            directions: Matrix::glorot_uniform(num_nodes, dim, num_nodes, dim, rng),
            scales: vec![1.0; num_nodes],
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.directions.rows()
    }

    pub fn dim(&self) -> usize {
        self.directions.cols()
    }

    #[inline]
    pub(crate) fn embed_into(&self, id: NodeId, out: &mut [f64]) {
        let d = self.directions.row(id);
        let n = norm(d);
        if n == 0.0 {
            out.fill(0.0);
            return;
        }
        let s = self.scales[id] / n;
        for (o, x) in out.iter_mut().zip(d) {
            *o = s * x;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EmbeddingKind {
    Structure,
    Attribute,
}

impl std::str::FromStr for EmbeddingKind {
    type Err = DealError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "structure" => Ok(EmbeddingKind::Structure),
            "attribute" => Ok(EmbeddingKind::Attribute),
            _ => Err(DealError::Argument(format!("unknown embedding kind `{s}`"))),
        }
    }
}

impl std::fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EmbeddingKind::Structure => "structure",
            EmbeddingKind::Attribute => "attribute",
        })
    }
}

/// One embedding row per encoded node.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: Matrix,
    pub kind: EmbeddingKind,
}

impl EmbeddingMatrix {
    pub fn new(rows: Matrix, kind: EmbeddingKind) -> Self {
        EmbeddingMatrix { rows, kind }
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }
}

/// Encodes every row of `features` with the MLP.
pub fn encode_attributes(params: &AttrEncoderParams, features: &SparseRows) -> Result<EmbeddingMatrix> {
    let ids: Vec<NodeId> = (0..features.num_rows()).collect();
    encode_attribute_rows(params, features, &ids)
}

/// Encodes the selected feature rows, in the order given.
pub fn encode_attribute_rows(
    params: &AttrEncoderParams,
    features: &SparseRows,
    ids: &[NodeId],
) -> Result<EmbeddingMatrix> {
    params.validate()?;
    if features.width() != params.input_dim() {
        return Err(DealError::Shape(format!(
            "features have width {}, encoder expects {}",
            features.width(),
            params.input_dim()
        )));
    }
    let l = params.output_dim();
    let mut out = Matrix::zeros(ids.len(), l);
    for (r, &id) in ids.iter().enumerate() {
        if id >= features.num_rows() {
            return Err(DealError::Argument(format!("feature row {id} out of range")));
        }
        let (c, v) = features.row(id);
        out.row_mut(r).copy_from_slice(&params.forward_sparse(c, v));
    }
    Ok(EmbeddingMatrix::new(out, EmbeddingKind::Attribute))
}

/// Looks up the weight-normalized structure embedding of each id.
pub fn encode_structure(params: &StructEncoderParams, ids: &[NodeId]) -> Result<EmbeddingMatrix> {
    let n = params.num_nodes();
    let mut out = Matrix::zeros(ids.len(), params.dim());
    for (r, &id) in ids.iter().enumerate() {
        if id >= n {
            return Err(DealError::Argument(format!("node {id} out of range (n = {n})")));
        }
        params.embed_into(id, out.row_mut(r));
    }
    Ok(EmbeddingMatrix::new(out, EmbeddingKind::Structure))
}

/// Both encoders; the full trainable state of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub attr: AttrEncoderParams,
    pub structure: StructEncoderParams,
}

impl ModelParams {
    pub fn init(
        num_nodes: usize,
        num_attrs: usize,
        hidden: &[usize],
        embed_dim: usize,
        elu_alpha: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let attr = AttrEncoderParams::init(num_attrs, hidden, embed_dim, elu_alpha, rng);
        let structure = StructEncoderParams::init(num_nodes, embed_dim, rng);
        ModelParams { attr, structure }
    }

    pub fn embed_dim(&self) -> usize {
        self.structure.dim()
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|(_, t)| t.fill(0.0));
        z
    }

    /// Named views of every trainable tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (k, l) in self.attr.layers.iter().enumerate() {
            out.push((format!("attr.{k}.weight"), l.weight.as_slice()));
            out.push((format!("attr.{k}.bias"), &l.bias));
        }
        out.push(("struct.directions".into(), self.structure.directions.as_slice()));
        out.push(("struct.scales".into(), &self.structure.scales));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (k, l) in self.attr.layers.iter_mut().enumerate() {
            out.push((format!("attr.{k}.weight"), l.weight.as_mut_slice()));
            out.push((format!("attr.{k}.bias"), &mut l.bias));
        }
        out.push(("struct.directions".into(), self.structure.directions.as_mut_slice()));
        out.push(("struct.scales".into(), &mut self.structure.scales));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}
