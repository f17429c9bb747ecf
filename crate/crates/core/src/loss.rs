//! Scalar objectives: the generalized logistic margin, the distance-weighted
//! ranking loss, tight and loose alignment, and their weighted total.

use std::fmt;
use std::str::FromStr;

use crate::distance::HopDistance;
use crate::encoders::{cosine, EmbeddingMatrix};
use crate::error::{DealError, Result};
use crate::graph::NodeId;

/// Beyond this softplus argument, `ln(1 + e^t)` is `t` to 64-bit precision.
const SOFTPLUS_LINEAR_ABOVE: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMode {
    Tight,
    Loose,
}

impl FromStr for AlignMode {
    type Err = DealError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tight" => Ok(AlignMode::Tight),
            "loose" => Ok(AlignMode::Loose),
            _ => Err(DealError::Argument(format!("unknown align mode `{s}`"))),
        }
    }
}

impl fmt::Display for AlignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignMode::Tight => "tight",
            AlignMode::Loose => "loose",
        })
    }
}

/// Node set averaged over by tight alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TightScope {
    /// Distinct nodes of the current mini-batch.
    Batch,
    /// Every row of the embedding matrices.
    All,
}

impl FromStr for TightScope {
    type Err = DealError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(TightScope::Batch),
            "all" => Ok(TightScope::All),
            _ => Err(DealError::Argument(format!("unknown tight scope `{s}`"))),
        }
    }
}

impl fmt::Display for TightScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TightScope::Batch => "batch",
            TightScope::All => "all",
        })
    }
}

/// Loss and scoring knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// Margin parameters of the negative-pair logistic.
    pub gamma1: f64,
    pub b1: f64,
    /// Margin parameters of the positive-pair logistic.
    pub gamma2: f64,
    pub b2: f64,
    /// Negative-pair distance weight; `0` disables it (every weight is 1).
    pub beta: f64,
    /// Weights of (structure ranking, attribute ranking, alignment).
    pub theta: [f64; 3],
    /// Score weights of (structure-structure, attribute-attribute, structure-attribute).
    pub lambda: [f64; 3],
    pub align_mode: AlignMode,
    pub tight_scope: TightScope,
    /// Also evaluate loose alignment on the mirrored pair and average the two.
    pub symmetrize_loose_align: bool,
    /// Score each evaluation pair in both orientations and average.
    pub symmetrize_scores: bool,
    pub batch_size: usize,
    pub pos_frac: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            gamma1: 1.0,
            b1: 0.0,
            gamma2: 1.0,
            b2: 0.0,
            beta: 1.0,
            theta: [1.0, 1.0, 1.0],
            lambda: [1.0 / 3.0; 3],
            align_mode: AlignMode::Loose,
            tight_scope: TightScope::Batch,
            symmetrize_loose_align: false,
            symmetrize_scores: false,
            batch_size: 512,
            pos_frac: 0.4,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let arg = |m: String| Err(DealError::Argument(m));
        if !(self.gamma1 > 0.0 && self.gamma2 > 0.0) {
            return arg(format!("gamma must be positive, got ({}, {})", self.gamma1, self.gamma2));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return arg(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.pos_frac > 0.0 && self.pos_frac < 1.0) {
            return arg(format!("pos_frac must lie in (0, 1), got {}", self.pos_frac));
        }
        if self.theta.iter().any(|t| *t < 0.0 || !t.is_finite()) || self.theta.iter().all(|t| *t == 0.0) {
            return arg(format!("theta must be non-negative and not all zero, got {:?}", self.theta));
        }
        if self.lambda.iter().any(|l| !l.is_finite()) {
            return arg("lambda must be finite".into());
        }
        if ![self.b1, self.b2].iter().all(|b| b.is_finite()) {
            return arg("b must be finite".into());
        }
        Ok(())
    }
}

/// One labelled node pair with its hop distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPair {
    pub p: NodeId,
    pub q: NodeId,
    pub linked: bool,
    pub dist: HopDistance,
}

impl BatchPair {
    pub fn positive(p: NodeId, q: NodeId) -> Self {
        BatchPair {
            p,
            q,
            linked: true,
            dist: HopDistance::Finite(1),
        }
    }

    pub fn negative(p: NodeId, q: NodeId, dist: HopDistance) -> Self {
        BatchPair {
            p,
            q,
            linked: false,
            dist,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MiniBatch {
    pub pairs: Vec<BatchPair>,
}

impl MiniBatch {
    pub fn new(pairs: Vec<BatchPair>) -> Self {
        MiniBatch { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn num_positive(&self) -> usize {
        self.pairs.iter().filter(|p| p.linked).count()
    }

    /// Sorted distinct node ids appearing in the batch.
    pub fn nodes(&self) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.pairs.iter().flat_map(|p| [p.p, p.q]).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Checks distinct endpoints and label / distance consistency.
    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.pairs.iter().enumerate() {
            if e.p == e.q {
                return Err(DealError::Argument(format!("batch entry {i} pairs node {} with itself", e.p)));
            }
            let ok = if e.linked {
                e.dist == HopDistance::Finite(1)
            } else {
                !matches!(e.dist, HopDistance::Finite(d) if d < 2)
            };
            if !ok {
                return Err(DealError::Argument(format!(
                    "batch entry {i}: label {} inconsistent with distance {}",
                    e.linked, e.dist
                )));
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn softplus(t: f64) -> f64 {
    if t > SOFTPLUS_LINEAR_ABOVE {
        t
    } else {
        t.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn phi(x: f64, gamma: f64, b: f64) -> f64 {
    softplus(-gamma * x + b) / gamma
}

/// `(1/γ)·ln(1 + e^(−γx + b))`, evaluated without overflow.
pub fn generalized_logistic(x: f64, gamma: f64, b: f64) -> Result<f64> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(DealError::Argument(format!("gamma must be positive, got {gamma}")));
    }
    Ok(phi(x, gamma, b))
}

/// `exp(β / d)`; exactly 1 for unreachable pairs.
pub fn negative_weight(dist: HopDistance, beta: f64) -> f64 {
    match dist {
        HopDistance::Finite(d) if d > 0 => (beta / d as f64).exp(),
        HopDistance::Finite(_) => f64::INFINITY,
        HopDistance::Infinite => 1.0,
    }
}

/// Loss of one pair at similarity `s` and its derivative with respect to `s`.
#[inline]
pub(crate) fn pair_term(s: f64, pair: &BatchPair, hp: &HyperParams) -> (f64, f64) {
    if pair.linked {
        let t = -hp.gamma2 * s + hp.b2;
        (softplus(t) / hp.gamma2, -sigmoid(t))
    } else {
        let alpha = negative_weight(pair.dist, hp.beta);
        let t = hp.gamma1 * s + hp.b1;
        (alpha * softplus(t) / hp.gamma1, alpha * sigmoid(t))
    }
}

fn check_batch(batch: &MiniBatch, rows: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(DealError::Argument("empty mini-batch".into()));
    }
    if let Some(e) = batch.pairs.iter().find(|e| e.p >= rows || e.q >= rows) {
        return Err(DealError::Argument(format!(
            "pair ({}, {}) has no embedding row (rows = {rows})",
            e.p, e.q
        )));
    }
    Ok(())
}

/// Mean over the batch of `α·φ₁(−s)` for non-linked and `φ₂(s)` for linked
/// pairs, with `s` the cosine of the two rows of `emb`.
pub fn ranking_loss(batch: &MiniBatch, emb: &EmbeddingMatrix, hp: &HyperParams) -> Result<f64> {
    check_batch(batch, emb.len())?;
    let sum: f64 = batch
        .pairs
        .iter()
        .map(|e| pair_term(cosine(emb.row(e.p), emb.row(e.q)), e, hp).0)
        .sum();
    Ok(sum / batch.len() as f64)
}

/// Negative mean cosine between matching rows of the two matrices.
pub fn tight_align_loss(z_s: &EmbeddingMatrix, z_a: &EmbeddingMatrix) -> Result<f64> {
    if z_s.len() != z_a.len() || z_s.dim() != z_a.dim() {
        return Err(DealError::Shape(format!(
            "tight alignment of {}x{} and {}x{} embeddings",
            z_s.len(),
            z_s.dim(),
            z_a.len(),
            z_a.dim()
        )));
    }
    let rows: Vec<usize> = (0..z_s.len()).collect();
    tight_over(z_s, z_a, &rows)
}

pub(crate) fn tight_over(z_s: &EmbeddingMatrix, z_a: &EmbeddingMatrix, rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Err(DealError::Argument("tight alignment over an empty node set".into()));
    }
    let sum: f64 = rows.iter().map(|&i| cosine(z_s.row(i), z_a.row(i))).sum();
    Ok(-sum / rows.len() as f64)
}

/// The ranking loss evaluated on cross pairs `s(z_s[p], z_a[q])`.
pub fn loose_align_loss(
    batch: &MiniBatch,
    z_s: &EmbeddingMatrix,
    z_a: &EmbeddingMatrix,
    hp: &HyperParams,
) -> Result<f64> {
    check_batch(batch, z_s.len().min(z_a.len()))?;
    let sum: f64 = batch
        .pairs
        .iter()
        .map(|e| {
            let fwd = pair_term(cosine(z_s.row(e.p), z_a.row(e.q)), e, hp).0;
            if hp.symmetrize_loose_align {
                let back = pair_term(cosine(z_s.row(e.q), z_a.row(e.p)), e, hp).0;
                0.5 * (fwd + back)
            } else {
                fwd
            }
        })
        .sum();
    Ok(sum / batch.len() as f64)
}

/// Rows averaged over by tight alignment under `scope`.
pub(crate) fn tight_rows(batch: &MiniBatch, rows: usize, scope: TightScope) -> Vec<usize> {
    match scope {
        TightScope::Batch => batch.nodes(),
        TightScope::All => (0..rows).collect(),
    }
}

/// `θ₁·L_B(Z_s) + θ₂·L_B(Z_a) + θ₃·L_align(Z_s, Z_a)`. Terms with zero weight
/// are skipped.
pub fn total_loss(
    batch: &MiniBatch,
    z_s: &EmbeddingMatrix,
    z_a: &EmbeddingMatrix,
    hp: &HyperParams,
) -> Result<f64> {
    if z_s.len() != z_a.len() {
        return Err(DealError::Shape(format!(
            "structure has {} rows, attributes {}",
            z_s.len(),
            z_a.len()
        )));
    }
    check_batch(batch, z_s.len())?;
    let [t1, t2, t3] = hp.theta;
    let mut total = 0.0;
    if t1 != 0.0 {
        total += t1 * ranking_loss(batch, z_s, hp)?;
    }
    if t2 != 0.0 {
        total += t2 * ranking_loss(batch, z_a, hp)?;
    }
    if t3 != 0.0 {
        total += t3
            * match hp.align_mode {
                AlignMode::Tight => tight_over(z_s, z_a, &tight_rows(batch, z_s.len(), hp.tight_scope))?,
                AlignMode::Loose => loose_align_loss(batch, z_s, z_a, hp)?,
            };
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EmbeddingKind, Matrix};
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;
    // ln(1 + e^-1), evaluated independently with mpmath at 30 digits
    const SOFTPLUS_NEG1: f64 = 0.313_261_687_518_222_8;

    fn emb(rows: &[Vec<f64>], kind: EmbeddingKind) -> EmbeddingMatrix {
        EmbeddingMatrix::new(Matrix::from_rows(rows).unwrap(), kind)
    }

    fn hp_unit() -> HyperParams {
        HyperParams {
            beta: 1.0,
            ..HyperParams::default()
        }
    }

    #[test]
    fn generalized_logistic_examples() {
        assert!((generalized_logistic(0.0, 1.0, 0.0).unwrap() - LN2).abs() < 1e-15);
        assert!((generalized_logistic(0.0, 2.0, 0.0).unwrap() - 0.5 * LN2).abs() < 1e-15);
        // 0.5*ln(1+e^-1) = 0.15663084375911...
        assert!((generalized_logistic(1.0, 2.0, 1.0).unwrap() - 0.156_630_843_759_111_4).abs() < 1e-15);
        assert!(matches!(generalized_logistic(1.0, 0.0, 0.0), Err(DealError::Argument(_))));
        assert!(matches!(generalized_logistic(1.0, -1.0, 0.0), Err(DealError::Argument(_))));
    }

    #[test]
    fn generalized_logistic_never_overflows() {
        let big = generalized_logistic(-1e6, 3.0, 0.0).unwrap();
        assert_eq!(big, 1e6);
        let small = generalized_logistic(1e6, 3.0, 0.0).unwrap();
        assert!(small >= 0.0 && small.is_finite());
        // the linear branch matches the exact form at the switch point
        let exact = (1.0 + 31f64.exp()).ln();
        assert!((phi(-31.0, 1.0, 0.0) - exact).abs() < 1e-13);
    }

    #[test]
    fn negative_weight_examples() {
        assert_eq!(negative_weight(HopDistance::Infinite, 7.0), 1.0);
        assert!((negative_weight(HopDistance::Finite(1), 1.0) - std::f64::consts::E).abs() < 1e-15);
        // e^0.5 = 1.6487212707001282
        assert!((negative_weight(HopDistance::Finite(4), 2.0) - 1.648_721_270_700_128_2).abs() < 1e-15);
        assert_eq!(negative_weight(HopDistance::Finite(3), 0.0), 1.0);
    }

    #[test]
    fn ranking_loss_examples() {
        let hp = hp_unit();
        let z = emb(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![-2.0, 1.0]], EmbeddingKind::Structure);
        let pos = MiniBatch::new(vec![BatchPair::positive(0, 1)]);
        assert!((ranking_loss(&pos, &z, &hp).unwrap() - SOFTPLUS_NEG1).abs() < 1e-15);
        let neg = MiniBatch::new(vec![BatchPair::negative(0, 2, HopDistance::Infinite)]);
        assert!((ranking_loss(&neg, &z, &hp).unwrap() - LN2).abs() < 1e-15);
        let both = MiniBatch::new(vec![BatchPair::positive(0, 1), BatchPair::negative(0, 2, HopDistance::Infinite)]);
        // (0.3132616875 + 0.6931471806) / 2
        assert!((ranking_loss(&both, &z, &hp).unwrap() - 0.503_204_434_039_084_1).abs() < 1e-12);
        assert!(matches!(ranking_loss(&MiniBatch::default(), &z, &hp), Err(DealError::Argument(_))));
        let oob = MiniBatch::new(vec![BatchPair::positive(0, 5)]);
        assert!(matches!(ranking_loss(&oob, &z, &hp), Err(DealError::Argument(_))));
    }

    #[test]
    fn tight_examples() {
        let a = emb(&[vec![1.0, 0.0], vec![0.0, 2.0]], EmbeddingKind::Structure);
        assert!((tight_align_loss(&a, &a).unwrap() + 1.0).abs() < 1e-15);
        let b = emb(&[vec![0.0, 1.0], vec![3.0, 0.0]], EmbeddingKind::Attribute);
        assert_eq!(tight_align_loss(&a, &b).unwrap(), 0.0);
        // cosines 1.0 and 0.6
        let s = emb(&[vec![1.0, 0.0], vec![3.0, 4.0]], EmbeddingKind::Structure);
        let t = emb(&[vec![2.0, 0.0], vec![1.0, 0.0]], EmbeddingKind::Attribute);
        assert!((tight_align_loss(&s, &t).unwrap() + 0.8).abs() < 1e-15);
        let short = emb(&[vec![1.0, 0.0]], EmbeddingKind::Attribute);
        assert!(matches!(tight_align_loss(&a, &short), Err(DealError::Shape(_))));
    }

    #[test]
    fn loose_examples() {
        let hp = hp_unit();
        let zs = emb(&[vec![1.0, 1.0], vec![5.0, 0.0]], EmbeddingKind::Structure);
        let za = emb(&[vec![0.0, 3.0], vec![2.0, 2.0]], EmbeddingKind::Attribute);
        let pos = MiniBatch::new(vec![BatchPair::positive(0, 1)]);
        assert!((loose_align_loss(&pos, &zs, &za, &hp).unwrap() - SOFTPLUS_NEG1).abs() < 1e-15);
        let zs2 = emb(&[vec![1.0, 0.0], vec![5.0, 0.0]], EmbeddingKind::Structure);
        let neg = MiniBatch::new(vec![BatchPair::negative(0, 1, HopDistance::Infinite)]);
        let za2 = emb(&[vec![0.0, 3.0], vec![0.0, 2.0]], EmbeddingKind::Attribute);
        assert!((loose_align_loss(&neg, &zs2, &za2, &hp).unwrap() - LN2).abs() < 1e-15);
    }

    #[test]
    fn total_loss_examples() {
        let z = emb(&[vec![1.0, 0.0], vec![0.6, 0.8], vec![0.0, 1.0]], EmbeddingKind::Structure);
        let mut za = z.clone();
        za.kind = EmbeddingKind::Attribute;
        let batch = MiniBatch::new(vec![BatchPair::positive(0, 1), BatchPair::negative(0, 2, HopDistance::Finite(2))]);
        let mut hp = hp_unit();
        hp.theta = [1.0, 0.0, 0.0];
        assert_eq!(total_loss(&batch, &z, &za, &hp).unwrap(), ranking_loss(&batch, &z, &hp).unwrap());
        hp.theta = [0.0, 0.0, 1.0];
        hp.align_mode = AlignMode::Tight;
        assert!((total_loss(&batch, &z, &za, &hp).unwrap() + 1.0).abs() < 1e-15);

        let unit = emb(&[vec![1.0, 0.0], vec![1.0, 0.0]], EmbeddingKind::Structure);
        let pos = MiniBatch::new(vec![BatchPair::positive(0, 1)]);
        hp.theta = [1.0, 1.0, 1.0];
        hp.align_mode = AlignMode::Loose;
        // 3 * ln(1 + e^-1)
        assert!((total_loss(&pos, &unit, &unit, &hp).unwrap() - 0.939_785_062_554_668_4).abs() < 1e-14);
    }

    #[test]
    fn tight_scope_batch_uses_only_batch_nodes() {
        let zs = emb(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]], EmbeddingKind::Structure);
        let za = emb(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0]], EmbeddingKind::Attribute);
        let batch = MiniBatch::new(vec![BatchPair::positive(0, 1)]);
        let mut hp = hp_unit();
        hp.theta = [0.0, 0.0, 1.0];
        hp.align_mode = AlignMode::Tight;
        assert_eq!(total_loss(&batch, &zs, &za, &hp).unwrap(), -1.0);
        hp.tight_scope = TightScope::All;
        assert!((total_loss(&batch, &zs, &za, &hp).unwrap() + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn batch_validation() {
        assert!(MiniBatch::new(vec![BatchPair::positive(1, 1)]).validate().is_err());
        assert!(MiniBatch::new(vec![BatchPair::negative(0, 1, HopDistance::Finite(1))]).validate().is_err());
        assert!(MiniBatch::new(vec![BatchPair::negative(0, 1, HopDistance::Infinite)]).validate().is_ok());
    }

    #[test]
    fn hyperparam_validation() {
        assert!(HyperParams::default().validate().is_ok());
        let bad = [
            HyperParams { gamma1: 0.0, ..Default::default() },
            HyperParams { beta: -1.0, ..Default::default() },
            HyperParams { pos_frac: 1.0, ..Default::default() },
            HyperParams { theta: [0.0; 3], ..Default::default() },
            HyperParams { theta: [1.0, -1.0, 0.0], ..Default::default() },
        ];
        for hp in bad {
            assert!(hp.validate().is_err(), "{hp:?}");
        }
    }

    proptest! {
        #[test]
        fn logistic_decreasing_positive_convex(x in -20.0f64..20.0, gamma in 0.1f64..10.0, b in -3.0f64..3.0) {
            let h = 1e-3;
            let f = |x: f64| generalized_logistic(x, gamma, b).unwrap();
            prop_assert!(f(x) > 0.0);
            prop_assert!(f(x + h) < f(x) || f(x) < 1e-12);
            let second = (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
            prop_assert!(second >= -1e-6);
        }

        #[test]
        fn logistic_scaling_identity(x in -5.0f64..5.0, gamma in 0.1f64..10.0) {
            let lhs = gamma * generalized_logistic(x, gamma, 0.0).unwrap();
            let rhs = softplus(-gamma * x);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn negative_weight_monotone(d in 1u32..50, beta in 0.0f64..5.0) {
            let w = negative_weight(HopDistance::Finite(d), beta);
            prop_assert!(w >= 1.0);
            prop_assert!(negative_weight(HopDistance::Finite(d + 1), beta) <= w);
            prop_assert!(negative_weight(HopDistance::Infinite, beta) <= w);
        }

        #[test]
        fn losses_nonnegative_scale_invariant_and_reduce(
            vals in proptest::collection::vec(-3.0f64..3.0, 12),
            scale in 0.1f64..10.0,
            row in 0usize..4,
            labels in proptest::collection::vec(any::<bool>(), 3),
        ) {
            let rows: Vec<Vec<f64>> = vals.chunks(3).map(|c| c.to_vec()).collect();
            let z = emb(&rows, EmbeddingKind::Structure);
            let pairs = [(0, 1), (1, 2), (3, 0)];
            let batch = MiniBatch::new(pairs.iter().zip(&labels).map(|(&(p, q), &l)| {
                if l { BatchPair::positive(p, q) } else { BatchPair::negative(p, q, HopDistance::Finite(2)) }
            }).collect());
            let hp = hp_unit();
            let r = ranking_loss(&batch, &z, &hp).unwrap();
            prop_assert!(r >= 0.0);
            prop_assert!((loose_align_loss(&batch, &z, &z, &hp).unwrap() - r).abs() < 1e-12);
            let mut scaled = rows.clone();
            scaled[row].iter_mut().for_each(|x| *x *= scale);
            let zs = emb(&scaled, EmbeddingKind::Structure);
            prop_assert!((ranking_loss(&batch, &zs, &hp).unwrap() - r).abs() < 1e-9);
            let t = total_loss(&batch, &z, &z, &hp).unwrap();
            prop_assert!((total_loss(&batch, &zs, &z, &hp).unwrap() - t).abs() < 1e-9);
        }
    }
}
