//! Training objectives: CTC, masked cross-entropy with label smoothing,
//! projection-matrix regularization and their weighted combination.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cosine, Array, Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingMode {
    #[default]
    Conventional,
    Embedding,
}

/// Weights of the combined objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// CTC weight; the two decoder terms share `1 - alpha`.
    pub alpha: f64,
    /// MatReg weight.
    pub beta: f64,
    pub smoothing: SmoothingMode,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.3, beta: 1e-4, smoothing: SmoothingMode::Conventional, epsilon: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta {} must be >= 0", self.beta)));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0, 1)", self.epsilon)));
        }
        Ok(())
    }
}

/// Token ids with an explicit set of masked positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub ids: Vec<usize>,
    pub mask_positions: Vec<usize>,
}

impl MaskedSequence {
    /// Replaces `positions` of `tokens` with `mask_id`.
    pub fn new(tokens: &[usize], positions: &[usize], mask_id: usize) -> Result<Self> {
        let set: BTreeSet<usize> = positions.iter().copied().collect();
        if let Some(&p) = set.iter().find(|&&p| p >= tokens.len()) {
            return Err(Error::Invalid(format!("mask position {p} outside length {}", tokens.len())));
        }
        let mut ids = tokens.to_vec();
        for &p in &set {
            ids[p] = mask_id;
        }
        Ok(Self { ids, mask_positions: set.into_iter().collect() })
    }

    pub fn unmasked(tokens: &[usize]) -> Self {
        Self { ids: tokens.to_vec(), mask_positions: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.mask_positions.binary_search(&pos).is_ok()
    }
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Minimum number of frames a CTC alignment of `target` needs.
pub fn ctc_required_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC negative log-likelihood of `target` under per-frame log posteriors
/// `log_probs` (`[T, V]`), and its gradient with respect to `log_probs`.
///
/// Forward and backward variables are kept in log space.
pub fn ctc_loss(log_probs: &Array, target: &[usize], blank: usize) -> Result<(f64, Array)> {
    if log_probs.shape().len() != 2 {
        return Err(Error::Shape(format!("CTC expects [T, V] log-probs, got {:?}", log_probs.shape())));
    }
    let (t_len, v) = (log_probs.rows(), log_probs.cols());
    if let Some(&bad) = target.iter().find(|&&k| k >= v || k == blank) {
        return Err(Error::Invalid(format!("CTC target id {bad} is blank or outside vocabulary of {v}")));
    }
    let required = ctc_required_frames(target);
    if t_len < required || t_len == 0 {
        return Err(Error::InfeasibleTarget { target: target.len(), required: required.max(1), frames: t_len });
    }
    let lp = log_probs.data();
    let ext: Vec<usize> = std::iter::once(blank).chain(target.iter().flat_map(|&k| [k, blank])).collect();
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if skip(s) {
                acc = lse2(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = acc + lp[t * v + ext[s]];
        }
    }
    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp[(t_len - 1) * v + ext[s_len - 1]];
    if s_len > 1 {
        beta[last + s_len - 2] = lp[(t_len - 1) * v + ext[s_len - 2]];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = lse2(acc, next[s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                acc = lse2(acc, next[s + 2]);
            }
            beta[t * s_len + s] = acc + lp[t * v + ext[s]];
        }
    }
    let log_p = if s_len > 1 { lse2(alpha[last + s_len - 1], alpha[last + s_len - 2]) } else { alpha[last] };
    if !log_p.is_finite() {
        return Err(Error::CtcNumeric(format!("log-likelihood is {log_p}")));
    }
    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        for s in 0..s_len {
            let k = ext[s];
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - lp[t * v + k] - log_p;
            if occ.is_finite() {
                grad[t * v + k] -= occ.exp();
            }
        }
    }
    Ok((-log_p, Array::new(&[t_len, v], grad)?))
}

/// CTC loss as a graph node over `[T, V]` log-probabilities.
pub fn ctc_node(g: &mut Graph, log_probs: Var, target: &[usize], blank: usize) -> Result<Var> {
    let lp = g.value(log_probs);
    let (nll, grad) = ctc_loss(&lp, target, blank)?;
    Ok(g.custom_scalar(log_probs, nll, grad.into_data()))
}

/// Draws a mask count uniformly from `1..=len` and that many distinct
/// positions. Returned positions are sorted.
pub fn sample_mask<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let m = rng.random_range(1..=len);
    let mut pos = index::sample(rng, len, m).into_vec();
    pos.sort_unstable();
    pos
}

/// Builds the target distribution for one supervised position.
pub trait TargetSmoother {
    /// Sparse `(id, probability)` entries summing to 1.
    fn distribution(&self, target: usize, vocab_size: usize) -> Vec<(usize, f64)>;
}

/// One-hot targets.
#[derive(Debug, Clone, Copy)]
pub struct OneHot;

impl TargetSmoother for OneHot {
    fn distribution(&self, target: usize, _: usize) -> Vec<(usize, f64)> {
        vec![(target, 1.0)]
    }
}

/// `1 - eps` on the target, `eps` spread uniformly over every other label.
#[derive(Debug, Clone, Copy)]
pub struct Conventional {
    pub epsilon: f64,
}

impl TargetSmoother for Conventional {
    fn distribution(&self, target: usize, vocab_size: usize) -> Vec<(usize, f64)> {
        conventional_distribution(target, vocab_size, self.epsilon)
    }
}

pub(crate) fn conventional_distribution(target: usize, vocab_size: usize, epsilon: f64) -> Vec<(usize, f64)> {
    if vocab_size <= 1 || epsilon == 0.0 {
        return vec![(target, 1.0)];
    }
    let off = epsilon / (vocab_size - 1) as f64;
    (0..vocab_size).map(|i| (i, if i == target { 1.0 - epsilon } else { off })).collect()
}

/// Mean over masked positions of the cross-entropy between the smoothed
/// target distribution and `softmax(logits)`.
pub fn masked_ce_node(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    mask_positions: &[usize],
    smoother: &dyn TargetSmoother,
) -> Result<Var> {
    if mask_positions.is_empty() {
        return Err(Error::EmptyMask);
    }
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Shape(format!("logits {:?} for {} targets", shape, targets.len())));
    }
    let (l, v) = (shape[0], shape[1]);
    let mut q = vec![0.0; l * v];
    for &p in mask_positions {
        if p >= l {
            return Err(Error::Invalid(format!("mask position {p} outside length {l}")));
        }
        if targets[p] >= v {
            return Err(Error::IdOutOfRange { id: targets[p], size: v });
        }
        for (id, prob) in smoother.distribution(targets[p], v) {
            q[p * v + id] += prob;
        }
    }
    let q = g.constant_owned(Array::new(&[l, v], q)?);
    let logp = g.log_softmax(logits)?;
    let weighted = g.mul(logp, q)?;
    let total = g.sum(weighted)?;
    g.scale(total, -1.0 / mask_positions.len() as f64)
}

/// Value-only form of [`masked_ce_node`].
pub fn masked_ce(
    logits: &Array,
    targets: &[usize],
    mask_positions: &[usize],
    smoother: &dyn TargetSmoother,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(logits);
    let out = masked_ce_node(&mut g, x, targets, mask_positions, smoother)?;
    Ok(g.data(out)[0])
}

/// `(1/|V|) * sum_v (1 - cos(a_v, b_v))` over the columns of two `[d, |V|]`
/// matrices. Zero-norm columns count as cosine 0.
pub fn matreg_loss(w_a: &Array, w_b: &Array) -> Result<f64> {
    if w_a.shape() != w_b.shape() || w_a.shape().len() != 2 {
        return Err(Error::Shape(format!("matreg {:?} with {:?}", w_a.shape(), w_b.shape())));
    }
    let (a, b) = (w_a.t(), w_b.t());
    let v = a.rows();
    if v == 0 {
        return Ok(0.0);
    }
    let mut zero = 0;
    let total: f64 = (0..v)
        .map(|i| {
            let (x, y) = (a.row(i), b.row(i));
            if x.iter().all(|&c| c == 0.0) || y.iter().all(|&c| c == 0.0) {
                zero += 1;
            }
            1.0 - cosine(x, y)
        })
        .sum();
    if zero > 0 {
        log::warn!("matreg: {zero} zero-norm column(s) scored as cosine 0");
    }
    Ok(total / v as f64)
}

/// MatReg over two `[|V|, d]` row-major matrices (one row per token).
pub fn matreg_node(g: &mut Graph, rows_a: Var, rows_b: Var) -> Result<Var> {
    let n = g.shape(rows_a).first().copied().unwrap_or(0);
    let cos = g.row_cosine(rows_a, rows_b)?;
    let s = g.sum(cos)?;
    let mean = g.scale(s, -1.0 / n.max(1) as f64)?;
    let one = g.constant(&Array::scalar(1.0));
    g.add(mean, one)
}

/// The four loss terms of one training example (negative log-likelihoods).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub ctc: f64,
    pub p2m: f64,
    pub cmlm: f64,
    pub matreg: f64,
}

/// `alpha*ctc + (1-alpha)*p2m + (1-alpha)*cmlm + beta*matreg`.
pub fn combined_loss(terms: LossTerms, cfg: &LossConfig) -> f64 {
    cfg.alpha * terms.ctc + (1.0 - cfg.alpha) * (terms.p2m + terms.cmlm) + cfg.beta * terms.matreg
}

/// Graph form of [`combined_loss`]; absent terms contribute nothing.
pub fn combined_node(
    g: &mut Graph,
    ctc: Option<Var>,
    p2m: Option<Var>,
    cmlm: Option<Var>,
    matreg: Option<Var>,
    cfg: &LossConfig,
) -> Result<Var> {
    let weighted = [(ctc, cfg.alpha), (p2m, 1.0 - cfg.alpha), (cmlm, 1.0 - cfg.alpha), (matreg, cfg.beta)];
    let mut acc: Option<Var> = None;
    for (term, w) in weighted {
        if let Some(t) = term {
            let s = g.scale(t, w)?;
            acc = Some(match acc {
                Some(a) => g.add(a, s)?,
                None => s,
            });
        }
    }
    acc.ok_or_else(|| Error::Invalid("combined loss with no terms".into()))
}
