//! Word embeddings and the similarity sets behind embedding label smoothing.
//!
//! For a ground-truth token the smoothing mass `eps` is spread over a set of
//! nearest neighbours in embedding space instead of over the whole
//! vocabulary. Neighbours are chosen either by a cosine threshold or as the
//! top-N most similar tokens.

use std::cmp::Ordering;
use std::io::{BufRead, BufReader};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{conventional_distribution, TargetSmoother};
use crate::tensor::{cosine, dot};
use crate::vocab::{tokenize, Vocabulary};

/// Per-token vectors indexed by vocabulary id. Tokens with no vector (or an
/// all-zero one) take no part in similarity queries.
#[derive(Debug, Clone, PartialEq)]
pub struct WordEmbedding {
    dim: usize,
    vectors: Vec<Option<Vec<f64>>>,
}

impl WordEmbedding {
    pub fn new(dim: usize, vectors: Vec<Option<Vec<f64>>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("embedding dim must be > 0".into()));
        }
        if vectors.iter().flatten().any(|v| v.len() != dim) {
            return Err(Error::Invalid(format!("embedding vector length differs from dim {dim}")));
        }
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, id: usize) -> Option<&[f64]> {
        self.vectors.get(id)?.as_deref()
    }

    /// Vector usable for cosine queries (present and non-zero).
    fn usable(&self, id: usize) -> Option<&[f64]> {
        self.vector(id).filter(|v| v.iter().any(|&x| x != 0.0))
    }

    /// Fraction of vocabulary entries that carry a usable vector.
    pub fn coverage(&self) -> f64 {
        if self.vectors.is_empty() {
            return 0.0;
        }
        (0..self.len()).filter(|&i| self.usable(i).is_some()).count() as f64 / self.len() as f64
    }
}

/// Loads vectors in the common text export format: a `<count> <dim>`
/// header followed by `token v1 .. v_dim` lines. Rows for tokens outside
/// `vocab` are skipped.
pub fn load_vectors(path: &Path, vocab: &Vocabulary) -> Result<WordEmbedding> {
    let f = std::fs::File::open(path)?;
    let name = path.display().to_string();
    let err = |line: usize, msg: String| Error::Parse { path: name.clone(), line, msg };
    let mut lines = BufReader::new(f).lines();
    let header = lines.next().ok_or_else(|| err(1, "missing header".into()))??;
    let mut parts = header.split_whitespace();
    let (count, dim) = match (parts.next(), parts.next(), parts.next()) {
        (Some(c), Some(d), None) => (
            c.parse::<usize>().map_err(|e| err(1, format!("count: {e}")))?,
            d.parse::<usize>().map_err(|e| err(1, format!("dim: {e}")))?,
        ),
        _ => return Err(err(1, "expected '<count> <dim>'".into())),
    };
    if dim == 0 {
        return Err(err(1, "dim must be > 0".into()));
    }
    let mut vectors = vec![None; vocab.len()];
    let mut rows = 0;
    for (n, line) in lines.enumerate() {
        let line = line?;
        let lineno = n + 2;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().unwrap_or_default();
        let vals = fields
            .map(|x| x.parse::<f64>().map_err(|e| err(lineno, format!("'{x}': {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != dim {
            return Err(err(lineno, format!("{} values, header says {dim}", vals.len())));
        }
        rows += 1;
        if let Some(id) = vocab.id(token) {
            vectors[id] = Some(vals);
        }
    }
    if rows != count {
        log::warn!("{name}: header announces {count} rows, found {rows}");
    }
    let emb = WordEmbedding::new(dim, vectors)?;
    log::info!("{name}: vocabulary coverage {:.3}", emb.coverage());
    Ok(emb)
}

/// Positive PMI matrix over windowed co-occurrence counts, `[|V|, |V|]`.
pub fn ppmi_matrix<S: AsRef<str>>(corpus_lines: &[S], vocab: &Vocabulary, window: usize) -> DMatrix<f64> {
    let v = vocab.len();
    let mut counts = DMatrix::<f64>::zeros(v, v);
    for line in corpus_lines {
        let ids = vocab.encode(&tokenize(line.as_ref()));
        for (i, &a) in ids.iter().enumerate() {
            let hi = (i + window + 1).min(ids.len());
            for &b in &ids[i + 1..hi] {
                counts[(a, b)] += 1.0;
                counts[(b, a)] += 1.0;
            }
        }
    }
    let total: f64 = counts.iter().sum();
    let row_sums: Vec<f64> = (0..v).map(|i| counts.row(i).sum()).collect();
    let mut ppmi = DMatrix::<f64>::zeros(v, v);
    if total == 0.0 {
        return ppmi;
    }
    for i in 0..v {
        for j in 0..v {
            let c = counts[(i, j)];
            if c > 0.0 {
                ppmi[(i, j)] = (c * total / (row_sums[i] * row_sums[j])).ln().max(0.0);
            }
        }
    }
    ppmi
}

/// Singular value decomposition of a PPMI matrix with singular values in
/// descending order.
#[derive(Debug, Clone)]
pub struct PpmiSvd {
    pub ppmi: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub singular: Vec<f64>,
    pub v_t: DMatrix<f64>,
}

impl PpmiSvd {
    pub fn compute(ppmi: DMatrix<f64>) -> Self {
        let svd = ppmi.clone().svd(true, true);
        let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| {
            svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
        });
        let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
        let v_t = DMatrix::from_fn(order.len(), v_t.ncols(), |r, c| v_t[(order[r], c)]);
        let singular = order.iter().map(|&i| svd.singular_values[i]).collect();
        Self { ppmi, u, singular, v_t }
    }

    /// Rank-`k` reconstruction `U_k S_k V_k^T`.
    pub fn reconstruct(&self, k: usize) -> DMatrix<f64> {
        let k = k.min(self.singular.len());
        let n = self.u.nrows();
        let m = self.v_t.ncols();
        DMatrix::from_fn(n, m, |r, c| (0..k).map(|i| self.u[(r, i)] * self.singular[i] * self.v_t[(i, c)]).sum())
    }
}

/// Deterministic embedding trainer: windowed co-occurrence, positive PMI,
/// rank-`dim` truncated SVD, L2-normalized rows `U_k S_k`.
pub fn train_ppmi_svd<S: AsRef<str>>(
    corpus_lines: &[S],
    vocab: &Vocabulary,
    dim: usize,
    window: usize,
) -> Result<WordEmbedding> {
    if dim == 0 || dim > vocab.len() {
        return Err(Error::Invalid(format!("embedding dim {dim} must be in 1..={}", vocab.len())));
    }
    if window == 0 {
        return Err(Error::Invalid("window must be >= 1".into()));
    }
    let svd = PpmiSvd::compute(ppmi_matrix(corpus_lines, vocab, window));
    let mut unseen = 0;
    let vectors = (0..vocab.len())
        .map(|r| {
            let mut v: Vec<f64> = (0..dim).map(|k| svd.u[(r, k)] * svd.singular[k]).collect();
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-12 {
                v.iter_mut().for_each(|x| *x /= norm);
            } else {
                v.iter_mut().for_each(|x| *x = 0.0);
                unseen += 1;
            }
            Some(v)
        })
        .collect();
    if unseen > 0 {
        log::warn!("ppmi-svd: {unseen} vocabulary token(s) never co-occur; zero vectors assigned");
    }
    WordEmbedding::new(dim, vectors)
}

fn scored_candidates(target: usize, emb: &WordEmbedding, allow: &dyn Fn(usize) -> bool) -> Option<Vec<(usize, f64)>> {
    let Some(tv) = emb.usable(target) else {
        log::warn!("token id {target} has no embedding vector; similarity set is empty");
        return None;
    };
    Some(
        (0..emb.len())
            .filter(|&y| y != target && allow(y))
            .filter_map(|y| emb.usable(y).map(|v| (y, cosine(tv, v))))
            .collect(),
    )
}

/// Tokens other than `target` whose cosine similarity to it is at least `tau`.
pub fn similar_by_threshold(target: usize, emb: &WordEmbedding, tau: f64) -> Vec<usize> {
    similar_by_threshold_where(target, emb, tau, &|_| true)
}

pub fn similar_by_threshold_where(
    target: usize,
    emb: &WordEmbedding,
    tau: f64,
    allow: &dyn Fn(usize) -> bool,
) -> Vec<usize> {
    scored_candidates(target, emb, allow)
        .map(|c| c.into_iter().filter(|&(_, s)| s >= tau).map(|(y, _)| y).collect())
        .unwrap_or_default()
}

/// The `n` tokens most cosine-similar to `target`, ties broken by ascending id.
pub fn similar_topn(target: usize, emb: &WordEmbedding, n: usize) -> Vec<usize> {
    similar_topn_where(target, emb, n, &|_| true)
}

pub fn similar_topn_where(target: usize, emb: &WordEmbedding, n: usize, allow: &dyn Fn(usize) -> bool) -> Vec<usize> {
    let Some(mut c) = scored_candidates(target, emb, allow) else {
        return Vec::new();
    };
    c.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    c.truncate(n);
    c.into_iter().map(|(y, _)| y).collect()
}

/// Dense target distribution: `1 - eps` on `target`, `eps / |D|` on each
/// member of `similar`. An empty `similar` falls back to conventional smoothing.
pub fn smooth_distribution(target: usize, similar: &[usize], epsilon: f64, vocab_size: usize) -> Vec<f64> {
    let mut out = vec![0.0; vocab_size];
    if similar.is_empty() {
        if epsilon > 0.0 {
            log::warn!("empty similarity set for token {target}; using conventional smoothing");
        }
        for (i, p) in conventional_distribution(target, vocab_size, epsilon) {
            out[i] = p;
        }
        return out;
    }
    debug_assert!(!similar.contains(&target));
    out[target] = 1.0 - epsilon;
    let share = epsilon / similar.len() as f64;
    for &y in similar {
        out[y] = share;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    Threshold,
    #[default]
    TopN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingConfig {
    pub mode: SimilarityMode,
    pub tau: f64,
    pub n: usize,
    pub epsilon: f64,
    /// Restrict neighbours to tokens with the target's language tag.
    pub same_language: bool,
    /// Embedding dimension used by the built-in PPMI-SVD trainer.
    pub dim: usize,
    pub window: usize,
    /// Optional vector file; when absent, embeddings are trained on the
    /// training transcripts.
    pub vectors_path: Option<String>,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            mode: SimilarityMode::TopN,
            tau: 0.5,
            n: 10,
            epsilon: 0.1,
            same_language: false,
            dim: 16,
            window: 2,
            vectors_path: None,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > -1.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau {} outside (-1, 1)", self.tau)));
        }
        if self.n == 0 {
            return Err(Error::Config("n must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0, 1)", self.epsilon)));
        }
        if self.dim == 0 || self.window == 0 {
            return Err(Error::Config("embedding dim and window must be >= 1".into()));
        }
        Ok(())
    }
}

/// Similarity sets for every vocabulary entry, computed once before training.
#[derive(Debug, Clone)]
pub struct EmbeddingSmoother {
    sets: Vec<Vec<usize>>,
    epsilon: f64,
}

impl EmbeddingSmoother {
    pub fn build(emb: &WordEmbedding, vocab: &Vocabulary, cfg: &SmoothingConfig) -> Self {
        let sets = (0..vocab.len())
            .map(|t| {
                if t >= emb.len() || emb.usable(t).is_none() {
                    return Vec::new();
                }
                let tag = vocab.tag(t);
                let same = |y: usize| vocab.tag(y) == tag;
                let any = |_: usize| true;
                let allow: &dyn Fn(usize) -> bool = if cfg.same_language { &same } else { &any };
                match cfg.mode {
                    SimilarityMode::Threshold => similar_by_threshold_where(t, emb, cfg.tau, allow),
                    SimilarityMode::TopN => similar_topn_where(t, emb, cfg.n, allow),
                }
            })
            .collect();
        Self { sets, epsilon: cfg.epsilon }
    }

    pub fn similar(&self, target: usize) -> &[usize] {
        self.sets.get(target).map_or(&[], Vec::as_slice)
    }
}

impl TargetSmoother for EmbeddingSmoother {
    fn distribution(&self, target: usize, vocab_size: usize) -> Vec<(usize, f64)> {
        let d = self.similar(target);
        if d.is_empty() {
            return conventional_distribution(target, vocab_size, self.epsilon);
        }
        let share = self.epsilon / d.len() as f64;
        std::iter::once((target, 1.0 - self.epsilon)).chain(d.iter().map(|&y| (y, share))).collect()
    }
}
