//! Encoder with CTC head, Pinyin-to-Mandarin decoder and CMLM decoder.
//!
//! All three are pre-LayerNorm transformers built from [`Graph`] primitives.
//! Parameters live in a flat [`ParamStore`]; a [`Session`] binds them into a
//! fresh graph for one forward (and optionally backward) pass.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container};
use crate::error::{Error, Result};
use crate::loss::{matreg_node, MaskedSequence};
use crate::tensor::{Array, Graph, Var};
use crate::vocab::{LangTag, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    CtcOnly,
    MaskCtc,
    #[default]
    MaskCtcP2m,
}

impl Architecture {
    pub fn has_cmlm(self) -> bool {
        self != Architecture::CtcOnly
    }

    pub fn has_p2m(self) -> bool {
        self == Architecture::MaskCtcP2m
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::CtcOnly => "ctc_only",
            Architecture::MaskCtc => "mask_ctc",
            Architecture::MaskCtcP2m => "mask_ctc_p2m",
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    /// Frames merged per encoder output step.
    pub subsample_factor: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            model_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ff_dim: 256,
            subsample_factor: 4,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub encoder: EncoderConfig,
    pub cmlm_layers: usize,
    pub p2m_layers: usize,
    /// Use the transposed CMLM input embedding as the CTC projection.
    pub tie_ctc_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::default(),
            encoder: EncoderConfig::default(),
            cmlm_layers: 2,
            p2m_layers: 1,
            tie_ctc_embedding: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let bad = |m: String| Err(Error::Config(m));
        if e.input_dim == 0 || e.model_dim == 0 || e.ff_dim == 0 || e.num_heads == 0 {
            return bad("encoder dims and head count must be >= 1".into());
        }
        if e.model_dim % e.num_heads != 0 {
            return bad(format!("model_dim {} not divisible by num_heads {}", e.model_dim, e.num_heads));
        }
        if e.subsample_factor == 0 {
            return bad("subsample_factor must be >= 1".into());
        }
        if !(0.0..1.0).contains(&e.dropout) {
            return bad(format!("dropout {} outside [0, 1)", e.dropout));
        }
        if self.architecture.has_cmlm() && self.cmlm_layers == 0 {
            return bad("cmlm_layers must be >= 1".into());
        }
        if self.architecture.has_p2m() && self.p2m_layers == 0 {
            return bad("p2m_layers must be >= 1".into());
        }
        if self.tie_ctc_embedding && self.architecture != Architecture::MaskCtc {
            return bad("tie_ctc_embedding needs the mask_ctc architecture (CTC and CMLM on one vocabulary)".into());
        }
        Ok(())
    }
}

/// Which projection is tied to the CMLM input embedding by MatReg.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatRegPair {
    CtcCmlm,
    P2mCmlm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    P2m,
    Cmlm,
}

/// Named parameter tensors in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    fn add(&mut self, name: &str, value: Array) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Array::is_finite)
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: usize,
    b: Option<usize>,
}

#[derive(Debug, Clone)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone)]
struct Ff {
    a: Linear,
    b: Linear,
}

#[derive(Debug, Clone)]
struct EncLayer {
    n1: Norm,
    attn: Attn,
    n2: Norm,
    ff: Ff,
}

#[derive(Debug, Clone)]
struct DecLayer {
    n1: Norm,
    self_attn: Attn,
    n2: Norm,
    cross: Attn,
    n3: Norm,
    ff: Ff,
}

#[derive(Debug, Clone)]
struct EncoderLayout {
    input: Linear,
    layers: Vec<EncLayer>,
    norm: Norm,
    /// `None` when tied to the CMLM embedding.
    ctc_w: Option<usize>,
    ctc_b: usize,
}

#[derive(Debug, Clone)]
struct DecoderLayout {
    emb: usize,
    layers: Vec<DecLayer>,
    norm: Norm,
    out: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    enc: EncoderLayout,
    p2m: Option<DecoderLayout>,
    cmlm: Option<DecoderLayout>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

type Registrar<'a> = dyn FnMut(&str, &[usize], Init) -> Result<usize> + 'a;

struct Builder<'a, 'b> {
    reg: &'a mut Registrar<'b>,
    d: usize,
}

impl Builder<'_, '_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: (self.reg)(&format!("{name}.w"), &[fan_in, fan_out], Init::Normal(1.0 / (fan_in as f64).sqrt()))?,
            b: Some((self.reg)(&format!("{name}.b"), &[fan_out], Init::Zeros)?),
        })
    }

    /// Softmax ignores a per-query constant, so key projections carry no bias.
    fn linear_no_bias(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let init = Init::Normal(1.0 / (fan_in as f64).sqrt());
        Ok(Linear { w: (self.reg)(&format!("{name}.w"), &[fan_in, fan_out], init)?, b: None })
    }

    fn norm(&mut self, name: &str) -> Result<Norm> {
        Ok(Norm {
            g: (self.reg)(&format!("{name}.g"), &[self.d], Init::Ones)?,
            b: (self.reg)(&format!("{name}.b"), &[self.d], Init::Zeros)?,
        })
    }

    fn attn(&mut self, name: &str) -> Result<Attn> {
        let d = self.d;
        Ok(Attn {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear_no_bias(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            o: self.linear(&format!("{name}.o"), d, d)?,
        })
    }

    fn ff(&mut self, name: &str, ff_dim: usize) -> Result<Ff> {
        let d = self.d;
        Ok(Ff { a: self.linear(&format!("{name}.a"), d, ff_dim)?, b: self.linear(&format!("{name}.b"), ff_dim, d)? })
    }

    fn decoder(
        &mut self,
        name: &str,
        in_vocab: usize,
        out_vocab: usize,
        layers: usize,
        ff_dim: usize,
    ) -> Result<DecoderLayout> {
        let d = self.d;
        let emb = (self.reg)(&format!("{name}.emb"), &[in_vocab, d], Init::Normal(1.0 / (d as f64).sqrt()))?;
        let layers = (0..layers)
            .map(|i| {
                Ok(DecLayer {
                    n1: self.norm(&format!("{name}.l{i}.n1"))?,
                    self_attn: self.attn(&format!("{name}.l{i}.self"))?,
                    n2: self.norm(&format!("{name}.l{i}.n2"))?,
                    cross: self.attn(&format!("{name}.l{i}.cross"))?,
                    n3: self.norm(&format!("{name}.l{i}.n3"))?,
                    ff: self.ff(&format!("{name}.l{i}.ff"), ff_dim)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(DecoderLayout {
            emb,
            layers,
            norm: self.norm(&format!("{name}.norm"))?,
            out: self.linear(&format!("{name}.out"), d, out_vocab)?,
        })
    }
}

fn build_layout(cfg: &ModelConfig, n_char: usize, n_pinyin: usize, reg: &mut Registrar<'_>) -> Result<Layout> {
    let e = &cfg.encoder;
    let d = e.model_dim;
    let mut b = Builder { reg, d };
    let ctc_vocab = if cfg.architecture.has_p2m() { n_pinyin } else { n_char };
    let input = b.linear("enc.input", e.input_dim * e.subsample_factor, d)?;
    let layers = (0..e.num_layers)
        .map(|i| {
            Ok(EncLayer {
                n1: b.norm(&format!("enc.l{i}.n1"))?,
                attn: b.attn(&format!("enc.l{i}.attn"))?,
                n2: b.norm(&format!("enc.l{i}.n2"))?,
                ff: b.ff(&format!("enc.l{i}.ff"), e.ff_dim)?,
            })
        })
        .collect::<Result<_>>()?;
    let norm = b.norm("enc.norm")?;
    let ctc_w = if cfg.tie_ctc_embedding {
        None
    } else {
        Some((b.reg)("ctc.w", &[d, ctc_vocab], Init::Normal(1.0 / (d as f64).sqrt()))?)
    };
    let ctc_b = (b.reg)("ctc.b", &[ctc_vocab], Init::Zeros)?;
    let p2m = match cfg.architecture.has_p2m() {
        true => Some(b.decoder("p2m", n_pinyin, n_char, cfg.p2m_layers, e.ff_dim)?),
        false => None,
    };
    let cmlm = match cfg.architecture.has_cmlm() {
        true => Some(b.decoder("cmlm", n_char, n_char, cfg.cmlm_layers, e.ff_dim)?),
        false => None,
    };
    Ok(Layout { enc: EncoderLayout { input, layers, norm, ctc_w, ctc_b }, p2m, cmlm })
}

/// Training bookkeeping carried inside a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: usize,
    pub val_accuracy: Option<f64>,
    pub val_ter: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct VocabEcho {
    tokens: Vec<String>,
    tags: Vec<LangTag>,
}

impl VocabEcho {
    fn of(v: &Vocabulary) -> Self {
        Self { tokens: v.tokens().to_vec(), tags: v.tags().to_vec() }
    }

    fn into_vocab(self) -> Result<Vocabulary> {
        if self.tokens.len() != self.tags.len() {
            return Err(Error::Checkpoint("vocabulary echo has mismatched token/tag counts".into()));
        }
        Vocabulary::from_entries(self.tokens.into_iter().zip(self.tags).collect())
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEcho {
    config: ModelConfig,
    char_vocab: VocabEcho,
    pinyin_vocab: VocabEcho,
    meta: CheckpointMeta,
}

/// Encoder, decoders, both vocabularies and the configuration that built them.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub char_vocab: Vocabulary,
    pub pinyin_vocab: Vocabulary,
    pub params: ParamStore,
    pub meta: CheckpointMeta,
    layout: Layout,
}

impl ModelBundle {
    /// Randomly initialized model; identical seeds give identical parameters.
    pub fn new(config: ModelConfig, char_vocab: Vocabulary, pinyin_vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let layout = build_layout(&config, char_vocab.len(), pinyin_vocab.len(), &mut |name, shape, init| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        std * z
                    })
                    .collect::<Vec<f64>>(),
            };
            Ok(params.add(name, Array::new(shape, data)?))
        })?;
        Ok(Self { config, char_vocab, pinyin_vocab, params, meta: CheckpointMeta::default(), layout })
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    /// Vocabulary of the CTC head.
    pub fn ctc_vocab(&self) -> &Vocabulary {
        if self.architecture().has_p2m() {
            &self.pinyin_vocab
        } else {
            &self.char_vocab
        }
    }

    /// CTC projection as `[d, |V_ctc|]`.
    pub fn w_ctc(&self) -> Array {
        match self.layout.enc.ctc_w {
            Some(w) => self.params.values[w].clone(),
            None => self.w_emb().expect("tied model has a CMLM").t(),
        }
    }

    /// CMLM input embedding, `[|V_char|, d]`.
    pub fn w_emb(&self) -> Option<&Array> {
        self.layout.cmlm.as_ref().map(|c| &self.params.values[c.emb])
    }

    /// P2M output projection, `[d, |V_char|]`.
    pub fn w_p2m(&self) -> Option<&Array> {
        self.layout.p2m.as_ref().map(|p| &self.params.values[p.out.w])
    }

    /// Returns `(hidden [T', d], ctc_log_probs [T', |V_ctc|])`.
    pub fn encoder_forward(&self, features: &Array) -> Result<(Array, Array)> {
        let mut s = Session::new(self);
        let (h, lp) = s.encode(features)?;
        Ok((s.graph.value(h), s.graph.value(lp)))
    }

    pub fn p2m_forward(&self, seq: &MaskedSequence, hidden: &Array) -> Result<Array> {
        self.decoder_forward(DecoderKind::P2m, seq, hidden)
    }

    pub fn cmlm_forward(&self, seq: &MaskedSequence, hidden: &Array) -> Result<Array> {
        self.decoder_forward(DecoderKind::Cmlm, seq, hidden)
    }

    /// Logits `[L, |V_char|]` from either decoder.
    pub fn decoder_forward(&self, kind: DecoderKind, seq: &MaskedSequence, hidden: &Array) -> Result<Array> {
        if seq.is_empty() {
            self.decoder(kind)?;
            return Ok(Array::zeros(&[0, self.char_vocab.len()]));
        }
        let mut s = Session::new(self);
        let h = s.graph.constant(hidden);
        let out = s.decode(kind, &seq.ids, h)?;
        Ok(s.graph.value(out))
    }

    fn decoder(&self, kind: DecoderKind) -> Result<&DecoderLayout> {
        let d = match kind {
            DecoderKind::P2m => self.layout.p2m.as_ref(),
            DecoderKind::Cmlm => self.layout.cmlm.as_ref(),
        };
        d.ok_or_else(|| Error::Incompatible(format!("{} model has no {kind:?} decoder", self.architecture())))
    }

    /// MatReg pairs that apply to this architecture by default.
    pub fn default_matreg_pairs(&self) -> Vec<MatRegPair> {
        match self.architecture() {
            Architecture::CtcOnly => vec![],
            Architecture::MaskCtc if self.config.tie_ctc_embedding => vec![],
            Architecture::MaskCtc => vec![MatRegPair::CtcCmlm],
            Architecture::MaskCtcP2m => vec![MatRegPair::P2mCmlm],
        }
    }

    pub fn check_matreg_pair(&self, pair: MatRegPair) -> Result<()> {
        let ok = match pair {
            MatRegPair::CtcCmlm => self.architecture() == Architecture::MaskCtc,
            MatRegPair::P2mCmlm => self.architecture().has_p2m(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("MatReg pair {pair:?} is not defined for {}", self.architecture())))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let echo = HeaderEcho {
            config: self.config.clone(),
            char_vocab: VocabEcho::of(&self.char_vocab),
            pinyin_vocab: VocabEcho::of(&self.pinyin_vocab),
            meta: self.meta.clone(),
        };
        let arrays: Vec<(&str, &Array)> =
            self.params.names.iter().map(String::as_str).zip(self.params.values.iter()).collect();
        write_container(path, serde_json::to_value(echo)?, &arrays)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, arrays) = read_container(path)?;
        let echo: HeaderEcho =
            serde_json::from_value(meta).map_err(|e| Error::Checkpoint(format!("{}: header: {e}", path.display())))?;
        echo.config.validate()?;
        let char_vocab = echo.char_vocab.into_vocab()?;
        let pinyin_vocab = echo.pinyin_vocab.into_vocab()?;
        let mut found: HashMap<String, Array> = arrays.into_iter().collect();
        let mut params = ParamStore::default();
        let layout = build_layout(&echo.config, char_vocab.len(), pinyin_vocab.len(), &mut |name, shape, _| {
            let a = found.remove(name).ok_or_else(|| Error::Checkpoint(format!("array '{name}' missing")))?;
            if a.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "array '{name}' has shape {:?}, expected {:?}",
                    a.shape(),
                    shape
                )));
            }
            if !a.is_finite() {
                return Err(Error::Checkpoint(format!("array '{name}' holds non-finite values")));
            }
            Ok(params.add(name, a))
        })?;
        if let Some(extra) = found.keys().min() {
            return Err(Error::Checkpoint(format!("unexpected array '{extra}'")));
        }
        Ok(Self { config: echo.config, char_vocab, pinyin_vocab, params, meta: echo.meta, layout })
    }

    /// Errors unless `other` has the same configuration, vocabularies and parameter shapes.
    pub fn check_compatible(&self, other: &ModelBundle) -> Result<()> {
        if self.config != other.config {
            return Err(Error::Incompatible("model configurations differ".into()));
        }
        if self.char_vocab != other.char_vocab || self.pinyin_vocab != other.pinyin_vocab {
            return Err(Error::Incompatible("vocabularies differ".into()));
        }
        for (i, name) in self.params.names.iter().enumerate() {
            let (a, b) = (&self.params.values[i], other.params.get(name));
            match b {
                Some(b) if b.shape() == a.shape() => {}
                Some(b) => {
                    return Err(Error::Incompatible(format!("array '{name}': {:?} vs {:?}", a.shape(), b.shape())));
                }
                None => return Err(Error::Incompatible(format!("array '{name}' missing"))),
            }
        }
        Ok(())
    }
}

/// Parameter-wise mean of the given models.
pub fn average_bundles(models: &[ModelBundle]) -> Result<ModelBundle> {
    let first = models.first().ok_or_else(|| Error::Invalid("nothing to average".into()))?;
    for m in &models[1..] {
        first.check_compatible(m)?;
    }
    let mut out = first.clone();
    let k = models.len() as f64;
    for (i, name) in first.params.names.iter().enumerate() {
        let acc = out.params.values[i].data_mut();
        for m in &models[1..] {
            let other = m.params.get(name).expect("checked compatible");
            acc.iter_mut().zip(other.data()).for_each(|(a, b)| *a += b);
        }
        acc.iter_mut().for_each(|a| *a /= k);
    }
    out.meta = CheckpointMeta { epoch: first.meta.epoch, step: first.meta.step, val_accuracy: None, val_ter: None };
    Ok(out)
}

/// Loads `paths`, keeps the `k` with the highest validation accuracy (ties by
/// input order) and averages them.
pub fn average_checkpoints<P: AsRef<Path>>(paths: &[P], k: usize) -> Result<ModelBundle> {
    if paths.is_empty() || k == 0 {
        return Err(Error::Invalid("averaging needs at least one checkpoint and k >= 1".into()));
    }
    let mut models = paths.iter().map(|p| ModelBundle::load(p.as_ref())).collect::<Result<Vec<_>>>()?;
    let acc = |m: &ModelBundle| m.meta.val_accuracy.unwrap_or(f64::NEG_INFINITY);
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by(|&a, &b| acc(&models[b]).total_cmp(&acc(&models[a])).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    let mut chosen = Vec::with_capacity(order.len());
    for (i, m) in models.drain(..).enumerate() {
        if order.contains(&i) {
            chosen.push(m);
        }
    }
    log::info!("averaging {} of {} checkpoints", chosen.len(), paths.len());
    average_bundles(&chosen)
}

/// Sinusoidal position table `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> Array {
    let mut data = vec![0.0; len * d];
    for p in 0..len {
        for i in (0..d).step_by(2) {
            let angle = p as f64 / 10000f64.powf(i as f64 / d as f64);
            data[p * d + i] = angle.sin();
            if i + 1 < d {
                data[p * d + i + 1] = angle.cos();
            }
        }
    }
    Array::new(&[len, d], data).expect("shape matches data")
}

/// Stacks `factor` consecutive frames into one row, zero-padding the tail.
fn stack_frames(features: &Array, factor: usize) -> Array {
    let (t, f) = (features.rows(), features.cols());
    let tp = t.div_ceil(factor);
    let mut data = vec![0.0; tp * factor * f];
    data[..t * f].copy_from_slice(features.data());
    Array::new(&[tp, factor * f], data).expect("shape matches data")
}

/// One graph with the model's parameters bound lazily as leaves.
pub struct Session<'m> {
    pub graph: Graph,
    model: &'m ModelBundle,
    bound: Vec<Option<Var>>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'m> Session<'m> {
    /// Inference session: dropout disabled.
    pub fn new(model: &'m ModelBundle) -> Self {
        Self { graph: Graph::new(), model, bound: vec![None; model.params.len()], dropout: None }
    }

    /// Training session with dropout driven by `seed`.
    pub fn training(model: &'m ModelBundle, seed: u64) -> Self {
        let rate = model.config.encoder.dropout;
        let mut s = Self::new(model);
        if rate > 0.0 {
            s.dropout = Some((rate, ChaCha8Rng::seed_from_u64(seed)));
        }
        s
    }

    fn p(&mut self, id: usize) -> Var {
        if let Some(v) = self.bound[id] {
            return v;
        }
        let v = self.graph.param(&self.model.params.values[id]);
        self.bound[id] = Some(v);
        v
    }

    /// Gradients of every bound parameter, indexed like [`ParamStore::values`].
    pub fn param_grads(&self) -> Vec<Option<Array>> {
        self.bound.iter().map(|b| b.and_then(|v| self.graph.grad(v))).collect()
    }

    fn drop(&mut self, x: Var) -> Result<Var> {
        match &mut self.dropout {
            Some((rate, rng)) => self.graph.dropout(x, *rate, rng),
            None => Ok(x),
        }
    }

    fn linear(&mut self, x: Var, l: &Linear) -> Result<Var> {
        let w = self.p(l.w);
        let y = self.graph.matmul(x, w)?;
        match l.b {
            Some(b) => {
                let b = self.p(b);
                self.graph.add(y, b)
            }
            None => Ok(y),
        }
    }

    fn norm(&mut self, x: Var, n: &Norm) -> Result<Var> {
        let (g, b) = (self.p(n.g), self.p(n.b));
        let y = self.graph.layer_norm(x)?;
        let y = self.graph.mul(y, g)?;
        self.graph.add(y, b)
    }

    fn attention(&mut self, x: Var, mem: Var, a: &Attn) -> Result<Var> {
        let heads = self.model.config.encoder.num_heads;
        let dh = self.model.config.encoder.model_dim / heads;
        let q = self.linear(x, &a.q)?;
        let k = self.linear(mem, &a.k)?;
        let v = self.linear(mem, &a.v)?;
        let g = &mut self.graph;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
            let p = g.softmax(s)?;
            outs.push(g.matmul(p, vh)?);
        }
        let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
        self.linear(cat, &a.o)
    }

    fn ff(&mut self, x: Var, f: &Ff) -> Result<Var> {
        let h = self.linear(x, &f.a)?;
        let h = self.graph.gelu(h)?;
        self.linear(h, &f.b)
    }

    fn residual(&mut self, x: Var, y: Var) -> Result<Var> {
        let y = self.drop(y)?;
        self.graph.add(x, y)
    }

    /// Returns `(hidden, ctc_log_probs)` nodes.
    pub fn encode(&mut self, features: &Array) -> Result<(Var, Var)> {
        let model = self.model;
        let cfg = &model.config.encoder;
        let layout = &model.layout.enc;
        if features.shape().len() != 2 || features.cols() != cfg.input_dim {
            return Err(Error::Shape(format!("features {:?}, expected [T, {}]", features.shape(), cfg.input_dim)));
        }
        if features.rows() < cfg.subsample_factor {
            return Err(Error::Invalid(format!(
                "{} frames is fewer than the subsample factor {}",
                features.rows(),
                cfg.subsample_factor
            )));
        }
        let stacked = self.graph.constant_owned(stack_frames(features, cfg.subsample_factor));
        let x = self.linear(stacked, &layout.input)?;
        let pe = self.graph.constant_owned(positional_encoding(self.graph.shape(x)[0], cfg.model_dim));
        let x = self.graph.add(x, pe)?;
        let mut x = self.drop(x)?;
        for l in &layout.layers {
            let h = self.norm(x, &l.n1)?;
            let a = self.attention(h, h, &l.attn)?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &l.n2)?;
            let f = self.ff(h, &l.ff)?;
            x = self.residual(x, f)?;
        }
        let hidden = self.norm(x, &layout.norm)?;
        let w = match layout.ctc_w {
            Some(w) => self.p(w),
            None => {
                let emb = model.layout.cmlm.as_ref().expect("tied model has a CMLM").emb;
                let e = self.p(emb);
                self.graph.transpose(e)?
            }
        };
        let b = self.p(layout.ctc_b);
        let logits = self.graph.matmul(hidden, w)?;
        let logits = self.graph.add(logits, b)?;
        let lp = self.graph.log_softmax(logits)?;
        Ok((hidden, lp))
    }

    /// Logits `[L, |V_char|]` for a non-empty input sequence.
    pub fn decode(&mut self, kind: DecoderKind, ids: &[usize], hidden: Var) -> Result<Var> {
        let model = self.model;
        let layout = model.decoder(kind)?;
        if ids.is_empty() {
            return Err(Error::Invalid("decoder input is empty".into()));
        }
        let d = self.model.config.encoder.model_dim;
        let emb = self.p(layout.emb);
        let x = self.graph.embed(emb, ids)?;
        let x = self.graph.scale(x, (d as f64).sqrt())?;
        let pe = self.graph.constant_owned(positional_encoding(ids.len(), d));
        let x = self.graph.add(x, pe)?;
        let mut x = self.drop(x)?;
        for l in &layout.layers {
            let h = self.norm(x, &l.n1)?;
            let a = self.attention(h, h, &l.self_attn)?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &l.n2)?;
            let a = self.attention(h, hidden, &l.cross)?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &l.n3)?;
            let f = self.ff(h, &l.ff)?;
            x = self.residual(x, f)?;
        }
        let x = self.norm(x, &layout.norm)?;
        self.linear(x, &layout.out)
    }

    /// MatReg between the pair's output projection and the CMLM embedding.
    pub fn matreg(&mut self, pair: MatRegPair) -> Result<Var> {
        self.model.check_matreg_pair(pair)?;
        let emb = self.model.layout.cmlm.as_ref().expect("checked").emb;
        let out_w = match pair {
            MatRegPair::CtcCmlm => {
                self.model.layout.enc.ctc_w.ok_or_else(|| Error::Config("MatReg on a tied CTC projection".into()))?
            }
            MatRegPair::P2mCmlm => self.model.layout.p2m.as_ref().expect("checked").out.w,
        };
        let (w, e) = (self.p(out_w), self.p(emb));
        let rows = self.graph.transpose(w)?;
        matreg_node(&mut self.graph, rows, e)
    }
}
