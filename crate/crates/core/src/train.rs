//! Training loop: per-utterance graphs with gradients accumulated over a
//! batch, Adam with inverse-square-root warmup, global-norm clipping,
//! per-epoch validation and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{P2mTargets, RunConfig};
use crate::data::{spec_augment, Manifest};
use crate::decode::{decode_pipeline, DecodeConfig};
use crate::embed::{load_vectors, train_ppmi_svd, EmbeddingSmoother};
use crate::error::{Error, Result};
use crate::loss::{
    combined_node, ctc_node, masked_ce_node, sample_mask, Conventional, LossConfig, LossTerms, MaskedSequence,
    SmoothingMode, TargetSmoother,
};
use crate::model::{DecoderKind, MatRegPair, ModelBundle, Session};
use crate::score::{score_corpus, Utterance};
use crate::tensor::{softmax_row, Array};
use crate::vocab::{tokenize, PinyinMapper, PinyinTable, Vocabulary};

/// One utterance ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct Example {
    pub utt_id: String,
    pub tokens: Vec<String>,
    pub feats: Array,
    pub char_ids: Vec<usize>,
    pub pinyin_ids: Vec<usize>,
}

impl Example {
    pub fn new(utt_id: &str, text: &str, feats: Array, char_vocab: &Vocabulary, mapper: &PinyinMapper) -> Result<Self> {
        let tokens = tokenize(text);
        let char_ids = tokens
            .iter()
            .map(|t| char_vocab.id(t).ok_or_else(|| Error::UnknownToken(t.clone())))
            .collect::<Result<Vec<_>>>()?;
        let pinyin_ids = mapper.map(&char_ids, char_vocab)?;
        Ok(Self { utt_id: utt_id.to_string(), tokens, feats, char_ids, pinyin_ids })
    }

    pub fn reference(&self) -> Utterance {
        Utterance::new(self.utt_id.clone(), self.tokens.clone())
    }
}

/// Loads every record of a manifest as examples.
pub fn load_examples(
    manifest: &Manifest,
    char_vocab: &Vocabulary,
    pinyin_vocab: &Vocabulary,
    table: &PinyinTable,
) -> Result<Vec<Example>> {
    let mapper = PinyinMapper::new(char_vocab, pinyin_vocab, table);
    manifest
        .load_all()?
        .into_iter()
        .map(|(r, feats)| Example::new(&r.utt_id, &r.text, feats, char_vocab, &mapper))
        .collect()
}

/// Inverse-square-root schedule peaking at `peak` after `warmup` steps.
/// Steps count from 1.
pub fn learning_rate(step: usize, peak: f64, warmup: usize) -> f64 {
    let s = step.max(1) as f64;
    if warmup == 0 {
        return peak / s.sqrt();
    }
    let w = warmup as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: &[Array]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self { m: zeros(), v: zeros(), t: 0, beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }

    pub fn step(&mut self, params: &mut [Array], grads: &[Option<Array>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gj;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gj * gj;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Array>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Per-epoch record of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub ctc: f64,
    pub p2m: f64,
    pub cmlm: f64,
    pub matreg: f64,
    /// Utterances skipped because their CTC target does not fit the frames.
    pub skipped: usize,
    pub val_ter: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub model: ModelBundle,
    pub logs: Vec<EpochLog>,
    pub checkpoints: Vec<PathBuf>,
}

/// Builds the target smoother the run's loss config asks for.
pub fn build_smoother(cfg: &RunConfig, model: &ModelBundle, train: &[Example]) -> Result<Box<dyn TargetSmoother>> {
    Ok(match cfg.loss.smoothing {
        SmoothingMode::Conventional => Box::new(Conventional { epsilon: cfg.loss.epsilon }),
        SmoothingMode::Embedding => {
            let emb = match &cfg.smoothing.vectors_path {
                Some(p) => load_vectors(Path::new(p), &model.char_vocab)?,
                None => {
                    let lines: Vec<String> = train.iter().map(|e| e.tokens.join(" ")).collect();
                    train_ppmi_svd(&lines, &model.char_vocab, cfg.smoothing.dim, cfg.smoothing.window)?
                }
            };
            let mut sc = cfg.smoothing.clone();
            sc.epsilon = cfg.loss.epsilon;
            Box::new(EmbeddingSmoother::build(&emb, &model.char_vocab, &sc))
        }
    })
}

/// Gradient and loss terms of one utterance.
pub struct ExampleGrad {
    pub terms: LossTerms,
    pub loss: f64,
    pub grads: Vec<Option<Array>>,
}

pub struct Trainer<'c> {
    pub cfg: &'c RunConfig,
    pub model: ModelBundle,
    smoother: Box<dyn TargetSmoother>,
    matreg_pairs: Vec<MatRegPair>,
    loss_cfg: LossConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    pub step: usize,
}

impl<'c> Trainer<'c> {
    pub fn new(cfg: &'c RunConfig, model: ModelBundle, train: &[Example]) -> Result<Self> {
        cfg.validate()?;
        let smoother = build_smoother(cfg, &model, train)?;
        let matreg_pairs = cfg.train.matreg_pairs.clone().unwrap_or_else(|| model.default_matreg_pairs());
        for &p in &matreg_pairs {
            model.check_matreg_pair(p)?;
        }
        // Without decoders the CTC term is the whole objective.
        let mut loss_cfg = cfg.loss.clone();
        if !model.architecture().has_cmlm() {
            loss_cfg.alpha = 1.0;
        }
        let adam = Adam::new(model.params.values());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
        Ok(Self { cfg, model, smoother, matreg_pairs, loss_cfg, adam, rng, step: 0 })
    }

    /// Loss and parameter gradients for one utterance. Returns `Ok(None)`
    /// when the CTC target cannot be aligned to the subsampled frames.
    pub fn example_grad(&self, ex: &Example, seed: u64) -> Result<Option<ExampleGrad>> {
        let model = &self.model;
        let arch = model.architecture();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sa = &self.cfg.train.spec_augment;
        let feats = spec_augment(&ex.feats, sa.time_masks, sa.time_width, sa.freq_masks, sa.freq_width, &mut rng);
        let mut s = Session::training(model, rng.random());
        let (hidden, lp) = s.encode(&feats)?;
        let ctc_target = if arch.has_p2m() { &ex.pinyin_ids } else { &ex.char_ids };
        let ctc = match ctc_node(&mut s.graph, lp, ctc_target, model.ctc_vocab().blank()) {
            Ok(v) => v,
            Err(Error::InfeasibleTarget { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let mut cmlm = None;
        let mut p2m = None;
        if arch.has_cmlm() {
            let positions = sample_mask(ex.char_ids.len(), &mut rng);
            let masked = MaskedSequence::new(&ex.char_ids, &positions, model.char_vocab.mask())?;
            let logits = s.decode(DecoderKind::Cmlm, &masked.ids, hidden)?;
            let ce = masked_ce_node(&mut s.graph, logits, &ex.char_ids, &positions, self.smoother.as_ref())?;
            cmlm = Some(s.graph.scale(ce, positions.len() as f64)?);
            if arch.has_p2m() {
                let input = MaskedSequence::new(&ex.pinyin_ids, &positions, model.pinyin_vocab.mask())?;
                let supervised: Vec<usize> = match self.cfg.train.p2m_targets {
                    P2mTargets::All => (0..ex.char_ids.len()).collect(),
                    P2mTargets::Masked => positions.clone(),
                };
                let logits = s.decode(DecoderKind::P2m, &input.ids, hidden)?;
                let ce = masked_ce_node(&mut s.graph, logits, &ex.char_ids, &supervised, self.smoother.as_ref())?;
                p2m = Some(s.graph.scale(ce, supervised.len() as f64)?);
            }
        }
        let mut matreg = None;
        for &pair in &self.matreg_pairs {
            let m = s.matreg(pair)?;
            matreg = Some(match matreg {
                Some(acc) => s.graph.add(acc, m)?,
                None => m,
            });
        }
        let total = combined_node(&mut s.graph, Some(ctc), p2m, cmlm, matreg, &self.loss_cfg)?;
        let scalar = |s: &Session, v: Option<crate::tensor::Var>| v.map_or(0.0, |v| s.graph.data(v)[0]);
        let terms = LossTerms {
            ctc: scalar(&s, Some(ctc)),
            p2m: scalar(&s, p2m),
            cmlm: scalar(&s, cmlm),
            matreg: scalar(&s, matreg),
        };
        let loss = s.graph.data(total)[0];
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        s.graph.backward(total)?;
        Ok(Some(ExampleGrad { terms, loss, grads: s.param_grads() }))
    }

    /// One optimizer step over `batch`; returns summed terms, summed loss and the skip count.
    pub fn train_batch(
        &mut self,
        batch: &[&Example],
        epoch: usize,
        batch_idx: usize,
    ) -> Result<(LossTerms, f64, usize)> {
        let seeds: Vec<u64> = batch.iter().map(|_| self.rng.random()).collect();
        let mut acc: Vec<Option<Array>> = vec![None; self.model.params.len()];
        let mut terms = LossTerms::default();
        let (mut loss, mut used, mut skipped) = (0.0, 0usize, 0usize);
        for (ex, &seed) in batch.iter().zip(&seeds) {
            let g = match self.example_grad(ex, seed) {
                Ok(Some(g)) => g,
                Ok(None) => {
                    log::warn!("{}: CTC target does not fit the subsampled frames; skipped", ex.utt_id);
                    skipped += 1;
                    continue;
                }
                Err(Error::NonFinite(_) | Error::CtcNumeric(_)) => {
                    return Err(Error::NonFiniteLoss { epoch, batch: batch_idx })
                }
                Err(e) => return Err(e),
            };
            used += 1;
            loss += g.loss;
            terms.ctc += g.terms.ctc;
            terms.p2m += g.terms.p2m;
            terms.cmlm += g.terms.cmlm;
            terms.matreg += g.terms.matreg;
            for (a, g) in acc.iter_mut().zip(g.grads) {
                let Some(g) = g else { continue };
                match a {
                    Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                    None => *a = Some(g),
                }
            }
        }
        if used == 0 {
            return Ok((terms, loss, skipped));
        }
        for g in acc.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x /= used as f64);
        }
        let norm = clip_grad_norm(&mut acc, self.cfg.train.grad_clip);
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: batch_idx });
        }
        self.step += 1;
        let lr = self.lr();
        self.adam.step(self.model.params.values_mut(), &acc, lr);
        if !self.model.params.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: batch_idx });
        }
        Ok((terms, loss, skipped))
    }

    pub fn lr(&self) -> f64 {
        learning_rate(self.step, self.cfg.train.learning_rate, self.cfg.train.warmup_steps)
    }

    /// Trains for the configured epochs. With `out_dir`, writes
    /// `train_log.jsonl` and one checkpoint per epoch under `checkpoints/`.
    pub fn run(mut self, train: &[Example], val: &[Example], out_dir: Option<&Path>) -> Result<TrainOutcome> {
        let n = ((train.len() as f64 * self.cfg.train.train_fraction).ceil() as usize).min(train.len());
        let train = &train[..n];
        let mut log_file = match out_dir {
            Some(d) => {
                std::fs::create_dir_all(d.join("checkpoints"))?;
                Some(std::io::BufWriter::new(std::fs::File::create(d.join("train_log.jsonl"))?))
            }
            None => None,
        };
        let decode_cfg = DecodeConfig { architecture: self.model.architecture(), ..self.cfg.decode.clone() };
        let mut logs = Vec::new();
        let mut checkpoints = Vec::new();
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=self.cfg.train.epochs {
            let start = Instant::now();
            order.shuffle(&mut self.rng);
            let mut terms = LossTerms::default();
            let (mut loss, mut skipped) = (0.0, 0);
            for (b, chunk) in order.chunks(self.cfg.train.batch_size).enumerate() {
                let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
                let (t, l, s) = self.train_batch(&batch, epoch, b + 1)?;
                terms.ctc += t.ctc;
                terms.p2m += t.p2m;
                terms.cmlm += t.cmlm;
                terms.matreg += t.matreg;
                loss += l;
                skipped += s;
            }
            let used = (train.len() - skipped).max(1) as f64;
            let (val_ter, val_accuracy) = evaluate(&self.model, val, &decode_cfg, self.cfg.seed)?;
            self.model.meta.epoch = epoch;
            self.model.meta.step = self.step;
            self.model.meta.val_ter = Some(val_ter);
            self.model.meta.val_accuracy = Some(val_accuracy);
            let entry = EpochLog {
                epoch,
                step: self.step,
                lr: self.lr(),
                train_loss: loss / used,
                ctc: terms.ctc / used,
                p2m: terms.p2m / used,
                cmlm: terms.cmlm / used,
                matreg: terms.matreg / used,
                skipped,
                val_ter,
                val_accuracy,
                seconds: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "epoch {epoch}: loss {:.4} val TER {:.2} acc {:.4} ({:.1}s)",
                entry.train_loss,
                val_ter,
                val_accuracy,
                entry.seconds
            );
            if let (Some(d), Some(f)) = (out_dir, log_file.as_mut()) {
                serde_json::to_writer(&mut *f, &entry)?;
                f.write_all(b"\n")?;
                f.flush()?;
                let path = d.join("checkpoints").join(format!("epoch{epoch:03}.ckpt"));
                self.model.save(&path)?;
                checkpoints.push(path);
            }
            logs.push(entry);
        }
        Ok(TrainOutcome { model: self.model, logs, checkpoints })
    }
}

/// Decodes every example and scores it; returns TER in percent.
pub fn decode_ter(model: &ModelBundle, examples: &[Example], cfg: &DecodeConfig) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let (refs, hyps) = decode_examples(model, examples, cfg)?;
    Ok(score_corpus(&refs, &hyps, &model.char_vocab).ter)
}

/// References and hypotheses as scoring utterances.
pub fn decode_examples(
    model: &ModelBundle,
    examples: &[Example],
    cfg: &DecodeConfig,
) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    let mut refs = Vec::with_capacity(examples.len());
    let mut hyps = Vec::with_capacity(examples.len());
    for ex in examples {
        let h = decode_pipeline(&ex.feats, model, cfg)?;
        refs.push(ex.reference());
        hyps.push(Utterance::new(ex.utt_id.clone(), model.char_vocab.decode_tokens(&h.tokens)));
    }
    Ok((refs, hyps))
}

/// Validation TER and accuracy. Accuracy is the CMLM's masked-token
/// accuracy under seeded random masks, or `1 - TER` for CTC-only models.
pub fn evaluate(model: &ModelBundle, examples: &[Example], cfg: &DecodeConfig, seed: u64) -> Result<(f64, f64)> {
    let ter = decode_ter(model, examples, cfg)?;
    if !model.architecture().has_cmlm() {
        return Ok((ter, (1.0 - ter / 100.0).max(0.0)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7661_6c);
    let cv = &model.char_vocab;
    let (mut correct, mut total) = (0usize, 0usize);
    let mut probs = vec![0.0; cv.len()];
    for ex in examples {
        let positions = sample_mask(ex.char_ids.len(), &mut rng);
        if positions.is_empty() {
            continue;
        }
        let masked = MaskedSequence::new(&ex.char_ids, &positions, cv.mask())?;
        let (hidden, _) = model.encoder_forward(&ex.feats)?;
        let logits = model.cmlm_forward(&masked, &hidden)?;
        for &p in &positions {
            softmax_row(logits.row(p), &mut probs);
            let best = probs
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != cv.mask() && i != cv.blank())
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i);
            correct += usize::from(best == Some(ex.char_ids[p]));
            total += 1;
        }
    }
    Ok((ter, correct as f64 / total.max(1) as f64))
}

/// TER for each masking threshold.
pub fn sweep_threshold(
    model: &ModelBundle,
    examples: &[Example],
    base: &DecodeConfig,
    thresholds: &[f64],
) -> Result<Vec<(f64, f64)>> {
    thresholds
        .iter()
        .map(|&p| Ok((p, decode_ter(model, examples, &DecodeConfig { p_thres: p, ..base.clone() })?)))
        .collect()
}
