//! Non-autoregressive inference: CTC greedy collapse, confidence masking,
//! optional Pinyin-to-Mandarin translation and iterative CMLM refinement.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::MaskedSequence;
use crate::model::{Architecture, ModelBundle};
use crate::tensor::{softmax_row, Array};

/// Milliseconds of audio per feature frame.
pub const FRAME_MS: f64 = 10.0;

/// Which posterior decides the mask set in the P2M architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// CTC confidence of the Pinyin-level token.
    #[default]
    Ctc,
    /// P2M posterior of the translated character.
    P2m,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub p_thres: f64,
    /// CMLM iterations; 1 is a single decoder pass.
    pub iterations: usize,
    pub architecture: Architecture,
    pub mask_source: MaskSource,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { p_thres: 0.99, iterations: 1, architecture: Architecture::default(), mask_source: MaskSource::Ctc }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_thres > 0.0 && self.p_thres <= 1.0) {
            return Err(Error::Config(format!("p_thres {} outside (0, 1]", self.p_thres)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub utt_id: String,
    pub text: String,
    /// Character-vocabulary ids of the final output.
    pub tokens: Vec<usize>,
    pub confidences: Vec<f64>,
    /// Positions masked after thresholding.
    pub masked_positions: Vec<usize>,
    /// Positions committed by each refinement iteration, in order.
    #[serde(default)]
    pub fill_history: Vec<Vec<usize>>,
    pub decode_ms: f64,
    pub audio_ms: f64,
}

fn argmax_excluding(row: &[f64], excluded: &[usize]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in row.iter().enumerate() {
        if v > best.1 && !excluded.contains(&i) {
            best = (i, v);
        }
    }
    best
}

/// Per-frame argmax, repeats collapsed, blanks dropped. The confidence of
/// an output token is its largest posterior among the merged frames.
pub fn ctc_greedy(log_probs: &Array, blank: usize) -> (Vec<usize>, Vec<f64>) {
    ctc_greedy_excluding(log_probs, blank, &[])
}

/// [`ctc_greedy`] with some ids removed from the argmax domain.
pub fn ctc_greedy_excluding(log_probs: &Array, blank: usize, excluded: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let mut tokens = Vec::new();
    let mut confs: Vec<f64> = Vec::new();
    let mut prev = None;
    for t in 0..log_probs.rows() {
        let (k, lp) = argmax_excluding(log_probs.row(t), excluded);
        let p = lp.exp();
        if k != blank {
            if prev == Some(k) {
                let c = confs.last_mut().expect("repeat follows a token");
                *c = c.max(p);
            } else {
                tokens.push(k);
                confs.push(p);
            }
        }
        prev = Some(k);
    }
    (tokens, confs)
}

/// Masks every position whose confidence is below `p_thres`.
pub fn mask_by_threshold(tokens: &[usize], confidences: &[f64], p_thres: f64, mask_id: usize) -> MaskedSequence {
    debug_assert_eq!(tokens.len(), confidences.len());
    let positions: Vec<usize> = (0..tokens.len()).filter(|&i| confidences[i] < p_thres).collect();
    MaskedSequence::new(tokens, &positions, mask_id).expect("positions are in range")
}

/// Fill counts per iteration: `n / K` for the first `K - 1`, the remainder last.
pub fn iteration_schedule(n: usize, k: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let k = k.max(1);
    let base = n / k;
    let mut out = vec![base; k];
    out[k - 1] = n - base * (k - 1);
    out
}

/// Output of [`cmlm_refine`].
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub ids: Vec<usize>,
    /// Posterior of each committed token, `None` for positions that were never masked.
    pub fill_probs: Vec<Option<f64>>,
    pub history: Vec<Vec<usize>>,
}

/// Fills the masked positions of `masked` in `k` CMLM passes. Each pass
/// commits the scheduled number of most confident predictions; committed
/// positions are never revisited.
pub fn cmlm_refine(model: &ModelBundle, masked: &MaskedSequence, hidden: &Array, k: usize) -> Result<Refined> {
    let vocab = &model.char_vocab;
    let excluded = [vocab.mask(), vocab.blank()];
    let mut seq = masked.clone();
    let mut fill_probs = vec![None; seq.len()];
    let mut history = Vec::new();
    let mut probs = vec![0.0; vocab.len()];
    for count in iteration_schedule(seq.mask_positions.len(), k) {
        if count == 0 {
            history.push(Vec::new());
            continue;
        }
        let logits = model.cmlm_forward(&seq, hidden)?;
        let mut cands: Vec<(usize, usize, f64)> = seq
            .mask_positions
            .iter()
            .map(|&p| {
                softmax_row(logits.row(p), &mut probs);
                let (id, pr) = argmax_excluding(&probs, &excluded);
                (p, id, pr)
            })
            .collect();
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        let mut step: Vec<usize> = Vec::with_capacity(count);
        for &(p, id, pr) in cands.iter().take(count) {
            seq.ids[p] = id;
            fill_probs[p] = Some(pr);
            step.push(p);
        }
        step.sort_unstable();
        seq.mask_positions.retain(|p| step.binary_search(p).is_err());
        history.push(step);
    }
    debug_assert!(seq.mask_positions.is_empty());
    Ok(Refined { ids: seq.ids, fill_probs, history })
}

/// Decodes one utterance's features to a hypothesis over the character vocabulary.
pub fn decode_pipeline(features: &Array, model: &ModelBundle, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    if cfg.architecture != model.architecture() {
        return Err(Error::Incompatible(format!(
            "decode config is for {} but the model is {}",
            cfg.architecture,
            model.architecture()
        )));
    }
    let start = Instant::now();
    let cv = &model.char_vocab;
    let ctc_vocab = model.ctc_vocab();
    let (hidden, lp) = model.encoder_forward(features)?;
    let (tokens, confs) = ctc_greedy_excluding(&lp, ctc_vocab.blank(), &[ctc_vocab.mask()]);

    let (ids, confidences, masked_positions, history) = match model.architecture() {
        Architecture::CtcOnly => (tokens, confs, Vec::new(), Vec::new()),
        Architecture::MaskCtc => {
            let masked = mask_by_threshold(&tokens, &confs, cfg.p_thres, cv.mask());
            finish(model, masked, &hidden, &confs, cfg.iterations)?
        }
        Architecture::MaskCtcP2m => {
            let excluded = [cv.mask(), cv.blank()];
            let p2m_in = match cfg.mask_source {
                MaskSource::Ctc => mask_by_threshold(&tokens, &confs, cfg.p_thres, ctc_vocab.mask()),
                MaskSource::P2m => MaskedSequence::unmasked(&tokens),
            };
            let logits = model.p2m_forward(&p2m_in, &hidden)?;
            let mut probs = vec![0.0; cv.len()];
            let mut chars = Vec::with_capacity(tokens.len());
            let mut pc = Vec::with_capacity(tokens.len());
            for p in 0..p2m_in.len() {
                softmax_row(logits.row(p), &mut probs);
                let (id, pr) = argmax_excluding(&probs, &excluded);
                chars.push(id);
                pc.push(pr);
            }
            let (masked, confs) = match cfg.mask_source {
                MaskSource::Ctc => (MaskedSequence::new(&chars, &p2m_in.mask_positions, cv.mask())?, confs),
                MaskSource::P2m => (mask_by_threshold(&chars, &pc, cfg.p_thres, cv.mask()), pc),
            };
            finish(model, masked, &hidden, &confs, cfg.iterations)?
        }
    };
    let decode_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(Hypothesis {
        utt_id: String::new(),
        text: cv.decode(&ids),
        tokens: ids,
        confidences,
        masked_positions,
        fill_history: history,
        decode_ms,
        audio_ms: features.rows() as f64 * FRAME_MS,
    })
}

type Finished = (Vec<usize>, Vec<f64>, Vec<usize>, Vec<Vec<usize>>);

fn finish(model: &ModelBundle, masked: MaskedSequence, hidden: &Array, confs: &[f64], k: usize) -> Result<Finished> {
    let positions = masked.mask_positions.clone();
    let r = cmlm_refine(model, &masked, hidden, k)?;
    let confidences = confs.iter().zip(&r.fill_probs).map(|(&c, f)| f.unwrap_or(c)).collect();
    Ok((r.ids, confidences, positions, r.history))
}

/// Total decode time over total audio duration.
pub fn measure_rtf(hyps: &[Hypothesis]) -> Result<f64> {
    let audio: f64 = hyps.iter().map(|h| h.audio_ms).sum();
    if audio <= 0.0 {
        return Err(Error::ZeroAudio);
    }
    Ok(hyps.iter().map(|h| h.decode_ms).sum::<f64>() / audio)
}

pub fn write_hypotheses(hyps: &[Hypothesis], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for h in hyps {
        serde_json::to_writer(&mut w, h)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_hypotheses(path: &Path) -> Result<Vec<Hypothesis>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
