//! Synthetic code-switching corpora with homophone structure, template
//! features, SpecAugment and JSON-lines manifests.
//!
//! Every transcript belongs to one hidden topic. Characters sharing a Pinyin
//! syllable are spread over different topics, so a homophone can only be
//! resolved from the other tokens of its utterance. English words and
//! characters with a unique syllable reveal the topic.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container};
use crate::error::{Error, Result};
use crate::tensor::Array;
use crate::vocab::{build_vocab, tokenize, LangTag, PinyinTable, Vocabulary};

const INITIALS: [&str; 23] = [
    "b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h", "j", "q", "x", "zh", "ch", "sh", "r", "z", "c", "s", "y",
    "w",
];
const FINALS: [&str; 14] = ["a", "o", "e", "i", "u", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "ong"];
const WORDS: [&str; 64] = [
    "happy", "today", "water", "music", "table", "paper", "green", "apple", "money", "house", "friend", "market",
    "window", "coffee", "movie", "phone", "school", "travel", "dinner", "weekend", "office", "family", "sport",
    "number", "letter", "yellow", "garden", "summer", "winter", "doctor", "driver", "ticket", "basket", "guitar",
    "camera", "rocket", "pencil", "silver", "planet", "bridge", "forest", "island", "castle", "dragon", "jacket",
    "monkey", "orange", "pepper", "rabbit", "butter", "cookie", "mirror", "candle", "button", "carpet", "circle",
    "hammer", "ladder", "magnet", "needle", "parrot", "saddle", "tunnel", "wallet",
];
const FIRST_CHAR: u32 = 0x4E00;
const SPLITS: [&str; 3] = ["train", "val", "test"];

const STREAM_INVENTORY: u64 = 1;
const STREAM_TEMPLATES: u64 = 2;
const STREAM_TEXT: u64 = 3;
const STREAM_FEATS: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_chars: usize,
    pub num_pinyin: usize,
    pub num_eng_words: usize,
    pub topics: usize,
    pub train_utts: usize,
    pub val_utts: usize,
    pub test_utts: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Probability that a token switches language relative to the previous one.
    pub switch_prob: f64,
    /// Probability that an utterance starts in Mandarin.
    pub mandarin_start_prob: f64,
    pub feat_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_chars: 48,
            num_pinyin: 20,
            num_eng_words: 16,
            topics: 4,
            train_utts: 2000,
            val_utts: 200,
            test_utts: 200,
            min_tokens: 4,
            max_tokens: 10,
            switch_prob: 0.137,
            mandarin_start_prob: 0.45,
            feat_dim: 16,
            min_frames: 6,
            max_frames: 10,
            noise_std: 0.5,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_pinyin == 0 || self.num_pinyin >= self.num_chars {
            return bad(format!("num_pinyin ({}) must be in 1..num_chars ({})", self.num_pinyin, self.num_chars));
        }
        if self.num_pinyin > INITIALS.len() * FINALS.len() {
            return bad(format!(
                "num_pinyin ({}) exceeds {} available syllables",
                self.num_pinyin,
                INITIALS.len() * FINALS.len()
            ));
        }
        if self.num_eng_words == 0 || self.num_eng_words > WORDS.len() {
            return bad(format!("num_eng_words must be in 1..={}", WORDS.len()));
        }
        if self.topics == 0 {
            return bad("topics must be positive".into());
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad(format!("token range {}..={} is empty", self.min_tokens, self.max_tokens));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad(format!("frame range {}..={} is empty", self.min_frames, self.max_frames));
        }
        if self.feat_dim == 0 {
            return bad("feat_dim must be positive".into());
        }
        for (name, p) in [("switch_prob", self.switch_prob), ("mandarin_start_prob", self.mandarin_start_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Expected fractions of (Mandarin-only, English-only, code-switched)
    /// utterances under the language Markov chain.
    pub fn expected_composition(&self) -> (f64, f64, f64) {
        let span = (self.max_tokens - self.min_tokens + 1) as f64;
        let stay: f64 =
            (self.min_tokens..=self.max_tokens).map(|l| (1.0 - self.switch_prob).powi(l as i32 - 1)).sum::<f64>()
                / span;
        let man = self.mandarin_start_prob * stay;
        let eng = (1.0 - self.mandarin_start_prob) * stay;
        (man, eng, 1.0 - stay)
    }
}

/// Units, pronunciations, topics and acoustic templates of one corpus.
#[derive(Debug, Clone)]
pub struct Inventory {
    pub table: PinyinTable,
    pub char_vocab: Vocabulary,
    pub pinyin_vocab: Vocabulary,
    /// Mandarin characters and English words available to each topic.
    pub topic_chars: Vec<Vec<String>>,
    pub topic_words: Vec<Vec<String>>,
    /// Template per pronunciation unit (Pinyin syllable or English word).
    pub templates: BTreeMap<String, Vec<f64>>,
}

impl Inventory {
    pub fn build(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, STREAM_INVENTORY);
        let mut syllables: Vec<String> =
            FINALS.iter().flat_map(|f| INITIALS.iter().map(move |i| format!("{i}{f}"))).collect();
        syllables.shuffle(&mut rng);
        syllables.truncate(cfg.num_pinyin);
        let mut chars: Vec<String> =
            (0..cfg.num_chars as u32).map(|i| char::from_u32(FIRST_CHAR + i).expect("CJK block").to_string()).collect();
        chars.shuffle(&mut rng);

        // Group g receives char g; the rest fill groups up to one member per topic, in turn.
        let cap = cfg.topics.max(2);
        let mut groups: Vec<Vec<String>> = chars[..cfg.num_pinyin].iter().map(|c| vec![c.clone()]).collect();
        let mut rest = chars[cfg.num_pinyin..].iter().cloned();
        for group in groups.iter_mut() {
            group.extend(rest.by_ref().take(cap - 1));
        }
        for (i, c) in rest.enumerate() {
            groups[i % cfg.num_pinyin].push(c);
        }
        let mut topic_chars = vec![Vec::new(); cfg.topics];
        let mut pairs = Vec::with_capacity(cfg.num_chars);
        for (g, members) in groups.iter().enumerate() {
            for (k, c) in members.iter().enumerate() {
                let topic = if members.len() == 1 { g % cfg.topics } else { k % cfg.topics };
                topic_chars[topic].push(c.clone());
                pairs.push((c.clone(), syllables[g].clone()));
            }
        }
        let table = PinyinTable::from_pairs(pairs)?;

        let words: Vec<String> = WORDS
            .iter()
            .filter(|w| !syllables.iter().any(|s| s == *w))
            .take(cfg.num_eng_words)
            .map(|w| w.to_string())
            .collect();
        if words.len() < cfg.num_eng_words {
            return Err(Error::Config("not enough English words".into()));
        }
        let mut topic_words = vec![Vec::new(); cfg.topics];
        for (i, w) in words.iter().enumerate() {
            topic_words[i % cfg.topics].push(w.clone());
        }
        for t in 0..cfg.topics {
            if topic_chars[t].is_empty() || topic_words[t].is_empty() {
                return Err(Error::Config(format!("topic {t} has no characters or no English words")));
            }
        }

        let mut lines: Vec<String> = chars.clone();
        lines.extend(words.iter().cloned());
        let (char_vocab, pinyin_vocab) = build_vocab(&lines, &table)?;

        let mut trng = stream(cfg.seed, STREAM_TEMPLATES);
        let templates = pinyin_vocab
            .tokens()
            .iter()
            .zip(pinyin_vocab.tags())
            .filter(|(_, t)| **t != LangTag::Special)
            .map(|(u, _)| (u.clone(), (0..cfg.feat_dim).map(|_| trng.sample::<f64, _>(StandardNormal)).collect()))
            .collect();
        Ok(Self { table, char_vocab, pinyin_vocab, topic_chars, topic_words, templates })
    }

    /// Pronunciation unit of a transcript token.
    pub fn unit<'a>(&'a self, token: &'a str) -> Result<&'a str> {
        let unit = match LangTag::classify(token) {
            LangTag::ManChar => self.table.get(token).ok_or_else(|| Error::UnknownToken(token.to_string()))?,
            _ => token,
        };
        if self.templates.contains_key(unit) {
            Ok(unit)
        } else {
            Err(Error::UnknownToken(token.to_string()))
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One generated utterance with its features held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub utt_id: String,
    pub text: String,
    pub topic: usize,
    pub feats: Array,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub inventory: Inventory,
    pub train: Vec<SynthUtterance>,
    pub val: Vec<SynthUtterance>,
    pub test: Vec<SynthUtterance>,
}

impl SynthCorpus {
    pub fn splits(&self) -> [(&'static str, &[SynthUtterance]); 3] {
        [(SPLITS[0], &self.train), (SPLITS[1], &self.val), (SPLITS[2], &self.test)]
    }
}

fn sample_tokens(cfg: &SynthConfig, inv: &Inventory, topic: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let len = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
    let mut mandarin = rng.random_bool(cfg.mandarin_start_prob);
    let mut out: Vec<String> = Vec::with_capacity(len);
    for i in 0..len {
        if i > 0 && rng.random_bool(cfg.switch_prob) {
            mandarin = !mandarin;
        }
        let pool = if mandarin { &inv.topic_chars[topic] } else { &inv.topic_words[topic] };
        let prev_unit = out.last().map(|p| inv.unit(p).expect("generated token"));
        // Adjacent tokens never share a pronunciation, so every boundary is audible.
        let candidates: Vec<&String> =
            pool.iter().filter(|t| Some(inv.unit(t).expect("inventory token")) != prev_unit).collect();
        let pick = if candidates.is_empty() { pool.choose(rng) } else { candidates.choose(rng).copied() };
        out.push(pick.expect("nonempty topic pool").clone());
    }
    out
}

/// Joins tokens: CJK characters adjacent to each other, spaces elsewhere.
pub fn join_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut prev_cjk = false;
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        let cjk = LangTag::classify(t) == LangTag::ManChar;
        if i > 0 && !(cjk && prev_cjk) {
            out.push(' ');
        }
        out.push_str(t);
        prev_cjk = cjk;
    }
    out
}

/// Generates the inventory and the three splits; fully determined by `cfg.seed`.
pub fn gen_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    let inventory = Inventory::build(cfg)?;
    let mut text_rng = stream(cfg.seed, STREAM_TEXT);
    let mut feat_rng = stream(cfg.seed, STREAM_FEATS);
    let mut seen = HashSet::new();
    let sizes = [cfg.train_utts, cfg.val_utts, cfg.test_utts];
    let mut splits: Vec<Vec<SynthUtterance>> = Vec::with_capacity(3);
    for (name, &n) in SPLITS.iter().zip(&sizes) {
        let mut utts = Vec::with_capacity(n);
        let mut split_texts = HashSet::new();
        let mut attempts = 0usize;
        while utts.len() < n {
            attempts += 1;
            if attempts > 100 * n + 1000 {
                return Err(Error::Config(format!(
                    "inventory too small for requested lengths: only {} distinct {name} transcripts found",
                    utts.len()
                )));
            }
            let topic = text_rng.random_range(0..cfg.topics);
            let tokens = sample_tokens(cfg, &inventory, topic, &mut text_rng);
            let text = join_tokens(&tokens);
            // Repeats within a split are allowed; transcripts never cross splits.
            if seen.contains(&text) {
                continue;
            }
            split_texts.insert(text.clone());
            let feats = synth_features(&tokens, &inventory, cfg, &mut feat_rng)?;
            utts.push(SynthUtterance { utt_id: format!("{name}-{:05}", utts.len()), text, topic, feats });
        }
        seen.extend(split_texts);
        splits.push(utts);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(SynthCorpus { inventory, train, val, test })
}

/// Template features: each token contributes `Uniform(min_frames..=max_frames)`
/// noisy copies of its pronunciation unit's template.
pub fn synth_features<S: AsRef<str>, R: Rng>(
    tokens: &[S],
    inv: &Inventory,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Array> {
    let mut data = Vec::new();
    let mut frames = 0;
    for t in tokens {
        let template = &inv.templates[inv.unit(t.as_ref())?];
        let dur = rng.random_range(cfg.min_frames..=cfg.max_frames);
        for _ in 0..dur {
            for &v in template {
                let z: f64 = rng.sample(StandardNormal);
                data.push(v + cfg.noise_std * z);
            }
        }
        frames += dur;
    }
    Array::new(&[frames, cfg.feat_dim], data)
}

/// Zeroes `num_time_masks` spans of `time_width` frames and `num_freq_masks`
/// bands of `freq_width` channels. Widths are clamped to the feature dims.
pub fn spec_augment<R: Rng>(
    features: &Array,
    num_time_masks: usize,
    time_width: usize,
    num_freq_masks: usize,
    freq_width: usize,
    rng: &mut R,
) -> Array {
    let mut out = features.clone();
    let (t, d) = (features.rows(), features.cols());
    if t == 0 || d == 0 {
        return out;
    }
    let (tw, fw) = (time_width.min(t), freq_width.min(d));
    let data = out.data_mut();
    for _ in 0..num_time_masks {
        let start = rng.random_range(0..=t - tw);
        data[start * d..(start + tw) * d].fill(0.0);
    }
    for _ in 0..num_freq_masks {
        let start = rng.random_range(0..=d - fw);
        for row in data.chunks_exact_mut(d) {
            row[start..start + fw].fill(0.0);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub utt_id: String,
    pub text: String,
    /// Relative paths resolve against the manifest's directory.
    pub feats_path: String,
    pub num_frames: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative feature paths are resolved against.
    pub base: PathBuf,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feats_path(&self, record: &ManifestRecord) -> PathBuf {
        self.base.join(&record.feats_path)
    }

    pub fn load_features(&self, record: &ManifestRecord) -> Result<Array> {
        let feats = read_features(&self.feats_path(record))?;
        if feats.rows() != record.num_frames {
            return Err(Error::Manifest {
                record: self.records.iter().position(|r| r.utt_id == record.utt_id).unwrap_or(0) + 1,
                msg: format!("{}: {} frames on disk, {} in manifest", record.utt_id, feats.rows(), record.num_frames),
            });
        }
        Ok(feats)
    }

    /// Loads every utterance's features in record order.
    pub fn load_all(&self) -> Result<Vec<(ManifestRecord, Array)>> {
        self.records.iter().map(|r| Ok((r.clone(), self.load_features(r)?))).collect()
    }

    /// Tokenized reference transcripts.
    pub fn references(&self) -> Vec<(String, Vec<String>)> {
        self.records.iter().map(|r| (r.utt_id.clone(), tokenize(&r.text))).collect()
    }
}

/// Reads a JSON-lines manifest. Record numbers in errors are 1-based line numbers.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let f = std::fs::File::open(path)?;
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = n + 1;
        let r: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| Error::Manifest { record, msg: e.to_string() })?;
        if !ids.insert(r.utt_id.clone()) {
            return Err(Error::Manifest { record, msg: format!("duplicate utt_id '{}'", r.utt_id) });
        }
        if !base.join(&r.feats_path).is_file() {
            return Err(Error::Manifest { record, msg: format!("feature file '{}' not found", r.feats_path) });
        }
        records.push(r);
    }
    Ok(Manifest { records, base })
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in &manifest.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_features(path: &Path, feats: &Array) -> Result<()> {
    write_container(path, serde_json::Value::Null, &[("feats", feats)])
}

pub fn read_features(path: &Path) -> Result<Array> {
    let (_, arrays) = read_container(path)?;
    arrays
        .into_iter()
        .find(|(n, _)| n == "feats")
        .map(|(_, a)| a)
        .filter(|a| a.shape().len() == 2)
        .ok_or_else(|| Error::Checkpoint(format!("{}: no 2-D 'feats' array", path.display())))
}

pub const CHAR_VOCAB_FILE: &str = "char_vocab.txt";
pub const PINYIN_VOCAB_FILE: &str = "pinyin_vocab.txt";
pub const PINYIN_TABLE_FILE: &str = "pinyin_table.txt";

/// Manifest path of a split inside a corpus directory.
pub fn split_manifest(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

/// Writes vocabularies, the Pinyin table, feature files and one manifest per split.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("feats"))?;
    corpus.inventory.char_vocab.save(&dir.join(CHAR_VOCAB_FILE))?;
    corpus.inventory.pinyin_vocab.save(&dir.join(PINYIN_VOCAB_FILE))?;
    corpus.inventory.table.save(&dir.join(PINYIN_TABLE_FILE))?;
    for (split, utts) in corpus.splits() {
        let mut records = Vec::with_capacity(utts.len());
        for u in utts {
            let rel = format!("feats/{}.bin", u.utt_id);
            write_features(&dir.join(&rel), &u.feats)?;
            records.push(ManifestRecord {
                utt_id: u.utt_id.clone(),
                text: u.text.clone(),
                feats_path: rel,
                num_frames: u.feats.rows(),
            });
        }
        write_manifest(&Manifest { records, base: dir.to_path_buf() }, &split_manifest(dir, split))?;
    }
    Ok(())
}

/// Fractions of (Mandarin-only, English-only, code-switched) transcripts.
pub fn composition<S: AsRef<str>>(texts: &[S]) -> (f64, f64, f64) {
    let (mut man, mut eng, mut cs) = (0usize, 0usize, 0usize);
    for t in texts {
        let toks = tokenize(t.as_ref());
        let n_man = toks.iter().filter(|t| LangTag::classify(t) == LangTag::ManChar).count();
        match n_man {
            0 => eng += 1,
            n if n == toks.len() => man += 1,
            _ => cs += 1,
        }
    }
    let n = texts.len().max(1) as f64;
    (man as f64 / n, eng as f64 / n, cs as f64 / n)
}
