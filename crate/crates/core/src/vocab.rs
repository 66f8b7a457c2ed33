//! Token inventories for mixed Mandarin/English transcripts.
//!
//! Mandarin is tokenized per character, English per whitespace-delimited
//! word. Two vocabularies are built from the same corpus: one over
//! characters and one where each character is replaced by its Pinyin
//! syllable, so homophones collapse onto a single entry.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLANK: &str = "<blank>";
pub const UNK: &str = "<unk>";
pub const NOISE: &str = "<noise>";
pub const MASK: &str = "<mask>";

const SPECIALS: [&str; 4] = [BLANK, UNK, NOISE, MASK];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LangTag {
    ManChar,
    Pinyin,
    Eng,
    Special,
}

impl LangTag {
    pub fn as_str(self) -> &'static str {
        match self {
            LangTag::ManChar => "MAN_CHAR",
            LangTag::Pinyin => "PINYIN",
            LangTag::Eng => "ENG",
            LangTag::Special => "SPECIAL",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "MAN_CHAR" => LangTag::ManChar,
            "PINYIN" => LangTag::Pinyin,
            "ENG" => LangTag::Eng,
            "SPECIAL" => LangTag::Special,
            _ => return None,
        })
    }

    /// Tag inferred from the token text alone (Pinyin cannot be told apart
    /// from English this way and comes back as `Eng`).
    pub fn classify(token: &str) -> Self {
        if SPECIALS.contains(&token) {
            return LangTag::Special;
        }
        let mut chars = token.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if is_cjk(c) => LangTag::ManChar,
            _ => LangTag::Eng,
        }
    }
}

impl fmt::Display for LangTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// CJK unified ideographs (base block, extensions A-F) and compatibility ideographs.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0x20000..=0x2EBEF | 0xF900..=0xFAFF | 0x2F800..=0x2FA1F)
}

/// `[a-z]+[0-9]?`
pub fn is_pinyin_syllable(s: &str) -> bool {
    let b = s.as_bytes();
    let letters = match b.last() {
        Some(c) if c.is_ascii_digit() => &b[..b.len() - 1],
        _ => b,
    };
    !letters.is_empty() && letters.iter().all(|c| c.is_ascii_lowercase())
}

/// Splits a transcript into tokens: one per CJK character, one per
/// whitespace-delimited run of anything else.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_whitespace() || is_cjk(c) {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if is_cjk(c) {
                out.push(c.to_string());
            }
        } else {
            word.push(c);
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Dense token inventory. Ids 0..4 are always `<blank>`, `<unk>`, `<noise>`, `<mask>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    tags: Vec<LangTag>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from `(token, tag)` pairs, which must start with
    /// the four specials in canonical order.
    pub fn from_entries(entries: Vec<(String, LangTag)>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            match entries.get(i) {
                Some((t, LangTag::Special)) if t == s => {}
                _ => return Err(Error::Invalid(format!("vocabulary id {i} must be special {s}"))),
            }
        }
        let mut index = HashMap::with_capacity(entries.len());
        let mut tokens = Vec::with_capacity(entries.len());
        let mut tags = Vec::with_capacity(entries.len());
        for (i, (tok, tag)) in entries.into_iter().enumerate() {
            match tag {
                LangTag::ManChar if tok.chars().count() != 1 => {
                    return Err(Error::Invalid(format!("MAN_CHAR token '{tok}' is not one character")))
                }
                LangTag::Pinyin if !is_pinyin_syllable(&tok) => {
                    return Err(Error::Invalid(format!("'{tok}' is not a pinyin syllable")))
                }
                LangTag::Special if i >= SPECIALS.len() => {
                    return Err(Error::Invalid(format!("unexpected special token '{tok}'")))
                }
                _ => {}
            }
            if tok.is_empty() || index.insert(tok.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate or empty token '{tok}'")));
            }
            tokens.push(tok);
            tags.push(tag);
        }
        Ok(Self { tokens, tags, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn blank(&self) -> usize {
        0
    }

    pub fn unk(&self) -> usize {
        1
    }

    pub fn noise(&self) -> usize {
        2
    }

    pub fn mask(&self) -> usize {
        3
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tag(&self, id: usize) -> LangTag {
        self.tags[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tags(&self) -> &[LangTag] {
        &self.tags
    }

    /// Tag for a token string, falling back to [`LangTag::classify`] for
    /// out-of-vocabulary tokens.
    pub fn tag_of(&self, token: &str) -> LangTag {
        self.id(token).map_or_else(|| LangTag::classify(token), |i| self.tags[i])
    }

    /// Maps tokens to ids; unknown tokens become `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(self.unk())).collect()
    }

    pub fn decode_tokens(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    /// Space-joined token text.
    pub fn decode(&self, ids: &[usize]) -> String {
        self.decode_tokens(ids).join(" ")
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (t, g) in self.tokens.iter().zip(&self.tags) {
            writeln!(w, "{t}\t{g}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            let parse_err = |msg: &str| Error::Parse { path: path.display().to_string(), line: n + 1, msg: msg.into() };
            let (tok, tag) = line.split_once('\t').ok_or_else(|| parse_err("expected token<TAB>tag"))?;
            let tag = LangTag::parse(tag).ok_or_else(|| parse_err("unknown language tag"))?;
            entries.push((tok.to_string(), tag));
        }
        Self::from_entries(entries)
    }
}

/// Character to Pinyin mapping; the first reading listed for a character wins.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PinyinTable {
    map: BTreeMap<String, String>,
}

impl PinyinTable {
    pub fn from_pairs<I, A, B>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        let mut map = BTreeMap::new();
        for (c, p) in pairs {
            let (c, p) = (c.into(), p.into());
            if c.chars().count() != 1 || !is_pinyin_syllable(&p) {
                return Err(Error::Invalid(format!("bad pinyin pair '{c}' -> '{p}'")));
            }
            map.entry(c).or_insert(p);
        }
        Ok(Self { map })
    }

    pub fn get(&self, ch: &str) -> Option<&str> {
        self.map.get(ch).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    /// Characters grouped by shared Pinyin.
    pub fn homophone_groups(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (c, p) in self.iter() {
            out.entry(p).or_default().push(c);
        }
        out
    }

    /// Maps a token sequence to Pinyin level; non-Mandarin tokens pass through.
    pub fn map_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<String>> {
        tokens
            .iter()
            .map(|t| {
                let t = t.as_ref();
                if LangTag::classify(t) == LangTag::ManChar {
                    self.get(t).map(str::to_string).ok_or_else(|| Error::MissingPinyin(t.to_string()))
                } else {
                    Ok(t.to_string())
                }
            })
            .collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (c, p) in &self.map {
            writeln!(w, "{c}\t{p}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut map = BTreeMap::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: &str| Error::Parse { path: path.display().to_string(), line: n + 1, msg: msg.into() };
            let (c, p) = line.split_once('\t').ok_or_else(|| parse_err("expected CHAR<TAB>pinyin"))?;
            if c.chars().count() != 1 || !is_pinyin_syllable(p) {
                return Err(parse_err("malformed pair"));
            }
            map.entry(c.to_string()).or_insert_with(|| p.to_string());
        }
        Ok(Self { map })
    }
}

fn specials() -> Vec<(String, LangTag)> {
    SPECIALS.iter().map(|s| (s.to_string(), LangTag::Special)).collect()
}

/// Builds the character and Pinyin vocabularies from transcripts.
///
/// Tokens are ordered specials first, then Mandarin units sorted, then
/// English words sorted, so the result only depends on the token sets.
pub fn build_vocab<S: AsRef<str>>(corpus_lines: &[S], table: &PinyinTable) -> Result<(Vocabulary, Vocabulary)> {
    let mut chars = BTreeSet::new();
    let mut words = BTreeSet::new();
    for line in corpus_lines {
        for tok in tokenize(line.as_ref()) {
            match LangTag::classify(&tok) {
                LangTag::ManChar => {
                    chars.insert(tok);
                }
                LangTag::Eng => {
                    words.insert(tok);
                }
                _ => {}
            }
        }
    }
    let mut syllables = BTreeSet::new();
    for c in &chars {
        let p = table.get(c).ok_or_else(|| Error::MissingPinyin(c.clone()))?;
        if words.contains(p) {
            return Err(Error::PinyinCollision(p.to_string()));
        }
        syllables.insert(p.to_string());
    }
    let mut char_entries = specials();
    char_entries.extend(chars.into_iter().map(|c| (c, LangTag::ManChar)));
    char_entries.extend(words.iter().cloned().map(|w| (w, LangTag::Eng)));
    let mut pinyin_entries = specials();
    pinyin_entries.extend(syllables.into_iter().map(|p| (p, LangTag::Pinyin)));
    pinyin_entries.extend(words.into_iter().map(|w| (w, LangTag::Eng)));
    Ok((Vocabulary::from_entries(char_entries)?, Vocabulary::from_entries(pinyin_entries)?))
}

/// Precomputed character-id to Pinyin-id lookup.
#[derive(Debug, Clone)]
pub struct PinyinMapper {
    map: Vec<Option<usize>>,
}

impl PinyinMapper {
    pub fn new(char_vocab: &Vocabulary, pinyin_vocab: &Vocabulary, table: &PinyinTable) -> Self {
        let map = char_vocab
            .tokens()
            .iter()
            .zip(char_vocab.tags())
            .map(|(tok, tag)| match tag {
                LangTag::ManChar => table.get(tok).and_then(|p| pinyin_vocab.id(p)),
                _ => pinyin_vocab.id(tok),
            })
            .collect();
        Self { map }
    }

    pub fn map_id(&self, id: usize) -> Option<usize> {
        self.map.get(id).copied().flatten()
    }

    pub fn map(&self, ids: &[usize], char_vocab: &Vocabulary) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&i| {
                if i >= self.map.len() {
                    return Err(Error::IdOutOfRange { id: i, size: self.map.len() });
                }
                self.map[i].ok_or_else(|| match char_vocab.tag(i) {
                    LangTag::ManChar => Error::MissingPinyin(char_vocab.token(i).to_string()),
                    _ => Error::UnknownToken(char_vocab.token(i).to_string()),
                })
            })
            .collect()
    }
}

/// Maps a character-vocabulary id sequence onto the Pinyin vocabulary.
pub fn to_pinyin(
    char_ids: &[usize],
    char_vocab: &Vocabulary,
    pinyin_vocab: &Vocabulary,
    table: &PinyinTable,
) -> Result<Vec<usize>> {
    PinyinMapper::new(char_vocab, pinyin_vocab, table).map(char_ids, char_vocab)
}
