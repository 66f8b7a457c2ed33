//! Token error rates with per-language attribution, Pinyin error rate and
//! paired significance tests.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{is_cjk, LangTag, PinyinTable, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Match,
    Sub,
    Del,
    Ins,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentOp<T> {
    pub kind: OpKind,
    pub ref_tok: Option<T>,
    pub hyp_tok: Option<T>,
}

fn distance_table<T: PartialEq>(r: &[T], h: &[T]) -> Vec<Vec<usize>> {
    let mut d = vec![vec![0; h.len() + 1]; r.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=h.len() {
        d[0][j] = j;
    }
    for i in 1..=r.len() {
        for j in 1..=h.len() {
            let diag = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = diag.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d
}

pub fn edit_distance<T: PartialEq>(r: &[T], h: &[T]) -> usize {
    distance_table(r, h)[r.len()][h.len()]
}

/// Alignment as `(kind, ref index, hyp index)`, in sequence order.
fn align_indices<T: PartialEq>(r: &[T], h: &[T]) -> Vec<(OpKind, Option<usize>, Option<usize>)> {
    let d = distance_table(r, h);
    let (mut i, mut j) = (r.len(), h.len());
    let mut ops = Vec::with_capacity(i.max(j));
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && r[i - 1] == h[j - 1] && d[i][j] == d[i - 1][j - 1] {
            ops.push((OpKind::Match, Some(i - 1), Some(j - 1)));
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + 1 {
            ops.push((OpKind::Sub, Some(i - 1), Some(j - 1)));
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            ops.push((OpKind::Del, Some(i - 1), None));
            i -= 1;
        } else {
            ops.push((OpKind::Ins, None, Some(j - 1)));
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Minimal unit-cost alignment. Ties in the backtrace prefer
/// match, then substitution, then deletion, then insertion.
pub fn align<T: PartialEq + Clone>(r: &[T], h: &[T]) -> Vec<AlignmentOp<T>> {
    align_indices(r, h)
        .into_iter()
        .map(|(kind, ri, hi)| AlignmentOp {
            kind,
            ref_tok: ri.map(|i| r[i].clone()),
            hyp_tok: hi.map(|j| h[j].clone()),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub utt_id: String,
    pub tokens: Vec<String>,
}

impl Utterance {
    pub fn new(utt_id: impl Into<String>, tokens: Vec<String>) -> Self {
        Self { utt_id: utt_id.into(), tokens }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lang {
    Man,
    Eng,
    Other,
}

impl Lang {
    fn of(token: &str, vocab: &Vocabulary) -> Self {
        let tag = match vocab.id(token) {
            Some(id) => vocab.tag(id),
            None if token.chars().count() == 1 && token.chars().all(is_cjk) => LangTag::ManChar,
            None => LangTag::Eng,
        };
        match tag {
            LangTag::ManChar | LangTag::Pinyin => Lang::Man,
            LangTag::Eng => Lang::Eng,
            LangTag::Special => Lang::Other,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
    pub ref_tokens: usize,
}

impl Counts {
    pub fn errors(&self) -> usize {
        self.sub + self.del + self.ins
    }

    fn add(&mut self, o: &Counts) {
        self.sub += o.sub;
        self.del += o.del;
        self.ins += o.ins;
        self.ref_tokens += o.ref_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UttScore {
    pub utt_id: String,
    pub ref_tokens: usize,
    pub errors: usize,
    pub correct: bool,
}

impl UttScore {
    /// Errors per reference token (raw error count for an empty reference).
    pub fn normalized_error(&self) -> f64 {
        self.errors as f64 / self.ref_tokens.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub against: String,
    pub ter_delta: f64,
    pub mcnemar_p: f64,
    pub ttest_p: f64,
}

/// Corpus-level error breakdown. Every rate is a percentage of the total
/// number of reference tokens, so the per-language rates add up to `ter`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub overall: Counts,
    pub by_lang: BTreeMap<Lang, Counts>,
    pub ter: f64,
    pub man_ter: f64,
    pub eng_ter: f64,
    /// Mandarin errors after mapping characters to Pinyin.
    pub per: Option<f64>,
    pub sub_rate: f64,
    pub del_rate: f64,
    pub man_del_rate: f64,
    pub eng_del_rate: f64,
    pub ins_rate: f64,
    pub utterances: Vec<UttScore>,
    pub rtf: Option<f64>,
    pub significance: Vec<Significance>,
}

fn pct(n: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * n as f64 / total as f64
    }
}

/// Counts per language for one utterance; `lang` classifies ref/hyp tokens by index.
fn attribute(
    r: &[String],
    h: &[String],
    ref_lang: &dyn Fn(usize) -> Lang,
    hyp_lang: &dyn Fn(usize) -> Lang,
) -> BTreeMap<Lang, Counts> {
    let mut out: BTreeMap<Lang, Counts> = BTreeMap::new();
    for i in 0..r.len() {
        out.entry(ref_lang(i)).or_default().ref_tokens += 1;
    }
    for (kind, ri, hi) in align_indices(r, h) {
        match kind {
            OpKind::Match => {}
            OpKind::Sub => out.entry(ref_lang(ri.expect("sub has ref"))).or_default().sub += 1,
            OpKind::Del => out.entry(ref_lang(ri.expect("del has ref"))).or_default().del += 1,
            OpKind::Ins => out.entry(hyp_lang(hi.expect("ins has hyp"))).or_default().ins += 1,
        }
    }
    out
}

fn pair_up<'a>(refs: &'a [Utterance], hyps: &'a [Utterance]) -> Vec<(&'a Utterance, &'a [String])> {
    let by_id: HashMap<&str, &Utterance> = hyps.iter().map(|u| (u.utt_id.as_str(), u)).collect();
    let mut missing = 0;
    let pairs = refs
        .iter()
        .map(|r| match by_id.get(r.utt_id.as_str()) {
            Some(h) => (r, h.tokens.as_slice()),
            None => {
                missing += 1;
                (r, &[][..])
            }
        })
        .collect();
    if missing > 0 {
        log::warn!("{missing} reference utterance(s) have no hypothesis; scored as deletions");
    }
    if hyps.len() + missing > refs.len() {
        log::warn!("{} hypothesis utterance(s) have no reference and are ignored", hyps.len() + missing - refs.len());
    }
    pairs
}

/// Scores `hyps` against `refs` (matched by `utt_id`), attributing
/// substitutions and deletions to the reference token's language and
/// insertions to the hypothesis token's.
pub fn score_corpus(refs: &[Utterance], hyps: &[Utterance], vocab: &Vocabulary) -> ErrorReport {
    let mut by_lang: BTreeMap<Lang, Counts> = BTreeMap::new();
    let mut utterances = Vec::with_capacity(refs.len());
    for (r, h) in pair_up(refs, hyps) {
        let counts = attribute(&r.tokens, h, &|i| Lang::of(&r.tokens[i], vocab), &|j| Lang::of(&h[j], vocab));
        let errors: usize = counts.values().map(Counts::errors).sum();
        for (l, c) in counts {
            by_lang.entry(l).or_default().add(&c);
        }
        utterances.push(UttScore {
            utt_id: r.utt_id.clone(),
            ref_tokens: r.tokens.len(),
            errors,
            correct: errors == 0,
        });
    }
    let mut overall = Counts::default();
    by_lang.values().for_each(|c| overall.add(c));
    let n = overall.ref_tokens;
    let get = |l: Lang| by_lang.get(&l).copied().unwrap_or_default();
    ErrorReport {
        overall,
        ter: pct(overall.errors(), n),
        man_ter: pct(get(Lang::Man).errors(), n),
        eng_ter: pct(get(Lang::Eng).errors(), n),
        per: None,
        sub_rate: pct(overall.sub, n),
        del_rate: pct(overall.del, n),
        man_del_rate: pct(get(Lang::Man).del, n),
        eng_del_rate: pct(get(Lang::Eng).del, n),
        ins_rate: pct(overall.ins, n),
        by_lang,
        utterances,
        rtf: None,
        significance: Vec::new(),
    }
}

fn pinyin_side(tokens: &[String], table: &PinyinTable, vocab: &Vocabulary) -> Result<(Vec<String>, Vec<Lang>)> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut langs = Vec::with_capacity(tokens.len());
    for t in tokens {
        let lang = Lang::of(t, vocab);
        let is_char = t.chars().count() == 1 && t.chars().all(is_cjk);
        if is_char {
            let p = table.get(t).ok_or_else(|| Error::MissingPinyin(t.clone()))?;
            out.push(p.to_string());
        } else {
            out.push(t.clone());
        }
        langs.push(lang);
    }
    Ok((out, langs))
}

/// Pinyin error rate: Mandarin errors of the character-level alignment
/// after both sides are mapped to Pinyin, so a substitution between
/// homophones no longer counts. Percentage of all reference tokens.
pub fn per_score(refs: &[Utterance], hyps: &[Utterance], table: &PinyinTable, vocab: &Vocabulary) -> Result<f64> {
    let mut man_errors = 0;
    let mut total = 0;
    for (r, h) in pair_up(refs, hyps) {
        let (rp, rl) = pinyin_side(&r.tokens, table, vocab)?;
        let (hp, hl) = pinyin_side(h, table, vocab)?;
        for (kind, ri, hi) in align_indices(&r.tokens, h) {
            let man = match (kind, ri, hi) {
                (OpKind::Match, ..) => false,
                (OpKind::Sub, Some(i), Some(j)) => rl[i] == Lang::Man && rp[i] != hp[j],
                (OpKind::Del, Some(i), _) => rl[i] == Lang::Man,
                (OpKind::Ins, _, Some(j)) => hl[j] == Lang::Man,
                _ => unreachable!("alignment op without its tokens"),
            };
            man_errors += usize::from(man);
        }
        total += rp.len();
    }
    Ok(pct(man_errors, total))
}

/// [`score_corpus`] plus the Pinyin error rate.
pub fn score_with_per(
    refs: &[Utterance],
    hyps: &[Utterance],
    vocab: &Vocabulary,
    table: &PinyinTable,
) -> Result<ErrorReport> {
    let mut report = score_corpus(refs, hyps, vocab);
    report.per = Some(per_score(refs, hyps, table, vocab)?);
    Ok(report)
}

/// Two-sided exact McNemar test on paired per-utterance correctness.
pub fn mcnemar(flags_a: &[bool], flags_b: &[bool]) -> Result<f64> {
    if flags_a.len() != flags_b.len() {
        return Err(Error::Invalid(format!("unpaired samples: {} vs {}", flags_a.len(), flags_b.len())));
    }
    let b = flags_a.iter().zip(flags_b).filter(|(a, b)| **a && !**b).count();
    let c = flags_a.iter().zip(flags_b).filter(|(a, b)| !**a && **b).count();
    if b + c == 0 {
        log::warn!("McNemar: no discordant pairs; p = 1");
        return Ok(1.0);
    }
    Ok(mcnemar_exact(b, c))
}

/// `min(1, 2 P(X <= min(b, c)))` for `X ~ Binomial(b + c, 1/2)`.
pub fn mcnemar_exact(b: usize, c: usize) -> f64 {
    let n = b + c;
    let k = b.min(c);
    let ln_half_n = n as f64 * 0.5f64.ln();
    let tail: f64 =
        (0..=k).map(|i| (statrs::function::factorial::ln_binomial(n as u64, i as u64) + ln_half_n).exp()).sum();
    (2.0 * tail).min(1.0)
}

/// Two-sided paired t-test p-value.
pub fn paired_ttest(errs_a: &[f64], errs_b: &[f64]) -> Result<f64> {
    if errs_a.len() != errs_b.len() {
        return Err(Error::Invalid(format!("unpaired samples: {} vs {}", errs_a.len(), errs_b.len())));
    }
    let n = errs_a.len();
    if n < 2 {
        return Err(Error::Invalid("t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = errs_a.iter().zip(errs_b).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        if mean == 0.0 {
            return Ok(1.0);
        }
        log::warn!("t-test: constant nonzero difference; p = 0");
        return Ok(0.0);
    }
    let t = mean / (var / n as f64).sqrt();
    Ok(student_t_two_sided(t, (n - 1) as f64))
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    statrs::function::beta::beta_reg(df / 2.0, 0.5, x)
}

/// Paired comparison of system `a` against `b` on the same references.
pub fn compare(a: &ErrorReport, b: &ErrorReport, b_name: &str) -> Result<Significance> {
    let ids_a: Vec<&str> = a.utterances.iter().map(|u| u.utt_id.as_str()).collect();
    let ids_b: Vec<&str> = b.utterances.iter().map(|u| u.utt_id.as_str()).collect();
    if ids_a != ids_b {
        return Err(Error::Incompatible("reports cover different utterances".into()));
    }
    let flags = |r: &ErrorReport| r.utterances.iter().map(|u| u.correct).collect::<Vec<_>>();
    let errs = |r: &ErrorReport| r.utterances.iter().map(UttScore::normalized_error).collect::<Vec<_>>();
    Ok(Significance {
        against: b_name.to_string(),
        ter_delta: a.ter - b.ter,
        mcnemar_p: mcnemar(&flags(a), &flags(b))?,
        ttest_p: if a.utterances.len() >= 2 { paired_ttest(&errs(a), &errs(b))? } else { 1.0 },
    })
}

/// Fixed-width table laid out as TER (all / Man / Pinyin / Eng), Sub,
/// Del (all / Man / Eng) and Ins columns.
pub fn format_table(rows: &[(&str, &ErrorReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max(6);
    let mut s = String::new();
    let _ = writeln!(s, "{:width$} | {:^27} | {:^5} | {:^19} | {:^5}", "", "TER", "Sub", "Del", "Ins");
    let _ = writeln!(
        s,
        "{:width$} | {:>5} {:>5} {:>7} {:>5} | {:>5} | {:>5} {:>5} {:>5}   | {:>5}",
        "Method", "All", "Man", "Pinyin", "Eng", "All", "All", "Man", "Eng", "All"
    );
    let _ = writeln!(s, "{}", "-".repeat(width + 72));
    for (name, r) in rows {
        let per = r.per.map_or("-".to_string(), |p| format!("{p:.1}"));
        let _ = writeln!(
            s,
            "{:width$} | {:>5.1} {:>5.1} {:>7} {:>5.1} | {:>5.1} | {:>5.1} {:>5.1} {:>5.1}   | {:>5.1}",
            name, r.ter, r.man_ter, per, r.eng_ter, r.sub_rate, r.del_rate, r.man_del_rate, r.eng_del_rate, r.ins_rate
        );
    }
    for (name, r) in rows {
        for sig in &r.significance {
            let _ = writeln!(
                s,
                "{name} vs {}: dTER {:+.2}, t-test p={:.4}, McNemar p={:.4}",
                sig.against, sig.ter_delta, sig.ttest_p, sig.mcnemar_p
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::build_vocab;
    use num_bigint::BigUint;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn brute(r: &[u8], h: &[u8]) -> usize {
        match (r.split_first(), h.split_first()) {
            (None, _) => h.len(),
            (_, None) => r.len(),
            (Some((a, rr)), Some((b, hr))) => {
                let diag = brute(rr, hr) + usize::from(a != b);
                diag.min(brute(rr, h) + 1).min(brute(r, hr) + 1)
            }
        }
    }

    #[test]
    fn align_examples() {
        let ops = align(&toks("我 很 happy"), &toks("我 happy"));
        let kinds: Vec<OpKind> = ops.iter().map(|o| o.kind).collect();
        assert_eq!(kinds, vec![OpKind::Match, OpKind::Del, OpKind::Match]);
        assert_eq!(ops[1].ref_tok.as_deref(), Some("很"));
        assert!(align(&toks("a b c"), &toks("a b c")).iter().all(|o| o.kind == OpKind::Match));
        assert!(align::<String>(&[], &[]).is_empty());
    }

    #[test]
    fn align_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let r: Vec<u8> = (0..rng.random_range(0..=6)).map(|_| rng.random_range(0..3)).collect();
            let h: Vec<u8> = (0..rng.random_range(0..=6)).map(|_| rng.random_range(0..3)).collect();
            let ops = align(&r, &h);
            let cost = ops.iter().filter(|o| o.kind != OpKind::Match).count();
            assert_eq!(cost, brute(&r, &h));
            let rr: Vec<u8> = ops.iter().filter_map(|o| o.ref_tok).collect();
            let hh: Vec<u8> = ops.iter().filter_map(|o| o.hyp_tok).collect();
            assert_eq!((rr, hh), (r, h));
        }
    }

    proptest! {
        #[test]
        fn edit_distance_is_a_metric(
            a in proptest::collection::vec(0u8..3, 0..=6),
            b in proptest::collection::vec(0u8..3, 0..=6),
            c in proptest::collection::vec(0u8..3, 0..=6),
        ) {
            prop_assert_eq!(edit_distance(&a, &a), 0);
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            prop_assert_eq!(edit_distance(&a, &b) == 0, a == b);
        }
    }

    fn fixture() -> (Vocabulary, PinyinTable) {
        let table = PinyinTable::from_pairs([("我", "wo"), ("很", "hen"), ("狠", "hen"), ("好", "hao")]).unwrap();
        let (cv, _) = build_vocab(&["我 很 狠 好 happy day"], &table).unwrap();
        (cv, table)
    }

    #[test]
    fn attribution_by_language() {
        let (cv, _) = fixture();
        let refs = vec![Utterance::new("u1", toks("我 很 happy")), Utterance::new("u2", toks("好 day"))];
        let hyps = vec![Utterance::new("u1", toks("我 happy day")), Utterance::new("u2", toks("狠 day"))];
        let r = score_corpus(&refs, &hyps, &cv);
        // u1 ties between del+ins and two substitutions; the backtrace prefers substitution.
        assert_eq!(r.overall, Counts { sub: 3, del: 0, ins: 0, ref_tokens: 5 });
        assert_eq!(r.by_lang[&Lang::Man], Counts { sub: 2, del: 0, ins: 0, ref_tokens: 3 });
        assert_eq!(r.by_lang[&Lang::Eng], Counts { sub: 1, del: 0, ins: 0, ref_tokens: 2 });
        assert!((r.ter - 60.0).abs() < 1e-12);
        assert!((r.man_ter + r.eng_ter - r.ter).abs() < 1e-12);
        assert!((r.sub_rate + r.del_rate + r.ins_rate - r.ter).abs() < 1e-12);
        assert_eq!(r.utterances.iter().map(|u| u.correct).collect::<Vec<_>>(), vec![false, false]);
        let hyps = vec![Utterance::new("u1", toks("我 happy")), Utterance::new("u2", toks("好 day happy"))];
        let r = score_corpus(&refs, &hyps, &cv);
        assert_eq!(r.by_lang[&Lang::Man], Counts { sub: 0, del: 1, ins: 0, ref_tokens: 3 });
        assert_eq!(r.by_lang[&Lang::Eng], Counts { sub: 0, del: 0, ins: 1, ref_tokens: 2 });
    }

    #[test]
    fn decomposition_example_values() {
        // Sub 12.5 + Del 5.1 + Ins 1.8 over 1000 reference tokens.
        let c = Counts { sub: 125, del: 51, ins: 18, ref_tokens: 1000 };
        assert_eq!(c.errors(), 194);
        assert!((pct(c.sub, 1000) + pct(c.del, 1000) + pct(c.ins, 1000) - 19.4).abs() < 1e-9);
    }

    #[test]
    fn empty_hypotheses_are_all_deletions() {
        let (cv, _) = fixture();
        let refs = vec![Utterance::new("a", toks("我 很")), Utterance::new("b", toks("day"))];
        let r = score_corpus(&refs, &[], &cv);
        assert_eq!(r.ter, 100.0);
        assert_eq!(r.del_rate, 100.0);
        assert_eq!(score_corpus(&refs, &refs, &cv).ter, 0.0);
    }

    #[test]
    fn per_homophone_and_english() {
        let (cv, table) = fixture();
        let refs = vec![Utterance::new("a", toks("我 很 happy"))];
        let hyps = vec![Utterance::new("a", toks("我 狠 happy"))];
        let r = score_with_per(&refs, &hyps, &cv, &table).unwrap();
        assert!(r.man_ter > 0.0);
        assert_eq!(r.per, Some(0.0));
        let refs = vec![Utterance::new("a", toks("happy day"))];
        let hyps = vec![Utterance::new("a", toks("day"))];
        let r = score_with_per(&refs, &hyps, &cv, &table).unwrap();
        assert_eq!(per_score(&refs, &hyps, &table, &cv).unwrap(), r.man_ter);
        let bad = vec![Utterance::new("a", toks("我 猫"))];
        assert!(matches!(per_score(&bad, &refs, &table, &cv), Err(Error::MissingPinyin(_))));
    }

    fn random_corpus(rng: &mut ChaCha8Rng, pool: &[&str], n: usize) -> Vec<Utterance> {
        (0..n)
            .map(|i| {
                let len = rng.random_range(0..=7);
                Utterance::new(
                    format!("u{i}"),
                    (0..len).map(|_| pool[rng.random_range(0..pool.len())].to_string()).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn per_never_exceeds_mandarin_ter() {
        let (cv, table) = fixture();
        let pool = ["我", "很", "狠", "好", "happy", "day"];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..3000 {
            let refs = random_corpus(&mut rng, &pool, 3);
            let hyps = random_corpus(&mut rng, &pool, 3);
            let r = score_with_per(&refs, &hyps, &cv, &table).unwrap();
            assert!(r.per.unwrap() <= r.man_ter + 1e-12, "{refs:?} {hyps:?}: {} > {}", r.per.unwrap(), r.man_ter);
            let sum: usize = r.by_lang.values().map(Counts::errors).sum();
            assert_eq!(sum, r.overall.errors());
        }
    }

    fn binom_oracle(b: u64, c: u64) -> f64 {
        let n = b + c;
        let k = b.min(c);
        let mut num = BigUint::from(0u32);
        let mut coef = BigUint::from(1u32);
        for i in 0..=k {
            if i > 0 {
                coef = coef * BigUint::from(n - i + 1) / BigUint::from(i);
            }
            num += &coef;
        }
        let den = BigUint::from(1u32) << n;
        // Ratio of big integers through a scaled division.
        let scaled: BigUint = (num * BigUint::from(2u32) << 64) / den;
        let v: f64 = scaled.to_string().parse::<f64>().unwrap() / 2f64.powi(64);
        v.min(1.0)
    }

    #[test]
    fn mcnemar_cases() {
        assert_eq!(mcnemar_exact(1, 1), 1.0);
        assert_eq!(mcnemar(&[true, false], &[true, false]).unwrap(), 1.0);
        assert!((mcnemar_exact(10, 2) - 158.0 / 4096.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (b, c) = (rng.random_range(0..120u64), rng.random_range(0..120u64));
            if b + c == 0 {
                continue;
            }
            assert!((mcnemar_exact(b as usize, c as usize) - binom_oracle(b, c)).abs() < 1e-6);
        }
        assert!(mcnemar(&[true], &[true, false]).is_err());
    }

    /// Two-sided t tail by adaptive Simpson integration of the density.
    fn t_tail_oracle(t: f64, df: f64) -> f64 {
        let ln_c = statrs_free_ln_gamma((df + 1.0) / 2.0)
            - statrs_free_ln_gamma(df / 2.0)
            - 0.5 * (df * std::f64::consts::PI).ln();
        let f = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
        fn simpson(
            f: &dyn Fn(f64) -> f64,
            a: f64,
            b: f64,
            fa: f64,
            fm: f64,
            fb: f64,
            whole: f64,
            eps: f64,
            depth: u32,
        ) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * eps {
                return left + right + (left + right - whole) / 15.0;
            }
            simpson(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1)
                + simpson(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
        }
        let (a, b) = (0.0, t.abs());
        let m = 0.5 * (a + b);
        let (fa, fm, fb) = (f(a), f(m), f(b));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        1.0 - 2.0 * simpson(&f, a, b, fa, fm, fb, whole, 1e-13, 50)
    }

    /// Lanczos log-gamma, independent of the library under test.
    fn statrs_free_ln_gamma(x: f64) -> f64 {
        const G: [f64; 9] = [
            0.999_999_999_999_809_9,
            676.520_368_121_885_1,
            -1_259.139_216_722_402_8,
            771.323_428_777_653_1,
            -176.615_029_162_140_6,
            12.507_343_278_686_905,
            -0.138_571_095_265_720_12,
            9.984_369_578_019_572e-6,
            1.505_632_735_149_311_6e-7,
        ];
        let x = x - 1.0;
        let mut a = G[0];
        let t = x + 7.5;
        for (i, g) in G.iter().enumerate().skip(1) {
            a += g / (x + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }

    #[test]
    fn ttest_cases() {
        let a = [0.1, 0.2, 0.3, 0.5];
        assert_eq!(paired_ttest(&a, &a).unwrap(), 1.0);
        let b: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let c: Vec<f64> = b.iter().map(|x| x + 0.2).collect();
        assert!(paired_ttest(&b, &c).unwrap() < 1e-12);
        assert!(paired_ttest(&[1.0], &[2.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        for _ in 0..100 {
            let n = rng.random_range(3..40);
            let xa: Vec<f64> = (0..n).map(|_| rng.sample(normal)).collect();
            let xb: Vec<f64> = xa.iter().map(|x| x + 0.3 * rng.sample(normal) + 0.1).collect();
            let p = paired_ttest(&xa, &xb).unwrap();
            let d: Vec<f64> = xa.iter().zip(&xb).map(|(a, b)| a - b).collect();
            let mean = d.iter().sum::<f64>() / n as f64;
            let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            let t = mean / (sd / (n as f64).sqrt());
            let oracle = t_tail_oracle(t, (n - 1) as f64);
            assert!((p - oracle).abs() < 1e-6, "n={n} t={t}: {p} vs {oracle}");
        }
    }

    #[test]
    fn table_layout() {
        let (cv, table) = fixture();
        let refs = vec![Utterance::new("a", toks("我 很 happy"))];
        let mut r = score_with_per(&refs, &refs, &cv, &table).unwrap();
        r.significance.push(compare(&r, &r, "self").unwrap());
        let s = format_table(&[("mask_ctc", &r)]);
        assert!(s.contains("Pinyin") && s.contains("mask_ctc") && s.contains("p=1.0000"));
        let json = serde_json::to_string(&r).unwrap();
        let back: ErrorReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
