use std::path::{Path, PathBuf};

use maskctc_core::config::RunConfig;
use maskctc_core::data::{
    composition, gen_corpus, read_manifest, split_manifest, write_corpus, Manifest, CHAR_VOCAB_FILE, PINYIN_TABLE_FILE,
    PINYIN_VOCAB_FILE,
};
use maskctc_core::decode::{decode_pipeline, measure_rtf, read_hypotheses, write_hypotheses, DecodeConfig, Hypothesis};
use maskctc_core::model::{average_checkpoints, ModelBundle};
use maskctc_core::score::{compare, format_table, score_corpus, score_with_per, ErrorReport, Utterance};
use maskctc_core::train::{load_examples, Trainer};
use maskctc_core::vocab::{tokenize, PinyinTable, Vocabulary};
use maskctc_core::{Error, Result};
use serde_json::json;

use crate::{Cli, Command};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Incompatible(_) => 2,
        Error::NonFiniteLoss { .. } | Error::NonFinite(_) | Error::CtcNumeric(_) => 3,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("{}: {io}", p.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenData { out } => gen_data(&cfg, out.as_deref().unwrap_or(&cfg.paths.data_dir)),
        Command::Train { data, out } => {
            train(&cfg, data.as_deref().unwrap_or(&cfg.paths.data_dir), out.as_deref().unwrap_or(&cfg.paths.out_dir))
        }
        Command::Decode { checkpoint, manifest, out, iterations, p_thres, workers } => {
            let mut dc = cfg.decode.clone();
            if let Some(k) = iterations {
                dc.iterations = *k;
            }
            if let Some(p) = p_thres {
                dc.p_thres = *p;
            }
            dc.validate()?;
            decode(&dc, cli.config.is_some(), checkpoint, manifest, out, *workers)
        }
        Command::Score { refs, hyps, data, out } => {
            let report = score(refs, hyps, data.as_deref().unwrap_or(&cfg.paths.data_dir))?;
            let text = serde_json::to_string_pretty(&report)?;
            eprint!("{}", format_table(&[("system", &report)]));
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::Analyze { refs, a, b, data } => analyze(refs, a, b, data.as_deref().unwrap_or(&cfg.paths.data_dir)),
        Command::AvgCkpt { dir, k, out } => avg(dir, *k, out),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = gen_corpus(&cfg.data)?;
    write_corpus(&corpus, out)?;
    let texts: Vec<&str> = corpus.train.iter().map(|u| u.text.as_str()).collect();
    let (man, eng, cs) = composition(&texts);
    let inv = &corpus.inventory;
    let summary = json!({
        "out": out.display().to_string(),
        "train": corpus.train.len(),
        "val": corpus.val.len(),
        "test": corpus.test.len(),
        "char_vocab": inv.char_vocab.len(),
        "pinyin_vocab": inv.pinyin_vocab.len(),
        "homophone_groups": inv.table.homophone_groups().values().filter(|g| g.len() > 1).count(),
        "train_composition": {"mandarin": man, "english": eng, "code_switching": cs},
    });
    println!("{summary}");
    Ok(())
}

struct CorpusFiles {
    char_vocab: Vocabulary,
    pinyin_vocab: Vocabulary,
    table: PinyinTable,
}

fn load_corpus_files(dir: &Path) -> Result<CorpusFiles> {
    Ok(CorpusFiles {
        char_vocab: Vocabulary::load(&dir.join(CHAR_VOCAB_FILE))?,
        pinyin_vocab: Vocabulary::load(&dir.join(PINYIN_VOCAB_FILE))?,
        table: PinyinTable::load(&dir.join(PINYIN_TABLE_FILE))?,
    })
}

fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let files = load_corpus_files(data)?;
    let train = load_examples(
        &read_manifest(&split_manifest(data, "train"))?,
        &files.char_vocab,
        &files.pinyin_vocab,
        &files.table,
    )?;
    let val = load_examples(
        &read_manifest(&split_manifest(data, "val"))?,
        &files.char_vocab,
        &files.pinyin_vocab,
        &files.table,
    )?;
    if let Some(ex) = train.first() {
        if ex.feats.cols() != cfg.model.encoder.input_dim {
            return Err(Error::Incompatible(format!(
                "features have {} channels but encoder.input_dim is {}",
                ex.feats.cols(),
                cfg.model.encoder.input_dim
            )));
        }
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), cfg.to_json())?;
    let model = ModelBundle::new(cfg.model.clone(), files.char_vocab, files.pinyin_vocab, cfg.seed)?;
    log::info!(
        "{} model, {} parameters, {} training utterances",
        model.architecture(),
        model.params.num_scalars(),
        train.len()
    );
    let outcome = Trainer::new(cfg, model, &train)?.run(&train, &val, Some(out))?;
    let last = outcome.logs.last();
    println!(
        "{}",
        json!({
            "out": out.display().to_string(),
            "epochs": outcome.logs.len(),
            "checkpoints": outcome.checkpoints.len(),
            "final_train_loss": last.map(|l| l.train_loss),
            "final_val_ter": last.map(|l| l.val_ter),
        })
    );
    Ok(())
}

fn decode_all(model: &ModelBundle, manifest: &Manifest, cfg: &DecodeConfig, workers: usize) -> Result<Vec<Hypothesis>> {
    let records = &manifest.records;
    let chunk = records.len().div_ceil(workers.max(1)).max(1);
    let results: Vec<Result<Vec<Hypothesis>>> = std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|r| {
                            let feats = manifest.load_features(r)?;
                            let mut h = decode_pipeline(&feats, model, cfg)?;
                            h.utt_id = r.utt_id.clone();
                            Ok(h)
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("decode worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(records.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn decode(
    dc: &DecodeConfig,
    config_given: bool,
    checkpoint: &Path,
    manifest: &Path,
    out: &Path,
    workers: Option<usize>,
) -> Result<()> {
    let model = ModelBundle::load(checkpoint)?;
    let mut dc = dc.clone();
    if !config_given {
        dc.architecture = model.architecture();
    }
    if dc.architecture != model.architecture() {
        return Err(Error::Incompatible(format!(
            "configuration is for {} but the checkpoint is {}",
            dc.architecture,
            model.architecture()
        )));
    }
    let manifest = read_manifest(manifest)?;
    if let Some(r) = manifest.records.first() {
        let feats = manifest.load_features(r)?;
        if feats.cols() != model.config.encoder.input_dim {
            return Err(Error::Incompatible(format!(
                "features have {} channels but the model expects {}",
                feats.cols(),
                model.config.encoder.input_dim
            )));
        }
    }
    let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let hyps = decode_all(&model, &manifest, &dc, workers)?;
    write_hypotheses(&hyps, out)?;
    let rtf = if hyps.is_empty() { None } else { Some(measure_rtf(&hyps)?) };
    println!(
        "{}",
        json!({
            "utterances": hyps.len(),
            "decode_ms": hyps.iter().map(|h| h.decode_ms).sum::<f64>(),
            "audio_ms": hyps.iter().map(|h| h.audio_ms).sum::<f64>(),
            "rtf": rtf,
            "iterations": dc.iterations,
            "p_thres": dc.p_thres,
        })
    );
    Ok(())
}

fn hyp_utterances(hyps: &[Hypothesis]) -> Vec<Utterance> {
    hyps.iter().map(|h| Utterance::new(h.utt_id.clone(), tokenize(&h.text))).collect()
}

fn ref_utterances(manifest: &Manifest) -> Vec<Utterance> {
    manifest.references().into_iter().map(|(id, toks)| Utterance::new(id, toks)).collect()
}

fn score_hyps(refs: &[Utterance], hyps: &[Hypothesis], data: &Path) -> Result<ErrorReport> {
    let files = load_corpus_files(data)?;
    let h = hyp_utterances(hyps);
    let mut report = match score_with_per(refs, &h, &files.char_vocab, &files.table) {
        Ok(r) => r,
        Err(Error::MissingPinyin(c)) => {
            log::warn!("character '{c}' has no Pinyin; PER omitted");
            score_corpus(refs, &h, &files.char_vocab)
        }
        Err(e) => return Err(e),
    };
    if !hyps.is_empty() && hyps.iter().any(|h| h.audio_ms > 0.0) {
        report.rtf = Some(measure_rtf(hyps)?);
    }
    Ok(report)
}

fn score(refs: &Path, hyps: &Path, data: &Path) -> Result<ErrorReport> {
    let refs = ref_utterances(&read_manifest(refs)?);
    score_hyps(&refs, &read_hypotheses(hyps)?, data)
}

fn analyze(refs: &Path, a: &Path, b: &Path, data: &Path) -> Result<()> {
    let refs = ref_utterances(&read_manifest(refs)?);
    let mut ra = score_hyps(&refs, &read_hypotheses(a)?, data)?;
    let rb = score_hyps(&refs, &read_hypotheses(b)?, data)?;
    let sig = compare(&ra, &rb, &b.display().to_string())?;
    println!(
        "{}",
        json!({
            "a": a.display().to_string(),
            "b": b.display().to_string(),
            "ter_a": ra.ter,
            "ter_b": rb.ter,
            "ter_delta": sig.ter_delta,
            "mcnemar_p": sig.mcnemar_p,
            "ttest_p": sig.ttest_p,
        })
    );
    ra.significance.push(sig);
    eprint!("{}", format_table(&[("a", &ra), ("b", &rb)]));
    Ok(())
}

fn avg(dir: &Path, k: usize, out: &Path) -> Result<()> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    let model = average_checkpoints(&paths, k)?;
    model.save(out)?;
    println!("{}", json!({"averaged": paths.len().min(k), "of": paths.len(), "out": out.display().to_string()}));
    Ok(())
}
