#![allow(dead_code)]

use std::path::Path;

use maskctc_core::data::{gen_corpus, SynthUtterance};
use maskctc_core::decode::DecodeConfig;
use maskctc_core::model::{Architecture, ModelBundle};
use maskctc_core::score::{score_with_per, ErrorReport};
use maskctc_core::train::{decode_examples, Example, TrainOutcome, Trainer};
use maskctc_core::vocab::{PinyinMapper, PinyinTable, Vocabulary};
use maskctc_core::RunConfig;

/// A generated corpus turned into training examples.
pub struct Splits {
    pub char_vocab: Vocabulary,
    pub pinyin_vocab: Vocabulary,
    pub table: PinyinTable,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn splits(cfg: &RunConfig) -> Splits {
    let corpus = gen_corpus(&cfg.data).expect("corpus generates");
    let inv = &corpus.inventory;
    let mapper = PinyinMapper::new(&inv.char_vocab, &inv.pinyin_vocab, &inv.table);
    let ex = |u: &SynthUtterance| Example::new(&u.utt_id, &u.text, u.feats.clone(), &inv.char_vocab, &mapper).unwrap();
    Splits {
        char_vocab: inv.char_vocab.clone(),
        pinyin_vocab: inv.pinyin_vocab.clone(),
        table: inv.table.clone(),
        train: corpus.train.iter().map(ex).collect(),
        val: corpus.val.iter().map(ex).collect(),
        test: corpus.test.iter().map(ex).collect(),
    }
}

pub fn train(cfg: &RunConfig, s: &Splits, out: Option<&Path>) -> TrainOutcome {
    let model = ModelBundle::new(cfg.model.clone(), s.char_vocab.clone(), s.pinyin_vocab.clone(), cfg.seed).unwrap();
    let trainer = Trainer::new(cfg, model, &s.train).unwrap();
    trainer.run(&s.train, &s.val, out).unwrap()
}

pub fn with_arch(base: &RunConfig, arch: Architecture) -> RunConfig {
    let mut cfg = base.clone();
    cfg.set_architecture(arch);
    cfg
}

/// Test-split report with PER under the model's default decoding.
pub fn test_report(model: &ModelBundle, s: &Splits, decode: &DecodeConfig) -> ErrorReport {
    let dc = DecodeConfig { architecture: model.architecture(), ..decode.clone() };
    let (refs, hyps) = decode_examples(model, &s.test, &dc).unwrap();
    score_with_per(&refs, &hyps, &s.char_vocab, &s.table).unwrap()
}
