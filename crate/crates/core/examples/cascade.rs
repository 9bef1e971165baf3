//! Cascade translation: a toy recognizer feeds its 1-best transcript to a
//! small character-level text translator.
//!
//! cargo run --release --example cascade -- [steps]

mod common;

use std::collections::HashMap;

use speechmt::beam::{decode_cascade, DecodeConfig};
use speechmt::data::{build_examples, TaskKind};
use speechmt::decoder::DecoderConfig;
use speechmt::encoder::TextEncoderConfig;
use speechmt::eval::{corpus_bleu, EvalPair};
use speechmt::model::{InputKind, Model, ModelConfig};
use speechmt::training::{TaskCorpus, Trainer, TrainerConfig};
use speechmt::vocab::Vocabulary;

fn main() -> speechmt::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let (asr, toy) = common::trained(&[("asr", 1.0)], None, steps)?;

    let vocab = Vocabulary::canonical();
    let nmt_examples = build_examples(&toy.manifest, TaskKind::Nmt, &HashMap::new(), None, &vocab)?;
    let nmt_cfg = ModelConfig {
        input: InputKind::Text,
        text: TextEncoderConfig {
            embedding_dim: 16,
            bidirectional_layers: 1,
            unidirectional_layers: 1,
            units: 64,
            dropout: 0.0,
            ..TextEncoderConfig::default()
        },
        decoder: DecoderConfig::toy(),
        tasks: vec!["nmt".into()],
        ..ModelConfig::default()
    };
    let corpus = TaskCorpus { task: "nmt".into(), examples: nmt_examples };
    let mut mt = Trainer::new(
        Model::new(&nmt_cfg, 3)?,
        TrainerConfig::single("nmt", common::optimizer(), 3),
        vec![corpus],
    )?;
    mt.run(steps, None)?;

    let mut pairs = Vec::new();
    for (ex, entry) in toy.corpora[0].examples.iter().zip(&toy.manifest.entries).take(10) {
        let speechmt::data::ExampleInput::Features(x) = &ex.input else { unreachable!() };
        let out = decode_cascade(
            &asr.model,
            "asr",
            &mt.model,
            "nmt",
            x,
            &vocab,
            &DecodeConfig::asr(),
            &DecodeConfig::st(),
        )?;
        println!("{}  heard {:?} -> {:?}  ({:.0} + {:.0} ms)", ex.id, out.source_text, out.translation_text, out.asr_ms, out.mt_ms);
        pairs.push(EvalPair {
            id: ex.id.clone(),
            hypothesis: out.translation_text,
            references: entry.targets.clone(),
        });
    }
    println!("cascade BLEU {:.2}", corpus_bleu(&pairs, 4)?.bleu);
    Ok(())
}
