//! Trains a toy translation model briefly, then prints the n-best lists
//! for a few utterances at several beam widths.
//!
//! cargo run --release --example beam_search -- [steps]

mod common;

use speechmt::beam::DecodeConfig;
use speechmt::vocab::Vocabulary;

fn main() -> speechmt::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let (trainer, toy) = common::trained(&[("st", 1.0)], None, steps)?;
    let vocab = Vocabulary::canonical();
    for ex in toy.corpora[0].examples.iter().take(3) {
        println!("{}  reference: {}", ex.id, vocab.decode(&ex.target)?);
        for width in [1, 3, 8] {
            let cfg = DecodeConfig { beam_width: width, ..DecodeConfig::st() };
            let nbest = trainer.model.beam_decode("st", &ex.id, ex.input.as_input(), &cfg)?;
            println!("  B={width}");
            for r in nbest.records(&ex.id, &vocab)?.iter().take(3) {
                println!("    {}", r.to_tsv());
            }
        }
    }
    Ok(())
}
