//! Trains a shared-encoder model on translation and recognition and dumps
//! both decoders' attention for one utterance. The recognizer reads the
//! tones left to right; the translator, whose targets are reversed, reads
//! them right to left.
//!
//! cargo run --release --example multitask_attention -- [steps] [out_dir]

mod common;

use speechmt::decoder::AlignmentMatrix;
use speechmt::vocab::{Vocabulary, EOS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(1500);
    let out_dir = args.next().map(std::path::PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let (trainer, toy) = common::trained(&[("st", 0.75), ("asr", 0.25)], None, steps)?;
    let vocab = Vocabulary::canonical();
    for corpus in &toy.corpora {
        let ex = &corpus.examples[0];
        let hyp = trainer.model.greedy_decode(&corpus.task, ex.input.as_input(), None)?;
        let labels = hyp
            .tokens
            .iter()
            .map(|&t| if t == EOS { "</s>".to_string() } else { vocab.token(t).unwrap_or("?").to_string() })
            .collect();
        let m = AlignmentMatrix::new(&ex.id, &corpus.task, labels, hyp.attention_tensor()?)?;
        let path = out_dir.join(format!("{}.{}.attn.tsv", ex.id, corpus.task));
        std::fs::write(&path, m.to_tsv())?;
        println!("{}: {:?}", corpus.task, vocab.decode(hyp.body())?);
        println!("  argmax encoder position per output step: {:?}", m.row_argmax());
        println!("  wrote {}", path.display());
    }
    Ok(())
}
