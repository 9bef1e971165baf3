//! Writes the synthetic tone corpus and prints its manifest.
//!
//! cargo run --release --example toy_corpus -- [out_dir]

use speechmt::data::{make_toy_corpus, ToySpec};

fn main() -> speechmt::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("speechmt_toy_corpus"));
    let manifest = make_toy_corpus(&ToySpec::default(), &out)?;
    println!("{} utterances under {}", manifest.len(), out.display());
    for line in manifest.to_jsonl().lines().take(5) {
        println!("{line}");
    }
    Ok(())
}
