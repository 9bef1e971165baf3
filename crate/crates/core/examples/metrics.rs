//! Corpus BLEU with multiple references and word error rate.

use speechmt::eval::{corpus_bleu, corpus_wer, wer, EvalPair};

fn main() -> speechmt::Result<()> {
    let pairs = vec![
        EvalPair {
            id: "a".into(),
            hypothesis: "the cat sat on the mat".into(),
            references: vec!["the cat sat on the mat".into(), "a cat was sitting on the mat".into()],
        },
        EvalPair {
            id: "b".into(),
            hypothesis: "it is raining today".into(),
            references: vec!["today it rains".into(), "it is raining hard today".into()],
        },
    ];
    let b = corpus_bleu(&pairs, 4)?;
    println!("BLEU {:.2}  BP {:.3}  matches {:?}  totals {:?}", b.bleu, b.brevity_penalty, b.matches, b.totals);

    let (rate, counts) = wer("el sol sale por la mañana", "el sol sal por mañana temprano");
    println!("WER {:.1}%  {counts:?}", 100.0 * rate);
    let total = corpus_wer([("uno dos tres", "uno tres"), ("cuatro cinco", "cuatro cinco seis")]);
    println!("corpus {total:?}");
    Ok(())
}
