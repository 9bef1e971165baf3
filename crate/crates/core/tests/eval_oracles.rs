mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechmt::eval::{corpus_bleu, corpus_wer, wer, word_edits, EvalPair};

const WORDS: [&str; 4] = ["la", "casa", "el", "sol"];

fn random_sentence(rng: &mut ChaCha8Rng, max: usize) -> Vec<String> {
    let n = rng.gen_range(1..=max);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string()).collect()
}

fn random_corpus(seed: u64) -> Vec<(Vec<String>, Vec<Vec<String>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segs = rng.gen_range(1..=6);
    (0..segs)
        .map(|_| {
            let nrefs = rng.gen_range(1..=3);
            let refs: Vec<Vec<String>> = (0..nrefs).map(|_| random_sentence(&mut rng, 12)).collect();
            let hyp = if rng.gen_bool(0.5) {
                // A noisy copy of one reference.
                let mut h = refs[rng.gen_range(0..nrefs)].clone();
                for w in h.iter_mut() {
                    if rng.gen_bool(0.2) {
                        *w = WORDS[rng.gen_range(0..WORDS.len())].to_string();
                    }
                }
                h
            } else {
                random_sentence(&mut rng, 12)
            };
            (hyp, refs)
        })
        .collect()
}

fn to_pairs(corpus: &[(Vec<String>, Vec<Vec<String>>)]) -> Vec<EvalPair> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, (h, refs))| EvalPair {
            id: format!("s{i}"),
            hypothesis: h.join(" "),
            references: refs.iter().map(|r| r.join(" ")).collect(),
        })
        .collect()
}

#[test]
fn bleu_matches_naive_implementation() {
    let mut nonzero = 0;
    for seed in 0..100 {
        let corpus = random_corpus(seed);
        let (bleu, matches, totals) = naive_bleu(&corpus, 4);
        let got = corpus_bleu(&to_pairs(&corpus), 4).unwrap();
        assert_eq!(got.matches, matches, "seed {seed}");
        assert_eq!(got.totals, totals, "seed {seed}");
        assert!((got.bleu - bleu).abs() < 1e-9, "seed {seed}: {} vs {bleu}", got.bleu);
        nonzero += usize::from(bleu > 0.0);
    }
    assert!(nonzero > 30, "only {nonzero} corpora had every n-gram order matched");
}

#[test]
fn identical_output_is_perfect() {
    let pairs = vec![EvalPair {
        id: "a".into(),
        hypothesis: "el sol sale por la mañana".into(),
        references: vec!["el sol sale por la mañana".into()],
    }];
    assert_eq!(corpus_bleu(&pairs, 4).unwrap().bleu, 100.0);
    assert_eq!(wer("el sol sale", "el sol sale").0, 0.0);
    assert!(corpus_bleu(&[], 4).is_err());
}

#[test]
fn wer_matches_exhaustive_alignment() {
    let alphabet = ["a", "b", "c"];
    let mut seqs: Vec<Vec<&str>> = vec![vec![]];
    let mut frontier: Vec<Vec<&str>> = vec![vec![]];
    for _ in 0..6 {
        let mut next = Vec::new();
        for s in &frontier {
            for w in alphabet {
                let mut t = s.clone();
                t.push(w);
                next.push(t);
            }
        }
        seqs.extend(next.iter().cloned());
        frontier = next;
    }
    assert_eq!(seqs.len(), 1093);
    let texts: Vec<String> = seqs.iter().map(|s| s.join(" ")).collect();
    for (r, rt) in seqs.iter().zip(&texts) {
        for (h, ht) in seqs.iter().zip(&texts) {
            let e = word_edits(rt, ht);
            assert_eq!(e.errors(), oracle_edit_distance(r, h), "{rt:?} / {ht:?}");
            assert_eq!(e.ref_len, r.len());
            assert_eq!(r.len() - e.deletions + e.insertions, h.len());
        }
    }
}

#[test]
fn corpus_wer_pools_counts() {
    let e = corpus_wer([("a b c", "a x c"), ("d e", "d e f g")]);
    assert_eq!(e.errors(), 3);
    assert_eq!(e.ref_len, 5);
    assert!((e.rate() - 0.6).abs() < 1e-15);
    let empty = word_edits("", "a b");
    assert!(empty.degenerate());
    assert_eq!(empty.rate(), 2.0);
}

proptest! {
    #[test]
    fn edit_distance_is_symmetric(a in proptest::collection::vec(0usize..4, 0..9), b in proptest::collection::vec(0usize..4, 0..9)) {
        let ta: Vec<&str> = a.iter().map(|&i| WORDS[i]).collect();
        let tb: Vec<&str> = b.iter().map(|&i| WORDS[i]).collect();
        let (sa, sb) = (ta.join(" "), tb.join(" "));
        prop_assert_eq!(word_edits(&sa, &sb).errors(), word_edits(&sb, &sa).errors());
    }

    #[test]
    fn bleu_ignores_segment_order(seed in 0u64..1000) {
        let corpus = random_corpus(seed);
        let mut shuffled = to_pairs(&corpus);
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 1));
        let a = corpus_bleu(&to_pairs(&corpus), 4).unwrap();
        let b = corpus_bleu(&shuffled, 4).unwrap();
        prop_assert_eq!(a.matches, b.matches);
        prop_assert!((a.bleu - b.bleu).abs() < 1e-9);
    }

    #[test]
    fn dropping_a_reference_never_adds_matches(seed in 0u64..1000) {
        let corpus = random_corpus(seed);
        let full = corpus_bleu(&to_pairs(&corpus), 4).unwrap();
        let fewer: Vec<_> = corpus
            .iter()
            .map(|(h, refs)| (h.clone(), refs[..refs.len().saturating_sub(1).max(1)].to_vec()))
            .collect();
        let less = corpus_bleu(&to_pairs(&fewer), 4).unwrap();
        for (x, y) in less.matches.iter().zip(&full.matches) {
            prop_assert!(x <= y);
        }
    }
}

#[test]
fn short_corpora_use_the_available_orders() {
    let pairs = vec![EvalPair {
        id: "a".into(),
        hypothesis: "ram los".into(),
        references: vec!["ram los".into()],
    }];
    let b = corpus_bleu(&pairs, 4).unwrap();
    assert_eq!(b.totals, vec![2, 1, 0, 0]);
    assert_eq!(b.bleu, 100.0);
    let miss = vec![EvalPair {
        id: "a".into(),
        hypothesis: "ram los".into(),
        references: vec!["los ram".into()],
    }];
    assert_eq!(corpus_bleu(&miss, 4).unwrap().bleu, 0.0);
}
