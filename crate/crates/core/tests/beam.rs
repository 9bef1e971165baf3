mod common;

use common::*;
use speechmt::beam::{
    beam_search, eos_allowed, gnmt_score, greedy_search, length_penalty, read_nbest, replay_logprob, DecodeConfig,
    NBestRecord,
};
use speechmt::decoder::AttentionDecoder;
use speechmt::tensor::{ParamStore, Tensor};
use speechmt::vocab::{Vocabulary, EOS, SOS};

const FIT_STEPS: u64 = 30;

fn cfg(width: usize, prune: usize, alpha: f64, max_len: usize) -> DecodeConfig {
    DecodeConfig {
        beam_width: width,
        rank_prune: prune,
        length_alpha: alpha,
        eos_margin: None,
        max_len: Some(max_len),
    }
}

/// Every (decoder, encoder states) pair of the fitted six-token fixtures.
fn fixtures() -> Vec<(ParamStore, AttentionDecoder, Tensor)> {
    let mut out = Vec::new();
    for seed in 0..6 {
        let (store, dec, hs) = frozen_six_token_decoder(seed, FIT_STEPS);
        for h in hs {
            out.push((store.clone(), dec.clone(), h));
        }
    }
    out
}

fn fixture(seed: u64, i: usize) -> (ParamStore, AttentionDecoder, Tensor) {
    let (store, dec, mut hs) = frozen_six_token_decoder(seed, FIT_STEPS);
    (store, dec, hs.swap_remove(i))
}

#[test]
fn length_normalization_formula() {
    assert!((gnmt_score(-4.2, 13, 0.6) - (-4.2 / 3f64.powf(0.6))).abs() < 1e-12);
    assert_eq!(length_penalty(1, 0.6), 1.0);
    assert_eq!(gnmt_score(-3.0, 40, 0.0), -3.0);
}

#[test]
fn eos_gate_truth_table() {
    let mut lp = vec![-9.0, -1.0, -4.0, -5.0, -6.0];
    // EOS leads the best other token by exactly 3.
    assert!(eos_allowed(&lp, Some(3.0)));
    assert!(!eos_allowed(&lp, Some(3.0 + 1e-9)));
    lp[2] = -0.5;
    assert!(!eos_allowed(&lp, Some(3.0)));
    assert!(!eos_allowed(&lp, Some(0.0)));
    assert!(eos_allowed(&lp, None));
    // SOS never counts as a competitor.
    let lp = vec![0.0, -1.0, -10.0, -10.0];
    assert!(eos_allowed(&lp, Some(3.0)));
}

#[test]
fn default_length_cap() {
    let c = DecodeConfig::st();
    assert_eq!(c.max_len_for(4), 20);
    assert_eq!(c.max_len_for(10), 25);
    assert_eq!(c.max_len_for(11), 28);
    assert!(DecodeConfig { beam_width: 0, ..c.clone() }.validate().is_err());
    assert!(DecodeConfig { length_alpha: 1.5, ..c }.validate().is_err());
}

#[test]
fn beam_matches_exhaustive_search() {
    let mut nontrivial = 0;
    for (n, (store, dec, h)) in fixtures().iter().enumerate() {
        for alpha in [0.0, 0.6] {
            let (tokens, score) = exhaustive_best(store, dec, h, 5, alpha);
            nontrivial += usize::from(tokens.len() > 1);
            let nb = beam_search(dec, store, h, &cfg(8, 6, alpha, 5)).unwrap();
            assert_eq!(nb.best().tokens, tokens, "fixture {n} alpha {alpha}");
            assert!((nb.best().score - score).abs() < 1e-9);
        }
    }
    assert!(nontrivial > 20);
}

#[test]
fn hypothesis_scores_replay() {
    let (store, dec, h) = fixture(3, 2);
    let nb = beam_search(&dec, &store, &h, &cfg(4, 6, 0.6, 5)).unwrap();
    assert!(nb.hypotheses.len() <= 4);
    for w in nb.hypotheses.windows(2) {
        assert!(w[0].score >= w[1].score);
    }
    for hyp in &nb.hypotheses {
        let lp = replay_logprob(&dec, &store, &h, &hyp.tokens).unwrap();
        assert!((lp - hyp.logprob).abs() < 1e-10);
        assert!((hyp.score - gnmt_score(hyp.logprob, hyp.tokens.len(), 0.6)).abs() < 1e-12);
        assert_eq!(hyp.attention.len(), hyp.tokens.len());
        assert!(hyp.tokens.iter().all(|&t| t != SOS));
    }
}

#[test]
fn full_rank_pruning_is_a_no_op() {
    let (store, dec, h) = fixture(4, 2);
    let a = beam_search(&dec, &store, &h, &cfg(3, 6, 0.6, 6)).unwrap();
    let b = beam_search(&dec, &store, &h, &cfg(3, 100, 0.6, 6)).unwrap();
    assert_eq!(a.hypotheses, b.hypotheses);
}

#[test]
fn width_one_improves_on_greedy_along_its_path() {
    for (store, dec, h) in fixtures() {
        let greedy = greedy_search(&dec, &store, &h, Some(8)).unwrap();
        let beam = beam_search(&dec, &store, &h, &cfg(1, 6, 0.0, 8)).unwrap();
        let b = beam.best();
        if greedy.finished {
            assert!(b.score >= greedy.logprob - 1e-12);
        }
        assert_eq!(&greedy.tokens[..b.body().len()], b.body());
    }
}

#[test]
fn eos_margin_forces_results_when_eos_never_clears_it() {
    let (store, dec, h) = fixture(5, 2);
    let c = DecodeConfig {
        eos_margin: Some(1e6),
        ..cfg(2, 6, 0.0, 4)
    };
    let nb = beam_search(&dec, &store, &h, &c).unwrap();
    assert!(nb.forced);
    assert!(nb.best().forced && !nb.best().finished);
    assert_eq!(nb.best().tokens.len(), 4);
    assert!(!nb.best().tokens.contains(&EOS));
}

#[test]
fn nbest_file_round_trip() {
    let (store, dec, h) = fixture(1, 2);
    let nb = beam_search(&dec, &store, &h, &cfg(3, 6, 0.6, 5)).unwrap();
    let recs = nb.records("utt-1", &Vocabulary::canonical()).unwrap();
    assert_eq!(recs[0].rank, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nbest.tsv");
    let text: String = recs.iter().map(|r| r.to_tsv() + "\n").collect();
    std::fs::write(&path, format!("# comment\n{text}\n")).unwrap();
    let back = read_nbest(&path).unwrap();
    assert_eq!(back.len(), recs.len());
    for (a, b) in back.iter().zip(&recs) {
        assert_eq!((&a.id, a.rank, &a.text), (&b.id, b.rank, &b.text));
        assert!((a.score - b.score).abs() < 1e-6);
    }
    assert_eq!(NBestRecord::parse("only\tthree\tfields"), None);
    std::fs::write(&path, "x\t1\tnot-a-number\t0\thi\n").unwrap();
    assert!(read_nbest(&path).is_err());
}

#[test]
fn wider_beams_never_score_worse_here() {
    let mut improved = 0;
    for (store, dec, h) in fixtures() {
        let scores: Vec<f64> = [1, 2, 3, 8]
            .iter()
            .map(|&b| beam_search(&dec, &store, &h, &cfg(b, 6, 0.6, 5)).unwrap().best().score)
            .collect();
        for w in scores.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "{scores:?}");
        }
        improved += usize::from(scores[3] > scores[0] + 1e-9);
    }
    assert!(improved >= 1);
}
