mod common;

use common::random_features;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use speechmt::decoder::{log_softmax_row, AlignmentMatrix, AttentionDecoder, DecoderConfig};
use speechmt::tensor::{grad_check_params, Graph, Mode, ParamStore, Tensor};
use speechmt::vocab::{EOS, SOS};
use speechmt::Error;

fn build(vocab: usize, depth: usize, ctx: usize, seed: u64) -> (ParamStore, AttentionDecoder) {
    let cfg = DecoderConfig {
        depth,
        units: 6,
        embedding_dim: 4,
        attention_hidden: 5,
        attention_dim: 3,
        vocab_size: vocab,
        dropout: 0.0,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dec = AttentionDecoder::new(&cfg, ctx, &mut store, &mut rng, "dec").unwrap();
    (store, dec)
}

fn states(l: usize, d: usize, seed: u64) -> Tensor {
    let v = random_features(l, d, seed).into_data()[..l * d].to_vec();
    Tensor::new(vec![l, d], v).unwrap()
}

#[test]
fn single_frame_attention_copies_the_frame() {
    let (store, dec) = build(90, 2, 7, 1);
    let mut g = Graph::with_params(&store, Mode::Infer);
    let h = states(1, 7, 3);
    let hv = g.constant(h.clone());
    let mem = dec.memory(&mut g, hv).unwrap();
    let st = dec.initial_state(&mut g);
    let out = dec.step(&mut g, SOS, &st, &mem).unwrap();
    assert_eq!(g.value(out.alpha).data(), &[1.0]);
    assert!(g.value(out.state.context).max_abs_diff(&h) < 1e-15);
}

#[test]
fn zero_query_gives_uniform_attention_and_convex_context() {
    let (mut store, dec) = build(90, 2, 7, 2);
    for id in [dec.query_net.out.w, dec.query_net.out.b] {
        store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let h = states(5, 7, 4);
    let mut g = Graph::with_params(&store, Mode::Infer);
    let hv = g.constant(h.clone());
    let mem = dec.memory(&mut g, hv).unwrap();
    let st = dec.initial_state(&mut g);
    let out = dec.step(&mut g, SOS, &st, &mem).unwrap();
    for &a in g.value(out.alpha).data() {
        assert!((a - 0.2).abs() < 1e-15);
    }
    let c = g.value(out.state.context);
    for j in 0..7 {
        let mean: f64 = (0..5).map(|i| h.row_slice(i)[j]).sum::<f64>() / 5.0;
        assert!((c.data()[j] - mean).abs() < 1e-12);
    }
}

#[test]
fn step_outputs_are_distributions() {
    let (store, dec) = build(90, 3, 7, 5);
    let h = states(6, 7, 6);
    let run = || {
        let mut g = Graph::with_params(&store, Mode::Infer);
        let hv = g.constant(h.clone());
        let mem = dec.memory(&mut g, hv).unwrap();
        let mut st = dec.initial_state(&mut g);
        let mut out = Vec::new();
        for y in [SOS, 10, 11, 12] {
            let o = dec.step(&mut g, y, &st, &mem).unwrap();
            let alpha = g.value(o.alpha).data().to_vec();
            assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(alpha.iter().all(|&a| a >= 0.0));
            // Context lies in the convex hull of the frames.
            let c = g.value(o.state.context);
            for j in 0..7 {
                let col: Vec<f64> = (0..6).map(|i| h.row_slice(i)[j]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(c.data()[j] >= lo - 1e-12 && c.data()[j] <= hi + 1e-12);
            }
            let logits = g.value(o.logits);
            assert_eq!(logits.shape(), &[1, 90]);
            let p: f64 = log_softmax_row(logits.data()).iter().map(|l| l.exp()).sum();
            assert!((p - 1.0).abs() < 1e-12);
            out.push(logits.clone());
            st = o.state;
        }
        out
    };
    assert_eq!(run(), run());
}

#[test]
fn uniform_logits_cost_log_vocab() {
    let (mut store, dec) = build(90, 2, 7, 7);
    for id in [dec.output.w, dec.output.b] {
        store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let mut g = Graph::with_params(&store, Mode::Infer);
    let h = g.constant(states(4, 7, 8));
    let tf = dec.teacher_forced(&mut g, h, &[10, 20, 30]).unwrap();
    assert!((g.value(tf.loss).data()[0] - (90f64).ln()).abs() < 1e-12);
}

#[test]
fn marker_tokens_in_the_target_are_rejected() {
    let (store, dec) = build(90, 2, 7, 9);
    for bad in [vec![10, SOS, 11], vec![10, EOS], vec![], vec![10, 90]] {
        let mut g = Graph::with_params(&store, Mode::Infer);
        let h = g.constant(states(4, 7, 8));
        let err = dec.teacher_forced(&mut g, h, &bad).unwrap_err();
        assert!(matches!(err, Error::Input(_)), "{bad:?}: {err}");
    }
}

#[test]
fn teacher_forcing_matches_stepwise_log_probs() {
    let (store, dec) = build(90, 2, 7, 10);
    let h = states(5, 7, 11);
    let target = [14, 15, 16, 17];
    let mut g = Graph::with_params(&store, Mode::Infer);
    let hv = g.constant(h.clone());
    let tf = dec.teacher_forced(&mut g, hv, &target).unwrap();
    let lps = tf.step_log_probs(&g);
    let mean = -lps.iter().sum::<f64>() / lps.len() as f64;
    assert!((g.value(tf.loss).data()[0] - mean).abs() < 1e-12);

    let mut g2 = Graph::with_params(&store, Mode::Infer);
    let hv = g2.constant(h);
    let mem = dec.memory(&mut g2, hv).unwrap();
    let mut st = dec.initial_state(&mut g2);
    let mut prev = SOS;
    for (k, &y) in target.iter().chain([EOS].iter()).enumerate() {
        let o = dec.step(&mut g2, prev, &st, &mem).unwrap();
        let lp = log_softmax_row(g2.value(o.logits).data())[y];
        assert!((lp - lps[k]).abs() < 1e-12);
        st = o.state;
        prev = y;
    }
    let a = tf.alignment(&g).unwrap();
    assert_eq!(a.shape(), &[5, 5]);
}

#[test]
fn decoder_gradient_check() {
    for depth in [1, 2] {
        let (store, dec) = build(6, depth, 4, 12);
        let h = states(3, 4, 13);
        let report = grad_check_params(
            &store,
            Mode::Train,
            |g: &mut Graph| {
                let hv = g.constant(h.clone());
                Ok(dec.teacher_forced(g, hv, &[4, 5])?.loss)
            },
            1e-5,
            300,
            depth as u64,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "depth {depth}: {report:?}");
    }
}

#[test]
fn alignment_tsv_round_trip() {
    let alpha = Tensor::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.125, 0.5, 0.375]]).unwrap();
    let m = AlignmentMatrix::new("utt 1", "st", vec![" ".into(), "\t".into()], alpha).unwrap();
    let back = AlignmentMatrix::from_tsv(&m.to_tsv()).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.row_argmax(), vec![0, 1]);
    assert_eq!(back.monotonic_fraction(), 1.0);
    assert!(AlignmentMatrix::from_tsv("token\t0\t1\n").is_err());
}
