#![allow(dead_code)]

use speechmt::data::{Example, ExampleInput};
use speechmt::decoder::DecoderConfig;
use speechmt::encoder::TextEncoderConfig;
use speechmt::model::{InputKind, ModelConfig};
use speechmt::training::{OptimizerConfig, TaskCorpus, TaskSchedule, TrainerConfig};
use speechmt::vocab::Vocabulary;

/// A text-input model small enough to train in milliseconds per step.
pub fn tiny_text_config(tasks: &[&str]) -> ModelConfig {
    ModelConfig {
        input: InputKind::Text,
        text: TextEncoderConfig {
            embedding_dim: 8,
            bidirectional_layers: 1,
            unidirectional_layers: 1,
            units: 12,
            dropout: 0.0,
            ..TextEncoderConfig::default()
        },
        decoder: DecoderConfig {
            depth: 2,
            units: 16,
            embedding_dim: 8,
            attention_hidden: 8,
            attention_dim: 8,
            dropout: 0.0,
            ..DecoderConfig::default()
        },
        tasks: tasks.iter().map(|s| s.to_string()).collect(),
        shared_layers: Some(1),
        ..ModelConfig::default()
    }
}

pub fn text_corpus(task: &str, pairs: &[(&str, &str)]) -> TaskCorpus {
    let v = Vocabulary::canonical();
    TaskCorpus {
        task: task.into(),
        examples: pairs
            .iter()
            .enumerate()
            .map(|(i, (src, tgt))| Example {
                id: format!("{task}{i}"),
                input: ExampleInput::Tokens(v.encode(src)),
                target: v.encode(tgt),
            })
            .collect(),
    }
}

pub const PAIRS: [(&str, &str); 6] = [
    ("sol", "los"),
    ("mar", "ram"),
    ("luz pan", "zul nap"),
    ("oro", "oro"),
    ("pan sol", "nap los"),
    ("mar oro luz", "ram oro zul"),
];

pub fn two_task_corpora() -> Vec<TaskCorpus> {
    let copy: Vec<(&str, &str)> = PAIRS.iter().map(|(s, _)| (*s, *s)).collect();
    vec![text_corpus("st", &PAIRS), text_corpus("asr", &copy)]
}

pub fn fast_optimizer() -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: 1e-2,
        batch_size: 2,
        noise_start: 4,
        decay_step: 1_000,
        weight_noise_std: 0.05,
        ..OptimizerConfig::default()
    }
}

pub fn multitask_config(seed: u64) -> TrainerConfig {
    TrainerConfig {
        optimizer: fast_optimizer(),
        schedule: TaskSchedule::new(&[("st", 0.75), ("asr", 0.25)]).unwrap(),
        bucket_width: 2,
        seed,
    }
}

/// A speech model with every width in single digits, for gradient checks
/// and exhaustive searches.
pub fn micro_speech_config(vocab_size: usize, tasks: &[&str]) -> ModelConfig {
    ModelConfig {
        input: InputKind::Speech,
        speech: speechmt::encoder::SpeechEncoderConfig {
            n_mels: 8,
            conv_filters: 2,
            conv_lstm_filters: 2,
            lstm_layers: 2,
            lstm_units: 3,
            projection_dim: 4,
            ..Default::default()
        },
        decoder: DecoderConfig {
            depth: 2,
            units: 5,
            embedding_dim: 3,
            attention_hidden: 4,
            attention_dim: 3,
            vocab_size,
            dropout: 0.0,
        },
        tasks: tasks.iter().map(|s| s.to_string()).collect(),
        ..ModelConfig::default()
    }
}

/// Deterministic pseudo-random `T × n_mels × 3` features.
pub fn random_features(t: usize, n_mels: usize, seed: u64) -> speechmt::tensor::Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data = (0..t * n_mels * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    speechmt::tensor::Tensor::new(vec![t, n_mels, 3], data).unwrap()
}

/// Marks every batch-norm layer as having unit running statistics so an
/// untrained model can run in inference mode.
pub fn unit_norms(model: &mut speechmt::model::Model) {
    for s in model.store.norms_mut() {
        s.mean.iter_mut().for_each(|m| *m = 0.0);
        s.var.iter_mut().for_each(|v| *v = 1.0);
        s.initialized = true;
    }
}

/// Encoder states and targets the six-token decoder is fitted to.
pub const SIX_TOKEN_TARGETS: [&[usize]; 3] = [&[2, 3, 4], &[5, 5], &[4, 2, 5, 3]];

/// A frozen decoder over a 6-token vocabulary, briefly fitted so that
/// each of three encoder inputs prefers a different non-empty output,
/// plus those inputs.
pub fn frozen_six_token_decoder(
    seed: u64,
    fit_steps: u64,
) -> (
    speechmt::tensor::ParamStore,
    speechmt::decoder::AttentionDecoder,
    Vec<speechmt::tensor::Tensor>,
) {
    use rand::SeedableRng;
    use speechmt::tensor::{Graph, Mode, Tensor};
    use speechmt::training::{adam_update, Moments, OptimizerConfig};
    let cfg = DecoderConfig {
        depth: 2,
        units: 8,
        embedding_dim: 4,
        attention_hidden: 6,
        attention_dim: 4,
        vocab_size: 6,
        dropout: 0.0,
    };
    let mut store = speechmt::tensor::ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dec = speechmt::decoder::AttentionDecoder::new(&cfg, 4, &mut store, &mut rng, "dec").unwrap();
    let hs: Vec<Tensor> = (0..SIX_TOKEN_TARGETS.len() as u64)
        .map(|i| {
            let f = random_features(3, 4, seed * 10 + i).into_data();
            Tensor::new(vec![3, 4], f[..12].to_vec()).unwrap()
        })
        .collect();
    let opt = OptimizerConfig {
        learning_rate: 0.02,
        ..OptimizerConfig::default()
    };
    let mut moments: Vec<Moments> = store.iter().map(|(_, p)| Moments::zeros(p.value.shape())).collect();
    for step in 1..=fit_steps {
        let grads = {
            let mut g = Graph::with_params(&store, Mode::Train);
            let mut total = None;
            for (h, y) in hs.iter().zip(SIX_TOKEN_TARGETS) {
                let hv = g.constant(h.clone());
                let l = dec.teacher_forced(&mut g, hv, y).unwrap().loss;
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l).unwrap(),
                });
            }
            g.backward(total.unwrap()).unwrap();
            g.param_grads()
        };
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if let Some(gr) = grads.get(id) {
                adam_update(store.value_mut(id), gr, &mut moments[k], step, opt.learning_rate, 0.0, &opt).unwrap();
            }
        }
    }
    (store, dec, hs)
}

/// Best finished sequence (EOS included, at most `max_len` tokens) by
/// length-normalized score, found by scoring every candidate with a
/// batched teacher-forced pass.
pub fn exhaustive_best(
    store: &speechmt::tensor::ParamStore,
    dec: &speechmt::decoder::AttentionDecoder,
    h: &speechmt::tensor::Tensor,
    max_len: usize,
    alpha: f64,
) -> (Vec<usize>, f64) {
    use speechmt::tensor::{Graph, Mode};
    use speechmt::vocab::{EOS, SOS};
    let v = dec.config.vocab_size;
    let body_tokens: Vec<usize> = (0..v).filter(|&t| t != SOS && t != EOS).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut consider = |tokens: Vec<usize>, logprob: f64| {
        let n = tokens.len() as f64;
        let score = logprob / ((5.0 + n) / 6.0).powf(alpha);
        if best.as_ref().is_none_or(|(_, s)| score > *s) {
            best = Some((tokens, score));
        }
    };
    // Empty body: the first step's EOS probability.
    {
        let mut g = Graph::with_params(store, Mode::Infer);
        let hv = g.constant(h.clone());
        let mem = dec.memory(&mut g, hv).unwrap();
        let st = dec.initial_state(&mut g);
        let out = dec.step(&mut g, SOS, &st, &mem).unwrap();
        let row = g.value(out.logits).data();
        let lse = row.iter().map(|x| (x - row[EOS]).exp()).sum::<f64>().ln();
        consider(vec![EOS], -lse);
    }
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 1..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for &t in &body_tokens {
                let mut b = p.clone();
                b.push(t);
                next.push(b);
            }
        }
        for body in &next {
            let mut g = Graph::with_params(store, Mode::Infer);
            let hv = g.constant(h.clone());
            let tf = dec.teacher_forced(&mut g, hv, body).unwrap();
            let logprob = -g.value(tf.loss).data()[0] * (body.len() + 1) as f64;
            let mut tokens = body.clone();
            tokens.push(EOS);
            consider(tokens, logprob);
        }
        frontier = next;
    }
    best.unwrap()
}

/// Straightforward corpus BLEU: clipped n-gram matches counted by linear
/// scans, closest reference length (ties to the shorter), no smoothing,
/// orders without any hypothesis n-gram skipped.
/// Returns (bleu on 0–100, matches, totals).
pub fn naive_bleu(segments: &[(Vec<String>, Vec<Vec<String>>)], max_n: usize) -> (f64, Vec<usize>, Vec<usize>) {
    fn count(seq: &[String], gram: &[String]) -> usize {
        if seq.len() < gram.len() {
            return 0;
        }
        (0..=seq.len() - gram.len()).filter(|&i| seq[i..i + gram.len()] == *gram).count()
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (hyp, refs) in segments {
        c += hyp.len();
        let mut best = refs[0].len();
        for rf in refs {
            let (d, bd) = (rf.len().abs_diff(hyp.len()), best.abs_diff(hyp.len()));
            if d < bd || (d == bd && rf.len() < best) {
                best = rf.len();
            }
        }
        r += best;
        for n in 1..=max_n {
            if hyp.len() < n {
                continue;
            }
            totals[n - 1] += hyp.len() + 1 - n;
            let mut seen: Vec<&[String]> = Vec::new();
            for i in 0..=hyp.len() - n {
                let gram = &hyp[i..i + n];
                if seen.contains(&gram) {
                    continue;
                }
                seen.push(gram);
                let in_hyp = count(hyp, gram);
                let in_refs = refs.iter().map(|rf| count(rf, gram)).max().unwrap_or(0);
                matches[n - 1] += in_hyp.min(in_refs);
            }
        }
    }
    let used: Vec<(usize, usize)> = matches.iter().copied().zip(totals.iter().copied()).filter(|&(_, t)| t > 0).collect();
    if c == 0 || used.is_empty() || used.iter().any(|&(m, _)| m == 0) {
        return (0.0, matches, totals);
    }
    let log_p: f64 = used.iter().map(|&(m, t)| (m as f64 / t as f64).ln()).sum::<f64>() / used.len() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    (100.0 * bp * log_p.exp(), matches, totals)
}

/// Minimum number of word edits, by recursion over every alignment choice
/// (memoized on the remaining suffixes).
pub fn oracle_edit_distance(r: &[&str], h: &[&str]) -> usize {
    fn go(r: &[&str], h: &[&str], memo: &mut std::collections::HashMap<(usize, usize), usize>) -> usize {
        if r.is_empty() || h.is_empty() {
            return r.len() + h.len();
        }
        if let Some(&v) = memo.get(&(r.len(), h.len())) {
            return v;
        }
        let sub = go(&r[1..], &h[1..], memo) + usize::from(r[0] != h[0]);
        let del = go(&r[1..], h, memo) + 1;
        let ins = go(r, &h[1..], memo) + 1;
        let v = sub.min(del).min(ins);
        memo.insert((r.len(), h.len()), v);
        v
    }
    go(r, h, &mut std::collections::HashMap::new())
}

/// Central-difference checks of every differentiable graph op on small
/// random shapes. Inputs are packed into one flat vector; the op output is
/// reduced with fixed random weights so every output coordinate matters.
pub fn op_grad_checks() -> Vec<(&'static str, speechmt::tensor::GradCheckReport)> {
    use speechmt::tensor::{grad_check, Graph, ParamStore, Tensor, Var};
    use speechmt::Result;

    type OpFn = Box<dyn Fn(&mut Graph<'static>, &[Var]) -> Result<Var>>;

    fn unpack(g: &mut Graph<'static>, flat: Var, shapes: &[Vec<usize>]) -> Result<Vec<Var>> {
        let mut out = Vec::new();
        let mut start = 0;
        for s in shapes {
            let n: usize = s.iter().product();
            let part = g.slice_cols(flat, start, n)?;
            out.push(g.reshape(part, s)?);
            start += n;
        }
        Ok(out)
    }

    fn weighted_sum(g: &mut Graph<'static>, y: Var) -> Result<Var> {
        let shape = g.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 6.0 - 1.0).collect();
        let wv = g.constant(Tensor::new(shape, w)?);
        let p = g.mul(y, wv)?;
        Ok(g.sum(p))
    }

    let norm_id = ParamStore::new().add_norm("bn", 5);
    let cases: Vec<(&'static str, Vec<Vec<usize>>, OpFn)> = vec![
        ("matmul", vec![vec![6, 8], vec![8, 5]], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("add", vec![vec![8, 8], vec![8, 8]], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![vec![8, 8], vec![8, 8]], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![vec![8, 8], vec![8, 8]], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("add_bias", vec![vec![8, 8], vec![8]], Box::new(|g, v| g.add_bias(v[0], v[1]))),
        ("scale", vec![vec![8, 8, 2]], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        ("sigmoid", vec![vec![8, 8, 2]], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        ("tanh", vec![vec![8, 8, 2]], Box::new(|g, v| Ok(g.tanh(v[0])))),
        ("relu", vec![vec![8, 8, 2]], Box::new(|g, v| Ok(g.relu(v[0])))),
        ("softmax", vec![vec![8, 8, 2]], Box::new(|g, v| {
            let x = g.reshape(v[0], &[16, 8])?;
            Ok(g.softmax(x))
        })),
        ("log_softmax", vec![vec![16, 8]], Box::new(|g, v| Ok(g.log_softmax(v[0])))),
        ("sum", vec![vec![8, 8, 2]], Box::new(|g, v| {
            let t = g.tanh(v[0]);
            let s = g.sum(t);
            Ok(g.mul(s, s)?)
        })),
        ("mean", vec![vec![8, 8, 2]], Box::new(|g, v| {
            let t = g.tanh(v[0]);
            let s = g.mean(t);
            Ok(g.mul(s, s)?)
        })),
        ("concat_cols", vec![vec![8, 5], vec![8, 8]], Box::new(|g, v| g.concat_cols(&[v[0], v[1]]))),
        ("concat_rows", vec![vec![5, 8], vec![8, 8]], Box::new(|g, v| g.concat_rows(&[v[0], v[1]]))),
        ("slice_rows", vec![vec![8, 8, 2]], Box::new(|g, v| {
            let x = g.reshape(v[0], &[16, 8])?;
            g.slice_rows(x, 3, 9)
        })),
        ("slice_cols", vec![vec![8, 8, 2]], Box::new(|g, v| {
            let x = g.reshape(v[0], &[8, 16])?;
            g.slice_cols(x, 2, 11)
        })),
        ("transpose", vec![vec![8, 8, 2]], Box::new(|g, v| {
            let x = g.reshape(v[0], &[8, 16])?;
            g.transpose(x)
        })),
        ("reshape", vec![vec![8, 8, 2]], Box::new(|g, v| g.reshape(v[0], &[4, 32]))),
        ("embedding", vec![vec![8, 8, 2]], Box::new(|g, v| {
            let table = g.reshape(v[0], &[16, 8])?;
            g.embedding(table, &[3, 0, 15, 3, 7])
        })),
        ("conv2d_stride1", vec![vec![7, 6, 3], vec![3, 3, 3, 2]], Box::new(|g, v| g.conv2d(v[0], v[1], (1, 1)))),
        ("conv2d_stride2", vec![vec![8, 7, 2], vec![3, 3, 2, 3]], Box::new(|g, v| g.conv2d(v[0], v[1], (2, 2)))),
        ("batch_norm", vec![vec![8, 5, 3], vec![5], vec![5]], Box::new(move |g, v| {
            let x = g.reshape(v[0], &[24, 5])?;
            g.batch_norm(x, v[1], v[2], norm_id)
        })),
        ("lstm_cell", vec![vec![6, 16], vec![6, 4]], Box::new(|g, v| g.lstm_cell(v[0], v[1]))),
        ("cross_entropy", vec![vec![12, 9]], Box::new(|g, v| {
            g.cross_entropy(v[0], &[0, 8, 3, 3, 1, 7, 2, 5, 6, 4, 8, 0])
        })),
        ("dropout", vec![vec![8, 8, 2]], Box::new(|g, v| Ok(g.dropout(v[0], 0.3)))),
    ];

    cases
        .into_iter()
        .map(|(name, shapes, f)| {
            let n: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
            let theta = random_features(n, 1, name.len() as u64 * 31).into_data();
            let theta = Tensor::new(vec![1, n], theta[..n].to_vec()).unwrap();
            let objective = move |g: &mut Graph<'static>, flat: Var| -> Result<Var> {
                let vars = unpack(g, flat, &shapes)?;
                let y = f(g, &vars)?;
                weighted_sum(g, y)
            };
            let samples = if n <= 160 { None } else { Some(160) };
            let report = grad_check(objective, &theta, 1e-5, samples, 1).unwrap();
            (name, report)
        })
        .collect()
}
