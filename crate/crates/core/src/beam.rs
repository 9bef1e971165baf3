//! Beam search with rank pruning, length-normalized scoring and an EOS gate.

use std::cmp::Ordering;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decoder::{log_softmax_row, AttentionDecoder, DecoderState, Memory};
use crate::encoder::EncoderInput;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Graph, Mode, ParamStore, Tensor};
use crate::vocab::{normalize_text, Vocabulary, EOS, SOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_width: usize,
    /// Tokens expanded per live beam per step.
    pub rank_prune: usize,
    /// Length-normalization exponent.
    pub length_alpha: f64,
    /// EOS is permitted only when its log-probability beats the best other
    /// token by at least this much. `None` disables the gate.
    pub eos_margin: Option<f64>,
    /// Output length cap in tokens, EOS included. Defaults to
    /// `max(20, ⌈2.5·L⌉)` for encoder length `L`.
    pub max_len: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self::st()
    }
}

impl DecodeConfig {
    pub fn asr() -> Self {
        DecodeConfig {
            beam_width: 3,
            rank_prune: 8,
            length_alpha: 0.0,
            eos_margin: Some(3.0),
            max_len: None,
        }
    }

    pub fn st() -> Self {
        DecodeConfig {
            beam_width: 3,
            rank_prune: 8,
            length_alpha: 0.6,
            eos_margin: None,
            max_len: None,
        }
    }

    /// Defaults for a task name: `asr` gets the recognition settings,
    /// everything else the translation settings.
    pub fn for_task(task: &str) -> Self {
        if task == "asr" {
            Self::asr()
        } else {
            Self::st()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.rank_prune == 0 {
            return Err(Error::Config("beam width and rank pruning must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.length_alpha) {
            return Err(Error::Config(format!("length alpha {} outside [0, 1]", self.length_alpha)));
        }
        if let Some(m) = self.eos_margin {
            if !(m >= 0.0) {
                return Err(Error::Config(format!("EOS margin {m} must be non-negative")));
            }
        }
        if self.max_len == Some(0) {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }

    pub fn max_len_for(&self, encoder_len: usize) -> usize {
        self.max_len
            .unwrap_or_else(|| ((2.5 * encoder_len as f64).ceil() as usize).max(20))
    }
}

/// `((5 + length) / 6)^α`.
pub fn length_penalty(length: usize, alpha: f64) -> f64 {
    ((5.0 + length as f64) / 6.0).powf(alpha)
}

pub fn gnmt_score(logprob: f64, length: usize, alpha: f64) -> f64 {
    logprob / length_penalty(length, alpha)
}

/// Whether EOS may be emitted given one step's log-probabilities.
pub fn eos_allowed(log_probs: &[f64], margin: Option<f64>) -> bool {
    let Some(m) = margin else {
        return true;
    };
    let best_other = log_probs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != EOS && i != SOS)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    log_probs[EOS] >= best_other + m
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, EOS included when finished.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    /// `logprob / lp(|tokens|)`.
    pub score: f64,
    /// One attention row per emitted token.
    pub attention: Vec<Vec<f64>>,
    pub finished: bool,
    /// Cut off at the length limit without an EOS.
    pub forced: bool,
}

impl Hypothesis {
    /// Tokens without the trailing EOS.
    pub fn body(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    pub fn attention_tensor(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.attention)
    }
}

/// Ranked output of one search.
#[derive(Clone, Debug)]
pub struct NBest {
    pub hypotheses: Vec<Hypothesis>,
    /// No hypothesis reached an allowed EOS within the length limit.
    pub forced: bool,
}

impl NBest {
    pub fn best(&self) -> &Hypothesis {
        &self.hypotheses[0]
    }

    /// Lines of the n-best file for utterance `id`, rank 1 first.
    pub fn records(&self, id: &str, vocab: &Vocabulary) -> Result<Vec<NBestRecord>> {
        self.hypotheses
            .iter()
            .enumerate()
            .map(|(i, h)| {
                Ok(NBestRecord {
                    id: id.to_string(),
                    rank: i + 1,
                    score: h.score,
                    logprob: h.logprob,
                    text: vocab.decode(h.body())?,
                })
            })
            .collect()
    }
}

/// One line of an n-best file:
/// `id<TAB>rank<TAB>normalized score<TAB>raw logprob<TAB>text`.
#[derive(Clone, Debug, PartialEq)]
pub struct NBestRecord {
    pub id: String,
    pub rank: usize,
    pub score: f64,
    pub logprob: f64,
    pub text: String,
}

impl NBestRecord {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{}",
            self.id, self.rank, self.score, self.logprob, self.text
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let mut f = line.splitn(5, '\t');
        let id = f.next()?.to_string();
        let rank = f.next()?.parse().ok()?;
        let score = f.next()?.parse().ok()?;
        let logprob = f.next()?.parse().ok()?;
        let text = f.next()?.to_string();
        (!id.is_empty()).then_some(NBestRecord {
            id,
            rank,
            score,
            logprob,
            text,
        })
    }
}

/// Reads an n-best file; blank lines and `#` comments are skipped.
pub fn read_nbest(path: impl AsRef<std::path::Path>) -> Result<Vec<NBestRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(n, l)| {
            NBestRecord::parse(l).ok_or_else(|| Error::Manifest {
                path: path.to_path_buf(),
                line: n + 1,
                detail: "expected id, rank, score, logprob and text separated by tabs".into(),
            })
        })
        .collect()
}

struct Live {
    tokens: Vec<usize>,
    logprob: f64,
    attention: Vec<Vec<f64>>,
    state: DecoderState,
}

fn by_desc(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

/// Beam search over a decoder given encoder states `h` (`L × d`).
pub fn beam_search(dec: &AttentionDecoder, store: &ParamStore, h: &Tensor, cfg: &DecodeConfig) -> Result<NBest> {
    cfg.validate()?;
    let mut g = Graph::with_params(store, Mode::Infer);
    let hv = g.constant(h.clone());
    let mem = dec.memory(&mut g, hv)?;
    let max_len = cfg.max_len_for(mem.len);
    let width = cfg.beam_width;
    let mut live = vec![Live {
        tokens: Vec::new(),
        logprob: 0.0,
        attention: Vec::new(),
        state: dec.initial_state(&mut g),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
        let mut expanded = Vec::with_capacity(live.len());
        for (bi, beam) in live.iter().enumerate() {
            let prev = beam.tokens.last().copied().unwrap_or(SOS);
            let out = dec.step(&mut g, prev, &beam.state, &mem)?;
            let lp = log_softmax_row(g.value(out.logits).data());
            let alpha = g.value(out.alpha).data().to_vec();
            let mut order: Vec<usize> = (0..lp.len()).filter(|&t| t != SOS).collect();
            order.sort_by(|&a, &b| by_desc(lp[a], lp[b]).then(a.cmp(&b)));
            order.truncate(cfg.rank_prune);
            let gate = eos_allowed(&lp, cfg.eos_margin);
            for t in order {
                let total = beam.logprob + lp[t];
                if t == EOS {
                    if gate {
                        let mut tokens = beam.tokens.clone();
                        tokens.push(EOS);
                        let mut attention = beam.attention.clone();
                        attention.push(alpha.clone());
                        let score = gnmt_score(total, tokens.len(), cfg.length_alpha);
                        finished.push(Hypothesis {
                            tokens,
                            logprob: total,
                            score,
                            attention,
                            finished: true,
                            forced: false,
                        });
                    }
                } else {
                    candidates.push((bi, t, total));
                }
            }
            expanded.push((out.state, alpha));
        }
        finished.sort_by(|a, b| by_desc(a.score, b.score));
        finished.truncate(width);

        candidates.sort_by(|a, b| by_desc(a.2, b.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        candidates.truncate(width);
        live = candidates
            .into_iter()
            .map(|(bi, t, total)| {
                let parent = &live[bi];
                let mut tokens = parent.tokens.clone();
                tokens.push(t);
                let mut attention = parent.attention.clone();
                attention.push(expanded[bi].1.clone());
                Live {
                    tokens,
                    logprob: total,
                    attention,
                    state: expanded[bi].0.clone(),
                }
            })
            .collect();

        if live.is_empty() {
            break;
        }
        if finished.len() >= width {
            let worst = finished.last().expect("pool is full").score;
            // Log-probabilities only fall as tokens are added, and a longer
            // output can at most be divided by the penalty at the length cap.
            let best_live = live[0].logprob;
            let bound = if cfg.length_alpha > 0.0 {
                best_live / length_penalty(max_len, cfg.length_alpha)
            } else {
                best_live
            };
            if bound <= worst {
                break;
            }
        }
    }

    let forced = finished.is_empty();
    if forced {
        finished = live
            .into_iter()
            .map(|b| Hypothesis {
                score: gnmt_score(b.logprob, b.tokens.len().max(1), cfg.length_alpha),
                tokens: b.tokens,
                logprob: b.logprob,
                attention: b.attention,
                finished: false,
                forced: true,
            })
            .collect();
        finished.sort_by(|a, b| by_desc(a.score, b.score));
        if !finished.is_empty() {
            log::warn!("no hypothesis reached EOS within {max_len} tokens; returning forced results");
        }
    }
    if finished.is_empty() {
        return Err(Error::State("beam search produced no hypotheses".into()));
    }
    Ok(NBest {
        hypotheses: finished,
        forced,
    })
}

/// Greedy argmax decoding: emits the most probable token each step and
/// stops at EOS or the length cap.
pub fn greedy_search(dec: &AttentionDecoder, store: &ParamStore, h: &Tensor, max_len: Option<usize>) -> Result<Hypothesis> {
    let mut g = Graph::with_params(store, Mode::Infer);
    let hv = g.constant(h.clone());
    let mem = dec.memory(&mut g, hv)?;
    let max_len = max_len.unwrap_or_else(|| DecodeConfig::st().max_len_for(mem.len));
    let mut st = dec.initial_state(&mut g);
    let mut tokens = Vec::new();
    let mut attention = Vec::new();
    let mut logprob = 0.0;
    let mut prev = SOS;
    while tokens.len() < max_len {
        let out = dec.step(&mut g, prev, &st, &mem)?;
        let lp = log_softmax_row(g.value(out.logits).data());
        let best = (0..lp.len())
            .filter(|&t| t != SOS)
            .fold(None, |b: Option<usize>, t| match b {
                Some(b) if lp[b] >= lp[t] => Some(b),
                _ => Some(t),
            })
            .expect("vocabulary has non-SOS tokens");
        logprob += lp[best];
        tokens.push(best);
        attention.push(g.value(out.alpha).data().to_vec());
        st = out.state;
        prev = best;
        if best == EOS {
            break;
        }
    }
    let finished = tokens.last() == Some(&EOS);
    Ok(Hypothesis {
        score: logprob,
        tokens,
        logprob,
        attention,
        finished,
        forced: !finished,
    })
}

/// Log-probability of `tokens` (EOS included if present) under teacher
/// forcing, step by step.
pub fn replay_logprob(dec: &AttentionDecoder, store: &ParamStore, h: &Tensor, tokens: &[usize]) -> Result<f64> {
    let mut g = Graph::with_params(store, Mode::Infer);
    let hv = g.constant(h.clone());
    let mem: Memory = dec.memory(&mut g, hv)?;
    let mut st = dec.initial_state(&mut g);
    let mut prev = SOS;
    let mut total = 0.0;
    for &t in tokens {
        let out = dec.step(&mut g, prev, &st, &mem)?;
        total += log_softmax_row(g.value(out.logits).data())[t];
        st = out.state;
        prev = t;
    }
    Ok(total)
}

impl Model {
    pub fn beam_decode(&self, task: &str, id: &str, input: EncoderInput, cfg: &DecodeConfig) -> Result<NBest> {
        let enc = self.encode_one(task, id, input)?;
        beam_search(&self.task(task)?.decoder, &self.store, &enc.h, cfg)
    }

    pub fn greedy_decode(&self, task: &str, input: EncoderInput, max_len: Option<usize>) -> Result<Hypothesis> {
        let enc = self.encode_one(task, "", input)?;
        greedy_search(&self.task(task)?.decoder, &self.store, &enc.h, max_len)
    }
}

#[derive(Clone, Debug)]
pub struct CascadeOutput {
    pub recognized: Hypothesis,
    /// Normalized recognizer text passed to the translator.
    pub source_text: String,
    /// `None` when recognition produced no text.
    pub translation: Option<Hypothesis>,
    pub translation_text: String,
    pub asr_ms: f64,
    pub mt_ms: f64,
}

impl CascadeOutput {
    pub fn is_empty(&self) -> bool {
        self.translation.is_none()
    }
}

/// Recognizes speech, normalizes the 1-best text and translates it.
#[allow(clippy::too_many_arguments)]
pub fn decode_cascade(
    asr: &Model,
    asr_task: &str,
    mt: &Model,
    mt_task: &str,
    features: &Tensor,
    vocab: &Vocabulary,
    asr_cfg: &DecodeConfig,
    mt_cfg: &DecodeConfig,
) -> Result<CascadeOutput> {
    let t0 = Instant::now();
    let rec = asr.beam_decode(asr_task, "", EncoderInput::Features(features), asr_cfg)?;
    let asr_ms = t0.elapsed().as_secs_f64() * 1e3;
    let recognized = rec.best().clone();
    let source_text = normalize_text(&vocab.decode(recognized.body())?);
    let ids = vocab.encode(&source_text);
    if ids.is_empty() {
        return Ok(CascadeOutput {
            recognized,
            source_text,
            translation: None,
            translation_text: String::new(),
            asr_ms,
            mt_ms: 0.0,
        });
    }
    let t1 = Instant::now();
    let tr = mt.beam_decode(mt_task, "", EncoderInput::Tokens(&ids), mt_cfg)?;
    let mt_ms = t1.elapsed().as_secs_f64() * 1e3;
    let translation = tr.best().clone();
    let translation_text = vocab.decode(translation.body())?;
    log::info!("cascade timing: asr {asr_ms:.1} ms, mt {mt_ms:.1} ms");
    Ok(CascadeOutput {
        recognized,
        source_text,
        translation: Some(translation),
        translation_text,
        asr_ms,
        mt_ms,
    })
}
