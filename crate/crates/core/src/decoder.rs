//! Stacked-LSTM attention decoder.
//!
//! Layer 1 reads the previous token embedding and the previous context;
//! its output queries the encoder states; deeper layers and the output
//! layer read the fresh context through skip connections.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{lstm_step, Linear, LstmState, LstmWeights, Mlp};
use crate::tensor::{Graph, ParamId, ParamKind, ParamStore, Tensor, Var};
use crate::vocab::{validate_body, EOS, SOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub depth: usize,
    pub units: usize,
    pub embedding_dim: usize,
    /// Hidden width of the two attention networks.
    pub attention_hidden: usize,
    /// Output width of the two attention networks (the dot-product space).
    pub attention_dim: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            depth: 4,
            units: 256,
            embedding_dim: 64,
            attention_hidden: 128,
            attention_dim: 128,
            vocab_size: crate::vocab::VOCAB_SIZE,
            dropout: 0.0,
        }
    }
}

impl DecoderConfig {
    /// Widths divided by four, two layers.
    pub fn toy() -> Self {
        DecoderConfig {
            depth: 2,
            units: 64,
            embedding_dim: 16,
            attention_hidden: 32,
            attention_dim: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("decoder depth must be at least 1".into()));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config("decoder vocabulary must hold SOS, EOS and UNK".into()));
        }
        if self.units == 0 || self.embedding_dim == 0 || self.attention_hidden == 0 || self.attention_dim == 0 {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AttentionDecoder {
    pub config: DecoderConfig,
    pub context_dim: usize,
    pub embedding: ParamId,
    pub layers: Vec<LstmWeights>,
    /// Applied to encoder states.
    pub key_net: Mlp,
    /// Applied to the first-layer output.
    pub query_net: Mlp,
    pub output: Linear,
}

/// Encoder states bound into a graph, with keys precomputed once.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    /// `L × context_dim`.
    pub h: Var,
    /// `attention_dim × L`.
    pub keys_t: Var,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderState {
    pub layers: Vec<LstmState>,
    /// Context from the previous step, `1 × context_dim`.
    pub context: Var,
    pub step: usize,
}

pub struct StepOutput {
    /// `1 × vocab` pre-softmax scores.
    pub logits: Var,
    /// `1 × L` attention weights.
    pub alpha: Var,
    pub state: DecoderState,
}

impl AttentionDecoder {
    pub fn new<R: Rng>(
        cfg: &DecoderConfig,
        context_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
    ) -> Result<Self> {
        cfg.validate()?;
        let embedding = store.add_uniform(
            format!("{prefix}/embedding"),
            &[cfg.vocab_size, cfg.embedding_dim],
            0.1,
            ParamKind::DecoderEmbedding,
            rng,
        )?;
        let mut layers = Vec::with_capacity(cfg.depth);
        for n in 0..cfg.depth {
            let input = if n == 0 { cfg.embedding_dim } else { cfg.units } + context_dim;
            layers.push(LstmWeights::new(store, rng, &format!("{prefix}/lstm{}", n + 1), input, cfg.units)?);
        }
        let key_net = Mlp::new(
            store,
            rng,
            &format!("{prefix}/attention/key"),
            context_dim,
            cfg.attention_hidden,
            cfg.attention_dim,
        )?;
        let query_net = Mlp::new(
            store,
            rng,
            &format!("{prefix}/attention/query"),
            cfg.units,
            cfg.attention_hidden,
            cfg.attention_dim,
        )?;
        let output = Linear::new(store, rng, &format!("{prefix}/output"), cfg.units + context_dim, cfg.vocab_size)?;
        Ok(AttentionDecoder {
            config: cfg.clone(),
            context_dim,
            embedding,
            layers,
            key_net,
            query_net,
            output,
        })
    }

    pub fn memory(&self, g: &mut Graph, h: Var) -> Result<Memory> {
        let s = g.shape(h).to_vec();
        if s.len() != 2 || s[1] != self.context_dim {
            return Err(Error::dim(
                "attention",
                format!("encoder states {s:?} are not L×{}", self.context_dim),
            ));
        }
        let keys = self.key_net.forward(g, h)?;
        let keys_t = g.transpose(keys)?;
        Ok(Memory { h, keys_t, len: s[0] })
    }

    pub fn initial_state(&self, g: &mut Graph) -> DecoderState {
        let layers = self.layers.iter().map(|l| l.zero_state(g)).collect();
        let context = g.constant(Tensor::zeros(&[1, self.context_dim]));
        DecoderState {
            layers,
            context,
            step: 0,
        }
    }

    /// Context and attention weights for query source `o1` (`1 × units`).
    pub fn attend(&self, g: &mut Graph, mem: &Memory, o1: Var) -> Result<(Var, Var)> {
        let q = self.query_net.forward(g, o1)?;
        let scores = g.matmul(q, mem.keys_t)?;
        let alpha = g.softmax(scores);
        let c = g.matmul(alpha, mem.h)?;
        Ok((c, alpha))
    }

    pub fn step(&self, g: &mut Graph, y_prev: usize, st: &DecoderState, mem: &Memory) -> Result<StepOutput> {
        if st.layers.len() != self.layers.len() {
            return Err(Error::dim(
                "decode_step",
                format!("state has {} layers, decoder {}", st.layers.len(), self.layers.len()),
            ));
        }
        if g.shape(st.context) != [1, self.context_dim] {
            return Err(Error::dim(
                "decode_step",
                format!("context {:?} is not 1×{}", g.shape(st.context), self.context_dim),
            ));
        }
        let table = g.param(self.embedding)?;
        let e = g.embedding(table, &[y_prev])?;
        let x = g.concat_cols(&[e, st.context])?;
        let mut layers = Vec::with_capacity(self.layers.len());
        let s1 = lstm_step(g, x, &st.layers[0], &self.layers[0])?;
        layers.push(s1);
        let mut o = g.dropout(s1.h, self.config.dropout);
        let (c, alpha) = self.attend(g, mem, s1.h)?;
        for (w, prev) in self.layers.iter().zip(&st.layers).skip(1) {
            let x = g.concat_cols(&[o, c])?;
            let s = lstm_step(g, x, prev, w)?;
            layers.push(s);
            o = g.dropout(s.h, self.config.dropout);
        }
        let top = g.concat_cols(&[o, c])?;
        let logits = self.output.forward(g, top)?;
        Ok(StepOutput {
            logits,
            alpha,
            state: DecoderState {
                layers,
                context: c,
                step: st.step + 1,
            },
        })
    }

    /// Feeds `SOS, y_1..y_K` and scores `y_1..y_K, EOS`.
    pub fn teacher_forced(&self, g: &mut Graph, h: Var, target: &[usize]) -> Result<TeacherForced> {
        if target.is_empty() {
            return Err(Error::Input("empty target sequence".into()));
        }
        validate_body(target, self.config.vocab_size)?;
        let mem = self.memory(g, h)?;
        let mut st = self.initial_state(g);
        let mut logits = Vec::with_capacity(target.len() + 1);
        let mut alphas = Vec::with_capacity(target.len() + 1);
        let mut prev = SOS;
        for &y in target.iter().chain(std::iter::once(&EOS)) {
            let out = self.step(g, prev, &st, &mem)?;
            logits.push(out.logits);
            alphas.push(out.alpha);
            st = out.state;
            prev = y;
        }
        let logits = g.concat_rows(&logits)?;
        let mut gold = target.to_vec();
        gold.push(EOS);
        let loss = g.cross_entropy(logits, &gold)?;
        Ok(TeacherForced {
            loss,
            logits,
            alphas,
            targets: gold,
        })
    }
}

#[derive(Debug)]
pub struct TeacherForced {
    /// Mean cross-entropy over the `K + 1` steps.
    pub loss: Var,
    /// `(K + 1) × vocab`.
    pub logits: Var,
    pub alphas: Vec<Var>,
    /// `y_1..y_K, EOS`.
    pub targets: Vec<usize>,
}

impl TeacherForced {
    /// Log-probability of each gold token.
    pub fn step_log_probs(&self, g: &Graph) -> Vec<f64> {
        let l = g.value(self.logits);
        self.targets
            .iter()
            .enumerate()
            .map(|(k, &y)| log_softmax_row(l.row_slice(k))[y])
            .collect()
    }

    pub fn alignment(&self, g: &Graph) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = self.alphas.iter().map(|&a| g.value(a).data().to_vec()).collect();
        Tensor::from_rows(&rows)
    }
}

pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let lse = crate::tensor::log_sum_exp(row);
    row.iter().map(|x| x - lse).collect()
}

/// Attention weights of one decode: one row per output token.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrix {
    pub id: String,
    pub decoder: String,
    /// Output token labels, one per row.
    pub tokens: Vec<String>,
    /// `K × L`.
    pub alpha: Tensor,
}

impl AlignmentMatrix {
    pub fn new(id: &str, decoder: &str, tokens: Vec<String>, alpha: Tensor) -> Result<Self> {
        if alpha.rank() != 2 || alpha.rows() != tokens.len() {
            return Err(Error::dim(
                "alignment",
                format!("{} token labels for attention of shape {:?}", tokens.len(), alpha.shape()),
            ));
        }
        Ok(AlignmentMatrix {
            id: id.to_string(),
            decoder: decoder.to_string(),
            tokens,
            alpha,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.tokens.len()
    }

    /// Largest deviation of a row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.alpha.rows())
            .map(|r| (self.alpha.row_slice(r).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn row_argmax(&self) -> Vec<usize> {
        (0..self.alpha.rows())
            .map(|r| {
                let row = self.alpha.row_slice(r);
                (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
            })
            .collect()
    }

    /// Fraction of consecutive rows whose argmax does not move backwards.
    pub fn monotonic_fraction(&self) -> f64 {
        let am = self.row_argmax();
        if am.len() < 2 {
            return 1.0;
        }
        let ok = am.windows(2).filter(|w| w[1] >= w[0]).count();
        ok as f64 / (am.len() - 1) as f64
    }

    /// Tab-separated matrix: a header row of frame indices, then one row per
    /// output token led by its label. Comment lines carry the ids.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# utterance\t{}\n# decoder\t{}\ntoken", self.id, self.decoder);
        for l in 0..self.alpha.cols() {
            let _ = write!(s, "\t{l}");
        }
        s.push('\n');
        for (r, tok) in self.tokens.iter().enumerate() {
            s.push_str(&escape_label(tok));
            for v in self.alpha.row_slice(r) {
                let _ = write!(s, "\t{v:.6e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |d: String| Error::corrupt("alignment", d);
        let mut id = String::new();
        let mut decoder = String::new();
        let mut cols = None;
        let mut tokens = Vec::new();
        let mut rows = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# ") {
                match rest.split_once('\t') {
                    Some(("utterance", v)) => id = v.to_string(),
                    Some(("decoder", v)) => decoder = v.to_string(),
                    _ => {}
                }
                continue;
            }
            let mut fields = line.split('\t');
            let head = fields.next().unwrap_or_default();
            if cols.is_none() {
                cols = Some(fields.count());
                continue;
            }
            tokens.push(unescape_label(head));
            let row = fields
                .map(|f| f.parse::<f64>().map_err(|e| bad(format!("{f:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if Some(row.len()) != cols {
                return Err(bad(format!("row of {} values, header has {cols:?}", row.len())));
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(bad("no attention rows".into()));
        }
        AlignmentMatrix::new(&id, &decoder, tokens, Tensor::from_rows(&rows)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

fn escape_label(s: &str) -> String {
    match s {
        " " => "<space>".into(),
        "\t" => "<tab>".into(),
        other => other.into(),
    }
}

fn unescape_label(s: &str) -> String {
    match s {
        "<space>" => " ".into(),
        "<tab>" => "\t".into(),
        other => other.into(),
    }
}
