//! Speech and text encoders: a trunk that is always shared between tasks,
//! followed by a stack of recurrent blocks that may be shared or per task.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, BiLstm, Conv2dLayer, ConvLstm, Linear, LstmWeights};
use crate::tensor::{Graph, ParamId, ParamKind, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeechEncoderConfig {
    pub n_mels: usize,
    pub conv_layers: usize,
    pub conv_filters: usize,
    pub conv_kernel: [usize; 2],
    pub conv_stride: [usize; 2],
    pub conv_lstm_filters: usize,
    pub conv_lstm_width: usize,
    pub lstm_layers: usize,
    /// Units per direction.
    pub lstm_units: usize,
    pub projection_dim: usize,
    /// Adds a projection after the last LSTM layer as well as between layers.
    pub final_projection: bool,
}

impl Default for SpeechEncoderConfig {
    fn default() -> Self {
        SpeechEncoderConfig {
            n_mels: 80,
            conv_layers: 2,
            conv_filters: 32,
            conv_kernel: [3, 3],
            conv_stride: [2, 2],
            conv_lstm_filters: 32,
            conv_lstm_width: 3,
            lstm_layers: 3,
            lstm_units: 256,
            projection_dim: 512,
            final_projection: false,
        }
    }
}

impl SpeechEncoderConfig {
    /// Widths divided by four.
    pub fn toy() -> Self {
        SpeechEncoderConfig {
            conv_filters: 8,
            conv_lstm_filters: 8,
            lstm_units: 64,
            projection_dim: 128,
            ..Self::default()
        }
    }

    pub fn output_dim(&self) -> usize {
        if self.final_projection {
            self.projection_dim
        } else {
            2 * self.lstm_units
        }
    }

    /// Encoder length for `t` input frames.
    pub fn encoded_len(&self, t: usize) -> usize {
        (0..self.conv_layers).fold(t, |n, _| n.div_ceil(self.conv_stride[0]))
    }

    pub fn encoded_freq(&self) -> usize {
        (0..self.conv_layers).fold(self.n_mels, |n, _| n.div_ceil(self.conv_stride[1]))
    }

    fn validate(&self) -> Result<()> {
        if self.conv_stride.contains(&0) {
            return Err(Error::Config("conv stride must be positive".into()));
        }
        if self.lstm_layers == 0 || self.lstm_units == 0 || self.n_mels == 0 {
            return Err(Error::Config("speech encoder needs LSTM layers, units and mel channels".into()));
        }
        if self.conv_lstm_width % 2 == 0 {
            return Err(Error::Config("conv-LSTM filter width must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub bidirectional_layers: usize,
    pub unidirectional_layers: usize,
    pub units: usize,
    pub dropout: f64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            vocab_size: crate::vocab::VOCAB_SIZE,
            embedding_dim: 64,
            bidirectional_layers: 1,
            unidirectional_layers: 3,
            units: 512,
            dropout: 0.2,
        }
    }
}

impl TextEncoderConfig {
    pub fn output_dim(&self) -> usize {
        if self.unidirectional_layers == 0 {
            2 * self.units
        } else {
            self.units
        }
    }

    fn validate(&self) -> Result<()> {
        if self.bidirectional_layers + self.unidirectional_layers == 0 || self.units == 0 {
            return Err(Error::Config("text encoder needs at least one LSTM layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Linear map, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct Projection {
    pub linear: Linear,
    pub norm: BatchNorm,
}

impl Projection {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Projection {
            linear: Linear::new(store, rng, name, input, output)?,
            norm: BatchNorm::new(store, &format!("{name}/norm"), output)?,
        })
    }

    fn forward_batch(&self, g: &mut Graph, xs: &[Var]) -> Result<Vec<Var>> {
        let ys = xs
            .iter()
            .map(|&x| self.linear.forward(g, x))
            .collect::<Result<Vec<_>>>()?;
        let ys = self.norm.forward_batch(g, &ys)?;
        Ok(ys.into_iter().map(|y| g.relu(y)).collect())
    }
}

/// One recurrent layer of the encoder stack (the unit of sharing).
#[derive(Clone, Debug)]
pub enum EncoderBlock {
    Speech {
        pre: Option<Projection>,
        lstm: BiLstm,
        post: Option<Projection>,
    },
    TextBi {
        lstm: BiLstm,
        dropout: f64,
    },
    TextUni {
        lstm: LstmWeights,
        dropout: f64,
    },
}

impl EncoderBlock {
    pub fn output_dim(&self) -> usize {
        match self {
            EncoderBlock::Speech { post: Some(p), .. } => p.linear.out_dim,
            EncoderBlock::Speech { lstm, .. } | EncoderBlock::TextBi { lstm, .. } => 2 * lstm.fw.hidden,
            EncoderBlock::TextUni { lstm, .. } => lstm.hidden,
        }
    }

    pub fn forward_batch(&self, g: &mut Graph, xs: &[Var]) -> Result<Vec<Var>> {
        match self {
            EncoderBlock::Speech { pre, lstm, post } => {
                let xs = match pre {
                    Some(p) => p.forward_batch(g, xs)?,
                    None => xs.to_vec(),
                };
                let ys = xs
                    .iter()
                    .map(|&x| lstm.forward(g, x))
                    .collect::<Result<Vec<_>>>()?;
                match post {
                    Some(p) => p.forward_batch(g, &ys),
                    None => Ok(ys),
                }
            }
            EncoderBlock::TextBi { lstm, dropout } => xs
                .iter()
                .map(|&x| {
                    let y = lstm.forward(g, x)?;
                    Ok(g.dropout(y, *dropout))
                })
                .collect(),
            EncoderBlock::TextUni { lstm, dropout } => xs
                .iter()
                .map(|&x| {
                    let y = lstm.run(g, x, false)?;
                    Ok(g.dropout(y, *dropout))
                })
                .collect(),
        }
    }
}

/// Builds LSTM block `index` of a speech stack.
pub fn speech_block<R: Rng>(
    cfg: &SpeechEncoderConfig,
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    index: usize,
) -> Result<EncoderBlock> {
    let lstm_out = 2 * cfg.lstm_units;
    let (pre, input) = if index == 0 {
        (None, cfg.encoded_freq() * 2 * cfg.conv_lstm_filters)
    } else {
        let p = Projection::new(store, rng, &format!("{prefix}/proj{index}"), lstm_out, cfg.projection_dim)?;
        (Some(p), cfg.projection_dim)
    };
    let lstm = BiLstm::new(store, rng, &format!("{prefix}/lstm{}", index + 1), input, cfg.lstm_units)?;
    let post = if cfg.final_projection && index + 1 == cfg.lstm_layers {
        Some(Projection::new(
            store,
            rng,
            &format!("{prefix}/proj{}", index + 1),
            lstm_out,
            cfg.projection_dim,
        )?)
    } else {
        None
    };
    Ok(EncoderBlock::Speech { pre, lstm, post })
}

/// Builds LSTM block `index` of a text stack.
pub fn text_block<R: Rng>(
    cfg: &TextEncoderConfig,
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    index: usize,
) -> Result<EncoderBlock> {
    let name = format!("{prefix}/lstm{}", index + 1);
    let nb = cfg.bidirectional_layers;
    if index < nb {
        let input = if index == 0 { cfg.embedding_dim } else { 2 * cfg.units };
        Ok(EncoderBlock::TextBi {
            lstm: BiLstm::new(store, rng, &name, input, cfg.units)?,
            dropout: cfg.dropout,
        })
    } else {
        let input = match (index, nb) {
            (0, _) => cfg.embedding_dim,
            (i, nb) if i == nb => 2 * cfg.units,
            _ => cfg.units,
        };
        Ok(EncoderBlock::TextUni {
            lstm: LstmWeights::new(store, rng, &name, input, cfg.units)?,
            dropout: cfg.dropout,
        })
    }
}

/// Layers below the LSTM stack; always shared between tasks.
#[derive(Clone, Debug)]
pub enum Trunk {
    Speech {
        convs: Vec<(Conv2dLayer, BatchNorm)>,
        conv_lstm: ConvLstm,
        conv_lstm_norm: BatchNorm,
        n_mels: usize,
    },
    Text {
        embedding: ParamId,
        vocab_size: usize,
    },
}

/// Input to an encoder: stacked features `T × F × 3` or source tokens.
#[derive(Clone, Copy, Debug)]
pub enum EncoderInput<'a> {
    Features(&'a Tensor),
    Tokens(&'a [usize]),
}

impl EncoderInput<'_> {
    pub fn len(&self) -> usize {
        match self {
            EncoderInput::Features(t) => t.shape()[0],
            EncoderInput::Tokens(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Trunk {
    pub fn speech<R: Rng>(cfg: &SpeechEncoderConfig, store: &mut ParamStore, rng: &mut R, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::with_capacity(cfg.conv_layers);
        let mut depth = 3;
        for i in 0..cfg.conv_layers {
            let name = format!("{prefix}/conv{}", i + 1);
            let conv = Conv2dLayer::new(
                store,
                rng,
                &name,
                (cfg.conv_kernel[0], cfg.conv_kernel[1]),
                depth,
                cfg.conv_filters,
                (cfg.conv_stride[0], cfg.conv_stride[1]),
            )?;
            let norm = BatchNorm::new(store, &format!("{name}/norm"), cfg.conv_filters)?;
            convs.push((conv, norm));
            depth = cfg.conv_filters;
        }
        let name = format!("{prefix}/conv_lstm");
        let conv_lstm = ConvLstm::new(store, rng, &name, depth, cfg.conv_lstm_filters, cfg.conv_lstm_width)?;
        let conv_lstm_norm = BatchNorm::new(store, &format!("{name}/norm"), 2 * cfg.conv_lstm_filters)?;
        Ok(Trunk::Speech {
            convs,
            conv_lstm,
            conv_lstm_norm,
            n_mels: cfg.n_mels,
        })
    }

    pub fn text<R: Rng>(cfg: &TextEncoderConfig, store: &mut ParamStore, rng: &mut R, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let embedding = store.add_uniform(
            format!("{prefix}/embedding"),
            &[cfg.vocab_size, cfg.embedding_dim],
            0.1,
            ParamKind::TextEmbedding,
            rng,
        )?;
        Ok(Trunk::Text {
            embedding,
            vocab_size: cfg.vocab_size,
        })
    }

    /// Maps each input to a `rows × dim` sequence for the LSTM stack.
    pub fn forward_batch(&self, g: &mut Graph, inputs: &[EncoderInput]) -> Result<Vec<Var>> {
        if inputs.is_empty() {
            return Err(Error::Input("empty encoder batch".into()));
        }
        match self {
            Trunk::Speech {
                convs,
                conv_lstm,
                conv_lstm_norm,
                n_mels,
            } => {
                let mut xs = Vec::with_capacity(inputs.len());
                for inp in inputs {
                    let EncoderInput::Features(t) = inp else {
                        return Err(Error::Input("speech encoder given token input".into()));
                    };
                    if t.rank() != 3 || t.shape()[1] != *n_mels || t.shape()[2] != 3 {
                        return Err(Error::dim(
                            "encode_speech",
                            format!("features {:?} are not T×{n_mels}×3", t.shape()),
                        ));
                    }
                    xs.push(g.constant((*t).clone()));
                }
                for (conv, norm) in convs {
                    let ys = xs
                        .iter()
                        .map(|&x| {
                            let y = conv.forward(g, x)?;
                            Ok(g.relu(y))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    xs = norm.forward_batch(g, &ys)?;
                }
                let ys = xs
                    .iter()
                    .map(|&x| conv_lstm.forward(g, x))
                    .collect::<Result<Vec<_>>>()?;
                let ys = conv_lstm_norm.forward_batch(g, &ys)?;
                ys.into_iter()
                    .map(|y| {
                        let s = g.shape(y).to_vec();
                        g.reshape(y, &[s[0], s[1] * s[2]])
                    })
                    .collect()
            }
            Trunk::Text { embedding, vocab_size } => inputs
                .iter()
                .map(|inp| {
                    let EncoderInput::Tokens(ids) = inp else {
                        return Err(Error::Input("text encoder given feature input".into()));
                    };
                    if ids.is_empty() {
                        return Err(Error::Input("empty token sequence".into()));
                    }
                    if let Some(&bad) = ids.iter().find(|&&i| i >= *vocab_size) {
                        return Err(Error::Input(format!("token {bad} outside vocabulary of {vocab_size}")));
                    }
                    let table = g.param(*embedding)?;
                    g.embedding(table, ids)
                })
                .collect(),
        }
    }
}

/// Encoder output for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub id: String,
    /// `L × d` encoder states.
    pub h: Tensor,
    pub source_len: usize,
}

/// Cosine similarity of two flattened tensors.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> f64 {
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    dot / (a.norm_sq().sqrt() * b.norm_sq().sqrt()).max(f64::MIN_POSITIVE)
}

/// Runs trunk then blocks over a batch.
pub fn encode_batch(
    g: &mut Graph,
    trunk: &Trunk,
    blocks: &[&EncoderBlock],
    inputs: &[EncoderInput],
) -> Result<Vec<Var>> {
    let mut xs = trunk.forward_batch(g, inputs)?;
    for b in blocks {
        xs = b.forward_batch(g, &xs)?;
    }
    Ok(xs)
}
