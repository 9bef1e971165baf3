//! Encoder plus one or more named task decoders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{AttentionDecoder, DecoderConfig, TeacherForced};
use crate::encoder::{
    encode_batch, speech_block, text_block, EncodedSequence, EncoderBlock, EncoderInput, SpeechEncoderConfig,
    TextEncoderConfig, Trunk,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Mode, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Speech,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input: InputKind,
    pub speech: SpeechEncoderConfig,
    pub text: TextEncoderConfig,
    /// Shared by every task head.
    pub decoder: DecoderConfig,
    pub tasks: Vec<String>,
    /// Encoder LSTM layers shared between tasks; all when absent. Layers
    /// below the LSTM stack are always shared.
    pub shared_layers: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input: InputKind::Speech,
            speech: SpeechEncoderConfig::default(),
            text: TextEncoderConfig::default(),
            decoder: DecoderConfig::default(),
            tasks: vec!["st".into()],
            shared_layers: None,
        }
    }
}

impl ModelConfig {
    /// The published speech configuration with one decoder per task.
    pub fn paper_speech(tasks: &[&str]) -> Self {
        ModelConfig {
            tasks: tasks.iter().map(|s| s.to_string()).collect(),
            ..Self::default()
        }
    }

    /// Speech model with every width divided by four and a 2-layer decoder.
    pub fn toy_speech(tasks: &[&str]) -> Self {
        ModelConfig {
            speech: SpeechEncoderConfig::toy(),
            decoder: DecoderConfig::toy(),
            tasks: tasks.iter().map(|s| s.to_string()).collect(),
            ..Self::default()
        }
    }

    /// Character-level text translation model.
    pub fn paper_text() -> Self {
        ModelConfig {
            input: InputKind::Text,
            decoder: DecoderConfig {
                units: 512,
                attention_hidden: 512,
                attention_dim: 512,
                dropout: 0.2,
                ..DecoderConfig::default()
            },
            tasks: vec!["nmt".into()],
            ..Self::default()
        }
    }

    pub fn encoder_layers(&self) -> usize {
        match self.input {
            InputKind::Speech => self.speech.lstm_layers,
            InputKind::Text => self.text.bidirectional_layers + self.text.unidirectional_layers,
        }
    }

    pub fn encoder_output_dim(&self) -> usize {
        match self.input {
            InputKind::Speech => self.speech.output_dim(),
            InputKind::Text => self.text.output_dim(),
        }
    }

    pub fn shared_layer_count(&self) -> usize {
        self.shared_layers.unwrap_or(self.encoder_layers())
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task decoder is required".into()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.is_empty() || t.contains('/') || t.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid task name {t:?}")));
            }
            if self.tasks[..i].contains(t) {
                return Err(Error::Config(format!("duplicate decoder name {t:?}")));
            }
        }
        if self.shared_layer_count() > self.encoder_layers() {
            return Err(Error::Config(format!(
                "shared_layers {} exceeds the {} encoder LSTM layers",
                self.shared_layer_count(),
                self.encoder_layers()
            )));
        }
        self.decoder.validate()
    }
}

#[derive(Clone, Debug)]
pub struct TaskHead {
    pub name: String,
    /// Encoder layers above the sharing boundary, owned by this task.
    pub blocks: Vec<EncoderBlock>,
    pub decoder: AttentionDecoder,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub trunk: Trunk,
    pub shared: Vec<EncoderBlock>,
    pub heads: Vec<TaskHead>,
}

impl Model {
    /// Builds and initializes every parameter from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = |store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, i: usize| match config.input {
            InputKind::Speech => speech_block(&config.speech, store, rng, prefix, i),
            InputKind::Text => text_block(&config.text, store, rng, prefix, i),
        };
        let trunk = match config.input {
            InputKind::Speech => Trunk::speech(&config.speech, &mut store, &mut rng, "encoder")?,
            InputKind::Text => Trunk::text(&config.text, &mut store, &mut rng, "encoder")?,
        };
        let n_shared = config.shared_layer_count();
        let shared = (0..n_shared)
            .map(|i| block(&mut store, &mut rng, "encoder", i))
            .collect::<Result<Vec<_>>>()?;
        let mut heads = Vec::with_capacity(config.tasks.len());
        for name in &config.tasks {
            let prefix = format!("task/{name}");
            let blocks = (n_shared..config.encoder_layers())
                .map(|i| block(&mut store, &mut rng, &format!("{prefix}/encoder"), i))
                .collect::<Result<Vec<_>>>()?;
            let decoder = AttentionDecoder::new(
                &config.decoder,
                config.encoder_output_dim(),
                &mut store,
                &mut rng,
                &format!("{prefix}/decoder"),
            )?;
            heads.push(TaskHead {
                name: name.clone(),
                blocks,
                decoder,
            });
        }
        Ok(Model {
            config: config.clone(),
            store,
            trunk,
            shared,
            heads,
        })
    }

    pub fn task_names(&self) -> Vec<&str> {
        self.heads.iter().map(|h| h.name.as_str()).collect()
    }

    pub fn task(&self, name: &str) -> Result<&TaskHead> {
        self.heads
            .iter()
            .find(|h| h.name == name)
            .ok_or_else(|| Error::Config(format!("model has no task {name:?} (tasks: {:?})", self.task_names())))
    }

    pub fn input_kind(&self) -> InputKind {
        self.config.input
    }

    /// Encoder states (`L × d`) for each input, as seen by `task`.
    pub fn encode(&self, g: &mut Graph, task: &str, inputs: &[EncoderInput]) -> Result<Vec<Var>> {
        let head = self.task(task)?;
        let blocks: Vec<&EncoderBlock> = self.shared.iter().chain(&head.blocks).collect();
        encode_batch(g, &self.trunk, &blocks, inputs)
    }

    /// Inference-mode encoding of a single input.
    pub fn encode_one(&self, task: &str, id: &str, input: EncoderInput) -> Result<EncodedSequence> {
        let mut g = Graph::with_params(&self.store, Mode::Infer);
        let h = self.encode(&mut g, task, &[input])?[0];
        Ok(EncodedSequence {
            id: id.to_string(),
            h: g.value(h).clone(),
            source_len: input.len(),
        })
    }

    /// Teacher-forced loss of each example, as graph scalars.
    pub fn teacher_forced_batch(
        &self,
        g: &mut Graph,
        task: &str,
        batch: &[(EncoderInput, &[usize])],
    ) -> Result<Vec<TeacherForced>> {
        let inputs: Vec<EncoderInput> = batch.iter().map(|(x, _)| *x).collect();
        let hs = self.encode(g, task, &inputs)?;
        let dec = &self.task(task)?.decoder;
        hs.into_iter()
            .zip(batch)
            .map(|(h, (_, y))| dec.teacher_forced(g, h, y))
            .collect()
    }

    /// Mean over examples of the per-example mean cross-entropy.
    pub fn batch_loss(&self, g: &mut Graph, task: &str, batch: &[(EncoderInput, &[usize])]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let tf = self.teacher_forced_batch(g, task, batch)?;
        let mut total = tf[0].loss;
        for t in &tf[1..] {
            total = g.add(total, t.loss)?;
        }
        Ok(g.scale(total, 1.0 / batch.len() as f64))
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Parameter counts per sub-network, in construction order.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (_, p) in self.store.iter() {
            let group = subnetwork(&p.name);
            match out.last_mut() {
                Some((g, n)) if *g == group => *n += p.value.len(),
                _ => match out.iter_mut().find(|(g, _)| *g == group) {
                    Some((_, n)) => *n += p.value.len(),
                    None => out.push((group, p.value.len())),
                },
            }
        }
        out
    }
}

/// Name of the sub-network a parameter belongs to: the path up to the
/// first component below `encoder` or `decoder`.
pub fn subnetwork(param: &str) -> String {
    let parts: Vec<&str> = param.split('/').collect();
    match parts.iter().position(|p| *p == "encoder" || *p == "decoder") {
        Some(i) if i + 1 < parts.len() => parts[..=i + 1].join("/"),
        _ => param.to_string(),
    }
}
