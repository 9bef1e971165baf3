use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{adam_update, apply_weight_noise, Moments, OptimizerConfig, TaskSchedule};
use crate::data::{BatchIterator, Example};
use crate::encoder::EncoderInput;
use crate::error::{Error, Result};
use crate::frontend::FeatureNormalizer;
use crate::model::{Model, ModelConfig};
use crate::tensor::{Graph, Mode};
use crate::vocab::Vocabulary;

const TASK_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub schedule: TaskSchedule,
    /// Width of the input-length buckets used to form batches.
    #[serde(default = "default_bucket_width")]
    pub bucket_width: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_bucket_width() -> usize {
    25
}

impl TrainerConfig {
    pub fn single(task: &str, optimizer: OptimizerConfig, seed: u64) -> Self {
        TrainerConfig {
            optimizer,
            schedule: TaskSchedule::single(task),
            bucket_width: default_bucket_width(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.schedule.validate()?;
        if self.bucket_width == 0 {
            return Err(Error::Config("bucket width must be at least 1".into()));
        }
        Ok(())
    }
}

/// Hash of the model and trainer configuration, as recorded in checkpoints.
pub fn config_hash(model: &ModelConfig, trainer: &TrainerConfig) -> String {
    #[derive(Serialize)]
    struct Both<'a> {
        model: &'a ModelConfig,
        trainer: &'a TrainerConfig,
    }
    let text = toml::to_string(&Both { model, trainer }).expect("configs serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Training examples of one task.
#[derive(Clone, Debug)]
pub struct TaskCorpus {
    pub task: String,
    pub examples: Vec<Example>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub step: u64,
    pub task: String,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

impl LogEntry {
    pub const HEADER: &'static str = "# step\ttask\tloss\tgrad_norm\tlr\twall_ms";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{:.9e}\t{:.9e}\t{:e}\t{:.3}",
            self.step, self.task, self.loss, self.grad_norm, self.lr, self.wall_ms
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Input(format!("malformed training log line {line:?}"));
        if f.len() != 6 {
            return Err(bad());
        }
        Ok(LogEntry {
            step: f[0].parse().map_err(|_| bad())?,
            task: f[1].to_string(),
            loss: f[2].parse().map_err(|_| bad())?,
            grad_norm: f[3].parse().map_err(|_| bad())?,
            lr: f[4].parse().map_err(|_| bad())?,
            wall_ms: f[5].parse().map_err(|_| bad())?,
        })
    }
}

/// Everything beyond the model that a resumed run needs.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Completed updates.
    pub step: u64,
    pub moments: Vec<Moments>,
    /// Updates applied to each parameter (drives bias correction).
    pub adam_steps: Vec<u64>,
    pub task_rng: ChaCha8Rng,
    pub noise_rng: ChaCha8Rng,
    /// `(epoch, position)` of each task's batch iterator.
    pub cursors: Vec<(u64, usize)>,
}

impl TrainState {
    pub fn fresh(model: &Model, config: &TrainerConfig) -> Self {
        let mut task_rng = ChaCha8Rng::seed_from_u64(config.seed);
        task_rng.set_stream(TASK_STREAM);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
        noise_rng.set_stream(NOISE_STREAM);
        TrainState {
            step: 0,
            moments: model.store.iter().map(|(_, p)| Moments::zeros(p.value.shape())).collect(),
            adam_steps: vec![0; model.store.len()],
            task_rng,
            noise_rng,
            cursors: vec![(0, 0); config.schedule.tasks.len()],
        }
    }
}

#[derive(Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainerConfig,
    pub vocab: Vocabulary,
    pub normalizer: Option<FeatureNormalizer>,
    pub config_hash: String,
    pub state: TrainState,
    corpora: Vec<TaskCorpus>,
    iterators: Vec<BatchIterator>,
    pub log: Vec<LogEntry>,
}

impl Trainer {
    /// `corpora` must cover every task of the schedule.
    pub fn new(model: Model, config: TrainerConfig, corpora: Vec<TaskCorpus>) -> Result<Self> {
        let state = TrainState::fresh(&model, &config);
        let hash = config_hash(&model.config, &config);
        Self::assemble(model, config, Vocabulary::canonical(), None, hash, state, corpora)
    }

    pub(crate) fn assemble(
        model: Model,
        config: TrainerConfig,
        vocab: Vocabulary,
        normalizer: Option<FeatureNormalizer>,
        config_hash: String,
        state: TrainState,
        mut corpora: Vec<TaskCorpus>,
    ) -> Result<Self> {
        config.validate()?;
        let mut ordered = Vec::with_capacity(config.schedule.tasks.len());
        let mut iterators = Vec::new();
        for (i, task) in config.schedule.tasks.iter().enumerate() {
            model.task(task)?;
            let pos = corpora
                .iter()
                .position(|c| &c.task == task)
                .ok_or_else(|| Error::Config(format!("no training corpus for task {task:?}")))?;
            let corpus = corpora.swap_remove(pos);
            if corpus.examples.is_empty() {
                return Err(Error::Config(format!("training corpus for task {task:?} is empty")));
            }
            let lengths = corpus.examples.iter().map(|e| e.input.len()).collect();
            let mut it = BatchIterator::new(
                lengths,
                config.optimizer.batch_size,
                config.bucket_width,
                config.seed.wrapping_add(1000 + i as u64),
            )?;
            let (epoch, pos) = state.cursors[i];
            it.set_cursor(epoch, pos);
            iterators.push(it);
            ordered.push(corpus);
        }
        Ok(Trainer {
            model,
            config,
            vocab,
            normalizer,
            config_hash,
            state,
            corpora: ordered,
            iterators,
            log: Vec::new(),
        })
    }

    pub fn with_vocab(mut self, vocab: Vocabulary) -> Self {
        self.vocab = vocab;
        self
    }

    /// Records `hash` in checkpoints instead of the default model+trainer hash.
    pub fn with_config_hash(mut self, hash: String) -> Self {
        self.config_hash = hash;
        self
    }

    pub fn with_normalizer(mut self, normalizer: Option<FeatureNormalizer>) -> Self {
        self.normalizer = normalizer;
        self
    }

    pub fn step(&self) -> u64 {
        self.state.step
    }

    pub fn corpus(&self, task: &str) -> Option<&TaskCorpus> {
        self.corpora.iter().find(|c| c.task == task)
    }

    /// Samples a task, takes its next batch and applies one update.
    pub fn train_step(&mut self) -> Result<LogEntry> {
        let t = self.config.schedule.sample(&mut self.state.task_rng);
        let batch = self.iterators[t].next_batch();
        self.state.cursors[t] = self.iterators[t].cursor();
        self.update(t, &batch.indices)
    }

    /// One update of `task` on the given corpus indices, bypassing the
    /// sampler and the batch iterator.
    pub fn train_on(&mut self, task: &str, indices: &[usize]) -> Result<LogEntry> {
        let t = self
            .config
            .schedule
            .tasks
            .iter()
            .position(|x| x == task)
            .ok_or_else(|| Error::Config(format!("task {task:?} is not scheduled")))?;
        self.update(t, indices)
    }

    /// Runs `steps` updates, appending each log line to `log` if given.
    pub fn run(&mut self, steps: u64, mut log: Option<&mut dyn Write>) -> Result<()> {
        for _ in 0..steps {
            let e = self.train_step()?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", e.to_tsv()).map_err(|err| Error::Io {
                    path: "training log".into(),
                    source: err,
                })?;
            }
        }
        Ok(())
    }

    fn update(&mut self, t: usize, indices: &[usize]) -> Result<LogEntry> {
        let started = Instant::now();
        if indices.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let step = self.state.step + 1;
        let opt = &self.config.optimizer;
        let task = self.config.schedule.tasks[t].clone();
        let corpus = &self.corpora[t];
        let examples: Vec<&Example> = indices
            .iter()
            .map(|&i| {
                corpus
                    .examples
                    .get(i)
                    .ok_or_else(|| Error::Input(format!("batch index {i} outside corpus of {}", corpus.examples.len())))
            })
            .collect::<Result<_>>()?;
        let batch: Vec<(EncoderInput, &[usize])> =
            examples.iter().map(|e| (e.input.as_input(), e.target.as_slice())).collect();
        let overlay = apply_weight_noise(&self.model.store, opt.noise_at(step), &mut self.state.noise_rng)?;
        let (loss, mut grads, norm_updates) = {
            let mut g = Graph::with_params(&self.model.store, Mode::Train)
                .with_overlay(&overlay)
                .with_seed(dropout_seed(self.config.seed, step));
            let loss = self.model.batch_loss(&mut g, &task, &batch)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                let ids: Vec<&str> = examples.iter().map(|e| e.id.as_str()).collect();
                return Err(Error::Numeric(format!(
                    "non-finite loss {value} at step {step} (task {task}, batch {ids:?})"
                )));
            }
            g.backward(loss)?;
            (value, g.param_grads(), g.take_norm_updates())
        };
        for (id, gr) in grads.iter() {
            if !gr.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {} at step {step} (norm {})",
                    self.model.store.param(id).name,
                    gr.norm_sq().sqrt()
                )));
            }
        }
        let grad_norm = grads.global_norm();
        if let Some(clip) = opt.clip_norm {
            if grad_norm > clip {
                grads.scale(clip / grad_norm);
            }
        }
        let lr = opt.lr_at(step);
        for (id, gr) in grads.iter() {
            let kind = self.model.store.param(id).kind;
            let l2 = if kind.is_bias_like() && !opt.l2_biases { 0.0 } else { opt.l2 };
            self.state.adam_steps[id.0] += 1;
            adam_update(
                self.model.store.value_mut(id),
                gr,
                &mut self.state.moments[id.0],
                self.state.adam_steps[id.0],
                lr,
                l2,
                opt,
            )?;
        }
        self.model.store.apply_norm_updates(&norm_updates, opt.norm_momentum);
        self.state.step = step;
        let entry = LogEntry {
            step,
            task,
            loss,
            grad_norm,
            lr,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        self.log.push(entry.clone());
        Ok(entry)
    }

    /// Inference-mode mean teacher-forced loss over a task's whole corpus.
    pub fn eval_loss(&self, task: &str) -> Result<f64> {
        let corpus = self
            .corpus(task)
            .ok_or_else(|| Error::Config(format!("no corpus for task {task:?}")))?;
        let mut total = 0.0;
        for e in &corpus.examples {
            let mut g = Graph::with_params(&self.model.store, Mode::Infer);
            let loss = self.model.batch_loss(&mut g, task, &[(e.input.as_input(), &e.target)])?;
            total += g.value(loss).data()[0];
        }
        Ok(total / corpus.examples.len() as f64)
    }
}

fn dropout_seed(seed: u64, step: u64) -> u64 {
    // splitmix64 of the pair
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
