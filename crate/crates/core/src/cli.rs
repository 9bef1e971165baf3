//! Command-line surface: featurize, train, decode, evaluate,
//! make-toy-corpus and inspect.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::beam::{decode_cascade, DecodeConfig, NBestRecord};
use crate::config::ExperimentConfig;
use crate::data::{
    build_examples, cache_features, gather_features, load_manifest, make_toy_corpus, ExampleInput, MappingRule, TaskKind,
    ToySpec,
};
use crate::decoder::AlignmentMatrix;
use crate::error::{Error, Result};
use crate::eval::{evaluate_run, read_references};
use crate::frontend::{FeatureNormalizer, FrontendConfig};
use crate::model::{InputKind, Model, ModelConfig};
use crate::training::{checkpoint_digest, load_checkpoint, save_checkpoint, LogEntry, TaskCorpus, Trainer};
use crate::vocab::{normalize_text, Vocabulary};

#[derive(Debug, Parser)]
#[command(name = "speechmt", version, about = "Sequence-to-sequence speech recognition and translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract and cache features for every audio entry of a manifest.
    Featurize(FeaturizeArgs),
    /// Train a model (or one model per sweep point) from an experiment config.
    Train(TrainArgs),
    /// Beam-decode a manifest with a checkpoint.
    Decode(DecodeArgs),
    /// Score an n-best file against reference files.
    Evaluate(EvaluateArgs),
    /// Write the synthetic tone corpus.
    MakeToyCorpus(ToyArgs),
    /// Print parameter counts per sub-network.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Feature cache directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Experiment config supplying frontend settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// asr, st, nmt or multitask.
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides `training.steps`.
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Decoder to use; defaults to the model's first task.
    #[arg(long)]
    pub task: Option<String>,
    /// Experiment config supplying decode and frontend settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub feature_cache: Option<PathBuf>,
    /// Only decode entries of this split.
    #[arg(long)]
    pub split: Option<String>,
    /// Overrides the beam width.
    #[arg(long)]
    pub beam: Option<usize>,
    /// Write one attention matrix per utterance under `<out>/attention`.
    #[arg(long)]
    pub attention: bool,
    /// Translate the 1-best recognition with this text model (cascade).
    #[arg(long)]
    pub mt_checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "nmt")]
    pub mt_task: String,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub nbest: PathBuf,
    /// One or more `id<TAB>text` files.
    #[arg(long, num_args = 1.., required = true)]
    pub references: Vec<PathBuf>,
    #[arg(long)]
    pub task: String,
    /// Report path; defaults to `<nbest>.report.tsv`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub num: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// copy, reverse-chars or reverse-words.
    #[arg(long, default_value = "reverse-chars")]
    pub mapping: String,
    #[arg(long, default_value_t = 8000)]
    pub sample_rate: u32,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long, conflicts_with = "checkpoint")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Result of a command that ran to completion; `failures` counts the
/// per-item errors that were reported and skipped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Outcome {
    pub failures: usize,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        i32::from(self.failures > 0)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

macro_rules! say {
    ($out:expr, $($t:tt)*) => {
        writeln!($out, $($t)*).map_err(io_err(Path::new("stdout")))?
    };
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<Outcome> {
    match cli.command {
        Command::Featurize(a) => featurize(a, out),
        Command::Train(a) => train(a, out),
        Command::Decode(a) => decode(a, out),
        Command::Evaluate(a) => evaluate(a, out),
        Command::MakeToyCorpus(a) => toy(a, out),
        Command::Inspect(a) => inspect(a, out),
    }
}

fn load_config(path: &Path, out: &mut dyn Write) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    say!(out, "config hash {}", cfg.hash());
    Ok(cfg)
}

fn featurize(a: FeaturizeArgs, out: &mut dyn Write) -> Result<Outcome> {
    let frontend = match &a.config {
        Some(p) => load_config(p, out)?.data.frontend,
        None => FrontendConfig::default(),
    };
    let manifest = load_manifest(&a.manifest)?;
    let (written, skipped, failures) = cache_features(&manifest, &frontend, &a.out)?;
    for (path, err) in &failures {
        eprintln!("failed: {path}: {err}");
    }
    say!(out, "cached {written}, up to date {skipped}, failed {}", failures.len());
    Ok(Outcome {
        failures: failures.len(),
    })
}

fn task_kind_for(task: &str, model: &ModelConfig) -> Result<TaskKind> {
    let kind = TaskKind::from_name(task)?;
    let needs = if kind == TaskKind::Nmt { InputKind::Text } else { InputKind::Speech };
    if model.input != needs {
        return Err(Error::Config(format!(
            "task {task} needs a {needs:?} encoder but the model reads {:?}",
            model.input
        )));
    }
    Ok(kind)
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<Outcome> {
    let base = load_config(&a.config, out)?;
    let runs = base.expand_sweep();
    let swept = runs.len() > 1;
    if swept && a.resume.is_some() {
        return Err(Error::Usage("--resume cannot be combined with a sweep".into()));
    }
    for (label, mut cfg) in runs {
        let dir = if swept { a.out.join(&label) } else { a.out.clone() };
        // Flag overrides are applied after hashing so that a longer resumed
        // run still matches its checkpoint.
        let hash = cfg.hash();
        if swept {
            say!(out, "run {label}: config hash {hash}");
        }
        if let Some(s) = a.steps {
            cfg.training.steps = s;
        }
        train_one(&cfg, hash, &a.task, &dir, a.resume.as_deref(), out)?;
    }
    Ok(Outcome::default())
}

fn train_one(
    cfg: &ExperimentConfig,
    hash: String,
    task: &str,
    dir: &Path,
    resume: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let trainer_cfg = cfg.trainer_config(task)?;
    let manifest_path = cfg
        .data
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("data.train_manifest is required for training".into()))?;
    let manifest = load_manifest(manifest_path)?.split("train");
    if manifest.is_empty() {
        return Err(Error::Config(format!("{} has no train entries", manifest_path.display())));
    }
    let kinds = trainer_cfg
        .schedule
        .tasks
        .iter()
        .map(|t| task_kind_for(t, &cfg.model))
        .collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::canonical();
    let (features, normalizer) = if kinds.iter().any(|k| *k != TaskKind::Nmt) {
        let (features, failures) = gather_features(&manifest, cfg.data.feature_cache.as_deref(), &cfg.data.frontend);
        if let Some((id, err)) = failures.into_iter().next() {
            return Err(Error::Input(format!("features for {id}: {err}")));
        }
        let normalizer = if cfg.data.normalize {
            // Manifest order keeps the floating-point sums reproducible.
            Some(FeatureNormalizer::fit(manifest.entries.iter().map(|e| &features[&e.id]))?)
        } else {
            None
        };
        (features, normalizer)
    } else {
        Default::default()
    };
    let corpora = trainer_cfg
        .schedule
        .tasks
        .iter()
        .zip(&kinds)
        .map(|(t, k)| {
            Ok(TaskCorpus {
                task: t.clone(),
                examples: build_examples(&manifest, *k, &features, normalizer.as_ref(), &vocab)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut trainer = match resume {
        Some(ckpt) => load_checkpoint(ckpt)?.resume(corpora, &hash)?,
        None => Trainer::new(Model::new(&cfg.model, cfg.seed)?, trainer_cfg, corpora)?
            .with_config_hash(hash)
            .with_normalizer(normalizer),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(io_err(&dir.join("config.toml")))?;
    let log_path = dir.join("train.log");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    if resume.is_none() {
        writeln!(log, "{}", LogEntry::HEADER).map_err(io_err(&log_path))?;
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    while trainer.step() < cfg.training.steps {
        let e = trainer.train_step()?;
        writeln!(log, "{}", e.to_tsv()).map_err(io_err(&log_path))?;
        *counts.entry(e.task.clone()).or_default() += 1;
        let every = cfg.training.checkpoint_every;
        if every > 0 && e.step % every == 0 {
            save_checkpoint(&trainer, dir.join(format!("checkpoint-{:06}", e.step)))?;
        }
    }
    let final_dir = dir.join("final");
    save_checkpoint(&trainer, &final_dir)?;
    let total: u64 = counts.values().sum();
    for (t, n) in &counts {
        say!(out, "task {t}: {n} steps ({:.2}%)", 100.0 * *n as f64 / total.max(1) as f64);
    }
    if let Some(last) = trainer.log.last() {
        say!(out, "step {} loss {:.6}", last.step, last.loss);
    }
    say!(out, "checkpoint {} digest {}", final_dir.display(), checkpoint_digest(&final_dir)?);
    Ok(())
}

fn decode(a: DecodeArgs, out: &mut dyn Write) -> Result<Outcome> {
    let exp = match &a.config {
        Some(p) => Some(load_config(p, out)?),
        None => None,
    };
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = &ckpt.model;
    let vocab = &ckpt.vocab;
    let task = match &a.task {
        Some(t) => t.clone(),
        None => model.task_names()[0].to_string(),
    };
    model.task(&task)?;
    let decode_cfg = |task: &str| -> Result<DecodeConfig> {
        let mut c = match &exp {
            Some(e) => e.decode.for_task(task).clone(),
            None => DecodeConfig::for_task(task),
        };
        if let Some(b) = a.beam {
            c.beam_width = b;
        }
        c.validate()?;
        Ok(c)
    };
    let cfg = decode_cfg(&task)?;
    let frontend = exp.as_ref().map(|e| e.data.frontend.clone()).unwrap_or_default();
    let mut manifest = load_manifest(&a.manifest)?;
    if let Some(s) = &a.split {
        manifest = manifest.split(s);
    }
    let mt = match &a.mt_checkpoint {
        Some(p) => {
            let m = load_checkpoint(p)?;
            m.model.task(&a.mt_task)?;
            if m.model.input_kind() != InputKind::Text {
                return Err(Error::Config("cascade translation model must read text".into()));
            }
            Some(m)
        }
        None => None,
    };
    let (features, mut failures) = match model.input_kind() {
        InputKind::Speech => gather_features(&manifest, a.feature_cache.as_deref(), &frontend),
        InputKind::Text => Default::default(),
    };
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let att_dir = a.out.join("attention");
    if a.attention {
        fs::create_dir_all(&att_dir).map_err(io_err(&att_dir))?;
    }
    let mut lines = Vec::new();
    let mut recognized = Vec::new();
    let mut failed_ids: Vec<String> = failures.iter().map(|(id, _)| id.clone()).collect();
    for e in &manifest.entries {
        if failed_ids.contains(&e.id) {
            continue;
        }
        let result = (|| -> Result<()> {
            let input = match model.input_kind() {
                InputKind::Speech => {
                    let fs = &features[&e.id];
                    let fs = match &ckpt.normalizer {
                        Some(n) => n.apply(fs)?,
                        None => fs.clone(),
                    };
                    ExampleInput::Features(fs.frames)
                }
                InputKind::Text => {
                    let ids = vocab.encode(&normalize_text(&e.source));
                    if ids.is_empty() {
                        return Err(Error::Input("empty source text".into()));
                    }
                    ExampleInput::Tokens(ids)
                }
            };
            if let (Some(mt), ExampleInput::Features(f)) = (&mt, &input) {
                let c = decode_cascade(model, &task, &mt.model, &a.mt_task, f, vocab, &cfg, &decode_cfg(&a.mt_task)?)?;
                recognized.push(format!("{}\t{}", e.id, c.source_text));
                let (score, logprob) = c.translation.as_ref().map_or((0.0, 0.0), |h| (h.score, h.logprob));
                lines.push(
                    NBestRecord {
                        id: e.id.clone(),
                        rank: 1,
                        score,
                        logprob,
                        text: c.translation_text,
                    }
                    .to_tsv(),
                );
                return Ok(());
            }
            let nbest = model.beam_decode(&task, &e.id, input.as_input(), &cfg)?;
            lines.extend(nbest.records(&e.id, vocab)?.iter().map(NBestRecord::to_tsv));
            if a.attention {
                let best = nbest.best();
                let labels = best
                    .tokens
                    .iter()
                    .map(|&t| vocab.token(t).unwrap_or("?").to_string())
                    .collect();
                let m = AlignmentMatrix::new(&e.id, &task, labels, best.attention_tensor()?)?;
                m.save(att_dir.join(format!("{}.tsv", e.id)))?;
            }
            Ok(())
        })();
        if let Err(err) = result {
            failed_ids.push(e.id.clone());
            failures.push((e.id.clone(), err));
        }
    }
    let nbest_path = a.out.join("nbest.tsv");
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(&nbest_path, text).map_err(io_err(&nbest_path))?;
    if mt.is_some() {
        let p = a.out.join("recognized.tsv");
        fs::write(&p, recognized.join("\n") + "\n").map_err(io_err(&p))?;
    }
    for (id, err) in &failures {
        eprintln!("failed: {id}: {err}");
    }
    say!(
        out,
        "decoded {} of {} utterances into {}",
        manifest.len() - failures.len(),
        manifest.len(),
        nbest_path.display()
    );
    Ok(Outcome {
        failures: failures.len(),
    })
}

fn evaluate(a: EvaluateArgs, out: &mut dyn Write) -> Result<Outcome> {
    let nbest = crate::beam::read_nbest(&a.nbest)?;
    let refs = a.references.iter().map(read_references).collect::<Result<Vec<_>>>()?;
    let report = evaluate_run(&nbest, &refs, &a.task)?;
    let path = a.report.unwrap_or_else(|| {
        let mut p = a.nbest.clone().into_os_string();
        p.push(".report.tsv");
        PathBuf::from(p)
    });
    fs::write(&path, report.to_tsv()).map_err(io_err(&path))?;
    say!(out, "{}", report.summary());
    if let Some(b) = &report.bleu {
        let ps: Vec<String> = b.precisions.iter().map(|p| format!("{:.4}", p)).collect();
        say!(out, "precisions {} bp {:.4}", ps.join("/"), b.brevity_penalty);
    }
    say!(out, "report {}", path.display());
    Ok(Outcome::default())
}

fn toy(a: ToyArgs, out: &mut dyn Write) -> Result<Outcome> {
    let mapping = match a.mapping.as_str() {
        "copy" => MappingRule::Copy,
        "reverse-chars" => MappingRule::ReverseChars,
        "reverse-words" => MappingRule::ReverseWords,
        m => return Err(Error::Usage(format!("unknown mapping {m:?}"))),
    };
    let spec = ToySpec {
        num_utterances: a.num,
        seed: a.seed,
        mapping,
        sample_rate: a.sample_rate,
        ..ToySpec::default()
    };
    let m = make_toy_corpus(&spec, &a.out)?;
    // Reference files for the evaluate command.
    let src: String = m.entries.iter().map(|e| format!("{}\t{}\n", e.id, e.source)).collect();
    let tgt: String = m.entries.iter().map(|e| format!("{}\t{}\n", e.id, e.targets[0])).collect();
    for (name, body) in [("ref.asr.tsv", src), ("ref.st.tsv", tgt)] {
        let p = a.out.join(name);
        fs::write(&p, body).map_err(io_err(&p))?;
    }
    say!(out, "wrote {} utterances to {}", m.len(), a.out.join("manifest.jsonl").display());
    Ok(Outcome::default())
}

/// The published model size this implementation is compared against.
pub const REFERENCE_PARAMS: f64 = 9.8e6;

fn inspect(a: InspectArgs, out: &mut dyn Write) -> Result<Outcome> {
    let model = if let Some(p) = &a.checkpoint {
        let c = load_checkpoint(p)?;
        say!(out, "config hash {}", c.config_hash);
        say!(out, "step {}", c.state.step);
        c.model
    } else if let Some(p) = &a.config {
        let cfg = load_config(p, out)?;
        Model::new(&cfg.model, cfg.seed)?
    } else {
        Model::new(&ModelConfig::paper_speech(&["st"]), 0)?
    };
    say!(out, "tasks {}", model.task_names().join(","));
    for (name, n) in model.param_breakdown() {
        say!(out, "{name}\t{n}");
    }
    let total = model.num_params();
    say!(out, "total\t{total}");
    say!(
        out,
        "relative to 9.8M: {:+.1}%",
        100.0 * (total as f64 - REFERENCE_PARAMS) / REFERENCE_PARAMS
    );
    Ok(Outcome::default())
}

