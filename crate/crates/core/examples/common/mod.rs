#![allow(dead_code)]

use std::collections::HashMap;

use speechmt::data::{build_examples, featurize_manifest, make_toy_corpus, CorpusManifest, Example, TaskKind, ToySpec};
use speechmt::frontend::{FeatureNormalizer, FrontendConfig};
use speechmt::model::{Model, ModelConfig};
use speechmt::training::{OptimizerConfig, TaskCorpus, TaskSchedule, Trainer, TrainerConfig};
use speechmt::vocab::Vocabulary;

pub struct Toy {
    pub manifest: CorpusManifest,
    pub normalizer: FeatureNormalizer,
    pub corpora: Vec<TaskCorpus>,
}

/// Tone corpus examples for each task, with normalized features.
pub fn toy(kinds: &[TaskKind]) -> speechmt::Result<Toy> {
    let dir = std::env::temp_dir().join("speechmt_examples_corpus");
    let manifest = make_toy_corpus(&ToySpec::default(), &dir)?;
    let feats = featurize_manifest(&manifest, &FrontendConfig::default())?;
    let normalizer = FeatureNormalizer::fit(&feats)?;
    let feats: HashMap<_, _> = feats.into_iter().map(|f| (f.id.clone(), f)).collect();
    let vocab = Vocabulary::canonical();
    let mut corpora = Vec::new();
    for &k in kinds {
        let examples: Vec<Example> = build_examples(&manifest, k, &feats, Some(&normalizer), &vocab)?;
        corpora.push(TaskCorpus { task: k.name().into(), examples });
    }
    Ok(Toy { manifest, normalizer, corpora })
}

pub fn optimizer() -> OptimizerConfig {
    OptimizerConfig {
        batch_size: 10,
        noise_start: u64::MAX - 1,
        decay_step: u64::MAX,
        ..OptimizerConfig::default()
    }
}

/// Toy model trained for `steps` on the given tasks with the given mix.
pub fn trained(mix: &[(&str, f64)], shared_layers: Option<usize>, steps: u64) -> speechmt::Result<(Trainer, Toy)> {
    let kinds: Vec<TaskKind> = mix.iter().map(|(t, _)| TaskKind::from_name(t)).collect::<Result<_, _>>()?;
    let toy = toy(&kinds)?;
    let tasks: Vec<&str> = mix.iter().map(|(t, _)| *t).collect();
    let mut cfg = ModelConfig::toy_speech(&tasks);
    cfg.shared_layers = shared_layers;
    let model = Model::new(&cfg, 7)?;
    let tc = TrainerConfig {
        optimizer: optimizer(),
        schedule: TaskSchedule::new(mix)?,
        bucket_width: 25,
        seed: 7,
    };
    let mut trainer = Trainer::new(model, tc, toy.corpora.clone())?.with_normalizer(Some(toy.normalizer.clone()));
    trainer.run(steps, None)?;
    Ok((trainer, toy))
}
