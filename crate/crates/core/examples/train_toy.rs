//! Overfits a toy speech-translation model on the synthetic tone corpus and
//! reports loss and greedy exact-match.
//!
//! cargo run --release --example train_toy -- [steps]

use speechmt::data::{build_examples, featurize_manifest, make_toy_corpus, TaskKind, ToySpec};
use speechmt::frontend::{FeatureNormalizer, FrontendConfig};
use speechmt::model::{Model, ModelConfig};
use speechmt::training::{OptimizerConfig, TaskCorpus, Trainer, TrainerConfig};
use speechmt::vocab::Vocabulary;

fn main() -> speechmt::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let dir = std::env::temp_dir().join("speechmt_train_toy");
    let manifest = make_toy_corpus(&ToySpec::default(), &dir)?;
    let feats = featurize_manifest(&manifest, &FrontendConfig::default())?;
    let normalizer = FeatureNormalizer::fit(&feats)?;
    let feats = feats.into_iter().map(|f| (f.id.clone(), f)).collect();
    let vocab = Vocabulary::canonical();
    let examples = build_examples(&manifest, TaskKind::St, &feats, Some(&normalizer), &vocab)?;

    let model = Model::new(&ModelConfig::toy_speech(&["st"]), 7)?;
    println!("parameters: {}", model.num_params());
    let opt = OptimizerConfig {
        batch_size: 10,
        noise_start: u64::MAX - 1,
        decay_step: u64::MAX,
        ..OptimizerConfig::default()
    };
    let corpus = TaskCorpus { task: "st".into(), examples: examples.clone() };
    let mut trainer = Trainer::new(model, TrainerConfig::single("st", opt, 7), vec![corpus])?
        .with_normalizer(Some(normalizer));
    for _ in 0..steps {
        let e = trainer.train_step()?;
        if e.step % 25 == 0 {
            println!("{}", e.to_tsv());
        }
    }
    let mut exact = 0;
    for ex in &examples {
        let out = trainer.model.greedy_decode("st", ex.input.as_input(), None)?;
        if out.body() == ex.target.as_slice() {
            exact += 1;
        }
    }
    println!("teacher-forced loss {:.4}", trainer.eval_loss("st")?);
    println!("greedy exact match {exact}/{}", examples.len());
    Ok(())
}
