//! Trains toy translation models with decoders of depth 1 to 4 for the
//! same number of steps and compares size and training loss.
//!
//! cargo run --release --example decoder_depth_sweep -- [steps]

mod common;

use speechmt::data::TaskKind;
use speechmt::model::{Model, ModelConfig};
use speechmt::training::{Trainer, TrainerConfig};

fn main() -> speechmt::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let toy = common::toy(&[TaskKind::St])?;
    println!("depth\tparams\tloss after {steps} steps");
    for depth in 1..=4 {
        let mut cfg = ModelConfig::toy_speech(&["st"]);
        cfg.decoder.depth = depth;
        let model = Model::new(&cfg, 7)?;
        let n = model.num_params();
        let mut t = Trainer::new(model, TrainerConfig::single("st", common::optimizer(), 7), toy.corpora.clone())?
            .with_normalizer(Some(toy.normalizer.clone()));
        t.run(steps, None)?;
        println!("{depth}\t{n}\t{:.4}", t.eval_loss("st")?);
    }
    Ok(())
}
