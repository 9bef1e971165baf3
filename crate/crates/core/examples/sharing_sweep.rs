//! Parameter counts of a two-task speech model as the number of shared
//! encoder LSTM layers varies.

use speechmt::model::{Model, ModelConfig};

fn main() -> speechmt::Result<()> {
    for preset in ["toy", "paper"] {
        let mut cfg = match preset {
            "toy" => ModelConfig::toy_speech(&["st", "asr"]),
            _ => ModelConfig::paper_speech(&["st", "asr"]),
        };
        println!("{preset}");
        for shared in 0..=cfg.encoder_layers() {
            cfg.shared_layers = Some(shared);
            let m = Model::new(&cfg, 0)?;
            println!("  shared {shared}: {:>10} parameters", m.num_params());
        }
    }
    Ok(())
}
