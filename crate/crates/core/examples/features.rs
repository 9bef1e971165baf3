//! Synthesizes one second of a tone sequence and prints its stacked
//! log-mel/delta/delta-delta features.
//!
//! cargo run --release --example features -- [path.wav]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use speechmt::data::ToySpec;
use speechmt::frontend::{stack_features, FrontendConfig, Waveform};

fn main() -> speechmt::Result<()> {
    let wave = match std::env::args().nth(1) {
        Some(path) => Waveform::read_wav(path)?,
        None => {
            let spec = ToySpec { sample_rate: 16000, ..ToySpec::default() };
            spec.synthesize("sol mar luz", &mut ChaCha8Rng::seed_from_u64(0))?
        }
    };
    let cfg = FrontendConfig::default();
    let fs = stack_features("demo", &wave, &cfg)?;
    println!(
        "{:.2}s at {} Hz -> {} frames x {} mels x 3",
        wave.duration_secs(),
        wave.sample_rate,
        fs.num_frames(),
        fs.n_mels()
    );
    let shape = fs.frames.shape().to_vec();
    let data = fs.frames.data();
    for (c, name) in ["static", "delta", "delta-delta"].iter().enumerate() {
        let vals: Vec<f64> = (0..shape[0] * shape[1]).map(|i| data[i * 3 + c]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        println!("{name:<12} mean {mean:>9.3}  range [{lo:.3}, {hi:.3}]");
    }
    Ok(())
}
