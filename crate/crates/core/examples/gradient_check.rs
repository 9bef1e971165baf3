//! Finite-difference check of a single LSTM cell and of a whole tiny
//! speech translation model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechmt::decoder::DecoderConfig;
use speechmt::encoder::{EncoderInput, SpeechEncoderConfig};
use speechmt::model::{Model, ModelConfig};
use speechmt::tensor::{grad_check, grad_check_params, Graph, Mode, Tensor};

fn main() -> speechmt::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut random = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };

    // LSTM cell: gates z (1×4u) and previous cell c (1×u) packed into theta.
    let u = 5;
    let theta = Tensor::new(vec![1, 5 * u], random(5 * u))?;
    let weights = Tensor::new(vec![2 * u, 1], random(2 * u))?;
    let report = grad_check(
        |g: &mut Graph<'static>, t| {
            let z = g.slice_cols(t, 0, 4 * u)?;
            let c = g.slice_cols(t, 4 * u, u)?;
            let hc = g.lstm_cell(z, c)?;
            let w = g.constant(weights.clone());
            let y = g.matmul(hc, w)?;
            Ok(g.sum(y))
        },
        &theta,
        1e-5,
        None,
        0,
    )?;
    println!("lstm_cell: {} coords, max rel error {:.2e}", report.coords_checked, report.max_rel_error);

    let cfg = ModelConfig {
        speech: SpeechEncoderConfig {
            n_mels: 8,
            conv_filters: 2,
            conv_lstm_filters: 2,
            lstm_layers: 2,
            lstm_units: 3,
            projection_dim: 4,
            ..SpeechEncoderConfig::default()
        },
        decoder: DecoderConfig {
            depth: 2,
            units: 5,
            embedding_dim: 3,
            attention_hidden: 4,
            attention_dim: 3,
            vocab_size: 6,
            dropout: 0.0,
            ..DecoderConfig::default()
        },
        ..ModelConfig::toy_speech(&["st"])
    };
    let model = Model::new(&cfg, 1)?;
    let x = Tensor::new(vec![8, 8, 3], random(8 * 8 * 3))?;
    let target = [2, 4, 3];
    let report = grad_check_params(
        &model.store,
        Mode::Train,
        |g: &mut Graph| model.batch_loss(g, "st", &[(EncoderInput::Features(&x), &target[..])]),
        1e-5,
        400,
        0,
    )?;
    println!(
        "tiny model ({} params): {} coords, max rel error {:.2e} at {:?}",
        model.num_params(),
        report.coords_checked,
        report.max_rel_error,
        report.worst
    );
    Ok(())
}
