//! Trains the mini model on a small fixed corpus and reports how quickly it
//! memorizes it.
//!
//! `cargo run --release --example overfit -- LR DROPOUT EPOCHS BATCH`

use std::time::Instant;

use syngrid_core::dataset::generate_corpus;
use syngrid_core::eval::exact_match_rate;
use syngrid_core::model::{Model, ModelConfig};
use syngrid_core::tensor::Adam;
use syngrid_core::train::{prepare, train_step};

fn main() -> anyhow::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let (lr, dropout, epochs, batch) = match args[..] {
        [a, b, c, d] => (a, b, c as usize, d as usize),
        _ => (1e-3, 0.0, 300, 32),
    };
    let cfg = ModelConfig {
        d_model: 32,
        d_hidden: 64,
        n_heads: 4,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        dropout,
        ..ModelConfig::default()
    };
    let corpus = generate_corpus(2024, 200, 2)?;
    let examples = prepare(&corpus, &cfg)?;
    let mut model = Model::<f32>::new(cfg, 0)?;
    let mut adam = Adam::new(lr);
    let start = Instant::now();
    for epoch in 1..=epochs {
        let mut total = 0.0;
        for (i, chunk) in examples.chunks(batch).enumerate() {
            let b: Vec<_> = chunk.iter().collect();
            total += train_step(&mut model, &mut adam, &b, (epoch * 1000 + i) as u64)?;
        }
        if epoch % 10 == 0 {
            let em = exact_match_rate(&model, &corpus)?;
            println!("epoch {epoch} loss {:.4} train_em {em:.1} t={:.0}s", total / examples.len().div_ceil(batch) as f64, start.elapsed().as_secs_f64());
            if em >= 95.0 {
                break;
            }
        }
    }
    Ok(())
}
