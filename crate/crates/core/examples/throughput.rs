//! Times training steps and greedy decoding for a given model size.
//!
//! `cargo run --release --example throughput -- D_MODEL HEADS LAYERS`

use std::time::Instant;

use syngrid_core::dataset::generate_corpus;
use syngrid_core::eval::exact_match_rate;
use syngrid_core::model::{Model, ModelConfig};
use syngrid_core::tensor::Adam;
use syngrid_core::train::{prepare, train_step};

fn main() -> anyhow::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let (d, heads, layers) = match args[..] {
        [d, h, l] => (d, h, l),
        _ => (32, 4, 2),
    };
    let cfg = ModelConfig {
        d_model: d,
        d_hidden: 2 * d,
        n_heads: heads,
        n_encoder_layers: layers,
        n_decoder_layers: layers,
        ..ModelConfig::default()
    };
    let corpus = generate_corpus(7, 256, 2)?;
    let examples = prepare(&corpus, &cfg)?;
    let mut model = Model::<f32>::new(cfg, 0)?;
    let mut adam = Adam::new(3e-4);
    let start = Instant::now();
    for (i, chunk) in examples.chunks(32).enumerate() {
        let batch: Vec<_> = chunk.iter().collect();
        train_step(&mut model, &mut adam, &batch, i as u64)?;
    }
    let secs = start.elapsed().as_secs_f64();
    println!("train: {:.1} episodes/s", examples.len() as f64 / secs);
    let start = Instant::now();
    exact_match_rate(&model, &corpus[..64])?;
    println!("decode: {:.1} episodes/s", 64.0 / start.elapsed().as_secs_f64());
    Ok(())
}
