//! Five-epoch training run of a conditioned model on 200 molecules.
//!
//! cargo run --release --example train_smoke -- [quantum|classical-eq|classical]

use std::path::PathBuf;
use std::time::Instant;

use clap::ValueEnum;
use qtransformer::data::ingest;
use qtransformer::model::{ModelConfig, ModelParams, Variant};
use qtransformer::smiles::Vocabulary;
use qtransformer::train::{required_seq_len, train, TrainOptions};

fn main() -> qtransformer::Result<()> {
    let variant = std::env::args()
        .nth(1)
        .map(|s| Variant::from_str(&s, true).expect("variant"))
        .unwrap_or(Variant::Quantum);
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/qm9_style_sample.csv");
    let seed = 0;
    let data = ingest(&path, seed)?.truncated(200, seed);
    let vocab = Vocabulary::qm9();
    let config = ModelConfig { max_seq_len: required_seq_len(&vocab, &data)?, seed, ..ModelConfig::new(variant, true) };
    let options = TrainOptions { epochs: 5, batch_size: 32, seed, ..TrainOptions::default() };

    let started = Instant::now();
    let outcome = train(ModelParams::init(config)?, &vocab, &data, &options, |_, _, rows| {
        for r in rows {
            println!("epoch {} {:5} loss {:.4} accuracy {:.3}", r.epoch, r.split.as_str(), r.loss, r.accuracy);
        }
        Ok(())
    })?;
    println!("best epoch {} ({:.1} s, {} skipped batches)", outcome.best_epoch, started.elapsed().as_secs_f64(), outcome.skipped_batches);
    Ok(())
}
