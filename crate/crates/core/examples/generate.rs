//! Trains a small conditioned model, then samples SMILES conditioned on the
//! training-set mean, median and mode and prints the generation metrics.

use std::path::PathBuf;

use qtransformer::cli::{cmd_generate, cmd_train, PropertySource, RunConfig};

fn main() -> qtransformer::Result<()> {
    let out = tempfile::tempdir()?;
    let run = RunConfig {
        data: PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/qm9_style_sample.csv"),
        limit: Some(400),
        conditioned: true,
        epochs: 4,
        batch_size: 32,
        out_dir: out.path().to_path_buf(),
        checkpoint: out.path().join("best.qtck"),
        num_samples: 200,
        ..RunConfig::default()
    };
    println!("{}", cmd_train(&run)?);
    for source in [PropertySource::Mean, PropertySource::Median, PropertySource::Mode] {
        let report = cmd_generate(&RunConfig { property_source: source, ..run.clone() })?;
        let target = &report.targets[0];
        println!("{source:?}: {}", target.metrics);
        for s in target.samples.iter().take(5) {
            println!("    {s}");
        }
    }
    Ok(())
}
