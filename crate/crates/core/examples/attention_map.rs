//! Attention weights of a trained quantum model for one molecule, printed
//! as a lower-triangular table and written as CSV.

use std::path::PathBuf;

use qtransformer::cli::{cmd_attnmap, cmd_train, RunConfig};

fn main() -> qtransformer::Result<()> {
    let out = tempfile::tempdir()?;
    let run = RunConfig {
        data: PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/qm9_style_sample.csv"),
        limit: Some(300),
        conditioned: true,
        epochs: 3,
        batch_size: 32,
        out_dir: out.path().to_path_buf(),
        checkpoint: out.path().join("best.qtck"),
        ..RunConfig::default()
    };
    cmd_train(&run)?;
    let smiles = std::env::args().nth(1).unwrap_or_else(|| "O=[N+]([O-])c1ccoc1".to_string());
    let path = out.path().join("attention.csv");
    cmd_attnmap(&run, &smiles, &path)?;
    let mut reader = csv::Reader::from_path(&path)?;
    let labels: Vec<String> = reader.headers()?.iter().skip(1).map(str::to_string).collect();
    println!("{:>6} {}", "", labels.iter().map(|l| format!("{l:>6}")).collect::<String>());
    for row in reader.records() {
        let row = row?;
        let cells: String = row.iter().skip(1).map(|v| format!("{:>6.2}", v.parse::<f64>().unwrap_or(f64::NAN))).collect();
        println!("{:>6} {cells}", &row[0]);
    }
    Ok(())
}
