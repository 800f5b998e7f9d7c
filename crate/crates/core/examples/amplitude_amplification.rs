//! Grover-style amplification of the ancilla |0> probability of a score
//! circuit, compared with sin²((2m+1)·asin √p₀).

use qtransformer::cli::random_spec;
use qtransformer::qcircuits::{amplitude_amplification_demo, attention_score, CircuitMode};
use qtransformer::rng::keyed_rng;

fn main() -> qtransformer::Result<()> {
    let spec = random_spec(&mut keyed_rng(3, "example", 0), 6, CircuitMode::SequenceOnly)?;
    let p0 = (1.0 + attention_score(&spec)?) / 2.0;
    let angle = p0.sqrt().asin();
    println!("score {:+.6}, p0 {p0:.6}", 2.0 * p0 - 1.0);
    for m in 0..5 {
        let amplified = amplitude_amplification_demo(&spec, m)?;
        let predicted = ((2 * m + 1) as f64 * angle).sin().powi(2);
        println!("m={m}: {amplified:.10} predicted {predicted:.10}");
    }
    Ok(())
}
