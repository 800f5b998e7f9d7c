//! Three ways to differentiate an attention score with respect to the query
//! angles: gate-level parameter shift, central differences and SPSA.

use qtransformer::cli::random_spec;
use qtransformer::grad::{finite_difference_grad, spsa_grad};
use qtransformer::qcircuits::{attention_score, score_parameter_shift_grad, AngleGroup, AnsatzParams, CircuitMode};
use qtransformer::rng::keyed_rng;

fn main() -> qtransformer::Result<()> {
    let spec = random_spec(&mut keyed_rng(11, "example", 0), 6, CircuitMode::SequenceOnly)?;
    let f = |theta: &[f64]| {
        let mut s = spec.clone();
        s.query = AnsatzParams::new(theta.to_vec());
        attention_score(&s).expect("valid spec")
    };
    let shift = score_parameter_shift_grad(&spec, AngleGroup::Query)?;
    let fd = finite_difference_grad(f, &spec.query.angles, 1e-5).flat();

    let draws = 2000;
    let mut mean = vec![0.0; shift.len()];
    for seed in 0..draws {
        for (m, g) in mean.iter_mut().zip(spsa_grad(f, &spec.query.angles, 0.01, seed)?.flat()) {
            *m += g / draws as f64;
        }
    }
    println!("{:>3} {:>12} {:>12} {:>12}", "k", "shift", "central", "spsa mean");
    for k in 0..shift.len() {
        println!("{k:>3} {:>12.8} {:>12.8} {:>12.8}", shift[k], fd[k], mean[k]);
    }
    Ok(())
}
