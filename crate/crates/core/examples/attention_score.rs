//! One attention score from the Hadamard-test circuit, checked against the
//! direct inner product of the two prepared states.

use qtransformer::qcircuits::{
    attention_score, oracle_inner_product, score_circuit_gate_count, AnsatzParams, AttentionCircuitSpec, CircuitMode,
};

fn main() -> qtransformer::Result<()> {
    let spec = AttentionCircuitSpec {
        mode: CircuitMode::Conditioned,
        token_i: AnsatzParams::new(vec![0.4, 1.9]),
        position_i: AnsatzParams::new(vec![0.0, 0.3]),
        token_j: AnsatzParams::new(vec![2.2, 0.7]),
        position_j: AnsatzParams::new(vec![0.1, 0.0]),
        property: Some(AnsatzParams::new(vec![1.2, 2.8])),
        query: AnsatzParams::new(vec![0.3, 1.1, 2.5, 0.9, 4.0, 5.1]),
        key: AnsatzParams::new(vec![1.7, 0.2, 3.3, 2.4, 0.6, 1.5]),
    };
    let circuit = spec.score_circuit()?;
    println!("{} gates on {} qubits", circuit.len(), spec.working_qubits() + 1);
    assert_eq!(circuit.len(), score_circuit_gate_count(6, CircuitMode::Conditioned)?);
    println!("circuit Re<q_i|k_j> = {:+.12}", attention_score(&spec)?);
    println!("direct  Re<q_i|k_j> = {:+.12}", oracle_inner_product(&spec)?);
    println!("self score          = {:+.12}", attention_score(&AttentionCircuitSpec {
        token_j: spec.token_i.clone(),
        position_j: spec.position_i.clone(),
        key: spec.query.clone(),
        ..spec.clone()
    })?);
    Ok(())
}
