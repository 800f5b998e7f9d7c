//! Bell state, Pauli-Z expectations and shot sampling on the statevector
//! simulator.

use qtransformer::statevec::{GateOp, StateVector};

fn main() -> qtransformer::Result<()> {
    let mut state = StateVector::new_zero_state(2)?;
    state.apply_circuit(&[GateOp::h(0), GateOp::cnot(0, 1)])?;
    for (index, amp) in state.amplitudes().iter().enumerate() {
        println!("|{index:02b}> {:+.4}{:+.4}i", amp.re, amp.im);
    }
    println!("<Z0> = {:.4}, <Z1> = {:.4}", state.expectation_pauli_z(0)?, state.expectation_pauli_z(1)?);

    let mut tilted = StateVector::new_zero_state(1)?;
    tilted.apply_gate(&GateOp::ry(0, 1.0))?;
    println!("RY(1.0)|0>: <Z> = {:.6} (cos 1 = {:.6})", tilted.expectation_pauli_z(0)?, 1f64.cos());
    println!("10000 shots estimate <Z> = {:.4}", tilted.sample_ancilla(0, 10_000, 7)?);
    Ok(())
}
