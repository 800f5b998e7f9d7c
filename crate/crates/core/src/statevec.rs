//! Dense statevector simulator.
//!
//! Qubit 0 is the least-significant bit of a basis-state index. Circuits in
//! this crate place the ancilla on the highest-index qubit.

use std::f64::consts::FRAC_1_SQRT_2;

use num_complex::Complex64;
use rand_distr::{Binomial, Distribution};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;

/// Largest register the simulator will allocate.
pub const MAX_QUBITS: usize = 24;

/// Single-qubit gate families used by the attention circuits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateKind {
    /// `RY(θ) = [[cos θ/2, −sin θ/2], [sin θ/2, cos θ/2]]`.
    Ry(f64),
    /// Pauli-X; with one control this is a CNOT.
    X,
    H,
    Z,
}

/// A gate on `target`, active only when every qubit in `controls` is |1⟩.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOp {
    pub kind: GateKind,
    pub target: usize,
    pub controls: Vec<usize>,
}

impl GateOp {
    pub fn ry(target: usize, angle: f64) -> Self {
        GateOp { kind: GateKind::Ry(angle), target, controls: Vec::new() }
    }

    pub fn cnot(control: usize, target: usize) -> Self {
        GateOp { kind: GateKind::X, target, controls: vec![control] }
    }

    pub fn h(target: usize) -> Self {
        GateOp { kind: GateKind::H, target, controls: Vec::new() }
    }

    pub fn z(target: usize) -> Self {
        GateOp { kind: GateKind::Z, target, controls: Vec::new() }
    }

    /// The inverse gate. `RY` negates its angle; the others are involutions.
    pub fn adjoint(&self) -> Self {
        let kind = match self.kind {
            GateKind::Ry(angle) => GateKind::Ry(-angle),
            other => other,
        };
        GateOp { kind, target: self.target, controls: self.controls.clone() }
    }

    /// Same gate with one extra control qubit.
    pub fn controlled_by(&self, control: usize) -> Self {
        let mut controls = Vec::with_capacity(self.controls.len() + 1);
        controls.push(control);
        controls.extend_from_slice(&self.controls);
        GateOp { kind: self.kind, target: self.target, controls }
    }

    /// Every qubit the gate touches.
    pub fn qubits(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.target).chain(self.controls.iter().copied())
    }

    fn matrix(&self) -> [[f64; 2]; 2] {
        match self.kind {
            GateKind::Ry(angle) => {
                let (s, c) = (angle / 2.0).sin_cos();
                [[c, -s], [s, c]]
            }
            GateKind::X => [[0.0, 1.0], [1.0, 0.0]],
            GateKind::H => [[FRAC_1_SQRT_2, FRAC_1_SQRT_2], [FRAC_1_SQRT_2, -FRAC_1_SQRT_2]],
            GateKind::Z => [[1.0, 0.0], [0.0, -1.0]],
        }
    }
}

/// Full complex amplitude vector of an n-qubit register.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    num_qubits: usize,
    amplitudes: Vec<Complex64>,
}

impl StateVector {
    /// |0…0⟩ on `num_qubits` qubits.
    pub fn new_zero_state(num_qubits: usize) -> Result<Self> {
        if num_qubits == 0 || num_qubits > MAX_QUBITS {
            return Err(Error::Resource(format!(
                "qubit count {num_qubits} outside 1..={MAX_QUBITS}"
            )));
        }
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); 1 << num_qubits];
        amplitudes[0] = Complex64::new(1.0, 0.0);
        Ok(StateVector { num_qubits, amplitudes })
    }

    /// Builds a state from raw amplitudes; the length must be a power of two.
    pub fn from_amplitudes(amplitudes: Vec<Complex64>) -> Result<Self> {
        let len = amplitudes.len();
        if len < 2 || !len.is_power_of_two() {
            return Err(Error::validation(format!("amplitude count {len} is not 2^n with n >= 1")));
        }
        let num_qubits = len.trailing_zeros() as usize;
        if num_qubits > MAX_QUBITS {
            return Err(Error::Resource(format!("{num_qubits} qubits exceeds {MAX_QUBITS}")));
        }
        Ok(StateVector { num_qubits, amplitudes })
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    /// ⟨self|other⟩.
    pub fn inner(&self, other: &StateVector) -> Result<Complex64> {
        if self.num_qubits != other.num_qubits {
            return Err(Error::validation("inner product between registers of different sizes"));
        }
        Ok(self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum())
    }

    fn check_qubit(&self, qubit: usize) -> Result<()> {
        if qubit >= self.num_qubits {
            return Err(Error::validation(format!(
                "qubit {qubit} out of range for {}-qubit register",
                self.num_qubits
            )));
        }
        Ok(())
    }

    fn validate(&self, op: &GateOp) -> Result<()> {
        self.check_qubit(op.target)?;
        for (k, &c) in op.controls.iter().enumerate() {
            self.check_qubit(c)?;
            if c == op.target {
                return Err(Error::validation(format!("control {c} equals target")));
            }
            if op.controls[..k].contains(&c) {
                return Err(Error::validation(format!("control {c} listed twice")));
            }
        }
        if let GateKind::Ry(angle) = op.kind {
            if !angle.is_finite() {
                return Err(Error::validation(format!("non-finite RY angle {angle}")));
            }
        }
        Ok(())
    }

    /// Applies `op` in place.
    pub fn apply_gate(&mut self, op: &GateOp) -> Result<()> {
        self.validate(op)?;
        self.apply_unchecked(op);
        Ok(())
    }

    pub fn apply_circuit(&mut self, circuit: &[GateOp]) -> Result<()> {
        for op in circuit {
            self.validate(op)?;
        }
        for op in circuit {
            self.apply_unchecked(op);
        }
        Ok(())
    }

    fn apply_unchecked(&mut self, op: &GateOp) {
        let [[m00, m01], [m10, m11]] = op.matrix();
        let tbit = 1usize << op.target;
        let cmask = op.controls.iter().fold(0usize, |m, &c| m | (1 << c));
        for idx in 0..self.amplitudes.len() {
            if idx & tbit != 0 || idx & cmask != cmask {
                continue;
            }
            let a0 = self.amplitudes[idx];
            let a1 = self.amplitudes[idx | tbit];
            self.amplitudes[idx] = a0 * m00 + a1 * m01;
            self.amplitudes[idx | tbit] = a0 * m10 + a1 * m11;
        }
    }

    /// Applies `circuit` (or its adjoint) on the subspace where `control` is |1⟩.
    pub fn apply_controlled_circuit(
        &mut self,
        control: usize,
        circuit: &[GateOp],
        adjoint: bool,
    ) -> Result<()> {
        self.check_qubit(control)?;
        if circuit.iter().any(|op| op.qubits().any(|q| q == control)) {
            return Err(Error::validation(format!(
                "control qubit {control} is also used by the controlled circuit"
            )));
        }
        let ops: Vec<GateOp> = if adjoint {
            circuit.iter().rev().map(|op| op.adjoint().controlled_by(control)).collect()
        } else {
            circuit.iter().map(|op| op.controlled_by(control)).collect()
        };
        self.apply_circuit(&ops)
    }

    /// Probability of reading |0⟩ on `qubit`.
    pub fn probability_zero(&self, qubit: usize) -> Result<f64> {
        self.check_qubit(qubit)?;
        let bit = 1usize << qubit;
        Ok(self
            .amplitudes
            .iter()
            .enumerate()
            .filter(|(idx, _)| idx & bit == 0)
            .map(|(_, a)| a.norm_sqr())
            .sum())
    }

    /// Exact ⟨Z⟩ on `qubit`.
    pub fn expectation_pauli_z(&self, qubit: usize) -> Result<f64> {
        self.check_qubit(qubit)?;
        let bit = 1usize << qubit;
        Ok(self
            .amplitudes
            .iter()
            .enumerate()
            .map(|(idx, a)| if idx & bit == 0 { a.norm_sqr() } else { -a.norm_sqr() })
            .sum())
    }

    /// Shot-based estimate of ⟨Z⟩ on `qubit`: `2·(zeros/shots) − 1`.
    pub fn sample_ancilla(&self, qubit: usize, shots: u64, seed: u64) -> Result<f64> {
        if shots == 0 {
            return Err(Error::validation("shots must be at least 1"));
        }
        let p0 = self.probability_zero(qubit)?.clamp(0.0, 1.0);
        let binomial = Binomial::new(shots, p0)
            .map_err(|e| Error::validation(format!("bad sampling probability {p0}: {e}")))?;
        let zeros = binomial.sample(&mut keyed_rng(seed, "sample_ancilla", qubit as u64));
        Ok(2.0 * zeros as f64 / shots as f64 - 1.0)
    }

    /// Maps |0…0⟩ to itself and negates every other basis amplitude
    /// (the reflection `2|0⟩⟨0| − I`).
    pub(crate) fn reflect_about_zero(&mut self) {
        for amp in self.amplitudes.iter_mut().skip(1) {
            *amp = -*amp;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn assert_amps(state: &StateVector, expected: &[f64]) {
        assert_eq!(state.amplitudes().len(), expected.len());
        for (a, e) in state.amplitudes().iter().zip(expected) {
            assert!((a - c(*e)).norm() < 1e-12, "{:?} vs {:?}", state.amplitudes(), expected);
        }
    }

    #[test]
    fn zero_state_sizes() {
        assert_amps(&StateVector::new_zero_state(1).unwrap(), &[1.0, 0.0]);
        assert_amps(&StateVector::new_zero_state(2).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
        let s7 = StateVector::new_zero_state(7).unwrap();
        assert_eq!(s7.amplitudes().len(), 128);
        assert!((s7.norm_sqr() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_state_guards() {
        assert!(matches!(StateVector::new_zero_state(0), Err(Error::Resource(_))));
        assert!(matches!(StateVector::new_zero_state(25), Err(Error::Resource(_))));
    }

    #[test]
    fn basic_gates() {
        let mut s = StateVector::new_zero_state(1).unwrap();
        s.apply_gate(&GateOp::ry(0, PI)).unwrap();
        assert_amps(&s, &[0.0, 1.0]);

        // |10⟩ in big-endian notation: qubit 0 is set.
        let mut s = StateVector::new_zero_state(2).unwrap();
        s.apply_gate(&GateOp { kind: GateKind::X, target: 0, controls: vec![] }).unwrap();
        s.apply_gate(&GateOp::cnot(0, 1)).unwrap();
        assert_amps(&s, &[0.0, 0.0, 0.0, 1.0]);

        let mut s = StateVector::new_zero_state(1).unwrap();
        s.apply_gate(&GateOp::h(0)).unwrap();
        assert_amps(&s, &[FRAC_1_SQRT_2, FRAC_1_SQRT_2]);
    }

    #[test]
    fn gate_validation() {
        let mut s = StateVector::new_zero_state(2).unwrap();
        assert!(s.apply_gate(&GateOp::cnot(1, 1)).is_err());
        assert!(s.apply_gate(&GateOp::ry(2, 0.1)).is_err());
        assert!(s.apply_gate(&GateOp::ry(0, f64::NAN)).is_err());
        assert!(s.apply_gate(&GateOp::cnot(0, 1).controlled_by(0)).is_err());
    }

    #[test]
    fn controlled_circuit_inactive_control() {
        let mut s = StateVector::new_zero_state(3).unwrap();
        s.apply_gate(&GateOp::ry(0, 0.7)).unwrap();
        let before = s.clone();
        let circuit = [GateOp::ry(0, 1.3), GateOp::cnot(0, 1)];
        s.apply_controlled_circuit(2, &circuit, false).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn controlled_circuit_active_control_flips() {
        let mut s = StateVector::new_zero_state(2).unwrap();
        s.apply_gate(&GateOp::ry(0, PI)).unwrap();
        s.apply_controlled_circuit(0, &[GateOp::ry(1, PI)], false).unwrap();
        assert_amps(&s, &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn controlled_circuit_then_adjoint_is_identity() {
        let mut s = StateVector::new_zero_state(3).unwrap();
        s.apply_gate(&GateOp::h(2)).unwrap();
        s.apply_gate(&GateOp::ry(0, 0.4)).unwrap();
        let before = s.clone();
        let circuit = [GateOp::ry(0, 1.1), GateOp::ry(1, -0.3), GateOp::cnot(0, 1)];
        s.apply_controlled_circuit(2, &circuit, false).unwrap();
        s.apply_controlled_circuit(2, &circuit, true).unwrap();
        let fidelity = before.inner(&s).unwrap().norm_sqr();
        assert!((fidelity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn controlled_circuit_rejects_overlap() {
        let mut s = StateVector::new_zero_state(2).unwrap();
        assert!(s.apply_controlled_circuit(0, &[GateOp::ry(0, 1.0)], false).is_err());
        assert!(s.apply_controlled_circuit(1, &[GateOp::cnot(1, 0)], false).is_err());
    }

    #[test]
    fn pauli_z_expectations() {
        let s = StateVector::new_zero_state(1).unwrap();
        assert_eq!(s.expectation_pauli_z(0).unwrap(), 1.0);
        let mut plus = s.clone();
        plus.apply_gate(&GateOp::h(0)).unwrap();
        assert!(plus.expectation_pauli_z(0).unwrap().abs() < 1e-15);
        let mut r = s.clone();
        r.apply_gate(&GateOp::ry(0, PI / 3.0)).unwrap();
        assert!((r.expectation_pauli_z(0).unwrap() - 0.5).abs() < 1e-12);
        assert!(r.expectation_pauli_z(1).is_err());
    }

    #[test]
    fn sampling() {
        let zero = StateVector::new_zero_state(1).unwrap();
        assert_eq!(zero.sample_ancilla(0, 17, 3).unwrap(), 1.0);
        assert!(zero.sample_ancilla(0, 0, 3).is_err());

        let mut plus = zero.clone();
        plus.apply_gate(&GateOp::h(0)).unwrap();
        let est = plus.sample_ancilla(0, 1_000_000, 11).unwrap();
        assert!(est.abs() < 5e-3, "estimate {est}");
        assert_eq!(est, plus.sample_ancilla(0, 1_000_000, 11).unwrap());
    }
}
