//! Attention-score circuits built on the modified Hadamard test.
//!
//! Working-register layout (qubit 0 = least significant):
//! token register, then position register, then (conditioned mode only) the
//! property register. The ancilla sits one above the working register.
//!
//! Every ansatz is one `RY` per qubit followed by a linear CNOT chain
//! `q0→q1→…→q(s−1)`.

use std::collections::HashSet;
use std::hash::Hash;

use crate::error::{Error, Result};
use std::f64::consts::FRAC_PI_2;

use crate::statevec::{GateKind, GateOp, StateVector};

/// Angles for a single-layer `RY` ansatz, one per qubit.
#[derive(Debug, Clone, PartialEq)]
pub struct AnsatzParams {
    pub angles: Vec<f64>,
}

impl AnsatzParams {
    pub fn new(angles: Vec<f64>) -> Self {
        AnsatzParams { angles }
    }

    pub fn zeros(size: usize) -> Self {
        AnsatzParams { angles: vec![0.0; size] }
    }

    pub fn register_size(&self) -> usize {
        self.angles.len()
    }
}

impl From<Vec<f64>> for AnsatzParams {
    fn from(angles: Vec<f64>) -> Self {
        AnsatzParams { angles }
    }
}

impl From<&[f64]> for AnsatzParams {
    fn from(angles: &[f64]) -> Self {
        AnsatzParams { angles: angles.to_vec() }
    }
}

/// `RY(θ_k)` on qubit `offset + k`, then a CNOT chain across the register.
pub fn build_ansatz(params: &AnsatzParams, offset: usize) -> Vec<GateOp> {
    let size = params.register_size();
    let mut ops = Vec::with_capacity(2 * size);
    ops.extend(params.angles.iter().enumerate().map(|(k, &a)| GateOp::ry(offset + k, a)));
    ops.extend((0..size.saturating_sub(1)).map(|k| GateOp::cnot(offset + k, offset + k + 1)));
    ops
}

/// Number of gates `build_ansatz` emits for a register of `size` qubits.
pub fn ansatz_gate_count(size: usize) -> usize {
    if size == 0 {
        0
    } else {
        2 * size - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CircuitMode {
    /// Token and position registers only.
    SequenceOnly,
    /// Token, position and a sequence-uniform property register.
    Conditioned,
}

impl CircuitMode {
    pub fn register_count(self) -> usize {
        match self {
            CircuitMode::SequenceOnly => 2,
            CircuitMode::Conditioned => 3,
        }
    }
}

/// Qubits per embedding register, rejecting layouts that do not split evenly.
pub fn register_size(working_qubits: usize, mode: CircuitMode) -> Result<usize> {
    let regs = mode.register_count();
    if working_qubits == 0 || working_qubits % regs != 0 {
        return Err(Error::validation(format!(
            "{working_qubits} working qubits cannot be split into {regs} equal registers"
        )));
    }
    Ok(working_qubits / regs)
}

/// Everything needed to evaluate one attention score `Re⟨q_i|k_j⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCircuitSpec {
    pub mode: CircuitMode,
    pub token_i: AnsatzParams,
    pub position_i: AnsatzParams,
    pub token_j: AnsatzParams,
    pub position_j: AnsatzParams,
    /// Present exactly in conditioned mode.
    pub property: Option<AnsatzParams>,
    pub query: AnsatzParams,
    pub key: AnsatzParams,
}

impl AttentionCircuitSpec {
    pub fn working_qubits(&self) -> usize {
        self.query.register_size()
    }

    pub fn ancilla(&self) -> usize {
        self.working_qubits()
    }

    /// Checks register sizes against the mode; returns the per-register size.
    pub fn validate(&self) -> Result<usize> {
        let w = self.working_qubits();
        let r = register_size(w, self.mode)?;
        if self.key.register_size() != w {
            return Err(Error::validation(format!(
                "query acts on {w} qubits but key on {}",
                self.key.register_size()
            )));
        }
        for (name, p) in [
            ("token_i", &self.token_i),
            ("position_i", &self.position_i),
            ("token_j", &self.token_j),
            ("position_j", &self.position_j),
        ] {
            if p.register_size() != r {
                return Err(Error::validation(format!(
                    "{name} has {} angles, register holds {r} qubits",
                    p.register_size()
                )));
            }
        }
        match (self.mode, &self.property) {
            (CircuitMode::SequenceOnly, None) => {}
            (CircuitMode::Conditioned, Some(p)) if p.register_size() == r => {}
            (CircuitMode::Conditioned, Some(p)) => {
                return Err(Error::validation(format!(
                    "property has {} angles, register holds {r} qubits",
                    p.register_size()
                )))
            }
            (CircuitMode::Conditioned, None) => {
                return Err(Error::validation("conditioned mode requires property angles"))
            }
            (CircuitMode::SequenceOnly, Some(_)) => {
                return Err(Error::validation("sequence-only mode takes no property angles"))
            }
        }
        for p in [&self.query, &self.key] {
            if p.angles.iter().any(|a| !a.is_finite()) {
                return Err(Error::validation("non-finite angle"));
            }
        }
        Ok(r)
    }

    fn embedding_prep(&self, token: &AnsatzParams, position: &AnsatzParams, r: usize) -> Vec<GateOp> {
        let mut ops = build_ansatz(token, 0);
        ops.extend(build_ansatz(position, r));
        ops
    }

    /// Full score circuit on `working_qubits + 1` qubits, acting on |0…0⟩.
    ///
    /// Prepares `|0⟩|q_i⟩ + |1⟩|k_j⟩` (unnormalized) and finishes with a
    /// Hadamard on the ancilla, so ⟨Z_ancilla⟩ = Re⟨q_i|k_j⟩. The property
    /// register is never uncomputed: it holds the same state in both branches.
    pub fn score_circuit(&self) -> Result<Vec<GateOp>> {
        let r = self.validate()?;
        let anc = self.ancilla();
        let prep_i = self.embedding_prep(&self.token_i, &self.position_i, r);
        let prep_j = self.embedding_prep(&self.token_j, &self.position_j, r);
        let u_q = build_ansatz(&self.query, 0);
        let u_k = build_ansatz(&self.key, 0);

        let mut ops = prep_i.clone();
        if let Some(property) = &self.property {
            ops.extend(build_ansatz(property, 2 * r));
        }
        ops.extend(u_q.iter().cloned());
        ops.push(GateOp::h(anc));
        ops.extend(u_q.iter().rev().map(|g| g.adjoint().controlled_by(anc)));
        ops.extend(prep_i.iter().rev().map(|g| g.adjoint().controlled_by(anc)));
        ops.extend(prep_j.iter().map(|g| g.controlled_by(anc)));
        ops.extend(u_k.iter().map(|g| g.controlled_by(anc)));
        ops.push(GateOp::h(anc));
        Ok(ops)
    }

    /// The state just before the ancilla is measured.
    pub fn final_state(&self) -> Result<StateVector> {
        let ops = self.score_circuit()?;
        let mut state = StateVector::new_zero_state(self.working_qubits() + 1)?;
        state.apply_circuit(&ops)?;
        Ok(state)
    }

    /// Same spec with the roles of (i, θ_q) and (j, θ_k) exchanged.
    pub fn swapped(&self) -> Self {
        AttentionCircuitSpec {
            mode: self.mode,
            token_i: self.token_j.clone(),
            position_i: self.position_j.clone(),
            token_j: self.token_i.clone(),
            position_j: self.position_i.clone(),
            property: self.property.clone(),
            query: self.key.clone(),
            key: self.query.clone(),
        }
    }
}

/// `Re⟨q_i|k_j⟩` read from the ancilla of the modified Hadamard test.
pub fn attention_score(spec: &AttentionCircuitSpec) -> Result<f64> {
    spec.final_state()?.expectation_pauli_z(spec.ancilla())
}

/// One angle table of an [`AttentionCircuitSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AngleGroup {
    TokenI,
    PositionI,
    TokenJ,
    PositionJ,
    Property,
    Query,
    Key,
}

impl AngleGroup {
    pub const ALL: [AngleGroup; 7] = [
        AngleGroup::TokenI,
        AngleGroup::PositionI,
        AngleGroup::TokenJ,
        AngleGroup::PositionJ,
        AngleGroup::Property,
        AngleGroup::Query,
        AngleGroup::Key,
    ];
}

impl AttentionCircuitSpec {
    pub fn angles(&self, group: AngleGroup) -> Option<&AnsatzParams> {
        match group {
            AngleGroup::TokenI => Some(&self.token_i),
            AngleGroup::PositionI => Some(&self.position_i),
            AngleGroup::TokenJ => Some(&self.token_j),
            AngleGroup::PositionJ => Some(&self.position_j),
            AngleGroup::Property => self.property.as_ref(),
            AngleGroup::Query => Some(&self.query),
            AngleGroup::Key => Some(&self.key),
        }
    }

    pub fn angles_mut(&mut self, group: AngleGroup) -> Option<&mut AnsatzParams> {
        match group {
            AngleGroup::TokenI => Some(&mut self.token_i),
            AngleGroup::PositionI => Some(&mut self.position_i),
            AngleGroup::TokenJ => Some(&mut self.token_j),
            AngleGroup::PositionJ => Some(&mut self.position_j),
            AngleGroup::Property => self.property.as_mut(),
            AngleGroup::Query => Some(&mut self.query),
            AngleGroup::Key => Some(&mut self.key),
        }
    }
}

fn ancilla_z(ops: &[GateOp], qubits: usize) -> Result<f64> {
    let mut state = StateVector::new_zero_state(qubits)?;
    state.apply_circuit(ops)?;
    state.expectation_pauli_z(qubits - 1)
}

/// `½[f(a + π/2) − f(a − π/2)]` for the uncontrolled `RY` at `index`.
fn shift_uncontrolled(ops: &[GateOp], index: usize, qubits: usize) -> Result<f64> {
    let mut shifted = ops.to_vec();
    let GateKind::Ry(a) = ops[index].kind else {
        return Err(Error::invariant("parameter shift on a non-RY gate"));
    };
    shifted[index].kind = GateKind::Ry(a + FRAC_PI_2);
    let plus = ancilla_z(&shifted, qubits)?;
    shifted[index].kind = GateKind::Ry(a - FRAC_PI_2);
    let minus = ancilla_z(&shifted, qubits)?;
    Ok(0.5 * (plus - minus))
}

/// Exact gradient of [`attention_score`] with respect to one angle table,
/// by the two-term shift rule applied gate by gate.
///
/// An angle can feed several gates (the query angles appear once plain and
/// once ancilla-controlled), so each occurrence is shifted on its own and the
/// contributions summed. A controlled `RY(φ)` is first rewritten as
/// `CNOT · RY(−φ/2) · CNOT · RY(φ/2)`, whose two plain rotations each obey the
/// rule exactly.
pub fn score_parameter_shift_grad(spec: &AttentionCircuitSpec, group: AngleGroup) -> Result<Vec<f64>> {
    let table = spec
        .angles(group)
        .ok_or_else(|| Error::validation(format!("{group:?} angles are absent in {:?} mode", spec.mode)))?;
    let base = spec.score_circuit()?;
    let qubits = spec.working_qubits() + 1;
    let mut grad = Vec::with_capacity(table.register_size());
    for k in 0..table.register_size() {
        let mut probe = spec.clone();
        if let Some(t) = probe.angles_mut(group) {
            t.angles[k] += 1.0;
        }
        let moved = probe.score_circuit()?;
        let mut g = 0.0;
        for (index, (before, after)) in base.iter().zip(&moved).enumerate() {
            let (GateKind::Ry(a), GateKind::Ry(b)) = (before.kind, after.kind) else { continue };
            if a == b {
                continue;
            }
            let sign = (b - a).round();
            match before.controls.as_slice() {
                [] => g += sign * shift_uncontrolled(&base, index, qubits)?,
                &[control] => {
                    let t = before.target;
                    let mut ops = base[..index].to_vec();
                    let first = ops.len() + 1;
                    ops.extend([
                        GateOp::cnot(control, t),
                        GateOp::ry(t, -a / 2.0),
                        GateOp::cnot(control, t),
                        GateOp::ry(t, a / 2.0),
                    ]);
                    ops.extend_from_slice(&base[index + 1..]);
                    let d_first = shift_uncontrolled(&ops, first, qubits)?;
                    let d_second = shift_uncontrolled(&ops, first + 2, qubits)?;
                    g += sign * 0.5 * (d_second - d_first);
                }
                _ => return Err(Error::invariant("multiply-controlled rotation in score circuit")),
            }
        }
        grad.push(g);
    }
    Ok(grad)
}

/// Reference value for [`attention_score`]: prepares `|q_i⟩` and `|k_j⟩` as
/// two separate registers and takes the real part of their overlap.
pub fn oracle_inner_product(spec: &AttentionCircuitSpec) -> Result<f64> {
    let r = spec.validate()?;
    let w = spec.working_qubits();
    let prepare = |token: &AnsatzParams, position: &AnsatzParams, unitary: &AnsatzParams| {
        let mut state = StateVector::new_zero_state(w)?;
        state.apply_circuit(&build_ansatz(token, 0))?;
        state.apply_circuit(&build_ansatz(position, r))?;
        if let Some(property) = &spec.property {
            state.apply_circuit(&build_ansatz(property, 2 * r))?;
        }
        state.apply_circuit(&build_ansatz(unitary, 0))?;
        Ok::<_, Error>(state)
    };
    let q = prepare(&spec.token_i, &spec.position_i, &spec.query)?;
    let k = prepare(&spec.token_j, &spec.position_j, &spec.key)?;
    Ok(q.inner(&k)?.re)
}

/// Closed-form gate count of [`AttentionCircuitSpec::score_circuit`].
pub fn score_circuit_gate_count(working_qubits: usize, mode: CircuitMode) -> Result<usize> {
    let r = register_size(working_qubits, mode)?;
    let prep_pair = 2 * ansatz_gate_count(r);
    let property = if mode == CircuitMode::Conditioned { ansatz_gate_count(r) } else { 0 };
    let unitary = ansatz_gate_count(working_qubits);
    // prep_i (+ property), U_q, H, CU_q†, C(prep_i)†, C(prep_j), CU_k, H
    Ok(prep_pair + property + unitary + 1 + unitary + prep_pair + prep_pair + unitary + 1)
}

/// Distinct circuits needed for a causal attention matrix.
///
/// `keys[i]` identifies the parameters feeding position `i` (token angles,
/// position angles). Pairs `(i, j)` with `j ≤ i` that share the same key
/// tuple are evaluated once; entry `(0, 0)` is never evaluated because its
/// softmax weight is always 1.
pub fn unique_circuit_count<K: Hash + Eq>(keys: &[K]) -> usize {
    let mut seen = HashSet::new();
    for i in 0..keys.len() {
        for j in 0..=i {
            if i == 0 && j == 0 {
                continue;
            }
            seen.insert((&keys[i], &keys[j]));
        }
    }
    seen.len()
}

/// Runs `iterations` rounds of amplitude amplification on the score
/// circuit's final state and returns the amplified probability of ancilla |0⟩.
///
/// One round applies `G = R_Ψ · Z_anc`, where `R_Ψ = A(2|0⟩⟨0| − I)A†` and `A`
/// is the full score circuit.
pub fn amplitude_amplification_demo(spec: &AttentionCircuitSpec, iterations: usize) -> Result<f64> {
    let circuit = spec.score_circuit()?;
    let adjoint: Vec<GateOp> = circuit.iter().rev().map(GateOp::adjoint).collect();
    let anc = spec.ancilla();
    let mut state = StateVector::new_zero_state(spec.working_qubits() + 1)?;
    state.apply_circuit(&circuit)?;
    for _ in 0..iterations {
        state.apply_gate(&GateOp::z(anc))?;
        state.apply_circuit(&adjoint)?;
        state.reflect_about_zero();
        state.apply_circuit(&circuit)?;
    }
    state.probability_zero(anc)
}
