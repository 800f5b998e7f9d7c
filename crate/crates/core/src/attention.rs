//! Causal attention matrices, quantum or classical.
//!
//! Masking restricts each row's softmax to the prefix `0..=i`; entries above
//! the diagonal are exactly zero in every weight matrix.

use std::collections::HashMap;
use std::io::Write;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::qcircuits::{attention_score, AnsatzParams, AttentionCircuitSpec, CircuitMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Quantum,
    Classical,
}

/// An `n × n` causal attention matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    pub n: usize,
    /// Unscaled scores. For quantum matrices these are circuit outputs in
    /// `[−1, 1]`; entry `(0, 0)` is not evaluated and holds 0.
    pub raw_scores: Array2<f64>,
    /// Pre-softmax logits after the `√d_k` (quantum) or `1/√d_k`
    /// (classical) scaling.
    pub scaled_scores: Array2<f64>,
    /// Row-softmaxed weights; the strict upper triangle is 0.
    pub weights: Array2<f64>,
    pub provenance: Provenance,
    /// Circuits actually executed (quantum only).
    pub circuits_executed: usize,
    /// Lower-triangle entries served from an identical earlier circuit.
    pub dedup_hits: usize,
}

impl AttentionMatrix {
    /// Writes the weights as CSV, 17 significant digits, row-major. When
    /// `labels` is given it becomes the header row and first column.
    pub fn write_csv<W: Write>(&self, out: W, labels: Option<&[String]>) -> Result<()> {
        let mut writer = csv::WriterBuilder::new().from_writer(out);
        if let Some(labels) = labels {
            if labels.len() != self.n {
                return Err(Error::validation(format!(
                    "{} labels for a {}x{} matrix",
                    labels.len(),
                    self.n,
                    self.n
                )));
            }
            let mut header = vec![String::new()];
            header.extend(labels.iter().cloned());
            writer.write_record(&header)?;
        }
        for i in 0..self.n {
            let mut row = Vec::with_capacity(self.n + 1);
            if let Some(labels) = labels {
                row.push(labels[i].clone());
            }
            row.extend((0..self.n).map(|j| format!("{:.16e}", self.weights[[i, j]])));
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Softmax of each row over its causal prefix.
pub fn masked_softmax(scores: &Array2<f64>) -> Array2<f64> {
    let n = scores.nrows();
    let mut weights = Array2::zeros((n, n));
    for i in 0..n {
        let row = scores.row(i);
        let max = (0..=i).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..=i {
            let e = (row[j] - max).exp();
            weights[[i, j]] = e;
            total += e;
        }
        for j in 0..=i {
            weights[[i, j]] /= total;
        }
    }
    weights
}

/// Angles feeding one sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionAngles {
    pub token: AnsatzParams,
    pub position: AnsatzParams,
}

impl PositionAngles {
    fn key(&self) -> Vec<u64> {
        self.token.angles.iter().chain(&self.position.angles).map(|a| a.to_bits()).collect()
    }
}

/// Shared circuit parameters for one quantum attention matrix.
#[derive(Debug, Clone, Copy)]
pub struct QuantumAttentionParams<'a> {
    pub query: &'a AnsatzParams,
    pub key: &'a AnsatzParams,
    pub property: Option<&'a AnsatzParams>,
    pub d_k: usize,
    /// Reuse results of circuits whose parameters coincide.
    pub dedup: bool,
}

impl QuantumAttentionParams<'_> {
    fn mode(&self) -> CircuitMode {
        if self.property.is_some() {
            CircuitMode::Conditioned
        } else {
            CircuitMode::SequenceOnly
        }
    }

    fn spec(&self, pi: &PositionAngles, pj: &PositionAngles) -> AttentionCircuitSpec {
        AttentionCircuitSpec {
            mode: self.mode(),
            token_i: pi.token.clone(),
            position_i: pi.position.clone(),
            token_j: pj.token.clone(),
            position_j: pj.position.clone(),
            property: self.property.cloned(),
            query: self.query.clone(),
            key: self.key.clone(),
        }
    }
}

/// Evaluates the circuits for the listed `(i, j)` pairs, deduplicating by
/// parameter identity. Returns per-pair raw scores plus (executed, hits).
fn evaluate_pairs(
    positions: &[PositionAngles],
    pairs: &[(usize, usize)],
    params: &QuantumAttentionParams<'_>,
) -> Result<(Vec<f64>, usize, usize)> {
    let keys: Vec<Vec<u64>> = positions.iter().map(PositionAngles::key).collect();
    // slot[p] = index into the list of circuits to run
    let mut slots = Vec::with_capacity(pairs.len());
    let mut jobs: Vec<(usize, usize)> = Vec::new();
    let mut seen: HashMap<(&[u64], &[u64]), usize> = HashMap::new();
    for &(i, j) in pairs {
        if params.dedup {
            let next = jobs.len();
            let slot = *seen.entry((&keys[i], &keys[j])).or_insert(next);
            if slot == next {
                jobs.push((i, j));
            }
            slots.push(slot);
        } else {
            slots.push(jobs.len());
            jobs.push((i, j));
        }
    }
    let results: Vec<f64> = jobs
        .par_iter()
        .map(|&(i, j)| attention_score(&params.spec(&positions[i], &positions[j])))
        .collect::<Result<_>>()?;
    let executed = jobs.len();
    let hits = pairs.len() - executed;
    Ok((slots.into_iter().map(|s| results[s]).collect(), executed, hits))
}

/// Builds the masked attention matrix from circuit scores.
///
/// Scores are multiplied by `√d_k` before the row softmax. Entry `(0, 0)`
/// is skipped since its weight is fixed at 1 by the mask.
pub fn quantum_attention_matrix(
    positions: &[PositionAngles],
    params: &QuantumAttentionParams<'_>,
) -> Result<AttentionMatrix> {
    let n = positions.len();
    if n == 0 {
        return Err(Error::validation("empty sequence"));
    }
    let pairs: Vec<(usize, usize)> =
        (0..n).flat_map(|i| (0..=i).map(move |j| (i, j))).filter(|&p| p != (0, 0)).collect();
    let (values, executed, hits) = evaluate_pairs(positions, &pairs, params)?;
    let scale = (params.d_k as f64).sqrt();
    let mut raw = Array2::zeros((n, n));
    let mut scaled = Array2::zeros((n, n));
    for (&(i, j), v) in pairs.iter().zip(values) {
        raw[[i, j]] = v;
        scaled[[i, j]] = scale * v;
    }
    let weights = masked_softmax(&scaled);
    Ok(AttentionMatrix {
        n,
        raw_scores: raw,
        scaled_scores: scaled,
        weights,
        provenance: Provenance::Quantum,
        circuits_executed: executed,
        dedup_hits: hits,
    })
}

/// Softmax weights of the last row only, `positions.len() − 1`, which is all
/// that next-token sampling needs.
pub fn quantum_attention_last_row(
    positions: &[PositionAngles],
    params: &QuantumAttentionParams<'_>,
) -> Result<Vec<f64>> {
    let n = positions.len();
    if n == 0 {
        return Err(Error::validation("empty sequence"));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let pairs: Vec<(usize, usize)> = (0..n).map(|j| (n - 1, j)).collect();
    let (values, _, _) = evaluate_pairs(positions, &pairs, params)?;
    let scale = (params.d_k as f64).sqrt();
    let scores = Array2::from_shape_fn((1, n), |(_, j)| scale * values[j]);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Classical causal attention `softmax(Z W_Q (Z W_K)ᵀ / √d_k)`.
pub fn classical_attention_matrix(
    z: ArrayView2<'_, f64>,
    w_q: ArrayView2<'_, f64>,
    w_k: ArrayView2<'_, f64>,
    d_k: usize,
) -> Result<AttentionMatrix> {
    let n = z.nrows();
    if n == 0 {
        return Err(Error::validation("empty sequence"));
    }
    if w_q.nrows() != z.ncols() || w_k.nrows() != z.ncols() || w_q.ncols() != w_k.ncols() {
        return Err(Error::validation(format!(
            "shape mismatch: Z {:?}, W_Q {:?}, W_K {:?}",
            z.shape(),
            w_q.shape(),
            w_k.shape()
        )));
    }
    if d_k == 0 {
        return Err(Error::validation("d_k must be positive"));
    }
    let q = z.dot(&w_q);
    let k = z.dot(&w_k);
    let mut raw = q.dot(&k.t());
    for i in 0..n {
        for j in i + 1..n {
            raw[[i, j]] = 0.0;
        }
    }
    let scaled = &raw / (d_k as f64).sqrt();
    let weights = masked_softmax(&scaled);
    Ok(AttentionMatrix {
        n,
        raw_scores: raw,
        scaled_scores: scaled,
        weights,
        provenance: Provenance::Classical,
        circuits_executed: 0,
        dedup_hits: 0,
    })
}

/// `A V`: row `i` of the result is a convex combination of rows `0..=i` of `V`.
pub fn apply_attention(weights: &AttentionMatrix, v: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if v.nrows() != weights.n {
        return Err(Error::validation(format!(
            "value matrix has {} rows, attention is {}x{}",
            v.nrows(),
            weights.n,
            weights.n
        )));
    }
    Ok(weights.weights.dot(&v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;
    use ndarray::array;
    use rand::Rng;

    fn naive_matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let mut c = Array2::zeros((a.nrows(), b.ncols()));
        for i in 0..a.nrows() {
            for j in 0..b.ncols() {
                let mut s = 0.0;
                for k in 0..a.ncols() {
                    s += a[[i, k]] * b[[k, j]];
                }
                c[[i, j]] = s;
            }
        }
        c
    }

    fn random(rows: usize, cols: usize, idx: u64) -> Array2<f64> {
        let mut rng = keyed_rng(5, "attention-test", idx);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    fn angles(values: &[f64]) -> AnsatzParams {
        AnsatzParams::new(values.to_vec())
    }

    fn positions(tokens: &[f64]) -> Vec<PositionAngles> {
        tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| PositionAngles {
                token: angles(&[t, 0.5 * t]),
                position: angles(&[0.1 * i as f64, 0.0]),
            })
            .collect()
    }

    #[test]
    fn single_position_needs_no_circuit() {
        let q = angles(&[0.1, 0.2, 0.3, 0.4]);
        let k = angles(&[0.4, 0.3, 0.2, 0.1]);
        let params = QuantumAttentionParams { query: &q, key: &k, property: None, d_k: 16, dedup: true };
        let m = quantum_attention_matrix(&positions(&[1.0]), &params).unwrap();
        assert_eq!(m.weights, array![[1.0]]);
        assert_eq!(m.circuits_executed, 0);
    }

    #[test]
    fn distinct_positions_run_full_triangle() {
        let q = angles(&[0.1, 0.2, 0.3, 0.4]);
        let k = angles(&[0.4, 0.3, 0.2, 0.1]);
        let params = QuantumAttentionParams { query: &q, key: &k, property: None, d_k: 16, dedup: true };
        let m = quantum_attention_matrix(&positions(&[1.0, 2.0, 3.0]), &params).unwrap();
        assert_eq!(m.circuits_executed, 5);
        assert_eq!(m.dedup_hits, 0);
        for i in 0..3 {
            assert!((m.weights.row(i).sum() - 1.0).abs() < 1e-12);
            for j in 0..3 {
                if j > i {
                    assert_eq!(m.weights[[i, j]], 0.0);
                } else if (i, j) != (0, 0) {
                    assert!((m.scaled_scores[[i, j]] - 4.0 * m.raw_scores[[i, j]]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn last_row_matches_full_matrix() {
        let q = angles(&[0.9, 0.2, 1.3, 0.4]);
        let k = angles(&[0.4, 2.3, 0.2, 0.1]);
        let params = QuantumAttentionParams { query: &q, key: &k, property: None, d_k: 16, dedup: true };
        let pos = positions(&[1.0, 2.0, 1.0, 0.3]);
        let full = quantum_attention_matrix(&pos, &params).unwrap();
        let row = quantum_attention_last_row(&pos, &params).unwrap();
        for j in 0..4 {
            assert!((full.weights[[3, j]] - row[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn scaling_arithmetic() {
        // raw 0.5 with d_k = 64 is stored as 4.0
        assert_eq!(0.5 * (64f64).sqrt(), 4.0);
    }

    #[test]
    fn zero_embeddings_give_uniform_rows() {
        let z = Array2::zeros((4, 3));
        let w = random(3, 2, 1);
        let m = classical_attention_matrix(z.view(), w.view(), w.view(), 2).unwrap();
        for i in 0..4 {
            for j in 0..=i {
                assert!((m.weights[[i, j]] - 1.0 / (i + 1) as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn classical_single_token() {
        let z = random(1, 4, 2);
        let w = random(4, 4, 3);
        let m = classical_attention_matrix(z.view(), w.view(), w.view(), 4).unwrap();
        assert_eq!(m.weights, array![[1.0]]);
    }

    #[test]
    fn classical_matches_naive_reference() {
        let (n, d, dq) = (5, 4, 3);
        let z = random(n, d, 10);
        let wq = random(d, dq, 11);
        let wk = random(d, dq, 12);
        let m = classical_attention_matrix(z.view(), wq.view(), wk.view(), dq).unwrap();
        let q = naive_matmul(&z, &wq);
        let k = naive_matmul(&z, &wk);
        for i in 0..n {
            let logits: Vec<f64> = (0..=i)
                .map(|j| (0..dq).map(|c| q[[i, c]] * k[[j, c]]).sum::<f64>() / (dq as f64).sqrt())
                .collect();
            let total: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..n {
                let expect = if j <= i { logits[j].exp() / total } else { 0.0 };
                assert!((m.weights[[i, j]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classical_shape_mismatch() {
        let z = random(3, 4, 1);
        let w = random(3, 2, 1);
        assert!(classical_attention_matrix(z.view(), w.view(), w.view(), 2).is_err());
    }

    #[test]
    fn apply_attention_cases() {
        let one = classical_attention_matrix(
            random(1, 2, 4).view(),
            random(2, 2, 5).view(),
            random(2, 2, 6).view(),
            2,
        )
        .unwrap();
        let v = random(1, 3, 7);
        assert_eq!(apply_attention(&one, v.view()).unwrap(), v);

        let mut half = one.clone();
        half.n = 3;
        half.weights = array![[1.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.2, 0.3, 0.5]];
        let v = random(3, 4, 8);
        let out = apply_attention(&half, v.view()).unwrap();
        for c in 0..4 {
            assert!((out[[1, c]] - 0.5 * (v[[0, c]] + v[[1, c]])).abs() < 1e-15);
        }
        let naive = naive_matmul(&half.weights, &v);
        assert!(out.iter().zip(naive.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(apply_attention(&half, random(2, 4, 9).view()).is_err());
    }

    #[test]
    fn csv_export_shape() {
        let m = classical_attention_matrix(
            random(3, 2, 4).view(),
            random(2, 2, 5).view(),
            random(2, 2, 6).view(),
            2,
        )
        .unwrap();
        let labels: Vec<String> = ["<sos>", "C", "O"].iter().map(|s| s.to_string()).collect();
        let mut buf = Vec::new();
        m.write_csv(&mut buf, Some(&labels)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], ",<sos>,C,O");
        assert!(lines[1].starts_with("<sos>,1.0000000000000000e0,0.0000000000000000e0"));
    }
}
