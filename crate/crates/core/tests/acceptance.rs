//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion to stderr (also under plain `cargo test`); for ordered output run
//!
//! cargo test -p qtransformer --test acceptance -- --test-threads=1

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array2;
use qtransformer::attention::{masked_softmax, quantum_attention_matrix, PositionAngles, QuantumAttentionParams};
use qtransformer::cli::random_spec;
use qtransformer::data::{ingest, property_stats, Dataset, Properties};
use qtransformer::grad::{finite_difference_grad, parameter_shift_grad, spsa_grad, spsa_grad_with_delta, rademacher};
use qtransformer::model::{batch_loss, Batch, ModelConfig, ModelParams, Variant};
use qtransformer::qcircuits::{
    amplitude_amplification_demo, attention_score, oracle_inner_product, score_parameter_shift_grad, AngleGroup,
    AnsatzParams, AttentionCircuitSpec, CircuitMode,
};
use qtransformer::rng::keyed_rng;
use qtransformer::smiles::{check_validity, MolGraph, Vocabulary};
use qtransformer::statevec::{GateOp, StateVector};
use qtransformer::train::{required_seq_len, train, TrainOptions, TrainOutcome};
use rand::Rng;

fn report(criterion: u32, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    // written to the handle directly so the harness does not capture it
    let _ = writeln!(std::io::stderr(), "{verdict} criterion {criterion:>2}: {title} ({detail})");
}

fn corpus_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/qm9_style_sample.csv")
}

fn modes() -> [CircuitMode; 2] {
    [CircuitMode::SequenceOnly, CircuitMode::Conditioned]
}

#[test]
fn criterion_01_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = keyed_rng(1, "acceptance/oracle", 0);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for mode in modes() {
        for _ in 0..500 {
            let spec = random_spec(&mut rng, 6, mode).unwrap();
            let diff = (attention_score(&spec).unwrap() - oracle_inner_product(&spec).unwrap()).abs();
            worst = worst.max(diff);
            cases += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = worst <= 1e-10 && secs < 60.0;
    report(1, "oracle equivalence", pass, &format!("{cases} specs, max |diff| {worst:.2e}, {secs:.2} s"));
    assert!(pass);
}

#[test]
fn criterion_02_bounds_and_self_score() {
    let mut rng = keyed_rng(2, "acceptance/bounds", 0);
    let mut out_of_bounds = 0;
    let mut worst_self: f64 = 0.0;
    for mode in modes() {
        for _ in 0..500 {
            let spec = random_spec(&mut rng, 6, mode).unwrap();
            let s = attention_score(&spec).unwrap();
            if !(-1.0..=1.0).contains(&s) {
                out_of_bounds += 1;
            }
            let same = AttentionCircuitSpec {
                token_j: spec.token_i.clone(),
                position_j: spec.position_i.clone(),
                key: spec.query.clone(),
                ..spec
            };
            worst_self = worst_self.max((attention_score(&same).unwrap() - 1.0).abs());
        }
    }
    let pass = out_of_bounds == 0 && worst_self <= 1e-12;
    report(2, "score bounds and self-score", pass, &format!("{out_of_bounds} out of [-1,1], max |self - 1| {worst_self:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_03_parameter_shift() {
    // closed form: <Z> after RY(θ)|0> is cos θ
    let expectation = |theta: &[f64]| {
        let mut s = StateVector::new_zero_state(1).unwrap();
        s.apply_gate(&GateOp::ry(0, theta[0])).unwrap();
        s.expectation_pauli_z(0).unwrap()
    };
    let mut worst_closed: f64 = 0.0;
    let mut evaluations_ok = true;
    for k in 0..20 {
        let theta = -std::f64::consts::PI + 2.0 * std::f64::consts::PI * k as f64 / 19.0;
        let g = parameter_shift_grad(expectation, &[theta]);
        evaluations_ok &= g.evaluations == 2;
        worst_closed = worst_closed.max((g.flat()[0] + theta.sin()).abs());
    }

    // full circuit: every angle table, gate-level shift against central FD
    let mut rng = keyed_rng(3, "acceptance/shift", 0);
    let mut worst_rel: f64 = 0.0;
    for draw in 0..200 {
        let mode = modes()[draw % 2];
        let spec = random_spec(&mut rng, 6, mode).unwrap();
        let (mut diff, mut norm) = (0.0, 0.0);
        for group in AngleGroup::ALL {
            let Some(table) = spec.angles(group) else { continue };
            let shift = score_parameter_shift_grad(&spec, group).unwrap();
            let fd = finite_difference_grad(
                |theta: &[f64]| {
                    let mut s = spec.clone();
                    s.angles_mut(group).unwrap().angles = theta.to_vec();
                    attention_score(&s).unwrap()
                },
                &table.angles,
                1e-5,
            )
            .flat();
            for (a, b) in shift.iter().zip(&fd) {
                diff += (a - b) * (a - b);
                norm += b * b;
            }
        }
        worst_rel = worst_rel.max(diff.sqrt() / norm.sqrt());
    }
    let pass = evaluations_ok && worst_closed <= 1e-12 && worst_rel <= 1e-5;
    report(
        3,
        "parameter-shift correctness",
        pass,
        &format!("closed form max err {worst_closed:.2e} at 20 points; 200 draws max relative err vs FD {worst_rel:.2e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_spsa() {
    // evaluation budget
    let mut calls = 0;
    let g = spsa_grad(
        |x: &[f64]| {
            calls += 1;
            x.iter().sum()
        },
        &[0.1; 50],
        0.01,
        4,
    )
    .unwrap();
    let budget_ok = calls == 2 && g.evaluations == 2;

    // linear loss: the difference quotient along Δ is the exact directional
    // derivative on every draw, so ĝ_k·Δ_k = c·Δ
    let c = [0.7, -1.3, 2.1, 0.4];
    let linear = |x: &[f64]| 0.25 + x.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
    let mut worst_linear: f64 = 0.0;
    for draw in 0..100 {
        let delta = rademacher(c.len(), &mut keyed_rng(4, "acceptance/linear", draw));
        let g = spsa_grad_with_delta(linear, &[0.3, -0.2, 1.0, 0.5], 0.01, &delta).unwrap().flat();
        let directional: f64 = c.iter().zip(&delta).map(|(a, b)| a * b).sum();
        for (gk, dk) in g.iter().zip(&delta) {
            worst_linear = worst_linear.max((gk * dk - directional).abs());
        }
    }
    // and in one dimension the estimate itself is exact per draw
    for draw in 0..20 {
        let g = spsa_grad(|x: &[f64]| 3.5 * x[0] - 1.0, &[0.2], 0.01, draw).unwrap().flat();
        worst_linear = worst_linear.max((g[0] - 3.5).abs());
    }

    // quadratic: Monte-Carlo mean over 10⁴ draws
    let a = [[2.0, 0.5, 0.0], [0.5, 1.0, -0.3], [0.0, -0.3, 1.5]];
    let b = [0.4, -0.8, 0.6];
    let quad = |x: &[f64]| {
        let mut f = 0.0;
        for i in 0..3 {
            f += b[i] * x[i];
            for j in 0..3 {
                f += 0.5 * x[i] * a[i][j] * x[j];
            }
        }
        f
    };
    let x = [0.3, -0.7, 1.1];
    let exact: Vec<f64> = (0..3).map(|i| b[i] + (0..3).map(|j| a[i][j] * x[j]).sum::<f64>()).collect();
    let draws = 10_000;
    let mut mean = [0.0; 3];
    for seed in 0..draws {
        let g = spsa_grad(quad, &x, 0.01, seed).unwrap().flat();
        for i in 0..3 {
            mean[i] += g[i] / draws as f64;
        }
    }
    let err: f64 = mean.iter().zip(&exact).map(|(m, e)| (m - e) * (m - e)).sum::<f64>().sqrt();
    let norm: f64 = exact.iter().map(|e| e * e).sum::<f64>().sqrt();
    let rel = err / norm;

    let pass = budget_ok && worst_linear <= 1e-9 && rel <= 0.02;
    report(
        4,
        "SPSA contract",
        pass,
        &format!("{calls} evaluations; linear max err {worst_linear:.2e}; quadratic mean relative err {:.2}%", 100.0 * rel),
    );
    assert!(pass);
}

#[test]
fn criterion_05_amplitude_amplification() {
    let mut rng = keyed_rng(5, "acceptance/amplification", 0);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let spec = random_spec(&mut rng, 6, modes()[case % 2]).unwrap();
        let p0 = ((1.0 + attention_score(&spec).unwrap()) / 2.0).clamp(0.0, 1.0);
        let angle = p0.sqrt().asin();
        for m in 0..4 {
            let expected = ((2 * m + 1) as f64 * angle).sin().powi(2);
            worst = worst.max((amplitude_amplification_demo(&spec, m).unwrap() - expected).abs());
        }
    }
    let pass = worst <= 1e-9;
    report(5, "amplitude amplification", pass, &format!("50 specs x m=0..3, max err {worst:.2e}"));
    assert!(pass);
}

fn random_angles<R: Rng>(rng: &mut R, n: usize) -> AnsatzParams {
    AnsatzParams::new((0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect())
}

/// Positions built from token and position tables, as the model does.
fn positions(tokens: &[usize], token_table: &[AnsatzParams], position_table: &[AnsatzParams]) -> Vec<PositionAngles> {
    tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| PositionAngles { token: token_table[t].clone(), position: position_table[i].clone() })
        .collect()
}

fn brute_force_tuples(pos: &[PositionAngles]) -> usize {
    let key = |p: &PositionAngles| -> Vec<u64> { p.token.angles.iter().chain(&p.position.angles).map(|a| a.to_bits()).collect() };
    let mut set = std::collections::HashSet::new();
    for i in 0..pos.len() {
        for j in 0..=i {
            if (i, j) != (0, 0) {
                set.insert((key(&pos[i]), key(&pos[j])));
            }
        }
    }
    set.len()
}

#[test]
fn criterion_06_circuit_budget() {
    let mut rng = keyed_rng(6, "acceptance/budget", 0);
    let (w, r) = (6, 3);
    let query = random_angles(&mut rng, w);
    let key = random_angles(&mut rng, w);
    let params = |dedup| QuantumAttentionParams { query: &query, key: &key, property: None, d_k: 64, dedup };
    let token_table: Vec<AnsatzParams> = (0..12).map(|_| random_angles(&mut rng, r)).collect();
    // position angles start at zero in a fresh model
    let zero_positions = vec![AnsatzParams::zeros(r); 12];
    let random_positions: Vec<AnsatzParams> = (0..12).map(|_| random_angles(&mut rng, r)).collect();

    let (mut distinct_ok, mut repeated_ok, mut brute_ok) = (true, true, true);
    let mut worst: f64 = 0.0;
    for case in 0..30 {
        let n = rng.gen_range(2..=8);
        let mut ids: Vec<usize> = (0..12).collect();
        rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut rng);
        let distinct = &ids[..n];
        let m = quantum_attention_matrix(&positions(distinct, &token_table, &zero_positions), &params(true)).unwrap();
        distinct_ok &= m.circuits_executed == (n * n + n) / 2 - 1 && m.dedup_hits == 0;

        let repeated: Vec<usize> = (0..n).map(|i| if i == n - 1 { distinct[0] } else { distinct[i] }).collect();
        let tables = if case % 2 == 0 { &zero_positions } else { &random_positions };
        let pos = positions(&repeated, &token_table, tables);
        let with = quantum_attention_matrix(&pos, &params(true)).unwrap();
        let without = quantum_attention_matrix(&pos, &params(false)).unwrap();
        brute_ok &= with.circuits_executed == brute_force_tuples(&pos);
        if case % 2 == 0 {
            repeated_ok &= with.circuits_executed < (n * n + n) / 2 - 1;
        }
        worst = worst.max((&with.weights - &without.weights).iter().fold(0.0, |a, d| a.max(d.abs())));
        worst = worst.max((&with.raw_scores - &without.raw_scores).iter().fold(0.0, |a, d| a.max(d.abs())));
    }
    let pass = distinct_ok && repeated_ok && brute_ok && worst <= 1e-12;
    report(
        6,
        "circuit budget",
        pass,
        &format!(
            "distinct exact: {distinct_ok}; repeated fewer: {repeated_ok}; matches brute-force tuple count: {brute_ok}; dedup max diff {worst:.2e}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_attention_invariants() {
    let mut rng = keyed_rng(7, "acceptance/attention", 0);
    let (mut worst_row, mut worst_upper, mut causal_fail): (f64, f64, usize) = (0.0, 0.0, 0);
    for case in 0..100 {
        let n = rng.gen_range(2..=7);
        let conditioned = case % 2 == 1;
        let (w, r) = if conditioned { (6, 2) } else { (6, 3) };
        let query = random_angles(&mut rng, w);
        let key = random_angles(&mut rng, w);
        let property = random_angles(&mut rng, r);
        let params = QuantumAttentionParams {
            query: &query,
            key: &key,
            property: conditioned.then_some(&property),
            d_k: 64,
            dedup: true,
        };
        let mut pos: Vec<PositionAngles> =
            (0..n).map(|_| PositionAngles { token: random_angles(&mut rng, r), position: random_angles(&mut rng, r) }).collect();
        let m = quantum_attention_matrix(&pos, &params).unwrap();
        for i in 0..n {
            worst_row = worst_row.max((m.weights.row(i).sum() - 1.0).abs());
            for j in i + 1..n {
                worst_upper = worst_upper.max(m.weights[[i, j]].abs());
            }
        }
        // perturbing position t must leave rows above t untouched
        let t = rng.gen_range(1..n);
        pos[t] = PositionAngles { token: random_angles(&mut rng, r), position: random_angles(&mut rng, r) };
        let p = quantum_attention_matrix(&pos, &params).unwrap();
        if (0..t).any(|i| m.weights.row(i) != p.weights.row(i)) {
            causal_fail += 1;
        }
    }
    // also the bare softmax on arbitrary scores
    let scores = Array2::from_shape_fn((6, 6), |(i, j)| ((i * 7 + j * 3) as f64).sin() * 8.0);
    let soft = masked_softmax(&scores);
    for i in 0..6 {
        worst_row = worst_row.max((soft.row(i).sum() - 1.0).abs());
    }
    let pass = worst_row <= 1e-9 && worst_upper == 0.0 && causal_fail == 0;
    report(
        7,
        "attention invariants",
        pass,
        &format!("max |row sum - 1| {worst_row:.2e}; max upper {worst_upper:.1e}; {causal_fail}/100 causal failures"),
    );
    assert!(pass);
}

fn tiny_batch(conditioned: bool) -> (Batch, Vec<Properties>) {
    let seqs = vec![vec![1, 4, 5, 3, 2], vec![1, 3, 2], vec![1, 5, 4, 2]];
    let props: Vec<Properties> = (0..3).map(|b| std::array::from_fn(|k| 1.0 + 0.5 * k as f64 + 0.3 * b as f64)).collect();
    (Batch::from_sequences(&seqs, conditioned.then_some(props.as_slice())).unwrap(), props)
}

#[test]
fn criterion_08_reverse_mode_gradients() {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for variant in [Variant::Quantum, Variant::ClassicalEq, Variant::Classical] {
        for conditioned in [false, true] {
            let config = ModelConfig {
                variant,
                conditioned,
                working_qubits: if conditioned { 3 } else { 4 },
                vocab_size: 6,
                max_seq_len: 5,
                d_value: 3,
                seed: 8,
            };
            let mut params = ModelParams::init(config).unwrap();
            let (batch, props) = tiny_batch(conditioned);
            if conditioned {
                params.fit_buffers(&props).unwrap();
            }
            let (_, grads) = params.loss_and_classical_grads(&batch).unwrap();
            for (name, g) in &grads {
                let x: Vec<f64> = params.tensors[name].iter().copied().collect();
                let fd = finite_difference_grad(
                    |v: &[f64]| {
                        let mut p = params.clone();
                        let t = p.tensors.get_mut(name).unwrap();
                        for (dst, src) in t.iter_mut().zip(v) {
                            *dst = *src;
                        }
                        batch_loss(&p, &batch).unwrap()
                    },
                    &x,
                    1e-5,
                )
                .flat();
                let (mut diff, mut norm) = (0.0, 0.0);
                for (a, b) in g.iter().zip(&fd) {
                    diff += (a - b) * (a - b);
                    norm += b * b;
                }
                let rel = if norm > 0.0 { (diff / norm).sqrt() } else { diff.sqrt() };
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    let pass = worst <= 1e-5;
    report(8, "reverse-mode gradient check", pass, &format!("{checked} tensors over 3 variants x 2 modes, max relative err {worst:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_09_tokenizer_and_validity() {
    let ds = ingest(&corpus_path(), 0).unwrap();
    let vocab = Vocabulary::for_corpus(ds.records.iter().map(|r| r.smiles.as_str())).unwrap();
    let (mut round_trip, mut invalid, mut cyclomatic) = (0, 0, 0);
    for r in &ds.records {
        let ids = vocab.tokenize(&r.smiles).unwrap();
        if vocab.detokenize(&ids).unwrap() != r.smiles {
            round_trip += 1;
        }
        if !check_validity(&r.smiles).is_valid() {
            invalid += 1;
        }
        match MolGraph::from_smiles(&r.smiles) {
            Ok(g) if g.ring_closures == g.cyclomatic_number() => {}
            _ => cyclomatic += 1,
        }
    }
    let pass = round_trip == 0 && invalid == 0 && cyclomatic == 0;
    report(
        9,
        "tokenizer and validity",
        pass,
        &format!("{} molecules: {round_trip} round-trip failures, {invalid} false negatives, {cyclomatic} cyclomatic failures", ds.len()),
    );
    assert!(pass);
}

struct SmokeRun {
    outcome: TrainOutcome,
    seconds: f64,
}

fn smoke_data() -> (Vocabulary, Dataset) {
    (Vocabulary::qm9(), ingest(&corpus_path(), 0).unwrap().truncated(200, 0))
}

fn smoke(variant: Variant) -> SmokeRun {
    let (vocab, data) = smoke_data();
    let config = ModelConfig { max_seq_len: required_seq_len(&vocab, &data).unwrap(), ..ModelConfig::new(variant, true) };
    let options = TrainOptions { epochs: 5, batch_size: 32, ..TrainOptions::default() };
    let started = Instant::now();
    let outcome = train(ModelParams::init(config).unwrap(), &vocab, &data, &options, |_, _, _| Ok(())).unwrap();
    SmokeRun { outcome, seconds: started.elapsed().as_secs_f64() }
}

fn quantum_smoke() -> &'static SmokeRun {
    static RUN: OnceLock<SmokeRun> = OnceLock::new();
    RUN.get_or_init(|| smoke(Variant::Quantum))
}

fn train_row(run: &SmokeRun, epoch: usize) -> (f64, f64) {
    let row = run
        .outcome
        .history
        .iter()
        .find(|m| m.epoch == epoch && m.split == qtransformer::data::Split::Train)
        .unwrap();
    (row.loss, row.accuracy)
}

#[test]
fn criterion_10_smoke_training() {
    let run = quantum_smoke();
    let (first, _) = train_row(run, 0);
    let (last, accuracy) = train_row(run, 5);
    let drop = 1.0 - last / first;
    let baseline = 1.0 / 33.0;
    let pass = drop >= 0.2 && accuracy >= 3.0 * baseline && run.seconds <= 1800.0;
    report(
        10,
        "smoke training",
        pass,
        &format!(
            "train loss {first:.4} -> {last:.4} ({:.1}% drop), accuracy {accuracy:.3} = {:.1}x uniform, {:.1} s",
            100.0 * drop,
            accuracy / baseline,
            run.seconds
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_11_baseline_parity() {
    let mut shared_ok = true;
    let mut shared = 0;
    for conditioned in [false, true] {
        let q = ModelParams::init(ModelConfig::new(Variant::Quantum, conditioned)).unwrap();
        let c = ModelParams::init(ModelConfig::new(Variant::ClassicalEq, conditioned)).unwrap();
        for (name, t) in &q.tensors {
            if let Some(u) = c.tensors.get(name) {
                if u.shape() == t.shape() {
                    shared += 1;
                    shared_ok &= u == t;
                }
            }
        }
    }
    let mut summaries = Vec::new();
    let mut all_finite = true;
    for variant in [Variant::Quantum, Variant::ClassicalEq, Variant::Classical] {
        let run = if variant == Variant::Quantum { quantum_smoke() } else { &smoke(variant) };
        let (first, _) = train_row(run, 0);
        let (last, _) = train_row(run, 5);
        all_finite &= first.is_finite() && last.is_finite();
        summaries.push(format!("{}: {first:.3} -> {last:.3}", variant.name()));
    }
    let pass = shared_ok && shared > 0 && all_finite;
    report(
        11,
        "baseline parity harness",
        pass,
        &format!("{shared} shared tensors identical: {shared_ok}; {}", summaries.join(", ")),
    );
    assert!(pass);
}

const REFERENCE_MEANS: [f64; 9] = [122.77, 2.23, 0.83, 0.92, 1.74, 2.47, 37.16, 0.30, 1.71];

fn qm9_properties_path() -> Option<PathBuf> {
    if let Ok(p) = std::env::var("QM9_PROPERTIES_CSV") {
        return Some(PathBuf::from(p));
    }
    let default = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/qm9_properties.csv");
    default.exists().then_some(default)
}

fn check_reference_means(path: &Path) -> (bool, String) {
    let ds = ingest(path, 0).unwrap();
    let rows: Vec<Properties> = ds.records.iter().map(|r| r.properties).collect();
    let means = property_stats(&rows).unwrap().mean();
    let worst = means.iter().zip(&REFERENCE_MEANS).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    (worst <= 0.01, format!("{} molecules, means {means:.2?}, max |diff| {worst:.3}", ds.len()))
}

#[test]
fn criterion_12_statistics_reproduction() {
    match qm9_properties_path() {
        Some(path) => {
            let (pass, detail) = check_reference_means(&path);
            report(12, "statistics reproduction", pass, &detail);
            assert!(pass);
        }
        None => {
            // No full QM9 property file in this environment: reported, not asserted.
            report(
                12,
                "statistics reproduction",
                false,
                "QM9 property CSV not found; set QM9_PROPERTIES_CSV or place it at data/qm9_properties.csv",
            );
        }
    }
}
