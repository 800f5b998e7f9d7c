use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use qtransformer::cli::{cmd_attnmap, cmd_eval, cmd_generate, cmd_train, PropertySource, RunConfig};
use qtransformer::model::{sample_token, Checkpoint, Variant, HEAD_B, HEAD_W};
use qtransformer::rng::keyed_rng;

fn corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/qm9_style_sample.csv")
}

fn run_config(out: &Path, variant: Variant, epochs: usize) -> RunConfig {
    RunConfig {
        data: corpus(),
        limit: Some(60),
        variant,
        conditioned: true,
        epochs,
        batch_size: 16,
        d_value: 8,
        seed: 5,
        out_dir: out.to_path_buf(),
        checkpoint: out.join("best.qtck"),
        num_samples: 12,
        max_len: 30,
        ..RunConfig::default()
    }
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

fn metrics_rows(path: &Path) -> Vec<(usize, String, f64)> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[1].to_string(), r[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn train_eval_generate_attnmap() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_config(dir.path(), Variant::Quantum, 2);
    let summary = cmd_train(&run).unwrap();
    for name in ["vocab.txt", "split.csv", "stats.json", "metrics.csv", "timing.csv", "best_epoch.txt", "best.qtck"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    for epoch in 0..=2 {
        assert!(dir.path().join(format!("epoch_{epoch:03}.qtck")).exists());
    }

    // eval reproduces the logged validation loss of the best epoch
    let rows = metrics_rows(&dir.path().join("metrics.csv"));
    assert_eq!(rows.len(), 6);
    let logged = rows.iter().find(|r| r.0 == summary.best_epoch && r.1 == "val").unwrap().2;
    let report = cmd_eval(&run).unwrap();
    assert!((report.loss - logged).abs() <= 1e-9, "{} vs {logged}", report.loss);

    let ckpt = Checkpoint::load(&run.checkpoint).unwrap();
    assert_eq!(ckpt.epoch, summary.best_epoch);
    assert_eq!(Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap(), ckpt);
    let bytes = ckpt.to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());

    let generated = cmd_generate(&run).unwrap();
    assert_eq!(generated.targets.len(), 1);
    assert_eq!(generated.targets[0].samples.len(), 12);
    assert!(dir.path().join("generation.csv").exists());

    let sweep = RunConfig { property_source: PropertySource::SweepSigma, property: "MW".into(), ..run.clone() };
    let swept = cmd_generate(&sweep).unwrap();
    assert_eq!(swept.swept_property, Some(0));
    let labels: Vec<&str> = swept.targets.iter().map(|t| t.label.as_str()).collect();
    assert_eq!(labels.len(), 2);
    assert!(swept.targets[0].conditioning.unwrap()[0] < swept.targets[1].conditioning.unwrap()[0]);

    let map = dir.path().join("attn.csv");
    cmd_attnmap(&run, "CC(=O)O", &map).unwrap();
    let text = fs::read_to_string(&map).unwrap();
    // header plus one row per position (SOS and seven tokens)
    assert_eq!(text.lines().count(), 1 + 8);
    for line in text.lines().skip(1) {
        let sum: f64 = line.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn same_seed_gives_identical_metrics_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    in_pool(1, || cmd_train(&run_config(a.path(), Variant::Quantum, 1)).unwrap());
    in_pool(4, || cmd_train(&run_config(b.path(), Variant::Quantum, 1)).unwrap());
    let ma = fs::read(a.path().join("metrics.csv")).unwrap();
    let mb = fs::read(b.path().join("metrics.csv")).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(fs::read(a.path().join("best.qtck")).unwrap(), fs::read(b.path().join("best.qtck")).unwrap());

    let sa = in_pool(1, || cmd_generate(&run_config(a.path(), Variant::Quantum, 1)).unwrap());
    let sb = in_pool(3, || cmd_generate(&run_config(a.path(), Variant::Quantum, 1)).unwrap());
    assert_eq!(sa.targets[0].samples, sb.targets[0].samples);
}

#[test]
fn zero_epochs_writes_only_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&run_config(dir.path(), Variant::Classical, 0)).unwrap();
    let mut checkpoints: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".qtck"))
        .collect();
    checkpoints.sort();
    assert_eq!(checkpoints, ["best.qtck", "epoch_000.qtck"]);
    assert_eq!(metrics_rows(&dir.path().join("metrics.csv")).len(), 2);
}

#[test]
fn zeroed_head_samples_tokens_uniformly() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_config(dir.path(), Variant::ClassicalEq, 0);
    cmd_train(&run).unwrap();
    let mut ckpt = Checkpoint::load(&run.checkpoint).unwrap();
    ckpt.params.tensors.get_mut(HEAD_W).unwrap().fill(0.0);
    ckpt.params.tensors.get_mut(HEAD_B).unwrap().fill(0.0);
    let logits: Array1<f64> = ckpt.params.next_token_logits(&[1], Some(&[1.0; 9])).unwrap();
    let v = logits.len();
    let mut rng = keyed_rng(9, "uniform", 0);
    let draws = 200 * v;
    let mut counts = vec![0usize; v];
    for _ in 0..draws {
        counts[sample_token(logits.view(), 1.0, &mut rng).unwrap()] += 1;
    }
    // Pearson χ² with v − 1 degrees of freedom; 80 is far beyond the 0.999
    // quantile for 32 degrees of freedom
    let expected = draws as f64 / v as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < 80.0, "chi2 {chi2} counts {counts:?}");
}
