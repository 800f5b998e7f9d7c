//! Command-line commands. The binary only parses arguments and calls
//! [`run`]; every command is also callable as a library function.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use rayon::prelude::*;

use crate::data::{
    cross_check_descriptors, ingest, knn_impute, property_index, Dataset, Properties, PropertyStats, Split,
    NUM_PROPERTIES, PROPERTY_NAMES,
};
use crate::error::{Error, Result};
use crate::grad::{finite_difference_grad, AdamWConfig};
use crate::model::{count_parameters, Checkpoint, ModelConfig, ModelParams, Variant};
use crate::qcircuits::{
    amplitude_amplification_demo, attention_score, oracle_inner_product, register_size, score_parameter_shift_grad, AngleGroup,
    AnsatzParams,
    AttentionCircuitSpec, CircuitMode,
};
use crate::rng::keyed_rng;
use crate::smiles::{check_validity, descriptors, generation_metrics, GenerationMetrics, MolGraph, Vocabulary, SOS_ID};
use crate::train::{evaluate, required_seq_len, train, EncodedSplit, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "qtransformer", version, about = "Hybrid quantum-classical transformer for SMILES generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write per-epoch checkpoints and metrics.
    Train(RunConfig),
    /// Sample SMILES from a checkpoint and score them.
    Generate(RunConfig),
    /// Validation loss and next-token accuracy of a checkpoint.
    Eval(RunConfig),
    /// Export the attention weights for one SMILES string as CSV.
    Attnmap {
        #[command(flatten)]
        run: RunConfig,
        #[arg(long)]
        smiles: String,
        /// Output CSV (default: <out-dir>/attention.csv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the built-in oracle, gradient and amplification checks.
    Selftest {
        #[command(flatten)]
        run: RunConfig,
        /// Add this offset to every circuit score (test hook).
        #[arg(long, hide = true, default_value_t = 0.0)]
        perturb_score: f64,
    },
    /// Compare natively computed descriptors with the data file.
    Descriptors(RunConfig),
    /// Property statistics of the training split.
    Stats(RunConfig),
    /// Parameter counts per tensor for a configuration.
    Params(RunConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PropertySource {
    Mean,
    Median,
    Mode,
    Explicit,
    /// Mean ± 2σ of one property, others imputed by k-NN.
    SweepSigma,
    /// Median ± 1.5·IQR of one property, others imputed by k-NN.
    SweepIqr,
}

#[derive(Debug, Clone, Args)]
pub struct RunConfig {
    /// Property CSV (SMILES,MW,HBA,HBD,nRot,nRing,nHet,TPSA,logP,Stereo).
    #[arg(long, default_value = "data/qm9_style_sample.csv")]
    pub data: PathBuf,
    /// Use only the first N molecules of the file.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, value_enum, default_value_t = Variant::Quantum)]
    pub variant: Variant,
    #[arg(long)]
    pub conditioned: bool,
    #[arg(long, default_value_t = 6)]
    pub working_qubits: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.005)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 1.0)]
    pub clip_norm: f64,
    #[arg(long, default_value_t = 0.01)]
    pub spsa_epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Longest input the position tables cover (default: from the data).
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub d_value: usize,
    /// Checkpoint to read (generate, eval, attnmap).
    #[arg(long, default_value = "runs/latest/best.qtck")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "runs/latest")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub num_samples: usize,
    #[arg(long, value_enum, default_value_t = PropertySource::Mean)]
    pub property_source: PropertySource,
    /// Nine comma-separated values for `--property-source explicit`.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub properties: Vec<f64>,
    /// Property swept by the sweep sources.
    #[arg(long, default_value = "MW")]
    pub property: String,
    #[arg(long, default_value_t = 5)]
    pub knn_k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Longest generated sequence in tokens (capped by the model).
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    /// Worker threads (default: available cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cli = Cli::parse_from(["qtransformer", "stats"]);
        match cli.command {
            Command::Stats(run) => run,
            _ => unreachable!(),
        }
    }
}

impl RunConfig {
    fn dataset(&self) -> Result<Dataset> {
        let data = ingest(&self.data, self.seed)?;
        Ok(match self.limit {
            Some(n) => data.truncated(n, self.seed),
            None => data,
        })
    }

    fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adamw: AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, clip_norm: self.clip_norm, ..AdamWConfig::default() },
            spsa_epsilon: self.spsa_epsilon,
            seed: self.seed,
        }
    }

    fn explicit_properties(&self) -> Result<Properties> {
        self.properties.as_slice().try_into().map_err(|_| {
            Error::validation(format!("--properties needs {NUM_PROPERTIES} values, got {}", self.properties.len()))
        })
    }
}

/// Process exit code for an error: 1 usage, 2 data, 3 invariant.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Validation(_) | Error::Resource(_) => 1,
        Error::Invariant(_) => 3,
        Error::Tokenize { .. } | Error::Data { .. } | Error::Checkpoint(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 2,
    }
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Resource(e.to_string()))
}

/// Runs a parsed command inside its thread pool.
pub fn run(cli: Cli) -> Result<()> {
    let threads = match &cli.command {
        Command::Train(r) | Command::Generate(r) | Command::Eval(r) | Command::Descriptors(r) | Command::Stats(r) | Command::Params(r) => r.threads,
        Command::Attnmap { run, .. } | Command::Selftest { run, .. } => run.threads,
    };
    thread_pool(threads)?.install(|| match cli.command {
        Command::Train(run) => cmd_train(&run).map(|s| println!("{s}")),
        Command::Generate(run) => cmd_generate(&run).map(|r| println!("{r}")),
        Command::Eval(run) => cmd_eval(&run).map(|r| println!("{r}")),
        Command::Attnmap { run, smiles, output } => {
            let path = output.unwrap_or_else(|| run.out_dir.join("attention.csv"));
            cmd_attnmap(&run, &smiles, &path).map(|_| println!("wrote {}", path.display()))
        }
        Command::Selftest { run, perturb_score } => {
            let report = cmd_selftest(run.seed, perturb_score);
            println!("{report}");
            if report.passed() {
                Ok(())
            } else {
                Err(Error::Invariant(report.failed_suites().join(", ")))
            }
        }
        Command::Descriptors(run) => cmd_descriptors(&run).map(|r| println!("{r}")),
        Command::Stats(run) => cmd_stats(&run).map(|s| println!("{}", s.to_json().expect("serializable"))),
        Command::Params(run) => cmd_params(&run).map(|s| println!("{s}")),
    })
}

/// Summary of a training run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub best_epoch: usize,
    pub parameters: usize,
    pub final_train_loss: f64,
}

impl std::fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "trained {} parameters; final train loss {:.4}; best epoch {} ({})",
            self.parameters,
            self.final_train_loss,
            self.best_epoch,
            self.out_dir.join("best.qtck").display()
        )
    }
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch_{epoch:03}.qtck"))
}

/// Writes into `out_dir`: `vocab.txt`, `split.csv`, `stats.json`,
/// `epoch_NNN.qtck` per epoch, `best.qtck`, `metrics.csv`
/// (epoch,split,loss,accuracy) and `timing.csv` (wall clock).
pub fn cmd_train(run: &RunConfig) -> Result<TrainSummary> {
    let data = run.dataset()?;
    let vocab = Vocabulary::for_corpus(data.records.iter().map(|r| r.smiles.as_str()))?;
    let needed = required_seq_len(&vocab, &data)?;
    let max_seq_len = match run.max_seq_len {
        Some(l) if l < needed => {
            return Err(Error::validation(format!("--max-seq-len {l} is shorter than the longest input ({needed})")))
        }
        Some(l) => l,
        None => needed,
    };
    let config = ModelConfig {
        variant: run.variant,
        conditioned: run.conditioned,
        working_qubits: run.working_qubits,
        vocab_size: vocab.len(),
        max_seq_len,
        d_value: run.d_value,
        seed: run.seed,
    };
    let params = ModelParams::init(config)?;
    let parameters = count_parameters(&params).total;

    fs::create_dir_all(&run.out_dir)?;
    vocab.save(&run.out_dir.join("vocab.txt"))?;
    data.write_manifest(fs::File::create(run.out_dir.join("split.csv"))?)?;
    fs::write(run.out_dir.join("stats.json"), data.stats()?.to_json()?)?;

    let mut metrics = csv::Writer::from_path(run.out_dir.join("metrics.csv"))?;
    metrics.write_record(["epoch", "split", "loss", "accuracy"])?;
    let mut best_loss = f64::INFINITY;
    let outcome = train(params, &vocab, &data, &run.train_options(), |epoch, params, rows| {
        for r in rows {
            metrics.write_record([r.epoch.to_string(), r.split.as_str().to_string(), format!("{:.17e}", r.loss), format!("{:.17e}", r.accuracy)])?;
        }
        metrics.flush()?;
        let ckpt = Checkpoint { params: params.clone(), vocabulary: vocab.clone(), epoch };
        ckpt.save(&checkpoint_path(&run.out_dir, epoch))?;
        let selection = rows.iter().find(|r| r.split == Split::Val).unwrap_or(&rows[0]).loss;
        if selection < best_loss {
            best_loss = selection;
            ckpt.save(&run.out_dir.join("best.qtck"))?;
        }
        Ok(())
    })?;

    let mut timing = csv::Writer::from_path(run.out_dir.join("timing.csv"))?;
    timing.write_record(["epoch", "seconds"])?;
    for (e, s) in outcome.epoch_seconds.iter().enumerate() {
        timing.write_record([e.to_string(), format!("{s:.3}")])?;
    }
    timing.flush()?;
    fs::write(run.out_dir.join("best_epoch.txt"), format!("{}\n", outcome.best_epoch))?;
    let final_train_loss = outcome.history.iter().rev().find(|r| r.split == Split::Train).map_or(f64::NAN, |r| r.loss);
    Ok(TrainSummary { out_dir: run.out_dir.clone(), best_epoch: outcome.best_epoch, parameters, final_train_loss })
}

/// Samples `n` strings in parallel; sample `i` uses its own keyed stream.
pub fn sample_smiles(
    ckpt: &Checkpoint,
    conditioning: Option<&Properties>,
    n: usize,
    max_len: usize,
    temperature: f64,
    seed: u64,
    stream: u64,
) -> Result<Vec<String>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let ids = ckpt.params.generate_seeded(conditioning, max_len, temperature, seed, stream * (1 << 32) + i)?;
            Ok(ckpt.vocabulary.render(&ids))
        })
        .collect()
}

/// One conditioning target of a generation run.
#[derive(Debug, Clone)]
pub struct TargetResult {
    pub label: String,
    pub conditioning: Option<Properties>,
    pub samples: Vec<String>,
    pub metrics: GenerationMetrics,
    /// Mean natively computed value of the swept property over valid samples.
    pub achieved: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct GenerateReport {
    pub swept_property: Option<usize>,
    pub targets: Vec<TargetResult>,
}

impl std::fmt::Display for GenerateReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "validity is a native syntax/valence/Kekulé check, not a full chemistry toolkit")?;
        for t in &self.targets {
            writeln!(f, "[{}]", t.label)?;
            writeln!(f, "{}", t.metrics)?;
            if let (Some(p), Some(c)) = (self.swept_property, &t.conditioning) {
                let achieved = t.achieved.map_or("n/a".to_string(), |v| format!("{v:.3}"));
                writeln!(f, "{:12} target {:.3} achieved {}", PROPERTY_NAMES[p], c[p], achieved)?;
            }
        }
        Ok(())
    }
}

fn native_property(smiles: &str, property: usize) -> Option<f64> {
    let graph = MolGraph::from_smiles(smiles).ok()?;
    descriptors(&graph).partial_vector()[property]
}

fn conditioning_targets(run: &RunConfig, stats: Option<&PropertyStats>, data: Option<&Dataset>) -> Result<(Option<usize>, Vec<(String, Properties)>)> {
    let need_stats = || stats.ok_or_else(|| Error::validation("this property source needs --data"));
    Ok(match run.property_source {
        PropertySource::Mean => (None, vec![("mean".into(), need_stats()?.mean())]),
        PropertySource::Median => (None, vec![("median".into(), need_stats()?.median())]),
        PropertySource::Mode => (None, vec![("mode".into(), need_stats()?.mode())]),
        PropertySource::Explicit => (None, vec![("explicit".into(), run.explicit_properties()?)]),
        PropertySource::SweepSigma | PropertySource::SweepIqr => {
            let p = property_index(&run.property)
                .ok_or_else(|| Error::validation(format!("unknown property {}", run.property)))?;
            let col = need_stats()?.columns[p];
            let (center, spread, name) = match run.property_source {
                PropertySource::SweepSigma => (col.mean, 2.0 * col.std, "2sigma"),
                _ => (col.median, 1.5 * col.iqr, "1.5iqr"),
            };
            let train = data.expect("stats imply data").train_properties();
            let mut out = Vec::new();
            for (label, value) in [(format!("-{name}"), center - spread), (format!("+{name}"), center + spread)] {
                out.push((label, knn_impute(p, value, run.knn_k, &train)?));
            }
            (Some(p), out)
        }
    })
}

/// Writes `samples_<label>.txt` and `generation.csv` into `out_dir`.
pub fn cmd_generate(run: &RunConfig) -> Result<GenerateReport> {
    let ckpt = Checkpoint::load(&run.checkpoint)?;
    let needs_data = ckpt.params.config.conditioned && run.property_source != PropertySource::Explicit;
    let data = if run.data.exists() || needs_data { Some(run.dataset()?) } else { None };
    let training: HashSet<String> = data.as_ref().map(Dataset::train_smiles).unwrap_or_default();
    let stats = data.as_ref().map(Dataset::stats).transpose()?;

    let (swept, targets) = if ckpt.params.config.conditioned {
        let (p, t) = conditioning_targets(run, stats.as_ref(), data.as_ref())?;
        (p, t.into_iter().map(|(l, c)| (l, Some(c))).collect())
    } else {
        (None, vec![("unconditioned".to_string(), None)])
    };

    fs::create_dir_all(&run.out_dir)?;
    let mut csv_out = fs::File::create(run.out_dir.join("generation.csv"))?;
    writeln!(csv_out, "target,{},achieved", GenerationMetrics::csv_header())?;
    let mut results = Vec::new();
    for (stream, (label, conditioning)) in targets.into_iter().enumerate() {
        let samples = sample_smiles(&ckpt, conditioning.as_ref(), run.num_samples, run.max_len, run.temperature, run.seed, stream as u64)?;
        let metrics = generation_metrics(&samples, &training)?;
        let achieved = swept.and_then(|p| {
            let values: Vec<f64> = samples.iter().filter_map(|s| native_property(s, p)).collect();
            (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
        });
        fs::write(run.out_dir.join(format!("samples_{label}.txt")), samples.join("\n") + "\n")?;
        writeln!(csv_out, "{label},{},{}", metrics.csv_row(), achieved.map_or(String::new(), |v| v.to_string()))?;
        results.push(TargetResult { label, conditioning, samples, metrics, achieved });
    }
    Ok(GenerateReport { swept_property: swept, targets: results })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub tokens: usize,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "val loss {:.6}  next-token accuracy {:.4}  ({} tokens)", self.loss, self.accuracy, self.tokens)
    }
}

/// Evaluates the checkpoint on the validation split drawn with `--seed`
/// from `--data`/`--limit` (the same flags used for training).
pub fn cmd_eval(run: &RunConfig) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(&run.checkpoint)?;
    let data = run.dataset()?;
    let split = EncodedSplit::new(&ckpt.vocabulary, &data, Split::Val)?;
    if split.is_empty() {
        return Err(Error::validation("validation split is empty"));
    }
    let stats = evaluate(&ckpt.params, &split, run.batch_size)?;
    Ok(EvalReport { loss: stats.mean_loss(), accuracy: stats.accuracy(), tokens: stats.count })
}

/// Writes the `(n+1) × (n+1)` attention weights (SOS included) with token
/// labels. Conditioned models use the `--property-source` vector.
pub fn cmd_attnmap(run: &RunConfig, smiles: &str, output: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(&run.checkpoint)?;
    let mut ids = vec![SOS_ID];
    ids.extend(ckpt.vocabulary.tokenize(smiles)?);
    let conditioning = if ckpt.params.config.conditioned {
        let data = if run.property_source == PropertySource::Explicit { None } else { Some(run.dataset()?) };
        let stats = data.as_ref().map(Dataset::stats).transpose()?;
        Some(conditioning_targets(run, stats.as_ref(), data.as_ref())?.1.remove(0).1)
    } else {
        None
    };
    let matrix = ckpt.params.attention_map(&ids, conditioning.as_ref())?;
    let labels: Vec<String> = ids.iter().map(|&t| ckpt.vocabulary.token(t).unwrap_or("?").to_string()).collect();
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    matrix.write_csv(fs::File::create(output)?, Some(&labels))
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SelftestReport {
    pub suites: Vec<SuiteResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.failures.is_empty())
    }

    pub fn failed_suites(&self) -> Vec<&'static str> {
        self.suites.iter().filter(|s| !s.failures.is_empty()).map(|s| s.name).collect()
    }
}

impl std::fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for s in &self.suites {
            let status = if s.failures.is_empty() { "PASS" } else { "FAIL" };
            writeln!(f, "{status} {:24} {} cases", s.name, s.cases)?;
            for msg in s.failures.iter().take(3) {
                writeln!(f, "     {msg}")?;
            }
        }
        write!(f, "{}", if self.passed() { "selftest PASS" } else { "selftest FAIL" })
    }
}

/// A random score circuit with `w` working qubits.
pub fn random_spec<R: Rng>(rng: &mut R, working_qubits: usize, mode: CircuitMode) -> Result<AttentionCircuitSpec> {
    let r = register_size(working_qubits, mode)?;
    let mut angles = |n: usize| AnsatzParams::new((0..n).map(|_| rng.gen_range(0.0..2.0 * PI)).collect());
    Ok(AttentionCircuitSpec {
        mode,
        token_i: angles(r),
        position_i: angles(r),
        token_j: angles(r),
        position_j: angles(r),
        property: (mode == CircuitMode::Conditioned).then(|| angles(r)),
        query: angles(working_qubits),
        key: angles(working_qubits),
    })
}

/// Oracle equivalence, parameter-shift vs finite differences, and
/// amplitude amplification. `perturb_score` is added to every circuit
/// score to prove the checks can fail.
pub fn cmd_selftest(seed: u64, perturb_score: f64) -> SelftestReport {
    let score = |spec: &AttentionCircuitSpec| attention_score(spec).map(|s| s + perturb_score);
    let mut suites = Vec::new();

    let mut rng = keyed_rng(seed, "selftest/oracle", 0);
    let mut failures = Vec::new();
    let mut cases = 0;
    for mode in [CircuitMode::SequenceOnly, CircuitMode::Conditioned] {
        for _ in 0..100 {
            cases += 1;
            let spec = random_spec(&mut rng, 6, mode).expect("valid spec");
            let (a, b) = (score(&spec), oracle_inner_product(&spec));
            match (a, b) {
                (Ok(a), Ok(b)) if (a - b).abs() <= 1e-10 => {}
                (a, b) => failures.push(format!("oracle-equivalence: circuit {a:?} vs oracle {b:?}")),
            }
        }
    }
    suites.push(SuiteResult { name: "oracle-equivalence", cases, failures });

    let mut rng = keyed_rng(seed, "selftest/gradient", 0);
    let mut failures = Vec::new();
    let mut cases = 0;
    for case in 0..20 {
        let mode = if case % 2 == 0 { CircuitMode::SequenceOnly } else { CircuitMode::Conditioned };
        let spec = random_spec(&mut rng, 6, mode).expect("valid spec");
        for group in AngleGroup::ALL {
            let Some(table) = spec.angles(group) else { continue };
            cases += 1;
            let f = |theta: &[f64]| {
                let mut s = spec.clone();
                if let Some(t) = s.angles_mut(group) {
                    t.angles = theta.to_vec();
                }
                score(&s).unwrap_or(f64::NAN)
            };
            let fd = finite_difference_grad(f, &table.angles, 1e-5).flat();
            let shift = match score_parameter_shift_grad(&spec, group) {
                Ok(g) => g,
                Err(e) => {
                    failures.push(format!("gradient-check: {e}"));
                    continue;
                }
            };
            for (k, (a, b)) in shift.iter().zip(&fd).enumerate() {
                if !((a - b).abs() <= 1e-6 + 1e-5 * b.abs()) {
                    failures.push(format!("gradient-check: case {case} {group:?}[{k}]: shift {a} vs fd {b}"));
                }
            }
        }
    }
    suites.push(SuiteResult { name: "gradient-check", cases, failures });

    let mut rng = keyed_rng(seed, "selftest/amplification", 0);
    let mut failures = Vec::new();
    for case in 0..10 {
        let spec = random_spec(&mut rng, 6, CircuitMode::SequenceOnly).expect("valid spec");
        let p0 = match score(&spec) {
            Ok(s) => ((1.0 + s) / 2.0).clamp(0.0, 1.0),
            Err(e) => {
                failures.push(format!("amplification: {e}"));
                continue;
            }
        };
        let angle = p0.sqrt().asin();
        for m in 0..4 {
            let expected = ((2 * m + 1) as f64 * angle).sin().powi(2);
            match amplitude_amplification_demo(&spec, m) {
                Ok(got) if (got - expected).abs() <= 1e-9 => {}
                got => failures.push(format!("amplification: case {case} m={m}: {got:?} vs {expected}")),
            }
        }
    }
    suites.push(SuiteResult { name: "amplification", cases: 40, failures });
    SelftestReport { suites }
}

#[derive(Debug, Clone)]
pub struct DescriptorReport {
    pub checked: usize,
    pub invalid: usize,
    pub mismatches_by_property: Vec<(&'static str, usize)>,
}

impl std::fmt::Display for DescriptorReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "checked {} molecules, {} failed validity", self.checked, self.invalid)?;
        for (name, n) in &self.mismatches_by_property {
            writeln!(f, "{name:6} {n} mismatches")?;
        }
        write!(f, "TPSA, logP and Stereo are not computed natively")
    }
}

pub fn cmd_descriptors(run: &RunConfig) -> Result<DescriptorReport> {
    let data = run.dataset()?;
    let report = cross_check_descriptors(&data.records);
    let invalid = data.records.iter().filter(|r| !check_validity(&r.smiles).is_valid()).count();
    let mismatches_by_property = PROPERTY_NAMES[..6]
        .iter()
        .map(|&name| (name, report.mismatches.iter().filter(|m| m.property == name).count()))
        .collect();
    Ok(DescriptorReport { checked: report.checked, invalid, mismatches_by_property })
}

pub fn cmd_stats(run: &RunConfig) -> Result<PropertyStats> {
    run.dataset()?.stats()
}

pub fn cmd_params(run: &RunConfig) -> Result<String> {
    let config = ModelConfig {
        variant: run.variant,
        conditioned: run.conditioned,
        working_qubits: run.working_qubits,
        vocab_size: 33,
        max_seq_len: run.max_seq_len.unwrap_or(24),
        d_value: run.d_value,
        seed: run.seed,
    };
    let count = count_parameters(&ModelParams::init(config)?);
    let mut out = String::new();
    for (name, n) in &count.per_tensor {
        out.push_str(&format!("{name:28} {n:>8}\n"));
    }
    out.push_str(&format!("{:28} {:>8}", "total", count.total));
    Ok(out)
}
