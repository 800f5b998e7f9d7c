//! Mini-batch training: SPSA for circuit-feeding tensors, reverse mode for
//! the rest, AdamW on the union.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::data::{Dataset, Properties, Split};
use crate::error::{Error, Result};
use crate::grad::{adamw_step, reverse_mode_grad, spsa_model_grad, AdamWConfig, OptimizerState, StepOutcome};
use crate::model::{token_stats, Batch, ModelParams, TokenStats};
use crate::rng::keyed_rng;
use crate::smiles::{Vocabulary, EOS_ID, SOS_ID};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adamw: AdamWConfig,
    pub spsa_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { epochs: 20, batch_size: 256, adamw: AdamWConfig::default(), spsa_epsilon: 0.01, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

/// Encoded split: `SOS … EOS` id sequences with their property rows.
#[derive(Debug, Clone)]
pub struct EncodedSplit {
    pub sequences: Vec<Vec<usize>>,
    pub properties: Vec<Properties>,
}

impl EncodedSplit {
    pub fn new(vocab: &Vocabulary, dataset: &Dataset, split: Split) -> Result<Self> {
        let records = dataset.subset(split);
        let sequences = records
            .iter()
            .map(|r| {
                let mut ids = vec![SOS_ID];
                ids.extend(vocab.tokenize(&r.smiles)?);
                ids.push(EOS_ID);
                Ok(ids)
            })
            .collect::<Result<_>>()?;
        Ok(EncodedSplit { sequences, properties: records.iter().map(|r| r.properties).collect() })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn batch(&self, indices: &[usize], conditioned: bool) -> Result<Batch> {
        let seqs: Vec<Vec<usize>> = indices.iter().map(|&i| self.sequences[i].clone()).collect();
        let props: Vec<Properties> = indices.iter().map(|&i| self.properties[i]).collect();
        Batch::from_sequences(&seqs, conditioned.then_some(props.as_slice()))
    }
}

/// Longest input (SOS plus tokens) in the dataset.
pub fn required_seq_len(vocab: &Vocabulary, dataset: &Dataset) -> Result<usize> {
    let mut longest = 0;
    for r in &dataset.records {
        longest = longest.max(vocab.tokenize(&r.smiles)?.len());
    }
    Ok(longest + 1)
}

/// Token-weighted loss and accuracy over a whole split, batch by batch in
/// order so the sum is reproducible.
pub fn evaluate(params: &ModelParams, split: &EncodedSplit, batch_size: usize) -> Result<TokenStats> {
    let order: Vec<usize> = (0..split.len()).collect();
    let mut total = TokenStats::default();
    for chunk in order.chunks(batch_size.max(1)) {
        let batch = split.batch(chunk, params.config.conditioned)?;
        let logits = params.forward(&batch)?;
        let (targets, mask) = batch.targets();
        total = total.merge(token_stats(&logits, &targets, &mask)?);
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochMetrics>,
    /// Epoch with the lowest validation loss (training loss without a
    /// validation split).
    pub best_epoch: usize,
    pub skipped_batches: usize,
    /// Wall-clock seconds per epoch, kept apart from the deterministic log.
    pub epoch_seconds: Vec<f64>,
}

/// Trains for `options.epochs` epochs. `on_epoch` sees the parameters and
/// metrics after every epoch, starting with the untrained epoch 0.
pub fn train<F>(
    mut params: ModelParams,
    vocab: &Vocabulary,
    dataset: &Dataset,
    options: &TrainOptions,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &ModelParams, &[EpochMetrics]) -> Result<()>,
{
    if options.batch_size == 0 {
        return Err(Error::validation("batch size must be positive"));
    }
    let train_split = EncodedSplit::new(vocab, dataset, Split::Train)?;
    let val_split = EncodedSplit::new(vocab, dataset, Split::Val)?;
    if train_split.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    let train_props = dataset.train_properties();
    params.fit_buffers(&train_props)?;

    let mut optimizer = OptimizerState::new(&params.tensors, options.adamw);
    optimizer.spsa_epsilon = options.spsa_epsilon;
    let mut history = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut skipped = 0;
    let mut batch_counter = 0u64;
    let mut best: Option<(usize, f64)> = None;

    for epoch in 0..=options.epochs {
        let started = Instant::now();
        if epoch > 0 {
            params.refit_angle_range(&train_props)?;
            let mut order: Vec<usize> = (0..train_split.len()).collect();
            order.shuffle(&mut keyed_rng(options.seed, "shuffle", epoch as u64));
            for chunk in order.chunks(options.batch_size) {
                let batch = train_split.batch(chunk, params.config.conditioned)?;
                let (_, classical) = reverse_mode_grad(&params, &batch)?;
                let quantum = spsa_model_grad(&params, &batch, options.spsa_epsilon, options.seed, batch_counter)?;
                batch_counter += 1;
                let mut grads = classical.grads;
                grads.extend(quantum.grads);
                if adamw_step(&mut optimizer, &mut params.tensors, &grads)? == StepOutcome::Skipped {
                    skipped += 1;
                }
            }
        }
        let mut rows = Vec::new();
        let train_stats = evaluate(&params, &train_split, options.batch_size)?;
        rows.push(EpochMetrics { epoch, split: Split::Train, loss: train_stats.mean_loss(), accuracy: train_stats.accuracy() });
        let selection_loss = if val_split.is_empty() {
            train_stats.mean_loss()
        } else {
            let val_stats = evaluate(&params, &val_split, options.batch_size)?;
            rows.push(EpochMetrics { epoch, split: Split::Val, loss: val_stats.mean_loss(), accuracy: val_stats.accuracy() });
            val_stats.mean_loss()
        };
        if best.is_none_or(|(_, l)| selection_loss < l) {
            best = Some((epoch, selection_loss));
        }
        for r in &rows {
            log::info!("epoch {:3} {:5} loss {:.6} acc {:.4}", r.epoch, r.split.as_str(), r.loss, r.accuracy);
        }
        history.extend_from_slice(&rows);
        epoch_seconds.push(started.elapsed().as_secs_f64());
        on_epoch(epoch, &params, &rows)?;
    }
    Ok(TrainOutcome {
        params,
        history,
        best_epoch: best.map_or(0, |(e, _)| e),
        skipped_batches: skipped,
        epoch_seconds,
    })
}
