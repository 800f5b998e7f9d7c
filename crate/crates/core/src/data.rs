//! Molecule/property datasets: ingestion, splitting, statistics, angle
//! scaling and nearest-neighbour imputation.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::smiles::{descriptors, MolGraph};

pub const NUM_PROPERTIES: usize = 9;

pub const PROPERTY_NAMES: [&str; NUM_PROPERTIES] =
    ["MW", "HBA", "HBD", "nRot", "nRing", "nHet", "TPSA", "logP", "Stereo"];

pub type Properties = [f64; NUM_PROPERTIES];

pub fn property_index(name: &str) -> Option<usize> {
    PROPERTY_NAMES.iter().position(|p| p.eq_ignore_ascii_case(name))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub smiles: String,
    pub properties: Properties,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub splits: Vec<Split>,
    pub duplicates_dropped: usize,
    pub rows_rejected: usize,
}

impl Dataset {
    /// Builds a dataset from records already in memory: duplicates are
    /// dropped (first occurrence kept) and a seeded 20:1 split is drawn.
    pub fn from_records(records: Vec<Record>, seed: u64) -> Self {
        let mut seen = HashSet::new();
        let before = records.len();
        let records: Vec<Record> = records.into_iter().filter(|r| seen.insert(r.smiles.clone())).collect();
        let duplicates_dropped = before - records.len();
        if duplicates_dropped > 0 {
            log::info!("dropped {duplicates_dropped} duplicate SMILES");
        }
        let splits = split_assignment(records.len(), seed);
        Dataset { records, splits, duplicates_dropped, rows_rejected: 0 }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn subset(&self, split: Split) -> Vec<&Record> {
        self.records.iter().zip(&self.splits).filter(|(_, &s)| s == split).map(|(r, _)| r).collect()
    }

    pub fn train_properties(&self) -> Vec<Properties> {
        self.subset(Split::Train).iter().map(|r| r.properties).collect()
    }

    pub fn train_smiles(&self) -> HashSet<String> {
        self.subset(Split::Train).iter().map(|r| r.smiles.clone()).collect()
    }

    /// Statistics over the training split.
    pub fn stats(&self) -> Result<PropertyStats> {
        property_stats(&self.train_properties())
    }

    /// Keeps the first `n` records and redraws the split.
    pub fn truncated(&self, n: usize, seed: u64) -> Self {
        let records: Vec<Record> = self.records.iter().take(n).cloned().collect();
        let splits = split_assignment(records.len(), seed);
        Dataset { records, splits, duplicates_dropped: 0, rows_rejected: 0 }
    }

    /// `index,smiles,split` for every record.
    pub fn write_manifest<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "smiles", "split"])?;
        for (i, (r, s)) in self.records.iter().zip(&self.splits).enumerate() {
            w.write_record([i.to_string().as_str(), r.smiles.as_str(), s.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Validation size is `round(n / 21)`; membership is a seeded shuffle.
fn split_assignment(n: usize, seed: u64) -> Vec<Split> {
    let val = (n as f64 / 21.0).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(seed, "split", 0));
    let mut splits = vec![Split::Train; n];
    for &i in &order[..val] {
        splits[i] = Split::Val;
    }
    splits
}

const HEADER: [&str; 10] = ["SMILES", "MW", "HBA", "HBD", "nRot", "nRing", "nHet", "TPSA", "logP", "Stereo"];

pub fn ingest(path: &Path, seed: u64) -> Result<Dataset> {
    let file = File::open(path)
        .map_err(|e| Error::Data { line: 0, message: format!("cannot open {}: {e}", path.display()) })?;
    ingest_reader(file, seed)
}

pub fn ingest_reader<R: Read>(input: R, seed: u64) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input);
    let mut rows = reader.records();
    let header = match rows.next() {
        Some(h) => h.map_err(|e| Error::Data { line: 1, message: e.to_string() })?,
        None => return Err(Error::Data { line: 1, message: "empty file".into() }),
    };
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != HEADER {
        return Err(Error::Data {
            line: 1,
            message: format!("expected header {}, found {}", HEADER.join(","), names.join(",")),
        });
    }
    let mut records = Vec::new();
    let mut rejected = 0;
    for (i, row) in rows.enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Data { line, message: e.to_string() })?;
        if row.len() != HEADER.len() {
            return Err(Error::Data {
                line,
                message: format!("expected {} fields, found {}", HEADER.len(), row.len()),
            });
        }
        let smiles = row[0].trim().to_string();
        if smiles.is_empty() {
            return Err(Error::Data { line, message: "empty SMILES".into() });
        }
        let mut properties: Properties = [0.0; NUM_PROPERTIES];
        for (k, slot) in properties.iter_mut().enumerate() {
            let field = row[k + 1].trim();
            *slot = field.parse().map_err(|_| Error::Data {
                line,
                message: format!("{} is not a number: {field:?}", PROPERTY_NAMES[k]),
            })?;
        }
        if properties.iter().any(|v| !v.is_finite()) {
            log::warn!("line {line}: non-finite property, row rejected");
            rejected += 1;
            continue;
        }
        records.push(Record { smiles, properties });
    }
    let mut dataset = Dataset::from_records(records, seed);
    dataset.rows_rejected = rejected;
    Ok(dataset)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ColumnStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub mode: f64,
    pub std: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyStats {
    pub columns: [ColumnStats; NUM_PROPERTIES],
}

impl PropertyStats {
    pub fn mean(&self) -> Properties {
        self.columns.map(|c| c.mean)
    }

    pub fn median(&self) -> Properties {
        self.columns.map(|c| c.median)
    }

    pub fn mode(&self) -> Properties {
        self.columns.map(|c| c.mode)
    }

    /// Key/value rendering, one object per property in column order.
    pub fn to_json(&self) -> Result<String> {
        let mut out = String::from("{\n");
        for (i, c) in self.columns.iter().enumerate() {
            let sep = if i + 1 < NUM_PROPERTIES { "," } else { "" };
            out.push_str(&format!("  \"{}\": {}{sep}\n", PROPERTY_NAMES[i], serde_json::to_string(c)?));
        }
        out.push('}');
        Ok(out)
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn column_stats(values: &[f64]) -> Result<ColumnStats> {
    if values.is_empty() {
        return Err(Error::validation("no values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // summing in sorted order makes the result independent of input order
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut counts: HashMap<i64, usize> = HashMap::new();
    for v in &sorted {
        *counts.entry((v * 100.0).round() as i64).or_default() += 1;
    }
    let mode_key = counts
        .iter()
        .max_by(|(ka, ca), (kb, cb)| ca.cmp(cb).then(kb.cmp(ka)))
        .map(|(k, _)| *k)
        .expect("non-empty");
    let q1 = quantile(&sorted, 0.25);
    let q3 = quantile(&sorted, 0.75);
    Ok(ColumnStats {
        count: n,
        mean,
        median: quantile(&sorted, 0.5),
        mode: mode_key as f64 / 100.0,
        std,
        q1,
        q3,
        iqr: q3 - q1,
        min: sorted[0],
        max: sorted[n - 1],
    })
}

pub fn property_stats(rows: &[Properties]) -> Result<PropertyStats> {
    if rows.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    let mut columns = Vec::with_capacity(NUM_PROPERTIES);
    for k in 0..NUM_PROPERTIES {
        let values: Vec<f64> = rows.iter().map(|r| r[k]).collect();
        columns.push(column_stats(&values)?);
    }
    Ok(PropertyStats { columns: columns.try_into().expect("nine columns") })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaledAngles {
    pub values: Vec<f64>,
    /// Some input fell outside the frozen range and was clamped.
    pub clamped: bool,
}

/// Affine map of each dimension from `[min, max]` onto `[0, π]`.
/// Degenerate ranges map to `π/2`.
pub fn scale_to_angle(values: &[f64], min: &[f64], max: &[f64]) -> Result<ScaledAngles> {
    if values.len() != min.len() || values.len() != max.len() {
        return Err(Error::validation(format!(
            "scale_to_angle: {} values for ranges of length {}/{}",
            values.len(),
            min.len(),
            max.len()
        )));
    }
    let mut clamped = false;
    let scaled = values
        .iter()
        .zip(min.iter().zip(max))
        .map(|(&v, (&lo, &hi))| {
            if !(hi > lo) {
                return PI / 2.0;
            }
            let t = (v - lo) / (hi - lo);
            if !(0.0..=1.0).contains(&t) {
                clamped = true;
            }
            PI * t.clamp(0.0, 1.0)
        })
        .collect();
    Ok(ScaledAngles { values: scaled, clamped })
}

/// Fills a full property vector from the `k` training rows whose
/// `property` is closest to `target` (ties broken by row order). The
/// targeted property keeps `target`; the others are neighbour means.
pub fn knn_impute(property: usize, target: f64, k: usize, train: &[Properties]) -> Result<Properties> {
    if property >= NUM_PROPERTIES {
        return Err(Error::validation(format!("property index {property} out of range")));
    }
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    if train.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by(|&a, &b| {
        (train[a][property] - target).abs().total_cmp(&(train[b][property] - target).abs())
    });
    let chosen = &order[..k.min(train.len())];
    let mut out = [0.0; NUM_PROPERTIES];
    for (p, slot) in out.iter_mut().enumerate() {
        *slot = if p == property {
            target
        } else {
            chosen.iter().map(|&i| train[i][p]).sum::<f64>() / chosen.len() as f64
        };
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMismatch {
    pub smiles: String,
    pub property: &'static str,
    pub expected: f64,
    pub computed: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CrossCheckReport {
    pub checked: usize,
    pub unparsable: Vec<(String, String)>,
    pub mismatches: Vec<DescriptorMismatch>,
}

impl CrossCheckReport {
    pub fn passed(&self) -> bool {
        self.unparsable.is_empty() && self.mismatches.is_empty()
    }
}

/// Compares the six natively computable descriptors with the file's
/// columns: MW within 0.05, the counts exactly.
pub fn cross_check_descriptors<'a, I: IntoIterator<Item = &'a Record>>(records: I) -> CrossCheckReport {
    let mut report = CrossCheckReport::default();
    for record in records {
        report.checked += 1;
        let graph = match MolGraph::from_smiles(&record.smiles) {
            Ok(g) => g,
            Err(reason) => {
                report.unparsable.push((record.smiles.clone(), reason));
                continue;
            }
        };
        let computed = descriptors(&graph).partial_vector();
        for (k, value) in computed.iter().enumerate() {
            let Some(value) = *value else { continue };
            let tolerance = if k == 0 { 0.05 } else { 1e-9 };
            if (value - record.properties[k]).abs() > tolerance {
                report.mismatches.push(DescriptorMismatch {
                    smiles: record.smiles.clone(),
                    property: PROPERTY_NAMES[k],
                    expected: record.properties[k],
                    computed: value,
                });
            }
        }
    }
    report
}
