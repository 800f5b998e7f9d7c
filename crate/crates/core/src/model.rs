//! Single-layer decoder in three variants sharing one value/output path.
//!
//! * `Quantum`: attention scores come from the Hadamard-test circuits fed by
//!   token, position (and property) angle tables.
//! * `ClassicalEq`: the same angle tables act as tiny classical embeddings
//!   projected by `a × (w/a)` query/key matrices, matching the quantum
//!   parameter budget.
//! * `Classical`: standard `d × d` query/key projections of the `d`-dim
//!   embedding.
//!
//! In every variant `V = Z W_V + b_V` uses the `d = 2^w` classical embedding
//! sum and the logits are `(A V) W_O + b_O`.

use std::f64::consts::PI;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView2, Axis, Ix1, Ix2, IxDyn};
use rand::distributions::{Distribution, Uniform, WeightedIndex};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    classical_attention_matrix, masked_softmax, quantum_attention_last_row, quantum_attention_matrix,
    AttentionMatrix, PositionAngles, QuantumAttentionParams,
};
use crate::data::{property_stats, scale_to_angle, Properties, NUM_PROPERTIES};
use crate::error::{Error, Result};
use crate::qcircuits::{register_size, AnsatzParams, CircuitMode};
use crate::rng::keyed_rng;
use crate::smiles::{Vocabulary, EOS_ID, PAD_ID, SOS_ID};
use crate::statevec::MAX_QUBITS;

pub const TOKEN_EMBEDDING: &str = "token_embedding";
pub const POSITION_EMBEDDING: &str = "position_embedding";
pub const PROPERTY_EMBEDDING_W: &str = "property_embedding.weight";
pub const PROPERTY_EMBEDDING_B: &str = "property_embedding.bias";
pub const VALUE_W: &str = "value.weight";
pub const VALUE_B: &str = "value.bias";
pub const HEAD_W: &str = "head.weight";
pub const HEAD_B: &str = "head.bias";
pub const TOKEN_ANGLES: &str = "token_angles";
pub const POSITION_ANGLES: &str = "position_angles";
pub const PROPERTY_ANGLES_W: &str = "property_angles.weight";
pub const PROPERTY_ANGLES_B: &str = "property_angles.bias";
pub const THETA_Q: &str = "theta_q";
pub const THETA_K: &str = "theta_k";
pub const QUERY_W: &str = "query.weight";
pub const KEY_W: &str = "key.weight";

pub const PROPERTY_MEAN: &str = "property_mean";
pub const PROPERTY_STD: &str = "property_std";
pub const ANGLE_MIN: &str = "angle_min";
pub const ANGLE_MAX: &str = "angle_max";

/// Named tensors in a fixed order.
pub type ParamSet = IndexMap<String, ArrayD<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Quantum,
    ClassicalEq,
    Classical,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Quantum => "quantum",
            Variant::ClassicalEq => "classical-eq",
            Variant::Classical => "classical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub conditioned: bool,
    pub working_qubits: usize,
    pub vocab_size: usize,
    /// Longest input (SOS plus tokens) the position tables cover.
    pub max_seq_len: usize,
    pub d_value: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant, conditioned: bool) -> Self {
        ModelConfig { variant, conditioned, working_qubits: 6, vocab_size: 33, max_seq_len: 24, d_value: 64, seed: 0 }
    }

    pub fn mode(&self) -> CircuitMode {
        if self.conditioned {
            CircuitMode::Conditioned
        } else {
            CircuitMode::SequenceOnly
        }
    }

    pub fn validate(&self) -> Result<()> {
        register_size(self.working_qubits, self.mode())?;
        if self.working_qubits + 1 > MAX_QUBITS || self.working_qubits > 12 {
            return Err(Error::Resource(format!("{} working qubits is too many", self.working_qubits)));
        }
        if self.vocab_size < 4 || self.max_seq_len == 0 || self.d_value == 0 {
            return Err(Error::validation("vocab_size ≥ 4, max_seq_len ≥ 1, d_value ≥ 1 required"));
        }
        Ok(())
    }

    /// Angles per register.
    pub fn angle_dim(&self) -> usize {
        self.working_qubits / self.mode().register_count()
    }

    /// Classical embedding width `2^w`.
    pub fn embed_dim(&self) -> usize {
        1 << self.working_qubits
    }

    /// Query/key width of the classical variants.
    pub fn qk_dim(&self) -> usize {
        match self.variant {
            Variant::ClassicalEq => self.working_qubits / self.angle_dim(),
            _ => self.embed_dim(),
        }
    }

    /// Score scale: quantum scores are multiplied by `√d_k`, classical ones
    /// divided by it.
    pub fn d_k(&self) -> usize {
        match self.variant {
            Variant::Quantum => self.embed_dim(),
            _ => self.qk_dim(),
        }
    }

    /// Tensors trained by SPSA (those feeding quantum circuits).
    pub fn spsa_tensors(&self) -> Vec<&'static str> {
        match self.variant {
            Variant::Quantum => {
                let mut names = vec![TOKEN_ANGLES, POSITION_ANGLES, THETA_Q, THETA_K];
                if self.conditioned {
                    names.extend([PROPERTY_ANGLES_W, PROPERTY_ANGLES_B]);
                }
                names
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Uniform(f64, f64),
}

fn bound(fan_in: usize) -> Init {
    let b = 1.0 / (fan_in as f64).sqrt();
    Init::Uniform(-b, b)
}

/// Tensor names, shapes and initial distributions for a config.
fn layout(c: &ModelConfig) -> Vec<(&'static str, Vec<usize>, Init)> {
    let (v, l, d, dv, a, w) = (c.vocab_size, c.max_seq_len, c.embed_dim(), c.d_value, c.angle_dim(), c.working_qubits);
    let mut out = vec![
        (TOKEN_EMBEDDING, vec![v, d], Init::Uniform(-1.0, 1.0)),
        (POSITION_EMBEDDING, vec![l, d], Init::Uniform(-1.0, 1.0)),
    ];
    if c.conditioned {
        out.push((PROPERTY_EMBEDDING_W, vec![NUM_PROPERTIES, d], bound(NUM_PROPERTIES)));
        out.push((PROPERTY_EMBEDDING_B, vec![d], bound(NUM_PROPERTIES)));
    }
    if c.variant != Variant::Classical {
        out.push((TOKEN_ANGLES, vec![v, a], Init::Uniform(0.0, PI)));
        out.push((POSITION_ANGLES, vec![l, a], Init::Zeros));
        if c.conditioned {
            out.push((PROPERTY_ANGLES_W, vec![NUM_PROPERTIES, a], bound(NUM_PROPERTIES)));
            out.push((PROPERTY_ANGLES_B, vec![a], bound(NUM_PROPERTIES)));
        }
    }
    match c.variant {
        Variant::Quantum => {
            out.push((THETA_Q, vec![w], Init::Uniform(0.0, 2.0 * PI)));
            out.push((THETA_K, vec![w], Init::Uniform(0.0, 2.0 * PI)));
        }
        Variant::ClassicalEq => {
            out.push((QUERY_W, vec![a, c.qk_dim()], bound(a)));
            out.push((KEY_W, vec![a, c.qk_dim()], bound(a)));
        }
        Variant::Classical => {
            out.push((QUERY_W, vec![d, d], bound(d)));
            out.push((KEY_W, vec![d, d], bound(d)));
        }
    }
    out.push((VALUE_W, vec![d, dv], bound(d)));
    out.push((VALUE_B, vec![dv], bound(d)));
    out.push((HEAD_W, vec![dv, v], bound(dv)));
    out.push((HEAD_B, vec![v], bound(dv)));
    out
}

fn buffer_layout(c: &ModelConfig) -> Vec<(&'static str, usize)> {
    let mut out = Vec::new();
    if c.conditioned {
        out.push((PROPERTY_MEAN, NUM_PROPERTIES));
        out.push((PROPERTY_STD, NUM_PROPERTIES));
        if c.variant == Variant::Quantum {
            out.push((ANGLE_MIN, c.angle_dim()));
            out.push((ANGLE_MAX, c.angle_dim()));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterCount {
    pub per_tensor: Vec<(String, usize)>,
    pub total: usize,
}

pub fn count_parameters(params: &ModelParams) -> ParameterCount {
    let per_tensor: Vec<(String, usize)> = params.tensors.iter().map(|(k, t)| (k.clone(), t.len())).collect();
    let total = per_tensor.iter().map(|(_, n)| n).sum();
    ParameterCount { per_tensor, total }
}

/// Padded batch of `SOS … EOS` sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub token_ids: Array2<usize>,
    /// `true` on real tokens.
    pub pad_mask: Array2<bool>,
    pub properties: Option<Array2<f64>>,
}

impl Batch {
    pub fn from_sequences(seqs: &[Vec<usize>], properties: Option<&[Properties]>) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut token_ids = Array2::from_elem((seqs.len(), width), PAD_ID);
        let mut pad_mask = Array2::from_elem((seqs.len(), width), false);
        for (b, seq) in seqs.iter().enumerate() {
            if seq.len() < 2 || seq[0] != SOS_ID || seq[seq.len() - 1] != EOS_ID {
                return Err(Error::validation(format!("sequence {b} must start with SOS and end with EOS")));
            }
            for (i, &t) in seq.iter().enumerate() {
                token_ids[[b, i]] = t;
                pad_mask[[b, i]] = true;
            }
        }
        let properties = match properties {
            None => None,
            Some(p) if p.len() == seqs.len() => {
                Some(Array2::from_shape_fn((p.len(), NUM_PROPERTIES), |(b, k)| p[b][k]))
            }
            Some(p) => {
                return Err(Error::validation(format!("{} property rows for {} sequences", p.len(), seqs.len())))
            }
        };
        Ok(Batch { token_ids, pad_mask, properties })
    }

    /// Tokenizes and wraps each string in SOS/EOS.
    pub fn encode(vocab: &Vocabulary, smiles: &[&str], properties: Option<&[Properties]>) -> Result<Self> {
        let seqs: Vec<Vec<usize>> = smiles
            .iter()
            .map(|s| {
                let mut ids = vec![SOS_ID];
                ids.extend(vocab.tokenize(s)?);
                ids.push(EOS_ID);
                Ok(ids)
            })
            .collect::<Result<_>>()?;
        Self::from_sequences(&seqs, properties)
    }

    pub fn size(&self) -> usize {
        self.token_ids.nrows()
    }

    fn row_len(&self, b: usize) -> usize {
        self.pad_mask.row(b).iter().filter(|&&m| m).count()
    }

    /// Input ids of row `b`: everything but the final EOS.
    pub fn inputs(&self, b: usize) -> Vec<usize> {
        let len = self.row_len(b);
        self.token_ids.slice(s![b, ..len - 1]).to_vec()
    }

    fn row_properties(&self, b: usize) -> Option<Properties> {
        self.properties.as_ref().map(|p| std::array::from_fn(|k| p[[b, k]]))
    }

    /// Targets shifted left by one with their mask.
    pub fn targets(&self) -> (Array2<usize>, Array2<bool>) {
        let (bsz, width) = self.token_ids.dim();
        let targets = Array2::from_shape_fn((bsz, width), |(b, i)| {
            if i + 1 < width {
                self.token_ids[[b, i + 1]]
            } else {
                PAD_ID
            }
        });
        let mask = Array2::from_shape_fn((bsz, width), |(b, i)| i + 1 < width && self.pad_mask[[b, i + 1]]);
        (targets, mask)
    }
}

/// Intermediate values of one sequence's forward pass.
struct SeqCache {
    std_props: Option<[f64; NUM_PROPERTIES]>,
    z_cl: Array2<f64>,
    v: Array2<f64>,
    attn: AttentionMatrix,
    h: Array2<f64>,
    /// Query/key input of the classical variants.
    z_qk: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: ParamSet,
    pub buffers: ParamSet,
}

impl ModelParams {
    /// Each tensor is drawn from its own keyed stream, so tensors with the
    /// same name and shape get identical values across variants.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut tensors = ParamSet::new();
        for (name, shape, init) in layout(&config) {
            let len: usize = shape.iter().product();
            let values = match init {
                Init::Zeros => vec![0.0; len],
                Init::Uniform(lo, hi) => {
                    let mut rng = keyed_rng(config.seed, &format!("init/{name}"), 0);
                    let dist = Uniform::new(lo, hi);
                    (0..len).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            tensors.insert(name.to_string(), ArrayD::from_shape_vec(IxDyn(&shape), values).expect("shape"));
        }
        let mut buffers = ParamSet::new();
        for (name, len) in buffer_layout(&config) {
            let fill = match name {
                PROPERTY_STD | ANGLE_MAX => 1.0,
                ANGLE_MIN => -1.0,
                _ => 0.0,
            };
            buffers.insert(name.to_string(), ArrayD::from_elem(IxDyn(&[len]), fill));
        }
        Ok(ModelParams { config, tensors, buffers })
    }

    pub fn tensor(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name)
    }

    fn mat(&self, name: &str) -> ArrayView2<'_, f64> {
        self.tensors[name].view().into_dimensionality::<Ix2>().expect("matrix tensor")
    }

    fn vector(&self, name: &str) -> ArrayView1<'_, f64> {
        self.tensors[name].view().into_dimensionality::<Ix1>().expect("vector tensor")
    }

    fn buffer(&self, name: &str) -> ArrayView1<'_, f64> {
        self.buffers[name].view().into_dimensionality::<Ix1>().expect("vector buffer")
    }

    /// Sets the property standardization from training rows and freezes the
    /// property-angle range.
    pub fn fit_buffers(&mut self, train: &[Properties]) -> Result<()> {
        if !self.config.conditioned {
            return Ok(());
        }
        let stats = property_stats(train)?;
        let mean: Vec<f64> = stats.columns.iter().map(|c| c.mean).collect();
        let std: Vec<f64> = stats.columns.iter().map(|c| if c.std > 0.0 { c.std } else { 1.0 }).collect();
        self.buffers[PROPERTY_MEAN] = ArrayD::from_shape_vec(IxDyn(&[NUM_PROPERTIES]), mean).expect("shape");
        self.buffers[PROPERTY_STD] = ArrayD::from_shape_vec(IxDyn(&[NUM_PROPERTIES]), std).expect("shape");
        self.refit_angle_range(train)
    }

    /// Recomputes the frozen min/max of projected property angles.
    pub fn refit_angle_range(&mut self, train: &[Properties]) -> Result<()> {
        if !(self.config.conditioned && self.config.variant == Variant::Quantum) {
            return Ok(());
        }
        if train.is_empty() {
            return Err(Error::validation("training split is empty"));
        }
        let a = self.config.angle_dim();
        let mut lo = vec![f64::INFINITY; a];
        let mut hi = vec![f64::NEG_INFINITY; a];
        for p in train {
            let proj = self.project_property_angles(&self.standardize(p));
            for k in 0..a {
                lo[k] = lo[k].min(proj[k]);
                hi[k] = hi[k].max(proj[k]);
            }
        }
        for k in 0..a {
            if !(hi[k] > lo[k]) {
                log::warn!("property angle {k} has a degenerate range; it will map to π/2");
            }
        }
        self.buffers[ANGLE_MIN] = ArrayD::from_shape_vec(IxDyn(&[a]), lo).expect("shape");
        self.buffers[ANGLE_MAX] = ArrayD::from_shape_vec(IxDyn(&[a]), hi).expect("shape");
        Ok(())
    }

    pub fn standardize(&self, raw: &Properties) -> [f64; NUM_PROPERTIES] {
        let mean = self.buffer(PROPERTY_MEAN);
        let std = self.buffer(PROPERTY_STD);
        std::array::from_fn(|k| (raw[k] - mean[k]) / std[k])
    }

    fn project_property_angles(&self, std_props: &[f64; NUM_PROPERTIES]) -> Array1<f64> {
        let x = ArrayView1::from(&std_props[..]);
        x.dot(&self.mat(PROPERTY_ANGLES_W)) + self.vector(PROPERTY_ANGLES_B)
    }

    fn property_register(&self, std_props: &[f64; NUM_PROPERTIES]) -> Result<AnsatzParams> {
        let proj = self.project_property_angles(std_props);
        let scaled = scale_to_angle(
            proj.as_slice().expect("contiguous"),
            self.buffer(ANGLE_MIN).as_slice().expect("contiguous"),
            self.buffer(ANGLE_MAX).as_slice().expect("contiguous"),
        )?;
        Ok(AnsatzParams::new(scaled.values))
    }

    fn check_inputs(&self, ids: &[usize], props: Option<&Properties>) -> Result<()> {
        let c = &self.config;
        if ids.is_empty() {
            return Err(Error::validation("empty input"));
        }
        if ids.len() > c.max_seq_len {
            return Err(Error::validation(format!("input length {} exceeds max_seq_len {}", ids.len(), c.max_seq_len)));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::validation(format!("token id {bad} outside vocabulary of {}", c.vocab_size)));
        }
        if c.conditioned != props.is_some() {
            return Err(Error::validation("property vector must be given exactly for conditioned models"));
        }
        Ok(())
    }

    /// Classical `d`-dim embedding sum for the positions of `ids`.
    fn classical_embedding(&self, ids: &[usize], std_props: Option<&[f64; NUM_PROPERTIES]>) -> Array2<f64> {
        let tok = self.mat(TOKEN_EMBEDDING);
        let pos = self.mat(POSITION_EMBEDDING);
        let mut z = Array2::from_shape_fn((ids.len(), self.config.embed_dim()), |(i, k)| tok[[ids[i], k]] + pos[[i, k]]);
        if let Some(p) = std_props {
            let x = ArrayView1::from(&p[..]);
            let proj = x.dot(&self.mat(PROPERTY_EMBEDDING_W)) + self.vector(PROPERTY_EMBEDDING_B);
            z += &proj;
        }
        z
    }

    /// Angle-table embedding used by `ClassicalEq` queries and keys.
    fn angle_embedding(&self, ids: &[usize], std_props: Option<&[f64; NUM_PROPERTIES]>) -> Array2<f64> {
        let tok = self.mat(TOKEN_ANGLES);
        let pos = self.mat(POSITION_ANGLES);
        let mut z = Array2::from_shape_fn((ids.len(), self.config.angle_dim()), |(i, k)| tok[[ids[i], k]] + pos[[i, k]]);
        if let Some(p) = std_props {
            z += &self.project_property_angles(p);
        }
        z
    }

    fn position_angles(&self, ids: &[usize]) -> Vec<PositionAngles> {
        let tok = self.mat(TOKEN_ANGLES);
        let pos = self.mat(POSITION_ANGLES);
        ids.iter()
            .enumerate()
            .map(|(i, &t)| PositionAngles {
                token: AnsatzParams::new(tok.row(t).to_vec()),
                position: AnsatzParams::new(pos.row(i).to_vec()),
            })
            .collect()
    }

    fn quantum_params<'a>(
        &self,
        query: &'a AnsatzParams,
        key: &'a AnsatzParams,
        property: Option<&'a AnsatzParams>,
    ) -> QuantumAttentionParams<'a> {
        QuantumAttentionParams { query, key, property, d_k: self.config.d_k(), dedup: true }
    }

    fn attention(&self, ids: &[usize], std_props: Option<&[f64; NUM_PROPERTIES]>, z_cl: &Array2<f64>) -> Result<(AttentionMatrix, Option<Array2<f64>>)> {
        match self.config.variant {
            Variant::Quantum => {
                let query = AnsatzParams::new(self.vector(THETA_Q).to_vec());
                let key = AnsatzParams::new(self.vector(THETA_K).to_vec());
                let property = std_props.map(|p| self.property_register(p)).transpose()?;
                let params = self.quantum_params(&query, &key, property.as_ref());
                Ok((quantum_attention_matrix(&self.position_angles(ids), &params)?, None))
            }
            Variant::ClassicalEq => {
                let z = self.angle_embedding(ids, std_props);
                let m = classical_attention_matrix(z.view(), self.mat(QUERY_W), self.mat(KEY_W), self.config.d_k())?;
                Ok((m, Some(z)))
            }
            Variant::Classical => {
                let m = classical_attention_matrix(z_cl.view(), self.mat(QUERY_W), self.mat(KEY_W), self.config.d_k())?;
                Ok((m, Some(z_cl.clone())))
            }
        }
    }

    fn forward_sequence(&self, ids: &[usize], props: Option<&Properties>) -> Result<(Array2<f64>, SeqCache)> {
        self.check_inputs(ids, props)?;
        let std_props = props.map(|p| self.standardize(p));
        let z_cl = self.classical_embedding(ids, std_props.as_ref());
        let v = z_cl.dot(&self.mat(VALUE_W)) + self.vector(VALUE_B);
        let (attn, z_qk) = self.attention(ids, std_props.as_ref(), &z_cl)?;
        let h = attn.weights.dot(&v);
        let logits = h.dot(&self.mat(HEAD_W)) + self.vector(HEAD_B);
        Ok((logits, SeqCache { std_props, z_cl, v, attn, h, z_qk }))
    }

    /// Logits for a single unbatched input sequence, `n × vocab`.
    pub fn sequence_logits(&self, ids: &[usize], props: Option<&Properties>) -> Result<Array2<f64>> {
        Ok(self.forward_sequence(ids, props)?.0)
    }

    /// Post-softmax attention weights for one input sequence.
    pub fn attention_map(&self, ids: &[usize], props: Option<&Properties>) -> Result<AttentionMatrix> {
        Ok(self.forward_sequence(ids, props)?.1.attn)
    }

    /// Batch logits `B × width × vocab`; positions that are not inputs are 0.
    pub fn forward(&self, batch: &Batch) -> Result<Array3<f64>> {
        let rows: Vec<Array2<f64>> = (0..batch.size())
            .into_par_iter()
            .map(|b| self.sequence_logits(&batch.inputs(b), batch.row_properties(b).as_ref()))
            .collect::<Result<_>>()?;
        let mut out = Array3::zeros((batch.size(), batch.token_ids.ncols(), self.config.vocab_size));
        for (b, logits) in rows.iter().enumerate() {
            out.slice_mut(s![b, ..logits.nrows(), ..]).assign(logits);
        }
        Ok(out)
    }

    /// Loss and exact gradients for every tensor not trained by SPSA. The
    /// quantum attention weights are treated as constants.
    pub fn loss_and_classical_grads(&self, batch: &Batch) -> Result<(f64, ParamSet)> {
        let (targets, mask) = batch.targets();
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::validation("batch has no target tokens"));
        }
        let per_row: Vec<(f64, ParamSet)> = (0..batch.size())
            .into_par_iter()
            .map(|b| {
                let ids = batch.inputs(b);
                let (logits, cache) = self.forward_sequence(&ids, batch.row_properties(b).as_ref())?;
                let mut dlogits = Array2::zeros(logits.dim());
                let mut loss = 0.0;
                for i in 0..ids.len() {
                    let row = logits.row(i);
                    let lse = log_sum_exp(row);
                    let t = targets[[b, i]];
                    loss -= row[t] - lse;
                    for (k, d) in dlogits.row_mut(i).iter_mut().enumerate() {
                        *d = ((row[k] - lse).exp() - if k == t { 1.0 } else { 0.0 }) / count as f64;
                    }
                }
                let mut grads = self.zero_grads();
                self.backward_sequence(&ids, &cache, &dlogits, &mut grads);
                Ok((loss, grads))
            })
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        let mut grads = self.zero_grads();
        for (loss, g) in per_row {
            total += loss;
            for (name, t) in g {
                grads[&name] += &t;
            }
        }
        Ok((total / count as f64, grads))
    }

    fn zero_grads(&self) -> ParamSet {
        let spsa = self.config.spsa_tensors();
        self.tensors
            .iter()
            .filter(|(k, _)| !spsa.contains(&k.as_str()))
            .map(|(k, t)| (k.clone(), ArrayD::zeros(t.raw_dim())))
            .collect()
    }

    fn backward_sequence(&self, ids: &[usize], cache: &SeqCache, dlogits: &Array2<f64>, grads: &mut ParamSet) {
        fn add2(grads: &mut ParamSet, name: &str, g: &Array2<f64>) {
            let mut t = grads[name].view_mut().into_dimensionality::<Ix2>().expect("matrix");
            t += g;
        }
        fn add1(grads: &mut ParamSet, name: &str, g: &Array1<f64>) {
            let mut t = grads[name].view_mut().into_dimensionality::<Ix1>().expect("vector");
            t += g;
        }
        fn outer(x: &[f64], y: &Array1<f64>) -> Array2<f64> {
            Array2::from_shape_fn((x.len(), y.len()), |(i, j)| x[i] * y[j])
        }

        let n = ids.len();
        add1(grads, HEAD_B, &dlogits.sum_axis(Axis(0)));
        add2(grads, HEAD_W, &cache.h.t().dot(dlogits));
        let dh = dlogits.dot(&self.mat(HEAD_W).t());
        let a = &cache.attn.weights;
        let dv = a.t().dot(&dh);
        add2(grads, VALUE_W, &cache.z_cl.t().dot(&dv));
        add1(grads, VALUE_B, &dv.sum_axis(Axis(0)));
        let mut dz_cl = dv.dot(&self.mat(VALUE_W).t());

        if let Some(z_qk) = &cache.z_qk {
            let da = dh.dot(&cache.v.t());
            let scale = 1.0 / (self.config.d_k() as f64).sqrt();
            let mut ds = Array2::zeros((n, n));
            for i in 0..n {
                let dot: f64 = (0..=i).map(|j| a[[i, j]] * da[[i, j]]).sum();
                for j in 0..=i {
                    ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot) * scale;
                }
            }
            let w_q = self.mat(QUERY_W);
            let w_k = self.mat(KEY_W);
            let q = z_qk.dot(&w_q);
            let k = z_qk.dot(&w_k);
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            add2(grads, QUERY_W, &z_qk.t().dot(&dq));
            add2(grads, KEY_W, &z_qk.t().dot(&dk));
            let dz_qk = dq.dot(&w_q.t()) + dk.dot(&w_k.t());
            match self.config.variant {
                Variant::Classical => dz_cl += &dz_qk,
                Variant::ClassicalEq => {
                    scatter_rows(grads, TOKEN_ANGLES, POSITION_ANGLES, ids, &dz_qk);
                    if let Some(p) = &cache.std_props {
                        let total = dz_qk.sum_axis(Axis(0));
                        add2(grads, PROPERTY_ANGLES_W, &outer(p, &total));
                        add1(grads, PROPERTY_ANGLES_B, &total);
                    }
                }
                Variant::Quantum => unreachable!("quantum attention has no classical query/key input"),
            }
        }

        scatter_rows(grads, TOKEN_EMBEDDING, POSITION_EMBEDDING, ids, &dz_cl);
        if let Some(p) = &cache.std_props {
            let total = dz_cl.sum_axis(Axis(0));
            add2(grads, PROPERTY_EMBEDDING_W, &outer(p, &total));
            add1(grads, PROPERTY_EMBEDDING_B, &total);
        }
    }

    /// Logits of the next token after `ids`, computing only the last
    /// attention row.
    pub fn next_token_logits(&self, ids: &[usize], props: Option<&Properties>) -> Result<Array1<f64>> {
        self.check_inputs(ids, props)?;
        let std_props = props.map(|p| self.standardize(p));
        let z_cl = self.classical_embedding(ids, std_props.as_ref());
        let v = z_cl.dot(&self.mat(VALUE_W)) + self.vector(VALUE_B);
        let n = ids.len();
        let weights: Vec<f64> = match self.config.variant {
            Variant::Quantum => {
                let query = AnsatzParams::new(self.vector(THETA_Q).to_vec());
                let key = AnsatzParams::new(self.vector(THETA_K).to_vec());
                let property = std_props.as_ref().map(|p| self.property_register(p)).transpose()?;
                let params = self.quantum_params(&query, &key, property.as_ref());
                quantum_attention_last_row(&self.position_angles(ids), &params)?
            }
            variant => {
                let z = if variant == Variant::Classical { z_cl.clone() } else { self.angle_embedding(ids, std_props.as_ref()) };
                let q = z.row(n - 1).dot(&self.mat(QUERY_W));
                let k = z.dot(&self.mat(KEY_W));
                let scale = (self.config.d_k() as f64).sqrt();
                let scores = Array2::from_shape_fn((1, n), |(_, j)| k.row(j).dot(&q) / scale);
                // a single row is its own unmasked prefix only when placed last
                let mut square = Array2::zeros((n, n));
                square.row_mut(n - 1).assign(&scores.row(0));
                masked_softmax(&square).row(n - 1).to_vec()
            }
        };
        let h = Array1::from(weights).dot(&v);
        Ok(h.dot(&self.mat(HEAD_W)) + self.vector(HEAD_B))
    }

    /// Samples one sequence (without SOS/EOS). `temperature ≤ 0` decodes
    /// greedily. Generation stops at EOS or after `max_len` tokens, capped
    /// by the position table.
    pub fn generate<R: Rng>(
        &self,
        conditioning: Option<&Properties>,
        max_len: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let max_len = max_len.min(self.config.max_seq_len);
        let mut ids = vec![SOS_ID];
        let mut out = Vec::new();
        while out.len() < max_len {
            let logits = self.next_token_logits(&ids, conditioning)?;
            let next = sample_token(logits.view(), temperature, rng)?;
            if next == EOS_ID {
                break;
            }
            out.push(next);
            ids.push(next);
        }
        Ok(out)
    }

    /// [`generate`](Self::generate) with the sample's own keyed stream.
    pub fn generate_seeded(
        &self,
        conditioning: Option<&Properties>,
        max_len: usize,
        temperature: f64,
        seed: u64,
        index: u64,
    ) -> Result<Vec<usize>> {
        self.generate(conditioning, max_len, temperature, &mut keyed_rng(seed, "generate", index))
    }
}

fn scatter_rows(grads: &mut ParamSet, token: &str, position: &str, ids: &[usize], dz: &Array2<f64>) {
    {
        let mut t = grads[token].view_mut().into_dimensionality::<Ix2>().expect("matrix");
        for (i, &id) in ids.iter().enumerate() {
            let mut row = t.row_mut(id);
            row += &dz.row(i);
        }
    }
    let mut p = grads[position].view_mut().into_dimensionality::<Ix2>().expect("matrix");
    let mut rows = p.slice_mut(s![..ids.len(), ..]);
    rows += dz;
}

fn log_sum_exp(row: ArrayView1<'_, f64>) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `softmax(logits / temperature)` sample, or argmax when `temperature ≤ 0`.
pub fn sample_token<R: Rng>(logits: ArrayView1<'_, f64>, temperature: f64, rng: &mut R) -> Result<usize> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invariant("non-finite logits".into()));
    }
    let argmax = || {
        logits.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
    };
    if temperature <= 0.0 {
        return Ok(argmax());
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|v| ((v - max) / temperature).exp()).collect();
    match WeightedIndex::new(&weights) {
        Ok(dist) => Ok(dist.sample(rng)),
        Err(_) => Ok(argmax()),
    }
}

/// Summed token cross entropy and argmax hits over masked targets.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TokenStats {
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
}

impl TokenStats {
    pub fn merge(self, other: TokenStats) -> TokenStats {
        TokenStats {
            loss_sum: self.loss_sum + other.loss_sum,
            correct: self.correct + other.correct,
            count: self.count + other.count,
        }
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.count as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count as f64
    }
}

pub fn token_stats(logits: &Array3<f64>, targets: &Array2<usize>, mask: &Array2<bool>) -> Result<TokenStats> {
    if logits.dim().0 != targets.nrows() || logits.dim().1 != targets.ncols() || targets.dim() != mask.dim() {
        return Err(Error::validation("logits, targets and mask disagree in shape"));
    }
    let mut stats = TokenStats::default();
    for ((b, i), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let row = logits.slice(s![b, i, ..]);
        let t = targets[[b, i]];
        if t >= row.len() {
            return Err(Error::validation(format!("target id {t} outside vocabulary")));
        }
        stats.loss_sum -= row[t] - log_sum_exp(row);
        let best = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best }).0;
        stats.correct += usize::from(best == t);
        stats.count += 1;
    }
    Ok(stats)
}

/// Mean token cross entropy over non-pad targets.
pub fn loss(logits: &Array3<f64>, targets: &Array2<usize>, mask: &Array2<bool>) -> Result<f64> {
    let stats = token_stats(logits, targets, mask)?;
    if stats.count == 0 {
        return Err(Error::validation("all targets are padding"));
    }
    Ok(stats.mean_loss())
}

/// Forward pass plus loss for a batch.
pub fn batch_loss(params: &ModelParams, batch: &Batch) -> Result<f64> {
    let logits = params.forward(batch)?;
    let (targets, mask) = batch.targets();
    loss(&logits, &targets, &mask)
}

const MAGIC: &[u8; 4] = b"QTCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    vocabulary: Vec<String>,
    epoch: usize,
}

/// Model parameters, vocabulary and the epoch they were saved after.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocabulary: Vocabulary,
    pub epoch: usize,
}

fn write_tensors(out: &mut Vec<u8>, set: &ParamSet) {
    out.extend((set.len() as u32).to_le_bytes());
    for (name, t) in set {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for v in t.iter() {
            out.extend(v.to_le_bytes());
        }
    }
}

fn read_exact<const N: usize>(r: &mut Cursor<&[u8]>) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| Error::Checkpoint("truncated file".into()))?;
    Ok(buf)
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

fn read_tensors(r: &mut Cursor<&[u8]>) -> Result<ParamSet> {
    let count = read_u32(r)?;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| Error::Checkpoint("truncated tensor name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = read_u32(r)? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| Ok(u64::from_le_bytes(read_exact(r)?) as usize)).collect::<Result<_>>()?;
        let len: usize = shape.iter().product();
        let values: Vec<f64> = (0..len).map(|_| Ok(f64::from_le_bytes(read_exact(r)?))).collect::<Result<_>>()?;
        let t = ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| Error::Checkpoint(e.to_string()))?;
        set.insert(name, t);
    }
    Ok(set)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            config: self.params.config.clone(),
            vocabulary: self.vocabulary.tokens().to_vec(),
            epoch: self.epoch,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(json);
        write_tensors(&mut out, &self.params.tensors);
        write_tensors(&mut out, &self.params.buffers);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        if read_exact::<4>(&mut r)? != *MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| Error::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        let tensors = read_tensors(&mut r)?;
        let buffers = read_tensors(&mut r)?;
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let expected = ModelParams::init(header.config.clone())?;
        for (set, reference, what) in [(&tensors, &expected.tensors, "tensor"), (&buffers, &expected.buffers, "buffer")] {
            let names: Vec<&String> = set.keys().collect();
            let want: Vec<&String> = reference.keys().collect();
            if names != want {
                return Err(Error::Checkpoint(format!("{what} names {names:?} do not match the config ({want:?})")));
            }
            for (name, t) in set {
                if t.shape() != reference[name].shape() {
                    return Err(Error::Checkpoint(format!("{what} {name} has shape {:?}", t.shape())));
                }
            }
        }
        let vocabulary = Vocabulary::from_tokens(&header.vocabulary[3.min(header.vocabulary.len())..])?;
        if vocabulary.tokens() != header.vocabulary.as_slice() || vocabulary.len() != header.config.vocab_size {
            return Err(Error::Checkpoint("vocabulary does not match the config".into()));
        }
        Ok(Checkpoint { params: ModelParams { config: header.config, tensors, buffers }, vocabulary, epoch: header.epoch })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut file = fs::File::create(path)?;
        file.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
