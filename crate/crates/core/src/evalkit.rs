//! Pairwise KL diagnostics, contact fine-tuning and precision@L/5.

use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{encode, Forward, Model, ModelConfig, ModelError};
use crate::heads::{pair_feature_var, pair_hidden, predict, Dist, JointDist};
use crate::masking::{collate_batch, MaskedBatch, MaskedSequence, MaskingConfig};
use crate::numcore::{self, Graph, ParamId, Tensor, Var};
use crate::seqio::{SequenceRecord, NUM_PAIRS, NUM_RESIDUES};
use crate::synthgen::{self, contacts_from_spec, exact_conditional, CoupledModelSpec, SamplerMode, SynthError};
use crate::trainer::{
    self, adam_step, clip_global_norm, config_hash, Dataset, RunOutputs, TrainConfig, TrainError, TrainState,
    ValidationMetrics,
};

/// Floor added to joint mass inside the KL logarithm.
pub const KL_EPS: f64 = 1e-12;
pub const DEFAULT_CONTACT_THRESHOLD: f64 = 8.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("record {id}: sequence has {seq_len} residues but the contact map covers {map_len}")]
    Length { id: String, seq_len: usize, map_len: usize },
    #[error("sequence too short for range filter (length {length}, min separation {min_sep})")]
    TooShort { length: usize, min_sep: usize },
    #[error("contact map: {0}")]
    Contacts(String),
    #[error("{0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<numcore::NumError> for EvalError {
    fn from(e: numcore::NumError) -> Self {
        EvalError::Model(e.into())
    }
}

/// Symmetric residue contact map with a false diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactMap {
    length: usize,
    cells: Vec<bool>,
    /// Distance cutoff in Å when derived from distances.
    threshold: Option<f64>,
}

impl ContactMap {
    pub fn empty(length: usize) -> Self {
        ContactMap {
            length,
            cells: vec![false; length * length],
            threshold: None,
        }
    }

    /// Contacts at the given pairs, in either orientation.
    pub fn from_pairs(length: usize, pairs: &[(usize, usize)]) -> Result<Self, EvalError> {
        let mut m = Self::empty(length);
        for &(i, j) in pairs {
            if i == j || i >= length || j >= length {
                return Err(EvalError::Contacts(format!("pair ({i}, {j}) invalid for length {length}")));
            }
            m.cells[i * length + j] = true;
            m.cells[j * length + i] = true;
        }
        Ok(m)
    }

    /// `contact(i, j) ⇔ distance(i, j) ≤ threshold` off the diagonal.
    /// `distances` is a symmetric row-major `L×L` matrix.
    pub fn from_distances(length: usize, distances: &[f64], threshold: f64) -> Result<Self, EvalError> {
        if distances.len() != length * length {
            return Err(EvalError::Dim(format!("{} distances for length {length}", distances.len())));
        }
        let mut m = Self::empty(length);
        m.threshold = Some(threshold);
        for i in 0..length {
            for j in 0..length {
                let d = distances[i * length + j];
                if d.is_nan() || d != distances[j * length + i] {
                    return Err(EvalError::Contacts(format!("distance ({i}, {j}) is NaN or asymmetric")));
                }
                m.cells[i * length + j] = i != j && d <= threshold;
            }
        }
        Ok(m)
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.length + j]
    }

    /// Contacts with `i < j`.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.length)
            .flat_map(|i| (i + 1..self.length).map(move |j| (i, j)))
            .filter(|&(i, j)| self.get(i, j))
            .collect()
    }

    /// Number of unordered contacts.
    pub fn count(&self) -> usize {
        self.pairs().len()
    }
}

/// `KL(p·q ‖ joint) = Σ p(a) q(b) ln(p(a) q(b) / (joint(a,b) + ε))`.
pub fn kl_product_vs_joint(p: &Dist, q: &Dist, joint: &JointDist) -> Result<f64, EvalError> {
    if joint.n_a != p.len() || joint.n_b != q.len() {
        return Err(EvalError::Dim(format!(
            "marginals {}×{} against joint {}×{}",
            p.len(),
            q.len(),
            joint.n_a,
            joint.n_b
        )));
    }
    let mut kl = 0.0;
    for (a, &pa) in p.probs().iter().enumerate() {
        for (b, &qb) in q.probs().iter().enumerate() {
            let m = pa * qb;
            if m > 0.0 {
                kl += m * (m / (joint.get(a, b) + KL_EPS)).ln();
            }
        }
    }
    Ok(kl)
}

/// `KL(p ‖ q)` over a shared support, with the same floor on `q`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, EvalError> {
    if p.len() != q.len() {
        return Err(EvalError::Dim(format!("{} vs {} outcomes", p.len(), q.len())));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / (b + KL_EPS)).ln())
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlRecord {
    pub id: String,
    pub i: usize,
    pub j: usize,
    pub kl: f64,
}

/// Model outputs with exactly positions `i` and `j` masked.
#[derive(Clone, Debug)]
pub struct MaskedPairPrediction {
    pub i: usize,
    pub j: usize,
    pub marginal_i: Dist,
    pub marginal_j: Dist,
    /// Over `(x_i, x_j)`, indexed like pair ids.
    pub joint: JointDist,
}

/// For each `(i, j)` with `i ≠ j`, mask exactly those two positions and read
/// the token-head marginals and the pair-head joint.
pub fn predict_masked_pairs(
    model: &Model<f32>,
    seq: &SequenceRecord,
    pairs: &[(usize, usize)],
) -> Result<Vec<MaskedPairPrediction>, EvalError> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(64) {
        let mut masked = Vec::with_capacity(chunk.len());
        for &(i, j) in chunk {
            if i == j || i >= seq.len() || j >= seq.len() {
                return Err(EvalError::Dim(format!("pair ({i}, {j}) in sequence of length {}", seq.len())));
            }
            masked.push(MaskedSequence::with_positions(seq, &[i, j], false));
        }
        let batch = collate_batch(&masked, model.config.max_len).map_err(TrainError::from)?;
        let pred = predict(model, &batch)?;
        for (s, &(i, j)) in chunk.iter().enumerate() {
            // tokens are in position order; the ordered pair (i, j) is the
            // first label when i < j and the second otherwise
            let t0 = batch.token_offsets[s];
            let (ti, tj) = if i < j { (t0, t0 + 1) } else { (t0 + 1, t0) };
            let p0 = batch.pair_offsets[s] + usize::from(i > j);
            let tok = |t: usize| pred.token_probs[t * NUM_RESIDUES..(t + 1) * NUM_RESIDUES].to_vec();
            out.push(MaskedPairPrediction {
                i,
                j,
                marginal_i: Dist::new(tok(ti))?,
                marginal_j: Dist::new(tok(tj))?,
                joint: JointDist::new(
                    NUM_RESIDUES,
                    NUM_RESIDUES,
                    pred.pair_probs[p0 * NUM_PAIRS..(p0 + 1) * NUM_PAIRS].to_vec(),
                )?,
            });
        }
    }
    Ok(out)
}

/// KL between the product of token-head marginals and the pair-head joint,
/// for each pair masked on its own.
pub fn scan_pair_kl(model: &Model<f32>, seq: &SequenceRecord, pairs: &[(usize, usize)]) -> Result<Vec<KlRecord>, EvalError> {
    predict_masked_pairs(model, seq, pairs)?
        .into_iter()
        .map(|p| {
            Ok(KlRecord {
                id: seq.id.clone(),
                i: p.i,
                j: p.j,
                kl: kl_product_vs_joint(&p.marginal_i, &p.marginal_j, &p.joint)?,
            })
        })
        .collect()
}

/// All `i < j` pairs of a sequence of length `l`.
pub fn all_pairs(l: usize) -> Vec<(usize, usize)> {
    (0..l).flat_map(|i| (i + 1..l).map(move |j| (i, j))).collect()
}

/// `(bucket_low, count)` for buckets `[k·width, (k+1)·width)` from 0 up to
/// the largest value; negative values fall in the first bucket.
pub fn kl_histogram(values: &[f64], width: f64) -> Vec<(f64, usize)> {
    if values.is_empty() || !(width > 0.0) {
        return Vec::new();
    }
    let bucket = |v: f64| (v.max(0.0) / width).floor() as usize;
    let n = values.iter().map(|&v| bucket(v)).max().unwrap_or(0) + 1;
    let mut counts = vec![0usize; n];
    for &v in values {
        counts[bucket(v)] += 1;
    }
    counts.into_iter().enumerate().map(|(k, c)| (k as f64 * width, c)).collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Which features feed the contact head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    /// Activation of the pair head's first layer.
    PairHead,
    /// `concat(h_i ⊙ h_j, h_i − h_j)`, for models without a trained pair head.
    Fallback,
}

/// Pair head first-layer weights, `[2d, pair_dim]` and `[pair_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairHeadParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl PairHeadParams {
    pub fn from_model<T: numcore::Element>(model: &Model<T>) -> Self {
        let [w, b, _, _] = model.pair_head_ids();
        let wt = model.params.get(w);
        PairHeadParams {
            weight: wt.to_f64_vec(),
            bias: model.params.get(b).to_f64_vec(),
            in_dim: wt.shape()[0],
            out_dim: wt.shape()[1],
        }
    }
}

/// Pair-head first-layer activation of `pair_feature(h_i, h_j)`, or the raw
/// pair feature when `head` is `None`.
pub fn contact_pair_representation(h_i: &[f64], h_j: &[f64], head: Option<&PairHeadParams>) -> Result<Vec<f64>, EvalError> {
    let f = crate::heads::pair_feature(h_i, h_j)?;
    let Some(p) = head else { return Ok(f) };
    if f.len() != p.in_dim {
        return Err(EvalError::Dim(format!("feature {} vs pair head input {}", f.len(), p.in_dim)));
    }
    let mut z = p.bias.clone();
    for (k, &fk) in f.iter().enumerate() {
        let row = &p.weight[k * p.out_dim..(k + 1) * p.out_dim];
        z.iter_mut().zip(row).for_each(|(zo, &w)| *zo += fk * w);
    }
    Ok(z.into_iter().map(gelu).collect())
}

fn gelu(x: f64) -> f64 {
    let u = 0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// Pair selection for ranking: `|i − j| ≥ min_separation`, or `>` when strict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RangeFilter {
    pub min_separation: usize,
    pub strict: bool,
}

impl RangeFilter {
    /// Medium and long range pooled: `|i − j| ≥ 12`.
    pub const MEDIUM_LONG: RangeFilter = RangeFilter {
        min_separation: 12,
        strict: false,
    };

    pub fn at_least(min_separation: usize) -> Self {
        RangeFilter {
            min_separation,
            strict: false,
        }
    }

    pub fn accepts(&self, i: usize, j: usize) -> bool {
        let d = i.abs_diff(j);
        if self.strict {
            d > self.min_separation
        } else {
            d >= self.min_separation
        }
    }
}

impl Default for RangeFilter {
    fn default() -> Self {
        Self::MEDIUM_LONG
    }
}

/// Symmetric pair scores, row-major `L×L`; only `i < j` is read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub id: String,
    pub length: usize,
    pub scores: Vec<f64>,
}

impl PairScores {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.length + j]
    }
}

/// Pairs passing `filter`, ranked by score descending with ties broken by
/// `(i, j)`.
pub fn rank_pairs(scores: &PairScores, filter: RangeFilter) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = all_pairs(scores.length)
        .into_iter()
        .filter(|&(i, j)| filter.accepts(i, j))
        .collect();
    pairs.sort_by(|&a, &b| scores.get(b.0, b.1).total_cmp(&scores.get(a.0, a.1)).then(a.cmp(&b)));
    pairs
}

/// Fraction of true contacts among the top `max(1, ⌊L/5⌋)` filtered pairs.
pub fn precision_at_l5(scores: &PairScores, truth: &ContactMap, filter: RangeFilter) -> Result<f64, EvalError> {
    if scores.length != truth.length() || scores.scores.len() != scores.length * scores.length {
        return Err(EvalError::Dim(format!(
            "scores for length {} against contact map of length {}",
            scores.length,
            truth.length()
        )));
    }
    let ranked = rank_pairs(scores, filter);
    if ranked.is_empty() {
        return Err(EvalError::TooShort {
            length: scores.length,
            min_sep: filter.min_separation,
        });
    }
    let k = (scores.length / 5).max(1).min(ranked.len());
    let hits = ranked[..k].iter().filter(|&&(i, j)| truth.get(i, j)).count();
    Ok(hits as f64 / k as f64)
}

/// Expected precision of uniformly random scores: the contact density among
/// filtered pairs.
pub fn random_baseline(truth: &ContactMap, filter: RangeFilter) -> Result<f64, EvalError> {
    let pairs: Vec<_> = all_pairs(truth.length())
        .into_iter()
        .filter(|&(i, j)| filter.accepts(i, j))
        .collect();
    if pairs.is_empty() {
        return Err(EvalError::TooShort {
            length: truth.length(),
            min_sep: filter.min_separation,
        });
    }
    Ok(pairs.iter().filter(|&&(i, j)| truth.get(i, j)).count() as f64 / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    /// Encoder frozen; only the contact head trains.
    Probe,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub representation: Representation,
    /// Dropout on the contact head input.
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Sequences per step; every filtered pair of each sequence is a row.
    pub batch_size: usize,
    pub seed: u64,
    /// Pairs used for training satisfy this filter.
    pub train_filter: RangeFilter,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: FinetuneMode::Probe,
            representation: Representation::PairHead,
            dropout: 0.5,
            lr: 1e-3,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            train_filter: RangeFilter::at_least(1),
        }
    }
}

const CONTACT_W: &str = "contact_head.weight";
const CONTACT_B: &str = "contact_head.bias";

/// Encoder (possibly fine-tuned) with a two-way contact head stored
/// alongside its parameters.
#[derive(Clone, Debug)]
pub struct ContactModel {
    pub model: Model<f32>,
    pub representation: Representation,
    pub dropout: f64,
}

impl ContactModel {
    /// Wrap a model whose parameters already hold a contact head.
    pub fn from_parts(model: Model<f32>, representation: Representation, dropout: f64) -> Result<Self, EvalError> {
        let r = representation_dim(&model.config, representation);
        let shape = |n: &str| model.params.by_name(n).map(|t| t.shape().to_vec());
        if shape(CONTACT_W) != Some(vec![r, 2]) || shape(CONTACT_B) != Some(vec![2]) {
            return Err(EvalError::Config(format!(
                "checkpoint has no contact head of input width {r} for {representation:?} features"
            )));
        }
        Ok(ContactModel {
            model,
            representation,
            dropout,
        })
    }

    fn head_ids(&self) -> (ParamId, ParamId) {
        let p = &self.model.params;
        (p.id(CONTACT_W).expect("contact head"), p.id(CONTACT_B).expect("contact head"))
    }

    /// Weight `[r, 2]` and bias `[2]` of the contact head.
    pub fn head(&self) -> (&Tensor<f32>, &Tensor<f32>) {
        let (w, b) = self.head_ids();
        (self.model.params.get(w), self.model.params.get(b))
    }

    /// Contact probabilities for every pair of each sequence.
    pub fn predict(&self, seqs: &[SequenceRecord]) -> Result<Vec<PairScores>, EvalError> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(32) {
            let plan = PairPlan::new(chunk, self.model.config.max_len, RangeFilter::at_least(1))?;
            let mut g = Graph::<f32>::new();
            let mut fwd = Forward::<f32, ChaCha8Rng>::eval(&self.model);
            let logits = contact_logits(self, &mut fwd, &mut g, &plan, None)?;
            let lv = g.value(logits).to_f64_vec();
            for (s, seq) in chunk.iter().enumerate() {
                let l = seq.len();
                let mut scores = vec![0.0; l * l];
                for r in plan.offsets[s]..plan.offsets[s + 1] {
                    let (i, j) = plan.pairs[r];
                    let p = numcore::softmax(&lv[2 * r..2 * r + 2])?[1];
                    scores[i * l + j] = p;
                    scores[j * l + i] = p;
                }
                out.push(PairScores {
                    id: seq.id.clone(),
                    length: l,
                    scores,
                });
            }
        }
        Ok(out)
    }
}

/// Unmasked batch plus the pair rows of every sequence.
struct PairPlan {
    batch: MaskedBatch,
    pairs: Vec<(usize, usize)>,
    rows_i: Vec<usize>,
    rows_j: Vec<usize>,
    offsets: Vec<usize>,
}

impl PairPlan {
    fn new(seqs: &[SequenceRecord], max_len: usize, filter: RangeFilter) -> Result<Self, EvalError> {
        let masked: Vec<MaskedSequence> = seqs.iter().map(|s| MaskedSequence::with_positions(s, &[], false)).collect();
        let batch = collate_batch(&masked, max_len).map_err(TrainError::from)?;
        let width = batch.width;
        let mut plan = PairPlan {
            batch,
            pairs: Vec::new(),
            rows_i: Vec::new(),
            rows_j: Vec::new(),
            offsets: vec![0],
        };
        for (s, seq) in seqs.iter().enumerate() {
            for (i, j) in all_pairs(seq.len()) {
                if filter.accepts(i, j) {
                    plan.pairs.push((i, j));
                    plan.rows_i.push(s * width + i + 1);
                    plan.rows_j.push(s * width + j + 1);
                }
            }
            plan.offsets.push(plan.pairs.len());
        }
        Ok(plan)
    }
}

/// `[n_pairs, 2]` logits from the order-symmetrized representation.
fn contact_logits(
    cm: &ContactModel,
    fwd: &mut Forward<'_, f32, ChaCha8Rng>,
    g: &mut Graph<f32>,
    plan: &PairPlan,
    head_dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var, EvalError> {
    let b = &plan.batch;
    let enc = encode(fwd, g, &b.input_ids, &b.attention, b.batch, b.width)?;
    let rep = |fwd: &mut Forward<'_, f32, ChaCha8Rng>, g: &mut Graph<f32>, ri: &[usize], rj: &[usize]| match cm
        .representation
    {
        Representation::PairHead => pair_hidden(fwd, g, enc.hidden, ri, rj),
        Representation::Fallback => pair_feature_var(g, enc.hidden, ri, rj),
    };
    let fwd_rep = rep(fwd, g, &plan.rows_i, &plan.rows_j)?;
    let rev_rep = rep(fwd, g, &plan.rows_j, &plan.rows_i)?;
    let sum = g.add(fwd_rep, rev_rep)?;
    let mut x = g.scale(sum, 0.5);
    if let Some(rng) = head_dropout {
        if cm.dropout > 0.0 {
            let keep: Vec<bool> = (0..g.value(x).len()).map(|_| rng.gen::<f64>() >= cm.dropout).collect();
            x = g.dropout(x, &keep, cm.dropout)?;
        }
    }
    let (w, bias) = cm.head_ids();
    let w = g.param(&cm.model.params, w);
    let bias = g.param(&cm.model.params, bias);
    let y = g.matmul(x, w)?;
    Ok(g.add(y, bias)?)
}

fn representation_dim(cfg: &ModelConfig, r: Representation) -> usize {
    match r {
        Representation::PairHead => cfg.pair_dim,
        Representation::Fallback => 2 * cfg.hidden_dim,
    }
}

/// Train a two-way contact head over residue pairs with cross-entropy.
pub fn finetune_contact(
    model: &Model<f32>,
    labeled: &[(SequenceRecord, ContactMap)],
    cfg: &FinetuneConfig,
) -> Result<ContactModel, EvalError> {
    if labeled.is_empty() {
        return Err(EvalError::Config("no labeled sequences".into()));
    }
    if !(0.0..1.0).contains(&cfg.dropout) || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(EvalError::Config("dropout in [0,1), positive batch size and lr required".into()));
    }
    for (s, m) in labeled {
        if s.len() != m.length() {
            return Err(EvalError::Length {
                id: s.id.clone(),
                seq_len: s.len(),
                map_len: m.length(),
            });
        }
        if s.len() + 2 > model.config.max_len {
            return Err(EvalError::Config(format!("record {} exceeds the model's max_len", s.id)));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cm = ContactModel {
        model: model.clone(),
        representation: cfg.representation,
        dropout: cfg.dropout,
    };
    let r = representation_dim(&model.config, cfg.representation);
    let normal = Normal::new(0.0, model.config.init_std).map_err(|e| EvalError::Config(e.to_string()))?;
    let w: Vec<f32> = (0..r * 2).map(|_| normal.sample(&mut rng) as f32).collect();
    cm.model.params.insert(CONTACT_W, Tensor::new(vec![r, 2], w)?);
    cm.model.params.insert(CONTACT_B, Tensor::new(vec![2], vec![0.0; 2])?);

    let opt = TrainConfig {
        peak_lr: cfg.lr,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&cm.model.params);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let seqs: Vec<SequenceRecord> = idx.iter().map(|&k| labeled[k].0.clone()).collect();
            let plan = PairPlan::new(&seqs, cm.model.config.max_len, cfg.train_filter)?;
            if plan.pairs.is_empty() {
                continue;
            }
            let labels: Vec<usize> = (0..seqs.len())
                .flat_map(|s| {
                    let truth = &labeled[idx[s]].1;
                    plan.pairs[plan.offsets[s]..plan.offsets[s + 1]]
                        .iter()
                        .map(|&(i, j)| usize::from(truth.get(i, j)))
                })
                .collect();
            let mut enc_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            let mut head_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            let mut g = Graph::<f32>::new();
            let loss = {
                let mut fwd = match cfg.mode {
                    FinetuneMode::Probe => Forward::eval(&cm.model),
                    FinetuneMode::Full => Forward::train(&cm.model, Some(&mut enc_rng)),
                };
                let logits = contact_logits(&cm, &mut fwd, &mut g, &plan, Some(&mut head_rng))?;
                g.cross_entropy(logits, &labels)?
            };
            if !g.scalar(loss).is_finite() {
                return Err(TrainError::NonFinite {
                    step: state.step,
                    what: "contact loss".into(),
                }
                .into());
            }
            g.backward(loss)?;
            let mut present = vec![false; cm.model.params.len()];
            let mut flat = Vec::new();
            for (id, grad) in g.param_grads() {
                present[id.index()] = true;
                flat.push(grad.to_vec());
            }
            drop(g);
            clip_global_norm(&mut flat, opt.clip_norm)?;
            let mut flat = flat.into_iter();
            let grads: Vec<Option<Vec<f32>>> = present.iter().map(|&p| if p { flat.next() } else { None }).collect();
            adam_step(&mut cm.model.params, &grads, &mut state, cfg.lr, &opt);
        }
    }
    Ok(cm)
}

/// Mean P@L/5 over sequences and the mean random-predictor expectation.
pub fn evaluate_contacts(
    cm: &ContactModel,
    labeled: &[(SequenceRecord, ContactMap)],
    filter: RangeFilter,
) -> Result<(f64, f64), EvalError> {
    if labeled.is_empty() {
        return Err(EvalError::Config("no labeled sequences".into()));
    }
    let seqs: Vec<SequenceRecord> = labeled.iter().map(|(s, _)| s.clone()).collect();
    let scores = cm.predict(&seqs)?;
    let (mut p, mut base) = (0.0, 0.0);
    for (sc, (_, truth)) in scores.iter().zip(labeled) {
        p += precision_at_l5(sc, truth, filter)?;
        base += random_baseline(truth, filter)?;
    }
    let n = labeled.len() as f64;
    Ok((p / n, base / n))
}

/// One line of a contact data file: a sequence with either explicit
/// contacts or a distance matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactRecord {
    pub id: String,
    pub sequence: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contacts: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distances: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

impl ContactRecord {
    pub fn from_pair(seq: &SequenceRecord, map: &ContactMap) -> Self {
        ContactRecord {
            id: seq.id.clone(),
            sequence: seq.to_letters(),
            contacts: Some(map.pairs()),
            distances: None,
            threshold: None,
        }
    }

    pub fn resolve(&self) -> Result<(SequenceRecord, ContactMap), EvalError> {
        let seq = SequenceRecord::from_str(&self.id, &self.sequence)
            .map_err(|e| EvalError::Contacts(format!("record {}: {e}", self.id)))?;
        let map = match (&self.contacts, &self.distances) {
            (Some(c), None) => ContactMap::from_pairs(seq.len(), c)?,
            (None, Some(d)) => {
                let flat: Vec<f64> = d.iter().flatten().copied().collect();
                if d.len() != seq.len() {
                    return Err(EvalError::Length {
                        id: self.id.clone(),
                        seq_len: seq.len(),
                        map_len: d.len(),
                    });
                }
                ContactMap::from_distances(d.len(), &flat, self.threshold.unwrap_or(DEFAULT_CONTACT_THRESHOLD))?
            }
            _ => {
                return Err(EvalError::Contacts(format!(
                    "record {} needs exactly one of `contacts` or `distances`",
                    self.id
                )))
            }
        };
        if map.length() != seq.len() {
            return Err(EvalError::Length {
                id: self.id.clone(),
                seq_len: seq.len(),
                map_len: map.length(),
            });
        }
        Ok((seq, map))
    }
}

/// Read line-delimited JSON records of type `T`, skipping blank lines and
/// objects tagged `"kind": "header"`.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |e: serde_json::Error| EvalError::Format {
            line: n + 1,
            msg: e.to_string(),
        };
        let v: serde_json::Value = serde_json::from_str(&line).map_err(err)?;
        if v.get("kind").and_then(|k| k.as_str()) == Some("header") {
            continue;
        }
        out.push(serde_json::from_value(v).map_err(err)?);
    }
    Ok(out)
}

pub fn read_contact_file(path: &Path) -> Result<Vec<(SequenceRecord, ContactMap)>, EvalError> {
    read_jsonl::<ContactRecord>(path)?.iter().map(ContactRecord::resolve).collect()
}

/// Settings shared by both arms of the MLM-vs-PMLM comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub n_sequences: usize,
    pub data_seed: u64,
    pub model: ModelConfig,
    pub masking: MaskingConfig,
    pub train: TrainConfig,
    /// λ of the pair arm; the other arm uses 0.
    pub pmlm_lambda: f64,
    pub finetune: FinetuneConfig,
    /// Training sequences used for contact fine-tuning.
    pub n_finetune: usize,
    pub eval_filter: RangeFilter,
    /// Held-out masked coupled pairs compared against the exact conditional.
    pub oracle_pairs: usize,
    /// Held-out sequences scanned for KL separation.
    pub kl_sequences: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            n_sequences: 5000,
            data_seed: 0,
            model: ModelConfig {
                max_len: 10,
                ..ModelConfig::desk()
            },
            // Dense masking: with 8 residues, 0.15 rarely masks both ends of a
            // coupled pair, which starves the pair head.
            masking: MaskingConfig {
                mask_prob: 0.5,
                ..MaskingConfig::default()
            },
            train: TrainConfig {
                total_steps: 20_000,
                warmup_steps: 1_000,
                validate_every: 5_000,
                peak_lr: 1e-3,
                ..TrainConfig::default()
            },
            pmlm_lambda: 1.0,
            finetune: FinetuneConfig::default(),
            n_finetune: 2000,
            eval_filter: RangeFilter::at_least(2),
            oracle_pairs: 200,
            kl_sequences: 200,
        }
    }
}

/// Oracle and KL diagnostics of one trained model against a coupled spec.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CouplingDiagnostics {
    pub kl_median_coupled: f64,
    pub kl_median_uncoupled: f64,
    /// Mean `KL(exact ‖ pair-head joint)` over held-out masked coupled pairs.
    pub oracle_kl_joint: f64,
    /// Mean `KL(exact ‖ product of token-head marginals)` over the same pairs.
    pub oracle_kl_product: f64,
    pub n_oracle_pairs: usize,
}

/// KL separation between coupled and uncoupled pairs on `kl_seqs`, and
/// distance to the exact conditional on `n_oracle` masked coupled pairs
/// cycling through `oracle_seqs`.
pub fn coupling_diagnostics(
    model: &Model<f32>,
    spec: &CoupledModelSpec,
    kl_seqs: &[SequenceRecord],
    oracle_seqs: &[SequenceRecord],
    n_oracle: usize,
) -> Result<CouplingDiagnostics, EvalError> {
    let coupled = spec.coupled_pairs();
    let (mut kc, mut ku) = (Vec::new(), Vec::new());
    for s in kl_seqs {
        for r in scan_pair_kl(model, s, &all_pairs(s.len()))? {
            if coupled.contains(&(r.i, r.j)) {
                kc.push(r.kl);
            } else {
                ku.push(r.kl);
            }
        }
    }
    let mut d = CouplingDiagnostics {
        kl_median_coupled: median(&kc).unwrap_or(0.0),
        kl_median_uncoupled: median(&ku).unwrap_or(0.0),
        ..Default::default()
    };
    if coupled.is_empty() || oracle_seqs.is_empty() {
        return Ok(d);
    }
    for k in 0..n_oracle {
        let s = &oracle_seqs[k % oracle_seqs.len()];
        let (i, j) = coupled[k % coupled.len()];
        let exact = exact_conditional(spec, i, j, &s.residues)?;
        let pred = predict_masked_pairs(model, s, &[(i, j)])?.remove(0);
        let product = JointDist::product(&pred.marginal_i, &pred.marginal_j);
        let embed = |p: &[f64]| -> Vec<f64> {
            // spec letters are the first `alphabet` residues
            let a_n = spec.alphabet();
            let mut full = vec![0.0; NUM_PAIRS];
            for a in 0..a_n {
                for b in 0..a_n {
                    full[a * NUM_RESIDUES + b] = p[a * a_n + b];
                }
            }
            full
        };
        let truth = embed(exact.joint.probs());
        d.oracle_kl_joint += kl_divergence(&truth, pred.joint.probs())?;
        d.oracle_kl_product += kl_divergence(&truth, product.probs())?;
        d.n_oracle_pairs += 1;
    }
    d.oracle_kl_joint /= d.n_oracle_pairs as f64;
    d.oracle_kl_product /= d.n_oracle_pairs as f64;
    Ok(d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub lambda: f64,
    pub config_hash: String,
    pub representation: Representation,
    pub validation: ValidationMetrics,
    pub p_at_l5: f64,
    pub diagnostics: CouplingDiagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seed: u64,
    pub version: String,
    pub random_baseline: f64,
    pub mlm: ArmReport,
    pub pmlm: ArmReport,
}

impl CompareReport {
    /// Fixed-width table, one row per arm.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<6} {:>6} {:>8} {:>8} {:>8} {:>8} {:>9} {:>10} {:>10} {:>10}\n",
            "arm", "lambda", "L_mlm", "L_pmlm", "Acc_mlm", "Acc_pmlm", "dAcc", "P@L/5", "KL_coup", "KL_unc"
        );
        for a in [&self.mlm, &self.pmlm] {
            s.push_str(&format!(
                "{:<6} {:>6.2} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9.5} {:>10.4} {:>10.4} {:>10.4}\n",
                a.arm,
                a.lambda,
                a.validation.mlm,
                a.validation.pmlm,
                a.validation.acc_mlm,
                a.validation.acc_pmlm,
                a.validation.delta_acc,
                a.p_at_l5,
                a.diagnostics.kl_median_coupled,
                a.diagnostics.kl_median_uncoupled
            ));
        }
        s.push_str(&format!("random P@L/5 baseline {:.4}\n", self.random_baseline));
        s
    }
}

/// A trained arm and the data it saw, for callers that need more than the
/// report.
pub struct TrainedArm {
    pub model: Model<f32>,
    pub report: ArmReport,
}

/// Sample the dataset of a comparison: all sequences and the split.
pub fn compare_dataset(spec: &CoupledModelSpec, cfg: &CompareConfig) -> Result<Dataset, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let seqs = synthgen::sample_sequences(spec, cfg.n_sequences, &SamplerMode::Exact, &mut rng)?;
    Ok(Dataset::split(seqs, cfg.train.valid_fraction))
}

/// Pre-train with the given λ, fine-tune a contact probe, and measure it.
pub fn run_arm(
    spec: &CoupledModelSpec,
    data: &Dataset,
    cfg: &CompareConfig,
    lambda: f64,
    log: Option<&mut dyn std::io::Write>,
) -> Result<TrainedArm, EvalError> {
    let model_cfg = ModelConfig {
        lambda,
        ..cfg.model.clone()
    };
    let outcome = trainer::pretrain(
        data,
        &model_cfg,
        &cfg.masking,
        &cfg.train,
        RunOutputs { log, checkpoint: None },
    )?;
    let validation = match outcome.log.last() {
        Some(trainer::LogRecord::Validation { metrics, .. }) => metrics.clone(),
        _ => ValidationMetrics::default(),
    };
    let truth = contacts_from_spec(spec);
    let labeled: Vec<_> = data.train.iter().take(cfg.n_finetune).map(|s| (s.clone(), truth.clone())).collect();
    let held: Vec<_> = data.valid.iter().map(|s| (s.clone(), truth.clone())).collect();
    let representation = if lambda > 0.0 || model_cfg.pmlm_only_with_diagonal {
        Representation::PairHead
    } else {
        Representation::Fallback
    };
    let ft = FinetuneConfig {
        representation,
        ..cfg.finetune.clone()
    };
    let cm = finetune_contact(&outcome.model, &labeled, &ft)?;
    let (p_at_l5, _) = evaluate_contacts(&cm, &held, cfg.eval_filter)?;
    let kl_seqs: Vec<_> = data.valid.iter().take(cfg.kl_sequences).cloned().collect();
    let diagnostics = coupling_diagnostics(&outcome.model, spec, &kl_seqs, &data.valid, cfg.oracle_pairs)?;
    Ok(TrainedArm {
        report: ArmReport {
            arm: if lambda > 0.0 { "pmlm" } else { "mlm" }.to_string(),
            lambda,
            config_hash: config_hash(&model_cfg, &cfg.masking, &cfg.train),
            representation,
            validation,
            p_at_l5,
            diagnostics,
        },
        model: outcome.model,
    })
}

/// Train an MLM-only arm (λ = 0) and a combined arm on identical data and
/// seeds, then compare contact precision and coupling diagnostics.
pub fn compare_mlm_vs_pmlm(spec: &CoupledModelSpec, cfg: &CompareConfig) -> Result<CompareReport, EvalError> {
    let data = compare_dataset(spec, cfg)?;
    let mlm = run_arm(spec, &data, cfg, 0.0, None)?.report;
    let pmlm = run_arm(spec, &data, cfg, cfg.pmlm_lambda, None)?.report;
    Ok(CompareReport {
        seed: cfg.train.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        random_baseline: random_baseline(&contacts_from_spec(spec), cfg.eval_filter)?,
        mlm,
        pmlm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn d(p: &[f64]) -> Dist {
        Dist::new(p.to_vec()).unwrap()
    }

    #[test]
    fn kl_examples() {
        let h = d(&[0.5, 0.5]);
        let joint = JointDist::new(2, 2, vec![0.4, 0.1, 0.1, 0.4]).unwrap();
        assert!((kl_product_vs_joint(&h, &h, &joint).unwrap() - 0.2231).abs() < 1e-3);
        let p = d(&[0.2, 0.3, 0.5]);
        let q = d(&[0.6, 0.4]);
        let prod = JointDist::product(&p, &q);
        assert!(kl_product_vs_joint(&p, &q, &prod).unwrap().abs() < 1e-9);
        assert!(kl_product_vs_joint(&q, &p, &prod).is_err());
    }

    #[test]
    fn kl_grows_as_joint_leaves_product_support() {
        let h = d(&[0.5, 0.5]);
        let mut last = 0.0;
        for c in [0.5, 0.9, 0.99, 0.999999] {
            let off = (1.0 - c) / 2.0;
            let joint = JointDist::new(2, 2, vec![c, off, off, 0.0]).unwrap();
            let kl = kl_product_vs_joint(&h, &h, &joint).unwrap();
            assert!(kl > last);
            last = kl;
        }
        assert!(last > 5.0);
    }

    #[test]
    fn contact_map_constructors() {
        let m = ContactMap::from_pairs(6, &[(1, 5), (3, 2)]).unwrap();
        assert_eq!(m.pairs(), vec![(1, 5), (2, 3)]);
        assert!(m.get(5, 1) && !m.get(1, 1));
        assert!(ContactMap::from_pairs(4, &[(2, 2)]).is_err());
        let dist = vec![0.0, 8.0, 9.0, 8.0, 0.0, 3.0, 9.0, 3.0, 0.0];
        let m = ContactMap::from_distances(3, &dist, 8.0).unwrap();
        assert_eq!(m.pairs(), vec![(0, 1), (1, 2)]);
        assert_eq!(m.threshold(), Some(8.0));
        let mut asym = dist.clone();
        asym[1] = 7.0;
        assert!(ContactMap::from_distances(3, &asym, 8.0).is_err());
    }

    fn scores_from(l: usize, f: impl Fn(usize, usize) -> f64) -> PairScores {
        let mut s = vec![0.0; l * l];
        for i in 0..l {
            for j in 0..l {
                s[i * l + j] = f(i.min(j), i.max(j));
            }
        }
        PairScores {
            id: "x".into(),
            length: l,
            scores: s,
        }
    }

    #[test]
    fn precision_examples() {
        let l = 60;
        let pairs: Vec<_> = all_pairs(l).into_iter().filter(|&(i, j)| j - i >= 12).collect();
        // top 12 by score are the first 12 filtered pairs; 9 of them contacts
        let score = |i: usize, j: usize| {
            let k = pairs.iter().position(|&p| p == (i, j)).unwrap_or(usize::MAX);
            if k == usize::MAX {
                -1.0
            } else {
                -(k as f64)
            }
        };
        let s = scores_from(l, score);
        let mut truth_pairs: Vec<_> = pairs[..9].to_vec();
        truth_pairs.extend(&pairs[20..30]);
        let truth = ContactMap::from_pairs(l, &truth_pairs).unwrap();
        assert_eq!(precision_at_l5(&s, &truth, RangeFilter::MEDIUM_LONG).unwrap(), 0.75);
        let all = ContactMap::from_pairs(l, &pairs[..12]).unwrap();
        assert_eq!(precision_at_l5(&s, &all, RangeFilter::MEDIUM_LONG).unwrap(), 1.0);
        assert_eq!(precision_at_l5(&s, &ContactMap::empty(l), RangeFilter::MEDIUM_LONG).unwrap(), 0.0);

        let short = scores_from(10, |_, _| 0.0);
        assert!(matches!(
            precision_at_l5(&short, &ContactMap::empty(10), RangeFilter::MEDIUM_LONG),
            Err(EvalError::TooShort { .. })
        ));
        // ties rank lexicographically: the first filtered pair wins
        let flat = scores_from(8, |_, _| 1.0);
        let first = ContactMap::from_pairs(8, &[(0, 2)]).unwrap();
        assert_eq!(precision_at_l5(&flat, &first, RangeFilter::at_least(2)).unwrap(), 1.0);
    }

    #[test]
    fn range_filter_strictness() {
        let f = RangeFilter::MEDIUM_LONG;
        assert!(f.accepts(0, 12) && f.accepts(12, 0) && !f.accepts(0, 11));
        let s = RangeFilter {
            strict: true,
            ..f
        };
        assert!(!s.accepts(0, 12) && s.accepts(0, 13));
    }

    #[test]
    fn random_baseline_is_density() {
        let truth = ContactMap::from_pairs(8, &[(0, 5), (1, 3), (4, 7)]).unwrap();
        assert!((random_baseline(&truth, RangeFilter::at_least(2)).unwrap() - 3.0 / 21.0).abs() < 1e-15);
    }

    #[test]
    fn representation_shapes_and_symmetry() {
        let hi = [0.3, -0.2, 0.8];
        let hj = [-0.5, 0.1, 0.4];
        assert_eq!(contact_pair_representation(&hi, &hj, None).unwrap().len(), 6);
        let head = PairHeadParams {
            weight: (0..6 * 4).map(|k| (k as f64 * 0.37).sin()).collect(),
            bias: vec![0.1, -0.2, 0.3, 0.0],
            in_dim: 6,
            out_dim: 4,
        };
        let a = contact_pair_representation(&hi, &hj, Some(&head)).unwrap();
        assert_eq!(a.len(), 4);
        let b = contact_pair_representation(&hj, &hi, Some(&head)).unwrap();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let ba: Vec<f64> = b.iter().zip(&a).map(|(x, y)| x + y).collect();
        assert_eq!(ab, ba);
        let z = contact_pair_representation(&[0.0; 3], &[0.0; 3], Some(&head)).unwrap();
        let want: Vec<f64> = head.bias.iter().map(|&v| gelu(v)).collect();
        assert_eq!(z, want);
    }

    #[test]
    fn histogram_buckets() {
        let h = kl_histogram(&[0.05, 0.15, 0.16, 0.31, -1e-10], 0.1);
        assert_eq!(h.len(), 4);
        assert_eq!(h.iter().map(|b| b.1).collect::<Vec<_>>(), vec![2, 2, 0, 1]);
        assert!((h[3].0 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn contact_record_forms() {
        let r: ContactRecord = serde_json::from_str(r#"{"id":"a","sequence":"ACDE","contacts":[[0,3]]}"#).unwrap();
        let (s, m) = r.resolve().unwrap();
        assert_eq!((s.len(), m.pairs()), (4, vec![(0, 3)]));
        let r: ContactRecord = serde_json::from_str(
            r#"{"id":"b","sequence":"ACD","distances":[[0,5,9],[5,0,12],[9,12,0]]}"#,
        )
        .unwrap();
        assert_eq!(r.resolve().unwrap().1.pairs(), vec![(0, 1)]);
        let bad: ContactRecord = serde_json::from_str(r#"{"id":"c","sequence":"ACD","distances":[[0,1],[1,0]]}"#).unwrap();
        assert!(matches!(bad.resolve(), Err(EvalError::Length { .. })));
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(p in prop::collection::vec(0.01f64..1.0, 2..6), q in prop::collection::vec(0.01f64..1.0, 2..6), j in prop::collection::vec(0.0f64..1.0, 36)) {
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
            let (p, q) = (d(&norm(&p)), d(&norm(&q)));
            let jl = p.len() * q.len();
            let mut js = j[..jl].to_vec();
            js[0] += 0.1;
            let joint = JointDist::new(p.len(), q.len(), norm(&js)).unwrap();
            prop_assert!(kl_product_vs_joint(&p, &q, &joint).unwrap() >= -1e-9);
        }

        #[test]
        fn precision_monotone_in_top_set(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = 40;
            let raw: Vec<f64> = (0..l * l).map(|_| rng.gen()).collect();
            let s = scores_from(l, |i, j| raw[i * l + j]);
            let contacts: Vec<_> = all_pairs(l).into_iter().filter(|_| rng.gen::<f64>() < 0.1).collect();
            let truth = ContactMap::from_pairs(l, &contacts).unwrap();
            let f = RangeFilter::MEDIUM_LONG;
            let p = precision_at_l5(&s, &truth, f).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            let top = rank_pairs(&s, f)[..l / 5].to_vec();
            let mut more = contacts.clone();
            more.push(top[rng.gen_range(0..top.len())]);
            let p2 = precision_at_l5(&s, &ContactMap::from_pairs(l, &more).unwrap(), f).unwrap();
            prop_assert!(p2 >= p);
        }
    }
}
