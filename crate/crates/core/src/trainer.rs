//! Adam with linear warmup and linear decay, global-norm clipping,
//! checkpoints, and validation metric logging.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoder::{Forward, Model, ModelConfig, ModelError};
use crate::heads::{argmax, batch_loss, delta_acc, predict, HeadSelection, LossCounters};
use crate::masking::{collate_batch, derive_seed, sample_mask, MaskError, MaskedSequence, MaskingConfig};
use crate::numcore::{Element, Graph, ParamStore, Tensor};
use crate::seqio::{SequenceRecord, NUM_PAIRS, NUM_RESIDUES, VOCAB_VERSION};

pub const CHECKPOINT_FORMAT: u32 = 1;
const CHECKPOINT_MAGIC: &str = "PMLM-CHECKPOINT";

const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_MASK: u64 = 3;
const STREAM_DROPOUT: u64 = 4;
const STREAM_VALID: u64 = 5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: u64, what: String },
    #[error("checkpoint version mismatch: {what} is {found}, expected {expected}")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("truncated checkpoint: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    /// Sequences per step.
    pub batch_size: usize,
    pub seed: u64,
    /// Steps between validation passes; the final step is always validated.
    pub validate_every: u64,
    /// Fraction of sequences held out for validation, chosen by id hash.
    pub valid_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 3e-4,
            warmup_steps: 100,
            total_steps: 2000,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            batch_size: 32,
            seed: 0,
            validate_every: 200,
            valid_fraction: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.warmup_steps >= self.total_steps {
            return bad("warmup_steps must be below total_steps");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(self.peak_lr >= 0.0) || !self.peak_lr.is_finite() {
            return bad("peak_lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.validate_every == 0 {
            return bad("validate_every must be positive");
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return bad("valid_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    /// Passes over a training split of `n_train` sequences implied by `total_steps`.
    pub fn epochs(&self, n_train: usize) -> f64 {
        self.total_steps as f64 * self.batch_size as f64 / n_train.max(1) as f64
    }
}

/// Linear ramp from 0 to the peak over the warmup, then linear decay to 0 at
/// `total_steps`; 0 beyond.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let (w, t) = (cfg.warmup_steps as f64, cfg.total_steps as f64);
    let s = step as f64;
    if step < cfg.warmup_steps {
        cfg.peak_lr * s / w
    } else if step >= cfg.total_steps {
        0.0
    } else {
        cfg.peak_lr * (t - s) / (t - w)
    }
}

/// Scale all gradients by `clip_norm / norm` when their global L2 norm
/// exceeds `clip_norm`. Returns the pre-clip norm.
pub fn clip_global_norm<T: Element>(grads: &mut [Vec<T>], clip_norm: f64) -> Result<f64, TrainError> {
    let mut sq = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        for &v in g {
            let v = v.as_f64();
            if !v.is_finite() {
                return Err(TrainError::NonFinite {
                    step: 0,
                    what: format!("gradient in array {k}"),
                });
            }
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > clip_norm {
        let f = T::of(clip_norm / norm);
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v = *v * f);
        }
    }
    Ok(norm)
}

/// Optimizer progress. Random streams are derived from the seed and the step
/// counter, so the counter is the whole RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub best_valid_mlm: Option<f64>,
    pub best_valid_pmlm: Option<f64>,
}

impl TrainState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        TrainState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            best_valid_mlm: None,
            best_valid_pmlm: None,
        }
    }

    fn check_shapes(&self, params: &ParamStore<f32>) -> Result<(), TrainError> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(TrainError::Format("optimizer moments do not match parameter count".into()));
        }
        for id in params.ids() {
            let n = params.get(id).len();
            if self.m[id.index()].len() != n || self.v[id.index()].len() != n {
                return Err(TrainError::Format(format!(
                    "optimizer moments for {} do not match its shape",
                    params.name(id)
                )));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update. Arrays whose gradient is `None` are left
/// untouched, moments included.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &[Option<Vec<f32>>],
    state: &mut TrainState,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for id in params.ids().collect::<Vec<_>>() {
        let Some(g) = grads[id.index()].as_ref() else { continue };
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        let p = params.get_mut(id).data_mut();
        for e in 0..p.len() {
            let ge = g[e] as f64;
            let me = b1 * m[e] as f64 + (1.0 - b1) * ge;
            let ve = b2 * v[e] as f64 + (1.0 - b2) * ge * ge;
            m[e] = me as f32;
            v[e] = ve as f32;
            let update = lr * (me / c1) / ((ve / c2).sqrt() + cfg.adam_eps);
            p[e] = (p[e] as f64 - update) as f32;
        }
    }
}

/// Training and validation sequences.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<SequenceRecord>,
    pub valid: Vec<SequenceRecord>,
}

/// Whether an id falls in the held-out fraction, from a hash of the id alone.
pub fn is_held_out(id: &str, fraction: f64) -> bool {
    let digest = Sha256::digest(id.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    (u64::from_be_bytes(head) as f64 / u64::MAX as f64) < fraction
}

impl Dataset {
    pub fn split(records: Vec<SequenceRecord>, valid_fraction: f64) -> Self {
        let (valid, train) = records.into_iter().partition(|r| is_held_out(&r.id, valid_fraction));
        Dataset { train, valid }
    }
}

/// Held-out losses and accuracies. Losses are means over all labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub mlm: f64,
    pub pmlm: f64,
    pub acc_mlm: f64,
    pub acc_pmlm: f64,
    pub delta_acc: f64,
    pub n_tokens: usize,
    pub n_pairs: usize,
}

/// Fixed masks for the `index`-th validation sequence under `seed`.
pub fn validation_masks(seqs: &[SequenceRecord], masking: &MaskingConfig, seed: u64) -> Vec<MaskedSequence> {
    seqs.iter()
        .enumerate()
        .map(|(k, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_VALID, k as u64));
            sample_mask(s, masking, &mut rng)
        })
        .collect()
}

/// Both heads' losses and accuracies over pre-masked sequences, dropout off.
pub fn evaluate<T: Element>(
    model: &Model<T>,
    masked: &[MaskedSequence],
    batch_size: usize,
) -> Result<ValidationMetrics, TrainError> {
    let width = model.config.max_len;
    let (mut nll_t, mut hit_t, mut n_t) = (0.0, 0usize, 0usize);
    let (mut nll_p, mut hit_p, mut n_p) = (0.0, 0usize, 0usize);
    for chunk in masked.chunks(batch_size.max(1)) {
        let batch = collate_batch(chunk, width)?;
        if batch.token_labels.is_empty() {
            continue;
        }
        let pred = predict(model, &batch)?;
        for (row, &lab) in pred.token_probs.chunks(NUM_RESIDUES).zip(&batch.token_labels) {
            nll_t -= row[lab].max(f64::MIN_POSITIVE).ln();
            hit_t += (argmax(row) == lab) as usize;
            n_t += 1;
        }
        for (row, &lab) in pred.pair_probs.chunks(NUM_PAIRS).zip(&batch.pair_labels) {
            nll_p -= row[lab].max(f64::MIN_POSITIVE).ln();
            hit_p += (argmax(row) == lab) as usize;
            n_p += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    let acc_mlm = mean(hit_t as f64, n_t);
    let acc_pmlm = mean(hit_p as f64, n_p);
    Ok(ValidationMetrics {
        mlm: mean(nll_t, n_t),
        pmlm: mean(nll_p, n_p),
        acc_mlm,
        acc_pmlm,
        delta_acc: delta_acc(acc_pmlm, acc_mlm),
        n_tokens: n_t,
        n_pairs: n_p,
    })
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Header {
        version: String,
        config_hash: String,
        seed: u64,
        n_train: usize,
        n_valid: usize,
    },
    Validation {
        step: u64,
        lr: f64,
        epoch: f64,
        /// Mean training objective since the previous record.
        train_loss: f64,
        #[serde(flatten)]
        metrics: ValidationMetrics,
    },
}

/// SHA-256 over the canonical JSON of the configurations.
pub fn config_hash(model: &ModelConfig, masking: &MaskingConfig, train: &TrainConfig) -> String {
    let v = serde_json::json!({ "model": model, "masking": masking, "train": train });
    let digest = Sha256::digest(v.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Where a run writes its artifacts.
#[derive(Default)]
pub struct RunOutputs<'a> {
    pub log: Option<&'a mut dyn Write>,
    /// Rewritten after every validation pass, and on abort with the last
    /// parameters that produced a finite loss.
    pub checkpoint: Option<&'a Path>,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub state: TrainState,
    pub log: Vec<LogRecord>,
    pub counters: LossCounters,
}

/// Initialize a model from `train.seed` and train it.
pub fn pretrain(
    data: &Dataset,
    model_cfg: &ModelConfig,
    masking: &MaskingConfig,
    cfg: &TrainConfig,
    out: RunOutputs<'_>,
) -> Result<TrainOutcome, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_INIT, 0));
    let model = Model::<f32>::init(model_cfg.clone(), &mut rng)?;
    let state = TrainState::new(&model.params);
    train_model(data, model, state, masking, cfg, out)
}

/// Continue training `model` from `state` until `cfg.total_steps`.
pub fn train_model(
    data: &Dataset,
    mut model: Model<f32>,
    mut state: TrainState,
    masking: &MaskingConfig,
    cfg: &TrainConfig,
    mut out: RunOutputs<'_>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    masking.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if data.valid.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    state.check_shapes(&model.params)?;

    let mut log = Vec::new();
    let mut emit = |rec: LogRecord, sink: &mut Option<&mut dyn Write>| -> Result<(), TrainError> {
        if let Some(w) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        log.push(rec);
        Ok(())
    };
    emit(
        LogRecord::Header {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash(&model.config, masking, cfg),
            seed: cfg.seed,
            n_train: data.train.len(),
            n_valid: data.valid.len(),
        },
        &mut out.log,
    )?;

    let valid_masks = validation_masks(&data.valid, masking, cfg.seed);
    let n = data.train.len();
    let per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = u64::MAX;
    let mut counters = LossCounters::default();
    let (mut loss_sum, mut loss_n) = (0.0f64, 0u64);

    while state.step < cfg.total_steps {
        let step = state.step;
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_ORDER, epoch)));
            order_epoch = epoch;
        }
        let start = (step % per_epoch) as usize * cfg.batch_size;
        let masked: Vec<MaskedSequence> = order[start..(start + cfg.batch_size).min(n)]
            .iter()
            .enumerate()
            .map(|(k, &s)| {
                let idx = step * cfg.batch_size as u64 + k as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_MASK, idx));
                sample_mask(&data.train[s], masking, &mut rng)
            })
            .collect();
        let batch = collate_batch(&masked, model.config.max_len)?;

        let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_DROPOUT, step));
        let mut g = Graph::<f32>::new();
        let loss = {
            let mut fwd = Forward::train(&model, Some(&mut drop_rng));
            batch_loss(&mut fwd, &mut g, &batch, HeadSelection::Objective, &mut counters)
        };
        let loss = match loss {
            Ok(l) => l,
            Err(ModelError::NonFinite(what)) => return abort(&model, &state, masking, cfg, &out, step, what),
            Err(ModelError::Num(e @ crate::numcore::NumError::NonFinite { .. })) => {
                return abort(&model, &state, masking, cfg, &out, step, e.to_string())
            }
            Err(e) => return Err(e.into()),
        };
        let total = g.scalar(loss.total).as_f64();
        if !total.is_finite() {
            return abort(&model, &state, masking, cfg, &out, step, "loss".into());
        }
        g.backward(loss.total).map_err(ModelError::from)?;

        let mut present = vec![false; model.params.len()];
        let mut flat: Vec<Vec<f32>> = Vec::new();
        for (id, grad) in g.param_grads() {
            present[id.index()] = true;
            flat.push(grad.to_vec());
        }
        drop(g);
        if let Err(TrainError::NonFinite { what, .. }) = clip_global_norm(&mut flat, cfg.clip_norm) {
            return abort(&model, &state, masking, cfg, &out, step, what);
        }
        let mut flat = flat.into_iter();
        let grads: Vec<Option<Vec<f32>>> = present
            .iter()
            .map(|&p| if p { flat.next() } else { None })
            .collect();

        let lr = lr_at(step + 1, cfg);
        adam_step(&mut model.params, &grads, &mut state, lr, cfg);
        loss_sum += total;
        loss_n += 1;

        if state.step % cfg.validate_every == 0 || state.step == cfg.total_steps {
            let metrics = evaluate(&model, &valid_masks, cfg.batch_size)?;
            let better = |best: &mut Option<f64>, v: f64| {
                if best.map_or(true, |b| v < b) {
                    *best = Some(v);
                }
            };
            better(&mut state.best_valid_mlm, metrics.mlm);
            better(&mut state.best_valid_pmlm, metrics.pmlm);
            emit(
                LogRecord::Validation {
                    step: state.step,
                    lr,
                    epoch: cfg.epochs(n) * state.step as f64 / cfg.total_steps as f64,
                    train_loss: loss_sum / loss_n as f64,
                    metrics,
                },
                &mut out.log,
            )?;
            loss_sum = 0.0;
            loss_n = 0;
            if let Some(path) = out.checkpoint {
                save_checkpoint(&model, Some(&state), Some(masking), Some(cfg), path)?;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        state,
        log,
        counters,
    })
}

fn abort(
    model: &Model<f32>,
    state: &TrainState,
    masking: &MaskingConfig,
    cfg: &TrainConfig,
    out: &RunOutputs<'_>,
    step: u64,
    what: String,
) -> Result<TrainOutcome, TrainError> {
    log::error!("non-finite {what} at step {step}; keeping parameters from step {}", state.step);
    if let Some(path) = out.checkpoint {
        save_checkpoint(model, Some(state), Some(masking), Some(cfg), path)?;
    }
    Err(TrainError::NonFinite { step, what })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    vocab_version: u32,
    crate_version: String,
    model: ModelConfig,
    masking: Option<MaskingConfig>,
    train: Option<TrainConfig>,
    /// Present when both the masking and training configs are.
    #[serde(default)]
    config_hash: Option<String>,
    step: Option<u64>,
    best_valid_mlm: Option<f64>,
    best_valid_pmlm: Option<f64>,
    /// Offsets are in bytes from the start of the data section.
    arrays: Vec<ArrayEntry>,
}

/// Loaded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub state: Option<TrainState>,
    pub masking: Option<MaskingConfig>,
    pub train: Option<TrainConfig>,
}

const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

/// Layout: `PMLM-CHECKPOINT <format>\n`, `manifest <n>\n`, `n` bytes of JSON
/// manifest, then the arrays as little-endian f32 in manifest order. Written
/// to a sibling temporary file and renamed into place.
pub fn save_checkpoint(
    model: &Model<f32>,
    state: Option<&TrainState>,
    masking: Option<&MaskingConfig>,
    train: Option<&TrainConfig>,
    path: &Path,
) -> Result<(), TrainError> {
    let mut named: Vec<(String, &[usize], &[f32])> = Vec::new();
    for (_, name, t) in model.params.iter() {
        named.push((name.to_string(), t.shape(), t.data()));
    }
    if let Some(s) = state {
        for (prefix, moments) in [(MOMENT_M, &s.m), (MOMENT_V, &s.v)] {
            for (id, name, t) in model.params.iter() {
                named.push((format!("{prefix}{name}"), t.shape(), &moments[id.index()]));
            }
        }
    }
    let mut arrays = Vec::with_capacity(named.len());
    let mut offset = 0usize;
    for (name, shape, values) in &named {
        arrays.push(ArrayEntry {
            name: name.clone(),
            shape: shape.to_vec(),
            offset,
            len: values.len(),
        });
        offset += values.len() * 4;
    }
    let manifest = Manifest {
        vocab_version: VOCAB_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        model: model.config.clone(),
        masking: masking.cloned(),
        train: train.cloned(),
        config_hash: masking.zip(train).map(|(m, t)| config_hash(&model.config, m, t)),
        step: state.map(|s| s.step),
        best_valid_mlm: state.and_then(|s| s.best_valid_mlm),
        best_valid_pmlm: state.and_then(|s| s.best_valid_pmlm),
        arrays,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    let mut bytes = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_FORMAT}\nmanifest {}\n{json}", json.len()).into_bytes();
    bytes.reserve(offset);
    for (_, _, values) in &named {
        for v in values.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn header_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str, TrainError> {
    let rest = &bytes[*pos..];
    let end = rest.iter().position(|&b| b == b'\n').ok_or(TrainError::Truncated {
        expected: *pos + rest.len() + 1,
        found: bytes.len(),
    })?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| TrainError::Format("header is not UTF-8".into()))
}

/// Read a checkpoint; nothing is returned unless every array is present.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = fs::read(path)?;
    parse_checkpoint(&bytes, None)
}

/// Read a checkpoint, requiring its arrays to fit `expected`.
pub fn load_checkpoint_into(path: &Path, expected: &ModelConfig) -> Result<Checkpoint, TrainError> {
    let bytes = fs::read(path)?;
    parse_checkpoint(&bytes, Some(expected))
}

fn parse_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint, TrainError> {
    let mut pos = 0;
    let magic = header_line(bytes, &mut pos)?;
    let format = magic
        .strip_prefix(CHECKPOINT_MAGIC)
        .and_then(|r| r.trim().parse::<u32>().ok())
        .ok_or_else(|| TrainError::Format("missing checkpoint magic".into()))?;
    if format != CHECKPOINT_FORMAT {
        return Err(TrainError::Version {
            what: "checkpoint format",
            found: format,
            expected: CHECKPOINT_FORMAT,
        });
    }
    let n_manifest: usize = header_line(bytes, &mut pos)?
        .strip_prefix("manifest ")
        .and_then(|r| r.parse().ok())
        .ok_or_else(|| TrainError::Format("missing manifest length".into()))?;
    if bytes.len() < pos + n_manifest {
        return Err(TrainError::Truncated {
            expected: pos + n_manifest,
            found: bytes.len(),
        });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[pos..pos + n_manifest])?;
    pos += n_manifest;
    if manifest.vocab_version != VOCAB_VERSION {
        return Err(TrainError::Version {
            what: "vocabulary version",
            found: manifest.vocab_version,
            expected: VOCAB_VERSION,
        });
    }
    let data_len: usize = manifest.arrays.iter().map(|a| a.len * 4).sum();
    if bytes.len() < pos + data_len {
        return Err(TrainError::Truncated {
            expected: pos + data_len,
            found: bytes.len(),
        });
    }
    if bytes.len() > pos + data_len {
        return Err(TrainError::Format(format!("{} trailing bytes", bytes.len() - pos - data_len)));
    }
    let data = &bytes[pos..];

    let mut params = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for a in &manifest.arrays {
        if a.shape.iter().product::<usize>() != a.len || a.offset + a.len * 4 > data.len() {
            return Err(TrainError::Format(format!("array {} has inconsistent extent", a.name)));
        }
        let values: Vec<f32> = data[a.offset..a.offset + a.len * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if a.name.starts_with(MOMENT_M) {
            m.push(values);
        } else if a.name.starts_with(MOMENT_V) {
            v.push(values);
        } else {
            params.insert(&a.name, Tensor::new(a.shape.clone(), values).map_err(ModelError::from)?);
        }
    }
    let config = expected.cloned().unwrap_or_else(|| manifest.model.clone());
    let model = Model::from_params(config, params)?;
    let state = match manifest.step {
        Some(step) => {
            let s = TrainState {
                step,
                m,
                v,
                best_valid_mlm: manifest.best_valid_mlm,
                best_valid_pmlm: manifest.best_valid_pmlm,
            };
            s.check_shapes(&model.params)?;
            Some(s)
        }
        None => None,
    };
    Ok(Checkpoint {
        model,
        state,
        masking: manifest.masking,
        train: manifest.train,
    })
}
