//! Central finite-difference check of the full model's analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{Forward, Model, ModelConfig, ModelError};
use crate::heads::{batch_loss, HeadSelection, LossCounters};
use crate::masking::{collate_batch, derive_seed, sample_mask, MaskedBatch, MaskingConfig};
use crate::numcore::Graph;
use crate::seqio::SequenceRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so gradients that are zero
    /// up to rounding do not divide by ~0.
    pub denom_floor: f64,
    pub seed: u64,
    pub n_sequences: usize,
    pub seq_len: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-4,
            denom_floor: 1e-6,
            seed: 11,
            n_sequences: 3,
            seq_len: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub size: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub worst_param: String,
    pub worst_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Fixed batch of random sequences with fixed masks.
pub fn probe_batch(cfg: &GradCheckConfig, masking: &MaskingConfig) -> Result<MaskedBatch, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let masked: Vec<_> = (0..cfg.n_sequences)
        .map(|s| {
            use rand::Rng;
            let len = cfg.seq_len - (s % 2);
            let residues = (0..len).map(|_| rng.gen_range(0..20u8)).collect();
            let rec = SequenceRecord::new(format!("g{s}"), residues).expect("valid residues");
            let mut mrng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, s as u64));
            sample_mask(&rec, masking, &mut mrng)
        })
        .collect();
    collate_batch(&masked, cfg.seq_len + 2).map_err(|e| ModelError::Config(e.to_string()))
}

fn loss_of(model: &Model<f64>, batch: &MaskedBatch) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let mut fwd = Forward::<f64, ChaCha8Rng>::eval(model);
    let out = batch_loss(&mut fwd, &mut g, batch, HeadSelection::Objective, &mut LossCounters::default())?;
    Ok(g.scalar(out.total))
}

/// Compare every parameter element's analytic gradient with a central
/// difference of the combined loss, in 64-bit arithmetic with dropout off.
pub fn check_model(model: &Model<f64>, batch: &MaskedBatch, cfg: &GradCheckConfig) -> Result<GradCheckReport, ModelError> {
    let mut g = Graph::new();
    let mut fwd = Forward::<f64, ChaCha8Rng>::train(model, None);
    let out = batch_loss(&mut fwd, &mut g, batch, HeadSelection::Objective, &mut LossCounters::default())?;
    g.backward(out.total)?;
    let mut analytic: Vec<Option<Vec<f64>>> = vec![None; model.params.len()];
    for (id, grad) in g.param_grads() {
        analytic[id.index()] = Some(grad.to_vec());
    }

    let mut probe = model.clone();
    let mut params = Vec::with_capacity(model.params.len());
    for (id, name, t) in model.params.iter() {
        let zeros = vec![0.0; t.len()];
        let an = analytic[id.index()].as_deref().unwrap_or(&zeros);
        let mut worst = 0.0f64;
        for e in 0..t.len() {
            let orig = t.data()[e];
            probe.params.get_mut(id).data_mut()[e] = orig + cfg.step;
            let up = loss_of(&probe, batch)?;
            probe.params.get_mut(id).data_mut()[e] = orig - cfg.step;
            let down = loss_of(&probe, batch)?;
            probe.params.get_mut(id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            worst = worst.max(relative_error(an[e], numeric, cfg.denom_floor));
        }
        params.push(ParamCheck {
            name: name.to_string(),
            size: t.len(),
            max_rel_error: worst,
            max_abs_grad: an.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        });
    }
    let worst = params
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("model has parameters");
    Ok(GradCheckReport {
        worst_param: worst.name.clone(),
        worst_rel_error: worst.max_rel_error,
        tolerance: cfg.tolerance,
        passed: worst.max_rel_error < cfg.tolerance,
        params,
    })
}

/// Gradient check on a freshly initialized model with the given architecture.
pub fn run(model_cfg: &ModelConfig, masking: &MaskingConfig, cfg: &GradCheckConfig) -> Result<GradCheckReport, ModelError> {
    let model = Model::<f64>::init(
        ModelConfig {
            dropout: 0.0,
            ..model_cfg.clone()
        },
        &mut ChaCha8Rng::seed_from_u64(cfg.seed),
    )?;
    let batch = probe_batch(cfg, masking)?;
    check_model(&model, &batch, cfg)
}
