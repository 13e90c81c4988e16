//! Pre-norm Transformer encoder over framed residue tokens.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{Element, Graph, NumError, ParamId, ParamStore, Tensor, Var};
use crate::seqio::{NUM_PAIRS, NUM_RESIDUES, VOCAB_SIZE};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} is missing")]
    Missing(String),
    #[error("non-finite activation after {0}")]
    NonFinite(String),
    #[error("token id {id} at position {pos} is outside the vocabulary")]
    BadToken { pos: usize, id: u8 },
    #[error("{0}: no labels in batch")]
    NoLabels(&'static str),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Longest framed input (residues + BOS + EOS).
    pub max_len: usize,
    pub dropout: f64,
    /// Width of the pair head's hidden layer.
    pub pair_dim: usize,
    /// Weight of the pair loss in the combined objective.
    pub lambda: f64,
    /// Train on pair labels alone, diagonal included, with no token head.
    pub pmlm_only_with_diagonal: bool,
    pub token_vocab: usize,
    pub residue_vocab: usize,
    pub pair_vocab: usize,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            hidden_dim: 64,
            ffn_dim: 256,
            n_layers: 4,
            n_heads: 4,
            max_len: 128,
            dropout: 0.1,
            pair_dim: 64,
            lambda: 1.0,
            pmlm_only_with_diagonal: false,
            token_vocab: VOCAB_SIZE,
            residue_vocab: NUM_RESIDUES,
            pair_vocab: NUM_PAIRS,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }

    /// Small model for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            hidden_dim: 16,
            ffn_dim: 32,
            n_layers: 2,
            n_heads: 2,
            max_len: 16,
            dropout: 0.0,
            pair_dim: 16,
            init_std: 0.1,
            ..Self::desk()
        }
    }

    pub fn base() -> Self {
        ModelConfig {
            hidden_dim: 768,
            ffn_dim: 3072,
            n_layers: 12,
            n_heads: 12,
            max_len: 512,
            pair_dim: 768,
            ..Self::desk()
        }
    }

    pub fn large() -> Self {
        ModelConfig {
            n_layers: 34,
            max_len: 1024,
            ..Self::base()
        }
    }

    /// Feed-forward width and head count are not published for this size;
    /// 4x hidden and 20 heads follow the usual ratios.
    pub fn xl() -> Self {
        ModelConfig {
            hidden_dim: 1280,
            ffn_dim: 5120,
            n_layers: 36,
            n_heads: 20,
            max_len: 1024,
            pair_dim: 1280,
            pmlm_only_with_diagonal: true,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "tiny" => Some(Self::tiny()),
            "base" => Some(Self::base()),
            "large" => Some(Self::large()),
            "xl" => Some(Self::xl()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.hidden_dim == 0 || self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return bad(format!(
                "hidden_dim {} must be a positive multiple of n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        if self.hidden_dim % 2 != 0 {
            return bad("hidden_dim must be even for sinusoidal positions".into());
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return bad(format!("lambda {} must be >= 0", self.lambda));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_len < 3 {
            return bad("max_len must leave room for BOS, EOS and a residue".into());
        }
        if self.token_vocab != VOCAB_SIZE
            || self.residue_vocab != NUM_RESIDUES
            || self.pair_vocab != NUM_PAIRS
        {
            return bad(format!(
                "vocabulary sizes must be {VOCAB_SIZE}/{NUM_RESIDUES}/{NUM_PAIRS}"
            ));
        }
        if self.ffn_dim == 0 || self.pair_dim == 0 {
            return bad("ffn_dim and pair_dim must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Every learnable array of the network, in storage order.
pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.hidden_dim;
    let mut v = vec![("embed.tokens".to_string(), vec![cfg.token_vocab, d], Init::Normal)];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        v.push((p("ln1.gain"), vec![d], Init::Ones));
        v.push((p("ln1.bias"), vec![d], Init::Zeros));
        for proj in ["q", "k", "v", "o"] {
            v.push((p(&format!("attn.{proj}.weight")), vec![d, d], Init::Normal));
            v.push((p(&format!("attn.{proj}.bias")), vec![d], Init::Zeros));
        }
        v.push((p("ln2.gain"), vec![d], Init::Ones));
        v.push((p("ln2.bias"), vec![d], Init::Zeros));
        v.push((p("ffn.in.weight"), vec![d, cfg.ffn_dim], Init::Normal));
        v.push((p("ffn.in.bias"), vec![cfg.ffn_dim], Init::Zeros));
        v.push((p("ffn.out.weight"), vec![cfg.ffn_dim, d], Init::Normal));
        v.push((p("ffn.out.bias"), vec![d], Init::Zeros));
    }
    v.push(("final_ln.gain".into(), vec![d], Init::Ones));
    v.push(("final_ln.bias".into(), vec![d], Init::Zeros));
    v.push(("token_head.dense.weight".into(), vec![d, d], Init::Normal));
    v.push(("token_head.dense.bias".into(), vec![d], Init::Zeros));
    v.push(("token_head.out.weight".into(), vec![d, cfg.residue_vocab], Init::Normal));
    v.push(("token_head.out.bias".into(), vec![cfg.residue_vocab], Init::Zeros));
    v.push(("pair_head.dense.weight".into(), vec![2 * d, cfg.pair_dim], Init::Normal));
    v.push(("pair_head.dense.bias".into(), vec![cfg.pair_dim], Init::Zeros));
    v.push(("pair_head.out.weight".into(), vec![cfg.pair_dim, cfg.pair_vocab], Init::Normal));
    v.push(("pair_head.out.bias".into(), vec![cfg.pair_vocab], Init::Zeros));
    v
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayerIds {
    pub ln1: (ParamId, ParamId),
    pub q: (ParamId, ParamId),
    pub k: (ParamId, ParamId),
    pub v: (ParamId, ParamId),
    pub o: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub ffn_in: (ParamId, ParamId),
    pub ffn_out: (ParamId, ParamId),
}

/// Resolved parameter ids for one [`ModelConfig`].
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub embed: ParamId,
    pub layers: Vec<LayerIds>,
    pub final_ln: (ParamId, ParamId),
    pub token_dense: (ParamId, ParamId),
    pub token_out: (ParamId, ParamId),
    pub pair_dense: (ParamId, ParamId),
    pub pair_out: (ParamId, ParamId),
}

impl Layout {
    /// Check that `store` holds every array `cfg` needs with the right shape;
    /// the first offending array is named in the error.
    pub fn resolve<T: Element>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<Self, ModelError> {
        for (name, shape, _) in param_specs(cfg) {
            let t = store.by_name(&name).ok_or_else(|| ModelError::Missing(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ShapeMismatch {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        let id = |n: &str| store.id(n).expect("checked above");
        let pair = |p: &str| (id(&format!("{p}.weight")), id(&format!("{p}.bias")));
        let ln = |p: &str| (id(&format!("{p}.gain")), id(&format!("{p}.bias")));
        let layers = (0..cfg.n_layers)
            .map(|l| LayerIds {
                ln1: ln(&format!("layers.{l}.ln1")),
                q: pair(&format!("layers.{l}.attn.q")),
                k: pair(&format!("layers.{l}.attn.k")),
                v: pair(&format!("layers.{l}.attn.v")),
                o: pair(&format!("layers.{l}.attn.o")),
                ln2: ln(&format!("layers.{l}.ln2")),
                ffn_in: pair(&format!("layers.{l}.ffn.in")),
                ffn_out: pair(&format!("layers.{l}.ffn.out")),
            })
            .collect();
        Ok(Layout {
            embed: id("embed.tokens"),
            layers,
            final_ln: ln("final_ln"),
            token_dense: pair("token_head.dense"),
            token_out: pair("token_head.out"),
            pair_dense: pair("pair_head.dense"),
            pair_out: pair("pair_head.out"),
        })
    }
}

/// Encoder and both prediction heads with their parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub(crate) layout: Layout,
}

impl<T: Element> Model<T> {
    /// Normal(0, init_std) weights, zero biases, unit layer-norm gains.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let normal = Normal::new(0.0, config.init_std).map_err(|e| ModelError::Config(e.to_string()))?;
        let mut params = ParamStore::new();
        for (name, shape, init) in param_specs(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Normal => (0..n).map(|_| T::of(normal.sample(rng))).collect(),
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(Model {
            config,
            params,
            layout,
        })
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Ids of the pair head's arrays.
    pub fn pair_head_ids(&self) -> [ParamId; 4] {
        let l = &self.layout;
        [l.pair_dense.0, l.pair_dense.1, l.pair_out.0, l.pair_out.1]
    }

    pub fn token_head_ids(&self) -> [ParamId; 4] {
        let l = &self.layout;
        [l.token_dense.0, l.token_dense.1, l.token_out.0, l.token_out.1]
    }
}

/// Whether a forward pass records parameter gradients, and how dropout is drawn.
pub struct Forward<'a, T, R> {
    pub model: &'a Model<T>,
    pub trainable: bool,
    pub dropout: Option<&'a mut R>,
}

impl<'a, T: Element, R: Rng> Forward<'a, T, R> {
    pub fn eval(model: &'a Model<T>) -> Self {
        Forward {
            model,
            trainable: false,
            dropout: None,
        }
    }

    pub fn train(model: &'a Model<T>, dropout: Option<&'a mut R>) -> Self {
        Forward {
            model,
            trainable: true,
            dropout,
        }
    }

    pub(crate) fn p(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        if self.trainable {
            g.param(&self.model.params, id)
        } else {
            g.frozen_param(&self.model.params, id)
        }
    }

    pub(crate) fn linear(&self, g: &mut Graph<T>, x: Var, wb: (ParamId, ParamId)) -> Result<Var, NumError> {
        let w = self.p(g, wb.0);
        let b = self.p(g, wb.1);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    pub(crate) fn maybe_dropout(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var, NumError> {
        let rate = self.model.config.dropout;
        match self.dropout.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let keep: Vec<bool> = (0..g.value(x).len()).map(|_| rng.gen::<f64>() >= rate).collect();
                g.dropout(x, &keep, rate)
            }
            _ => Ok(x),
        }
    }
}

/// Fixed sinusoidal position table, `[max_len, d]`.
pub fn sinusoidal_positions(max_len: usize, d: usize) -> Result<Vec<f64>, ModelError> {
    if d % 2 != 0 {
        return Err(ModelError::Config(format!("positional width {d} must be even")));
    }
    let mut out = vec![0.0; max_len * d];
    for p in 0..max_len {
        for k in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
            out[p * d + 2 * k] = angle.sin();
            out[p * d + 2 * k + 1] = angle.cos();
        }
    }
    Ok(out)
}

/// Encoder output: final hidden states `[batch * width, d]` plus the
/// attention probabilities of each layer (`[batch * heads, width, width]`).
pub struct Encoded {
    pub hidden: Var,
    pub attention: Vec<Var>,
}

/// Run the encoder over a padded batch. `attention_mask[t]` is false for PAD.
pub fn encode<T: Element, R: Rng>(
    fwd: &mut Forward<'_, T, R>,
    g: &mut Graph<T>,
    input_ids: &[u8],
    attention_mask: &[bool],
    batch: usize,
    width: usize,
) -> Result<Encoded, ModelError> {
    let model: &Model<T> = fwd.model;
    let cfg = &model.config;
    let layout = &model.layout;
    let (d, h) = (cfg.hidden_dim, cfg.n_heads);
    let dh = cfg.head_dim();
    if input_ids.len() != batch * width || attention_mask.len() != batch * width {
        return Err(ModelError::Config(format!(
            "batch {batch} x width {width} does not match {} ids / {} mask entries",
            input_ids.len(),
            attention_mask.len()
        )));
    }
    if width > cfg.max_len {
        return Err(ModelError::Config(format!("width {width} exceeds max_len {}", cfg.max_len)));
    }
    if let Some(pos) = input_ids.iter().position(|&t| t as usize >= cfg.token_vocab) {
        return Err(ModelError::BadToken {
            pos,
            id: input_ids[pos],
        });
    }

    let rows: Vec<usize> = input_ids.iter().map(|&t| t as usize).collect();
    let embed = fwd.p(g, layout.embed);
    let tok = g.gather_rows(embed, &rows)?;
    let tok = g.scale(tok, (d as f64).sqrt());
    let tok = g.reshape(tok, vec![batch, width, d])?;
    let pos = g.constant(Tensor::from_f64(vec![width, d], &sinusoidal_positions(width, d)?)?);
    let x = g.add(tok, pos)?;
    let x = g.reshape(x, vec![batch * width, d])?;
    let mut x = fwd.maybe_dropout(g, x)?;

    let mut bias = Vec::with_capacity(batch * h * width * width);
    for b in 0..batch {
        let keys = &attention_mask[b * width..(b + 1) * width];
        for _ in 0..h * width {
            bias.extend(keys.iter().map(|&k| if k { T::zero() } else { T::of(-1e9) }));
        }
    }
    let bias = g.constant(Tensor::new(vec![batch * h, width, width], bias)?);
    let scale = 1.0 / (dh as f64).sqrt();

    let mut attention = Vec::with_capacity(cfg.n_layers);
    for (l, ids) in layout.layers.iter().enumerate() {
        let (lg, lb) = (fwd.p(g, ids.ln1.0), fwd.p(g, ids.ln1.1));
        let hn = g.layer_norm(x, lg, lb, cfg.ln_eps)?;
        let split = |g: &mut Graph<T>, v: Var| -> Result<Var, NumError> {
            let v = g.reshape(v, vec![batch, width, h, dh])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            g.reshape(v, vec![batch * h, width, dh])
        };
        let q = fwd.linear(g, hn, ids.q)?;
        let q = split(g, q)?;
        let k = fwd.linear(g, hn, ids.k)?;
        let k = split(g, k)?;
        let v = fwd.linear(g, hn, ids.v)?;
        let v = split(g, v)?;
        let scores = g.matmul_ext(q, k, true)?;
        let scores = g.scale(scores, scale);
        let scores = g.add(scores, bias)?;
        let probs = g.softmax(scores)?;
        attention.push(probs);
        let ctx = g.matmul(probs, v)?;
        let ctx = g.reshape(ctx, vec![batch, h, width, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, vec![batch * width, d])?;
        let out = fwd.linear(g, ctx, ids.o)?;
        let out = fwd.maybe_dropout(g, out)?;
        x = g.add(x, out)?;

        let (lg, lb) = (fwd.p(g, ids.ln2.0), fwd.p(g, ids.ln2.1));
        let hn = g.layer_norm(x, lg, lb, cfg.ln_eps)?;
        let f = fwd.linear(g, hn, ids.ffn_in)?;
        let f = g.gelu(f);
        let f = fwd.linear(g, f, ids.ffn_out)?;
        let f = fwd.maybe_dropout(g, f)?;
        x = g.add(x, f)?;
        if !g.value(x).all_finite() {
            return Err(ModelError::NonFinite(format!("encoder layer {l}")));
        }
    }
    let (fg, fb) = (fwd.p(g, layout.final_ln.0), fwd.p(g, layout.final_ln.1));
    let hidden = g.layer_norm(x, fg, fb, cfg.ln_eps)?;
    Ok(Encoded { hidden, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqio::{BOS, EOS, PAD};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type Rng8 = ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            hidden_dim: 16,
            ffn_dim: 32,
            n_layers: 2,
            n_heads: 4,
            max_len: 16,
            dropout: 0.0,
            pair_dim: 16,
            ..ModelConfig::desk()
        }
    }

    fn run(model: &Model<f64>, ids: &[u8], mask: &[bool], batch: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let width = ids.len() / batch;
        let mut fwd = Forward::<f64, Rng8>::eval(model);
        let e = encode(&mut fwd, &mut g, ids, mask, batch, width).unwrap();
        let att = e.attention.iter().map(|&a| g.value(a).data().to_vec()).collect();
        (g.value(e.hidden).data().to_vec(), att)
    }

    #[test]
    fn sinusoid_examples() {
        let t = sinusoidal_positions(4, 8).unwrap();
        for k in 0..4 {
            assert_eq!(t[2 * k], 0.0);
            assert_eq!(t[2 * k + 1], 1.0);
        }
        assert!((t[8] - 1f64.sin()).abs() < 1e-12 && (t[9] - 1f64.cos()).abs() < 1e-12);
        assert!((t[8] - 0.8415).abs() < 1e-4 && (t[9] - 0.5403).abs() < 1e-4);
        assert!(t.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(sinusoidal_positions(4, 7).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig { n_heads: 5, ..ModelConfig::desk() }.validate().is_err());
        assert!(ModelConfig { lambda: -1.0, ..ModelConfig::desk() }.validate().is_err());
        for p in ["desk", "tiny", "base", "large", "xl"] {
            assert!(ModelConfig::preset(p).unwrap().validate().is_ok(), "{p}");
        }
    }

    #[test]
    fn single_token_shape() {
        let cfg = ModelConfig { n_layers: 1, ..small() };
        let m = Model::<f64>::init(cfg, &mut Rng8::seed_from_u64(0)).unwrap();
        let (h, _) = run(&m, &[3], &[true], 1);
        assert_eq!(h.len(), 16);
        assert!(h.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn padding_is_isolated_and_attention_normalized() {
        let m = Model::<f64>::init(small(), &mut Rng8::seed_from_u64(1)).unwrap();
        let ids = [BOS, 3, 7, 1, EOS, PAD, PAD, PAD];
        let mask = [true, true, true, true, true, false, false, false];
        let (h1, att) = run(&m, &ids, &mask, 1);
        let ids2 = [BOS, 3, 7, 1, EOS, PAD, 9, 12];
        let (h2, _) = run(&m, &ids2, &mask, 1);
        for (a, b) in h1[..5 * 16].iter().zip(&h2[..5 * 16]) {
            assert!((a - b).abs() < 1e-5);
        }
        for layer in &att {
            for row in layer.chunks(8) {
                let s: f64 = row[..5].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(row[5..].iter().all(|&p| p == 0.0));
            }
        }
    }

    #[test]
    fn batch_composition_invariance() {
        let m = Model::<f64>::init(small(), &mut Rng8::seed_from_u64(2)).unwrap();
        let a = [BOS, 3, 7, 1, EOS];
        let (alone, _) = run(&m, &a, &[true; 5], 1);
        let ids = [BOS, 3, 7, 1, EOS, PAD, PAD, BOS, 5, 5, 5, 5, 5, EOS, BOS, 3, 7, 1, EOS, PAD, PAD];
        let mask: Vec<bool> = ids.iter().map(|&t| t != PAD).collect();
        let (batched, _) = run(&m, &ids, &mask, 3);
        for t in 0..5 {
            for c in 0..16 {
                assert!((alone[t * 16 + c] - batched[t * 16 + c]).abs() < 1e-5);
                // identical sequences in one batch give identical outputs
                assert!((batched[t * 16 + c] - batched[(14 + t) * 16 + c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bad_token_rejected() {
        let m = Model::<f64>::init(small(), &mut Rng8::seed_from_u64(0)).unwrap();
        let mut g = Graph::new();
        let mut fwd = Forward::<f64, Rng8>::eval(&m);
        let err = encode(&mut fwd, &mut g, &[BOS, 30], &[true, true], 1, 2).err().unwrap();
        assert!(matches!(err, ModelError::BadToken { pos: 1, id: 30 }));
    }

    #[test]
    fn resolve_names_first_mismatch() {
        let m = Model::<f32>::init(small(), &mut Rng8::seed_from_u64(0)).unwrap();
        let other = ModelConfig { hidden_dim: 32, pair_dim: 32, ..small() };
        let err = Layout::resolve(&other, &m.params).unwrap_err();
        match err {
            ModelError::ShapeMismatch { name, .. } => assert_eq!(name, "embed.tokens"),
            e => panic!("{e}"),
        }
    }
}
