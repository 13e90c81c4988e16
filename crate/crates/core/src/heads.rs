//! Token and pair prediction heads, the MLM/PMLM objectives, and masked accuracy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{encode, Forward, Model, ModelError};
use crate::masking::MaskedBatch;
use crate::numcore::{self, Element, Graph, Var};
use crate::seqio::{NUM_PAIRS, NUM_RESIDUES};

/// A categorical distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Dist(Vec<f64>);

impl Dist {
    pub fn new(p: Vec<f64>) -> Result<Self, ModelError> {
        let s: f64 = p.iter().sum();
        if p.is_empty() || p.iter().any(|&x| !(x >= 0.0)) || (s - 1.0).abs() > 1e-6 {
            return Err(ModelError::Config(format!(
                "not a distribution (len {}, sum {s})",
                p.len()
            )));
        }
        Ok(Dist(p))
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self, ModelError> {
        Ok(Dist(numcore::softmax(logits)?))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Joint distribution over `(a, b)`, row-major in `a` (so index `a * n_b + b`,
/// matching the pair id layout when both alphabets are the 20 residues).
#[derive(Clone, Debug, PartialEq)]
pub struct JointDist {
    pub n_a: usize,
    pub n_b: usize,
    probs: Vec<f64>,
}

impl JointDist {
    pub fn new(n_a: usize, n_b: usize, probs: Vec<f64>) -> Result<Self, ModelError> {
        if probs.len() != n_a * n_b {
            return Err(ModelError::Config(format!(
                "joint of {}x{} needs {} entries, got {}",
                n_a,
                n_b,
                n_a * n_b,
                probs.len()
            )));
        }
        Dist::new(probs.clone())?;
        Ok(JointDist { n_a, n_b, probs })
    }

    pub fn from_logits(n_a: usize, n_b: usize, logits: &[f64]) -> Result<Self, ModelError> {
        Self::new(n_a, n_b, numcore::softmax(logits)?)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.probs[a * self.n_b + b]
    }

    pub fn marginal_a(&self) -> Vec<f64> {
        (0..self.n_a).map(|a| (0..self.n_b).map(|b| self.get(a, b)).sum()).collect()
    }

    pub fn marginal_b(&self) -> Vec<f64> {
        (0..self.n_b).map(|b| (0..self.n_a).map(|a| self.get(a, b)).sum()).collect()
    }

    /// Outer product of two marginals.
    pub fn product(p: &Dist, q: &Dist) -> Self {
        let mut probs = Vec::with_capacity(p.len() * q.len());
        for &x in p.probs() {
            for &y in q.probs() {
                probs.push(x * y);
            }
        }
        JointDist {
            n_a: p.len(),
            n_b: q.len(),
            probs,
        }
    }
}

/// `concat(h_i * h_j, h_i - h_j)` with an elementwise product.
pub fn pair_feature<T: Element>(h_i: &[T], h_j: &[T]) -> Result<Vec<T>, ModelError> {
    if h_i.len() != h_j.len() {
        return Err(ModelError::Config(format!(
            "pair feature of vectors with lengths {} and {}",
            h_i.len(),
            h_j.len()
        )));
    }
    let mut out: Vec<T> = h_i.iter().zip(h_j).map(|(&a, &b)| a * b).collect();
    out.extend(h_i.iter().zip(h_j).map(|(&a, &b)| a - b));
    Ok(out)
}

fn mean_nll(logits: &[f64], width: usize, labels: &[usize]) -> Result<f64, ModelError> {
    if logits.len() != width * labels.len() {
        return Err(ModelError::Config(format!(
            "{} logits for {} labels of width {width}",
            logits.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (row, &l) in logits.chunks(width).zip(labels) {
        total += numcore::cross_entropy_from_logits(row, l)?;
    }
    Ok(total / labels.len() as f64)
}

/// Mean over masked positions of `-log P(x_i | X_{/M})`; rows are 20-way logits.
pub fn mlm_loss(logits: &[f64], labels: &[usize]) -> Result<f64, ModelError> {
    if labels.is_empty() {
        return Err(ModelError::NoLabels("mlm_loss"));
    }
    mean_nll(logits, NUM_RESIDUES, labels)
}

/// Tallies kept while evaluating losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossCounters {
    /// Batches whose pair set was empty (|M| = 1 everywhere).
    pub empty_pair_batches: u64,
}

/// Mean over pair labels of `-log P(x_i, x_j | X_{/M})`; rows are 400-way
/// logits. An empty pair set contributes 0 and is counted.
pub fn pmlm_loss(logits: &[f64], labels: &[usize], counters: &mut LossCounters) -> Result<f64, ModelError> {
    if labels.is_empty() {
        counters.empty_pair_batches += 1;
        return Ok(0.0);
    }
    mean_nll(logits, NUM_PAIRS, labels)
}

pub fn combined_loss(mlm: f64, pmlm: f64, lambda: f64) -> f64 {
    mlm + lambda * pmlm
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label. Rows are `width` wide.
pub fn masked_accuracy(dists: &[f64], width: usize, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = dists
        .chunks(width)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// `acc_pmlm - acc_mlm^2`: zero when pair predictions are exactly as good as
/// two independent token predictions.
pub fn delta_acc(acc_pmlm: f64, acc_mlm: f64) -> f64 {
    acc_pmlm - acc_mlm * acc_mlm
}

/// Two-layer token head on the given hidden-state rows: `[n, 20]` logits.
pub fn token_logits<T: Element, R: Rng>(
    fwd: &mut Forward<'_, T, R>,
    g: &mut Graph<T>,
    hidden: Var,
    rows: &[usize],
) -> Result<Var, ModelError> {
    let layout = &fwd.model.layout;
    let (dense, out) = (layout.token_dense, layout.token_out);
    let h = g.gather_rows(hidden, rows)?;
    let h = fwd.linear(g, h, dense)?;
    let h = g.gelu(h);
    Ok(fwd.linear(g, h, out)?)
}

/// Pair features for rows `(i, j)` as a graph node, `[n, 2d]`.
pub fn pair_feature_var<T: Element>(
    g: &mut Graph<T>,
    hidden: Var,
    rows_i: &[usize],
    rows_j: &[usize],
) -> Result<Var, ModelError> {
    let hi = g.gather_rows(hidden, rows_i)?;
    let hj = g.gather_rows(hidden, rows_j)?;
    let prod = g.mul(hi, hj)?;
    let diff = g.sub(hi, hj)?;
    Ok(g.concat(prod, diff)?)
}

/// Activation of the pair head's first layer, `[n, pair_dim]`.
pub fn pair_hidden<T: Element, R: Rng>(
    fwd: &mut Forward<'_, T, R>,
    g: &mut Graph<T>,
    hidden: Var,
    rows_i: &[usize],
    rows_j: &[usize],
) -> Result<Var, ModelError> {
    let dense = fwd.model.layout.pair_dense;
    let f = pair_feature_var(g, hidden, rows_i, rows_j)?;
    let h = fwd.linear(g, f, dense)?;
    Ok(g.gelu(h))
}

/// 400-way pair logits, `[n, 400]`.
pub fn pair_logits<T: Element, R: Rng>(
    fwd: &mut Forward<'_, T, R>,
    g: &mut Graph<T>,
    hidden: Var,
    rows_i: &[usize],
    rows_j: &[usize],
) -> Result<Var, ModelError> {
    let h = pair_hidden(fwd, g, hidden, rows_i, rows_j)?;
    let out = fwd.model.layout.pair_out;
    Ok(fwd.linear(g, h, out)?)
}

/// Graph nodes and values of one batch's objective.
pub struct BatchLoss {
    pub total: Var,
    pub mlm: Option<f64>,
    pub pmlm: Option<f64>,
    pub token_logits: Option<Var>,
    pub pair_logits: Option<Var>,
}

/// Which heads a forward pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadSelection {
    /// Only what the configured objective needs.
    Objective,
    /// Both heads, whatever the objective (validation and diagnostics).
    Both,
}

/// `L = L_mlm + lambda * L_pmlm`, or `L_pmlm` alone (diagonal labels
/// included, token head skipped) in pair-only mode. With `lambda = 0` the
/// pair head is not evaluated, so it receives no gradient.
pub fn batch_loss<T: Element, R: Rng>(
    fwd: &mut Forward<'_, T, R>,
    g: &mut Graph<T>,
    batch: &MaskedBatch,
    heads: HeadSelection,
    counters: &mut LossCounters,
) -> Result<BatchLoss, ModelError> {
    let cfg = fwd.model.config.clone();
    let enc = encode(fwd, g, &batch.input_ids, &batch.attention, batch.batch, batch.width)?;
    let pair_only = cfg.pmlm_only_with_diagonal;
    let want_tokens = !pair_only || heads == HeadSelection::Both;
    let want_pairs = pair_only || cfg.lambda > 0.0 || heads == HeadSelection::Both;

    let mut out = BatchLoss {
        total: enc.hidden,
        mlm: None,
        pmlm: None,
        token_logits: None,
        pair_logits: None,
    };
    let mut mlm_node = None;
    if want_tokens {
        if batch.token_labels.is_empty() {
            return Err(ModelError::NoLabels("mlm_loss"));
        }
        let logits = token_logits(fwd, g, enc.hidden, &batch.token_rows)?;
        let ce = g.cross_entropy(logits, &batch.token_labels)?;
        out.mlm = Some(g.scalar(ce).as_f64());
        out.token_logits = Some(logits);
        mlm_node = Some(ce);
    }
    let mut pmlm_node = None;
    if want_pairs {
        if batch.pair_labels.is_empty() {
            counters.empty_pair_batches += 1;
            out.pmlm = Some(0.0);
        } else {
            let logits = pair_logits(fwd, g, enc.hidden, &batch.pair_rows_i, &batch.pair_rows_j)?;
            let ce = g.cross_entropy(logits, &batch.pair_labels)?;
            out.pmlm = Some(g.scalar(ce).as_f64());
            out.pair_logits = Some(logits);
            pmlm_node = Some(ce);
        }
    }

    out.total = match (pair_only, mlm_node, pmlm_node) {
        (true, _, Some(p)) => p,
        (true, _, None) => return Err(ModelError::NoLabels("pmlm_loss")),
        (false, Some(m), Some(p)) if cfg.lambda > 0.0 => {
            let wp = g.scale(p, cfg.lambda);
            g.add(m, wp)?
        }
        (false, Some(m), _) => m,
        (false, None, _) => return Err(ModelError::NoLabels("mlm_loss")),
    };
    Ok(out)
}

/// Probabilities from both heads for one batch, dropout off.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Predictions {
    /// `[n_tokens, 20]`.
    pub token_probs: Vec<f64>,
    /// `[n_pairs, 400]`.
    pub pair_probs: Vec<f64>,
    pub mlm: Option<f64>,
    pub pmlm: Option<f64>,
}

pub fn predict<T: Element>(model: &Model<T>, batch: &MaskedBatch) -> Result<Predictions, ModelError> {
    let mut g = Graph::new();
    let mut fwd = Forward::<T, ChaCha8Rng>::eval(model);
    let mut counters = LossCounters::default();
    let loss = batch_loss(&mut fwd, &mut g, batch, HeadSelection::Both, &mut counters)?;
    let probs = |v: Option<Var>, w: usize| -> Result<Vec<f64>, ModelError> {
        let Some(v) = v else { return Ok(Vec::new()) };
        let mut out = Vec::with_capacity(g.value(v).len());
        for row in g.value(v).to_f64_vec().chunks(w) {
            out.extend(numcore::softmax(row)?);
        }
        Ok(out)
    };
    Ok(Predictions {
        token_probs: probs(loss.token_logits, NUM_RESIDUES)?,
        pair_probs: probs(loss.pair_logits, NUM_PAIRS)?,
        mlm: loss.mlm,
        pmlm: loss.pmlm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pair_feature_identities() {
        let v = [1.0f64, -2.0, 3.0];
        assert_eq!(pair_feature(&v, &v).unwrap(), vec![1.0, 4.0, 9.0, 0.0, 0.0, 0.0]);
        let z = [0.0f64; 3];
        assert_eq!(pair_feature(&z, &v).unwrap(), vec![0.0, 0.0, 0.0, -1.0, 2.0, -3.0]);
        let w = [0.5f64, 0.25, -1.0];
        let a = pair_feature(&v, &w).unwrap();
        let b = pair_feature(&w, &v).unwrap();
        assert_eq!(a[..3], b[..3]);
        for k in 3..6 {
            assert_eq!(a[k], -b[k]);
        }
        assert!(pair_feature(&v, &w[..2]).is_err());
    }

    #[test]
    fn mlm_loss_examples() {
        let uniform = vec![0.0; 40];
        assert!((mlm_loss(&uniform, &[3, 17]).unwrap() - 20f64.ln()).abs() < 1e-12);
        let mut perfect = vec![0.0; 20];
        perfect[4] = 50.0;
        assert!(mlm_loss(&perfect, &[4]).unwrap() < 1e-6);
        assert!(matches!(mlm_loss(&[], &[]), Err(ModelError::NoLabels(_))));

        // two rows with losses 1.0 and 3.0 average to 2.0: for uniform-elsewhere
        // logits, putting t on the label gives loss ln(19 + e^t) - t.
        let row_with_loss = |target: f64| {
            // solve ln(19 + e^t) - t = target  =>  e^t = 19 / (e^target - 1)
            let t = (19.0 / (target.exp() - 1.0)).ln();
            let mut r = vec![0.0; 20];
            r[0] = t;
            r
        };
        let mut logits = row_with_loss(1.0);
        logits.extend(row_with_loss(3.0));
        assert!((mlm_loss(&logits, &[0, 0]).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pmlm_loss_examples() {
        let mut c = LossCounters::default();
        let uniform = vec![0.0; 400];
        assert!((pmlm_loss(&uniform, &[123], &mut c).unwrap() - 400f64.ln()).abs() < 1e-12);
        let mut perfect = vec![0.0; 400];
        perfect[42] = 50.0;
        assert!(pmlm_loss(&perfect, &[42], &mut c).unwrap() < 1e-6);
        assert_eq!(pmlm_loss(&[], &[], &mut c).unwrap(), 0.0);
        assert_eq!(c.empty_pair_batches, 1);
    }

    fn outer_sum(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().flat_map(|x| b.iter().map(move |y| x + y)).collect()
    }

    #[test]
    fn factorized_pair_logits_split_into_marginal_losses() {
        let a: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..20).map(|i| ((i * 5) % 13) as f64 * -0.2 + 0.5).collect();
        let joint = outer_sum(&a, &b);
        let mut c = LossCounters::default();
        for (x, y) in [(0usize, 0usize), (3, 17), (19, 2)] {
            let lp = pmlm_loss(&joint, &[x * 20 + y], &mut c).unwrap();
            let sum = mlm_loss(&a, &[x]).unwrap() + mlm_loss(&b, &[y]).unwrap();
            assert!((lp - sum).abs() < 1e-10);
        }
    }

    #[test]
    fn combined_loss_examples() {
        assert_eq!(combined_loss(1.0, 2.0, 1.0), 3.0);
        assert_eq!(combined_loss(1.0, 2.0, 0.0), 1.0);
    }

    #[test]
    fn accuracy_and_delta() {
        let d = [0.9, 0.1, 0.2, 0.8, 0.5, 0.5, 0.3, 0.7];
        assert_eq!(masked_accuracy(&d, 2, &[0, 1, 0, 1]), 1.0);
        assert_eq!(masked_accuracy(&d, 2, &[1, 0, 1, 0]), 0.0);
        assert_eq!(masked_accuracy(&d, 2, &[0, 1, 0, 0]), 0.75);
        assert!((delta_acc(0.224, 0.471) - 0.0022).abs() < 5e-4);
        assert!((delta_acc(0.109, 0.318) - 0.0079).abs() < 5e-4);
        for x in [0.0, 0.123, 0.5, 1.0] {
            assert_eq!(delta_acc(x * x, x), 0.0);
        }
    }

    proptest! {
        #[test]
        fn outer_sum_joint_is_product_of_marginals(
            a in proptest::collection::vec(-5.0f64..5.0, 20),
            b in proptest::collection::vec(-5.0f64..5.0, 20),
        ) {
            let joint = JointDist::from_logits(20, 20, &outer_sum(&a, &b)).unwrap();
            let prod = JointDist::product(&Dist::from_logits(&a).unwrap(), &Dist::from_logits(&b).unwrap());
            for (x, y) in joint.probs().iter().zip(prod.probs()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn losses_are_permutation_invariant(seed in 0u64..1000) {
            let n = 5;
            let logits: Vec<f64> = (0..n * 20).map(|i| (((i as u64 * 31 + seed) % 17) as f64) * 0.4).collect();
            let labels: Vec<usize> = (0..n).map(|i| ((i as u64 * 7 + seed) % 20) as usize).collect();
            let perm = [3usize, 0, 4, 1, 2];
            let pl: Vec<f64> = perm.iter().flat_map(|&r| logits[r * 20..(r + 1) * 20].to_vec()).collect();
            let pls: Vec<usize> = perm.iter().map(|&r| labels[r]).collect();
            prop_assert!((mlm_loss(&logits, &labels).unwrap() - mlm_loss(&pl, &pls).unwrap()).abs() < 1e-12);
        }
    }
}
