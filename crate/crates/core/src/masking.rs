//! Masked-position sampling, input corruption, and token/pair label construction.
//!
//! Positions in [`MaskedSequence`] are residue indices (0-based, without the
//! BOS/EOS framing); `input_ids` is the framed encoder input, so residue `p`
//! sits at token `p + 1`.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seqio::{self, SequenceRecord, MASK, NUM_RESIDUES, PAD};

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("invalid masking config: {0}")]
    Config(String),
    #[error("sequence {index} has {len} tokens, batch width is {max_len}")]
    Overlong {
        index: usize,
        len: usize,
        max_len: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub mask_prob: f64,
    /// (replace with MASK, replace with a random residue, keep) for masked positions.
    pub corrupt_split: (f64, f64, f64),
    pub seed: u64,
    /// Cap on ordered pair labels per sequence; `i->j` and `j->i` are kept together.
    pub max_pairs_per_seq: Option<usize>,
    /// Guarantee |M| >= 1 (resample once, then force one position).
    pub force_nonempty: bool,
    /// Add `(i, i)` pair labels (the pair-only training variant).
    pub include_diagonal: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            mask_prob: 0.15,
            corrupt_split: (0.8, 0.1, 0.1),
            seed: 0,
            max_pairs_per_seq: None,
            force_nonempty: true,
            include_diagonal: false,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<(), MaskError> {
        if !(self.mask_prob > 0.0 && self.mask_prob <= 1.0) {
            return Err(MaskError::Config(format!(
                "mask_prob {} outside (0, 1]",
                self.mask_prob
            )));
        }
        let (a, b, c) = self.corrupt_split;
        if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(MaskError::Config(format!(
                "corrupt_split {:?} must be non-negative and sum to 1",
                self.corrupt_split
            )));
        }
        if self.max_pairs_per_seq == Some(0) {
            return Err(MaskError::Config("max_pairs_per_seq must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Corruption {
    Masked,
    Replaced,
    Kept,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairLabel {
    pub i: usize,
    pub j: usize,
    pub pair_id: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSequence {
    /// Framed, corrupted encoder input.
    pub input_ids: Vec<u8>,
    /// Sorted residue positions in M.
    pub mask_positions: Vec<usize>,
    /// Original residue at each position of `mask_positions`.
    pub token_labels: Vec<u8>,
    pub corruptions: Vec<Corruption>,
    pub pair_labels: Vec<PairLabel>,
}

impl MaskedSequence {
    /// Mask exactly `positions` with the MASK token (used by diagnostics that
    /// need a fixed M).
    pub fn with_positions(seq: &SequenceRecord, positions: &[usize], include_diagonal: bool) -> Self {
        let mut positions = positions.to_vec();
        positions.sort_unstable();
        positions.dedup();
        let mut input_ids = seq.framed();
        let token_labels: Vec<u8> = positions.iter().map(|&p| seq.residues[p]).collect();
        for &p in &positions {
            input_ids[p + 1] = MASK;
        }
        let pair_labels = build_pair_labels(&positions, &token_labels, include_diagonal);
        MaskedSequence {
            input_ids,
            corruptions: vec![Corruption::Masked; positions.len()],
            mask_positions: positions,
            token_labels,
            pair_labels,
        }
    }
}

/// Ordered pairs over M without the diagonal, lexicographic in `(i, j)`.
/// With `include_diagonal`, `(i, i)` labels follow in position order.
pub fn build_pair_labels(
    mask_positions: &[usize],
    token_labels: &[u8],
    include_diagonal: bool,
) -> Vec<PairLabel> {
    debug_assert_eq!(mask_positions.len(), token_labels.len());
    let n = mask_positions.len();
    let mut out = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            if a != b {
                out.push(PairLabel {
                    i: mask_positions[a],
                    j: mask_positions[b],
                    pair_id: seqio::pair_id(token_labels[a], token_labels[b])
                        .expect("token labels are residues"),
                });
            }
        }
    }
    if include_diagonal {
        for a in 0..n {
            out.push(PairLabel {
                i: mask_positions[a],
                j: mask_positions[a],
                pair_id: seqio::pair_id(token_labels[a], token_labels[a])
                    .expect("token labels are residues"),
            });
        }
    }
    out
}

fn draw_positions<R: Rng>(maskable: &[usize], p: f64, rng: &mut R) -> Vec<usize> {
    maskable.iter().copied().filter(|_| rng.gen::<f64>() < p).collect()
}

pub fn sample_mask<R: Rng>(seq: &SequenceRecord, cfg: &MaskingConfig, rng: &mut R) -> MaskedSequence {
    let maskable: Vec<usize> = (0..seq.len())
        .filter(|&p| seqio::ResidueVocab::is_residue(seq.residues[p]))
        .collect();
    let mut positions = draw_positions(&maskable, cfg.mask_prob, rng);
    if positions.is_empty() && cfg.force_nonempty && !maskable.is_empty() {
        positions = draw_positions(&maskable, cfg.mask_prob, rng);
        if positions.is_empty() {
            positions.push(maskable[rng.gen_range(0..maskable.len())]);
        }
    }

    let mut input_ids = seq.framed();
    let mut token_labels = Vec::with_capacity(positions.len());
    let mut corruptions = Vec::with_capacity(positions.len());
    let (p_mask, p_random, _) = cfg.corrupt_split;
    for &p in &positions {
        token_labels.push(seq.residues[p]);
        let u: f64 = rng.gen();
        let kind = if u < p_mask {
            input_ids[p + 1] = MASK;
            Corruption::Masked
        } else if u < p_mask + p_random {
            input_ids[p + 1] = rng.gen_range(0..NUM_RESIDUES as u8);
            Corruption::Replaced
        } else {
            Corruption::Kept
        };
        corruptions.push(kind);
    }

    let mut pair_labels = build_pair_labels(&positions, &token_labels, cfg.include_diagonal);
    if let Some(cap) = cfg.max_pairs_per_seq {
        pair_labels = cap_pairs(pair_labels, cap, rng);
    }
    MaskedSequence {
        input_ids,
        mask_positions: positions,
        token_labels,
        corruptions,
        pair_labels,
    }
}

/// Keep a uniform subset of unordered pairs (both directions together) so the
/// ordered count stays within `cap`. Diagonal labels count as their own group.
fn cap_pairs<R: Rng>(labels: Vec<PairLabel>, cap: usize, rng: &mut R) -> Vec<PairLabel> {
    if labels.len() <= cap {
        return labels;
    }
    let mut groups: Vec<(usize, usize)> = labels
        .iter()
        .filter(|l| l.i <= l.j)
        .map(|l| (l.i, l.j))
        .collect();
    groups.sort_unstable();
    let mut keep_groups = Vec::new();
    let mut budget = cap;
    let order = sample_indices(rng, groups.len(), groups.len());
    for g in order.iter() {
        let (i, j) = groups[g];
        let size = if i == j { 1 } else { 2 };
        if size <= budget {
            keep_groups.push((i, j));
            budget -= size;
        }
        if budget == 0 {
            break;
        }
    }
    labels
        .into_iter()
        .filter(|l| keep_groups.contains(&(l.i.min(l.j), l.i.max(l.j))))
        .collect()
}

/// A padded batch with flattened label indices.
///
/// Rows index the `[batch * width, hidden]` view of encoder output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    pub batch: usize,
    pub width: usize,
    pub input_ids: Vec<u8>,
    /// `true` for real tokens, `false` for PAD.
    pub attention: Vec<bool>,
    pub token_rows: Vec<usize>,
    pub token_labels: Vec<usize>,
    /// Start of each sequence's tokens in `token_rows`.
    pub token_offsets: Vec<usize>,
    pub pair_rows_i: Vec<usize>,
    pub pair_rows_j: Vec<usize>,
    pub pair_labels: Vec<usize>,
    /// Start of each sequence's pairs in `pair_labels`.
    pub pair_offsets: Vec<usize>,
}

/// Pad to the longest framed input in the batch; rows are `s * width + t`.
pub fn collate_batch(seqs: &[MaskedSequence], max_len: usize) -> Result<MaskedBatch, MaskError> {
    if seqs.is_empty() {
        return Err(MaskError::EmptyBatch);
    }
    let width = seqs.iter().map(|m| m.input_ids.len()).max().unwrap_or(0).min(max_len);
    let mut b = MaskedBatch {
        batch: seqs.len(),
        width,
        input_ids: Vec::with_capacity(seqs.len() * width),
        attention: Vec::with_capacity(seqs.len() * width),
        token_rows: Vec::new(),
        token_labels: Vec::new(),
        token_offsets: Vec::with_capacity(seqs.len()),
        pair_rows_i: Vec::new(),
        pair_rows_j: Vec::new(),
        pair_labels: Vec::new(),
        pair_offsets: Vec::with_capacity(seqs.len()),
    };
    for (s, m) in seqs.iter().enumerate() {
        let len = m.input_ids.len();
        if len > max_len {
            return Err(MaskError::Overlong {
                index: s,
                len,
                max_len,
            });
        }
        let base = s * width;
        b.input_ids.extend_from_slice(&m.input_ids);
        b.input_ids.extend(std::iter::repeat(PAD).take(width - len));
        b.attention.extend((0..width).map(|t| t < len));
        b.token_offsets.push(b.token_rows.len());
        for (&p, &lab) in m.mask_positions.iter().zip(&m.token_labels) {
            b.token_rows.push(base + p + 1);
            b.token_labels.push(lab as usize);
        }
        b.pair_offsets.push(b.pair_labels.len());
        for l in &m.pair_labels {
            b.pair_rows_i.push(base + l.i + 1);
            b.pair_rows_j.push(base + l.j + 1);
            b.pair_labels.push(l.pair_id);
        }
    }
    Ok(b)
}

/// Mix a base seed with a stream tag and an index (splitmix64 finalizer), so
/// per-item RNGs do not depend on scheduling order.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(s: &str) -> SequenceRecord {
        SequenceRecord::from_str("t", s).unwrap()
    }

    #[test]
    fn tiny_mask_prob_without_forcing_leaves_input_intact() {
        let cfg = MaskingConfig {
            mask_prob: 1e-12,
            force_nonempty: false,
            ..Default::default()
        };
        let s = rec("ACDEFGHIK");
        let m = sample_mask(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(m.mask_positions.is_empty() && m.pair_labels.is_empty());
        assert_eq!(m.input_ids, s.framed());
    }

    #[test]
    fn forced_minimum_when_sampling_yields_none() {
        let cfg = MaskingConfig {
            mask_prob: 1e-12,
            ..Default::default()
        };
        let m = sample_mask(&rec("ACDE"), &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(m.mask_positions.len(), 1);
    }

    #[test]
    fn full_mask_on_length_four() {
        let cfg = MaskingConfig {
            mask_prob: 1.0,
            corrupt_split: (1.0, 0.0, 0.0),
            ..Default::default()
        };
        let m = sample_mask(&rec("ACDE"), &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(m.mask_positions, vec![0, 1, 2, 3]);
        assert!(m.input_ids[1..5].iter().all(|&t| t == MASK));
        assert_eq!(m.pair_labels.len(), 12);
    }

    #[test]
    fn pair_label_examples() {
        assert!(build_pair_labels(&[2], &[5], false).is_empty());
        let l = build_pair_labels(&[1, 4, 7], &[0, 1, 2], false);
        let ij: Vec<_> = l.iter().map(|p| (p.i, p.j)).collect();
        assert_eq!(ij, vec![(1, 4), (1, 7), (4, 1), (4, 7), (7, 1), (7, 4)]);
        let a = seqio::ResidueVocab::id(b'A').unwrap();
        let c = seqio::ResidueVocab::id(b'C').unwrap();
        let l = build_pair_labels(&[1, 4], &[a, c], false);
        assert_eq!(
            l,
            vec![
                PairLabel { i: 1, j: 4, pair_id: seqio::pair_id(a, c).unwrap() },
                PairLabel { i: 4, j: 1, pair_id: seqio::pair_id(c, a).unwrap() },
            ]
        );
        let d = build_pair_labels(&[1, 4, 7], &[0, 1, 2], true);
        assert_eq!(d.len(), 9);
        assert_eq!(d.iter().filter(|p| p.i == p.j).count(), 3);
    }

    #[test]
    fn special_positions_never_masked() {
        let s = SequenceRecord::new("u", vec![0, seqio::UNK, 3, seqio::UNK]).unwrap();
        let cfg = MaskingConfig {
            mask_prob: 1.0,
            ..Default::default()
        };
        let m = sample_mask(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(m.mask_positions, vec![0, 2]);
        assert_eq!(m.input_ids[0], seqio::BOS);
        assert_eq!(*m.input_ids.last().unwrap(), seqio::EOS);
    }

    #[test]
    fn pair_cap_keeps_directions_together() {
        let cfg = MaskingConfig {
            mask_prob: 1.0,
            max_pairs_per_seq: Some(7),
            ..Default::default()
        };
        let m = sample_mask(&rec("ACDEFG"), &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(m.pair_labels.len(), 6);
        for l in &m.pair_labels {
            assert!(m.pair_labels.iter().any(|r| r.i == l.j && r.j == l.i));
        }
    }

    #[test]
    fn config_validation() {
        let mut c = MaskingConfig::default();
        assert!(c.validate().is_ok());
        c.corrupt_split = (0.5, 0.1, 0.1);
        assert!(c.validate().is_err());
        c = MaskingConfig { mask_prob: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    fn masked(positions: &[usize], len: usize) -> MaskedSequence {
        let s = SequenceRecord::new("x", vec![1; len]).unwrap();
        MaskedSequence::with_positions(&s, positions, false)
    }

    #[test]
    fn collate_pads_and_offsets() {
        let b = collate_batch(&[masked(&[0], 3)], 5).unwrap();
        assert_eq!(b.attention, vec![true; 5]);

        let b = collate_batch(&[masked(&[0, 1, 2], 3), masked(&[0, 1, 2, 3], 4)], 8).unwrap();
        assert_eq!(b.width, 6);
        assert_eq!(b.input_ids.len(), 12);
        assert_eq!(&b.attention[..6], &[true, true, true, true, true, false]);
        assert_eq!(b.pair_labels.len(), 18);
        assert_eq!(b.pair_offsets, vec![0, 6]);
        assert_eq!(b.token_offsets, vec![0, 3]);
        assert_eq!(b.token_rows[3], 6 + 1);

        let err = collate_batch(&[masked(&[0], 9)], 8).unwrap_err();
        assert!(matches!(err, MaskError::Overlong { index: 0, .. }));
    }
}
