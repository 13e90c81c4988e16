//! Residue and pair vocabularies, FASTA ingestion, and the encoded dataset cache.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Canonical amino acids in id order.
pub const RESIDUES: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";
pub const NUM_RESIDUES: usize = 20;
pub const NUM_PAIRS: usize = NUM_RESIDUES * NUM_RESIDUES;

pub const PAD: u8 = 20;
pub const MASK: u8 = 21;
pub const UNK: u8 = 22;
pub const BOS: u8 = 23;
pub const EOS: u8 = 24;
/// Size of the input embedding table (residues plus specials).
pub const VOCAB_SIZE: usize = 25;

/// Bumped whenever ids are reassigned; stored in caches and checkpoints.
pub const VOCAB_VERSION: u32 = 1;

const NONSTANDARD: &[u8] = b"BJOUXZ";

#[derive(Debug, Error)]
pub enum SeqError {
    #[error("line {line}: sequence data before any '>' header")]
    NoHeader { line: usize },
    #[error("line {line}: invalid residue character {ch:?}")]
    InvalidChar { line: usize, ch: char },
    #[error("residue id {0} is not one of the 20 canonical residues")]
    NotResidue(u8),
    #[error("record {id:?}: {reason}")]
    BadRecord { id: String, reason: String },
    #[error("cache line {line}: {reason}")]
    BadCache { line: usize, reason: String },
    #[error("cache vocabulary version {found} does not match {expected}")]
    VocabVersion { found: u32, expected: u32 },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Stream(#[from] std::io::Error),
}

/// The 20-residue alphabet plus the special symbols.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ResidueVocab;

impl ResidueVocab {
    pub fn id(symbol: u8) -> Option<u8> {
        let up = symbol.to_ascii_uppercase();
        RESIDUES.iter().position(|&c| c == up).map(|p| p as u8)
    }

    pub fn symbol(id: u8) -> char {
        match id {
            0..=19 => RESIDUES[id as usize] as char,
            PAD => '_',
            MASK => '#',
            UNK => 'X',
            BOS => '<',
            EOS => '>',
            _ => '?',
        }
    }

    pub fn is_residue(id: u8) -> bool {
        (id as usize) < NUM_RESIDUES
    }

    /// Encode a string over the canonical alphabet.
    pub fn encode(seq: &str) -> Result<Vec<u8>, SeqError> {
        seq.bytes()
            .enumerate()
            .map(|(i, b)| {
                Self::id(b).ok_or(SeqError::InvalidChar {
                    line: 0,
                    ch: seq[i..].chars().next().unwrap_or('?'),
                })
            })
            .collect()
    }

    pub fn decode(ids: &[u8]) -> String {
        ids.iter().map(|&i| Self::symbol(i)).collect()
    }
}

/// Ordered residue pairs `(a, b)` with id `20 * a + b`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PairVocab;

impl PairVocab {
    pub fn decode(pair: usize) -> (u8, u8) {
        debug_assert!(pair < NUM_PAIRS);
        ((pair / NUM_RESIDUES) as u8, (pair % NUM_RESIDUES) as u8)
    }
}

/// Id of the ordered residue pair `(a, b)`; special tokens have no pair id.
pub fn pair_id(a: u8, b: u8) -> Result<usize, SeqError> {
    for x in [a, b] {
        if !ResidueVocab::is_residue(x) {
            return Err(SeqError::NotResidue(x));
        }
    }
    Ok(a as usize * NUM_RESIDUES + b as usize)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub id: String,
    /// Residue ids; `UNK` only appears under [`NonstandardPolicy::Unk`].
    pub residues: Vec<u8>,
}

impl SequenceRecord {
    pub fn new(id: impl Into<String>, residues: Vec<u8>) -> Result<Self, SeqError> {
        let id = id.into();
        if residues.len() < 2 {
            return Err(SeqError::BadRecord {
                id,
                reason: format!("length {} is below the minimum of 2", residues.len()),
            });
        }
        if let Some(&bad) = residues
            .iter()
            .find(|&&r| !ResidueVocab::is_residue(r) && r != UNK)
        {
            return Err(SeqError::BadRecord {
                id,
                reason: format!("token id {bad} is not a residue"),
            });
        }
        Ok(SequenceRecord { id, residues })
    }

    pub fn from_str(id: impl Into<String>, seq: &str) -> Result<Self, SeqError> {
        Self::new(id, ResidueVocab::encode(seq)?)
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    /// Encoder input: `BOS residues EOS`.
    pub fn framed(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(self.residues.len() + 2);
        v.push(BOS);
        v.extend_from_slice(&self.residues);
        v.push(EOS);
        v
    }

    pub fn to_letters(&self) -> String {
        ResidueVocab::decode(&self.residues)
    }
}

impl fmt::Display for SequenceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, ">{}\n{}", self.id, self.to_letters())
    }
}

/// What to do with B, J, O, U, X and Z.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NonstandardPolicy {
    /// Remove those positions from the sequence.
    #[default]
    Drop,
    /// Keep them as `UNK` input tokens that are never masked.
    Unk,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LengthPolicy {
    #[default]
    Truncate,
    Skip,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FastaOptions {
    pub nonstandard: NonstandardPolicy,
    /// Residue budget per record (the model's `max_len - 2`).
    pub max_residues: Option<usize>,
    pub overlong: LengthPolicy,
}

impl Default for FastaOptions {
    fn default() -> Self {
        FastaOptions {
            nonstandard: NonstandardPolicy::Drop,
            max_residues: Some(126),
            overlong: LengthPolicy::Truncate,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FastaParse {
    pub records: Vec<SequenceRecord>,
    /// Records with no residues left (or fewer than two).
    pub skipped_empty: usize,
    pub skipped_long: usize,
    pub truncated: usize,
}

pub fn parse_fasta<R: Read>(input: R, opts: &FastaOptions) -> Result<FastaParse, SeqError> {
    let mut out = FastaParse::default();
    let mut current: Option<(String, Vec<u8>)> = None;

    let finish = |rec: Option<(String, Vec<u8>)>, out: &mut FastaParse| {
        let Some((id, mut residues)) = rec else { return };
        if let Some(max) = opts.max_residues {
            if residues.len() > max {
                match opts.overlong {
                    LengthPolicy::Truncate => {
                        residues.truncate(max);
                        out.truncated += 1;
                    }
                    LengthPolicy::Skip => {
                        out.skipped_long += 1;
                        return;
                    }
                }
            }
        }
        match SequenceRecord::new(id, residues) {
            Ok(r) => out.records.push(r),
            Err(_) => out.skipped_empty += 1,
        }
    };

    for (n, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let line = line.trim_end();
        let lineno = n + 1;
        if line.is_empty() || line.starts_with(';') {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            finish(current.take(), &mut out);
            let id = header.split_whitespace().next().unwrap_or("").to_string();
            current = Some((id, Vec::new()));
            continue;
        }
        let Some((_, residues)) = current.as_mut() else {
            return Err(SeqError::NoHeader { line: lineno });
        };
        for ch in line.bytes() {
            if ch.is_ascii_whitespace() || ch == b'*' {
                continue;
            }
            if let Some(id) = ResidueVocab::id(ch) {
                residues.push(id);
            } else if NONSTANDARD.contains(&ch.to_ascii_uppercase()) {
                if opts.nonstandard == NonstandardPolicy::Unk {
                    residues.push(UNK);
                }
            } else {
                return Err(SeqError::InvalidChar {
                    line: lineno,
                    ch: ch as char,
                });
            }
        }
    }
    finish(current.take(), &mut out);
    if out.skipped_empty > 0 {
        log::warn!("skipped {} empty FASTA records", out.skipped_empty);
    }
    Ok(out)
}

pub fn read_fasta_file(path: &Path, opts: &FastaOptions) -> Result<FastaParse, SeqError> {
    let f = fs::File::open(path).map_err(|source| SeqError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_fasta(f, opts)
}

/// FASTA with 60-column wrapping.
pub fn write_fasta<W: Write>(mut out: W, records: &[SequenceRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(out, ">{}", r.id)?;
        let letters = r.to_letters();
        for chunk in letters.as_bytes().chunks(60) {
            out.write_all(chunk)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub vocab_version: u32,
    pub records: usize,
    pub residues: usize,
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}

/// Write `id<TAB>space-separated ids` lines plus a `.manifest.json` sidecar.
pub fn write_cache(path: &Path, records: &[SequenceRecord]) -> Result<CacheManifest, SeqError> {
    let io = |source| SeqError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut body = String::new();
    for r in records {
        body.push_str(&r.id);
        body.push('\t');
        let ids: Vec<String> = r.residues.iter().map(|x| x.to_string()).collect();
        body.push_str(&ids.join(" "));
        body.push('\n');
    }
    fs::write(path, body).map_err(io)?;
    let manifest = CacheManifest {
        vocab_version: VOCAB_VERSION,
        records: records.len(),
        residues: records.iter().map(|r| r.len()).sum(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(manifest_path(path), json).map_err(io)?;
    Ok(manifest)
}

pub fn read_cache(path: &Path) -> Result<Vec<SequenceRecord>, SeqError> {
    let mpath = manifest_path(path);
    let raw = fs::read_to_string(&mpath).map_err(|source| SeqError::Io {
        path: mpath.clone(),
        source,
    })?;
    let manifest: CacheManifest = serde_json::from_str(&raw).map_err(|e| SeqError::BadCache {
        line: 0,
        reason: format!("manifest: {e}"),
    })?;
    if manifest.vocab_version != VOCAB_VERSION {
        return Err(SeqError::VocabVersion {
            found: manifest.vocab_version,
            expected: VOCAB_VERSION,
        });
    }
    let body = fs::read_to_string(path).map_err(|source| SeqError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for (n, line) in body.lines().enumerate() {
        let bad = |reason: String| SeqError::BadCache { line: n + 1, reason };
        let (id, ids) = line.split_once('\t').ok_or_else(|| bad("missing tab".into()))?;
        let residues = ids
            .split_whitespace()
            .map(|t| t.parse::<u8>().map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        records.push(SequenceRecord::new(id, residues).map_err(|e| bad(e.to_string()))?);
    }
    if records.len() != manifest.records {
        return Err(SeqError::BadCache {
            line: 0,
            reason: format!(
                "manifest lists {} records, file has {}",
                manifest.records,
                records.len()
            ),
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(s: &str) -> FastaParse {
        parse_fasta(s.as_bytes(), &FastaOptions::default()).unwrap()
    }

    #[test]
    fn minimal_file() {
        let p = parse(">s1\nACDE\n");
        assert_eq!(p.records.len(), 1);
        assert_eq!(p.records[0].residues, vec![0, 1, 2, 3]);
        assert_eq!(p.records[0].id, "s1");
    }

    #[test]
    fn wrapped_lines_and_lowercase() {
        let p = parse(">s1\nAC\nDE\n>s2 some description\ngg\n");
        let lens: Vec<_> = p.records.iter().map(|r| r.len()).collect();
        assert_eq!(lens, vec![4, 2]);
        assert_eq!(p.records[1].to_letters(), "GG");
    }

    #[test]
    fn nonstandard_dropped_by_default() {
        let p = parse(">s1\nAXA\n");
        assert_eq!(p.records[0].to_letters(), "AA");
    }

    #[test]
    fn nonstandard_as_unk() {
        let opts = FastaOptions {
            nonstandard: NonstandardPolicy::Unk,
            ..Default::default()
        };
        let p = parse_fasta(">s1\nAXA\n".as_bytes(), &opts).unwrap();
        assert_eq!(p.records[0].residues, vec![0, UNK, 0]);
    }

    #[test]
    fn sequence_before_header_reports_line() {
        let err = parse_fasta("\nACDE\n".as_bytes(), &FastaOptions::default()).unwrap_err();
        assert!(matches!(err, SeqError::NoHeader { line: 2 }));
    }

    #[test]
    fn empty_records_are_counted() {
        let p = parse(">a\n>b\nXX\n>c\nAC\n");
        assert_eq!(p.records.len(), 1);
        assert_eq!(p.skipped_empty, 2);
    }

    #[test]
    fn invalid_character() {
        let err = parse_fasta(">a\nAC1\n".as_bytes(), &FastaOptions::default()).unwrap_err();
        assert!(matches!(err, SeqError::InvalidChar { line: 2, ch: '1' }));
    }

    #[test]
    fn overlong_truncate_or_skip() {
        let mut opts = FastaOptions {
            max_residues: Some(3),
            ..Default::default()
        };
        let p = parse_fasta(">a\nACDEF\n".as_bytes(), &opts).unwrap();
        assert_eq!((p.records[0].len(), p.truncated), (3, 1));
        opts.overlong = LengthPolicy::Skip;
        let p = parse_fasta(">a\nACDEF\n".as_bytes(), &opts).unwrap();
        assert_eq!((p.records.len(), p.skipped_long), (0, 1));
    }

    #[test]
    fn pair_id_examples() {
        assert_eq!(pair_id(0, 0).unwrap(), 0);
        assert_eq!(pair_id(19, 19).unwrap(), 399);
        assert_eq!(pair_id(1, 2).unwrap(), 22);
        assert!(pair_id(MASK, 0).is_err());
        assert!(pair_id(0, UNK).is_err());
    }

    #[test]
    fn pair_id_is_a_bijection() {
        let mut seen = [false; NUM_PAIRS];
        for a in 0..20u8 {
            for b in 0..20u8 {
                let p = pair_id(a, b).unwrap();
                assert!(!seen[p]);
                seen[p] = true;
                assert_eq!(PairVocab::decode(p), (a, b));
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.tsv");
        let recs = vec![
            SequenceRecord::from_str("a", "ACDE").unwrap(),
            SequenceRecord::from_str("b", "WY").unwrap(),
        ];
        let m = write_cache(&path, &recs).unwrap();
        assert_eq!((m.records, m.residues), (2, 6));
        assert_eq!(read_cache(&path).unwrap(), recs);
        let body = fs::read_to_string(&path).unwrap();
        assert_eq!(body, "a\t0 1 2 3\nb\t18 19\n");
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(s in "[ACDEFGHIKLMNPQRSTVWY]{0,64}") {
            prop_assert_eq!(ResidueVocab::decode(&ResidueVocab::encode(&s).unwrap()), s);
        }

        #[test]
        fn fasta_write_parse_round_trip(seqs in proptest::collection::vec("[ACDEFGHIKLMNPQRSTVWY]{2,150}", 1..5)) {
            let recs: Vec<_> = seqs.iter().enumerate()
                .map(|(i, s)| SequenceRecord::from_str(format!("r{i}"), s).unwrap())
                .collect();
            let mut buf = Vec::new();
            write_fasta(&mut buf, &recs).unwrap();
            let opts = FastaOptions { max_residues: None, ..Default::default() };
            prop_assert_eq!(parse_fasta(buf.as_slice(), &opts).unwrap().records, recs);
        }
    }
}
