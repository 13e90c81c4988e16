//! Synthetic sequences from a pairwise-coupled (Potts) distribution with
//! exact conditionals.
//!
//! `P(x) ∝ exp(Σ_i h_i(x_i) + Σ_{i<j} J_ij(x_i, x_j))`. The coupling graph
//! splits the positions into connected components whose joint laws are
//! independent, so exact sampling enumerates each component separately.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::ModelError;
use crate::evalkit::ContactMap;
use crate::heads::{Dist, JointDist};
use crate::masking::derive_seed;
use crate::seqio::{SequenceRecord, NUM_RESIDUES};

/// Longest spec accepted by the exact operations.
pub const EXACT_MAX_LENGTH: usize = 12;
/// Largest number of joint states enumerated for one coupled component.
pub const EXACT_MAX_COMPONENT_STATES: usize = 1 << 22;

pub const ACCEPT_L8_SEED: u64 = 8;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid coupled model: {0}")]
    Spec(String),
    #[error("exact mode supports at most {max} positions and {max_states} states per coupled component; this spec has {length} positions and a component with {states} states, use Gibbs sampling")]
    ExactBound {
        length: usize,
        max: usize,
        states: f64,
        max_states: usize,
    },
    #[error("context: {0}")]
    Context(String),
    #[error("n must be ≥ 1")]
    EmptyRequest,
    #[error("spec line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One coupling matrix, stored for `i < j` with rows indexed by `x_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub i: usize,
    pub j: usize,
    /// `alphabet × alphabet`, row-major.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledModelSpec {
    length: usize,
    alphabet: usize,
    /// `length × alphabet`, row-major.
    fields: Vec<f64>,
    /// Sorted by `(i, j)`, `i < j`, no duplicates.
    couplings: Vec<Coupling>,
}

impl CoupledModelSpec {
    /// Couplings given as `(i, j, weights)` with `weights[a * A + b] = J_ij(a, b)`;
    /// pairs with `i > j` are stored transposed so `J_ij(a,b) = J_ji(b,a)`.
    pub fn new(
        length: usize,
        alphabet: usize,
        fields: Vec<f64>,
        couplings: Vec<(usize, usize, Vec<f64>)>,
    ) -> Result<Self, SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if length < 2 {
            return bad(format!("length {length} is below 2"));
        }
        if !(2..=NUM_RESIDUES).contains(&alphabet) {
            return bad(format!("alphabet {alphabet} outside 2..={NUM_RESIDUES}"));
        }
        if fields.len() != length * alphabet {
            return bad(format!("{} field values for {length}×{alphabet}", fields.len()));
        }
        if fields.iter().any(|v| !v.is_finite()) {
            return bad("non-finite field value".into());
        }
        let mut stored = Vec::with_capacity(couplings.len());
        for (i, j, w) in couplings {
            if i == j {
                return bad(format!("self-coupling at position {i}"));
            }
            if i >= length || j >= length {
                return bad(format!("pair ({i}, {j}) outside length {length}"));
            }
            if w.len() != alphabet * alphabet || w.iter().any(|v| !v.is_finite()) {
                return bad(format!("pair ({i}, {j}) needs {} finite weights", alphabet * alphabet));
            }
            let weights = if i < j {
                w
            } else {
                (0..alphabet * alphabet)
                    .map(|k| w[(k % alphabet) * alphabet + k / alphabet])
                    .collect()
            };
            stored.push(Coupling {
                i: i.min(j),
                j: i.max(j),
                weights,
            });
        }
        stored.sort_by_key(|c| (c.i, c.j));
        if let Some(w) = stored.windows(2).find(|w| (w[0].i, w[0].j) == (w[1].i, w[1].j)) {
            return bad(format!("pair ({}, {}) given twice", w[0].i, w[0].j));
        }
        Ok(CoupledModelSpec {
            length,
            alphabet,
            fields,
            couplings: stored,
        })
    }

    /// Independent uniform positions.
    pub fn uniform(length: usize, alphabet: usize) -> Result<Self, SynthError> {
        Self::new(length, alphabet, vec![0.0; length * alphabet], Vec::new())
    }

    /// Zero fields and coupling entries uniform in `[-scale, scale]` on `pairs`.
    pub fn random<R: Rng>(
        length: usize,
        alphabet: usize,
        pairs: &[(usize, usize)],
        scale: f64,
        rng: &mut R,
    ) -> Result<Self, SynthError> {
        let couplings = pairs
            .iter()
            .map(|&(i, j)| {
                let w = (0..alphabet * alphabet).map(|_| rng.gen_range(-scale..=scale)).collect();
                (i, j, w)
            })
            .collect();
        Self::new(length, alphabet, vec![0.0; length * alphabet], couplings)
    }

    /// Eight positions over 20 letters with three coupled pairs.
    pub fn accept_l8() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(ACCEPT_L8_SEED);
        Self::random(8, NUM_RESIDUES, &[(0, 5), (1, 3), (4, 7)], 1.5, &mut rng).expect("preset is valid")
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "accept-L8" | "accept-l8" => Some(Self::accept_l8()),
            _ => None,
        }
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    pub fn field(&self, i: usize, a: usize) -> f64 {
        self.fields[i * self.alphabet + a]
    }

    pub fn couplings(&self) -> &[Coupling] {
        &self.couplings
    }

    pub fn coupled_pairs(&self) -> Vec<(usize, usize)> {
        self.couplings.iter().map(|c| (c.i, c.j)).collect()
    }

    /// `J_ij(a, b)` for any ordered pair; 0 when uncoupled.
    pub fn coupling(&self, i: usize, j: usize, a: usize, b: usize) -> f64 {
        let (lo, hi, ra, rb) = if i < j { (i, j, a, b) } else { (j, i, b, a) };
        match self.couplings.binary_search_by_key(&(lo, hi), |c| (c.i, c.j)) {
            Ok(k) => self.couplings[k].weights[ra * self.alphabet + rb],
            Err(_) => 0.0,
        }
    }

    /// Unnormalized log-probability.
    pub fn energy(&self, x: &[u8]) -> f64 {
        let mut e: f64 = x.iter().enumerate().map(|(i, &a)| self.field(i, a as usize)).sum();
        for c in &self.couplings {
            e += c.weights[x[c.i] as usize * self.alphabet + x[c.j] as usize];
        }
        e
    }

    /// For each position, `(neighbor, coupling index, this position is the row)`.
    fn neighbors(&self) -> Vec<Vec<(usize, usize, bool)>> {
        let mut nb = vec![Vec::new(); self.length];
        for (k, c) in self.couplings.iter().enumerate() {
            nb[c.i].push((c.j, k, true));
            nb[c.j].push((c.i, k, false));
        }
        nb
    }

    /// Connected components of the coupling graph, each sorted, ordered by
    /// smallest position.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut parent: Vec<usize> = (0..self.length).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            p[x] = r;
            r
        }
        for c in &self.couplings {
            let (a, b) = (find(&mut parent, c.i), find(&mut parent, c.j));
            parent[a.max(b)] = a.min(b);
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut slot = vec![usize::MAX; self.length];
        for i in 0..self.length {
            let r = find(&mut parent, i);
            if slot[r] == usize::MAX {
                slot[r] = groups.len();
                groups.push(Vec::new());
            }
            groups[slot[r]].push(i);
        }
        groups
    }

    fn check_exact(&self) -> Result<(), SynthError> {
        let worst = self
            .components()
            .iter()
            .map(|c| (self.alphabet as f64).powi(c.len() as i32))
            .fold(0.0, f64::max);
        if self.length > EXACT_MAX_LENGTH || worst > EXACT_MAX_COMPONENT_STATES as f64 {
            return Err(SynthError::ExactBound {
                length: self.length,
                max: EXACT_MAX_LENGTH,
                states: worst,
                max_states: EXACT_MAX_COMPONENT_STATES,
            });
        }
        Ok(())
    }

    /// Plain-text form: `length`, `alphabet`, a `fields` table with one row
    /// per position, then one `pair i j` header per coupling followed by its
    /// matrix rows. `#` starts a comment.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let row = |s: &mut String, vals: &[f64]| {
            let cells: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", cells.join(" "));
        };
        let _ = writeln!(s, "# coupled model spec");
        let _ = writeln!(s, "length {}", self.length);
        let _ = writeln!(s, "alphabet {}", self.alphabet);
        let _ = writeln!(s, "fields");
        for r in self.fields.chunks(self.alphabet) {
            row(&mut s, r);
        }
        let _ = writeln!(s, "couplings {}", self.couplings.len());
        for c in &self.couplings {
            let _ = writeln!(s, "pair {} {}", c.i, c.j);
            for r in c.weights.chunks(self.alphabet) {
                row(&mut s, r);
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, SynthError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(n, l)| (n + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let mut last = 0;
        let mut next = |what: &str| -> Result<(usize, &str), SynthError> {
            let r = lines.next().ok_or(SynthError::Parse {
                line: last + 1,
                msg: format!("expected {what}, found end of input"),
            })?;
            last = r.0;
            Ok(r)
        };
        fn keyed(line: (usize, &str), key: &str, n: usize) -> Result<Vec<usize>, SynthError> {
            let mut it = line.1.split_whitespace();
            let err = |msg: String| SynthError::Parse { line: line.0, msg };
            if it.next() != Some(key) {
                return Err(err(format!("expected `{key}`")));
            }
            let vals: Vec<usize> = it
                .map(|t| t.parse().map_err(|_| err(format!("bad integer {t:?}"))))
                .collect::<Result<_, _>>()?;
            if vals.len() != n {
                return Err(err(format!("`{key}` takes {n} values")));
            }
            Ok(vals)
        }
        fn numbers(line: (usize, &str), n: usize) -> Result<Vec<f64>, SynthError> {
            let err = |msg: String| SynthError::Parse { line: line.0, msg };
            let vals: Vec<f64> = line
                .1
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| err(format!("bad number {t:?}"))))
                .collect::<Result<_, _>>()?;
            if vals.len() != n {
                return Err(err(format!("expected {n} values, found {}", vals.len())));
            }
            Ok(vals)
        }
        let length = keyed(next("length")?, "length", 1)?[0];
        let alphabet = keyed(next("alphabet")?, "alphabet", 1)?[0];
        if alphabet == 0 || alphabet > NUM_RESIDUES || length > 4096 {
            return Err(SynthError::Spec(format!("unsupported length {length} or alphabet {alphabet}")));
        }
        keyed(next("fields")?, "fields", 0)?;
        let mut fields = Vec::with_capacity(length * alphabet);
        for _ in 0..length {
            fields.extend(numbers(next("field row")?, alphabet)?);
        }
        let n_pairs = keyed(next("couplings")?, "couplings", 1)?[0];
        let mut couplings = Vec::with_capacity(n_pairs.min(length * length));
        for _ in 0..n_pairs {
            let ij = keyed(next("pair")?, "pair", 2)?;
            let mut w = Vec::with_capacity(alphabet * alphabet);
            for _ in 0..alphabet {
                w.extend(numbers(next("coupling row")?, alphabet)?);
            }
            couplings.push((ij[0], ij[1], w));
        }
        if let Ok((n, _)) = next("end") {
            return Err(SynthError::Parse {
                line: n,
                msg: "unexpected content after the last coupling".into(),
            });
        }
        Self::new(length, alphabet, fields, couplings)
    }

    pub fn write_file(&self, path: &Path) -> Result<(), SynthError> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn read_file(path: &Path) -> Result<Self, SynthError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Exact joint of two positions given every other position, with its marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactConditional {
    pub joint: JointDist,
    pub marginal_i: Dist,
    pub marginal_j: Dist,
}

/// `P(x_i, x_j | x_rest)` by enumerating the `A²` completions. Entries of
/// `context` at `i` and `j` are ignored.
pub fn exact_conditional(
    spec: &CoupledModelSpec,
    i: usize,
    j: usize,
    context: &[u8],
) -> Result<ExactConditional, SynthError> {
    if spec.length > EXACT_MAX_LENGTH {
        return Err(SynthError::ExactBound {
            length: spec.length,
            max: EXACT_MAX_LENGTH,
            states: (spec.alphabet as f64).powi(spec.length as i32),
            max_states: EXACT_MAX_COMPONENT_STATES,
        });
    }
    if i == j || i >= spec.length || j >= spec.length {
        return Err(SynthError::Context(format!("invalid pair ({i}, {j})")));
    }
    if context.len() != spec.length {
        return Err(SynthError::Context(format!(
            "{} positions given for length {}",
            context.len(),
            spec.length
        )));
    }
    if let Some(p) = (0..spec.length).find(|&p| p != i && p != j && context[p] as usize >= spec.alphabet) {
        return Err(SynthError::Context(format!("letter {} at position {p} outside the alphabet", context[p])));
    }
    let a_n = spec.alphabet;
    let single = |pos: usize, a: usize| -> f64 {
        let mut e = spec.field(pos, a);
        for k in (0..spec.length).filter(|&k| k != i && k != j) {
            e += spec.coupling(pos, k, a, context[k] as usize);
        }
        e
    };
    let ei: Vec<f64> = (0..a_n).map(|a| single(i, a)).collect();
    let ej: Vec<f64> = (0..a_n).map(|b| single(j, b)).collect();
    let mut logits = Vec::with_capacity(a_n * a_n);
    for a in 0..a_n {
        for b in 0..a_n {
            logits.push(ei[a] + ej[b] + spec.coupling(i, j, a, b));
        }
    }
    let joint = JointDist::from_logits(a_n, a_n, &logits)?;
    Ok(ExactConditional {
        marginal_i: Dist::new(joint.marginal_a())?,
        marginal_j: Dist::new(joint.marginal_b())?,
        joint,
    })
}

/// Enumerated law of one coupled component. States are mixed-radix with the
/// first position most significant.
#[derive(Clone, Debug)]
pub struct ComponentLaw {
    pub positions: Vec<usize>,
    pub probs: Vec<f64>,
}

impl ComponentLaw {
    fn letter(&self, state: usize, slot: usize, alphabet: usize) -> usize {
        let shift = self.positions.len() - 1 - slot;
        state / alphabet.pow(shift as u32) % alphabet
    }
}

/// Exact law of every connected component.
pub fn component_laws(spec: &CoupledModelSpec) -> Result<Vec<ComponentLaw>, SynthError> {
    spec.check_exact()?;
    let a_n = spec.alphabet;
    let mut out = Vec::new();
    for positions in spec.components() {
        let n_states = a_n.pow(positions.len() as u32);
        let internal: Vec<&Coupling> = spec
            .couplings
            .iter()
            .filter(|c| positions.binary_search(&c.i).is_ok())
            .collect();
        let slot = |p: usize| positions.binary_search(&p).expect("member");
        let mut logp = Vec::with_capacity(n_states);
        let mut x = vec![0usize; positions.len()];
        for _ in 0..n_states {
            let mut e: f64 = positions.iter().zip(&x).map(|(&p, &a)| spec.field(p, a)).sum();
            for c in &internal {
                e += c.weights[x[slot(c.i)] * a_n + x[slot(c.j)]];
            }
            logp.push(e);
            for d in (0..x.len()).rev() {
                x[d] += 1;
                if x[d] < a_n {
                    break;
                }
                x[d] = 0;
            }
        }
        let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logp.iter().map(|&e| (e - max).exp()).collect();
        let z: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= z);
        out.push(ComponentLaw { positions, probs });
    }
    Ok(out)
}

/// Exact `P(x_i = a, x_j = b)` for every `i < j`, as `(i, j, A×A table)`.
pub fn exact_pair_marginals(spec: &CoupledModelSpec) -> Result<Vec<(usize, usize, Vec<f64>)>, SynthError> {
    let laws = component_laws(spec)?;
    let a_n = spec.alphabet;
    let mut owner = vec![(0usize, 0usize); spec.length];
    for (c, law) in laws.iter().enumerate() {
        for (s, &p) in law.positions.iter().enumerate() {
            owner[p] = (c, s);
        }
    }
    let single: Vec<Vec<f64>> = (0..spec.length)
        .map(|p| {
            let (c, s) = owner[p];
            let mut m = vec![0.0; a_n];
            for (state, &pr) in laws[c].probs.iter().enumerate() {
                m[laws[c].letter(state, s, a_n)] += pr;
            }
            m
        })
        .collect();
    let mut out = Vec::new();
    for i in 0..spec.length {
        for j in i + 1..spec.length {
            let ((ci, si), (cj, sj)) = (owner[i], owner[j]);
            let mut t = vec![0.0; a_n * a_n];
            if ci == cj {
                let law = &laws[ci];
                for (state, &pr) in law.probs.iter().enumerate() {
                    t[law.letter(state, si, a_n) * a_n + law.letter(state, sj, a_n)] += pr;
                }
            } else {
                for a in 0..a_n {
                    for b in 0..a_n {
                        t[a * a_n + b] = single[i][a] * single[j][b];
                    }
                }
            }
            out.push((i, j, t));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GibbsConfig {
    pub burn_in_sweeps: usize,
    pub thin_sweeps: usize,
    /// Independent chains, each with its own derived seed; samples are
    /// concatenated in chain order.
    pub chains: usize,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig {
            burn_in_sweeps: 1000,
            thin_sweeps: 10,
            chains: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SamplerMode {
    /// Exact when the spec is within the exact bounds, Gibbs otherwise.
    Auto(GibbsConfig),
    Exact,
    Gibbs(GibbsConfig),
}

/// `n` sequences as raw letters in `0..alphabet`.
pub fn sample_letters<R: Rng>(
    spec: &CoupledModelSpec,
    n: usize,
    mode: &SamplerMode,
    rng: &mut R,
) -> Result<Vec<Vec<u8>>, SynthError> {
    if n == 0 {
        return Err(SynthError::EmptyRequest);
    }
    match mode {
        SamplerMode::Exact => sample_exact(spec, n, rng),
        SamplerMode::Gibbs(cfg) => Ok(sample_gibbs(spec, n, cfg, rng)),
        SamplerMode::Auto(cfg) => match spec.check_exact() {
            Ok(()) => sample_exact(spec, n, rng),
            Err(_) => Ok(sample_gibbs(spec, n, cfg, rng)),
        },
    }
}

/// `n` sequences with ids `synth_000000`, … .
pub fn sample_sequences<R: Rng>(
    spec: &CoupledModelSpec,
    n: usize,
    mode: &SamplerMode,
    rng: &mut R,
) -> Result<Vec<SequenceRecord>, SynthError> {
    sample_letters(spec, n, mode, rng)?
        .into_iter()
        .enumerate()
        .map(|(k, x)| SequenceRecord::new(format!("synth_{k:06}"), x).map_err(|e| SynthError::Spec(e.to_string())))
        .collect()
}

fn sample_exact<R: Rng>(spec: &CoupledModelSpec, n: usize, rng: &mut R) -> Result<Vec<Vec<u8>>, SynthError> {
    let laws = component_laws(spec)?;
    let cdfs: Vec<Vec<f64>> = laws
        .iter()
        .map(|l| {
            let mut acc = 0.0;
            l.probs
                .iter()
                .map(|p| {
                    acc += p;
                    acc
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = vec![0u8; spec.length];
        for (law, cdf) in laws.iter().zip(&cdfs) {
            let u = rng.gen::<f64>() * cdf[cdf.len() - 1];
            let state = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            for (s, &p) in law.positions.iter().enumerate() {
                x[p] = law.letter(state, s, spec.alphabet) as u8;
            }
        }
        out.push(x);
    }
    Ok(out)
}

fn gibbs_sweep<R: Rng>(spec: &CoupledModelSpec, nb: &[Vec<(usize, usize, bool)>], x: &mut [u8], rng: &mut R) {
    let a_n = spec.alphabet;
    let mut w = vec![0.0f64; a_n];
    for i in 0..spec.length {
        for (a, wa) in w.iter_mut().enumerate() {
            let mut e = spec.field(i, a);
            for &(k, c, row) in &nb[i] {
                let m = &spec.couplings[c].weights;
                let xk = x[k] as usize;
                e += if row { m[a * a_n + xk] } else { m[xk * a_n + a] };
            }
            *wa = e;
        }
        let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in w.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let mut u = rng.gen::<f64>() * total;
        let mut pick = a_n - 1;
        for (a, &v) in w.iter().enumerate() {
            if u < v {
                pick = a;
                break;
            }
            u -= v;
        }
        x[i] = pick as u8;
    }
}

fn sample_gibbs<R: Rng>(spec: &CoupledModelSpec, n: usize, cfg: &GibbsConfig, rng: &mut R) -> Vec<Vec<u8>> {
    let chains = cfg.chains.max(1);
    let base: u64 = rng.gen();
    let nb = spec.neighbors();
    let per: Vec<usize> = (0..chains).map(|c| n / chains + usize::from(c < n % chains)).collect();
    let runs: Vec<Vec<Vec<u8>>> = per
        .par_iter()
        .enumerate()
        .map(|(c, &count)| {
            let mut r = ChaCha8Rng::seed_from_u64(derive_seed(base, 0, c as u64));
            let mut x: Vec<u8> = (0..spec.length).map(|_| r.gen_range(0..spec.alphabet) as u8).collect();
            for _ in 0..cfg.burn_in_sweeps {
                gibbs_sweep(spec, &nb, &mut x, &mut r);
            }
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                for _ in 0..cfg.thin_sweeps.max(1) {
                    gibbs_sweep(spec, &nb, &mut x, &mut r);
                }
                out.push(x.clone());
            }
            out
        })
        .collect();
    runs.into_iter().flatten().collect()
}

/// True exactly on the coupled pairs, both orientations.
pub fn contacts_from_spec(spec: &CoupledModelSpec) -> ContactMap {
    ContactMap::from_pairs(spec.length, &spec.coupled_pairs()).expect("coupled pairs lie inside the spec")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn two_by_two() -> CoupledModelSpec {
        CoupledModelSpec::new(2, 2, vec![0.0; 4], vec![(0, 1, vec![1.0, 0.0, 0.0, 1.0])]).unwrap()
    }

    #[test]
    fn construction_enforces_symmetry() {
        let w: Vec<f64> = (0..4).map(|v| v as f64).collect();
        let s = CoupledModelSpec::new(3, 2, vec![0.0; 6], vec![(2, 0, w)]).unwrap();
        assert_eq!(s.coupled_pairs(), vec![(0, 2)]);
        for a in 0..2 {
            for b in 0..2 {
                assert_eq!(s.coupling(0, 2, a, b), s.coupling(2, 0, b, a));
                assert_eq!(s.coupling(2, 0, a, b), (a * 2 + b) as f64);
            }
        }
        assert_eq!(s.coupling(0, 1, 1, 1), 0.0);
        assert!(CoupledModelSpec::new(3, 2, vec![0.0; 6], vec![(1, 1, vec![0.0; 4])]).is_err());
        assert!(CoupledModelSpec::new(3, 2, vec![0.0; 6], vec![(0, 1, vec![0.0; 4]), (1, 0, vec![0.0; 4])]).is_err());
        assert!(CoupledModelSpec::new(3, 2, vec![0.0; 5], vec![]).is_err());
    }

    #[test]
    fn exact_two_letter_joint() {
        let c = exact_conditional(&two_by_two(), 0, 1, &[0, 0]).unwrap();
        let e = 1f64.exp();
        let z = 2.0 * e + 2.0;
        let want = [e / z, 1.0 / z, 1.0 / z, e / z];
        for (g, w) in c.joint.probs().iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!((c.marginal_i.probs()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_couplings_factorize() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fields: Vec<f64> = (0..5 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = CoupledModelSpec::new(5, 4, fields, vec![]).unwrap();
        let c = exact_conditional(&s, 1, 3, &[0, 9, 2, 9, 3]).unwrap();
        let prod = JointDist::product(&c.marginal_i, &c.marginal_j);
        for (a, b) in c.joint.probs().iter().zip(prod.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_bound_and_context_errors() {
        let long = CoupledModelSpec::uniform(13, 4).unwrap();
        assert!(matches!(exact_conditional(&long, 0, 1, &[0; 13]), Err(SynthError::ExactBound { .. })));
        let s = two_by_two();
        assert!(exact_conditional(&s, 0, 0, &[0, 0]).is_err());
        assert!(exact_conditional(&s, 0, 1, &[0]).is_err());
        let three = CoupledModelSpec::uniform(3, 2).unwrap();
        assert!(exact_conditional(&three, 0, 1, &[0, 0, 5]).is_err());
        assert!(matches!(
            sample_letters(&long, 1, &SamplerMode::Exact, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(SynthError::ExactBound { .. })
        ));
        assert!(matches!(
            sample_letters(&s, 0, &SamplerMode::Exact, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(SynthError::EmptyRequest)
        ));
    }

    #[test]
    fn sampling_is_seeded() {
        let s = CoupledModelSpec::accept_l8();
        let draw = |mode: &SamplerMode| sample_letters(&s, 50, mode, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(draw(&SamplerMode::Exact), draw(&SamplerMode::Exact));
        let g = SamplerMode::Gibbs(GibbsConfig {
            burn_in_sweeps: 20,
            thin_sweeps: 2,
            chains: 3,
        });
        assert_eq!(draw(&g), draw(&g));
        assert_eq!(draw(&g).len(), 50);
    }

    #[test]
    fn two_letter_sample_frequency() {
        let n = 50_000;
        let xs = sample_letters(&two_by_two(), n, &SamplerMode::Exact, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let hits = xs.iter().filter(|x| x[0] == 0 && x[1] == 0).count() as f64;
        let e = 1f64.exp();
        let p = e / (2.0 * e + 2.0);
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits / n as f64 - p).abs() < 2.576 * sd);
    }

    #[test]
    fn component_laws_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = CoupledModelSpec::random(5, 3, &[(0, 2), (2, 4), (1, 3)], 1.0, &mut rng).unwrap();
        assert_eq!(s.components(), vec![vec![0, 2, 4], vec![1, 3]]);
        // brute force over all 3^5 sequences
        let mut table = vec![0.0; 9];
        let mut z = 0.0;
        for code in 0..243usize {
            let x: Vec<u8> = (0..5).map(|p| (code / 3usize.pow(4 - p as u32) % 3) as u8).collect();
            let w = s.energy(&x).exp();
            z += w;
            table[x[2] as usize * 3 + x[3] as usize] += w;
        }
        let pairs = exact_pair_marginals(&s).unwrap();
        let (_, _, t) = pairs.iter().find(|(i, j, _)| (*i, *j) == (2, 3)).unwrap();
        for (a, b) in t.iter().zip(&table) {
            assert!((a - b / z).abs() < 1e-12);
        }
    }

    #[test]
    fn text_round_trip() {
        let s = CoupledModelSpec::accept_l8();
        assert_eq!(CoupledModelSpec::from_text(&s.to_text()).unwrap(), s);
        let err = CoupledModelSpec::from_text("length 2\nalphabet 2\nfields\n0 0\n0 x\n").unwrap_err();
        assert!(matches!(err, SynthError::Parse { line: 5, .. }), "{err}");
    }

    #[test]
    fn contact_map_from_spec() {
        let empty = contacts_from_spec(&CoupledModelSpec::uniform(6, 2).unwrap());
        assert_eq!(empty.count(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = CoupledModelSpec::random(7, 2, &[(1, 5)], 1.0, &mut rng).unwrap();
        let m = contacts_from_spec(&s);
        for i in 0..7 {
            assert!(!m.get(i, i));
            for j in 0..7 {
                assert_eq!(m.get(i, j), (i, j) == (1, 5) || (i, j) == (5, 1));
            }
        }
    }

    #[test]
    fn accept_preset_shape() {
        let s = CoupledModelSpec::preset("accept-L8").unwrap();
        assert_eq!((s.length(), s.alphabet()), (8, 20));
        assert_eq!(s.coupled_pairs(), vec![(0, 5), (1, 3), (4, 7)]);
        assert!(s.couplings().iter().all(|c| c.weights.iter().all(|w| w.abs() <= 1.5)));
    }

    proptest! {
        #[test]
        fn conditional_marginalizes(seed in 0u64..500, i in 0usize..4, dj in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = CoupledModelSpec::random(4, 3, &[(0, 1), (1, 2), (0, 3)], 2.0, &mut rng).unwrap();
            let j = (i + dj) % 4;
            let ctx: Vec<u8> = (0..4).map(|_| rng.gen_range(0..3)).collect();
            let c = exact_conditional(&s, i, j, &ctx).unwrap();
            for a in 0..3 {
                let row: f64 = (0..3).map(|b| c.joint.get(a, b)).sum();
                prop_assert!((row - c.marginal_i.probs()[a]).abs() < 1e-12);
            }
            prop_assert!(c.joint.probs().iter().all(|&p| p > 0.0));
        }

        #[test]
        fn couplings_make_pairs_dependent(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = CoupledModelSpec::random(3, 4, &[(0, 2)], 1.0, &mut rng).unwrap();
            let c = exact_conditional(&s, 0, 2, &[0, 1, 0]).unwrap();
            let kl = crate::evalkit::kl_product_vs_joint(&c.marginal_i, &c.marginal_j, &c.joint).unwrap();
            prop_assert!(kl > 0.0);
        }
    }
}
