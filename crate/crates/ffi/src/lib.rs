//! C interface to `pmlm`.
//!
//! Every fallible function returns a [`PmlmStatus`]; on failure the message
//! is available from [`pmlm_last_error`] on the same thread until the next
//! call. Objects are opaque handles released with their `_free` function.
//! Residues cross the boundary as ids `0..20` in the order `ACDEFGHIKLMNPQRSTVWY`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pmlm::encoder::Model;
use pmlm::evalkit::{kl_product_vs_joint, predict_masked_pairs, precision_at_l5, ContactMap, PairScores, RangeFilter};
use pmlm::heads::delta_acc;
use pmlm::seqio::SequenceRecord;
use pmlm::synthgen::{exact_conditional, sample_letters, CoupledModelSpec, GibbsConfig, SamplerMode};
use pmlm::trainer::load_checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Number of residue types.
pub const PMLM_NUM_RESIDUES: usize = 20;
/// Number of ordered residue pairs.
pub const PMLM_NUM_PAIRS: usize = 400;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PmlmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Model = 5,
    Synth = 6,
    Eval = 7,
    Panic = 8,
}

/// Pre-trained encoder with its heads.
pub struct PmlmModel {
    inner: Model<f32>,
}

/// Coupled-model specification for synthetic data.
pub struct PmlmSpec {
    inner: CoupledModelSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(PmlmStatus, String);

impl Failure {
    fn new(status: PmlmStatus, msg: impl ToString) -> Self {
        Failure(status, msg.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PmlmStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PmlmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PmlmStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(PmlmStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(PmlmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::new(PmlmStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(Failure::new(PmlmStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::new(PmlmStatus::NullPointer, "handle is null"))
}

/// Message for the last failure on this thread, or null. Owned by the library.
#[no_mangle]
pub extern "C" fn pmlm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pmlm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `acc_pmlm - acc_mlm²`.
#[no_mangle]
pub extern "C" fn pmlm_delta_acc(acc_pmlm: f64, acc_mlm: f64) -> f64 {
    delta_acc(acc_pmlm, acc_mlm)
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pmlm_model_load(path: *const c_char, out: *mut *mut PmlmModel) -> PmlmStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, 1, "out")?;
        out[0] = ptr::null_mut();
        let ck = load_checkpoint(Path::new(path)).map_err(|e| {
            let status = match e {
                pmlm::trainer::TrainError::Io(_) => PmlmStatus::Io,
                _ => PmlmStatus::Format,
            };
            Failure::new(status, e)
        })?;
        out[0] = Box::into_raw(Box::new(PmlmModel { inner: ck.model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`pmlm_model_load`] and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn pmlm_model_free(model: *mut PmlmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Longest sequence the model accepts, in residues; 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pmlm_model_max_residues(model: *const PmlmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.max_len.saturating_sub(2))
}

/// Mask positions `i` and `j` of `residues` and write the pair-head joint
/// (`out_joint`, 400 entries, row-major over `(x_i, x_j)`), the token-head
/// marginals (`out_marginal_i`, `out_marginal_j`, 20 each) and
/// `KL(marginal_i·marginal_j ‖ joint)` into `out_kl`. Any output may be null.
///
/// # Safety
/// `residues` must hold `len` bytes; non-null outputs must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn pmlm_model_predict_pair(
    model: *const PmlmModel,
    residues: *const u8,
    len: usize,
    i: usize,
    j: usize,
    out_joint: *mut f64,
    out_marginal_i: *mut f64,
    out_marginal_j: *mut f64,
    out_kl: *mut f64,
) -> PmlmStatus {
    guard(|| {
        let model = handle(model)?;
        let residues = slice_arg(residues, len, "residues")?;
        let seq = SequenceRecord::new("ffi", residues.to_vec())
            .map_err(|e| Failure::new(PmlmStatus::InvalidArgument, e))?;
        let pred = predict_masked_pairs(&model.inner, &seq, &[(i, j)])
            .map_err(|e| Failure::new(PmlmStatus::InvalidArgument, e))?
            .pop()
            .ok_or_else(|| Failure::new(PmlmStatus::Model, "no prediction"))?;
        if !out_joint.is_null() {
            out_arg(out_joint, PMLM_NUM_PAIRS, "out_joint")?.copy_from_slice(pred.joint.probs());
        }
        if !out_marginal_i.is_null() {
            out_arg(out_marginal_i, PMLM_NUM_RESIDUES, "out_marginal_i")?.copy_from_slice(pred.marginal_i.probs());
        }
        if !out_marginal_j.is_null() {
            out_arg(out_marginal_j, PMLM_NUM_RESIDUES, "out_marginal_j")?.copy_from_slice(pred.marginal_j.probs());
        }
        if !out_kl.is_null() {
            *out_kl = kl_product_vs_joint(&pred.marginal_i, &pred.marginal_j, &pred.joint)
                .map_err(|e| Failure::new(PmlmStatus::Eval, e))?;
        }
        Ok(())
    })
}

/// Named spec such as `accept-L8`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pmlm_spec_preset(name: *const c_char, out: *mut *mut PmlmSpec) -> PmlmStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        let out = out_arg(out, 1, "out")?;
        out[0] = ptr::null_mut();
        let inner = CoupledModelSpec::preset(name)
            .ok_or_else(|| Failure::new(PmlmStatus::InvalidArgument, format!("unknown spec preset `{name}`")))?;
        out[0] = Box::into_raw(Box::new(PmlmSpec { inner }));
        Ok(())
    })
}

/// Spec from a file in the plain-text coupled-model format.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pmlm_spec_read(path: *const c_char, out: *mut *mut PmlmSpec) -> PmlmStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, 1, "out")?;
        out[0] = ptr::null_mut();
        let inner = CoupledModelSpec::read_file(Path::new(path)).map_err(|e| {
            let status = match e {
                pmlm::synthgen::SynthError::Io(_) => PmlmStatus::Io,
                _ => PmlmStatus::Format,
            };
            Failure::new(status, e)
        })?;
        out[0] = Box::into_raw(Box::new(PmlmSpec { inner }));
        Ok(())
    })
}

/// # Safety
/// `spec` must come from a `pmlm_spec_*` constructor and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn pmlm_spec_free(spec: *mut PmlmSpec) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// # Safety
/// `spec` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pmlm_spec_length(spec: *const PmlmSpec) -> usize {
    spec.as_ref().map_or(0, |s| s.inner.length())
}

/// # Safety
/// `spec` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pmlm_spec_alphabet(spec: *const PmlmSpec) -> usize {
    spec.as_ref().map_or(0, |s| s.inner.alphabet())
}

/// Exact `P(x_i, x_j | context)` as an `A×A` row-major table in `out_joint`.
/// `context` holds one letter per position; entries at `i` and `j` are ignored.
///
/// # Safety
/// `context` must hold `len` bytes and `out_joint` `alphabet²` doubles.
#[no_mangle]
pub unsafe extern "C" fn pmlm_spec_exact_conditional(
    spec: *const PmlmSpec,
    i: usize,
    j: usize,
    context: *const u8,
    len: usize,
    out_joint: *mut f64,
) -> PmlmStatus {
    guard(|| {
        let spec = &handle(spec)?.inner;
        let context = slice_arg(context, len, "context")?;
        let out = out_arg(out_joint, spec.alphabet() * spec.alphabet(), "out_joint")?;
        let c = exact_conditional(spec, i, j, context).map_err(|e| Failure::new(PmlmStatus::Synth, e))?;
        out.copy_from_slice(c.joint.probs());
        Ok(())
    })
}

/// Draw `n` sequences into `out` (`n × length` letters, row-major). `gibbs`
/// nonzero selects Gibbs sampling with default burn-in and thinning.
///
/// # Safety
/// `out` must hold `n × length` bytes.
#[no_mangle]
pub unsafe extern "C" fn pmlm_spec_sample(
    spec: *const PmlmSpec,
    n: usize,
    seed: u64,
    gibbs: i32,
    out: *mut u8,
) -> PmlmStatus {
    guard(|| {
        let spec = &handle(spec)?.inner;
        if n == 0 {
            return Err(Failure::new(PmlmStatus::InvalidArgument, "n must be ≥ 1"));
        }
        let l = spec.length();
        let out = out_arg(out, n * l, "out")?;
        let mode = if gibbs != 0 {
            SamplerMode::Gibbs(GibbsConfig::default())
        } else {
            SamplerMode::Exact
        };
        let seqs = sample_letters(spec, n, &mode, &mut ChaCha8Rng::seed_from_u64(seed))
            .map_err(|e| Failure::new(PmlmStatus::Synth, e))?;
        for (row, s) in out.chunks_exact_mut(l).zip(&seqs) {
            row.copy_from_slice(s);
        }
        Ok(())
    })
}

/// Precision of the top `max(1, ⌊L/5⌋)` pairs by score among pairs with
/// separation at least `min_separation` (strictly greater if `strict`).
/// `scores` and `truth` are `L×L` row-major; `truth` is nonzero for contacts.
///
/// # Safety
/// `scores` and `truth` must hold `length²` entries; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pmlm_precision_at_l5(
    scores: *const f64,
    truth: *const u8,
    length: usize,
    min_separation: usize,
    strict: i32,
    out: *mut f64,
) -> PmlmStatus {
    guard(|| {
        let n = length * length;
        let scores = slice_arg(scores, n, "scores")?;
        let truth = slice_arg(truth, n, "truth")?;
        let out = out_arg(out, 1, "out")?;
        let pairs: Vec<(usize, usize)> = (0..length)
            .flat_map(|i| (i + 1..length).map(move |j| (i, j)))
            .filter(|&(i, j)| truth[i * length + j] != 0 || truth[j * length + i] != 0)
            .collect();
        let map = ContactMap::from_pairs(length, &pairs).map_err(|e| Failure::new(PmlmStatus::InvalidArgument, e))?;
        let sc = PairScores {
            id: String::new(),
            length,
            scores: scores.to_vec(),
        };
        let filter = RangeFilter {
            min_separation,
            strict: strict != 0,
        };
        out[0] = precision_at_l5(&sc, &map, filter).map_err(|e| Failure::new(PmlmStatus::Eval, e))?;
        Ok(())
    })
}
