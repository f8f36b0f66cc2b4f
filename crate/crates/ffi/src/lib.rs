//! C ABI for `latent-align`.
//!
//! Conventions:
//!
//! * Every fallible function returns an [`LaStatus`]; `LA_STATUS_OK` is 0.
//! * On failure, [`la_last_error`] returns a message for the calling thread,
//!   valid until the next call into this library from that thread.
//! * Strings returned through out-parameters are owned by the caller and
//!   must be released with [`la_string_free`].
//! * Symbol ids follow the library: 0 is BLANK, user tokens are `1..=n`.
//!   In partial alignments, a negative entry marks a MASK frame.
//! * Panics never cross the boundary; they surface as `LA_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use latent_align::alignment::{collapse, Alignment, PartialAlignment, TokenSeq};
use latent_align::checkpoint;
use latent_align::ctc::{ctc_loss, LogitLattice, LossOutput};
use latent_align::eval::bleu;
use latent_align::imputer::imputer_loss;
use latent_align::model::AlignmentModel;
use latent_align::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A loaded CTC or Imputer model. Read-only after loading, so one handle may
/// serve concurrent decodes.
pub struct LaModel {
    inner: AlignmentModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("no interior NUL"));
}

fn status_of(e: &Error) -> LaStatus {
    match e {
        Error::Io(_) => LaStatus::Io,
        Error::Parse { .. } | Error::UnknownToken { .. } => LaStatus::Parse,
        Error::Checkpoint(_) => LaStatus::Checkpoint,
        _ => LaStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into a status.
fn guard<F>(f: F) -> LaStatus
where
    F: FnOnce() -> Result<(), (LaStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LaStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LaStatus::Panic
        }
    }
}

fn lib(e: Error) -> (LaStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (LaStatus, String) {
    (LaStatus::NullPointer, format!("{name} is null"))
}

fn invalid(msg: impl Into<String>) -> (LaStatus, String) {
    (LaStatus::InvalidArgument, msg.into())
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, (LaStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], (LaStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message for the last failure on this thread; empty if none.
#[no_mangle]
pub extern "C" fn la_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn la_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn la_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a CTC or Imputer checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn la_model_load(path: *const c_char, out: *mut *mut LaModel) -> LaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        let (model, _) = checkpoint::load_model(path).map_err(lib)?;
        *out = Box::into_raw(Box::new(LaModel { inner: model }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`la_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn la_model_free(model: *mut LaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Lattice width `|V| + 1` of a loaded model, or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn la_model_width(model: *const LaModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.width())
}

/// Decodes one space-separated source sentence with `steps`-step top-k
/// decoding and stores the space-separated output in `*out`.
///
/// # Safety
/// `model` must be a live handle, `source` a NUL-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn la_model_decode(
    model: *const LaModel,
    source: *const c_char,
    steps: usize,
    out: *mut *mut c_char,
) -> LaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let text = c_str(source, "source")?;
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(invalid("source is empty"));
        }
        let x = m.vocab.encode(&tokens).map_err(lib)?;
        let y = m.decode(&x, steps).map_err(lib)?.output;
        let s = CString::new(m.vocab.decode(&y).join(" ")).expect("tokens have no NUL");
        *out = s.into_raw();
        Ok(())
    })
}

unsafe fn run_loss(
    scores: *const f64,
    rows: usize,
    cols: usize,
    grad_out: *mut f64,
    nll_out: *mut f64,
    loss: impl FnOnce(&LogitLattice) -> Result<LossOutput, Error>,
) -> Result<(), (LaStatus, String)> {
    if nll_out.is_null() {
        return Err(null("nll_out"));
    }
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| invalid("rows * cols overflows"))?;
    let scores = slice(scores, n, "scores")?;
    let lattice = LogitLattice::new(rows, cols, scores.to_vec()).map_err(lib)?;
    let out = loss(&lattice).map_err(lib)?;
    *nll_out = out.nll;
    if !grad_out.is_null() {
        std::slice::from_raw_parts_mut(grad_out, n).copy_from_slice(&out.grad);
    }
    Ok(())
}

/// CTC negative log-likelihood of `target` under a row-major `rows x cols`
/// score lattice (unnormalized; a softmax is applied per row). Writes the
/// loss to `*nll_out` (+infinity if no alignment exists) and, when
/// `grad_out` is not null, `rows * cols` score gradients.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn la_ctc_loss(
    scores: *const f64,
    rows: usize,
    cols: usize,
    target: *const usize,
    target_len: usize,
    nll_out: *mut f64,
    grad_out: *mut f64,
) -> LaStatus {
    guard(|| {
        let y = TokenSeq(slice(target, target_len, "target")?.to_vec());
        run_loss(scores, rows, cols, grad_out, nll_out, |l| ctc_loss(l, &y))
    })
}

/// Imputer loss: like [`la_ctc_loss`] but restricted to alignments that
/// agree with `partial` (`rows` entries; negative = MASK) at observed frames.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn la_imputer_loss(
    scores: *const f64,
    rows: usize,
    cols: usize,
    target: *const usize,
    target_len: usize,
    partial: *const i64,
    nll_out: *mut f64,
    grad_out: *mut f64,
) -> LaStatus {
    guard(|| {
        let y = TokenSeq(slice(target, target_len, "target")?.to_vec());
        let p = PartialAlignment(
            slice(partial, rows, "partial")?
                .iter()
                .map(|&f| usize::try_from(f).ok())
                .collect(),
        );
        run_loss(scores, rows, cols, grad_out, nll_out, |l| imputer_loss(l, &y, &p))
    })
}

/// Collapses an alignment (merge repeats, then drop BLANK). Writes up to
/// `out_cap` ids to `out` and the full length to `*out_len`; returns
/// `LA_STATUS_BUFFER_TOO_SMALL` if `out_cap` is short.
///
/// # Safety
/// `frames` must hold `len` ids and `out` `out_cap` slots.
#[no_mangle]
pub unsafe extern "C" fn la_collapse(
    frames: *const usize,
    len: usize,
    out: *mut usize,
    out_cap: usize,
    out_len: *mut usize,
) -> LaStatus {
    guard(|| {
        if out_len.is_null() {
            return Err(null("out_len"));
        }
        let a = Alignment(slice(frames, len, "frames")?.to_vec());
        let y = collapse(&a);
        *out_len = y.len();
        if y.len() > out_cap {
            return Err((
                LaStatus::BufferTooSmall,
                format!("output needs {} slots, {out_cap} given", y.len()),
            ));
        }
        if !y.is_empty() {
            if out.is_null() {
                return Err(null("out"));
            }
            std::slice::from_raw_parts_mut(out, y.len()).copy_from_slice(y.ids());
        }
        Ok(())
    })
}

unsafe fn corpus(
    ids: *const usize,
    lens: *const usize,
    count: usize,
    name: &str,
) -> Result<Vec<TokenSeq>, (LaStatus, String)> {
    let lens = slice(lens, count, name)?;
    let total = lens
        .iter()
        .try_fold(0usize, |a, &b| a.checked_add(b))
        .ok_or_else(|| invalid(format!("{name} lengths overflow")))?;
    let ids = slice(ids, total, name)?;
    let mut out = Vec::with_capacity(count);
    let mut off = 0;
    for &n in lens {
        out.push(TokenSeq(ids[off..off + n].to_vec()));
        off += n;
    }
    Ok(out)
}

/// Corpus BLEU-4 in `[0, 100]`. Each corpus is `count` sequences stored
/// back to back in `*_ids` with lengths in `*_lens`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn la_bleu(
    hyp_ids: *const usize,
    hyp_lens: *const usize,
    ref_ids: *const usize,
    ref_lens: *const usize,
    count: usize,
    out: *mut f64,
) -> LaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let h = corpus(hyp_ids, hyp_lens, count, "hypotheses")?;
        let r = corpus(ref_ids, ref_lens, count, "references")?;
        *out = bleu(&h, &r).map_err(lib)?;
        Ok(())
    })
}
