//! C ABI over the mmte library.
//!
//! Every function returns an [`MmteStatus`]; results go through out-pointers. On failure
//! the message is kept per thread and can be read with [`mmte_last_error`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mmte::corpus::sampling_distribution;
use mmte::metrics::{bleu, span_f1};
use mmte::model::{encode, extract_encoder, Checkpoint, CheckpointKind};
use mmte::tokenizer::SubwordModel;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmteStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// The output buffer is too small; the required length was written to the length out-pointer.
    BufferTooSmall = 3,
    Invalid = 4,
    Shape = 5,
    Parse = 6,
    Io = 7,
    Checkpoint = 8,
    UnknownId = 9,
    AllPad = 10,
    Other = 11,
    Panic = 12,
}

impl From<&mmte::Error> for MmteStatus {
    fn from(e: &mmte::Error) -> Self {
        use mmte::Error as E;
        match e {
            E::Invalid(_) | E::Config(_) | E::VocabTooSmall { .. } => MmteStatus::Invalid,
            E::Shape(_) => MmteStatus::Shape,
            E::Parse { .. } | E::NoRecords(_) => MmteStatus::Parse,
            E::Io(_) => MmteStatus::Io,
            E::Checkpoint(_) => MmteStatus::Checkpoint,
            E::UnknownId(_) => MmteStatus::UnknownId,
            E::AllPad => MmteStatus::AllPad,
            E::NonFinite(_) | E::Diverged(_) | E::Audit(_) => MmteStatus::Other,
        }
    }
}

/// Opaque subword tokenizer.
pub struct MmteTokenizer(SubwordModel);

/// Opaque encoder weights.
pub struct MmteEncoder(Checkpoint);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Fail(MmteStatus);

impl From<mmte::Error> for Fail {
    fn from(e: mmte::Error) -> Self {
        set_error(e.to_string());
        Fail(MmteStatus::from(&e))
    }
}

fn fail(status: MmteStatus, msg: &str) -> Fail {
    set_error(msg);
    Fail(status)
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MmteStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MmteStatus::Ok
        }
        Ok(Err(Fail(s))) => s,
        Err(_) => {
            set_error("internal panic");
            MmteStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(fail(MmteStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(MmteStatus::InvalidUtf8, "string argument is not UTF-8"))
}

unsafe fn str_array<'a>(p: *const *const c_char, n: usize) -> Result<Vec<&'a str>, Fail> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(fail(MmteStatus::NullPointer, "null array argument"));
    }
    std::slice::from_raw_parts(p, n).iter().map(|&s| str_arg(s)).collect()
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(MmteStatus::NullPointer, "null array argument"));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_arg<'a, T>(p: *mut T) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| fail(MmteStatus::NullPointer, "null output pointer"))
}

/// Copies `src` into `dst[..cap]`, always reporting the full length in `len_out`.
unsafe fn write_out<T: Copy>(src: &[T], dst: *mut T, cap: usize, len_out: *mut usize) -> Result<(), Fail> {
    *out_arg(len_out)? = src.len();
    if src.len() > cap {
        return Err(fail(MmteStatus::BufferTooSmall, "output buffer too small"));
    }
    if !src.is_empty() {
        if dst.is_null() {
            return Err(fail(MmteStatus::NullPointer, "null output buffer"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

/// Copies the calling thread's last error message (NUL-terminated) into `buf`.
/// Returns the message length excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mmte_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a tokenizer file written by the `mmte` tool.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmte_tokenizer_load(path: *const c_char, out: *mut *mut MmteTokenizer) -> MmteStatus {
    guard(|| {
        let out = out_arg(out)?;
        *out = ptr::null_mut();
        let m = SubwordModel::load(Path::new(str_arg(path)?))?;
        *out = Box::into_raw(Box::new(MmteTokenizer(m)));
        Ok(())
    })
}

/// # Safety
/// `tok` must come from `mmte_tokenizer_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mmte_tokenizer_free(tok: *mut MmteTokenizer) {
    if !tok.is_null() {
        drop(Box::from_raw(tok));
    }
}

/// # Safety
/// `tok` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmte_tokenizer_vocab_size(tok: *const MmteTokenizer, out: *mut usize) -> MmteStatus {
    guard(|| {
        let t = tok.as_ref().ok_or_else(|| fail(MmteStatus::NullPointer, "null tokenizer"))?;
        *out_arg(out)? = t.0.vocab_size();
        Ok(())
    })
}

/// Segments `text` into ids. `word_starts` may be null; otherwise it receives one flag
/// (1 at a word's first subword) per id and must hold `cap` bytes.
///
/// # Safety
/// `ids` (and `word_starts` when non-null) must hold `cap` elements; `len_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmte_tokenizer_encode(
    tok: *const MmteTokenizer,
    text: *const c_char,
    ids: *mut u32,
    word_starts: *mut u8,
    cap: usize,
    len_out: *mut usize,
) -> MmteStatus {
    guard(|| {
        let t = tok.as_ref().ok_or_else(|| fail(MmteStatus::NullPointer, "null tokenizer"))?;
        let enc = t.0.encode(str_arg(text)?);
        write_out(&enc.ids, ids, cap, len_out)?;
        if !word_starts.is_null() {
            let flags: Vec<u8> = enc.first_subword_mask.iter().map(|&b| u8::from(b)).collect();
            ptr::copy_nonoverlapping(flags.as_ptr(), word_starts, flags.len());
        }
        Ok(())
    })
}

/// Decodes ids into a NUL-terminated string. `len_out` receives the byte length without
/// the terminator; `cap` must cover the terminator too.
///
/// # Safety
/// `ids` must hold `n` values; `buf` must hold `cap` bytes; `len_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmte_tokenizer_decode(
    tok: *const MmteTokenizer,
    ids: *const u32,
    n: usize,
    buf: *mut c_char,
    cap: usize,
    len_out: *mut usize,
) -> MmteStatus {
    guard(|| {
        let t = tok.as_ref().ok_or_else(|| fail(MmteStatus::NullPointer, "null tokenizer"))?;
        let text = t.0.decode(slice_arg(ids, n)?)?;
        let mut bytes = text.into_bytes();
        bytes.push(0);
        write_out(&bytes, buf as *mut u8, cap, len_out)?;
        *len_out -= 1;
        Ok(())
    })
}

/// Loads encoder weights from an encoder-only or full checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmte_encoder_load(path: *const c_char, out: *mut *mut MmteEncoder) -> MmteStatus {
    guard(|| {
        let out = out_arg(out)?;
        *out = ptr::null_mut();
        let ck = Checkpoint::load(Path::new(str_arg(path)?))?;
        let ck = match ck.kind {
            CheckpointKind::Full => extract_encoder(&ck)?,
            CheckpointKind::Encoder => ck,
        };
        *out = Box::into_raw(Box::new(MmteEncoder(ck)));
        Ok(())
    })
}

/// # Safety
/// `enc` must come from `mmte_encoder_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mmte_encoder_free(enc: *mut MmteEncoder) {
    if !enc.is_null() {
        drop(Box::from_raw(enc));
    }
}

/// Width of each encoder output row.
///
/// # Safety
/// `enc` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmte_encoder_dim(enc: *const MmteEncoder, out: *mut usize) -> MmteStatus {
    guard(|| {
        let e = enc.as_ref().ok_or_else(|| fail(MmteStatus::NullPointer, "null encoder"))?;
        *out_arg(out)? = e.0.config.model_dim;
        Ok(())
    })
}

/// Encodes one sequence into `n × dim` row-major floats. Id 0 (padding) is masked out.
///
/// # Safety
/// `ids` must hold `n` values; `out` must hold `cap` floats; `len_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmte_encoder_encode(
    enc: *const MmteEncoder,
    ids: *const u32,
    n: usize,
    out: *mut f32,
    cap: usize,
    len_out: *mut usize,
) -> MmteStatus {
    guard(|| {
        let e = enc.as_ref().ok_or_else(|| fail(MmteStatus::NullPointer, "null encoder"))?;
        let ids = slice_arg(ids, n)?;
        let mask: Vec<bool> = ids.iter().map(|&i| i != mmte::tokenizer::PAD).collect();
        let reps = encode(&e.0.config, &e.0.params, ids, &mask)?.reps;
        write_out(reps.data(), out, cap, len_out)
    })
}

/// Corpus BLEU over `n` whitespace-tokenized hypothesis/reference strings.
///
/// # Safety
/// `hyps` and `refs` must each hold `n` NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmte_bleu(
    hyps: *const *const c_char,
    refs: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> MmteStatus {
    guard(|| {
        let split = |v: Vec<&str>| -> Vec<Vec<String>> {
            v.iter().map(|s| s.split_whitespace().map(str::to_string).collect()).collect()
        };
        let h = split(str_array(hyps, n)?);
        let r = split(str_array(refs, n)?);
        *out_arg(out)? = bleu(&h, &r)?;
        Ok(())
    })
}

/// Span precision, recall and F1 of one predicted IOB tag sequence against gold.
///
/// # Safety
/// `pred` and `gold` must each hold `n` NUL-terminated tags; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmte_span_f1(
    pred: *const *const c_char,
    gold: *const *const c_char,
    n: usize,
    precision: *mut f64,
    recall: *mut f64,
    f1: *mut f64,
) -> MmteStatus {
    guard(|| {
        let s = span_f1(&[str_array(pred, n)?], &[str_array(gold, n)?])?;
        *out_arg(precision)? = s.precision;
        *out_arg(recall)? = s.recall;
        *out_arg(f1)? = s.f1;
        Ok(())
    })
}

/// Temperature-sampling probabilities for `n` corpus sizes, written to `probs[..n]`.
///
/// # Safety
/// `sizes` and `probs` must each hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn mmte_sampling_distribution(
    sizes: *const u64,
    n: usize,
    temperature: f64,
    probs: *mut f64,
) -> MmteStatus {
    guard(|| {
        let sizes: Vec<usize> = slice_arg(sizes, n)?.iter().map(|&s| s as usize).collect();
        let q = sampling_distribution(&sizes, temperature)?;
        let mut len = 0;
        write_out(&q.probs, probs, n, &mut len)
    })
}
