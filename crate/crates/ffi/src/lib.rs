//! C interface to `invdet`.
//!
//! Handles are opaque pointers created by `*_load` and released by the
//! matching `*_free`. Every fallible function returns an [`InvdetStatus`];
//! on failure the message is kept per thread and can be read with
//! [`invdet_last_error_message`]. Images are passed as CHW `double` arrays
//! in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use invdet::autodiff::Tensor;
use invdet::classifier::Classifier;
use invdet::detectors::{dkl_score, kl_divergence, msr_score};
use invdet::evaluation::mann_whitney_auroc;
use invdet::transforms::TransformSpec;
use invdet::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InvdetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Domain = 5,
    Panic = 6,
}

/// A loaded classifier.
pub struct InvdetClassifier {
    inner: Classifier,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> InvdetStatus {
    match err {
        Error::Io { .. } => InvdetStatus::Io,
        Error::Format { .. } | Error::Json(_) => InvdetStatus::Format,
        Error::Domain { .. } | Error::Divergence { .. } => InvdetStatus::Domain,
        _ => InvdetStatus::InvalidArgument,
    }
}

fn fail(status: InvdetStatus, msg: impl Into<String>) -> InvdetStatus {
    set_error(msg.into());
    status
}

fn guard<F>(f: F) -> InvdetStatus
where
    F: FnOnce() -> Result<(), InvdetStatus>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => InvdetStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(InvdetStatus::Panic, "internal panic"),
    }
}

fn check<T>(r: invdet::Result<T>) -> Result<T, InvdetStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, InvdetStatus> {
    if p.is_null() {
        return Err(fail(InvdetStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(InvdetStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], InvdetStatus> {
    if p.is_null() {
        return Err(fail(InvdetStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn classifier<'a>(h: *const InvdetClassifier) -> Result<&'a Classifier, InvdetStatus> {
    if h.is_null() {
        return Err(fail(InvdetStatus::NullPointer, "classifier handle is null"));
    }
    Ok(&(*h).inner)
}

unsafe fn image(model: &Classifier, pixels: *const f64, len: usize) -> Result<Tensor, InvdetStatus> {
    let shape = model.input_shape();
    let want = shape.iter().product::<usize>();
    if len != want {
        return Err(fail(
            InvdetStatus::InvalidArgument,
            format!("image has {len} values, classifier expects {want} ({:?})", shape),
        ));
    }
    let data = slice(pixels, len, "pixels")?.to_vec();
    check(Tensor::new(shape.to_vec(), data))
}

unsafe fn write_out(out: *mut f64, v: f64) -> Result<(), InvdetStatus> {
    if out.is_null() {
        return Err(fail(InvdetStatus::NullPointer, "output pointer is null"));
    }
    *out = v;
    Ok(())
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn invdet_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a classifier checkpoint. On success `*out` owns a handle that must
/// be released with [`invdet_classifier_free`].
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn invdet_classifier_load(path: *const c_char, out: *mut *mut InvdetClassifier) -> InvdetStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(InvdetStatus::NullPointer, "output handle pointer is null"));
        }
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        let inner = check(Classifier::load(Path::new(path)))?;
        *out = Box::into_raw(Box::new(InvdetClassifier { inner }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`invdet_classifier_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn invdet_classifier_free(handle: *mut InvdetClassifier) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `handle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn invdet_classifier_num_classes(handle: *const InvdetClassifier) -> usize {
    if handle.is_null() {
        0
    } else {
        (*handle).inner.num_classes()
    }
}

/// Writes the expected `[channels, height, width]` into `out`.
///
/// # Safety
/// `out` must point to three writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn invdet_classifier_input_shape(handle: *const InvdetClassifier, out: *mut usize) -> InvdetStatus {
    guard(|| {
        let m = classifier(handle)?;
        if out.is_null() {
            return Err(fail(InvdetStatus::NullPointer, "output pointer is null"));
        }
        for (i, d) in m.input_shape().iter().enumerate() {
            *out.add(i) = *d;
        }
        Ok(())
    })
}

/// Raw logits for one image. `out` must hold `out_len >= num_classes` values.
///
/// # Safety
/// `pixels` must point to `len` doubles, `out` to `out_len`.
#[no_mangle]
pub unsafe extern "C" fn invdet_classifier_logits(
    handle: *const InvdetClassifier,
    pixels: *const f64,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> InvdetStatus {
    guard(|| {
        let m = classifier(handle)?;
        let x = image(m, pixels, len)?;
        let z = check(m.logits(&x))?;
        if out.is_null() {
            return Err(fail(InvdetStatus::NullPointer, "output pointer is null"));
        }
        if out_len < z.len() {
            return Err(fail(
                InvdetStatus::InvalidArgument,
                format!("output holds {out_len} values, need {}", z.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, z.len()).copy_from_slice(&z);
        Ok(())
    })
}

/// Predicted class of one image.
///
/// # Safety
/// `pixels` must point to `len` doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn invdet_classifier_predict(
    handle: *const InvdetClassifier,
    pixels: *const f64,
    len: usize,
    out: *mut usize,
) -> InvdetStatus {
    guard(|| {
        let m = classifier(handle)?;
        let x = image(m, pixels, len)?;
        let p = check(m.predict(&x))?;
        if out.is_null() {
            return Err(fail(InvdetStatus::NullPointer, "output pointer is null"));
        }
        *out = p;
        Ok(())
    })
}

/// D_KL score of one image under `transform` (e.g. `"hflip"`, `"gamma:0.6"`,
/// `"zoom:1.05"`) at softmax temperature `temperature`.
///
/// # Safety
/// `transform` must be nul-terminated, `pixels` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn invdet_dkl_score(
    handle: *const InvdetClassifier,
    pixels: *const f64,
    len: usize,
    transform: *const c_char,
    temperature: f64,
    out: *mut f64,
) -> InvdetStatus {
    guard(|| {
        let m = classifier(handle)?;
        let t: TransformSpec = check(c_str(transform, "transform")?.parse())?;
        let x = image(m, pixels, len)?;
        write_out(out, check(dkl_score(m, &x, &t, temperature))?)
    })
}

/// One minus the top softmax probability.
///
/// # Safety
/// `pixels` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn invdet_msr_score(
    handle: *const InvdetClassifier,
    pixels: *const f64,
    len: usize,
    out: *mut f64,
) -> InvdetStatus {
    guard(|| {
        let m = classifier(handle)?;
        let x = image(m, pixels, len)?;
        write_out(out, check(msr_score(m, &x))?)
    })
}

/// KL(p ‖ q) for two distributions of length `n`.
///
/// # Safety
/// `p` and `q` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn invdet_kl_divergence(p: *const f64, q: *const f64, n: usize, out: *mut f64) -> InvdetStatus {
    guard(|| {
        let p = slice(p, n, "p")?;
        let q = slice(q, n, "q")?;
        write_out(out, check(kl_divergence(p, q))?)
    })
}

/// AUROC of `scores` where nonzero `positive[i]` marks an error.
///
/// # Safety
/// `scores` and `positive` must point to `n` values.
#[no_mangle]
pub unsafe extern "C" fn invdet_auroc(scores: *const f64, positive: *const u8, n: usize, out: *mut f64) -> InvdetStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        let p = slice(positive, n, "positive")?;
        let labeled: Vec<(f64, bool)> = s.iter().zip(p).map(|(&s, &p)| (s, p != 0)).collect();
        write_out(out, check(mann_whitney_auroc(&labeled))?)
    })
}
