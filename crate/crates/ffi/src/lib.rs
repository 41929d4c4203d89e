//! C ABI over the cumadapt toolkit.
//!
//! Models are opaque handles created by `*_load` or `*_fit` and released
//! with the matching `*_free`. Every fallible call returns a [`CaStatus`];
//! on failure [`ca_last_error_message`] describes the error for the
//! calling thread. Matrices are row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use cumadapt::acoustic::{focal_loss, BlstmAcousticModel, Mode, Utterance};
use cumadapt::container::{load_model, save_model, AcousticModelFile};
use cumadapt::features::{FeatureKind, FeatureMatrix};
use cumadapt::gmm::{accumulate_stats, fit_gmm, DiagonalGmm};
use cumadapt::ivector::{apply_rg, normalize, IVector, Normalization, RgTransform, TotalVariabilityModel};
use cumadapt::Error;
use nalgebra::{DMatrix, DVector};

/// Result of every fallible call. Values 1 to 22 mirror the toolkit's
/// error codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaStatus {
    Ok = 0,
    InvalidInput = 1,
    DimensionMismatch = 2,
    NonFinite = 3,
    AudioTooShort = 4,
    NoSpeech = 5,
    UbmMismatch = 6,
    DuplicateSlot = 7,
    InvalidSlot = 8,
    MissingSlot = 9,
    BadMagic = 10,
    VersionMismatch = 11,
    Truncated = 12,
    DuplicateId = 13,
    MissingFile = 14,
    MalformedLine = 15,
    DanglingReference = 16,
    ChecksumMismatch = 17,
    KindMismatch = 18,
    Config = 19,
    Wav = 20,
    Codec = 21,
    Io = 22,
    NullPointer = 100,
    InvalidUtf8 = 101,
    BufferTooSmall = 102,
    Panic = 103,
}

impl CaStatus {
    fn from_code(code: i32) -> Self {
        use CaStatus::*;
        const TABLE: [CaStatus; 23] = [
            Ok,
            InvalidInput,
            DimensionMismatch,
            NonFinite,
            AudioTooShort,
            NoSpeech,
            UbmMismatch,
            DuplicateSlot,
            InvalidSlot,
            MissingSlot,
            BadMagic,
            VersionMismatch,
            Truncated,
            DuplicateId,
            MissingFile,
            MalformedLine,
            DanglingReference,
            ChecksumMismatch,
            KindMismatch,
            Config,
            Wav,
            Codec,
            Io,
        ];
        usize::try_from(code).ok().and_then(|i| TABLE.get(i).copied()).unwrap_or(InvalidInput)
    }
}

/// i-vector length normalization selectable from C.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaNormalization {
    None = 0,
    Unity = 1,
    SqrtD = 2,
}

impl From<CaNormalization> for Normalization {
    fn from(n: CaNormalization) -> Self {
        match n {
            CaNormalization::None => Normalization::None,
            CaNormalization::Unity => Normalization::Unity,
            CaNormalization::SqrtD => Normalization::SqrtD,
        }
    }
}

/// Diagonal-covariance GMM.
pub struct CaGmm(DiagonalGmm);
/// Total-variability model with its UBM.
pub struct CaTv(TotalVariabilityModel);
/// Radial Gaussianization transform.
pub struct CaRg(RgTransform);
/// BLSTM acoustic model, possibly with affine transforms.
pub struct CaAm(BlstmAcousticModel);

enum Failure {
    Core(Error),
    Null(&'static str),
    Utf8,
    BufferTooSmall { need: usize, got: usize },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => return CaStatus::Ok,
        Ok(Err(Failure::Core(e))) => (CaStatus::from_code(e.code()), e.to_string()),
        Ok(Err(Failure::Null(what))) => (CaStatus::NullPointer, format!("null pointer: {what}")),
        Ok(Err(Failure::Utf8)) => (CaStatus::InvalidUtf8, "path is not valid UTF-8".into()),
        Ok(Err(Failure::BufferTooSmall { need, got })) => (CaStatus::BufferTooSmall, format!("output buffer holds {got} values, {need} needed")),
        Err(_) => (CaStatus::Panic, "internal panic".into()),
    };
    set_last_error(msg);
    status
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], Failure> {
    if len < need {
        return Err(Failure::BufferTooSmall { need, got: len });
    }
    if p.is_null() {
        return Err(Failure::Null("output buffer"));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    CStr::from_ptr(p).to_str().map(PathBuf::from).map_err(|_| Failure::Utf8)
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn matrix(frames: *const f64, n: usize, d: usize) -> Result<DMatrix<f64>, Failure> {
    let data = slice(frames, n * d, "frames")?;
    Ok(DMatrix::from_row_slice(n, d, data))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ca_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

/// Message of the last failed call on this thread, or NULL. Valid until
/// the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn ca_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Fits a GMM with EM on `n` x `d` frames.
///
/// # Safety
/// `frames` must point to `n * d` doubles and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn ca_gmm_fit(
    frames: *const f64,
    n: usize,
    d: usize,
    components: usize,
    iterations: usize,
    seed: u64,
    out: *mut *mut CaGmm,
) -> CaStatus {
    guard(|| {
        let m = matrix(frames, n, d)?;
        let fit = fit_gmm(&m, components, iterations, seed)?;
        store(out, CaGmm(fit.gmm))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ca_gmm_load(path_: *const c_char, out: *mut *mut CaGmm) -> CaStatus {
    guard(|| store(out, CaGmm(load_model(&path(path_)?)?)))
}

/// # Safety
/// `gmm` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ca_gmm_save(gmm: *const CaGmm, path_: *const c_char) -> CaStatus {
    guard(|| Ok(save_model(&handle(gmm, "gmm")?.0, &path(path_)?)?))
}

/// Feature dimension, 0 for NULL.
///
/// # Safety
/// `gmm` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn ca_gmm_dim(gmm: *const CaGmm) -> usize {
    gmm.as_ref().map_or(0, |g| g.0.dim())
}

/// # Safety
/// `gmm` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn ca_gmm_num_components(gmm: *const CaGmm) -> usize {
    gmm.as_ref().map_or(0, |g| g.0.num_components())
}

/// Log-density of one frame.
///
/// # Safety
/// `frame` must point to `d` doubles and `out` to one writable double.
#[no_mangle]
pub unsafe extern "C" fn ca_gmm_log_likelihood(gmm: *const CaGmm, frame: *const f64, d: usize, out: *mut f64) -> CaStatus {
    guard(|| {
        let g = handle(gmm, "gmm")?;
        let ll = g.0.log_likelihood(slice(frame, d, "frame")?)?;
        *out_slice(out, 1, 1)?.first_mut().unwrap() = ll;
        Ok(())
    })
}

/// # Safety
/// `gmm` must be NULL or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ca_gmm_free(gmm: *mut CaGmm) {
    free(gmm)
}

/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ca_tv_load(path_: *const c_char, out: *mut *mut CaTv) -> CaStatus {
    guard(|| store(out, CaTv(load_model(&path(path_)?)?)))
}

/// i-vector dimension, 0 for NULL.
///
/// # Safety
/// `tv` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn ca_tv_rank(tv: *const CaTv) -> usize {
    tv.as_ref().map_or(0, |t| t.0.rank)
}

/// Extracts the i-vector of `n` x `d` frames (all frames count as speech)
/// into `out`, which must hold at least the TV rank.
///
/// # Safety
/// `frames` must point to `n * d` doubles and `out` to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ca_tv_extract(
    tv: *const CaTv,
    frames: *const f64,
    n: usize,
    d: usize,
    normalization: CaNormalization,
    out: *mut f64,
    out_len: usize,
) -> CaStatus {
    guard(|| {
        let t = &handle(tv, "tv")?.0;
        let f = FeatureMatrix::new("ffi", matrix(frames, n, d)?, FeatureKind::Synthetic)?;
        let stats = accumulate_stats(&t.ubm, &f, &vec![true; n])?;
        let v = normalize(&t.extract(&stats)?, normalization.into())?;
        out_slice(out, out_len, v.dim())?.copy_from_slice(v.values.as_slice());
        Ok(())
    })
}

/// # Safety
/// `tv` must be NULL or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ca_tv_free(tv: *mut CaTv) {
    free(tv)
}

/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ca_rg_load(path_: *const c_char, out: *mut *mut CaRg) -> CaStatus {
    guard(|| store(out, CaRg(load_model(&path(path_)?)?)))
}

/// Radially Gaussianizes a raw i-vector of length `len` in place.
///
/// # Safety
/// `v` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ca_rg_apply(rg: *const CaRg, v: *mut f64, len: usize) -> CaStatus {
    guard(|| {
        let r = &handle(rg, "rg")?.0;
        let buf = out_slice(v, len, len)?;
        let iv = IVector {
            utterance_id: "ffi".into(),
            values: DVector::from_column_slice(buf),
            normalization: Normalization::None,
        };
        buf.copy_from_slice(apply_rg(r, &iv)?.values.as_slice());
        Ok(())
    })
}

/// # Safety
/// `rg` must be NULL or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ca_rg_free(rg: *mut CaRg) {
    free(rg)
}

/// Loads an acoustic model container.
///
/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ca_am_load(path_: *const c_char, out: *mut *mut CaAm) -> CaStatus {
    guard(|| {
        let file: AcousticModelFile = load_model(&path(path_)?)?;
        store(out, CaAm(file.model))
    })
}

/// Writes the feature, i-vector and output dimensions.
///
/// # Safety
/// The three outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ca_am_dims(am: *const CaAm, feature_dim: *mut usize, ivector_dim: *mut usize, output_dim: *mut usize) -> CaStatus {
    guard(|| {
        let m = &handle(am, "am")?.0;
        for (p, v) in [(feature_dim, m.feature_dim), (ivector_dim, m.ivector_dim), (output_dim, m.output_dim)] {
            if p.is_null() {
                return Err(Failure::Null("dimension output"));
            }
            *p = v;
        }
        Ok(())
    })
}

/// Eval-mode posteriors (`n` x output dim, row-major) of an utterance
/// without affine transforms. `ivector` may be NULL when the model takes
/// none.
///
/// # Safety
/// `frames` must point to `n * d` doubles, `ivector` to `r` doubles (or be
/// NULL with `r == 0`), and `out` to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ca_am_forward(
    am: *const CaAm,
    frames: *const f64,
    n: usize,
    d: usize,
    ivector: *const f64,
    r: usize,
    out: *mut f64,
    out_len: usize,
) -> CaStatus {
    guard(|| {
        let m = &handle(am, "am")?.0;
        let f = FeatureMatrix::new("ffi", matrix(frames, n, d)?, FeatureKind::Synthetic)?;
        let iv = (r > 0).then(|| -> Result<IVector, Failure> {
            Ok(IVector {
                utterance_id: "ffi".into(),
                values: DVector::from_column_slice(slice(ivector, r, "ivector")?),
                normalization: Normalization::None,
            })
        });
        let iv = iv.transpose()?;
        let post = m.forward(&Utterance::new(&f).with_ivector(iv.as_ref()), Mode::Eval)?;
        let dst = out_slice(out, out_len, post.len())?;
        for (t, row) in post.row_iter().enumerate() {
            dst[t * post.ncols()..(t + 1) * post.ncols()].copy_from_slice(&row.iter().copied().collect::<Vec<_>>());
        }
        Ok(())
    })
}

/// # Safety
/// `am` must be NULL or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ca_am_free(am: *mut CaAm) {
    free(am)
}

/// Mean focal loss of `n` x `k` posteriors against `targets`.
///
/// # Safety
/// `posteriors` must point to `n * k` doubles, `targets` to `n` values and
/// `out` to one writable double.
#[no_mangle]
pub unsafe extern "C" fn ca_focal_loss(posteriors: *const f64, n: usize, k: usize, targets: *const usize, gamma: f64, out: *mut f64) -> CaStatus {
    guard(|| {
        let p = matrix(posteriors, n, k)?;
        if n > 0 && targets.is_null() {
            return Err(Failure::Null("targets"));
        }
        let t = if n == 0 { &[][..] } else { std::slice::from_raw_parts(targets, n) };
        *out_slice(out, 1, 1)?.first_mut().unwrap() = focal_loss(&p, t, gamma)?;
        Ok(())
    })
}
