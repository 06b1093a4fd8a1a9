//! C ABI over `fsicsf`.
//!
//! Every fallible call returns an [`FsicsfStatus`]; on failure the message is
//! kept per thread and read back with [`fsicsf_last_error`]. Objects cross the
//! boundary as opaque handles that the caller releases with the matching
//! `*_free` function. Strings handed out by the library are released with
//! [`fsicsf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fsicsf::algorithms::{evaluate, FewShotModel};
use fsicsf::autodiff::gradcheck::{run_catalogue, FAILURE_THRESHOLD};
use fsicsf::data::{load_model, ModelMeta};
use fsicsf::metrics::aggregate;
use fsicsf::sampler::{EpisodeStream, FewShotSplit, SamplerConfig};
use fsicsf::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsicsfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Contract = 6,
    Sampler = 7,
    Shape = 8,
    GradCheck = 9,
    Panic = 10,
}

impl From<&Error> for FsicsfStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => FsicsfStatus::Io,
            Error::Format { .. } | Error::Json { .. } => FsicsfStatus::Format,
            Error::Config(_) => FsicsfStatus::Config,
            Error::SplitTooSmall { .. }
            | Error::ClassTooSmall { .. }
            | Error::ClassExhausted { .. } => FsicsfStatus::Sampler,
            Error::Dimension { .. } | Error::Index { .. } => FsicsfStatus::Shape,
            Error::GradCheck(_) => FsicsfStatus::GradCheck,
            _ => FsicsfStatus::Contract,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, recording any error or panic for [`fsicsf_last_error`].
fn guard(f: impl FnOnce() -> Result<(), (FsicsfStatus, String)>) -> FsicsfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FsicsfStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {message}"));
            FsicsfStatus::Panic
        }
    }
}

fn lib(e: Error) -> (FsicsfStatus, String) {
    ((&e).into(), e.to_string())
}

fn null(what: &str) -> (FsicsfStatus, String) {
    (FsicsfStatus::NullArgument, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, (FsicsfStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map(Path::new).map_err(|_| {
        (
            FsicsfStatus::InvalidUtf8,
            format!("{what} is not valid UTF-8"),
        )
    })
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (FsicsfStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, (FsicsfStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Last error message on the calling thread, or null after a successful
/// call. The pointer stays valid until the next library call on this thread.
#[no_mangle]
pub extern "C" fn fsicsf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn fsicsf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// A data split loaded from a corpus file.
pub struct FsicsfSplit(FewShotSplit);

/// Loads a split file. Slot labels are prefixed with their intent.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fsicsf_split_load(
    path: *const c_char,
    out: *mut *mut FsicsfSplit,
) -> FsicsfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let split = fsicsf::cli::load_split(path_arg(path, "path")?).map_err(lib)?;
        *out = Box::into_raw(Box::new(FsicsfSplit(split)));
        Ok(())
    })
}

/// # Safety
/// `split` must be null or a handle from [`fsicsf_split_load`].
#[no_mangle]
pub unsafe extern "C" fn fsicsf_split_free(split: *mut FsicsfSplit) {
    if !split.is_null() {
        drop(Box::from_raw(split));
    }
}

/// Number of utterances in the split, 0 for a null handle.
///
/// # Safety
/// `split` must be null or a live split handle.
#[no_mangle]
pub unsafe extern "C" fn fsicsf_split_len(split: *const FsicsfSplit) -> usize {
    split.as_ref().map_or(0, |s| s.0.len())
}

/// Number of intent classes in the split, 0 for a null handle.
///
/// # Safety
/// `split` must be null or a live split handle.
#[no_mangle]
pub unsafe extern "C" fn fsicsf_split_num_classes(split: *const FsicsfSplit) -> usize {
    split.as_ref().map_or(0, |s| s.0.num_classes())
}

/// A seeded episode stream over its own copy of a split.
pub struct FsicsfSampler {
    split: FewShotSplit,
    config: SamplerConfig,
}

/// # Safety
/// `split` must be a live split handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fsicsf_sampler_new(
    split: *const FsicsfSplit,
    k_max: usize,
    seed: u64,
    out: *mut *mut FsicsfSampler,
) -> FsicsfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let split = handle(split, "split")?;
        let config = SamplerConfig::new(k_max, seed).map_err(lib)?;
        *out = Box::into_raw(Box::new(FsicsfSampler {
            split: split.0.clone(),
            config,
        }));
        Ok(())
    })
}

/// # Safety
/// `sampler` must be null or a handle from [`fsicsf_sampler_new`].
#[no_mangle]
pub unsafe extern "C" fn fsicsf_sampler_free(sampler: *mut FsicsfSampler) {
    if !sampler.is_null() {
        drop(Box::from_raw(sampler));
    }
}

/// Episode `index` of the stream as one JSON line. The same seed and index
/// always give the same episode. Free the result with [`fsicsf_string_free`].
///
/// # Safety
/// `sampler` must be a live sampler handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fsicsf_sampler_episode_json(
    sampler: *const FsicsfSampler,
    index: u64,
    out: *mut *mut c_char,
) -> FsicsfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let s = handle(sampler, "sampler")?;
        let episode = EpisodeStream::new(&s.split, s.config.clone())
            .episode(index)
            .map_err(lib)?;
        let json = CString::new(episode.to_json_line())
            .map_err(|e| (FsicsfStatus::Format, e.to_string()))?;
        *out = json.into_raw();
        Ok(())
    })
}

/// A trained model with its metadata.
pub struct FsicsfModel {
    model: FewShotModel,
    meta: ModelMeta,
}

/// Loads a checkpoint and its `.meta.json` sidecar. Models trained on
/// contextual vectors cannot be loaded through this call.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fsicsf_model_load(
    path: *const c_char,
    out: *mut *mut FsicsfModel,
) -> FsicsfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let (model, meta) = load_model(path_arg(path, "path")?, None).map_err(lib)?;
        *out = Box::into_raw(Box::new(FsicsfModel { model, meta }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`fsicsf_model_load`].
#[no_mangle]
pub unsafe extern "C" fn fsicsf_model_free(model: *mut FsicsfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Mean intent accuracy and slot F1 over a set of evaluation episodes.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FsicsfScores {
    pub ic_accuracy: f64,
    pub slot_f1: f64,
    pub episodes: usize,
}

/// Evaluates `model` on `episodes` episodes drawn from `split` with `seed`.
/// A `k_max` of 0 uses the budget the model was trained with.
///
/// # Safety
/// `model` and `split` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fsicsf_model_evaluate(
    model: *const FsicsfModel,
    split: *const FsicsfSplit,
    k_max: usize,
    seed: u64,
    episodes: usize,
    out: *mut FsicsfScores,
) -> FsicsfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = handle(model, "model")?;
        let split = handle(split, "split")?;
        let k_max = if k_max == 0 { m.meta.k_max } else { k_max };
        let sampler = SamplerConfig::new(k_max, seed).map_err(lib)?;
        let adapt = m.meta.train.adapt();
        let metrics = evaluate(
            m.meta.algorithm,
            &m.model,
            &split.0,
            &sampler,
            episodes,
            &adapt,
        )
        .map_err(lib)?;
        let report = aggregate(&[(seed, metrics)]).map_err(lib)?;
        *out = FsicsfScores {
            ic_accuracy: report.ic_accuracy.mean,
            slot_f1: report.slot_f1.mean,
            episodes: report.episode_count,
        };
        Ok(())
    })
}

/// Checks every differentiable op against central differences and writes the
/// largest relative error seen. Fails with `GRAD_CHECK` when it reaches the
/// tolerance.
///
/// # Safety
/// `max_relative_error` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fsicsf_gradcheck(seed: u64, max_relative_error: *mut f64) -> FsicsfStatus {
    guard(|| {
        let out = out_arg(max_relative_error, "max_relative_error")?;
        let report = run_catalogue(seed).map_err(lib)?;
        *out = report.max_relative_error();
        let failures = report.failures(FAILURE_THRESHOLD);
        if failures.is_empty() {
            Ok(())
        } else {
            Err(lib(Error::GradCheck(format!(
                "tolerance exceeded in: {}",
                failures.join(", ")
            ))))
        }
    })
}
