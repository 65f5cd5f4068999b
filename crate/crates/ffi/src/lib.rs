//! C interface to the pipeline.
//!
//! Handles are opaque and owned by the caller once returned; free them with
//! the matching `*_free`. Every function returns an [`EvStatus`]. On failure
//! the message is kept per thread and read with [`ev_last_error`]. Panics
//! are caught at the boundary and reported as [`EvStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use eegvis_core::pipeline::container::Dataset;
use eegvis_core::pipeline::stages::{self, Layout};
use eegvis_core::pipeline::RunConfig;
use eegvis_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    Config = 6,
    MissingStage = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvStage {
    Synth = 0,
    TrainTokenizer = 1,
    TrainAlign = 2,
    TrainNsp = 3,
    Generate = 4,
    Eval = 5,
    Analyze = 6,
}

/// Run configuration bound to an output directory.
pub struct EvPipeline {
    cfg: RunConfig,
    layout: Layout,
}

/// A loaded dataset container.
pub struct EvDataset {
    inner: Dataset,
    /// `(channels, samples)` per pair, raw.
    shapes: Vec<(usize, usize)>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> EvStatus {
    match e {
        Error::Io(_) => EvStatus::Io,
        Error::Format { .. } | Error::Json(_) => EvStatus::Format,
        Error::NonFinite { .. } | Error::ZeroNorm { .. } | Error::Metric(_) | Error::Oracle { .. } | Error::Diverged { .. } => {
            EvStatus::Numeric
        }
        Error::Config(_) | Error::Shape { .. } => EvStatus::Config,
        Error::Index { .. } | Error::Preprocess(_) => EvStatus::InvalidArgument,
        Error::MissingStage { .. } => EvStatus::MissingStage,
    }
}

enum Fail {
    Status(EvStatus, String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            EvStatus::Ok
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            EvStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(EvStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(EvStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn into_c_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail::Status(EvStatus::Format, "string contains a nul byte".into()))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn ev_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn ev_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ev_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a pipeline writing to `out_dir`. `config_path` may be null for
/// the built-in desk configuration.
///
/// # Safety
/// String arguments must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ev_pipeline_new(out_dir: *const c_char, config_path: *const c_char, out: *mut *mut EvPipeline) -> EvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let dir = path_arg(out_dir, "out_dir")?;
        let cfg = if config_path.is_null() {
            RunConfig::desk()
        } else {
            RunConfig::load(&path_arg(config_path, "config_path")?)?
        };
        cfg.validate()?;
        *out = Box::into_raw(Box::new(EvPipeline {
            cfg,
            layout: Layout::new(dir),
        }));
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a live pipeline handle.
#[no_mangle]
pub unsafe extern "C" fn ev_pipeline_free(p: *mut EvPipeline) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// # Safety
/// `p` must be a live pipeline handle.
#[no_mangle]
pub unsafe extern "C" fn ev_pipeline_set_seed(p: *mut EvPipeline, seed: u64) -> EvStatus {
    guard(|| {
        handle(p, "pipeline")?.cfg.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `p` must be a live pipeline handle.
#[no_mangle]
pub unsafe extern "C" fn ev_pipeline_set_sequential(p: *mut EvPipeline, sequential: bool) -> EvStatus {
    guard(|| {
        handle(p, "pipeline")?.cfg.sequential = sequential;
        Ok(())
    })
}

/// Sets tokenizer and transformer scales to squares of the given sides.
///
/// # Safety
/// `p` must be a live pipeline handle; `sides` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn ev_pipeline_set_schedule(p: *mut EvPipeline, sides: *const usize, n: usize) -> EvStatus {
    guard(|| {
        let pl = handle(p, "pipeline")?;
        if sides.is_null() {
            return Err(null("sides"));
        }
        let s = std::slice::from_raw_parts(sides, n);
        let schedule = eegvis_core::tokenizer::ScaleSchedule::squares(s)?;
        let cfg = pl.cfg.clone().with_schedule(schedule);
        cfg.validate()?;
        pl.cfg = cfg;
        Ok(())
    })
}

/// Runs one stage; prerequisites must already be in the output directory.
///
/// # Safety
/// `p` must be a live pipeline handle.
#[no_mangle]
pub unsafe extern "C" fn ev_pipeline_run(p: *mut EvPipeline, stage: EvStage) -> EvStatus {
    guard(|| {
        let pl = handle(p, "pipeline")?;
        let (c, l) = (&pl.cfg, &pl.layout);
        match stage {
            EvStage::Synth => drop(stages::run_synth(c, l)?),
            EvStage::TrainTokenizer => drop(stages::run_train_tokenizer(c, l)?),
            EvStage::TrainAlign => drop(stages::run_train_align(c, l)?),
            EvStage::TrainNsp => drop(stages::run_train_nsp(c, l)?),
            EvStage::Generate => drop(stages::run_generate(c, l)?),
            EvStage::Eval => drop(stages::run_eval(c, l)?),
            EvStage::Analyze => drop(stages::run_analyze(c, l)?),
        }
        Ok(())
    })
}

/// Resolved configuration as JSON. Free with [`ev_string_free`].
///
/// # Safety
/// `p` must be a live pipeline handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ev_pipeline_config_json(p: *mut EvPipeline, out: *mut *mut c_char) -> EvStatus {
    guard(|| {
        let pl = handle(p, "pipeline")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = into_c_string(pl.cfg.canonical_json()?)?;
        Ok(())
    })
}

/// Hex SHA-256 of the canonical configuration. Free with [`ev_string_free`].
///
/// # Safety
/// `p` must be a live pipeline handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ev_pipeline_config_hash(p: *mut EvPipeline, out: *mut *mut c_char) -> EvStatus {
    guard(|| {
        let pl = handle(p, "pipeline")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = into_c_string(pl.cfg.hash_hex()?)?;
        Ok(())
    })
}

/// # Safety
/// `path` must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ev_dataset_load(path: *const c_char, out: *mut *mut EvDataset) -> EvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let inner = Dataset::load(&path_arg(path, "path")?)?;
        let shapes = inner
            .pairs
            .iter()
            .map(|p| {
                let s = &inner.subjects[p.subject as usize];
                (s.n_channels(), s.n_samples)
            })
            .collect();
        *out = Box::into_raw(Box::new(EvDataset { inner, shapes }));
        Ok(())
    })
}

/// # Safety
/// `d` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn ev_dataset_free(d: *mut EvDataset) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// # Safety
/// `d` must be a live dataset handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ev_dataset_pair_count(d: *mut EvDataset, out: *mut usize) -> EvStatus {
    guard(|| {
        let ds = handle(d, "dataset")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ds.inner.pairs.len();
        Ok(())
    })
}

/// Raw epoch extent of a pair and its class label.
///
/// # Safety
/// `d` must be a live dataset handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ev_dataset_pair_info(
    d: *mut EvDataset,
    pair: usize,
    channels: *mut usize,
    samples: *mut usize,
    class: *mut u32,
) -> EvStatus {
    guard(|| {
        let ds = handle(d, "dataset")?;
        if channels.is_null() || samples.is_null() || class.is_null() {
            return Err(null("output"));
        }
        let &(c, t) = ds
            .shapes
            .get(pair)
            .ok_or_else(|| Fail::Status(EvStatus::InvalidArgument, format!("pair {pair} out of range")))?;
        *channels = c;
        *samples = t;
        *class = ds.inner.pairs[pair].class;
        Ok(())
    })
}

/// Copies the raw `channels × samples` epoch of a pair into `buf`.
///
/// # Safety
/// `d` must be a live dataset handle; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ev_dataset_copy_epoch(d: *mut EvDataset, pair: usize, buf: *mut f64, len: usize) -> EvStatus {
    guard(|| {
        let ds = handle(d, "dataset")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let p = ds
            .inner
            .pairs
            .get(pair)
            .ok_or_else(|| Fail::Status(EvStatus::InvalidArgument, format!("pair {pair} out of range")))?;
        let epoch = ds.inner.epoch(p);
        if len != epoch.len() {
            return Err(Fail::Status(
                EvStatus::InvalidArgument,
                format!("buffer holds {len} values, epoch has {}", epoch.len()),
            ));
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(epoch);
        Ok(())
    })
}
