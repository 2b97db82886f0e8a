//! C ABI over `coal-core`.
//!
//! Every fallible call returns a [`CoalStatus`] and writes results through
//! out-pointers. On failure, [`coal_last_error_message`] describes the most
//! recent error on the calling thread. Handles are opaque and must be
//! released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use coal_core::cli::exit_code;
use coal_core::matching::{linear_assignment, CostMatrix};
use coal_core::metrics::evaluate_benchmark;
use coal_core::priors::Dataset;
use coal_core::tensor::Precision;
use coal_core::tracker::{run_sequence, TrackRecord, TrackerConfig};
use coal_core::training::TrainState;
use coal_core::Error;

/// Result of every fallible call. Values 0 to 5 match the `coal` exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoalStatus {
    Ok = 0,
    Error = 1,
    InvalidArgument = 2,
    Validation = 3,
    Io = 4,
    Numeric = 5,
    NullPointer = 6,
    Panic = 7,
}

/// A trained scoring network.
pub struct CoalModel(coal_core::hmsi::Hmsi);

/// A validated dataset.
pub struct CoalDataset(Dataset);

/// Tracker output for one (sequence, expression) pair.
pub struct CoalTracks(Vec<TrackRecord>);

/// One output box, top-left corner plus size in normalized coordinates.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CoalTrackRecord {
    pub frame_id: u32,
    pub track_id: u64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

/// Aggregate scores as fractions in [0, 1].
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CoalHota {
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub detre: f64,
    pub detpr: f64,
    pub assre: f64,
    pub asspr: f64,
    pub loca: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> CoalStatus {
    match exit_code(e) {
        2 => CoalStatus::InvalidArgument,
        3 => CoalStatus::Validation,
        4 => CoalStatus::Io,
        5 => CoalStatus::Numeric,
        _ => CoalStatus::Error,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CoalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CoalStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            CoalStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            CoalStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Core(Error::Invalid(format!("{what} is not UTF-8"))))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

fn check_out<T>(p: *mut T, what: &'static str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(())
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn coal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, empty after a success.
/// Valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn coal_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Validates and reads the dataset under `root`.
///
/// # Safety
/// `root` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn coal_dataset_load(root: *const c_char, out: *mut *mut CoalDataset) -> CoalStatus {
    guard(|| {
        let root = str_arg(root, "root")?;
        check_out(out, "out")?;
        let d = Dataset::load(PathBuf::from(root))?;
        *out = Box::into_raw(Box::new(CoalDataset(d)));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from [`coal_dataset_load`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn coal_dataset_free(dataset: *mut CoalDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of sequences, 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn coal_dataset_sequence_count(dataset: *const CoalDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.sequences.len())
}

/// Loads the network from a checkpoint written by `coal train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn coal_model_load(path: *const c_char, out: *mut *mut CoalModel) -> CoalStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        check_out(out, "out")?;
        let state = TrainState::load(&PathBuf::from(path))?;
        *out = Box::into_raw(Box::new(CoalModel(state.model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`coal_model_load`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn coal_model_free(model: *mut CoalModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Tracks one expression through one sequence with the default tracker
/// settings. `use_f64` selects 64-bit inference.
///
/// # Safety
/// Handles must be live, strings NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn coal_track(
    model: *const CoalModel,
    dataset: *const CoalDataset,
    sequence_id: *const c_char,
    expression_id: *const c_char,
    use_f64: bool,
    out: *mut *mut CoalTracks,
) -> CoalStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let dataset = ref_arg(dataset, "dataset")?;
        let seq_id = str_arg(sequence_id, "sequence_id")?;
        let expr_id = str_arg(expression_id, "expression_id")?;
        check_out(out, "out")?;
        let seq = dataset
            .0
            .sequences
            .iter()
            .find(|s| s.id == seq_id)
            .ok_or_else(|| Error::NotFound(format!("sequence `{seq_id}`")))?;
        let expr = seq
            .expressions
            .get(expr_id)
            .ok_or_else(|| Error::NotFound(format!("expression `{expr_id}` in `{seq_id}`")))?;
        let precision = if use_f64 { Precision::F64 } else { Precision::F32 };
        let records = run_sequence(&model.0, &seq.frames, &expr.text, &TrackerConfig::default(), precision)?;
        *out = Box::into_raw(Box::new(CoalTracks(records)));
        Ok(())
    })
}

/// # Safety
/// `tracks` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn coal_tracks_len(tracks: *const CoalTracks) -> usize {
    tracks.as_ref().map_or(0, |t| t.0.len())
}

/// Copies record `index` into `out`. Records are sorted by frame, then id.
///
/// # Safety
/// `tracks` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn coal_tracks_get(
    tracks: *const CoalTracks,
    index: usize,
    out: *mut CoalTrackRecord,
) -> CoalStatus {
    guard(|| {
        let tracks = ref_arg(tracks, "tracks")?;
        check_out(out, "out")?;
        let r = tracks.0.get(index).ok_or_else(|| {
            Error::Invalid(format!("index {index} out of range for {} records", tracks.0.len()))
        })?;
        *out = CoalTrackRecord {
            frame_id: r.frame_id,
            track_id: r.track_id,
            x: r.bbox.x1(),
            y: r.bbox.y1(),
            w: r.bbox.w,
            h: r.bbox.h,
            score: r.score,
        };
        Ok(())
    })
}

/// # Safety
/// `tracks` must come from [`coal_track`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn coal_tracks_free(tracks: *mut CoalTracks) {
    if !tracks.is_null() {
        drop(Box::from_raw(tracks));
    }
}

/// Scores the prediction directory against the dataset. Missing files
/// count as empty predictions.
///
/// # Safety
/// `dataset` must be live, `predictions_dir` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn coal_evaluate(
    dataset: *const CoalDataset,
    predictions_dir: *const c_char,
    out: *mut CoalHota,
) -> CoalStatus {
    guard(|| {
        let dataset = ref_arg(dataset, "dataset")?;
        let dir = str_arg(predictions_dir, "predictions_dir")?;
        check_out(out, "out")?;
        let report = evaluate_benchmark(&dataset.0, &PathBuf::from(dir))?;
        let r = report
            .aggregate
            .ok_or_else(|| Error::NotFound("dataset has no expressions to score".into()))?;
        *out = CoalHota {
            hota: r.hota,
            deta: r.deta,
            assa: r.assa,
            detre: r.detre,
            detpr: r.detpr,
            assre: r.assre,
            asspr: r.asspr,
            loca: r.loca,
        };
        Ok(())
    })
}

/// Optimal assignment on a dense row-major `rows x cols` matrix. NaN
/// entries are forbidden pairs. Writes the matched column of each row to
/// `col_for_row`, or -1 when the row stays unmatched.
///
/// # Safety
/// `cost` must hold `rows * cols` values and `col_for_row` room for `rows`.
#[no_mangle]
pub unsafe extern "C" fn coal_linear_assignment(
    cost: *const f64,
    rows: usize,
    cols: usize,
    maximize: bool,
    col_for_row: *mut i64,
) -> CoalStatus {
    guard(|| {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Invalid("matrix size overflows".into()))?;
        if n > 0 && cost.is_null() {
            return Err(Failure::Null("cost"));
        }
        if rows > 0 {
            check_out(col_for_row, "col_for_row")?;
        }
        let values = if n == 0 { &[][..] } else { std::slice::from_raw_parts(cost, n) };
        if values.iter().any(|v| v.is_infinite()) {
            return Err(Error::Invalid("cost entries must be finite or NaN".into()).into());
        }
        let m = CostMatrix::from_fn(rows, cols, |i, j| Some(values[i * cols + j]).filter(|v| !v.is_nan()));
        let result = linear_assignment(&m, maximize);
        if rows > 0 {
            let out = std::slice::from_raw_parts_mut(col_for_row, rows);
            out.fill(-1);
            for (i, j) in result.pairs {
                out[i] = j as i64;
            }
        }
        Ok(())
    })
}
