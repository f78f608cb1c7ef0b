//! C ABI over `rosetta-core`.
//!
//! Every fallible function returns a [`RosettaStatus`]. On failure the
//! message is available from [`rosetta_last_error`] on the same thread until
//! the next failing call. Handles are opaque and must be released with their
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rosetta_core::correlation::gdc_weight;
use rosetta_core::diffcore::Tensor;
use rosetta_core::harness::{gate_stats, load_engine, run_sequence, ExperimentConfig};
use rosetta_core::lifecycle::Engine;
use rosetta_core::membank::MemoryBank;
use rosetta_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RosettaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    BadMagic = 4,
    UnsupportedVersion = 5,
    Checksum = 6,
    Malformed = 7,
    UnknownTask = 8,
    InvalidArgument = 9,
    Config = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

impl From<&Error> for RosettaStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => RosettaStatus::Io,
            Error::BadMagic(_) => RosettaStatus::BadMagic,
            Error::UnsupportedVersion(_) => RosettaStatus::UnsupportedVersion,
            Error::Checksum(_) => RosettaStatus::Checksum,
            Error::Malformed(_) | Error::Csv(_) => RosettaStatus::Malformed,
            Error::UnknownTask(_) => RosettaStatus::UnknownTask,
            Error::Config(_) | Error::UnknownConfigKeys(_) => RosettaStatus::Config,
            _ => RosettaStatus::InvalidArgument,
        }
    }
}

/// Four-way channel occupancy of two tasks, as fractions of all channels.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RosettaOccupancy {
    pub only_a: f64,
    pub overlap: f64,
    pub only_b: f64,
    pub unused: f64,
}

/// A loaded memory bank.
pub struct RosettaBank {
    bank: MemoryBank,
}

/// A memory bank together with the trunk it was trained on.
pub struct RosettaModel {
    engine: Engine,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: RosettaStatus, msg: impl Into<String>) -> RosettaStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, turning core errors and panics into status codes.
fn guard<F>(f: F) -> RosettaStatus
where
    F: FnOnce() -> Result<(), RosettaStatus>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RosettaStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(RosettaStatus::Panic, "internal panic"),
    }
}

fn core_err(e: Error) -> RosettaStatus {
    fail(RosettaStatus::from(&e), e.to_string())
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), RosettaStatus> {
    if p.is_null() {
        Err(fail(RosettaStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, RosettaStatus> {
    non_null(p, what)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(RosettaStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rosetta_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn rosetta_status_name(status: RosettaStatus) -> *const c_char {
    let s: &'static CStr = match status {
        RosettaStatus::Ok => c"ok",
        RosettaStatus::NullPointer => c"null_pointer",
        RosettaStatus::InvalidUtf8 => c"invalid_utf8",
        RosettaStatus::Io => c"io",
        RosettaStatus::BadMagic => c"bad_magic",
        RosettaStatus::UnsupportedVersion => c"unsupported_version",
        RosettaStatus::Checksum => c"checksum",
        RosettaStatus::Malformed => c"malformed",
        RosettaStatus::UnknownTask => c"unknown_task",
        RosettaStatus::InvalidArgument => c"invalid_argument",
        RosettaStatus::Config => c"config",
        RosettaStatus::BufferTooSmall => c"buffer_too_small",
        RosettaStatus::Panic => c"panic",
    };
    s.as_ptr()
}

/// Loads a bank file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rosetta_bank_load(path: *const c_char, out: *mut *mut RosettaBank) -> RosettaStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = path_arg(path, "path")?;
        let bank = MemoryBank::load(&path).map_err(core_err)?;
        *out = Box::into_raw(Box::new(RosettaBank { bank }));
        Ok(())
    })
}

/// # Safety
/// `bank` must be null or a handle from [`rosetta_bank_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rosetta_bank_free(bank: *mut RosettaBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// # Safety
/// `bank` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rosetta_bank_task_count(bank: *const RosettaBank, out: *mut usize) -> RosettaStatus {
    guard(|| {
        non_null(bank, "bank")?;
        non_null(out, "out")?;
        *out = (*bank).bank.len();
        Ok(())
    })
}

/// Id of the task committed at position `index`.
///
/// # Safety
/// `bank` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rosetta_bank_task_id(bank: *const RosettaBank, index: usize, out: *mut u32) -> RosettaStatus {
    guard(|| {
        non_null(bank, "bank")?;
        non_null(out, "out")?;
        let records = (*bank).bank.records();
        let r = records.get(index).ok_or_else(|| {
            fail(
                RosettaStatus::InvalidArgument,
                format!("index {index} out of range for {} tasks", records.len()),
            )
        })?;
        *out = r.task_id;
        Ok(())
    })
}

/// Aggregate channel occupancy of tasks `a` and `b`.
///
/// # Safety
/// `bank` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rosetta_gate_stats(
    bank: *const RosettaBank,
    a: u32,
    b: u32,
    out: *mut RosettaOccupancy,
) -> RosettaStatus {
    guard(|| {
        non_null(bank, "bank")?;
        non_null(out, "out")?;
        let s = gate_stats(&(*bank).bank, a, b).map_err(core_err)?;
        let f = s.aggregate;
        *out = RosettaOccupancy {
            only_a: f.only_a,
            overlap: f.overlap,
            only_b: f.only_b,
            unused: f.unused,
        };
        Ok(())
    })
}

/// Controller weight from a cross-task and an intra-task correlation.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rosetta_gdc_weight(r_nm: f64, r_mm: f64, out: *mut f64) -> RosettaStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = gdc_weight(r_nm, r_mm).map_err(core_err)?;
        Ok(())
    })
}

/// Loads a bank and its trunk checkpoint for inference.
///
/// # Safety
/// Both paths must be NUL-terminated strings and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rosetta_model_load(
    bank_path: *const c_char,
    net_path: *const c_char,
    out: *mut *mut RosettaModel,
) -> RosettaStatus {
    guard(|| {
        non_null(out, "out")?;
        let bank = path_arg(bank_path, "bank_path")?;
        let net = path_arg(net_path, "net_path")?;
        let engine = load_engine(&bank, &net).map_err(core_err)?;
        *out = Box::into_raw(Box::new(RosettaModel { engine }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`rosetta_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rosetta_model_free(model: *mut RosettaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Width of the input rows the model expects.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rosetta_model_input_dim(model: *const RosettaModel, out: *mut usize) -> RosettaStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).engine.net.arch.input_dim;
        Ok(())
    })
}

/// Number of classes, and so logits per row, of a stored task.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rosetta_model_num_classes(
    model: *const RosettaModel,
    task: u32,
    out: *mut usize,
) -> RosettaStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).engine.bank.get(task).map_err(core_err)?.class_ids.len();
        Ok(())
    })
}

/// Logits of `rows` row-major input rows under task `task`'s stored gates.
/// `logits` must hold `rows * num_classes` values; `logits_len` is its
/// capacity.
///
/// # Safety
/// `inputs` must point to `rows * cols` readable doubles and `logits` to
/// `logits_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rosetta_model_infer(
    model: *const RosettaModel,
    task: u32,
    inputs: *const f64,
    rows: usize,
    cols: usize,
    logits: *mut f64,
    logits_len: usize,
) -> RosettaStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(inputs, "inputs")?;
        non_null(logits, "logits")?;
        let engine = &(*model).engine;
        let classes = engine.bank.get(task).map_err(core_err)?.class_ids.len();
        if cols != engine.net.arch.input_dim {
            return Err(fail(
                RosettaStatus::InvalidArgument,
                format!("inputs have {cols} columns, model expects {}", engine.net.arch.input_dim),
            ));
        }
        let need = rows * classes;
        if logits_len < need {
            return Err(fail(
                RosettaStatus::BufferTooSmall,
                format!("logits buffer holds {logits_len} values, {need} needed"),
            ));
        }
        let x = Tensor::matrix(rows, cols, std::slice::from_raw_parts(inputs, rows * cols).to_vec())
            .map_err(core_err)?;
        let y = engine.infer(task, &x).map_err(core_err)?;
        ptr::copy_nonoverlapping(y.data().as_ptr(), logits, need);
        Ok(())
    })
}

/// Runs a full `train-sequence` experiment from a config file into `out_dir`.
///
/// # Safety
/// Both arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn rosetta_run_sequence(config_path: *const c_char, out_dir: *const c_char) -> RosettaStatus {
    guard(|| {
        let config = path_arg(config_path, "config_path")?;
        let out = path_arg(out_dir, "out_dir")?;
        let cfg = ExperimentConfig::load(&config).map_err(core_err)?;
        run_sequence(&cfg, &out).map_err(core_err)?;
        Ok(())
    })
}
