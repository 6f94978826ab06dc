//! C ABI for caw-core.
//!
//! Models and datasets are opaque heap handles released with the matching
//! `_free` call. Every fallible function returns a [`CawStatus`]; on failure
//! a message is kept per thread and read with [`caw_last_error_message`].
//! Configuration arguments are JSON strings in the same shape as the CLI
//! config sections, and `NULL` selects the defaults.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use caw_core::attacks::{attack, AttackConfig};
use caw_core::data::{generate_synthetic, load_dataset, save_dataset, Dataset, SyntheticDatasetSpec};
use caw_core::eval::evaluate;
use caw_core::losses::{total_loss, CawConfig};
use caw_core::model::{load_checkpoint, save_checkpoint, Checkpoint, DualEncoderModel, EncoderArch, ImageEncoder};
use caw_core::tensor::Tensor;
use caw_core::training::{fit, pretrain_clean, TrainConfig};
use caw_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CawStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Domain = 4,
    Contract = 5,
    Numeric = 6,
    Io = 7,
    Format = 8,
    Panic = 9,
}

/// Loss values for one batch.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CawLossBreakdown {
    pub ce: f64,
    pub ca: f64,
    pub reg: f64,
    pub total: f64,
    pub mean_weight: f64,
}

/// Opaque model handle.
pub struct CawModel(DualEncoderModel);

/// Opaque dataset handle.
pub struct CawDataset(Dataset);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Fail(CawStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Dimension(_) => CawStatus::Dimension,
            Error::Domain(_) => CawStatus::Domain,
            Error::Contract(_) | Error::GraphConsumed => CawStatus::Contract,
            Error::Numeric(_) => CawStatus::Numeric,
            Error::Config(_) => CawStatus::InvalidArgument,
            Error::Format(_) => CawStatus::Format,
            Error::Io(_) => CawStatus::Io,
        };
        Fail(status, e.to_string())
    }
}

type FfiResult<T> = std::result::Result<T, Fail>;

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(CawStatus::InvalidArgument, msg.into())
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> CawStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CawStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CawStatus::Panic
        }
    }
}

unsafe fn opt_str<'a>(p: *const c_char, what: &str) -> FfiResult<Option<&'a str>> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p).to_str().map(Some).map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn req_str<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    opt_str(p, what)?.ok_or_else(|| Fail(CawStatus::NullPointer, format!("{what} is NULL")))
}

fn parse<T: DeserializeOwned + Default>(json: Option<&str>, what: &str) -> FfiResult<T> {
    match json {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| invalid(format!("{what}: {e}"))),
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail(CawStatus::NullPointer, format!("{what} is NULL")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail(CawStatus::NullPointer, format!("{what} is NULL")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| Fail(CawStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| Fail(CawStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> FfiResult<()> {
    if out.is_null() {
        return Err(Fail(CawStatus::NullPointer, "output handle pointer is NULL".into()));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn batch(x: *const f64, rows: usize, cols: usize, what: &str) -> FfiResult<Tensor> {
    let n = rows.checked_mul(cols).ok_or_else(|| invalid("rows * cols overflows"))?;
    Ok(Tensor::matrix(rows, cols, slice(x, n, what)?.to_vec())?)
}

/// Message of the last failed call on this thread, or `NULL` after a
/// successful one. Valid until the next call into the library.
#[no_mangle]
pub extern "C" fn caw_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Static, human-readable name of a status code.
#[no_mangle]
pub extern "C" fn caw_status_name(status: CawStatus) -> *const c_char {
    let s: &'static CStr = match status {
        CawStatus::Ok => c"ok",
        CawStatus::NullPointer => c"null pointer",
        CawStatus::InvalidArgument => c"invalid argument",
        CawStatus::Dimension => c"dimension mismatch",
        CawStatus::Domain => c"domain error",
        CawStatus::Contract => c"contract violation",
        CawStatus::Numeric => c"numeric failure",
        CawStatus::Io => c"i/o error",
        CawStatus::Format => c"format error",
        CawStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Generates a synthetic dataset from a JSON spec (`NULL` for the default).
///
/// # Safety
/// `spec_json` is `NULL` or a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn caw_dataset_generate(spec_json: *const c_char, out: *mut *mut CawDataset) -> CawStatus {
    guard(|| {
        let spec: SyntheticDatasetSpec = parse(opt_str(spec_json, "spec_json")?, "spec_json")?;
        put(out, CawDataset(generate_synthetic(&spec)?))
    })
}

/// # Safety
/// `path` is a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn caw_dataset_load(path: *const c_char, out: *mut *mut CawDataset) -> CawStatus {
    guard(|| {
        let path = req_str(path, "path")?;
        put(out, CawDataset(load_dataset(Path::new(path))?))
    })
}

/// # Safety
/// `dataset` is a live handle; `path` is a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn caw_dataset_save(dataset: *const CawDataset, path: *const c_char) -> CawStatus {
    guard(|| {
        let d = handle(dataset, "dataset")?;
        Ok(save_dataset(Path::new(req_str(path, "path")?), &d.0)?)
    })
}

/// Sample count, or 0 for `NULL`.
///
/// # Safety
/// `dataset` is `NULL` or a live handle.
#[no_mangle]
pub unsafe extern "C" fn caw_dataset_len(dataset: *const CawDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `dataset` is `NULL` or a live handle.
#[no_mangle]
pub unsafe extern "C" fn caw_dataset_input_dim(dataset: *const CawDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.input_dim())
}

/// # Safety
/// `dataset` is `NULL` or a live handle.
#[no_mangle]
pub unsafe extern "C" fn caw_dataset_classes(dataset: *const CawDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.classes())
}

/// Copies the row-major inputs (`len * input_dim` values) and the labels
/// (`len` values). Either output may be `NULL` to skip it.
///
/// # Safety
/// Non-null outputs hold at least the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn caw_dataset_copy(
    dataset: *const CawDataset,
    out_x: *mut f64,
    x_len: usize,
    out_labels: *mut usize,
    labels_len: usize,
) -> CawStatus {
    guard(|| {
        let d = &handle(dataset, "dataset")?.0;
        if !out_x.is_null() {
            if x_len != d.x.data().len() {
                return Err(invalid(format!("x_len is {x_len}, dataset has {} values", d.x.data().len())));
            }
            slice_mut(out_x, x_len, "out_x")?.copy_from_slice(d.x.data());
        }
        if !out_labels.is_null() {
            if labels_len != d.len() {
                return Err(invalid(format!("labels_len is {labels_len}, dataset has {} samples", d.len())));
            }
            slice_mut(out_labels, labels_len, "out_labels")?.copy_from_slice(&d.labels);
        }
        Ok(())
    })
}

/// # Safety
/// `dataset` is `NULL` or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn caw_dataset_free(dataset: *mut CawDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Seeded MLP encoder mapping the dataset's inputs into its prototype space,
/// classifying against the dataset's prototypes at temperature `temperature`.
///
/// # Safety
/// `dataset` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn caw_model_new(
    dataset: *const CawDataset,
    hidden_dim: usize,
    hidden_layers: usize,
    temperature: f64,
    seed: u64,
    out: *mut *mut CawModel,
) -> CawStatus {
    guard(|| {
        let d = &handle(dataset, "dataset")?.0;
        let arch = EncoderArch::mlp(d.input_dim(), hidden_dim, hidden_layers, d.prototypes.embed_dim());
        let encoder = ImageEncoder::init(&arch, &mut ChaCha8Rng::seed_from_u64(seed))?;
        put(out, CawModel(DualEncoderModel::new(encoder, d.prototypes.clone(), temperature)?))
    })
}

/// # Safety
/// `path` is a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn caw_model_load(path: *const c_char, out: *mut *mut CawModel) -> CawStatus {
    guard(|| {
        let ckpt = load_checkpoint(Path::new(req_str(path, "path")?))?;
        put(out, CawModel(ckpt.model))
    })
}

/// Writes a checkpoint holding the model only.
///
/// # Safety
/// `model` is a live handle; `path` is a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn caw_model_save(model: *const CawModel, path: *const c_char) -> CawStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let ckpt = Checkpoint { model: m.0.clone(), optimizer: None, seed: 0, epoch: 0, config_digest: String::new() };
        Ok(save_checkpoint(Path::new(req_str(path, "path")?), &ckpt)?)
    })
}

/// Copies the tuned encoder into the frozen slot.
///
/// # Safety
/// `model` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn caw_model_snapshot(model: *mut CawModel, force: bool) -> CawStatus {
    guard(|| Ok(handle_mut(model, "model")?.0.snapshot_frozen(force)?))
}

/// Clean cross-entropy training; `train_json` is a training config whose
/// loss weights and inner attack are ignored.
///
/// # Safety
/// Handles are live; `train_json` is `NULL` or a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn caw_model_pretrain(
    model: *mut CawModel,
    dataset: *const CawDataset,
    train_json: *const c_char,
) -> CawStatus {
    guard(|| {
        let cfg: TrainConfig = parse(opt_str(train_json, "train_json")?, "train_json")?;
        let d = &handle(dataset, "dataset")?.0;
        pretrain_clean(&mut handle_mut(model, "model")?.0, d, &cfg)?;
        Ok(())
    })
}

/// Adversarial fine-tuning. Requires a prior snapshot. `out_steps` may be
/// `NULL`.
///
/// # Safety
/// Handles are live; `train_json` is `NULL` or a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn caw_model_fit(
    model: *mut CawModel,
    dataset: *const CawDataset,
    train_json: *const c_char,
    out_steps: *mut u64,
) -> CawStatus {
    guard(|| {
        let cfg: TrainConfig = parse(opt_str(train_json, "train_json")?, "train_json")?;
        let d = &handle(dataset, "dataset")?.0;
        let outcome = fit(&mut handle_mut(model, "model")?.0, d, &cfg)?;
        if let Some(s) = out_steps.as_mut() {
            *s = outcome.optimizer.step();
        }
        Ok(())
    })
}

/// Arg-max class of each of `rows` inputs.
///
/// # Safety
/// `x` holds `rows * cols` values and `out_labels` holds `rows`.
#[no_mangle]
pub unsafe extern "C" fn caw_model_predict(
    model: *const CawModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    out_labels: *mut usize,
) -> CawStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let pred = m.predict(&batch(x, rows, cols, "x")?, false)?;
        slice_mut(out_labels, rows, "out_labels")?.copy_from_slice(&pred);
        Ok(())
    })
}

/// Writes the 64-character hex digest plus a nul terminator.
///
/// # Safety
/// `buf` holds `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn caw_model_digest(model: *const CawModel, buf: *mut c_char, cap: usize) -> CawStatus {
    guard(|| {
        let digest = handle(model, "model")?.0.digest();
        if cap < digest.len() + 1 {
            return Err(invalid(format!("buffer holds {cap} bytes, digest needs {}", digest.len() + 1)));
        }
        let out = slice_mut(buf.cast::<u8>(), cap, "buf")?;
        out[..digest.len()].copy_from_slice(digest.as_bytes());
        out[digest.len()] = 0;
        Ok(())
    })
}

/// # Safety
/// `model` is `NULL` or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn caw_model_free(model: *mut CawModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs the attack described by `attack_json` (`NULL` for the default) on
/// a batch. `out_x_adv` receives `rows * cols` values; `out_success` may be
/// `NULL`, otherwise it receives `rows` flags.
///
/// # Safety
/// Buffers hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn caw_attack(
    model: *const CawModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    labels: *const usize,
    attack_json: *const c_char,
    out_x_adv: *mut f64,
    out_success: *mut bool,
) -> CawStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let cfg: AttackConfig = parse(opt_str(attack_json, "attack_json")?, "attack_json")?;
        let xt = batch(x, rows, cols, "x")?;
        let r = attack(m, &xt, slice(labels, rows, "labels")?, &cfg)?;
        slice_mut(out_x_adv, xt.data().len(), "out_x_adv")?.copy_from_slice(r.x_adv.data());
        if !out_success.is_null() {
            slice_mut(out_success, rows, "out_success")?.copy_from_slice(&r.success_mask);
        }
        Ok(())
    })
}

/// Training objective on a clean batch and its adversarial counterpart.
///
/// # Safety
/// `x` and `x_adv` hold `rows * cols` values, `labels` holds `rows`.
#[no_mangle]
pub unsafe extern "C" fn caw_total_loss(
    model: *const CawModel,
    x: *const f64,
    x_adv: *const f64,
    rows: usize,
    cols: usize,
    labels: *const usize,
    loss_json: *const c_char,
    out: *mut CawLossBreakdown,
) -> CawStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let cfg: CawConfig = parse(opt_str(loss_json, "loss_json")?, "loss_json")?;
        let b = total_loss(m, &batch(x, rows, cols, "x")?, &batch(x_adv, rows, cols, "x_adv")?, slice(labels, rows, "labels")?, &cfg)?;
        let out = handle_mut(out, "out")?;
        *out = CawLossBreakdown { ce: b.l_ce, ca: b.l_ca, reg: b.l_reg, total: b.l_total, mean_weight: b.mean_confidence_weight };
        Ok(())
    })
}

/// Clean accuracy and one robust accuracy per attack in `attacks_json`, a
/// JSON array (`NULL` for none). `robust_len` must equal the array length.
///
/// # Safety
/// Handles are live; `out_robust` holds `robust_len` values.
#[no_mangle]
pub unsafe extern "C" fn caw_evaluate(
    model: *const CawModel,
    dataset: *const CawDataset,
    attacks_json: *const c_char,
    batch_size: usize,
    out_clean: *mut f64,
    out_robust: *mut f64,
    robust_len: usize,
) -> CawStatus {
    guard(|| {
        let attacks: Vec<AttackConfig> = parse(opt_str(attacks_json, "attacks_json")?, "attacks_json")?;
        if attacks.len() != robust_len {
            return Err(invalid(format!("{} attacks but robust_len is {robust_len}", attacks.len())));
        }
        let report = evaluate(&handle(model, "model")?.0, &handle(dataset, "dataset")?.0, &attacks, batch_size)?;
        *handle_mut(out_clean, "out_clean")? = report.clean_accuracy;
        let robust = slice_mut(out_robust, robust_len, "out_robust")?;
        for (o, r) in robust.iter_mut().zip(&report.robust) {
            *o = r.accuracy;
        }
        Ok(())
    })
}
