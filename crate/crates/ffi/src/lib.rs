//! C ABI over `prism-core`.
//!
//! Every fallible function returns a [`PrismStatus`] code; on failure the
//! message is kept per thread and read with [`prism_last_error`]. Handles are
//! opaque, owned by the caller, and released with their `_free` function.
//! Passing a null handle to a `_free` function is a no-op.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use prism_core::config::ExperimentConfig;
use prism_core::cost::{cost_of, original_cost};
use prism_core::experiment::prepare;
use prism_core::federation::Federation;
use prism_core::nn::by_name;
use prism_core::sampler::Method;
use prism_core::{checkpoint, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrismStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Numerical = 3,
    Io = 4,
    Contract = 5,
    Panic = 6,
}

impl From<&Error> for PrismStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config { .. } => PrismStatus::Config,
            Error::Numerical { .. } | Error::Diverged { .. } => PrismStatus::Numerical,
            Error::Io { .. } | Error::Format { .. } => PrismStatus::Io,
            Error::Contract(_) | Error::Partition { .. } => PrismStatus::Contract,
        }
    }
}

/// Parsed, validated experiment configuration.
pub struct PrismConfig {
    text: String,
    overrides: Vec<String>,
    cfg: ExperimentConfig,
}

/// A federation ready to run rounds.
pub struct PrismFederation {
    inner: Federation,
    seed: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct PrismCost {
    pub params: u64,
    pub macs: u64,
    pub activation_mem: u64,
}

/// Outcome of one round. `accuracy` and `loss` are NaN when the round was
/// not evaluated.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct PrismRoundInfo {
    pub round: u64,
    pub clients: u32,
    pub diverged: u32,
    pub accuracy: f64,
    pub loss: f64,
    pub training_seconds: f64,
    pub svd_seconds: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: PrismStatus, msg: &str) -> PrismStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), PrismStatus>) -> PrismStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PrismStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(PrismStatus::Panic, "internal panic"),
    }
}

fn check(e: Error) -> PrismStatus {
    fail(PrismStatus::from(&e), &e.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, PrismStatus> {
    if p.is_null() {
        return Err(fail(PrismStatus::NullPointer, &format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(PrismStatus::Contract, &format!("`{name}` is not valid UTF-8")))
}

fn null(name: &str) -> PrismStatus {
    fail(PrismStatus::NullPointer, &format!("`{name}` is null"))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn prism_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn prism_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a TOML config (may be empty for defaults).
#[no_mangle]
pub unsafe extern "C" fn prism_config_parse(toml: *const c_char, out: *mut *mut PrismConfig) -> PrismStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let text = str_arg(toml, "toml")?.to_string();
        let cfg = ExperimentConfig::parse(&text, &[]).map_err(check)?;
        *out = Box::into_raw(Box::new(PrismConfig {
            text,
            overrides: Vec::new(),
            cfg,
        }));
        Ok(())
    })
}

/// Applies a `key=value` override, e.g. `fed.rounds=10`. On failure the
/// config is left unchanged.
#[no_mangle]
pub unsafe extern "C" fn prism_config_set(config: *mut PrismConfig, key_value: *const c_char) -> PrismStatus {
    guard(|| {
        let c = config.as_mut().ok_or_else(|| null("config"))?;
        let kv = str_arg(key_value, "key_value")?.to_string();
        let mut overrides = c.overrides.clone();
        overrides.push(kv);
        c.cfg = ExperimentConfig::parse(&c.text, &overrides).map_err(check)?;
        c.overrides = overrides;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prism_config_free(config: *mut PrismConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Loads data, partitions it and initializes the server model.
#[no_mangle]
pub unsafe extern "C" fn prism_federation_new(
    config: *const PrismConfig,
    out: *mut *mut PrismFederation,
) -> PrismStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        let (inner, _) = prepare(&c.cfg).map_err(check)?;
        *out = Box::into_raw(Box::new(PrismFederation {
            inner,
            seed: c.cfg.fed.seed,
        }));
        Ok(())
    })
}

/// Runs one round. Running past the configured round count is a contract error.
#[no_mangle]
pub unsafe extern "C" fn prism_federation_run_round(
    fed: *mut PrismFederation,
    info: *mut PrismRoundInfo,
) -> PrismStatus {
    guard(|| {
        let f = fed.as_mut().ok_or_else(|| null("federation"))?;
        if f.inner.is_done() {
            return Err(fail(PrismStatus::Contract, "all configured rounds have run"));
        }
        let r = f.inner.run_round().map_err(check)?;
        if let Some(info) = info.as_mut() {
            *info = PrismRoundInfo {
                round: r.round as u64,
                clients: r.clients.len() as u32,
                diverged: r.diverged().len() as u32,
                accuracy: r.eval_accuracy.unwrap_or(f64::NAN),
                loss: r.eval_loss.unwrap_or(f64::NAN),
                training_seconds: r.timings.training,
                svd_seconds: r.timings.svd,
            };
        }
        Ok(())
    })
}

/// Rounds completed so far; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn prism_federation_round(fed: *const PrismFederation) -> u64 {
    fed.as_ref().map_or(0, |f| f.inner.round() as u64)
}

#[no_mangle]
pub unsafe extern "C" fn prism_federation_is_done(fed: *const PrismFederation) -> bool {
    fed.as_ref().is_none_or(|f| f.inner.is_done())
}

/// Test accuracy and loss of the current server model.
#[no_mangle]
pub unsafe extern "C" fn prism_federation_evaluate(
    fed: *const PrismFederation,
    accuracy: *mut f64,
    loss: *mut f64,
) -> PrismStatus {
    guard(|| {
        let f = fed.as_ref().ok_or_else(|| null("federation"))?;
        let (a, l) = f.inner.evaluate().map_err(check)?;
        if let Some(p) = accuracy.as_mut() {
            *p = a;
        }
        if let Some(p) = loss.as_mut() {
            *p = l;
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prism_federation_save_checkpoint(
    fed: *const PrismFederation,
    path: *const c_char,
) -> PrismStatus {
    guard(|| {
        let f = fed.as_ref().ok_or_else(|| null("federation"))?;
        let path = str_arg(path, "path")?;
        checkpoint::save(path, &f.inner.server, f.seed).map_err(check)
    })
}

#[no_mangle]
pub unsafe extern "C" fn prism_federation_free(fed: *mut PrismFederation) {
    if !fed.is_null() {
        drop(Box::from_raw(fed));
    }
}

/// Cost of one client sub-model. `input` holds C, H, W and is ignored for
/// `resnet18-cifar`. Pass `keep_ratio` 1 with method `fullfedavg` for the
/// unfactorized original model.
#[no_mangle]
pub unsafe extern "C" fn prism_cost(
    model: *const c_char,
    method: *const c_char,
    keep_ratio: f64,
    batch: usize,
    input: *const usize,
    num_classes: usize,
    out: *mut PrismCost,
) -> PrismStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let model = str_arg(model, "model")?;
        let method_name = str_arg(method, "method")?;
        let method = Method::parse(method_name)
            .ok_or_else(|| fail(PrismStatus::Config, &format!("unknown method `{method_name}`")))?;
        let shape = if model == "resnet18-cifar" {
            [3, 32, 32]
        } else {
            if input.is_null() {
                return Err(null("input"));
            }
            let s = std::slice::from_raw_parts(input, 3);
            [s[0], s[1], s[2]]
        };
        let arch = by_name(model, shape, num_classes, false).map_err(check)?;
        let c = if method == Method::FullFedAvg && keep_ratio == 1.0 {
            original_cost(&arch, batch)
        } else {
            cost_of(&arch, method, keep_ratio, method.out_factor(), batch)
        }
        .map_err(check)?;
        *out = PrismCost {
            params: c.params as u64,
            macs: c.macs as u64,
            activation_mem: c.activation_mem as u64,
        };
        Ok(())
    })
}
