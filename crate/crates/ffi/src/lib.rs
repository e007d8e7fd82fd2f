//! C ABI for the label-recovery laboratory.
//!
//! The surface is deliberately small: experiments travel as JSON (the same
//! documents the CLI reads and writes), handles are opaque, and every
//! fallible call returns a status code with the message retrievable through
//! [`gdbr_last_error_message`]. Strings returned through out-parameters are
//! owned by the caller and must be released with [`gdbr_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};

use gdbr_core::attack::recover_labels;
use gdbr_core::harness::{trial_seed, Aggregate, Experiment, ExperimentConfig, RunReport};
use gdbr_core::tensor::Tensor;
use gdbr_core::verify;

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GdbrStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The configuration document was rejected.
    InvalidConfig = 3,
    /// The experiment or attack failed at runtime.
    RuntimeError = 4,
}

/// Opaque handle over a prepared experiment (config plus materialized
/// datasets).
pub struct GdbrExperiment {
    inner: Experiment,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: GdbrStatus, message: &str) -> GdbrStatus {
    set_last_error(message);
    status
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gdbr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn gdbr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn read_utf8<'a>(text: *const c_char) -> Result<&'a str, GdbrStatus> {
    if text.is_null() {
        return Err(GdbrStatus::NullArgument);
    }
    CStr::from_ptr(text)
        .to_str()
        .map_err(|_| GdbrStatus::InvalidUtf8)
}

fn export_string(out: *mut *mut c_char, text: String) -> GdbrStatus {
    match CString::new(text) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            GdbrStatus::Ok
        }
        Err(_) => fail(GdbrStatus::RuntimeError, "report contained a NUL byte"),
    }
}

/// Parses an experiment config JSON document and prepares its datasets.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out_experiment` a
/// valid pointer. On success `*out_experiment` owns the handle until
/// [`gdbr_experiment_free`].
#[no_mangle]
pub unsafe extern "C" fn gdbr_experiment_new(
    config_json: *const c_char,
    out_experiment: *mut *mut GdbrExperiment,
) -> GdbrStatus {
    if out_experiment.is_null() {
        return fail(GdbrStatus::NullArgument, "out_experiment is null");
    }
    let text = match read_utf8(config_json) {
        Ok(text) => text,
        Err(status) => return fail(status, "config_json unreadable"),
    };
    let config = match ExperimentConfig::from_json(text) {
        Ok(config) => config,
        Err(err) => return fail(GdbrStatus::InvalidConfig, &err.to_string()),
    };
    match Experiment::prepare(config) {
        Ok(inner) => {
            *out_experiment = Box::into_raw(Box::new(GdbrExperiment { inner }));
            GdbrStatus::Ok
        }
        Err(err) => fail(GdbrStatus::InvalidConfig, &err.to_string()),
    }
}

/// Releases a handle returned by [`gdbr_experiment_new`]. Null is ignored.
///
/// # Safety
/// The handle must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gdbr_experiment_free(experiment: *mut GdbrExperiment) {
    if !experiment.is_null() {
        drop(Box::from_raw(experiment));
    }
}

/// Runs one trial (seeded exactly like trial `trial_index` of a full run)
/// and returns its report as a JSON string.
///
/// # Safety
/// `experiment` must be a live handle and `out_json` a valid pointer; the
/// returned string is released with [`gdbr_string_free`].
#[no_mangle]
pub unsafe extern "C" fn gdbr_experiment_run_trial(
    experiment: *const GdbrExperiment,
    trial_index: u64,
    out_json: *mut *mut c_char,
) -> GdbrStatus {
    if experiment.is_null() || out_json.is_null() {
        return fail(GdbrStatus::NullArgument, "experiment or out_json is null");
    }
    let experiment = &(*experiment).inner;
    let seed = trial_seed(experiment.config.seed, 0, trial_index);
    match experiment.run_trial(trial_index as usize, seed) {
        Ok(report) => match serde_json::to_string(&report) {
            Ok(text) => export_string(out_json, text),
            Err(err) => fail(GdbrStatus::RuntimeError, &err.to_string()),
        },
        Err(err) => fail(GdbrStatus::RuntimeError, &err.to_string()),
    }
}

/// Runs all R repetitions and returns the aggregated run report as JSON.
///
/// # Safety
/// Same contract as [`gdbr_experiment_run_trial`].
#[no_mangle]
pub unsafe extern "C" fn gdbr_experiment_run(
    experiment: *const GdbrExperiment,
    out_json: *mut *mut c_char,
) -> GdbrStatus {
    if experiment.is_null() || out_json.is_null() {
        return fail(GdbrStatus::NullArgument, "experiment or out_json is null");
    }
    let experiment = &(*experiment).inner;
    let trials = match experiment.run_trials(0) {
        Ok(trials) => trials,
        Err(err) => return fail(GdbrStatus::RuntimeError, &err.to_string()),
    };
    let report = RunReport {
        config: experiment.config.clone(),
        aggregate: Aggregate::from_trials(&trials),
        trials,
    };
    match serde_json::to_string(&report) {
        Ok(text) => export_string(out_json, text),
        Err(err) => fail(GdbrStatus::RuntimeError, &err.to_string()),
    }
}

/// Label recovery from an already-bridged logit gradient:
/// writes `round(B * (p_tilde - grad_z))` into `out_counts`.
///
/// # Safety
/// `p_tilde`, `grad_z` and `out_counts` must point to `class_count`
/// readable/writable elements.
#[no_mangle]
pub unsafe extern "C" fn gdbr_recover_label_counts(
    p_tilde: *const f64,
    grad_z: *const f64,
    class_count: usize,
    batch_size: u64,
    out_counts: *mut u64,
) -> GdbrStatus {
    if p_tilde.is_null() || grad_z.is_null() || out_counts.is_null() {
        return fail(GdbrStatus::NullArgument, "a buffer argument is null");
    }
    if class_count == 0 {
        return fail(GdbrStatus::InvalidConfig, "class_count must be >= 1");
    }
    let p = Tensor::vector(std::slice::from_raw_parts(p_tilde, class_count).to_vec());
    let g = Tensor::vector(std::slice::from_raw_parts(grad_z, class_count).to_vec());
    match recover_labels(&p, &g, batch_size as usize) {
        Ok(labels) => {
            for (i, &count) in labels.counts.iter().enumerate() {
                *out_counts.add(i) = count as u64;
            }
            GdbrStatus::Ok
        }
        Err(err) => fail(GdbrStatus::RuntimeError, &err.to_string()),
    }
}

/// Runs the gradient-identity suite; reports how many checks passed.
///
/// # Safety
/// `out_passed` and `out_total` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn gdbr_verify(
    seed: u64,
    out_passed: *mut usize,
    out_total: *mut usize,
) -> GdbrStatus {
    if out_passed.is_null() || out_total.is_null() {
        return fail(GdbrStatus::NullArgument, "out_passed or out_total is null");
    }
    let outcomes = verify::run_all(seed);
    *out_total = outcomes.len();
    *out_passed = outcomes.iter().filter(|o| o.passed).count();
    GdbrStatus::Ok
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// The pointer must originate from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gdbr_string_free(text: *mut c_char) {
    if !text.is_null() {
        drop(CString::from_raw(text));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    fn config_json() -> CString {
        CString::new(
            r#"{
                "seed": 3,
                "class_count": 3,
                "batch_size": 6,
                "repetitions": 2,
                "aux_sample_count": 30,
                "model": { "input": [6], "hidden": [6, 5] },
                "dataset": { "synthetic": {
                    "class_count": 3, "shape": [6], "per_class": 20,
                    "separation": 3.0, "seed": 9
                } }
            }"#,
        )
        .unwrap()
    }

    unsafe fn take_string(ptr: *mut c_char) -> String {
        let text = CStr::from_ptr(ptr).to_str().unwrap().to_string();
        gdbr_string_free(ptr);
        text
    }

    #[test]
    fn experiment_round_trip_through_the_c_surface() {
        unsafe {
            let mut handle: *mut GdbrExperiment = ptr::null_mut();
            let status = gdbr_experiment_new(config_json().as_ptr(), &mut handle);
            assert_eq!(status, GdbrStatus::Ok);
            assert!(!handle.is_null());

            let mut json: *mut c_char = ptr::null_mut();
            assert_eq!(gdbr_experiment_run(handle, &mut json), GdbrStatus::Ok);
            let report: gdbr_core::harness::RunReport =
                serde_json::from_str(&take_string(json)).unwrap();
            assert_eq!(report.trials.len(), 2);

            let mut trial_json: *mut c_char = ptr::null_mut();
            assert_eq!(
                gdbr_experiment_run_trial(handle, 1, &mut trial_json),
                GdbrStatus::Ok
            );
            let trial: gdbr_core::harness::TrialReport =
                serde_json::from_str(&take_string(trial_json)).unwrap();
            assert_eq!(trial, report.trials[1]);

            gdbr_experiment_free(handle);
        }
    }

    #[test]
    fn bad_config_reports_an_error_message() {
        unsafe {
            let mut handle: *mut GdbrExperiment = ptr::null_mut();
            let bad = CString::new("{\"seed\": 1}").unwrap();
            let status = gdbr_experiment_new(bad.as_ptr(), &mut handle);
            assert_eq!(status, GdbrStatus::InvalidConfig);
            assert!(handle.is_null());
            let message = CStr::from_ptr(gdbr_last_error_message());
            assert!(!message.to_str().unwrap().is_empty());
        }
    }

    #[test]
    fn null_arguments_are_rejected() {
        unsafe {
            let mut handle: *mut GdbrExperiment = ptr::null_mut();
            assert_eq!(
                gdbr_experiment_new(ptr::null(), &mut handle),
                GdbrStatus::NullArgument
            );
            assert_eq!(
                gdbr_experiment_run(ptr::null(), ptr::null_mut()),
                GdbrStatus::NullArgument
            );
            gdbr_experiment_free(ptr::null_mut());
            gdbr_string_free(ptr::null_mut());
        }
    }

    #[test]
    fn recover_label_counts_inverts_single_sample() {
        unsafe {
            let p = [0.2, 0.5, 0.3];
            let grad = [0.2, -0.5, 0.3];
            let mut counts = [0u64; 3];
            let status =
                gdbr_recover_label_counts(p.as_ptr(), grad.as_ptr(), 3, 1, counts.as_mut_ptr());
            assert_eq!(status, GdbrStatus::Ok);
            assert_eq!(counts, [0, 1, 0]);
        }
    }

    #[test]
    fn verify_reports_all_checks_passing() {
        unsafe {
            let mut passed = 0usize;
            let mut total = 0usize;
            assert_eq!(gdbr_verify(2024, &mut passed, &mut total), GdbrStatus::Ok);
            assert!(total > 0);
            assert_eq!(passed, total);
        }
    }

    #[test]
    fn version_is_a_static_c_string() {
        unsafe {
            let version = CStr::from_ptr(gdbr_version());
            assert_eq!(version.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
        }
    }
}
