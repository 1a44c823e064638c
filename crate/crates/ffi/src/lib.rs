//! C ABI over the abstention toolkit.
//!
//! Every fallible call returns an [`AbstStatus`]; on failure the message is
//! kept per thread and read back with [`abst_last_error`]. Results larger
//! than a scalar live behind opaque handles that the caller frees.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use abstention::calib::{self, CalibrationResult, CalibrationSample, EceConfig};
use abstention::glm::{wilson_ci, Family, ModelFit};
use abstention::mediate::{self, MediationReport};
use abstention::policy::{self, CONFIDENCE, DIFFICULTY, INTERCEPT, THRESHOLD};
use abstention::Error;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbstStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    /// Separation, rank deficiency, non-convergence or a degenerate policy.
    Numerical = 4,
    Io = 5,
    Parse = 6,
    Internal = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(err: &Error) -> AbstStatus {
    match err {
        Error::Validation { .. } | Error::Config(_) => AbstStatus::InvalidArgument,
        Error::Domain(_) | Error::DegreesOfFreedom(_) => AbstStatus::Domain,
        Error::Separation { .. }
        | Error::Rank { .. }
        | Error::Convergence(_)
        | Error::DegeneratePolicy(_)
        | Error::Bootstrap { .. } => AbstStatus::Numerical,
        Error::Io(_) => AbstStatus::Io,
        Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => AbstStatus::Parse,
        _ => AbstStatus::Internal,
    }
}

/// Runs `f`, records any error or panic, and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), (AbstStatus, String)>) -> AbstStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            AbstStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AbstStatus::Internal
        }
    }
}

fn lift<T>(r: abstention::Result<T>) -> Result<T, (AbstStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (AbstStatus, String) {
    (AbstStatus::NullPointer, format!("null pointer: {what}"))
}

fn invalid(msg: impl Into<String>) -> (AbstStatus, String) {
    (AbstStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `p` must be null or point to `n` readable values.
unsafe fn input<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (AbstStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

/// # Safety
/// `p` must be null or valid for writing one `T`.
unsafe fn write<T>(p: *mut T, v: T, what: &str) -> Result<(), (AbstStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(v);
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn abst_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Frees a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn abst_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Writes softmax(logits / tau) into `out`, which holds `n` values.
///
/// # Safety
/// `logits` and `out` must each point to `n` values.
#[no_mangle]
pub unsafe extern "C" fn abst_scaled_softmax(logits: *const f64, n: usize, tau: f64, out: *mut f64) -> AbstStatus {
    guard(|| {
        let z = input(logits, n, "logits")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let p = lift(calib::scaled_softmax(z, tau))?;
        slice::from_raw_parts_mut(out, n).copy_from_slice(&p);
        Ok(())
    })
}

/// Expected calibration error over `n_bins` equal-width bins. `correct`
/// holds 0 or 1 per prediction.
///
/// # Safety
/// `confidences` and `correct` must each point to `n` values.
#[no_mangle]
pub unsafe extern "C" fn abst_ece(
    confidences: *const f64,
    correct: *const u8,
    n: usize,
    n_bins: usize,
    out: *mut f64,
) -> AbstStatus {
    guard(|| {
        let c = input(confidences, n, "confidences")?;
        let y: Vec<bool> = input(correct, n, "correct")?.iter().map(|&b| b != 0).collect();
        write(out, lift(calib::ece(c, &y, n_bins))?, "out")
    })
}

/// Area under the ROC curve of confidence against correctness.
///
/// # Safety
/// `confidences` and `correct` must each point to `n` values.
#[no_mangle]
pub unsafe extern "C" fn abst_auroc(confidences: *const f64, correct: *const u8, n: usize, out: *mut f64) -> AbstStatus {
    guard(|| {
        let c = input(confidences, n, "confidences")?;
        let y: Vec<bool> = input(correct, n, "correct")?.iter().map(|&b| b != 0).collect();
        write(out, lift(calib::auroc(c, &y))?, "out")
    })
}

/// Wilson score interval for `k` successes in `n` trials.
///
/// # Safety
/// `low` and `high` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn abst_wilson_ci(k: u64, n: u64, z: f64, low: *mut f64, high: *mut f64) -> AbstStatus {
    guard(|| {
        let (l, h) = lift(wilson_ci(k, n, z))?;
        write(low, l, "low")?;
        write(high, h, "high")
    })
}

/// Policy quantities derived from a fitted decision model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AbstDecisionParams {
    pub t50: f64,
    pub policy_temperature: f64,
    /// NaN for Phase 2 models.
    pub scale: f64,
    /// NaN for Phase 2 models.
    pub shift: f64,
    /// NaN for Phase 2 models.
    pub difficulty_adjustment: f64,
}

impl From<policy::DecisionParams> for AbstDecisionParams {
    fn from(d: policy::DecisionParams) -> Self {
        AbstDecisionParams {
            t50: d.t50,
            policy_temperature: d.policy_temperature,
            scale: d.scale.unwrap_or(f64::NAN),
            shift: d.shift.unwrap_or(f64::NAN),
            difficulty_adjustment: d.difficulty_adjustment.unwrap_or(f64::NAN),
        }
    }
}

/// Phase 2 logit `b0 + bc * C + bd * D`, evaluated at difficulty `diff_at`.
///
/// # Safety
/// `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn abst_derive_phase2(
    b0: f64,
    b_confidence: f64,
    b_difficulty: f64,
    diff_at: f64,
    out: *mut AbstDecisionParams,
) -> AbstStatus {
    guard(|| {
        let fit = ModelFit::from_coefficients(
            Family::Logit,
            &[(INTERCEPT, b0), (CONFIDENCE, b_confidence), (DIFFICULTY, b_difficulty)],
        );
        write(out, lift(policy::derive_phase2_params(&fit, diff_at))?.into(), "out")
    })
}

/// Phase 4 logit `b0 + bt * T + bc * C + bd * D`, confidence in percent.
///
/// # Safety
/// `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn abst_derive_phase4(
    b0: f64,
    b_threshold: f64,
    b_confidence: f64,
    b_difficulty: f64,
    out: *mut AbstDecisionParams,
) -> AbstStatus {
    guard(|| {
        let fit = ModelFit::from_coefficients(
            Family::Logit,
            &[(INTERCEPT, b0), (THRESHOLD, b_threshold), (CONFIDENCE, b_confidence), (DIFFICULTY, b_difficulty)],
        );
        write(out, lift(policy::derive_phase4_params(&fit))?.into(), "out")
    })
}

/// Temperature-scaling fit. Opaque to C.
pub struct AbstCalibration(CalibrationResult);

/// Fits the scaling temperature. `logits` is row-major, `n_items` rows of
/// `n_options`; `correct` holds zero-based option indices.
///
/// # Safety
/// `logits` must hold `n_items * n_options` values, `correct` `n_items`
/// values, and `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn abst_calibration_fit(
    logits: *const f64,
    n_items: usize,
    n_options: usize,
    correct: *const u32,
    n_bins: usize,
    out: *mut *mut AbstCalibration,
) -> AbstStatus {
    guard(|| {
        if n_options < 2 {
            return Err(invalid("n_options must be at least 2"));
        }
        let total = n_items.checked_mul(n_options).ok_or_else(|| invalid("size overflow"))?;
        let z = input(logits, total, "logits")?;
        let y = input(correct, n_items, "correct")?;
        let samples = z
            .chunks(n_options)
            .zip(y)
            .map(|(row, &c)| {
                if c as usize >= n_options {
                    return Err(invalid(format!("correct index {c} out of range")));
                }
                Ok(CalibrationSample { logits: row.to_vec(), correct: c as usize })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let fit = lift(calib::fit_temperature(&samples, &EceConfig::with_bins(n_bins)))?;
        write(out, Box::into_raw(Box::new(AbstCalibration(fit))), "out")
    })
}

/// Fitted temperature, or NaN for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn abst_calibration_tau(h: *const AbstCalibration) -> f64 {
    h.as_ref().map_or(f64::NAN, |c| c.0.tau_scale)
}

/// ECE before and after scaling.
///
/// # Safety
/// `h` must be null or a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn abst_calibration_ece(h: *const AbstCalibration, before: *mut f64, after: *mut f64) -> AbstStatus {
    guard(|| {
        let c = h.as_ref().ok_or_else(|| null("handle"))?;
        write(before, c.0.ece_before, "before")?;
        write(after, c.0.ece_after, "after")
    })
}

/// AUROC at the fitted temperature. Fails with `Domain` when every
/// prediction is correct, or none is.
///
/// # Safety
/// `h` must be null or a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn abst_calibration_auroc(h: *const AbstCalibration, out: *mut f64) -> AbstStatus {
    guard(|| {
        let c = h.as_ref().ok_or_else(|| null("handle"))?;
        let v = c.0.auroc.ok_or_else(|| (AbstStatus::Domain, "AUROC undefined".to_string()))?;
        write(out, v, "out")
    })
}

/// # Safety
/// `h` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn abst_calibration_free(h: *mut AbstCalibration) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Mediation analysis result. Opaque to C.
pub struct AbstMediation(MediationReport);

/// Runs the mediation analysis on a paired-records JSONL file with `b`
/// bootstrap replicates.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn abst_mediation_run(
    path: *const c_char,
    with_difficulty: bool,
    b: usize,
    seed: u64,
    out: *mut *mut AbstMediation,
) -> AbstStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let records = lift(mediate::load_records(path))?;
        let report = lift(mediate::analyze(&records, with_difficulty, b, seed))?;
        write(out, Box::into_raw(Box::new(AbstMediation(report))), "out")
    })
}

/// Headline estimates: both indirect effects with 95% intervals, the total
/// and direct effects, and the proportions mediated.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AbstMediationSummary {
    pub indirect1: f64,
    pub indirect1_low: f64,
    pub indirect1_high: f64,
    pub indirect2: f64,
    pub indirect2_low: f64,
    pub indirect2_high: f64,
    pub total_effect: f64,
    pub direct_effect: f64,
    pub proportion1: f64,
    pub proportion2: f64,
}

/// # Safety
/// `h` must be null or a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn abst_mediation_summary(h: *const AbstMediation, out: *mut AbstMediationSummary) -> AbstStatus {
    guard(|| {
        let r = &h.as_ref().ok_or_else(|| null("handle"))?.0;
        let s = AbstMediationSummary {
            indirect1: r.indirect1.estimate,
            indirect1_low: r.indirect1.ci.low,
            indirect1_high: r.indirect1.ci.high,
            indirect2: r.indirect2.estimate,
            indirect2_low: r.indirect2.ci.low,
            indirect2_high: r.indirect2.ci.high,
            total_effect: r.paths.c.estimate,
            direct_effect: r.paths.c_prime.estimate,
            proportion1: r.proportion1,
            proportion2: r.proportion2,
        };
        write(out, s, "out")
    })
}

/// Full report as JSON. Free the string with [`abst_string_free`].
///
/// # Safety
/// `h` must be null or a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn abst_mediation_to_json(h: *const AbstMediation, out: *mut *mut c_char) -> AbstStatus {
    guard(|| {
        let r = &h.as_ref().ok_or_else(|| null("handle"))?.0;
        let json = lift(serde_json::to_string(r).map_err(Error::from))?;
        let s = CString::new(json).map_err(|_| (AbstStatus::Internal, "NUL in JSON".to_string()))?;
        write(out, s.into_raw(), "out")
    })
}

/// # Safety
/// `h` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn abst_mediation_free(h: *mut AbstMediation) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        let p = abst_last_error();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }

    #[test]
    fn softmax_matches_hand_value() {
        let z = [4f64.ln(), 0.0];
        let mut out = [0.0; 2];
        assert_eq!(unsafe { abst_scaled_softmax(z.as_ptr(), 2, 2.0, out.as_mut_ptr()) }, AbstStatus::Ok);
        assert!((out[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!(abst_last_error().is_null());
    }

    #[test]
    fn bad_tau_sets_domain_error() {
        let z = [1.0, 2.0];
        let mut out = [0.0; 2];
        assert_eq!(unsafe { abst_scaled_softmax(z.as_ptr(), 2, 0.0, out.as_mut_ptr()) }, AbstStatus::Domain);
        assert!(last_error().contains("domain"));
    }

    #[test]
    fn null_output_is_reported() {
        let c = [0.6, 0.6, 0.9, 0.9];
        let y = [1u8, 0, 1, 1];
        assert_eq!(unsafe { abst_ece(c.as_ptr(), y.as_ptr(), 4, 2, ptr::null_mut()) }, AbstStatus::NullPointer);
        assert!(last_error().contains("out"));
    }

    #[test]
    fn derive_params_round_trip() {
        let mut d = AbstDecisionParams::default();
        assert_eq!(unsafe { abst_derive_phase2(2.692, -5.575, -0.837, 0.66, &mut d) }, AbstStatus::Ok);
        assert!((d.t50 - 0.384).abs() < 2e-3);
        assert!(d.scale.is_nan());
        assert_eq!(unsafe { abst_derive_phase4(1.0, -0.1, 0.0, 0.0, &mut d) }, AbstStatus::Numerical);
    }

    #[test]
    fn calibration_handle_lifecycle() {
        let logits = [3.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let correct = [0u32, 1, 0, 2];
        let mut h = ptr::null_mut();
        let s = unsafe { abst_calibration_fit(logits.as_ptr(), 4, 3, correct.as_ptr(), 10, &mut h) };
        assert_eq!(s, AbstStatus::Ok, "{}", last_error());
        assert!(unsafe { abst_calibration_tau(h) } > 0.0);
        let (mut before, mut after) = (0.0, 0.0);
        assert_eq!(unsafe { abst_calibration_ece(h, &mut before, &mut after) }, AbstStatus::Ok);
        assert!(after <= before + 1e-12);
        unsafe { abst_calibration_free(h) };
        assert!(unsafe { abst_calibration_tau(ptr::null()) }.is_nan());
    }

    #[test]
    fn out_of_range_label_is_invalid() {
        let logits = [1.0, 0.0];
        let correct = [5u32];
        let mut h = ptr::null_mut();
        let s = unsafe { abst_calibration_fit(logits.as_ptr(), 1, 2, correct.as_ptr(), 10, &mut h) };
        assert_eq!(s, AbstStatus::InvalidArgument);
        assert!(h.is_null());
    }
}
