//! C ABI over `pinn_pid`: opaque model and plant handles, frozen-loop
//! analysis and whole-experiment runs. Every fallible call returns a
//! [`PinnPidStatus`]; the message of the last failure on the calling thread
//! is available from [`pinn_pid_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pinn_pid::analysis::{report, FrequencyGrid, FrozenLoop};
use pinn_pid::diffnet::TransitionModel;
use pinn_pid::dynamics::{integrate_held, ManipulatorParams, MsdParams, Plant};
use pinn_pid::harness::{self, ExperimentConfig};
use pinn_pid::pinn::PinnModel;
use pinn_pid::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PinnPidStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Dimension = 3,
    NonFinite = 4,
    Config = 5,
    Singular = 6,
    InfeasibleGains = 7,
    ModelFormat = 8,
    SelfCheck = 9,
    Io = 10,
    Panic = 11,
}

impl From<&Error> for PinnPidStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension(_) => Self::Dimension,
            Error::NonFinite(_) => Self::NonFinite,
            Error::Config(_) => Self::Config,
            Error::Singular(_) => Self::Singular,
            Error::InfeasibleGains(_) => Self::InfeasibleGains,
            Error::ModelFormat(_) => Self::ModelFormat,
            Error::SelfCheck(_) => Self::SelfCheck,
            Error::Io(_) | Error::Csv(_) => Self::Io,
        }
    }
}

/// Trained surrogate.
pub struct PinnPidModel(PinnModel);

/// Nominal plant.
pub struct PinnPidPlant(Plant);

/// Frozen-gain stability report of the mass-spring-damper loop.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinnPidStabilityReport {
    pub g: f64,
    pub margin: f64,
    /// Valid when `has_crossover` is true.
    pub crossover: f64,
    pub has_crossover: bool,
    pub stable: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

enum Failure {
    Status(PinnPidStatus, String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> PinnPidStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PinnPidStatus::Ok,
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Domain(e))) => {
            set_error(e.to_string());
            PinnPidStatus::from(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            PinnPidStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(PinnPidStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `len` readable doubles at `p`.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `len` writable doubles at `p`.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| Failure::Status(PinnPidStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<(), Failure> {
    pinn_pid::error::ensure_dim(what, expected, got).map_err(Failure::from)
}

/// Static, NUL-terminated version string.
#[no_mangle]
pub extern "C" fn pinn_pid_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pinn_pid_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let k = msg.len().min(len - 1);
            // SAFETY: `buf` has `len` bytes and `k < len`.
            unsafe {
                ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), k);
                *buf.add(k) = 0;
            }
        }
        msg.len()
    })
}

/// Loads a model file written by the `train` stage.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pinn_pid_model_load(path: *const c_char, dt: f64, out: *mut *mut PinnPidModel) -> PinnPidStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { string(path, "path") }?;
        let model = PinnModel::load(Path::new(path), dt)?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(PinnPidModel(model))) };
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`pinn_pid_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pinn_pid_model_free(model: *mut PinnPidModel) {
    if !model.is_null() {
        // SAFETY: ownership returns to Rust exactly once.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// State and input dimensions of a model.
///
/// # Safety
/// `model` must be a live handle; `n` and `m` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn pinn_pid_model_dims(model: *const PinnPidModel, n: *mut usize, m: *mut usize) -> PinnPidStatus {
    guard(|| {
        // SAFETY: caller guarantees a live handle.
        let model = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if n.is_null() || m.is_null() {
            return Err(null("dimension output"));
        }
        // SAFETY: checked non-null above.
        unsafe {
            *n = model.0.state_dim();
            *m = model.0.input_dim();
        }
        Ok(())
    })
}

/// `phi_hat(t, x, u)` into `out` (length `n`).
///
/// # Safety
/// `x`, `u` and `out` must hold `n`, `m` and `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn pinn_pid_model_predict(
    model: *const PinnPidModel,
    t: f64,
    x: *const f64,
    n: usize,
    u: *const f64,
    m: usize,
    out: *mut f64,
) -> PinnPidStatus {
    guard(|| {
        // SAFETY: caller guarantees a live handle and buffer sizes.
        let model = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let (x, u, out) = unsafe { (slice(x, n, "x")?, slice(u, m, "u")?, slice_mut(out, n, "out")?) };
        out.copy_from_slice(&model.0.forward(t, x, u)?);
        Ok(())
    })
}

/// `d phi_hat / dt (t, x, u)` into `out` (length `n`).
///
/// # Safety
/// As [`pinn_pid_model_predict`].
#[no_mangle]
pub unsafe extern "C" fn pinn_pid_model_time_derivative(
    model: *const PinnPidModel,
    t: f64,
    x: *const f64,
    n: usize,
    u: *const f64,
    m: usize,
    out: *mut f64,
) -> PinnPidStatus {
    guard(|| {
        // SAFETY: caller guarantees a live handle and buffer sizes.
        let model = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let (x, u, out) = unsafe { (slice(x, n, "x")?, slice(u, m, "u")?, slice_mut(out, n, "out")?) };
        out.copy_from_slice(&model.0.time_derivative(t, x, u)?);
        Ok(())
    })
}

fn new_plant(plant: Plant, out: *mut *mut PinnPidPlant) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    plant.validate()?;
    // SAFETY: checked non-null above.
    unsafe { *out = Box::into_raw(Box::new(PinnPidPlant(plant))) };
    Ok(())
}

/// Mass-spring-damper plant.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pinn_pid_plant_msd_new(mass: f64, damping: f64, stiffness: f64, out: *mut *mut PinnPidPlant) -> PinnPidStatus {
    guard(|| new_plant(Plant::Msd(MsdParams { mass, damping, stiffness }), out))
}

/// Two-link manipulator with the default parameters.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pinn_pid_plant_manipulator_default(out: *mut *mut PinnPidPlant) -> PinnPidStatus {
    guard(|| new_plant(Plant::Manipulator(ManipulatorParams::default()), out))
}

/// # Safety
/// `plant` must be null or a live plant handle.
#[no_mangle]
pub unsafe extern "C" fn pinn_pid_plant_free(plant: *mut PinnPidPlant) {
    if !plant.is_null() {
        // SAFETY: ownership returns to Rust exactly once.
        drop(unsafe { Box::from_raw(plant) });
    }
}

/// Holds `u` for `duration` seconds with `steps` RK4 steps from `x`;
/// the final state goes to `out`.
///
/// # Safety
/// `x`, `u` and `out` must hold `n`, `m` and `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn pinn_pid_plant_integrate(
    plant: *const PinnPidPlant,
    x: *const f64,
    n: usize,
    u: *const f64,
    m: usize,
    duration: f64,
    steps: usize,
    out: *mut f64,
) -> PinnPidStatus {
    guard(|| {
        // SAFETY: caller guarantees a live handle and buffer sizes.
        let plant = &unsafe { plant.as_ref() }.ok_or_else(|| null("plant"))?.0;
        let (x, u, out) = unsafe { (slice(x, n, "x")?, slice(u, m, "u")?, slice_mut(out, n, "out")?) };
        check_len("state", plant.state_dim(), n)?;
        check_len("input", plant.input_dim(), m)?;
        let next = integrate_held(|x: &[f64], u: &[f64], o: &mut [f64]| plant.rhs_generic(x, u, o), x, u, duration, steps)?;
        out.copy_from_slice(&next);
        Ok(())
    })
}

/// Frozen-loop report for gains `(kp, ki, kd)` on a mass-spring-damper plant.
///
/// # Safety
/// `plant` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pinn_pid_stability_report(
    plant: *const PinnPidPlant,
    kp: f64,
    ki: f64,
    kd: f64,
    out: *mut PinnPidStabilityReport,
) -> PinnPidStatus {
    guard(|| {
        // SAFETY: caller guarantees a live handle.
        let plant = &unsafe { plant.as_ref() }.ok_or_else(|| null("plant"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let Plant::Msd(p) = plant else {
            return Err(Error::Config("stability reports need the mass-spring-damper plant".into()).into());
        };
        let rep = report(&FrozenLoop { plant: p.clone(), kp, ki, kd }, &FrequencyGrid::default());
        // SAFETY: checked non-null above.
        unsafe {
            *out = PinnPidStabilityReport {
                g: rep.g,
                margin: rep.margin,
                crossover: rep.crossover.unwrap_or(f64::NAN),
                has_crossover: rep.crossover.is_some(),
                stable: rep.stable,
            }
        };
        Ok(())
    })
}

/// Runs the closed-loop experiment of a TOML configuration file into
/// `out_dir`. `model_path` may be null: the model is then trained first.
///
/// # Safety
/// `config_path` and `out_dir` must be NUL-terminated strings; `model_path`
/// null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pinn_pid_run_experiment(config_path: *const c_char, model_path: *const c_char, out_dir: *const c_char) -> PinnPidStatus {
    guard(|| {
        let cfg = ExperimentConfig::load(Path::new(unsafe { string(config_path, "config_path") }?))?;
        let dir = Path::new(unsafe { string(out_dir, "out_dir") }?);
        harness::prepare_dir(dir, &cfg)?;
        let model = match cfg.closed_loop.surrogate {
            harness::Surrogate::Rk4 => None,
            harness::Surrogate::Pinn if model_path.is_null() => Some(harness::train_model(&cfg, Some(dir), |_| {})?.0),
            harness::Surrogate::Pinn => Some(harness::load_model(&cfg, Path::new(unsafe { string(model_path, "model_path") }?))?),
        };
        let out = harness::run_experiment(&cfg, model.as_ref(), false)?;
        harness::write_run(dir, &cfg, &out)?;
        Ok(())
    })
}
