use std::ffi::CString;
use std::process::Command;
use std::ptr;

use pinn_pid::harness::{self, ExperimentConfig};
use pinn_pid_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let len = unsafe { pinn_pid_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..len.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn model_handle_matches_rust_forward() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    let model = harness::initial_model(&cfg).unwrap();
    let path = dir.path().join("m.pinn");
    model.save(&path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();

    let mut h = ptr::null_mut();
    assert_eq!(unsafe { pinn_pid_model_load(cpath.as_ptr(), cfg.dataset.dt, &mut h) }, PinnPidStatus::Ok);
    let (mut n, mut m) = (0, 0);
    assert_eq!(unsafe { pinn_pid_model_dims(h, &mut n, &mut m) }, PinnPidStatus::Ok);
    assert_eq!((n, m), (2, 1));

    let (x, u) = ([0.3, -0.2], [0.4]);
    let mut out = [0.0; 2];
    assert_eq!(unsafe { pinn_pid_model_predict(h, 0.1, x.as_ptr(), 2, u.as_ptr(), 1, out.as_mut_ptr()) }, PinnPidStatus::Ok);
    assert_eq!(out.to_vec(), model.forward(0.1, &x, &u).unwrap());
    assert_eq!(unsafe { pinn_pid_model_time_derivative(h, 0.1, x.as_ptr(), 2, u.as_ptr(), 1, out.as_mut_ptr()) }, PinnPidStatus::Ok);
    assert_eq!(out.to_vec(), model.time_derivative(0.1, &x, &u).unwrap());

    // Wrong state length is a dimension error, not a crash.
    let x3 = [0.0; 3];
    let mut out3 = [0.0; 3];
    assert_eq!(unsafe { pinn_pid_model_predict(h, 0.1, x3.as_ptr(), 3, u.as_ptr(), 1, out3.as_mut_ptr()) }, PinnPidStatus::Dimension);
    assert!(!last_error().is_empty());
    unsafe { pinn_pid_model_free(h) };
}

#[test]
fn null_and_bad_inputs_report_status() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { pinn_pid_model_load(ptr::null(), 0.2, &mut h) }, PinnPidStatus::NullPointer);
    assert!(last_error().contains("path"));
    let missing = CString::new("/nonexistent/model.pinn").unwrap();
    assert_eq!(unsafe { pinn_pid_model_load(missing.as_ptr(), 0.2, &mut h) }, PinnPidStatus::ModelFormat);
    assert!(h.is_null());
    let mut out = [0.0; 2];
    let x = [0.0; 2];
    assert_eq!(unsafe { pinn_pid_model_predict(ptr::null(), 0.0, x.as_ptr(), 2, x.as_ptr(), 1, out.as_mut_ptr()) }, PinnPidStatus::NullPointer);

    let mut p = ptr::null_mut();
    assert_eq!(unsafe { pinn_pid_plant_msd_new(-1.0, 0.5, 1.0, &mut p) }, PinnPidStatus::Config);
    assert!(p.is_null());
    unsafe {
        pinn_pid_model_free(ptr::null_mut());
        pinn_pid_plant_free(ptr::null_mut());
    }
}

#[test]
fn error_message_truncates_and_terminates() {
    let mut h = ptr::null_mut();
    let _ = unsafe { pinn_pid_model_load(ptr::null(), 0.2, &mut h) };
    let full = unsafe { pinn_pid_last_error_message(ptr::null_mut(), 0) };
    let mut buf = [1 as std::ffi::c_char; 4];
    assert_eq!(unsafe { pinn_pid_last_error_message(buf.as_mut_ptr(), 4) }, full);
    assert_eq!(buf[3], 0);
}

#[test]
fn plant_and_stability_report() {
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { pinn_pid_plant_msd_new(1.0, 0.5, 1.0, &mut p) }, PinnPidStatus::Ok);
    let mut rep = PinnPidStabilityReport { g: 0.0, margin: 0.0, crossover: 0.0, has_crossover: false, stable: false };
    assert_eq!(unsafe { pinn_pid_stability_report(p, 1.2, 1.0, 1.2, &mut rep) }, PinnPidStatus::Ok);
    assert!((rep.g - 2.74).abs() < 1e-12);
    assert!(rep.stable && rep.margin > 0.0);

    // Underdamped free response against its closed form.
    let (x, u) = ([1.0, 0.0], [0.0]);
    let mut out = [0.0; 2];
    let t = 3.0;
    assert_eq!(unsafe { pinn_pid_plant_integrate(p, x.as_ptr(), 2, u.as_ptr(), 1, t, 3000, out.as_mut_ptr()) }, PinnPidStatus::Ok);
    let wd = (1.0f64 - 0.0625).sqrt();
    let exact = (-0.25 * t).exp() * ((wd * t).cos() + 0.25 / wd * (wd * t).sin());
    assert!((out[0] - exact).abs() < 1e-10, "{} vs {exact}", out[0]);

    let mut arm = ptr::null_mut();
    assert_eq!(unsafe { pinn_pid_plant_manipulator_default(&mut arm) }, PinnPidStatus::Ok);
    assert_eq!(unsafe { pinn_pid_stability_report(arm, 1.0, 1.0, 1.0, &mut rep) }, PinnPidStatus::Config);
    unsafe {
        pinn_pid_plant_free(p);
        pinn_pid_plant_free(arm);
    }
}

#[test]
fn experiment_with_exact_surrogate_writes_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("c.toml");
    std::fs::write(
        &cfg_path,
        "[closed_loop]\nsurrogate = \"rk4\"\nt_final = 2.0\nnoise_level = 0.0\n[closed_loop.gain_mode]\nmode = \"fixed\"\ngains = [1.2, 1.0, 1.2]\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let c = CString::new(cfg_path.to_str().unwrap()).unwrap();
    let o = CString::new(out.to_str().unwrap()).unwrap();
    let status = unsafe { pinn_pid_run_experiment(c.as_ptr(), ptr::null(), o.as_ptr()) };
    assert_eq!(status, PinnPidStatus::Ok, "{}", last_error());
    assert!(out.join("trajectory.csv").exists());
    assert!(out.join("summary.json").exists());

    std::fs::write(&cfg_path, "[closed_loop]\nbogus = 1\n").unwrap();
    assert_eq!(unsafe { pinn_pid_run_experiment(c.as_ptr(), ptr::null(), o.as_ptr()) }, PinnPidStatus::Config);
}

#[test]
fn version_is_package_version() {
    let v = unsafe { std::ffi::CStr::from_ptr(pinn_pid_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let header = std::fs::read_to_string(format!("{include}/pinn_pid.h")).unwrap();
    for f in ["pinn_pid_model_load", "pinn_pid_stability_report", "pinn_pid_run_experiment", "PINN_PID_STATUS_DIMENSION"] {
        assert!(header.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"pinn_pid.h\"\nint main(void) { PinnPidModel *m = 0; PinnPidStatus s = pinn_pid_model_load(\"x\", 0.2, &m); pinn_pid_model_free(m); return s == PINN_PID_STATUS_OK; }\n",
    )
    .unwrap();
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let status = Command::new(compiler).args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I", include]).arg(&src).status();
        match status {
            Ok(s) => assert!(s.success(), "{compiler} rejected the header"),
            Err(e) => panic!("{compiler} unavailable: {e}"),
        }
    }
}
