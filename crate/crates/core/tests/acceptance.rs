//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pinn_pid::analysis::routh_hurwitz;
use pinn_pid::diffnet::{forward, grad_inputs, grad_params, time_derivative, InputPoint, InputScaling, NetworkParams, NetworkSpec};
use pinn_pid::dynamics::{integrate_held, MsdParams, Plant};
use pinn_pid::harness::{self, cli, ExperimentConfig, RunOutput};
use pinn_pid::mpc::{settling_after, TrajectoryLog};
use pinn_pid::pinn::PinnModel;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn config(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn central<F: FnMut(f64) -> f64>(v: f64, mut f: F) -> f64 {
    let h = 1e-5 * v.abs().max(1.0);
    (f(v + h) - f(v - h)) / (2.0 * h)
}

/// Reverse-mode parameter gradients, input pullbacks and forward-mode time
/// derivatives against central differences on random networks.
fn autodiff() -> Verdict {
    let tol = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = [2, 4][rng.random_range(0..2)];
        let m = rng.random_range(1..=2);
        let depth = rng.random_range(1..=4);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=16)).collect();
        let spec = NetworkSpec::for_plant(n, m, &hidden).unwrap();
        let mut params = NetworkParams::glorot(&spec, &mut rng);
        for v in params.as_mut_slice() {
            *v += rng.random_range(-0.2..0.2);
        }
        let d = spec.input_dim();
        let lower: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..-0.5)).collect();
        let upper: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
        let scaling = InputScaling::new(lower, upper).unwrap();
        let t = rng.random_range(0.0..0.25);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let u: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cot: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dot = |p: &NetworkParams, t: f64, x: &[f64], u: &[f64]| -> f64 {
            forward(&spec, p, &scaling, t, x, u).unwrap().iter().zip(&cot).map(|(a, b)| a * b).sum()
        };

        let point = InputPoint { t, x: x.clone(), u: u.clone() };
        let g = grad_params(&spec, &params, &scaling, &[point], &cot).unwrap();
        let fd: Vec<f64> = (0..params.len())
            .map(|k| {
                central(params.as_slice()[k], |v| {
                    let mut p = params.clone();
                    p.as_mut_slice()[k] = v;
                    dot(&p, t, &x, &u)
                })
            })
            .collect();
        worst = worst.max(rel_err(&g, &fd));

        let (gx, gu) = grad_inputs(&spec, &params, &scaling, t, &x, &u, &cot).unwrap();
        let fx: Vec<f64> = (0..n)
            .map(|i| {
                central(x[i], |v| {
                    let mut y = x.clone();
                    y[i] = v;
                    dot(&params, t, &y, &u)
                })
            })
            .collect();
        let fu: Vec<f64> = (0..m)
            .map(|i| {
                central(u[i], |v| {
                    let mut w = u.clone();
                    w[i] = v;
                    dot(&params, t, &x, &w)
                })
            })
            .collect();
        worst = worst.max(rel_err(&gx, &fx)).max(rel_err(&gu, &fu));

        let dt = time_derivative(&spec, &params, &scaling, t, &x, &u).unwrap();
        let ft: Vec<f64> = (0..n)
            .map(|i| central(t, |s| forward(&spec, &params, &scaling, s, &x, &u).unwrap()[i]))
            .collect();
        worst = worst.max(rel_err(&dt, &ft));
    }
    verdict(worst <= tol, format!("100 networks, worst relative error {worst:.2e} (limit {tol:.0e})"))
}

/// Closed-form free response of the default mass-spring-damper.
fn msd_exact(p: &MsdParams, x0: f64, v0: f64, t: f64) -> [f64; 2] {
    let s = p.damping / (2.0 * p.mass);
    let wd = (p.stiffness / p.mass - s * s).sqrt();
    let (c, sn, e) = ((wd * t).cos(), (wd * t).sin(), (-s * t).exp());
    let b = (v0 + s * x0) / wd;
    let x = e * (x0 * c + b * sn);
    let v = e * (-s * (x0 * c + b * sn) + (-x0 * wd * sn + b * wd * c));
    [x, v]
}

fn rk4_order() -> Verdict {
    let p = MsdParams::default();
    let plant = Plant::Msd(p.clone());
    let exact = msd_exact(&p, -0.7, 0.0, 4.0);
    let err = |steps: usize| {
        let x = integrate_held(|x: &[f64], u: &[f64], o: &mut [f64]| plant.rhs_generic(x, u, o), &[-0.7, 0.0], &[0.0], 4.0, steps).unwrap();
        (x[0] - exact[0]).abs().max((x[1] - exact[1]).abs())
    };
    let (coarse, fine) = (err(20), err(40));
    let ratio = coarse / fine;
    verdict((14.0..=18.0).contains(&ratio), format!("error ratio {ratio:.3} for h = 0.2 / 0.1 (errors {coarse:.2e}, {fine:.2e})"))
}

/// Stability of `M s^3 + (D + Kd) s^2 + (K + Kp) s + Ki` from its roots.
fn roots_stable(p: &MsdParams, kp: f64, ki: f64, kd: f64) -> bool {
    let (a2, a1, a0) = ((p.damping + kd) / p.mass, (p.stiffness + kp) / p.mass, ki / p.mass);
    let companion = Matrix3::new(0.0, 1.0, 0.0, 0.0, 0.0, 1.0, -a0, -a1, -a2);
    companion.complex_eigenvalues().iter().all(|z| z.re < 0.0)
}

fn routh_vs_roots() -> Verdict {
    let p = MsdParams::default();
    let anchor = routh_hurwitz(&p, 1.2, 1.0, 1.2);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut checked, mut mismatches) = (0, 0);
    for _ in 0..1000 {
        let (kp, ki, kd) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
        let g = routh_hurwitz(&p, kp, ki, kd);
        if g.abs() <= 1e-9 {
            continue;
        }
        checked += 1;
        if (g > 0.0) != roots_stable(&p, kp, ki, kd) {
            mismatches += 1;
        }
    }
    let anchor_ok = (anchor - 2.74).abs() < 1e-12;
    verdict(mismatches == 0 && anchor_ok, format!("{checked} triples, {mismatches} sign mismatches; g(1.2, 1.0, 1.2) = {anchor:.6}"))
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a: f64, b| a.max(*b))
}

fn train_desk(cfg: &ExperimentConfig, dir: &Path) -> (PinnModel, harness::TrainSummary, f64) {
    std::fs::create_dir_all(dir).unwrap();
    let start = Instant::now();
    let (model, summary) = harness::train_model(cfg, Some(dir), |_| {}).expect("training");
    (model, summary, start.elapsed().as_secs_f64())
}

fn msd_training(summary: &harness::TrainSummary, secs: f64) -> Verdict {
    let Some(v) = &summary.best_validation else {
        return verdict(false, "no validation report".into());
    };
    let (single, rollout) = (max_of(&v.single_mae), max_of(&v.rollout_mae));
    let pass = single <= 5e-3 && rollout <= 2e-2 && secs < 600.0;
    verdict(pass, format!("single-step MAE {single:.2e} (<= 5e-3), 4 s rollout MAE {rollout:.2e} (<= 2e-2), {secs:.0} s (< 600 s)"))
}

fn run(cfg: &ExperimentConfig, model: Option<&PinnModel>) -> RunOutput {
    harness::run_experiment(cfg, model, false).expect("closed-loop run")
}

/// Settling after each reference switch, measured until the lookahead
/// starts previewing the next switch.
fn step_settling(log: &TrajectoryLog, cfg: &ExperimentConfig) -> Vec<Option<f64>> {
    let (times, states) = log.true_series();
    let errors: Vec<f64> = times.iter().zip(&states).map(|(t, x)| cfg.reference.at(*t)[0] - x[0]).collect();
    let preview = cfg.controller.horizon as f64 * cfg.dataset.dt;
    let pieces = cfg.reference.pieces();
    let t_end = *times.last().unwrap();
    (1..pieces.len())
        .map(|i| {
            let until = pieces.get(i + 1).map_or(t_end, |q| q.time - preview - 1e-9);
            settling_after(&times, &errors, pieces[i].time, until, 0.02)
        })
        .collect()
}

fn servo(model: &PinnModel) -> Verdict {
    let start = Instant::now();
    let cfg = config("msd_servo.toml");
    let adaptive = run(&cfg, Some(model));
    let base_cfg = config("msd_servo_fixed.toml");
    let baseline = run(&base_cfg, Some(model));
    let settle = step_settling(&adaptive.log, &cfg);
    let settled = !adaptive.log.diverged && settle.iter().all(|s| matches!(s, Some(v) if *v <= 5.0));
    let (ia, ib) = (adaptive.summary.iae, baseline.summary.iae);
    let shown: Vec<String> = settle.iter().map(|s| s.map_or("never".into(), |v| format!("{v:.2} s"))).collect();
    verdict(
        settled && ia < ib,
        format!("settling after steps [{}] (<= 5 s), IAE {ia:.3} vs baseline {ib:.3}, {:.0} s", shown.join(", "), start.elapsed().as_secs_f64()),
    )
}

fn frozen_g(log: &TrajectoryLog) -> Option<f64> {
    log.steps.iter().rev().find(|s| s.window_cost.is_none()).and_then(|s| s.g)
}

fn stability(model: &PinnModel) -> Verdict {
    let barrier = run(&config("msd_servo_barrier.toml"), Some(model));
    let steps = &barrier.log.steps;
    let margins_ok = !barrier.log.diverged && steps.iter().all(|s| s.margin.is_some_and(|m| m > 0.0) && s.g.is_some_and(|g| g > 0.0));
    let margin_min = barrier.summary.margin_min.unwrap_or(f64::NAN);
    let g_min = barrier.summary.g_min.unwrap_or(f64::NAN);

    let bounded = run(&config("msd_disturbance_barrier.toml"), Some(model));
    let z_max = bounded.summary.max_abs_state[0];
    let bounded_ok = !bounded.log.diverged && z_max < 5.0;

    let free = run(&config("msd_disturbance.toml"), Some(model));
    let g_free = frozen_g(&free.log);
    let free_ok = match g_free {
        Some(g) if g < 0.0 => free.log.diverged,
        Some(_) => true,
        None => false,
    };
    let free_note = match g_free {
        Some(g) if g < 0.0 => format!("unconstrained frozen g {g:.3} < 0, diverged {} at {:?} s", free.log.diverged, free.log.divergence_time),
        Some(g) => format!("unconstrained frozen g {g:.3} >= 0, divergence not required"),
        None => "unconstrained run has no frozen step".into(),
    };
    verdict(
        margins_ok && bounded_ok && free_ok,
        format!("barrier margin min {margin_min:.3}, g min {g_min:.3}; frozen barrier max |z| {z_max:.3} m (< 5); {free_note}"),
    )
}

fn manipulator(dir: &Path) -> Verdict {
    let start = Instant::now();
    let cfg = config("manip_hold.toml");
    let (model, _, _) = train_desk(&cfg, &dir.join("manip"));
    let Plant::Manipulator(params) = &cfg.plant else {
        return verdict(false, "manip_hold.toml is not a manipulator config".into());
    };
    let tail = |out: &RunOutput| -> Vec<Vec<f64>> {
        let steps = &out.log.steps;
        steps[steps.len() - steps.len() / 5..].iter().map(|s| s.u.clone()).collect()
    };

    let hold = run(&cfg, Some(&model));
    let q_ref = cfg.reference.at(cfg.closed_loop.t_final)[..2].to_vec();
    let u_g = params.gravity_compensation_input(&q_ref).unwrap();
    let hold_dev = tail(&hold).iter().flat_map(|u| u.iter().zip(&u_g).map(|(a, b)| (a - b).abs() / b.abs())).fold(0.0, f64::max);
    let hold_ok = !hold.log.diverged && hold.log.steps.len() == cfg.closed_loop().steps() && hold_dev <= 0.1;

    let mut up = cfg.clone();
    up.reference = pinn_pid::mpc::ReferenceSignal::constant(vec![0.0; 4]);
    let upright = run(&up, Some(&model));
    let up_dev = tail(&upright).iter().flat_map(|u| u.iter().map(|v| v.abs())).fold(0.0, f64::max);
    let up_ok = !upright.log.diverged && upright.log.steps.len() == up.closed_loop().steps() && up_dev <= 0.02;

    verdict(
        hold_ok && up_ok,
        format!(
            "q_ref {q_ref:?}: max relative deviation from gravity compensation {u_g:.3?} is {hold_dev:.3} (<= 0.1); upright max |u| {up_dev:.4} (<= 0.02); {:.0} s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> =
        std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == "csv")).collect();
    files.sort();
    files
}

fn determinism(model_path: &Path, dir: &Path) -> Verdict {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/msd_servo.toml");
    let mut dirs = Vec::new();
    for name in ["first", "second"] {
        let out = dir.join(name);
        let argv = ["pinn-pid", "--out", out.to_str().unwrap(), "--seed", "7", "run", "--config", config.to_str().unwrap(), "--model", model_path.to_str().unwrap()];
        let code = cli::main_with(argv);
        if code != 0 {
            return verdict(false, format!("run exited with {code}"));
        }
        dirs.push(out);
    }
    let (a, b) = (csv_files(&dirs[0]), csv_files(&dirs[1]));
    let names = |v: &[PathBuf]| v.iter().map(|p| p.file_name().unwrap().to_owned()).collect::<Vec<_>>();
    if a.is_empty() || names(&a) != names(&b) {
        return verdict(false, "run directories hold different CSV files".into());
    }
    let differing: Vec<String> =
        a.iter().zip(&b).filter(|(x, y)| std::fs::read(x).unwrap() != std::fs::read(y).unwrap()).map(|(x, _)| x.display().to_string()).collect();
    verdict(differing.is_empty(), format!("{} CSV files compared, {} differ", a.len(), differing.len()))
}

fn main() {
    let work = tempfile::tempdir().expect("temporary directory");
    let mut results: Vec<(u8, Verdict, f64)> = Vec::new();
    let mut record = |id: u8, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = f();
        let secs = start.elapsed().as_secs_f64();
        println!("criterion {id}: {} {} [{secs:.1} s]", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((id, v, secs));
    };

    record(1, &mut autodiff);
    record(2, &mut rk4_order);
    record(3, &mut routh_vs_roots);

    let msd_dir = work.path().join("msd");
    let (model, summary, secs) = train_desk(&config("msd_servo.toml"), &msd_dir);
    record(4, &mut || msd_training(&summary, secs));
    record(5, &mut || servo(&model));
    record(6, &mut || stability(&model));
    record(7, &mut || manipulator(work.path()));
    record(8, &mut || determinism(&msd_dir.join(harness::MODEL_FILE), &work.path().join("det")));

    let failed: Vec<u8> = results.iter().filter(|(_, v, _)| !v.pass).map(|(id, _, _)| *id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
