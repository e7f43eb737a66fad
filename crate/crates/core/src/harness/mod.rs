//! Experiment pipeline stages behind the command line: data generation,
//! training, model evaluation, closed-loop runs and frozen-loop analysis.

pub mod cli;
pub mod config;
pub mod plots;

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::{nyquist_curve, open_loop_response, report, write_nyquist_csv, FrozenLoop, StabilityReport};
use crate::datagen::{build_data_set, build_phys_set, write_data_csv, write_phys_csv, DatasetMetadata, GENERATOR};
use crate::diffnet::TransitionModel;
use crate::dynamics::Plant;
use crate::error::{Error, Result};
use crate::gainopt::TraceRow;
use crate::mpc::{run_closed_loop, summarize, write_log_csv, write_trace_csv, LoopSetup, RunSummary, TrajectoryLog};
use crate::pinn::{build_validation_set, loss_and_grad, train, validate, write_history_csv, HistoryRow, PinnModel, Rk4Model, TrainingSet, ValidationReport, ValidationSet};

pub use config::{ExperimentConfig, Surrogate};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "PINN_PID_OUT";
pub const MODEL_FILE: &str = "model.pinn";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Creates `dir` and stores the resolved configuration in it.
pub fn prepare_dir(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

pub fn generate(cfg: &ExperimentConfig, dir: &Path) -> Result<usize> {
    let ds = cfg.dataset_config()?;
    let (data, rejected) = build_data_set(&cfg.plant, &ds, 0)?;
    let phys = build_phys_set(&cfg.plant, &ds, 0)?;
    write_data_csv(&dir.join("data.csv"), &data)?;
    write_phys_csv(&dir.join("phys.csv"), &phys)?;
    let meta = DatasetMetadata { config: &ds, plant: &cfg.plant, seed: cfg.seed, generator: GENERATOR, rejected_rollouts: rejected };
    write_json(&dir.join("metadata.json"), &meta)?;
    Ok(rejected)
}

pub fn validation_set(cfg: &ExperimentConfig) -> Result<ValidationSet> {
    let ds = cfg.dataset_config()?;
    build_validation_set(&cfg.plant, &ds.state_box, &ds.input_box, ds.dt, &cfg.validation, cfg.seed)
}

pub fn training_set(cfg: &ExperimentConfig, round: u64) -> Result<TrainingSet> {
    let ds = cfg.dataset_config()?;
    let (data, _) = build_data_set(&cfg.plant, &ds, round)?;
    let phys = build_phys_set(&cfg.plant, &ds, round)?;
    TrainingSet::new(&data, &phys)
}

pub fn initial_model(cfg: &ExperimentConfig) -> Result<PinnModel> {
    let ds = cfg.dataset_config()?;
    PinnModel::initialize(&cfg.plant, &cfg.network.hidden, &ds.state_box, &ds.input_box, ds.dt, ds.eps, cfg.seed)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub best_iter: usize,
    pub best_validation: Option<ValidationReport>,
    pub final_loss: Option<f64>,
    pub parameters: usize,
}

/// Trains from the configured initialization; writes the model, history
/// and summary into `dir` when given.
pub fn train_model<P: FnMut(&HistoryRow)>(cfg: &ExperimentConfig, dir: Option<&Path>, progress: P) -> Result<(PinnModel, TrainSummary)> {
    let model = initial_model(cfg)?;
    let val = validation_set(cfg)?;
    let outcome = train(&model, &cfg.plant, |round| training_set(cfg, round), &val, &cfg.train, progress)?;
    let summary = TrainSummary {
        best_iter: outcome.best_iter,
        best_validation: outcome.best_validation.clone(),
        final_loss: outcome.history.last().map(|r| r.loss.l_total),
        parameters: outcome.model.params.len(),
    };
    if let Some(dir) = dir {
        outcome.model.save(&dir.join(MODEL_FILE))?;
        write_history_csv(&dir.join("history.csv"), &outcome.history, cfg.plant.state_dim())?;
        write_json(&dir.join("train_summary.json"), &summary)?;
    }
    Ok((outcome.model, summary))
}

pub fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<PinnModel> {
    let model = PinnModel::load(path, cfg.dataset.dt)?;
    crate::error::ensure_dim("model state dimension", cfg.plant.state_dim(), model.state_dim())?;
    crate::error::ensure_dim("model input dimension", cfg.plant.input_dim(), model.input_dim())?;
    Ok(model)
}

/// Surrogate accuracy against RK4 and, optionally, the loss gradient
/// against central differences on a few parameters.
pub fn self_check(cfg: &ExperimentConfig, model: &PinnModel, gradient: bool) -> Result<ValidationReport> {
    let val = validation_set(cfg)?;
    let rep = validate(model, &val);
    let worst = rep.single_mae.iter().fold(0.0, |a: f64, b| a.max(*b));
    if !(worst <= cfg.self_check.model_mae) {
        return Err(Error::SelfCheck(format!("single-interval MAE {worst:.3e} exceeds {:.3e}", cfg.self_check.model_mae)));
    }
    if gradient {
        let mut small = cfg.clone();
        small.dataset.n_data = small.dataset.n_data.min(16);
        small.dataset.n_phys = small.dataset.n_phys.min(16);
        let set = training_set(&small, 0)?;
        let params = model.params.as_slice().to_vec();
        let mut grad = vec![0.0; params.len()];
        loss_and_grad(model, &params, &cfg.plant, &set, cfg.train.lambda, Some(&mut grad))?;
        let h = 1e-6;
        let stride = (params.len() / 7).max(1);
        for k in (0..params.len()).step_by(stride) {
            let mut p = params.clone();
            p[k] += h;
            let up = loss_and_grad(model, &p, &cfg.plant, &set, cfg.train.lambda, None)?.l_total;
            p[k] -= 2.0 * h;
            let down = loss_and_grad(model, &p, &cfg.plant, &set, cfg.train.lambda, None)?.l_total;
            let fd = (up - down) / (2.0 * h);
            let scale = fd.abs().max(grad[k].abs()).max(1e-8);
            if (fd - grad[k]).abs() / scale > cfg.self_check.gradient_rel {
                return Err(Error::SelfCheck(format!("loss gradient entry {k}: {} vs finite difference {fd}", grad[k])));
            }
        }
    }
    Ok(rep)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: TrajectoryLog,
    pub summary: RunSummary,
    pub trace: Vec<(usize, TraceRow)>,
}

fn run_with<M: TransitionModel>(model: &M, cfg: &ExperimentConfig, want_trace: bool) -> Result<RunOutput> {
    let truth = cfg.truth();
    let weights = cfg.weights.to_weights();
    let bounds = cfg.bounds()?;
    let input_box = cfg.dataset.input_box.to_box()?;
    let setup = LoopSetup {
        truth: &truth,
        nominal: &cfg.plant,
        weights: &weights,
        bounds: &bounds,
        input_box: &input_box,
        reference: &cfg.reference,
        x0: &cfg.x0,
    };
    let mut trace = Vec::new();
    let log = run_closed_loop(model, &setup, &cfg.closed_loop(), &cfg.controller, want_trace.then_some(&mut trace))?;
    let summary = summarize(&log, &cfg.reference, cfg.closed_loop.segment_band);
    Ok(RunOutput { log, summary, trace })
}

/// Closed loop with the configured surrogate; `model` is required for the
/// network surrogate.
pub fn run_experiment(cfg: &ExperimentConfig, model: Option<&PinnModel>, want_trace: bool) -> Result<RunOutput> {
    match cfg.closed_loop.surrogate {
        Surrogate::Pinn => {
            let model = model.ok_or_else(|| Error::Config("the network surrogate needs a model".into()))?;
            if model.horizon() < cfg.dataset.dt {
                return Err(Error::Config("model horizon is shorter than the sampling interval".into()));
            }
            run_with(model, cfg, want_trace)
        }
        Surrogate::Rk4 => {
            let rk4 = Rk4Model::new(cfg.plant.clone(), cfg.dataset.dt / cfg.closed_loop.substeps as f64);
            run_with(&rk4, cfg, want_trace)
        }
    }
}

/// Writes the log, summary, optional trace, plots and (mass-spring-damper)
/// the Nyquist curve of the final gains. Returns plot notes.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<Vec<String>> {
    write_log_csv(&dir.join("trajectory.csv"), &out.log)?;
    write_json(&dir.join("summary.json"), &out.summary)?;
    if !out.trace.is_empty() {
        write_trace_csv(&dir.join("trace.csv"), &out.trace)?;
    }
    let mut notes = if out.log.steps.is_empty() { vec!["no steps logged; plots omitted".to_string()] } else { plots::emit_plots(dir, &out.log)? };
    if let (Plant::Msd(p), Some(last)) = (&cfg.plant, out.log.steps.last()) {
        if last.theta.len() == 3 {
            let lp = FrozenLoop::new(p.clone(), &last.theta)?;
            analyze_loop(dir, &lp, cfg, "nyquist_final")?;
        } else {
            notes.push("nyquist plot omitted: gains are not scalar".to_string());
        }
    }
    Ok(notes)
}

/// Stability report of a frozen loop plus its Nyquist CSV and plot.
pub fn analyze_loop(dir: &Path, lp: &FrozenLoop, cfg: &ExperimentConfig, stem: &str) -> Result<StabilityReport> {
    let rep = report(lp, &cfg.frequency_grid);
    let curve = nyquist_curve(lp, &cfg.frequency_grid);
    write_nyquist_csv(&dir.join(format!("{stem}.csv")), &curve)?;
    let l1 = open_loop_response(lp, 1.0)?;
    plots::nyquist_plot(&dir.join(format!("{stem}.svg")), &curve, &[("w=1".to_string(), l1.re, l1.im)])?;
    Ok(rep)
}

/// `$PINN_PID_OUT/<name>` (or `runs/<name>`).
pub fn default_dir(name: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(name)
}
