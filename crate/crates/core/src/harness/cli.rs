//! `pinn-pid` command line. Exit codes: 0 success, 1 domain error,
//! 2 configuration error; failures print a JSON record on stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use super::config::ExperimentConfig;
use super::{
    analyze_loop, default_dir, generate, load_model, prepare_dir, run_experiment, self_check, train_model, validation_set, write_json, write_run,
    Surrogate,
};
use crate::analysis::FrozenLoop;
use crate::dynamics::Plant;
use crate::error::{Error, Result};
use crate::mpc::{StepRecord, TrajectoryLog};
use crate::pinn::{validate, HistoryRow, PinnModel};

#[derive(Debug, Parser)]
#[command(name = "pinn-pid", version, about = "Physics-informed surrogates and adaptive PID gain optimization")]
pub struct Cli {
    /// Output directory (default: $PINN_PID_OUT/<stage>-<config>-seed<N>, or runs/...).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Writes per-segment optimizer traces.
    #[arg(long, global = true)]
    pub trace: bool,
    /// Checks the surrogate against RK4 (and the loss gradient) before use.
    #[arg(long, global = true)]
    pub self_check: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the data and physics sets.
    GenData(ConfigArg),
    /// Train the surrogate.
    Train(ConfigArg),
    /// Validate a trained model against RK4.
    EvalModel {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        model: PathBuf,
    },
    /// Closed-loop run; trains first unless a model is given.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Frozen-gain stability report of the mass-spring-damper loop.
    Analyze {
        #[command(flatten)]
        config: ConfigArg,
        /// Kp,Ki,Kd
        #[arg(long, value_delimiter = ',', required = true)]
        gains: Vec<f64>,
    },
    /// Re-render the plots of a run directory.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
    /// `run` for several seeds in parallel, one directory per seed.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Worker threads (default: available cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn load_config(arg: &ConfigArg, seed: Option<u64>) -> Result<(ExperimentConfig, String)> {
    let (mut cfg, stem) = match &arg.config {
        Some(p) => (ExperimentConfig::load(p)?, p.file_stem().map_or("config".into(), |s| s.to_string_lossy().into_owned())),
        None => (ExperimentConfig::default(), "default".to_string()),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok((cfg, stem))
}

fn out_dir(cli: &Cli, stage: &str, stem: &str, seed: u64) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| default_dir(&format!("{stage}-{stem}-seed{seed}")))
}

fn progress(row: &HistoryRow) {
    if let Some(v) = &row.validation {
        eprintln!("iter {:>6}  loss {:.4e}  single-mae {:.3e}  rollout-mae {:.3e}", row.iter, row.loss.l_total, v.single_mae.iter().fold(0.0, |a: f64, b| a.max(*b)), v.rollout_mae.iter().fold(0.0, |a: f64, b| a.max(*b)));
    }
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

fn obtain_model(cfg: &ExperimentConfig, model: Option<&Path>, dir: &Path, check: bool) -> Result<Option<PinnModel>> {
    if cfg.closed_loop.surrogate == Surrogate::Rk4 {
        return Ok(None);
    }
    let m = match model {
        Some(p) => load_model(cfg, p)?,
        None => {
            let start = Instant::now();
            let (m, summary) = train_model(cfg, Some(dir), progress)?;
            eprintln!("trained in {:.1} s (best iteration {})", start.elapsed().as_secs_f64(), summary.best_iter);
            m
        }
    };
    if check {
        self_check(cfg, &m, false)?;
    }
    Ok(Some(m))
}

fn run_one(cfg: &ExperimentConfig, model: Option<&Path>, dir: &Path, trace: bool, check: bool) -> Result<crate::mpc::RunSummary> {
    prepare_dir(dir, cfg)?;
    let m = obtain_model(cfg, model, dir, check)?;
    let start = Instant::now();
    let out = run_experiment(cfg, m.as_ref(), trace)?;
    eprintln!("closed loop: {} steps in {:.1} s", out.log.steps.len(), start.elapsed().as_secs_f64());
    for note in write_run(dir, cfg, &out)? {
        eprintln!("note: {note}");
    }
    Ok(out.summary)
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(arg) => {
            let (cfg, stem) = load_config(arg, cli.seed)?;
            let dir = out_dir(cli, "gen-data", &stem, cfg.seed);
            prepare_dir(&dir, &cfg)?;
            let rejected = generate(&cfg, &dir)?;
            print_json(&json!({ "dir": dir, "rejected_rollouts": rejected }));
        }
        Command::Train(arg) => {
            let (cfg, stem) = load_config(arg, cli.seed)?;
            let dir = out_dir(cli, "train", &stem, cfg.seed);
            prepare_dir(&dir, &cfg)?;
            if cli.self_check {
                self_check(&ExperimentConfig { self_check: super::config::SelfCheckSection { model_mae: f64::INFINITY, ..cfg.self_check.clone() }, ..cfg.clone() }, &super::initial_model(&cfg)?, true)?;
            }
            let (model, summary) = train_model(&cfg, Some(&dir), progress)?;
            if cli.self_check {
                self_check(&cfg, &model, true)?;
            }
            print_json(&summary);
        }
        Command::EvalModel { config, model } => {
            let (cfg, stem) = load_config(config, cli.seed)?;
            let dir = out_dir(cli, "eval-model", &stem, cfg.seed);
            prepare_dir(&dir, &cfg)?;
            let m = load_model(&cfg, model)?;
            let rep = if cli.self_check { self_check(&cfg, &m, true)? } else { validate(&m, &validation_set(&cfg)?) };
            write_json(&dir.join("eval.json"), &rep)?;
            print_json(&rep);
        }
        Command::Run { config, model } => {
            let (cfg, stem) = load_config(config, cli.seed)?;
            let dir = out_dir(cli, "run", &stem, cfg.seed);
            let summary = run_one(&cfg, model.as_deref(), &dir, cli.trace, cli.self_check)?;
            print_json(&summary);
        }
        Command::Analyze { config, gains } => {
            let (cfg, stem) = load_config(config, cli.seed)?;
            let Plant::Msd(p) = &cfg.plant else {
                return Err(Error::Config("frozen-loop analysis needs the mass-spring-damper plant".into()));
            };
            if gains.len() != 3 {
                return Err(Error::Config(format!("--gains needs Kp,Ki,Kd, got {} values", gains.len())));
            }
            let dir = out_dir(cli, "analyze", &stem, cfg.seed);
            prepare_dir(&dir, &cfg)?;
            let rep = analyze_loop(&dir, &FrozenLoop::new(p.clone(), gains)?, &cfg, "nyquist")?;
            write_json(&dir.join("report.json"), &rep)?;
            print_json(&rep);
        }
        Command::Plot { run } => {
            let log = read_log_csv(&run.join("trajectory.csv"))?;
            for note in super::plots::emit_plots(run, &log)? {
                eprintln!("note: {note}");
            }
        }
        Command::Sweep { config, seeds, model, jobs } => {
            let (base, stem) = load_config(config, None)?;
            let root = cli.out.clone().unwrap_or_else(|| default_dir(&format!("sweep-{stem}")));
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1);
            let queue = std::sync::Mutex::new(seeds.iter().copied());
            let results = std::sync::Mutex::new(Vec::new());
            std::thread::scope(|s| {
                for _ in 0..jobs.min(seeds.len()) {
                    s.spawn(|| loop {
                        let Some(seed) = queue.lock().expect("queue lock").next() else { break };
                        let cfg = ExperimentConfig { seed, ..base.clone() };
                        let dir = root.join(format!("seed{seed}"));
                        let r = run_one(&cfg, model.as_deref(), &dir, cli.trace, cli.self_check);
                        results.lock().expect("results lock").push((seed, r));
                    });
                }
            });
            let mut results = results.into_inner().expect("results lock");
            results.sort_by_key(|r| r.0);
            let mut report = Vec::new();
            let mut first_err = None;
            for (seed, r) in results {
                match r {
                    Ok(summary) => report.push(json!({ "seed": seed, "summary": summary })),
                    Err(e) => {
                        report.push(json!({ "seed": seed, "error": e.to_string() }));
                        first_err.get_or_insert(e);
                    }
                }
            }
            std::fs::create_dir_all(&root)?;
            write_json(&root.join("sweep.json"), &report)?;
            print_json(&report);
            if let Some(e) = first_err {
                return Err(e);
            }
        }
    }
    Ok(())
}

/// Parses `argv`, runs the stage and returns the process exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{}", json!({ "error": "config", "message": e.to_string(), "exit_code": 2 }));
            return 2;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code }));
            code
        }
    }
}

/// Reads a `trajectory.csv` back into a log (enough for plotting).
pub fn read_log_csv(path: &Path) -> Result<TrajectoryLog> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let cols = |prefix: &str| -> Vec<usize> {
        (1..).map_while(|i| headers.iter().position(|h| h == format!("{prefix}{i}"))).collect()
    };
    let (xm, xt, xr, uc, gc) = (cols("meas_x"), cols("x"), cols("ref_x"), cols("u"), cols("gain"));
    let find = |name: &str| headers.iter().position(|h| h == name);
    let (tc, sc, wc, ic, g, mc) = (find("t"), find("stage_cost"), find("window_cost"), find("iterations"), find("g"), find("margin"));
    let tc = tc.ok_or_else(|| Error::Config(format!("{}: missing t column", path.display())))?;
    let num = |s: &str| -> Result<f64> { s.parse::<f64>().map_err(|e| Error::Config(format!("{}: {e}", path.display()))) };
    let opt = |rec: &csv::StringRecord, c: Option<usize>| -> Result<Option<f64>> {
        match c.and_then(|c| rec.get(c)).filter(|s| !s.is_empty()) {
            Some(s) => Ok(Some(num(s)?)),
            None => Ok(None),
        }
    };
    let mut steps = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let pick = |idx: &[usize]| -> Result<Vec<f64>> { idx.iter().map(|&c| num(&rec[c])).collect() };
        steps.push(StepRecord {
            t: num(&rec[tc])?,
            x_meas: pick(&xm)?,
            x_true: pick(&xt)?,
            x_ref: pick(&xr)?,
            u: pick(&uc)?,
            theta: pick(&gc)?,
            stage_cost: opt(&rec, sc)?.unwrap_or(f64::NAN),
            window_cost: opt(&rec, wc)?,
            iterations: opt(&rec, ic)?.map_or(0, |v| v as usize),
            converged: false,
            g: opt(&rec, g)?,
            margin: opt(&rec, mc)?,
        });
    }
    let dt = if steps.len() > 1 { steps[1].t - steps[0].t } else { 0.0 };
    Ok(TrajectoryLog { n: xt.len(), m: uc.len(), dt, steps, final_state: None, diverged: false, divergence_time: None, notes: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(main_with(["pinn-pid", "frobnicate"]), 2);
        assert_eq!(main_with(["pinn-pid", "analyze", "--gains", "1,2"]), 2);
    }

    #[test]
    fn analyze_reports_hand_value() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("a");
        let code = main_with(["pinn-pid", "--out", out.to_str().unwrap(), "analyze", "--gains", "1.2,1.0,1.2"]);
        assert_eq!(code, 0);
        let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        assert!((rep["g"].as_f64().unwrap() - 2.74).abs() < 1e-12);
        assert!(rep["stable"].as_bool().unwrap());
        assert!(out.join("nyquist.svg").exists() && out.join("config.toml").exists());
    }

    #[test]
    fn missing_model_is_a_domain_error() {
        let dir = tempfile::tempdir().unwrap();
        let code = main_with(["pinn-pid", "--out", dir.path().to_str().unwrap(), "eval-model", "--model", "/nonexistent/model.pinn"]);
        assert_eq!(code, 1);
    }

    #[test]
    fn bad_config_exits_2() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.toml");
        std::fs::write(&cfg, "[train]\nunknown = 1\n").unwrap();
        assert_eq!(main_with(["pinn-pid", "--out", dir.path().to_str().unwrap(), "train", "--config", cfg.to_str().unwrap()]), 2);
    }

    #[test]
    fn log_csv_round_trip_for_plots() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.closed_loop.surrogate = Surrogate::Rk4;
        cfg.closed_loop.t_final = 2.0;
        cfg.closed_loop.gain_mode = crate::mpc::GainMode::Fixed { gains: vec![1.2, 1.0, 1.2] };
        let out = run_experiment(&cfg, None, false).unwrap();
        write_run(dir.path(), &cfg, &out).unwrap();
        let back = read_log_csv(&dir.path().join("trajectory.csv")).unwrap();
        assert_eq!(back.steps.len(), out.log.steps.len());
        assert_eq!(back.steps[3].x_true, out.log.steps[3].x_true);
        assert_eq!(back.steps[3].margin, out.log.steps[3].margin);
        assert!(dir.path().join("gains.svg").exists() && dir.path().join("margin.svg").exists());
    }
}
