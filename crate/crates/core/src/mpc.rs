//! Closed-loop executor: per step, measure, advance the PID error state,
//! pick the gains (optimized, fixed or frozen), apply the saturated input
//! to the true plant for one sampling interval and log everything.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analysis::{routh_hurwitz, stability_margin, FrequencyGrid, FrozenLoop};
use crate::datagen::{rng_for, stream};
use crate::diffnet::TransitionModel;
use crate::dynamics::{fmt17, integrate_held, BoxSet, MsdParams, Plant, PlantState};
use crate::error::{ensure_dim, Error, Result};
use crate::gainopt::{optimize_segment, stage_cost, CostWeights, Regularizer, RegularizerKind, SegmentProblem, SegmentSettings, TraceRow};
use crate::pid::{control_input, error_init, integral_increment, trapezoid, windup_mask, ErrorState, GainBounds, GainMatrix, GainStructure};

/// State norm beyond which the plant counts as diverged.
pub const DIVERGENCE_NORM: f64 = 1e3;

/// Piecewise-constant reference: `(switch time, reference state)` pieces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ReferencePiece>", into = "Vec<ReferencePiece>")]
pub struct ReferenceSignal {
    pieces: Vec<ReferencePiece>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferencePiece {
    pub time: f64,
    pub state: Vec<f64>,
}

impl TryFrom<Vec<ReferencePiece>> for ReferenceSignal {
    type Error = Error;
    fn try_from(pieces: Vec<ReferencePiece>) -> Result<Self> {
        Self::new(pieces)
    }
}

impl From<ReferenceSignal> for Vec<ReferencePiece> {
    fn from(r: ReferenceSignal) -> Self {
        r.pieces
    }
}

/// Slack for comparing sample times `k * dt` against switch times.
fn time_slack(t: f64) -> f64 {
    1e-9 * t.abs().max(1.0)
}

impl ReferenceSignal {
    pub fn new(pieces: Vec<ReferencePiece>) -> Result<Self> {
        let first = pieces.first().ok_or_else(|| Error::Config("reference needs at least one piece".into()))?;
        if first.time != 0.0 {
            return Err(Error::Config("the first reference piece must start at t = 0".into()));
        }
        let n = first.state.len();
        for w in pieces.windows(2) {
            if !(w[1].time > w[0].time) {
                return Err(Error::Config("reference switch times must be strictly increasing".into()));
            }
        }
        for p in &pieces {
            ensure_dim("reference state", n, p.state.len())?;
            if !p.time.is_finite() || p.state.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("reference pieces must be finite".into()));
            }
        }
        Ok(Self { pieces })
    }

    pub fn constant(state: Vec<f64>) -> Self {
        Self { pieces: vec![ReferencePiece { time: 0.0, state }] }
    }

    pub fn pieces(&self) -> &[ReferencePiece] {
        &self.pieces
    }

    pub fn dim(&self) -> usize {
        self.pieces[0].state.len()
    }

    fn index_at(&self, t: f64) -> usize {
        self.pieces.iter().rposition(|p| p.time <= t + time_slack(t)).unwrap_or(0)
    }

    /// The active reference at time `t`.
    pub fn at(&self, t: f64) -> &[f64] {
        &self.pieces[self.index_at(t)].state
    }
}

/// How the gains of each step are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GainMode {
    Adaptive,
    Fixed { gains: Vec<f64> },
    /// Adaptive up to and including `time`, then held.
    FrozenAfter { time: f64 },
}

/// Constant offset added to the plant input from `time` on; a later entry
/// replaces an earlier one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disturbance {
    pub time: f64,
    pub offset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosedLoopConfig {
    pub dt: f64,
    pub t_final: f64,
    pub gain_mode: GainMode,
    /// Multiplicative Gaussian sensor noise level.
    #[serde(default)]
    pub noise_level: f64,
    #[serde(default)]
    pub disturbances: Vec<Disturbance>,
    pub substeps: usize,
    pub seed: u64,
}

impl ClosedLoopConfig {
    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if !(self.dt > 0.0 && self.t_final > 0.0) {
            return Err(Error::Config("dt and t_final must be positive".into()));
        }
        let ratio = self.t_final / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::Config(format!("t_final {} is not a multiple of dt {}", self.t_final, self.dt)));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::Config("noise level must be >= 0".into()));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be >= 1".into()));
        }
        for d in &self.disturbances {
            ensure_dim("disturbance offset", m, d.offset.len())?;
        }
        if let GainMode::FrozenAfter { time } = self.gain_mode {
            if !(time >= 0.0) {
                return Err(Error::Config("freeze time must be >= 0".into()));
            }
        }
        Ok(())
    }

    fn disturbance(&self, t: f64, m: usize) -> Vec<f64> {
        self.disturbances
            .iter()
            .filter(|d| d.time <= t + time_slack(t))
            .next_back()
            .map_or_else(|| vec![0.0; m], |d| d.offset.clone())
    }
}

/// Where the first segment's gains come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainInit {
    /// Box center (or `theta0`) first, then the previous segment's gains.
    WarmStart,
    /// Uniform draw from the gain box at every segment.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSettings {
    pub structure: GainStructure,
    pub horizon: usize,
    pub n_quad: usize,
    pub anti_windup: bool,
    /// Clamp `u` into the input box; without it only the gain box limits `u`.
    pub saturate: bool,
    pub regularizer: RegularizerKind,
    pub segment: SegmentSettings,
    pub init: GainInit,
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        Self {
            structure: GainStructure::Diagonal,
            horizon: 5,
            n_quad: 10,
            anti_windup: true,
            saturate: true,
            regularizer: RegularizerKind::Plain,
            segment: SegmentSettings::default(),
            init: GainInit::WarmStart,
            theta0: None,
        }
    }
}

/// Fixed inputs of one closed-loop run.
#[derive(Debug, Clone)]
pub struct LoopSetup<'a> {
    /// Simulated "real" plant.
    pub truth: &'a Plant,
    /// Plant the controller believes in (barrier and frozen-loop analysis).
    pub nominal: &'a Plant,
    pub weights: &'a CostWeights,
    pub bounds: &'a GainBounds,
    pub input_box: &'a BoxSet,
    pub reference: &'a ReferenceSignal,
    pub x0: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: f64,
    pub x_meas: PlantState,
    pub x_true: PlantState,
    pub x_ref: PlantState,
    /// Applied controller input, before the disturbance.
    pub u: Vec<f64>,
    pub theta: Vec<f64>,
    /// Realized `1/2 (e^T Q e + u^T R u) dt + mu ||F||^2` on the measured error.
    pub stage_cost: f64,
    /// Lookahead cost of the chosen gains; absent for held gains.
    pub window_cost: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Frozen-loop Routh-Hurwitz value and margin (mass-spring-damper only).
    pub g: Option<f64>,
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryLog {
    pub n: usize,
    pub m: usize,
    pub dt: f64,
    pub steps: Vec<StepRecord>,
    /// True state after the last logged step (absent after divergence).
    pub final_state: Option<PlantState>,
    pub diverged: bool,
    pub divergence_time: Option<f64>,
    /// Segments cut short by a non-finite cost.
    pub notes: Vec<String>,
}

impl TrajectoryLog {
    /// Sample times and true states, including the final state.
    pub fn true_series(&self) -> (Vec<f64>, Vec<PlantState>) {
        let mut t: Vec<f64> = self.steps.iter().map(|s| s.t).collect();
        let mut x: Vec<PlantState> = self.steps.iter().map(|s| s.x_true.clone()).collect();
        if let (Some(last), Some(fin)) = (self.steps.last(), &self.final_state) {
            t.push(last.t + self.dt);
            x.push(fin.clone());
        }
        (t, x)
    }
}

/// `x_i (1 + level xi_i)` with standard normal `xi_i`.
pub fn apply_measurement_noise<R: Rng + ?Sized>(x: &[f64], level: f64, rng: &mut R) -> PlantState {
    x.iter()
        .map(|&v| {
            let xi: f64 = rng.sample(StandardNormal);
            v * (1.0 + level * xi)
        })
        .collect()
}

fn msd_params(plant: &Plant) -> Option<&MsdParams> {
    match plant {
        Plant::Msd(p) => Some(p),
        Plant::Manipulator(_) => None,
    }
}

fn random_gains<R: Rng + ?Sized>(bounds: &GainBounds, rng: &mut R) -> Vec<f64> {
    bounds.lower.iter().zip(&bounds.upper).map(|(&l, &u)| if u > l { rng.random_range(l..u) } else { l }).collect()
}

/// Runs the loop for `cfg.steps()` sampling intervals. Optimizer traces are
/// appended as `(step, row)` when `trace` is given.
pub fn run_closed_loop<M: TransitionModel>(
    model: &M,
    setup: &LoopSetup,
    cfg: &ClosedLoopConfig,
    ctrl: &ControllerSettings,
    mut trace: Option<&mut Vec<(usize, TraceRow)>>,
) -> Result<TrajectoryLog> {
    let (n, m) = (model.state_dim(), model.input_dim());
    ensure_dim("plant state", n, setup.truth.state_dim())?;
    ensure_dim("plant input", m, setup.truth.input_dim())?;
    ensure_dim("initial state", n, setup.x0.len())?;
    ensure_dim("reference", n, setup.reference.dim())?;
    ensure_dim("input box", m, setup.input_box.dim())?;
    ensure_dim("gain bounds", ctrl.structure.param_count(m, n), setup.bounds.len())?;
    cfg.validate(m)?;
    setup.weights.validate(n, m)?;
    if ctrl.horizon == 0 || ctrl.n_quad == 0 {
        return Err(Error::Config("horizon and n_quad must be >= 1".into()));
    }
    let msd = msd_params(setup.nominal);
    if ctrl.regularizer == RegularizerKind::Barrier && msd.is_none() {
        return Err(Error::Config("the barrier regularizer is only defined for the mass-spring-damper".into()));
    }
    if let GainMode::Fixed { gains } = &cfg.gain_mode {
        ensure_dim("fixed gains", setup.bounds.len(), gains.len())?;
    }
    if let Some(t0) = &ctrl.theta0 {
        ensure_dim("initial gains", setup.bounds.len(), t0.len())?;
    }

    let dt = cfg.dt;
    let input_box = ctrl.saturate.then_some(setup.input_box);
    let mut noise_rng = rng_for(cfg.seed, stream::NOISE);
    let mut gain_rng = rng_for(cfg.seed, stream::GAINS);
    let grid = FrequencyGrid::default();
    let (quad_times, quad_weights) = trapezoid(dt, ctrl.n_quad);

    let mut log = TrajectoryLog {
        n,
        m,
        dt,
        steps: Vec::with_capacity(cfg.steps()),
        final_state: None,
        diverged: false,
        divergence_time: None,
        notes: Vec::new(),
    };
    let mut x_true = setup.x0.to_vec();
    let mut theta = ctrl.theta0.clone().unwrap_or_else(|| setup.bounds.center());
    let mut error = ErrorState::zeros(n);
    // (measured state, applied input, raw input, gains, reference) of the previous step
    let mut prev: Option<(PlantState, Vec<f64>, Vec<f64>, GainMatrix, PlantState)> = None;

    for k in 0..cfg.steps() {
        let t = k as f64 * dt;
        let x_ref = setup.reference.at(t).to_vec();
        let x_meas = if cfg.noise_level > 0.0 { apply_measurement_noise(&x_true, cfg.noise_level, &mut noise_rng) } else { x_true.clone() };

        error = match &prev {
            None => error_init(model, &x_meas, &x_ref, &x_ref, &vec![0.0; m], dt)?,
            Some((xm_prev, u_prev, raw_prev, f_prev, ref_prev)) => {
                let (pred, _) = model.predict(&quad_times, xm_prev, u_prev);
                let inc = integral_increment(ref_prev, &pred, &quad_weights);
                let freeze = match (ctrl.anti_windup, input_box) {
                    (true, Some(b)) => windup_mask(f_prev, raw_prev, b, &inc),
                    _ => vec![false; n],
                };
                let prop: Vec<f64> = x_ref.iter().zip(&x_meas).map(|(r, x)| r - x).collect();
                ErrorState {
                    int: (0..n).map(|i| if freeze[i] { error.int[i] } else { error.int[i] + inc[i] }).collect(),
                    deri: (0..n).map(|i| (prop[i] - error.prop[i]) / dt).collect(),
                    prop,
                }
            }
        };

        let adapt = match &cfg.gain_mode {
            GainMode::Adaptive => true,
            GainMode::Fixed { .. } => false,
            GainMode::FrozenAfter { time } => t <= *time + time_slack(*time),
        };
        let (mut window_cost, mut iterations, mut converged) = (None, 0, false);
        if let GainMode::Fixed { gains } = &cfg.gain_mode {
            theta = gains.clone();
        } else if adapt {
            let refs: Vec<Vec<f64>> = (0..=ctrl.horizon).map(|j| setup.reference.at(t + j as f64 * dt).to_vec()).collect();
            let problem = SegmentProblem {
                x: &x_meas,
                error: &error,
                refs: &refs,
                weights: setup.weights,
                bounds: setup.bounds,
                structure: ctrl.structure,
                input_box,
                dt,
                n_quad: ctrl.n_quad,
                anti_windup: ctrl.anti_windup,
                regularizer: ctrl.regularizer,
                msd,
            };
            let start = match ctrl.init {
                GainInit::WarmStart => theta.clone(),
                GainInit::Random => random_gains(setup.bounds, &mut gain_rng),
            };
            let mut rows = trace.as_ref().map(|_| Vec::new());
            let r = optimize_segment(model, &problem, &start, &ctrl.segment, rows.as_mut())?;
            if let (Some(t), Some(rows)) = (trace.as_deref_mut(), rows) {
                t.extend(rows.into_iter().map(|row| (k, row)));
            }
            if let Some(note) = r.note {
                log.notes.push(format!("step {k}: {note}"));
            }
            theta = r.theta;
            window_cost = Some(r.cost);
            iterations = r.iterations;
            converged = r.converged;
        }

        let gains = GainMatrix::from_params(ctrl.structure, m, n, &theta)?;
        let raw = gains.apply(&error)?;
        let u = control_input(&gains, &error, input_box)?;
        let cost = stage_cost(&error.prop, &u, &theta, setup.weights, dt, &Regularizer::Plain)?;
        let (g, margin) = match (msd, theta.as_slice()) {
            (Some(p), &[kp, ki, kd]) => {
                let lp = FrozenLoop { plant: p.clone(), kp, ki, kd };
                (Some(routh_hurwitz(p, kp, ki, kd)), Some(stability_margin(&lp, &grid)))
            }
            _ => (None, None),
        };
        log.steps.push(StepRecord {
            t,
            x_meas: x_meas.clone(),
            x_true: x_true.clone(),
            x_ref: x_ref.clone(),
            u: u.clone(),
            theta: theta.clone(),
            stage_cost: cost,
            window_cost,
            iterations,
            converged,
            g,
            margin,
        });

        let d = cfg.disturbance(t, m);
        let u_plant: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a + b).collect();
        let truth = setup.truth;
        let next = integrate_held(|x: &[f64], u: &[f64], out: &mut [f64]| truth.rhs_generic(x, u, out), &x_true, &u_plant, dt, cfg.substeps);
        match next {
            Ok(x) if x.iter().map(|v| v * v).sum::<f64>().sqrt() <= DIVERGENCE_NORM => x_true = x,
            Ok(_) | Err(Error::NonFinite(_)) | Err(Error::Singular(_)) => {
                log.diverged = true;
                log.divergence_time = Some(t + dt);
                return Ok(log);
            }
            Err(e) => return Err(e),
        }
        prev = Some((x_meas, u, raw, gains, x_ref));
    }
    log.final_state = Some(x_true);
    Ok(log)
}

/// Earliest time in `[t_from, t_to]` after which `|e| <= band` at every
/// remaining sample, linearly interpolated at the last crossing and
/// returned relative to `t_from`. `None` if still outside at the last sample.
pub fn settling_after(times: &[f64], errors: &[f64], t_from: f64, t_to: f64, band: f64) -> Option<f64> {
    let idx: Vec<usize> = (0..times.len()).filter(|&i| times[i] >= t_from - time_slack(t_from) && times[i] <= t_to + time_slack(t_to)).collect();
    let last_out = idx.iter().rposition(|&i| errors[i].abs() > band);
    match last_out {
        None => idx.first().map(|_| 0.0),
        Some(p) if p + 1 == idx.len() => None,
        Some(p) => {
            let (i, j) = (idx[p], idx[p + 1]);
            let (a, b) = (errors[i].abs(), errors[j].abs());
            let frac = if a > b { (a - band) / (a - b) } else { 1.0 };
            Some(times[i] + frac * (times[j] - times[i]) - t_from)
        }
    }
}

/// Settling time of `coordinate` after the last reference switch, with the
/// band a fraction of that switch's step (of the initial error when the
/// reference never switches). Measured from the switch.
pub fn settling_time(log: &TrajectoryLog, reference: &ReferenceSignal, coordinate: usize, band_fraction: f64) -> Option<f64> {
    let (times, states) = log.true_series();
    let t_end = *times.last()?;
    let pieces = reference.pieces();
    let last = pieces.iter().rposition(|p| p.time <= t_end)?;
    let step = if last == 0 {
        pieces[0].state[coordinate] - states[0][coordinate]
    } else {
        pieces[last].state[coordinate] - pieces[last - 1].state[coordinate]
    };
    let errors: Vec<f64> = times.iter().zip(&states).map(|(t, x)| reference.at(*t)[coordinate] - x[coordinate]).collect();
    settling_after(&times, &errors, pieces[last].time, t_end, band_fraction * step.abs())
}

/// `sum |r_i - x_i| dt` over the given coordinates and logged steps.
pub fn integrated_abs_error(log: &TrajectoryLog, coordinates: &[usize]) -> f64 {
    log.steps.iter().map(|s| coordinates.iter().map(|&i| (s.x_ref[i] - s.x_true[i]).abs()).sum::<f64>() * log.dt).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub steps: usize,
    pub diverged: bool,
    pub divergence_time: Option<f64>,
    /// 2% settling time after the last switch, per position coordinate.
    pub settling_times: Vec<Option<f64>>,
    /// Per position coordinate, per reference piece: time to stay within `segment_band`.
    pub segment_settling: Vec<Vec<Option<f64>>>,
    pub segment_band: f64,
    /// Largest excursion beyond the new reference in the step direction.
    pub max_overshoot: Vec<f64>,
    pub terminal_error: Option<Vec<f64>>,
    pub iae: f64,
    pub max_abs_state: Vec<f64>,
    pub margin_min: Option<f64>,
    pub g_min: Option<f64>,
    pub mean_iterations: f64,
    pub notes: Vec<String>,
}

pub fn summarize(log: &TrajectoryLog, reference: &ReferenceSignal, segment_band: f64) -> RunSummary {
    let positions: Vec<usize> = (0..log.n / 2).collect();
    let (times, states) = log.true_series();
    let t_end = times.last().copied().unwrap_or(0.0);
    let pieces = reference.pieces();
    let mut segment_settling = Vec::new();
    let mut max_overshoot = Vec::new();
    for &c in &positions {
        let errors: Vec<f64> = times.iter().zip(&states).map(|(t, x)| reference.at(*t)[c] - x[c]).collect();
        let mut per_piece = Vec::new();
        let mut over: f64 = 0.0;
        for (p, piece) in pieces.iter().enumerate().filter(|(_, p)| p.time <= t_end) {
            // Samples at the next switch belong to the next piece.
            let until = match pieces.get(p + 1) {
                Some(q) => times.iter().copied().filter(|t| *t < q.time - time_slack(q.time)).last().unwrap_or(piece.time),
                None => t_end,
            };
            per_piece.push(settling_after(&times, &errors, piece.time, until, segment_band));
            let step = if p == 0 { states.first().map_or(0.0, |x| piece.state[c] - x[c]) } else { piece.state[c] - pieces[p - 1].state[c] };
            if step != 0.0 {
                for (t, e) in times.iter().zip(&errors) {
                    if *t >= piece.time && *t <= until {
                        over = over.max(-e * step.signum());
                    }
                }
            }
        }
        segment_settling.push(per_piece);
        max_overshoot.push(over);
    }
    let max_abs_state = (0..log.n).map(|i| states.iter().map(|x| x[i].abs()).fold(0.0, f64::max)).collect();
    let fold_min = |v: Vec<f64>| if v.is_empty() { None } else { Some(v.into_iter().fold(f64::INFINITY, f64::min)) };
    RunSummary {
        steps: log.steps.len(),
        diverged: log.diverged,
        divergence_time: log.divergence_time,
        settling_times: positions.iter().map(|&c| settling_time(log, reference, c, 0.02)).collect(),
        segment_settling,
        segment_band,
        max_overshoot,
        terminal_error: log.final_state.as_ref().map(|x| reference.at(t_end).iter().zip(x).map(|(r, v)| (r - v).abs()).collect()),
        iae: integrated_abs_error(log, &positions),
        max_abs_state,
        margin_min: fold_min(log.steps.iter().filter_map(|s| s.margin).collect()),
        g_min: fold_min(log.steps.iter().filter_map(|s| s.g).collect()),
        mean_iterations: if log.steps.is_empty() { 0.0 } else { log.steps.iter().map(|s| s.iterations as f64).sum::<f64>() / log.steps.len() as f64 },
        notes: log.notes.clone(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, fmt17)
}

/// One row per step with 17 significant digits; MSD runs carry `g` and
/// `margin` columns.
pub fn write_log_csv(path: &Path, log: &TrajectoryLog) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let p = log.steps.first().map_or(0, |s| s.theta.len());
    let frozen = log.steps.iter().any(|s| s.g.is_some());
    let mut header = vec!["k".to_string(), "t".to_string()];
    header.extend((1..=log.n).map(|i| format!("meas_x{i}")));
    header.extend((1..=log.n).map(|i| format!("x{i}")));
    header.extend((1..=log.n).map(|i| format!("ref_x{i}")));
    header.extend((1..=log.m).map(|i| format!("u{i}")));
    header.extend((1..=p).map(|i| format!("gain{i}")));
    header.extend(["stage_cost", "window_cost", "iterations"].map(String::from));
    if frozen {
        header.extend(["g", "margin"].map(String::from));
    }
    writeln!(w, "{}", header.join(","))?;
    for (k, s) in log.steps.iter().enumerate() {
        let mut row = vec![k.to_string(), fmt17(s.t)];
        for v in s.x_meas.iter().chain(&s.x_true).chain(&s.x_ref).chain(&s.u).chain(&s.theta) {
            row.push(fmt17(*v));
        }
        row.push(fmt17(s.stage_cost));
        row.push(opt(s.window_cost));
        row.push(s.iterations.to_string());
        if frozen {
            row.push(opt(s.g));
            row.push(opt(s.margin));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_csv(path: &Path, rows: &[(usize, TraceRow)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let p = rows.first().map_or(0, |r| r.1.theta.len());
    let mut header = vec!["step".to_string(), "iter".to_string(), "cost".to_string(), "rho".to_string()];
    header.extend((1..=p).map(|i| format!("gain{i}")));
    writeln!(w, "{}", header.join(","))?;
    for (k, r) in rows {
        let mut row = vec![k.to_string(), r.iter.to_string(), fmt17(r.cost), fmt17(r.rho)];
        row.extend(r.theta.iter().map(|v| fmt17(*v)));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pinn::Rk4Model;

    fn msd_setup() -> (Plant, CostWeights, GainBounds, BoxSet) {
        (
            Plant::Msd(MsdParams::default()),
            CostWeights::diagonal(&[1000.0, 1.0], &[0.01], 1.0),
            GainBounds::new(vec![0.0; 3], vec![5.0; 3]).unwrap(),
            BoxSet::new(vec![-1.0], vec![1.0]).unwrap(),
        )
    }

    fn fixed(gains: Vec<f64>, t_final: f64) -> ClosedLoopConfig {
        ClosedLoopConfig { dt: 0.2, t_final, gain_mode: GainMode::Fixed { gains }, noise_level: 0.0, disturbances: vec![], substeps: 10, seed: 1 }
    }

    #[test]
    fn reference_pieces() {
        let r = ReferenceSignal::new(vec![
            ReferencePiece { time: 0.0, state: vec![0.0, 0.0] },
            ReferencePiece { time: 20.0, state: vec![0.3, 0.0] },
        ])
        .unwrap();
        assert_eq!(r.at(19.99), &[0.0, 0.0]);
        assert_eq!(r.at(100.0 * 0.2), &[0.3, 0.0]);
        assert!(ReferenceSignal::new(vec![ReferencePiece { time: 1.0, state: vec![0.0] }]).is_err());
        let bad = vec![ReferencePiece { time: 0.0, state: vec![0.0] }, ReferencePiece { time: 0.0, state: vec![1.0] }];
        assert!(ReferenceSignal::new(bad).is_err());
    }

    #[test]
    fn noise_is_multiplicative() {
        let mut rng = rng_for(3, stream::NOISE);
        assert_eq!(apply_measurement_noise(&[0.0, 0.0], 0.5, &mut rng), vec![0.0, 0.0]);
        assert_eq!(apply_measurement_noise(&[1.5, -2.0], 0.0, &mut rng), vec![1.5, -2.0]);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| apply_measurement_noise(&[1.0], 0.03, &mut rng)[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let std = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((std - 0.03).abs() < 1e-3, "{std}");
        assert!((mean - 1.0).abs() < 1e-3);
    }

    #[test]
    fn exponential_settling() {
        let times: Vec<f64> = (0..=10_000).map(|i| i as f64 * 1e-3).collect();
        let errors: Vec<f64> = times.iter().map(|t| (-t).exp()).collect();
        let s = settling_after(&times, &errors, 0.0, 10.0, 0.02).unwrap();
        assert!((s - 50f64.ln()).abs() < 1e-6, "{s}");
        assert_eq!(settling_after(&times, &vec![0.0; times.len()], 0.0, 10.0, 0.02), Some(0.0));
        assert_eq!(settling_after(&times, &vec![1.0; times.len()], 0.0, 10.0, 0.02), None);
    }

    #[test]
    fn equilibrium_stays_at_zero() {
        let (plant, w, b, ib) = msd_setup();
        let model = Rk4Model::new(plant.clone(), 0.02);
        let reference = ReferenceSignal::constant(vec![0.0, 0.0]);
        let setup = LoopSetup { truth: &plant, nominal: &plant, weights: &w, bounds: &b, input_box: &ib, reference: &reference, x0: &[0.0, 0.0] };
        let log = run_closed_loop(&model, &setup, &fixed(vec![0.0; 3], 4.0), &ControllerSettings::default(), None).unwrap();
        assert_eq!(log.steps.len(), 20);
        assert!(log.steps.iter().all(|s| s.x_true == vec![0.0, 0.0] && s.u == vec![0.0]));
        assert_eq!(settling_time(&log, &reference, 0, 0.02), Some(0.0));
    }

    #[test]
    fn fixed_gain_servo_is_reproducible_and_saturated() {
        let (plant, w, b, ib) = msd_setup();
        let model = Rk4Model::new(plant.clone(), 0.02);
        let reference = ReferenceSignal::new(vec![
            ReferencePiece { time: 0.0, state: vec![0.0, 0.0] },
            ReferencePiece { time: 4.0, state: vec![0.3, 0.0] },
        ])
        .unwrap();
        let setup = LoopSetup { truth: &plant, nominal: &plant, weights: &w, bounds: &b, input_box: &ib, reference: &reference, x0: &[-0.7, 0.0] };
        let mut cfg = fixed(vec![1.2, 1.0, 1.2], 8.0);
        cfg.noise_level = 0.03;
        let a = run_closed_loop(&model, &setup, &cfg, &ControllerSettings::default(), None).unwrap();
        let c = run_closed_loop(&model, &setup, &cfg, &ControllerSettings::default(), None).unwrap();
        assert_eq!(a, c);
        assert!(a.steps.iter().all(|s| ib.contains(&s.u)));
        assert!(a.steps.iter().all(|s| (s.g.unwrap() - 2.74).abs() < 1e-12 && s.margin.unwrap() > 0.0));
        assert!(a.steps.iter().any(|s| s.x_meas != s.x_true));
    }

    #[test]
    fn segment_settling_stops_before_the_next_switch() {
        let (plant, w, b, ib) = msd_setup();
        let model = Rk4Model::new(plant.clone(), 0.02);
        let reference = ReferenceSignal::new(vec![
            ReferencePiece { time: 0.0, state: vec![0.0, 0.0] },
            ReferencePiece { time: 20.0, state: vec![0.3, 0.0] },
        ])
        .unwrap();
        let setup = LoopSetup { truth: &plant, nominal: &plant, weights: &w, bounds: &b, input_box: &ib, reference: &reference, x0: &[-0.7, 0.0] };
        let log = run_closed_loop(&model, &setup, &fixed(vec![1.2, 1.0, 1.2], 40.0), &ControllerSettings::default(), None).unwrap();
        let s = summarize(&log, &reference, 0.02);
        let first = s.segment_settling[0][0].expect("first piece settles before the switch");
        assert!(first > 0.0 && first < 20.0);
        assert!(s.segment_settling[0][1].is_some());
    }

    #[test]
    fn adaptive_then_frozen_holds_gains() {
        let (plant, w, b, ib) = msd_setup();
        let model = Rk4Model::new(plant.clone(), 0.05);
        let reference = ReferenceSignal::constant(vec![0.3, 0.0]);
        let setup = LoopSetup { truth: &plant, nominal: &plant, weights: &w, bounds: &b, input_box: &ib, reference: &reference, x0: &[0.0, 0.0] };
        let cfg = ClosedLoopConfig { gain_mode: GainMode::FrozenAfter { time: 0.4 }, ..fixed(vec![], 1.6) };
        let mut ctrl = ControllerSettings { horizon: 2, n_quad: 4, ..Default::default() };
        ctrl.segment.max_iters = 30;
        let mut trace = Vec::new();
        let log = run_closed_loop(&model, &setup, &cfg, &ctrl, Some(&mut trace)).unwrap();
        let frozen = &log.steps[2].theta;
        assert!(log.steps[3..].iter().all(|s| &s.theta == frozen && s.window_cost.is_none()));
        assert!(log.steps[..3].iter().all(|s| s.window_cost.is_some()));
        assert!(trace.iter().all(|(k, _)| *k <= 2) && !trace.is_empty());
    }

    #[test]
    fn unstable_frozen_gains_diverge() {
        let (plant, w, _, ib) = msd_setup();
        let b = GainBounds::new(vec![0.0; 3], vec![50.0; 3]).unwrap();
        let model = Rk4Model::new(plant.clone(), 0.05);
        let reference = ReferenceSignal::constant(vec![0.0, 0.0]);
        let setup = LoopSetup { truth: &plant, nominal: &plant, weights: &w, bounds: &b, input_box: &ib, reference: &reference, x0: &[0.1, 0.0] };
        let mut cfg = fixed(vec![0.0, 40.0, 0.0], 400.0);
        cfg.disturbances = vec![Disturbance { time: 0.0, offset: vec![0.3] }];
        let ctrl = ControllerSettings { saturate: false, ..Default::default() };
        let log = run_closed_loop(&model, &setup, &cfg, &ctrl, None).unwrap();
        assert!(log.diverged && log.final_state.is_none());
        assert!(log.steps[0].margin.unwrap() < 0.0);
    }
}
