//! Segment-wise PID gain optimization: Adam over a surrogate lookahead,
//! with a plain or log-barrier regularizer and projection onto the gain box.

use serde::{Deserialize, Serialize};

use crate::analysis::routh_hurwitz;
use crate::diffnet::{Tape, TransitionModel, Var};
use crate::dynamics::{BoxSet, MsdParams};
use crate::error::{ensure_dim, Error, Result};
use crate::pid::{trapezoid, windup_mask, ErrorState, GainBounds, GainMatrix, GainStructure};

pub use crate::optim::{AdamConfig, AdamState};

/// Quadratic weights `Q`, `Q_T` (`n x n`), `R` (`m x m`), row-major, and the
/// regularization weight `mu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub q: Vec<f64>,
    #[serde(default)]
    pub q_terminal: Vec<f64>,
    pub r: Vec<f64>,
    pub mu: f64,
}

impl CostWeights {
    pub fn diagonal(q: &[f64], r: &[f64], mu: f64) -> Self {
        Self { q: diag(q), q_terminal: vec![0.0; q.len() * q.len()], r: diag(r), mu }
    }

    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        ensure_dim("Q entries", n * n, self.q.len())?;
        ensure_dim("Q_T entries", n * n, self.q_terminal.len())?;
        ensure_dim("R entries", m * m, self.r.len())?;
        if !(self.mu > 0.0) {
            return Err(Error::Config("mu must be positive".into()));
        }
        let tol = 1e-12;
        for (name, mat, dim, strict) in [("Q", &self.q, n, false), ("Q_T", &self.q_terminal, n, false), ("R", &self.r, m, true)] {
            if !is_symmetric(mat, dim) {
                return Err(Error::Config(format!("{name} must be symmetric")));
            }
            let eig = symmetric_eigenvalues(mat, dim);
            let bad = if strict { eig.iter().any(|&l| l <= tol) } else { eig.iter().any(|&l| l < -tol) };
            if bad {
                let kind = if strict { "positive definite" } else { "positive semidefinite" };
                return Err(Error::Config(format!("{name} must be {kind}, eigenvalues {eig:?}")));
            }
        }
        Ok(())
    }
}

fn diag(d: &[f64]) -> Vec<f64> {
    let n = d.len();
    let mut m = vec![0.0; n * n];
    for (i, v) in d.iter().enumerate() {
        m[i * n + i] = *v;
    }
    m
}

fn is_symmetric(a: &[f64], n: usize) -> bool {
    (0..n).all(|i| (0..i).all(|j| (a[i * n + j] - a[j * n + i]).abs() <= 1e-12 * (1.0 + a[i * n + j].abs())))
}

/// Cyclic Jacobi rotations; adequate for the handful of dimensions here.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut a = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerKind {
    /// `Theta = ||F||^2`.
    Plain,
    /// `Theta = ||F||^2 - (1/rho) ln g(F)` with the Routh-Hurwitz value `g`.
    Barrier,
}

/// The regularizer with everything needed to evaluate it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularizer<'a> {
    Plain,
    Barrier { plant: &'a MsdParams, rho: f64 },
}

/// `rho` interpolated linearly from `rho_start` to `rho_end` over
/// `total_iters` iterations, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BarrierSchedule {
    pub rho_start: f64,
    pub rho_end: f64,
    pub total_iters: usize,
}

impl Default for BarrierSchedule {
    fn default() -> Self {
        Self { rho_start: 1e4, rho_end: 1e-3, total_iters: 20_000 }
    }
}

impl BarrierSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.rho_start > 0.0 && self.rho_end > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("barrier rho must stay positive".into()))
        }
    }

    pub fn rho(&self, iter: usize) -> f64 {
        if self.total_iters <= 1 {
            return self.rho_end;
        }
        let p = (iter.min(self.total_iters - 1) as f64) / ((self.total_iters - 1) as f64);
        self.rho_start + (self.rho_end - self.rho_start) * p
    }
}

fn msd_gains(theta: &[f64]) -> Result<(f64, f64, f64)> {
    match theta {
        [kp, ki, kd] => Ok((*kp, *ki, *kd)),
        _ => Err(Error::Config("the barrier regularizer needs scalar (Kp, Ki, Kd) gains".into())),
    }
}

/// `Theta(F)`.
pub fn regularizer_value(theta: &[f64], reg: &Regularizer) -> Result<f64> {
    let sq: f64 = theta.iter().map(|v| v * v).sum();
    match reg {
        Regularizer::Plain => Ok(sq),
        Regularizer::Barrier { plant, rho } => {
            let (kp, ki, kd) = msd_gains(theta)?;
            let g = routh_hurwitz(plant, kp, ki, kd);
            if !(g > 0.0) {
                return Err(Error::InfeasibleGains(format!("Routh-Hurwitz value {g} <= 0")));
            }
            Ok(sq - g.ln() / rho)
        }
    }
}

fn quad(v: &[f64], w: &[f64]) -> f64 {
    let n = v.len();
    (0..n).map(|i| v[i] * (0..n).map(|j| w[i * n + j] * v[j]).sum::<f64>()).sum()
}

/// `J = 1/2 (e^T Q e + u^T R u) dt + mu Theta(F)`.
pub fn stage_cost(e: &[f64], u: &[f64], theta: &[f64], weights: &CostWeights, dt: f64, reg: &Regularizer) -> Result<f64> {
    ensure_dim("Q", e.len() * e.len(), weights.q.len())?;
    ensure_dim("R", u.len() * u.len(), weights.r.len())?;
    Ok(0.5 * (quad(e, &weights.q) + quad(u, &weights.r)) * dt + weights.mu * regularizer_value(theta, reg)?)
}

/// One Adam update of the gain parameters.
pub fn adam_step(state: &mut AdamState, grad: &[f64], theta: &mut [f64]) -> Result<()> {
    state.step(theta, grad)
}

/// Euclidean projection onto the gain box.
pub fn project(theta: &mut [f64], bounds: &GainBounds) {
    for (v, (l, u)) in theta.iter_mut().zip(bounds.lower.iter().zip(&bounds.upper)) {
        *v = v.clamp(*l, *u);
    }
}

/// Everything fixed during one segment's optimization.
#[derive(Debug, Clone)]
pub struct SegmentProblem<'a> {
    pub x: &'a [f64],
    pub error: &'a ErrorState,
    /// `x_ref_k .. x_ref_{k+H}`; the horizon is `refs.len() - 1`.
    pub refs: &'a [Vec<f64>],
    pub weights: &'a CostWeights,
    pub bounds: &'a GainBounds,
    pub structure: GainStructure,
    pub input_box: Option<&'a BoxSet>,
    pub dt: f64,
    pub n_quad: usize,
    pub anti_windup: bool,
    pub regularizer: RegularizerKind,
    /// Required by the barrier regularizer.
    pub msd: Option<&'a MsdParams>,
}

impl SegmentProblem<'_> {
    pub fn horizon(&self) -> usize {
        self.refs.len().saturating_sub(1)
    }

    fn regularizer(&self, rho: f64) -> Result<Regularizer<'_>> {
        match self.regularizer {
            RegularizerKind::Plain => Ok(Regularizer::Plain),
            RegularizerKind::Barrier => match self.msd {
                Some(plant) => Ok(Regularizer::Barrier { plant, rho }),
                None => Err(Error::Config("the barrier regularizer needs the mass-spring-damper parameters".into())),
            },
        }
    }

    fn check<M: TransitionModel>(&self, model: &M) -> Result<(usize, usize)> {
        let (n, m) = (model.state_dim(), model.input_dim());
        ensure_dim("state", n, self.x.len())?;
        ensure_dim("error state", n, self.error.prop.len())?;
        ensure_dim("gain bounds", self.structure.param_count(m, n), self.bounds.len())?;
        if self.horizon() == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        for r in self.refs {
            ensure_dim("reference", n, r.len())?;
        }
        if let Some(b) = self.input_box {
            ensure_dim("input box", m, b.dim())?;
        }
        self.weights.validate(n, m)?;
        Ok((n, m))
    }
}

/// Total lookahead cost at gains `theta` and its gradient with respect to them.
pub fn window_cost<M: TransitionModel>(model: &M, problem: &SegmentProblem, theta: &[f64], rho: f64) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new(model);
    window_cost_on(&mut tape, model, problem, theta, rho)
}

fn window_cost_on<M: TransitionModel>(
    tape: &mut Tape<'_, M>,
    model: &M,
    problem: &SegmentProblem,
    theta: &[f64],
    rho: f64,
) -> Result<(f64, Vec<f64>)> {
    let (n, m) = problem.check(model)?;
    let entries = problem.structure.entries(m, n);
    ensure_dim("gain parameters", entries.len(), theta.len())?;
    tape.clear();
    let dt = problem.dt;
    let th: Vec<Var> = theta.iter().map(|&v| tape.leaf(v)).collect();

    let two = vec![2.0; th.len()];
    let sq = tape.half_weighted_square(&th, &two);
    let reg = match problem.regularizer(rho)? {
        Regularizer::Plain => sq,
        Regularizer::Barrier { plant, rho } => {
            let (kp, ki, kd) = msd_gains(theta)?;
            let g = routh_hurwitz(plant, kp, ki, kd);
            if !(g > 0.0) {
                return Err(Error::InfeasibleGains(format!("Routh-Hurwitz value {g} <= 0")));
            }
            // dg/dKp = Kd + D, dg/dKi = -M, dg/dKd = Kp + K
            let gv = tape.with_partials(g, &[(th[0], kd + plant.damping), (th[1], -plant.mass), (th[2], kp + plant.stiffness)]);
            let lg = tape.ln(gv);
            tape.linear(&[(sq, 1.0), (lg, -1.0 / rho)], 0.0)
        }
    };
    let gains = GainMatrix::from_params(problem.structure, m, n, theta)?;

    let mut x: Vec<Var> = problem.x.iter().map(|&v| tape.leaf(v)).collect();
    let mut ep: Vec<Var> = problem.error.prop.iter().map(|&v| tape.leaf(v)).collect();
    let mut ei: Vec<Var> = problem.error.int.iter().map(|&v| tape.leaf(v)).collect();
    let mut ed: Vec<Var> = problem.error.deri.iter().map(|&v| tape.leaf(v)).collect();
    let (times, weights) = trapezoid(dt, problem.n_quad);
    let wsum: f64 = weights.iter().sum();
    let nq = times.len();
    let mut stages = Vec::with_capacity(problem.horizon());

    for j in 0..problem.horizon() {
        let blocks = [&ep, &ei, &ed];
        let mut raw = vec![0.0; m];
        let mut u = Vec::with_capacity(m);
        for (i, raw_i) in raw.iter_mut().enumerate() {
            let mut partials = Vec::new();
            for (e, &(b, row, col)) in entries.iter().enumerate() {
                if row != i {
                    continue;
                }
                let ev = blocks[b][col];
                let (tv, evv) = (theta[e], tape.value(ev));
                *raw_i += tv * evv;
                partials.push((th[e], evv));
                partials.push((ev, tv));
            }
            let r = tape.with_partials(*raw_i, &partials);
            u.push(match problem.input_box {
                Some(b) => tape.clamp(r, b.lower[i], b.upper[i]),
                None => r,
            });
        }

        let outs = tape.call(&times, &x, &u);
        let x_next: Vec<Var> = outs[(nq - 1) * n..].to_vec();
        let r_j = &problem.refs[j];
        let r_next = &problem.refs[j + 1];
        let e_next: Vec<Var> = (0..n).map(|i| tape.linear(&[(x_next[i], -1.0)], r_next[i])).collect();
        let inc: Vec<Var> = (0..n)
            .map(|i| {
                let terms: Vec<(Var, f64)> = (0..nq).map(|q| (outs[q * n + i], -weights[q])).collect();
                tape.linear(&terms, r_j[i] * wsum)
            })
            .collect();
        let freeze = match (problem.anti_windup, problem.input_box) {
            (true, Some(b)) => windup_mask(&gains, &raw, b, &tape.values(&inc)),
            _ => vec![false; n],
        };
        let ei_next: Vec<Var> = (0..n).map(|i| if freeze[i] { ei[i] } else { tape.add(ei[i], inc[i]) }).collect();
        let ed_next: Vec<Var> = (0..n).map(|i| tape.linear(&[(e_next[i], 1.0 / dt), (ep[i], -1.0 / dt)], 0.0)).collect();

        let eq = tape.half_quadratic(&e_next, &problem.weights.q);
        let ur = tape.half_quadratic(&u, &problem.weights.r);
        let mut terms = vec![(eq, dt), (ur, dt), (reg, problem.weights.mu)];
        if j + 1 == problem.horizon() && problem.weights.q_terminal.iter().any(|&v| v != 0.0) {
            let term = tape.half_quadratic(&e_next, &problem.weights.q_terminal);
            terms.push((term, 1.0));
        }
        stages.push(tape.linear(&terms, 0.0));

        x = x_next;
        ep = e_next;
        ei = ei_next;
        ed = ed_next;
    }
    let total = tape.sum(&stages);
    let adj = tape.gradient(total);
    Ok((tape.value(total), th.iter().map(|v| adj[v.index()]).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentSettings {
    pub adam: AdamConfig,
    pub max_iters: usize,
    /// Stop when the max-norm gain change falls below this.
    pub tol: f64,
    pub barrier: BarrierSchedule,
}

impl Default for SegmentSettings {
    fn default() -> Self {
        Self { adam: AdamConfig::default(), max_iters: 20_000, tol: 1e-6, barrier: BarrierSchedule::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentResult {
    pub theta: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the segment was cut short by a non-finite cost.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub cost: f64,
    pub rho: f64,
    pub theta: Vec<f64>,
}

fn barrier_feasible(problem: &SegmentProblem, theta: &[f64]) -> bool {
    match (problem.regularizer, problem.msd) {
        (RegularizerKind::Barrier, Some(p)) => match msd_gains(theta) {
            Ok((kp, ki, kd)) => routh_hurwitz(p, kp, ki, kd) > 0.0,
            Err(_) => false,
        },
        _ => true,
    }
}

/// Adam with projection from `theta0` until the gain change drops below
/// `tol` or `max_iters` is reached.
///
/// With the plain regularizer the best-cost iterate is returned. With the
/// barrier the objective changes every iteration along the `rho` schedule,
/// so the final iterate is returned; steps that would leave the stable
/// region are shortened by bisection toward the previous iterate.
pub fn optimize_segment<M: TransitionModel>(
    model: &M,
    problem: &SegmentProblem,
    theta0: &[f64],
    settings: &SegmentSettings,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<SegmentResult> {
    problem.check(model)?;
    ensure_dim("initial gains", problem.bounds.len(), theta0.len())?;
    let barrier = problem.regularizer == RegularizerKind::Barrier;
    if barrier {
        settings.barrier.validate()?;
    }
    let mut theta = theta0.to_vec();
    project(&mut theta, problem.bounds);
    if !barrier_feasible(problem, &theta) {
        theta = problem.bounds.center();
        if !barrier_feasible(problem, &theta) {
            return Err(Error::InfeasibleGains("neither the initial gains nor the box center are stable".into()));
        }
    }

    let mut tape = Tape::new(model);
    let mut adam = AdamState::new(theta.len(), settings.adam);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut halved = false;
    let mut converged = false;
    let mut note = None;
    let mut iterations = 0;
    let mut last_rho = settings.barrier.rho(0);

    let consider = |cost: f64, theta: &[f64], best: &mut Option<(f64, Vec<f64>)>| {
        if barrier || best.as_ref().is_none_or(|b| cost < b.0) {
            *best = Some((cost, theta.to_vec()));
        }
    };

    while iterations < settings.max_iters {
        let rho = settings.barrier.rho(iterations);
        last_rho = rho;
        let eval = window_cost_on(&mut tape, model, problem, &theta, rho);
        let (cost, grad) = match eval {
            Ok((c, g)) if c.is_finite() && g.iter().all(|v| v.is_finite()) => (c, g),
            Ok(_) | Err(Error::NonFinite(_)) => {
                if halved {
                    note = Some(format!("non-finite cost at iteration {iterations}; segment aborted"));
                    break;
                }
                halved = true;
                adam.config.lr *= 0.5;
                if let Some((_, b)) = &best {
                    theta = b.clone();
                }
                iterations += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        consider(cost, &theta, &mut best);
        if let Some(t) = trace.as_deref_mut() {
            t.push(TraceRow { iter: iterations, cost, rho, theta: theta.clone() });
        }
        let prev = theta.clone();
        adam_step(&mut adam, &grad, &mut theta)?;
        project(&mut theta, problem.bounds);
        if barrier {
            let mut tries = 0;
            while !barrier_feasible(problem, &theta) {
                tries += 1;
                if tries > 60 {
                    theta = prev.clone();
                    break;
                }
                for (t, p) in theta.iter_mut().zip(&prev) {
                    *t = 0.5 * (*t + p);
                }
            }
        }
        iterations += 1;
        let change = theta.iter().zip(&prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if change < settings.tol {
            converged = true;
            break;
        }
    }

    // Score the final iterate too; it has not been evaluated yet.
    if note.is_none() {
        let rho = if barrier { settings.barrier.rho(iterations.saturating_sub(1)).min(last_rho) } else { last_rho };
        if let Ok((c, _)) = window_cost_on(&mut tape, model, problem, &theta, rho) {
            if c.is_finite() {
                consider(c, &theta, &mut best);
            }
        }
    }
    match best {
        Some((cost, theta)) => Ok(SegmentResult { theta, cost, iterations, converged, note }),
        None => Err(Error::NonFinite(note.unwrap_or_else(|| "no finite cost during segment".into()))),
    }
}
