//! The trained transition surrogate: composite data + physics loss,
//! training loop, and recurrent self-loop validation.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{self, oracle_rollout, oracle_steps, rng_for, DataSample, PhysSample};
use crate::diffnet::{self, io, BatchPass, Dual, InputScaling, Mlp, NetworkParams, NetworkSpec, TransitionModel};
use crate::dynamics::{integrate_held, BoxSet, ControlInput, Plant, PlantState};
use crate::error::{ensure_dim, Error, Result};
use crate::optim::{cosine_lr, AdamConfig, AdamState, Lbfgs};

#[derive(Debug, Clone, PartialEq)]
pub struct PinnModel {
    pub spec: NetworkSpec,
    pub params: NetworkParams,
    pub scaling: InputScaling,
    /// Sampling interval, s.
    pub dt: f64,
    /// Extra horizon; the network is trained on `[0, dt + eps]`.
    pub eps: f64,
}

impl PinnModel {
    pub fn from_parts(spec: NetworkSpec, params: NetworkParams, scaling: InputScaling, dt: f64) -> Result<Self> {
        ensure_dim("scaling dimension", spec.input_dim(), scaling.dim())?;
        ensure_dim("parameter vector", spec.param_count(), params.len())?;
        let eps = scaling.upper()[0] - dt;
        if !(dt > 0.0) || !(eps > 0.0) {
            return Err(Error::ModelFormat(format!(
                "time scaling upper bound {} does not exceed the sampling interval {dt}",
                scaling.upper()[0]
            )));
        }
        Ok(Self { spec, params, scaling, dt, eps })
    }

    /// Glorot-initialized model for `plant` over `[0, dt + eps] x X x U`.
    pub fn initialize(
        plant: &Plant,
        hidden: &[usize],
        state_box: &BoxSet,
        input_box: &BoxSet,
        dt: f64,
        eps: f64,
        seed: u64,
    ) -> Result<Self> {
        let spec = NetworkSpec::for_plant(plant.state_dim(), plant.input_dim(), hidden)?;
        ensure_dim("state box", plant.state_dim(), state_box.dim())?;
        ensure_dim("input box", plant.input_dim(), input_box.dim())?;
        let scaling =
            InputScaling::from_domains((0.0, dt + eps), &state_box.lower, &state_box.upper, &input_box.lower, &input_box.upper)?;
        let params = NetworkParams::glorot(&spec, &mut rng_for(seed, datagen::stream::INIT));
        Self::from_parts(spec, params, scaling, dt)
    }

    pub fn horizon(&self) -> f64 {
        self.dt + self.eps
    }

    pub fn mlp(&self) -> Mlp<'_> {
        Mlp { spec: &self.spec, params: self.params.as_slice(), scaling: &self.scaling }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::save(path, &self.spec, &self.params, &self.scaling)
    }

    pub fn load(path: &Path, dt: f64) -> Result<Self> {
        let (spec, params, scaling) = io::load(path)?;
        Self::from_parts(spec, params, scaling, dt)
    }

    pub fn forward(&self, t: f64, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        diffnet::forward(&self.spec, &self.params, &self.scaling, t, x, u)
    }

    pub fn time_derivative(&self, t: f64, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        diffnet::time_derivative(&self.spec, &self.params, &self.scaling, t, x, u)
    }

    fn rows(&self, times: &[f64], x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut raw = Vec::with_capacity(times.len() * self.spec.input_dim());
        for &t in times {
            raw.push(t);
            raw.extend_from_slice(x);
            raw.extend_from_slice(u);
        }
        raw
    }
}

impl TransitionModel for PinnModel {
    type Cache = BatchPass;

    fn state_dim(&self) -> usize {
        self.spec.output_dim()
    }

    fn input_dim(&self) -> usize {
        self.spec.input_dim() - 1 - self.spec.output_dim()
    }

    fn predict(&self, times: &[f64], x: &[f64], u: &[f64]) -> (Vec<f64>, BatchPass) {
        let pass = self.mlp().run(&self.rows(times, x, u), false);
        (pass.outputs().to_vec(), pass)
    }

    fn pullback(&self, cache: &BatchPass, cotangent: &[f64], x_bar: &mut [f64], u_bar: &mut [f64]) {
        let w0 = self.spec.input_dim();
        let n = self.state_dim();
        let mut ig = vec![0.0; cache.batch() * w0];
        self.mlp().backward(cache, cotangent, None, None, Some(&mut ig));
        for row in ig.chunks_exact(w0) {
            for (acc, g) in x_bar.iter_mut().zip(&row[1..1 + n]) {
                *acc += g;
            }
            for (acc, g) in u_bar.iter_mut().zip(&row[1 + n..]) {
                *acc += g;
            }
        }
    }

    fn time_rate(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<f64> {
        self.mlp().run(&self.rows(&[t], x, u), true).output_rates().to_vec()
    }
}

/// Integrator-backed transition map, exact up to RK4 truncation. Used as
/// the oracle surrogate in tests and in the grid-search cross-check.
#[derive(Debug, Clone, PartialEq)]
pub struct Rk4Model {
    pub plant: Plant,
    /// Largest RK4 step, s.
    pub max_step: f64,
}

impl Rk4Model {
    pub fn new(plant: Plant, max_step: f64) -> Self {
        Self { plant, max_step }
    }

    fn steps(&self, t: f64) -> usize {
        (t / self.max_step).ceil().max(1.0) as usize
    }

    fn flow(&self, t: f64, x: &[f64], u: &[f64]) -> PlantState {
        if t == 0.0 {
            return x.to_vec();
        }
        let plant = &self.plant;
        integrate_held(|x: &[f64], u: &[f64], o: &mut [f64]| plant.rhs_generic(x, u, o), x, u, t, self.steps(t))
            .unwrap_or_else(|_| vec![f64::NAN; x.len()])
    }
}

impl TransitionModel for Rk4Model {
    /// Per time: the sensitivity `d phi / d (x, u)`, row-major `n x (n + m)`.
    type Cache = Vec<Vec<f64>>;

    fn state_dim(&self) -> usize {
        self.plant.state_dim()
    }

    fn input_dim(&self) -> usize {
        self.plant.input_dim()
    }

    fn predict(&self, times: &[f64], x: &[f64], u: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let (n, m) = (x.len(), u.len());
        let plant = &self.plant;
        let mut out = Vec::with_capacity(times.len() * n);
        let mut jacs = Vec::with_capacity(times.len());
        for &t in times {
            out.extend(self.flow(t, x, u));
            let mut jac = vec![0.0; n * (n + m)];
            if t > 0.0 {
                for dir in 0..n + m {
                    let xd: Vec<Dual> = (0..n).map(|i| Dual::new(x[i], (i == dir) as u8 as f64)).collect();
                    let ud: Vec<Dual> = (0..m).map(|i| Dual::new(u[i], (n + i == dir) as u8 as f64)).collect();
                    let rhs = |x: &[Dual], u: &[Dual], o: &mut [Dual]| plant.rhs_generic(x, u, o);
                    let xt = integrate_held(rhs, &xd, &ud, t, self.steps(t))
                        .unwrap_or_else(|_| vec![Dual::constant(f64::NAN); n]);
                    for i in 0..n {
                        jac[i * (n + m) + dir] = xt[i].du;
                    }
                }
            } else {
                for i in 0..n {
                    jac[i * (n + m) + i] = 1.0;
                }
            }
            jacs.push(jac);
        }
        (out, jacs)
    }

    fn pullback(&self, cache: &Vec<Vec<f64>>, cotangent: &[f64], x_bar: &mut [f64], u_bar: &mut [f64]) {
        let (n, m) = (x_bar.len(), u_bar.len());
        for (k, jac) in cache.iter().enumerate() {
            let c = &cotangent[k * n..(k + 1) * n];
            for i in 0..n {
                for j in 0..n {
                    x_bar[j] += c[i] * jac[i * (n + m) + j];
                }
                for j in 0..m {
                    u_bar[j] += c[i] * jac[i * (n + m) + n + j];
                }
            }
        }
    }

    fn time_rate(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<f64> {
        let xt = self.flow(t, x, u);
        self.plant.rhs(&xt, u).unwrap_or_else(|_| vec![f64::NAN; x.len()])
    }
}

/// `Phi = d phi_hat / dt - f(phi_hat, u)` at one collocation point.
pub fn physics_residual(model: &PinnModel, plant: &Plant, sample: &PhysSample) -> Result<Vec<f64>> {
    let y = model.forward(sample.t, &sample.x, &sample.u)?;
    let rate = model.time_derivative(sample.t, &sample.x, &sample.u)?;
    let f = plant.rhs(&y, &sample.u)?;
    Ok(rate.iter().zip(&f).map(|(a, b)| a - b).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_data: f64,
    pub l_phys: f64,
    pub l_total: f64,
}

/// Both training sets laid out as network input rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    n: usize,
    m: usize,
    data_in: Vec<f64>,
    data_target: Vec<f64>,
    phys_in: Vec<f64>,
}

impl TrainingSet {
    pub fn new(data: &[DataSample], phys: &[PhysSample]) -> Result<Self> {
        if data.is_empty() || phys.is_empty() {
            return Err(Error::Dimension("training sets must be nonempty".into()));
        }
        let (n, m) = (data[0].x0.len(), data[0].u.len());
        let mut data_in = Vec::with_capacity(data.len() * (1 + n + m));
        let mut data_target = Vec::with_capacity(data.len() * n);
        for s in data {
            ensure_dim("data sample state", n, s.x0.len())?;
            ensure_dim("data sample target", n, s.xf.len())?;
            ensure_dim("data sample input", m, s.u.len())?;
            data_in.push(s.t);
            data_in.extend(&s.x0);
            data_in.extend(&s.u);
            data_target.extend(&s.xf);
        }
        let mut phys_in = Vec::with_capacity(phys.len() * (1 + n + m));
        for s in phys {
            ensure_dim("collocation state", n, s.x.len())?;
            ensure_dim("collocation input", m, s.u.len())?;
            phys_in.push(s.t);
            phys_in.extend(&s.x);
            phys_in.extend(&s.u);
        }
        Ok(Self { n, m, data_in, data_target, phys_in })
    }

    pub fn n_data(&self) -> usize {
        self.data_target.len() / self.n
    }

    pub fn n_phys(&self) -> usize {
        self.phys_in.len() / (1 + self.n + self.m)
    }
}

/// Composite loss `L_data + lambda * L_phys` at `params`, with its gradient
/// written into `grad` when given.
pub fn loss_and_grad(
    model: &PinnModel,
    params: &[f64],
    plant: &Plant,
    set: &TrainingSet,
    lambda: f64,
    grad: Option<&mut [f64]>,
) -> Result<LossReport> {
    let (n, m) = (set.n, set.m);
    ensure_dim("model state dimension", model.state_dim(), n)?;
    ensure_dim("parameter vector", model.spec.param_count(), params.len())?;
    let mlp = Mlp { spec: &model.spec, params, scaling: &model.scaling };
    let want_grad = grad.is_some();
    let mut scratch = Vec::new();
    let g: &mut [f64] = match grad {
        Some(g) => {
            g.fill(0.0);
            g
        }
        None => &mut scratch,
    };

    let nd = set.n_data();
    let pass = mlp.run(&set.data_in, false);
    let diff: Vec<f64> = pass.outputs().iter().zip(&set.data_target).map(|(a, b)| a - b).collect();
    let l_data = diff.iter().map(|d| d * d).sum::<f64>() / nd as f64;
    if want_grad {
        let bar: Vec<f64> = diff.iter().map(|d| 2.0 * d / nd as f64).collect();
        mlp.backward(&pass, &bar, None, Some(g), None);
    }

    let np = set.n_phys();
    let w0 = 1 + n + m;
    let pass = mlp.run(&set.phys_in, true);
    let (y, ydot) = (pass.outputs(), pass.output_rates());
    let mut resid = vec![0.0; np * n];
    let mut f = vec![0.0; n];
    for s in 0..np {
        let u = &set.phys_in[s * w0 + 1 + n..(s + 1) * w0];
        plant.rhs_generic(&y[s * n..(s + 1) * n], u, &mut f)?;
        for i in 0..n {
            resid[s * n + i] = ydot[s * n + i] - f[i];
        }
    }
    let l_phys = resid.iter().map(|r| r * r).sum::<f64>() / np as f64;
    if want_grad {
        let scale = 2.0 * lambda / np as f64;
        let rate_bar: Vec<f64> = resid.iter().map(|r| scale * r).collect();
        let mut out_bar = vec![0.0; np * n];
        for s in 0..np {
            let u = &set.phys_in[s * w0 + 1 + n..(s + 1) * w0];
            let jac = plant.state_jacobian(&y[s * n..(s + 1) * n], u)?;
            for j in 0..n {
                out_bar[s * n + j] = -(0..n).map(|i| jac[i * n + j] * rate_bar[s * n + i]).sum::<f64>();
            }
        }
        mlp.backward(&pass, &out_bar, Some(&rate_bar), Some(g), None);
    }
    Ok(LossReport { l_data, l_phys, l_total: l_data + lambda * l_phys })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    Lbfgs,
    AdamThenLbfgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    /// Total optimizer iterations across both stages.
    pub iterations: usize,
    /// Adam iterations before switching, for `adam-then-lbfgs`.
    pub adam_iterations: usize,
    /// Regenerate both data sets every this many iterations; 0 never.
    pub regen_interval: usize,
    pub validation_interval: usize,
    pub optimizer: OptimizerKind,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lbfgs_memory: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            iterations: 20_000,
            adam_iterations: 20_000,
            regen_interval: 0,
            validation_interval: 100,
            optimizer: OptimizerKind::Adam,
            lr_start: 1e-3,
            lr_end: 1e-4,
            lbfgs_memory: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config("train.lambda must be positive".into()));
        }
        if self.validation_interval == 0 || self.iterations % self.validation_interval != 0 {
            return Err(Error::Config("train.validation_interval must divide train.iterations".into()));
        }
        if self.regen_interval != 0 && self.iterations % self.regen_interval != 0 {
            return Err(Error::Config("train.regen_interval must divide train.iterations".into()));
        }
        if self.optimizer == OptimizerKind::AdamThenLbfgs && self.adam_iterations > self.iterations {
            return Err(Error::Config("train.adam_iterations exceeds train.iterations".into()));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    fn adam_iters(&self) -> usize {
        match self.optimizer {
            OptimizerKind::Adam => self.iterations,
            OptimizerKind::Lbfgs => 0,
            OptimizerKind::AdamThenLbfgs => self.adam_iterations,
        }
    }
}

/// Held-out RK4 truth: one-interval samples and multi-step rollouts under
/// piecewise-constant random inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSet {
    pub dt: f64,
    pub single: Vec<DataSample>,
    pub rollouts: Vec<Rollout>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub x0: PlantState,
    pub inputs: Vec<ControlInput>,
    /// Truth after each held input (same length as `inputs`).
    pub truth: Vec<PlantState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationSpec {
    pub n_single: usize,
    pub n_rollouts: usize,
    /// Rollout length in sampling intervals.
    pub rollout_steps: usize,
    /// Rollouts start in the state box shrunk by this factor about its center.
    pub start_shrink: f64,
    /// Rollout inputs are drawn from the input box shrunk by this factor.
    pub input_shrink: f64,
}

impl Default for ValidationSpec {
    fn default() -> Self {
        Self { n_single: 500, n_rollouts: 20, rollout_steps: 20, start_shrink: 0.5, input_shrink: 1.0 }
    }
}

pub fn build_validation_set(
    plant: &Plant,
    state_box: &BoxSet,
    input_box: &BoxSet,
    dt: f64,
    spec: &ValidationSpec,
    seed: u64,
) -> Result<ValidationSet> {
    let mut rng = rng_for(seed, datagen::stream::VALIDATION);
    let steps = oracle_steps(dt, dt);
    let n = plant.state_dim();
    let mut joint = state_box.clone();
    joint.lower.extend(&input_box.lower);
    joint.upper.extend(&input_box.upper);
    let mut single = Vec::with_capacity(spec.n_single);
    if spec.n_single > 0 {
        for p in datagen::lhs_sample(&joint, spec.n_single, &mut rng)? {
            let (x0, u) = (p[..n].to_vec(), p[n..].to_vec());
            let xf = oracle_rollout(plant, &x0, &u, dt, steps)?;
            single.push(DataSample { t: dt, x0, xf, u });
        }
    }
    for (name, f) in [("start_shrink", spec.start_shrink), ("input_shrink", spec.input_shrink)] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("validation.{name} must lie in (0, 1]")));
        }
    }
    let shrink = |b: &BoxSet, f: f64| {
        let center = b.center();
        BoxSet {
            lower: b.lower.iter().zip(&center).map(|(l, c)| c + f * (l - c)).collect(),
            upper: b.upper.iter().zip(&center).map(|(u, c)| c + f * (u - c)).collect(),
        }
    };
    let inner = shrink(state_box, spec.start_shrink);
    let inputs_box = shrink(input_box, spec.input_shrink);
    let mut rollouts = Vec::with_capacity(spec.n_rollouts);
    let mut attempts = 0;
    while rollouts.len() < spec.n_rollouts {
        attempts += 1;
        if attempts > 1000 * spec.n_rollouts.max(1) {
            return Err(Error::Config("could not draw validation rollouts that stay inside the state box".into()));
        }
        let x0: Vec<f64> = (0..n).map(|i| rand::Rng::random_range(&mut rng, inner.lower[i]..=inner.upper[i])).collect();
        let inputs: Vec<ControlInput> = (0..spec.rollout_steps)
            .map(|_| {
                (0..inputs_box.dim())
                    .map(|j| rand::Rng::random_range(&mut rng, inputs_box.lower[j]..=inputs_box.upper[j]))
                    .collect()
            })
            .collect();
        let mut truth = Vec::with_capacity(inputs.len());
        let mut x = x0.clone();
        let mut inside = true;
        for u in &inputs {
            x = oracle_rollout(plant, &x, u, dt, steps)?;
            if !state_box.contains(&x) {
                inside = false;
                break;
            }
            truth.push(x.clone());
        }
        if inside {
            rollouts.push(Rollout { x0, inputs, truth });
        }
    }
    Ok(ValidationSet { dt, single, rollouts })
}

/// Recurrent self-loop prediction: each interval starts from the previous
/// prediction. Returns the state after each input.
pub fn self_loop<M: TransitionModel>(model: &M, x0: &[f64], inputs: &[ControlInput], dt: f64) -> Vec<PlantState> {
    let mut x = x0.to_vec();
    inputs
        .iter()
        .map(|u| {
            x = model.predict_one(dt, &x, u);
            x.clone()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub single_mae: Vec<f64>,
    pub single_mse: f64,
    pub rollout_mae: Vec<f64>,
    pub rollout_mse: f64,
}

impl ValidationReport {
    pub fn score(&self) -> f64 {
        self.single_mse + self.rollout_mse
    }
}

fn accumulate(mae: &mut [f64], sq: &mut f64, count: &mut usize, pred: &[f64], truth: &[f64]) {
    for i in 0..truth.len() {
        let d = pred[i] - truth[i];
        mae[i] += d.abs();
        *sq += d * d;
    }
    *count += 1;
}

pub fn validate<M: TransitionModel>(model: &M, set: &ValidationSet) -> ValidationReport {
    let n = model.state_dim();
    let mut single_mae = vec![0.0; n];
    let (mut sq, mut count) = (0.0, 0);
    for s in &set.single {
        let pred = model.predict_one(set.dt, &s.x0, &s.u);
        accumulate(&mut single_mae, &mut sq, &mut count, &pred, &s.xf);
    }
    let denom = count.max(1) as f64;
    single_mae.iter_mut().for_each(|v| *v /= denom);
    let single_mse = sq / (denom * n as f64);

    let mut rollout_mae = vec![0.0; n];
    let (mut sq, mut count) = (0.0, 0);
    for r in &set.rollouts {
        for (pred, truth) in self_loop(model, &r.x0, &r.inputs, set.dt).iter().zip(&r.truth) {
            accumulate(&mut rollout_mae, &mut sq, &mut count, pred, truth);
        }
    }
    let denom = count.max(1) as f64;
    rollout_mae.iter_mut().for_each(|v| *v /= denom);
    ValidationReport { single_mae, single_mse, rollout_mae, rollout_mse: sq / (denom * n as f64) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub loss: LossReport,
    pub validation: Option<ValidationReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation score.
    pub model: PinnModel,
    pub history: Vec<HistoryRow>,
    pub best_iter: usize,
    pub best_validation: Option<ValidationReport>,
}

/// Minimizes the composite loss. `regenerate(round)` supplies the training
/// sets; round 0 is used first, then one round per regeneration interval.
pub fn train<G, P>(
    model: &PinnModel,
    plant: &Plant,
    mut regenerate: G,
    validation: &ValidationSet,
    cfg: &TrainConfig,
    mut progress: P,
) -> Result<TrainOutcome>
where
    G: FnMut(u64) -> Result<TrainingSet>,
    P: FnMut(&HistoryRow),
{
    cfg.validate()?;
    let mut history = Vec::new();
    if cfg.iterations == 0 {
        return Ok(TrainOutcome { model: model.clone(), history, best_iter: 0, best_validation: None });
    }
    let mut set = regenerate(0)?;
    let mut params = model.params.as_slice().to_vec();
    let mut grad = vec![0.0; params.len()];
    let mut best = (f64::INFINITY, params.clone(), 0usize, None);
    let adam_iters = cfg.adam_iters();
    let mut adam = AdamState::new(params.len(), AdamConfig { lr: cfg.lr_start, beta1: 0.9, beta2: 0.999, eps: 1e-8 });
    let mut lbfgs = Lbfgs::new(cfg.lbfgs_memory);
    let mut lb_state: Option<(f64, Vec<f64>)> = None;
    let mut last_finite: Option<LossReport> = None;

    for iter in 1..=cfg.iterations {
        let loss = if iter <= adam_iters {
            let rep = loss_and_grad(model, &params, plant, &set, cfg.lambda, Some(&mut grad))?;
            check_finite(&rep, iter, last_finite)?;
            adam.step_with_lr(&mut params, &grad, cosine_lr(cfg.lr_start, cfg.lr_end, iter - 1, adam_iters))?;
            rep
        } else {
            let (mut fx, mut gx) = match lb_state.take() {
                Some(s) => s,
                None => {
                    let rep = loss_and_grad(model, &params, plant, &set, cfg.lambda, Some(&mut grad))?;
                    check_finite(&rep, iter, last_finite)?;
                    (rep.l_total, grad.clone())
                }
            };
            // The line search usually ends on the accepted point; keep its report.
            let mut last_eval: Option<(Vec<f64>, LossReport)> = None;
            let mut f = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
                let mut g = vec![0.0; p.len()];
                let rep = loss_and_grad(model, p, plant, &set, cfg.lambda, Some(&mut g))?;
                last_eval = Some((p.to_vec(), rep));
                Ok((rep.l_total, g))
            };
            lbfgs.step(&mut params, &mut fx, &mut gx, &mut f)?;
            lb_state = Some((fx, gx));
            let rep = match last_eval {
                Some((p, rep)) if p == params => rep,
                _ => loss_and_grad(model, &params, plant, &set, cfg.lambda, None)?,
            };
            check_finite(&rep, iter, last_finite)?;
            rep
        };
        last_finite = Some(loss);

        let mut row = HistoryRow { iter, loss, validation: None };
        if iter % cfg.validation_interval == 0 {
            let candidate = PinnModel { params: NetworkParams::new(&model.spec, params.clone())?, ..model.clone() };
            let rep = validate(&candidate, validation);
            if rep.score() < best.0 {
                best = (rep.score(), params.clone(), iter, Some(rep.clone()));
            }
            row.validation = Some(rep);
        }
        progress(&row);
        history.push(row);

        if cfg.regen_interval != 0 && iter % cfg.regen_interval == 0 && iter < cfg.iterations {
            set = regenerate((iter / cfg.regen_interval) as u64)?;
            lbfgs.reset();
            lb_state = None;
        }
    }
    let (_, best_params, best_iter, best_validation) = best;
    let trained = PinnModel { params: NetworkParams::new(&model.spec, best_params)?, ..model.clone() };
    Ok(TrainOutcome { model: trained, history, best_iter, best_validation })
}

fn check_finite(rep: &LossReport, iter: usize, last: Option<LossReport>) -> Result<()> {
    if rep.l_total.is_finite() {
        return Ok(());
    }
    Err(Error::NonFinite(format!(
        "training loss at iteration {iter} (L_data={}, L_phys={}); last finite: {}",
        rep.l_data,
        rep.l_phys,
        last.map_or("none".to_string(), |l| format!("L_data={}, L_phys={}", l.l_data, l.l_phys))
    )))
}

/// `iter,L_data,L_phys,L_total,val_mse,val_mae_1..n` with blanks on
/// iterations without validation.
pub fn write_history_csv(path: &Path, history: &[HistoryRow], n: usize) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = vec!["iter".to_string(), "L_data".into(), "L_phys".into(), "L_total".into(), "val_mse".into()];
    header.extend((1..=n).map(|i| format!("val_mae_{i}")));
    header.extend(["rollout_mse".to_string()]);
    header.extend((1..=n).map(|i| format!("rollout_mae_{i}")));
    writeln!(w, "{}", header.join(","))?;
    for r in history {
        let mut row = vec![r.iter.to_string(), fmt(r.loss.l_data), fmt(r.loss.l_phys), fmt(r.loss.l_total)];
        match &r.validation {
            Some(v) => {
                row.push(fmt(v.single_mse));
                row.extend(v.single_mae.iter().map(|x| fmt(*x)));
                row.push(fmt(v.rollout_mse));
                row.extend(v.rollout_mae.iter().map(|x| fmt(*x)));
            }
            None => row.extend(std::iter::repeat_n(String::new(), 2 + 2 * n)),
        }
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn fmt(v: f64) -> String {
    crate::dynamics::fmt17(v)
}
