//! Ground-truth plants, classical RK4 and zero-order-hold rollouts.

mod manipulator;
mod msd;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use manipulator::ManipulatorParams;
pub use msd::MsdParams;

use crate::diffnet::{dual, Real};
use crate::error::{ensure_dim, Error, Result};

/// Continuous state `x` (manipulator: `(alpha, beta, alpha_dot, beta_dot)`,
/// mass-spring-damper: `(z, z_dot)`).
pub type PlantState = Vec<f64>;

/// Zero-order-hold input `u`.
pub type ControlInput = Vec<f64>;

/// Axis-aligned box, used for the admissible state and input sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        ensure_dim("box bounds", lower.len(), upper.len())?;
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::Config("box requires finite lower <= upper".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.dim() && v.iter().zip(self.lower.iter().zip(&self.upper)).all(|(x, (l, u))| x >= l && x <= u)
    }

    pub fn clamp(&self, v: &mut [f64]) {
        for (x, (l, u)) in v.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *x = x.clamp(*l, *u);
        }
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }
}

/// The nominal plants of both case studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Plant {
    Msd(MsdParams),
    Manipulator(ManipulatorParams),
}

impl Plant {
    pub fn state_dim(&self) -> usize {
        match self {
            Plant::Msd(_) => 2,
            Plant::Manipulator(_) => 4,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Plant::Msd(_) => 1,
            Plant::Manipulator(_) => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Plant::Msd(_) => "msd",
            Plant::Manipulator(_) => "manipulator",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Plant::Msd(p) => p.validate(),
            Plant::Manipulator(p) => p.validate(),
        }
    }

    /// `f(x, u)` for any scalar type.
    pub fn rhs_generic<T: Real>(&self, x: &[T], u: &[T], out: &mut [T]) -> Result<()> {
        match self {
            Plant::Msd(p) => {
                msd::rhs(p, x, u, out);
                Ok(())
            }
            Plant::Manipulator(p) => manipulator::rhs(p, x, u, out),
        }
    }

    pub fn rhs(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("state", self.state_dim(), x.len())?;
        ensure_dim("input", self.input_dim(), u.len())?;
        let mut out = vec![0.0; x.len()];
        self.rhs_generic(x, u, &mut out)?;
        Ok(out)
    }

    /// `df/dx` at `(x, u)`, row-major `n x n`.
    pub fn state_jacobian(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let n = self.state_dim();
        let ud: Vec<dual::Dual> = u.iter().map(|&v| dual::Dual::constant(v)).collect();
        let mut err = None;
        let jac = dual::jacobian(n, n, x, |xd, out| {
            if let Err(e) = self.rhs_generic(xd, &ud, out) {
                err = Some(e);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(jac),
        }
    }

    /// Copy of this plant with parameters scaled by `factors`
    /// (masses, damping/friction, stiffness, input gain).
    pub fn with_mismatch(&self, factors: &Mismatch) -> Plant {
        match self {
            Plant::Msd(p) => Plant::Msd(MsdParams {
                mass: p.mass * factors.mass,
                damping: p.damping * factors.damping,
                stiffness: p.stiffness * factors.stiffness,
            }),
            Plant::Manipulator(p) => {
                let mut q = p.clone();
                q.masses = [p.masses[0] * factors.mass, p.masses[1] * factors.mass];
                q.inertias = [p.inertias[0] * factors.mass, p.inertias[1] * factors.mass];
                q.friction = p.friction * factors.damping;
                q.input_gains = [p.input_gains[0] * factors.input_gain, p.input_gains[1] * factors.input_gain];
                Plant::Manipulator(q)
            }
        }
    }
}

/// Multiplicative parameter perturbations for the simulated "real" plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mismatch {
    pub mass: f64,
    pub damping: f64,
    pub stiffness: f64,
    pub input_gain: f64,
}

impl Default for Mismatch {
    fn default() -> Self {
        Self { mass: 1.0, damping: 1.0, stiffness: 1.0, input_gain: 1.0 }
    }
}

/// One classical RK4 step of size `h` with `u` held.
pub fn rk4_step<T, F>(rhs: F, x: &[T], u: &[T], h: f64) -> Result<Vec<T>>
where
    T: Real,
    F: Fn(&[T], &[T], &mut [T]) -> Result<()>,
{
    if !(h > 0.0) {
        return Err(Error::Config("RK4 step must be positive".into()));
    }
    let n = x.len();
    let hh = T::from_f64(h);
    let half = T::from_f64(0.5 * h);
    let zero = T::from_f64(0.0);
    let mut k1 = vec![zero; n];
    let mut k2 = vec![zero; n];
    let mut k3 = vec![zero; n];
    let mut k4 = vec![zero; n];
    let mut tmp = vec![zero; n];

    rhs(x, u, &mut k1)?;
    for i in 0..n {
        tmp[i] = x[i] + half * k1[i];
    }
    rhs(&tmp, u, &mut k2)?;
    for i in 0..n {
        tmp[i] = x[i] + half * k2[i];
    }
    rhs(&tmp, u, &mut k3)?;
    for i in 0..n {
        tmp[i] = x[i] + hh * k3[i];
    }
    rhs(&tmp, u, &mut k4)?;

    let sixth = T::from_f64(h / 6.0);
    let two = T::from_f64(2.0);
    let mut next = Vec::with_capacity(n);
    for i in 0..n {
        let v = x[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
        if !v.value().is_finite() {
            return Err(Error::NonFinite(format!("RK4 stage produced non-finite state component {i}")));
        }
        next.push(v);
    }
    Ok(next)
}

/// Integrates `duration` with `u` held using `steps` equal RK4 steps.
pub fn integrate_held<T, F>(rhs: F, x0: &[T], u: &[T], duration: f64, steps: usize) -> Result<Vec<T>>
where
    T: Real,
    F: Fn(&[T], &[T], &mut [T]) -> Result<()> + Copy,
{
    let steps = steps.max(1);
    let h = duration / steps as f64;
    let mut x = x0.to_vec();
    for _ in 0..steps {
        x = rk4_step(rhs, &x, u, h)?;
    }
    Ok(x)
}

/// Zero-order-hold rollout: each input is held for `dt`, split into
/// `substeps` RK4 steps. Returns the state at every substep boundary,
/// starting with `x0` (length `1 + inputs.len() * substeps`).
pub fn simulate_zoh<F>(rhs: F, x0: &[f64], inputs: &[ControlInput], dt: f64, substeps: usize) -> Result<Vec<PlantState>>
where
    F: Fn(&[f64], &[f64], &mut [f64]) -> Result<()> + Copy,
{
    if substeps == 0 {
        return Err(Error::Config("substeps must be >= 1".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::Config("sampling interval must be positive".into()));
    }
    let h = dt / substeps as f64;
    let mut traj = Vec::with_capacity(1 + inputs.len() * substeps);
    traj.push(x0.to_vec());
    let mut x = x0.to_vec();
    for u in inputs {
        for _ in 0..substeps {
            x = rk4_step(rhs, &x, u, h)?;
            traj.push(x.clone());
        }
    }
    Ok(traj)
}

/// Trajectory CSV with header `t,x1..xn,u1..um`, one row per substep
/// boundary and 17 significant digits. The final row repeats the last input.
pub fn write_trajectory_csv(
    path: &Path,
    traj: &[PlantState],
    inputs: &[ControlInput],
    dt: f64,
    substeps: usize,
) -> Result<()> {
    let n = traj.first().map_or(0, Vec::len);
    let m = inputs.first().map_or(0, Vec::len);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("u{i}")));
    writeln!(out, "{}", header.join(","))?;
    let h = dt / substeps.max(1) as f64;
    for (k, x) in traj.iter().enumerate() {
        let seg = if inputs.is_empty() { 0 } else { (k / substeps.max(1)).min(inputs.len() - 1) };
        let mut row = vec![fmt17(k as f64 * h)];
        row.extend(x.iter().map(|v| fmt17(*v)));
        if let Some(u) = inputs.get(seg) {
            row.extend(u.iter().map(|v| fmt17(*v)));
        }
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// 17 significant digits in scientific notation.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}
