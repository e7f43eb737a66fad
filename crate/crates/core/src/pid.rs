//! Time-varying PID law `u = F E` and the discrete error recursion driven
//! by the surrogate.

use serde::{Deserialize, Serialize};

use crate::diffnet::TransitionModel;
use crate::dynamics::BoxSet;
use crate::error::{ensure_dim, ensure_finite, Error, Result};

/// Which entries of `K^p, K^i, K^d` (each `m x n`) are free gains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainStructure {
    /// Input `i` reacts to state coordinate `i` only: one gain per input per
    /// block, ordered `Kp_1..Kp_m, Ki_1..Ki_m, Kd_1..Kd_m`.
    Diagonal,
    /// Every entry, block by block, row-major.
    Full,
}

impl GainStructure {
    /// `(block, row, col)` of each free gain, in parameter order.
    pub fn entries(self, m: usize, n: usize) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for b in 0..3 {
            match self {
                GainStructure::Diagonal => out.extend((0..m.min(n)).map(|i| (b, i, i))),
                GainStructure::Full => {
                    for i in 0..m {
                        out.extend((0..n).map(|j| (b, i, j)));
                    }
                }
            }
        }
        out
    }

    pub fn param_count(self, m: usize, n: usize) -> usize {
        self.entries(m, n).len()
    }
}

/// `F = [K^p, K^i, K^d]`, each block `m x n` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainMatrix {
    pub m: usize,
    pub n: usize,
    pub kp: Vec<f64>,
    pub ki: Vec<f64>,
    pub kd: Vec<f64>,
}

impl GainMatrix {
    pub fn zeros(m: usize, n: usize) -> Self {
        Self { m, n, kp: vec![0.0; m * n], ki: vec![0.0; m * n], kd: vec![0.0; m * n] }
    }

    pub fn from_params(structure: GainStructure, m: usize, n: usize, theta: &[f64]) -> Result<Self> {
        let entries = structure.entries(m, n);
        ensure_dim("gain parameters", entries.len(), theta.len())?;
        ensure_finite("gain parameters", theta)?;
        let mut f = Self::zeros(m, n);
        for (&(b, i, j), &v) in entries.iter().zip(theta) {
            f.block_mut(b)[i * n + j] = v;
        }
        Ok(f)
    }

    pub fn params(&self, structure: GainStructure) -> Vec<f64> {
        structure.entries(self.m, self.n).iter().map(|&(b, i, j)| self.block(b)[i * self.n + j]).collect()
    }

    pub fn block(&self, b: usize) -> &[f64] {
        match b {
            0 => &self.kp,
            1 => &self.ki,
            _ => &self.kd,
        }
    }

    fn block_mut(&mut self, b: usize) -> &mut [f64] {
        match b {
            0 => &mut self.kp,
            1 => &mut self.ki,
            _ => &mut self.kd,
        }
    }

    /// `F E` without saturation.
    pub fn apply(&self, e: &ErrorState) -> Result<Vec<f64>> {
        ensure_dim("error state", self.n, e.prop.len())?;
        let mut u = vec![0.0; self.m];
        for (i, ui) in u.iter_mut().enumerate() {
            for j in 0..self.n {
                let k = i * self.n + j;
                *ui += self.kp[k] * e.prop[j] + self.ki[k] * e.int[j] + self.kd[k] * e.deri[j];
            }
        }
        Ok(u)
    }
}

/// `E = (e^prop, e^int, e^deri)`, each an `n`-vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorState {
    pub prop: Vec<f64>,
    pub int: Vec<f64>,
    pub deri: Vec<f64>,
}

impl ErrorState {
    pub fn zeros(n: usize) -> Self {
        Self { prop: vec![0.0; n], int: vec![0.0; n], deri: vec![0.0; n] }
    }

    pub fn stacked(&self) -> Vec<f64> {
        self.prop.iter().chain(&self.int).chain(&self.deri).copied().collect()
    }

    /// Next state from the new error `e_next` and the integral increment;
    /// coordinates with `freeze[i]` keep their integral.
    pub fn advance(&self, e_next: &[f64], increment: &[f64], freeze: &[bool], dt: f64) -> ErrorState {
        let int = self
            .int
            .iter()
            .zip(increment)
            .enumerate()
            .map(|(i, (a, d))| if freeze.get(i).copied().unwrap_or(false) { *a } else { a + d })
            .collect();
        let deri = e_next.iter().zip(&self.prop).map(|(a, b)| (a - b) / dt).collect();
        ErrorState { prop: e_next.to_vec(), int, deri }
    }
}

/// Box `F` of admissible gain parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl GainBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        ensure_dim("gain bounds", lower.len(), upper.len())?;
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::Config("gain bounds need finite lower <= upper".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.len() && theta.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| v >= l && v <= u)
    }
}

/// `u = sat(F E)`; no saturation without an input box.
pub fn control_input(f: &GainMatrix, e: &ErrorState, input_box: Option<&BoxSet>) -> Result<Vec<f64>> {
    let mut u = f.apply(e)?;
    if let Some(b) = input_box {
        ensure_dim("input box", f.m, b.dim())?;
        b.clamp(&mut u);
    }
    Ok(u)
}

/// Trapezoid nodes `0, dt/n, .., dt` and their weights.
pub fn trapezoid(dt: f64, n_quad: usize) -> (Vec<f64>, Vec<f64>) {
    let n_quad = n_quad.max(1);
    let h = dt / n_quad as f64;
    let times = (0..=n_quad).map(|q| if q == n_quad { dt } else { q as f64 * h }).collect();
    let weights = (0..=n_quad).map(|q| if q == 0 || q == n_quad { 0.5 * h } else { h }).collect();
    (times, weights)
}

/// `E_0`: `e^prop = x_ref_0 - x_0`, `e^int = 0`,
/// `e^deri = (x_ref_0 - x_ref_init)/dt - d phi_hat/dt (0, x_0, u_prev)`.
pub fn error_init<M: TransitionModel>(
    model: &M,
    x0: &[f64],
    x_ref0: &[f64],
    x_ref_init: &[f64],
    u_prev: &[f64],
    dt: f64,
) -> Result<ErrorState> {
    let n = model.state_dim();
    ensure_dim("state", n, x0.len())?;
    ensure_dim("reference", n, x_ref0.len())?;
    ensure_dim("initial reference", n, x_ref_init.len())?;
    ensure_dim("previous input", model.input_dim(), u_prev.len())?;
    if !(dt > 0.0) {
        return Err(Error::Config("sampling interval must be positive".into()));
    }
    let rate = model.time_rate(0.0, x0, u_prev);
    Ok(ErrorState {
        prop: x_ref0.iter().zip(x0).map(|(r, x)| r - x).collect(),
        int: vec![0.0; n],
        deri: (0..n).map(|i| (x_ref0[i] - x_ref_init[i]) / dt - rate[i]).collect(),
    })
}

/// Integral increment `int_0^dt (x_ref_k - phi_hat(tau, x_k, u_k)) dtau`
/// by the composite trapezoid rule, from predictions at the trapezoid nodes
/// (row-major `(n_quad + 1) x n`).
pub fn integral_increment(x_ref_k: &[f64], predictions: &[f64], weights: &[f64]) -> Vec<f64> {
    let n = x_ref_k.len();
    let mut inc = vec![0.0; n];
    for (q, w) in weights.iter().enumerate() {
        for i in 0..n {
            inc[i] += w * (x_ref_k[i] - predictions[q * n + i]);
        }
    }
    inc
}

/// Anti-windup: coordinate `i` is frozen when an input it feeds through
/// `K^i` is saturated and the increment would push further into saturation.
pub fn windup_mask(f: &GainMatrix, raw_u: &[f64], input_box: &BoxSet, increment: &[f64]) -> Vec<bool> {
    let mut mask = vec![false; f.n];
    for j in 0..f.m {
        let dir = if raw_u[j] > input_box.upper[j] {
            1.0
        } else if raw_u[j] < input_box.lower[j] {
            -1.0
        } else {
            continue;
        };
        for (i, m) in mask.iter_mut().enumerate() {
            if dir * f.ki[j * f.n + i] * increment[i] > 0.0 {
                *m = true;
            }
        }
    }
    mask
}

/// `E_{k+1}` from the surrogate prediction over one interval.
#[allow(clippy::too_many_arguments)]
pub fn error_update<M: TransitionModel>(
    model: &M,
    x_ref_k: &[f64],
    x_ref_k1: &[f64],
    x_k: &[f64],
    u_k: &[f64],
    e_k: &ErrorState,
    dt: f64,
    n_quad: usize,
    freeze: &[bool],
) -> Result<ErrorState> {
    let n = model.state_dim();
    ensure_dim("state", n, x_k.len())?;
    ensure_dim("input", model.input_dim(), u_k.len())?;
    if n_quad < 1 {
        return Err(Error::Config("n_quad must be >= 1".into()));
    }
    let (times, weights) = trapezoid(dt, n_quad);
    let (pred, _) = model.predict(&times, x_k, u_k);
    let inc = integral_increment(x_ref_k, &pred, &weights);
    let x_next = &pred[n_quad * n..];
    let e_next: Vec<f64> = x_ref_k1.iter().zip(x_next).map(|(r, x)| r - x).collect();
    Ok(e_k.advance(&e_next, &inc, freeze, dt))
}
