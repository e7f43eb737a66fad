//! First-order and quasi-Newton minimizers over flat parameter vectors.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-7 }
    }
}

/// Adam moments and iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub iter: u64,
}

impl AdamState {
    pub fn new(dim: usize, config: AdamConfig) -> Self {
        Self { config, m: vec![0.0; dim], v: vec![0.0; dim], iter: 0 }
    }

    /// One bias-corrected update with the configured learning rate.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, grad, lr)
    }

    pub fn step_with_lr(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != params.len() || grad.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "Adam: {} parameters, {} gradient entries, {} moments",
                params.len(),
                grad.len(),
                self.m.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("Adam gradient".into()));
        }
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        self.iter += 1;
        let c1 = 1.0 - beta1.powi(self.iter as i32);
        let c2 = 1.0 - beta2.powi(self.iter as i32);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Cosine decay from `start` to `end` over `total` iterations.
pub fn cosine_lr(start: f64, end: f64, iter: usize, total: usize) -> f64 {
    if total <= 1 {
        return start;
    }
    let p = (iter.min(total - 1) as f64) / ((total - 1) as f64);
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * p).cos())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Limited-memory BFGS with a strong-Wolfe line search.
#[derive(Debug, Clone)]
pub struct Lbfgs {
    memory: usize,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    pub c1: f64,
    pub c2: f64,
    pub max_evals: usize,
}

/// Outcome of one L-BFGS iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsStep {
    pub step: f64,
    pub evals: usize,
    pub accepted: bool,
}

impl Lbfgs {
    pub fn new(memory: usize) -> Self {
        Self { memory: memory.max(1), pairs: VecDeque::new(), c1: 1e-4, c2: 0.9, max_evals: 25 }
    }

    pub fn reset(&mut self) {
        self.pairs.clear();
    }

    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    /// One iteration from `(x, fx, gx)`, updated in place. `f` returns the
    /// value and gradient. A failed line search leaves `x` unchanged and
    /// clears the curvature memory.
    pub fn step<F>(&mut self, x: &mut Vec<f64>, fx: &mut f64, gx: &mut Vec<f64>, f: &mut F) -> Result<LbfgsStep>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let mut d = self.direction(gx);
        let mut dphi0 = dot(gx, &d);
        if !(dphi0 < 0.0) {
            self.reset();
            d = gx.iter().map(|g| -g).collect();
            dphi0 = dot(gx, &d);
        }
        if dphi0 == 0.0 {
            return Ok(LbfgsStep { step: 0.0, evals: 0, accepted: false });
        }
        let a0 = if self.pairs.is_empty() { (1.0 / dphi0.abs().sqrt()).min(1.0) } else { 1.0 };
        let (alpha, fnew, gnew, evals) = self.line_search(x, *fx, dphi0, &d, a0, f)?;
        match (alpha, fnew, gnew) {
            (Some(a), Some(fn_), Some(gn)) => {
                let s: Vec<f64> = d.iter().map(|v| a * v).collect();
                let y: Vec<f64> = gn.iter().zip(gx.iter()).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                for (xi, si) in x.iter_mut().zip(&s) {
                    *xi += si;
                }
                if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
                    if self.pairs.len() == self.memory {
                        self.pairs.pop_front();
                    }
                    self.pairs.push_back((s, y, 1.0 / sy));
                }
                *fx = fn_;
                *gx = gn;
                Ok(LbfgsStep { step: a, evals, accepted: true })
            }
            _ => {
                self.reset();
                Ok(LbfgsStep { step: 0.0, evals, accepted: false })
            }
        }
    }

    #[allow(clippy::type_complexity)]
    fn line_search<F>(
        &self,
        x: &[f64],
        f0: f64,
        dphi0: f64,
        d: &[f64],
        a_init: f64,
        f: &mut F,
    ) -> Result<(Option<f64>, Option<f64>, Option<Vec<f64>>, usize)>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let mut evals = 0;
        let mut eval = |a: f64, evals: &mut usize| -> Result<(f64, f64, Vec<f64>)> {
            *evals += 1;
            let xt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + a * di).collect();
            let (v, g) = f(&xt)?;
            Ok((v, dot(&g, d), g))
        };
        let (c1, c2) = (self.c1, self.c2);
        let mut a_prev = 0.0;
        let mut f_prev = f0;
        let mut dphi_prev = dphi0;
        let mut a = a_init;
        let mut lo_hi: Option<(f64, f64, f64, f64, f64, f64)> = None;
        for i in 0..self.max_evals {
            let (fa, dphi, g) = eval(a, &mut evals)?;
            if !fa.is_finite() || fa > f0 + c1 * a * dphi0 || (i > 0 && fa >= f_prev) {
                lo_hi = Some((a_prev, f_prev, dphi_prev, a, fa, dphi));
                break;
            }
            if dphi.abs() <= -c2 * dphi0 {
                return Ok((Some(a), Some(fa), Some(g), evals));
            }
            if dphi >= 0.0 {
                lo_hi = Some((a, fa, dphi, a_prev, f_prev, dphi_prev));
                break;
            }
            a_prev = a;
            f_prev = fa;
            dphi_prev = dphi;
            a *= 2.0;
        }
        let Some((mut lo, mut flo, mut dlo, mut hi, mut fhi, mut dhi)) = lo_hi else {
            return Ok((None, None, None, evals));
        };
        let mut best: Option<(f64, f64, Vec<f64>)> = None;
        while evals < self.max_evals {
            let aj = interpolate(lo, flo, dlo, hi, fhi, dhi);
            let (fj, dj, g) = eval(aj, &mut evals)?;
            if !fj.is_finite() || fj > f0 + c1 * aj * dphi0 || fj >= flo {
                hi = aj;
                fhi = fj;
                dhi = dj;
            } else {
                if dj.abs() <= -c2 * dphi0 {
                    return Ok((Some(aj), Some(fj), Some(g), evals));
                }
                if best.as_ref().is_none_or(|b| fj < b.1) {
                    best = Some((aj, fj, g.clone()));
                }
                if dj * (hi - lo) >= 0.0 {
                    hi = lo;
                    fhi = flo;
                    dhi = dlo;
                }
                lo = aj;
                flo = fj;
                dlo = dj;
            }
            if (hi - lo).abs() < 1e-14 * lo.abs().max(1.0) {
                break;
            }
        }
        // Sufficient decrease without curvature is still progress.
        Ok(match best {
            Some((a, fa, g)) => (Some(a), Some(fa), Some(g), evals),
            None => (None, None, None, evals),
        })
    }
}

/// Cubic interpolation minimizer between two bracket ends, safeguarded to
/// the inner 80% of the interval; bisection when the cubic is unusable.
fn interpolate(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let width = hi - lo;
    let mid = 0.5 * (a + b);
    if !fb.is_finite() || !db.is_finite() {
        return mid;
    }
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let denom = db - da + 2.0 * d2;
    if denom == 0.0 {
        return mid;
    }
    let t = b - (b - a) * (db + d2 - d1) / denom;
    if t.is_finite() && t > lo + 0.1 * width && t < hi - 0.1 * width {
        t
    } else {
        mid
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut s = AdamState::new(2, AdamConfig::default());
        let mut p = vec![1.0, -2.0];
        s.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut s = AdamState::new(2, AdamConfig::default());
        let mut p = vec![0.0, 0.0];
        s.step(&mut p, &[3.0, -0.5]).unwrap();
        assert!((p[0] + 1e-2 * 3.0 / (3.0 + 1e-7)).abs() < 1e-15);
        assert!((p[1] - 1e-2 * 0.5 / (0.5 + 1e-7)).abs() < 1e-15);
    }

    #[test]
    fn rejects_nan_gradient_and_bad_shape() {
        let mut s = AdamState::new(1, AdamConfig::default());
        assert!(s.step(&mut [0.0], &[f64::NAN]).is_err());
        assert!(s.step(&mut [0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 1e-4, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 1e-4, 99, 100) - 1e-4).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 1e-4, 1000, 100) - 1e-4).abs() < 1e-18);
    }

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn lbfgs_solves_rosenbrock() {
        let mut opt = Lbfgs::new(10);
        let mut x = vec![-1.2, 1.0];
        let (mut fx, mut gx) = rosenbrock(&x).unwrap();
        let mut f = rosenbrock;
        for _ in 0..200 {
            let s = opt.step(&mut x, &mut fx, &mut gx, &mut f).unwrap();
            if fx < 1e-20 || !s.accepted && gx.iter().all(|g| g.abs() < 1e-10) {
                break;
            }
        }
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] - 1.0).abs() < 1e-6, "{x:?}");
    }

    #[test]
    fn lbfgs_is_monotone_on_quadratic() {
        let diag = [1.0, 10.0, 100.0, 1000.0];
        let mut f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok((0.5 * x.iter().zip(&diag).map(|(v, d)| d * v * v).sum::<f64>(), x.iter().zip(&diag).map(|(v, d)| d * v).collect()))
        };
        let mut opt = Lbfgs::new(5);
        let mut x = vec![1.0; 4];
        let (mut fx, mut gx) = f(&x).unwrap();
        for _ in 0..30 {
            let before = fx;
            opt.step(&mut x, &mut fx, &mut gx, &mut f).unwrap();
            assert!(fx <= before);
        }
        assert!(fx < 1e-12);
    }
}
