//! Frozen-gain PID loops on the mass-spring-damper: open-loop frequency
//! response, Routh-Hurwitz value, signed Nyquist margin and gain crossover.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dynamics::{fmt17, MsdParams};
use crate::error::{Error, Result};

/// `L(s) = (Kp + Ki/s + Kd s) / (M s^2 + D s + K)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenLoop {
    pub plant: MsdParams,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl FrozenLoop {
    pub fn new(plant: MsdParams, gains: &[f64]) -> Result<Self> {
        match gains {
            [kp, ki, kd] => Ok(Self { plant, kp: *kp, ki: *ki, kd: *kd }),
            _ => Err(Error::Dimension(format!("expected 3 gains (Kp, Ki, Kd), got {}", gains.len()))),
        }
    }
}

/// `g = (Kd + D)(Kp + K) - M Ki`.
pub fn routh_hurwitz(plant: &MsdParams, kp: f64, ki: f64, kd: f64) -> f64 {
    (kd + plant.damping) * (kp + plant.stiffness) - plant.mass * ki
}

/// Closed-loop stability for this plant family: `g > 0` with nonnegative gains.
pub fn is_stable(lp: &FrozenLoop) -> bool {
    lp.kp >= 0.0 && lp.ki >= 0.0 && lp.kd >= 0.0 && routh_hurwitz(&lp.plant, lp.kp, lp.ki, lp.kd) > 0.0
}

/// `L(j omega)`; `omega = 0` is the integrator pole.
pub fn open_loop_response(lp: &FrozenLoop, omega: f64) -> Result<Complex64> {
    if omega == 0.0 || !omega.is_finite() {
        return Err(Error::Config(format!("frequency must be finite and nonzero, got {omega}")));
    }
    let s = Complex64::new(0.0, omega);
    let p = &lp.plant;
    let controller = lp.kp + lp.ki / s + lp.kd * s;
    Ok(controller / (p.mass * s * s + p.damping * s + p.stiffness))
}

/// Logarithmic frequency grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrequencyGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        Self { lo: 1e-2, hi: 1e3, points: 2000 }
    }
}

impl FrequencyGrid {
    pub fn omegas(&self) -> Vec<f64> {
        let (a, b) = (self.lo.ln(), self.hi.ln());
        let k = self.points.max(2);
        (0..k).map(|i| (a + (b - a) * i as f64 / (k - 1) as f64).exp()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo > 0.0 && self.hi > self.lo && self.points >= 2 {
            Ok(())
        } else {
            Err(Error::Config("frequency grid needs 0 < lo < hi and at least 2 points".into()))
        }
    }
}

fn dist(lp: &FrozenLoop, omega: f64) -> f64 {
    (open_loop_response(lp, omega).unwrap() + 1.0).norm()
}

/// Golden-section minimization of `f(exp(v))` for `v` in `[a, b]`.
fn golden_log<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (a, b);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c.exp()), f(d.exp()));
    for _ in 0..200 {
        if (b - a).abs() < 1e-13 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c.exp());
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d.exp());
        }
    }
    let v = 0.5 * (a + b);
    (v.exp(), f(v.exp()))
}

/// Shortest distance from the Nyquist curve to -1 on the grid, refined
/// around the grid minimizer; positive iff the frozen loop is stable.
pub fn stability_margin(lp: &FrozenLoop, grid: &FrequencyGrid) -> f64 {
    let w = grid.omegas();
    let d: Vec<f64> = w.iter().map(|&o| dist(lp, o)).collect();
    let (i, &dmin) = d.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    let lo = w[i.saturating_sub(1)].ln();
    let hi = w[(i + 1).min(w.len() - 1)].ln();
    let (_, refined) = golden_log(|o| dist(lp, o), lo, hi);
    let mag = dmin.min(refined);
    if is_stable(lp) {
        mag
    } else {
        -mag
    }
}

/// Smallest frequency with `|L(j omega)| = 1`, bracketed on the grid and
/// bisected in log frequency to 1e-6 relative.
pub fn gain_crossover(lp: &FrozenLoop, grid: &FrequencyGrid) -> Option<f64> {
    let w = grid.omegas();
    let h = |o: f64| open_loop_response(lp, o).unwrap().norm() - 1.0;
    let mut prev = (w[0], h(w[0]));
    if prev.1 == 0.0 {
        return Some(prev.0);
    }
    for &o in &w[1..] {
        let cur = (o, h(o));
        if cur.1 == 0.0 {
            return Some(o);
        }
        if prev.1.signum() != cur.1.signum() {
            let (mut a, mut b) = (prev.0.ln(), cur.0.ln());
            let fa_sign = prev.1.signum();
            while (b - a) > 1e-9 {
                let m = 0.5 * (a + b);
                if h(m.exp()).signum() == fa_sign {
                    a = m;
                } else {
                    b = m;
                }
            }
            return Some((0.5 * (a + b)).exp());
        }
        prev = cur;
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub g: f64,
    pub margin: f64,
    pub crossover: Option<f64>,
    pub stable: bool,
}

pub fn report(lp: &FrozenLoop, grid: &FrequencyGrid) -> StabilityReport {
    StabilityReport {
        g: routh_hurwitz(&lp.plant, lp.kp, lp.ki, lp.kd),
        margin: stability_margin(lp, grid),
        crossover: gain_crossover(lp, grid),
        stable: is_stable(lp),
    }
}

/// `(omega, Re L, Im L)` over the grid.
pub fn nyquist_curve(lp: &FrozenLoop, grid: &FrequencyGrid) -> Vec<(f64, f64, f64)> {
    grid.omegas()
        .into_iter()
        .map(|o| {
            let l = open_loop_response(lp, o).unwrap();
            (o, l.re, l.im)
        })
        .collect()
}

pub fn write_nyquist_csv(path: &Path, curve: &[(f64, f64, f64)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "omega,re,im")?;
    for (o, re, im) in curve {
        writeln!(w, "{},{},{}", fmt17(*o), fmt17(*re), fmt17(*im))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper(gains: [f64; 3]) -> FrozenLoop {
        FrozenLoop::new(MsdParams::default(), &gains).unwrap()
    }

    #[test]
    fn hand_complex_value() {
        let l = open_loop_response(&paper([1.2, 1.0, 1.2]), 1.0).unwrap();
        assert!((l.re - 0.4).abs() < 1e-14 && (l.im + 2.4).abs() < 1e-14, "{l}");
        assert!(open_loop_response(&paper([1.2, 1.0, 1.2]), 0.0).is_err());
    }

    #[test]
    fn zero_gains() {
        let lp = paper([0.0, 0.0, 0.0]);
        assert_eq!(open_loop_response(&lp, 3.0).unwrap(), Complex64::new(0.0, 0.0));
        assert!((stability_margin(&lp, &FrequencyGrid::default()) - 1.0).abs() < 1e-15);
        assert_eq!(gain_crossover(&lp, &FrequencyGrid::default()), None);
    }

    #[test]
    fn routh_values() {
        let p = MsdParams::default();
        assert!((routh_hurwitz(&p, 1.2, 1.0, 1.2) - 2.74).abs() < 1e-12);
        assert!((routh_hurwitz(&p, 0.0, 4.0, 0.0) + 3.5).abs() < 1e-12);
        assert!(stability_margin(&paper([0.0, 4.0, 0.0]), &FrequencyGrid::default()) < 0.0);
    }

    #[test]
    fn high_frequency_rolloff() {
        let lp = paper([1.2, 1.0, 1.2]);
        let w = 1e6;
        let l = open_loop_response(&lp, w).unwrap().norm();
        assert!((l * w / 1.2 - 1.0).abs() < 1e-5);
    }

    #[test]
    fn conjugate_symmetry() {
        let lp = paper([0.7, 2.0, 0.3]);
        for w in [0.1, 1.3, 40.0] {
            assert_eq!(open_loop_response(&lp, -w).unwrap(), open_loop_response(&lp, w).unwrap().conj());
        }
    }

    #[test]
    fn margin_agrees_with_denser_grid() {
        let lp = paper([1.2, 1.0, 1.2]);
        let m = stability_margin(&lp, &FrequencyGrid::default());
        let dense = FrequencyGrid { points: 20_000, ..Default::default() };
        let brute = dense.omegas().iter().map(|&o| dist(&lp, o)).fold(f64::INFINITY, f64::min);
        assert!(m > 0.0);
        assert!((m - brute).abs() < 1e-4, "{m} vs {brute}");
        assert!(m <= brute + 1e-12);
    }

    #[test]
    fn crossover_solves_unit_magnitude() {
        let lp = paper([1.2, 1.0, 1.2]);
        let wc = gain_crossover(&lp, &FrequencyGrid::default()).unwrap();
        assert!((open_loop_response(&lp, wc).unwrap().norm() - 1.0).abs() < 1e-6);
    }
}
