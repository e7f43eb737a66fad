//! Planar two-link arm, angles measured from the upright vertical
//! (`alpha` absolute for link 1, `beta` relative for link 2), so the gravity
//! vector vanishes at `q = 0`.

use serde::{Deserialize, Serialize};

use crate::diffnet::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManipulatorParams {
    /// kg
    pub masses: [f64; 2],
    /// m
    pub lengths: [f64; 2],
    /// Joint-to-center-of-mass distances, m.
    pub com: [f64; 2],
    /// Link inertias about their centers of mass, kg m^2.
    pub inertias: [f64; 2],
    pub gravity: f64,
    /// Diagonal of `B` (N m per input unit).
    pub input_gains: [f64; 2],
    /// Viscous joint friction, N m s/rad; zero keeps the arm conservative.
    #[serde(default)]
    pub friction: f64,
}

impl Default for ManipulatorParams {
    fn default() -> Self {
        Self {
            masses: [1.0, 1.0],
            lengths: [1.0, 1.0],
            com: [0.5, 0.5],
            inertias: [1.0 / 12.0, 1.0 / 12.0],
            gravity: 9.81,
            input_gains: [50.0, 50.0],
            friction: 0.0,
        }
    }
}

impl ManipulatorParams {
    pub fn validate(&self) -> Result<()> {
        let positive = self.masses.iter().chain(&self.lengths).chain(&self.inertias).all(|&v| v > 0.0);
        if !positive {
            return Err(Error::Config("manipulator masses, lengths and inertias must be positive".into()));
        }
        if self.friction < 0.0 {
            return Err(Error::Config("friction must be nonnegative".into()));
        }
        for beta in [-3.0f64, -1.5, 0.0, 1.5, 3.0] {
            let d = self.inertia_matrix(beta);
            if !(d[0] > 0.0 && d[0] * d[3] - d[1] * d[2] > 0.0) {
                return Err(Error::Config("inertia matrix is not positive definite".into()));
            }
        }
        Ok(())
    }

    /// `D(q)` row-major; depends on `beta` only.
    pub fn inertia_matrix(&self, beta: f64) -> [f64; 4] {
        let mut d = [0.0; 4];
        inertia(self, beta, &mut d);
        d
    }

    /// `g(q)`.
    pub fn gravity_vector(&self, q: &[f64]) -> [f64; 2] {
        let mut g = [0.0; 2];
        gravity(self, q[0], q[1], &mut g);
        g
    }

    /// `u_inf = B^{-1} g(q_ref)`: the steady input that holds `q_ref`.
    pub fn gravity_compensation_input(&self, q_ref: &[f64]) -> Result<Vec<f64>> {
        if self.input_gains.iter().any(|b| *b == 0.0) {
            return Err(Error::Singular("input matrix B has a zero diagonal entry".into()));
        }
        let g = self.gravity_vector(q_ref);
        Ok(vec![g[0] / self.input_gains[0], g[1] / self.input_gains[1]])
    }

    /// Kinetic plus potential energy.
    pub fn energy(&self, x: &[f64]) -> f64 {
        let d = self.inertia_matrix(x[1]);
        let (a, b) = (x[2], x[3]);
        let kinetic = 0.5 * (d[0] * a * a + 2.0 * d[1] * a * b + d[3] * b * b);
        let [m1, m2] = self.masses;
        let potential = self.gravity
            * ((m1 * self.com[0] + m2 * self.lengths[0]) * x[0].cos() + m2 * self.com[1] * (x[0] + x[1]).cos());
        kinetic + potential
    }
}

fn inertia<T: Real>(p: &ManipulatorParams, beta: T, d: &mut [T; 4]) {
    let c = |v: f64| T::from_f64(v);
    let [m1, m2] = p.masses;
    let [l1, _] = p.lengths;
    let [lc1, lc2] = p.com;
    let [i1, i2] = p.inertias;
    let cb = beta.cos();
    let d11 = c(m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2) + i1 + i2) + c(2.0 * m2 * l1 * lc2) * cb;
    let d12 = c(m2 * lc2 * lc2 + i2) + c(m2 * l1 * lc2) * cb;
    let d22 = c(m2 * lc2 * lc2 + i2);
    *d = [d11, d12, d12, d22];
}

fn gravity<T: Real>(p: &ManipulatorParams, alpha: T, beta: T, g: &mut [T; 2]) {
    let c = |v: f64| T::from_f64(v);
    let [m1, m2] = p.masses;
    let s12 = (alpha + beta).sin();
    let g2 = -c(m2 * p.com[1] * p.gravity) * s12;
    g[0] = -c((m1 * p.com[0] + m2 * p.lengths[0]) * p.gravity) * alpha.sin() + g2;
    g[1] = g2;
}

pub(crate) fn rhs<T: Real>(p: &ManipulatorParams, x: &[T], u: &[T], out: &mut [T]) -> Result<()> {
    let c = |v: f64| T::from_f64(v);
    let (alpha, beta, da, db) = (x[0], x[1], x[2], x[3]);
    let mut d = [c(0.0); 4];
    inertia(p, beta, &mut d);
    let det = d[0] * d[3] - d[1] * d[2];
    if det.value().abs() < 1e-12 {
        return Err(Error::Singular("inertia matrix determinant below 1e-12".into()));
    }
    // C(q, qdot) qdot with h = -m2 l1 lc2 sin(beta).
    let h = -c(p.masses[1] * p.lengths[0] * p.com[1]) * beta.sin();
    let cq0 = h * db * da + h * (da + db) * db;
    let cq1 = -h * da * da;
    let mut g = [c(0.0); 2];
    gravity(p, alpha, beta, &mut g);
    let fr = c(p.friction);
    let r0 = c(p.input_gains[0]) * u[0] - cq0 - g[0] - fr * da;
    let r1 = c(p.input_gains[1]) * u[1] - cq1 - g[1] - fr * db;
    out[0] = da;
    out[1] = db;
    out[2] = (d[3] * r0 - d[1] * r1) / det;
    out[3] = (d[0] * r1 - d[2] * r0) / det;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Plant;

    #[test]
    fn upright_equilibrium() {
        let plant = Plant::Manipulator(ManipulatorParams::default());
        assert_eq!(plant.rhs(&[0.0; 4], &[0.0, 0.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn zero_velocity_gives_zero_angle_rates() {
        let plant = Plant::Manipulator(ManipulatorParams::default());
        let r = plant.rhs(&[0.4, -1.1, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(&r[..2], &[0.0, 0.0]);
    }

    #[test]
    fn gravity_compensation() {
        let p = ManipulatorParams::default();
        assert_eq!(p.gravity_compensation_input(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        // link 1 horizontal, link 2 aligned: alpha = pi/2, beta = 0
        let q = [std::f64::consts::FRAC_PI_2, 0.0];
        let u = p.gravity_compensation_input(&q).unwrap();
        let g1 = -9.81 * (1.0 * 0.5 + 1.0 * 1.0) - 9.81 * 1.0 * 0.5;
        let g2 = -9.81 * 0.5;
        assert!((u[0] - g1 / 50.0).abs() < 1e-12);
        assert!((u[1] - g2 / 50.0).abs() < 1e-12);
        let mut doubled = p.clone();
        doubled.input_gains = [100.0, 100.0];
        let u2 = doubled.gravity_compensation_input(&q).unwrap();
        assert!((u2[0] - u[0] / 2.0).abs() < 1e-15 && (u2[1] - u[1] / 2.0).abs() < 1e-15);
        doubled.input_gains = [0.0, 1.0];
        assert!(doubled.gravity_compensation_input(&q).is_err());
    }

    #[test]
    fn inertia_is_positive_definite_on_grid() {
        let p = ManipulatorParams::default();
        p.validate().unwrap();
        for k in 0..64 {
            let beta = -std::f64::consts::PI + k as f64 * 0.1;
            let d = p.inertia_matrix(beta);
            assert_eq!(d[1], d[2]);
            assert!(d[0] > 0.0 && d[0] * d[3] - d[1] * d[2] > 0.0);
        }
    }
}
