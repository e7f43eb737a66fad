//! Scalar abstraction shared by plain `f64` evaluation and forward-mode
//! dual numbers, so plant right-hand sides and integrators are written once
//! and can be differentiated along a single tangent direction.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn value(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn ln(self) -> Self;
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

/// Dual number `re + eps * du` with `eps^2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub const fn new(re: f64, du: f64) -> Self {
        Self { re, du }
    }

    pub const fn constant(re: f64) -> Self {
        Self { re, du: 0.0 }
    }

    pub const fn variable(re: f64) -> Self {
        Self { re, du: 1.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, rhs: Dual) -> Dual {
        Dual::new(self.re + rhs.re, self.du + rhs.du)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, rhs: Dual) -> Dual {
        Dual::new(self.re - rhs.re, self.du - rhs.du)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, rhs: Dual) -> Dual {
        Dual::new(self.re * rhs.re, self.du * rhs.re + self.re * rhs.du)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, rhs: Dual) -> Dual {
        let inv = 1.0 / rhs.re;
        Dual::new(self.re * inv, (self.du * rhs.re - self.re * rhs.du) * inv * inv)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}

impl Real for Dual {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    #[inline]
    fn value(self) -> f64 {
        self.re
    }
    #[inline]
    fn sin(self) -> Self {
        Dual::new(self.re.sin(), self.du * self.re.cos())
    }
    #[inline]
    fn cos(self) -> Self {
        Dual::new(self.re.cos(), -self.du * self.re.sin())
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, self.du * (1.0 - t * t))
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.du / self.re)
    }
}

/// Dense Jacobian (row-major, `out_dim x in_dim`) of `f` at `x` by one
/// forward-mode pass per input direction.
pub fn jacobian<F>(in_dim: usize, out_dim: usize, x: &[f64], mut f: F) -> Vec<f64>
where
    F: FnMut(&[Dual], &mut [Dual]),
{
    let mut jac = vec![0.0; out_dim * in_dim];
    let mut xd: Vec<Dual> = x.iter().map(|&v| Dual::constant(v)).collect();
    let mut out = vec![Dual::default(); out_dim];
    for j in 0..in_dim {
        xd[j].du = 1.0;
        f(&xd, &mut out);
        for i in 0..out_dim {
            jac[i * in_dim + j] = out[i].du;
        }
        xd[j].du = 0.0;
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_and_quotient_rules() {
        let x = Dual::variable(1.5);
        let y = x * x / (x + Dual::constant(1.0));
        // d/dx x^2/(x+1) = (x^2 + 2x)/(x+1)^2
        let expect = (1.5f64 * 1.5 + 3.0) / (2.5 * 2.5);
        assert!((y.du - expect).abs() < 1e-15);
    }

    #[test]
    fn transcendental_derivatives() {
        let x = Dual::variable(0.3);
        assert!((x.sin().du - 0.3f64.cos()).abs() < 1e-15);
        assert!((x.cos().du + 0.3f64.sin()).abs() < 1e-15);
        assert!((x.tanh().du - (1.0 - 0.3f64.tanh().powi(2))).abs() < 1e-15);
        assert!((x.ln().du - 1.0 / 0.3).abs() < 1e-12);
    }

    #[test]
    fn jacobian_of_linear_map() {
        let jac = jacobian(2, 2, &[1.0, 2.0], |x, out| {
            out[0] = x[0] * Dual::constant(3.0) + x[1];
            out[1] = x[0] - x[1] * Dual::constant(2.0);
        });
        assert_eq!(jac, vec![3.0, 1.0, 1.0, -2.0]);
    }
}
