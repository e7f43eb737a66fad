use serde::{Deserialize, Serialize};

use crate::diffnet::Real;
use crate::error::{Error, Result};

/// `M z'' + D z' + K z = u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsdParams {
    pub mass: f64,
    pub damping: f64,
    pub stiffness: f64,
}

impl Default for MsdParams {
    fn default() -> Self {
        Self { mass: 1.0, damping: 0.5, stiffness: 1.0 }
    }
}

impl MsdParams {
    pub fn validate(&self) -> Result<()> {
        if self.mass > 0.0 && self.damping > 0.0 && self.stiffness > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("mass, damping and stiffness must be positive".into()))
        }
    }

    pub fn damping_ratio(&self) -> f64 {
        self.damping / (2.0 * (self.mass * self.stiffness).sqrt())
    }

    pub fn natural_frequency(&self) -> f64 {
        (self.stiffness / self.mass).sqrt()
    }

    pub fn rhs(&self, x: &[f64], u: &[f64]) -> [f64; 2] {
        let mut out = [0.0; 2];
        rhs(self, x, u, &mut out);
        out
    }
}

pub(crate) fn rhs<T: Real>(p: &MsdParams, x: &[T], u: &[T], out: &mut [T]) {
    let m = T::from_f64(p.mass);
    let d = T::from_f64(p.damping);
    let k = T::from_f64(p.stiffness);
    out[0] = x[1];
    out[1] = (u[0] - d * x[1] - k * x[0]) / m;
}
