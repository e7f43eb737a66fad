//! Feedforward network with automatic differentiation: the transition
//! surrogate `phi_hat`, its parameter and input gradients, its time
//! derivative, and a reverse-mode tape for costs built on top of it.

pub mod dual;
pub mod io;
pub mod network;
pub mod tape;

pub use dual::{Dual, Real};
pub use network::{
    forward, grad_inputs, grad_params, time_derivative, BatchPass, InputPoint, InputScaling, Mlp,
    NetworkParams, NetworkSpec,
};
pub use tape::{Tape, Var};

/// A short-horizon transition map `x(t) = phi(t, x0, u)` under a held input.
///
/// Implemented by the trained network and by integrator-backed stand-ins, so
/// that gain optimization and validation can run against either.
pub trait TransitionModel {
    type Cache;

    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    /// States at each of `times` starting from `x` under held `u`,
    /// row-major (`times.len() x n`), plus whatever the pullback needs.
    fn predict(&self, times: &[f64], x: &[f64], u: &[f64]) -> (Vec<f64>, Self::Cache);

    /// Accumulates the pullback of `cotangent` (same shape as the outputs)
    /// into `x_bar` and `u_bar`.
    fn pullback(&self, cache: &Self::Cache, cotangent: &[f64], x_bar: &mut [f64], u_bar: &mut [f64]);

    /// `d/dt phi(t, x, u)`.
    fn time_rate(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<f64>;

    fn predict_one(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<f64> {
        self.predict(&[t], x, u).0
    }
}
