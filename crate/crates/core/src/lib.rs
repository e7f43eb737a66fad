//! Adaptive PID control driven by a physics-informed neural surrogate.
//!
//! A small tanh network learns the transition map of a controlled ODE over
//! one sampling interval under a held input. Time-varying PID gains are then
//! re-optimized at every sampling step by Adam, differentiating a finite
//! lookahead of surrogate predictions, and applied to an RK4-simulated plant.
//! Frozen-gain loops on the mass-spring-damper are assessed with the
//! Routh-Hurwitz value and a signed Nyquist margin.
//!
//! Random draws use ChaCha8 (`rand_chacha`) seeded from a `u64`, with one
//! stream per purpose, so results are reproducible across platforms.

pub mod analysis;
pub mod datagen;
pub mod diffnet;
pub mod dynamics;
pub mod error;
pub mod gainopt;
pub mod harness;
pub mod mpc;
pub mod optim;
pub mod pid;
pub mod pinn;

pub use error::{Error, Result};
