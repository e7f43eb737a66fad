//! Experiment configuration: one TOML file per experiment. Every table has
//! defaults (the mass-spring-damper servo setup); unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::FrequencyGrid;
use crate::datagen::DatasetConfig;
use crate::dynamics::{BoxSet, ManipulatorParams, Mismatch, MsdParams, Plant};
use crate::error::{ensure_dim, Error, Result};
use crate::gainopt::CostWeights;
use crate::mpc::{ClosedLoopConfig, ControllerSettings, Disturbance, GainMode, ReferencePiece, ReferenceSignal};
use crate::pid::GainBounds;
use crate::pinn::{TrainConfig, ValidationSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    fn new(lower: &[f64], upper: &[f64]) -> Self {
        Self { lower: lower.to_vec(), upper: upper.to_vec() }
    }

    pub fn to_box(&self) -> Result<BoxSet> {
        BoxSet::new(self.lower.clone(), self.upper.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n_data: usize,
    pub n_phys: usize,
    pub dt: f64,
    pub eps: f64,
    pub state_box: Bounds,
    pub input_box: Bounds,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            n_data: 2000,
            n_phys: 10_000,
            dt: 0.2,
            eps: 0.05,
            state_box: Bounds::new(&[-1.5, -2.0], &[1.5, 2.0]),
            input_box: Bounds::new(&[-1.0], &[1.0]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden: Vec<usize>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self { hidden: vec![32, 32, 32] }
    }
}

/// Which transition model the controller differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Surrogate {
    /// The trained network.
    Pinn,
    /// RK4 on the nominal plant (diagnostic reference).
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedLoopSection {
    pub t_final: f64,
    pub gain_mode: GainMode,
    pub noise_level: f64,
    pub disturbances: Vec<Disturbance>,
    pub substeps: usize,
    pub surrogate: Surrogate,
    /// Band for the per-step settling times reported in the summary.
    pub segment_band: f64,
}

impl Default for ClosedLoopSection {
    fn default() -> Self {
        Self {
            t_final: 60.0,
            gain_mode: GainMode::Adaptive,
            noise_level: 0.03,
            disturbances: Vec::new(),
            substeps: 20,
            surrogate: Surrogate::Pinn,
            segment_band: 0.02,
        }
    }
}

/// Diagonal cost weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsSection {
    pub q: Vec<f64>,
    pub q_terminal: Vec<f64>,
    pub r: Vec<f64>,
    pub mu: f64,
}

impl Default for WeightsSection {
    fn default() -> Self {
        Self { q: vec![1000.0, 1.0], q_terminal: Vec::new(), r: vec![0.01], mu: 1.0 }
    }
}

impl WeightsSection {
    pub fn to_weights(&self) -> CostWeights {
        let mut w = CostWeights::diagonal(&self.q, &self.r, self.mu);
        if !self.q_terminal.is_empty() {
            let n = self.q_terminal.len();
            w.q_terminal = vec![0.0; n * n];
            for (i, v) in self.q_terminal.iter().enumerate() {
                w.q_terminal[i * n + i] = *v;
            }
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfCheckSection {
    /// Largest tolerated single-interval MAE of the surrogate against RK4.
    pub model_mae: f64,
    /// Relative tolerance of the loss-gradient finite-difference check.
    pub gradient_rel: f64,
}

impl Default for SelfCheckSection {
    fn default() -> Self {
        Self { model_mae: 1e-2, gradient_rel: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub plant: Plant,
    /// Factors applied to the simulated plant only.
    pub mismatch: Mismatch,
    pub dataset: DatasetSection,
    pub network: NetworkSection,
    pub train: TrainConfig,
    pub validation: ValidationSpec,
    pub closed_loop: ClosedLoopSection,
    pub controller: ControllerSettings,
    pub weights: WeightsSection,
    pub gain_bounds: Bounds,
    pub x0: Vec<f64>,
    pub reference: ReferenceSignal,
    pub frequency_grid: FrequencyGrid,
    pub self_check: SelfCheckSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            plant: Plant::Msd(MsdParams::default()),
            mismatch: Mismatch::default(),
            dataset: DatasetSection::default(),
            network: NetworkSection::default(),
            train: TrainConfig::default(),
            validation: ValidationSpec::default(),
            closed_loop: ClosedLoopSection::default(),
            controller: ControllerSettings::default(),
            weights: WeightsSection::default(),
            gain_bounds: Bounds::new(&[0.0; 3], &[5.0; 3]),
            x0: vec![-0.7, 0.0],
            reference: ReferenceSignal::new(vec![
                ReferencePiece { time: 0.0, state: vec![0.0, 0.0] },
                ReferencePiece { time: 20.0, state: vec![0.3, 0.0] },
                ReferencePiece { time: 40.0, state: vec![-0.5, 0.0] },
            ])
            .expect("default reference is valid"),
            frequency_grid: FrequencyGrid::default(),
            self_check: SelfCheckSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate().map_err(|e| match e {
            Error::Dimension(m) => Error::Config(m),
            e => e,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The resolved configuration, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.plant.state_dim(), self.plant.input_dim());
        self.plant.validate()?;
        self.dataset_config()?.validate()?;
        if self.network.hidden.is_empty() || self.network.hidden.contains(&0) {
            return Err(Error::Config("network.hidden needs at least one positive width".into()));
        }
        self.train.validate()?;
        self.closed_loop().validate(m)?;
        if !(self.closed_loop.segment_band > 0.0) {
            return Err(Error::Config("closed_loop.segment_band must be positive".into()));
        }
        ensure_dim("weights.q", n, self.weights.q.len())?;
        if !self.weights.q_terminal.is_empty() {
            ensure_dim("weights.q_terminal", n, self.weights.q_terminal.len())?;
        }
        ensure_dim("weights.r", m, self.weights.r.len())?;
        self.weights.to_weights().validate(n, m)?;
        let bounds = self.bounds()?;
        ensure_dim("gain_bounds", self.controller.structure.param_count(m, n), bounds.len())?;
        if let GainMode::Fixed { gains } = &self.closed_loop.gain_mode {
            ensure_dim("closed_loop.gain_mode.gains", bounds.len(), gains.len())?;
        }
        ensure_dim("x0", n, self.x0.len())?;
        ensure_dim("reference", n, self.reference.dim())?;
        self.frequency_grid.validate()?;
        if self.controller.horizon == 0 || self.controller.n_quad == 0 {
            return Err(Error::Config("controller.horizon and controller.n_quad must be >= 1".into()));
        }
        Ok(())
    }

    pub fn dataset_config(&self) -> Result<DatasetConfig> {
        Ok(DatasetConfig {
            n_data: self.dataset.n_data,
            n_phys: self.dataset.n_phys,
            dt: self.dataset.dt,
            eps: self.dataset.eps,
            state_box: self.dataset.state_box.to_box()?,
            input_box: self.dataset.input_box.to_box()?,
            seed: self.seed,
        })
    }

    pub fn closed_loop(&self) -> ClosedLoopConfig {
        ClosedLoopConfig {
            dt: self.dataset.dt,
            t_final: self.closed_loop.t_final,
            gain_mode: self.closed_loop.gain_mode.clone(),
            noise_level: self.closed_loop.noise_level,
            disturbances: self.closed_loop.disturbances.clone(),
            substeps: self.closed_loop.substeps,
            seed: self.seed,
        }
    }

    pub fn bounds(&self) -> Result<GainBounds> {
        GainBounds::new(self.gain_bounds.lower.clone(), self.gain_bounds.upper.clone())
    }

    pub fn truth(&self) -> Plant {
        self.plant.with_mismatch(&self.mismatch)
    }

    /// The manipulator defaults, for building manipulator configs in code.
    pub fn manipulator() -> Self {
        Self {
            plant: Plant::Manipulator(ManipulatorParams::default()),
            dataset: DatasetSection {
                state_box: Bounds::new(&[-2.5, -2.5, -4.0, -4.0], &[2.5, 2.5, 4.0, 4.0]),
                input_box: Bounds::new(&[-0.48, -0.48], &[0.48, 0.48]),
                ..DatasetSection::default()
            },
            network: NetworkSection { hidden: vec![64, 64, 64, 64] },
            closed_loop: ClosedLoopSection { t_final: 40.0, noise_level: 0.0, ..ClosedLoopSection::default() },
            weights: WeightsSection { q: vec![100.0, 100.0, 0.01, 0.01], q_terminal: Vec::new(), r: vec![0.01, 0.01], mu: 1.0 },
            gain_bounds: Bounds::new(&[0.0, 0.0, -3.0, -3.0, 0.0, 0.0], &[3.0; 6]),
            x0: vec![-2.0, 1.5, 0.0, 0.0],
            reference: ReferenceSignal::constant(vec![0.0; 4]),
            ..Self::default()
        }
    }
}
