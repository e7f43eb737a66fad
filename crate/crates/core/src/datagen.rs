//! Latin hypercube designs over `(t, x, u)` and the two training sets.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{fmt17, integrate_held, BoxSet, ControlInput, Plant, PlantState};
use crate::error::{Error, Result};

/// Name of the generator recorded in metadata sidecars.
pub const GENERATOR: &str = "ChaCha8 (rand_chacha 0.9)";

/// RNG streams, so that each consumer of a seed draws independently.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const PHYS: u64 = 2;
    pub const VALIDATION: u64 = 3;
    pub const INIT: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const GAINS: u64 = 6;
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A Latin hypercube design: per dimension, a permutation of the `n` strata.
#[derive(Debug, Clone)]
pub struct Strata {
    n: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    cells: Vec<Vec<usize>>,
    open_left: bool,
}

impl Strata {
    pub fn new<R: Rng + ?Sized>(bounds: &BoxSet, n: usize, open_left: bool, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("LHS needs n >= 1".into()));
        }
        if bounds.lower.iter().zip(&bounds.upper).any(|(l, u)| !(u > l)) {
            return Err(Error::Config("LHS box is degenerate".into()));
        }
        let cells = (0..bounds.dim())
            .map(|_| {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(rng);
                p
            })
            .collect();
        Ok(Self { n, lower: bounds.lower.clone(), upper: bounds.upper.clone(), cells, open_left })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Draws point `i` uniformly inside its cell. With `open_left` the
    /// offset lies in `(0, 1]` instead of `[0, 1)`.
    pub fn draw<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> Vec<f64> {
        (0..self.lower.len())
            .map(|d| {
                let r: f64 = rng.random();
                let off = if self.open_left { 1.0 - r } else { r };
                let frac = (self.cells[d][i] as f64 + off) / self.n as f64;
                self.lower[d] + (self.upper[d] - self.lower[d]) * frac
            })
            .collect()
    }
}

/// `n` Latin hypercube points in `bounds`.
pub fn lhs_sample<R: Rng + ?Sized>(bounds: &BoxSet, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let strata = Strata::new(bounds, n, false, rng)?;
    Ok((0..n).map(|i| strata.draw(i, rng)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSample {
    pub t: f64,
    pub x0: PlantState,
    pub xf: PlantState,
    pub u: ControlInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysSample {
    pub t: f64,
    pub x: PlantState,
    pub u: ControlInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_data: usize,
    pub n_phys: usize,
    /// Sampling interval, s.
    pub dt: f64,
    /// Extra training horizon beyond `dt`, s.
    pub eps: f64,
    pub state_box: BoxSet,
    pub input_box: BoxSet,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn horizon(&self) -> f64 {
        self.dt + self.eps
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_data == 0 || self.n_phys == 0 {
            return Err(Error::Config("n_data and n_phys must be >= 1".into()));
        }
        if !(self.dt > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("dt and eps must be positive".into()));
        }
        Ok(())
    }

    /// The joint `(t, x, u)` box with `t` in `[0, dt + eps]`.
    fn joint_box(&self) -> BoxSet {
        let mut lower = vec![0.0];
        lower.extend(&self.state_box.lower);
        lower.extend(&self.input_box.lower);
        let mut upper = vec![self.horizon()];
        upper.extend(&self.state_box.upper);
        upper.extend(&self.input_box.upper);
        BoxSet { lower, upper }
    }
}

/// RK4 step count for a rollout of length `t`: steps no longer than
/// `1e-3 * horizon`, which keeps the self-convergence error far below 1e-8
/// for both plants.
pub fn oracle_steps(t: f64, horizon: f64) -> usize {
    (t / (1e-3 * horizon)).ceil().max(1.0) as usize
}

pub fn oracle_rollout(plant: &Plant, x0: &[f64], u: &[f64], t: f64, steps: usize) -> Result<PlantState> {
    integrate_held(|x: &[f64], u: &[f64], out: &mut [f64]| plant.rhs_generic(x, u, out), x0, u, t, steps)
}

fn split(point: &[f64], n: usize) -> (f64, Vec<f64>, Vec<f64>) {
    (point[0], point[1..1 + n].to_vec(), point[1 + n..].to_vec())
}

/// Data set with `round` selecting an independent redraw (dataset regeneration).
/// Returns the samples and the number of rejected rollouts.
pub fn build_data_set(plant: &Plant, cfg: &DatasetConfig, round: u64) -> Result<(Vec<DataSample>, usize)> {
    cfg.validate()?;
    let n = plant.state_dim();
    let mut rng = rng_for(cfg.seed.wrapping_add(round.wrapping_mul(0x9E37_79B9_7F4A_7C15)), stream::DATA);
    let strata = Strata::new(&cfg.joint_box(), cfg.n_data, true, &mut rng)?;
    let mut out = Vec::with_capacity(cfg.n_data);
    let mut rejected = 0;
    for i in 0..cfg.n_data {
        let mut attempts = 0;
        loop {
            let (t, x0, u) = split(&strata.draw(i, &mut rng), n);
            match oracle_rollout(plant, &x0, &u, t, oracle_steps(t, cfg.horizon())) {
                Ok(xf) => {
                    out.push(DataSample { t, x0, xf, u });
                    break;
                }
                Err(Error::NonFinite(_)) | Err(Error::Singular(_)) if attempts < 100 => {
                    attempts += 1;
                    rejected += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok((out, rejected))
}

/// Collocation points over `[0, dt + eps] x X x U`; no integration.
pub fn build_phys_set(plant: &Plant, cfg: &DatasetConfig, round: u64) -> Result<Vec<PhysSample>> {
    cfg.validate()?;
    let n = plant.state_dim();
    let mut rng = rng_for(cfg.seed.wrapping_add(round.wrapping_mul(0x9E37_79B9_7F4A_7C15)), stream::PHYS);
    Ok(lhs_sample(&cfg.joint_box(), cfg.n_phys, &mut rng)?
        .into_iter()
        .map(|p| {
            let (t, x, u) = split(&p, n);
            PhysSample { t, x, u }
        })
        .collect())
}

pub fn write_data_csv(path: &Path, samples: &[DataSample]) -> Result<()> {
    let (n, m) = samples.first().map_or((0, 0), |s| (s.x0.len(), s.u.len()));
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x0_{i}")));
    header.extend((1..=n).map(|i| format!("xf_{i}")));
    header.extend((1..=m).map(|i| format!("u_{i}")));
    writeln!(w, "{}", header.join(","))?;
    for s in samples {
        let row: Vec<String> = std::iter::once(s.t).chain(s.x0.iter().copied()).chain(s.xf.iter().copied()).chain(s.u.iter().copied()).map(fmt17).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_phys_csv(path: &Path, samples: &[PhysSample]) -> Result<()> {
    let (n, m) = samples.first().map_or((0, 0), |s| (s.x.len(), s.u.len()));
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.extend((1..=m).map(|i| format!("u_{i}")));
    writeln!(w, "{}", header.join(","))?;
    for s in samples {
        let row: Vec<String> = std::iter::once(s.t).chain(s.x.iter().copied()).chain(s.u.iter().copied()).map(fmt17).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct DatasetMetadata<'a> {
    pub config: &'a DatasetConfig,
    pub plant: &'a Plant,
    pub seed: u64,
    pub generator: &'static str,
    pub rejected_rollouts: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::MsdParams;

    #[test]
    fn one_point_per_stratum_1d() {
        let b = BoxSet::new(vec![0.0], vec![1.0]).unwrap();
        let pts = lhs_sample(&b, 4, &mut rng_for(3, 0)).unwrap();
        let mut cells: Vec<usize> = pts.iter().map(|p| (p[0] * 4.0).floor() as usize).collect();
        cells.sort();
        assert_eq!(cells, vec![0, 1, 2, 3]);
    }

    #[test]
    fn deterministic_under_seed() {
        let b = BoxSet::new(vec![-1.0, 0.0], vec![1.0, 3.0]).unwrap();
        assert_eq!(lhs_sample(&b, 50, &mut rng_for(9, 1)).unwrap(), lhs_sample(&b, 50, &mut rng_for(9, 1)).unwrap());
        assert_ne!(lhs_sample(&b, 50, &mut rng_for(9, 1)).unwrap(), lhs_sample(&b, 50, &mut rng_for(10, 1)).unwrap());
    }

    #[test]
    fn rejects_empty_and_degenerate() {
        let b = BoxSet::new(vec![0.0], vec![1.0]).unwrap();
        assert!(lhs_sample(&b, 0, &mut rng_for(0, 0)).is_err());
        let d = BoxSet::new(vec![0.0], vec![0.0]).unwrap();
        assert!(lhs_sample(&d, 3, &mut rng_for(0, 0)).is_err());
    }

    fn msd_cfg() -> DatasetConfig {
        DatasetConfig {
            n_data: 64,
            n_phys: 100,
            dt: 0.2,
            eps: 0.05,
            state_box: BoxSet::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap(),
            input_box: BoxSet::new(vec![-1.0], vec![1.0]).unwrap(),
            seed: 5,
        }
    }

    #[test]
    fn data_set_shapes_and_time_range() {
        let plant = Plant::Msd(MsdParams::default());
        let cfg = msd_cfg();
        let (data, rejected) = build_data_set(&plant, &cfg, 0).unwrap();
        assert_eq!(rejected, 0);
        assert_eq!(data.len(), 64);
        for s in &data {
            assert!(s.t > 0.0 && s.t <= 0.25);
            assert!(cfg.state_box.contains(&s.x0) && cfg.input_box.contains(&s.u));
        }
        let phys = build_phys_set(&plant, &cfg, 0).unwrap();
        assert_eq!(phys.len(), 100);
        assert!(phys.iter().all(|p| p.t >= 0.0 && p.t <= 0.25 && cfg.state_box.contains(&p.x)));
        // a new round is a different draw
        assert_ne!(build_phys_set(&plant, &cfg, 1).unwrap(), phys);
    }

    #[test]
    fn short_times_stay_near_start() {
        let plant = Plant::Msd(MsdParams::default());
        let x0 = [0.4, -0.3];
        let t = 1e-6;
        let xf = oracle_rollout(&plant, &x0, &[0.7], t, oracle_steps(t, 0.25)).unwrap();
        assert!(xf.iter().zip(&x0).all(|(a, b)| (a - b).abs() < 1e-5));
    }
}
