//! End-to-end runs shared by the command-line tool and the acceptance suite.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::controller::{CavController, ControllerError, CostWeights, DeepLccController, MpcController, StageConstraints, StageCost};
use crate::datamat::{partition, required_order, BlockMatrixSet, DatamatError, ExcitationCertificate, MatrixKind};
use crate::model::{build_continuous, discretize, linearize, Equilibrium, FleetTopology, LinearDiscreteModel, ModelError};
use crate::privacy::{mask_dataset, Exchange, FleetMasks, MaskedDeepLcc, PrivacyError};
use crate::seed::{stream_rng, Stream};
use crate::sim::{collect_data, metrics, simulate, HeadProfile, MetricsReport, Plant, RunLog, SimError, TrajectoryRecord};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Data(#[from] DatamatError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("data-driven mode needs {need} data columns but the dataset yields {have}")]
    TooFewColumns { have: usize, need: usize },
    #[error("mode {0} needs offline data")]
    MissingData(Mode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Deeplcc,
    Masked,
    Mpc,
    Hdv,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Deeplcc, Mode::Masked, Mode::Mpc, Mode::Hdv];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Deeplcc => "deeplcc",
            Mode::Masked => "masked",
            Mode::Mpc => "mpc",
            Mode::Hdv => "hdv",
        }
    }

    pub fn needs_data(self) -> bool {
        matches!(self, Mode::Deeplcc | Mode::Masked)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| format!("unknown mode `{s}` (deeplcc, masked, mpc, hdv)"))
    }
}

/// Configuration resolved into model objects.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub fleet: FleetTopology,
    pub eq: Equilibrium,
    pub masks: FleetMasks,
    pub weights: CostWeights,
}

impl Context {
    pub fn new(cfg: &RunConfig) -> Result<Self, ExperimentError> {
        cfg.validate()?;
        let fleet = cfg.fleet()?;
        let eq = cfg.equilibrium()?;
        let masks = cfg.masks(&fleet)?;
        let weights = CostWeights::new(&fleet, &cfg.controller);
        Ok(Self { cfg: cfg.clone(), fleet, eq, masks, weights })
    }

    pub fn plant(&self) -> Plant<'_> {
        Plant { fleet: &self.fleet, ovm: &self.cfg.ovm, eq: &self.eq, noise: self.cfg.noise, settings: self.cfg.simulation }
    }

    pub fn profile(&self) -> Result<HeadProfile, ExperimentError> {
        Ok(self.cfg.scenario.profile(&self.cfg.base_dir)?)
    }

    /// Discretized linearization used by the model-based baseline.
    pub fn linear_model(&self) -> Result<LinearDiscreteModel, ExperimentError> {
        let lin = linearize(&self.cfg.ovm, &self.eq)?;
        Ok(discretize(&build_continuous(&self.fleet, &lin), self.cfg.simulation.dt)?)
    }

    /// Excitation order certified at collection; covers the masked problem's extra row.
    pub fn excitation_order(&self) -> usize {
        let c = &self.cfg.controller;
        required_order(MatrixKind::Hankel, self.fleet.n(), c.t_ini, c.horizon, true)
    }

    /// Offline data with enough samples for the configured matrix and column count.
    pub fn collect(&self) -> Result<(TrajectoryRecord, ExcitationCertificate), ExperimentError> {
        self.collect_samples(self.cfg.samples())
    }

    pub fn collect_samples(&self, samples: usize) -> Result<(TrajectoryRecord, ExcitationCertificate), ExperimentError> {
        let mut ex = stream_rng(self.cfg.seed, Stream::Excitation);
        let mut noise = stream_rng(self.cfg.seed, Stream::CollectionNoise);
        Ok(collect_data(&self.plant(), &self.cfg.data.excitation, samples, self.excitation_order(), &mut ex, &mut noise)?)
    }

    /// Block matrices with exactly the configured column count.
    pub fn blocks(&self, record: &TrajectoryRecord) -> Result<BlockMatrixSet, ExperimentError> {
        let c = &self.cfg.controller;
        let blocks = partition(c.matrix_kind, &record.u, &record.eps, &record.y, c.t_ini, c.horizon)?;
        if blocks.cols < self.cfg.data.columns {
            return Err(ExperimentError::TooFewColumns { have: blocks.cols, need: self.cfg.data.columns });
        }
        Ok(blocks.truncated(self.cfg.data.columns))
    }

    pub fn deeplcc(&self, record: &TrajectoryRecord) -> Result<DeepLccController, ExperimentError> {
        let c = &self.cfg.controller;
        let blocks = self.blocks(record)?;
        let cons = StageConstraints::plain(&self.fleet, c);
        Ok(DeepLccController::new(&blocks, &StageCost::plain(&self.weights), &cons, c, c.ones_row, DVector::zeros(self.fleet.m()))?)
    }

    /// `record` holds true data; the central unit only sees its masked image.
    pub fn masked(&self, record: &TrajectoryRecord) -> Result<MaskedDeepLcc, ExperimentError> {
        let blocks = self.blocks(&mask_dataset(record, &self.masks))?;
        Ok(MaskedDeepLcc::new(&blocks, &self.fleet, self.masks.clone(), &self.cfg.controller, self.cfg.privacy.constraints)?)
    }

    pub fn mpc(&self) -> Result<MpcController, ExperimentError> {
        let cons = StageConstraints::plain(&self.fleet, &self.cfg.controller);
        Ok(MpcController::new(&self.linear_model()?, &self.weights, &cons, &self.cfg.controller)?)
    }

    /// Closed loop under `controller` (all followers human-driven when `None`).
    pub fn simulate(&self, controller: Option<&mut dyn CavController>) -> Result<RunLog, ExperimentError> {
        let mut rng = stream_rng(self.cfg.seed, Stream::PlantNoise);
        Ok(simulate(&self.plant(), &self.profile()?, self.cfg.steps(), controller, &mut rng)?)
    }

    /// Runs one mode; data-driven modes need `record`.
    pub fn run(&self, mode: Mode, record: Option<&TrajectoryRecord>) -> Result<RunOutcome, ExperimentError> {
        let need_record = || record.ok_or(ExperimentError::MissingData(mode));
        let (label, log, exchanges, rho, decision_dim) = match mode {
            Mode::Hdv => ("all-hdv".to_string(), self.simulate(None)?, None, None, 0),
            Mode::Deeplcc => {
                let mut c = self.deeplcc(need_record()?)?;
                let log = self.simulate(Some(&mut c))?;
                (c.name().to_string(), log, None, None, c.decision_dim())
            }
            Mode::Masked => {
                let mut c = self.masked(need_record()?)?;
                let log = self.simulate(Some(&mut c))?;
                let kind = self.cfg.controller.matrix_kind.name();
                (format!("masked-deeplcc-{kind}"), log, Some(c.exchanges().to_vec()), Some(c.rho()), c.decision_dim())
            }
            Mode::Mpc => {
                let mut c = self.mpc()?;
                let log = self.simulate(Some(&mut c))?;
                (c.name().to_string(), log, None, None, c.decision_dim())
            }
        };
        let metrics = metrics(&log, &self.weights);
        Ok(RunOutcome { mode, label, log, metrics, exchanges, rho, decision_dim })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub mode: Mode,
    pub label: String,
    pub log: RunLog,
    pub metrics: MetricsReport,
    /// Masked traffic seen by the central unit (masked mode only).
    pub exchanges: Option<Vec<Exchange>>,
    /// Objective offset between unmasked and masked problems (masked mode only).
    pub rho: Option<f64>,
    pub decision_dim: usize,
}

impl RunOutcome {
    /// Steps whose solver result was not certified optimal.
    pub fn flagged_steps(&self) -> usize {
        self.log.diagnostics.iter().filter(|d| d.flagged).count()
    }

    pub fn solve_times(&self) -> (f64, f64) {
        solve_time_stats(&self.log)
    }
}

/// Mean and max solve time in seconds over steps that ran the solver.
pub fn solve_time_stats(log: &RunLog) -> (f64, f64) {
    let times: Vec<f64> = log.diagnostics.iter().filter(|d| d.status.is_some()).map(|d| d.solve_time.as_secs_f64()).collect();
    if times.is_empty() {
        return (0.0, 0.0);
    }
    (times.iter().sum::<f64>() / times.len() as f64, times.iter().cloned().fold(0.0, f64::max))
}

/// One row of a comparison against the first entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub total_fuel: f64,
    pub aave: f64,
    pub fuel_delta_pct: f64,
    pub aave_delta_pct: f64,
}

fn pct(value: f64, base: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        100.0 * (value - base) / base
    }
}

/// Percentage changes of fuel and AAVE relative to the first entry.
pub fn compare(entries: &[(String, f64, f64)]) -> Vec<CompareRow> {
    let Some(&(_, f0, a0)) = entries.first() else { return Vec::new() };
    entries
        .iter()
        .map(|(label, f, a)| CompareRow {
            label: label.clone(),
            total_fuel: *f,
            aave: *a,
            fuel_delta_pct: pct(*f, f0),
            aave_delta_pct: pct(*a, a0),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub kind: MatrixKind,
    pub columns: usize,
    pub seed: u64,
    pub cost: f64,
}

/// Closed-loop quadratic cost of plain DeeP-LCC for every column count and
/// seed. Data are collected once per seed and truncated.
pub fn column_sweep(cfg: &RunConfig, kind: MatrixKind, columns: &[usize], seeds: &[u64]) -> Result<Vec<SweepRow>, ExperimentError> {
    let max_cols = columns.iter().copied().max().unwrap_or(0);
    let mut rows = Vec::with_capacity(columns.len() * seeds.len());
    for &seed in seeds {
        let mut base = cfg.clone();
        base.seed = seed;
        base.controller.matrix_kind = kind;
        base.data.columns = max_cols;
        let ctx = Context::new(&base)?;
        let (record, _) = ctx.collect()?;
        for &cols in columns {
            let mut c = base.clone();
            c.data.columns = cols;
            let ctx = Context::new(&c)?;
            let out = ctx.run(Mode::Deeplcc, Some(&record))?;
            rows.push(SweepRow { kind, columns: cols, seed, cost: out.metrics.quadratic_cost });
        }
    }
    Ok(rows)
}
