//! Nonlinear platoon simulation, head-vehicle scenarios, offline data
//! collection and the fuel / velocity-error metrics.
//!
//! The plant integrates with explicit Euler at the controller's sampling
//! interval. HDVs follow the OVM plus a uniform acceleration disturbance;
//! CAVs apply whatever their controller commands; the head vehicle tracks its
//! scenario profile exactly.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{CavController, ControllerError, CostWeights, Observation, StepDiagnostics};
use crate::datamat::{is_hankel_exciting, DatamatError, ExcitationCertificate, Series, DEFAULT_RANK_TOL};
use crate::model::{ovm_acceleration, Equilibrium, FleetTopology, LinearDiscreteModel, OvmParams};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("controller fault at step {step}: {source}")]
    ControllerFault { step: usize, source: ControllerError },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("cannot read replay file {path}: {reason}")]
    Replay { path: PathBuf, reason: String },
    #[error("excitation certificate failed: rank {} of {}", .0.rank, .0.required)]
    ExcitationFailure(ExcitationCertificate),
    #[error(transparent)]
    Data(#[from] DatamatError),
}

/// Head-vehicle velocity profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioKind {
    /// Piecewise-linear velocity through `(time s, velocity m/s)` breakpoints,
    /// held constant after the last one.
    DriveCycle { breakpoints: Vec<(f64, f64)> },
    /// Cruise, brake hard down to `low_speed`, hold until `recover_at`, then
    /// accelerate back to cruise at `recovery_rate`.
    EmergencyBrake {
        cruise_speed: f64,
        brake_at: f64,
        deceleration: f64,
        low_speed: f64,
        recover_at: f64,
        recovery_rate: f64,
    },
    /// Columns `t, v_head` from a CSV file, linearly interpolated.
    ReplayCsv { path: PathBuf },
}

// Unknown keys are rejected by the flattened kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub duration: f64,
    #[serde(flatten)]
    pub kind: ScenarioKind,
}

impl ScenarioSpec {
    pub fn emergency_brake() -> Self {
        Self {
            duration: 30.0,
            kind: ScenarioKind::EmergencyBrake {
                cruise_speed: 15.0,
                brake_at: 3.0,
                deceleration: -5.0,
                low_speed: 5.0,
                recover_at: 8.0,
                recovery_rate: 1.0,
            },
        }
    }

    pub fn drive_cycle() -> Self {
        Self {
            duration: 60.0,
            kind: ScenarioKind::DriveCycle {
                breakpoints: vec![
                    (0.0, 15.0),
                    (4.0, 15.0),
                    (8.0, 19.0),
                    (14.0, 19.0),
                    (22.0, 11.0),
                    (28.0, 11.0),
                    (32.0, 15.0),
                    (38.0, 15.0),
                    (41.0, 18.0),
                    (45.0, 18.0),
                    (51.0, 12.0),
                    (54.0, 12.0),
                    (57.0, 15.0),
                ],
            },
        }
    }

    pub fn validate(&self, a_min: f64) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration {} must be positive", self.duration));
        }
        match &self.kind {
            ScenarioKind::DriveCycle { breakpoints } => {
                if breakpoints.is_empty() {
                    return bad("drive cycle needs at least one breakpoint".into());
                }
                if breakpoints.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return bad("drive cycle breakpoint times must increase".into());
                }
                if breakpoints.iter().any(|&(_, v)| v < 0.0) {
                    return bad("drive cycle velocities must be non-negative".into());
                }
            }
            ScenarioKind::EmergencyBrake { cruise_speed, brake_at, deceleration, low_speed, recover_at, recovery_rate } => {
                if !(*deceleration < 0.0 && *deceleration >= a_min) {
                    return bad(format!("brake deceleration {deceleration} outside [{a_min}, 0)"));
                }
                if !(0.0 <= *low_speed && low_speed < cruise_speed && *recovery_rate > 0.0 && *brake_at >= 0.0) {
                    return bad("brake speeds and rates are inconsistent".into());
                }
                let stop = brake_at + (low_speed - cruise_speed) / deceleration;
                if *recover_at < stop {
                    return bad(format!("recovery at {recover_at} s precedes the end of braking at {stop} s"));
                }
            }
            ScenarioKind::ReplayCsv { .. } => {}
        }
        Ok(())
    }

    /// Resolves the profile, reading replay files relative to `base`.
    pub fn profile(&self, base: &Path) -> Result<HeadProfile, SimError> {
        Ok(match &self.kind {
            ScenarioKind::DriveCycle { breakpoints } => HeadProfile::Table(breakpoints.clone()),
            ScenarioKind::EmergencyBrake { cruise_speed, brake_at, deceleration, low_speed, recover_at, recovery_rate } => {
                HeadProfile::Brake {
                    cruise: *cruise_speed,
                    brake_at: *brake_at,
                    decel: *deceleration,
                    low: *low_speed,
                    recover_at: *recover_at,
                    rate: *recovery_rate,
                }
            }
            ScenarioKind::ReplayCsv { path } => {
                let full = if path.is_absolute() { path.clone() } else { base.join(path) };
                HeadProfile::Table(read_replay(&full)?)
            }
        })
    }
}

fn read_replay(path: &Path) -> Result<Vec<(f64, f64)>, SimError> {
    let err = |reason: String| SimError::Replay { path: path.to_path_buf(), reason };
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(|e| err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| err(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name).ok_or_else(|| err(format!("missing column `{name}`")));
    let (ti, vi) = (col("t")?, col("v_head")?);
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let parse = |i: usize| rec.get(i).unwrap_or("").trim().parse::<f64>().map_err(|e| err(format!("line {}: {e}", out.len() + 2)));
        out.push((parse(ti)?, parse(vi)?));
    }
    if out.is_empty() {
        return Err(err("no samples".into()));
    }
    if out.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(err("time column must increase".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadProfile {
    Table(Vec<(f64, f64)>),
    Brake { cruise: f64, brake_at: f64, decel: f64, low: f64, recover_at: f64, rate: f64 },
}

impl HeadProfile {
    pub fn velocity(&self, t: f64) -> f64 {
        match self {
            HeadProfile::Table(pts) => {
                let last = pts[pts.len() - 1];
                if t <= pts[0].0 {
                    return pts[0].1;
                }
                if t >= last.0 {
                    return last.1;
                }
                let k = pts.partition_point(|p| p.0 <= t);
                let (a, b) = (pts[k - 1], pts[k]);
                a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0)
            }
            &HeadProfile::Brake { cruise, brake_at, decel, low, recover_at, rate } => {
                if t <= brake_at {
                    cruise
                } else if t <= recover_at {
                    (cruise + decel * (t - brake_at)).max(low)
                } else {
                    (low + rate * (t - recover_at)).min(cruise)
                }
            }
        }
    }
}

/// Uniform additive disturbance on HDV accelerations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub half_width: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { half_width: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    pub dt: f64,
    /// Physical acceleration limits of every follower.
    pub accel_bounds: (f64, f64),
    /// Controlled runs re-center the operating point on the mean head
    /// velocity of this many past steps; 0 keeps it fixed.
    pub equilibrium_window: usize,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self { dt: 0.05, accel_bounds: (-5.0, 2.0), equilibrium_window: 15 }
    }
}

/// Positions and velocities of the head vehicle (index 0) and all followers.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub p: DVector<f64>,
    pub v: DVector<f64>,
}

impl PlantState {
    /// Every vehicle at `(s*, v*)` with the head vehicle at position 0.
    pub fn at_equilibrium(n: usize, eq: &Equilibrium) -> Self {
        Self {
            p: DVector::from_fn(n + 1, |i, _| -(i as f64) * eq.s_star),
            v: DVector::from_element(n + 1, eq.v_star),
        }
    }

    pub fn spacing(&self, i: usize) -> f64 {
        self.p[i - 1] - self.p[i]
    }

    /// Error state `(s_i - s*, v_i - v*)` stacked over followers.
    pub fn error_state(&self, eq: &Equilibrium) -> DVector<f64> {
        let n = self.p.len() - 1;
        DVector::from_fn(2 * n, |k, _| {
            let i = k / 2 + 1;
            if k % 2 == 0 {
                self.spacing(i) - eq.s_star
            } else {
                self.v[i] - eq.v_star
            }
        })
    }
}

/// Input, head-velocity-error and output sequences of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub u: Series,
    pub eps: Series,
    pub y: Series,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn input_excitation(&self, order: usize) -> Result<ExcitationCertificate, SimError> {
        Ok(is_hankel_exciting(&self.u.stack(&self.eps)?, order, DEFAULT_RANK_TOL))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub step: usize,
    pub vehicle: usize,
}

/// Per-step history of a closed-loop run.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub dt: f64,
    pub fleet: FleetTopology,
    pub equilibrium: Equilibrium,
    /// Operating-point velocity the errors of each step refer to.
    pub v_star: Vec<f64>,
    pub t: Vec<f64>,
    pub p: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    /// Applied accelerations of every vehicle, head included.
    pub a: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub eps: Vec<f64>,
    pub y: Vec<DVector<f64>>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub collisions: Vec<CollisionEvent>,
}

impl RunLog {
    pub fn steps(&self) -> usize {
        self.t.len()
    }

    pub fn fuel_rate_total(&self, k: usize) -> f64 {
        (2..=self.fleet.n()).map(|i| fuel_rate(self.v[k][i], self.a[k][i])).sum()
    }
}

/// Fuel rate (mL/s) of a vehicle at speed `v` and acceleration `a`.
pub fn fuel_rate(v: f64, a: f64) -> f64 {
    let r = 0.333 + 0.00108 * v * v + 1.2 * a;
    if r <= 0.0 {
        return 0.444;
    }
    let mut f = 0.444 + 0.090 * r * v;
    if a > 0.0 {
        f += 0.054 * a * a * v;
    }
    f
}

/// Head-vehicle speeds at or below this are excluded from the velocity error.
pub const AAVE_MIN_HEAD_SPEED: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub total_fuel: f64,
    /// Fuel of vehicles `2..=n`, in order.
    pub per_vehicle_fuel: Vec<f64>,
    pub aave: f64,
    pub aave_excluded_steps: usize,
    pub quadratic_cost: f64,
    pub collision_events: usize,
    pub duration: f64,
}

/// Rectangle-rule fuel of vehicles `2..=n`.
pub fn total_fuel(log: &RunLog) -> (f64, Vec<f64>) {
    let per: Vec<f64> = (2..=log.fleet.n())
        .map(|i| (0..log.steps()).map(|k| fuel_rate(log.v[k][i], log.a[k][i])).sum::<f64>() * log.dt)
        .collect();
    (per.iter().sum(), per)
}

/// Mean of `|v_i - v_0| / v_0` over steps and followers; returns the count of excluded steps too.
pub fn aave(log: &RunLog) -> (f64, usize) {
    aave_of(&log.v)
}

/// [`aave`] over per-step velocity vectors with the head vehicle first.
pub fn aave_of(velocities: &[DVector<f64>]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    let mut followers = 0usize;
    for v in velocities {
        if v[0] <= AAVE_MIN_HEAD_SPEED {
            excluded += 1;
            continue;
        }
        followers = v.len() - 1;
        sum += v.iter().skip(1).map(|vi| (vi - v[0]).abs() / v[0]).sum::<f64>();
        used += 1;
    }
    let value = if used == 0 || followers == 0 { 0.0 } else { sum / (used * followers) as f64 };
    (value, excluded)
}

/// Sum of `y'Qy + u'Ru` over the run.
pub fn quadratic_cost(log: &RunLog, weights: &CostWeights) -> f64 {
    log.y.iter().zip(&log.u).map(|(y, u)| weights.stage(y, u)).sum()
}

pub fn metrics(log: &RunLog, weights: &CostWeights) -> MetricsReport {
    let (total, per) = total_fuel(log);
    let (aave, excluded) = aave(log);
    MetricsReport {
        total_fuel: total,
        per_vehicle_fuel: per,
        aave,
        aave_excluded_steps: excluded,
        quadratic_cost: quadratic_cost(log, weights),
        collision_events: log.collisions.len(),
        duration: log.steps() as f64 * log.dt,
    }
}

/// Everything the plant needs besides the controller.
#[derive(Debug, Clone)]
pub struct Plant<'a> {
    pub fleet: &'a FleetTopology,
    pub ovm: &'a OvmParams,
    pub eq: &'a Equilibrium,
    pub noise: NoiseSpec,
    pub settings: SimSettings,
}

impl Plant<'_> {
    /// Advances one Euler step; returns the accelerations used.
    ///
    /// `cav_input` is `None` when the automated vehicles also follow the OVM.
    /// One noise sample is drawn per follower every step so that runs with
    /// different controllers see identical disturbances.
    fn advance(&self, state: &mut PlantState, head_next: f64, cav_input: Option<&DVector<f64>>, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let n = self.fleet.n();
        let dt = self.settings.dt;
        let (a_min, a_max) = self.settings.accel_bounds;
        let mut acc = DVector::zeros(n + 1);
        acc[0] = (head_next - state.v[0]) / dt;
        let mut cav_k = 0;
        for i in 1..=n {
            let noise = if self.noise.half_width > 0.0 { rng.gen_range(-self.noise.half_width..=self.noise.half_width) } else { 0.0 };
            let ovm = ovm_acceleration(self.ovm, state.spacing(i), state.v[i - 1] - state.v[i], state.v[i]);
            let a = match cav_input {
                Some(u) if self.fleet.is_cav(i) => {
                    cav_k += 1;
                    u[cav_k - 1]
                }
                _ => ovm + noise,
            };
            acc[i] = a.clamp(a_min, a_max);
        }
        for i in 0..=n {
            state.p[i] += state.v[i] * dt;
        }
        state.v[0] = head_next;
        for i in 1..=n {
            state.v[i] = (state.v[i] + acc[i] * dt).max(0.0);
        }
        acc
    }
}

/// Closed-loop run of `steps` samples. Without a controller every follower
/// behaves as an HDV.
pub fn simulate(
    plant: &Plant<'_>,
    profile: &HeadProfile,
    steps: usize,
    mut controller: Option<&mut dyn CavController>,
    rng: &mut ChaCha8Rng,
) -> Result<RunLog, SimError> {
    let n = plant.fleet.n();
    let m = plant.fleet.m();
    let dt = plant.settings.dt;
    let mut state = PlantState::at_equilibrium(n, plant.eq);
    state.v[0] = profile.velocity(0.0);
    let mut log = RunLog {
        dt,
        fleet: plant.fleet.clone(),
        equilibrium: *plant.eq,
        v_star: Vec::with_capacity(steps),
        t: Vec::with_capacity(steps),
        p: Vec::with_capacity(steps),
        v: Vec::with_capacity(steps),
        a: Vec::with_capacity(steps),
        u: Vec::with_capacity(steps),
        eps: Vec::with_capacity(steps),
        y: Vec::with_capacity(steps),
        diagnostics: Vec::with_capacity(steps),
        collisions: Vec::new(),
    };
    let mut in_collision = vec![false; n + 1];
    let window = plant.settings.equilibrium_window;
    let mut eq = *plant.eq;
    for k in 0..steps {
        let t = k as f64 * dt;
        if let Some(c) = controller.as_deref_mut().filter(|_| window > 0 && k >= window) {
            let v_hat = log.v[k - window..k].iter().map(|v| v[0]).sum::<f64>() / window as f64;
            if let Ok(next) = Equilibrium::from_velocity(plant.ovm, v_hat) {
                let (ds, dv) = (eq.s_star - next.s_star, eq.v_star - next.v_star);
                let shift = DVector::from_fn(2 * n, |r, _| if r % 2 == 0 { ds } else { dv });
                c.rebase(&plant.fleet.measure(&shift), dv);
                eq = next;
            }
        }
        let x = state.error_state(&eq);
        let y = plant.fleet.measure(&x);
        let eps = state.v[0] - eq.v_star;
        let (u, diag) = match controller.as_deref_mut() {
            Some(c) => {
                let (u, d) = c.step(&Observation { y: &y, eps, x: &x }).map_err(|source| SimError::ControllerFault { step: k, source })?;
                (Some(u), Some(d))
            }
            None => (None, None),
        };
        let p_now = state.p.clone();
        let v_now = state.v.clone();
        let acc = plant.advance(&mut state, profile.velocity(t + dt), u.as_ref(), rng);
        let applied_u = DVector::from_iterator(m, plant.fleet.cav_indices().iter().map(|&i| acc[i]));
        for i in 1..=n {
            let hit = state.spacing(i) <= 0.0;
            if hit && !in_collision[i] {
                log.collisions.push(CollisionEvent { step: k + 1, vehicle: i });
            }
            in_collision[i] = hit;
        }
        log.v_star.push(eq.v_star);
        log.t.push(t);
        log.p.push(p_now);
        log.v.push(v_now);
        log.a.push(acc);
        log.u.push(applied_u);
        log.eps.push(eps);
        log.y.push(y);
        log.diagnostics.push(diag.unwrap_or_else(|| StepDiagnostics::warmup(0)));
    }
    Ok(log)
}

/// Excitation used while collecting offline data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExcitationSpec {
    /// CAV acceleration dither `U[-w, w]` on top of OVM feedback.
    pub input_half_width: f64,
    /// Head-vehicle velocity `v* + U[-w, w]`.
    pub head_half_width: f64,
}

impl Default for ExcitationSpec {
    fn default() -> Self {
        Self { input_half_width: 1.0, head_half_width: 1.0 }
    }
}

/// Runs the plant around equilibrium with random excitation and records
/// `(u, eps, y)`. CAVs apply OVM feedback plus i.i.d. dither so spacings stay
/// bounded over long records; the recorded input is the total applied
/// acceleration. Fails when `col(u, eps)` is not Hankel exciting of `order`.
pub fn collect_data(
    plant: &Plant<'_>,
    excitation: &ExcitationSpec,
    samples: usize,
    order: usize,
    excitation_rng: &mut ChaCha8Rng,
    noise_rng: &mut ChaCha8Rng,
) -> Result<(TrajectoryRecord, ExcitationCertificate), SimError> {
    if samples == 0 {
        return Err(SimError::InvalidScenario("data collection needs at least one sample".into()));
    }
    let fleet = plant.fleet;
    let (n, m, ny) = (fleet.n(), fleet.m(), fleet.output_dim());
    let mut state = PlantState::at_equilibrium(n, plant.eq);
    let mut u = DMatrix::zeros(m, samples);
    let mut e = DMatrix::zeros(1, samples);
    let mut y = DMatrix::zeros(ny, samples);
    let draw = |rng: &mut ChaCha8Rng, w: f64| if w > 0.0 { rng.gen_range(-w..=w) } else { 0.0 };
    let mut head = plant.eq.v_star + draw(excitation_rng, excitation.head_half_width);
    state.v[0] = head;
    for k in 0..samples {
        let x = state.error_state(plant.eq);
        y.set_column(k, &fleet.measure(&x));
        e[(0, k)] = state.v[0] - plant.eq.v_star;
        let cmd = DVector::from_iterator(
            m,
            fleet.cav_indices().iter().map(|&i| {
                ovm_acceleration(plant.ovm, state.spacing(i), state.v[i - 1] - state.v[i], state.v[i])
                    + draw(excitation_rng, excitation.input_half_width)
            }),
        );
        head = plant.eq.v_star + draw(excitation_rng, excitation.head_half_width);
        let acc = plant.advance(&mut state, head, Some(&cmd), noise_rng);
        for (c, &i) in fleet.cav_indices().iter().enumerate() {
            u[(c, k)] = acc[i];
        }
    }
    let record = TrajectoryRecord { u: Series::from_matrix(u)?, eps: Series::from_matrix(e)?, y: Series::from_matrix(y)? };
    let cert = record.input_excitation(order)?;
    if !cert.exciting {
        return Err(SimError::ExcitationFailure(cert));
    }
    Ok((record, cert))
}

/// Data from the discrete linear model driven by i.i.d. uniform inputs and disturbances.
pub fn collect_linear(
    model: &LinearDiscreteModel,
    samples: usize,
    input_half_width: f64,
    eps_half_width: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryRecord, SimError> {
    let (nx, m, ny) = (model.state_dim(), model.input_dim(), model.output_dim());
    let mut x = DVector::zeros(nx);
    let mut u = DMatrix::zeros(m, samples);
    let mut e = DMatrix::zeros(1, samples);
    let mut y = DMatrix::zeros(ny, samples);
    for k in 0..samples {
        y.set_column(k, &(&model.c * &x));
        let uk = DVector::from_fn(m, |_, _| rng.gen_range(-input_half_width..=input_half_width));
        let ek = rng.gen_range(-eps_half_width..=eps_half_width);
        u.set_column(k, &uk);
        e[(0, k)] = ek;
        x = model.step(&x, &uk, ek);
    }
    Ok(TrajectoryRecord { u: Series::from_matrix(u)?, eps: Series::from_matrix(e)?, y: Series::from_matrix(y)? })
}

/// Closed loop on the discrete linear model: returns applied inputs and outputs.
pub fn simulate_linear(
    model: &LinearDiscreteModel,
    controller: &mut dyn CavController,
    x0: &DVector<f64>,
    eps: &[f64],
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>), SimError> {
    let mut x = x0.clone();
    let mut inputs = Vec::with_capacity(eps.len());
    let mut outputs = Vec::with_capacity(eps.len());
    for (k, &e) in eps.iter().enumerate() {
        let y = &model.c * &x;
        let (u, _) = controller.step(&Observation { y: &y, eps: e, x: &x }).map_err(|source| SimError::ControllerFault { step: k, source })?;
        x = model.step(&x, &u, e);
        inputs.push(u);
        outputs.push(y);
    }
    Ok((inputs, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::ControllerConfig;
    use crate::seed::{stream_rng, Stream};
    use approx::assert_relative_eq;

    #[test]
    fn fuel_examples() {
        assert_relative_eq!(fuel_rate(0.0, 0.0), 0.444, epsilon = 1e-12);
        assert_eq!(fuel_rate(20.0, -1.0), 0.444);
        let expected = 0.444 + 0.090 * 1.776 * 15.0 + 0.054 * 15.0;
        assert_relative_eq!(fuel_rate(15.0, 1.0), expected, epsilon = 1e-12);
        assert_relative_eq!(fuel_rate(15.0, 1.0), 3.6516, epsilon = 1e-12);
    }

    #[test]
    fn idle_branch_exactly_when_power_nonpositive() {
        for vi in 1..=40 {
            for ai in -50..=20 {
                let (v, a) = (vi as f64 * 0.75, ai as f64 * 0.1);
                let r = 0.333 + 0.00108 * v * v + 1.2 * a;
                assert_eq!(fuel_rate(v, a) == 0.444, r <= 0.0, "v {v} a {a}");
            }
        }
    }

    #[test]
    fn brake_profile_shape() {
        let p = ScenarioSpec::emergency_brake().profile(Path::new(".")).unwrap();
        assert_eq!(p.velocity(0.0), 15.0);
        assert_eq!(p.velocity(3.0), 15.0);
        assert_relative_eq!(p.velocity(4.0), 10.0, epsilon = 1e-12);
        assert_eq!(p.velocity(6.0), 5.0);
        assert_relative_eq!(p.velocity(10.0), 7.0, epsilon = 1e-12);
        assert_eq!(p.velocity(25.0), 15.0);
    }

    #[test]
    fn table_profile_interpolates_and_holds() {
        let p = HeadProfile::Table(vec![(0.0, 10.0), (2.0, 14.0)]);
        assert_eq!(p.velocity(-1.0), 10.0);
        assert_relative_eq!(p.velocity(0.5), 11.0);
        assert_eq!(p.velocity(5.0), 14.0);
    }

    #[test]
    fn scenario_validation() {
        let mut s = ScenarioSpec::emergency_brake();
        assert!(s.validate(-5.0).is_ok());
        if let ScenarioKind::EmergencyBrake { deceleration, .. } = &mut s.kind {
            *deceleration = -6.0;
        }
        assert!(s.validate(-5.0).is_err());
        let s = ScenarioSpec { duration: 0.0, ..ScenarioSpec::drive_cycle() };
        assert!(s.validate(-5.0).is_err());
    }

    fn setup() -> (FleetTopology, OvmParams, Equilibrium) {
        let ovm = OvmParams::default();
        let eq = Equilibrium::from_velocity(&ovm, 15.0).unwrap();
        (FleetTopology::new(6, &[2, 5]).unwrap(), ovm, eq)
    }

    #[test]
    fn equilibrium_is_invariant_without_noise() {
        let (fleet, ovm, eq) = setup();
        let plant = Plant { fleet: &fleet, ovm: &ovm, eq: &eq, noise: NoiseSpec { half_width: 0.0 }, settings: SimSettings::default() };
        let profile = HeadProfile::Table(vec![(0.0, 15.0)]);
        let log = simulate(&plant, &profile, 200, None, &mut stream_rng(0, Stream::PlantNoise)).unwrap();
        for y in &log.y {
            assert!(y.amax() <= 1e-9);
        }
        let w = CostWeights::new(&fleet, &ControllerConfig::default());
        let m = metrics(&log, &w);
        assert!(m.quadratic_cost <= 1e-15);
        assert!(m.aave.abs() < 1e-12);
        let expected = 5.0 * fuel_rate(15.0, 0.0) * 200.0 * 0.05;
        assert_relative_eq!(m.total_fuel, expected, max_relative = 1e-12);
    }

    #[test]
    fn brake_disturbance_amplifies_along_hdv_chain() {
        let (_, ovm, eq) = setup();
        let fleet = FleetTopology::new(6, &[]).unwrap();
        let plant = Plant { fleet: &fleet, ovm: &ovm, eq: &eq, noise: NoiseSpec { half_width: 0.0 }, settings: SimSettings::default() };
        let profile = ScenarioSpec::emergency_brake().profile(Path::new(".")).unwrap();
        let log = simulate(&plant, &profile, 600, None, &mut stream_rng(0, Stream::PlantNoise)).unwrap();
        let swing = |i: usize| {
            let vs: Vec<f64> = log.v.iter().map(|v| v[i]).collect();
            vs.iter().cloned().fold(f64::MIN, f64::max) - vs.iter().cloned().fold(f64::MAX, f64::min)
        };
        assert!(swing(6) > swing(1), "{} vs {}", swing(6), swing(1));
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let (fleet, ovm, eq) = setup();
        let plant = Plant { fleet: &fleet, ovm: &ovm, eq: &eq, noise: NoiseSpec::default(), settings: SimSettings::default() };
        let profile = ScenarioSpec::emergency_brake().profile(Path::new(".")).unwrap();
        let a = simulate(&plant, &profile, 300, None, &mut stream_rng(4, Stream::PlantNoise)).unwrap();
        let b = simulate(&plant, &profile, 300, None, &mut stream_rng(4, Stream::PlantNoise)).unwrap();
        assert_eq!(a.v, b.v);
        assert_eq!(a.p, b.p);
    }

    #[test]
    fn collected_data_has_expected_columns() {
        let (fleet, ovm, eq) = setup();
        let plant = Plant { fleet: &fleet, ovm: &ovm, eq: &eq, noise: NoiseSpec::default(), settings: SimSettings::default() };
        let (rec, cert) = collect_data(&plant, &ExcitationSpec::default(), 944, 57, &mut stream_rng(1, Stream::Excitation), &mut stream_rng(1, Stream::PlantNoise)).unwrap();
        assert!(cert.exciting);
        let b = crate::datamat::partition(crate::datamat::MatrixKind::Hankel, &rec.u, &rec.eps, &rec.y, 15, 30).unwrap();
        assert_eq!(b.cols, 900);
        // OVM feedback keeps the platoon near equilibrium
        assert!(rec.y.as_matrix().amax() < 15.0);
    }

    #[test]
    fn zero_excitation_fails_certificate() {
        let (fleet, ovm, eq) = setup();
        let plant = Plant { fleet: &fleet, ovm: &ovm, eq: &eq, noise: NoiseSpec::default(), settings: SimSettings::default() };
        let zero = ExcitationSpec { input_half_width: 0.0, head_half_width: 0.0 };
        let res = collect_data(&plant, &zero, 300, 57, &mut stream_rng(1, Stream::Excitation), &mut stream_rng(1, Stream::PlantNoise));
        assert!(matches!(res, Err(SimError::ExcitationFailure(_))));
    }

    #[test]
    fn replay_csv_is_read_and_interpolated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.csv");
        std::fs::write(&path, "t,v_head\n0,10\n1,12\n3,12\n").unwrap();
        let s = ScenarioSpec { duration: 3.0, kind: ScenarioKind::ReplayCsv { path: "head.csv".into() } };
        let p = s.profile(dir.path()).unwrap();
        assert_relative_eq!(p.velocity(0.5), 11.0);
        std::fs::write(&path, "t,speed\n0,10\n").unwrap();
        assert!(s.profile(dir.path()).is_err());
    }
}
