//! Affine masking of CAV states and inputs.
//!
//! Each CAV `i` sends `x_bar = P_x x + l_x` and receives `u_bar`, decoding
//! `u = (u_bar - l_u) / p_u` locally. The central unit solves the predictive
//! problem on masked data with a transformed cost whose optimum differs from
//! the unmasked one by the constant `rho`, so decoded inputs coincide.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{
    output_box, CavController, ControllerConfig, ControllerError, CostWeights, DeepLccController, Observation, StageConstraints,
    StageCost, StepDiagnostics,
};
use crate::datamat::{BlockMatrixSet, Series};
use crate::model::FleetTopology;
use crate::qp::QuadraticProgram;
use crate::seed::{stream_rng, Stream};
use crate::sim::TrajectoryRecord;

/// Minimum `|det|` of an admissible map.
pub const INVERTIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivacyError {
    #[error("mask {index} is singular (|det| = {det:e})")]
    SingularMap { index: usize, det: f64 },
    #[error("endpoint-mapped bounds are inverted ({0}); use exact_preimage constraints")]
    InvalidLiteralBounds(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

/// `x -> P x + l` on a CAV's `(spacing error, velocity error)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap2 {
    pub p: Matrix2<f64>,
    pub l: Vector2<f64>,
}

impl AffineMap2 {
    pub fn new(p: Matrix2<f64>, l: Vector2<f64>) -> Result<Self, PrivacyError> {
        let det = p.determinant();
        if !(det.abs() >= INVERTIBILITY_TOL) {
            return Err(PrivacyError::SingularMap { index: 0, det });
        }
        Ok(Self { p, l })
    }

    pub fn identity() -> Self {
        Self { p: Matrix2::identity(), l: Vector2::zeros() }
    }

    /// Counter-clockwise rotation by `theta` followed by translation `l`.
    pub fn rotation(theta: f64, l: Vector2<f64>) -> Self {
        let (s, c) = theta.sin_cos();
        Self { p: Matrix2::new(c, -s, s, c), l }
    }

    pub fn apply(&self, x: &Vector2<f64>) -> Vector2<f64> {
        self.p * x + self.l
    }

    pub fn invert(&self, x_bar: &Vector2<f64>) -> Vector2<f64> {
        self.p.try_inverse().expect("checked invertible") * (x_bar - self.l)
    }
}

/// `u -> p u + l` on a CAV's acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap1 {
    pub p: f64,
    pub l: f64,
}

impl AffineMap1 {
    pub fn new(p: f64, l: f64) -> Result<Self, PrivacyError> {
        if !(p.abs() >= INVERTIBILITY_TOL) {
            return Err(PrivacyError::SingularMap { index: 0, det: p });
        }
        Ok(Self { p, l })
    }

    pub fn identity() -> Self {
        Self { p: 1.0, l: 0.0 }
    }

    pub fn apply(&self, u: f64) -> f64 {
        self.p * u + self.l
    }

    pub fn invert(&self, u_bar: f64) -> f64 {
        (u_bar - self.l) / self.p
    }
}

/// Local maps of every CAV and their fleet-level lifts `(P_u, L_u, P_y, L_y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetMasks {
    pub state: Vec<AffineMap2>,
    pub input: Vec<AffineMap1>,
    pub p_u: DMatrix<f64>,
    pub l_u: DVector<f64>,
    pub p_y: DMatrix<f64>,
    pub l_y: DVector<f64>,
    p_u_inv: DMatrix<f64>,
    p_y_inv: DMatrix<f64>,
}

/// Builds `P_y = diag(P_x1, .., P_xm, I)`, `L_y = (l_x1, .., l_xm, 0)`, `P_u`, `L_u`.
pub fn lift_maps(state: &[AffineMap2], input: &[AffineMap1], fleet: &FleetTopology) -> Result<FleetMasks, PrivacyError> {
    let m = fleet.m();
    if state.len() != m || input.len() != m {
        return Err(PrivacyError::DimensionMismatch(format!(
            "{} state maps and {} input maps for {m} CAVs",
            state.len(),
            input.len()
        )));
    }
    for (k, s) in state.iter().enumerate() {
        let det = s.p.determinant();
        if !(det.abs() >= INVERTIBILITY_TOL) {
            return Err(PrivacyError::SingularMap { index: k, det });
        }
    }
    for (k, i) in input.iter().enumerate() {
        if !(i.p.abs() >= INVERTIBILITY_TOL) {
            return Err(PrivacyError::SingularMap { index: k, det: i.p });
        }
    }
    let ny = fleet.output_dim();
    let mut p_y = DMatrix::identity(ny, ny);
    let mut l_y = DVector::zeros(ny);
    let mut p_y_inv = DMatrix::identity(ny, ny);
    for (k, s) in state.iter().enumerate() {
        p_y.fixed_view_mut::<2, 2>(2 * k, 2 * k).copy_from(&s.p);
        p_y_inv.fixed_view_mut::<2, 2>(2 * k, 2 * k).copy_from(&s.p.try_inverse().expect("checked"));
        l_y.fixed_rows_mut::<2>(2 * k).copy_from(&s.l);
    }
    let p_u = DMatrix::from_diagonal(&DVector::from_iterator(m, input.iter().map(|i| i.p)));
    let p_u_inv = DMatrix::from_diagonal(&DVector::from_iterator(m, input.iter().map(|i| 1.0 / i.p)));
    let l_u = DVector::from_iterator(m, input.iter().map(|i| i.l));
    Ok(FleetMasks { state: state.to_vec(), input: input.to_vec(), p_u, l_u, p_y, l_y, p_u_inv, p_y_inv })
}

impl FleetMasks {
    pub fn identity(fleet: &FleetTopology) -> Self {
        let m = fleet.m();
        lift_maps(&vec![AffineMap2::identity(); m], &vec![AffineMap1::identity(); m], fleet).expect("identity is invertible")
    }

    pub fn p_y_inv(&self) -> &DMatrix<f64> {
        &self.p_y_inv
    }

    pub fn p_u_inv(&self) -> &DMatrix<f64> {
        &self.p_u_inv
    }

    pub fn mask_output(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.p_y * y + &self.l_y
    }

    pub fn unmask_output(&self, y_bar: &DVector<f64>) -> DVector<f64> {
        &self.p_y_inv * (y_bar - &self.l_y)
    }

    pub fn mask_input(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.p_u * u + &self.l_u
    }

    pub fn unmask_input(&self, u_bar: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(u_bar.len(), u_bar.iter().zip(&self.input).map(|(&v, map)| map.invert(v)))
    }
}

/// Masks for the six-vehicle platoon with CAVs at positions 2 and 5: a
/// rotation by pi/4 and one by 8 pi/9, both offset by `(5, 3)`, with input
/// maps `-1.5 u + 1` and `1.5 u - 1`.
pub fn demo_maps() -> (Vec<AffineMap2>, Vec<AffineMap1>) {
    let l = Vector2::new(5.0, 3.0);
    (
        vec![AffineMap2::rotation(std::f64::consts::FRAC_PI_4, l), AffineMap2::rotation(8.0 * std::f64::consts::PI / 9.0, l)],
        vec![AffineMap1 { p: -1.5, l: 1.0 }, AffineMap1 { p: 1.5, l: -1.0 }],
    )
}

/// Cost pieces of the masked problem and the constant `rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedProblemParams {
    pub q_bar: DMatrix<f64>,
    pub q_lin: DVector<f64>,
    pub r_bar: DMatrix<f64>,
    pub r_lin: DVector<f64>,
    /// Unmasked objective minus masked objective over the horizon.
    pub rho: f64,
    pub horizon: usize,
}

impl MaskedProblemParams {
    pub fn stage_cost(&self) -> StageCost {
        StageCost { q: self.q_bar.clone(), q_lin: self.q_lin.clone(), r: self.r_bar.clone(), r_lin: self.r_lin.clone() }
    }
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// `Q_bar = P_y^-T Q P_y^-1`, `q_bar = -2 Q_bar L_y` and likewise for inputs.
pub fn transform_cost(weights: &CostWeights, masks: &FleetMasks, horizon: usize) -> MaskedProblemParams {
    let q_bar = sym(masks.p_y_inv.transpose() * &weights.q * &masks.p_y_inv);
    let r_bar = sym(masks.p_u_inv.transpose() * &weights.r * &masks.p_u_inv);
    let q_lin = &q_bar * &masks.l_y * -2.0;
    let r_lin = &r_bar * &masks.l_u * -2.0;
    let rho = horizon as f64 * (masks.l_y.dot(&(&q_bar * &masks.l_y)) + masks.l_u.dot(&(&r_bar * &masks.l_u)));
    MaskedProblemParams { q_bar, q_lin, r_bar, r_lin, rho, horizon }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    /// Boxes mapped endpoint-wise, `y_min_bar = P_y y_min + L_y`; only valid
    /// for positive diagonal maps.
    EndpointMap,
    /// Inequalities on `P^-1 (z_bar - L)`, the exact image of the original boxes.
    #[default]
    ExactPreimage,
}

/// Output and input constraints in masked coordinates.
pub fn transform_constraints(
    fleet: &FleetTopology,
    cfg: &ControllerConfig,
    masks: &FleetMasks,
    mode: ConstraintMode,
) -> Result<StageConstraints, PrivacyError> {
    let plain = StageConstraints::plain(fleet, cfg);
    match mode {
        ConstraintMode::ExactPreimage => {
            let y_shift = &masks.p_y_inv * &masks.l_y;
            let u_shift = &masks.p_u_inv * &masks.l_u;
            Ok(StageConstraints {
                y_map: masks.p_y_inv.clone(),
                y_lo: &plain.y_lo + &y_shift,
                y_hi: &plain.y_hi + &y_shift,
                u_map: masks.p_u_inv.clone(),
                u_lo: &plain.u_lo + &u_shift,
                u_hi: &plain.u_hi + &u_shift,
            })
        }
        ConstraintMode::EndpointMap => {
            let (y_min, y_max) = output_box(fleet, cfg);
            let y_lo = masks.mask_output(&y_min);
            let y_hi = masks.mask_output(&y_max);
            let u_lo = masks.mask_input(&plain.u_lo);
            let u_hi = masks.mask_input(&plain.u_hi);
            for (name, lo, hi) in [("output", &y_lo, &y_hi), ("input", &u_lo, &u_hi)] {
                if let Some(i) = (0..lo.len()).find(|&i| lo[i] > hi[i]) {
                    return Err(PrivacyError::InvalidLiteralBounds(format!("{name} {i}: [{}, {}]", lo[i], hi[i])));
                }
            }
            let ny = y_lo.len();
            let m = u_lo.len();
            Ok(StageConstraints { y_map: DMatrix::identity(ny, ny), y_lo, y_hi, u_map: DMatrix::identity(m, m), u_lo, u_hi })
        }
    }
}

fn map_columns(s: &Series, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> Series {
    let samples: Vec<DVector<f64>> = (0..s.len()).map(|t| f(&s.sample(t))).collect();
    Series::from_samples(&samples).expect("shape preserved")
}

/// Masks every sample of a record; the head-vehicle error passes through.
pub fn mask_dataset(rec: &TrajectoryRecord, masks: &FleetMasks) -> TrajectoryRecord {
    TrajectoryRecord {
        u: map_columns(&rec.u, |u| masks.mask_input(u)),
        eps: rec.eps.clone(),
        y: map_columns(&rec.y, |y| masks.mask_output(y)),
    }
}

pub fn unmask_dataset(rec: &TrajectoryRecord, masks: &FleetMasks) -> TrajectoryRecord {
    TrajectoryRecord {
        u: map_columns(&rec.u, |u| masks.unmask_input(u)),
        eps: rec.eps.clone(),
        y: map_columns(&rec.y, |y| masks.unmask_output(y)),
    }
}

/// The masked program for a warm masked buffer; always carries `1'g = 1`.
pub fn assemble_masked_deeplcc(
    blocks: &BlockMatrixSet,
    buf: &crate::controller::PastBuffer,
    params: &MaskedProblemParams,
    cons: &StageConstraints,
    cfg: &ControllerConfig,
) -> Result<QuadraticProgram, PrivacyError> {
    Ok(crate::controller::assemble_deeplcc(blocks, buf, &params.stage_cost(), cons, cfg, true)?)
}

/// Masked data and inputs exchanged at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub y_bar: DVector<f64>,
    pub u_bar: DVector<f64>,
}

/// CAVs mask their measurements, a central unit solves on masked data, and
/// each CAV decodes its own input.
#[derive(Debug, Clone)]
pub struct MaskedDeepLcc {
    central: DeepLccController,
    masks: FleetMasks,
    params: MaskedProblemParams,
    a_bounds: (f64, f64),
    exchanges: Vec<Exchange>,
}

impl MaskedDeepLcc {
    /// `masked_blocks` must come from data masked with `masks`.
    pub fn new(
        masked_blocks: &BlockMatrixSet,
        fleet: &FleetTopology,
        masks: FleetMasks,
        cfg: &ControllerConfig,
        mode: ConstraintMode,
    ) -> Result<Self, PrivacyError> {
        let weights = CostWeights::new(fleet, cfg);
        let params = transform_cost(&weights, &masks, cfg.horizon);
        let cons = transform_constraints(fleet, cfg, &masks, mode)?;
        // zero true input during warm-up
        let warmup = masks.l_u.clone();
        let central = DeepLccController::new(masked_blocks, &params.stage_cost(), &cons, cfg, true, warmup)?;
        Ok(Self { central, masks, params, a_bounds: cfg.a_bounds, exchanges: Vec::new() })
    }

    pub fn rho(&self) -> f64 {
        self.params.rho
    }

    pub fn params(&self) -> &MaskedProblemParams {
        &self.params
    }

    pub fn masks(&self) -> &FleetMasks {
        &self.masks
    }

    pub fn central(&self) -> &DeepLccController {
        &self.central
    }

    /// Everything the central unit saw and sent, one entry per step.
    pub fn exchanges(&self) -> &[Exchange] {
        &self.exchanges
    }
}

impl CavController for MaskedDeepLcc {
    fn step(&mut self, obs: &Observation<'_>) -> Result<(DVector<f64>, StepDiagnostics), ControllerError> {
        let y_bar = self.masks.mask_output(obs.y);
        let (u_bar, diag) = self.central.step_raw(&y_bar, obs.eps)?;
        let mut u = self.masks.unmask_input(&u_bar);
        if diag.flagged {
            u = u.map(|v| v.clamp(self.a_bounds.0, self.a_bounds.1));
        }
        self.exchanges.push(Exchange { y_bar, u_bar });
        Ok((u, diag))
    }

    fn name(&self) -> &str {
        "masked-deeplcc"
    }

    // masked outputs move by P_y dy; the offset L_y cancels
    fn rebase(&mut self, dy: &DVector<f64>, d_eps: f64) {
        let dy_bar = &self.masks.p_y * dy;
        self.central.shift_buffer(&dy_bar, d_eps);
    }

    fn decision_dim(&self) -> usize {
        self.central.decision_dim()
    }
}

/// A candidate mask set and the trajectory it decodes the observations to.
#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    pub masks: FleetMasks,
    pub y: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    /// Max-norm gap between re-masked decoding and the observations.
    pub remask_residual: f64,
}

/// Decodes masked sequences through `masks` and records the re-mask residual.
pub fn decode_with(masks: &FleetMasks, y_bar: &[DVector<f64>], u_bar: &[DVector<f64>]) -> Witness {
    let y: Vec<DVector<f64>> = y_bar.iter().map(|v| masks.unmask_output(v)).collect();
    let u: Vec<DVector<f64>> = u_bar.iter().map(|v| masks.unmask_input(v)).collect();
    let mut residual: f64 = 0.0;
    for (a, b) in y.iter().zip(y_bar) {
        residual = residual.max((masks.mask_output(a) - b).amax());
    }
    for (a, b) in u.iter().zip(u_bar) {
        residual = residual.max((masks.mask_input(a) - b).amax());
    }
    Witness { masks: masks.clone(), y, u, remask_residual: residual }
}

/// Max-norm distance between two decoded trajectories.
pub fn trajectory_gap(a: &Witness, b: &Witness) -> f64 {
    let gy = a.y.iter().zip(&b.y).map(|(x, z)| (x - z).amax()).fold(0.0, f64::max);
    let gu = a.u.iter().zip(&b.u).map(|(x, z)| (x - z).amax()).fold(0.0, f64::max);
    gy.max(gu)
}

/// Separation enforced between any two witnesses.
pub const WITNESS_SEPARATION: f64 = 1e-3;

/// `count` random invertible mask sets, each decoding the observations to a
/// distinct trajectory that re-masks to them exactly. Candidates closer than
/// [`WITNESS_SEPARATION`] to an earlier one are redrawn.
pub fn diversity_witnesses(
    fleet: &FleetTopology,
    y_bar: &[DVector<f64>],
    u_bar: &[DVector<f64>],
    count: usize,
    seed: u64,
) -> Vec<Witness> {
    let mut rng = stream_rng(seed, Stream::Witnesses);
    let mut out: Vec<Witness> = Vec::with_capacity(count);
    while out.len() < count {
        let state: Vec<AffineMap2> = (0..fleet.m())
            .map(|_| {
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                AffineMap2::rotation(theta, Vector2::new(rng.gen_range(-10.0..=10.0), rng.gen_range(-10.0..=10.0)))
            })
            .collect();
        let input: Vec<AffineMap1> = (0..fleet.m())
            .map(|_| {
                let mag = rng.gen_range(0.5..=3.0);
                let p = if rng.gen_bool(0.5) { mag } else { -mag };
                AffineMap1 { p, l: rng.gen_range(-2.0..=2.0) }
            })
            .collect();
        let Ok(masks) = lift_maps(&state, &input, fleet) else { continue };
        let w = decode_with(&masks, y_bar, u_bar);
        if out.iter().all(|o| trajectory_gap(o, &w) >= WITNESS_SEPARATION) {
            out.push(w);
        }
    }
    out
}

/// An eavesdropper that reads masked values as plaintext.
pub fn naive_attacker_estimate(y_bar: &[DVector<f64>], u_bar: &[DVector<f64>]) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    (y_bar.to_vec(), u_bar.to_vec())
}

/// Per-channel root-mean-square error between two sequences.
pub fn channel_rmse(estimate: &[DVector<f64>], truth: &[DVector<f64>]) -> Vec<f64> {
    let Some(first) = truth.first() else { return Vec::new() };
    let mut acc = vec![0.0; first.len()];
    for (e, t) in estimate.iter().zip(truth) {
        for (a, (x, y)) in acc.iter_mut().zip(e.iter().zip(t.iter())) {
            *a += (x - y).powi(2);
        }
    }
    acc.into_iter().map(|s| (s / truth.len() as f64).sqrt()).collect()
}
