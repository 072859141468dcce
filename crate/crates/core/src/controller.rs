//! Receding-horizon controllers for the automated vehicles.
//!
//! [`DeepLccController`] predicts with raw data matrices; [`MpcController`]
//! is the model-based baseline that rolls the linearized platoon forward.
//! Both minimize the same stage cost under the same output and input boxes.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamat::{BlockMatrixSet, MatrixKind};
use crate::model::{FleetTopology, LiftedResponse, LinearDiscreteModel};
use crate::qp::{PreparedQp, QpError, QpSettings, QpSolution, QpStatus, QuadraticProgram, INFINITE_BOUND};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("past buffer holds {have} of {need} samples")]
    NotWarmedUp { have: usize, need: usize },
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub t_ini: usize,
    pub horizon: usize,
    pub w_s: f64,
    pub w_v: f64,
    pub w_u: f64,
    pub s_err_bounds: (f64, f64),
    pub v_err_bounds: (f64, f64),
    pub a_bounds: (f64, f64),
    pub lambda_g: f64,
    pub lambda_sigma: f64,
    pub matrix_kind: MatrixKind,
    pub regularized: bool,
    /// Adds `1'g = 1` to the plain problem so that it matches the masked one,
    /// which always carries it.
    pub ones_row: bool,
    pub qp: QpSettings,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            t_ini: 15,
            horizon: 30,
            w_s: 0.5,
            w_v: 1.0,
            w_u: 0.1,
            s_err_bounds: (-15.0, 20.0),
            v_err_bounds: (-30.0, 30.0),
            a_bounds: (-5.0, 2.0),
            lambda_g: 100.0,
            lambda_sigma: 1e4,
            matrix_kind: MatrixKind::Hankel,
            regularized: true,
            ones_row: true,
            qp: QpSettings::default(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |m: &str| Err(ControllerError::InvalidConfig(m.into()));
        if self.t_ini == 0 || self.horizon == 0 {
            return bad("horizons must be at least 1");
        }
        if !(self.w_s > 0.0 && self.w_v > 0.0 && self.w_u > 0.0) {
            return bad("cost weights must be positive");
        }
        for (lo, hi) in [self.s_err_bounds, self.v_err_bounds, self.a_bounds] {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return bad("bounds must be ordered");
            }
        }
        if self.regularized && !(self.lambda_g > 0.0 && self.lambda_sigma > 0.0) {
            return bad("regularized problem needs positive lambda_g and lambda_sigma");
        }
        Ok(())
    }
}

/// Output weight `Q = diag(w_s, w_v per CAV, w_v per HDV)` and input weight `R = w_u I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl CostWeights {
    pub fn new(fleet: &FleetTopology, cfg: &ControllerConfig) -> Self {
        let mut diag = Vec::with_capacity(fleet.output_dim());
        for _ in fleet.cav_indices() {
            diag.extend([cfg.w_s, cfg.w_v]);
        }
        diag.extend(std::iter::repeat_n(cfg.w_v, fleet.hdv_indices().len()));
        Self {
            q: DMatrix::from_diagonal(&DVector::from_vec(diag)),
            r: DMatrix::identity(fleet.m(), fleet.m()) * cfg.w_u,
        }
    }

    /// `y'Qy + u'Ru` for one sample.
    pub fn stage(&self, y: &DVector<f64>, u: &DVector<f64>) -> f64 {
        y.dot(&(&self.q * y)) + u.dot(&(&self.r * u))
    }
}

/// Per-sample cost `y'Qy + q'y + u'Ru + r'u` in the coordinates the solver sees.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCost {
    pub q: DMatrix<f64>,
    pub q_lin: DVector<f64>,
    pub r: DMatrix<f64>,
    pub r_lin: DVector<f64>,
}

impl StageCost {
    pub fn plain(w: &CostWeights) -> Self {
        Self {
            q: w.q.clone(),
            q_lin: DVector::zeros(w.q.nrows()),
            r: w.r.clone(),
            r_lin: DVector::zeros(w.r.nrows()),
        }
    }
}

/// Per-sample linear inequalities `y_lo <= y_map y <= y_hi`, `u_lo <= u_map u <= u_hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConstraints {
    pub y_map: DMatrix<f64>,
    pub y_lo: DVector<f64>,
    pub y_hi: DVector<f64>,
    pub u_map: DMatrix<f64>,
    pub u_lo: DVector<f64>,
    pub u_hi: DVector<f64>,
}

impl StageConstraints {
    /// Boxes on spacing and velocity errors and on accelerations.
    pub fn plain(fleet: &FleetTopology, cfg: &ControllerConfig) -> Self {
        let (y_lo, y_hi) = output_box(fleet, cfg);
        let m = fleet.m();
        Self {
            y_map: DMatrix::identity(y_lo.len(), y_lo.len()),
            y_lo,
            y_hi,
            u_map: DMatrix::identity(m, m),
            u_lo: DVector::from_element(m, cfg.a_bounds.0),
            u_hi: DVector::from_element(m, cfg.a_bounds.1),
        }
    }
}

/// Elementwise output bounds in the fleet's output ordering.
pub fn output_box(fleet: &FleetTopology, cfg: &ControllerConfig) -> (DVector<f64>, DVector<f64>) {
    let mut lo = Vec::with_capacity(fleet.output_dim());
    let mut hi = Vec::with_capacity(fleet.output_dim());
    for _ in fleet.cav_indices() {
        lo.extend([cfg.s_err_bounds.0, cfg.v_err_bounds.0]);
        hi.extend([cfg.s_err_bounds.1, cfg.v_err_bounds.1]);
    }
    for _ in fleet.hdv_indices() {
        lo.push(cfg.v_err_bounds.0);
        hi.push(cfg.v_err_bounds.1);
    }
    (DVector::from_vec(lo), DVector::from_vec(hi))
}

/// The last `t_ini` inputs, head-vehicle velocity errors and outputs, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct PastBuffer {
    t_ini: usize,
    u: VecDeque<DVector<f64>>,
    eps: VecDeque<f64>,
    y: VecDeque<DVector<f64>>,
}

impl PastBuffer {
    pub fn new(t_ini: usize) -> Self {
        Self { t_ini, u: VecDeque::new(), eps: VecDeque::new(), y: VecDeque::new() }
    }

    pub fn t_ini(&self) -> usize {
        self.t_ini
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn is_warm(&self) -> bool {
        self.u.len() == self.t_ini
    }

    pub fn push(&mut self, u: DVector<f64>, eps: f64, y: DVector<f64>) {
        self.u.push_back(u);
        self.eps.push_back(eps);
        self.y.push_back(y);
        if self.u.len() > self.t_ini {
            self.u.pop_front();
            self.eps.pop_front();
            self.y.pop_front();
        }
    }

    /// Adds constant offsets to every stored output and head error, which
    /// re-expresses the window around a new operating point.
    pub fn shift(&mut self, dy: &DVector<f64>, d_eps: f64) {
        for y in self.y.iter_mut() {
            *y += dy;
        }
        for e in self.eps.iter_mut() {
            *e += d_eps;
        }
    }

    pub fn u_ini(&self) -> DVector<f64> {
        stack(self.u.iter())
    }

    pub fn eps_ini(&self) -> DVector<f64> {
        DVector::from_iterator(self.eps.len(), self.eps.iter().cloned())
    }

    pub fn y_ini(&self) -> DVector<f64> {
        stack(self.y.iter())
    }
}

fn stack<'a>(items: impl Iterator<Item = &'a DVector<f64>> + Clone) -> DVector<f64> {
    let len = items.clone().map(|v| v.len()).sum();
    let mut out = DVector::zeros(len);
    let mut r = 0;
    for v in items {
        out.rows_mut(r, v.len()).copy_from(v);
        r += v.len();
    }
    out
}

/// Repeats `v` `times` times.
fn tile(v: &DVector<f64>, times: usize) -> DVector<f64> {
    DVector::from_fn(v.len() * times, |i, _| v[i % v.len()])
}

/// `Y' blkdiag(W) Y` for a block-row matrix `Y` with blocks of `W.nrows()` rows.
fn block_quadratic(y: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    let b = w.nrows();
    let mut wy = DMatrix::zeros(y.nrows(), y.ncols());
    for k in 0..y.nrows() / b {
        wy.rows_mut(k * b, b).copy_from(&(w * y.rows(k * b, b)));
    }
    y.tr_mul(&wy)
}

/// `blkdiag(M) Y` for a block-row matrix `Y`.
fn block_map(y: &DMatrix<f64>, map: &DMatrix<f64>) -> DMatrix<f64> {
    let b = map.ncols();
    let rows = map.nrows();
    let blocks = y.nrows() / b;
    let mut out = DMatrix::zeros(rows * blocks, y.ncols());
    for k in 0..blocks {
        out.rows_mut(k * rows, rows).copy_from(&(map * y.rows(k * b, b)));
    }
    out
}

fn clamp_bound(x: f64) -> f64 {
    if x >= INFINITE_BOUND {
        f64::INFINITY
    } else if x <= -INFINITE_BOUND {
        f64::NEG_INFINITY
    } else {
        x
    }
}

/// Data-driven predictive problem with the buffer-independent parts prebuilt.
///
/// Decision vector: `g` (one weight per data column), followed by the
/// output slack `sigma` when regularized.
#[derive(Debug, Clone)]
pub struct DeepLccProblem {
    template: QuadraticProgram,
    prepared: PreparedQp,
    uf: DMatrix<f64>,
    yf: DMatrix<f64>,
    cols: usize,
    slack: usize,
    t_ini: usize,
    horizon: usize,
    m: usize,
    ny: usize,
    ones_row: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepLccSolution {
    pub g: DVector<f64>,
    pub sigma: DVector<f64>,
    pub u_pred: DVector<f64>,
    pub y_pred: DVector<f64>,
    pub qp: QpSolution,
}

impl DeepLccProblem {
    pub fn new(
        blocks: &BlockMatrixSet,
        cost: &StageCost,
        cons: &StageConstraints,
        cfg: &ControllerConfig,
        ones_row: bool,
    ) -> Result<Self, ControllerError> {
        cfg.validate()?;
        let template = build_template(blocks, cost, cons, cfg, ones_row)?;
        let prepared = PreparedQp::new(&template.p, &template.a_eq, &template.a_in)?;
        Ok(Self {
            template,
            prepared,
            uf: blocks.uf.clone(),
            yf: blocks.yf.clone(),
            cols: blocks.cols,
            slack: if cfg.regularized { blocks.yp.nrows() } else { 0 },
            t_ini: blocks.t_ini,
            horizon: blocks.horizon,
            m: blocks.input_dim(),
            ny: blocks.output_dim(),
            ones_row,
        })
    }

    pub fn decision_dim(&self) -> usize {
        self.cols + self.slack
    }

    pub fn eq_rows(&self) -> usize {
        self.template.a_eq.nrows()
    }

    pub fn output_constraint_rows(&self) -> usize {
        self.horizon * self.ny
    }

    pub fn input_constraint_rows(&self) -> usize {
        self.horizon * self.m
    }

    pub fn b_eq(&self, buf: &PastBuffer) -> Result<DVector<f64>, ControllerError> {
        if !buf.is_warm() || buf.t_ini() != self.t_ini {
            return Err(ControllerError::NotWarmedUp { have: buf.len(), need: self.t_ini });
        }
        let (u, e, y) = (buf.u_ini(), buf.eps_ini(), buf.y_ini());
        if u.len() != self.m * self.t_ini || y.len() != self.ny * self.t_ini {
            return Err(ControllerError::DimensionMismatch(format!(
                "buffer holds u {} and y {}, expected {} and {}",
                u.len(),
                y.len(),
                self.m * self.t_ini,
                self.ny * self.t_ini
            )));
        }
        let mut b = DVector::zeros(self.eq_rows());
        let mut r = 0;
        for part in [&u, &e, &y] {
            b.rows_mut(r, part.len()).copy_from(part);
            r += part.len();
        }
        // E_f g = 0 rows are already zero
        if self.ones_row {
            b[self.eq_rows() - 1] = 1.0;
        }
        Ok(b)
    }

    /// The full program for the current buffer.
    pub fn program(&self, buf: &PastBuffer) -> Result<QuadraticProgram, ControllerError> {
        Ok(QuadraticProgram { b_eq: self.b_eq(buf)?, ..self.template.clone() })
    }

    pub fn solve(&mut self, buf: &PastBuffer, settings: &QpSettings) -> Result<DeepLccSolution, ControllerError> {
        let b = self.b_eq(buf)?;
        let t = &self.template;
        let sol = self.prepared.solve(&t.q, &b, &t.lo, &t.hi, settings);
        let g = sol.x.rows(0, self.cols).into_owned();
        let sigma = sol.x.rows(self.cols, self.slack).into_owned();
        Ok(DeepLccSolution { u_pred: &self.uf * &g, y_pred: &self.yf * &g, g, sigma, qp: sol })
    }
}

fn build_template(
    blocks: &BlockMatrixSet,
    cost: &StageCost,
    cons: &StageConstraints,
    cfg: &ControllerConfig,
    ones_row: bool,
) -> Result<QuadraticProgram, ControllerError> {
    let (t_ini, horizon) = (blocks.t_ini, blocks.horizon);
    if cfg.t_ini != t_ini || cfg.horizon != horizon {
        return Err(ControllerError::DimensionMismatch(format!(
            "data built for (T_ini, N) = ({t_ini}, {horizon}), config asks ({}, {})",
            cfg.t_ini, cfg.horizon
        )));
    }
    let m = blocks.input_dim();
    let ny = blocks.output_dim();
    let dims_ok = cost.q.shape() == (ny, ny)
        && cost.q_lin.len() == ny
        && cost.r.shape() == (m, m)
        && cost.r_lin.len() == m
        && cons.y_map.ncols() == ny
        && cons.y_map.nrows() == cons.y_lo.len()
        && cons.y_lo.len() == cons.y_hi.len()
        && cons.u_map.ncols() == m
        && cons.u_map.nrows() == cons.u_lo.len()
        && cons.u_lo.len() == cons.u_hi.len()
        && blocks.ep.nrows() == t_ini
        && blocks.ef.nrows() == horizon;
    if !dims_ok {
        return Err(ControllerError::DimensionMismatch(format!(
            "cost/constraints do not match data with m = {m}, outputs = {ny}"
        )));
    }
    let cols = blocks.cols;
    let slack = if cfg.regularized { blocks.yp.nrows() } else { 0 };
    let d = cols + slack;

    let mut p = DMatrix::zeros(d, d);
    {
        let mut pgg = block_quadratic(&blocks.yf, &cost.q) + block_quadratic(&blocks.uf, &cost.r);
        if cfg.regularized {
            for i in 0..cols {
                pgg[(i, i)] += cfg.lambda_g;
            }
        }
        p.view_mut((0, 0), (cols, cols)).copy_from(&(pgg * 2.0));
        for i in cols..d {
            p[(i, i)] = 2.0 * cfg.lambda_sigma;
        }
    }
    let mut q = DVector::zeros(d);
    q.rows_mut(0, cols)
        .copy_from(&(blocks.yf.tr_mul(&tile(&cost.q_lin, horizon)) + blocks.uf.tr_mul(&tile(&cost.r_lin, horizon))));

    let n_eq = blocks.up.nrows() + t_ini + blocks.yp.nrows() + horizon + usize::from(ones_row);
    let mut a_eq = DMatrix::zeros(n_eq, d);
    let mut r = 0;
    for block in [&blocks.up, &blocks.ep, &blocks.yp] {
        a_eq.view_mut((r, 0), (block.nrows(), cols)).copy_from(block);
        r += block.nrows();
    }
    if cfg.regularized {
        let yp_start = blocks.up.nrows() + t_ini;
        for i in 0..slack {
            a_eq[(yp_start + i, cols + i)] = -1.0;
        }
    }
    a_eq.view_mut((r, 0), (horizon, cols)).copy_from(&blocks.ef);
    r += horizon;
    if ones_row {
        a_eq.view_mut((r, 0), (1, cols)).fill(1.0);
    }

    let ay = block_map(&blocks.yf, &cons.y_map);
    let au = block_map(&blocks.uf, &cons.u_map);
    let mut a_in = DMatrix::zeros(ay.nrows() + au.nrows(), d);
    a_in.view_mut((0, 0), (ay.nrows(), cols)).copy_from(&ay);
    a_in.view_mut((ay.nrows(), 0), (au.nrows(), cols)).copy_from(&au);
    let lo = tile(&cons.y_lo, horizon).iter().chain(tile(&cons.u_lo, horizon).iter()).map(|&x| clamp_bound(x)).collect::<Vec<_>>();
    let hi = tile(&cons.y_hi, horizon).iter().chain(tile(&cons.u_hi, horizon).iter()).map(|&x| clamp_bound(x)).collect::<Vec<_>>();

    Ok(QuadraticProgram {
        p,
        q,
        a_eq,
        b_eq: DVector::zeros(n_eq),
        a_in,
        lo: DVector::from_vec(lo),
        hi: DVector::from_vec(hi),
    })
}

/// One-shot assembly of the data-driven program for a warm buffer.
pub fn assemble_deeplcc(
    blocks: &BlockMatrixSet,
    buf: &PastBuffer,
    cost: &StageCost,
    cons: &StageConstraints,
    cfg: &ControllerConfig,
    ones_row: bool,
) -> Result<QuadraticProgram, ControllerError> {
    cfg.validate()?;
    if !buf.is_warm() {
        return Err(ControllerError::NotWarmedUp { have: buf.len(), need: cfg.t_ini });
    }
    let mut qp = build_template(blocks, cost, cons, cfg, ones_row)?;
    let u = buf.u_ini();
    let e = buf.eps_ini();
    let y = buf.y_ini();
    if u.len() != blocks.up.nrows() || y.len() != blocks.yp.nrows() {
        return Err(ControllerError::DimensionMismatch("buffer and data disagree".into()));
    }
    let mut r = 0;
    for part in [&u, &e, &y] {
        qp.b_eq.rows_mut(r, part.len()).copy_from(part);
        r += part.len();
    }
    if ones_row {
        let n = qp.b_eq.len();
        qp.b_eq[n - 1] = 1.0;
    }
    Ok(qp)
}

/// What a controller sees at one sampling instant.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    /// Measured output `y(t)`.
    pub y: &'a DVector<f64>,
    /// Head-vehicle velocity error `eps(t)`.
    pub eps: f64,
    /// Full linearized error state; only the idealized model-based baseline reads it.
    pub x: &'a DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    /// `None` during warm-up.
    pub status: Option<QpStatus>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub solve_time: Duration,
    /// Solver did not certify optimality; the first input of the last iterate was applied.
    pub flagged: bool,
    pub decision_dim: usize,
}

impl StepDiagnostics {
    pub fn warmup(decision_dim: usize) -> Self {
        Self {
            status: None,
            objective: f64::NAN,
            kkt_residual: f64::NAN,
            iterations: 0,
            solve_time: Duration::ZERO,
            flagged: false,
            decision_dim,
        }
    }
}

pub trait CavController {
    /// Returns the acceleration command of every CAV for the current step.
    fn step(&mut self, obs: &Observation<'_>) -> Result<(DVector<f64>, StepDiagnostics), ControllerError>;

    fn name(&self) -> &str;

    fn decision_dim(&self) -> usize;

    /// Called when the operating point moves; past outputs and head errors
    /// change by `dy` and `d_eps`. Inputs are absolute and unaffected.
    fn rebase(&mut self, _dy: &DVector<f64>, _d_eps: f64) {}
}

fn clamp_input(u: &DVector<f64>, bounds: (f64, f64)) -> DVector<f64> {
    u.map(|v| v.clamp(bounds.0, bounds.1))
}

/// Receding-horizon data-driven controller in whatever coordinates its data use.
#[derive(Debug, Clone)]
pub struct DeepLccController {
    problem: DeepLccProblem,
    buffer: PastBuffer,
    cfg: ControllerConfig,
    warmup_input: DVector<f64>,
    last: Option<DeepLccSolution>,
    name: String,
}

impl DeepLccController {
    pub fn new(
        blocks: &BlockMatrixSet,
        cost: &StageCost,
        cons: &StageConstraints,
        cfg: &ControllerConfig,
        ones_row: bool,
        warmup_input: DVector<f64>,
    ) -> Result<Self, ControllerError> {
        let problem = DeepLccProblem::new(blocks, cost, cons, cfg, ones_row)?;
        if warmup_input.len() != blocks.input_dim() {
            return Err(ControllerError::DimensionMismatch("warm-up input length".into()));
        }
        let name = match cfg.matrix_kind {
            MatrixKind::Hankel => "deeplcc-hankel",
            MatrixKind::Page => "deeplcc-page",
        };
        Ok(Self {
            problem,
            buffer: PastBuffer::new(cfg.t_ini),
            cfg: *cfg,
            warmup_input,
            last: None,
            name: name.into(),
        })
    }

    pub fn problem(&self) -> &DeepLccProblem {
        &self.problem
    }

    pub fn buffer(&self) -> &PastBuffer {
        &self.buffer
    }

    /// Re-expresses the stored window in the controller's own coordinates.
    pub fn shift_buffer(&mut self, dy: &DVector<f64>, d_eps: f64) {
        self.buffer.shift(dy, d_eps);
    }

    /// Most recent solve, if any.
    pub fn last_solution(&self) -> Option<&DeepLccSolution> {
        self.last.as_ref()
    }

    /// Solves from the buffer, then records `(u(t), eps(t), y(t))`.
    ///
    /// Inputs and outputs are in the controller's own coordinates.
    pub fn step_raw(&mut self, y: &DVector<f64>, eps: f64) -> Result<(DVector<f64>, StepDiagnostics), ControllerError> {
        let dim = self.problem.decision_dim();
        let (u, diag) = if self.buffer.is_warm() {
            let start = Instant::now();
            let sol = self.problem.solve(&self.buffer, &self.cfg.qp)?;
            let solve_time = start.elapsed();
            let m = self.warmup_input.len();
            let first = sol.u_pred.rows(0, m).into_owned();
            let flagged = sol.qp.status != QpStatus::Optimal;
            let diag = StepDiagnostics {
                status: Some(sol.qp.status),
                objective: sol.qp.objective,
                kkt_residual: sol.qp.kkt_residual,
                iterations: sol.qp.iterations,
                solve_time,
                flagged,
                decision_dim: dim,
            };
            self.last = Some(sol);
            (first, diag)
        } else {
            (self.warmup_input.clone(), StepDiagnostics::warmup(dim))
        };
        self.buffer.push(u.clone(), eps, y.clone());
        Ok((u, diag))
    }
}

impl CavController for DeepLccController {
    fn step(&mut self, obs: &Observation<'_>) -> Result<(DVector<f64>, StepDiagnostics), ControllerError> {
        let (u, diag) = self.step_raw(obs.y, obs.eps)?;
        let u = if diag.flagged { clamp_input(&u, self.cfg.a_bounds) } else { u };
        Ok((u, diag))
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn decision_dim(&self) -> usize {
        self.problem.decision_dim()
    }

    fn rebase(&mut self, dy: &DVector<f64>, d_eps: f64) {
        self.buffer.shift(dy, d_eps);
    }
}

/// Output-feedback MPC on the linearized model, fed the true error state.
#[derive(Debug, Clone)]
pub struct MpcController {
    t_x: DMatrix<f64>,
    prepared: PreparedQp,
    p: DMatrix<f64>,
    /// Gradient of the cost with respect to inputs per unit initial state: `2 T_u' Q T_x`.
    q_of_x: DMatrix<f64>,
    /// Free-response cost `T_x' Q T_x`, a constant of each solve.
    free: DMatrix<f64>,
    y_lo: DVector<f64>,
    y_hi: DVector<f64>,
    u_lo: DVector<f64>,
    u_hi: DVector<f64>,
    a_in: DMatrix<f64>,
    m: usize,
    horizon: usize,
    cfg: ControllerConfig,
}

impl MpcController {
    pub fn new(model: &LinearDiscreteModel, weights: &CostWeights, cons: &StageConstraints, cfg: &ControllerConfig) -> Result<Self, ControllerError> {
        cfg.validate()?;
        let (m, ny, horizon) = (model.input_dim(), model.output_dim(), cfg.horizon);
        if weights.q.nrows() != ny || weights.r.nrows() != m || cons.y_map.ncols() != ny || cons.u_map.ncols() != m {
            return Err(ControllerError::DimensionMismatch("weights or constraints do not match the model".into()));
        }
        let lifted = LiftedResponse::for_model(model, 0, horizon);
        let t_u = &lifted.t_u;
        let p = (block_quadratic(t_u, &weights.q) + block_quadratic(&DMatrix::identity(m * horizon, m * horizon), &weights.r)) * 2.0;
        let mut qt = DMatrix::zeros(lifted.t_x.nrows(), lifted.t_x.ncols());
        for k in 0..horizon {
            qt.rows_mut(k * ny, ny).copy_from(&(&weights.q * lifted.t_x.rows(k * ny, ny)));
        }
        let q_of_x = t_u.tr_mul(&qt) * 2.0;
        let free = lifted.t_x.tr_mul(&qt);
        let ay = block_map(t_u, &cons.y_map);
        let au = block_map(&DMatrix::identity(m * horizon, m * horizon), &cons.u_map);
        let mut a_in = DMatrix::zeros(ay.nrows() + au.nrows(), m * horizon);
        a_in.rows_mut(0, ay.nrows()).copy_from(&ay);
        a_in.rows_mut(ay.nrows(), au.nrows()).copy_from(&au);
        let a_eq = DMatrix::zeros(0, m * horizon);
        let prepared = PreparedQp::new(&p, &a_eq, &a_in)?;
        Ok(Self {
            t_x: block_map(&lifted.t_x, &cons.y_map),
            prepared,
            p,
            q_of_x,
            free,
            y_lo: tile(&cons.y_lo, horizon).map(clamp_bound),
            y_hi: tile(&cons.y_hi, horizon).map(clamp_bound),
            u_lo: tile(&cons.u_lo, horizon).map(clamp_bound),
            u_hi: tile(&cons.u_hi, horizon).map(clamp_bound),
            a_in,
            m,
            horizon,
            cfg: *cfg,
        })
    }

    /// Future-input program for state `x` with zero future head-vehicle error.
    pub fn program(&self, x: &DVector<f64>) -> QuadraticProgram {
        let (q, lo, hi) = self.linear_terms(x);
        QuadraticProgram { p: self.p.clone(), q, a_eq: DMatrix::zeros(0, self.p.nrows()), b_eq: DVector::zeros(0), a_in: self.a_in.clone(), lo, hi }
    }

    fn linear_terms(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let q = &self.q_of_x * x;
        let free = &self.t_x * x;
        let ny_rows = self.y_lo.len();
        let mut lo = DVector::zeros(ny_rows + self.u_lo.len());
        let mut hi = lo.clone();
        lo.rows_mut(0, ny_rows).copy_from(&(&self.y_lo - &free));
        hi.rows_mut(0, ny_rows).copy_from(&(&self.y_hi - &free));
        lo.rows_mut(ny_rows, self.u_lo.len()).copy_from(&self.u_lo);
        hi.rows_mut(ny_rows, self.u_hi.len()).copy_from(&self.u_hi);
        (q, lo, hi)
    }

    /// Solves for state `x`; the reported objective includes the free-response cost.
    pub fn solve(&mut self, x: &DVector<f64>) -> QpSolution {
        let (q, lo, hi) = self.linear_terms(x);
        let mut sol = self.prepared.solve(&q, &DVector::zeros(0), &lo, &hi, &self.cfg.qp);
        sol.objective += x.dot(&(&self.free * x));
        sol
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
}

impl CavController for MpcController {
    fn step(&mut self, obs: &Observation<'_>) -> Result<(DVector<f64>, StepDiagnostics), ControllerError> {
        if obs.x.len() != self.t_x.ncols() {
            return Err(ControllerError::DimensionMismatch("state estimate length".into()));
        }
        let start = Instant::now();
        let sol = self.solve(obs.x);
        let solve_time = start.elapsed();
        let flagged = sol.status != QpStatus::Optimal;
        let mut u = sol.x.rows(0, self.m).into_owned();
        if flagged {
            u = clamp_input(&u, self.cfg.a_bounds);
        }
        let diag = StepDiagnostics {
            status: Some(sol.status),
            objective: sol.objective,
            kkt_residual: sol.kkt_residual,
            iterations: sol.iterations,
            solve_time,
            flagged,
            decision_dim: self.m * self.horizon,
        };
        Ok((u, diag))
    }

    fn name(&self) -> &str {
        "mpc"
    }

    fn decision_dim(&self) -> usize {
        self.m * self.horizon
    }
}
