//! Car-following dynamics of the mixed platoon and its linear models.
//!
//! Human-driven vehicles follow the optimal velocity model (OVM); automated
//! vehicles are double integrators driven by their commanded acceleration.
//! Around an equilibrium `(s*, v*)` the platoon linearizes to
//! `x' = A x + B u + H eps`, with `x` stacking `(spacing error, velocity
//! error)` per vehicle and `eps` the head vehicle's velocity error.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid fleet topology: {0}")]
    InvalidTopology(String),
    #[error("invalid OVM parameters: {0}")]
    InvalidParams(String),
    #[error("equilibrium velocity {v_star} m/s outside (0, {v_max})")]
    EquilibriumOutOfRange { v_star: f64, v_max: f64 },
    #[error("linearization is not well posed: alpha1 - alpha2*alpha3 + alpha3^2 = {value:e}")]
    WellPosednessViolation { value: f64 },
    #[error("invalid sampling interval {0}")]
    InvalidInterval(f64),
}

/// Vehicle index sets of a platoon of `n` followers behind a head vehicle.
///
/// Indices are 1-based and ordered front to back; the head vehicle is 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetTopology {
    n: usize,
    cav: Vec<usize>,
    hdv: Vec<usize>,
}

impl FleetTopology {
    pub fn new(n: usize, cav: &[usize]) -> Result<Self, ModelError> {
        if n == 0 {
            return Err(ModelError::InvalidTopology("fleet needs at least one follower".into()));
        }
        if cav.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::InvalidTopology("CAV indices must be strictly increasing".into()));
        }
        if let Some(bad) = cav.iter().find(|&&i| i == 0 || i > n) {
            return Err(ModelError::InvalidTopology(format!("CAV index {bad} outside 1..={n}")));
        }
        let hdv = (1..=n).filter(|i| !cav.contains(i)).collect();
        Ok(Self { n, cav: cav.to_vec(), hdv })
    }

    /// Number of followers (head vehicle excluded).
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of automated vehicles.
    pub fn m(&self) -> usize {
        self.cav.len()
    }

    pub fn cav_indices(&self) -> &[usize] {
        &self.cav
    }

    pub fn hdv_indices(&self) -> &[usize] {
        &self.hdv
    }

    pub fn is_cav(&self, vehicle: usize) -> bool {
        self.cav.binary_search(&vehicle).is_ok()
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n
    }

    /// Output dimension `n + m`: CAV spacing and velocity errors, then HDV velocity errors.
    pub fn output_dim(&self) -> usize {
        self.n + self.cav.len()
    }

    /// Output matrix selecting `(s_i, v_i)` for each CAV, then `v_j` for each HDV.
    pub fn output_matrix(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.output_dim(), self.state_dim());
        let mut row = 0;
        for &i in &self.cav {
            c[(row, 2 * (i - 1))] = 1.0;
            c[(row + 1, 2 * i - 1)] = 1.0;
            row += 2;
        }
        for &j in &self.hdv {
            c[(row, 2 * j - 1)] = 1.0;
            row += 1;
        }
        c
    }

    /// Applies the output map to a full error state.
    pub fn measure(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.output_dim());
        let mut row = 0;
        for &i in &self.cav {
            y[row] = x[2 * (i - 1)];
            y[row + 1] = x[2 * i - 1];
            row += 2;
        }
        for &j in &self.hdv {
            y[row] = x[2 * j - 1];
            row += 1;
        }
        y
    }
}

/// Optimal velocity model `F(s, s', v) = alpha (V(s) - v) + beta s'` with a
/// cosine range policy `V`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OvmParams {
    pub alpha: f64,
    pub beta: f64,
    pub s_st: f64,
    pub s_go: f64,
    pub v_max: f64,
}

impl Default for OvmParams {
    fn default() -> Self {
        Self { alpha: 0.6, beta: 0.9, s_st: 5.0, s_go: 35.0, v_max: 30.0 }
    }
}

impl OvmParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.alpha > 0.0
            && self.beta >= 0.0
            && self.v_max > 0.0
            && 0.0 < self.s_st
            && self.s_st < self.s_go
            && [self.alpha, self.beta, self.s_st, self.s_go, self.v_max].iter().all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidParams(format!("{self:?}")))
        }
    }

    /// Spacing-dependent desired velocity.
    pub fn desired_velocity(&self, s: f64) -> f64 {
        if s <= self.s_st {
            0.0
        } else if s >= self.s_go {
            self.v_max
        } else {
            0.5 * self.v_max * (1.0 - (PI * (s - self.s_st) / (self.s_go - self.s_st)).cos())
        }
    }

    /// Derivative of [`Self::desired_velocity`] with respect to spacing.
    pub fn desired_velocity_slope(&self, s: f64) -> f64 {
        if s <= self.s_st || s >= self.s_go {
            0.0
        } else {
            let w = PI / (self.s_go - self.s_st);
            0.5 * self.v_max * w * (w * (s - self.s_st)).sin()
        }
    }

    /// Inverse of the range policy on the open band `(s_st, s_go)`.
    pub fn spacing_for_velocity(&self, v: f64) -> Option<f64> {
        if !(v > 0.0 && v < self.v_max) {
            return None;
        }
        // V is strictly increasing on the band; bisect to 1e-10 m.
        let (mut lo, mut hi) = (self.s_st, self.s_go);
        while hi - lo > 1e-10 {
            let mid = 0.5 * (lo + hi);
            if self.desired_velocity(mid) < v {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }
}

/// HDV acceleration from spacing `s`, relative speed `s_dot` and own speed `v`.
pub fn ovm_acceleration(p: &OvmParams, s: f64, s_dot: f64, v: f64) -> f64 {
    p.alpha * (p.desired_velocity(s) - v) + p.beta * s_dot
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub s_star: f64,
    pub v_star: f64,
}

impl Equilibrium {
    /// Equilibrium at velocity `v_star`, spacing solved from `V(s*) = v*`.
    pub fn from_velocity(p: &OvmParams, v_star: f64) -> Result<Self, ModelError> {
        p.validate()?;
        let s_star = p
            .spacing_for_velocity(v_star)
            .ok_or(ModelError::EquilibriumOutOfRange { v_star, v_max: p.v_max })?;
        Ok(Self { s_star, v_star })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HdvLinearization {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl HdvLinearization {
    /// `alpha1 - alpha2 alpha3 + alpha3^2`, nonzero for a stabilizable and observable platoon.
    pub fn well_posedness(&self) -> f64 {
        self.alpha1 - self.alpha2 * self.alpha3 + self.alpha3 * self.alpha3
    }
}

/// First-order expansion of the OVM at the equilibrium.
pub fn linearize(p: &OvmParams, eq: &Equilibrium) -> Result<HdvLinearization, ModelError> {
    p.validate()?;
    let lin = HdvLinearization {
        alpha1: p.alpha * p.desired_velocity_slope(eq.s_star),
        alpha2: p.alpha + p.beta,
        alpha3: p.beta,
    };
    let value = lin.well_posedness();
    if value.abs() <= 1e-12 {
        return Err(ModelError::WellPosednessViolation { value });
    }
    Ok(lin)
}

/// Continuous-time linear platoon model.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearContinuousModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub h: DVector<f64>,
    pub c: DMatrix<f64>,
}

pub fn build_continuous(fleet: &FleetTopology, lin: &HdvLinearization) -> LinearContinuousModel {
    let n = fleet.n();
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    for i in 1..=n {
        let r = 2 * (i - 1);
        let hdv = !fleet.is_cav(i);
        a[(r, r + 1)] = -1.0;
        if hdv {
            a[(r + 1, r)] = lin.alpha1;
            a[(r + 1, r + 1)] = -lin.alpha2;
        }
        if i > 1 {
            a[(r, r - 1)] = 1.0;
            if hdv {
                a[(r + 1, r - 1)] = lin.alpha3;
            }
        }
    }
    let mut b = DMatrix::zeros(2 * n, fleet.m());
    for (k, &i) in fleet.cav_indices().iter().enumerate() {
        b[(2 * i - 1, k)] = 1.0;
    }
    let mut h = DVector::zeros(2 * n);
    h[0] = 1.0;
    // A CAV in front does not react to the head vehicle's speed.
    if !fleet.is_cav(1) {
        h[1] = lin.alpha3;
    }
    LinearContinuousModel { a, b, h, c: fleet.output_matrix() }
}

/// Zero-order-hold discretization of [`LinearContinuousModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDiscreteModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub h: DVector<f64>,
    pub c: DMatrix<f64>,
    pub dt: f64,
}

impl LinearDiscreteModel {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    /// Combined input matrix `[H_d, B_d]` acting on `(eps, u)`.
    pub fn b_hat(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        let mut out = DMatrix::zeros(n, self.input_dim() + 1);
        out.set_column(0, &self.h);
        out.view_mut((0, 1), (n, self.input_dim())).copy_from(&self.b);
        out
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, eps: f64) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.h * eps
    }
}

pub fn discretize(model: &LinearContinuousModel, dt: f64) -> Result<LinearDiscreteModel, ModelError> {
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(ModelError::InvalidInterval(dt));
    }
    let n = model.a.nrows();
    let m = model.b.ncols();
    // exp([[A, H, B], [0, 0, 0]] dt) = [[A_d, H_d, B_d], [0, I, 0]]
    let mut aug = DMatrix::zeros(n + m + 1, n + m + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(&model.a);
    aug.view_mut((0, n), (n, 1)).copy_from(&model.h);
    aug.view_mut((0, n + 1), (n, m)).copy_from(&model.b);
    let e = expm(&(aug * dt));
    Ok(LinearDiscreteModel {
        a: e.view((0, 0), (n, n)).into_owned(),
        h: e.view((0, n), (n, 1)).column(0).into_owned(),
        b: e.view((0, n + 1), (n, m)).into_owned(),
        c: model.c.clone(),
        dt,
    })
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = m.nrows();
    let norm = one_norm(m);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = m / 2f64.powi(squarings);
    let mut sum = DMatrix::identity(dim, dim);
    let mut term = DMatrix::identity(dim, dim);
    for k in 1..64 {
        term = &term * &scaled / k as f64;
        sum += &term;
        // Truncate at machine precision, well inside the 1e-12 series tolerance.
        if one_norm(&term) <= f64::EPSILON * one_norm(&sum) {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Discrete affine system `x+ = A x + B_in v + H eps + l_x`, `y = C_out x + l_y`.
///
/// The plain platoon model has `B_in = B_d`, `C_out = C_d` and zero offsets;
/// masked variants substitute their transformed input and output maps.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineSystem {
    pub a: DMatrix<f64>,
    pub input: DMatrix<f64>,
    pub h: DVector<f64>,
    pub output: DMatrix<f64>,
    pub state_offset: DVector<f64>,
    pub output_offset: DVector<f64>,
}

impl AffineSystem {
    pub fn plain(model: &LinearDiscreteModel) -> Self {
        Self {
            a: model.a.clone(),
            input: model.b.clone(),
            h: model.h.clone(),
            output: model.c.clone(),
            state_offset: DVector::zeros(model.state_dim()),
            output_offset: DVector::zeros(model.output_dim()),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.input.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.output.nrows()
    }

    pub fn step(&self, x: &DVector<f64>, v: &DVector<f64>, eps: f64) -> DVector<f64> {
        &self.a * x + &self.input * v + &self.h * eps + &self.state_offset
    }

    pub fn measure(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.output * x + &self.output_offset
    }
}

/// Stacked output response over `len` steps:
/// `y_stack = T_u v_stack + T_eps eps_stack + T_x x0 + T_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedResponse {
    pub t_u: DMatrix<f64>,
    pub t_eps: DMatrix<f64>,
    pub t_x: DMatrix<f64>,
    pub t_l: DVector<f64>,
    pub len: usize,
}

impl LiftedResponse {
    pub fn new(sys: &AffineSystem, len: usize) -> Self {
        let (nx, nu, ny) = (sys.state_dim(), sys.input_dim(), sys.output_dim());
        let mut t_u = DMatrix::zeros(ny * len, nu * len);
        let mut t_eps = DMatrix::zeros(ny * len, len);
        let mut t_x = DMatrix::zeros(ny * len, nx);
        let mut t_l = DVector::zeros(ny * len);

        // markov[k] = C A^k, built incrementally
        let mut ca_pow = sys.output.clone();
        let mut ca_list = Vec::with_capacity(len);
        for _ in 0..len {
            ca_list.push(ca_pow.clone());
            ca_pow = &ca_pow * &sys.a;
        }
        let mut offset_acc = DVector::zeros(ny);
        for k in 0..len {
            t_x.view_mut((k * ny, 0), (ny, nx)).copy_from(&ca_list[k]);
            if k > 0 {
                offset_acc += &ca_list[k - 1] * &sys.state_offset;
            }
            t_l.rows_mut(k * ny, ny).copy_from(&(&sys.output_offset + &offset_acc));
            for j in 0..k {
                let ca = &ca_list[k - 1 - j];
                t_u.view_mut((k * ny, j * nu), (ny, nu)).copy_from(&(ca * &sys.input));
                t_eps.view_mut((k * ny, j), (ny, 1)).copy_from(&(ca * &sys.h));
            }
        }
        Self { t_u, t_eps, t_x, t_l, len }
    }

    /// Convenience for the plain model with the `T_ini + N` window.
    pub fn for_model(model: &LinearDiscreteModel, t_ini: usize, horizon: usize) -> Self {
        Self::new(&AffineSystem::plain(model), t_ini + horizon)
    }

    pub fn predict(&self, inputs: &DVector<f64>, eps: &DVector<f64>, x0: &DVector<f64>) -> DVector<f64> {
        &self.t_u * inputs + &self.t_eps * eps + &self.t_x * x0 + &self.t_l
    }
}
