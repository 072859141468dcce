//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use deeplcc::controller::{
    CavController, ControllerConfig, ControllerError, CostWeights, DeepLccController, MpcController, Observation,
    StageConstraints, StageCost, StepDiagnostics,
};
use deeplcc::datamat::{partition, BlockMatrixSet, MatrixKind, Series};
use deeplcc::model::{
    build_continuous, discretize, linearize, AffineSystem, Equilibrium, FleetTopology, LiftedResponse, LinearDiscreteModel,
    OvmParams,
};
use deeplcc::seed::{stream_rng, Stream};
use deeplcc::sim::{collect_linear, simulate_linear};
use deeplcc::qp::QuadraticProgram;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn uniform_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.gen_range(-1.0..1.0))
}

/// Strictly convex QP with a known feasible point; `one_sided` leaves every upper bound infinite.
pub fn random_qp(rng: &mut ChaCha8Rng, d: usize, p: usize, r: usize, one_sided: bool) -> QuadraticProgram {
    let m = uniform_matrix(rng, d, d);
    let pm = m.transpose() * &m + DMatrix::identity(d, d) * 0.5;
    let q = uniform_vector(rng, d) * 3.0;
    let a_eq = uniform_matrix(rng, p, d);
    let a_in = uniform_matrix(rng, r, d);
    let x_feas = uniform_vector(rng, d);
    let b_eq = &a_eq * &x_feas;
    let ax = &a_in * &x_feas;
    let lo = DVector::from_fn(r, |i, _| ax[i] - rng.gen_range(0.0..0.5));
    let hi = DVector::from_fn(r, |i, _| if one_sided { f64::INFINITY } else { ax[i] + rng.gen_range(0.0..0.5) });
    QuadraticProgram { p: pm, q, a_eq, b_eq, a_in, lo, hi }
}

/// Inequality rows as `(row, sign, bound)` meaning `sign * a_row . x >= bound`.
fn one_sided_rows(qp: &QuadraticProgram) -> Vec<(usize, f64, f64)> {
    let mut out = Vec::new();
    for i in 0..qp.lo.len() {
        if qp.lo[i].is_finite() {
            out.push((i, 1.0, qp.lo[i]));
        }
        if qp.hi[i].is_finite() {
            out.push((i, -1.0, -qp.hi[i]));
        }
    }
    out
}

fn feasible(qp: &QuadraticProgram, x: &DVector<f64>, tol: f64) -> bool {
    let ax = &qp.a_in * x;
    (0..ax.len()).all(|i| ax[i] >= qp.lo[i] - tol && ax[i] <= qp.hi[i] + tol)
}

/// Minimum objective over all primal-feasible stationary points of active subsets.
pub fn enumeration_oracle(qp: &QuadraticProgram) -> Option<f64> {
    let rows = one_sided_rows(qp);
    assert!(rows.len() <= 16, "enumeration limited to small instances");
    let d = qp.dim();
    let p = qp.a_eq.nrows();
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << rows.len()) {
        let set: Vec<_> = (0..rows.len()).filter(|k| mask & (1 << k) != 0).map(|k| rows[k]).collect();
        // both sides of one row can only be active together when lo == hi
        if set.windows(2).any(|w| w[0].0 == w[1].0) {
            continue;
        }
        let na = p + set.len();
        if na > d {
            continue;
        }
        let mut kkt = DMatrix::zeros(d + na, d + na);
        let mut rhs = DVector::zeros(d + na);
        kkt.view_mut((0, 0), (d, d)).copy_from(&qp.p);
        rhs.rows_mut(0, d).copy_from(&(-&qp.q));
        for i in 0..p {
            for j in 0..d {
                kkt[(d + i, j)] = qp.a_eq[(i, j)];
                kkt[(j, d + i)] = qp.a_eq[(i, j)];
            }
            rhs[d + i] = qp.b_eq[i];
        }
        for (k, &(row, sign, bound)) in set.iter().enumerate() {
            for j in 0..d {
                kkt[(d + p + k, j)] = sign * qp.a_in[(row, j)];
                kkt[(j, d + p + k)] = sign * qp.a_in[(row, j)];
            }
            rhs[d + p + k] = bound;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        if !sol.iter().all(|v| v.is_finite()) {
            continue;
        }
        let x = sol.rows(0, d).into_owned();
        if (&qp.a_eq * &x - &qp.b_eq).amax() > 1e-8 || !feasible(qp, &x, 1e-9) {
            continue;
        }
        let f = qp.objective(&x);
        if best.is_none_or(|b| f < b) {
            best = Some(f);
        }
    }
    best
}

/// Dual coordinate ascent (Hildreth) on the inequality-form QP; equalities
/// enter as opposite inequality pairs.
pub fn hildreth_oracle(qp: &QuadraticProgram, sweeps: usize) -> f64 {
    let d = qp.dim();
    // constraints c_k . x <= h_k
    let mut c: Vec<DVector<f64>> = Vec::new();
    let mut h: Vec<f64> = Vec::new();
    for i in 0..qp.a_eq.nrows() {
        let row = qp.a_eq.row(i).transpose();
        c.push(row.clone());
        h.push(qp.b_eq[i]);
        c.push(-row);
        h.push(-qp.b_eq[i]);
    }
    for (row, sign, bound) in one_sided_rows(qp) {
        c.push(-qp.a_in.row(row).transpose() * sign);
        h.push(-bound);
    }
    let pinv = qp.p.clone().try_inverse().expect("definite");
    let x_unc = -&pinv * &qp.q;
    // x = x_unc - Pinv C' lambda
    let pc: Vec<DVector<f64>> = c.iter().map(|ck| &pinv * ck).collect();
    let diag: Vec<f64> = c.iter().zip(&pc).map(|(ck, pk)| ck.dot(pk)).collect();
    let mut lambda = vec![0.0; c.len()];
    let mut x = x_unc.clone();
    for _ in 0..sweeps {
        let mut change: f64 = 0.0;
        for k in 0..c.len() {
            let viol = c[k].dot(&x) - h[k];
            let next = (lambda[k] + viol / diag[k]).max(0.0);
            let delta = next - lambda[k];
            if delta != 0.0 {
                x.axpy(-delta, &pc[k], 1.0);
                lambda[k] = next;
                change = change.max(delta.abs());
            }
        }
        if change < 1e-14 {
            break;
        }
    }
    let _ = d;
    qp.objective(&x)
}

/// Random affine system with `nx <= 3` states, `m <= 2` inputs and a scalar
/// disturbance; offsets are zero unless `offsets`.
pub fn random_system(rng: &mut ChaCha8Rng, offsets: bool) -> AffineSystem {
    let nx = rng.gen_range(1..=3);
    let m = rng.gen_range(1..=2);
    let ny = rng.gen_range(1..=3);
    let a = uniform_matrix(rng, nx, nx) * (0.95 / nx as f64);
    let zero_or = |rng: &mut ChaCha8Rng, len: usize| if offsets { uniform_vector(rng, len) * 3.0 } else { DVector::zeros(len) };
    AffineSystem {
        a,
        input: uniform_matrix(rng, nx, m),
        h: uniform_vector(rng, nx),
        output: uniform_matrix(rng, ny, nx),
        state_offset: zero_or(rng, nx),
        output_offset: zero_or(rng, ny),
    }
}

/// Recorded `(u, eps, y)` of `sys` under the given input and disturbance samples.
pub fn record(sys: &AffineSystem, x0: &DVector<f64>, u: &[DVector<f64>], eps: &[f64]) -> (Series, Series, Series) {
    let mut x = x0.clone();
    let mut ys = Vec::with_capacity(u.len());
    for (uk, &ek) in u.iter().zip(eps) {
        ys.push(sys.measure(&x));
        x = sys.step(&x, uk, ek);
    }
    (Series::from_samples(u).unwrap(), Series::from_scalars(eps).unwrap(), Series::from_samples(&ys).unwrap())
}

/// I.i.d. uniform inputs and disturbances.
pub fn white_inputs(rng: &mut ChaCha8Rng, m: usize, len: usize) -> (Vec<DVector<f64>>, Vec<f64>) {
    let u = (0..len).map(|_| uniform_vector(rng, m)).collect();
    let eps = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (u, eps)
}

/// A fresh window `[u_ini; eps_ini; y_ini; u_f; eps_f; y_f]` from a random
/// initial state, built with the lifted response.
pub fn random_window(rng: &mut ChaCha8Rng, sys: &AffineSystem, t_ini: usize, horizon: usize) -> DVector<f64> {
    let len = t_ini + horizon;
    let (m, ny) = (sys.input_dim(), sys.output_dim());
    let lifted = LiftedResponse::new(sys, len);
    let u = uniform_vector(rng, m * len);
    let eps = uniform_vector(rng, len);
    let x0 = uniform_vector(rng, sys.state_dim()) * 5.0;
    let y = lifted.predict(&u, &eps, &x0);
    let parts = [
        u.rows(0, m * t_ini).into_owned(),
        eps.rows(0, t_ini).into_owned(),
        y.rows(0, ny * t_ini).into_owned(),
        u.rows(m * t_ini, m * horizon).into_owned(),
        eps.rows(t_ini, horizon).into_owned(),
        y.rows(ny * t_ini, ny * horizon).into_owned(),
    ];
    DVector::from_iterator(parts.iter().map(|p| p.len()).sum(), parts.iter().flat_map(|p| p.iter().copied()))
}

/// Relative least-squares residual of `w` against the span of the stacked
/// blocks, with the row `1'g = 1` appended when `ones_row`.
pub fn span_residual(blocks: &BlockMatrixSet, w: &DVector<f64>, ones_row: bool) -> f64 {
    let mut h = blocks.stacked();
    let mut target = w.clone();
    if ones_row {
        let rows = h.nrows();
        h = h.insert_row(rows, 1.0);
        target = target.push(1.0);
    }
    // independent rows by twice-applied Gram-Schmidt; nalgebra's SVD vectors lose accuracy here
    let scale = h.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for (i, row) in h.row_iter().enumerate() {
        let mut v = row.transpose();
        for _ in 0..2 {
            for b in &basis {
                v -= b * b.dot(&v);
            }
        }
        let norm = v.norm();
        if norm > 1e-10 * scale {
            basis.push(v / norm);
            keep.push(i);
        }
    }
    let sub = h.select_rows(&keep);
    let t_sub = target.select_rows(&keep);
    // minimum-norm solution of the full-row-rank subsystem: sub^T = Q R, g = Q R^-T t
    let qr = sub.transpose().qr();
    let z = qr.r().transpose().solve_lower_triangular(&t_sub).unwrap();
    let g = qr.q() * z;
    (&h * g - &target).norm() / target.norm().max(1.0)
}

/// Discretized platoon linearized at 15 m/s.
pub fn linear_platoon(fleet: &FleetTopology, dt: f64) -> LinearDiscreteModel {
    let p = OvmParams::default();
    let eq = Equilibrium::from_velocity(&p, 15.0).unwrap();
    discretize(&build_continuous(fleet, &linearize(&p, &eq).unwrap()), dt).unwrap()
}

/// Unregularized Hankel setup with bounds far outside the reachable range.
pub fn inactive_constraint_config(t_ini: usize, horizon: usize) -> ControllerConfig {
    ControllerConfig {
        t_ini,
        horizon,
        s_err_bounds: (-1e4, 1e4),
        v_err_bounds: (-1e4, 1e4),
        a_bounds: (-1e4, 1e4),
        matrix_kind: MatrixKind::Hankel,
        regularized: false,
        ones_row: false,
        ..ControllerConfig::default()
    }
}

/// Applies a fixed input for the first steps, then defers to `inner`.
pub struct Scripted<C> {
    pub prefix: Vec<DVector<f64>>,
    pub inner: C,
    pub k: usize,
}

impl<C: CavController> CavController for Scripted<C> {
    fn step(&mut self, obs: &Observation<'_>) -> Result<(DVector<f64>, StepDiagnostics), ControllerError> {
        self.k += 1;
        match self.prefix.get(self.k - 1) {
            Some(u) => Ok((u.clone(), StepDiagnostics::warmup(self.inner.decision_dim()))),
            None => self.inner.step(obs),
        }
    }

    fn name(&self) -> &str {
        self.inner.name()
    }

    fn decision_dim(&self) -> usize {
        self.inner.decision_dim()
    }
}

/// Closed-loop input sequences of unregularized DeeP-LCC and MPC on the
/// noise-free linear platoon with one CAV behind the head vehicle and one
/// HDV behind it. Both start from the same random state and apply the same
/// constant input while the data-driven buffer fills.
pub fn deepc_mpc_closed_loops(seed: u64, steps: usize) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let fleet = FleetTopology::new(2, &[1]).unwrap();
    let model = linear_platoon(&fleet, 0.05);
    let cfg = inactive_constraint_config(4, 10);
    let mut rng = stream_rng(seed, Stream::Excitation);
    let data = collect_linear(&model, 300, 1.0, 1.0, &mut rng).unwrap();
    let blocks = partition(MatrixKind::Hankel, &data.u, &data.eps, &data.y, cfg.t_ini, cfg.horizon).unwrap();
    let weights = CostWeights::new(&fleet, &cfg);
    let cons = StageConstraints::plain(&fleet, &cfg);
    let warm = DVector::from_element(1, 0.3);
    let mut deepc = DeepLccController::new(&blocks, &StageCost::plain(&weights), &cons, &cfg, false, warm.clone()).unwrap();
    let mpc = MpcController::new(&model, &weights, &cons, &cfg).unwrap();
    let mut mpc = Scripted { prefix: vec![warm; cfg.t_ini], inner: mpc, k: 0 };
    let x0 = uniform_vector(&mut rng, model.state_dim()) * 2.0;
    let eps = vec![0.0; steps];
    let (u_d, _) = simulate_linear(&model, &mut deepc, &x0, &eps).unwrap();
    let (u_m, _) = simulate_linear(&model, &mut mpc, &x0, &eps).unwrap();
    (u_d, u_m)
}

/// Samples giving comfortable margin over the excitation needed by the
/// fundamental lemma for a system with `nx` states and `inputs` input channels
/// (disturbance included); one order more when `affine`.
pub fn lemma_samples(kind: MatrixKind, inputs: usize, nx: usize, depth: usize, affine: bool) -> usize {
    let extra = usize::from(affine);
    match kind {
        MatrixKind::Hankel => 2 * ((inputs + 1) * (depth + nx + extra)),
        MatrixKind::Page => depth * ((inputs * depth + 1) * (nx + 1 + extra) + 5),
    }
}

/// Full rank of `[B H, A [B H], ..]`.
pub fn controllable(sys: &AffineSystem) -> bool {
    let nx = sys.state_dim();
    let mut bh = DMatrix::zeros(nx, sys.input_dim() + 1);
    bh.columns_mut(0, sys.input_dim()).copy_from(&sys.input);
    bh.set_column(sys.input_dim(), &sys.h);
    let mut ctrb = DMatrix::zeros(nx, bh.ncols() * nx);
    let mut block = bh;
    for k in 0..nx {
        ctrb.columns_mut(k * block.ncols(), block.ncols()).copy_from(&block);
        block = &sys.a * &block;
    }
    ctrb.rank(1e-9) == nx
}
