//! Dense convex quadratic programming.
//!
//! Solves `min 1/2 x'Px + q'x` subject to `A_eq x = b_eq` and
//! `lo <= A_in x <= hi`. The equality constraints are eliminated with a
//! column-pivoted QR of `A_eq'`; the reduced problem is whitened to an
//! identity Hessian and solved by the Goldfarb-Idnani dual active-set
//! method. The factorization depends only on `(P, A_eq, A_in)`, so a
//! [`PreparedQp`] can be reused across receding-horizon steps in which only
//! `q`, `b_eq` and the bounds change.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bounds at or beyond this magnitude are treated as infinite.
pub const INFINITE_BOUND: f64 = 1e20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("invalid quadratic program: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl QuadraticProgram {
    /// Unconstrained program of dimension `q.len()`.
    pub fn unconstrained(p: DMatrix<f64>, q: DVector<f64>) -> Self {
        let d = q.len();
        Self {
            p,
            q,
            a_eq: DMatrix::zeros(0, d),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, d),
            lo: DVector::zeros(0),
            hi: DVector::zeros(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let d = self.dim();
        let bad = |msg: String| Err(QpError::Invalid(msg));
        if self.p.shape() != (d, d) {
            return bad(format!("P is {:?}, expected {d}x{d}", self.p.shape()));
        }
        if self.a_eq.ncols() != d || self.a_eq.nrows() != self.b_eq.len() {
            return bad("equality block dimensions disagree".into());
        }
        if self.a_in.ncols() != d || self.a_in.nrows() != self.lo.len() || self.lo.len() != self.hi.len() {
            return bad("inequality block dimensions disagree".into());
        }
        let scale = self.p.amax().max(1.0);
        for i in 0..d {
            for j in 0..i {
                if (self.p[(i, j)] - self.p[(j, i)]).abs() > 1e-12 * scale {
                    return bad(format!("P not symmetric at ({i}, {j})"));
                }
            }
        }
        if let Some(i) = (0..self.lo.len()).find(|&i| self.lo[i] > self.hi[i]) {
            return bad(format!("lo > hi in inequality row {i}"));
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|x| x.is_finite());
        if !finite(&self.p) || !finite(&self.a_eq) || !finite(&self.a_in) {
            return bad("non-finite matrix entry".into());
        }
        if self.q.iter().chain(self.b_eq.iter()).any(|x| !x.is_finite()) {
            return bad("non-finite vector entry".into());
        }
        if self.lo.iter().chain(self.hi.iter()).any(|x| x.is_nan()) {
            return bad("NaN bound".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QpSettings {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self { abs_tol: 1e-8, rel_tol: 1e-9, max_iter: 20000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    PrimalInfeasible,
    MaxIterations,
}

impl QpStatus {
    pub fn name(self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::PrimalInfeasible => "primal_infeasible",
            QpStatus::MaxIterations => "max_iterations",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub objective: f64,
    pub iterations: usize,
    /// Signed inequality multipliers: positive at a lower bound, negative at an upper bound.
    pub mu: DVector<f64>,
}

/// Prepares and solves in one call.
pub fn solve(qp: &QuadraticProgram, settings: &QpSettings) -> Result<QpSolution, QpError> {
    Ok(PreparedQp::new(&qp.p, &qp.a_eq, &qp.a_in)?.solve(&qp.q, &qp.b_eq, &qp.lo, &qp.hi, settings))
}

/// How the reduced Hessian was whitened.
#[derive(Debug, Clone)]
enum Reduction {
    /// `T' P T = I` on the whole equality null space.
    Definite,
    /// `T' P T = I` on the range of the reduced Hessian; `kernel` spans the rest.
    Semidefinite { kernel: DMatrix<f64> },
}

/// Factorization of `(P, A_eq, A_in)` shared by solves that differ only in
/// `q`, `b_eq` and the bounds.
#[derive(Debug, Clone)]
pub struct PreparedQp {
    p: DMatrix<f64>,
    a_eq: DMatrix<f64>,
    a_in: DMatrix<f64>,
    /// Orthonormal basis of the range of `A_eq'`.
    q1: DMatrix<f64>,
    /// Upper-trapezoidal factor of the pivoted `A_eq'`, first `rank` rows.
    r1: DMatrix<f64>,
    perm: Vec<usize>,
    /// Orthonormal basis of the null space of `A_eq`.
    z: DMatrix<f64>,
    /// Whitened null-space basis: `x = x0 + t v`.
    t: DMatrix<f64>,
    /// `A_in t`.
    g: DMatrix<f64>,
    g_norms: Vec<f64>,
    reduction: Reduction,
    /// Proximal fallback factor, built on first use.
    prox: Option<(f64, DMatrix<f64>, DMatrix<f64>)>,
}

impl PreparedQp {
    pub fn new(p: &DMatrix<f64>, a_eq: &DMatrix<f64>, a_in: &DMatrix<f64>) -> Result<Self, QpError> {
        let d = p.nrows();
        if p.ncols() != d || a_eq.ncols() != d || a_in.ncols() != d {
            return Err(QpError::Invalid("matrix column counts disagree".into()));
        }
        let p = (p + p.transpose()) * 0.5;
        let (q_full, r1, perm, rank) = pivoted_qr(&a_eq.transpose(), 1e-10);
        let q1 = q_full.columns(0, rank).into_owned();
        let z = q_full.columns(rank, d - rank).into_owned();
        let h = {
            let pz = &p * &z;
            let mut h = z.transpose() * pz;
            symmetrize(&mut h);
            h
        };
        let hmax = h.diagonal().iter().cloned().fold(0.0, f64::max);
        let chol = nalgebra::Cholesky::new(h.clone()).filter(|c| {
            let l = c.l_dirty();
            (0..l.nrows()).all(|i| l[(i, i)] * l[(i, i)] > 1e-10 * hmax)
        });
        let (t, reduction) = match chol {
            Some(c) => {
                // t = z L^{-T}, computed as (L^{-1} z')'
                let mut zt = z.transpose();
                c.l_dirty().solve_lower_triangular_mut(&mut zt);
                (zt.transpose(), Reduction::Definite)
            }
            None => {
                let eig = SymmetricEigen::new(h);
                let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
                let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] > 1e-9 * lmax).collect();
                let drop: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] <= 1e-9 * lmax).collect();
                let mut w = DMatrix::zeros(z.ncols(), keep.len());
                for (c, &i) in keep.iter().enumerate() {
                    w.set_column(c, &(eig.eigenvectors.column(i) / eig.eigenvalues[i].sqrt()));
                }
                let mut k = DMatrix::zeros(z.ncols(), drop.len());
                for (c, &i) in drop.iter().enumerate() {
                    k.set_column(c, &eig.eigenvectors.column(i));
                }
                (&z * w, Reduction::Semidefinite { kernel: &z * k })
            }
        };
        let g = a_in * &t;
        let g_norms = g.row_iter().map(|r| r.norm()).collect();
        Ok(Self { p, a_eq: a_eq.clone(), a_in: a_in.clone(), q1, r1, perm, z, t, g, g_norms, reduction, prox: None })
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    /// Rank of the equality constraint matrix.
    pub fn eq_rank(&self) -> usize {
        self.q1.ncols()
    }

    /// True when the reduced Hessian is singular on the equality null space.
    pub fn is_semidefinite(&self) -> bool {
        matches!(self.reduction, Reduction::Semidefinite { .. })
    }

    pub fn solve(
        &mut self,
        q: &DVector<f64>,
        b_eq: &DVector<f64>,
        lo: &DVector<f64>,
        hi: &DVector<f64>,
        settings: &QpSettings,
    ) -> QpSolution {
        let d = self.dim();
        assert_eq!(q.len(), d, "q dimension");
        assert_eq!(b_eq.len(), self.a_eq.nrows(), "b_eq dimension");
        assert_eq!(lo.len(), self.a_in.nrows(), "lo dimension");
        assert_eq!(hi.len(), self.a_in.nrows(), "hi dimension");

        let (x0, consistent) = self.particular_solution(b_eq, settings);
        if !consistent {
            return self.finish(x0, DVector::zeros(lo.len()), QpStatus::PrimalInfeasible, 0, q, b_eq, lo, hi, settings);
        }
        let grad0 = &self.p * &x0 + q;
        let kernel_visible = match &self.reduction {
            Reduction::Definite => false,
            Reduction::Semidefinite { kernel } => {
                let ck = (kernel.transpose() * &grad0).amax();
                let gk = (&self.a_in * kernel).amax();
                ck > 1e-9 * (1.0 + grad0.amax()) || gk > 1e-9 * (1.0 + self.a_in.amax())
            }
        };
        if kernel_visible {
            return self.solve_proximal(&x0, q, b_eq, lo, hi, settings);
        }
        let c = self.t.tr_mul(&grad0);
        let ax0 = &self.a_in * &x0;
        let bounds = shifted_bounds(lo, hi, &ax0);
        let out = dual_active_set(&self.g, &self.g_norms, &c, &bounds, settings);
        let x = &x0 + &self.t * &out.v;
        self.finish(x, out.mu, out.status, out.iterations, q, b_eq, lo, hi, settings)
    }

    /// Solves `A_eq x = b_eq` in the least-squares sense within the range of
    /// `A_eq'`; reports whether dependent rows are consistent.
    fn particular_solution(&self, b_eq: &DVector<f64>, settings: &QpSettings) -> (DVector<f64>, bool) {
        let rank = self.eq_rank();
        let bp = DVector::from_iterator(self.perm.len(), self.perm.iter().map(|&i| b_eq[i]));
        let mut w = DVector::zeros(rank);
        for i in 0..rank {
            let mut s = bp[i];
            for k in 0..i {
                s -= self.r1[(k, i)] * w[k];
            }
            w[i] = s / self.r1[(i, i)];
        }
        let tol = settings.abs_tol.sqrt() * (1.0 + bp.amax());
        let consistent = (rank..bp.len()).all(|j| {
            let s: f64 = (0..rank).map(|k| self.r1[(k, j)] * w[k]).sum();
            (s - bp[j]).abs() <= tol
        });
        (&self.q1 * w, consistent)
    }

    fn solve_proximal(
        &mut self,
        x0: &DVector<f64>,
        q: &DVector<f64>,
        b_eq: &DVector<f64>,
        lo: &DVector<f64>,
        hi: &DVector<f64>,
        settings: &QpSettings,
    ) -> QpSolution {
        if self.prox.is_none() {
            let mut h = self.z.transpose() * (&self.p * &self.z);
            symmetrize(&mut h);
            let rho = 1e-3 * h.diagonal().amax().max(1e-3);
            for i in 0..h.nrows() {
                h[(i, i)] += rho;
            }
            let chol = nalgebra::Cholesky::new(h).expect("shifted reduced Hessian is definite");
            let mut zt = self.z.transpose();
            chol.l_dirty().solve_lower_triangular_mut(&mut zt);
            let t = zt.transpose();
            let g = &self.a_in * &t;
            self.prox = Some((rho, t, g));
        }
        let (rho, t, g) = self.prox.as_ref().expect("built above");
        let g_norms: Vec<f64> = g.row_iter().map(|r| r.norm()).collect();
        let ax0 = &self.a_in * x0;
        let bounds = shifted_bounds(lo, hi, &ax0);
        let grad0 = &self.p * x0 + q;
        let mut x = x0.clone();
        let mut iterations = 0;
        let mut last = QpStatus::MaxIterations;
        let mut mu = DVector::zeros(lo.len());
        while iterations < settings.max_iter {
            // prox step: min f(x) + rho/2 |x - x_k|^2 over the feasible set
            let dx = &x - x0;
            let c = t.tr_mul(&(&grad0 - dx * *rho));
            let out = dual_active_set(g, &g_norms, &c, &bounds, settings);
            iterations += out.iterations.max(1);
            let next = x0 + t * &out.v;
            let change = (&next - &x).amax();
            x = next;
            mu = out.mu;
            last = out.status;
            if last != QpStatus::Optimal || change <= 1e-3 * settings.abs_tol * (1.0 + x.amax()) {
                break;
            }
        }
        let status = if last == QpStatus::Optimal && iterations >= settings.max_iter { QpStatus::MaxIterations } else { last };
        self.finish(x, mu, status, iterations, q, b_eq, lo, hi, settings)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        x: DVector<f64>,
        mu: DVector<f64>,
        status: QpStatus,
        iterations: usize,
        q: &DVector<f64>,
        b_eq: &DVector<f64>,
        lo: &DVector<f64>,
        hi: &DVector<f64>,
        settings: &QpSettings,
    ) -> QpSolution {
        let px = &self.p * &x;
        let atmu = self.a_in.tr_mul(&mu);
        let grad = &px + q - &atmu;
        let stationarity = (&grad - &self.q1 * self.q1.tr_mul(&grad)).amax();
        let eq = if b_eq.is_empty() { 0.0 } else { (&self.a_eq * &x - b_eq).amax() };
        let ax = &self.a_in * &x;
        let mut infeas: f64 = 0.0;
        let mut comp: f64 = 0.0;
        for i in 0..ax.len() {
            if lo[i] > -INFINITE_BOUND {
                infeas = infeas.max(lo[i] - ax[i]);
            }
            if hi[i] < INFINITE_BOUND {
                infeas = infeas.max(ax[i] - hi[i]);
            }
            if mu[i] > 0.0 {
                comp = comp.max((mu[i] * (ax[i] - lo[i])).abs());
            } else if mu[i] < 0.0 {
                comp = comp.max((mu[i] * (hi[i] - ax[i])).abs());
            }
        }
        let kkt_residual = stationarity.max(eq).max(infeas).max(comp);
        let scale = px.amax().max(q.amax()).max(atmu.amax()).max(if b_eq.is_empty() { 0.0 } else { b_eq.amax() });
        let status = match status {
            QpStatus::Optimal if kkt_residual > settings.abs_tol + settings.rel_tol * scale => QpStatus::MaxIterations,
            s => s,
        };
        let objective = 0.5 * x.dot(&px) + q.dot(&x);
        QpSolution { x, status, kkt_residual, objective, iterations, mu }
    }
}

fn symmetrize(h: &mut DMatrix<f64>) {
    let n = h.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (h[(i, j)] + h[(j, i)]);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
}

/// One-sided constraint `sign * g_row . v >= bound`.
#[derive(Debug, Clone, Copy)]
struct OneSided {
    row: usize,
    sign: f64,
    bound: f64,
}

fn shifted_bounds(lo: &DVector<f64>, hi: &DVector<f64>, ax0: &DVector<f64>) -> Vec<OneSided> {
    let mut out = Vec::with_capacity(2 * lo.len());
    for i in 0..lo.len() {
        if lo[i] > -INFINITE_BOUND {
            out.push(OneSided { row: i, sign: 1.0, bound: lo[i] - ax0[i] });
        }
        if hi[i] < INFINITE_BOUND {
            out.push(OneSided { row: i, sign: -1.0, bound: ax0[i] - hi[i] });
        }
    }
    out
}

struct DualOutcome {
    v: DVector<f64>,
    mu: DVector<f64>,
    status: QpStatus,
    iterations: usize,
}

/// Goldfarb-Idnani for `min 1/2 |v|^2 + c'v` subject to one-sided rows of `g`.
///
/// The active normals are kept as a thin QR factorization `N = Q R`.
fn dual_active_set(
    g: &DMatrix<f64>,
    g_norms: &[f64],
    c: &DVector<f64>,
    cons: &[OneSided],
    settings: &QpSettings,
) -> DualOutcome {
    let k = c.len();
    let mut v = -c;
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut qcols: Vec<DVector<f64>> = Vec::new();
    // rcols[j] holds column j of R, rows 0..=j
    let mut rcols: Vec<Vec<f64>> = Vec::new();
    let mut is_active = vec![false; cons.len()];
    let feas_tol = 0.1 * settings.abs_tol;
    let mut iterations = 0;

    let normal = |ci: usize| -> DVector<f64> { g.row(cons[ci].row).transpose() * cons[ci].sign };

    let status = 'outer: loop {
        // Pick the most violated constraint, scaled by its normal length.
        let gv = g * &v;
        let mut worst: Option<(usize, f64)> = None;
        for (ci, con) in cons.iter().enumerate() {
            if is_active[ci] {
                continue;
            }
            let s = con.sign * gv[con.row] - con.bound;
            if s < -feas_tol {
                let scaled = s / g_norms[con.row].max(1e-300);
                if worst.is_none_or(|(_, w)| scaled < w) {
                    worst = Some((ci, scaled));
                }
            }
        }
        let Some((p, _)) = worst else { break QpStatus::Optimal };
        let np = normal(p);
        let mut u_plus = 0.0;
        loop {
            iterations += 1;
            if iterations > settings.max_iter {
                break 'outer QpStatus::MaxIterations;
            }
            // d1 = Q' n, z = (I - Q Q') n with one reorthogonalization pass
            let mut d1: Vec<f64> = qcols.iter().map(|qc| qc.dot(&np)).collect();
            let mut z = np.clone();
            for (qc, &di) in qcols.iter().zip(&d1) {
                z.axpy(-di, qc, 1.0);
            }
            for (j, qc) in qcols.iter().enumerate() {
                let corr = qc.dot(&z);
                z.axpy(-corr, qc, 1.0);
                d1[j] += corr;
            }
            // r = R^{-1} d1
            let a = active.len();
            let mut r = vec![0.0; a];
            for i in (0..a).rev() {
                let mut s = d1[i];
                for j in i + 1..a {
                    s -= rcols[j][i] * r[j];
                }
                r[i] = s / rcols[i][i];
            }
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for j in 0..a {
                if r[j] > 0.0 {
                    let ratio = u[j] / r[j];
                    if ratio < t1 {
                        t1 = ratio;
                        drop_at = Some(j);
                    }
                }
            }
            let znorm = z.norm();
            let dependent = znorm <= 1e-12 * np.norm().max(1e-300) || k == 0;
            let sp = np.dot(&v) - cons[p].bound;
            let t2 = if dependent { f64::INFINITY } else { (-sp / (znorm * znorm)).max(0.0) };
            let t = t1.min(t2);
            if t == f64::INFINITY {
                break 'outer QpStatus::PrimalInfeasible;
            }
            if !dependent {
                v.axpy(t, &z, 1.0);
            }
            for j in 0..a {
                u[j] -= t * r[j];
            }
            u_plus += t;
            if t2 <= t1 {
                // full step: add p to the active set
                let qn = z / znorm;
                let mut rc = d1;
                rc.push(znorm);
                qcols.push(qn);
                rcols.push(rc);
                active.push(p);
                u.push(u_plus);
                is_active[p] = true;
                continue 'outer;
            }
            let j = drop_at.expect("finite t1 has a blocking index");
            is_active[active[j]] = false;
            active.remove(j);
            u.remove(j);
            drop_column(&mut qcols, &mut rcols, j);
        }
    };

    let mut mu = DVector::zeros(g.nrows());
    for (&ci, &uj) in active.iter().zip(&u) {
        mu[cons[ci].row] += cons[ci].sign * uj;
    }
    DualOutcome { v, mu, status, iterations }
}

/// Removes column `j` from `N = Q R` and restores triangularity with Givens rotations.
fn drop_column(qcols: &mut Vec<DVector<f64>>, rcols: &mut Vec<Vec<f64>>, j: usize) {
    rcols.remove(j);
    let a = rcols.len();
    for i in j..a {
        // rcols[i] has i+2 entries; zero entry i+1 against entry i
        let (x, y) = (rcols[i][i], rcols[i][i + 1]);
        let h = x.hypot(y);
        let (cs, sn) = if h == 0.0 { (1.0, 0.0) } else { (x / h, y / h) };
        for col in rcols.iter_mut().skip(i) {
            let (a0, a1) = (col[i], col[i + 1]);
            col[i] = cs * a0 + sn * a1;
            col[i + 1] = -sn * a0 + cs * a1;
        }
        rcols[i].truncate(i + 1);
        let (q0, q1) = (qcols[i].clone(), qcols[i + 1].clone());
        qcols[i] = &q0 * cs + &q1 * sn;
        qcols[i + 1] = &q1 * cs - &q0 * sn;
    }
    qcols.truncate(a);
}

/// Householder QR with column pivoting, `M Pi = Q [R1; 0]`.
///
/// Returns the full orthogonal `Q`, the first `rank` rows of `R` (columns in
/// pivoted order), the pivot order and the numerical rank.
fn pivoted_qr(m: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, DMatrix<f64>, Vec<usize>, usize) {
    let (rows, cols) = m.shape();
    let mut a = m.clone();
    let mut perm: Vec<usize> = (0..cols).collect();
    let mut reflectors: Vec<(DVector<f64>, f64)> = Vec::new();
    let mut rank = 0;
    let mut first = 0.0;
    for k in 0..rows.min(cols) {
        let (mut best, mut best_norm) = (k, -1.0);
        for j in k..cols {
            let nrm = a.view((k, j), (rows - k, 1)).norm_squared();
            if nrm > best_norm {
                best = j;
                best_norm = nrm;
            }
        }
        let nrm = best_norm.sqrt();
        if k == 0 {
            first = nrm;
        }
        if nrm <= rel_tol * first || nrm == 0.0 {
            break;
        }
        a.swap_columns(k, best);
        perm.swap(k, best);
        let x0 = a[(k, k)];
        let alpha = if x0 >= 0.0 { -nrm } else { nrm };
        let mut v = a.view((k, k), (rows - k, 1)).column(0).into_owned();
        v[0] -= alpha;
        let vnorm2 = v.norm_squared();
        let tau = if vnorm2 == 0.0 { 0.0 } else { 2.0 / vnorm2 };
        if cols > k + 1 {
            let mut block = a.view_mut((k, k + 1), (rows - k, cols - k - 1));
            let w = block.tr_mul(&v);
            block.ger(-tau, &v, &w, 1.0);
        }
        a[(k, k)] = alpha;
        for i in k + 1..rows {
            a[(i, k)] = 0.0;
        }
        reflectors.push((v, tau));
        rank += 1;
    }
    let mut q = DMatrix::identity(rows, rows);
    for (k, (v, tau)) in reflectors.iter().enumerate().rev() {
        let mut block = q.view_mut((k, 0), (rows - k, rows));
        let w = block.tr_mul(v);
        block.ger(-tau, v, &w, 1.0);
    }
    let r1 = a.rows(0, rank).into_owned();
    (q, r1, perm, rank)
}
