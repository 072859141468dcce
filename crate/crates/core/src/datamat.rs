//! Hankel and Page data matrices, their past/future partition, persistent
//! excitation certificates and minimum-sample bounds.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Singular values below this fraction of the largest one count as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatamatError {
    #[error("depth {depth} exceeds series length {len}")]
    DepthExceedsLength { depth: usize, len: usize },
    #[error("depth must be at least 1")]
    ZeroDepth,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    Hankel,
    Page,
}

impl MatrixKind {
    pub fn name(self) -> &'static str {
        match self {
            MatrixKind::Hankel => "hankel",
            MatrixKind::Page => "page",
        }
    }

    /// Column count obtained from `len` samples at window `depth`.
    pub fn columns(self, len: usize, depth: usize) -> usize {
        match self {
            MatrixKind::Hankel => (len + 1).saturating_sub(depth),
            MatrixKind::Page => len / depth,
        }
    }

    /// Smallest series length that yields `cols` columns at window `depth`.
    pub fn samples_for_columns(self, cols: usize, depth: usize) -> usize {
        match self {
            MatrixKind::Hankel => cols + depth - 1,
            MatrixKind::Page => cols * depth,
        }
    }
}

impl std::str::FromStr for MatrixKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hankel" => Ok(MatrixKind::Hankel),
            "page" => Ok(MatrixKind::Page),
            other => Err(format!("unknown matrix kind `{other}` (expected hankel or page)")),
        }
    }
}

/// Time-ordered vector samples stored column-wise (`q x T`).
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    data: DMatrix<f64>,
}

impl Series {
    pub fn from_matrix(data: DMatrix<f64>) -> Result<Self, DatamatError> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(DatamatError::InsufficientData("series must be non-empty with q >= 1".into()));
        }
        Ok(Self { data })
    }

    pub fn from_samples(samples: &[DVector<f64>]) -> Result<Self, DatamatError> {
        let q = samples.first().map(|s| s.len()).unwrap_or(0);
        if samples.iter().any(|s| s.len() != q) {
            return Err(DatamatError::DimensionMismatch("samples differ in dimension".into()));
        }
        let mut data = DMatrix::zeros(q, samples.len());
        for (t, s) in samples.iter().enumerate() {
            data.set_column(t, s);
        }
        Self::from_matrix(data)
    }

    pub fn from_scalars(values: &[f64]) -> Result<Self, DatamatError> {
        Self::from_matrix(DMatrix::from_row_slice(1, values.len(), values))
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    pub fn sample(&self, t: usize) -> DVector<f64> {
        self.data.column(t).into_owned()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Samples `start..end` (0-based, end exclusive).
    pub fn slice(&self, start: usize, end: usize) -> Series {
        Series { data: self.data.columns(start, end - start).into_owned() }
    }

    /// Stacks two series of equal length sample-wise.
    pub fn stack(&self, other: &Series) -> Result<Series, DatamatError> {
        if self.len() != other.len() {
            return Err(DatamatError::DimensionMismatch(format!(
                "cannot stack series of lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        let mut data = DMatrix::zeros(self.dim() + other.dim(), self.len());
        data.rows_mut(0, self.dim()).copy_from(&self.data);
        data.rows_mut(self.dim(), other.dim()).copy_from(&other.data);
        Ok(Series { data })
    }
}

fn window_matrix(s: &Series, depth: usize, starts: impl Iterator<Item = usize>, cols: usize) -> DMatrix<f64> {
    let q = s.dim();
    let mut out = DMatrix::zeros(q * depth, cols);
    for (j, start) in starts.enumerate() {
        for i in 0..depth {
            out.view_mut((i * q, j), (q, 1)).copy_from(&s.data.column(start + i));
        }
    }
    out
}

fn check_depth(s: &Series, depth: usize) -> Result<(), DatamatError> {
    if depth == 0 {
        return Err(DatamatError::ZeroDepth);
    }
    if depth > s.len() {
        return Err(DatamatError::DepthExceedsLength { depth, len: s.len() });
    }
    Ok(())
}

/// Overlapping windows: column `j` stacks samples `j..j+depth`.
pub fn hankel(s: &Series, depth: usize) -> Result<DMatrix<f64>, DatamatError> {
    check_depth(s, depth)?;
    let cols = s.len() - depth + 1;
    Ok(window_matrix(s, depth, 0..cols, cols))
}

/// Disjoint windows: column `j` stacks samples `j*depth..(j+1)*depth`; the
/// trailing `T mod depth` samples are dropped.
pub fn page(s: &Series, depth: usize) -> Result<DMatrix<f64>, DatamatError> {
    check_depth(s, depth)?;
    let cols = s.len() / depth;
    Ok(window_matrix(s, depth, (0..cols).map(|j| j * depth), cols))
}

pub fn data_matrix(kind: MatrixKind, s: &Series, depth: usize) -> Result<DMatrix<f64>, DatamatError> {
    match kind {
        MatrixKind::Hankel => hankel(s, depth),
        MatrixKind::Page => page(s, depth),
    }
}

/// Past/future split of the input, disturbance and output data matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrixSet {
    pub kind: MatrixKind,
    pub up: DMatrix<f64>,
    pub uf: DMatrix<f64>,
    pub ep: DMatrix<f64>,
    pub ef: DMatrix<f64>,
    pub yp: DMatrix<f64>,
    pub yf: DMatrix<f64>,
    pub t_ini: usize,
    pub horizon: usize,
    pub cols: usize,
}

impl BlockMatrixSet {
    pub fn input_dim(&self) -> usize {
        self.up.nrows() / self.t_ini
    }

    pub fn output_dim(&self) -> usize {
        self.yp.nrows() / self.t_ini
    }

    /// `[U_p; E_p; Y_p; U_f; E_f; Y_f]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let blocks = [&self.up, &self.ep, &self.yp, &self.uf, &self.ef, &self.yf];
        let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
        let mut out = DMatrix::zeros(rows, self.cols);
        let mut r = 0;
        for b in blocks {
            out.rows_mut(r, b.nrows()).copy_from(b);
            r += b.nrows();
        }
        out
    }

    /// Keeps the first `cols` columns.
    pub fn truncated(&self, cols: usize) -> BlockMatrixSet {
        let cols = cols.min(self.cols);
        let take = |m: &DMatrix<f64>| m.columns(0, cols).into_owned();
        BlockMatrixSet {
            kind: self.kind,
            up: take(&self.up),
            uf: take(&self.uf),
            ep: take(&self.ep),
            ef: take(&self.ef),
            yp: take(&self.yp),
            yf: take(&self.yf),
            t_ini: self.t_ini,
            horizon: self.horizon,
            cols,
        }
    }
}

pub fn partition(
    kind: MatrixKind,
    u: &Series,
    eps: &Series,
    y: &Series,
    t_ini: usize,
    horizon: usize,
) -> Result<BlockMatrixSet, DatamatError> {
    if t_ini == 0 || horizon == 0 {
        return Err(DatamatError::InsufficientData("T_ini and N must be at least 1".into()));
    }
    let len = u.len();
    if eps.len() != len || y.len() != len {
        return Err(DatamatError::DimensionMismatch(format!(
            "series lengths differ: u {}, eps {}, y {}",
            len,
            eps.len(),
            y.len()
        )));
    }
    let depth = t_ini + horizon;
    let cols = kind.columns(len, depth);
    if cols < 1 {
        return Err(DatamatError::InsufficientData(format!(
            "{len} samples give no {} column at depth {depth}",
            kind.name()
        )));
    }
    let split = |s: &Series| -> Result<(DMatrix<f64>, DMatrix<f64>), DatamatError> {
        let full = data_matrix(kind, s, depth)?;
        let q = s.dim();
        Ok((full.rows(0, q * t_ini).into_owned(), full.rows(q * t_ini, q * horizon).into_owned()))
    };
    let (up, uf) = split(u)?;
    let (ep, ef) = split(eps)?;
    let (yp, yf) = split(y)?;
    Ok(BlockMatrixSet { kind, up, uf, ep, ef, yp, yf, t_ini, horizon, cols })
}

/// Outcome of a rank test on a data matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcitationCertificate {
    pub exciting: bool,
    pub rank: usize,
    pub required: usize,
    /// Samples left unused by the Page floor rule.
    pub discarded: usize,
}

/// Numerical rank with singular values below `rel_tol * sigma_max` treated as zero.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let short = m.nrows().min(m.ncols());
    // Gram eigenvalues separate cleanly from zero when the matrix is well
    // conditioned; they cannot resolve ratios near rel_tol, so anything
    // marginal goes through the SVD.
    if m.ncols() > 4 * m.nrows() || m.nrows() > 4 * m.ncols() {
        let gram = if m.nrows() <= m.ncols() { m * m.transpose() } else { m.transpose() * m };
        let eig = SymmetricEigen::new(gram).eigenvalues;
        let max = eig.iter().cloned().fold(0.0, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if max > 0.0 && min / max > 1e-10 {
            return short;
        }
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

/// Hankel excitation of order `order`: `hankel(s, order)` has full row rank.
pub fn is_hankel_exciting(s: &Series, order: usize, rel_tol: f64) -> ExcitationCertificate {
    let required = s.dim() * order;
    if order == 0 || order > s.len() {
        return ExcitationCertificate { exciting: false, rank: 0, required, discarded: 0 };
    }
    let h = hankel(s, order).expect("depth checked");
    let rank = numerical_rank(&h, rel_tol);
    ExcitationCertificate { exciting: rank == required, rank, required, discarded: 0 }
}

/// `depth`-Page excitation of order `order`: the stack of `order` Page
/// matrices over series shifted by multiples of `depth` has full row rank.
pub fn is_page_exciting(
    s: &Series,
    depth: usize,
    order: usize,
    rel_tol: f64,
) -> Result<ExcitationCertificate, DatamatError> {
    if depth == 0 || order == 0 {
        return Err(DatamatError::ZeroDepth);
    }
    let len = s.len();
    let usable = len.checked_sub((order - 1) * depth).filter(|&u| u >= depth).ok_or_else(|| {
        DatamatError::InsufficientData(format!("{len} samples give an empty shifted Page matrix"))
    })?;
    let cols = usable / depth;
    let q = s.dim();
    let block_rows = q * depth;
    let mut stacked = DMatrix::zeros(block_rows * order, cols);
    for r in 0..order {
        let sub = s.slice(r * depth, len - (order - 1 - r) * depth);
        let p = page(&sub, depth)?;
        stacked.view_mut((r * block_rows, 0), (block_rows, cols)).copy_from(&p.columns(0, cols));
    }
    let required = block_rows * order;
    let rank = numerical_rank(&stacked, rel_tol);
    Ok(ExcitationCertificate { exciting: rank == required, rank, required, discarded: usable % depth })
}

/// Excitation order needed for the data matrix of `kind` to represent all
/// trajectories of length `t_ini + horizon` of an `n`-follower platoon; one
/// higher when the data are masked with affine offsets.
pub fn required_order(kind: MatrixKind, n: usize, t_ini: usize, horizon: usize, masked: bool) -> usize {
    let extra = usize::from(masked);
    match kind {
        MatrixKind::Hankel => t_ini + horizon + 2 * n + extra,
        MatrixKind::Page => 2 * n + 1 + extra,
    }
}

/// Sample count at which the data can first be exciting of [`required_order`].
pub fn min_samples(kind: MatrixKind, m: usize, n: usize, t_ini: usize, horizon: usize, masked: bool) -> usize {
    let depth = t_ini + horizon;
    let order = required_order(kind, n, t_ini, horizon, masked);
    match kind {
        MatrixKind::Hankel => (m + 2) * order - 1,
        MatrixKind::Page => depth * (((m + 1) * depth + 1) * order - 1),
    }
}
