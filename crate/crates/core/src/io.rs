//! CSV import and export.
//!
//! Every file uses `,` separators and shortest round-trip decimal floats, so
//! reading a file back reproduces the written values bit for bit. Lines
//! starting with `#` are comments. Writes go to a temporary sibling first and
//! are renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::datamat::Series;
use crate::qp::QuadraticProgram;
use crate::sim::{aave_of, RunLog, TrajectoryRecord};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot access {path}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed CSV in {path}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// In-memory CSV text with optional leading comment lines.
#[derive(Debug, Clone, Default)]
pub struct CsvTable {
    pub comments: Vec<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: Vec<String>) -> Self {
        Self { comments: Vec::new(), header, rows: Vec::new() }
    }

    pub fn push_numbers(&mut self, values: impl IntoIterator<Item = f64>) {
        self.rows.push(values.into_iter().map(fmt_f64).collect());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for c in &self.comments {
            out.extend_from_slice(format!("# {c}\n").as_bytes());
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let comments = text
            .lines()
            .take_while(|l| l.starts_with('#'))
            .map(|l| l.trim_start_matches('#').trim().to_string())
            .collect();
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let csv_err = |source| IoError::Csv { path: path.to_path_buf(), source };
        let header = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            rows.push(rec.map_err(csv_err)?.iter().map(str::to_string).collect());
        }
        Ok(Self { comments, header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Columns named `prefix_1, prefix_2, ..` (or starting at 0), in order.
    pub fn indexed_columns(&self, prefix: &str) -> Vec<usize> {
        let start = if self.column(&format!("{prefix}_0")).is_some() { 0 } else { 1 };
        (start..).map_while(|k| self.column(&format!("{prefix}_{k}"))).collect()
    }

    pub fn number(&self, path: &Path, row: usize, col: usize) -> Result<f64, IoError> {
        let cell = &self.rows[row][col];
        cell.trim().parse().map_err(|_| IoError::Format {
            path: path.to_path_buf(),
            reason: format!("row {} column `{}`: `{cell}` is not a number", row + 1, self.header[col]),
        })
    }

    fn vectors(&self, path: &Path, cols: &[usize]) -> Result<Vec<DVector<f64>>, IoError> {
        (0..self.rows.len())
            .map(|r| {
                let vals = cols.iter().map(|&c| self.number(path, r, c)).collect::<Result<Vec<_>, _>>()?;
                Ok(DVector::from_vec(vals))
            })
            .collect()
    }

    pub fn is_masked(&self) -> bool {
        self.comments.iter().any(|c| c == "masked=true")
    }
}

fn names(prefix: &str, range: std::ops::Range<usize>) -> impl Iterator<Item = String> + '_ {
    range.map(move |k| format!("{prefix}_{k}"))
}

/// Per-step run log: positions, velocities, CAV inputs, head error, fuel and
/// solver diagnostics.
pub fn run_log_table(log: &RunLog) -> CsvTable {
    let n = log.fleet.n();
    let m = log.fleet.m();
    let mut header = vec!["t".to_string()];
    header.extend(names("p", 0..n + 1));
    header.extend(names("v", 0..n + 1));
    header.extend(names("u", 1..m + 1));
    header.extend(["eps", "fuel_rate_total", "objective", "solver_status", "kkt_residual", "v_star"].map(String::from));
    let mut table = CsvTable::new(header);
    for k in 0..log.steps() {
        let d = &log.diagnostics[k];
        let mut row: Vec<String> = std::iter::once(log.t[k])
            .chain(log.p[k].iter().copied())
            .chain(log.v[k].iter().copied())
            .chain(log.u[k].iter().copied())
            .chain([log.eps[k], log.fuel_rate_total(k), d.objective])
            .map(fmt_f64)
            .collect();
        row.push(d.status.map_or("warmup", |s| s.name()).to_string());
        row.push(fmt_f64(d.kkt_residual));
        row.push(fmt_f64(log.v_star.get(k).copied().unwrap_or(log.equilibrium.v_star)));
        table.rows.push(row);
    }
    table
}

/// What comparisons need from a stored run log.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub total_fuel: f64,
    pub aave: f64,
    pub steps: usize,
}

/// Recomputes fuel (rectangle rule) and AAVE from a run-log CSV.
pub fn summarize_run_log(path: &Path) -> Result<RunSummary, IoError> {
    let table = CsvTable::read(path)?;
    let missing = |what: &str| IoError::Format { path: path.to_path_buf(), reason: format!("missing column `{what}`") };
    let t_col = table.column("t").ok_or_else(|| missing("t"))?;
    let f_col = table.column("fuel_rate_total").ok_or_else(|| missing("fuel_rate_total"))?;
    let v_cols = table.indexed_columns("v");
    if v_cols.len() < 2 {
        return Err(missing("v_0, v_1"));
    }
    let steps = table.rows.len();
    let dt = if steps > 1 { table.number(path, 1, t_col)? - table.number(path, 0, t_col)? } else { 0.0 };
    let mut fuel = 0.0;
    for r in 0..steps {
        fuel += table.number(path, r, f_col)?;
    }
    let (aave, _) = aave_of(&table.vectors(path, &v_cols)?);
    Ok(RunSummary { total_fuel: fuel * dt, aave, steps })
}

/// `t,<name>_1..<name>_q`, one row per sample.
pub fn series_table(name: &str, s: &Series, dt: f64) -> CsvTable {
    let mut header = vec!["t".to_string()];
    header.extend(names(name, 1..s.dim() + 1));
    let mut table = CsvTable::new(header);
    for k in 0..s.len() {
        table.push_numbers(std::iter::once(k as f64 * dt).chain(s.sample(k).iter().copied()));
    }
    table
}

pub fn read_series(path: &Path, name: &str) -> Result<Series, IoError> {
    let table = CsvTable::read(path)?;
    let cols = table.indexed_columns(name);
    let samples = table.vectors(path, &cols)?;
    Series::from_samples(&samples).map_err(|e| IoError::Format { path: path.to_path_buf(), reason: e.to_string() })
}

/// Offline dataset as `t,u_1..u_m,eps,y_1..y_p`.
pub fn dataset_table(rec: &TrajectoryRecord, dt: f64) -> CsvTable {
    let mut header = vec!["t".to_string()];
    header.extend(names("u", 1..rec.u.dim() + 1));
    header.push("eps".into());
    header.extend(names("y", 1..rec.y.dim() + 1));
    let mut table = CsvTable::new(header);
    for k in 0..rec.len() {
        let (u, y) = (rec.u.sample(k), rec.y.sample(k));
        let row = std::iter::once(k as f64 * dt).chain(u.iter().copied()).chain([rec.eps.sample(k)[0]]).chain(y.iter().copied());
        table.push_numbers(row);
    }
    table
}

pub fn read_dataset(path: &Path) -> Result<TrajectoryRecord, IoError> {
    let table = CsvTable::read(path)?;
    let eps = table
        .column("eps")
        .ok_or_else(|| IoError::Format { path: path.to_path_buf(), reason: "missing column `eps`".into() })?;
    let u = table.vectors(path, &table.indexed_columns("u"))?;
    let e = table.vectors(path, &[eps])?;
    let y = table.vectors(path, &table.indexed_columns("y"))?;
    let fmt = |e: crate::datamat::DatamatError| IoError::Format { path: path.to_path_buf(), reason: e.to_string() };
    Ok(TrajectoryRecord {
        u: Series::from_samples(&u).map_err(fmt)?,
        eps: Series::from_samples(&e).map_err(fmt)?,
        y: Series::from_samples(&y).map_err(fmt)?,
    })
}

/// Outputs and CAV inputs per step; masked files carry a `masked=true` comment.
pub fn trajectory_table(y: &[DVector<f64>], u: &[DVector<f64>], dt: f64, masked: bool) -> CsvTable {
    let p = y.first().map_or(0, |v| v.len());
    let m = u.first().map_or(0, |v| v.len());
    let mut header = vec!["t".to_string()];
    header.extend(names("y", 1..p + 1));
    header.extend(names("u", 1..m + 1));
    let mut table = CsvTable::new(header);
    if masked {
        table.comments.push("masked=true".into());
    }
    for (k, (yk, uk)) in y.iter().zip(u).enumerate() {
        table.push_numbers(std::iter::once(k as f64 * dt).chain(yk.iter().copied()).chain(uk.iter().copied()));
    }
    table
}

/// Row-major matrix with a header of column indices.
pub fn matrix_table(m: &DMatrix<f64>) -> CsvTable {
    let mut table = CsvTable::new((0..m.ncols()).map(|c| c.to_string()).collect());
    for r in 0..m.nrows() {
        table.push_numbers(m.row(r).iter().copied());
    }
    table
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>, IoError> {
    let table = CsvTable::read(path)?;
    let cols: Vec<usize> = (0..table.header.len()).collect();
    let rows = table.vectors(path, &cols)?;
    Ok(DMatrix::from_fn(rows.len(), cols.len(), |r, c| rows[r][c]))
}

/// Writes `P, q, A_eq, b_eq, A_in, lo, hi` as separate CSV files in `dir`;
/// vectors are single-column matrices.
pub fn write_qp_bundle(dir: &Path, qp: &QuadraticProgram) -> Result<(), IoError> {
    let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    let parts = [
        ("P", qp.p.clone()),
        ("q", col(&qp.q)),
        ("A_eq", qp.a_eq.clone()),
        ("b_eq", col(&qp.b_eq)),
        ("A_in", qp.a_in.clone()),
        ("lo", col(&qp.lo)),
        ("hi", col(&qp.hi)),
    ];
    for (name, m) in parts {
        matrix_table(&m).write(&dir.join(format!("{name}.csv")))?;
    }
    Ok(())
}

pub fn read_qp_bundle(dir: &Path) -> Result<QuadraticProgram, IoError> {
    let read = |name: &str| read_matrix(&dir.join(format!("{name}.csv")));
    let vec = |name: &str| -> Result<DVector<f64>, IoError> { Ok(read(name)?.column(0).into_owned()) };
    Ok(QuadraticProgram {
        p: read("P")?,
        q: vec("q")?,
        a_eq: read("A_eq")?,
        b_eq: vec("b_eq")?,
        a_in: read("A_in")?,
        lo: vec("lo")?,
        hi: vec("hi")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_exactly() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 1e20, f64::MIN_POSITIVE, 123456789.123456789] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DMatrix::from_fn(3, 4, |r, c| (r as f64 + 1.0) / (c as f64 + 7.0));
        let path = dir.path().join("m.csv");
        matrix_table(&m).write(&path).unwrap();
        assert_eq!(read_matrix(&path).unwrap(), m);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("0,1,2,3\n"));
        assert!(!dir.path().join("m.csv.tmp").exists());
    }

    #[test]
    fn series_and_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = Series::from_matrix(DMatrix::from_fn(2, 5, |r, c| (r * 10 + c) as f64 / 3.0)).unwrap();
        let path = dir.path().join("s.csv");
        series_table("y", &s, 0.05).write(&path).unwrap();
        assert_eq!(read_series(&path, "y").unwrap(), s);
        assert!(fs::read_to_string(&path).unwrap().starts_with("t,y_1,y_2\n"));

        let rec = TrajectoryRecord {
            u: Series::from_matrix(DMatrix::from_fn(2, 4, |r, c| (r + c) as f64 * 0.7)).unwrap(),
            eps: Series::from_matrix(DMatrix::from_fn(1, 4, |_, c| c as f64 * -0.1)).unwrap(),
            y: Series::from_matrix(DMatrix::from_fn(3, 4, |r, c| (r * c) as f64 + 0.25)).unwrap(),
        };
        let path = dir.path().join("d.csv");
        dataset_table(&rec, 0.05).write(&path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), rec);
    }

    #[test]
    fn masked_trajectories_carry_the_comment() {
        let dir = tempfile::tempdir().unwrap();
        let y = vec![DVector::from_vec(vec![1.0, 2.0]); 3];
        let u = vec![DVector::from_vec(vec![0.5]); 3];
        let path = dir.path().join("t.csv");
        trajectory_table(&y, &u, 0.05, true).write(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# masked=true\nt,y_1,y_2,u_1\n"));
        let table = CsvTable::read(&path).unwrap();
        assert!(table.is_masked());
        assert_eq!(table.rows.len(), 3);
        trajectory_table(&y, &u, 0.05, false).write(&path).unwrap();
        assert!(!CsvTable::read(&path).unwrap().is_masked());
    }

    #[test]
    fn qp_bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut qp = QuadraticProgram::unconstrained(DMatrix::identity(2, 2), DVector::from_vec(vec![-1.0, 0.5]));
        qp.a_in = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        qp.lo = DVector::from_element(1, -1e20);
        qp.hi = DVector::from_element(1, 1.0);
        write_qp_bundle(dir.path(), &qp).unwrap();
        let back = read_qp_bundle(dir.path()).unwrap();
        assert_eq!(back.p, qp.p);
        assert_eq!(back.q, qp.q);
        assert_eq!(back.a_in, qp.a_in);
        assert_eq!(back.hi, qp.hi);
        assert_eq!(back.a_eq.nrows(), 0);
    }
}
