//! CSV ingestion of real panels, rolling-window p-values and table files.
//!
//! Returns files are wide: a `date` column (`YYYY-MM`) followed by one column
//! per asset, in percent per month. Factors files have the fixed header
//! `date,mkt_rf,smb,hml,rf`. Excess returns are `r - rf`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::alpha::{run_methods, Method, TestConfig};
use crate::error::{Error, Result};
use crate::regression::Panel;
use crate::sim::{ErrorModel, RejectionRow, RejectionTable};

pub const FACTOR_HEADER: [&str; 5] = ["date", "mkt_rf", "smb", "hml", "rf"];
pub const STUDY_HEADER: [&str; 10] = [
    "method",
    "scenario",
    "T",
    "N",
    "s",
    "delta",
    "gamma",
    "reps",
    "reject_rate",
    "mc_stderr",
];
pub const ROLLING_HEADER: [&str; 3] = ["window_start", "method", "p_value"];

/// A dated panel read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dates: Vec<String>,
    pub tickers: Vec<String>,
    pub panel: Panel,
}

struct Table {
    header: Vec<String>,
    dates: Vec<String>,
    /// Row-major values, `dates.len() x (header.len() - 1)`.
    values: Vec<f64>,
}

fn check_date(path: &Path, row: usize, s: &str) -> Result<()> {
    let b = s.as_bytes();
    let ok = b.len() == 7
        && b[4] == b'-'
        && b[..4].iter().chain(&b[5..]).all(u8::is_ascii_digit)
        && matches!(
            &s[5..],
            "01" | "02" | "03" | "04" | "05" | "06" | "07" | "08" | "09" | "10" | "11" | "12"
        );
    if !ok {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row,
            column: "date".into(),
            message: format!("expected YYYY-MM, got {s:?}"),
        });
    }
    Ok(())
}

/// Reads a dated numeric CSV. Rows are numbered from 1 after the header.
fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_table_from(path, file)
}

fn read_table_from(path: &Path, source: impl Read) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.first().map(String::as_str) != Some("date") {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "first column must be `date`".into(),
        });
    }
    if header.len() < 2 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "no value columns".into(),
        });
    }
    let mut dates: Vec<String> = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let date = &rec[0];
        check_date(path, row, date)?;
        if let Some(prev) = dates.last() {
            if date <= prev.as_str() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row,
                    column: "date".into(),
                    message: format!("dates must be strictly increasing ({prev} then {date})"),
                });
            }
        }
        dates.push(date.to_string());
        for (j, cell) in rec.iter().enumerate().skip(1) {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row,
                column: header[j].clone(),
                message: if cell.is_empty() {
                    "missing value".into()
                } else {
                    format!("not a number: {cell:?}")
                },
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row,
                    column: header[j].clone(),
                    message: format!("non-finite value {cell:?}"),
                });
            }
            values.push(v);
        }
    }
    Ok(Table {
        header,
        dates,
        values,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Parse {
            path: path.to_path_buf(),
            row,
            column: String::new(),
            message: format!("{kind:?}"),
        },
    }
}

/// Loads returns and factors, checks that the dates agree, and forms excess
/// returns `Y = r - rf` against the factors `[mkt_rf, smb, hml]`.
pub fn load_dataset(
    returns_path: impl AsRef<Path>,
    factors_path: impl AsRef<Path>,
) -> Result<Dataset> {
    let rpath = returns_path.as_ref();
    let fpath = factors_path.as_ref();
    let returns = read_table(rpath)?;
    let factors = read_table(fpath)?;
    if factors.header != FACTOR_HEADER {
        return Err(Error::Format {
            path: fpath.to_path_buf(),
            message: format!(
                "factor header must be `{}`, found `{}`",
                FACTOR_HEADER.join(","),
                factors.header.join(",")
            ),
        });
    }
    align_dates(&returns.dates, &factors.dates)?;
    let t = returns.dates.len();
    let n = returns.header.len() - 1;
    let rf: Vec<f64> = (0..t).map(|s| factors.values[s * 4 + 3]).collect();
    let y = DMatrix::from_fn(t, n, |s, j| returns.values[s * n + j] - rf[s]);
    let x = DMatrix::from_fn(t, 3, |s, k| factors.values[s * 4 + k]);
    let panel = Panel::new(y, x)?;
    Ok(Dataset {
        dates: returns.dates,
        tickers: returns.header[1..].to_vec(),
        panel,
    })
}

pub fn load_panel(returns_path: impl AsRef<Path>, factors_path: impl AsRef<Path>) -> Result<Panel> {
    Ok(load_dataset(returns_path, factors_path)?.panel)
}

fn align_dates(returns: &[String], factors: &[String]) -> Result<()> {
    for (r, f) in returns.iter().zip(factors) {
        if r != f {
            let period = r.min(f).clone();
            return Err(Error::DateMismatch {
                period,
                message: format!("returns has {r}, factors has {f}"),
            });
        }
    }
    if returns.len() != factors.len() {
        let (longer, name) = if returns.len() > factors.len() {
            (returns, "factors")
        } else {
            (factors, "returns")
        };
        let period = longer[returns.len().min(factors.len())].clone();
        return Err(Error::DateMismatch {
            period,
            message: format!("missing from {name}"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RollingRow {
    pub window_start: String,
    pub method: Method,
    /// `None` when the method failed on this window.
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RollingReport {
    pub window: usize,
    pub methods: Vec<Method>,
    /// Window-major: all methods of the first window, then the next.
    pub rows: Vec<RollingRow>,
}

impl RollingReport {
    pub fn windows(&self) -> usize {
        if self.methods.is_empty() {
            0
        } else {
            self.rows.len() / self.methods.len()
        }
    }

    /// Fraction of windows with `p <= gamma` among windows where the method
    /// produced a p-value.
    pub fn rejection_ratio(&self, method: Method, gamma: f64) -> Option<f64> {
        let ps: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| r.p_value)
            .collect();
        if ps.is_empty() {
            return None;
        }
        Some(ps.iter().filter(|&&p| p <= gamma).count() as f64 / ps.len() as f64)
    }
}

/// Shortest window on which `method` can run with `n` assets and `p` factors.
pub fn min_window(method: Method, n: usize, p: usize) -> usize {
    let base = p + 2;
    match method {
        Method::Grs => base.max(n + p + 1),
        Method::Py | Method::Com => base.max(p + 6),
        Method::Max => base,
        Method::Ss | Method::Cc => base.max(2 * p + 4),
        Method::Sm => base.max(3),
    }
}

/// Runs `methods` on every window of `window` consecutive periods. Window
/// starts are labelled with `dates` when given, otherwise by 1-based index.
pub fn rolling_pvalues(
    panel: &Panel,
    dates: Option<&[String]>,
    window: usize,
    methods: &[Method],
    cfg: &TestConfig,
) -> Result<RollingReport> {
    let total = panel.t();
    if let Some(d) = dates {
        if d.len() != total {
            return Err(Error::InvalidArgument(format!(
                "{} dates for {total} periods",
                d.len()
            )));
        }
    }
    if window == 0 || window > total {
        return Err(Error::InvalidArgument(format!(
            "window {window} must lie in 1..={total}"
        )));
    }
    for &m in methods {
        let need = min_window(m, panel.n(), panel.p());
        if window < need {
            return Err(Error::InvalidArgument(format!(
                "window {window} too short for {m} (needs at least {need})"
            )));
        }
        if matches!(m, Method::Max | Method::Sm | Method::Cc | Method::Com) && panel.n() < 2 {
            return Err(Error::InvalidArgument(format!(
                "{m} needs at least two assets"
            )));
        }
    }
    let mut rows = Vec::with_capacity((total - window + 1) * methods.len());
    for start in 0..=(total - window) {
        let label = match dates {
            Some(d) => d[start].clone(),
            None => (start + 1).to_string(),
        };
        let results = panel
            .window(start..start + window)
            .and_then(|w| run_methods(&w, methods, cfg));
        match results {
            Ok(rs) => {
                for (m, r) in rs {
                    rows.push(RollingRow {
                        window_start: label.clone(),
                        method: m,
                        p_value: r.ok().map(|t| t.p_value),
                    });
                }
            }
            Err(_) => {
                for &m in methods {
                    rows.push(RollingRow {
                        window_start: label.clone(),
                        method: m,
                        p_value: None,
                    });
                }
            }
        }
    }
    Ok(RollingReport {
        window,
        methods: methods.to_vec(),
        rows,
    })
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

fn write_csv<W: Write>(
    path: &Path,
    sink: W,
    header: &[&str],
    rows: Vec<Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let wrap = |e: csv::Error| csv_error(path, e);
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(&r).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a size or power table in its documented row order.
pub fn write_rejection_table(table: &RejectionTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut sorted = table.clone();
    sorted.sort();
    let rows = sorted
        .rows
        .iter()
        .map(|r| {
            vec![
                r.method.to_string(),
                r.scenario.to_string(),
                r.t.to_string(),
                r.n.to_string(),
                r.s.to_string(),
                r.delta.to_string(),
                r.gamma.to_string(),
                r.reps.to_string(),
                r.reject_rate.to_string(),
                r.mc_stderr.to_string(),
            ]
        })
        .collect();
    write_csv(path, create(path)?, &STUDY_HEADER, rows)
}

fn open_records(path: &Path, expected: &[&str]) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header = rdr.headers().map_err(|e| csv_error(path, e))?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("expected header `{}`", expected.join(",")),
        });
    }
    Ok(rdr)
}

fn field<T: std::str::FromStr>(path: &Path, row: usize, column: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Parse {
        path: PathBuf::from(path),
        row,
        column: column.to_string(),
        message: format!("cannot parse {raw:?}"),
    })
}

pub fn read_rejection_table(path: impl AsRef<Path>) -> Result<RejectionTable> {
    let path = path.as_ref();
    let mut rdr = open_records(path, &STUDY_HEADER)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let row = i + 1;
        let get = |k: usize| rec.get(k).unwrap_or("");
        let method: Method = get(0).parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            row,
            column: "method".into(),
            message: format!("unknown method {:?}", get(0)),
        })?;
        let scenario: ErrorModel = get(1).parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            row,
            column: "scenario".into(),
            message: format!("unknown scenario {:?}", get(1)),
        })?;
        rows.push(RejectionRow {
            method,
            scenario,
            t: field(path, row, "T", get(2))?,
            n: field(path, row, "N", get(3))?,
            s: field(path, row, "s", get(4))?,
            delta: field(path, row, "delta", get(5))?,
            gamma: field(path, row, "gamma", get(6))?,
            reps: field(path, row, "reps", get(7))?,
            reject_rate: field(path, row, "reject_rate", get(8))?,
            mc_stderr: field(path, row, "mc_stderr", get(9))?,
        });
    }
    Ok(RejectionTable { rows, failures: 0 })
}

/// Writes `window_start,method,p_value`, with `NA` for failed windows.
pub fn write_rolling(report: &RollingReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let rows = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.window_start.clone(),
                r.method.to_string(),
                r.p_value
                    .map_or_else(|| "NA".to_string(), |p| p.to_string()),
            ]
        })
        .collect();
    write_csv(path, create(path)?, &ROLLING_HEADER, rows)
}

pub fn read_rolling(path: impl AsRef<Path>) -> Result<Vec<RollingRow>> {
    let path = path.as_ref();
    let mut rdr = open_records(path, &ROLLING_HEADER)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let row = i + 1;
        let method: Method = field(path, row, "method", rec.get(1).unwrap_or(""))?;
        let raw = rec.get(2).unwrap_or("");
        let p_value = if raw == "NA" {
            None
        } else {
            Some(field(path, row, "p_value", raw)?)
        };
        rows.push(RollingRow {
            window_start: rec.get(0).unwrap_or("").to_string(),
            method,
            p_value,
        });
    }
    Ok(rows)
}
