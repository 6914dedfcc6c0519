//! Sample tables, principal strata and observed-cell bookkeeping.
//!
//! Under monotonicity the defier stratum cannot occur, so [`Stratum`] has
//! exactly three variants and each observed `(Z, S)` cell is compatible with
//! either one or two strata.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CpceError, Result};

/// Principal stratum `U = (S(1), S(0))` under monotonicity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stratum {
    /// `U = 00`.
    #[serde(rename = "00")]
    NeverTaker,
    /// `U = 10`.
    #[serde(rename = "10")]
    Complier,
    /// `U = 11`.
    #[serde(rename = "11")]
    AlwaysTaker,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::NeverTaker, Stratum::Complier, Stratum::AlwaysTaker];

    pub fn code(self) -> &'static str {
        match self {
            Stratum::NeverTaker => "00",
            Stratum::Complier => "10",
            Stratum::AlwaysTaker => "11",
        }
    }

    /// Whether a unit with intermediate `s` and treatment `z` belongs to the
    /// observed subset used by the subset pseudo-outcome.
    pub fn in_subset(self, s: u8, z: u8) -> bool {
        match self {
            Stratum::NeverTaker => s == 0,
            Stratum::Complier => z == s,
            Stratum::AlwaysTaker => s == 1,
        }
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Stratum {
    type Err = CpceError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "00" | "never-taker" | "nevertaker" => Ok(Stratum::NeverTaker),
            "10" | "complier" => Ok(Stratum::Complier),
            "11" | "always-taker" | "alwaystaker" => Ok(Stratum::AlwaysTaker),
            "01" | "defier" => Err(CpceError::Config(
                "defiers are excluded by monotonicity".into(),
            )),
            other => Err(CpceError::Config(format!("unknown stratum '{other}'"))),
        }
    }
}

/// An observed `(Z, S)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ObservedCell {
    pub z: u8,
    pub s: u8,
}

impl ObservedCell {
    pub const ALL: [ObservedCell; 4] = [
        ObservedCell { z: 0, s: 0 },
        ObservedCell { z: 0, s: 1 },
        ObservedCell { z: 1, s: 0 },
        ObservedCell { z: 1, s: 1 },
    ];
}

/// Strata compatible with an observed cell under monotonicity.
pub fn strata_in_cell(cell: ObservedCell) -> &'static [Stratum] {
    match (cell.z, cell.s) {
        (1, 0) => &[Stratum::NeverTaker],
        (0, 1) => &[Stratum::AlwaysTaker],
        (1, 1) => &[Stratum::Complier, Stratum::AlwaysTaker],
        _ => &[Stratum::NeverTaker, Stratum::Complier],
    }
}

/// One unit's `(Y, S, Z)` record; covariates are carried separately.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obs {
    pub y: f64,
    pub s: u8,
    pub z: u8,
}

/// Unvalidated columns, as read from a file or assembled by a caller.
#[derive(Debug, Clone, Default)]
pub struct RawColumns {
    pub x_names: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
}

/// Validated observations `W = (X, Y, S, Z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTable {
    x: DMatrix<f64>,
    x_names: Vec<String>,
    y: Vec<f64>,
    s: Vec<u8>,
    z: Vec<u8>,
}

/// Columns designated as X, Y, S and Z in a CSV header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub x_cols: Vec<String>,
    pub y_col: String,
    pub s_col: String,
    pub z_col: String,
}

impl ColumnSpec {
    pub fn default_for(p: usize) -> Self {
        ColumnSpec {
            x_cols: (1..=p).map(|j| format!("x{j}")).collect(),
            y_col: "y".into(),
            s_col: "s".into(),
            z_col: "z".into(),
        }
    }
}

fn binary(v: f64, name: &str, row: usize) -> Result<u8> {
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(CpceError::Schema(format!(
            "column {name} must be 0/1, found {v} in row {row}"
        )))
    }
}

/// Validate raw columns into a [`SampleTable`], requiring all four observed
/// cells to be populated.
pub fn validate_dataset(raw: RawColumns) -> Result<SampleTable> {
    let table = validate_columns(raw)?;
    table.require_all_cells()?;
    Ok(table)
}

fn validate_columns(raw: RawColumns) -> Result<SampleTable> {
    let n = raw.y.len();
    if raw.x.is_empty() {
        return Err(CpceError::Schema("at least one covariate column is required".into()));
    }
    if n == 0 {
        return Err(CpceError::Schema("table has no rows".into()));
    }
    if raw.s.len() != n || raw.z.len() != n || raw.x.iter().any(|c| c.len() != n) {
        return Err(CpceError::Schema("columns have different lengths".into()));
    }
    let p = raw.x.len();
    let x_names = if raw.x_names.len() == p {
        raw.x_names
    } else {
        (1..=p).map(|j| format!("x{j}")).collect()
    };
    for (name, col) in x_names
        .iter()
        .map(String::as_str)
        .zip(raw.x.iter())
        .chain([("y", &raw.y), ("s", &raw.s), ("z", &raw.z)])
    {
        if let Some(i) = col.iter().position(|v| !v.is_finite()) {
            return Err(CpceError::Data(format!(
                "non-finite value in column {name}, row {i}"
            )));
        }
    }
    let s = raw
        .s
        .iter()
        .enumerate()
        .map(|(i, &v)| binary(v, "s", i))
        .collect::<Result<Vec<_>>>()?;
    let z = raw
        .z
        .iter()
        .enumerate()
        .map(|(i, &v)| binary(v, "z", i))
        .collect::<Result<Vec<_>>>()?;
    let x = DMatrix::from_fn(n, p, |i, j| raw.x[j][i]);
    Ok(SampleTable { x, x_names, y: raw.y, s, z })
}

impl SampleTable {
    /// Build a table from a covariate matrix and outcome columns, checking
    /// lengths and finiteness but not cell coverage.
    pub fn new(x: DMatrix<f64>, y: Vec<f64>, s: Vec<u8>, z: Vec<u8>) -> Result<Self> {
        let raw = RawColumns {
            x_names: Vec::new(),
            x: (0..x.ncols()).map(|j| x.column(j).iter().copied().collect()).collect(),
            y,
            s: s.iter().map(|&v| v as f64).collect(),
            z: z.iter().map(|&v| v as f64).collect(),
        };
        validate_columns(raw)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn s(&self) -> &[u8] {
        &self.s
    }

    pub fn z(&self) -> &[u8] {
        &self.z
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    pub fn obs(&self, i: usize) -> Obs {
        Obs { y: self.y[i], s: self.s[i], z: self.z[i] }
    }

    /// Counts indexed as `[z][s]`.
    pub fn cell_counts(&self) -> [[usize; 2]; 2] {
        let mut c = [[0usize; 2]; 2];
        for (&z, &s) in self.z.iter().zip(&self.s) {
            c[z as usize][s as usize] += 1;
        }
        c
    }

    pub fn require_all_cells(&self) -> Result<()> {
        let c = self.cell_counts();
        for cell in ObservedCell::ALL {
            if c[cell.z as usize][cell.s as usize] == 0 {
                return Err(CpceError::EmptyCell(format!(
                    "no rows with Z={}, S={}",
                    cell.z, cell.s
                )));
            }
        }
        Ok(())
    }

    /// Rows in the given order; no cell-coverage check.
    pub fn select(&self, idx: &[usize]) -> SampleTable {
        SampleTable {
            x: self.x.select_rows(idx),
            x_names: self.x_names.clone(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            s: idx.iter().map(|&i| self.s[i]).collect(),
            z: idx.iter().map(|&i| self.z[i]).collect(),
        }
    }

    /// Indices of rows in cell `(z, s)`.
    pub fn cell_indices(&self, z: u8, s: u8) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.z[i] == z && self.s[i] == s).collect()
    }

    /// Rename the covariate columns.
    pub fn with_x_names(mut self, names: Vec<String>) -> Result<SampleTable> {
        if names.len() != self.p() {
            return Err(CpceError::Schema("covariate name count mismatch".into()));
        }
        self.x_names = names;
        Ok(self)
    }

    /// Replace the outcome column.
    pub fn with_y(&self, y: Vec<f64>) -> Result<SampleTable> {
        if y.len() != self.n() {
            return Err(CpceError::Schema("outcome length mismatch".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(CpceError::Data("non-finite outcome".into()));
        }
        let mut t = self.clone();
        t.y = y;
        Ok(t)
    }

    /// Read a CSV with a header row, selecting columns by name.
    pub fn read_csv<R: Read>(reader: R, spec: &ColumnSpec) -> Result<SampleTable> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| CpceError::Schema(format!("column '{name}' not found in header")))
        };
        let xi = spec.x_cols.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
        let (yi, si, zi) = (find(&spec.y_col)?, find(&spec.s_col)?, find(&spec.z_col)?);
        let mut raw = RawColumns {
            x_names: spec.x_cols.clone(),
            x: vec![Vec::new(); xi.len()],
            ..Default::default()
        };
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let get = |k: usize, name: &str| -> Result<f64> {
                let field = rec.get(k).unwrap_or("").trim();
                if field.is_empty() || field.eq_ignore_ascii_case("na") {
                    return Err(CpceError::Data(format!("missing value in column {name}, row {r}")));
                }
                field
                    .parse::<f64>()
                    .map_err(|_| CpceError::Data(format!("unparseable '{field}' in column {name}, row {r}")))
            };
            for (j, &k) in xi.iter().enumerate() {
                raw.x[j].push(get(k, &spec.x_cols[j])?);
            }
            raw.y.push(get(yi, &spec.y_col)?);
            raw.s.push(get(si, &spec.s_col)?);
            raw.z.push(get(zi, &spec.z_col)?);
        }
        validate_dataset(raw)
    }

    pub fn read_csv_path(path: &Path, spec: &ColumnSpec) -> Result<SampleTable> {
        SampleTable::read_csv(std::fs::File::open(path)?, spec)
    }

    /// Write the table with columns `x..., y, s, z`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = self.x_names.clone();
        header.extend(["y".into(), "s".into(), "z".into()]);
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|&v| fmt_f64(v)).collect();
            rec.push(fmt_f64(self.y[i]));
            rec.push(self.s[i].to_string());
            rec.push(self.z[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Locale-free float formatting with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}
