//! CSV and co-data ingest, CSV output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ecpc_core::codata::build_hierarchy_from_continuous;
use ecpc_core::{Family, Grouping, HierarchyOptions, Response};
use nalgebra::DMatrix;

use crate::error::{CliError, Result};

/// Design matrix with covariate names from the header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub names: Vec<String>,
    pub x: DMatrix<f64>,
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::format(path, e.to_string())
}

/// Read a numeric CSV with a header row. Non-numeric, NaN and infinite
/// cells are rejected with their 1-based data row and column name.
pub fn read_matrix(path: &Path) -> Result<Table> {
    let mut rdr = reader(path)?;
    let names: Vec<String> = rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    if names.is_empty() || names.iter().all(String::is_empty) {
        return Err(CliError::format(path, "missing header row"));
    }
    let p = names.len();
    let mut values = Vec::new();
    let mut n = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != p {
            return Err(CliError::Data {
                path: path.into(),
                row: i + 1,
                column: format!("{}", rec.len()),
                message: format!("expected {p} fields"),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| CliError::Data {
                path: path.into(),
                row: i + 1,
                column: names[j].clone(),
                message: format!("'{cell}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(CliError::Data {
                    path: path.into(),
                    row: i + 1,
                    column: names[j].clone(),
                    message: format!("non-finite value {v}"),
                });
            }
            values.push(v);
        }
        n += 1;
    }
    Ok(Table { names, x: DMatrix::from_row_slice(n, p, &values) })
}

/// Read the response: one column (gaussian, binomial) or two (cox: time,
/// status), with a header row.
pub fn read_response(path: &Path, family: Family) -> Result<Response> {
    let table = read_matrix(path)?;
    let want = if family == Family::Cox { 2 } else { 1 };
    if table.x.ncols() != want {
        return Err(CliError::format(path, format!("{family} response needs {want} column(s), found {}", table.x.ncols())));
    }
    let col = |j: usize| table.x.column(j).iter().copied().collect::<Vec<f64>>();
    let resp = match family {
        Family::Gaussian => Response::gaussian(col(0), None),
        Family::Binomial => Response::binomial(col(0)),
        Family::Cox => Response::cox(col(0), col(1)),
    };
    resp.map_err(|e| CliError::format(path, e.to_string()))
}

/// A co-data argument: `groups.json`, or `values.csv[:min_size[:threshold]]`
/// for continuous co-data turned into a hierarchy of nested groups.
#[derive(Debug, Clone, PartialEq)]
pub enum CoDataSpec {
    Groups(PathBuf),
    Continuous { path: PathBuf, min_group_size: usize, threshold: Option<f64> },
}

impl std::str::FromStr for CoDataSpec {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let path = PathBuf::from(parts.next().unwrap_or_default());
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        match ext.as_str() {
            "json" => {
                if parts.next().is_some() {
                    return Err(CliError::Config(format!("co-data '{s}': options only apply to .csv co-data")));
                }
                Ok(CoDataSpec::Groups(path))
            }
            "csv" => {
                let min_group_size = match parts.next() {
                    Some(v) => v.parse().map_err(|_| CliError::Config(format!("co-data '{s}': bad minimum group size")))?,
                    None => 10,
                };
                let threshold = match parts.next() {
                    Some(v) => Some(v.parse().map_err(|_| CliError::Config(format!("co-data '{s}': bad threshold")))?),
                    None => None,
                };
                Ok(CoDataSpec::Continuous { path, min_group_size, threshold })
            }
            _ => Err(CliError::Config(format!("co-data '{s}': expected a .json or .csv file"))),
        }
    }
}

impl CoDataSpec {
    pub fn path(&self) -> &Path {
        match self {
            CoDataSpec::Groups(p) | CoDataSpec::Continuous { path: p, .. } => p,
        }
    }

    /// Load against the penalised covariates, in order, named `names`.
    pub fn load(&self, names: &[String]) -> Result<Grouping> {
        let path = self.path();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("codata").to_string();
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        match self {
            CoDataSpec::Groups(_) => {
                Grouping::from_json_str(stem, names.len(), &text).map_err(|e| CliError::format(path, e.to_string()))
            }
            CoDataSpec::Continuous { min_group_size, threshold, .. } => {
                let values = read_continuous(path, names)?;
                let opts = HierarchyOptions { initial_threshold: *threshold, ..HierarchyOptions::new(*min_group_size) };
                let (g, _) = build_hierarchy_from_continuous(stem, &values, &opts)
                    .map_err(|e| CliError::format(path, e.to_string()))?;
                Ok(g)
            }
        }
    }
}

/// Continuous co-data: either `name,value` rows matched to covariate names
/// or a single `value` column in covariate order. Empty cells and `NA`
/// are missing.
fn read_continuous(path: &Path, names: &[String]) -> Result<Vec<f64>> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let parse = |cell: &str, row: usize| -> Result<f64> {
        if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan") {
            return Ok(f64::NAN);
        }
        cell.parse().map_err(|_| CliError::Data {
            path: path.into(),
            row,
            column: header.get(header.len() - 1).unwrap_or("value").to_string(),
            message: format!("'{cell}' is not a number"),
        })
    };
    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>().map_err(|e| csv_err(path, e))?;
    match header.len() {
        1 => {
            if records.len() != names.len() {
                return Err(CliError::format(path, format!("{} values for {} covariates", records.len(), names.len())));
            }
            records.iter().enumerate().map(|(i, r)| parse(&r[0], i + 1)).collect()
        }
        2 => {
            let mut out = vec![f64::NAN; names.len()];
            let mut seen = vec![false; names.len()];
            for (i, r) in records.iter().enumerate() {
                let k = names.iter().position(|n| n == &r[0]).ok_or_else(|| CliError::Data {
                    path: path.into(),
                    row: i + 1,
                    column: header[0].to_string(),
                    message: format!("unknown covariate '{}'", &r[0]),
                })?;
                out[k] = parse(&r[1], i + 1)?;
                seen[k] = true;
            }
            if let Some(k) = seen.iter().position(|s| !s) {
                return Err(CliError::format(path, format!("no value for covariate '{}'", names[k])));
            }
            Ok(out)
        }
        n => Err(CliError::format(path, format!("expected 1 or 2 columns, found {n}"))),
    }
}

/// Reorder `table` to the covariate order `names` by header; errors name
/// missing columns.
pub fn align_columns(table: &Table, names: &[String], path: &Path) -> Result<DMatrix<f64>> {
    if table.names == names {
        return Ok(table.x.clone());
    }
    let mut cols = Vec::with_capacity(names.len());
    for name in names {
        let j = table
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| CliError::format(path, format!("column '{name}' required by the model is missing")))?;
        cols.push(j);
    }
    if table.names.len() != names.len() {
        return Err(CliError::format(
            path,
            format!("{} columns but the model has {} covariates", table.names.len(), names.len()),
        ));
    }
    Ok(DMatrix::from_fn(table.x.nrows(), names.len(), |i, j| table.x[(i, cols[j])]))
}

/// Write a CSV table; numbers use the shortest round-trip representation.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    wtr.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        wtr.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    wtr.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

pub fn fmt(v: f64) -> String {
    format!("{v}")
}
