use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::elbo::Likelihood;
use crate::error::{invalid, QsgpError, Result};

/// Parsing options for numeric CSV input.
#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub has_header: bool,
    /// Zero-based target column; `None` means the last one.
    pub target_column: Option<usize>,
    pub delimiter: u8,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            has_header: false,
            target_column: None,
            delimiter: b',',
        }
    }
}

/// Inputs and targets exactly as read.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
}

impl RawTable {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return invalid("a table needs at least one row and one input column");
        }
        if x.nrows() != y.len() {
            return invalid("inputs and targets must have the same number of rows");
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return invalid("table entries must be finite");
        }
        Ok(Self { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }
}

pub fn read_csv(path: impl AsRef<Path>, options: &CsvOptions) -> Result<RawTable> {
    read_csv_from(std::fs::File::open(path)?, options)
}

/// Rows and columns in parse errors are 1-based and count data records only.
pub fn read_csv_from<R: Read>(reader: R, options: &CsvOptions) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(options.has_header)
        .delimiter(options.delimiter)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| QsgpError::Parse {
            row: r + 1,
            col: 0,
            msg: e.to_string(),
        })?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        let vals = rec
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| QsgpError::Parse {
                        row: r + 1,
                        col: c + 1,
                        msg: format!("'{cell}' is not a finite number"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != vals.len() {
                return Err(QsgpError::Parse {
                    row: r + 1,
                    col: vals.len(),
                    msg: format!("expected {} columns", first.len()),
                });
            }
        }
        rows.push(vals);
    }
    let Some(width) = rows.first().map(Vec::len) else {
        return invalid("the file contains no data rows");
    };
    if width < 2 {
        return invalid("at least one input column and one target column are required");
    }
    let target = options.target_column.unwrap_or(width - 1);
    if target >= width {
        return invalid(format!("target column {target} is out of range for {width} columns"));
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, width - 1, |i, j| rows[i][if j < target { j } else { j + 1 }]);
    let y = rows.iter().map(|r| r[target]).collect();
    RawTable::new(x, y)
}

/// Maps classification labels `{0, 1}` or `{−1, +1}` onto `±1`.
pub fn class_labels(y: &[f64]) -> Result<Vec<f64>> {
    y.iter()
        .enumerate()
        .map(|(i, &v)| match v {
            v if v == 1.0 => Ok(1.0),
            v if v == 0.0 || v == -1.0 => Ok(-1.0),
            _ => Err(QsgpError::Parse {
                row: i + 1,
                col: 0,
                msg: format!("class label {v} is not one of 0, 1, -1"),
            }),
        })
        .collect()
}

/// Affine maps taking raw inputs and targets to the training scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
}

fn mean_and_scale(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    // constant columns map to zero rather than dividing by zero
    (mean, if sd > 1e-12 * mean.abs().max(1.0) { sd } else { 1.0 })
}

impl Standardizer {
    /// Zero mean and unit variance per input column; targets likewise when
    /// `scale_targets`, otherwise left unchanged.
    pub fn fit(table: &RawTable, scale_targets: bool) -> Self {
        let (x_mean, x_scale) = (0..table.d()).map(|j| mean_and_scale(table.x.column(j).iter().copied())).unzip();
        let (y_mean, y_scale) = if scale_targets {
            mean_and_scale(table.y.iter().copied())
        } else {
            (0.0, 1.0)
        };
        Self {
            x_mean,
            x_scale,
            y_mean,
            y_scale,
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            x_mean: vec![0.0; d],
            x_scale: vec![1.0; d],
            y_mean: 0.0,
            y_scale: 1.0,
        }
    }

    pub fn d(&self) -> usize {
        self.x_mean.len()
    }

    pub fn transform_x(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.d() {
            return invalid(format!("data has {} input columns, the model expects {}", x.ncols(), self.d()));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.x_mean[j]) / self.x_scale[j]))
    }

    pub fn transform_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.y_mean) / self.y_scale).collect()
    }

    pub fn inverse_y(&self, v: f64) -> f64 {
        v * self.y_scale + self.y_mean
    }

    pub fn inverse_variance(&self, v: f64) -> f64 {
        v * self.y_scale * self.y_scale
    }
}

/// Standardized training data with the transform that produced it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub standardizer: Standardizer,
}

impl Dataset {
    /// Fits the standardizer. Classification labels become `±1` and are not rescaled.
    pub fn from_raw(raw: &RawTable, likelihood: Likelihood) -> Result<Self> {
        let regression = likelihood.is_regression();
        let standardizer = Standardizer::fit(raw, regression);
        let y = if regression {
            standardizer.transform_y(&raw.y)
        } else {
            class_labels(&raw.y)?
        };
        Ok(Self {
            x: standardizer.transform_x(&raw.x)?,
            y,
            standardizer,
        })
    }

    /// Applies an existing transform, e.g. the one stored with a trained model.
    pub fn with_standardizer(raw: &RawTable, likelihood: Likelihood, standardizer: &Standardizer) -> Result<Self> {
        let y = if likelihood.is_regression() {
            standardizer.transform_y(&raw.y)
        } else {
            class_labels(&raw.y)?
        };
        Ok(Self {
            x: standardizer.transform_x(&raw.x)?,
            y,
            standardizer: standardizer.clone(),
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }
}

pub fn load_csv(path: impl AsRef<Path>, options: &CsvOptions, likelihood: Likelihood) -> Result<Dataset> {
    Dataset::from_raw(&read_csv(path, options)?, likelihood)
}

/// Writes a header line and rows of numbers, atomically replacing `path`.
pub fn write_csv(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    super::write_atomically(path.as_ref(), |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(header).map_err(csv_err)?;
        for row in rows {
            out.write_record(row.iter().map(|v| format_float(*v))).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    })
}

/// Shortest representation that parses back to the same value.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

fn csv_err(e: csv::Error) -> QsgpError {
    QsgpError::Format(e.to_string())
}
