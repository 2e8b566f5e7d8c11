use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// An `n x p` sample of observations, one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTable {
    rows: DMatrix<f64>,
    column_names: Vec<String>,
}

impl DataTable {
    /// Requires `n >= 2`, `p >= 1` and finite entries.
    pub fn new(rows: DMatrix<f64>, column_names: Vec<String>) -> Result<Self> {
        if rows.nrows() < 2 || rows.ncols() < 1 {
            return Err(Error::InvalidInput(format!(
                "need n >= 2 and p >= 1, got {}x{}",
                rows.nrows(),
                rows.ncols()
            )));
        }
        if column_names.len() != rows.ncols() {
            return Err(Error::DimensionMismatch {
                expected: rows.ncols(),
                actual: column_names.len(),
            });
        }
        if let Some(pos) = rows.iter().position(|v| !v.is_finite()) {
            let (n, _) = rows.shape();
            return Err(Error::InvalidInput(format!(
                "non-finite value at row {}, column {}",
                pos % n + 1,
                pos / n + 1
            )));
        }
        Ok(DataTable { rows, column_names })
    }

    /// Columns named `x1..xp`.
    pub fn from_matrix(rows: DMatrix<f64>) -> Result<Self> {
        let names = (1..=rows.ncols()).map(|j| format!("x{j}")).collect();
        Self::new(rows, names)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidInput("ragged rows".into()));
        }
        Self::from_matrix(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn p(&self) -> usize {
        self.rows.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.rows.row(i).transpose()
    }

    /// Same column names, new values. Used by the resamplers, whose output is
    /// finite whenever the input is.
    pub(crate) fn with_values(&self, rows: DMatrix<f64>) -> DataTable {
        debug_assert_eq!(rows.ncols(), self.p());
        DataTable {
            rows,
            column_names: self.column_names.clone(),
        }
    }

    /// Applies `x -> A x + b` to every observation.
    pub fn affine(&self, a: &DMatrix<f64>, b: &DVector<f64>) -> DataTable {
        let mut m = &self.rows * a.transpose();
        for mut row in m.row_iter_mut() {
            row += b.transpose();
        }
        self.with_values(m)
    }
}

/// Reads a CSV file with a header row. When `response_column` is given, that
/// column is removed from the table and returned separately.
pub fn load_table(path: impl AsRef<Path>, response_column: Option<&str>) -> Result<(DataTable, Option<Vec<f64>>)> {
    let file =
        std::fs::File::open(path.as_ref()).map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    read_table(file, response_column)
}

/// [`load_table`] over any reader.
pub fn read_table<R: Read>(reader: R, response_column: Option<&str>) -> Result<(DataTable, Option<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Io(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let response_idx = match response_column {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::ColumnNotFound(name.to_string()))?,
        ),
        None => None,
    };

    let mut values: Vec<Vec<f64>> = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row: r + 1,
            column: 0,
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row: r + 1,
                column: record.len().min(headers.len()) + 1,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let mut row = Vec::with_capacity(headers.len());
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: r + 1,
                column: c + 1,
                message: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: r + 1,
                    column: c + 1,
                    message: format!("non-finite value: {cell:?}"),
                });
            }
            row.push(v);
        }
        values.push(row);
    }

    let n = values.len();
    let keep: Vec<usize> = (0..headers.len()).filter(|&c| Some(c) != response_idx).collect();
    let x = DMatrix::from_fn(n, keep.len(), |i, j| values[i][keep[j]]);
    let names = keep.iter().map(|&c| headers[c].clone()).collect();
    let y = response_idx.map(|c| values.iter().map(|row| row[c]).collect());
    Ok((DataTable::new(x, names)?, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_plain_table() {
        let (x, y) = read_table("a,b\n1,2\n3,4\n5,6\n".as_bytes(), None).unwrap();
        assert_eq!((x.n(), x.p()), (3, 2));
        assert_eq!(x.column_names(), &["a".to_string(), "b".to_string()]);
        assert_eq!(x.matrix()[(2, 1)], 6.0);
        assert!(y.is_none());
    }

    #[test]
    fn splits_response() {
        let (x, y) = read_table("a,b\n1,2\n3,4\n5,6\n".as_bytes(), Some("b")).unwrap();
        assert_eq!((x.n(), x.p()), (3, 1));
        assert_eq!(y.unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn nan_cell_is_a_parse_error() {
        let err = read_table("a,b\n1,2\nNaN,4\n".as_bytes(), None).unwrap_err();
        assert_eq!(
            err,
            Error::Parse {
                row: 2,
                column: 1,
                message: "non-finite value: \"NaN\"".into()
            }
        );
    }

    #[test]
    fn non_numeric_and_missing() {
        assert!(matches!(
            read_table("a,b\n1,x\n".as_bytes(), None),
            Err(Error::Parse { row: 1, column: 2, .. })
        ));
        assert!(matches!(
            read_table("a,b\n1,\n3,4\n".as_bytes(), None),
            Err(Error::Parse { row: 1, column: 2, .. })
        ));
    }

    #[test]
    fn unknown_response() {
        assert_eq!(
            read_table("a,b\n1,2\n3,4\n".as_bytes(), Some("y")).unwrap_err(),
            Error::ColumnNotFound("y".into())
        );
    }
}
