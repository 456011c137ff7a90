//! Shared data model: covariates `X` (n×p), treatments `T` (n×q) and outcome `Y`.
//!
//! Standardization centers every covariate and treatment column and scales it to
//! unit standard deviation using the population (denominator `n`) convention.
//! That convention is used everywhere else in the crate, so `X'X / n` is the
//! sample correlation matrix of standardized covariates.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Block, Error, Result};

/// Ground-truth role of a covariate. Only known for simulated data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CovariateRole {
    Confounder,
    Predictor,
    Instrument,
    Spurious,
}

impl CovariateRole {
    /// Members of the target set: confounders and outcome predictors.
    pub fn is_target(self) -> bool {
        matches!(self, CovariateRole::Confounder | CovariateRole::Predictor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    t: DMatrix<f64>,
    y: DVector<f64>,
    covariate_names: Vec<String>,
    treatment_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        x: DMatrix<f64>,
        t: DMatrix<f64>,
        y: DVector<f64>,
        covariate_names: Vec<String>,
        treatment_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(Error::InvalidData(format!("need at least 2 rows, got {n}")));
        }
        if x.nrows() != n || t.nrows() != n {
            return Err(Error::InvalidData(format!(
                "row counts disagree: X has {}, T has {}, Y has {n}",
                x.nrows(),
                t.nrows()
            )));
        }
        if x.ncols() == 0 || t.ncols() == 0 {
            return Err(Error::InvalidData(
                "need at least one covariate and one treatment".into(),
            ));
        }
        if covariate_names.len() != x.ncols() || treatment_names.len() != t.ncols() {
            return Err(Error::InvalidData("column name count mismatch".into()));
        }
        if !(x.iter().all(|v| v.is_finite())
            && t.iter().all(|v| v.is_finite())
            && y.iter().all(|v| v.is_finite()))
        {
            return Err(Error::InvalidData("non-finite entry".into()));
        }
        Ok(Self {
            x,
            t,
            y,
            covariate_names,
            treatment_names,
        })
    }

    /// Builds a dataset with generated names `x1..xp` and `t1..tq`.
    pub fn from_matrices(x: DMatrix<f64>, t: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let covariate_names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        let treatment_names = (1..=t.ncols()).map(|j| format!("t{j}")).collect();
        Self::new(x, t, y, covariate_names, treatment_names)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.t.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn t(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn treatment_names(&self) -> &[String] {
        &self.treatment_names
    }

    /// Centers and scales every column of `X` and `T`; `Y` is passed through.
    pub fn standardize(&self) -> Result<Dataset> {
        let x = standardize_columns(&self.x, Block::Covariates)?;
        let t = standardize_columns(&self.t, Block::Treatments)?;
        Ok(Dataset {
            x,
            t,
            y: self.y.clone(),
            covariate_names: self.covariate_names.clone(),
            treatment_names: self.treatment_names.clone(),
        })
    }

    /// Keeps only the covariates at `indices`, in the order given.
    pub fn select_covariates(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&k| k >= self.p()) {
            return Err(Error::InvalidArgument(format!(
                "covariate index {bad} out of range (p = {})",
                self.p()
            )));
        }
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty covariate selection".into()));
        }
        Ok(Dataset {
            x: self.x.select_columns(indices),
            t: self.t.clone(),
            y: self.y.clone(),
            covariate_names: indices
                .iter()
                .map(|&k| self.covariate_names[k].clone())
                .collect(),
            treatment_names: self.treatment_names.clone(),
        })
    }

    /// Builds a dataset from the given rows (repeats allowed, as in a bootstrap draw).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Dataset> {
        if rows.len() < 2 {
            return Err(Error::InvalidArgument("need at least 2 rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= self.n()) {
            return Err(Error::InvalidArgument(format!("row {bad} out of range")));
        }
        Ok(Dataset {
            x: self.x.select_rows(rows),
            t: self.t.select_rows(rows),
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i])),
            covariate_names: self.covariate_names.clone(),
            treatment_names: self.treatment_names.clone(),
        })
    }

    /// Reads a headed, comma-separated file. Columns other than the treatments
    /// and the outcome become covariates, in file order.
    pub fn load_csv<P: AsRef<Path>>(
        path: P,
        treatment_cols: &[&str],
        outcome_col: &str,
    ) -> Result<Dataset> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::read_csv(file, treatment_cols, outcome_col)
    }

    pub fn read_csv<R: std::io::Read>(
        reader: R,
        treatment_cols: &[&str],
        outcome_col: &str,
    ) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .quoting(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::InvalidData(format!("unreadable header: {e}")))?
            .iter()
            .map(str::to_owned)
            .collect();
        let position = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.to_owned()))
        };
        let outcome_idx = position(outcome_col)?;
        let treatment_idx = treatment_cols
            .iter()
            .map(|name| position(name))
            .collect::<Result<Vec<_>>>()?;
        if treatment_idx.contains(&outcome_idx) {
            return Err(Error::InvalidArgument(
                "outcome column is also listed as a treatment".into(),
            ));
        }
        let covariate_idx: Vec<usize> = (0..headers.len())
            .filter(|j| *j != outcome_idx && !treatment_idx.contains(j))
            .collect();

        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (r, record) in rdr.records().enumerate() {
            // Line 1 is the header.
            let line = r + 2;
            let record = record.map_err(|e| Error::Parse {
                row: line,
                column: String::new(),
                message: e.to_string(),
            })?;
            if record.len() != headers.len() {
                return Err(Error::Parse {
                    row: line,
                    column: String::new(),
                    message: format!("expected {} fields, found {}", headers.len(), record.len()),
                });
            }
            let values = record
                .iter()
                .zip(&headers)
                .map(|(cell, name)| {
                    cell.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::Parse {
                            row: line,
                            column: name.clone(),
                            message: format!("`{cell}` is not a finite number"),
                        })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(values);
        }
        let n = rows.len();
        let pick = |cols: &[usize]| DMatrix::from_fn(n, cols.len(), |i, j| rows[i][cols[j]]);
        Dataset::new(
            pick(&covariate_idx),
            pick(&treatment_idx),
            DVector::from_fn(n, |i, _| rows[i][outcome_idx]),
            covariate_idx.iter().map(|&j| headers[j].clone()).collect(),
            treatment_idx.iter().map(|&j| headers[j].clone()).collect(),
        )
    }
}

/// Population mean and standard deviation (denominator `n`).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub(crate) fn standardize_columns(m: &DMatrix<f64>, block: Block) -> Result<DMatrix<f64>> {
    let mut out = m.clone();
    for (index, mut col) in out.column_iter_mut().enumerate() {
        let (mean, sd) = mean_sd(col.as_slice());
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::ConstantColumn { block, index });
        }
        col.apply(|v| *v = (*v - mean) / sd);
    }
    Ok(out)
}

/// Pearson correlation of two equal-length slices.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&u, &v) in a.iter().zip(b) {
        sab += (u - ma) * (v - mb);
        saa += (u - ma) * (u - ma);
        sbb += (v - mb) * (v - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(x: Vec<f64>, t: Vec<f64>) -> Dataset {
        let n = t.len();
        let p = x.len() / n;
        Dataset::from_matrices(
            DMatrix::from_column_slice(n, p, &x),
            DMatrix::from_column_slice(n, 1, &t),
            DVector::from_element(n, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn standardize_small_column() {
        let d = toy(vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 5.0]);
        let s = d.standardize().unwrap();
        let expect = 1.5_f64.sqrt();
        assert!((s.x()[(0, 0)] + expect).abs() < 1e-12);
        assert!(s.x()[(1, 0)].abs() < 1e-12);
        assert!((s.x()[(2, 0)] - expect).abs() < 1e-12);
        assert_eq!(s.y(), d.y());
    }

    #[test]
    fn constant_column_is_rejected() {
        let d = toy(vec![1.0, 2.0, 3.0, 5.0, 5.0, 5.0], vec![0.0, 1.0, 5.0]);
        match d.standardize() {
            Err(Error::ConstantColumn {
                block: Block::Covariates,
                index: 1,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_partition_and_order() {
        let text = "t1,t2,y,x1,x2\n1,2,3,4,5\n2,3,4,5,7\n0,1,1,1,1\n5,1,2,3,9\n";
        let d = Dataset::read_csv(text.as_bytes(), &["t1", "t2"], "y").unwrap();
        assert_eq!((d.n(), d.p(), d.q()), (4, 2, 2));
        assert_eq!(d.covariate_names(), ["x1", "x2"]);
        assert_eq!(d.x()[(1, 1)], 7.0);
        assert_eq!(d.t()[(3, 0)], 5.0);
        assert_eq!(d.y()[2], 1.0);
    }

    #[test]
    fn csv_bad_cell_names_location() {
        let text = "t1,y,x1\n1,2,3\n1,oops,3\n";
        match Dataset::read_csv(text.as_bytes(), &["t1"], "y") {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "y");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_missing_outcome() {
        let text = "t1,x1\n1,2\n3,4\n";
        assert!(matches!(
            Dataset::read_csv(text.as_bytes(), &["t1"], "y"),
            Err(Error::MissingColumn(c)) if c == "y"
        ));
    }

    proptest! {
        #[test]
        fn standardize_is_idempotent_and_keeps_correlation(
            cols in proptest::collection::vec(-50.0f64..50.0, 40)
        ) {
            let d = toy(cols[..30].to_vec(), cols[30..].to_vec());
            let d = match d.standardize() { Ok(_) => d, Err(_) => return Ok(()) };
            let once = d.standardize().unwrap();
            let twice = once.standardize().unwrap();
            for (a, b) in once.x().iter().zip(twice.x().iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            for j in 0..once.p() {
                let (m, s) = mean_sd(once.x().column(j).as_slice());
                prop_assert!(m.abs() <= 1e-10 && (s - 1.0).abs() <= 1e-10);
            }
            let r0 = pearson(d.x().column(0).as_slice(), d.x().column(1).as_slice());
            let r1 = pearson(once.x().column(0).as_slice(), once.x().column(1).as_slice());
            prop_assert!((r0 - r1).abs() <= 1e-10);
        }
    }
}
