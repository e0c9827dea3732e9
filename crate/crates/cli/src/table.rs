//! CSV input: labeled data files and unlabeled pool files.
//!
//! Column roles come from header names: `y`, `x`, `z_*` confounders and
//! `v_*` surrogates, in file order. Any other column is kept by name and can
//! be referenced as a weight or control-variate column.

use std::collections::BTreeMap;
use std::path::Path;

use cspcr::model::{CovariateRow, LabeledSample, Population, SourceDataset, UnlabeledPool};
use cspcr::model::validate_dataset;

use crate::CliError;

#[derive(Debug, Clone)]
pub struct Table {
    y: Option<usize>,
    x: usize,
    z: Vec<usize>,
    v: Vec<usize>,
    extras: BTreeMap<String, usize>,
    rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let shown = path.display();
        let mut reader = csv::ReaderBuilder::new()
            .from_path(path)
            .map_err(|e| CliError::Input(format!("{shown}: {e}")))?;
        let headers = reader.headers().map_err(|e| CliError::Input(format!("{shown}: {e}")))?.clone();

        let mut y = None;
        let mut x = None;
        let mut z = Vec::new();
        let mut v = Vec::new();
        let mut extras = BTreeMap::new();
        let mut seen = BTreeMap::new();
        for (i, name) in headers.iter().enumerate() {
            let name = name.trim();
            if seen.insert(name.to_string(), i).is_some() {
                return Err(CliError::Input(format!("{shown}: duplicate column `{name}`")));
            }
            match name {
                "y" => y = Some(i),
                "x" => x = Some(i),
                _ if name.starts_with("z_") => z.push(i),
                _ if name.starts_with("v_") => v.push(i),
                _ => {
                    extras.insert(name.to_string(), i);
                }
            }
        }
        let x = x.ok_or_else(|| CliError::Input(format!("{shown}: missing column `x`")))?;

        let mut rows = Vec::new();
        for (r, record) in reader.records().enumerate() {
            let record = record.map_err(|e| CliError::Input(format!("{shown}: {e}")))?;
            let row = record
                .iter()
                .enumerate()
                .map(|(c, cell)| {
                    cell.trim().parse::<f64>().map_err(|_| {
                        CliError::Input(format!("{shown}: row {}, column `{}`: cannot parse `{cell}`", r + 1, &headers[c]))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Ok(Table { y, x, z, v, extras, rows })
    }

    pub fn z_dim(&self) -> usize {
        self.z.len()
    }

    pub fn v_dim(&self) -> usize {
        self.v.len()
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>, CliError> {
        let index = match name {
            "y" => self.y,
            "x" => Some(self.x),
            _ => self.extras.get(name).copied(),
        }
        .ok_or_else(|| CliError::Input(format!("no column named `{name}`")))?;
        Ok(self.rows.iter().map(|row| row[index]).collect())
    }

    fn covariates(&self, row: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        (row[self.x], self.z.iter().map(|&i| row[i]).collect(), self.v.iter().map(|&i| row[i]).collect())
    }

    pub fn dataset(&self) -> Result<SourceDataset, CliError> {
        let y = self.y.ok_or_else(|| CliError::Input("data file needs a `y` column".into()))?;
        let samples = self
            .rows
            .iter()
            .map(|row| {
                let (x, z, v) = self.covariates(row);
                LabeledSample::new(row[y], x, z, v)
            })
            .collect();
        validate_dataset(samples).map_err(|e| CliError::Input(e.to_string()))
    }

    pub fn pool(&self, population: Population) -> Result<UnlabeledPool, CliError> {
        let rows = self
            .rows
            .iter()
            .map(|row| {
                let (x, z, v) = self.covariates(row);
                CovariateRow { x, z, v }
            })
            .collect();
        UnlabeledPool::new(population, rows).map_err(|e| CliError::Input(e.to_string()))
    }
}
