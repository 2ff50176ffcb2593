//! Site datasets and their CSV form.
//!
//! A site CSV has header `x0,...,x{d-1},y,z0,...,z{m-1}`; a missing label or
//! confounder is an empty field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffnet::Matrix;
use crate::error::{data_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Option<usize>,
    /// One entry per confounder; categorical values are stored as whole numbers.
    pub z: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteDataset {
    pub site: String,
    pub samples: Vec<Sample>,
}

impl SiteDataset {
    pub fn new(site: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let ds = Self { site: site.into(), samples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, m) = match self.samples.first() {
            Some(s) => (s.x.len(), s.z.len()),
            None => return Ok(()),
        };
        for (i, s) in self.samples.iter().enumerate() {
            if s.x.len() != d || s.z.len() != m {
                return data_err(format!("site {}: sample {i} has inconsistent dimensions", self.site));
            }
            if s.x.iter().any(|v| !v.is_finite()) || s.z.iter().flatten().any(|v| !v.is_finite()) {
                return data_err(format!("site {}: sample {i} has non-finite values", self.site));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.len())
    }

    pub fn num_confounders(&self) -> usize {
        self.samples.first().map_or(0, |s| s.z.len())
    }

    /// All labels, or `None` if any sample is unlabeled.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.samples.iter().map(|s| s.y).collect()
    }

    pub fn labeled(&self) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.y.is_some()).collect()
    }

    pub fn x_matrix(&self) -> Result<Matrix> {
        let rows: Vec<&[f64]> = self.samples.iter().map(|s| s.x.as_slice()).collect();
        Matrix::from_rows(&rows)
    }

    /// Copy with labels removed.
    pub fn unlabeled(&self) -> Self {
        let samples = self.samples.iter().map(|s| Sample { y: None, ..s.clone() }).collect();
        Self { site: self.site.clone(), samples }
    }

    /// Copy with every confounder withheld.
    pub fn without_z(&self) -> Self {
        let samples = self
            .samples
            .iter()
            .map(|s| Sample { z: vec![None; s.z.len()], ..s.clone() })
            .collect();
        Self { site: self.site.clone(), samples }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let (d, m) = (self.feature_dim(), self.num_confounders());
        let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
        header.push("y".into());
        header.extend((0..m).map(|i| format!("z{i}")));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut rec: Vec<String> = s.x.iter().map(|v| format!("{v:?}")).collect();
            rec.push(s.y.map_or(String::new(), |y| y.to_string()));
            rec.extend(s.z.iter().map(|z| z.map_or(String::new(), |v| format!("{v:?}"))));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, site: impl Into<String>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let y_col = match header.iter().position(|h| h == "y") {
            Some(c) => c,
            None => return data_err(format!("{}: missing `y` column", path.display())),
        };
        let parse = |field: &str, line: usize| -> Result<Option<f64>> {
            if field.is_empty() {
                return Ok(None);
            }
            field
                .parse::<f64>()
                .map(Some)
                .or_else(|_| data_err(format!("{}: line {line}: cannot parse {field:?}", path.display())))
        };
        let mut samples = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let mut x = Vec::with_capacity(y_col);
            for f in rec.iter().take(y_col) {
                match parse(f, i + 2)? {
                    Some(v) => x.push(v),
                    None => return data_err(format!("{}: line {}: empty feature", path.display(), i + 2)),
                }
            }
            let y = match parse(&rec[y_col], i + 2)? {
                Some(v) if v >= 0.0 && v.fract() == 0.0 => Some(v as usize),
                Some(v) => return data_err(format!("invalid label {v}")),
                None => None,
            };
            let z = rec.iter().skip(y_col + 1).map(|f| parse(f, i + 2)).collect::<Result<Vec<_>>>()?;
            samples.push(Sample { x, y, z });
        }
        Self::new(site, samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_with_missing_fields() {
        let ds = SiteDataset::new(
            "a",
            vec![
                Sample { x: vec![0.1, -2.5], y: Some(1), z: vec![Some(0.0)] },
                Sample { x: vec![1e-17, 3.0], y: None, z: vec![None] },
            ],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        ds.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x0,x1,y,z0\n"));
        assert!(text.contains("1e-17,3.0,,\n"));
        assert_eq!(SiteDataset::read_csv(&path, "a").unwrap(), ds);
    }

    #[test]
    fn inconsistent_rows_rejected() {
        let bad = SiteDataset::new(
            "b",
            vec![
                Sample { x: vec![0.0], y: None, z: vec![] },
                Sample { x: vec![0.0, 1.0], y: None, z: vec![] },
            ],
        );
        assert!(bad.is_err());
    }
}
