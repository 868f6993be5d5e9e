//! Incomplete longitudinal data in wide format.
//!
//! Missing cells are tracked by an explicit mask. The value stored under a
//! masked cell is meaningless and is never read by the estimators.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{GcmError, Result};

/// Literal token for a missing cell in CSV files.
pub const MISSING_TOKEN: &str = "NA";

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    values: DMatrix<f64>,
    /// Row-major N×T, `true` = observed.
    mask: Vec<bool>,
    aux: Option<Vec<f64>>,
    subject_ids: Vec<String>,
}

/// Subjects sharing the same set of observed occasions.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingPattern {
    pub occasions: Vec<usize>,
    pub subjects: Vec<usize>,
}

impl LongitudinalDataset {
    pub fn new(values: DMatrix<f64>, mask: Vec<bool>, subject_ids: Vec<String>) -> Result<Self> {
        let (n, t) = values.shape();
        if mask.len() != n * t {
            return Err(GcmError::Dimension(format!("mask has {} cells, values have {n}x{t}", mask.len())));
        }
        if subject_ids.len() != n {
            return Err(GcmError::Dimension(format!("{} subject ids for {n} rows", subject_ids.len())));
        }
        for i in 0..n {
            if !mask[i * t..(i + 1) * t].iter().any(|&m| m) {
                return Err(GcmError::AllMissing(i));
            }
            for k in 0..t {
                if mask[i * t + k] && !values[(i, k)].is_finite() {
                    return Err(GcmError::InvalidParameter(format!("non-finite observed value at ({i}, {k})")));
                }
            }
        }
        // Masked cells are normalised so equality ignores whatever was there.
        let mut values = values;
        for i in 0..n {
            for k in 0..t {
                if !mask[i * t + k] {
                    values[(i, k)] = 0.0;
                }
            }
        }
        Ok(Self { values, mask, aux: None, subject_ids })
    }

    pub fn complete(values: DMatrix<f64>) -> Result<Self> {
        let n = values.nrows();
        let mask = vec![true; values.len()];
        let ids = (1..=n).map(|i| format!("s{i}")).collect();
        Self::new(values, mask, ids)
    }

    pub fn with_aux(mut self, aux: Vec<f64>) -> Result<Self> {
        if aux.len() != self.n_subjects() {
            return Err(GcmError::Dimension("aux length must equal subject count".into()));
        }
        self.aux = Some(aux);
        Ok(self)
    }

    pub fn n_subjects(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_occasions(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_observed(&self, i: usize, t: usize) -> bool {
        self.mask[i * self.n_occasions() + t]
    }

    /// Observed value, or `None` for a masked cell.
    pub fn get(&self, i: usize, t: usize) -> Option<f64> {
        self.is_observed(i, t).then(|| self.values[(i, t)])
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn aux(&self) -> Option<&[f64]> {
        self.aux.as_deref()
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    /// Raw value matrix; masked cells hold 0.0.
    pub fn raw_values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_missing(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }

    /// Fraction of subjects missing at each occasion.
    pub fn missing_rates(&self) -> Vec<f64> {
        let (n, t) = (self.n_subjects(), self.n_occasions());
        (0..t)
            .map(|k| (0..n).filter(|&i| !self.is_observed(i, k)).count() as f64 / n.max(1) as f64)
            .collect()
    }

    pub fn observed_occasions(&self, i: usize) -> Vec<usize> {
        (0..self.n_occasions()).filter(|&t| self.is_observed(i, t)).collect()
    }

    /// Observed values in time order together with their occasion indices.
    pub fn observed_subproblem(&self, i: usize) -> Result<(DVector<f64>, Vec<usize>)> {
        if i >= self.n_subjects() {
            return Err(GcmError::Dimension(format!("subject {i} out of range")));
        }
        let idx = self.observed_occasions(i);
        if idx.is_empty() {
            return Err(GcmError::AllMissing(i));
        }
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&t| self.values[(i, t)]));
        Ok((y, idx))
    }

    /// Groups subjects by missingness pattern, ordered by pattern.
    pub fn patterns(&self) -> Vec<MissingPattern> {
        let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
        for i in 0..self.n_subjects() {
            groups.entry(self.observed_occasions(i)).or_default().push(i);
        }
        groups
            .into_iter()
            .map(|(occasions, subjects)| MissingPattern { occasions, subjects })
            .collect()
    }

    /// New dataset with the same values but a different mask.
    pub fn remasked(&self, mask: Vec<bool>) -> Result<Self> {
        let mut out = Self::new(self.values.clone(), mask, self.subject_ids.clone())?;
        out.aux = self.aux.clone();
        Ok(out)
    }

    /// Rows in a new order (used for permutation tests).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let t = self.n_occasions();
        let values = DMatrix::from_fn(order.len(), t, |a, k| self.values[(order[a], k)]);
        let mask = order.iter().flat_map(|&i| self.mask[i * t..(i + 1) * t].iter().copied()).collect();
        let ids = order.iter().map(|&i| self.subject_ids[i].clone()).collect();
        let mut out = Self::new(values, mask, ids)?;
        out.aux = self.aux.as_ref().map(|a| order.iter().map(|&i| a[i]).collect());
        Ok(out)
    }

    /// Multiply every observed value by `k`.
    pub fn scaled(&self, k: f64) -> Result<Self> {
        let mut out = Self::new(&self.values * k, self.mask.clone(), self.subject_ids.clone())?;
        out.aux = self.aux.clone();
        Ok(out)
    }
}

/// Result of parsing a wide-format CSV.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: LongitudinalDataset,
    /// Ids of subjects dropped because every occasion was missing.
    pub dropped: Vec<String>,
}

/// Parses `id,y1,...,yT` with `NA` for missing cells.
pub fn read_csv<R: Read>(reader: R) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(GcmError::EmptyInput("no header row".into()));
    }
    let t = headers.len() - 1;
    if t < 1 {
        return Err(GcmError::Parse { line: 1, msg: "need an id column and at least one occasion".into() });
    }
    let mut ids = Vec::new();
    let mut cells = Vec::new();
    let mut mask = Vec::new();
    let mut dropped = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| GcmError::Parse { line, msg: e.to_string() })?;
        if rec.len() != t + 1 {
            return Err(GcmError::Parse { line, msg: format!("expected {} fields, got {}", t + 1, rec.len()) });
        }
        let mut row_vals = Vec::with_capacity(t);
        let mut row_mask = Vec::with_capacity(t);
        for field in rec.iter().skip(1) {
            if field == MISSING_TOKEN {
                row_vals.push(0.0);
                row_mask.push(false);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| GcmError::Parse { line, msg: format!("non-numeric cell {field:?}") })?;
                if !v.is_finite() {
                    return Err(GcmError::Parse { line, msg: format!("non-finite cell {field:?}") });
                }
                row_vals.push(v);
                row_mask.push(true);
            }
        }
        if !row_mask.iter().any(|&m| m) {
            log::warn!("dropping subject {} with no observed occasions", &rec[0]);
            dropped.push(rec[0].to_string());
            continue;
        }
        ids.push(rec[0].to_string());
        cells.extend(row_vals);
        mask.extend(row_mask);
    }
    if ids.is_empty() {
        return Err(GcmError::EmptyInput("no data rows".into()));
    }
    let values = DMatrix::from_row_slice(ids.len(), t, &cells);
    Ok(Ingested { dataset: LongitudinalDataset::new(values, mask, ids)?, dropped })
}

/// Writes the wide format read by [`read_csv`]. The auxiliary column is not written.
pub fn write_csv<W: Write>(data: &LongitudinalDataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let t = data.n_occasions();
    let mut header = vec!["id".to_string()];
    header.extend((1..=t).map(|k| format!("y{k}")));
    wtr.write_record(&header)?;
    for i in 0..data.n_subjects() {
        let mut rec = vec![data.subject_ids[i].clone()];
        rec.extend((0..t).map(|k| match data.get(i, k) {
            Some(v) => format!("{v}"),
            None => MISSING_TOKEN.to_string(),
        }));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
