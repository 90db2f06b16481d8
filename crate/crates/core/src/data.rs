//! Datasets, CSV ingestion, standardization and covariate partialling.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WitError};
use crate::linalg::{self, Basis};

/// Outcome, treatment and candidate instruments for one IV problem.
///
/// Construction enforces `n > p >= 1` and finiteness of every entry.
#[derive(Debug, Clone)]
pub struct IVDataset {
    y: DVector<f64>,
    d: DVector<f64>,
    z: DMatrix<f64>,
    w: Option<DMatrix<f64>>,
    standardized: bool,
    z_scales: Vec<f64>,
    instrument_names: Vec<String>,
}

impl IVDataset {
    pub fn new(
        y: DVector<f64>,
        d: DVector<f64>,
        z: DMatrix<f64>,
        w: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let (n, p) = z.shape();
        if y.len() != n || d.len() != n {
            return Err(WitError::Dimension(format!(
                "y has {} rows, d has {} rows, z has {n} rows",
                y.len(),
                d.len()
            )));
        }
        if p == 0 {
            return Err(WitError::Dimension(
                "at least one instrument is required".into(),
            ));
        }
        if n <= p {
            return Err(WitError::Dimension(format!(
                "need more observations than instruments (n = {n}, p = {p})"
            )));
        }
        if let Some(w) = &w {
            if w.nrows() != n {
                return Err(WitError::Dimension(format!(
                    "covariates have {} rows, expected {n}",
                    w.nrows()
                )));
            }
        }
        let finite = y
            .iter()
            .chain(d.iter())
            .chain(z.iter())
            .all(|v| v.is_finite())
            && w.as_ref().is_none_or(|w| w.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(WitError::Domain(
                "dataset contains non-finite values".into(),
            ));
        }
        let instrument_names = (0..p).map(|j| format!("z{}", j + 1)).collect();
        Ok(IVDataset {
            y,
            d,
            z,
            w,
            standardized: false,
            z_scales: vec![1.0; p],
            instrument_names,
        })
    }

    /// Replaces the default instrument labels (`z1`, `z2`, ...).
    pub fn with_instrument_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p() {
            return Err(WitError::Dimension(format!(
                "{} names for {} instruments",
                names.len(),
                self.p()
            )));
        }
        self.instrument_names = names;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn p(&self) -> usize {
        self.z.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn w(&self) -> Option<&DMatrix<f64>> {
        self.w.as_ref()
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    /// Cumulative factor each instrument column was multiplied by during standardization.
    pub fn z_scales(&self) -> &[f64] {
        &self.z_scales
    }

    pub fn instrument_names(&self) -> &[String] {
        &self.instrument_names
    }

    /// Returns a copy with `y` replaced, keeping every other field.
    pub fn with_outcome(&self, y: DVector<f64>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(WitError::Dimension("outcome length mismatch".into()));
        }
        Ok(IVDataset { y, ..self.clone() })
    }

    /// Centers `y` and `d`, centers every instrument and scales it to `||z_j||^2 = n`.
    ///
    /// Idempotent: a standardized dataset is returned unchanged up to rounding.
    pub fn standardize(&self) -> Result<Self> {
        let n = self.n();
        let nf = n as f64;
        let mut z = self.z.clone();
        let mut scales = self.z_scales.clone();
        for (j, scale) in scales.iter_mut().enumerate() {
            let mut col = z.column_mut(j);
            let mean = col.mean();
            col.add_scalar_mut(-mean);
            let ss = col.norm_squared();
            let range = col.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if ss <= 1e-24 * nf || range <= 1e-12 * (1.0 + mean.abs()) {
                return Err(WitError::DegenerateColumn(j));
            }
            let factor = (nf / ss).sqrt();
            col *= factor;
            *scale *= factor;
        }
        let y = center(&self.y);
        let d = center(&self.d);
        Ok(IVDataset {
            y,
            d,
            z,
            w: self.w.clone(),
            standardized: true,
            z_scales: scales,
            instrument_names: self.instrument_names.clone(),
        })
    }

    /// Residualizes `y`, `d` and every instrument on `[1, W]` and drops `W`.
    pub fn partial_out(&self) -> Result<Self> {
        let w = self
            .w
            .as_ref()
            .ok_or_else(|| WitError::Spec("partial_out requires covariates".into()))?;
        let n = self.n();
        let mut design = DMatrix::from_element(n, w.ncols() + 1, 1.0);
        design.columns_mut(1, w.ncols()).copy_from(w);
        if design.ncols() >= n {
            return Err(WitError::Collinear(format!(
                "{} covariates (with intercept) for {n} observations",
                design.ncols()
            )));
        }
        let basis = Basis::new(&design).map_err(|_| {
            WitError::Collinear("covariate matrix (with intercept) is rank deficient".into())
        })?;
        let y = basis.annihilate(&self.y);
        let d = basis.annihilate(&self.d);
        let z = basis.annihilate_matrix(&self.z);
        for j in 0..z.ncols() {
            if z.column(j).norm_squared() <= 1e-20 * self.z.column(j).norm_squared().max(1.0) {
                return Err(WitError::DegenerateColumn(j));
            }
        }
        Ok(IVDataset {
            y,
            d,
            z,
            w: None,
            standardized: false,
            z_scales: self.z_scales.clone(),
            instrument_names: self.instrument_names.clone(),
        })
    }

    /// First-stage and outcome reduced-form OLS on all instruments.
    pub fn reduced_form(&self) -> Result<ReducedForm> {
        let n = self.n() as f64;
        let ztz = self.z.tr_mul(&self.z);
        let gram = &ztz / n;
        let chol = ztz
            .clone()
            .cholesky()
            .ok_or_else(|| WitError::Rank("instrument gram matrix is singular".into()))?;
        let gamma_d = chol.solve(&self.z.tr_mul(&self.d));
        let gamma_y = chol.solve(&self.z.tr_mul(&self.y));
        Ok(ReducedForm {
            gamma_d,
            gamma_y,
            gram,
        })
    }

    /// Instruments restricted to `cols`.
    pub fn z_columns(&self, cols: &[usize]) -> DMatrix<f64> {
        linalg::select_columns(&self.z, cols)
    }
}

fn center(v: &DVector<f64>) -> DVector<f64> {
    let mean = v.mean();
    v.add_scalar(-mean)
}

/// Reduced-form coefficients: `gamma_d = (Z'Z)^{-1} Z'D` and `gamma_y = (Z'Z)^{-1} Z'Y`.
#[derive(Debug, Clone)]
pub struct ReducedForm {
    pub gamma_d: DVector<f64>,
    pub gamma_y: DVector<f64>,
    /// `Z'Z / n`
    pub gram: DMatrix<f64>,
}

/// Ground truth of a simulated design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthLabels {
    pub beta_star: f64,
    pub alpha_star: Vec<f64>,
    pub gamma_star: Vec<f64>,
    pub valid_set: Vec<usize>,
}

impl TruthLabels {
    pub fn new(beta_star: f64, alpha_star: Vec<f64>, gamma_star: Vec<f64>) -> Result<Self> {
        if alpha_star.len() != gamma_star.len() {
            return Err(WitError::Dimension(format!(
                "alpha has {} entries, gamma has {}",
                alpha_star.len(),
                gamma_star.len()
            )));
        }
        let valid_set: Vec<usize> = alpha_star
            .iter()
            .enumerate()
            .filter(|(_, a)| **a == 0.0)
            .map(|(j, _)| j)
            .collect();
        if valid_set.is_empty() {
            return Err(WitError::Spec(
                "at least one valid instrument (alpha_j = 0) is required".into(),
            ));
        }
        Ok(TruthLabels {
            beta_star,
            alpha_star,
            gamma_star,
            valid_set,
        })
    }

    pub fn p(&self) -> usize {
        self.alpha_star.len()
    }
}

/// A column reference by header name or zero-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

impl std::str::FromStr for ColumnRef {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        Ok(match s.parse::<usize>() {
            Ok(i) => ColumnRef::Index(i),
            Err(_) => ColumnRef::Name(s.to_string()),
        })
    }
}

/// Which CSV columns hold the outcome, treatment, instruments and covariates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub y: ColumnRef,
    pub d: ColumnRef,
    pub z: Vec<ColumnRef>,
    #[serde(default)]
    pub w: Vec<ColumnRef>,
}

fn resolve(headers: &csv::StringRecord, col: &ColumnRef) -> Result<usize> {
    match col {
        ColumnRef::Index(i) if *i < headers.len() => Ok(*i),
        ColumnRef::Index(i) => Err(WitError::Schema(format!(
            "column index {i} out of range ({} columns)",
            headers.len()
        ))),
        ColumnRef::Name(name) => headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| WitError::Schema(format!("missing column '{name}'"))),
    }
}

/// Reads a headed CSV file into an unstandardized dataset.
pub fn load_csv(path: impl AsRef<Path>, spec: &ColumnSpec) -> Result<IVDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let y_col = resolve(&headers, &spec.y)?;
    let d_col = resolve(&headers, &spec.d)?;
    if spec.z.is_empty() {
        return Err(WitError::Schema("no instrument columns given".into()));
    }
    let z_cols = spec
        .z
        .iter()
        .map(|c| resolve(&headers, c))
        .collect::<Result<Vec<_>>>()?;
    let w_cols = spec
        .w
        .iter()
        .map(|c| resolve(&headers, c))
        .collect::<Result<Vec<_>>>()?;

    let mut y = Vec::new();
    let mut d = Vec::new();
    let mut z = Vec::new();
    let mut w = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let cell = |col: usize| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| WitError::Parse {
                    row: row + 1,
                    column: headers.get(col).unwrap_or("?").to_string(),
                    value: raw.to_string(),
                })
        };
        y.push(cell(y_col)?);
        d.push(cell(d_col)?);
        for &c in &z_cols {
            z.push(cell(c)?);
        }
        for &c in &w_cols {
            w.push(cell(c)?);
        }
    }
    let n = y.len();
    let z = DMatrix::from_row_slice(n, z_cols.len(), &z);
    let w = (!w_cols.is_empty()).then(|| DMatrix::from_row_slice(n, w_cols.len(), &w));
    let names = z_cols.iter().map(|&c| headers[c].to_string()).collect();
    IVDataset::new(DVector::from_vec(y), DVector::from_vec(d), z, w)?.with_instrument_names(names)
}
