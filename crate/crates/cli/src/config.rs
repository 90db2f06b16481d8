//! TOML defaults and their merge with flags. Precedence: flag or `WIT_` variable,
//! then the config file, then built-in defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use wit_core::{ColumnRef, ColumnSpec, Method, PenaltyKind, StudyCase, WitConfig};

use crate::args::{Format, TuningArgs};
use crate::CliError;

/// Every key is optional; a file may hold settings for several commands.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub y_col: Option<ColumnRef>,
    pub d_col: Option<ColumnRef>,
    #[serde(default)]
    pub z_cols: Vec<ColumnRef>,
    #[serde(default)]
    pub w_cols: Vec<ColumnRef>,

    pub penalty: Option<PenaltyKind>,
    pub rho: Option<f64>,
    pub a: Option<f64>,
    pub grid_scale: Option<f64>,
    pub size: Option<f64>,
    pub lambda_bar: Option<f64>,
    /// Full estimator configuration; the penalty keys above override its fields.
    pub wit: Option<WitConfig>,

    /// A built-in design name or an inline design table.
    pub case: Option<StudyCase>,
    #[serde(default)]
    pub n: Vec<usize>,
    pub reps: Option<usize>,
    #[serde(default)]
    pub methods: Vec<Method>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,

    pub beta: Option<f64>,
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub gamma: Vec<f64>,

    pub out: Option<PathBuf>,
    pub format: Option<Format>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }

    /// Builds the estimator configuration from the file and the flag overrides.
    pub fn wit_config(&self, flags: &TuningArgs) -> Result<WitConfig, CliError> {
        let mut cfg = self.wit.clone().unwrap_or_default();
        let t = &mut cfg.tuning;
        if let Some(kind) = flags.penalty.or(self.penalty) {
            t.penalty = kind;
        }
        let rho = flags.rho.or(self.rho);
        let a = flags.a.or(self.a);
        match (t.penalty, rho, a) {
            (_, Some(_), Some(_)) => {
                return Err(CliError::Usage("give either --rho or --a, not both".into()))
            }
            (PenaltyKind::Mcp, Some(r), None) => t.shape = Some(r),
            (PenaltyKind::Scad, None, Some(v)) => t.shape = Some(v),
            (kind, Some(_), None) => {
                return Err(CliError::Usage(format!("--rho applies to mcp, not {kind}")))
            }
            (kind, None, Some(_)) => {
                return Err(CliError::Usage(format!("--a applies to scad, not {kind}")))
            }
            (_, None, None) => {}
        }
        // validate the shape early so a bad value is a usage error
        t.penalty_at(1.0)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if let Some(s) = flags.grid_scale.or(self.grid_scale) {
            if !(s.is_finite() && s > 0.0) {
                return Err(CliError::Usage(format!(
                    "grid scale must be positive, got {s}"
                )));
            }
            t.grid_scale = s;
        }
        if let Some(s) = flags.size.or(self.size) {
            if !(s > 0.0 && s < 1.0) {
                return Err(CliError::Usage(format!(
                    "test size must lie in (0, 1), got {s}"
                )));
            }
            t.size = Some(s);
        }
        if let Some(l) = flags.lambda_bar.or(self.lambda_bar) {
            if !(l.is_finite() && l >= 0.0) {
                return Err(CliError::Usage(format!(
                    "lambda_bar must be non-negative, got {l}"
                )));
            }
            cfg.lambda_bar = Some(l);
        }
        Ok(cfg)
    }
}

/// Flag value if given, else the file value.
pub fn pick<T: Clone>(flag: &Option<T>, file: &Option<T>) -> Option<T> {
    flag.clone().or_else(|| file.clone())
}

/// Flag list if non-empty, else the file list.
pub fn pick_list<T: Clone>(flag: &[T], file: &[T]) -> Vec<T> {
    if flag.is_empty() { file } else { flag }.to_vec()
}

/// Resolves the CSV column spec, failing with a usage error on missing pieces.
pub fn column_spec(
    y: Option<ColumnRef>,
    d: Option<ColumnRef>,
    z: Vec<ColumnRef>,
    w: Vec<ColumnRef>,
) -> Result<ColumnSpec, CliError> {
    let y = y.ok_or_else(|| CliError::Usage("missing --y-col".into()))?;
    let d = d.ok_or_else(|| CliError::Usage("missing --d-col".into()))?;
    if z.is_empty() {
        return Err(CliError::Usage("missing --z-cols".into()));
    }
    Ok(ColumnSpec { y, d, z, w })
}
