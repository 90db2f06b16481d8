//! Choice of the penalty level by the modified Cragg-Donald (MCD) test,
//! the multi-start search over (start, lambda), and the Sargan diagnostic.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DVector, Matrix2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::data::IVDataset;
use crate::error::{Result, WitError};
use crate::linalg;
use crate::moments::Moments;
use crate::penalty::{PenaltyKind, PenaltySpec};
use crate::selector::{self, SolverConfig, TransformedDesign};

/// Penalty levels `0.1 k sqrt(log p / n)` for `k = 1..=20`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub values: Vec<f64>,
    /// `p = 1`: `log p = 0`, so `log 2` was used instead.
    pub degenerate: bool,
}

pub fn lambda_grid(n: usize, p: usize) -> Result<LambdaGrid> {
    if n <= 1 || p == 0 {
        return Err(WitError::Domain(format!(
            "lambda grid needs n > 1 and p >= 1 (n = {n}, p = {p})"
        )));
    }
    let degenerate = p == 1;
    let log_p = if degenerate {
        2.0_f64.ln()
    } else {
        (p as f64).ln()
    };
    let scale = (log_p / n as f64).sqrt();
    Ok(LambdaGrid {
        values: (1..=20).map(|k| 0.1 * k as f64 * scale).collect(),
        degenerate,
    })
}

/// Test size `0.5 / ln n`, clamped to `[0.001, 0.2]`.
pub fn default_size(n: usize) -> f64 {
    (0.5 / (n as f64).ln()).clamp(0.001, 0.2)
}

/// `S`, `T` and the extreme eigenvalues of `S^{-1} T` for a candidate valid set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McdStats {
    pub m_min: f64,
    pub m_max: f64,
    pub s: Matrix2<f64>,
    pub t: Matrix2<f64>,
}

/// `S = [Y,D]' M_Z [Y,D] / (n - p)` and `T = [Y,D]' (P_Z - P_{Z_C}) [Y,D] / n`,
/// where `C` is the complement of `valid_set`.
pub fn mcd_statistic(ds: &IVDataset, valid_set: &[usize]) -> Result<McdStats> {
    mcd_stats_with(&Moments::new(ds)?, valid_set)
}

pub(crate) fn complement(p: usize, valid_set: &[usize]) -> Result<Vec<usize>> {
    let mut mask = vec![false; p];
    for &j in valid_set {
        if j >= p {
            return Err(WitError::Dimension(format!(
                "instrument index {j} out of range for p = {p}"
            )));
        }
        mask[j] = true;
    }
    Ok((0..p).filter(|&j| !mask[j]).collect())
}

pub fn mcd_stats_with(m: &Moments, valid_set: &[usize]) -> Result<McdStats> {
    let (n, p) = (m.n(), m.p());
    if n <= p {
        return Err(WitError::Dimension(format!(
            "MCD statistic needs n > p (n = {n}, p = {p})"
        )));
    }
    if valid_set.is_empty() {
        return Err(WitError::Spec(
            "MCD statistic needs a nonempty valid set".into(),
        ));
    }
    let invalid = complement(p, valid_set)?;
    let a = m.resid_full();
    let b = m.residual_cross(&invalid)?;
    let s = a / (n - p) as f64;
    let t = (b - a) / n as f64;
    let t = Matrix2::new(t[(0, 0)], t[(0, 1)], t[(0, 1)], t[(1, 1)]);
    let (m_min, m_max) = linalg::gen_eig_2x2(&s, &t)?;
    Ok(McdStats { m_min, m_max, s, t })
}

/// Critical value of `n m_min` at asymptotic size `size`.
///
/// The chi-square has `p_valid - 1` degrees of freedom (the overidentifying
/// restrictions of the candidate), evaluated at level
/// `1 - Phi(sqrt((n - p_invalid) / (n - p)) Phi^{-1}(size))`.
/// Returns `None` when `p_valid <= 1`: the candidate is just identified and
/// the statistic carries no overidentification information.
pub fn mcd_critical(p_invalid: usize, p_valid: usize, n: usize, size: f64) -> Result<Option<f64>> {
    if !(size > 0.0 && size < 1.0) {
        return Err(WitError::Domain(format!(
            "test size must lie in (0, 1), got {size}"
        )));
    }
    let p = p_invalid + p_valid;
    if n <= p {
        return Err(WitError::Dimension(format!(
            "critical value needs n > p (n = {n}, p = {p})"
        )));
    }
    if p_valid <= 1 {
        return Ok(None);
    }
    let std = Normal::standard();
    let factor = ((n - p_invalid) as f64 / (n - p) as f64).sqrt();
    let level = 1.0 - std.cdf(factor * std.inverse_cdf(size));
    let chi = ChiSquared::new((p_valid - 1) as f64)
        .map_err(|e| WitError::Numerical(format!("chi-square: {e}")))?;
    Ok(Some(chi.inverse_cdf(level)))
}

/// Outcome of the MCD test for one candidate valid set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McdResult {
    /// `n m_min`
    pub statistic: f64,
    /// `None` for a just-identified candidate (`p_valid <= 1`).
    pub threshold: Option<f64>,
    pub rejected: bool,
    pub p_valid: usize,
    pub p_invalid: usize,
    pub size_used: f64,
}

/// Runs the MCD test. A candidate with no valid instrument is rejected outright;
/// a just-identified one (`p_valid = 1`) is accepted with no threshold, as its
/// Sargan statistic has zero degrees of freedom as well.
pub fn mcd_test(m: &Moments, valid_set: &[usize], size: f64) -> Result<McdResult> {
    let p = m.p();
    let p_valid = valid_set.len();
    let p_invalid = p - p_valid;
    if p_valid == 0 {
        return Ok(McdResult {
            statistic: f64::NAN,
            threshold: None,
            rejected: true,
            p_valid,
            p_invalid,
            size_used: size,
        });
    }
    let stats = mcd_stats_with(m, valid_set)?;
    let statistic = (m.n() as f64 * stats.m_min).max(0.0);
    let threshold = mcd_critical(p_invalid, p_valid, m.n(), size)?;
    let rejected = threshold.is_some_and(|t| statistic > t);
    Ok(McdResult {
        statistic,
        threshold,
        rejected,
        p_valid,
        p_invalid,
        size_used: size,
    })
}

/// A starting point for the selection solver.
#[derive(Debug, Clone, PartialEq)]
pub struct Start {
    pub label: String,
    pub alpha0: DVector<f64>,
}

impl Start {
    pub fn zero(p: usize) -> Self {
        Start {
            label: "zero".into(),
            alpha0: DVector::zeros(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningConfig {
    pub penalty: PenaltyKind,
    /// `rho` for MCP, `a` for SCAD; `None` takes the family default.
    pub shape: Option<f64>,
    /// Test size; `None` uses `0.5 / ln n` clamped.
    pub size: Option<f64>,
    /// Multiplies every entry of the default grid.
    pub grid_scale: f64,
    /// Explicit grid replacing the default one.
    pub grid: Option<Vec<f64>>,
    pub solver: SolverConfig,
    /// Stop scanning starts once no sparser accepted candidate can appear.
    pub early_exit: bool,
}

impl Default for TuningConfig {
    fn default() -> Self {
        TuningConfig {
            penalty: PenaltyKind::Mcp,
            shape: None,
            size: None,
            grid_scale: 1.0,
            grid: None,
            solver: SolverConfig::default(),
            early_exit: true,
        }
    }
}

impl TuningConfig {
    pub fn penalty_at(&self, lambda: f64) -> Result<PenaltySpec> {
        PenaltySpec::new(
            self.penalty,
            lambda,
            self.shape.unwrap_or_else(|| self.penalty.default_shape()),
        )
    }
}

/// One row of the candidate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub start: usize,
    pub lambda_index: usize,
    pub lambda: f64,
    pub p_valid: usize,
    pub statistic: f64,
    pub threshold: Option<f64>,
    pub rejected: bool,
    pub converged: bool,
    pub kkt_residual: f64,
    pub valid_set: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    /// `None` when every candidate was rejected.
    pub chosen_lambda: Option<f64>,
    pub chosen_start: Option<usize>,
    pub alpha_mcp: Option<Vec<f64>>,
    pub valid_set: Option<Vec<usize>>,
    pub size_used: f64,
    pub grid: Vec<f64>,
    pub grid_degenerate: bool,
    pub start_labels: Vec<String>,
    pub starts_evaluated: usize,
    pub candidate_table: Vec<Candidate>,
}

impl TuningReport {
    pub fn all_rejected(&self) -> bool {
        self.chosen_lambda.is_none()
    }

    /// Writes the candidate table as CSV (valid sets joined by `;`).
    pub fn write_candidates_csv<W: Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            start: usize,
            start_label: &'a str,
            lambda_index: usize,
            lambda: f64,
            p_valid: usize,
            statistic: f64,
            threshold: Option<f64>,
            rejected: bool,
            converged: bool,
            kkt_residual: f64,
            valid_set: String,
        }
        let mut w = csv::Writer::from_writer(out);
        for c in &self.candidate_table {
            w.serialize(Row {
                start: c.start,
                start_label: &self.start_labels[c.start],
                lambda_index: c.lambda_index,
                lambda: c.lambda,
                p_valid: c.p_valid,
                statistic: c.statistic,
                threshold: c.threshold,
                rejected: c.rejected,
                converged: c.converged,
                kkt_residual: c.kkt_residual,
                valid_set: c
                    .valid_set
                    .iter()
                    .map(|j| j.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// True when `a` beats `b`: more valid instruments, then the smaller statistic.
fn better(a: &Candidate, b: &Candidate) -> bool {
    a.p_valid > b.p_valid || (a.p_valid == b.p_valid && a.statistic < b.statistic)
}

/// Scans starts (in the given order) times the lambda grid, tests every local
/// solution and keeps the accepted candidate with the largest valid set.
///
/// With `early_exit`, after each start the scan stops once the number of
/// instruments never declared valid by an accepted candidate is at most the
/// best valid-set size found.
pub fn tune(
    ds: &IVDataset,
    td: &TransformedDesign,
    starts: &[Start],
    cfg: &TuningConfig,
) -> Result<TuningReport> {
    let m = Moments::new(ds)?;
    tune_with(ds, &m, td, starts, cfg)
}

pub(crate) fn tune_with(
    ds: &IVDataset,
    m: &Moments,
    td: &TransformedDesign,
    starts: &[Start],
    cfg: &TuningConfig,
) -> Result<TuningReport> {
    if starts.is_empty() {
        return Err(WitError::Spec("tuning needs at least one start".into()));
    }
    let (n, p) = (ds.n(), ds.p());
    if let Some(s) = starts.iter().find(|s| s.alpha0.len() != p) {
        return Err(WitError::Dimension(format!(
            "start '{}' has length {}, expected {p}",
            s.label,
            s.alpha0.len()
        )));
    }
    let (grid, grid_degenerate) = match &cfg.grid {
        Some(g) if g.is_empty() => return Err(WitError::Spec("empty lambda grid".into())),
        Some(g) => (g.clone(), false),
        None => {
            let g = lambda_grid(n, p)?;
            (
                g.values.iter().map(|v| v * cfg.grid_scale).collect(),
                g.degenerate,
            )
        }
    };
    let size = cfg.size.unwrap_or_else(|| default_size(n));
    let score = td.score(ds.y());

    let mut cache: HashMap<Vec<usize>, McdResult> = HashMap::new();
    let mut never_valid = vec![true; p];
    let mut table = Vec::new();
    let mut best: Option<(usize, Vec<f64>)> = None;
    let mut starts_evaluated = 0;

    for (s, start) in starts.iter().enumerate() {
        starts_evaluated += 1;
        for (l, &lambda) in grid.iter().enumerate() {
            let spec = cfg.penalty_at(lambda)?;
            let sol = selector::solve_with_score(td, &score, &spec, &start.alpha0, &cfg.solver)?;
            let valid_set = sol.valid_set();
            let mcd = match cache.get(&valid_set) {
                Some(r) => r.clone(),
                None => {
                    let r = mcd_test(m, &valid_set, size).unwrap_or(McdResult {
                        statistic: f64::NAN,
                        threshold: None,
                        rejected: true,
                        p_valid: valid_set.len(),
                        p_invalid: p - valid_set.len(),
                        size_used: size,
                    });
                    cache.insert(valid_set.clone(), r.clone());
                    r
                }
            };
            let row = Candidate {
                start: s,
                lambda_index: l,
                lambda,
                p_valid: valid_set.len(),
                statistic: mcd.statistic,
                threshold: mcd.threshold,
                rejected: mcd.rejected,
                converged: sol.converged,
                kkt_residual: sol.kkt_residual,
                valid_set,
            };
            if !row.rejected {
                for &j in &row.valid_set {
                    never_valid[j] = false;
                }
                if best.as_ref().is_none_or(|(i, _)| better(&row, &table[*i])) {
                    best = Some((table.len(), sol.alpha_hat.clone()));
                }
            }
            table.push(row);
        }
        if cfg.early_exit {
            if let Some((i, _)) = &best {
                let remaining = never_valid.iter().filter(|v| **v).count();
                if remaining <= table[*i].p_valid {
                    break;
                }
            }
        }
    }

    let (chosen_lambda, chosen_start, alpha_mcp, valid_set) = match best {
        Some((i, alpha)) => {
            let row: &Candidate = &table[i];
            (
                Some(row.lambda),
                Some(row.start),
                Some(alpha),
                Some(row.valid_set.clone()),
            )
        }
        None => (None, None, None, None),
    };
    Ok(TuningReport {
        chosen_lambda,
        chosen_start,
        alpha_mcp,
        valid_set,
        size_used: size,
        grid,
        grid_degenerate,
        start_labels: starts.iter().map(|s| s.label.clone()).collect(),
        starts_evaluated,
        candidate_table: table,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SarganResult {
    pub statistic: f64,
    /// `None` when `df = 0` (just identified).
    pub p_value: Option<f64>,
    pub df: usize,
}

/// Sargan statistic `||P_Z e||^2 / (||e||^2 / n)` with `e = Y - D beta - Z alpha`;
/// `df = |{j : alpha_j = 0}| - 1`.
pub fn sargan(ds: &IVDataset, beta_hat: f64, alpha_hat: &DVector<f64>) -> Result<SarganResult> {
    sargan_with(&Moments::new(ds)?, beta_hat, alpha_hat)
}

pub fn sargan_with(m: &Moments, beta_hat: f64, alpha_hat: &DVector<f64>) -> Result<SarganResult> {
    if alpha_hat.len() != m.p() {
        return Err(WitError::Dimension(format!(
            "alpha has length {}, expected {}",
            alpha_hat.len(),
            m.p()
        )));
    }
    let zeros = alpha_hat.iter().filter(|a| **a == 0.0).count();
    let df = zeros.saturating_sub(1);
    let (ee, pe) = m.residual_norms(beta_hat, alpha_hat);
    let statistic = if ee > 0.0 {
        (pe / (ee / m.n() as f64)).max(0.0)
    } else {
        0.0
    };
    let p_value = if df == 0 {
        None
    } else {
        let chi = ChiSquared::new(df as f64)
            .map_err(|e| WitError::Numerical(format!("chi-square: {e}")))?;
        Some(chi.sf(statistic))
    };
    Ok(SarganResult {
        statistic,
        p_value,
        df,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_values() {
        let g = lambda_grid(100, 10).unwrap();
        assert_eq!(g.values.len(), 20);
        // 0.1 * sqrt(ln 10 / 100), frozen from an independent evaluation
        assert_relative_eq!(g.values[0], 0.015174271293851464, epsilon = 1e-15);
        assert!(g.values.windows(2).all(|w| w[1] > w[0]));
        let g4 = lambda_grid(400, 10).unwrap();
        for (a, b) in g.values.iter().zip(&g4.values) {
            assert_relative_eq!(*b, a / 2.0, epsilon = 1e-15);
        }
        assert!(!g.degenerate);
        assert!(lambda_grid(50, 1).unwrap().degenerate);
    }

    #[test]
    fn size_rule() {
        assert_relative_eq!(default_size(500), 0.5 / 500f64.ln(), epsilon = 1e-15);
        assert_eq!(default_size(2), 0.2);
    }

    #[test]
    fn critical_value_matches_reference_quantiles() {
        // scipy: chi2.ppf(1 - norm.cdf(sqrt(97/92) * norm.ppf(0.05)), 4)
        let got = mcd_critical(3, 5, 100, 0.05).unwrap().unwrap();
        assert_relative_eq!(got, 9.709626735413254, epsilon = 1e-8);
        // large n: plain chi-square quantile, scipy chi2.ppf(0.95, 4)
        let big = mcd_critical(3, 5, 100_000_000, 0.05).unwrap().unwrap();
        assert_relative_eq!(big, 9.487729036781154, epsilon = 1e-5);
        let near_one = mcd_critical(3, 5, 100, 1.0 - 1e-12).unwrap().unwrap();
        assert!(near_one > 0.0 && near_one < 1e-4);
        assert_eq!(mcd_critical(4, 1, 100, 0.05).unwrap(), None);
        let mut last = f64::INFINITY;
        for size in [0.001, 0.01, 0.05, 0.2, 0.5] {
            let t = mcd_critical(2, 6, 60, size).unwrap().unwrap();
            assert!(t < last);
            last = t;
        }
    }

    fn sample(seed: u64, n: usize, alpha: &[f64]) -> IVDataset {
        let p = alpha.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::StandardNormal;
        let z = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(normal));
        let eta = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(normal));
        let eps = DVector::from_fn(n, |i, _| {
            0.5 * (0.6 * eta[i] + 0.8 * rng.sample::<f64, _>(normal))
        });
        let gamma = DVector::from_element(p, 0.5);
        let d = &z * &gamma + &eta;
        let y = &d + &z * DVector::from_column_slice(alpha) + eps;
        IVDataset::new(y, d, z, None)
            .unwrap()
            .standardize()
            .unwrap()
    }

    #[test]
    fn t_matches_projector_oracle() {
        let ds = sample(1, 40, &[0.0, 0.0, 0.5]);
        let st = mcd_statistic(&ds, &[0, 1]).unwrap();
        let z = ds.z();
        let pz = z * z.tr_mul(z).try_inverse().unwrap() * z.transpose();
        let zc = z.columns(2, 1).into_owned();
        let pc = &zc * zc.tr_mul(&zc).try_inverse().unwrap() * zc.transpose();
        let diff = (pz - pc) / 40.0;
        let want = linalg::cross2(ds.y(), ds.d(), &(&diff * ds.y()), &(&diff * ds.d()));
        assert!((st.t - want).amax() < 1e-10);
        assert!(st.m_min >= -1e-12 && st.m_min <= st.m_max);
    }

    #[test]
    fn similarity_invariance() {
        let ds = sample(2, 80, &[0.0, 0.0, 0.0, 0.4]);
        let st = mcd_statistic(&ds, &[0, 1, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a: Matrix2<f64> = Matrix2::from_fn(|_, _| rng.random_range(-2.0..2.0));
            if a.determinant().abs() < 0.1 {
                continue;
            }
            let (lo, _) =
                linalg::gen_eig_2x2(&(a * st.s * a.transpose()), &(a * st.t * a.transpose()))
                    .unwrap();
            assert!((lo - st.m_min).abs() < 1e-8);
        }
    }

    #[test]
    fn sargan_zero_for_exact_fit() {
        let z = DMatrix::from_row_slice(5, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0, 0.5, 0.3]);
        let d = DVector::from_vec(vec![1.0, 2.0, 0.0, -1.0, 0.4]);
        let alpha = DVector::from_vec(vec![0.0, 0.0]);
        let ds = IVDataset::new(&d * 1.5, d, z, None).unwrap();
        let r = sargan(&ds, 1.5, &alpha).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.df, 1);
        assert_eq!(r.p_value, Some(1.0));
        let just = sargan(&ds, 1.5, &DVector::from_vec(vec![0.0, 0.2])).unwrap();
        assert_eq!((just.df, just.p_value), (0, None));
    }

    #[test]
    fn sargan_orthogonal_residual() {
        // e orthogonal to Z gives a zero statistic
        let z = DMatrix::from_row_slice(4, 1, &[1.0, 1.0, -1.0, -1.0]);
        let y = DVector::from_vec(vec![1.0, -1.0, 1.0, -1.0]);
        let ds = IVDataset::new(y, DVector::from_vec(vec![1.0, 1.0, -1.0, -1.0]), z, None).unwrap();
        let r = sargan(&ds, 0.0, &DVector::zeros(1)).unwrap();
        assert!(r.statistic.abs() < 1e-14);
        // scipy: chi2.sf(3.0, 2)
        let chi = ChiSquared::new(2.0).unwrap();
        assert_relative_eq!(chi.sf(3.0), 0.22313016014842982, epsilon = 1e-12);
    }

    #[test]
    fn single_accepted_candidate_is_chosen() {
        let ds = sample(3, 300, &[0.0, 0.0, 0.0, 0.0, 1.0]);
        let td = selector::build_transformed_design(&ds).unwrap();
        let cfg = TuningConfig {
            grid: Some(vec![0.1]),
            ..TuningConfig::default()
        };
        let r = tune(&ds, &td, &[Start::zero(5)], &cfg).unwrap();
        assert_eq!(r.candidate_table.len(), 1);
        assert!(!r.candidate_table[0].rejected);
        assert_eq!(r.chosen_lambda, Some(0.1));
        assert_eq!(r.chosen_start, Some(0));
        assert_eq!(r.valid_set.as_ref(), Some(&r.candidate_table[0].valid_set));
        assert!(!r.valid_set.as_ref().unwrap().contains(&4));
        let mut buf = Vec::new();
        r.write_candidates_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("start,start_label,lambda_index"));
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn no_valid_instrument_is_rejected() {
        let ds = sample(4, 100, &[0.0, 0.3]);
        let m = Moments::new(&ds).unwrap();
        assert!(mcd_test(&m, &[], 0.1).unwrap().rejected);
        let just = mcd_test(&m, &[0], 0.1).unwrap();
        assert!(!just.rejected && just.threshold.is_none());
    }
}
