//! The end-to-end WIT procedure: standardize, cluster the individual ratios into
//! starting points, tune the penalized selection by the MCD test, then LIML on
//! the selected valid set.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::IVDataset;
use crate::error::Result;
use crate::estimators::{self, EstimateOptions, KClassFit, WITFit};
use crate::moments::Moments;
use crate::selector::{self, Cluster};
use crate::tuning::{self, Start, TuningConfig, TuningReport};
use crate::WitError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct WitConfig {
    pub tuning: TuningConfig,
    /// Fuzzy clustering level; `None` uses half the MAD scale of the ratios.
    pub lambda_bar: Option<f64>,
    /// Caps the number of cluster starts after the zero start; `None` keeps all.
    pub max_cluster_starts: Option<usize>,
    pub estimate: EstimateOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WitStatus {
    /// A candidate passed the MCD test and LIML ran on its valid set.
    Selected,
    /// Every candidate was rejected; the fallback is TSLS on all instruments.
    AllRejected,
    /// One instrument: nothing to select, TSLS only.
    JustIdentified,
}

/// A point estimate with a classical normal interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub method: String,
    pub beta_hat: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub valid_set: Vec<usize>,
    /// Sargan p-value of the fitted model; `None` when exactly identified or not applicable.
    pub sargan_p: Option<f64>,
}

impl IntervalEstimate {
    /// Homoskedastic k-class interval `sigma^2 [N^{-1}]_11` at 95%.
    pub fn from_kclass(method: &str, fit: &KClassFit) -> Result<Self> {
        let variance = fit.sigma2 * fit.inv_11;
        let (ci_low, ci_high) = estimators::confidence_interval(fit.beta_hat, variance, 0.95)?;
        Ok(IntervalEstimate {
            method: method.to_string(),
            beta_hat: fit.beta_hat,
            se: variance.sqrt(),
            ci_low,
            ci_high,
            valid_set: fit.valid_set.clone(),
            sargan_p: None,
        })
    }

    /// Attaches the Sargan p-value of a fit that treats every instrument as valid.
    fn with_all_iv_sargan(mut self, m: &Moments) -> Result<Self> {
        self.sargan_p = tuning::sargan_with(m, self.beta_hat, &DVector::zeros(m.p()))?.p_value;
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitOutcome {
    pub status: WitStatus,
    pub fit: Option<WITFit>,
    pub fallback: Option<IntervalEstimate>,
    pub tuning: Option<TuningReport>,
    pub ratios: Vec<Option<f64>>,
    pub clusters: Vec<Cluster>,
}

impl WitOutcome {
    /// The reported estimate: the WIT fit, or the fallback when there is none.
    pub fn headline(&self) -> IntervalEstimate {
        match (&self.fit, &self.fallback) {
            (Some(f), _) => IntervalEstimate {
                method: "WIT".into(),
                beta_hat: f.beta_hat,
                se: f.se,
                ci_low: f.ci_low,
                ci_high: f.ci_high,
                valid_set: f.valid_set.clone(),
                sargan_p: f.sargan_p,
            },
            (None, Some(fb)) => fb.clone(),
            (None, None) => unreachable!("an outcome always carries a fit or a fallback"),
        }
    }
}

/// Starting points in scan order: the zero vector, then one start per cluster
/// (largest first) with `check_beta` at the cluster center.
pub fn cluster_starts(
    rf: &crate::data::ReducedForm,
    clusters: &[Cluster],
    max_cluster_starts: Option<usize>,
) -> Vec<Start> {
    let p = rf.gamma_d.len();
    let take = max_cluster_starts.unwrap_or(clusters.len());
    std::iter::once(Start::zero(p))
        .chain(clusters.iter().take(take).map(|c| Start {
            label: format!("cluster@{:.6}(size {})", c.center, c.size()),
            alpha0: selector::initial_alpha(c.center, rf, &c.members),
        }))
        .collect()
}

/// Runs the full procedure on a raw dataset (covariates, if any, are partialled out).
pub fn fit_wit(ds: &IVDataset, cfg: &WitConfig) -> Result<WitOutcome> {
    let (ds, m) = prepare(ds)?;
    let p = ds.p();
    let all: Vec<usize> = (0..p).collect();

    if p == 1 {
        let fit = estimators::kclass_with(&m, &all, 1.0)?;
        return Ok(WitOutcome {
            status: WitStatus::JustIdentified,
            fit: None,
            fallback: Some(IntervalEstimate::from_kclass("TSLS", &fit)?.with_all_iv_sargan(&m)?),
            tuning: None,
            ratios: Vec::new(),
            clusters: Vec::new(),
        });
    }

    let rf = ds.reduced_form()?;
    let ratios = selector::individual_ratios(&rf);
    let clusters = selector::cluster_ratios(&ratios, cfg.lambda_bar)?;
    let starts = cluster_starts(&rf, &clusters, cfg.max_cluster_starts);
    let td = selector::build_transformed_design(&ds)?;
    let report = tuning::tune_with(&ds, &m, &td, &starts, &cfg.tuning)?;

    let (status, fit, fallback) = match &report.valid_set {
        Some(valid) => match estimators::wit_estimate_with(&ds, &m, valid, &cfg.estimate) {
            Ok(fit) => (WitStatus::Selected, Some(fit), None),
            Err(_) => fallback_tsls(&m, &all)?,
        },
        None => fallback_tsls(&m, &all)?,
    };
    Ok(WitOutcome {
        status,
        fit,
        fallback,
        tuning: Some(report),
        ratios,
        clusters,
    })
}

/// Partials out covariates when present, then standardizes the instruments.
fn prepare(ds: &IVDataset) -> Result<(IVDataset, Moments)> {
    let ds = match ds.w() {
        Some(_) => ds.partial_out()?,
        None => ds.clone(),
    };
    let ds = ds.standardize()?;
    let m = Moments::new(&ds)?;
    Ok((ds, m))
}

/// OLS, TSLS and LIML treating every instrument as valid, on the same prepared data
/// as [`fit_wit`]. OLS reports an empty instrument set.
pub fn all_iv_comparators(ds: &IVDataset) -> Result<Vec<IntervalEstimate>> {
    let (_, m) = prepare(ds)?;
    let all: Vec<usize> = (0..m.p()).collect();
    let mut ols = IntervalEstimate::from_kclass("OLS", &estimators::kclass_with(&m, &all, 0.0)?)?;
    ols.valid_set.clear();
    let tsls = IntervalEstimate::from_kclass("TSLS", &estimators::kclass_with(&m, &all, 1.0)?)?
        .with_all_iv_sargan(&m)?;
    let kappa = estimators::liml_kappa_with(&m, &all)?;
    if !kappa.is_finite() {
        return Err(WitError::Numerical("LIML kappa is not finite".into()));
    }
    let liml = IntervalEstimate::from_kclass("LIML", &estimators::kclass_with(&m, &all, kappa)?)?
        .with_all_iv_sargan(&m)?;
    Ok(vec![ols, tsls, liml])
}

type Resolved = (WitStatus, Option<WITFit>, Option<IntervalEstimate>);

fn fallback_tsls(m: &Moments, all: &[usize]) -> Result<Resolved> {
    let fit = estimators::kclass_with(m, all, 1.0)?;
    Ok((
        WitStatus::AllRejected,
        None,
        Some(IntervalEstimate::from_kclass("TSLS", &fit)?.with_all_iv_sargan(m)?),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn design(seed: u64, n: usize, gamma: &[f64], alpha: &[f64]) -> IVDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = gamma.len();
        let z = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.sample(StandardNormal), rng.sample(StandardNormal)))
            .collect();
        let g = DVector::from_column_slice(gamma);
        let a = DVector::from_column_slice(alpha);
        let eta = DVector::from_fn(n, |i, _| u[i].0);
        let eps = DVector::from_fn(n, |i, _| 0.5 * (0.6 * u[i].0 + 0.8 * u[i].1));
        let d = &z * &g + &eta;
        let y = &d + &z * &a + eps;
        IVDataset::new(y, d, z, None).unwrap()
    }

    #[test]
    fn recovers_plurality_valid_set() {
        let gamma = [0.5, 0.5, 0.6, 0.6, 0.6, 0.5, 0.5];
        let alpha = [0.0, 0.0, 0.0, 0.0, 0.8, 0.8, -0.6];
        let out = fit_wit(&design(11, 1000, &gamma, &alpha), &WitConfig::default()).unwrap();
        assert_eq!(out.status, WitStatus::Selected);
        let fit = out.fit.as_ref().unwrap();
        assert_eq!(fit.valid_set, vec![0, 1, 2, 3]);
        assert!((fit.beta_hat - 1.0).abs() < 0.1);
        assert!(fit.ci_low < fit.beta_hat && fit.beta_hat < fit.ci_high);
        // the zero start is always scanned first
        assert_eq!(out.tuning.as_ref().unwrap().start_labels[0], "zero");
    }

    #[test]
    fn single_instrument_is_just_identified() {
        let out = fit_wit(&design(2, 200, &[0.8], &[0.0]), &WitConfig::default()).unwrap();
        assert_eq!(out.status, WitStatus::JustIdentified);
        assert!(out.fit.is_none());
        let h = out.headline();
        assert_eq!(h.method, "TSLS");
        assert_eq!(h.valid_set, vec![0]);
    }

    #[test]
    fn comparators_match_direct_kclass() {
        let gamma = [0.5, 0.5, 0.6];
        let ds = design(3, 500, &gamma, &[0.0; 3]);
        let rows = all_iv_comparators(&ds).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(names, ["OLS", "TSLS", "LIML"]);
        let m = Moments::new(&ds.standardize().unwrap()).unwrap();
        let tsls = estimators::kclass_with(&m, &[0, 1, 2], 1.0).unwrap();
        assert!((rows[1].beta_hat - tsls.beta_hat).abs() < 1e-12);
        assert!(rows[0].valid_set.is_empty() && rows[0].sargan_p.is_none());
        assert!(rows[1].sargan_p.is_some() && rows[2].sargan_p.is_some());
        // endogeneity pushes OLS away from the truth, IV stays close
        assert!((rows[1].beta_hat - 1.0).abs() < (rows[0].beta_hat - 1.0).abs());
    }

    #[test]
    fn invalid_estimates_return_to_raw_scale() {
        let gamma = [0.5, 0.5, 0.6, 0.6, 0.6];
        let alpha = [0.0, 0.0, 0.0, 0.0, 0.8];
        let ds = design(5, 2000, &gamma, &alpha);
        let mut z = ds.z().clone();
        z.column_mut(4).scale_mut(10.0);
        let scaled = IVDataset::new(ds.y().clone(), ds.d().clone(), z, None).unwrap();
        let a = fit_wit(&ds, &WitConfig::default()).unwrap();
        let b = fit_wit(&scaled, &WitConfig::default()).unwrap();
        let (fa, fb) = (a.fit.unwrap(), b.fit.unwrap());
        assert_eq!(fa.valid_set, fb.valid_set);
        assert!((fa.beta_hat - fb.beta_hat).abs() < 1e-9);
        assert!((fa.alpha_invalid[0] - 10.0 * fb.alpha_invalid[0]).abs() < 1e-9);
    }
}
