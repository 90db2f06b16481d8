//! Post-selection estimation: OLS, k-class (TSLS, LIML), the WIT estimator,
//! its variance estimators and normal confidence intervals.

use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::IVDataset;
use crate::error::{Result, WitError};
use crate::linalg;
use crate::moments::Moments;
use crate::tuning::{self, SarganResult};

/// Ordinary least squares coefficients of `y` on `x`.
pub fn ols(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    linalg::least_squares(y, x)
}

/// Joint k-class estimate of `(beta, alpha_C)` with `X = [D, Z_C]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KClassFit {
    pub beta_hat: f64,
    /// Coefficients on the instruments outside `valid_set`, in ascending index order.
    pub alpha_hat_invalid: Vec<f64>,
    pub kappa: f64,
    pub valid_set: Vec<usize>,
    /// `||Y - X theta||^2 / (n - p_C - 1)`
    pub sigma2: f64,
    /// `[(X'(I - kappa M_Z) X)^{-1}]_{11}`
    pub inv_11: f64,
}

impl KClassFit {
    pub fn invalid_set(&self, p: usize) -> Vec<usize> {
        tuning::complement(p, &self.valid_set).unwrap_or_default()
    }
}

/// k-class estimator `(X'(I - kappa M_Z)X)^{-1} X'(I - kappa M_Z)Y`, `X = [D, Z_C]`.
pub fn kclass(ds: &IVDataset, valid_set: &[usize], kappa: f64) -> Result<KClassFit> {
    kclass_with(&Moments::new(ds)?, valid_set, kappa)
}

pub fn kclass_with(m: &Moments, valid_set: &[usize], kappa: f64) -> Result<KClassFit> {
    let p = m.p();
    let invalid = tuning::complement(p, valid_set)?;
    let k = invalid.len() + 1;
    let n = m.n();
    if n <= k {
        return Err(WitError::Dimension(format!(
            "{k} regressors for {n} observations"
        )));
    }
    let yd = m.yd();
    let a = m.resid_full();
    let cross = m.sub_cross(&invalid);
    // X'X and X'Y; M_Z annihilates Z_C so only the D entries carry kappa
    let mut xtx = DMatrix::zeros(k, k);
    xtx[(0, 0)] = yd[(1, 1)] - kappa * a[(1, 1)];
    xtx.view_mut((1, 1), (k - 1, k - 1))
        .copy_from(&m.sub_gram(&invalid));
    for i in 1..k {
        xtx[(0, i)] = cross[(i - 1, 1)];
        xtx[(i, 0)] = cross[(i - 1, 1)];
    }
    let mut xty = DVector::zeros(k);
    xty[0] = yd[(0, 1)] - kappa * a[(0, 1)];
    for i in 1..k {
        xty[i] = cross[(i - 1, 0)];
    }
    let lu = xtx.clone().lu();
    let inv = lu.try_inverse().ok_or_else(|| {
        WitError::Rank(format!(
            "k-class normal matrix is singular at kappa = {kappa}"
        ))
    })?;
    let theta = &inv * &xty;
    if !theta.iter().all(|v| v.is_finite()) {
        return Err(WitError::Rank(format!(
            "k-class normal matrix is singular at kappa = {kappa}"
        )));
    }

    // residual sum of squares from plain cross-products
    let mut plain = xtx;
    plain[(0, 0)] = yd[(1, 1)];
    let mut plain_y = xty;
    plain_y[0] = yd[(0, 1)];
    let rss = (yd[(0, 0)] - 2.0 * theta.dot(&plain_y) + theta.dot(&(&plain * &theta))).max(0.0);
    Ok(KClassFit {
        beta_hat: theta[0],
        alpha_hat_invalid: theta.iter().skip(1).copied().collect(),
        kappa,
        valid_set: valid_set.to_vec(),
        sigma2: rss / (n - k) as f64,
        inv_11: inv[(0, 0)],
    })
}

/// Two-stage least squares: the k-class estimator at `kappa = 1`.
pub fn tsls(ds: &IVDataset, valid_set: &[usize]) -> Result<KClassFit> {
    kclass(ds, valid_set, 1.0)
}

/// LIML `kappa = lambda_min(([Y,D]' M_Z [Y,D])^{-1} [Y,D]' M_{Z_C} [Y,D])`.
pub fn liml_kappa(ds: &IVDataset, valid_set: &[usize]) -> Result<f64> {
    liml_kappa_with(&Moments::new(ds)?, valid_set)
}

pub fn liml_kappa_with(m: &Moments, valid_set: &[usize]) -> Result<f64> {
    if m.n() <= m.p() {
        return Err(WitError::Dimension("LIML needs n > p".into()));
    }
    let invalid = tuning::complement(m.p(), valid_set)?;
    let b = m.residual_cross(&invalid)?;
    Ok(linalg::gen_eig_2x2(&m.resid_full(), &b)?.0)
}

/// Reduced-form spectral quantities behind the many-instrument variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralStats {
    pub s: Matrix2<f64>,
    pub t: Matrix2<f64>,
    pub m_min: f64,
    pub m_max: f64,
    /// `max(m_max - p_V / n, 0)`
    pub mu_hat: f64,
    pub omega_hat: Matrix2<f64>,
}

pub fn spectral_stats(ds: &IVDataset, valid_set: &[usize], beta_hat: f64) -> Result<SpectralStats> {
    spectral_stats_with(&Moments::new(ds)?, valid_set, beta_hat)
}

pub fn spectral_stats_with(
    m: &Moments,
    valid_set: &[usize],
    beta_hat: f64,
) -> Result<SpectralStats> {
    let st = tuning::mcd_stats_with(m, valid_set)?;
    let (n, p) = (m.n() as f64, m.p() as f64);
    let p_v = valid_set.len() as f64;
    let p_c = p - p_v;
    let mu_hat = (st.m_max - p_v / n).max(0.0);
    let a = Vector2::new(beta_hat, 1.0);
    let s_inv =
        st.s.try_inverse()
            .ok_or_else(|| WitError::Numerical("S is singular".into()))?;
    let quad = a.dot(&(s_inv * a));
    let omega = st.s * ((n - p) / (n - p_c))
        + (st.t - a * a.transpose() * (mu_hat / quad)) * (n / (n - p_c));
    let off = 0.5 * (omega[(0, 1)] + omega[(1, 0)]);
    Ok(SpectralStats {
        s: st.s,
        t: st.t,
        m_min: st.m_min,
        m_max: st.m_max,
        mu_hat,
        omega_hat: Matrix2::new(omega[(0, 0)], off, off, omega[(1, 1)]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceMethod {
    #[serde(rename = "ManyIV_Bekker")]
    ManyIvBekker,
    FixedP,
}

impl fmt::Display for VarianceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VarianceMethod::ManyIvBekker => "ManyIV_Bekker",
            VarianceMethod::FixedP => "FixedP",
        })
    }
}

impl VarianceMethod {
    /// FixedP below `p / n = 0.05`, many-instrument otherwise.
    pub fn auto(n: usize, p: usize) -> Self {
        if (p as f64) < 0.05 * n as f64 {
            VarianceMethod::FixedP
        } else {
            VarianceMethod::ManyIvBekker
        }
    }
}

/// Estimated `Var(beta_hat)`.
///
/// ManyIV_Bekker uses `c_hat = p_V / (n - p_C)` unless overridden; FixedP is
/// the homoskedastic k-class variance `sigma^2 [(X'(I - kappa M_Z)X)^{-1}]_{11}`.
pub fn wit_variance(
    stats: &SpectralStats,
    fit: &KClassFit,
    n: usize,
    p_valid: usize,
    p_invalid: usize,
    method: VarianceMethod,
    c_hat: Option<f64>,
) -> Result<f64> {
    let var = match method {
        VarianceMethod::FixedP => fit.sigma2 * fit.inv_11,
        VarianceMethod::ManyIvBekker => {
            let nf = n as f64;
            let pv = p_valid as f64;
            let mu = stats.mu_hat;
            if !(mu > 0.0) {
                return Err(WitError::Numerical(format!(
                    "many-instrument variance needs mu_hat > 0 (m_max = {:e})",
                    stats.m_max
                )));
            }
            let c = c_hat.unwrap_or(pv / (nf - p_invalid as f64));
            let beta = fit.beta_hat;
            let a = Vector2::new(beta, 1.0);
            let b = Vector2::new(1.0, -beta);
            let omega = stats.omega_hat;
            let b_omega_b = b.dot(&(omega * b));
            let omega_inv = omega
                .try_inverse()
                .ok_or_else(|| WitError::Numerical("Omega_hat is singular".into()))?;
            let q_s = b.dot(&(stats.t * b)) / b_omega_b;
            let bracket = q_s * omega[(1, 1)] - stats.t[(1, 1)]
                + c / (1.0 - c) * q_s / a.dot(&(omega_inv * a));
            b_omega_b * (mu + pv / nf) / (-mu) / bracket / nf
        }
    };
    if var.is_finite() && var > 0.0 {
        Ok(var)
    } else {
        Err(WitError::Numerical(format!(
            "{method} variance is not positive ({var:e}); mu_hat = {:e}, m_min = {:e}, m_max = {:e}",
            stats.mu_hat, stats.m_min, stats.m_max
        )))
    }
}

/// `beta_hat -/+ z_{(1 + level) / 2} sqrt(variance)`.
pub fn confidence_interval(beta_hat: f64, variance: f64, level: f64) -> Result<(f64, f64)> {
    if !(variance > 0.0) || !(level > 0.0 && level < 1.0) {
        return Err(WitError::Domain(format!(
            "confidence interval needs variance > 0 and level in (0, 1) (got {variance}, {level})"
        )));
    }
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let half = z * variance.sqrt();
    Ok((beta_hat - half, beta_hat + half))
}

/// Result of the WIT estimator on a selected valid set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WITFit {
    pub beta_hat: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub kappa_liml: f64,
    pub valid_set: Vec<usize>,
    /// On the original instrument scale, ascending index order over the invalid set.
    pub alpha_invalid: Vec<f64>,
    pub sargan_stat: f64,
    pub sargan_p: Option<f64>,
    pub mu_hat: f64,
    pub variance_method: VarianceMethod,
}

/// Options for [`wit_estimate_with`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateOptions {
    /// `None` picks by `p / n`.
    pub variance_method: Option<VarianceMethod>,
    pub c_hat: Option<f64>,
}

/// LIML on `[D, Z_C]` with the selected valid set, plus variance and Sargan.
pub fn wit_estimate(ds: &IVDataset, valid_set: &[usize]) -> Result<WITFit> {
    wit_estimate_with(
        ds,
        &Moments::new(ds)?,
        valid_set,
        &EstimateOptions::default(),
    )
}

pub fn wit_estimate_with(
    ds: &IVDataset,
    m: &Moments,
    valid_set: &[usize],
    opts: &EstimateOptions,
) -> Result<WITFit> {
    if valid_set.is_empty() {
        return Err(WitError::Identification(
            "no instrument is declared valid".into(),
        ));
    }
    let (n, p) = (ds.n(), ds.p());
    let mut valid = valid_set.to_vec();
    valid.sort_unstable();
    valid.dedup();
    let invalid = tuning::complement(p, &valid)?;

    let kappa = liml_kappa_with(m, &valid)?;
    let fit = kclass_with(m, &valid, kappa)?;
    let stats = spectral_stats_with(m, &valid, fit.beta_hat)?;
    let method = opts
        .variance_method
        .unwrap_or_else(|| VarianceMethod::auto(n, p));
    let (variance, method) = match wit_variance(
        &stats,
        &fit,
        n,
        valid.len(),
        invalid.len(),
        method,
        opts.c_hat,
    ) {
        Ok(v) => (v, method),
        Err(_) if method == VarianceMethod::ManyIvBekker => (
            wit_variance(
                &stats,
                &fit,
                n,
                valid.len(),
                invalid.len(),
                VarianceMethod::FixedP,
                None,
            )?,
            VarianceMethod::FixedP,
        ),
        Err(e) => return Err(e),
    };
    let (ci_low, ci_high) = confidence_interval(fit.beta_hat, variance, 0.95)?;

    let mut alpha_full = DVector::zeros(p);
    for (&j, &a) in invalid.iter().zip(&fit.alpha_hat_invalid) {
        alpha_full[j] = a;
    }
    let SarganResult {
        statistic, p_value, ..
    } = tuning::sargan_with(m, fit.beta_hat, &alpha_full)?;
    let scales = ds.z_scales();
    Ok(WITFit {
        beta_hat: fit.beta_hat,
        se: variance.sqrt(),
        ci_low,
        ci_high,
        kappa_liml: kappa,
        valid_set: valid,
        alpha_invalid: invalid
            .iter()
            .zip(&fit.alpha_hat_invalid)
            .map(|(&j, a)| a * scales[j])
            .collect(),
        sargan_stat: statistic,
        sargan_p: p_value,
        mu_hat: stats.mu_hat,
        variance_method: method,
    })
}
