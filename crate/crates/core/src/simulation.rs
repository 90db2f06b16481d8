//! Simulation designs, the family of observationally equivalent DGPs, replication
//! metrics and the parallel study runner.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{IVDataset, TruthLabels};
use crate::error::{Result, WitError};
use crate::estimators;
use crate::moments::Moments;
use crate::penalty::PenaltyKind;
use crate::selector;
use crate::wit::{self, IntervalEstimate, WitConfig};

/// Entries of a transformed alpha at or below this magnitude count as zero.
pub const ZERO_TOL: f64 = 1e-12;

/// Covariance rule for the instrument rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ZCovRule {
    Identity,
    /// `Sigma = variance * I`.
    Independent {
        variance: f64,
    },
    /// `Sigma_jj = scale`, `Sigma_jk = scale * base^(|j - k|^exponent)`.
    PowerDecay {
        scale: f64,
        base: f64,
        exponent: f64,
    },
}

impl Default for ZCovRule {
    /// Independent instruments with variance 0.3.
    fn default() -> Self {
        ZCovRule::Independent { variance: 0.3 }
    }
}

impl ZCovRule {
    pub fn matrix(&self, p: usize) -> DMatrix<f64> {
        match *self {
            ZCovRule::Identity => DMatrix::identity(p, p),
            ZCovRule::Independent { variance } => DMatrix::identity(p, p) * variance,
            ZCovRule::PowerDecay {
                scale,
                base,
                exponent,
            } => DMatrix::from_fn(p, p, |j, k| {
                let gap = j.abs_diff(k) as f64;
                scale * base.powf(gap.powf(exponent))
            }),
        }
    }
}

/// A simulation design: `D = Z gamma + eta`, `Y = D beta + Z alpha + eps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DGPSpec {
    pub n: usize,
    pub beta_star: f64,
    pub alpha_star: Vec<f64>,
    pub gamma_star: Vec<f64>,
    pub sigma_eps: f64,
    pub corr_eps_eta: f64,
    pub sigma_eta: f64,
    #[serde(default)]
    pub z_cov: ZCovRule,
    #[serde(default)]
    pub seed: u64,
}

impl DGPSpec {
    /// Defaults: `beta = 1`, `sigma_eps = 0.5`, `corr = 0.6`, `sigma_eta = 1`.
    pub fn new(n: usize, alpha_star: Vec<f64>, gamma_star: Vec<f64>) -> Self {
        DGPSpec {
            n,
            beta_star: 1.0,
            alpha_star,
            gamma_star,
            sigma_eps: 0.5,
            corr_eps_eta: 0.6,
            sigma_eta: 1.0,
            z_cov: ZCovRule::default(),
            seed: 0,
        }
    }

    pub fn p(&self) -> usize {
        self.alpha_star.len()
    }

    pub fn truth(&self) -> Result<TruthLabels> {
        TruthLabels::new(
            self.beta_star,
            self.alpha_star.clone(),
            self.gamma_star.clone(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        if self.gamma_star.len() != p {
            return Err(WitError::Spec(format!(
                "alpha has {p} entries, gamma has {}",
                self.gamma_star.len()
            )));
        }
        if p == 0 || self.n <= p {
            return Err(WitError::Spec(format!(
                "need n > p >= 1 (n = {}, p = {p})",
                self.n
            )));
        }
        let finite = self
            .alpha_star
            .iter()
            .chain(&self.gamma_star)
            .chain([
                &self.beta_star,
                &self.sigma_eps,
                &self.sigma_eta,
                &self.corr_eps_eta,
            ])
            .all(|v| v.is_finite());
        if !finite {
            return Err(WitError::Spec("design parameters must be finite".into()));
        }
        // a zero scale gives an exact system, which is allowed
        if self.sigma_eps < 0.0 || self.sigma_eta < 0.0 || self.corr_eps_eta.abs() > 1.0 {
            return Err(WitError::Spec(format!(
                "error covariance is not positive semidefinite (sigma_eps = {}, sigma_eta = {}, corr = {})",
                self.sigma_eps, self.sigma_eta, self.corr_eps_eta
            )));
        }
        self.truth()?;
        Ok(())
    }
}

/// The substream for replication `r` of a study seeded with `seed0`.
pub fn replication_rng(seed0: u64, r: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed0);
    rng.set_stream(r);
    rng
}

/// Draws one dataset from `spec`, using replication 0 of `spec.seed`.
pub fn generate(spec: &DGPSpec) -> Result<(IVDataset, TruthLabels)> {
    generate_with_rng(spec, &mut replication_rng(spec.seed, 0))
}

/// Draws the instrument rows first (row by row), then the error pairs.
pub fn generate_with_rng<R: Rng>(spec: &DGPSpec, rng: &mut R) -> Result<(IVDataset, TruthLabels)> {
    spec.validate()?;
    let (n, p) = (spec.n, spec.p());
    let chol = spec.z_cov.matrix(p).cholesky().ok_or_else(|| {
        WitError::Spec(format!(
            "instrument covariance is not positive definite for p = {p}"
        ))
    })?;
    let draws: Vec<f64> = (0..n * p).map(|_| rng.sample(StandardNormal)).collect();
    let z = DMatrix::from_row_slice(n, p, &draws) * chol.l().transpose();

    let rho = spec.corr_eps_eta;
    let tail = (1.0 - rho * rho).max(0.0).sqrt();
    let mut eps = DVector::zeros(n);
    let mut eta = DVector::zeros(n);
    for i in 0..n {
        let u1: f64 = rng.sample(StandardNormal);
        let u2: f64 = rng.sample(StandardNormal);
        eta[i] = spec.sigma_eta * u1;
        eps[i] = spec.sigma_eps * (rho * u1 + tail * u2);
    }
    let gamma = DVector::from_column_slice(&spec.gamma_star);
    let alpha = DVector::from_column_slice(&spec.alpha_star);
    let d = &z * gamma + eta;
    let y = &d * spec.beta_star + &z * alpha + eps;
    Ok((IVDataset::new(y, d, z, None)?, spec.truth()?))
}

/// Named designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BuiltinCase {
    #[serde(rename = "C1_I")]
    C1I,
    #[serde(rename = "C1_II")]
    C1II,
    #[serde(rename = "C1_III")]
    C1III,
    #[serde(rename = "C1_IV")]
    C1IV,
    #[serde(rename = "C2_I")]
    C2I,
    #[serde(rename = "C2_II")]
    C2II,
    #[serde(rename = "EXAMPLE_1")]
    Example1,
}

impl BuiltinCase {
    pub const ALL: [BuiltinCase; 7] = [
        BuiltinCase::C1I,
        BuiltinCase::C1II,
        BuiltinCase::C1III,
        BuiltinCase::C1IV,
        BuiltinCase::C2I,
        BuiltinCase::C2II,
        BuiltinCase::Example1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinCase::C1I => "C1_I",
            BuiltinCase::C1II => "C1_II",
            BuiltinCase::C1III => "C1_III",
            BuiltinCase::C1IV => "C1_IV",
            BuiltinCase::C2I => "C2_I",
            BuiltinCase::C2II => "C2_II",
            BuiltinCase::Example1 => "EXAMPLE_1",
        }
    }

    /// The design at sample size `n` (seed 0).
    pub fn spec(self, n: usize) -> Result<DGPSpec> {
        let spec = match self {
            BuiltinCase::C1I => DGPSpec::new(
                n,
                blocks(&[(0.0, 5), (0.4, 3), (0.8, 2)]),
                blocks(&[(0.5, 4), (0.6, 6)]),
            ),
            BuiltinCase::C1II | BuiltinCase::Example1 => DGPSpec::new(
                n,
                blocks(&[(0.0, 5), (1.0, 1), (0.7, 4)]),
                blocks(&[(0.04, 3), (0.5, 2), (0.2, 1), (0.1, 4)]),
            ),
            BuiltinCase::C1III => DGPSpec::new(
                n,
                blocks(&[(0.0, 9), (0.4, 6), (0.2, 6)]),
                blocks(&[(0.4, 21)]),
            ),
            BuiltinCase::C1IV => DGPSpec::new(
                n,
                blocks(&[(0.0, 9), (0.4, 6), (0.2, 6)]),
                blocks(&[(0.15, 21)]),
            ),
            BuiltinCase::C2I => high_dim(n, 0.5, &[(0.0, 0.6), (2.0, 0.4)])?,
            BuiltinCase::C2II => high_dim(n, 0.6, &[(0.0, 0.5), (-2.0, 0.2), (4.0, 0.3)])?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for BuiltinCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BuiltinCase {
    type Err = WitError;

    /// Case-insensitive; underscores are optional (`c1_ii`, `C1II`, `example1`).
    fn from_str(s: &str) -> Result<Self> {
        let key = |t: &str| t.replace('_', "").to_ascii_uppercase();
        BuiltinCase::ALL
            .into_iter()
            .find(|c| key(c.name()) == key(s.trim()))
            .ok_or_else(|| {
                let names: Vec<&str> = BuiltinCase::ALL.iter().map(|c| c.name()).collect();
                WitError::UnknownCase(format!("'{s}' (known: {})", names.join(", ")))
            })
    }
}

fn blocks(parts: &[(f64, usize)]) -> Vec<f64> {
    parts
        .iter()
        .flat_map(|&(v, k)| std::iter::repeat_n(v, k))
        .collect()
}

/// Many-instrument design: `p = floor(ratio n)`, every `gamma_j = s`, alpha groups
/// of `mult * s` with floored sizes (remainder to the last group), where
/// `s = 2 sqrt(log p / n^0.99)`, and `sigma_eta` set so `gamma' Sigma gamma / sigma_eta^2 = 0.5`.
fn high_dim(n: usize, ratio: f64, groups: &[(f64, f64)]) -> Result<DGPSpec> {
    let p = (ratio * n as f64).floor() as usize;
    if p < 2 {
        return Err(WitError::Spec(format!(
            "n = {n} is too small for this design"
        )));
    }
    let s = 2.0 * ((p as f64).ln() / (n as f64).powf(0.99)).sqrt();
    let mut sizes: Vec<usize> = groups
        .iter()
        .map(|g| (g.1 * p as f64).floor() as usize)
        .collect();
    let assigned: usize = sizes.iter().sum();
    *sizes.last_mut().expect("at least one group") += p - assigned;
    let alpha = blocks(
        &groups
            .iter()
            .zip(&sizes)
            .map(|(g, &k)| (g.0 * s, k))
            .collect::<Vec<_>>(),
    );
    let mut spec = DGPSpec::new(n, alpha, vec![s; p]);
    let gamma = DVector::from_column_slice(&spec.gamma_star);
    let signal = gamma.dot(&(spec.z_cov.matrix(p) * &gamma));
    spec.sigma_eta = (signal / 0.5).sqrt();
    Ok(spec)
}

/// One member of the observationally equivalent family `(beta + c, alpha - c gamma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalentDGP {
    pub c: f64,
    pub beta_tilde: f64,
    pub alpha_tilde: Vec<f64>,
    pub zero_set: Vec<usize>,
}

pub fn transform_dgp(truth: &TruthLabels, c: f64) -> EquivalentDGP {
    let alpha_tilde: Vec<f64> = truth
        .alpha_star
        .iter()
        .zip(&truth.gamma_star)
        .map(|(a, g)| a - c * g)
        .collect();
    let zero_set = alpha_tilde
        .iter()
        .enumerate()
        .filter(|(_, a)| a.abs() <= ZERO_TOL)
        .map(|(j, _)| j)
        .collect();
    EquivalentDGP {
        c,
        beta_tilde: truth.beta_star + c,
        alpha_tilde,
        zero_set,
    }
}

/// The truth (`c = 0`) followed by one member per distinct nonzero ratio
/// `alpha_j / gamma_j`, in ascending order of `c`.
pub fn enumerate_solutions(truth: &TruthLabels) -> Result<Vec<EquivalentDGP>> {
    let mut ratios = Vec::new();
    for (j, (&a, &g)) in truth.alpha_star.iter().zip(&truth.gamma_star).enumerate() {
        if a != 0.0 {
            if g == 0.0 {
                return Err(WitError::UndefinedRatio(j));
            }
            ratios.push((j, a / g));
        }
    }
    ratios.sort_by(|x, y| x.1.total_cmp(&y.1));
    let mut family = vec![transform_dgp(truth, 0.0)];
    let mut covered = vec![false; truth.p()];
    for &(j, c) in &ratios {
        if covered[j] {
            continue;
        }
        let member = transform_dgp(truth, c);
        for &k in &member.zero_set {
            covered[k] = true;
        }
        family.push(member);
    }
    Ok(family)
}

/// The member with the largest zero set; a tie means the sparsest rule fails.
pub fn sparsest_pick(family: &[EquivalentDGP]) -> Result<&EquivalentDGP> {
    let best = family
        .iter()
        .map(|f| f.zero_set.len())
        .max()
        .ok_or_else(|| WitError::Spec("empty DGP family".into()))?;
    let mut top = family.iter().filter(|f| f.zero_set.len() == best);
    let pick = top.next().expect("maximum is attained");
    if let Some(other) = top.next() {
        return Err(WitError::Identification(format!(
            "sparsest rule is not unique: c = {} and c = {} both have {best} zeros",
            pick.c, other.c
        )));
    }
    Ok(pick)
}

/// Estimators the study runner can evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "wit")]
    Wit,
    #[serde(rename = "wit-scad")]
    WitScad,
    #[serde(rename = "lasso-baseline")]
    LassoBaseline,
    #[serde(rename = "oracle-liml")]
    OracleLiml,
    #[serde(rename = "oracle-tsls")]
    OracleTsls,
    #[serde(rename = "tsls")]
    Tsls,
    #[serde(rename = "liml")]
    Liml,
    #[serde(rename = "ols")]
    Ols,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Wit,
        Method::WitScad,
        Method::LassoBaseline,
        Method::OracleLiml,
        Method::OracleTsls,
        Method::Tsls,
        Method::Liml,
        Method::Ols,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Wit => "wit",
            Method::WitScad => "wit-scad",
            Method::LassoBaseline => "lasso-baseline",
            Method::OracleLiml => "oracle-liml",
            Method::OracleTsls => "oracle-tsls",
            Method::Tsls => "tsls",
            Method::Liml => "liml",
            Method::Ols => "ols",
        }
    }

    /// Runs the method on one dataset. `valid_set` is reported for methods that
    /// select (or are handed) a valid set.
    pub fn run(self, ds: &IVDataset, truth: &TruthLabels, cfg: &WitConfig) -> Result<Replicate> {
        let selecting = |kind: PenaltyKind| -> Result<Replicate> {
            let mut cfg = cfg.clone();
            if cfg.tuning.penalty != kind {
                cfg.tuning.penalty = kind;
                cfg.tuning.shape = None;
            }
            let h = wit::fit_wit(ds, &cfg)?.headline();
            Ok(Replicate::from_interval(&h, true))
        };
        match self {
            Method::Wit => selecting(PenaltyKind::Mcp),
            Method::WitScad => selecting(PenaltyKind::Scad),
            Method::LassoBaseline => selecting(PenaltyKind::Lasso),
            _ => {
                let std = ds.standardize()?;
                let m = Moments::new(&std)?;
                let all: Vec<usize> = (0..ds.p()).collect();
                match self {
                    Method::OracleLiml => {
                        let f = estimators::wit_estimate_with(
                            &std,
                            &m,
                            &truth.valid_set,
                            &cfg.estimate,
                        )?;
                        Ok(Replicate {
                            beta_hat: f.beta_hat,
                            ci_low: f.ci_low,
                            ci_high: f.ci_high,
                            valid_set: Some(f.valid_set),
                        })
                    }
                    Method::OracleTsls => {
                        let f = estimators::kclass_with(&m, &truth.valid_set, 1.0)?;
                        Ok(Replicate::from_interval(
                            &IntervalEstimate::from_kclass("oracle-tsls", &f)?,
                            true,
                        ))
                    }
                    Method::Tsls => {
                        let f = estimators::kclass_with(&m, &all, 1.0)?;
                        Ok(Replicate::from_interval(
                            &IntervalEstimate::from_kclass("tsls", &f)?,
                            false,
                        ))
                    }
                    Method::Liml => {
                        let f = estimators::wit_estimate_with(&std, &m, &all, &cfg.estimate)?;
                        Ok(Replicate {
                            beta_hat: f.beta_hat,
                            ci_low: f.ci_low,
                            ci_high: f.ci_high,
                            valid_set: None,
                        })
                    }
                    Method::Ols => {
                        let f = estimators::kclass_with(&m, &all, 0.0)?;
                        Ok(Replicate::from_interval(
                            &IntervalEstimate::from_kclass("ols", &f)?,
                            false,
                        ))
                    }
                    _ => unreachable!("selecting methods handled above"),
                }
            }
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = WitError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                WitError::Spec(format!(
                    "unknown method '{s}' (known: {})",
                    names.join(", ")
                ))
            })
    }
}

/// What one replication of one method produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub beta_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub valid_set: Option<Vec<usize>>,
}

impl Replicate {
    fn from_interval(h: &IntervalEstimate, with_set: bool) -> Self {
        Replicate {
            beta_hat: h.beta_hat,
            ci_low: h.ci_low,
            ci_high: h.ci_high,
            valid_set: with_set.then(|| h.valid_set.clone()),
        }
    }
}

/// Summary over replications. Selection rates are `None` when some replicate
/// carries no valid set; every rate is NaN when no replicate succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    /// Median of `|beta_hat - beta*|`.
    pub mad: f64,
    pub std: f64,
    pub cp: f64,
    /// Share of valid instruments declared invalid, averaged over replicates.
    pub fpr: Option<f64>,
    /// Share of invalid instruments declared valid, averaged over replicates.
    pub fnr: Option<f64>,
    /// Share of replicates with the valid set recovered exactly.
    pub recovery: Option<f64>,
    pub n_reps: usize,
    pub failures: usize,
}

pub fn evaluate(
    method: &str,
    results: &[Replicate],
    truth: &TruthLabels,
    failures: usize,
) -> Result<MetricsReport> {
    if results.is_empty() && failures == 0 {
        return Err(WitError::Spec(
            "evaluate needs at least one replication".into(),
        ));
    }
    let k = results.len() as f64;
    let b = truth.beta_star;
    let dev: Vec<f64> = results.iter().map(|r| (r.beta_hat - b).abs()).collect();
    let mad = if results.is_empty() {
        f64::NAN
    } else {
        selector::median(&dev)
    };
    let mean = results.iter().map(|r| r.beta_hat).sum::<f64>() / k;
    let std = match results.len() {
        0 => f64::NAN,
        1 => 0.0,
        m => (results
            .iter()
            .map(|r| (r.beta_hat - mean).powi(2))
            .sum::<f64>()
            / (m - 1) as f64)
            .sqrt(),
    };
    let cp = results
        .iter()
        .filter(|r| r.ci_low <= b && b <= r.ci_high)
        .count() as f64
        / k;

    let sets: Option<Vec<&Vec<usize>>> = results.iter().map(|r| r.valid_set.as_ref()).collect();
    let (fpr, fnr, recovery) = match sets {
        Some(sets) if !sets.is_empty() => {
            let p = truth.p();
            let mut truly_valid = vec![false; p];
            for &j in &truth.valid_set {
                truly_valid[j] = true;
            }
            let n_valid = truth.valid_set.len() as f64;
            let n_invalid = (p - truth.valid_set.len()) as f64;
            let (mut fpr, mut fnr, mut hits) = (0.0, 0.0, 0usize);
            for set in &sets {
                let mut declared = vec![false; p];
                for &j in set.iter() {
                    declared[j] = true;
                }
                let fp = (0..p).filter(|&j| truly_valid[j] && !declared[j]).count() as f64;
                let fn_ = (0..p).filter(|&j| !truly_valid[j] && declared[j]).count() as f64;
                fpr += fp / n_valid;
                if n_invalid > 0.0 {
                    fnr += fn_ / n_invalid;
                }
                if declared == truly_valid {
                    hits += 1;
                }
            }
            (Some(fpr / k), Some(fnr / k), Some(hits as f64 / k))
        }
        Some(_) => (Some(f64::NAN), Some(f64::NAN), Some(f64::NAN)),
        None => (None, None, None),
    };
    Ok(MetricsReport {
        method: method.to_string(),
        mad,
        std,
        cp,
        fpr,
        fnr,
        recovery,
        n_reps: results.len() + failures,
        failures,
    })
}

/// A builtin design name or an explicit design whose `n` is overridden per study size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StudyCase {
    Builtin(BuiltinCase),
    Custom(DGPSpec),
}

impl StudyCase {
    pub fn at(&self, n: usize) -> Result<DGPSpec> {
        match self {
            StudyCase::Builtin(c) => c.spec(n),
            StudyCase::Custom(s) => {
                let spec = DGPSpec { n, ..s.clone() };
                spec.validate()?;
                Ok(spec)
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            StudyCase::Builtin(c) => c.name().to_string(),
            StudyCase::Custom(_) => "custom".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub case: StudyCase,
    pub n_values: Vec<usize>,
    pub reps: usize,
    pub methods: Vec<Method>,
    pub seed0: u64,
    pub workers: usize,
    #[serde(default)]
    pub wit: WitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub case: String,
    pub n: usize,
    pub p: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTable {
    pub seed0: u64,
    pub reps: usize,
    pub rows: Vec<StudyRow>,
}

impl StudyTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            case: &'a str,
            n: usize,
            p: usize,
            method: &'a str,
            mad: f64,
            std: f64,
            cp: f64,
            fpr: Option<f64>,
            fnr: Option<f64>,
            recovery: Option<f64>,
            n_reps: usize,
            failures: usize,
        }
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            let m = &r.metrics;
            w.serialize(Row {
                case: &r.case,
                n: r.n,
                p: r.p,
                method: &m.method,
                mad: m.mad,
                std: m.std,
                cp: m.cp,
                fpr: m.fpr,
                fnr: m.fnr,
                recovery: m.recovery,
                n_reps: m.n_reps,
                failures: m.failures,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Every replicate of every method at one sample size, in replication order.
/// `None` marks a failure (data generation or the estimator itself).
pub fn run_replicates(
    spec: &DGPSpec,
    reps: usize,
    methods: &[Method],
    seed0: u64,
    cfg: &WitConfig,
) -> Vec<Vec<Option<Replicate>>> {
    (0..reps)
        .into_par_iter()
        .map(
            |r| match generate_with_rng(spec, &mut replication_rng(seed0, r as u64)) {
                Ok((ds, truth)) => methods
                    .iter()
                    .map(|m| m.run(&ds, &truth, cfg).ok())
                    .collect(),
                Err(_) => vec![None; methods.len()],
            },
        )
        .collect()
}

/// Runs every (n, method) cell on `workers` threads. Replicate `r` always draws
/// from substream `r` of `seed0`, so the table does not depend on `workers`.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyTable> {
    if cfg.reps == 0 {
        return Err(WitError::Spec("reps must be at least 1".into()));
    }
    if cfg.methods.is_empty() || cfg.n_values.is_empty() {
        return Err(WitError::Spec(
            "a study needs at least one method and one n".into(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| WitError::Spec(format!("worker pool: {e}")))?;
    let mut rows = Vec::new();
    for &n in &cfg.n_values {
        let spec = cfg.case.at(n)?;
        let truth = spec.truth()?;
        let reps =
            pool.install(|| run_replicates(&spec, cfg.reps, &cfg.methods, cfg.seed0, &cfg.wit));
        for (k, method) in cfg.methods.iter().enumerate() {
            let ok: Vec<Replicate> = reps.iter().filter_map(|r| r[k].clone()).collect();
            let failures = cfg.reps - ok.len();
            rows.push(StudyRow {
                case: cfg.case.label(),
                n,
                p: spec.p(),
                metrics: evaluate(method.name(), &ok, &truth, failures)?,
            });
        }
    }
    Ok(StudyTable {
        seed0: cfg.seed0,
        reps: cfg.reps,
        rows,
    })
}
