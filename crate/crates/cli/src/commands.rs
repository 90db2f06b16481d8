//! The three subcommands. Each resolves its settings, validates them before any
//! work, and writes JSON or CSV plus a best-effort human table.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use wit_core::selector::Cluster;
use wit_core::simulation::{self, enumerate_solutions, sparsest_pick};
use wit_core::{
    all_iv_comparators, fit_wit, load_csv, EquivalentDGP, IntervalEstimate, Method, StudyCase,
    StudyConfig, TruthLabels, TuningReport, WITFit, WitError, WitStatus,
};

use crate::args::{EnumerateArgs, EstimateArgs, Format, SimulateArgs};
use crate::config::{column_spec, pick, pick_list, FileConfig};
use crate::CliError;

/// Methods run by `simulate` when none are named.
pub const DEFAULT_METHODS: [Method; 5] = [
    Method::Wit,
    Method::OracleLiml,
    Method::OracleTsls,
    Method::Tsls,
    Method::Liml,
];

/// Replications per sample size when none are given.
pub const DEFAULT_REPS: usize = 100;

/// Sample size for `enumerate-dgps --case` when `--n` is absent.
pub const DEFAULT_ENUMERATE_N: usize = 500;

fn write_out(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, bytes)
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(bytes)
                .and_then(|_| stdout.flush())
                .map_err(|e| CliError::Runtime(format!("cannot write to stdout: {e}")))
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

#[derive(Debug, Serialize)]
pub struct EstimateReport {
    pub status: WitStatus,
    pub n: usize,
    pub p: usize,
    pub instruments: Vec<String>,
    /// The reported estimate: WIT when selection succeeded, TSLS otherwise.
    pub estimate: IntervalEstimate,
    pub wit: Option<WITFit>,
    pub tuning: Option<TuningReport>,
    /// OLS, TSLS and LIML with every instrument treated as valid.
    pub comparators: Vec<IntervalEstimate>,
    pub ratios: Vec<Option<f64>>,
    pub clusters: Vec<Cluster>,
    pub notices: Vec<String>,
}

#[derive(Serialize)]
struct EstimateRow<'a> {
    method: &'a str,
    beta_hat: f64,
    se: f64,
    ci_low: f64,
    ci_high: f64,
    n_valid: usize,
    sargan_p: Option<f64>,
}

impl EstimateReport {
    fn rows(&self) -> impl Iterator<Item = &IntervalEstimate> {
        std::iter::once(&self.estimate).chain(&self.comparators)
    }

    fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "n = {}, p = {}, status = {:?}",
            self.n, self.p, self.status
        );
        let _ = writeln!(
            s,
            "{:<6} {:>10} {:>10} {:>23} {:>10} {:>10}",
            "method", "beta", "se", "95% CI", "# valid", "Sargan p"
        );
        for r in self.rows() {
            let ci = format!("[{:.4}, {:.4}]", r.ci_low, r.ci_high);
            let sargan = r.sargan_p.map_or("-".to_string(), |p| format!("{p:.4}"));
            let _ = writeln!(
                s,
                "{:<6} {:>10.4} {:>10.4} {:>23} {:>10} {:>10}",
                r.method,
                r.beta_hat,
                r.se,
                ci,
                r.valid_set.len(),
                sargan
            );
        }
        let valid: Vec<&str> = self
            .estimate
            .valid_set
            .iter()
            .map(|&j| self.instruments[j].as_str())
            .collect();
        let _ = writeln!(s, "selected valid instruments: {}", valid.join(", "));
        s
    }

    fn csv(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in self.rows() {
            w.serialize(EstimateRow {
                method: &r.method,
                beta_hat: r.beta_hat,
                se: r.se,
                ci_low: r.ci_low,
                ci_high: r.ci_high,
                n_valid: r.valid_set.len(),
                sargan_p: r.sargan_p,
            })
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
    }
}

pub fn estimate(args: &EstimateArgs, file: &FileConfig, verbose: u8) -> Result<(), CliError> {
    let input =
        pick(&args.input, &file.input).ok_or_else(|| CliError::Usage("missing --input".into()))?;
    let spec = column_spec(
        pick(&args.y_col, &file.y_col),
        pick(&args.d_col, &file.d_col),
        pick_list(&args.z_cols, &file.z_cols),
        pick_list(&args.w_cols, &file.w_cols),
    )?;
    let cfg = file.wit_config(&args.tuning)?;
    let out = pick(&args.out, &file.out);
    let format = args.format.or(file.format).unwrap_or(Format::Json);

    let ds = load_csv(&input, &spec)?;
    if verbose > 0 {
        eprintln!("loaded {}: n = {}, p = {}", input.display(), ds.n(), ds.p());
    }
    let outcome = fit_wit(&ds, &cfg)?;
    let comparators = all_iv_comparators(&ds)?;

    let mut notices = Vec::new();
    match outcome.status {
        WitStatus::Selected => {}
        WitStatus::AllRejected => notices.push(
            "WARNING: every tuning candidate was rejected by the MCD test; reporting TSLS on all instruments"
                .to_string(),
        ),
        WitStatus::JustIdentified => notices.push(
            "NOTICE: a single instrument is just identified; no selection is possible, reporting TSLS only"
                .to_string(),
        ),
    }
    let report = EstimateReport {
        status: outcome.status,
        n: ds.n(),
        p: ds.p(),
        instruments: ds.instrument_names().to_vec(),
        estimate: outcome.headline(),
        wit: outcome.fit,
        tuning: outcome.tuning,
        comparators: if outcome.status == WitStatus::JustIdentified {
            comparators
                .into_iter()
                .filter(|c| c.method == "TSLS")
                .collect()
        } else {
            comparators
        },
        ratios: outcome.ratios,
        clusters: outcome.clusters,
        notices,
    };
    for note in &report.notices {
        eprintln!("{note}");
    }

    if let Some(path) = &args.candidates {
        let mut buf = Vec::new();
        if let Some(t) = &report.tuning {
            t.write_candidates_csv(&mut buf)?;
        }
        write_out(Some(path), &buf)?;
    }

    let bytes = match format {
        Format::Json => to_json(&report)?,
        Format::Csv => report.csv()?,
    };
    write_out(out.as_deref(), &bytes)?;
    // the table goes wherever the machine output does not
    if out.is_some() {
        print!("{}", report.table());
    } else {
        eprint!("{}", report.table());
    }
    Ok(())
}

pub fn simulate(args: &SimulateArgs, file: &FileConfig, verbose: u8) -> Result<(), CliError> {
    let case = args
        .case
        .map(StudyCase::Builtin)
        .or_else(|| file.case.clone())
        .ok_or_else(|| CliError::Usage("missing --case".into()))?;
    let n_values = pick_list(&args.n, &file.n);
    if n_values.is_empty() {
        return Err(CliError::Usage("missing --n".into()));
    }
    let reps = pick(&args.reps, &file.reps).unwrap_or(DEFAULT_REPS);
    if reps == 0 {
        return Err(CliError::Usage("--reps must be at least 1".into()));
    }
    let mut methods = pick_list(&args.methods, &file.methods);
    if methods.is_empty() {
        methods = DEFAULT_METHODS.to_vec();
    }
    let workers = match pick(&args.workers, &file.workers) {
        Some(0) => return Err(CliError::Usage("--workers must be at least 1".into())),
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let wit = file.wit_config(&args.tuning)?;
    let seed0 = match pick(&args.seed, &file.seed) {
        Some(s) => s,
        None => {
            let s = rand::random::<u64>();
            eprintln!("seed: {s}");
            s
        }
    };
    // every design must build before any replication runs
    for &n in &n_values {
        case.at(n)?;
    }
    let out = pick(&args.out, &file.out);
    let format = args.format.or(file.format).unwrap_or(Format::Csv);

    let cfg = StudyConfig {
        case,
        n_values,
        reps,
        methods,
        seed0,
        workers,
        wit,
    };
    if verbose > 0 {
        eprintln!(
            "running {} x {} reps x {} methods on {} workers",
            cfg.case.label(),
            cfg.reps,
            cfg.methods.len(),
            cfg.workers
        );
    }
    let table = simulation::run_study(&cfg)?;
    let bytes = match format {
        Format::Json => to_json(&table)?,
        Format::Csv => {
            let mut buf = Vec::new();
            table.write_csv(&mut buf)?;
            buf
        }
    };
    write_out(out.as_deref(), &bytes)
}

#[derive(Debug, Serialize)]
pub struct EnumerateReport {
    pub truth: TruthLabels,
    pub rows: Vec<EquivalentDGP>,
    /// Position in `rows` of the unique sparsest member, if there is one.
    pub sparsest: Option<usize>,
    pub notice: String,
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

impl EnumerateReport {
    fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>4} {:>12} {:>12} {:>8}  zero set",
            "row", "c", "beta", "# zero"
        );
        for (i, r) in self.rows.iter().enumerate() {
            let mark = if Some(i) == self.sparsest { "*" } else { " " };
            let _ = writeln!(
                s,
                "{mark}{i:>3} {:>12.6} {:>12.6} {:>8}  {:?}",
                r.c,
                r.beta_tilde,
                r.zero_set.len(),
                r.zero_set
            );
        }
        let _ = writeln!(s, "{}", self.notice);
        s
    }

    fn csv(&self) -> Result<Vec<u8>, CliError> {
        #[derive(Serialize)]
        struct Row {
            c: f64,
            beta_tilde: f64,
            n_zero: usize,
            zero_set: String,
            alpha_tilde: String,
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(Row {
                c: r.c,
                beta_tilde: r.beta_tilde,
                n_zero: r.zero_set.len(),
                zero_set: join(&r.zero_set),
                alpha_tilde: join(&r.alpha_tilde),
            })
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
    }
}

fn resolve_truth(args: &EnumerateArgs, file: &FileConfig) -> Result<TruthLabels, CliError> {
    let alpha = pick_list(&args.alpha, &file.alpha);
    let gamma = pick_list(&args.gamma, &file.gamma);
    let case = match args.case {
        Some(c) => Some(StudyCase::Builtin(c)),
        None if alpha.is_empty() && gamma.is_empty() => file.case.clone(),
        None => None,
    };
    match case {
        Some(case) => {
            if !args.alpha.is_empty() || !args.gamma.is_empty() {
                return Err(CliError::Usage(
                    "give either --case or --alpha/--gamma, not both".into(),
                ));
            }
            let n = args
                .n
                .or_else(|| file.n.first().copied())
                .unwrap_or(DEFAULT_ENUMERATE_N);
            Ok(case.at(n)?.truth()?)
        }
        None => {
            if alpha.is_empty() || gamma.is_empty() {
                return Err(CliError::Usage(
                    "missing --alpha and --gamma (or --case)".into(),
                ));
            }
            let beta = pick(&args.beta, &file.beta).unwrap_or(1.0);
            // inconsistent vectors are the caller's mistake, whatever the core calls them
            TruthLabels::new(beta, alpha, gamma).map_err(|e| CliError::Usage(e.to_string()))
        }
    }
}

pub fn enumerate(args: &EnumerateArgs, file: &FileConfig) -> Result<(), CliError> {
    let truth = resolve_truth(args, file)?;
    let rows = enumerate_solutions(&truth)?;
    let (sparsest, notice) = match sparsest_pick(&rows) {
        Ok(best) => {
            let i = rows
                .iter()
                .position(|r| std::ptr::eq(r, best))
                .expect("pick comes from rows");
            let notice = format!(
                "identified: the sparsest rule picks row {i} (c = {}, {} valid instruments)",
                best.c,
                best.zero_set.len()
            );
            (Some(i), notice)
        }
        Err(WitError::Identification(msg)) => (None, format!("identification fails: {msg}")),
        Err(e) => return Err(e.into()),
    };
    let report = EnumerateReport {
        truth,
        rows,
        sparsest,
        notice,
    };
    let out = pick(&args.out, &file.out);
    match args.format.or(file.format) {
        Some(Format::Json) => write_out(out.as_deref(), &to_json(&report)?),
        Some(Format::Csv) => {
            eprintln!("{}", report.notice);
            write_out(out.as_deref(), &report.csv()?)
        }
        None => write_out(out.as_deref(), report.table().as_bytes()),
    }
}
