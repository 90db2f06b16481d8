//! End-to-end use of the public API: CSV in, selection and estimate out.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use wit_core::simulation::generate;
use wit_core::{
    all_iv_comparators, fit_wit, load_csv, BuiltinCase, ColumnSpec, IVDataset, StudyCase,
    StudyConfig, WitConfig, WitStatus,
};

fn to_csv(ds: &IVDataset, w: Option<&DMatrix<f64>>) -> String {
    let mut s = String::from("y,d");
    for j in 0..ds.p() {
        let _ = write!(s, ",z{j}");
    }
    let k = w.map_or(0, |w| w.ncols());
    for j in 0..k {
        let _ = write!(s, ",w{j}");
    }
    s.push('\n');
    for i in 0..ds.n() {
        let _ = write!(s, "{},{}", ds.y()[i], ds.d()[i]);
        for j in 0..ds.p() {
            let _ = write!(s, ",{}", ds.z()[(i, j)]);
        }
        for j in 0..k {
            let _ = write!(s, ",{}", w.unwrap()[(i, j)]);
        }
        s.push('\n');
    }
    s
}

fn spec(p: usize, k: usize) -> ColumnSpec {
    ColumnSpec {
        y: "y".parse().unwrap(),
        d: "d".parse().unwrap(),
        z: (0..p).map(|j| format!("z{j}").parse().unwrap()).collect(),
        w: (0..k).map(|j| format!("w{j}").parse().unwrap()).collect(),
    }
}

#[test]
fn csv_round_trip_reproduces_the_fit() {
    let (ds, truth) = generate(&BuiltinCase::C1I.spec(800).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c1.csv");
    std::fs::write(&path, to_csv(&ds, None)).unwrap();
    let loaded = load_csv(&path, &spec(ds.p(), 0)).unwrap();
    let a = fit_wit(&ds, &WitConfig::default()).unwrap();
    let b = fit_wit(&loaded, &WitConfig::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.status, WitStatus::Selected);
    let h = a.headline();
    assert_eq!(h.valid_set, truth.valid_set);
    assert!(h.ci_low < truth.beta_star && truth.beta_star < h.ci_high);
}

#[test]
fn covariates_shift_nothing_once_partialled_out() {
    // adding covariate effects to y and d must not move the estimate
    let (ds, _) = generate(&BuiltinCase::C1I.spec(600).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = DMatrix::from_fn(ds.n(), 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let shifted_d =
        ds.d() + &w * nalgebra::dvector![0.7, -0.3] + nalgebra::DVector::repeat(ds.n(), 4.0);
    let shifted_y = ds.y() - ds.d() + &shifted_d + &w * nalgebra::dvector![1.5, 0.2];
    let with_w = IVDataset::new(shifted_y, shifted_d, ds.z().clone(), Some(w.clone())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.csv");
    std::fs::write(&path, to_csv(&with_w, Some(&w))).unwrap();
    let loaded = load_csv(&path, &spec(ds.p(), 2)).unwrap();
    let fit = fit_wit(&loaded, &WitConfig::default()).unwrap().headline();
    assert_eq!(fit.method, "WIT");
    assert!((fit.beta_hat - 1.0).abs() < 0.1, "{}", fit.beta_hat);
    let rows = all_iv_comparators(&loaded).unwrap();
    assert_eq!(rows.len(), 3);
}

#[test]
fn study_config_round_trips_through_json() {
    let cfg = StudyConfig {
        case: StudyCase::Builtin(BuiltinCase::C2II),
        n_values: vec![200, 400],
        reps: 3,
        methods: vec![wit_core::Method::Wit, wit_core::Method::OracleLiml],
        seed0: 11,
        workers: 2,
        wit: WitConfig::default(),
    };
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<StudyConfig>(&text).unwrap(), cfg);
    // a partial configuration fills the rest with defaults
    let minimal: StudyConfig = serde_json::from_str(
        r#"{"case": "C1_I", "n_values": [100], "reps": 1, "methods": ["wit"], "seed0": 0, "workers": 1,
            "wit": {"tuning": {"penalty": "scad"}}}"#,
    )
    .unwrap();
    assert_eq!(minimal.wit.tuning.penalty, wit_core::PenaltyKind::Scad);
    assert!(minimal.wit.tuning.early_exit);
}
