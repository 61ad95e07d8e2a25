use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use crossre::layout::BalancedLayout;
use crossre::uncertainty::MseMethod;
use crossre_cli::commands::{
    run_fit, run_generate, run_predict, AnalysisReport, FitArgs, GenerateArgs, PredictArgs, Truth,
};
use crossre_cli::ingest::{ingest_csv, parse_roles, write_csv, Covariate, LongData, Role, Schema};
use proptest::prelude::*;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crossre"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p
}

/// Generates a replicated data set and fits it; returns (dir, data path, fit path).
fn generated_fit(json: &str, replicate: u64) -> (TempDir, PathBuf, PathBuf, Truth) {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), json);
    let data = dir.path().join("data.csv");
    let truth_path = dir.path().join("truth.json");
    run_generate(&GenerateArgs {
        config: cfg,
        out: data.clone(),
        seed: None,
        scenario: 0,
        replicate,
        truth: Some(truth_path.clone()),
    })
    .unwrap();
    let truth: Truth = serde_json::from_slice(&fs::read(&truth_path).unwrap()).unwrap();
    let fit_path = dir.path().join("fit.json");
    let o = run(&["fit", "--data", data.to_str().unwrap(), "--rep-id", "rep", "--roles", "x", "--out", fit_path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    (dir, data, fit_path, truth)
}

#[test]
fn fit_recovers_slopes_within_three_standard_errors() {
    let (_dir, data, _fit, truth) =
        generated_fit(r#"{"layout": {"g": [30], "h": [30], "m": [4]}, "replicates": 1, "seed": 11}"#, 0);
    let schema = Schema { rep_id: Some("rep".into()), covariates: parse_roles("x").unwrap(), ..Schema::default() };
    let report = run_fit(&FitArgs { data, schema, method: Default::default(), interaction: None }).unwrap();
    assert!(report.converged && report.interaction);
    // slopes follow the intercept in design order
    for (row, want) in report.fixed_effects.iter().skip(1).zip(&truth.xi[1..]) {
        assert!((row.estimate - want).abs() <= 3.0 * row.std_error, "{}: {} vs {want}", row.name, row.estimate);
        assert!(row.p_value >= 0.0 && row.p_value <= 1.0);
    }
}

#[test]
fn shifting_the_response_moves_only_the_intercept() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), r#"{"layout": {"g": [8], "h": [7]}, "replicates": 1, "seed": 3}"#);
    let base = dir.path().join("base.csv");
    let mut data = run_generate(&GenerateArgs { config: cfg, out: base.clone(), seed: None, scenario: 0, replicate: 2, truth: None }).unwrap();
    data.response.iter_mut().for_each(|y| *y += 10.0);
    let shifted = dir.path().join("shifted.csv");
    let mut buf = Vec::new();
    write_csv(&data, &mut buf).unwrap();
    fs::write(&shifted, buf).unwrap();
    let schema = data.schema.clone();
    let fit = |p: PathBuf| run_fit(&FitArgs { data: p, schema: schema.clone(), method: Default::default(), interaction: None }).unwrap();
    let (a, b) = (fit(base), fit(shifted));
    assert!((b.fixed_effects[0].estimate - a.fixed_effects[0].estimate - 10.0).abs() < 1e-8);
    for (x, y) in a.fixed_effects.iter().zip(&b.fixed_effects).skip(1) {
        assert!((x.estimate - y.estimate).abs() < 1e-8);
    }
    let (ta, tb) = (a.variance_components, b.variance_components);
    assert!((ta.sigma_a2 - tb.sigma_a2).abs() < 1e-8 * (1.0 + ta.sigma_a2));
    assert!((ta.sigma_e2 - tb.sigma_e2).abs() < 1e-8 * ta.sigma_e2);
}

#[test]
fn predict_is_deterministic_and_internally_consistent() {
    let (dir, _data, fit, _truth) =
        generated_fit(r#"{"layout": {"g": [6], "h": [5], "m": [3]}, "replicates": 1, "seed": 5}"#, 1);
    let outs: Vec<PathBuf> = ["p1", "p2"].iter().map(|d| dir.path().join(d)).collect();
    for out in &outs {
        let o = run(&["predict", "--fit", fit.to_str().unwrap(), "--mse", "lsw", "--level", "0.95", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["report.json", "effects.csv", "qq.csv"] {
        assert_eq!(fs::read(outs[0].join(f)).unwrap(), fs::read(outs[1].join(f)).unwrap(), "{f} differs");
    }
    let report: AnalysisReport = serde_json::from_slice(&fs::read(outs[0].join("report.json")).unwrap()).unwrap();
    let count = |name: &str| report.effects.iter().filter(|e| serde_json::to_value(e.factor).unwrap() == name).count();
    assert_eq!((count("row"), count("column"), count("interaction")), (6, 5, 30));
    assert!((report.critical_value - 1.959963984540054).abs() < 1e-12);
    for e in &report.effects {
        let half = report.critical_value * e.mse.sqrt();
        assert!((e.upper - e.eblup - half).abs() < 1e-12 && (e.eblup - e.lower - half).abs() < 1e-12);
    }
    let effects = fs::read_to_string(outs[0].join("effects.csv")).unwrap();
    assert!(effects.lines().last().unwrap().starts_with("# crossre "));
    let qq = fs::read_to_string(outs[0].join("qq.csv")).unwrap();
    let first: Vec<&str> = qq.lines().nth(1).unwrap().split(',').collect();
    // smallest of six row effects sits at the (1 - 0.5) / 6 quantile
    assert!((first[2].parse::<f64>().unwrap() - (-1.382_994_127_100_643_4)).abs() < 1e-9);
}

#[test]
fn second_order_methods_match_the_library_and_respect_the_guard() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), r#"{"layout": {"g": [6], "h": [5]}, "replicates": 1, "seed": 9}"#);
    let data = dir.path().join("d.csv");
    run_generate(&GenerateArgs { config: cfg, out: data.clone(), seed: None, scenario: 0, replicate: 0, truth: None }).unwrap();
    let fit = dir.path().join("fit.json");
    assert!(run(&["fit", "--data", data.to_str().unwrap(), "--roles", "x", "--out", fit.to_str().unwrap()]).status.success());
    let predict = |mse: MseMethod, max_n: usize| {
        run_predict(&PredictArgs { fit: fit.clone(), data: None, mse, level: 0.9, max_n, out: dir.path().join("unused") })
    };
    let kh = predict(MseMethod::Kh, 5000).unwrap();
    let pr = predict(MseMethod::Pr, 5000).unwrap();
    assert_eq!(kh.effects.len(), 11);
    for (a, b) in kh.effects.iter().zip(&pr.effects) {
        assert!(a.mse > 0.0 && a.mse <= b.mse + 1e-12);
    }
    let o = run(&["predict", "--fit", fit.to_str().unwrap(), "--mse", "pr", "--max-n", "10", "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--mse lsw"), "{}", stderr(&o));
}

#[test]
fn unbalanced_data_exits_with_data_error_naming_the_cell() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("d.csv");
    fs::write(&p, "row,col,y\na,x,1\na,y,2\nb,x,3\nc,x,1\nc,y,2\nb,y,\n").unwrap();
    let o = run(&["fit", "--data", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 7"), "{}", stderr(&o));
    fs::write(&p, "row,col,y\na,x,1\na,y,2\nb,x,3\nc,x,1\nc,y,2\n").unwrap();
    let o = run(&["fit", "--data", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("(b, y)"), "{}", stderr(&o));
}

#[test]
fn modified_data_is_rejected_by_predict() {
    let (dir, data, fit, _truth) = generated_fit(r#"{"layout": {"g": [4], "h": [4], "m": [2]}, "replicates": 1, "seed": 2}"#, 0);
    let mut text = fs::read_to_string(&data).unwrap();
    text = text.replacen("r1,c1,1,", "r1,c1,1,1", 1);
    fs::write(&data, text).unwrap();
    let o = run(&["predict", "--fit", fit.to_str().unwrap(), "--out", dir.path().join("p").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn simulate_smoke_config_is_fast_and_reportable() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sim");
    let start = Instant::now();
    let o = bin()
        .args(["simulate", "--config", config("smoke.json").to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "4"])
        .env("CROSSRE_WORKERS", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(start.elapsed().as_secs_f64() < 5.0);
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("alpha_1") && table.contains("seed=4"));
    let again = run(&["report", "--in", out.to_str().unwrap(), "--format", "text"]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), table);
    let json = run(&["report", "--in", out.to_str().unwrap(), "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert!(v.is_object() || v.is_array());
}

#[test]
fn invalid_distribution_is_a_config_error_with_its_path() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), r#"{"layout": {"g": [5], "h": [5]}, "distributions": {"beta": "cauchy"}}"#);
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("distributions.beta"), "{}", stderr(&o));
}

#[test]
fn bundled_configs_parse() {
    for name in ["table1.json", "table3.json", "table4.json", "smoke.json"] {
        let text = fs::read_to_string(config(name)).unwrap();
        let cfg = crossre::simlab::ScenarioConfig::from_json(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(!cfg.scenarios().unwrap().is_empty());
    }
    let t3 = crossre::simlab::ScenarioConfig::from_json(&fs::read_to_string(config("table3.json")).unwrap()).unwrap();
    assert_eq!(t3.scenarios().unwrap().len(), 9);
}

fn arb_data() -> impl Strategy<Value = LongData> {
    (2usize..5, 2usize..5, 1usize..4).prop_flat_map(|(g, h, m)| {
        let n = g * h * m;
        (
            proptest::collection::vec(-1e6f64..1e6, n),
            proptest::collection::vec(proptest::num::f64::NORMAL, n),
        )
            .prop_map(move |(y, x)| {
                let layout = BalancedLayout::new(g, h, m).unwrap();
                let replicated = m > 1;
                LongData {
                    schema: Schema {
                        rep_id: replicated.then(|| "rep".to_string()),
                        covariates: vec![crossre_cli::ingest::CovariateSpec { name: "x".into(), role: Role::Within }],
                        ..Schema::default()
                    },
                    layout,
                    row_labels: (0..g).map(|i| format!("row {i}, \"quoted\"")).collect(),
                    col_labels: (0..h).map(|j| format!("c{j}")).collect(),
                    rep_labels: if replicated { (0..m).map(|k| format!("k{k}")).collect() } else { Vec::new() },
                    response: y,
                    covariates: vec![Covariate { name: "x".into(), role: Role::Within, values: x }],
                }
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip(data in arb_data()) {
        let mut buf = Vec::new();
        write_csv(&data, &mut buf).unwrap();
        let back = ingest_csv(buf.as_slice(), &data.schema).unwrap();
        prop_assert_eq!(back, data);
    }
}
