//! The `fit`, `predict`, `simulate`, `report` and `generate` commands.

use std::fs;
use std::path::{Path, PathBuf};

use crossre::estimate::{fit, FitOptions, FitResult, FixedEffects, Method};
use crossre::kron::{Component, VarianceComponents};
use crossre::predict::{blup_interaction, blup_no_interaction, Eblups};
use crossre::simlab::{emit_table, run_config, ScenarioConfig, ScenarioResult, TableFormat};
use crossre::uncertainty::{critical_value, LswEstimator, MseMethod, SecondOrder, Target};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{CliError, CliResult};
use crate::ingest::{ingest_csv, write_csv, Covariate, CovariateSpec, IngestError, LongData, Role, Schema};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Tool version, seed and input hash attached to every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub seed: Option<u64>,
    pub input_sha256: String,
}

impl Provenance {
    pub fn new(seed: Option<u64>, input: &[u8]) -> Self {
        Self { tool: "crossre".into(), version: VERSION.into(), seed, input_sha256: sha256_hex(input) }
    }

    pub fn footer(&self) -> Vec<String> {
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        vec![format!("{} {} seed={seed} input_sha256={}", self.tool, self.version, self.input_sha256)]
    }
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, contents: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|source| CliError::Json { path: path.display().to_string(), source })
}

fn with_footer(mut body: String, footer: &[String]) -> String {
    for line in footer {
        body.push_str("# ");
        body.push_str(line);
        body.push('\n');
    }
    body
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutInfo {
    pub g: usize,
    pub h: usize,
    pub m: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffectRow {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z_value: f64,
    /// Two-sided, normal reference.
    pub p_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardDeviations {
    pub row: f64,
    pub column: f64,
    pub interaction: Option<f64>,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub data: DataRef,
    pub schema: Schema,
    pub layout: LayoutInfo,
    pub method: Method,
    pub interaction: bool,
    pub converged: bool,
    pub iterations: usize,
    pub criterion: f64,
    pub gradient_norm: f64,
    pub boundary: Vec<Component>,
    pub fixed_effects: Vec<FixedEffectRow>,
    pub variance_components: VarianceComponents,
    pub standard_deviations: StandardDeviations,
    pub provenance: Provenance,
}

pub struct FitArgs {
    pub data: PathBuf,
    pub schema: Schema,
    pub method: Method,
    pub interaction: Option<bool>,
}

pub fn load_data(path: &Path, schema: &Schema) -> CliResult<(LongData, Vec<u8>)> {
    let bytes = read(path)?;
    let data = ingest_csv(bytes.as_slice(), schema)?;
    Ok((data, bytes))
}

fn fixed_table(result: &FitResult, names: &[String]) -> Vec<FixedEffectRow> {
    let se = result.standard_errors();
    names
        .iter()
        .zip(result.xi.to_vec())
        .zip(se)
        .map(|((name, estimate), std_error)| {
            let z_value = estimate / std_error;
            FixedEffectRow {
                name: name.clone(),
                estimate,
                std_error,
                z_value,
                p_value: erfc(z_value.abs() / std::f64::consts::SQRT_2),
            }
        })
        .collect()
}

pub fn run_fit(args: &FitArgs) -> CliResult<FitReport> {
    let (data, bytes) = load_data(&args.data, &args.schema)?;
    let design = data.design()?;
    let options = FitOptions { interaction: args.interaction, ..FitOptions::default() };
    let result = fit(args.method, &design, &data.table(), &options)?;
    let t = result.theta;
    let l = data.layout;
    Ok(FitReport {
        data: DataRef { path: args.data.display().to_string(), sha256: sha256_hex(&bytes) },
        schema: args.schema.clone(),
        layout: LayoutInfo { g: l.g(), h: l.h(), m: l.m(), n: l.n() },
        method: result.method,
        interaction: result.interaction,
        converged: result.converged,
        iterations: result.iterations,
        criterion: result.criterion,
        gradient_norm: result.gradient_norm,
        boundary: result.boundary.clone(),
        fixed_effects: fixed_table(&result, &design.column_names()),
        variance_components: t,
        standard_deviations: StandardDeviations {
            row: t.sigma_a2.sqrt(),
            column: t.sigma_b2.sqrt(),
            interaction: result.interaction.then(|| t.sigma_g2.sqrt()),
            error: t.sigma_e2.sqrt(),
        },
        provenance: Provenance::new(None, &bytes),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Row,
    Column,
    Interaction,
}

impl Factor {
    pub fn name(self) -> &'static str {
        match self {
            Factor::Row => "row",
            Factor::Column => "column",
            Factor::Interaction => "interaction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub factor: Factor,
    pub label: String,
    pub eblup: f64,
    pub mse: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub layout: LayoutInfo,
    pub fixed_effects: Vec<FixedEffectRow>,
    pub standard_deviations: StandardDeviations,
    pub mse_method: MseMethod,
    pub level: f64,
    pub critical_value: f64,
    pub effects: Vec<EffectRow>,
    pub notes: Vec<String>,
    pub provenance: Provenance,
}

pub struct PredictArgs {
    pub fit: PathBuf,
    /// Overrides the data path recorded in the fit.
    pub data: Option<PathBuf>,
    pub mse: MseMethod,
    pub level: f64,
    pub max_n: usize,
    pub out: PathBuf,
}

fn resolve_data(args: &PredictArgs, recorded: &str) -> PathBuf {
    if let Some(p) = &args.data {
        return p.clone();
    }
    let p = PathBuf::from(recorded);
    if p.is_relative() && !p.exists() {
        if let Some(dir) = args.fit.parent() {
            let alt = dir.join(&p);
            if alt.exists() {
                return alt;
            }
        }
    }
    p
}

fn mse_for(
    method: MseMethod,
    target: Target,
    lsw: &LswEstimator,
    second: Option<&SecondOrder>,
) -> CliResult<f64> {
    Ok(match (method, second) {
        (MseMethod::Lsw, _) => lsw.mse(target)?,
        (MseMethod::Kh, Some(s)) => s.kh(target)?.total,
        (MseMethod::Pr, Some(s)) => s.pr(target)?.total,
        _ => unreachable!("second-order estimator built for KH and PR"),
    })
}

pub fn run_predict(args: &PredictArgs) -> CliResult<AnalysisReport> {
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(CliError::Usage(format!("--level must lie in (0, 1), got {}", args.level)));
    }
    let fit_bytes = read(&args.fit)?;
    let report: FitReport = serde_json::from_slice(&fit_bytes)
        .map_err(|source| CliError::Json { path: args.fit.display().to_string(), source })?;
    let data_path = resolve_data(args, &report.data.path);
    let (data, bytes) = load_data(&data_path, &report.schema)?;
    if sha256_hex(&bytes) != report.data.sha256 {
        return Err(CliError::Data(format!(
            "{} does not match the data the fit was computed from (sha256 differs)",
            data_path.display()
        )));
    }
    let design = data.design()?;
    let estimates: Vec<f64> = report.fixed_effects.iter().map(|r| r.estimate).collect();
    let xi = FixedEffects::from_slice(&design.roles(), &estimates)?;
    let theta = report.variance_components;
    let table = data.table();
    let eblups: Eblups = if report.interaction {
        blup_interaction(&xi, &theta, &design, &table)?
    } else {
        blup_no_interaction(&xi, &theta, &design, &table)?
    };
    let lsw = LswEstimator::new(&theta, report.interaction, &design)?;
    let second = match args.mse {
        MseMethod::Lsw => None,
        _ => Some(SecondOrder::new(&theta, report.interaction, &design, args.max_n).map_err(|e| match e {
            crossre::Error::ResourceLimit(msg) => CliError::Usage(format!(
                "{msg}; rerun with --mse lsw, or raise --max-n if memory and time allow"
            )),
            other => other.into(),
        })?),
    };
    let q = 1.0 - args.level;
    let z = critical_value(q)?;
    let mut effects = Vec::new();
    let mut push = |factor: Factor, label: &str, eblup: f64, mse: f64| {
        let half = z * mse.sqrt();
        effects.push(EffectRow { factor, label: label.to_string(), eblup, mse, lower: eblup - half, upper: eblup + half });
    };
    for (i, label) in data.row_labels.iter().enumerate() {
        push(Factor::Row, label, eblups.alpha[i], mse_for(args.mse, Target::Row(i), &lsw, second.as_ref())?);
    }
    for (j, label) in data.col_labels.iter().enumerate() {
        push(Factor::Column, label, eblups.beta[j], mse_for(args.mse, Target::Column(j), &lsw, second.as_ref())?);
    }
    let mut notes = Vec::new();
    if let Some(gamma) = &eblups.gamma {
        if args.mse == MseMethod::Lsw {
            for (i, r) in data.row_labels.iter().enumerate() {
                for (j, c) in data.col_labels.iter().enumerate() {
                    push(Factor::Interaction, &format!("{r}/{c}"), gamma[(i, j)], lsw.mse(Target::Interaction(i, j))?);
                }
            }
        } else {
            notes.push("interaction effects are reported with --mse lsw only".to_string());
        }
    }
    if !report.boundary.is_empty() {
        notes.push(format!("variance components estimated as zero: {:?}", report.boundary));
    }
    let l = data.layout;
    Ok(AnalysisReport {
        layout: LayoutInfo { g: l.g(), h: l.h(), m: l.m(), n: l.n() },
        fixed_effects: report.fixed_effects,
        standard_deviations: report.standard_deviations,
        mse_method: args.mse,
        level: args.level,
        critical_value: z,
        effects,
        notes,
        provenance: Provenance::new(None, &fit_bytes),
    })
}

fn csv_text(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv output is UTF-8")
}

/// Writes `report.json`, `effects.csv` and `qq.csv` into `dir`.
pub fn write_analysis(report: &AnalysisReport, dir: &Path) -> CliResult<()> {
    let footer = report.provenance.footer();
    write(&dir.join("report.json"), to_json(report).as_bytes())?;

    let mut w = csv::Writer::from_writer(Vec::new());
    for e in &report.effects {
        w.serialize(e).map_err(IngestError::from)?;
    }
    write(&dir.join("effects.csv"), with_footer(csv_text(w), &footer).as_bytes())?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["factor", "rank", "normal_quantile", "label", "eblup", "lower", "upper"]).map_err(IngestError::from)?;
    let std_normal = Normal::standard();
    for factor in [Factor::Row, Factor::Column, Factor::Interaction] {
        let mut rows: Vec<&EffectRow> = report.effects.iter().filter(|e| e.factor == factor).collect();
        rows.sort_by(|a, b| a.eblup.total_cmp(&b.eblup));
        let count = rows.len() as f64;
        for (r, e) in rows.iter().enumerate() {
            let quantile = std_normal.inverse_cdf((r as f64 + 0.5) / count);
            let record = [
                factor.name().to_string(),
                (r + 1).to_string(),
                quantile.to_string(),
                e.label.clone(),
                e.eblup.to_string(),
                e.lower.to_string(),
                e.upper.to_string(),
            ];
            w.write_record(&record).map_err(IngestError::from)?;
        }
    }
    write(&dir.join("qq.csv"), with_footer(csv_text(w), &footer).as_bytes())
}

/// Saved output of `simulate`, read back by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutput {
    pub config: ScenarioConfig,
    pub results: Vec<ScenarioResult>,
    pub provenance: Provenance,
}

pub struct SimulateArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub format: TableFormat,
}

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<(ScenarioConfig, Vec<u8>)> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| CliError::Data(format!("{} is not UTF-8", path.display())))?;
    let mut config = ScenarioConfig::from_json(&text)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok((config, bytes))
}

pub const RESULTS_FILE: &str = "results.json";

fn table_file(format: TableFormat) -> &'static str {
    match format {
        TableFormat::Text => "table.txt",
        TableFormat::Csv => "table.csv",
        TableFormat::Json => "table.json",
    }
}

/// Runs every scenario, writes `results.json` and the table, and returns the table.
pub fn run_simulate(args: &SimulateArgs) -> CliResult<String> {
    let (config, bytes) = load_config(&args.config, args.seed)?;
    let results = run_config(&config)?;
    let provenance = Provenance::new(Some(config.seed), &bytes);
    let table = emit_table(&results, args.format, &provenance.footer());
    let output = SimulationOutput { config, results, provenance };
    write(&args.out.join(RESULTS_FILE), to_json(&output).as_bytes())?;
    write(&args.out.join(table_file(args.format)), table.as_bytes())?;
    Ok(table)
}

pub fn run_report(dir: &Path, format: TableFormat) -> CliResult<String> {
    let output: SimulationOutput = from_json(&dir.join(RESULTS_FILE))?;
    Ok(emit_table(&output.results, format, &output.provenance.footer()))
}

pub struct GenerateArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    /// Index into the configured layouts.
    pub scenario: usize,
    pub replicate: u64,
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub xi: Vec<f64>,
    pub theta: VarianceComponents,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub provenance: Provenance,
}

/// Writes one simulated data set as long-format CSV with covariate `x`.
pub fn run_generate(args: &GenerateArgs) -> CliResult<LongData> {
    let (config, bytes) = load_config(&args.config, args.seed)?;
    let scenarios = config.scenarios()?;
    let scenario = scenarios.get(args.scenario).ok_or_else(|| {
        CliError::Usage(format!("--scenario {} out of range ({} layouts configured)", args.scenario, scenarios.len()))
    })?;
    let frozen = scenario.freeze_covariates.then(|| scenario.frozen_covariate());
    let sim = scenario.simulate(args.replicate, frozen.as_deref())?;
    let l = scenario.layout;
    let replicated = l.is_replicated();
    let data = LongData {
        schema: Schema {
            rep_id: replicated.then(|| "rep".to_string()),
            covariates: vec![CovariateSpec { name: "x".into(), role: Role::Auto }],
            ..Schema::default()
        },
        layout: l,
        row_labels: (1..=l.g()).map(|i| format!("r{i}")).collect(),
        col_labels: (1..=l.h()).map(|j| format!("c{j}")).collect(),
        rep_labels: if replicated { (1..=l.m()).map(|k| k.to_string()).collect() } else { Vec::new() },
        response: sim.table.values().to_vec(),
        covariates: vec![Covariate { name: "x".into(), role: Role::Auto, values: sim.covariate.clone() }],
    };
    let mut buf = Vec::new();
    write_csv(&data, &mut buf)?;
    write(&args.out, &buf)?;
    if let Some(path) = &args.truth {
        let truth = Truth {
            xi: scenario.xi.clone(),
            theta: scenario.theta,
            alpha: sim.effects.alpha.clone(),
            beta: sim.effects.beta.clone(),
            gamma: sim.effects.gamma.clone(),
            provenance: Provenance::new(Some(config.seed), &bytes),
        };
        write(path, to_json(&truth).as_bytes())?;
    }
    Ok(data)
}
