//! Monte Carlo coverage studies for the prediction intervals.
//!
//! Each replicate draws its own covariate, random effects and errors from a
//! ChaCha stream selected by the replicate number, so results do not depend
//! on the number of worker threads or the order replicates are scheduled in.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{decompose_covariate, CenteredDesign, DecomposedCovariate};
use crate::error::{Error, Result};
use crate::estimate::{fit, FitOptions, Method, RandomEffects};
use crate::kron::VarianceComponents;
use crate::layout::{BalancedLayout, ResponseTable};
use crate::predict::eblup;
use crate::uncertainty::{critical_value, LswEstimator, MseMethod, SecondOrder, Target, SECOND_ORDER_LIMIT};

/// Two-component normal mixture with mean zero and a chosen variance.
///
/// A weight-0.3 component `N(0.5, 1)` is paired with a weight-0.7 component
/// whose mean cancels the first and whose variance makes up the remainder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureSpec {
    pub weight1: f64,
    pub mean1: f64,
    pub var1: f64,
    pub weight2: f64,
    pub mean2: f64,
    pub var2: f64,
}

impl MixtureSpec {
    pub fn for_variance(variance: f64) -> Result<Self> {
        let (weight1, mean1, var1) = (0.3, 0.5, 1.0);
        let weight2 = 1.0 - weight1;
        let mean2 = -weight1 * mean1 / weight2;
        let var2 = (variance - weight1 * (var1 + mean1 * mean1) - weight2 * mean2 * mean2) / weight2;
        if !(var2 > 0.0) {
            return Err(Error::Config {
                path: "distributions".into(),
                message: format!("mixture cannot reach variance {variance} (second component variance {var2:.4})"),
            });
        }
        Ok(Self { weight1, mean1, var1, weight2, mean2, var2 })
    }

    pub fn mean(&self) -> f64 {
        self.weight1 * self.mean1 + self.weight2 * self.mean2
    }

    pub fn variance(&self) -> f64 {
        let second = self.weight1 * (self.var1 + self.mean1 * self.mean1) + self.weight2 * (self.var2 + self.mean2 * self.mean2);
        second - self.mean().powi(2)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        if rng.random::<f64>() < self.weight1 {
            self.mean1 + self.var1.sqrt() * z
        } else {
            self.mean2 + self.var2.sqrt() * z
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectDistribution {
    #[default]
    Normal,
    Mixture,
}

/// Distribution family of each random term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Distributions {
    pub alpha: EffectDistribution,
    pub beta: EffectDistribution,
    pub gamma: EffectDistribution,
    pub e: EffectDistribution,
}

/// `count` iid draws with mean zero and the given variance.
pub fn gen_effects<R: Rng + ?Sized>(dist: EffectDistribution, count: usize, variance: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(Error::InvalidVariance(format!("effect variance {variance}")));
    }
    if variance == 0.0 {
        return Ok(vec![0.0; count]);
    }
    match dist {
        EffectDistribution::Normal => {
            let sd = variance.sqrt();
            Ok((0..count).map(|_| { let z: f64 = StandardNormal.sample(rng); sd * z }).collect())
        }
        EffectDistribution::Mixture => {
            let mix = MixtureSpec::for_variance(variance)?;
            Ok((0..count).map(|_| mix.sample(rng)).collect())
        }
    }
}

/// `x_ijk = 4 + t_i + 1.5 u_j + 2 v_ij (+ 3 w_ijk when m > 1)` with standard normal parts.
pub fn gen_covariate<R: Rng + ?Sized>(layout: &BalancedLayout, rng: &mut R) -> Vec<f64> {
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    let t: Vec<f64> = (0..layout.g()).map(|_| normal()).collect();
    let u: Vec<f64> = (0..layout.h()).map(|_| normal()).collect();
    let v: Vec<f64> = (0..layout.cells()).map(|_| normal()).collect();
    let replicated = layout.is_replicated();
    let mut x = Vec::with_capacity(layout.n());
    for i in 0..layout.g() {
        for j in 0..layout.h() {
            let cell = 4.0 + t[i] + 1.5 * u[j] + 2.0 * v[i * layout.h() + j];
            for _ in 0..layout.m() {
                x.push(if replicated { cell + 3.0 * normal() } else { cell });
            }
        }
    }
    x
}

/// Random effects drawn for one data set; `gamma` is empty on an unreplicated layout.
pub fn gen_random_effects<R: Rng + ?Sized>(
    layout: &BalancedLayout,
    theta: &VarianceComponents,
    dists: &Distributions,
    rng: &mut R,
) -> Result<RandomEffects> {
    let alpha = gen_effects(dists.alpha, layout.g(), theta.sigma_a2, rng)?;
    let beta = gen_effects(dists.beta, layout.h(), theta.sigma_b2, rng)?;
    let gamma = if layout.is_replicated() {
        gen_effects(dists.gamma, layout.cells(), theta.sigma_g2, rng)?
    } else {
        Vec::new()
    };
    let e = gen_effects(dists.e, layout.n(), theta.sigma_e2, rng)?;
    Ok(RandomEffects { alpha, beta, gamma, e })
}

/// `xbar xi_0 + row xi_1 + column xi_2 + cell xi_3 (+ within xi_4) + effects`.
pub fn gen_response(layout: &BalancedLayout, xi: &[f64], x: &DecomposedCovariate, effects: &RandomEffects) -> Result<ResponseTable> {
    let expected = if layout.is_replicated() { 5 } else { 4 };
    if xi.len() != expected {
        return Err(Error::mismatch("fixed effects", expected, xi.len()));
    }
    if effects.alpha.len() != layout.g() || effects.beta.len() != layout.h() || effects.e.len() != layout.n() {
        return Err(Error::mismatch("random effects", format!("({}, {}, {})", layout.g(), layout.h(), layout.n()), format!(
            "({}, {}, {})",
            effects.alpha.len(),
            effects.beta.len(),
            effects.e.len()
        )));
    }
    if !effects.gamma.is_empty() && effects.gamma.len() != layout.cells() {
        return Err(Error::mismatch("interaction effects", layout.cells(), effects.gamma.len()));
    }
    let h = layout.h();
    let mut y = Vec::with_capacity(layout.n());
    for i in 0..layout.g() {
        for j in 0..h {
            let c = i * h + j;
            let gamma = effects.gamma.get(c).copied().unwrap_or(0.0);
            let fixed = x.mean * xi[0] + x.row[i] * xi[1] + x.col[j] * xi[2] + x.cell[c] * xi[3];
            for k in 0..layout.m() {
                let p = layout.index(i, j, k);
                let within = if expected == 5 { x.within[p] * xi[4] } else { 0.0 };
                y.push(fixed + within + effects.alpha[i] + effects.beta[j] + gamma + effects.e[p]);
            }
        }
    }
    ResponseTable::new(*layout, y)
}

/// Grid of layouts; every combination of the three lists is run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutGrid {
    pub g: Vec<usize>,
    pub h: Vec<usize>,
    #[serde(default = "default_m")]
    pub m: Vec<usize>,
}

fn default_m() -> Vec<usize> {
    vec![1]
}

fn default_theta() -> VarianceComponents {
    VarianceComponents { sigma_a2: 9.0, sigma_b2: 49.0, sigma_g2: 36.0, sigma_e2: 81.0 }
}

fn default_replicates() -> usize {
    1000
}

fn default_level() -> f64 {
    0.95
}

fn default_seed() -> u64 {
    1
}

/// JSON description of a simulation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub layout: LayoutGrid,
    /// Fixed effects; defaults to `[0, 5, 7, 3]` (`m = 1`) or `[0, 5, 7, 3, 4]`.
    #[serde(default)]
    pub xi: Option<Vec<f64>>,
    /// True variances; `sigma_g2` is ignored on unreplicated layouts.
    #[serde(default = "default_theta")]
    pub theta: VarianceComponents,
    #[serde(default)]
    pub distributions: Distributions,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Defaults to all three for `m = 1` and LSW only otherwise.
    #[serde(default)]
    pub methods: Option<Vec<MseMethod>>,
    /// Nominal coverage of the intervals.
    #[serde(default = "default_level")]
    pub level: f64,
    /// Draw the covariate once per layout instead of once per replicate.
    #[serde(default)]
    pub freeze_covariates: bool,
    /// Largest `n` for which KH and PR are computed.
    #[serde(default = "default_second_order_limit")]
    pub second_order_limit: usize,
}

fn default_second_order_limit() -> usize {
    SECOND_ORDER_LIMIT
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config { path: path.into(), message: message.into() }
}

impl ScenarioConfig {
    /// Parses and validates; errors carry the JSON path of the offending value.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_error(&path, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, list, min) in [("layout.g", &self.layout.g, 2), ("layout.h", &self.layout.h, 2), ("layout.m", &self.layout.m, 1)] {
            if list.is_empty() {
                return Err(config_error(name, "must list at least one size"));
            }
            if let Some(pos) = list.iter().position(|&v| v < min) {
                return Err(config_error(&format!("{name}[{pos}]"), format!("must be at least {min}")));
            }
        }
        if self.replicates == 0 {
            return Err(config_error("replicates", "must be at least 1"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(config_error("level", "must lie in (0, 1)"));
        }
        self.theta.validate().map_err(|e| config_error("theta", e.to_string()))?;
        let t = &self.theta;
        for (name, dist, var) in [
            ("distributions.alpha", self.distributions.alpha, t.sigma_a2),
            ("distributions.beta", self.distributions.beta, t.sigma_b2),
            ("distributions.gamma", self.distributions.gamma, t.sigma_g2),
            ("distributions.e", self.distributions.e, t.sigma_e2),
        ] {
            if dist == EffectDistribution::Mixture && var > 0.0 {
                MixtureSpec::for_variance(var).map_err(|e| config_error(name, e.to_string()))?;
            }
        }
        for s in self.scenarios()? {
            if let Some(xi) = &self.xi {
                let want = if s.layout.is_replicated() { 5 } else { 4 };
                if xi.len() != want {
                    return Err(config_error("xi", format!("layout {:?} needs {want} fixed effects, got {}", s.layout, xi.len())));
                }
            }
            let second_order = s.methods.iter().any(|m| *m != MseMethod::Lsw);
            if second_order && s.layout.n() > self.second_order_limit {
                let limit = self.second_order_limit;
                return Err(config_error(
                    "methods",
                    format!(
                        "KH/PR limited to n <= {limit}; layout {:?} has n = {}; use lsw or raise second_order_limit",
                        s.layout,
                        s.layout.n()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// One scenario per layout, in `g`, then `h`, then `m` order.
    pub fn scenarios(&self) -> Result<Vec<Scenario>> {
        let mut out = Vec::new();
        for &g in &self.layout.g {
            for &h in &self.layout.h {
                for &m in &self.layout.m {
                    let layout = BalancedLayout::new(g, h, m)?;
                    let replicated = layout.is_replicated();
                    let xi = self.xi.clone().unwrap_or_else(|| {
                        if replicated {
                            vec![0.0, 5.0, 7.0, 3.0, 4.0]
                        } else {
                            vec![0.0, 5.0, 7.0, 3.0]
                        }
                    });
                    let mut theta = self.theta;
                    if !replicated {
                        theta.sigma_g2 = 0.0;
                    }
                    let methods = self.methods.clone().unwrap_or_else(|| {
                        if replicated {
                            vec![MseMethod::Lsw]
                        } else {
                            vec![MseMethod::Lsw, MseMethod::Kh, MseMethod::Pr]
                        }
                    });
                    out.push(Scenario {
                        layout,
                        xi,
                        theta,
                        distributions: self.distributions,
                        replicates: self.replicates,
                        seed: self.seed,
                        methods,
                        level: self.level,
                        freeze_covariates: self.freeze_covariates,
                        second_order_limit: self.second_order_limit,
                    });
                }
            }
        }
        Ok(out)
    }
}

/// A single layout of a study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub layout: BalancedLayout,
    pub xi: Vec<f64>,
    pub theta: VarianceComponents,
    pub distributions: Distributions,
    pub replicates: usize,
    pub seed: u64,
    pub methods: Vec<MseMethod>,
    pub level: f64,
    pub freeze_covariates: bool,
    pub second_order_limit: usize,
}

/// One generated data set with its truth.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub covariate: Vec<f64>,
    pub design: CenteredDesign,
    pub effects: RandomEffects,
    pub table: ResponseTable,
}

const FROZEN_STREAM: u64 = u64::MAX;

impl Scenario {
    pub fn interaction(&self) -> bool {
        self.layout.is_replicated()
    }

    /// Targets reported for this layout: `alpha_1`, `beta_1` and, with replicates, `gamma_11`.
    pub fn targets(&self) -> Vec<Target> {
        let mut t = vec![Target::Row(0), Target::Column(0)];
        if self.interaction() {
            t.push(Target::Interaction(0, 0));
        }
        t
    }

    /// Generator for a stream, keyed by the seed and the layout.
    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let l = &self.layout;
        for (chunk, v) in key.chunks_mut(8).zip([self.seed, l.g() as u64, l.h() as u64, l.m() as u64]) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        rng
    }

    /// The covariate shared by all replicates when covariates are frozen.
    pub fn frozen_covariate(&self) -> Vec<f64> {
        gen_covariate(&self.layout, &mut self.rng(FROZEN_STREAM))
    }

    /// Data set number `replicate`; `frozen` replaces the drawn covariate.
    pub fn simulate(&self, replicate: u64, frozen: Option<&[f64]>) -> Result<SimulatedData> {
        let mut rng = self.rng(replicate);
        let covariate = match frozen {
            Some(x) => x.to_vec(),
            None => gen_covariate(&self.layout, &mut rng),
        };
        let parts = decompose_covariate(&self.layout, &covariate)?;
        let effects = gen_random_effects(&self.layout, &self.theta, &self.distributions, &mut rng)?;
        let table = gen_response(&self.layout, &self.xi, &parts, &effects)?;
        let design = CenteredDesign::new(&self.layout, parts.into_blocks(&self.layout, "x"))?;
        Ok(SimulatedData { covariate, design, effects, table })
    }
}

fn truth(effects: &RandomEffects, h: usize, target: Target) -> f64 {
    match target {
        Target::Row(i) => effects.alpha[i],
        Target::Column(j) => effects.beta[j],
        Target::Interaction(i, j) => effects.gamma[i * h + j],
    }
}

/// Prediction error and MSE estimates for each target in one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    /// `prediction - truth`, per target.
    pub errors: Vec<f64>,
    /// MSE per target and method (`None` where the method does not apply).
    pub mse: Vec<Vec<Option<f64>>>,
}

/// Fits and evaluates one replicate.
pub fn run_replicate(scenario: &Scenario, replicate: u64, frozen: Option<&[f64]>) -> Result<ReplicateOutcome> {
    let data = scenario.simulate(replicate, frozen)?;
    let options = FitOptions { interaction: Some(scenario.interaction()), ..FitOptions::default() };
    let fitted = fit(Method::Reml, &data.design, &data.table, &options)?;
    let pred = eblup(&fitted, &data.design, &data.table)?;
    let lsw = LswEstimator::from_fit(&fitted, &data.design)?;
    let second = if scenario.methods.iter().any(|m| *m != MseMethod::Lsw) {
        Some(SecondOrder::from_fit(&fitted, &data.design, scenario.second_order_limit)?)
    } else {
        None
    };
    let h = scenario.layout.h();
    let mut errors = Vec::new();
    let mut mse = Vec::new();
    for target in scenario.targets() {
        let prediction = match target {
            Target::Row(i) => pred.alpha[i],
            Target::Column(j) => pred.beta[j],
            Target::Interaction(i, j) => pred.gamma.as_ref().map_or(0.0, |g| g[(i, j)]),
        };
        errors.push(prediction - truth(&data.effects, h, target));
        let per_method = scenario
            .methods
            .iter()
            .map(|method| -> Result<Option<f64>> {
                match (method, &second, target) {
                    (MseMethod::Lsw, _, _) => Ok(Some(lsw.mse(target)?)),
                    (_, _, Target::Interaction(..)) => Ok(None),
                    (MseMethod::Kh, Some(so), _) => Ok(Some(so.kh(target)?.total)),
                    (MseMethod::Pr, Some(so), _) => Ok(Some(so.pr(target)?.total)),
                    (_, None, _) => unreachable!("second-order estimator built when requested"),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        mse.push(per_method);
    }
    Ok(ReplicateOutcome { errors, mse })
}

/// Coverage and length summary for one target and method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub target: String,
    pub method: MseMethod,
    /// Fraction of intervals containing the realised effect.
    pub cvge: f64,
    /// Monte Carlo standard error of `cvge`.
    pub cvge_se: f64,
    /// `(rmse_bar - rmse_t) / rmse_t`.
    pub rlen: f64,
    /// Root of the mean squared prediction error.
    pub rmse_t: f64,
    /// Mean of the estimated root MSEs.
    pub rmse_bar: f64,
    /// Replicates contributing.
    pub used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub g: usize,
    pub h: usize,
    pub m: usize,
    pub replicates: usize,
    pub failures: usize,
    /// First few failure messages.
    pub failure_messages: Vec<String>,
    pub rows: Vec<MetricRow>,
    /// Fraction of replicates with KH MSE not above PR MSE, per target label.
    pub kh_not_above_pr: Vec<(String, f64)>,
    pub warning: Option<String>,
}

pub fn target_label(target: Target) -> String {
    match target {
        Target::Row(i) => format!("alpha_{}", i + 1),
        Target::Column(j) => format!("beta_{}", j + 1),
        Target::Interaction(i, j) => format!("gamma_{}{}", i + 1, j + 1),
    }
}

/// Summarises replicate outcomes in replicate order.
pub fn aggregate(scenario: &Scenario, outcomes: &[Result<ReplicateOutcome>]) -> Result<ScenarioResult> {
    let z = critical_value(1.0 - scenario.level)?;
    let ok: Vec<&ReplicateOutcome> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let failures = outcomes.len() - ok.len();
    let failure_messages: Vec<String> = outcomes.iter().filter_map(|o| o.as_ref().err().map(|e| e.to_string())).take(5).collect();
    let used = ok.len();
    let mut rows = Vec::new();
    let mut kh_not_above_pr = Vec::new();
    let kh = scenario.methods.iter().position(|m| *m == MseMethod::Kh);
    let pr = scenario.methods.iter().position(|m| *m == MseMethod::Pr);
    for (t, target) in scenario.targets().into_iter().enumerate() {
        let label = target_label(target);
        let rmse_t = if used == 0 {
            f64::NAN
        } else {
            (ok.iter().map(|o| o.errors[t].powi(2)).sum::<f64>() / used as f64).sqrt()
        };
        for (k, &method) in scenario.methods.iter().enumerate() {
            let pairs: Vec<(f64, f64)> = ok.iter().filter_map(|o| o.mse[t][k].map(|v| (o.errors[t], v))).collect();
            if pairs.is_empty() {
                continue;
            }
            let r = pairs.len() as f64;
            let covered = pairs.iter().filter(|(err, v)| err.abs() <= z * v.max(0.0).sqrt()).count() as f64;
            let cvge = covered / r;
            let rmse_bar = pairs.iter().map(|(_, v)| v.max(0.0).sqrt()).sum::<f64>() / r;
            rows.push(MetricRow {
                target: label.clone(),
                method,
                cvge,
                cvge_se: (cvge * (1.0 - cvge) / r).sqrt(),
                rlen: (rmse_bar - rmse_t) / rmse_t,
                rmse_t,
                rmse_bar,
                used: pairs.len(),
            });
        }
        if let (Some(a), Some(b)) = (kh, pr) {
            let both: Vec<(f64, f64)> = ok.iter().filter_map(|o| Some((o.mse[t][a]?, o.mse[t][b]?))).collect();
            if !both.is_empty() {
                let frac = both.iter().filter(|(x, y)| x <= y).count() as f64 / both.len() as f64;
                kh_not_above_pr.push((label, frac));
            }
        }
    }
    let warning = (failures as f64 > 0.01 * outcomes.len() as f64)
        .then(|| format!("{failures} of {} replicates failed and were excluded", outcomes.len()));
    Ok(ScenarioResult {
        g: scenario.layout.g(),
        h: scenario.layout.h(),
        m: scenario.layout.m(),
        replicates: outcomes.len(),
        failures,
        failure_messages,
        rows,
        kh_not_above_pr,
        warning,
    })
}

/// Runs every replicate of a scenario on the current rayon pool.
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioResult> {
    let frozen = scenario.freeze_covariates.then(|| scenario.frozen_covariate());
    let outcomes: Vec<Result<ReplicateOutcome>> = (0..scenario.replicates as u64)
        .into_par_iter()
        .map(|r| run_replicate(scenario, r, frozen.as_deref()))
        .collect();
    aggregate(scenario, &outcomes)
}

pub fn run_config(config: &ScenarioConfig) -> Result<Vec<ScenarioResult>> {
    config.validate()?;
    config.scenarios()?.iter().map(run_scenario).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    #[default]
    Text,
    Csv,
    Json,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(config_error("format", format!("unknown table format '{other}' (text, csv, json)"))),
        }
    }
}

const COLUMNS: [&str; 12] = ["g", "h", "m", "target", "method", "cvge", "cvge_se", "rlen", "rmse_t", "rmse_bar", "used", "failures"];

fn method_name(m: MseMethod) -> &'static str {
    match m {
        MseMethod::Lsw => "LSW",
        MseMethod::Kh => "KH",
        MseMethod::Pr => "PR",
    }
}

/// Renders results with one row per (layout, target, method); `footer` lines
/// are appended as comments (text, csv) or a `footer` array (json).
pub fn emit_table(results: &[ScenarioResult], format: TableFormat, footer: &[String]) -> String {
    let mut notes: Vec<String> = vec!["cvge_se = sqrt(cvge (1 - cvge) / used); about 0.005 when used = 1000".into()];
    for r in results {
        if let Some(w) = &r.warning {
            notes.push(format!("g={} h={} m={}: {w}", r.g, r.h, r.m));
        }
        for (label, frac) in &r.kh_not_above_pr {
            notes.push(format!("g={} h={} m={}: KH <= PR for {label} in {:.3} of replicates", r.g, r.h, r.m, frac));
        }
    }
    notes.extend(footer.iter().cloned());
    match format {
        TableFormat::Json => {
            let value = serde_json::json!({ "results": results, "footer": notes });
            serde_json::to_string_pretty(&value).expect("results serialise") + "\n"
        }
        TableFormat::Csv => {
            let mut out = COLUMNS.join(",") + "\n";
            for r in results {
                for row in &r.rows {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{:.4},{:.4},{:.4},{:.6},{:.6},{},{}",
                        r.g, r.h, r.m, row.target, method_name(row.method), row.cvge, row.cvge_se, row.rlen, row.rmse_t, row.rmse_bar, row.used, r.failures
                    );
                }
            }
            for n in notes {
                let _ = writeln!(out, "# {n}");
            }
            out
        }
        TableFormat::Text => {
            let mut out = format!(
                "{:>5} {:>5} {:>4} {:<9} {:<6} {:>7} {:>7} {:>7} {:>10} {:>10} {:>6} {:>8}\n",
                COLUMNS[0], COLUMNS[1], COLUMNS[2], COLUMNS[3], COLUMNS[4], COLUMNS[5], COLUMNS[6], COLUMNS[7], COLUMNS[8], COLUMNS[9], COLUMNS[10], COLUMNS[11]
            );
            for r in results {
                for row in &r.rows {
                    let _ = writeln!(
                        out,
                        "{:>5} {:>5} {:>4} {:<9} {:<6} {:>7.3} {:>7.4} {:>7.3} {:>10.4} {:>10.4} {:>6} {:>8}",
                        r.g, r.h, r.m, row.target, method_name(row.method), row.cvge, row.cvge_se, row.rlen, row.rmse_t, row.rmse_bar, row.used, r.failures
                    );
                }
            }
            for n in notes {
                let _ = writeln!(out, "# {n}");
            }
            out
        }
    }
}
