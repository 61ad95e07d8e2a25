//! Generalised least squares for the fixed effects and working-normal
//! ML/REML estimation of the variance components.
//!
//! Everything is evaluated through per-stratum projections of the response and
//! design columns, so a criterion evaluation costs `O(np + p^3)` and never forms
//! an `n x n` matrix. The optimiser is a damped Newton method on log-variances
//! with analytic gradient and Hessian.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{checked_inverse, dhat, CenteredDesign, CovariateRoles};
use crate::error::{Error, Result};
use crate::kron::{lambdas, loadings, project_strata, Component, LambdaSpectrum, StratumDecomposition, VarianceComponents};
use crate::layout::{BalancedLayout, ResponseTable};

/// Components whose log-variance falls below `ln(PIN_FRACTION * var(y))` are pinned at zero.
pub const PIN_FRACTION: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Method {
    Ml,
    #[default]
    Reml,
}

/// Fixed effects split by covariate role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffects {
    pub intercept: f64,
    pub row: Vec<f64>,
    pub col: Vec<f64>,
    pub interaction: Vec<f64>,
    pub within: Vec<f64>,
}

impl FixedEffects {
    /// Splits a vector in design order `[intercept, row, col, interaction, within]`.
    pub fn from_slice(roles: &CovariateRoles, xi: &[f64]) -> Result<Self> {
        if xi.len() != roles.p() {
            return Err(Error::mismatch("fixed-effect vector", roles.p(), xi.len()));
        }
        let mut at = 1;
        let mut take = |k: usize| {
            let v = xi[at..at + k].to_vec();
            at += k;
            v
        };
        Ok(Self {
            intercept: xi[0],
            row: take(roles.p_a),
            col: take(roles.p_b),
            interaction: take(roles.p_ab),
            within: take(roles.p_w),
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.intercept];
        v.extend(&self.row);
        v.extend(&self.col);
        v.extend(&self.interaction);
        v.extend(&self.within);
        v
    }
}

/// Stratum projections of the design columns.
///
/// Columns other than the intercept are centred. This is an invertible
/// unit-triangular reparameterisation, so GLS estimates, `log det(X^T V^-1 X)`
/// and the projector `P(theta)` are unchanged while cancellation is avoided.
#[derive(Debug, Clone)]
pub struct DesignStrata {
    layout: BalancedLayout,
    columns: Vec<StratumDecomposition>,
    cross: [DMatrix<f64>; 5],
    x_means: Vec<f64>,
}

impl DesignStrata {
    pub fn new(design: &CenteredDesign) -> Result<Self> {
        let layout = design.layout();
        let n = layout.n() as f64;
        let p = design.roles().p();
        let mut x_means = vec![0.0; p];
        let mut columns = Vec::with_capacity(p);
        for c in 0..p {
            let mut col = design.column(c);
            if c > 0 {
                let mean = crate::layout::compensated_sum(col.iter().copied()) / n;
                col.iter_mut().for_each(|v| *v -= mean);
                x_means[c] = mean;
            }
            columns.push(project_strata(&col, &layout));
        }
        let mut cross: [DMatrix<f64>; 5] = std::array::from_fn(|_| DMatrix::zeros(p, p));
        for a in 0..p {
            for b in a..p {
                let ip = columns[a].inner(&columns[b]);
                for s in 0..5 {
                    cross[s][(a, b)] = ip[s];
                    cross[s][(b, a)] = ip[s];
                }
            }
        }
        let strata = Self { layout, columns, cross, x_means };
        strata.check_rank()?;
        Ok(strata)
    }

    fn check_rank(&self) -> Result<()> {
        let xtx: DMatrix<f64> = self.cross.iter().fold(DMatrix::zeros(self.p(), self.p()), |a, s| a + s);
        let d = xtx.diagonal().map(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 });
        let scaled = DMatrix::from_fn(self.p(), self.p(), |a, b| xtx[(a, b)] * d[a] * d[b]);
        let rcond = crate::design::rcond_symmetric(&scaled);
        if rcond < crate::design::RCOND_THRESHOLD {
            return Err(Error::RankDeficient { block: "fixed-effect design".into(), rcond });
        }
        Ok(())
    }

    pub fn layout(&self) -> BalancedLayout {
        self.layout
    }

    pub fn p(&self) -> usize {
        self.columns.len()
    }

    /// `(X^T V^-1 X)^-1` in the centred parameterisation, and `log det(X^T V^-1 X)`.
    fn weighted_inverse(&self, spectrum: &LambdaSpectrum) -> Result<(DMatrix<f64>, f64)> {
        for s in 0..5 {
            if spectrum.mult[s] > 0 && !(spectrum.lambda[s] > 0.0) {
                return Err(Error::SingularCovariance(format!("lambda_{s} = {}", spectrum.lambda[s])));
            }
        }
        let p = self.p();
        let mut a = DMatrix::zeros(p, p);
        for s in 0..5 {
            if spectrum.mult[s] > 0 {
                a += &self.cross[s] / spectrum.lambda[s];
            }
        }
        let chol = a.cholesky().ok_or_else(|| Error::RankDeficient {
            block: "weighted fixed-effect design".into(),
            rcond: 0.0,
        })?;
        let log_det_a = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok((chol.inverse(), log_det_a))
    }

    /// `v - X' coef` on stratum decompositions.
    fn subtract(&self, v: &StratumDecomposition, coef: &DVector<f64>) -> StratumDecomposition {
        let mut r = v.clone();
        for (c, col) in self.columns.iter().enumerate() {
            let b = coef[c];
            if b == 0.0 {
                continue;
            }
            r.within.iter_mut().zip(&col.within).for_each(|(x, v)| *x -= b * v);
            r.interaction.iter_mut().zip(col.interaction.iter()).for_each(|(x, v)| *x -= b * v);
            r.row.iter_mut().zip(&col.row).for_each(|(x, v)| *x -= b * v);
            r.col.iter_mut().zip(&col.col).for_each(|(x, v)| *x -= b * v);
            r.grand -= b * col.grand;
        }
        r
    }

    /// `X'^T P_s v` for every stratum.
    fn score(&self, v: &StratumDecomposition) -> [DVector<f64>; 5] {
        let p = self.p();
        let mut e: [DVector<f64>; 5] = std::array::from_fn(|_| DVector::zeros(p));
        for (c, col) in self.columns.iter().enumerate() {
            let ip = col.inner(v);
            for s in 0..5 {
                e[s][c] = ip[s];
            }
        }
        e
    }

    fn weighted(&self, e: &[DVector<f64>; 5], spectrum: &LambdaSpectrum) -> DVector<f64> {
        (0..5)
            .filter(|&s| spectrum.mult[s] > 0)
            .fold(DVector::zeros(self.p()), |acc, s| acc + &e[s] / spectrum.lambda[s])
    }

    /// `P(theta) v = V^-1 v - V^-1 X (X^T V^-1 X)^-1 X^T V^-1 v` without forming `n x n` matrices.
    pub fn apply_p(&self, theta: &VarianceComponents, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.layout.n() {
            return Err(Error::mismatch("vector", self.layout.n(), v.len()));
        }
        let spectrum = lambdas(theta, &self.layout);
        let (a_inv, _) = self.weighted_inverse(&spectrum)?;
        let dv = project_strata(v, &self.layout);
        let coef = &a_inv * self.weighted(&self.score(&dv), &spectrum);
        let w = spectrum.lambda.map(|l| 1.0 / l);
        Ok(self.subtract(&dv, &coef).combine(&w))
    }

    /// Map from centred to original fixed effects (up to the response mean).
    fn to_original(&self, xi_c: &DVector<f64>, y_mean: f64) -> DVector<f64> {
        let mut xi = xi_c.clone();
        xi[0] = xi_c[0] + y_mean - (1..self.p()).map(|c| self.x_means[c] * xi_c[c]).sum::<f64>();
        xi
    }

    fn original_covariance(&self, cov_c: &DMatrix<f64>) -> DMatrix<f64> {
        let p = self.p();
        let mut l = DMatrix::identity(p, p);
        for c in 1..p {
            l[(0, c)] = -self.x_means[c];
        }
        &l * cov_c * l.transpose()
    }
}

/// Stratum projections of the centred response together with [`DesignStrata`].
#[derive(Debug, Clone)]
pub struct StratumStats {
    layout: BalancedLayout,
    design: DesignStrata,
    y: StratumDecomposition,
    y_mean: f64,
    y_var: f64,
}

impl StratumStats {
    pub fn new(design: &CenteredDesign, table: &ResponseTable) -> Result<Self> {
        Self::with_design(DesignStrata::new(design)?, table)
    }

    /// Reuses design projections across responses.
    pub fn with_design(design: DesignStrata, table: &ResponseTable) -> Result<Self> {
        let layout = design.layout;
        if table.layout() != layout {
            return Err(Error::mismatch(
                "response layout",
                format!("{layout:?}"),
                format!("{:?}", table.layout()),
            ));
        }
        let n = layout.n() as f64;
        let y_raw = table.values();
        let y_mean = crate::layout::compensated_sum(y_raw.iter().copied()) / n;
        let y_c: Vec<f64> = y_raw.iter().map(|v| v - y_mean).collect();
        let y_var = crate::layout::dot(&y_c, &y_c) / n;
        if !(y_var > 0.0) {
            return Err(Error::Precondition("response has no variation".into()));
        }
        Ok(Self { layout, y: project_strata(&y_c, &layout), design, y_mean, y_var })
    }

    pub fn layout(&self) -> BalancedLayout {
        self.layout
    }

    pub fn design(&self) -> &DesignStrata {
        &self.design
    }

    pub fn p(&self) -> usize {
        self.design.p()
    }

    /// Population variance of the response.
    pub fn response_variance(&self) -> f64 {
        self.y_var
    }

    /// GLS solve at a given spectrum.
    pub fn solve(&self, spectrum: &LambdaSpectrum) -> Result<GlsSolution> {
        let (a_inv, log_det_a) = self.design.weighted_inverse(spectrum)?;
        let d = &self.design;
        // normal equations, then one step of residual refinement
        let mut xi_c = &a_inv * d.weighted(&d.score(&self.y), spectrum);
        let mut resid = d.subtract(&self.y, &xi_c);
        let mut e = d.score(&resid);
        let correction = &a_inv * d.weighted(&e, spectrum);
        if correction.iter().any(|v| *v != 0.0) {
            xi_c += correction;
            resid = d.subtract(&self.y, &xi_c);
            e = d.score(&resid);
        }
        let w = spectrum.lambda.map(|l| 1.0 / l);
        let r = resid.sq_norms();
        let q = (0..5).filter(|&s| spectrum.mult[s] > 0).map(|s| w[s] * r[s]).sum();
        Ok(GlsSolution {
            xi: d.to_original(&xi_c, self.y_mean),
            covariance: d.original_covariance(&a_inv),
            a_inv,
            log_det_a,
            log_det_v: spectrum.log_det(),
            q,
            r,
            e,
            weights: w,
            spectrum: *spectrum,
        })
    }

    fn cross_products(&self) -> &[DMatrix<f64>; 5] {
        &self.design.cross
    }
}

/// GLS fit at fixed variance components.
#[derive(Debug, Clone)]
pub struct GlsSolution {
    /// Fixed effects in design order.
    pub xi: DVector<f64>,
    /// `(X^T V^-1 X)^-1` in design order.
    pub covariance: DMatrix<f64>,
    a_inv: DMatrix<f64>,
    pub log_det_a: f64,
    pub log_det_v: f64,
    /// `(y - X xi)^T V^-1 (y - X xi)`.
    pub q: f64,
    /// Squared norm of the residual in each stratum.
    pub r: [f64; 5],
    e: [DVector<f64>; 5],
    weights: [f64; 5],
    pub spectrum: LambdaSpectrum,
}

impl GlsSolution {
    pub fn criterion(&self, method: Method) -> f64 {
        let reml = if method == Method::Reml { self.log_det_a } else { 0.0 };
        -0.5 * (self.log_det_v + reml + self.q)
    }

    /// Gradient and Hessian of the criterion in the precision weights `w_s = 1 / lambda_s`.
    fn weight_derivatives(&self, method: Method, cross: &[DMatrix<f64>; 5]) -> ([f64; 5], [[f64; 5]; 5]) {
        let reml = method == Method::Reml;
        let mult = self.spectrum.mult;
        let w = self.weights;
        let ainv_s: Vec<DMatrix<f64>> = cross.iter().map(|s| &self.a_inv * s).collect();
        let ainv_e: Vec<DVector<f64>> = self.e.iter().map(|e| &self.a_inv * e).collect();
        let mut grad = [0.0; 5];
        let mut hess = [[0.0; 5]; 5];
        for s in 0..5 {
            if mult[s] == 0 {
                continue;
            }
            let tr = if reml { ainv_s[s].trace() } else { 0.0 };
            grad[s] = -0.5 * (-(mult[s] as f64) / w[s] + tr + self.r[s]);
            for t in 0..5 {
                if mult[t] == 0 {
                    continue;
                }
                let mut v = -2.0 * self.e[s].dot(&ainv_e[t]);
                if reml {
                    v -= (&ainv_s[s] * &ainv_s[t]).trace();
                }
                if s == t {
                    v += mult[s] as f64 / (w[s] * w[s]);
                }
                hess[s][t] = -0.5 * v;
            }
        }
        (grad, hess)
    }
}

/// `xi_hat(theta)` for known variance components.
pub fn gls_fixed_effects(theta: &VarianceComponents, design: &CenteredDesign, table: &ResponseTable) -> Result<FixedEffects> {
    theta.validate()?;
    let stats = StratumStats::new(design, table)?;
    let sol = stats.solve(&lambdas(theta, &stats.layout))?;
    FixedEffects::from_slice(&design.roles(), sol.xi.as_slice())
}

/// Restricted log-likelihood up to an additive constant.
pub fn reml_criterion(theta: &VarianceComponents, design: &CenteredDesign, table: &ResponseTable) -> Result<f64> {
    criterion(Method::Reml, theta, design, table)
}

/// Profile log-likelihood up to an additive constant.
pub fn ml_criterion(theta: &VarianceComponents, design: &CenteredDesign, table: &ResponseTable) -> Result<f64> {
    criterion(Method::Ml, theta, design, table)
}

pub fn criterion(method: Method, theta: &VarianceComponents, design: &CenteredDesign, table: &ResponseTable) -> Result<f64> {
    theta.validate()?;
    let stats = StratumStats::new(design, table)?;
    Ok(stats.solve(&lambdas(theta, &stats.layout))?.criterion(method))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Convergence needs `|delta criterion| < criterion_tolerance * (1 + |criterion|)`.
    pub criterion_tolerance: f64,
    /// and a log-variance gradient norm below this.
    pub gradient_tolerance: f64,
    pub start: Option<VarianceComponents>,
    /// Include the interaction variance; defaults to `m > 1`.
    pub interaction: Option<bool>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            criterion_tolerance: 1e-10,
            gradient_tolerance: 1e-6,
            start: None,
            interaction: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub xi: FixedEffects,
    pub theta: VarianceComponents,
    pub criterion: f64,
    pub method: Method,
    pub converged: bool,
    pub iterations: usize,
    /// Components estimated as exactly zero.
    pub boundary: Vec<Component>,
    /// Gradient norm over log-variances of the free components at the solution.
    pub gradient_norm: f64,
    /// `(X^T V^-1 X)^-1` at the estimate, in design order.
    #[serde(skip)]
    pub fixed_covariance: DMatrix<f64>,
    pub interaction: bool,
}

impl FitResult {
    /// Standard errors of the fixed effects in design order.
    pub fn standard_errors(&self) -> Vec<f64> {
        self.fixed_covariance.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    pub fn is_boundary(&self, c: Component) -> bool {
        self.boundary.contains(&c)
    }
}

/// Moment-type starting values from the OLS residual in each stratum.
pub fn starting_values(stats: &StratumStats, interaction: bool) -> VarianceComponents {
    let l = stats.layout;
    let sol = stats
        .solve(&LambdaSpectrum { lambda: [1.0; 5], mult: crate::kron::multiplicities(&l) })
        .expect("unit weights are valid");
    let mult = sol.spectrum.mult;
    let ms: Vec<f64> = (0..5).map(|s| if mult[s] > 0 { sol.r[s] / mult[s] as f64 } else { f64::NAN }).collect();
    let (g, h, m) = (l.g() as f64, l.h() as f64, l.m() as f64);
    let floor = 1e-6 * stats.y_var;
    let error = if l.is_replicated() { ms[0] } else { ms[1] }.max(floor);
    let inter_base = ms[1].max(error);
    let gamma = if interaction { ((ms[1] - ms[0]) / m).max(0.0) } else { 0.0 };
    let small = |v: f64| v.max(0.05 * error);
    VarianceComponents {
        sigma_a2: small((ms[2] - inter_base) / (h * m)),
        sigma_b2: small((ms[3] - inter_base) / (g * m)),
        sigma_g2: if interaction { small(gamma) } else { 0.0 },
        sigma_e2: error,
    }
}

struct Evaluation {
    criterion: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
    theta_grad: [f64; 4],
    solution: GlsSolution,
}

struct Optimizer<'a> {
    stats: &'a StratumStats,
    method: Method,
    loading: [[f64; 5]; 4],
}

fn index(c: Component) -> usize {
    match c {
        Component::Error => 0,
        Component::Row => 1,
        Component::Column => 2,
        Component::Interaction => 3,
    }
}

impl<'a> Optimizer<'a> {
    fn new(stats: &'a StratumStats, method: Method) -> Self {
        let loading = Component::ALL.map(|c| loadings(c, &stats.layout));
        Self { stats, method, loading }
    }

    fn evaluate(&self, theta: &VarianceComponents, active: &[Component]) -> Result<Evaluation> {
        let solution = self.stats.solve(&lambdas(theta, &self.stats.layout))?;
        let criterion = solution.criterion(self.method);
        let (gw, hw) = solution.weight_derivatives(self.method, self.stats.cross_products());
        let w = solution.weights;
        let mult = solution.spectrum.mult;

        let mut theta_grad = [0.0; 4];
        for c in Component::ALL {
            let k = &self.loading[index(c)];
            theta_grad[index(c)] = (0..5).filter(|&s| mult[s] > 0).map(|s| -gw[s] * w[s] * w[s] * k[s]).sum();
        }

        let q = active.len();
        // jac[s][a] = d w_s / d phi_a
        let scaled: Vec<[f64; 5]> = active
            .iter()
            .map(|&c| {
                let k = &self.loading[index(c)];
                std::array::from_fn(|s| k[s] * theta.get(c))
            })
            .collect();
        let jac = |s: usize, a: usize| -w[s] * w[s] * scaled[a][s];
        let mut grad = DVector::zeros(q);
        let mut hess = DMatrix::zeros(q, q);
        for a in 0..q {
            grad[a] = (0..5).map(|s| gw[s] * jac(s, a)).sum();
            for b in 0..q {
                let mut v = 0.0;
                for s in 0..5 {
                    if mult[s] == 0 {
                        continue;
                    }
                    for t in 0..5 {
                        v += jac(s, a) * hw[s][t] * jac(t, b);
                    }
                    let mut second = 2.0 * w[s].powi(3) * scaled[a][s] * scaled[b][s];
                    if a == b {
                        second -= w[s] * w[s] * scaled[a][s];
                    }
                    v += gw[s] * second;
                }
                hess[(a, b)] = v;
            }
        }
        Ok(Evaluation { criterion, grad, hess, theta_grad, solution })
    }

    fn criterion_at(&self, theta: &VarianceComponents) -> Option<f64> {
        self.stats
            .solve(&lambdas(theta, &self.stats.layout))
            .ok()
            .map(|s| s.criterion(self.method))
            .filter(|c| c.is_finite())
    }
}

fn with_log(theta: &VarianceComponents, active: &[Component], phi: &DVector<f64>) -> VarianceComponents {
    let mut t = *theta;
    for (a, &c) in active.iter().enumerate() {
        t.set(c, phi[a].exp());
    }
    t
}

/// Damped Newton step: solve `(-H + mu I) d = grad`, raising `mu` until positive definite.
fn newton_direction(grad: &DVector<f64>, hess: &DMatrix<f64>, mu0: f64) -> (DVector<f64>, f64) {
    let q = grad.len();
    let neg = -hess;
    let scale = neg.diagonal().iter().fold(1e-12f64, |a, b| a.max(b.abs()));
    let mut mu = mu0;
    loop {
        let m = &neg + DMatrix::identity(q, q) * mu;
        if let Some(ch) = m.cholesky() {
            return (ch.solve(grad), mu);
        }
        mu = if mu == 0.0 { 1e-8 * scale } else { mu * 10.0 };
    }
}

/// Maximises the ML or REML criterion over the variance components.
pub fn fit(method: Method, design: &CenteredDesign, table: &ResponseTable, options: &FitOptions) -> Result<FitResult> {
    let stats = StratumStats::new(design, table)?;
    fit_stats(method, &stats, &design.roles(), options)
}

/// [`fit`] on precomputed stratum statistics.
pub fn fit_stats(method: Method, stats: &StratumStats, roles: &CovariateRoles, options: &FitOptions) -> Result<FitResult> {
    let layout = stats.layout;
    let interaction = options.interaction.unwrap_or(layout.is_replicated());
    if interaction && !layout.is_replicated() {
        return Err(Error::Precondition(
            "the interaction variance is not identifiable without replicates (m = 1)".into(),
        ));
    }
    let admissible: Vec<Component> = if interaction {
        vec![Component::Error, Component::Row, Component::Column, Component::Interaction]
    } else {
        vec![Component::Error, Component::Row, Component::Column]
    };
    let mut theta = match options.start {
        Some(t) => {
            t.validate()?;
            t
        }
        None => starting_values(stats, interaction),
    };
    if !interaction {
        theta.sigma_g2 = 0.0;
    }
    let opt = Optimizer::new(stats, method);
    let floor = (PIN_FRACTION * stats.y_var).ln();
    let mut pinned: Vec<Component> = admissible
        .iter()
        .copied()
        .filter(|&c| c != Component::Error && theta.get(c) <= 0.0)
        .collect();
    let mut iterations = 0usize;
    let mut pin_cycles = 0usize;
    let mut best = theta;
    let mut best_crit = f64::NEG_INFINITY;
    let mut last_grad_norm = f64::INFINITY;

    loop {
        let active: Vec<Component> = admissible.iter().copied().filter(|c| !pinned.contains(c)).collect();
        let mut phi = DVector::from_iterator(active.len(), active.iter().map(|&c| theta.get(c).ln()));
        let mut mu = 0.0;
        let mut last_delta = f64::INFINITY;
        let mut converged = false;
        let mut eval = opt.evaluate(&theta, &active)?;

        while iterations < options.max_iterations {
            iterations += 1;
            let gnorm = eval.grad.norm();
            last_grad_norm = gnorm;
            if eval.criterion > best_crit {
                best_crit = eval.criterion;
                best = theta;
            }
            let tol = options.criterion_tolerance * (1.0 + eval.criterion.abs());
            if gnorm < options.gradient_tolerance && last_delta.abs() < tol {
                converged = true;
                break;
            }
            let (mut dir, used_mu) = newton_direction(&eval.grad, &eval.hess, mu);
            let len = dir.amax();
            if len > 5.0 {
                dir *= 5.0 / len;
            }
            let slope = eval.grad.dot(&dir);
            // the Newton gain is below what the criterion can resolve
            if used_mu == 0.0 && 0.5 * slope < 1e-3 * tol && gnorm < options.gradient_tolerance * 1e3 {
                converged = true;
                break;
            }
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..50 {
                let trial_phi = &phi + &dir * step;
                let trial = with_log(&theta, &active, &trial_phi);
                if let Some(c) = opt.criterion_at(&trial) {
                    if c >= eval.criterion + 1e-4 * step * slope {
                        accepted = Some((trial_phi, trial, c));
                        break;
                    }
                }
                step *= 0.5;
            }
            match accepted {
                Some((p, t, c)) => {
                    last_delta = c - eval.criterion;
                    phi = p;
                    theta = t;
                    mu = if step == 1.0 { used_mu * 0.1 } else { used_mu };
                    if mu < 1e-14 {
                        mu = 0.0;
                    }
                }
                None => {
                    // no ascent possible along the damped direction: at numerical optimum
                    if gnorm < options.gradient_tolerance * 1e3 {
                        converged = true;
                        break;
                    }
                    mu = if used_mu == 0.0 { 1e-6 } else { used_mu * 100.0 };
                    continue;
                }
            }
            // components collapsing towards zero are pinned
            let collapsing: Vec<Component> = active
                .iter()
                .enumerate()
                .filter(|&(a, &c)| c != Component::Error && phi[a] < floor)
                .map(|(_, &c)| c)
                .collect();
            if !collapsing.is_empty() {
                for c in collapsing {
                    theta.set(c, 0.0);
                    pinned.push(c);
                }
                break;
            }
            eval = opt.evaluate(&theta, &active)?;
        }

        if iterations >= options.max_iterations && !converged {
            return Err(Error::NonConvergence {
                iterations,
                criterion: best_crit,
                gradient_norm: last_grad_norm,
                best,
            });
        }
        if !converged {
            // a component was just pinned: continue with the reduced set
            continue;
        }

        // boundary pass: pin small components when zero is at least as good
        let crit = eval.criterion;
        let tol = options.criterion_tolerance * (1.0 + crit.abs());
        let mut changed = false;
        if pin_cycles < 4 {
            for &c in active.iter().filter(|&&c| c != Component::Error) {
                let mut probe = theta;
                probe.set(c, 0.0);
                if let Some(z) = opt.criterion_at(&probe) {
                    if z >= crit - tol {
                        theta = probe;
                        pinned.push(c);
                        changed = true;
                        break;
                    }
                }
            }
            if !changed {
                // release pinned components whose derivative at zero is positive
                let scale = stats.y_var;
                let release: Vec<Component> = pinned
                    .iter()
                    .copied()
                    .filter(|&c| eval.theta_grad[index(c)] * scale > options.gradient_tolerance.max(tol))
                    .collect();
                if let Some(&c) = release.first() {
                    pinned.retain(|&p| p != c);
                    theta.set(c, 1e-3 * theta.sigma_e2.max(PIN_FRACTION * scale));
                    changed = true;
                }
            }
        }
        if changed {
            pin_cycles += 1;
            continue;
        }

        let sol = &eval.solution;
        let mut boundary: Vec<Component> = pinned.clone();
        boundary.sort_by_key(|&c| index(c));
        return Ok(FitResult {
            xi: FixedEffects::from_slice(roles, sol.xi.as_slice())?,
            theta,
            criterion: crit,
            method,
            converged: true,
            iterations,
            boundary,
            gradient_norm: eval.grad.norm(),
            fixed_covariance: sol.covariance.clone(),
            interaction,
        });
    }
}

/// Realised random effects of a simulated data set.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffects {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Cell effects in row-major order (`i * h + j`); empty for the additive model.
    pub gamma: Vec<f64>,
    /// Flat-order errors.
    pub e: Vec<f64>,
}

/// How the intercept error is attributed in its linear approximation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InterceptRule {
    /// Row and column contributions (`g / h` bounded away from 0 and infinity).
    #[default]
    Both,
    /// Rows only (`g / h -> 0`).
    RowOnly,
    /// Columns only (`g / h -> infinity`).
    ColumnOnly,
}

/// Leading-order errors of the estimators implied by the realised random effects.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearApproximation {
    pub xi: FixedEffects,
    pub theta: VarianceComponents,
}

/// Linear approximations to `estimate - truth` for every parameter.
///
/// `theta` errors are reported in `LinearApproximation::theta` as signed
/// differences (they may be negative, so they bypass validation).
pub fn linear_approx_parameter_errors(
    design: &CenteredDesign,
    effects: &RandomEffects,
    truth: &VarianceComponents,
    rule: InterceptRule,
) -> Result<LinearApproximation> {
    let l = design.layout();
    let (g, h, n) = (l.g(), l.h(), l.n());
    if effects.alpha.len() != g || effects.beta.len() != h || effects.e.len() != n {
        return Err(Error::mismatch(
            "random effects (alpha, beta, e)",
            format!("({g}, {h}, {n})"),
            format!("({}, {}, {})", effects.alpha.len(), effects.beta.len(), effects.e.len()),
        ));
    }
    let replicated = l.is_replicated();
    if replicated && !effects.gamma.is_empty() && effects.gamma.len() != l.cells() {
        return Err(Error::mismatch("interaction effects", l.cells(), effects.gamma.len()));
    }
    let gamma: Vec<f64> = if effects.gamma.is_empty() { vec![0.0; l.cells()] } else { effects.gamma.clone() };
    let d = dhat(design);
    let mean_sq = |v: &[f64], s2: f64| v.iter().map(|x| x * x - s2).sum::<f64>() / v.len() as f64;

    let slope = |xc: &DMatrix<f64>, dm: &DMatrix<f64>, z: &[f64], name: &str| -> Result<(Vec<f64>, DMatrix<f64>)> {
        let dinv = checked_inverse(dm, name)?;
        if xc.ncols() == 0 {
            return Ok((vec![], dinv));
        }
        let zv = DVector::from_column_slice(z);
        let v = &dinv * (xc.transpose() * zv) / z.len() as f64;
        Ok((v.iter().copied().collect(), dinv))
    };
    let (row, d1inv) = slope(&design.row_c, &d.row, &effects.alpha, "row")?;
    let (col, d2inv) = slope(&design.col_c, &d.col, &effects.beta, "column")?;
    let (interaction, within) = if replicated {
        let (s3, _) = slope(&design.interaction.cell, &d.interaction, &gamma, "interaction")?;
        let (s4, _) = slope(&design.within_c, &d.within, &effects.e, "within-cell")?;
        (s3, s4)
    } else {
        let (s3, _) = slope(&design.within.cell, &d.within, &effects.e, "within-cell")?;
        (vec![], s3)
    };

    let contribution = |xc: &DMatrix<f64>, mean: &DVector<f64>, dinv: &DMatrix<f64>, z: &[f64]| -> f64 {
        let lever: DVector<f64> = if xc.ncols() == 0 {
            DVector::zeros(z.len())
        } else {
            xc * (dinv * mean)
        };
        z.iter().zip(lever.iter()).map(|(zi, li)| (1.0 - li) * zi).sum::<f64>() / z.len() as f64
    };
    let a_part = contribution(&design.row_c, &design.row_mean, &d1inv, &effects.alpha);
    let b_part = contribution(&design.col_c, &design.col_mean, &d2inv, &effects.beta);
    let intercept = match rule {
        InterceptRule::Both => a_part + b_part,
        InterceptRule::RowOnly => a_part,
        InterceptRule::ColumnOnly => b_part,
    };

    Ok(LinearApproximation {
        xi: FixedEffects { intercept, row, col, interaction, within },
        theta: VarianceComponents {
            sigma_a2: mean_sq(&effects.alpha, truth.sigma_a2),
            sigma_b2: mean_sq(&effects.beta, truth.sigma_b2),
            sigma_g2: if replicated { mean_sq(&gamma, truth.sigma_g2) } else { 0.0 },
            sigma_e2: mean_sq(&effects.e, truth.sigma_e2),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::CovariateBlocks;
    use crate::kron::dense_v;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn random_problem(seed: u64, g: usize, h: usize, m: usize, theta: &VarianceComponents) -> (CenteredDesign, ResponseTable) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = BalancedLayout::new(g, h, m).unwrap();
        let mut blocks = CovariateBlocks::empty(&l)
            .with_row(DMatrix::from_fn(g, 1, |_, _| normal(&mut rng)), vec![])
            .with_col(DMatrix::from_fn(h, 1, |_, _| normal(&mut rng)), vec![]);
        blocks = blocks.with_within(DMatrix::from_fn(l.n(), 1, |_, _| normal(&mut rng)), vec![]);
        let design = CenteredDesign::new(&l, blocks).unwrap();
        let alpha: Vec<f64> = (0..g).map(|_| theta.sigma_a2.sqrt() * normal(&mut rng)).collect();
        let beta: Vec<f64> = (0..h).map(|_| theta.sigma_b2.sqrt() * normal(&mut rng)).collect();
        let gamma: Vec<f64> = (0..g * h).map(|_| theta.sigma_g2.sqrt() * normal(&mut rng)).collect();
        let mu = design.mean(&[1.0, 2.0, -1.0, 0.5]);
        let y: Vec<f64> = (0..l.n())
            .map(|p| {
                let (i, j, _) = l.unflatten(p).unwrap();
                mu[p] + alpha[i] + beta[j] + gamma[i * h + j] + theta.sigma_e2.sqrt() * normal(&mut rng)
            })
            .collect();
        (design, ResponseTable::new(l, y).unwrap())
    }

    struct Dense {
        xi: DVector<f64>,
        reml: f64,
        ml: f64,
    }

    fn dense_oracle(theta: &VarianceComponents, design: &CenteredDesign, table: &ResponseTable) -> Dense {
        let v = dense_v(theta, &design.layout()).unwrap();
        let chol = v.clone().cholesky().unwrap();
        let vinv = chol.inverse();
        let x = design.design_matrix();
        let y = DVector::from_column_slice(table.values());
        let a = x.transpose() * &vinv * &x;
        let xi = a.clone().lu().solve(&(x.transpose() * &vinv * &y)).unwrap();
        let r = &y - &x * &xi;
        let q = (r.transpose() * &vinv * &r)[(0, 0)];
        let ldv = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let lda = a.determinant().ln();
        Dense { xi, reml: -0.5 * (ldv + lda + q), ml: -0.5 * (ldv + q) }
    }

    #[test]
    fn intercept_only_gls_is_grand_mean() {
        let l = BalancedLayout::new(3, 4, 2).unwrap();
        let y: Vec<f64> = (0..l.n()).map(|p| (p as f64).sin() * 3.0 + 1.0).collect();
        let ybar = y.iter().sum::<f64>() / l.n() as f64;
        let table = ResponseTable::new(l, y).unwrap();
        let d = CenteredDesign::intercept_only(&l);
        for t in [(1.0, 2.0, 0.5, 1.0), (0.0, 0.0, 0.0, 3.0), (9.0, 0.1, 4.0, 0.2)] {
            let theta = VarianceComponents::new(t.0, t.1, t.2, t.3).unwrap();
            let xi = gls_fixed_effects(&theta, &d, &table).unwrap();
            assert_relative_eq!(xi.intercept, ybar, epsilon = 1e-12);
        }
    }

    #[test]
    fn gls_and_criteria_match_dense() {
        for (m, seed) in [(1usize, 1u64), (2, 2), (3, 3)] {
            let truth = VarianceComponents::new(1.0, 2.0, if m > 1 { 0.7 } else { 0.0 }, 1.5).unwrap();
            let (design, table) = random_problem(seed, 3, 3, m, &truth);
            for theta in [truth, VarianceComponents::new(0.0, 0.0, 0.0, 1.0).unwrap(), VarianceComponents::new(3.0, 0.2, 0.4, 0.9).unwrap()] {
                let dense = dense_oracle(&theta, &design, &table);
                let xi = gls_fixed_effects(&theta, &design, &table).unwrap().to_vec();
                for (a, b) in xi.iter().zip(dense.xi.iter()) {
                    assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0), "{a} vs {b}");
                }
                assert_relative_eq!(reml_criterion(&theta, &design, &table).unwrap(), dense.reml, epsilon = 1e-8);
                assert_relative_eq!(ml_criterion(&theta, &design, &table).unwrap(), dense.ml, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn residual_is_v_orthogonal_to_design() {
        let truth = VarianceComponents::new(1.0, 2.0, 0.5, 1.5).unwrap();
        let (design, table) = random_problem(5, 4, 3, 2, &truth);
        let xi = gls_fixed_effects(&truth, &design, &table).unwrap().to_vec();
        let mu = design.mean(&xi);
        let r: Vec<f64> = table.values().iter().zip(&mu).map(|(y, m)| y - m).collect();
        let vr = crate::kron::apply_v_inv(&truth, &design.layout(), &r).unwrap();
        for c in 0..design.roles().p() {
            let col = design.column(c);
            let ip: f64 = col.iter().zip(&vr).map(|(a, b)| a * b).sum();
            assert!(ip.abs() < 1e-8, "column {c}: {ip}");
        }
    }

    #[test]
    fn criteria_translation_invariant() {
        let truth = VarianceComponents::new(1.0, 2.0, 0.5, 1.5).unwrap();
        let (design, table) = random_problem(6, 4, 4, 2, &truth);
        let shifted = ResponseTable::new(table.layout(), table.values().iter().map(|v| v + 37.5).collect()).unwrap();
        for method in [Method::Reml, Method::Ml] {
            let a = criterion(method, &truth, &design, &table).unwrap();
            let b = criterion(method, &truth, &design, &shifted).unwrap();
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn scaling_error_variance_lowers_criteria() {
        let truth = VarianceComponents::new(2.0, 3.0, 1.0, 1.0).unwrap();
        let (design, table) = random_problem(7, 8, 8, 3, &truth);
        for method in [Method::Reml, Method::Ml] {
            let fit = fit(method, &design, &table, &FitOptions::default()).unwrap();
            let mut worse = fit.theta;
            worse.sigma_e2 *= 10.0;
            assert!(criterion(method, &worse, &design, &table).unwrap() < fit.criterion);
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let truth = VarianceComponents::new(1.0, 2.0, 0.5, 1.5).unwrap();
        let (design, table) = random_problem(8, 4, 3, 2, &truth);
        let stats = StratumStats::new(&design, &table).unwrap();
        for method in [Method::Reml, Method::Ml] {
            let opt = Optimizer::new(&stats, method);
            let active = Component::ALL.to_vec();
            let theta = VarianceComponents::new(0.8, 1.7, 0.6, 1.2).unwrap();
            let eval = opt.evaluate(&theta, &active).unwrap();
            let phi0 = DVector::from_iterator(4, active.iter().map(|&c| theta.get(c).ln()));
            let f = |phi: &DVector<f64>| opt.evaluate(&with_log(&theta, &active, phi), &active).unwrap();
            let step = 1e-5;
            for a in 0..4 {
                let mut up = phi0.clone();
                up[a] += step;
                let mut dn = phi0.clone();
                dn[a] -= step;
                let (fu, fd) = (f(&up), f(&dn));
                let g = (fu.criterion - fd.criterion) / (2.0 * step);
                assert!((g - eval.grad[a]).abs() < 1e-6 * (1.0 + g.abs()), "grad {a}: {g} vs {}", eval.grad[a]);
                for b in 0..4 {
                    let hfd = (fu.grad[b] - fd.grad[b]) / (2.0 * step);
                    assert!((hfd - eval.hess[(a, b)]).abs() < 1e-5 * (1.0 + hfd.abs()), "hess {a},{b}: {hfd} vs {}", eval.hess[(a, b)]);
                }
            }
        }
    }

    #[test]
    fn fit_reaches_stationary_point_and_beats_grid() {
        let truth = VarianceComponents::new(2.0, 3.0, 1.0, 1.0).unwrap();
        let (design, table) = random_problem(9, 10, 10, 3, &truth);
        let fit = fit(Method::Reml, &design, &table, &FitOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.gradient_norm < 1e-6);
        let factors = [0.8, 0.9, 1.0, 1.1, 1.25];
        for &a in &factors {
            for &b in &factors {
                for &c in &factors {
                    for &e in &factors {
                        let t = VarianceComponents::new(
                            fit.theta.sigma_a2 * a,
                            fit.theta.sigma_b2 * b,
                            fit.theta.sigma_g2 * c,
                            fit.theta.sigma_e2 * e,
                        )
                        .unwrap();
                        assert!(reml_criterion(&t, &design, &table).unwrap() <= fit.criterion + 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn multistart_agrees() {
        let truth = VarianceComponents::new(9.0, 49.0, 36.0, 81.0).unwrap();
        let (design, table) = random_problem(10, 10, 10, 5, &truth);
        let base = fit(Method::Reml, &design, &table, &FitOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..5 {
            let start = VarianceComponents::new(
                rng.random_range(0.5..200.0),
                rng.random_range(0.5..200.0),
                rng.random_range(0.5..200.0),
                rng.random_range(0.5..200.0),
            )
            .unwrap();
            let other = fit(Method::Reml, &design, &table, &FitOptions { start: Some(start), ..Default::default() }).unwrap();
            assert!((other.criterion - base.criterion).abs() < 1e-6, "{} vs {}", other.criterion, base.criterion);
        }
    }

    #[test]
    fn scale_equivariance() {
        let truth = VarianceComponents::new(2.0, 3.0, 1.0, 1.0).unwrap();
        let (design, table) = random_problem(11, 8, 9, 2, &truth);
        let c = 3.5;
        let scaled = ResponseTable::new(table.layout(), table.values().iter().map(|v| v * c).collect()).unwrap();
        let a = fit(Method::Reml, &design, &table, &FitOptions::default()).unwrap();
        let b = fit(Method::Reml, &design, &scaled, &FitOptions::default()).unwrap();
        for comp in Component::ALL {
            let (x, y) = (a.theta.get(comp) * c * c, b.theta.get(comp));
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{comp:?}: {x} vs {y}");
        }
        for (x, y) in a.xi.to_vec().iter().zip(b.xi.to_vec()) {
            assert!((x * c - y).abs() <= 1e-6 * y.abs().max(1.0));
        }
    }

    #[test]
    fn degenerate_data_pins_components() {
        let l = BalancedLayout::new(6, 5, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let blocks = CovariateBlocks::empty(&l)
            .with_row(DMatrix::from_fn(6, 1, |_, _| normal(&mut rng)), vec![])
            .with_within(DMatrix::from_fn(l.n(), 1, |_, _| normal(&mut rng)), vec![]);
        let design = CenteredDesign::new(&l, blocks).unwrap();
        let mu = design.mean(&[2.0, 1.5, -0.7]);
        let y: Vec<f64> = mu.iter().map(|v| v + 1e-8 * normal(&mut rng)).collect();
        let table = ResponseTable::new(l, y).unwrap();
        let fit = fit(Method::Reml, &design, &table, &FitOptions::default()).unwrap();
        for c in [Component::Row, Component::Column, Component::Interaction] {
            assert!(fit.theta.get(c) < 1e-14, "{c:?} = {}", fit.theta.get(c));
        }
        assert!(!fit.boundary.is_empty());
        assert!(fit.theta.sigma_e2 > 0.0 && fit.theta.sigma_e2 < 1e-14);
    }

    #[test]
    fn interaction_without_replicates_rejected() {
        let truth = VarianceComponents::new(1.0, 1.0, 0.0, 1.0).unwrap();
        let (design, table) = random_problem(13, 4, 4, 1, &truth);
        let r = fit(Method::Reml, &design, &table, &FitOptions { interaction: Some(true), ..Default::default() });
        assert!(matches!(r, Err(Error::Precondition(_))));
        let f = fit(Method::Reml, &design, &table, &FitOptions::default()).unwrap();
        assert_eq!(f.theta.sigma_g2, 0.0);
        assert!(!f.interaction);
    }

    #[test]
    fn non_convergence_carries_best_iterate() {
        let truth = VarianceComponents::new(1.0, 2.0, 0.5, 1.5).unwrap();
        let (design, table) = random_problem(14, 5, 5, 2, &truth);
        let opts = FitOptions { max_iterations: 1, start: Some(VarianceComponents::new(50.0, 50.0, 50.0, 50.0).unwrap()), ..Default::default() };
        match fit(Method::Reml, &design, &table, &opts) {
            Err(Error::NonConvergence { best, iterations, .. }) => {
                assert_eq!(iterations, 1);
                assert!(best.validate().is_ok());
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn rank_deficient_design_rejected() {
        let l = BalancedLayout::new(4, 3, 1).unwrap();
        let x = DMatrix::from_element(4, 1, 2.0);
        let design = CenteredDesign::new(&l, CovariateBlocks::empty(&l).with_row(x, vec![])).unwrap();
        let table = ResponseTable::new(l, (0..12).map(|v| v as f64).collect()).unwrap();
        assert!(matches!(StratumStats::new(&design, &table), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn linear_approximation_trivial_cases() {
        let truth = VarianceComponents::new(1.0, 2.0, 0.5, 1.5).unwrap();
        let (design, _) = random_problem(15, 5, 4, 2, &truth);
        let l = design.layout();
        let zero = RandomEffects { alpha: vec![0.0; 5], beta: vec![0.0; 4], gamma: vec![0.0; 20], e: vec![0.0; l.n()] };
        let zero_truth = VarianceComponents { sigma_a2: 0.0, sigma_b2: 0.0, sigma_g2: 0.0, sigma_e2: 0.0 };
        let a = linear_approx_parameter_errors(&design, &zero, &zero_truth, InterceptRule::Both).unwrap();
        assert!(a.xi.to_vec().iter().all(|v| *v == 0.0));
        assert_eq!(a.theta, zero_truth);

        let c = 1.7;
        let constant = RandomEffects { alpha: vec![c; 5], ..zero };
        let a = linear_approx_parameter_errors(&design, &constant, &truth, InterceptRule::Both).unwrap();
        assert_relative_eq!(a.theta.sigma_a2, c * c - truth.sigma_a2, epsilon = 1e-12);
        assert!(a.xi.row[0].abs() < 1e-12);
    }
}
