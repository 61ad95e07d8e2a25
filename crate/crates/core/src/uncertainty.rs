//! Prediction mean squared errors, joint error covariances and prediction intervals.
//!
//! Three MSE estimators are provided:
//! * LSW: closed-form asymptotic MSE from the leverage of each effect;
//! * KH and PR: second-order expansions that add the cost of estimating
//!   `theta`. Both are evaluated matrix-free through the stratum algebra, so
//!   the cost is `O(n p)` per target, but they are still gated by a size limit.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::design::{checked_inverse, CenteredDesign, Factor};
use crate::error::{Error, Result};
use crate::estimate::{DesignStrata, FitResult};
use crate::kron::{apply_v, apply_v_inv, apply_zzt, lambdas, loadings, Component, VarianceComponents};
use crate::layout::{dot, BalancedLayout};

/// Default largest `n` for which KH and PR are evaluated.
pub const SECOND_ORDER_LIMIT: usize = 5000;

/// A random effect whose prediction error is of interest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    /// `alpha_i`
    Row(usize),
    /// `beta_j`
    Column(usize),
    /// `gamma_ij`
    Interaction(usize, usize),
}

impl Target {
    fn check(&self, layout: &BalancedLayout) -> Result<()> {
        let (i, j) = match *self {
            Target::Row(i) => (Some(i), None),
            Target::Column(j) => (None, Some(j)),
            Target::Interaction(i, j) => (Some(i), Some(j)),
        };
        if let Some(i) = i.filter(|&i| i >= layout.g()) {
            return Err(Error::IndexOutOfRange { axis: "row", index: i, size: layout.g() });
        }
        if let Some(j) = j.filter(|&j| j >= layout.h()) {
            return Err(Error::IndexOutOfRange { axis: "column", index: j, size: layout.h() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MseMethod {
    #[default]
    Lsw,
    Kh,
    Pr,
}

/// MSE estimates for one target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MseEstimate {
    pub target: Target,
    pub lsw: f64,
    pub kh: Option<f64>,
    pub pr: Option<f64>,
}

impl MseEstimate {
    pub fn get(&self, method: MseMethod) -> Option<f64> {
        match method {
            MseMethod::Lsw => Some(self.lsw),
            MseMethod::Kh => self.kh,
            MseMethod::Pr => self.pr,
        }
    }
}

/// Diagonal of the leverage matrix `1 + x_s(c)^T D^-1 x_s(c)`.
pub fn leverage_diagonal(design: &CenteredDesign, factor: Factor) -> Result<Vec<f64>> {
    let (xc, d) = design.leverage_block(factor);
    let name = if factor == Factor::Row { "row" } else { "column" };
    let dinv = checked_inverse(&d, name)?;
    Ok((0..xc.nrows())
        .map(|s| {
            let x = xc.row(s).transpose();
            1.0 + (x.transpose() * &dinv * &x)[(0, 0)]
        })
        .collect())
}

/// Closed-form asymptotic MSE with cached leverages.
#[derive(Debug, Clone)]
pub struct LswEstimator {
    theta: VarianceComponents,
    layout: BalancedLayout,
    interaction: bool,
    row: Vec<f64>,
    col: Vec<f64>,
}

impl LswEstimator {
    pub fn new(theta: &VarianceComponents, interaction: bool, design: &CenteredDesign) -> Result<Self> {
        theta.validate()?;
        if !interaction && theta.sigma_g2 != 0.0 {
            return Err(Error::Precondition("additive model needs sigma_gamma^2 = 0".into()));
        }
        Ok(Self {
            theta: *theta,
            layout: design.layout(),
            interaction,
            row: leverage_diagonal(design, Factor::Row)?,
            col: leverage_diagonal(design, Factor::Column)?,
        })
    }

    pub fn from_fit(fit: &FitResult, design: &CenteredDesign) -> Result<Self> {
        Self::new(&fit.theta, fit.interaction, design)
    }

    pub fn mse(&self, target: Target) -> Result<f64> {
        target.check(&self.layout)?;
        let (g, h, m) = (self.layout.g() as f64, self.layout.h() as f64, self.layout.m() as f64);
        let t = &self.theta;
        // the additive model's within-cell noise plays the role of sigma_gamma^2
        let (row_noise, col_noise) = if self.interaction {
            (t.sigma_g2 / h, t.sigma_g2 / g)
        } else {
            (t.sigma_e2 / (h * m), t.sigma_e2 / (g * m))
        };
        Ok(match target {
            Target::Row(i) => row_noise + t.sigma_a2 * self.row[i] / g,
            Target::Column(j) => col_noise + t.sigma_b2 * self.col[j] / h,
            Target::Interaction(..) => {
                if !self.interaction {
                    return Err(Error::Precondition("additive model has no interaction effects".into()));
                }
                t.sigma_e2 / m + (1.0 / g + 1.0 / h) * t.sigma_g2
            }
        })
    }
}

/// LSW MSE at the fitted parameters.
pub fn mse_lsw(fit: &FitResult, design: &CenteredDesign, target: Target) -> Result<f64> {
    LswEstimator::from_fit(fit, design)?.mse(target)
}

/// Variance components that enter the second-order expansions.
pub fn active_components(interaction: bool) -> Vec<Component> {
    if interaction {
        Component::ALL.to_vec()
    } else {
        vec![Component::Error, Component::Row, Component::Column]
    }
}

/// `2 tr(V^-1 Z_s Z_s^T V^-1 Z_t Z_t^T)` over the given components, from the spectrum.
pub fn trace_matrix(theta: &VarianceComponents, layout: &BalancedLayout, components: &[Component]) -> Result<DMatrix<f64>> {
    let spectrum = lambdas(theta, layout);
    for (s, (&l, &k)) in spectrum.lambda.iter().zip(&spectrum.mult).enumerate() {
        if k > 0 && !(l > 0.0) {
            return Err(Error::SingularCovariance(format!("lambda_{s} = {l}")));
        }
    }
    let load: Vec<[f64; 5]> = components.iter().map(|&c| loadings(c, layout)).collect();
    let q = components.len();
    Ok(DMatrix::from_fn(q, q, |s, t| {
        2.0 * (0..5)
            .map(|k| spectrum.mult[k] as f64 * load[s][k] * load[t][k] / (spectrum.lambda[k] * spectrum.lambda[k]))
            .sum::<f64>()
    }))
}

/// Asymptotic covariance of the variance-component estimates.
///
/// This is the inverse Fisher information `{tr(V^-1 Z_s Z_s^T V^-1 Z_t Z_t^T) / 2}^-1`, i.e. four times
/// the inverse of [`trace_matrix`].
pub fn info_matrix_b(theta: &VarianceComponents, layout: &BalancedLayout, components: &[Component]) -> Result<DMatrix<f64>> {
    let t = trace_matrix(theta, layout, components)?;
    let rcond = crate::design::rcond_symmetric(&t);
    if rcond < crate::design::RCOND_THRESHOLD {
        return Err(Error::RankDeficient { block: "variance-component information".into(), rcond });
    }
    t.cholesky()
        .map(|c| c.inverse() * 4.0)
        .ok_or_else(|| Error::RankDeficient { block: "variance-component information".into(), rcond })
}

/// Parts of a second-order MSE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SecondOrderMse {
    /// MSE of the BLUP at known parameters.
    pub m1: f64,
    /// Correction for estimating the variance components (before any multiplier).
    pub m2: f64,
    pub total: f64,
}

/// KH and PR estimators, evaluated without forming `n x n` matrices.
#[derive(Debug, Clone)]
pub struct SecondOrder {
    strata: DesignStrata,
    theta: VarianceComponents,
    components: Vec<Component>,
    b: DMatrix<f64>,
}

impl SecondOrder {
    /// `max_n` bounds the problem size; pass [`SECOND_ORDER_LIMIT`] for the default.
    pub fn new(theta: &VarianceComponents, interaction: bool, design: &CenteredDesign, max_n: usize) -> Result<Self> {
        Self::with_strata(theta, interaction, DesignStrata::new(design)?, max_n)
    }

    pub fn with_strata(theta: &VarianceComponents, interaction: bool, strata: DesignStrata, max_n: usize) -> Result<Self> {
        theta.validate()?;
        let layout = strata.layout();
        if layout.n() > max_n {
            return Err(Error::ResourceLimit(format!(
                "KH/PR limited to n <= {max_n} (n = {}); use the LSW estimator",
                layout.n()
            )));
        }
        if interaction && !layout.is_replicated() {
            return Err(Error::Precondition("interaction model needs m >= 2".into()));
        }
        let components = active_components(interaction);
        let b = info_matrix_b(theta, &layout, &components)?;
        Ok(Self { strata, theta: *theta, components, b })
    }

    pub fn from_fit(fit: &FitResult, design: &CenteredDesign, max_n: usize) -> Result<Self> {
        Self::new(&fit.theta, fit.interaction, design, max_n)
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    fn layout(&self) -> BalancedLayout {
        self.strata.layout()
    }

    /// Indicator of the observations carrying the target and its variance component.
    fn selector(&self, target: Target) -> Result<(Vec<f64>, Component)> {
        let l = self.layout();
        target.check(&l)?;
        let (component, hit): (Component, Box<dyn Fn(usize, usize) -> bool>) = match target {
            Target::Row(i) => (Component::Row, Box::new(move |a, _| a == i)),
            Target::Column(j) => (Component::Column, Box::new(move |_, b| b == j)),
            Target::Interaction(..) => {
                return Err(Error::Precondition("KH/PR are available for row and column effects only".into()))
            }
        };
        let mut c = vec![0.0; l.n()];
        for i in 0..l.g() {
            for j in 0..l.h() {
                if hit(i, j) {
                    for k in 0..l.m() {
                        c[l.index(i, j, k)] = 1.0;
                    }
                }
            }
        }
        Ok((c, component))
    }

    /// `w` with `BLUP(theta) = w^T y`.
    pub fn blup_functional(&self, target: Target, theta: &VarianceComponents) -> Result<Vec<f64>> {
        let (c, comp) = self.selector(target)?;
        let q = self.strata.apply_p(theta, &c)?;
        Ok(q.into_iter().map(|v| theta.get(comp) * v).collect())
    }

    /// `M_1 = sigma^2 - sigma^4 c^T P c`.
    pub fn m1(&self, target: Target) -> Result<f64> {
        let (c, comp) = self.selector(target)?;
        let s = self.theta.get(comp);
        let q = self.strata.apply_p(&self.theta, &c)?;
        Ok(s - s * s * dot(&c, &q))
    }

    /// `l_s` with `d BLUP / d theta_s = l_s^T y`, one per active component.
    pub fn kh_derivatives(&self, target: Target) -> Result<Vec<Vec<f64>>> {
        let (c, comp) = self.selector(target)?;
        let l = self.layout();
        let s2 = self.theta.get(comp);
        let q = self.strata.apply_p(&self.theta, &c)?;
        self.components
            .iter()
            .map(|&s| {
                let pzq = self.strata.apply_p(&self.theta, &apply_zzt(s, &l, &q)?)?;
                let delta = if s == comp { 1.0 } else { 0.0 };
                Ok(q.iter().zip(&pzq).map(|(a, b)| delta * a - s2 * b).collect())
            })
            .collect()
    }

    /// Rows `Gamma_s`, the derivatives of `sigma^2 c^T V^-1` in `theta_s`.
    pub fn pr_rows(&self, target: Target) -> Result<Vec<Vec<f64>>> {
        let (c, comp) = self.selector(target)?;
        let l = self.layout();
        let s2 = self.theta.get(comp);
        let u = apply_v_inv(&self.theta, &l, &c)?;
        self.components
            .iter()
            .map(|&s| {
                let vzu = apply_v_inv(&self.theta, &l, &apply_zzt(s, &l, &u)?)?;
                let delta = if s == comp { 1.0 } else { 0.0 };
                Ok(u.iter().zip(&vzu).map(|(a, b)| delta * a - s2 * b).collect())
            })
            .collect()
    }

    /// `[r_s^T V r_t]`.
    fn v_gram(&self, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let l = self.layout();
        let vr: Vec<Vec<f64>> = rows.iter().map(|r| apply_v(&self.theta, &l, r)).collect::<Result<_>>()?;
        let k = rows.len();
        let mut a = DMatrix::zeros(k, k);
        for s in 0..k {
            for t in s..k {
                let v = 0.5 * (dot(&rows[s], &vr[t]) + dot(&rows[t], &vr[s]));
                a[(s, t)] = v;
                a[(t, s)] = v;
            }
        }
        Ok(a)
    }

    /// `M_1 + tr(A B)`.
    pub fn kh(&self, target: Target) -> Result<SecondOrderMse> {
        let a = self.v_gram(&self.kh_derivatives(target)?)?;
        let m1 = self.m1(target)?;
        let m2 = (a * &self.b).trace();
        Ok(SecondOrderMse { m1, m2, total: m1 + m2 })
    }

    /// `M_1 + 2 tr(Gamma V Gamma^T B)`.
    pub fn pr(&self, target: Target) -> Result<SecondOrderMse> {
        let a = self.v_gram(&self.pr_rows(target)?)?;
        let m1 = self.m1(target)?;
        let m2 = (a * &self.b).trace();
        Ok(SecondOrderMse { m1, m2, total: m1 + 2.0 * m2 })
    }
}

pub fn mse_kh(fit: &FitResult, design: &CenteredDesign, target: Target) -> Result<f64> {
    Ok(SecondOrder::from_fit(fit, design, SECOND_ORDER_LIMIT)?.kh(target)?.total)
}

pub fn mse_pr(fit: &FitResult, design: &CenteredDesign, target: Target) -> Result<f64> {
    Ok(SecondOrder::from_fit(fit, design, SECOND_ORDER_LIMIT)?.pr(target)?.total)
}

/// Pairs of effects or cells whose prediction errors are covaried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JointTargets {
    /// Rows `i != i2` and columns `j != j2`. Ordered as
    /// `alpha_i, alpha_i2, beta_j, beta_j2` then, with interaction,
    /// `gamma_ij, gamma_i2j, gamma_ij2, gamma_i2j2`.
    Effects { i: usize, i2: usize, j: usize, j2: usize },
    /// Cell sums `alpha + beta (+ gamma)` at two cells differing in at least one index.
    Cells { first: (usize, usize), second: (usize, usize) },
}

/// Asymptotic covariance of EBLUP errors scaled by `normalization`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointCovariance {
    #[serde(skip)]
    pub matrix: DMatrix<f64>,
    /// The errors are scaled by `sqrt(normalization)`; here always `g`.
    pub normalization: f64,
    pub eta: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub targets: JointTargets,
    pub interaction: bool,
}

impl JointCovariance {
    /// Covariance of the unscaled errors.
    pub fn per_effect(&self) -> DMatrix<f64> {
        &self.matrix / self.normalization
    }
}

/// Asymptotic covariance with `eta = g/h`, `eta1 = g/m`, `eta2 = h/m`, normalised by `g`.
pub fn joint_covariance(
    theta: &VarianceComponents,
    interaction: bool,
    design: &CenteredDesign,
    targets: JointTargets,
) -> Result<JointCovariance> {
    theta.validate()?;
    let l = design.layout();
    let (g, h, m) = (l.g() as f64, l.h() as f64, l.m() as f64);
    let (eta, eta1, eta2) = (g / h, g / m, h / m);
    if interaction && !l.is_replicated() {
        return Err(Error::Precondition("interaction model needs m >= 2".into()));
    }
    if !interaction && theta.sigma_g2 != 0.0 {
        return Err(Error::Precondition("additive model needs sigma_gamma^2 = 0".into()));
    }
    let check = |i: usize, j: usize| -> Result<()> {
        if i >= l.g() {
            return Err(Error::IndexOutOfRange { axis: "row", index: i, size: l.g() });
        }
        if j >= l.h() {
            return Err(Error::IndexOutOfRange { axis: "column", index: j, size: l.h() });
        }
        Ok(())
    };
    let hr = crate::design::leverage_matrix(design, Factor::Row);
    let hc = crate::design::leverage_matrix(design, Factor::Column);
    let (hr, hc) = (hr?, hc?);
    let VarianceComponents { sigma_a2: sa, sigma_b2: sb, sigma_g2: sg, sigma_e2: se } = *theta;
    let matrix = match targets {
        JointTargets::Effects { i, i2, j, j2 } => {
            check(i, j)?;
            check(i2, j2)?;
            if i == i2 || j == j2 {
                return Err(Error::Precondition("joint effect covariance needs distinct rows and distinct columns".into()));
            }
            let rows = [i, i2];
            let cols = [j, j2];
            // row noise: eta * sigma_gamma^2 with interaction, eta * sigma_e^2 / m without
            let (row_noise, col_noise) = if interaction { (eta * sg, sg) } else { (eta * se / m, se / m) };
            let size = if interaction { 8 } else { 4 };
            let mut c = DMatrix::zeros(size, size);
            for (a, &s) in rows.iter().enumerate() {
                for (b, &u) in rows.iter().enumerate() {
                    c[(a, b)] = row_noise * f64::from(u8::from(s == u)) + sa * hr[(s, u)];
                }
            }
            for (a, &t) in cols.iter().enumerate() {
                for (b, &v) in cols.iter().enumerate() {
                    c[(2 + a, 2 + b)] = col_noise * f64::from(u8::from(t == v)) + eta * sb * hc[(t, v)];
                }
            }
            if interaction {
                let u = DMatrix::from_row_slice(4, 4, &[
                    eta, 0.0, eta, 0.0,
                    0.0, eta, 0.0, eta,
                    1.0, 1.0, 0.0, 0.0,
                    0.0, 0.0, 1.0, 1.0,
                ]) * -sg;
                let q = DMatrix::from_row_slice(4, 4, &[
                    1.0 + eta, 1.0, eta, 0.0,
                    1.0, 1.0 + eta, 0.0, eta,
                    eta, 0.0, 1.0 + eta, 1.0,
                    0.0, eta, 1.0, 1.0 + eta,
                ]) * sg;
                c.view_mut((0, 4), (4, 4)).copy_from(&u);
                c.view_mut((4, 0), (4, 4)).copy_from(&u.transpose());
                let lower = DMatrix::identity(4, 4) * (eta1 * se) + q;
                c.view_mut((4, 4), (4, 4)).copy_from(&lower);
            }
            c
        }
        JointTargets::Cells { first, second } => {
            check(first.0, first.1)?;
            check(second.0, second.1)?;
            if first == second {
                return Err(Error::Precondition("joint cell covariance needs two different cells".into()));
            }
            let cells = [first, second];
            DMatrix::from_fn(2, 2, |a, b| {
                let ((s, t), (u, v)) = (cells[a], cells[b]);
                let shared = sa * hr[(s, u)] + eta * sb * hc[(t, v)];
                if interaction {
                    eta1 * se * f64::from(u8::from(a == b)) + shared
                } else {
                    let same_row = f64::from(u8::from(s == u));
                    let same_col = f64::from(u8::from(t == v));
                    se / m * (eta * same_row + same_col) + shared
                }
            })
        }
    };
    let matrix = (&matrix + matrix.transpose()) * 0.5;
    Ok(JointCovariance { matrix, normalization: g, eta, eta1, eta2, targets, interaction })
}

/// `center +- z * sqrt(mse)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PredictionInterval {
    pub center: f64,
    pub half_width: f64,
    pub level: f64,
    pub method: MseMethod,
}

impl PredictionInterval {
    pub fn lower(&self) -> f64 {
        self.center - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.center + self.half_width
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower() <= value && value <= self.upper()
    }
}

/// Normal critical value `Phi^-1(1 - q/2)`.
pub fn critical_value(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Precondition(format!("interval tail probability must lie in (0, 1), got {q}")));
    }
    Ok(Normal::standard().inverse_cdf(1.0 - q / 2.0))
}

/// Interval with level `1 - q`.
pub fn prediction_interval(center: f64, mse: f64, q: f64, method: MseMethod) -> Result<PredictionInterval> {
    if !(mse >= 0.0) || !mse.is_finite() {
        return Err(Error::Precondition(format!("MSE must be finite and non-negative, got {mse}")));
    }
    let z = critical_value(q)?;
    Ok(PredictionInterval { center, half_width: z * mse.sqrt(), level: 1.0 - q, method })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::CovariateBlocks;
    use crate::kron::dense_v;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn theta(a: f64, b: f64, g: f64, e: f64) -> VarianceComponents {
        VarianceComponents::new(a, b, g, e).unwrap()
    }

    fn covariate_design(seed: u64, g: usize, h: usize, m: usize) -> CenteredDesign {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = BalancedLayout::new(g, h, m).unwrap();
        let mut raw = CovariateBlocks::empty(&l)
            .with_row(DMatrix::from_fn(g, 1, |_, _| rng.random_range(-1.0..1.0)), vec![])
            .with_col(DMatrix::from_fn(h, 1, |_, _| rng.random_range(-1.0..1.0)), vec![]);
        raw = raw.with_within(DMatrix::from_fn(l.n(), 1, |_, _| rng.random_range(-1.0..1.0)), vec![]);
        CenteredDesign::new(&l, raw).unwrap()
    }

    #[test]
    fn lsw_plug_in_values() {
        let l = BalancedLayout::new(10, 10, 10).unwrap();
        let d = CenteredDesign::intercept_only(&l);
        let est = LswEstimator::new(&theta(9.0, 49.0, 36.0, 81.0), true, &d).unwrap();
        assert_relative_eq!(est.mse(Target::Row(0)).unwrap(), 4.5, epsilon = 1e-12);
        assert_relative_eq!(est.mse(Target::Interaction(0, 0)).unwrap(), 15.3, epsilon = 1e-12);
        assert_relative_eq!(est.mse(Target::Column(3)).unwrap(), 36.0 / 10.0 + 49.0 / 10.0, epsilon = 1e-12);

        let l1 = BalancedLayout::new(10, 10, 1).unwrap();
        let d1 = CenteredDesign::intercept_only(&l1);
        let est = LswEstimator::new(&theta(9.0, 49.0, 0.0, 81.0), false, &d1).unwrap();
        assert_relative_eq!(est.mse(Target::Row(0)).unwrap(), 9.0, epsilon = 1e-12);
        assert!(est.mse(Target::Interaction(0, 0)).is_err());
        assert!(est.mse(Target::Row(10)).is_err());

        let est = LswEstimator::new(&theta(0.0, 1.0, 0.0, 1.0), true, &d).unwrap();
        assert_eq!(est.mse(Target::Row(0)).unwrap(), 0.0);
    }

    #[test]
    fn leverage_diagonal_matches_matrix() {
        let d = covariate_design(3, 5, 4, 2);
        for f in [Factor::Row, Factor::Column] {
            let full = crate::design::leverage_matrix(&d, f).unwrap();
            let diag = leverage_diagonal(&d, f).unwrap();
            for (s, v) in diag.iter().enumerate() {
                assert_relative_eq!(*v, full[(s, s)], epsilon = 1e-12);
            }
        }
    }

    fn dense_zzt(c: Component, l: &BalancedLayout) -> DMatrix<f64> {
        let n = l.n();
        let mut out = DMatrix::zeros(n, n);
        for p in 0..n {
            let mut e = vec![0.0; n];
            e[p] = 1.0;
            out.set_column(p, &DVector::from_vec(apply_zzt(c, l, &e).unwrap()));
        }
        out
    }

    #[test]
    fn traces_agree_with_dense() {
        let l = BalancedLayout::new(3, 3, 2).unwrap();
        let th = theta(1.3, 0.7, 0.4, 1.1);
        let vinv = dense_v(&th, &l).unwrap().try_inverse().unwrap();
        let t = trace_matrix(&th, &l, &Component::ALL).unwrap();
        for (a, &s) in Component::ALL.iter().enumerate() {
            for (b, &u) in Component::ALL.iter().enumerate() {
                let dense = 2.0 * (&vinv * dense_zzt(s, &l) * &vinv * dense_zzt(u, &l)).trace();
                assert!((t[(a, b)] - dense).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn trace_of_identity_block() {
        let l = BalancedLayout::new(4, 3, 1).unwrap();
        let t = trace_matrix(&theta(0.0, 0.0, 0.0, 1.0), &l, &active_components(false)).unwrap();
        assert_relative_eq!(t[(0, 0)], 2.0 * l.n() as f64, epsilon = 1e-12);
    }

    #[test]
    fn b_scales_quadratically() {
        let l = BalancedLayout::new(4, 5, 3).unwrap();
        let th = theta(1.0, 2.0, 0.5, 1.5);
        let b = info_matrix_b(&th, &l, &Component::ALL).unwrap();
        let b3 = info_matrix_b(&th.scaled(3.0), &l, &Component::ALL).unwrap();
        assert!((b3 - b * 9.0).abs().max() < 1e-10);
    }

    #[test]
    fn b_matches_error_variance_of_a_pure_error_model() {
        // one component: Var(sigma_e2 hat) = 2 sigma_e^4 / n
        let l = BalancedLayout::new(4, 5, 3).unwrap();
        let b = info_matrix_b(&theta(0.0, 0.0, 0.0, 2.5), &l, &[Component::Error]).unwrap();
        assert_relative_eq!(b[(0, 0)], 2.0 * 2.5 * 2.5 / 60.0, max_relative = 1e-12);
    }

    #[test]
    fn interaction_trace_is_singular_without_replicates() {
        let l = BalancedLayout::new(4, 5, 1).unwrap();
        assert!(matches!(
            info_matrix_b(&theta(1.0, 1.0, 1.0, 1.0), &l, &Component::ALL),
            Err(Error::RankDeficient { .. })
        ));
    }

    fn dense_p(th: &VarianceComponents, d: &CenteredDesign) -> DMatrix<f64> {
        let vinv = dense_v(th, &d.layout()).unwrap().try_inverse().unwrap();
        let x = d.design_matrix();
        let a = (x.transpose() * &vinv * &x).try_inverse().unwrap();
        &vinv - &vinv * &x * a * x.transpose() * &vinv
    }

    #[test]
    fn m1_matches_dense() {
        for m in [1, 2] {
            let d = covariate_design(5, 3, 3, m);
            let interaction = m > 1;
            let th = if interaction { theta(1.5, 0.8, 0.6, 1.0) } else { theta(1.5, 0.8, 0.0, 1.0) };
            let so = SecondOrder::new(&th, interaction, &d, SECOND_ORDER_LIMIT).unwrap();
            let p = dense_p(&th, &d);
            let l = d.layout();
            for target in [Target::Row(1), Target::Column(2)] {
                let (c, comp) = so.selector(target).unwrap();
                let c = DVector::from_vec(c);
                let s = th.get(comp);
                let dense = s - s * s * (c.transpose() * &p * &c)[(0, 0)];
                assert_relative_eq!(so.m1(target).unwrap(), dense, epsilon = 1e-10);
                assert!(so.m1(target).unwrap() >= 0.0);
            }
            assert!(l.n() <= SECOND_ORDER_LIMIT);
        }
    }

    #[test]
    fn derivative_functionals_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for m in [1, 2] {
            let d = covariate_design(6, 3, 3, m);
            let interaction = m > 1;
            let th = if interaction { theta(1.5, 0.8, 0.6, 1.0) } else { theta(1.5, 0.8, 0.0, 1.0) };
            let so = SecondOrder::new(&th, interaction, &d, SECOND_ORDER_LIMIT).unwrap();
            let y: Vec<f64> = (0..d.layout().n()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let l = d.layout();
            for target in [Target::Row(0), Target::Column(1)] {
                let kh = so.kh_derivatives(target).unwrap();
                let pr = so.pr_rows(target).unwrap();
                let (c, comp) = so.selector(target).unwrap();
                for (idx, &s) in so.components().iter().enumerate() {
                    let step = 1e-5;
                    let mut up = th;
                    up.set(s, th.get(s) + step);
                    let mut dn = th;
                    dn.set(s, th.get(s) - step);
                    let blup = |t: &VarianceComponents| dot(&so.blup_functional(target, t).unwrap(), &y);
                    let fd = (blup(&up) - blup(&dn)) / (2.0 * step);
                    let an = dot(&kh[idx], &y);
                    assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "kh {fd} vs {an}");

                    let raw = |t: &VarianceComponents| t.get(comp) * dot(&apply_v_inv(t, &l, &c).unwrap(), &y);
                    let fd = (raw(&up) - raw(&dn)) / (2.0 * step);
                    let an = dot(&pr[idx], &y);
                    assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "pr {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn zero_row_variance_zeroes_m1_and_rows() {
        let d = covariate_design(9, 4, 3, 1);
        let so = SecondOrder::new(&theta(0.0, 1.0, 0.0, 1.0), false, &d, SECOND_ORDER_LIMIT).unwrap();
        assert_eq!(so.m1(Target::Row(0)).unwrap(), 0.0);
        let rows = so.pr_rows(Target::Row(0)).unwrap();
        for (idx, c) in so.components().iter().enumerate() {
            if *c != Component::Row {
                assert!(rows[idx].iter().all(|v| *v == 0.0));
            }
        }
        assert!(rows[1].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn second_order_terms_non_negative() {
        let d = covariate_design(10, 5, 4, 2);
        let so = SecondOrder::new(&theta(2.0, 1.0, 0.5, 1.0), true, &d, SECOND_ORDER_LIMIT).unwrap();
        for t in [Target::Row(2), Target::Column(0)] {
            let kh = so.kh(t).unwrap();
            let pr = so.pr(t).unwrap();
            assert!(kh.m2 >= 0.0 && pr.m2 >= 0.0);
            assert_relative_eq!(kh.m1, pr.m1);
            assert_relative_eq!(pr.total, pr.m1 + 2.0 * pr.m2);
        }
        assert!(so.kh(Target::Interaction(0, 0)).is_err());
    }

    #[test]
    fn size_guard() {
        let l = BalancedLayout::new(10, 10, 2).unwrap();
        let d = CenteredDesign::intercept_only(&l);
        let err = SecondOrder::new(&theta(1.0, 1.0, 1.0, 1.0), true, &d, 150).unwrap_err();
        assert!(matches!(err, Error::ResourceLimit(msg) if msg.contains("LSW")));
    }

    #[test]
    fn joint_covariance_plug_ins() {
        let l = BalancedLayout::new(6, 6, 1).unwrap();
        let d = CenteredDesign::intercept_only(&l);
        let th = theta(2.0, 3.0, 0.0, 5.0);
        let jc = joint_covariance(&th, false, &d, JointTargets::Effects { i: 0, i2: 1, j: 2, j2: 3 }).unwrap();
        let pe = jc.per_effect();
        assert_relative_eq!(pe[(0, 0)], (5.0 + 2.0) / 6.0, epsilon = 1e-14);
        assert_relative_eq!(pe[(0, 1)], 2.0 / 6.0, epsilon = 1e-14);
        assert_eq!(pe[(0, 2)], 0.0);

        let l = BalancedLayout::new(6, 5, 3).unwrap();
        let d = CenteredDesign::intercept_only(&l);
        let jc = joint_covariance(&theta(2.0, 3.0, 0.0, 5.0), true, &d, JointTargets::Effects { i: 0, i2: 1, j: 2, j2: 3 }).unwrap();
        assert!(jc.matrix.view((0, 4), (4, 4)).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn joint_covariance_preconditions() {
        let l = BalancedLayout::new(4, 4, 2).unwrap();
        let d = CenteredDesign::intercept_only(&l);
        let th = theta(1.0, 1.0, 1.0, 1.0);
        assert!(joint_covariance(&th, true, &d, JointTargets::Effects { i: 0, i2: 0, j: 1, j2: 2 }).is_err());
        assert!(joint_covariance(&th, true, &d, JointTargets::Cells { first: (1, 1), second: (1, 1) }).is_err());
        assert!(joint_covariance(&th, true, &d, JointTargets::Cells { first: (1, 1), second: (1, 2) }).is_ok());
        assert!(joint_covariance(&th, false, &d, JointTargets::Cells { first: (1, 1), second: (1, 2) }).is_err());
        assert!(joint_covariance(&th, true, &d, JointTargets::Effects { i: 0, i2: 4, j: 1, j2: 2 }).is_err());
    }

    #[test]
    fn joint_diagonal_reproduces_lsw() {
        for (m, interaction) in [(1, false), (3, false), (3, true)] {
            let d = covariate_design(12, 7, 5, m);
            let th = if interaction { theta(2.0, 3.0, 1.5, 4.0) } else { theta(2.0, 3.0, 0.0, 4.0) };
            let lsw = LswEstimator::new(&th, interaction, &d).unwrap();
            let pe = joint_covariance(&th, interaction, &d, JointTargets::Effects { i: 1, i2: 4, j: 0, j2: 3 })
                .unwrap()
                .per_effect();
            let mut expect = vec![Target::Row(1), Target::Row(4), Target::Column(0), Target::Column(3)];
            if interaction {
                expect.extend([Target::Interaction(1, 0), Target::Interaction(4, 0), Target::Interaction(1, 3), Target::Interaction(4, 3)]);
            }
            for (k, t) in expect.into_iter().enumerate() {
                assert!((pe[(k, k)] - lsw.mse(t).unwrap()).abs() <= 1e-12);
            }
        }
    }

    fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
        m.clone().symmetric_eigen().eigenvalues.min()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn joint_covariance_is_symmetric_psd(
            a in 0.0..10.0f64, b in 0.0..10.0f64, gm in 0.0..10.0f64, e in 0.01..10.0f64,
            seed in 0u64..1000, g in 3usize..8, h in 3usize..8, m in 2usize..4,
        ) {
            let d = covariate_design(seed, g, h, m);
            for interaction in [false, true] {
                let th = theta(a, b, if interaction { gm } else { 0.0 }, e);
                for targets in [
                    JointTargets::Effects { i: 0, i2: g - 1, j: 1, j2: h - 1 },
                    JointTargets::Cells { first: (0, 0), second: (g - 1, 0) },
                    JointTargets::Cells { first: (0, 1), second: (2, 2) },
                ] {
                    let c = joint_covariance(&th, interaction, &d, targets).unwrap().matrix;
                    prop_assert!((&c - c.transpose()).abs().max() == 0.0);
                    prop_assert!(min_eigenvalue(&c) >= -1e-10 * c.abs().max().max(1.0));
                }
            }
        }
    }

    #[test]
    fn interval_examples() {
        let pi = prediction_interval(0.0, 4.5, 0.05, MseMethod::Lsw).unwrap();
        assert_relative_eq!(pi.half_width, 1.959963984540054 * 4.5f64.sqrt(), epsilon = 1e-9);
        assert!((pi.upper() - 4.158).abs() < 5e-4);
        let degenerate = prediction_interval(2.0, 0.0, 0.05, MseMethod::Kh).unwrap();
        assert_eq!((degenerate.lower(), degenerate.upper()), (2.0, 2.0));
        let narrow = prediction_interval(1.0, 3.0, 0.10, MseMethod::Pr).unwrap();
        let wide = prediction_interval(1.0, 3.0, 0.05, MseMethod::Pr).unwrap();
        assert!(wide.lower() < narrow.lower() && wide.upper() > narrow.upper());
        assert!(prediction_interval(0.0, 1.0, 0.0, MseMethod::Lsw).is_err());
        assert!(prediction_interval(0.0, -1.0, 0.05, MseMethod::Lsw).is_err());
    }
}
