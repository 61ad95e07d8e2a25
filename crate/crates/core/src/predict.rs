//! Best linear unbiased predictors of the row, column and cell effects.
//!
//! The closed forms only need the grand, row, column and cell means of the
//! residual `y - X xi` and the eigenvalues of `V`. They coincide with the
//! matrix expression `G Z^T V^-1 (y - X xi)` where `G` is the covariance of
//! the random effects.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::design::CenteredDesign;
use crate::error::{Error, Result};
use crate::estimate::{FitResult, FixedEffects};
use crate::kron::{lambdas, VarianceComponents};
use crate::layout::{averages_of, Averages, ResponseTable};

/// Predicted random effects and the parameters they were computed at.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Eblups {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// `g x h` interaction predictions; `None` for the additive model.
    #[serde(skip)]
    pub gamma: Option<DMatrix<f64>>,
    pub xi: FixedEffects,
    pub theta: VarianceComponents,
}

/// Means of the residual `y - X xi`.
pub fn residual_averages(xi: &FixedEffects, design: &CenteredDesign, table: &ResponseTable) -> Result<Averages> {
    let layout = design.layout();
    if table.layout() != layout {
        return Err(Error::mismatch("response layout", format!("{layout:?}"), format!("{:?}", table.layout())));
    }
    let beta = xi.to_vec();
    if beta.len() != design.roles().p() {
        return Err(Error::mismatch("fixed-effect vector", design.roles().p(), beta.len()));
    }
    let mu = design.mean(&beta);
    let r: Vec<f64> = table.values().iter().zip(&mu).map(|(y, m)| y - m).collect();
    Ok(averages_of(&layout, &r))
}

fn shrink(avg: &Averages, theta: &VarianceComponents, design: &CenteredDesign, with_gamma: bool) -> (Vec<f64>, Vec<f64>, Option<DMatrix<f64>>) {
    let l = design.layout();
    let (g, h, m) = (l.g() as f64, l.h() as f64, l.m() as f64);
    let lam = lambdas(theta, &l).lambda;
    let (l1, l2, l3, l4) = (lam[1], lam[2], lam[3], lam[4]);
    let ra = h * m * theta.sigma_a2;
    let rb = g * m * theta.sigma_b2;
    let alpha = avg.row.iter().map(|r| ra / l2 * r - ra * (1.0 / l2 - 1.0 / l4) * avg.grand).collect();
    let beta = avg.col.iter().map(|r| rb / l3 * r - rb * (1.0 / l3 - 1.0 / l4) * avg.grand).collect();
    let gamma = with_gamma.then(|| {
        let rg = m * theta.sigma_g2;
        DMatrix::from_fn(l.g(), l.h(), |i, j| {
            rg * (avg.cell[(i, j)] / l1
                - avg.row[i] * (1.0 / l1 - 1.0 / l2)
                - avg.col[j] * (1.0 / l1 - 1.0 / l3)
                + avg.grand * (1.0 / l1 - 1.0 / l2 - 1.0 / l3 + 1.0 / l4))
        })
    });
    (alpha, beta, gamma)
}

/// BLUPs of `alpha`, `beta` and `gamma` on a replicated layout.
pub fn blup_interaction(xi: &FixedEffects, theta: &VarianceComponents, design: &CenteredDesign, table: &ResponseTable) -> Result<Eblups> {
    theta.validate()?;
    if !design.layout().is_replicated() {
        return Err(Error::Precondition("interaction predictions need m >= 2".into()));
    }
    let avg = residual_averages(xi, design, table)?;
    let (alpha, beta, gamma) = shrink(&avg, theta, design, true);
    Ok(Eblups { alpha, beta, gamma, xi: xi.clone(), theta: *theta })
}

/// BLUPs of `alpha` and `beta` in the additive model (`sigma_gamma^2 = 0`).
///
/// With `m > 1` the same formulas apply with row and column means taken over replicates.
pub fn blup_no_interaction(xi: &FixedEffects, theta: &VarianceComponents, design: &CenteredDesign, table: &ResponseTable) -> Result<Eblups> {
    theta.validate()?;
    if theta.sigma_g2 != 0.0 {
        return Err(Error::Precondition("additive-model predictions need sigma_gamma^2 = 0".into()));
    }
    let avg = residual_averages(xi, design, table)?;
    let (alpha, beta, _) = shrink(&avg, theta, design, false);
    Ok(Eblups { alpha, beta, gamma: None, xi: xi.clone(), theta: *theta })
}

/// BLUPs evaluated at the fitted parameters.
pub fn eblup(fit: &FitResult, design: &CenteredDesign, table: &ResponseTable) -> Result<Eblups> {
    if !fit.converged {
        return Err(Error::Precondition("fit did not converge".into()));
    }
    if fit.interaction {
        blup_interaction(&fit.xi, &fit.theta, design, table)
    } else {
        blup_no_interaction(&fit.xi, &fit.theta, design, table)
    }
}

/// Predicted cell effect `alpha_i + beta_j (+ gamma_ij)`.
pub fn cell_effect(eblups: &Eblups, i: usize, j: usize) -> Result<f64> {
    let (g, h) = (eblups.alpha.len(), eblups.beta.len());
    if i >= g {
        return Err(Error::IndexOutOfRange { axis: "row", index: i, size: g });
    }
    if j >= h {
        return Err(Error::IndexOutOfRange { axis: "column", index: j, size: h });
    }
    let gamma = eblups.gamma.as_ref().map_or(0.0, |m| m[(i, j)]);
    Ok(eblups.alpha[i] + eblups.beta[j] + gamma)
}
