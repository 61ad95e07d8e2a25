//! Kronecker-structured marginal covariance of the crossed model.
//!
//! On a balanced layout `V(theta)` is diagonal in the basis of five mutually
//! orthogonal projectors (within-cell, interaction, row, column, grand mean),
//! so applying `V`, `V^-1` or any function of `V` costs `O(n)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{compensated_sum, margins, BalancedLayout};

/// Largest `n` for which dense `n x n` matrices are materialised.
pub const DENSE_LIMIT: usize = 5000;

pub const WITHIN: usize = 0;
pub const INTERACTION: usize = 1;
pub const ROW: usize = 2;
pub const COLUMN: usize = 3;
pub const GRAND: usize = 4;

/// Variance components `(sigma_alpha^2, sigma_beta^2, sigma_gamma^2, sigma_e^2)`.
///
/// The unreplicated / no-interaction model is `sigma_g2 == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub sigma_a2: f64,
    pub sigma_b2: f64,
    pub sigma_g2: f64,
    pub sigma_e2: f64,
}

/// One of the four variance components; also names the matching `Z_s Z_s^T` term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    Error,
    Row,
    Column,
    Interaction,
}

impl Component {
    /// Ordering used by the second-order MSE approximations (`Z_0 = I` first).
    pub const ALL: [Component; 4] = [
        Component::Error,
        Component::Row,
        Component::Column,
        Component::Interaction,
    ];
}

impl VarianceComponents {
    pub fn new(sigma_a2: f64, sigma_b2: f64, sigma_g2: f64, sigma_e2: f64) -> Result<Self> {
        let theta = Self { sigma_a2, sigma_b2, sigma_g2, sigma_e2 };
        theta.validate()?;
        Ok(theta)
    }

    /// No-interaction components (`sigma_gamma^2 = 0`).
    pub fn without_interaction(sigma_a2: f64, sigma_b2: f64, sigma_e2: f64) -> Result<Self> {
        Self::new(sigma_a2, sigma_b2, 0.0, sigma_e2)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma_a2, self.sigma_b2, self.sigma_g2, self.sigma_e2];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidVariance(format!(
                "components must be finite and non-negative, got {all:?}"
            )));
        }
        if self.sigma_e2 <= 0.0 {
            return Err(Error::InvalidVariance("error variance must be positive".into()));
        }
        Ok(())
    }

    pub fn get(&self, c: Component) -> f64 {
        match c {
            Component::Error => self.sigma_e2,
            Component::Row => self.sigma_a2,
            Component::Column => self.sigma_b2,
            Component::Interaction => self.sigma_g2,
        }
    }

    pub fn set(&mut self, c: Component, value: f64) {
        match c {
            Component::Error => self.sigma_e2 = value,
            Component::Row => self.sigma_a2 = value,
            Component::Column => self.sigma_b2 = value,
            Component::Interaction => self.sigma_g2 = value,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            sigma_a2: self.sigma_a2 * c,
            sigma_b2: self.sigma_b2 * c,
            sigma_g2: self.sigma_g2 * c,
            sigma_e2: self.sigma_e2 * c,
        }
    }
}

/// Eigenvalue of `Z_s Z_s^T` on each stratum, in stratum order.
pub fn loadings(component: Component, layout: &BalancedLayout) -> [f64; 5] {
    let (g, h, m) = (layout.g() as f64, layout.h() as f64, layout.m() as f64);
    match component {
        Component::Error => [1.0; 5],
        Component::Row => [0.0, 0.0, h * m, 0.0, h * m],
        Component::Column => [0.0, 0.0, 0.0, g * m, g * m],
        Component::Interaction => [0.0, m, m, m, m],
    }
}

/// The five distinct eigenvalues of `V(theta)` with their multiplicities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSpectrum {
    /// `lambda_0 .. lambda_4` in stratum order.
    pub lambda: [f64; 5],
    pub mult: [usize; 5],
}

impl LambdaSpectrum {
    pub fn log_det(&self) -> f64 {
        self.lambda
            .iter()
            .zip(self.mult)
            .filter(|(_, k)| *k > 0)
            .map(|(l, k)| k as f64 * l.ln())
            .sum()
    }

    fn check_positive(&self) -> Result<()> {
        for (s, (&l, &k)) in self.lambda.iter().zip(&self.mult).enumerate() {
            if k > 0 && !(l > 0.0) {
                return Err(Error::SingularCovariance(format!("lambda_{s} = {l}")));
            }
        }
        Ok(())
    }
}

pub fn multiplicities(layout: &BalancedLayout) -> [usize; 5] {
    let (g, h, m) = (layout.g(), layout.h(), layout.m());
    [g * h * (m - 1), (g - 1) * (h - 1), g - 1, h - 1, 1]
}

pub fn lambdas(theta: &VarianceComponents, layout: &BalancedLayout) -> LambdaSpectrum {
    let mut lambda = [0.0; 5];
    for c in Component::ALL {
        let w = theta.get(c);
        for (l, a) in lambda.iter_mut().zip(loadings(c, layout)) {
            *l += w * a;
        }
    }
    LambdaSpectrum { lambda, mult: multiplicities(layout) }
}

/// Orthogonal decomposition of an `n`-vector into the five strata.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumDecomposition {
    pub layout: BalancedLayout,
    /// Deviations from cell means (length `n`; all zero when `m == 1`).
    pub within: Vec<f64>,
    /// Double-centred cell means, `g x h`.
    pub interaction: DMatrix<f64>,
    /// Centred row means.
    pub row: Vec<f64>,
    /// Centred column means.
    pub col: Vec<f64>,
    pub grand: f64,
}

impl StratumDecomposition {
    /// Full-length image of one stratum.
    pub fn image(&self, stratum: usize) -> Vec<f64> {
        let l = self.layout;
        let mut out = vec![0.0; l.n()];
        match stratum {
            WITHIN => out.copy_from_slice(&self.within),
            _ => {
                for i in 0..l.g() {
                    for j in 0..l.h() {
                        let v = match stratum {
                            INTERACTION => self.interaction[(i, j)],
                            ROW => self.row[i],
                            COLUMN => self.col[j],
                            GRAND => self.grand,
                            _ => panic!("stratum index {stratum} out of range"),
                        };
                        let start = l.index(i, j, 0);
                        out[start..start + l.m()].fill(v);
                    }
                }
            }
        }
        out
    }

    /// `sum_s weight[s] * image(s)` without allocating the individual images.
    pub fn combine(&self, weight: &[f64; 5]) -> Vec<f64> {
        let l = self.layout;
        let mut out: Vec<f64> = self.within.iter().map(|v| weight[WITHIN] * v).collect();
        for i in 0..l.g() {
            let ri = weight[ROW] * self.row[i] + weight[GRAND] * self.grand;
            for j in 0..l.h() {
                let v = ri + weight[INTERACTION] * self.interaction[(i, j)] + weight[COLUMN] * self.col[j];
                let start = l.index(i, j, 0);
                for o in &mut out[start..start + l.m()] {
                    *o += v;
                }
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Vec<f64> {
        self.combine(&[1.0; 5])
    }

    /// Squared Euclidean norm of each stratum image.
    pub fn sq_norms(&self) -> [f64; 5] {
        self.inner(self)
    }

    /// Inner products `<P_s a, P_s b>` for each stratum.
    pub fn inner(&self, other: &StratumDecomposition) -> [f64; 5] {
        let l = self.layout;
        let (g, h, m) = (l.g() as f64, l.h() as f64, l.m() as f64);
        [
            crate::layout::dot(&self.within, &other.within),
            m * compensated_sum(self.interaction.iter().zip(other.interaction.iter()).map(|(a, b)| a * b)),
            h * m * crate::layout::dot(&self.row, &other.row),
            g * m * crate::layout::dot(&self.col, &other.col),
            g * h * m * self.grand * other.grand,
        ]
    }
}

/// Splits `vec` into its five stratum components.
///
/// Panics if `vec.len() != layout.n()`.
pub fn project_strata(vec: &[f64], layout: &BalancedLayout) -> StratumDecomposition {
    let avg = crate::layout::averages_of(layout, vec);
    let m = layout.m();
    let mut within = vec.to_vec();
    if m > 1 {
        for i in 0..layout.g() {
            for j in 0..layout.h() {
                let start = layout.index(i, j, 0);
                let c = avg.cell[(i, j)];
                for w in &mut within[start..start + m] {
                    *w -= c;
                }
            }
        }
    } else {
        within.fill(0.0);
    }
    let (row_m, col_m, grand) = margins(&avg.cell);
    let interaction = DMatrix::from_fn(layout.g(), layout.h(), |i, j| {
        avg.cell[(i, j)] - row_m[i] - col_m[j] + grand
    });
    StratumDecomposition {
        layout: *layout,
        within,
        interaction,
        row: row_m.iter().map(|r| r - grand).collect(),
        col: col_m.iter().map(|c| c - grand).collect(),
        grand,
    }
}

fn check_len(layout: &BalancedLayout, vec: &[f64]) -> Result<()> {
    if vec.len() != layout.n() {
        return Err(Error::mismatch("vector", layout.n(), vec.len()));
    }
    Ok(())
}

/// `V(theta) * vec`.
pub fn apply_v(theta: &VarianceComponents, layout: &BalancedLayout, vec: &[f64]) -> Result<Vec<f64>> {
    check_len(layout, vec)?;
    let spectrum = lambdas(theta, layout);
    Ok(project_strata(vec, layout).combine(&spectrum.lambda))
}

/// `V(theta)^-1 * vec`.
pub fn apply_v_inv(theta: &VarianceComponents, layout: &BalancedLayout, vec: &[f64]) -> Result<Vec<f64>> {
    apply_v_power(theta, layout, vec, -1)
}

/// `V(theta)^power * vec` for integer powers.
pub fn apply_v_power(
    theta: &VarianceComponents,
    layout: &BalancedLayout,
    vec: &[f64],
    power: i32,
) -> Result<Vec<f64>> {
    check_len(layout, vec)?;
    let spectrum = lambdas(theta, layout);
    if power < 0 {
        spectrum.check_positive()?;
    }
    let w = spectrum.lambda.map(|l| l.powi(power));
    Ok(project_strata(vec, layout).combine(&w))
}

/// `Z_s Z_s^T * vec` for one component (`Z_0 = I`).
pub fn apply_zzt(component: Component, layout: &BalancedLayout, vec: &[f64]) -> Result<Vec<f64>> {
    check_len(layout, vec)?;
    Ok(project_strata(vec, layout).combine(&loadings(component, layout)))
}

/// Dense `V(theta)`; test oracle and small-problem helper.
pub fn dense_v(theta: &VarianceComponents, layout: &BalancedLayout) -> Result<DMatrix<f64>> {
    let n = layout.n();
    if n > DENSE_LIMIT {
        return Err(Error::ResourceLimit(format!(
            "dense covariance requested for n = {n} > {DENSE_LIMIT}"
        )));
    }
    let (h, m) = (layout.h(), layout.m());
    let coords = |p: usize| {
        let cell = p / m;
        (cell / h, cell % h)
    };
    Ok(DMatrix::from_fn(n, n, |p, q| {
        let (i, j) = coords(p);
        let (i2, j2) = coords(q);
        let mut v = 0.0;
        if i == i2 {
            v += theta.sigma_a2;
        }
        if j == j2 {
            v += theta.sigma_b2;
        }
        if i == i2 && j == j2 {
            v += theta.sigma_g2;
        }
        if p == q {
            v += theta.sigma_e2;
        }
        v
    }))
}
