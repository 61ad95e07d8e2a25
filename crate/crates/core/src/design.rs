//! Role-tagged covariate blocks, their centred variants, cross-product
//! matrices and the leverage terms used by the EBLUP error covariances.
//!
//! Covariates come in four roles. Row covariates are constant within a row
//! (`g x p_a`), column covariates within a column (`h x p_b`), interaction
//! covariates within a cell (`gh x p_ab`, cell `(i, j)` at row `i * h + j`),
//! and within-cell covariates vary per observation (`n x p_w`). On an
//! unreplicated layout the within block is cell level and there is no
//! interaction block.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{compensated_sum, BalancedLayout};

/// Reciprocal condition estimate below which a cross-product block is rank deficient.
pub const RCOND_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CovariateRoles {
    pub p_a: usize,
    pub p_b: usize,
    pub p_ab: usize,
    pub p_w: usize,
}

impl CovariateRoles {
    /// Number of slopes (intercept excluded).
    pub fn slopes(&self) -> usize {
        self.p_a + self.p_b + self.p_ab + self.p_w
    }

    /// Number of fixed effects including the intercept.
    pub fn p(&self) -> usize {
        1 + self.slopes()
    }
}

/// Which crossed factor a leverage or effect refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Factor {
    Row,
    Column,
}

/// Column labels for each block.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BlockNames {
    pub row: Vec<String>,
    pub col: Vec<String>,
    pub interaction: Vec<String>,
    pub within: Vec<String>,
}

/// Raw covariates by role.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateBlocks {
    pub row: DMatrix<f64>,
    pub col: DMatrix<f64>,
    pub interaction: DMatrix<f64>,
    pub within: DMatrix<f64>,
    pub names: BlockNames,
}

impl CovariateBlocks {
    /// No covariates: intercept-only mean.
    pub fn empty(layout: &BalancedLayout) -> Self {
        Self {
            row: DMatrix::zeros(layout.g(), 0),
            col: DMatrix::zeros(layout.h(), 0),
            interaction: DMatrix::zeros(layout.cells(), 0),
            within: DMatrix::zeros(layout.n(), 0),
            names: BlockNames::default(),
        }
    }

    pub fn with_row(mut self, block: DMatrix<f64>, names: Vec<String>) -> Self {
        self.row = block;
        self.names.row = names;
        self
    }

    pub fn with_col(mut self, block: DMatrix<f64>, names: Vec<String>) -> Self {
        self.col = block;
        self.names.col = names;
        self
    }

    pub fn with_interaction(mut self, block: DMatrix<f64>, names: Vec<String>) -> Self {
        self.interaction = block;
        self.names.interaction = names;
        self
    }

    pub fn with_within(mut self, block: DMatrix<f64>, names: Vec<String>) -> Self {
        self.within = block;
        self.names.within = names;
        self
    }

    pub fn roles(&self) -> CovariateRoles {
        CovariateRoles {
            p_a: self.row.ncols(),
            p_b: self.col.ncols(),
            p_ab: self.interaction.ncols(),
            p_w: self.within.ncols(),
        }
    }
}

/// Mean, row-, column- and cell-centred parts of a cell-level block.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParts {
    pub mean: DVector<f64>,
    /// `xbar_i. - xbar`, `g x p`.
    pub row: DMatrix<f64>,
    /// `xbar_.j - xbar`, `h x p`.
    pub col: DMatrix<f64>,
    /// `x_ij - xbar_i. - xbar_.j + xbar`, `gh x p`.
    pub cell: DMatrix<f64>,
}

/// Raw blocks plus every centred variant.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredDesign {
    layout: BalancedLayout,
    raw: CovariateBlocks,
    pub row_mean: DVector<f64>,
    /// `x_i - xbar` for row covariates.
    pub row_c: DMatrix<f64>,
    pub col_mean: DVector<f64>,
    pub col_c: DMatrix<f64>,
    pub interaction: CellParts,
    /// Decomposition of the within block's cell means.
    pub within: CellParts,
    /// `x_ijk - xbar_ij`; all zero on an unreplicated layout.
    pub within_c: DMatrix<f64>,
}

fn check_shape(what: &str, m: &DMatrix<f64>, rows: usize, names: &[String]) -> Result<()> {
    if m.nrows() != rows {
        return Err(Error::mismatch(
            format!("{what} covariate rows"),
            rows,
            m.nrows(),
        ));
    }
    if !names.is_empty() && names.len() != m.ncols() {
        return Err(Error::mismatch(format!("{what} covariate names"), m.ncols(), names.len()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition(format!("{what} covariates contain non-finite values")));
    }
    Ok(())
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let r = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| compensated_sum(c.iter().copied()) / r))
}

fn center_columns(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let mean = column_means(m);
    let c = DMatrix::from_fn(m.nrows(), m.ncols(), |r, k| m[(r, k)] - mean[k]);
    (mean, c)
}

/// Splits a `gh x p` cell-level block into mean, row, column and interaction parts.
pub fn decompose_cells(layout: &BalancedLayout, block: &DMatrix<f64>) -> CellParts {
    let (g, h, p) = (layout.g(), layout.h(), block.ncols());
    let mean = column_means(block);
    let row = DMatrix::from_fn(g, p, |i, k| {
        compensated_sum((0..h).map(|j| block[(i * h + j, k)])) / h as f64 - mean[k]
    });
    let col = DMatrix::from_fn(h, p, |j, k| {
        compensated_sum((0..g).map(|i| block[(i * h + j, k)])) / g as f64 - mean[k]
    });
    let cell = DMatrix::from_fn(g * h, p, |c, k| {
        block[(c, k)] - row[(c / h, k)] - col[(c % h, k)] - mean[k]
    });
    CellParts { mean, row, col, cell }
}

/// Cell means (`gh x p`) and within-cell deviations (`n x p`) of an observation-level block.
pub fn split_within(layout: &BalancedLayout, block: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = layout.m();
    let p = block.ncols();
    let means = DMatrix::from_fn(layout.cells(), p, |c, k| {
        compensated_sum((0..m).map(|r| block[(c * m + r, k)])) / m as f64
    });
    let dev = DMatrix::from_fn(layout.n(), p, |r, k| {
        if m == 1 {
            0.0
        } else {
            block[(r, k)] - means[(r / m, k)]
        }
    });
    (means, dev)
}

impl CenteredDesign {
    pub fn new(layout: &BalancedLayout, raw: CovariateBlocks) -> Result<Self> {
        check_shape("row", &raw.row, layout.g(), &raw.names.row)?;
        check_shape("column", &raw.col, layout.h(), &raw.names.col)?;
        check_shape("interaction", &raw.interaction, layout.cells(), &raw.names.interaction)?;
        check_shape("within-cell", &raw.within, layout.n(), &raw.names.within)?;
        if !layout.is_replicated() && raw.interaction.ncols() > 0 {
            return Err(Error::Precondition(
                "interaction covariates need replicated cells (m >= 2); \
                 supply cell-level covariates in the within block instead"
                    .into(),
            ));
        }
        let (row_mean, row_c) = center_columns(&raw.row);
        let (col_mean, col_c) = center_columns(&raw.col);
        let interaction = decompose_cells(layout, &raw.interaction);
        let (cell_means, within_c) = split_within(layout, &raw.within);
        let within = decompose_cells(layout, &cell_means);
        Ok(Self {
            layout: *layout,
            raw,
            row_mean,
            row_c,
            col_mean,
            col_c,
            interaction,
            within,
            within_c,
        })
    }

    /// Intercept-only design.
    pub fn intercept_only(layout: &BalancedLayout) -> Self {
        Self::new(layout, CovariateBlocks::empty(layout)).expect("empty blocks are valid")
    }

    pub fn layout(&self) -> BalancedLayout {
        self.layout
    }

    pub fn raw(&self) -> &CovariateBlocks {
        &self.raw
    }

    pub fn roles(&self) -> CovariateRoles {
        self.raw.roles()
    }

    /// Column labels in design-matrix order, starting with the intercept.
    pub fn column_names(&self) -> Vec<String> {
        let r = self.roles();
        let mut out = vec!["(Intercept)".to_string()];
        let mut push = |names: &[String], count: usize, prefix: &str| {
            for k in 0..count {
                out.push(names.get(k).cloned().unwrap_or_else(|| format!("{prefix}{}", k + 1)));
            }
        };
        push(&self.raw.names.row, r.p_a, "row_");
        push(&self.raw.names.col, r.p_b, "col_");
        push(&self.raw.names.interaction, r.p_ab, "cell_");
        push(&self.raw.names.within, r.p_w, "within_");
        out
    }

    /// Value of design column `c` (0 = intercept) at observation `(i, j, k)`.
    fn entry(&self, c: usize, i: usize, j: usize, k: usize) -> f64 {
        let r = self.roles();
        let h = self.layout.h();
        if c == 0 {
            return 1.0;
        }
        let mut c = c - 1;
        if c < r.p_a {
            return self.raw.row[(i, c)];
        }
        c -= r.p_a;
        if c < r.p_b {
            return self.raw.col[(j, c)];
        }
        c -= r.p_b;
        if c < r.p_ab {
            return self.raw.interaction[(i * h + j, c)];
        }
        c -= r.p_ab;
        self.raw.within[(self.layout.index(i, j, k), c)]
    }

    /// Design column `c` as a flat `n`-vector.
    pub fn column(&self, c: usize) -> Vec<f64> {
        let l = self.layout;
        (0..l.n())
            .map(|p| {
                let k = p % l.m();
                let cell = p / l.m();
                self.entry(c, cell / l.h(), cell % l.h(), k)
            })
            .collect()
    }

    /// Full `n x p` design matrix `[1, row, col, interaction, within]`.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        let p = self.roles().p();
        let mut x = DMatrix::zeros(self.layout.n(), p);
        for c in 0..p {
            x.set_column(c, &DVector::from_vec(self.column(c)));
        }
        x
    }

    /// `X xi` for a fixed-effect vector in design order.
    pub fn mean(&self, xi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.layout.n()];
        for (c, &b) in xi.iter().enumerate() {
            if b != 0.0 {
                for (o, v) in out.iter_mut().zip(self.column(c)) {
                    *o += b * v;
                }
            }
        }
        out
    }

    /// Centred covariates and cross-product matrix that define the leverage for a factor.
    pub fn leverage_block(&self, factor: Factor) -> (&DMatrix<f64>, DMatrix<f64>) {
        let d = dhat(self);
        match factor {
            Factor::Row => (&self.row_c, d.row),
            Factor::Column => (&self.col_c, d.col),
        }
    }
}

/// Normalised centred cross-products of each block.
#[derive(Debug, Clone, PartialEq)]
pub struct DhatMatrices {
    /// `g^-1 sum x_i(c) x_i(c)^T` over row covariates.
    pub row: DMatrix<f64>,
    /// `h^-1 sum x_j(c) x_j(c)^T` over column covariates.
    pub col: DMatrix<f64>,
    /// `(gh)^-1 sum x_ij(c) x_ij(c)^T` over interaction covariates.
    pub interaction: DMatrix<f64>,
    /// `n^-1 sum x_ijk(c) x_ijk(c)^T` when replicated; on an unreplicated
    /// layout the double-centred cell-level form `(gh)^-1 sum x_ij(c) x_ij(c)^T`.
    pub within: DMatrix<f64>,
}

fn gram(m: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let mut d = m.transpose() * m / scale;
    // exact symmetry for downstream factorisations
    let t = d.transpose();
    d += t;
    d / 2.0
}

pub fn dhat(design: &CenteredDesign) -> DhatMatrices {
    let l = design.layout;
    let cells = l.cells() as f64;
    DhatMatrices {
        row: gram(&design.row_c, l.g() as f64),
        col: gram(&design.col_c, l.h() as f64),
        interaction: gram(&design.interaction.cell, cells),
        within: if l.is_replicated() {
            gram(&design.within_c, l.n() as f64)
        } else {
            gram(&design.within.cell, cells)
        },
    }
}

/// Reciprocal condition estimate of a symmetric positive semi-definite matrix.
pub fn rcond_symmetric(d: &DMatrix<f64>) -> f64 {
    if d.is_empty() {
        return 1.0;
    }
    let eig = d.clone().symmetric_eigen().eigenvalues;
    let max = eig.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if max == 0.0 {
        0.0
    } else {
        (min / max).max(0.0)
    }
}

/// Inverse of a cross-product block, or a rank-deficiency error naming it.
pub fn checked_inverse(d: &DMatrix<f64>, block: &str) -> Result<DMatrix<f64>> {
    if d.is_empty() {
        return Ok(d.clone());
    }
    let rcond = rcond_symmetric(d);
    if rcond < RCOND_THRESHOLD {
        return Err(Error::RankDeficient { block: block.into(), rcond });
    }
    d.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::RankDeficient { block: block.into(), rcond })
}

/// Leverage matrix `H_su = 1 + x_s(c)^T D^-1 x_u(c)` for one factor.
pub fn leverage_matrix(design: &CenteredDesign, factor: Factor) -> Result<DMatrix<f64>> {
    let (xc, d) = design.leverage_block(factor);
    let name = match factor {
        Factor::Row => "row",
        Factor::Column => "column",
    };
    let dinv = checked_inverse(&d, name)?;
    let q = xc * dinv * xc.transpose();
    Ok(q.add_scalar(1.0))
}

/// Single leverage entry; see [`leverage_matrix`] when many are needed.
pub fn leverage(design: &CenteredDesign, factor: Factor, s: usize, u: usize) -> Result<f64> {
    let (xc, d) = design.leverage_block(factor);
    let size = xc.nrows();
    for idx in [s, u] {
        if idx >= size {
            let axis = if factor == Factor::Row { "row" } else { "column" };
            return Err(Error::IndexOutOfRange { axis, index: idx, size });
        }
    }
    if xc.ncols() == 0 {
        return Ok(1.0);
    }
    let name = if factor == Factor::Row { "row" } else { "column" };
    let dinv = checked_inverse(&d, name)?;
    let xs = xc.row(s).transpose();
    let xu = xc.row(u).transpose();
    Ok(1.0 + (xs.transpose() * dinv * xu)[(0, 0)])
}

/// Centred parts of a single observation-level covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedCovariate {
    pub mean: f64,
    /// `xbar_i. - xbar`, length `g`.
    pub row: Vec<f64>,
    /// `xbar_.j - xbar`, length `h`.
    pub col: Vec<f64>,
    /// `xbar_ij - xbar_i. - xbar_.j + xbar`, length `gh`.
    pub cell: Vec<f64>,
    /// `x_ijk - xbar_ij`, length `n` (zero when `m == 1`).
    pub within: Vec<f64>,
}

/// Splits a covariate measured per observation into row, column, cell and
/// within-cell centred components (the overall mean goes to the intercept).
pub fn decompose_covariate(layout: &BalancedLayout, values: &[f64]) -> Result<DecomposedCovariate> {
    if values.len() != layout.n() {
        return Err(Error::mismatch("covariate", layout.n(), values.len()));
    }
    let block = DMatrix::from_column_slice(layout.n(), 1, values);
    let (means, within) = split_within(layout, &block);
    let parts = decompose_cells(layout, &means);
    Ok(DecomposedCovariate {
        mean: parts.mean[0],
        row: parts.row.column(0).iter().copied().collect(),
        col: parts.col.column(0).iter().copied().collect(),
        cell: parts.cell.column(0).iter().copied().collect(),
        within: within.column(0).iter().copied().collect(),
    })
}

impl DecomposedCovariate {
    /// Role blocks for this covariate: row and column parts, then the cell
    /// part as an interaction covariate (replicated) or within covariate
    /// (unreplicated), then the within-cell part when replicated.
    pub fn into_blocks(self, layout: &BalancedLayout, name: &str) -> CovariateBlocks {
        let mut b = CovariateBlocks::empty(layout)
            .with_row(DMatrix::from_vec(layout.g(), 1, self.row), vec![format!("{name}_row_cent")])
            .with_col(DMatrix::from_vec(layout.h(), 1, self.col), vec![format!("{name}_column_cent")]);
        if layout.is_replicated() {
            b = b
                .with_interaction(DMatrix::from_vec(layout.cells(), 1, self.cell), vec![format!("{name}_cell_cent")])
                .with_within(DMatrix::from_vec(layout.n(), 1, self.within), vec![format!("{name}_within_cent")]);
        } else {
            b = b.with_within(DMatrix::from_vec(layout.n(), 1, self.cell), vec![format!("{name}_cell_cent")]);
        }
        b
    }
}
