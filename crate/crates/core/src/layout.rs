//! Balanced two-way layout with `m` replicates per cell.
//!
//! Observations are stored flat with the rightmost index cycling fastest:
//! position of `(i, j, k)` is `((i * h) + j) * m + k`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of a balanced crossed design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BalancedLayout {
    g: usize,
    h: usize,
    m: usize,
}

impl BalancedLayout {
    pub fn new(g: usize, h: usize, m: usize) -> Result<Self> {
        if g < 2 || h < 2 {
            return Err(Error::InvalidLayout(format!(
                "need at least 2 rows and 2 columns, got g={g}, h={h}"
            )));
        }
        if m < 1 {
            return Err(Error::InvalidLayout("need at least one replicate per cell".into()));
        }
        Ok(Self { g, h, m })
    }

    /// Number of rows (levels of factor A).
    pub fn g(&self) -> usize {
        self.g
    }

    /// Number of columns (levels of factor B).
    pub fn h(&self) -> usize {
        self.h
    }

    /// Replicates per cell; `m == 1` is the unreplicated design.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.g * self.h * self.m
    }

    pub fn cells(&self) -> usize {
        self.g * self.h
    }

    pub fn is_replicated(&self) -> bool {
        self.m > 1
    }

    pub fn flat_index(&self, i: usize, j: usize, k: usize) -> Result<usize> {
        if i >= self.g {
            return Err(Error::IndexOutOfRange { axis: "row", index: i, size: self.g });
        }
        if j >= self.h {
            return Err(Error::IndexOutOfRange { axis: "column", index: j, size: self.h });
        }
        if k >= self.m {
            return Err(Error::IndexOutOfRange { axis: "replicate", index: k, size: self.m });
        }
        Ok(self.index(i, j, k))
    }

    /// Unchecked flat index.
    #[inline]
    pub(crate) fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.h + j) * self.m + k
    }

    /// Inverse of [`flat_index`](Self::flat_index).
    pub fn unflatten(&self, pos: usize) -> Result<(usize, usize, usize)> {
        if pos >= self.n() {
            return Err(Error::IndexOutOfRange { axis: "flat", index: pos, size: self.n() });
        }
        let k = pos % self.m;
        let cell = pos / self.m;
        Ok((cell / self.h, cell % self.h, k))
    }
}

/// Response vector on a balanced layout, in flat order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseTable {
    layout: BalancedLayout,
    values: Vec<f64>,
}

impl ResponseTable {
    pub fn new(layout: BalancedLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.n() {
            return Err(Error::mismatch("response vector", layout.n(), values.len()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> BalancedLayout {
        self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> Result<f64> {
        Ok(self.values[self.layout.flat_index(i, j, k)?])
    }
}

/// Grand, row, column and cell means of a variable on the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Averages {
    pub grand: f64,
    pub row: Vec<f64>,
    pub col: Vec<f64>,
    /// `g x h` cell means.
    pub cell: DMatrix<f64>,
}

pub fn averages(table: &ResponseTable) -> Averages {
    averages_of(&table.layout, &table.values)
}

/// Averages of an arbitrary flat vector of length `n`.
///
/// Panics if `values.len() != layout.n()`.
pub fn averages_of(layout: &BalancedLayout, values: &[f64]) -> Averages {
    assert_eq!(values.len(), layout.n(), "vector length must equal layout size");
    let (g, h, m) = (layout.g, layout.h, layout.m);
    let mut cell = DMatrix::zeros(g, h);
    for i in 0..g {
        for j in 0..h {
            let start = layout.index(i, j, 0);
            cell[(i, j)] = compensated_sum(values[start..start + m].iter().copied()) / m as f64;
        }
    }
    let (row, col, grand) = margins(&cell);
    Averages { grand, row, col, cell }
}

/// Row means, column means and grand mean of a `g x h` matrix.
pub(crate) fn margins(cell: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>, f64) {
    let (g, h) = cell.shape();
    let row: Vec<f64> = (0..g)
        .map(|i| compensated_sum((0..h).map(|j| cell[(i, j)])) / h as f64)
        .collect();
    let col: Vec<f64> = (0..h)
        .map(|j| compensated_sum((0..g).map(|i| cell[(i, j)])) / g as f64)
        .collect();
    let grand = compensated_sum(row.iter().copied()) / g as f64;
    (row, col, grand)
}

/// Double-centres a `g x h` matrix: `x_ij - x_i. - x_.j + x..`.
pub fn center_two_way(values: &DMatrix<f64>) -> DMatrix<f64> {
    let (row, col, grand) = margins(values);
    DMatrix::from_fn(values.nrows(), values.ncols(), |i, j| {
        values[(i, j)] - row[i] - col[j] + grand
    })
}

/// Neumaier summation.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in iter {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Compensated dot product.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    compensated_sum(a.iter().zip(b).map(|(x, y)| x * y))
}
