//! Minimal compressed-row storage for the symmetric stencil matrices used here.
//!
//! Every lattice operator (G, Gx, Gy, Gz and K) is stored on the same 7-point
//! pattern, so linear combinations are a pass over the value arrays.

use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(column, value)` lists. Columns are sorted per row.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                debug_assert!(c < n);
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_rows((0..n).map(|i| vec![(i, 1.0)]).collect())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn same_pattern(&self, other: &CsrMatrix) -> bool {
        self.n == other.n && self.row_ptr == other.row_ptr && self.col_idx == other.col_idx
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yi = acc;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                self.row(i)
                    .find(|&(c, _)| c == i)
                    .map(|(_, v)| v)
                    .unwrap_or(0.0)
            })
            .collect()
    }

    /// Diagonal of A·A for symmetric A (squared row norms).
    pub fn diagonal_of_square(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).map(|(_, v)| v * v).sum())
            .collect()
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let ax = self.apply(x);
        ax.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// `shift·I + Σ coeff_j · M_j`; all terms must share one pattern that
    /// contains the diagonal.
    pub fn combine(shift: f64, terms: &[(f64, &CsrMatrix)]) -> CsrMatrix {
        let base = terms[0].1;
        let mut values = vec![0.0; base.values.len()];
        for (c, m) in terms {
            assert!(m.same_pattern(base), "combine requires a shared pattern");
            for (v, mv) in values.iter_mut().zip(&m.values) {
                *v += c * mv;
            }
        }
        if shift != 0.0 {
            for i in 0..base.n {
                for k in base.row_ptr[i]..base.row_ptr[i + 1] {
                    if base.col_idx[k] == i {
                        values[k] += shift;
                    }
                }
            }
        }
        CsrMatrix {
            n: base.n,
            row_ptr: base.row_ptr.clone(),
            col_idx: base.col_idx.clone(),
            values,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[(i, j)] += v;
            }
        }
        m
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let d = self.to_dense();
        (&d - d.transpose()).amax() <= tol
    }
}
