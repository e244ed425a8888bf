/// Compressed sparse row matrix with constant entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds from per-row `(column, value)` lists. Duplicate columns within
    /// a row are merged.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for r in rows {
            let start = indices.len();
            for &(c, v) in r {
                assert!(c < cols, "column {c} out of range {cols}");
                match indices[start..].iter().position(|&x| x == c) {
                    Some(p) => values[start + p] += v,
                    None => {
                        indices.push(c);
                        values.push(v);
                    }
                }
            }
            indptr.push(indices.len());
        }
        Self {
            rows: rows.len(),
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Nonzero `(column, value)` pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).map(|(_, v)| v).sum()
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, keep: &[usize]) -> Self {
        let rows: Vec<Vec<(usize, f64)>> = keep.iter().map(|&r| self.row(r).collect()).collect();
        Self::from_rows(self.cols, &rows)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[r * self.cols + c] += v;
            }
        }
        out
    }

    /// `self · x` for dense row-major `x[cols × width]`.
    pub fn matmul_dense(&self, x: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * width];
        for r in 0..self.rows {
            let o = &mut out[r * width..(r + 1) * width];
            for (c, v) in self.row(r) {
                for (ov, xv) in o.iter_mut().zip(&x[c * width..(c + 1) * width]) {
                    *ov += v * xv;
                }
            }
        }
        out
    }

    /// `g += selfᵀ · up` for dense `up[rows × width]`.
    pub fn matmul_transpose_acc(&self, up: &[f64], width: usize, g: &mut [f64]) {
        for r in 0..self.rows {
            let u = &up[r * width..(r + 1) * width];
            for (c, v) in self.row(r) {
                for (gv, uv) in g[c * width..(c + 1) * width].iter_mut().zip(u) {
                    *gv += v * uv;
                }
            }
        }
    }
}
