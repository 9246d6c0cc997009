//! Dense row-major `f64` matrix with exactly the operations the rest of the
//! crate needs. The multiply kernel is delegated to `matrixmultiply`; every
//! other routine is a direct loop. No views, no broadcasting tricks: shapes
//! must match exactly or the call is rejected.

use crate::error::{ensure, FgclError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// All-zero matrix. Either dimension may be zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Build from row-major data; `data.len()` must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            "from_vec: data length {} does not match {rows}x{cols}",
            data.len()
        );
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Build from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        for (i, r) in rows.iter().enumerate() {
            ensure!(
                r.len() == cols,
                "from_rows: row {i} has length {}, expected {cols}",
                r.len()
            );
        }
        Ok(DenseMatrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// 1xN row vector.
    pub fn row_vector(values: Vec<f64>) -> Self {
        DenseMatrix {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    /// Nx1 column vector.
    pub fn col_vector(values: Vec<f64>) -> Self {
        DenseMatrix {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        assert!(i < self.rows, "row {i} out of bounds for {} rows", self.rows);
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        assert!(i < self.rows, "row {i} out of bounds for {} rows", self.rows);
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Matrix product `self * rhs` via the dgemm kernel.
    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        ensure!(
            self.cols == rhs.rows,
            "matmul: {}x{} times {}x{} is undefined",
            self.rows,
            self.cols,
            rhs.rows,
            rhs.cols
        );
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        if self.rows == 0 || self.cols == 0 || rhs.cols == 0 {
            return Ok(out);
        }
        unsafe {
            matrixmultiply::dgemm(
                self.rows,
                self.cols,
                rhs.cols,
                1.0,
                self.data.as_ptr(),
                self.cols as isize,
                1,
                rhs.data.as_ptr(),
                rhs.cols as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                rhs.cols as isize,
                1,
            );
        }
        Ok(out)
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn add(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    /// Elementwise product.
    pub fn hadamard(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(rhs, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> DenseMatrix {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-place `self += k * rhs`.
    pub fn add_scaled_assign(&mut self, rhs: &DenseMatrix, k: f64) -> Result<()> {
        ensure!(
            self.shape() == rhs.shape(),
            "add_scaled_assign: shape {:?} vs {:?}",
            self.shape(),
            rhs.shape()
        );
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += k * b;
        }
        Ok(())
    }

    fn zip_with(
        &self,
        rhs: &DenseMatrix,
        op: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<DenseMatrix> {
        ensure!(
            self.shape() == rhs.shape(),
            "{op}: shape {:?} vs {:?}",
            self.shape(),
            rhs.shape()
        );
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Repeat a single-row matrix `n` times.
    pub fn tile_rows(&self, n: usize) -> DenseMatrix {
        assert_eq!(self.rows, 1, "tile_rows requires a row vector");
        let mut data = Vec::with_capacity(n * self.cols);
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        DenseMatrix {
            rows: n,
            cols: self.cols,
            data,
        }
    }

    /// Submatrix on the given row and column index sets (duplicates allowed).
    pub fn select(&self, row_idx: &[usize], col_idx: &[usize]) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(row_idx.len(), col_idx.len());
        for (oi, &i) in row_idx.iter().enumerate() {
            for (oj, &j) in col_idx.iter().enumerate() {
                out[(oi, oj)] = self[(i, j)];
            }
        }
        out
    }

    /// Rows gathered by index (duplicates allowed), all columns.
    pub fn select_rows(&self, row_idx: &[usize]) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(row_idx.len(), self.cols);
        for (oi, &i) in row_idx.iter().enumerate() {
            out.row_mut(oi).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, rhs: &DenseMatrix) -> Result<f64> {
        ensure!(
            self.shape() == rhs.shape(),
            "max_abs_diff: shape {:?} vs {:?}",
            self.shape(),
            rhs.shape()
        );
        Ok(self
            .data
            .iter()
            .zip(&rhs.data)
            .fold(0.0_f64, |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Cholesky factor `L` with `L * L^T = self` for a symmetric positive
    /// definite matrix. Pivots below `1e-12` times the largest diagonal
    /// entry are treated as zero and reported as [`FgclError::Singular`]:
    /// a rank-deficient matrix would otherwise sneak through on round-off
    /// residue and produce a garbage inverse.
    pub fn cholesky(&self) -> Result<DenseMatrix> {
        ensure!(
            self.rows == self.cols,
            "cholesky: matrix is {}x{}, expected square",
            self.rows,
            self.cols
        );
        let n = self.rows;
        let max_diag = (0..n).fold(0.0_f64, |m, i| m.max(self[(i, i)]));
        let floor = 1e-12 * max_diag;
        let mut l = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if s <= floor || !s.is_finite() {
                        return Err(FgclError::Singular(format!(
                            "cholesky pivot {s:e} at index {i} is not positive"
                        )));
                    }
                    l[(i, j)] = s.sqrt();
                } else {
                    l[(i, j)] = s / l[(j, j)];
                }
            }
        }
        Ok(l)
    }

    /// Inverse of a symmetric positive definite matrix via its Cholesky
    /// factor. The result is symmetrized to wash out round-off skew.
    pub fn spd_inverse(&self) -> Result<DenseMatrix> {
        let l = self.cholesky()?;
        let n = self.rows;
        // Solve L * Linv = I column by column (forward substitution), then
        // Ainv = Linv^T * Linv.
        let mut linv = DenseMatrix::zeros(n, n);
        for col in 0..n {
            for i in 0..n {
                let mut s = if i == col { 1.0 } else { 0.0 };
                for k in 0..i {
                    s -= l[(i, k)] * linv[(k, col)];
                }
                linv[(i, col)] = s / l[(i, i)];
            }
        }
        let mut inv = linv.transpose().matmul(&linv)?;
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                inv[(i, j)] = v;
                inv[(j, i)] = v;
            }
        }
        Ok(inv)
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        assert!(
            i < self.rows && j < self.cols,
            "index ({i},{j}) out of bounds for {}x{}",
            self.rows,
            self.cols
        );
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        assert!(
            i < self.rows && j < self.cols,
            "index ({i},{j}) out of bounds for {}x{}",
            self.rows,
            self.cols
        );
        &mut self.data[i * self.cols + j]
    }
}
