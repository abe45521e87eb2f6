use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
///
/// All reductions accumulate left to right in index order, so equal inputs
/// always produce bit-identical outputs.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(6) {
            if r > 0 {
                write!(f, "; ")?;
            }
            let row = self.row(r);
            for (c, v) in row.iter().take(8).enumerate() {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{v:.6}")?;
            }
            if row.len() > 8 {
                write!(f, ", ..")?;
            }
        }
        if self.rows > 6 {
            write!(f, "; ..")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Invalid(format!(
                "buffer of length {} cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::Invalid(format!(
                    "ragged rows: row {i} has {} entries, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn column_vector(values: Vec<f64>) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Matrix product. Each output entry is accumulated over the shared
    /// dimension in increasing index order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(n, m);
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out.data[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape("elementwise", self.shape(), other.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add_assign", self.shape(), other.shape()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(&self, row: &Matrix) -> Result<Matrix> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::shape("add_row", self.shape(), row.shape()));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Per-column sums as a `1 x cols` row.
    pub fn column_sums(&self) -> Matrix {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        Matrix::row_vector(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Copies rows `start..end`.
    pub fn row_range(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copies columns `start..end`.
    pub fn column_range(&self, start: usize, end: usize) -> Matrix {
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Stacks matrices of equal width on top of each other.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|m| m.data.len()).sum());
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::shape("vstack", (rows, cols), m.shape()));
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Per-column batch mean and biased (divide-by-m) variance.
pub fn row_stats(x: &Matrix) -> Result<(Matrix, Matrix)> {
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::Empty { op: "row_stats" });
    }
    let m = x.rows() as f64;
    let mut mean = x.column_sums();
    for v in mean.data_mut() {
        *v /= m;
    }
    let mut var = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for ((acc, &v), &mu) in var.iter_mut().zip(x.row(r)).zip(mean.data()) {
            let d = v - mu;
            *acc += d * d;
        }
    }
    for v in &mut var {
        *v /= m;
    }
    Ok((mean, Matrix::row_vector(var)))
}

fn require_finite(x: &Matrix, op: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: format!("{op} input"),
        })
    }
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Matrix) -> Result<Matrix> {
    require_finite(x, "sigmoid")?;
    Ok(x.map(sigmoid_scalar))
}

pub fn relu(x: &Matrix) -> Result<Matrix> {
    require_finite(x, "relu")?;
    Ok(x.map(|v| v.max(0.0)))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Result<Matrix> {
    require_finite(x, "softmax")?;
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Horizontal concatenation `[a : b]`.
pub fn concat_cols(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::shape("concat_cols", a.shape(), b.shape()));
    }
    let cols = a.cols() + b.cols();
    let mut data = Vec::with_capacity(a.rows() * cols);
    for r in 0..a.rows() {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Matrix::from_vec(a.rows(), cols, data)
}

/// Evaluates the bilinear compatibility `xᵀ W a` and the same score written
/// as a linear model on the tensor product, `(x ⊗ a)ᵀ vec(W)` with row-major
/// `vec`. Returns `(bilinear, tensor_form)`.
pub fn bilinear_equivalence(x: &[f64], a: &[f64], w: &Matrix) -> Result<(f64, f64)> {
    if w.rows() != x.len() || w.cols() != a.len() {
        return Err(Error::shape("bilinear_equivalence", w.shape(), (x.len(), a.len())));
    }
    let mut lhs = 0.0;
    for (i, &xi) in x.iter().enumerate() {
        let wa: f64 = w.row(i).iter().zip(a).map(|(wij, aj)| wij * aj).sum();
        lhs += xi * wa;
    }
    // x ⊗ a laid out as x_i * a_j at index i * r + j, matching row-major vec(W).
    let rhs = x
        .iter()
        .flat_map(|&xi| a.iter().map(move |&aj| xi * aj))
        .zip(w.data())
        .map(|(t, u)| t * u)
        .sum();
    Ok((lhs, rhs))
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Matrix) -> f64,
    x: &Matrix,
    h: f64,
) -> Result<Matrix> {
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for idx in 0..x.data().len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[idx] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                what: format!(
                    "objective near entry ({}, {})",
                    idx / x.cols().max(1),
                    idx % x.cols().max(1)
                ),
            });
        }
        grad.data_mut()[idx] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.frobenius_norm().max(numeric.frobenius_norm());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_examples() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(a.matmul(&Matrix::identity(2)).unwrap(), a);
        let r = Matrix::from_rows(&[[1.0, 2.0]])
            .unwrap()
            .matmul(&Matrix::from_rows(&[[3.0], [4.0]]).unwrap())
            .unwrap();
        assert_eq!(r.data(), &[11.0]);
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(4, 2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("(4, 2)"), "{msg}");
    }

    #[test]
    fn row_stats_examples() {
        let (m, v) = row_stats(&Matrix::column_vector(vec![0.0, 2.0])).unwrap();
        assert_eq!((m.get(0, 0), v.get(0, 0)), (1.0, 1.0));
        let (m, v) = row_stats(&Matrix::column_vector(vec![5.0; 3])).unwrap();
        assert_eq!((m.get(0, 0), v.get(0, 0)), (5.0, 0.0));
        let (m, v) = row_stats(&Matrix::column_vector(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!((m.get(0, 0), v.get(0, 0)), (2.5, 1.25));
        assert!(matches!(row_stats(&Matrix::zeros(0, 3)), Err(Error::Empty { .. })));
    }

    #[test]
    fn activations() {
        let s = softmax_rows(&Matrix::from_rows(&[[0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Matrix::from_rows(&[[3f64.ln(), 0.0]]).unwrap()).unwrap();
        assert!((s.get(0, 0) - 0.75).abs() < 1e-15 && (s.get(0, 1) - 0.25).abs() < 1e-15);
        assert_eq!(sigmoid(&Matrix::zeros(1, 1)).unwrap().get(0, 0), 0.5);
        assert_eq!(
            relu(&Matrix::from_rows(&[[-1.0, 2.0]]).unwrap()).unwrap().data(),
            &[0.0, 2.0]
        );
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(800.0) <= 1.0);
        assert!(sigmoid(&Matrix::filled(1, 1, f64::NAN)).is_err());
    }

    #[test]
    fn concat_examples() {
        let a = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0]]).unwrap();
        assert_eq!(concat_cols(&a, &b).unwrap().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(concat_cols(&a, &Matrix::zeros(1, 0)).unwrap(), a);
        assert!(concat_cols(&Matrix::zeros(2, 1), &Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn bilinear_examples() {
        let (l, r) = bilinear_equivalence(&[1.0, 2.0], &[3.0, 4.0], &Matrix::identity(2)).unwrap();
        assert_eq!((l, r), (11.0, 11.0));
        let (l, r) = bilinear_equivalence(&[1.0, 2.0], &[3.0, 4.0], &Matrix::zeros(2, 2)).unwrap();
        assert_eq!((l, r), (0.0, 0.0));
        assert!(bilinear_equivalence(&[1.0], &[1.0], &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_diff_grad(|m| m.data().iter().map(|v| v * v).sum(), &Matrix::filled(1, 1, 3.0), 1e-5)
            .unwrap();
        assert!((g.get(0, 0) - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &Matrix::filled(2, 2, 1.0), 1e-5).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
        let g = finite_diff_grad(|m| sigmoid_scalar(m.get(0, 0)), &Matrix::zeros(1, 1), 1e-5).unwrap();
        assert!((g.get(0, 0) - 0.25).abs() < 1e-9);
        let err = finite_diff_grad(|m| 1.0 / (m.get(0, 1) - 1.0).abs().min(1e-300) - 1e308 * 1e10, &Matrix::filled(1, 2, 1.0), 1e-5);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }
}
