use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    /// Panics when `data.len()` disagrees with `shape`; for internal use
    /// where the length is correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds an `n x d` matrix from row slices. All rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: vec![d],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![n, d],
            data,
        })
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent (batch size for batched tensors).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of values per leading index.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn check_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Euclidean norm of the flattened values.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Splits row-wise into `Vec<Vec<f64>>`.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }
}

/// `out[n x f] = a[n x k] * b[f x k]^T`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, f: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * f];
    if n == 0 || f == 0 || k == 0 {
        return out;
    }
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            f,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            out.as_mut_ptr(),
            f as isize,
            1,
        );
    }
    out
}

/// `out[n x f] = a[n x k] * b[k x f]`
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, f: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * f];
    if n == 0 || f == 0 || k == 0 {
        return out;
    }
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            f,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            f as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            f as isize,
            1,
        );
    }
    out
}

/// `out[k x f] = a[n x k]^T * b[n x f]`
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, f: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * f];
    if n == 0 || f == 0 || k == 0 {
        return out;
    }
    unsafe {
        matrixmultiply::dgemm(
            k,
            n,
            f,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            f as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            f as isize,
            1,
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nt(a: &[f64], b: &[f64], n: usize, k: usize, f: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * f];
        for i in 0..n {
            for j in 0..f {
                out[i * f + j] = (0..k).map(|l| a[i * k + l] * b[j * k + l]).sum();
            }
        }
        out
    }

    #[test]
    fn gemm_variants_agree_with_naive_loops() {
        let (n, k, f) = (3, 4, 5);
        let a: Vec<f64> = (0..n * k).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..f * k).map(|i| (i as f64 * 0.7).cos()).collect();
        let want = naive_nt(&a, &b, n, k, f);
        let got = matmul_nt(&a, &b, n, k, f);
        for (x, y) in want.iter().zip(&got) {
            assert!((x - y).abs() < 1e-12);
        }
        // b^T laid out as k x f
        let mut bt = vec![0.0; k * f];
        for j in 0..f {
            for l in 0..k {
                bt[l * f + j] = b[j * k + l];
            }
        }
        let got = matmul_nn(&a, &bt, n, k, f);
        for (x, y) in want.iter().zip(&got) {
            assert!((x - y).abs() < 1e-12);
        }
        // a^T (k x n) * want (n x f)
        let tn = matmul_tn(&a, &want, n, k, f);
        for l in 0..k {
            for j in 0..f {
                let s: f64 = (0..n).map(|i| a[i * k + l] * want[i * f + j]).sum();
                assert!((tn[l * f + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }
}
