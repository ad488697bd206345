//! Dense row-major tensors and the numeric kernels shared by the forward and
//! backward passes of [`crate::autodiff::Tape`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// An immutable-by-convention dense tensor. `shape.iter().product() == data.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds an `m x n` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(shape_err("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Self {
            shape: vec![m, n],
            data,
        })
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
    }

    /// Entries drawn iid from `Normal(0, std^2)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as a matrix over the trailing axis.
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.last_dim()).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(shape_err(format!(
                "item() on tensor with {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| if v.abs() > acc { v.abs() } else { acc })
    }

    fn require_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(shape_err(format!(
                "{what}: expected a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.require_matrix("matmul lhs")?;
        let (k2, n) = other.require_matrix("matmul rhs")?;
        if k != k2 {
            return Err(shape_err(format!(
                "matmul inner dims differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    /// `self * other^T`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.require_matrix("matmul_nt lhs")?;
        let (n, k2) = other.require_matrix("matmul_nt rhs")?;
        if k != k2 {
            return Err(shape_err(format!(
                "matmul_nt inner dims differ: {:?} x {:?}^T",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.require_matrix("transpose")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }

    /// Row-wise softmax over the trailing axis, stabilized by max subtraction.
    pub fn softmax(&self) -> Self {
        let mut out = self.clone();
        let c = self.cols();
        if c > 0 {
            for row in out.data.chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        out
    }

    /// Row-wise log-softmax over the trailing axis.
    pub fn log_softmax(&self) -> Self {
        let mut out = self.clone();
        let c = self.cols();
        if c > 0 {
            for row in out.data.chunks_mut(c) {
                let lse = log_sum_exp(row);
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
        }
        out
    }

    /// Per-row index of the maximum entry; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows()).map(|i| argmax(self.row(i))).collect()
    }
}

pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = j;
        }
    }
    best
}

pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    let s: T = xs.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// `out += a[m x k] * b[k x n]`.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a[m x k] * b[n x k]^T`.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out += a[k x m]^T * b[k x n]`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            if api == T::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let eye = Tensor::<f64>::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap();
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(eye.matmul(&a).unwrap(), a);
    }

    #[test]
    fn basis_selection() {
        let a = Tensor::<f64>::from_f64(&[1, 2], &[1., 0.]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 1], &[5., 7.]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[5.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn nt_and_tn_agree_with_explicit_transpose() {
        let mut rng = rand::rng();
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let direct = a.matmul(&b.transpose().unwrap()).unwrap();
        let nt = a.matmul_nt(&b).unwrap();
        for (x, y) in direct.data().iter().zip(nt.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
        let mut tn = vec![0.0; 4 * 5];
        gemm_tn(a.data(), c.data(), &mut tn, 3, 4, 5);
        let direct = a.transpose().unwrap().matmul(&c).unwrap();
        for (x, y) in direct.data().iter().zip(&tn) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_and_two_class() {
        let s = Tensor::<f64>::from_f64(&[1, 3], &[0., 0., 0.]).unwrap().softmax();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = Tensor::<f64>::from_f64(&[1, 2], &[5., -5.]).unwrap().softmax();
        let logistic = |z: f64| 1.0 / (1.0 + (-z).exp());
        assert!((s.data()[0] - logistic(10.0)).abs() < 1e-15);
        assert!((s.data()[1] - logistic(-10.0)).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let s = Tensor::<f64>::from_f64(&[1, 3], &[1e300, -1e300, 0.0]).unwrap().softmax();
        assert!(s.is_finite());
        assert_eq!(s.data()[0], 1.0);
    }

    #[test]
    fn argmax_tie_breaks_low() {
        let t = Tensor::<f64>::from_f64(&[2, 3], &[1., 1., 1., 1., 2., 1.5]).unwrap();
        assert_eq!(t.argmax_rows(), vec![0, 1]);
    }

    #[test]
    fn f32_works_too() {
        let a = Tensor::<f32>::from_f64(&[1, 2], &[1., 2.]).unwrap();
        let b = Tensor::<f32>::from_f64(&[2, 1], &[3., 4.]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0f32]);
    }
}
