//! Dense numerical kernels: a row-major [`Matrix`], activations, softmax and a
//! one-sided Jacobi SVD.
//!
//! Everything is generic over [`Real`] so the same code runs in 32-bit
//! (default) and 64-bit verification precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar type used throughout the crate.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Size in bytes of one stored element.
    const BYTES: usize;

    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("real to f64")
    }
}

impl Real for f32 {
    const BYTES: usize = 4;
}

impl Real for f64 {
    const BYTES: usize = 8;
}

/// Arithmetic precision selector. `Verify` is 64-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    Standard,
    Verify,
}

impl Precision {
    /// Reads `DELTAKV_VERIFY`; `1` selects 64-bit verification mode.
    pub fn from_env() -> Self {
        match std::env::var("DELTAKV_VERIFY") {
            Ok(v) if v.trim() == "1" => Precision::Verify,
            _ => Precision::Standard,
        }
    }
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Debug> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix {}x{} {:?}", self.rows, self.cols, self.data)
    }
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of {} elements cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn row_vector(v: &[T]) -> Self {
        Self { rows: 1, cols: v.len(), data: v.to_vec() }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn frobenius_sq(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Converts element precision.
    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::c(x.f64())).collect(),
        }
    }
}

/// Matrix product with row-major accumulation over the shared dimension.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * b.cols..(p + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Ok(out)
}

/// Row vector times matrix: `x · W`.
pub fn vecmat<T: Real>(x: &[T], w: &Matrix<T>) -> Result<Vec<T>> {
    if x.len() != w.rows {
        return Err(Error::Shape(format!("vector of {} by {}x{}", x.len(), w.rows, w.cols)));
    }
    let mut out = vec![T::zero(); w.cols];
    for (p, &xv) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(p)) {
            *o = *o + xv * wv;
        }
    }
    Ok(out)
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Error function, Abramowitz–Stegun 7.1.26 is too coarse for gradient
/// checks, so this uses the series / continued-fraction pair in 64-bit.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    let ax = x.abs();
    let r = if ax < 2.5 {
        // Maclaurin series
        let x2 = ax * ax;
        let mut term = ax;
        let mut sum = ax;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -x2 / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() <= 1e-17 * sum.abs() {
                break;
            }
        }
        sum * std::f64::consts::FRAC_2_SQRT_PI
    } else {
        1.0 - erfc_cf(ax)
    };
    if x < 0.0 {
        -r
    } else {
        r
    }
}

// Lentz continued fraction for erfc, valid for x >= 2.5.
fn erfc_cf(x: f64) -> f64 {
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..300 {
        let a = k as f64 / 2.0;
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (f * std::f64::consts::PI.sqrt())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Exact GeLU, `x·Φ(x)`.
pub fn gelu<T: Real>(x: T) -> T {
    let xf = x.f64();
    T::c(xf * normal_cdf(xf))
}

/// Derivative of exact GeLU: `Φ(x) + x·φ(x)`.
pub fn gelu_grad<T: Real>(x: T) -> T {
    let xf = x.f64();
    let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    T::c(normal_cdf(xf) + xf * pdf)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `x·sigmoid(x)`.
pub fn swish<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

pub fn swish_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s + x * s * (T::one() - s)
}

/// Max-subtracted softmax of one row.
pub fn softmax_row<T: Real>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::Shape("softmax of empty row".into()));
    }
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / s).collect())
}

/// Thin singular value decomposition `A = U·diag(σ)·Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd<T> {
    pub u: Matrix<T>,
    pub sigma: Vec<T>,
    pub v: Matrix<T>,
}

impl<T: Real> Svd<T> {
    pub fn reconstruct(&self) -> Matrix<T> {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.sigma.iter().enumerate() {
                let x = us.get(i, j) * *s;
                us.set(i, j, x);
            }
        }
        matmul(&us, &self.v.transpose()).expect("svd factor shapes agree")
    }
}

const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

/// One-sided Jacobi SVD (Hestenes). Singular values are returned in
/// non-increasing order.
pub fn svd<T: Real>(a: &Matrix<T>) -> Result<Svd<T>> {
    if a.rows() < a.cols() {
        let t = svd(&a.transpose())?;
        return Ok(Svd { u: t.v, sigma: t.sigma, v: t.u });
    }
    let (m, n) = a.shape();
    // Rotations are carried out in f64 regardless of T.
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j).f64()).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = n < 2;
    let mut off = 0.0;
    for _ in 0..JACOBI_MAX_SWEEPS {
        off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = w[p].iter().map(|x| x * x).sum();
                let beta: f64 = w[q].iter().map(|x| x * x).sum();
                let gamma: f64 = w[p].iter().zip(&w[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 {
                    continue;
                }
                let denom = (alpha * beta).sqrt();
                if denom > 0.0 {
                    off = f64::max(off, gamma.abs() / denom);
                }
                if denom == 0.0 || gamma.abs() <= f64::EPSILON * denom {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if off < JACOBI_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "jacobi svd did not converge in {JACOBI_MAX_SWEEPS} sweeps (off-diagonal {off:e})"
        )));
    }

    let mut sig: Vec<(f64, usize)> = w
        .iter()
        .enumerate()
        .map(|(j, col)| (col.iter().map(|x| x * x).sum::<f64>().sqrt(), j))
        .collect();
    sig.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite norms").then(a.1.cmp(&b.1)));

    let mut u = Matrix::zeros(m, n);
    let mut vm = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    for (k, &(s, j)) in sig.iter().enumerate() {
        sigma.push(T::c(s));
        for i in 0..m {
            let x = if s > 0.0 { w[j][i] / s } else { 0.0 };
            u.set(i, k, T::c(x));
        }
        for i in 0..n {
            vm.set(i, k, T::c(v[j][i]));
        }
    }
    Ok(Svd { u, sigma, v: vm })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Singular values only, non-increasing.
pub fn svd_singular_values<T: Real>(a: &Matrix<T>) -> Result<Vec<T>> {
    Ok(svd(a)?.sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(3, 4, &mut rng);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
        let a = Matrix::from_vec(1, 1, vec![2.0f32]).unwrap();
        let b = Matrix::from_vec(1, 1, vec![3.0f32]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(7, 5, &mut rng);
        let b = random(5, 3, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += a.get(i, p) * b.get(p, j);
                }
                assert!((c.get(i, j) - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::<f32>::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-6);
        // Φ(1) = 0.8413447460685429
        assert!((gelu(1.0f64) - 0.841_344_746).abs() < 1e-5);
        assert!((erf(0.5) - 0.520_499_877_813_046_5).abs() < 1e-15);
        assert!((erf(3.0) - 0.999_977_909_503_001_4).abs() < 1e-15);
    }

    #[test]
    fn gelu_monotone_on_grid() {
        let mut prev = gelu(-5.0f64);
        let mut x = -5.0;
        while x <= 5.0 {
            let g = gelu(x);
            // exact GeLU dips to its minimum near x = -0.75; monotone above that
            if x > -0.75 {
                assert!(g >= prev - 1e-15, "not monotone at {x}");
            }
            prev = g;
            x += 1e-3;
        }
    }

    #[test]
    fn swish_values() {
        assert_eq!(swish(0.0f64), 0.0);
        assert!((swish(1.0f64) - 0.731_058_578_6).abs() < 1e-5);
        assert!((swish(-1.0f64) + 0.268_941_421_4).abs() < 1e-5);
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_row(&[2.0f64, 2.0, 2.0]).unwrap();
        for p in s {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(softmax_row(&[0.0f32]).unwrap(), vec![1.0]);
        assert!(matches!(softmax_row::<f32>(&[]), Err(Error::Shape(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..9).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let z: f64 = v.iter().map(|x| x.exp()).sum();
        for (p, x) in softmax_row(&v).unwrap().iter().zip(&v) {
            assert!((p - x.exp() / z).abs() < 1e-7);
        }
    }

    #[test]
    fn svd_simple() {
        let s = svd_singular_values(&Matrix::<f64>::identity(3)).unwrap();
        assert_eq!(s, vec![1.0, 1.0, 1.0]);
        let d = Matrix::from_vec(2, 2, vec![1.0f64, 0.0, 0.0, 3.0]).unwrap();
        let s = svd_singular_values(&d).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-12 && (s[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn svd_wide_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(3, 6, &mut rng);
        let f = svd(&a).unwrap();
        let r = f.reconstruct();
        assert!(r.sub(&a).unwrap().frobenius_sq().sqrt() < 1e-10);
    }
}
