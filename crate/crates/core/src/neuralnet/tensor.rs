use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Element type of the engine: `f32` for training and inference, `f64` for
/// gradient checks.
pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// Every index reachable through the strides and extents must lie
    /// inside the corresponding allocation.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Borrowed matrix with explicit row and column strides.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows x cols` matrix.
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: 1, cs: cols }
    }

    fn fits(&self, r: usize, c: usize) -> bool {
        r == 0 || c == 0 || (r - 1) * self.rs + (c - 1) * self.cs < self.data.len()
    }
}

/// Safe wrapper: `c[m x n] (row-major) = alpha * a[m x k] * b[k x n] + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: &mut [T],
) {
    assert!(a.fits(m, k) && b.fits(k, n), "gemm operand out of bounds");
    assert!(c.len() >= m * n, "gemm output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every strided access.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense `(batch, channels, height, width)` activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
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

    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let [_, cc, h, w] = self.shape;
        self.data[((n * cc + c) * h + y) * w + x]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sample `n` as a single-sample tensor.
    pub fn select(&self, n: usize) -> Self {
        let [_, c, h, w] = self.shape;
        Tensor {
            shape: [1, c, h, w],
            data: self.sample(n).to_vec(),
        }
    }

    /// Stacks single- or multi-sample tensors along the batch axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("nothing to stack".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.shape[1..] != [c, h, w] {
                return Err(Error::Shape(format!("cannot stack {:?} onto {:?}", p.shape, first.shape)));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape: [n, c, h, w], data })
    }
}

/// Named parameter or running-statistic buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: Vec<T>,
    /// Empty for non-trainable buffers.
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn trainable(name: impl Into<String>, dims: Vec<usize>, value: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Param {
            name: name.into(),
            dims,
            value,
            grad,
        }
    }

    pub fn buffer(name: impl Into<String>, dims: Vec<usize>, value: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        Param {
            name: name.into(),
            dims,
            value,
            grad: Vec::new(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        !self.grad.is_empty()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 1.0).collect(); // 3x4
        let mut c = vec![1.0; 8];
        gemm(2, 3, 4, 1.0, MatRef::rows(&a, 3), MatRef::rows(&b, 4), 2.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let expect: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum::<f64>() + 2.0;
                assert_eq!(c[i * 4 + j], expect);
            }
        }
        // transposed view of a 3x2 matrix
        let mut d = vec![0.0; 4];
        gemm(2, 3, 2, 1.0, MatRef::transposed(&a, 2), MatRef::rows(&a, 2), 0.0, &mut d);
        assert_eq!(d, vec![20.0, 26.0, 26.0, 35.0]);
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::<f32>::new([1, 2, 2, 2], vec![0.0; 7]).is_err());
        let t = Tensor::<f32>::from_fn([2, 1, 1, 2], |i| i as f32);
        assert_eq!(t.select(1).data(), &[2.0, 3.0]);
        let s = Tensor::stack(&[&t.select(1), &t.select(0)]).unwrap();
        assert_eq!(s.data(), &[2.0, 3.0, 0.0, 1.0]);
    }
}
