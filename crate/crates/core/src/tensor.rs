//! Dense row-major tensors over `f32`/`f64`.
//!
//! Training runs in single precision; gradient verification re-instantiates
//! the same code in double precision, so everything numeric is generic over
//! [`Scalar`].

/// Floating-point element type. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense tensor with row-major storage. Shape mismatches in the arithmetic
/// helpers are programmer errors and panic; fallible validation happens in
/// the operation wrappers that sit on top of this type.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Builds a 2-D tensor from row slices; rows must have equal lengths.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Self {
        assert!(!rows.is_empty());
        let cols = rows[0].as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Number of rows; valid for 2-D tensors.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Number of columns; valid for 2-D tensors.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.shape[1] + j] = v;
    }

    /// `self · rhs` for 2-D tensors.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let (m, k) = (self.rows(), self.cols());
        assert_eq!(k, rhs.rows(), "matmul inner dimension mismatch");
        let n = rhs.cols();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let arow = self.row(i);
            let orow = out.row_mut(i);
            for (kk, &aik) in arow.iter().enumerate() {
                let brow = rhs.row(kk);
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += aik * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · rhs` for 2-D tensors, without materializing the transpose.
    pub fn matmul_tn(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let (m, n1) = (self.rows(), self.cols());
        assert_eq!(m, rhs.rows(), "matmul_tn leading dimension mismatch");
        let n2 = rhs.cols();
        let mut out = Tensor::zeros(&[n1, n2]);
        for k in 0..m {
            let arow = self.row(k);
            let brow = rhs.row(k);
            for (i, &aki) in arow.iter().enumerate() {
                let orow = out.row_mut(i);
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += aki * b;
                }
            }
        }
        out
    }

    /// `self · rhsᵀ` for 2-D tensors.
    pub fn matmul_nt(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let (m, k) = (self.rows(), self.cols());
        assert_eq!(k, rhs.cols(), "matmul_nt trailing dimension mismatch");
        let n = rhs.rows();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let arow = self.row(i);
            let orow = out.row_mut(i);
            for (j, o) in orow.iter_mut().enumerate() {
                let brow = rhs.row(j);
                *o = arow.iter().zip(brow.iter()).map(|(&a, &b)| a * b).sum();
            }
        }
        out
    }

    /// `self · x` for a 2-D tensor and a vector.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.cols(), x.len(), "matvec dimension mismatch");
        (0..self.rows())
            .map(|i| self.row(i).iter().zip(x.iter()).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    /// `selfᵀ · x` for a 2-D tensor and a vector.
    pub fn matvec_t(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.rows(), x.len(), "matvec_t dimension mismatch");
        let mut out = vec![T::zero(); self.cols()];
        for (k, &xk) in x.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(k).iter()) {
                *o += xk * a;
            }
        }
        out
    }

    /// `self += alpha * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Tensor<T>, alpha: T) {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
    }

    /// Adds `alpha * a ⊗ b` (outer product) to a 2-D tensor.
    pub fn add_outer(&mut self, a: &[T], b: &[T], alpha: T) {
        assert_eq!(self.rows(), a.len());
        assert_eq!(self.cols(), b.len());
        for (i, &ai) in a.iter().enumerate() {
            let s = alpha * ai;
            for (o, &bj) in self.row_mut(i).iter_mut().zip(b.iter()) {
                *o += s * bj;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise conversion to another scalar type (via `f64`).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}
