//! Affine layers, pointwise nonlinearities and the binary cross-entropy
//! loss.

use crate::tensor::{Scalar, Tensor};

/// Predictions are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before taking
/// logarithms so the loss stays finite for saturated outputs.
pub const BCE_CLAMP: f64 = 1e-7;

/// `y = x · w + b` with `x: [n, in]`, `w: [in, out]`, `b: [out]`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(x.cols(), w.rows(), "linear input width mismatch");
    assert_eq!(w.cols(), b.len(), "linear bias width mismatch");
    let mut y = x.matmul(w);
    for i in 0..y.rows() {
        for (v, &bb) in y.row_mut(i).iter_mut().zip(b.data().iter()) {
            *v += bb;
        }
    }
    y
}

/// Gradients of `linear_forward`: returns `(dx, dw, db)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let dx = dy.matmul_nt(w);
    let dw = x.matmul_tn(dy);
    let mut db = Tensor::zeros(&[w.cols()]);
    for i in 0..dy.rows() {
        for (d, &g) in db.data_mut().iter_mut().zip(dy.row(i).iter()) {
            *d += g;
        }
    }
    (dx, dw, db)
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    y
}

/// Routes the upstream gradient through the positive entries of the
/// pre-activation `x`; the subgradient at exactly zero is taken as zero.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    assert_eq!(x.shape(), dy.shape(), "relu_backward shape mismatch");
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data().iter()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// d sigmoid / dz expressed through the output `s = sigmoid(z)`.
pub fn sigmoid_grad<T: Scalar>(s: T) -> T {
    s * (T::one() - s)
}

fn clamp_prediction<T: Scalar>(y_hat: T) -> T {
    let lo = T::from_f64(BCE_CLAMP);
    let hi = T::one() - lo;
    y_hat.max(lo).min(hi)
}

/// Binary cross-entropy `-y·ln(ŷ) - (1-y)·ln(1-ŷ)` with the prediction
/// clamped away from 0 and 1.
pub fn bce_loss<T: Scalar>(y_hat: T, y: T) -> T {
    let p = clamp_prediction(y_hat);
    -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
}

/// dL/dŷ for `bce_loss`. Zero when the prediction sits outside the clamp
/// range, where the loss is locally constant in ŷ.
pub fn bce_grad<T: Scalar>(y_hat: T, y: T) -> T {
    let lo = T::from_f64(BCE_CLAMP);
    let hi = T::one() - lo;
    if y_hat < lo || y_hat > hi {
        return T::zero();
    }
    let p = clamp_prediction(y_hat);
    (p - y) / (p * (T::one() - p))
}
