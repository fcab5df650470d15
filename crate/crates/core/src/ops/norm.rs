//! Row-wise layer normalization and masked row-wise softmax.

use crate::tensor::{Scalar, Tensor};

/// Variance floor inside layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// Cache from [`layer_norm_forward`] consumed by the backward pass.
pub struct LayerNormCache<T> {
    /// Normalized rows before the affine transform.
    pub x_hat: Tensor<T>,
    /// Per-row `1 / sqrt(var + eps)`.
    pub inv_std: Vec<T>,
}

/// Normalizes each row to zero mean and unit variance (biased variance,
/// floored by [`LN_EPS`]), then applies the per-feature affine transform
/// `gamma ⊙ x̂ + beta`.
pub fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> (Tensor<T>, LayerNormCache<T>) {
    let (n, d) = (x.rows(), x.cols());
    assert_eq!(gamma.len(), d, "layer_norm gamma width mismatch");
    assert_eq!(beta.len(), d, "layer_norm beta width mismatch");
    let dim = T::from_f64(d as f64);
    let eps = T::from_f64(LN_EPS);
    let mut y = Tensor::zeros(&[n, d]);
    let mut x_hat = Tensor::zeros(&[n, d]);
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / dim;
        let var = row
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<T>()
            / dim;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        let xh = x_hat.row_mut(i);
        let yr = y.row_mut(i);
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xh[j] = h;
            yr[j] = gamma.data()[j] * h + beta.data()[j];
        }
    }
    (y, LayerNormCache { x_hat, inv_std })
}

/// Gradients of [`layer_norm_forward`]: returns `dx` and accumulates
/// `dgamma`/`dbeta`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    dgamma: &mut Tensor<T>,
    dbeta: &mut Tensor<T>,
) -> Tensor<T> {
    let (n, d) = (dy.rows(), dy.cols());
    let dim = T::from_f64(d as f64);
    let mut dx = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = cache.x_hat.row(i);
        let inv = cache.inv_std[i];
        // dL/dx̂ = dy ⊙ gamma; the two row sums below fold the mean and
        // variance paths into the compact standard formula.
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        for j in 0..d {
            let dxh = dyr[j] * gamma.data()[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
        }
        let dxr = dx.row_mut(i);
        for j in 0..d {
            let dxh = dyr[j] * gamma.data()[j];
            dxr[j] = inv / dim * (dim * dxh - sum_dxh - xh[j] * sum_dxh_xh);
        }
        for j in 0..d {
            dgamma.data_mut()[j] += dyr[j] * xh[j];
            dbeta.data_mut()[j] += dyr[j];
        }
    }
    dx
}

/// Row-wise softmax over a matrix that may contain `-inf` sentinels for
/// masked entries. Rows whose entries are all `-inf` map to all-zero rows.
pub fn masked_softmax<T: Scalar>(e: &Tensor<T>) -> Tensor<T> {
    let (n, m) = (e.rows(), e.cols());
    let mut a = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let row = e.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            continue; // empty support: leave the row at zero
        }
        let out = a.row_mut(i);
        let mut sum = T::zero();
        for j in 0..m {
            if row[j] == T::neg_infinity() {
                out[j] = T::zero();
            } else {
                let v = (row[j] - max).exp();
                out[j] = v;
                sum += v;
            }
        }
        for v in out.iter_mut() {
            *v /= sum;
        }
    }
    a
}

/// Gradient of [`masked_softmax`] given its output `a` and upstream `da`.
/// Masked entries and empty-support rows receive zero gradient.
pub fn masked_softmax_backward<T: Scalar>(a: &Tensor<T>, da: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape(), da.shape(), "masked_softmax_backward shape mismatch");
    let (n, m) = (a.rows(), a.cols());
    let mut de = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let ar = a.row(i);
        let dar = da.row(i);
        let dot = ar
            .iter()
            .zip(dar.iter())
            .map(|(&av, &dv)| av * dv)
            .sum::<T>();
        let der = de.row_mut(i);
        for j in 0..m {
            der[j] = ar[j] * (dar[j] - dot);
        }
    }
    de
}
