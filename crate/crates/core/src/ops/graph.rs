//! Graph message passing: one round of adjacency-weighted feature smoothing
//! with a learned projection, `y = a · (x · w)`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One message-passing round. `a` is a `[t, t]` aggregation matrix (rows
/// aggregate from columns), `x` is `[t, d]`, and `w` is `[d, d]`.
///
/// Returns the smoothed features together with the projected features
/// `m = x · w`, which the backward pass reuses.
pub fn gcn_smooth_forward<T: Scalar>(
    a: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let t = x.rows();
    if a.shape() != [t, t] {
        return Err(Error::Invalid(format!(
            "aggregation matrix shape {:?} does not match {} shots",
            a.shape(),
            t
        )));
    }
    if w.shape() != [x.cols(), x.cols()] {
        return Err(Error::Invalid(format!(
            "projection shape {:?} does not match feature dim {}",
            w.shape(),
            x.cols()
        )));
    }
    let m = x.matmul(w);
    let y = a.matmul(&m);
    Ok((y, m))
}

/// Gradients of [`gcn_smooth_forward`]: given the inputs, the cached
/// projection `m = x·w`, and the upstream gradient `dy`, returns
/// `(dx, da, dw)`.
///
/// `da` is discarded by callers whose aggregation matrix is a constant of
/// the graph construction, and consumed by callers whose edge weights are
/// themselves learned.
pub fn gcn_smooth_backward<T: Scalar>(
    a: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    m: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let da = dy.matmul_nt(m);
    let dm = a.matmul_tn(dy);
    let dx = dm.matmul_nt(w);
    let dw = x.matmul_tn(&dm);
    (dx, da, dw)
}
