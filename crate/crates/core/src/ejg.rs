//! Entity jumping graph: links each shot in a window to its most similar
//! shots in entity-feature space — however far apart in time — and smooths
//! features along the graph with two residual blocks to produce long-range
//! affinity features.
//!
//! Edge construction (cosine similarities, top-k retention, degree
//! normalization) is a fixed function of the window: gradients flow through
//! the smoothing blocks only, never into the graph itself.

use rand::Rng;

use crate::blocks::{
    smooth_block_backward, smooth_block_forward, SmoothBlock, SmoothBlockCache,
};
use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Pairwise cosine similarities between the rows of `x`. Accumulation runs
/// in double precision regardless of `T` so that identical rows map to
/// exactly 1 after the final cast; results are clamped to `[-1, 1]` and the
/// diagonal is 1 by definition.
pub fn cosine_matrix<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = (x.rows(), x.cols());
    let mut norms = vec![0.0f64; n];
    for i in 0..n {
        let s: f64 = x.row(i).iter().map(|v| v.as_f64().powi(2)).sum();
        if s == 0.0 {
            return Err(Error::Invalid(format!(
                "cosine similarity undefined: feature row {i} is all-zero"
            )));
        }
        norms[i] = s.sqrt();
    }
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        out.set(i, i, T::one());
        for j in i + 1..n {
            let mut dot = 0.0f64;
            for k in 0..d {
                dot += x.at(i, k).as_f64() * x.at(j, k).as_f64();
            }
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            let v = T::from_f64(c);
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    Ok(out)
}

/// Keeps, per row, the `k` largest off-diagonal similarities (ties broken
/// toward the smaller column index); everything else becomes zero. Entry
/// `(i, j)` of the result is the weight of the edge from shot `j` into
/// shot `i`.
pub fn ejg_edges<T: Scalar>(s: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let n = s.rows();
    if k == 0 || k > n.saturating_sub(1) {
        return Err(Error::Invalid(format!(
            "neighbor count k={k} out of range for {n} shots (need 1 ≤ k ≤ {})",
            n.saturating_sub(1)
        )));
    }
    let mut e = Tensor::zeros(&[n, n]);
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        let row = s.row(i);
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        for &j in order.iter().take(k) {
            e.set(i, j, row[j]);
        }
    }
    Ok(e)
}

/// Symmetric degree normalization with self-loops: negative weights are
/// clamped to zero, `Ê = max(E, Eᵀ)` elementwise, and the result is
/// `D^{-1/2} (Ê + I) D^{-1/2}` with `D` the row-sum degrees of `Ê + I`.
/// Degrees are at least 1 thanks to the self-loops, so the division is
/// always defined. Computed in double precision.
pub fn normalize_adjacency<T: Scalar>(e: &Tensor<T>) -> Tensor<T> {
    let n = e.rows();
    let mut sym = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let a = e.at(i, j).as_f64().max(0.0);
            let b = e.at(j, i).as_f64().max(0.0);
            sym[i * n + j] = a.max(b);
        }
        sym[i * n + i] += 1.0;
    }
    let degrees: Vec<f64> = (0..n)
        .map(|i| sym[i * n..(i + 1) * n].iter().sum::<f64>())
        .collect();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let v = sym[i * n + j] / (degrees[i] * degrees[j]).sqrt();
            out.set(i, j, T::from_f64(v));
        }
    }
    out
}

/// Builds the normalized entity-graph aggregation matrix for one window.
pub fn entity_graph<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let sims = cosine_matrix(x)?;
    let edges = ejg_edges(&sims, k)?;
    Ok(normalize_adjacency(&edges))
}

/// Parameters of the two-block long-range smoothing stack.
#[derive(Clone, Debug)]
pub struct EjgParams {
    pub block1: SmoothBlock,
    pub block2: SmoothBlock,
}

impl EjgParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        dim: usize,
    ) -> Result<Self> {
        Ok(EjgParams {
            block1: SmoothBlock::register(store, rng, "eld.block1", dim)?,
            block2: SmoothBlock::register(store, rng, "eld.block2", dim)?,
        })
    }
}

pub struct EldCache<T> {
    /// Normalized aggregation matrix, constant with respect to gradients.
    pub adj: Tensor<T>,
    pub b1: SmoothBlockCache<T>,
    pub b2: SmoothBlockCache<T>,
}

/// Runs the two residual smoothing blocks over the entity graph and returns
/// the long-range affinity features.
pub fn eld_forward<T: Scalar>(
    store: &ParamStore<T>,
    params: &EjgParams,
    x: &Tensor<T>,
    k: usize,
) -> Result<(Tensor<T>, EldCache<T>)> {
    let adj = entity_graph(x, k)?;
    let (x1, b1) = smooth_block_forward(store, &params.block1, &adj, x)?;
    let (x2, b2) = smooth_block_forward(store, &params.block2, &adj, &x1)?;
    Ok((x2, EldCache { adj, b1, b2 }))
}

/// Accumulates parameter gradients and returns the gradient with respect to
/// the input features (flowing through the blocks only; the graph is a
/// constant of the window).
pub fn eld_backward<T: Scalar>(
    store: &ParamStore<T>,
    params: &EjgParams,
    grads: &mut Gradients<T>,
    cache: &EldCache<T>,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (dx1, _) = smooth_block_backward(store, &params.block2, grads, &cache.adj, &cache.b2, dy);
    let (dx, _) = smooth_block_backward(store, &params.block1, grads, &cache.adj, &cache.b1, &dx1);
    dx
}
