//! The residual graph-smoothing block shared by both relation stages:
//! `y = LN(x + ReLU(GCN(x, a)))`, with one learned projection matrix and one
//! LayerNorm affine pair per block.

use rand::Rng;

use crate::error::Result;
use crate::ops::{
    gcn_smooth_backward, gcn_smooth_forward, layer_norm_backward, layer_norm_forward,
    relu_backward, relu_forward, LayerNormCache,
};
use crate::params::{init_uniform, Gradients, ParamStore, SlotId};
use crate::tensor::{Scalar, Tensor};

/// Initial scale of the residual branch relative to plain Xavier. Damped so
/// a freshly initialized block is close to an identity-plus-normalize map:
/// the smoothing pathway starts quiet and grows only as training finds it
/// useful, instead of drowning the input in untrained messages.
const RESIDUAL_INIT_DAMPING: f64 = 0.25;

/// Parameter slots of one smoothing block.
#[derive(Clone, Debug)]
pub struct SmoothBlock {
    pub weight: SlotId,
    pub gamma: SlotId,
    pub beta: SlotId,
}

impl SmoothBlock {
    /// Registers `<prefix>.weight` (`dim × dim`, damped uniform Xavier),
    /// `<prefix>.gamma` (ones), and `<prefix>.beta` (zeros).
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
    ) -> Result<Self> {
        let mut w: Tensor<T> = init_uniform(rng, &[dim, dim], dim, dim);
        let damp = T::from_f64(RESIDUAL_INIT_DAMPING);
        w.data_mut().iter_mut().for_each(|v| *v = *v * damp);
        let weight = store.register(&format!("{prefix}.weight"), w)?;
        let mut ones = Tensor::zeros(&[dim]);
        ones.fill(T::one());
        let gamma = store.register(&format!("{prefix}.gamma"), ones)?;
        let beta = store.register(&format!("{prefix}.beta"), Tensor::zeros(&[dim]))?;
        Ok(SmoothBlock { weight, gamma, beta })
    }
}

/// Intermediate state of one forward pass, consumed by the backward pass and
/// inspected by gradient verification (the pre-activation holds the ReLU
/// decision points).
pub struct SmoothBlockCache<T> {
    /// Block input.
    pub x: Tensor<T>,
    /// Cached projection `x · weight`.
    pub m: Tensor<T>,
    /// Aggregated messages `a · m`, the ReLU input.
    pub pre_act: Tensor<T>,
    /// `x + relu(pre_act)`, the LayerNorm input.
    pub residual: Tensor<T>,
    pub ln: LayerNormCache<T>,
    /// Block output.
    pub output: Tensor<T>,
}

pub fn smooth_block_forward<T: Scalar>(
    store: &ParamStore<T>,
    block: &SmoothBlock,
    a: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, SmoothBlockCache<T>)> {
    let (pre_act, m) = gcn_smooth_forward(a, x, store.get(block.weight))?;
    let mut residual = relu_forward(&pre_act);
    residual.add_scaled(x, T::one());
    let (output, ln) = layer_norm_forward(&residual, store.get(block.gamma), store.get(block.beta));
    let cache = SmoothBlockCache {
        x: x.clone(),
        m,
        pre_act,
        residual,
        ln,
        output: output.clone(),
    };
    Ok((output, cache))
}

/// Accumulates parameter gradients into `grads` and returns `(dx, da)`: the
/// gradients with respect to the block input and the aggregation matrix.
pub fn smooth_block_backward<T: Scalar>(
    store: &ParamStore<T>,
    block: &SmoothBlock,
    grads: &mut Gradients<T>,
    a: &Tensor<T>,
    cache: &SmoothBlockCache<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let mut dg = Tensor::zeros(store.get(block.gamma).shape());
    let mut db = Tensor::zeros(store.get(block.beta).shape());
    let dresidual = layer_norm_backward(&cache.ln, store.get(block.gamma), dy, &mut dg, &mut db);
    grads.get_mut(block.gamma).add_scaled(&dg, T::one());
    grads.get_mut(block.beta).add_scaled(&db, T::one());

    // Residual split: dx gets the skip path, the ReLU path flows into the
    // smoothing step.
    let dpre = relu_backward(&cache.pre_act, &dresidual);
    let (dx_gcn, da, dw) =
        gcn_smooth_backward(a, &cache.x, store.get(block.weight), &cache.m, &dpre);
    grads.get_mut(block.weight).add_scaled(&dw, T::one());

    let mut dx = dresidual;
    dx.add_scaled(&dx_gcn, T::one());
    (dx, da)
}
