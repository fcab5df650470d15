//! Multi-shot comparison detector: builds a similarity grid comparing every
//! shot before the window center against every shot after it, then scores
//! the center shot as a scene boundary with a small convolutional network.
//!
//! The grid sums one cosine term per active modality — long-range entity
//! affinity and short-range place affinity — so the network sees how sharply
//! both kinds of context change across the candidate boundary.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ejg::{eld_backward, eld_forward, EjgParams, EldCache};
use crate::error::{Error, Result};
use crate::ops::{
    bce_grad, bce_loss, conv2d_backward, conv2d_forward, linear_backward, linear_forward,
    maxpool2x2_backward, maxpool2x2_forward, relu_backward, relu_forward, sigmoid, sigmoid_grad,
};
use crate::params::{init_uniform, Gradients, ParamStore, SlotId};
use crate::pcg::{psd_backward, psd_forward, PcgParams, PsdCache};
use crate::tensor::{Scalar, Tensor};

/// Channel widths of the convolutional encoder, input included.
pub const CONV_CHANNELS: [usize; 5] = [1, 32, 64, 64, 64];
/// Width of the hidden classifier layer.
pub const FC_HIDDEN: usize = 128;
const KERNEL: usize = 3;

/// Per-modality byproducts of the comparison grid needed by its backward
/// pass.
pub struct CtxFeatCache<T> {
    /// Euclidean norm of every feature row.
    pub norms: Vec<T>,
    /// This modality's cosine contribution to each grid cell.
    pub cos: Tensor<T>,
}

pub struct CtxCache<T> {
    pub feats: Vec<CtxFeatCache<T>>,
}

/// Builds the `(T/2) × (T/2)` comparison grid for a window of `T` shots:
/// cell `(a, b)` sums, over the given feature tensors, the cosine between
/// shot `a` (first half, center included) and shot `T/2 + b` (second half).
///
/// Cosines are accumulated in `f64` and left unclamped: rounding can push a
/// value past ±1 by at most a few ulps, and staying smooth there matters
/// more to gradient verification than cosmetic range enforcement.
pub fn context_similarity<T: Scalar>(feats: &[&Tensor<T>]) -> Result<(Tensor<T>, CtxCache<T>)> {
    let t = feats
        .first()
        .ok_or_else(|| Error::Invalid("comparison grid needs at least one modality".into()))?
        .rows();
    if t < 2 || t % 2 != 0 {
        return Err(Error::Invalid(format!(
            "comparison grid needs an even number of shots, got {t}"
        )));
    }
    let half = t / 2;
    let mut m = Tensor::zeros(&[half, half]);
    let mut cache = CtxCache { feats: Vec::new() };
    for x in feats {
        if x.rows() != t {
            return Err(Error::Invalid(format!(
                "modalities disagree on window length: {} vs {t}",
                x.rows()
            )));
        }
        let norms: Vec<f64> = (0..t)
            .map(|i| {
                x.row(i)
                    .iter()
                    .map(|v| v.as_f64().powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        if let Some(i) = norms.iter().position(|n| *n <= 0.0) {
            return Err(Error::Invalid(format!(
                "cannot compare zero-magnitude context features (row {i})"
            )));
        }
        let mut cos = Tensor::zeros(&[half, half]);
        for a in 0..half {
            for b in 0..half {
                let j = half + b;
                let dot: f64 = x
                    .row(a)
                    .iter()
                    .zip(x.row(j))
                    .map(|(&u, &v)| u.as_f64() * v.as_f64())
                    .sum();
                let c = dot / (norms[a] * norms[j]);
                cos.set(a, b, T::from_f64(c));
                *m.data_mut().get_mut(a * half + b).unwrap() += T::from_f64(c);
            }
        }
        cache.feats.push(CtxFeatCache {
            norms: norms.into_iter().map(T::from_f64).collect(),
            cos,
        });
    }
    Ok((m, cache))
}

/// Gradient of [`context_similarity`] with respect to each feature tensor,
/// returned in input order.
pub fn context_similarity_backward<T: Scalar>(
    feats: &[&Tensor<T>],
    cache: &CtxCache<T>,
    dm: &Tensor<T>,
) -> Vec<Tensor<T>> {
    let t = feats[0].rows();
    let half = t / 2;
    let mut out = Vec::with_capacity(feats.len());
    for (x, fc) in feats.iter().zip(&cache.feats) {
        let d = x.cols();
        let mut dx = Tensor::zeros(&[t, d]);
        for a in 0..half {
            for b in 0..half {
                let g = dm.at(a, b);
                if g == T::zero() {
                    continue;
                }
                let j = half + b;
                let (nu, nv) = (fc.norms[a], fc.norms[j]);
                let c = fc.cos.at(a, b);
                let inv = T::one() / (nu * nv);
                for k in 0..d {
                    let (u, v) = (x.at(a, k), x.at(j, k));
                    dx.data_mut()[a * d + k] += g * (v * inv - c * u / (nu * nu));
                    dx.data_mut()[j * d + k] += g * (u * inv - c * v / (nv * nv));
                }
            }
        }
        out.push(dx);
    }
    out
}

/// Slots of the convolutional boundary classifier.
#[derive(Clone, Debug)]
pub struct McdParams {
    pub conv1_w: SlotId,
    pub conv1_b: SlotId,
    pub conv2_w: SlotId,
    pub conv2_b: SlotId,
    pub conv3_w: SlotId,
    pub conv3_b: SlotId,
    pub conv4_w: SlotId,
    pub conv4_b: SlotId,
    pub fc1_w: SlotId,
    pub fc1_b: SlotId,
    pub fc2_w: SlotId,
    pub fc2_b: SlotId,
}

impl McdParams {
    /// Registers all classifier slots for a `side × side` comparison grid.
    /// Two halving pools require `side >= 4`.
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        side: usize,
    ) -> Result<Self> {
        if side < 4 {
            return Err(Error::Config(format!(
                "comparison grid side {side} too small: two halving pools need at least 4"
            )));
        }
        let flat = CONV_CHANNELS[4] * (side / 2 / 2).pow(2);
        let conv = |store: &mut ParamStore<T>,
                        rng: &mut R,
                        name: &str,
                        c_in: usize,
                        c_out: usize|
         -> Result<(SlotId, SlotId)> {
            let w = store.register(
                &format!("mcd.{name}.w"),
                init_uniform(
                    rng,
                    &[c_out, c_in, KERNEL, KERNEL],
                    c_in * KERNEL * KERNEL,
                    c_out * KERNEL * KERNEL,
                ),
            )?;
            let b = store.register(&format!("mcd.{name}.b"), Tensor::zeros(&[c_out]))?;
            Ok((w, b))
        };
        let (conv1_w, conv1_b) = conv(store, rng, "conv1", CONV_CHANNELS[0], CONV_CHANNELS[1])?;
        let (conv2_w, conv2_b) = conv(store, rng, "conv2", CONV_CHANNELS[1], CONV_CHANNELS[2])?;
        let (conv3_w, conv3_b) = conv(store, rng, "conv3", CONV_CHANNELS[2], CONV_CHANNELS[3])?;
        let (conv4_w, conv4_b) = conv(store, rng, "conv4", CONV_CHANNELS[3], CONV_CHANNELS[4])?;
        let fc1_w = store.register(
            "mcd.fc1.w",
            init_uniform(rng, &[flat, FC_HIDDEN], flat, FC_HIDDEN),
        )?;
        let fc1_b = store.register("mcd.fc1.b", Tensor::zeros(&[FC_HIDDEN]))?;
        let fc2_w = store.register("mcd.fc2.w", init_uniform(rng, &[FC_HIDDEN, 1], FC_HIDDEN, 1))?;
        let fc2_b = store.register("mcd.fc2.b", Tensor::zeros(&[1]))?;
        Ok(McdParams {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            conv3_w,
            conv3_b,
            conv4_w,
            conv4_b,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        })
    }
}

/// Every intermediate the classifier's backward pass (or staged
/// re-evaluation during gradient verification) needs.
pub struct McdCache<T> {
    /// Input grid as a one-channel activation `[1, side, side]`.
    pub m: Tensor<T>,
    pub z1: Tensor<T>,
    pub a1: Tensor<T>,
    pub z2: Tensor<T>,
    pub a2: Tensor<T>,
    pub p1: Tensor<T>,
    pub arg1: Vec<u32>,
    pub z3: Tensor<T>,
    pub a3: Tensor<T>,
    pub z4: Tensor<T>,
    pub a4: Tensor<T>,
    pub p2: Tensor<T>,
    pub arg2: Vec<u32>,
    pub flat: Tensor<T>,
    pub z5: Tensor<T>,
    pub a5: Tensor<T>,
    pub logit: T,
    pub yhat: T,
}

/// Scores one comparison grid: four 3×3 convolutions with a halving pool
/// after the second and fourth, then a two-layer classifier head ending in
/// a sigmoid.
pub fn encode_and_classify<T: Scalar>(
    store: &ParamStore<T>,
    params: &McdParams,
    m: &Tensor<T>,
) -> Result<(T, McdCache<T>)> {
    if m.shape().len() != 2 || m.rows() != m.cols() {
        return Err(Error::Invalid(format!(
            "comparison grid must be square, got {:?}",
            m.shape()
        )));
    }
    let side = m.rows();
    let flat_dim = CONV_CHANNELS[4] * (side / 2 / 2).pow(2);
    if side < 4 || store.get(params.fc1_w).rows() != flat_dim {
        return Err(Error::Invalid(format!(
            "comparison grid side {side} does not match the registered classifier"
        )));
    }
    let m3 = Tensor::from_vec(&[1, side, side], m.data().to_vec());

    let z1 = conv2d_forward(&m3, store.get(params.conv1_w), store.get(params.conv1_b));
    let a1 = relu_forward(&z1);
    let z2 = conv2d_forward(&a1, store.get(params.conv2_w), store.get(params.conv2_b));
    let a2 = relu_forward(&z2);
    let (p1, arg1) = maxpool2x2_forward(&a2);
    let z3 = conv2d_forward(&p1, store.get(params.conv3_w), store.get(params.conv3_b));
    let a3 = relu_forward(&z3);
    let z4 = conv2d_forward(&a3, store.get(params.conv4_w), store.get(params.conv4_b));
    let a4 = relu_forward(&z4);
    let (p2, arg2) = maxpool2x2_forward(&a4);
    let flat = Tensor::from_vec(&[1, flat_dim], p2.data().to_vec());
    let z5 = linear_forward(&flat, store.get(params.fc1_w), store.get(params.fc1_b));
    let a5 = relu_forward(&z5);
    let z6 = linear_forward(&a5, store.get(params.fc2_w), store.get(params.fc2_b));
    let logit = z6.data()[0];
    let yhat = sigmoid(logit);

    Ok((
        yhat,
        McdCache {
            m: m3,
            z1,
            a1,
            z2,
            a2,
            p1,
            arg1,
            z3,
            a3,
            z4,
            a4,
            p2,
            arg2,
            flat,
            z5,
            a5,
            logit,
            yhat,
        },
    ))
}

/// Accumulates classifier gradients and returns the gradient with respect
/// to the input grid (shape `[side, side]`).
pub fn encode_and_classify_backward<T: Scalar>(
    store: &ParamStore<T>,
    params: &McdParams,
    grads: &mut Gradients<T>,
    cache: &McdCache<T>,
    dyhat: T,
) -> Tensor<T> {
    let dlogit = dyhat * sigmoid_grad(cache.yhat);
    let dz6 = Tensor::from_vec(&[1, 1], vec![dlogit]);

    let (da5, dw, db) = linear_backward(&cache.a5, store.get(params.fc2_w), &dz6);
    grads.get_mut(params.fc2_w).add_scaled(&dw, T::one());
    grads.get_mut(params.fc2_b).add_scaled(&db, T::one());
    let dz5 = relu_backward(&cache.z5, &da5);
    let (dflat, dw, db) = linear_backward(&cache.flat, store.get(params.fc1_w), &dz5);
    grads.get_mut(params.fc1_w).add_scaled(&dw, T::one());
    grads.get_mut(params.fc1_b).add_scaled(&db, T::one());

    let dp2 = Tensor::from_vec(cache.p2.shape(), dflat.data().to_vec());
    let da4 = maxpool2x2_backward(cache.a4.shape(), &cache.arg2, &dp2);
    let dz4 = relu_backward(&cache.z4, &da4);
    let (da3, dw, db) = conv2d_backward(&cache.a3, store.get(params.conv4_w), &dz4);
    grads.get_mut(params.conv4_w).add_scaled(&dw, T::one());
    grads.get_mut(params.conv4_b).add_scaled(&db, T::one());
    let dz3 = relu_backward(&cache.z3, &da3);
    let (dp1, dw, db) = conv2d_backward(&cache.p1, store.get(params.conv3_w), &dz3);
    grads.get_mut(params.conv3_w).add_scaled(&dw, T::one());
    grads.get_mut(params.conv3_b).add_scaled(&db, T::one());

    let da2 = maxpool2x2_backward(cache.a2.shape(), &cache.arg1, &dp1);
    let dz2 = relu_backward(&cache.z2, &da2);
    let (da1, dw, db) = conv2d_backward(&cache.a1, store.get(params.conv2_w), &dz2);
    grads.get_mut(params.conv2_w).add_scaled(&dw, T::one());
    grads.get_mut(params.conv2_b).add_scaled(&db, T::one());
    let dz1 = relu_backward(&cache.z1, &da1);
    let (dm3, dw, db) = conv2d_backward(&cache.m, store.get(params.conv1_w), &dz1);
    grads.get_mut(params.conv1_w).add_scaled(&dw, T::one());
    grads.get_mut(params.conv1_b).add_scaled(&db, T::one());

    let side = cache.m.shape()[1];
    Tensor::from_vec(&[side, side], dm3.data().to_vec())
}

/// Which feature streams feed the comparison grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Entity,
    Place,
    Both,
}

impl Modality {
    pub fn entity_active(self) -> bool {
        matches!(self, Modality::Entity | Modality::Both)
    }

    pub fn place_active(self) -> bool {
        matches!(self, Modality::Place | Modality::Both)
    }
}

fn default_true() -> bool {
    true
}

/// Modality selection plus per-stream switches for the two graph smoothing
/// stacks; with a switch off, that stream's raw features feed the grid
/// directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub modality: Modality,
    #[serde(default = "default_true")]
    pub eld: bool,
    #[serde(default = "default_true")]
    pub psd: bool,
}

impl Default for ModalityConfig {
    fn default() -> Self {
        ModalityConfig {
            modality: Modality::Both,
            eld: true,
            psd: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Window length in shots; even, at least 8.
    pub t: usize,
    /// Neighbors kept per shot in the entity graph.
    pub k: usize,
    pub dim_entity: usize,
    pub dim_place: usize,
    #[serde(default)]
    pub modality: ModalityConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t < 8 || self.t % 2 != 0 {
            return Err(Error::Config(format!(
                "window length must be even and at least 8, got {}",
                self.t
            )));
        }
        if self.k == 0 || self.k > self.t - 1 {
            return Err(Error::Config(format!(
                "neighbor count k={} out of range for window length {}",
                self.k, self.t
            )));
        }
        if self.dim_entity == 0 || self.dim_place == 0 {
            return Err(Error::Config("feature dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Side of the comparison grid.
    pub fn side(&self) -> usize {
        self.t / 2
    }
}

/// The full boundary detector: optional per-modality graph smoothing stacks
/// feeding the comparison grid and its convolutional classifier.
pub struct MasrcModel {
    pub cfg: ModelConfig,
    pub eld: Option<EjgParams>,
    pub psd: Option<PcgParams>,
    pub mcd: McdParams,
}

pub struct ModelCache<T> {
    /// Long-range (entity) features entering the grid, when active.
    pub lr: Option<Tensor<T>>,
    pub eld: Option<EldCache<T>>,
    /// Short-range (place) features entering the grid, when active.
    pub sr: Option<Tensor<T>>,
    pub psd: Option<PsdCache<T>>,
    pub ctx: CtxCache<T>,
    pub mcd: McdCache<T>,
}

impl MasrcModel {
    /// Validates the configuration and registers every needed slot, in a
    /// fixed order: entity stack, place stack, classifier.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: ModelConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.modality;
        let eld = if m.modality.entity_active() && m.eld {
            Some(EjgParams::register(store, rng, cfg.dim_entity)?)
        } else {
            None
        };
        let psd = if m.modality.place_active() && m.psd {
            Some(PcgParams::register(store, rng, cfg.dim_place)?)
        } else {
            None
        };
        let mcd = McdParams::register(store, rng, cfg.side())?;
        Ok(MasrcModel { cfg, eld, psd, mcd })
    }

    /// Scores the window's center shot as a scene boundary. `entity` and
    /// `place` are the `[T, d]` feature windows; only active modalities are
    /// read.
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        entity: &Tensor<T>,
        place: &Tensor<T>,
    ) -> Result<(T, ModelCache<T>)> {
        let t = self.cfg.t;
        let m = self.cfg.modality.modality;

        let (lr, eld_cache) = if m.entity_active() {
            self.check_window(entity, t, self.cfg.dim_entity, "entity")?;
            match &self.eld {
                Some(p) => {
                    let (y, c) = eld_forward(store, p, entity, self.cfg.k)?;
                    (Some(y), Some(c))
                }
                None => (Some(entity.clone()), None),
            }
        } else {
            (None, None)
        };
        let (sr, psd_cache) = if m.place_active() {
            self.check_window(place, t, self.cfg.dim_place, "place")?;
            match &self.psd {
                Some(p) => {
                    let (y, c) = psd_forward(store, p, place)?;
                    (Some(y), Some(c))
                }
                None => (Some(place.clone()), None),
            }
        } else {
            (None, None)
        };

        let feats: Vec<&Tensor<T>> = lr.iter().chain(sr.iter()).collect();
        let (grid, ctx) = context_similarity(&feats)?;
        let (yhat, mcd) = encode_and_classify(store, &self.mcd, &grid)?;
        Ok((
            yhat,
            ModelCache {
                lr,
                eld: eld_cache,
                sr,
                psd: psd_cache,
                ctx,
                mcd,
            },
        ))
    }

    fn check_window<T: Scalar>(
        &self,
        x: &Tensor<T>,
        t: usize,
        dim: usize,
        name: &str,
    ) -> Result<()> {
        if x.rows() != t || x.cols() != dim {
            return Err(Error::Invalid(format!(
                "{name} window has shape [{}, {}], model expects [{t}, {dim}]",
                x.rows(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// Accumulates gradients for every trainable slot from the gradient of
    /// the loss with respect to the boundary score. Input feature gradients
    /// stop at the window (the features themselves are data).
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Gradients<T>,
        cache: &ModelCache<T>,
        dyhat: T,
    ) {
        let dgrid = encode_and_classify_backward(store, &self.mcd, grads, &cache.mcd, dyhat);
        let feats: Vec<&Tensor<T>> = cache.lr.iter().chain(cache.sr.iter()).collect();
        let dfeats = context_similarity_backward(&feats, &cache.ctx, &dgrid);
        let mut it = dfeats.into_iter();
        if cache.lr.is_some() {
            let dlr = it.next().expect("gradient for the entity stream");
            if let (Some(p), Some(c)) = (&self.eld, &cache.eld) {
                eld_backward(store, p, grads, c, &dlr);
            }
        }
        if cache.sr.is_some() {
            let dsr = it.next().expect("gradient for the place stream");
            if let (Some(p), Some(c)) = (&self.psd, &cache.psd) {
                psd_backward(store, p, grads, c, &dsr);
            }
        }
    }

    /// Convenience wrapper: forward, binary cross-entropy against `label`,
    /// and backward in one call. Returns `(score, loss)`.
    pub fn step<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Gradients<T>,
        entity: &Tensor<T>,
        place: &Tensor<T>,
        label: T,
    ) -> Result<(T, T)> {
        let (yhat, cache) = self.forward(store, entity, place)?;
        let loss = bce_loss(yhat, label);
        self.backward(store, grads, &cache, bce_grad(yhat, label));
        Ok((yhat, loss))
    }
}
