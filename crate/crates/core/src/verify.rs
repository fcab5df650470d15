//! Whole-model gradient verification in double precision.
//!
//! Central finite differences over every trainable slot are expensive
//! because each probe re-evaluates the model twice. Perturbing a classifier
//! weight, however, cannot change anything upstream of its layer, so the
//! suite caches the nominal activations once per seed and re-computes only
//! the affected output channel plus everything downstream of it; graph-side
//! slots (which reshape the comparison grid itself) fall back to a full
//! forward pass. Staged and full evaluations agree bit-for-bit on unchanged
//! parameters, which a unit test pins down.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport, KinkInfo, KinkTracker};
use crate::mcd::{MasrcModel, McdParams, Modality, ModalityConfig, ModelCache, ModelConfig};
use crate::ops::{
    bce_grad, bce_loss, conv2d_add_single_input_channel, conv2d_forward, conv2d_single_channel,
    linear_forward, maxpool2x2_forward, maxpool2x2_margin, relu_forward, sigmoid,
};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

/// Borrowed view of every classifier tensor that carries a kink decision;
/// staged paths mix nominal and re-computed tensors here.
struct CnnKinkView<'a> {
    z1: &'a Tensor<f64>,
    z2: &'a Tensor<f64>,
    a2: &'a Tensor<f64>,
    arg1: &'a [u32],
    z3: &'a Tensor<f64>,
    z4: &'a Tensor<f64>,
    a4: &'a Tensor<f64>,
    arg2: &'a [u32],
    z5: &'a Tensor<f64>,
}

impl<'a> CnnKinkView<'a> {
    fn of(c: &'a crate::mcd::McdCache<f64>) -> Self {
        CnnKinkView {
            z1: &c.z1,
            z2: &c.z2,
            a2: &c.a2,
            arg1: &c.arg1,
            z3: &c.z3,
            z4: &c.z4,
            a4: &c.a4,
            arg2: &c.arg2,
            z5: &c.z5,
        }
    }
}

/// Collects the kink decisions of one evaluation, in a fixed order shared
/// by nominal, full, and staged paths: graph pre-activations first, then
/// the classifier's rectifier inputs and pooling selections.
fn kinks(graph_src: &ModelCache<f64>, v: &CnnKinkView) -> KinkInfo {
    let mut t = KinkTracker::new();
    if let Some(e) = &graph_src.eld {
        t.note_relu(e.b1.pre_act.data());
        t.note_relu(e.b2.pre_act.data());
    }
    if let Some(p) = &graph_src.psd {
        // Zeros here are structural: they are the messages of rows with no
        // incoming edges, locally constant rather than kinked.
        t.note_relu_skip_exact_zero(p.b1.pre_act.data());
        t.note_relu_skip_exact_zero(p.b2.pre_act.data());
    }
    t.note_relu(v.z1.data());
    t.note_relu(v.z2.data());
    t.note_pool(v.arg1, maxpool2x2_margin(v.a2));
    t.note_relu(v.z3.data());
    t.note_relu(v.z4.data());
    t.note_pool(v.arg2, maxpool2x2_margin(v.a4));
    t.note_relu(v.z5.data());
    t.finish()
}

fn full_eval(
    model: &MasrcModel,
    store: &ParamStore<f64>,
    entity: &Tensor<f64>,
    place: &Tensor<f64>,
    label: f64,
) -> (f64, KinkInfo, ModelCache<f64>) {
    let (yhat, cache) = model
        .forward(store, entity, place)
        .expect("forward pass during verification");
    let loss = bce_loss(yhat, label);
    let info = kinks(&cache, &CnnKinkView::of(&cache.mcd));
    (loss, info, cache)
}

/// Rectifier matching `relu_forward` bit-for-bit (`-0.0` passes through).
fn rect(z: f64) -> f64 {
    if z < 0.0 {
        0.0
    } else {
        z
    }
}

/// Classifier head from the flattened features; returns the hidden
/// pre-activation (for kink tracking) and the loss.
fn head(
    store: &ParamStore<f64>,
    p: &McdParams,
    flat: &Tensor<f64>,
    label: f64,
) -> (Tensor<f64>, f64) {
    let z5 = linear_forward(flat, store.get(p.fc1_w), store.get(p.fc1_b));
    let a5 = relu_forward(&z5);
    let z6 = linear_forward(&a5, store.get(p.fc2_w), store.get(p.fc2_b));
    let loss = bce_loss(sigmoid(z6.data()[0]), label);
    (z5, loss)
}

fn flatten(p2: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_vec(&[1, p2.len()], p2.data().to_vec())
}

/// Re-evaluates the model after one classifier entry changed, reusing the
/// nominal caches for everything the change cannot reach. `name` must be an
/// `mcd.*` slot of `params`.
fn staged_eval(
    store: &ParamStore<f64>,
    params: &McdParams,
    nominal: &ModelCache<f64>,
    name: &str,
    idx: usize,
    label: f64,
) -> (f64, KinkInfo) {
    let nc = &nominal.mcd;
    let (h, w) = (nc.m.shape()[1], nc.m.shape()[2]);
    let hw = h * w;
    let (ph, pw) = (h / 2, w / 2);
    let phw = ph * pw;

    match name {
        "mcd.conv1.w" | "mcd.conv1.b" => {
            let oc = if name.ends_with(".w") { idx / 9 } else { idx };
            let w1 = store.get(params.conv1_w);
            let fresh = conv2d_single_channel(
                &nc.m,
                &w1.data()[oc * 9..(oc + 1) * 9],
                store.get(params.conv1_b).data()[oc],
                3,
            );
            let mut z1 = nc.z1.clone();
            z1.data_mut()[oc * hw..][..hw].copy_from_slice(&fresh);
            let delta: Vec<f64> = fresh
                .iter()
                .zip(&nc.a1.data()[oc * hw..][..hw])
                .map(|(&z, &a)| rect(z) - a)
                .collect();
            let mut z2 = nc.z2.clone();
            conv2d_add_single_input_channel(&mut z2, store.get(params.conv2_w), oc, &delta, h, w);
            let a2 = relu_forward(&z2);
            let (p1, arg1) = maxpool2x2_forward(&a2);
            let z3 = conv2d_forward(&p1, store.get(params.conv3_w), store.get(params.conv3_b));
            let a3 = relu_forward(&z3);
            let z4 = conv2d_forward(&a3, store.get(params.conv4_w), store.get(params.conv4_b));
            let a4 = relu_forward(&z4);
            let (p2, arg2) = maxpool2x2_forward(&a4);
            let (z5, loss) = head(store, params, &flatten(&p2), label);
            let v = CnnKinkView {
                z1: &z1,
                z2: &z2,
                a2: &a2,
                arg1: &arg1,
                z3: &z3,
                z4: &z4,
                a4: &a4,
                arg2: &arg2,
                z5: &z5,
            };
            (loss, kinks(nominal, &v))
        }
        "mcd.conv2.w" | "mcd.conv2.b" => {
            let oc = if name.ends_with(".w") {
                idx / (32 * 9)
            } else {
                idx
            };
            let w2 = store.get(params.conv2_w);
            let fresh = conv2d_single_channel(
                &nc.a1,
                &w2.data()[oc * 32 * 9..(oc + 1) * 32 * 9],
                store.get(params.conv2_b).data()[oc],
                3,
            );
            let mut z2 = nc.z2.clone();
            z2.data_mut()[oc * hw..][..hw].copy_from_slice(&fresh);
            let mut a2 = nc.a2.clone();
            for (dst, &z) in a2.data_mut()[oc * hw..][..hw].iter_mut().zip(&fresh) {
                *dst = rect(z);
            }
            // Only this channel's pooling changes; re-run it in isolation
            // and relocate the local argmax indices.
            let chan = Tensor::from_vec(&[1, h, w], a2.data()[oc * hw..][..hw].to_vec());
            let (pc, pa) = maxpool2x2_forward(&chan);
            let delta: Vec<f64> = pc
                .data()
                .iter()
                .zip(&nc.p1.data()[oc * phw..][..phw])
                .map(|(&n, &o)| n - o)
                .collect();
            let mut p1 = nc.p1.clone();
            p1.data_mut()[oc * phw..][..phw].copy_from_slice(pc.data());
            let mut arg1 = nc.arg1.clone();
            for (dst, &a) in arg1[oc * phw..][..phw].iter_mut().zip(&pa) {
                *dst = a + (oc * hw) as u32;
            }
            let mut z3 = nc.z3.clone();
            conv2d_add_single_input_channel(&mut z3, store.get(params.conv3_w), oc, &delta, ph, pw);
            let a3 = relu_forward(&z3);
            let z4 = conv2d_forward(&a3, store.get(params.conv4_w), store.get(params.conv4_b));
            let a4 = relu_forward(&z4);
            let (p2, arg2) = maxpool2x2_forward(&a4);
            let (z5, loss) = head(store, params, &flatten(&p2), label);
            let v = CnnKinkView {
                z1: &nc.z1,
                z2: &z2,
                a2: &a2,
                arg1: &arg1,
                z3: &z3,
                z4: &z4,
                a4: &a4,
                arg2: &arg2,
                z5: &z5,
            };
            (loss, kinks(nominal, &v))
        }
        "mcd.conv3.w" | "mcd.conv3.b" => {
            let oc = if name.ends_with(".w") {
                idx / (64 * 9)
            } else {
                idx
            };
            let w3 = store.get(params.conv3_w);
            let fresh = conv2d_single_channel(
                &nc.p1,
                &w3.data()[oc * 64 * 9..(oc + 1) * 64 * 9],
                store.get(params.conv3_b).data()[oc],
                3,
            );
            let mut z3 = nc.z3.clone();
            z3.data_mut()[oc * phw..][..phw].copy_from_slice(&fresh);
            let delta: Vec<f64> = fresh
                .iter()
                .zip(&nc.a3.data()[oc * phw..][..phw])
                .map(|(&z, &a)| rect(z) - a)
                .collect();
            let mut z4 = nc.z4.clone();
            conv2d_add_single_input_channel(&mut z4, store.get(params.conv4_w), oc, &delta, ph, pw);
            let a4 = relu_forward(&z4);
            let (p2, arg2) = maxpool2x2_forward(&a4);
            let (z5, loss) = head(store, params, &flatten(&p2), label);
            let v = CnnKinkView {
                z1: &nc.z1,
                z2: &nc.z2,
                a2: &nc.a2,
                arg1: &nc.arg1,
                z3: &z3,
                z4: &z4,
                a4: &a4,
                arg2: &arg2,
                z5: &z5,
            };
            (loss, kinks(nominal, &v))
        }
        "mcd.conv4.w" | "mcd.conv4.b" => {
            let oc = if name.ends_with(".w") {
                idx / (64 * 9)
            } else {
                idx
            };
            let w4 = store.get(params.conv4_w);
            let fresh = conv2d_single_channel(
                &nc.a3,
                &w4.data()[oc * 64 * 9..(oc + 1) * 64 * 9],
                store.get(params.conv4_b).data()[oc],
                3,
            );
            let mut z4 = nc.z4.clone();
            z4.data_mut()[oc * phw..][..phw].copy_from_slice(&fresh);
            let mut a4 = nc.a4.clone();
            for (dst, &z) in a4.data_mut()[oc * phw..][..phw].iter_mut().zip(&fresh) {
                *dst = rect(z);
            }
            let chan = Tensor::from_vec(&[1, ph, pw], a4.data()[oc * phw..][..phw].to_vec());
            let (pc, pa) = maxpool2x2_forward(&chan);
            let q = (ph / 2) * (pw / 2);
            let mut p2 = nc.p2.clone();
            p2.data_mut()[oc * q..][..q].copy_from_slice(pc.data());
            let mut arg2 = nc.arg2.clone();
            for (dst, &a) in arg2[oc * q..][..q].iter_mut().zip(&pa) {
                *dst = a + (oc * phw) as u32;
            }
            let (z5, loss) = head(store, params, &flatten(&p2), label);
            let v = CnnKinkView {
                z1: &nc.z1,
                z2: &nc.z2,
                a2: &nc.a2,
                arg1: &nc.arg1,
                z3: &nc.z3,
                z4: &z4,
                a4: &a4,
                arg2: &arg2,
                z5: &z5,
            };
            (loss, kinks(nominal, &v))
        }
        "mcd.fc1.w" | "mcd.fc1.b" => {
            let (z5, loss) = head(store, params, &nc.flat, label);
            let mut v = CnnKinkView::of(nc);
            v.z5 = &z5;
            let info = kinks(nominal, &v);
            (loss, info)
        }
        "mcd.fc2.w" | "mcd.fc2.b" => {
            let z6 = linear_forward(&nc.a5, store.get(params.fc2_w), store.get(params.fc2_b));
            let loss = bce_loss(sigmoid(z6.data()[0]), label);
            (loss, kinks(nominal, &CnnKinkView::of(nc)))
        }
        other => unreachable!("unknown classifier slot '{other}'"),
    }
}

pub struct SeedRun {
    pub seed: u64,
    pub report: GradCheckReport,
}

/// Aggregated result of the multi-seed gradient suite.
pub struct SuiteReport {
    pub runs: Vec<SeedRun>,
    pub elapsed: Duration,
}

impl SuiteReport {
    /// True when every compared entry of every seed is within `tol` and at
    /// least one entry was compared.
    pub fn passed(&self, tol: f64) -> bool {
        !self.runs.is_empty()
            && self.runs.iter().all(|r| r.report.passed(tol))
            && self.total_checked() > 0
    }

    pub fn max_rel_err(&self) -> f64 {
        self.runs
            .iter()
            .map(|r| r.report.max_rel_err())
            .fold(0.0, f64::max)
    }

    pub fn total_checked(&self) -> usize {
        self.runs.iter().map(|r| r.report.total_checked()).sum()
    }

    pub fn total_skipped(&self) -> usize {
        self.runs.iter().map(|r| r.report.total_skipped()).sum()
    }

    /// Entries compared per slot name, summed across seeds — used to assert
    /// that kink exclusions never blind the suite to a whole slot.
    pub fn slot_coverage(&self) -> BTreeMap<String, usize> {
        let mut cov = BTreeMap::new();
        for run in &self.runs {
            for slot in &run.report.slots {
                *cov.entry(slot.name.clone()).or_insert(0) += slot.checked;
            }
        }
        cov
    }
}

/// Runs the finite-difference suite over fresh double-precision models (both
/// modalities, both graph stacks) on random windows, one model per seed.
pub fn run_model_grad_suite(seeds: &[u64], t: usize, dim: usize) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store: ParamStore<f64> = ParamStore::new();
        let cfg = ModelConfig {
            t,
            k: 4.min(t - 1),
            dim_entity: dim,
            dim_place: dim,
            modality: ModalityConfig {
                modality: Modality::Both,
                eld: true,
                psd: true,
            },
        };
        let model = MasrcModel::new(&mut store, &mut rng, cfg)?;
        let mut entity = Tensor::zeros(&[t, dim]);
        let mut place = Tensor::zeros(&[t, dim]);
        for v in entity.data_mut().iter_mut().chain(place.data_mut()) {
            *v = rng.gen_range(-1.0..1.0);
        }
        let label = (seed % 2) as f64;

        let (yhat, cache) = model.forward(&store, &entity, &place)?;
        let mut grads = Gradients::zeros_like(&store);
        model.backward(&store, &mut grads, &cache, bce_grad(yhat, label));

        let mut nominal: Option<ModelCache<f64>> = None;
        let report = grad_check(&mut store, &grads, 1e-3, |s, target| match target {
            None => {
                let (loss, info, cache) = full_eval(&model, s, &entity, &place, label);
                nominal = Some(cache);
                (loss, info)
            }
            Some((slot, idx)) => {
                let name = s.name(slot);
                if name.starts_with("mcd.") {
                    staged_eval(
                        s,
                        &model.mcd,
                        nominal.as_ref().expect("nominal evaluation first"),
                        name,
                        idx,
                        label,
                    )
                } else {
                    let (loss, info, _) = full_eval(&model, s, &entity, &place, label);
                    (loss, info)
                }
            }
        });
        runs.push(SeedRun { seed, report });
    }
    Ok(SuiteReport {
        runs,
        elapsed: start.elapsed(),
    })
}
