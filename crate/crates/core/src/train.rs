//! Adam optimization of the boundary detector under three labeling
//! regimes — supervised, self-supervised (pseudo boundaries), and transfer
//! (self-supervised pre-training followed by supervised fine-tuning) — with
//! linear warmup into a cosine learning-rate schedule, seeded shuffling,
//! early stopping on validation average precision, and bit-reproducible
//! runs regardless of worker count.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{cut_window, ShotSequence};
use crate::error::{Error, Result};
use crate::mcd::{MasrcModel, ModalityConfig, ModelConfig};
use crate::metrics::{average_precision, f1_at, miou, MiouMode, SceneSegmentation};
use crate::ops::{bce_grad, bce_loss};
use crate::params::{Gradients, ParamStore, SlotId};
use crate::tensor::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Windows per parallel work unit. Fixed (never derived from the worker
/// count) so gradient accumulation order — and therefore every trained
/// bit — is identical no matter how many threads run.
const PAR_CHUNK: usize = 8;

fn worker_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("MASRC_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|n| *n >= 1)
        {
            builder = builder.num_threads(n);
        }
        builder.build().expect("worker pool construction")
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Supervised,
    SelfSupervised,
    Transfer,
}

fn default_patience() -> usize {
    5
}

fn default_threshold() -> f64 {
    0.5
}

fn default_miou_mode() -> MiouMode {
    MiouMode::Symmetric
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Window length in shots.
    pub t: usize,
    /// Entity-graph neighbors per shot.
    pub k: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub modality: ModalityConfig,
    /// Peak learning rate of the supervised fine-tuning phase; required by
    /// (and only meaningful for) the transfer regime.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fine_tune_lr: Option<f64>,
    /// Epochs without a validation improvement before stopping early.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Score threshold that turns predictions into boundaries.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_miou_mode")]
    pub miou_mode: MiouMode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Config(format!(
                "peak_lr must be positive, got {}",
                self.peak_lr
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.threshold.is_finite() && (0.0..=1.0).contains(&self.threshold)) {
            return Err(Error::Config(format!(
                "threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        match (self.regime, self.fine_tune_lr) {
            (Regime::Transfer, None) => Err(Error::Config(
                "transfer regime needs fine_tune_lr for its supervised phase".into(),
            )),
            (Regime::Transfer, Some(lr)) if !(lr.is_finite() && lr > 0.0) => Err(Error::Config(
                format!("fine_tune_lr must be positive, got {lr}"),
            )),
            _ => Ok(()),
        }
    }

    fn model_config(&self, dim_entity: usize, dim_place: usize) -> ModelConfig {
        ModelConfig {
            t: self.t,
            k: self.k,
            dim_entity,
            dim_place,
            modality: self.modality,
        }
    }
}

/// Learning rate at `step`: a linear ramp from 0 to `peak` over the warmup,
/// then a half-cosine decay toward 0 across the remaining steps.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, peak: f64) -> f64 {
    debug_assert!(warmup_steps >= 1 && step < total_steps);
    if step < warmup_steps {
        peak * step as f64 / warmup_steps as f64
    } else {
        let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
        peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with bias correction; per-entry arithmetic runs in `f64` whatever
/// the parameter precision.
pub struct Adam<T> {
    m: Vec<crate::tensor::Tensor<T>>,
    v: Vec<crate::tensor::Tensor<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<_> = store
            .iter()
            .map(|(_, _, t)| crate::tensor::Tensor::zeros(t.shape()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One update over every slot. Refuses to apply non-finite gradients,
    /// naming the offending slot.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &Gradients<T>,
        lr: f64,
    ) -> Result<()> {
        if let Some(i) = grads.first_non_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient in slot '{}'",
                store.name(SlotId(i))
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads.get(id);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.get_mut(id);
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                let g64 = gv.as_f64();
                let m64 = ADAM_BETA1 * mv.as_f64() + (1.0 - ADAM_BETA1) * g64;
                let v64 = ADAM_BETA2 * vv.as_f64() + (1.0 - ADAM_BETA2) * g64 * g64;
                *mv = T::from_f64(m64);
                *vv = T::from_f64(v64);
                let update = lr * (m64 / bc1) / ((v64 / bc2).sqrt() + ADAM_EPS);
                *pv = T::from_f64(pv.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Which per-shot labels supervise a phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelSource {
    Annotated,
    Pseudo,
}

fn labels_of<'a>(seq: &'a ShotSequence, src: LabelSource) -> Result<&'a [u8]> {
    let (labels, what) = match src {
        LabelSource::Annotated => (&seq.labels, "annotated"),
        LabelSource::Pseudo => (&seq.pseudo_labels, "pseudo"),
    };
    labels.as_deref().ok_or_else(|| {
        Error::Invalid(format!(
            "video '{}' has no {what} labels, required by the selected regime",
            seq.video_id
        ))
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub ap: f64,
    pub miou: f64,
    pub f1: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VideoEval {
    pub video_id: String,
    /// Undefined (and omitted) when the video has no positive label.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
    pub miou: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SplitEval {
    /// Average precision pooled over every window of the split.
    pub ap: f64,
    /// Mean over videos of the segmentation overlap.
    pub miou: f64,
    /// F1 pooled over every window at the configured threshold.
    pub f1: f64,
    /// Mean binary cross-entropy over every window.
    pub loss: f64,
    /// Mean of the per-video average precisions, where defined.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_video_mean_ap: Option<f64>,
    pub per_video: Vec<VideoEval>,
}

/// Boundary scores for every shot of one video, in shot order.
pub fn score_video(
    store: &ParamStore<f32>,
    model: &MasrcModel,
    seq: &ShotSequence,
) -> Result<Vec<f64>> {
    let t_len = model.cfg.t;
    let idx: Vec<usize> = (0..seq.num_shots()).collect();
    worker_pool().install(|| {
        let chunks: Result<Vec<Vec<f64>>> = idx
            .par_chunks(PAR_CHUNK)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|&t| {
                        let w = cut_window(seq, t, t_len)?;
                        let (yhat, _) = model.forward(store, &w.entity, &w.place)?;
                        Ok(yhat as f64)
                    })
                    .collect()
            })
            .collect();
        Ok(chunks?.into_iter().flatten().collect())
    })
}

/// Scores every video of a split and aggregates the boundary metrics, both
/// pooled across the split and per video.
pub fn evaluate_split(
    store: &ParamStore<f32>,
    model: &MasrcModel,
    videos: &[ShotSequence],
    src: LabelSource,
    threshold: f64,
    miou_mode: MiouMode,
) -> Result<SplitEval> {
    if videos.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty split".into()));
    }
    let mut pooled_scores = Vec::new();
    let mut pooled_labels = Vec::new();
    let mut loss_sum = 0.0;
    let mut per_video = Vec::with_capacity(videos.len());
    for seq in videos {
        let scores = score_video(store, model, seq)?;
        let labels = labels_of(seq, src)?;
        loss_sum += scores
            .iter()
            .zip(labels)
            .map(|(&s, &l)| bce_loss(s, l as f64))
            .sum::<f64>();
        let pred_bounds: Vec<u8> = scores.iter().map(|&s| (s >= threshold) as u8).collect();
        let pred_seg = SceneSegmentation::from_boundaries(&pred_bounds)?;
        let gt_seg = SceneSegmentation::from_boundaries(labels)?;
        per_video.push(VideoEval {
            video_id: seq.video_id.clone(),
            ap: average_precision(&scores, labels).ok(),
            miou: miou(&pred_seg, &gt_seg, miou_mode)?,
            f1: f1_at(&scores, labels, threshold)?,
        });
        pooled_scores.extend_from_slice(&scores);
        pooled_labels.extend_from_slice(labels);
    }
    let defined: Vec<f64> = per_video.iter().filter_map(|v| v.ap).collect();
    Ok(SplitEval {
        ap: average_precision(&pooled_scores, &pooled_labels)?,
        miou: per_video.iter().map(|v| v.miou).sum::<f64>() / per_video.len() as f64,
        f1: f1_at(&pooled_scores, &pooled_labels, threshold)?,
        loss: loss_sum / pooled_scores.len() as f64,
        per_video_mean_ap: if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        },
        per_video,
    })
}

pub struct TrainOutput {
    pub store: ParamStore<f32>,
    pub model: MasrcModel,
    pub log: Vec<EpochRecord>,
    pub best_val_ap: f64,
    pub epochs_run: usize,
    /// Transfer regime only: checksums of the parameters at the end of
    /// pre-training and the start of fine-tuning (equal by construction).
    pub phase_checksums: Option<(u64, u64)>,
}

struct PhaseResult {
    best_val_ap: f64,
    epochs_run: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    store: &mut ParamStore<f32>,
    model: &MasrcModel,
    train_set: &[ShotSequence],
    val_set: &[ShotSequence],
    src: LabelSource,
    peak_lr: f64,
    cfg: &TrainConfig,
    epoch_offset: usize,
    log: &mut Vec<EpochRecord>,
) -> Result<PhaseResult> {
    let windows: Vec<(usize, usize)> = train_set
        .iter()
        .enumerate()
        .flat_map(|(vi, seq)| (0..seq.num_shots()).map(move |t| (vi, t)))
        .collect();
    let steps_per_epoch = windows.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = steps_per_epoch;

    let mut adam = Adam::new(store);
    let mut best_ap = f64::NEG_INFINITY;
    let mut best_snapshot = store.snapshot();
    let mut stale_epochs = 0;
    let mut epochs_run = 0;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order = windows.clone();
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add((epoch_offset + epoch + 1) as u64));
        order.shuffle(&mut rng);

        for batch in order.chunks(cfg.batch_size) {
            let lr = lr_at(step, total_steps, warmup_steps, peak_lr);
            step += 1;
            let parts: Result<Vec<(Gradients<f32>, f64)>> = worker_pool().install(|| {
                batch
                    .par_chunks(PAR_CHUNK)
                    .map(|chunk| {
                        let mut g = Gradients::zeros_like(store);
                        let mut loss = 0.0f64;
                        for &(vi, t) in chunk {
                            let seq = &train_set[vi];
                            let w = cut_window(seq, t, cfg.t)?;
                            let label = labels_of(seq, src)?[t] as f32;
                            let (yhat, cache) = model.forward(store, &w.entity, &w.place)?;
                            loss += bce_loss(yhat, label) as f64;
                            model.backward(store, &mut g, &cache, bce_grad(yhat, label));
                        }
                        Ok((g, loss))
                    })
                    .collect()
            });
            let mut grads = Gradients::zeros_like(store);
            for (g, _) in parts? {
                grads.add_from(&g);
            }
            grads.scale(1.0 / batch.len() as f32);
            adam.step(store, &grads, lr)?;
        }
        epochs_run = epoch + 1;

        let train_eval =
            evaluate_split(store, model, train_set, src, cfg.threshold, cfg.miou_mode)?;
        let val_eval = evaluate_split(store, model, val_set, src, cfg.threshold, cfg.miou_mode)?;
        for (split, eval) in [("train", &train_eval), ("val", &val_eval)] {
            log.push(EpochRecord {
                epoch: epoch_offset + epoch,
                split: split.to_string(),
                ap: eval.ap,
                miou: eval.miou,
                f1: eval.f1,
                loss: eval.loss,
            });
        }

        if val_eval.ap > best_ap {
            best_ap = val_eval.ap;
            best_snapshot = store.snapshot();
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.patience {
                break;
            }
        }
    }
    store.restore(&best_snapshot);
    Ok(PhaseResult {
        best_val_ap: best_ap,
        epochs_run,
    })
}

fn check_dataset(cfg: &TrainConfig, sets: [&[ShotSequence]; 2]) -> Result<(usize, usize)> {
    let first = sets[0]
        .first()
        .or_else(|| sets[1].first())
        .ok_or_else(|| Error::Invalid("cannot train on an empty dataset".into()))?;
    if sets.iter().any(|s| s.is_empty()) {
        return Err(Error::Invalid(
            "training needs both a train and a validation split".into(),
        ));
    }
    let dims = (first.entity.cols(), first.place.cols());
    for seq in sets.iter().flat_map(|s| s.iter()) {
        if (seq.entity.cols(), seq.place.cols()) != dims {
            return Err(Error::Invalid(format!(
                "video '{}' has feature dims ({}, {}), expected ({}, {})",
                seq.video_id,
                seq.entity.cols(),
                seq.place.cols(),
                dims.0,
                dims.1
            )));
        }
        // Fail on missing labels before any optimization happens.
        match cfg.regime {
            Regime::Supervised => {
                labels_of(seq, LabelSource::Annotated)?;
            }
            Regime::SelfSupervised => {
                labels_of(seq, LabelSource::Pseudo)?;
            }
            Regime::Transfer => {
                labels_of(seq, LabelSource::Annotated)?;
                labels_of(seq, LabelSource::Pseudo)?;
            }
        }
    }
    Ok(dims)
}

/// Trains a fresh model and returns the parameters of the epoch with the
/// best validation average precision, together with the per-epoch log.
pub fn train(
    train_set: &[ShotSequence],
    val_set: &[ShotSequence],
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let (dim_entity, dim_place) = check_dataset(cfg, [train_set, val_set])?;

    let mut store: ParamStore<f32> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = MasrcModel::new(&mut store, &mut rng, cfg.model_config(dim_entity, dim_place))?;
    let mut log = Vec::new();

    let (result, phase_checksums) = match cfg.regime {
        Regime::Supervised => (
            run_phase(
                &mut store,
                &model,
                train_set,
                val_set,
                LabelSource::Annotated,
                cfg.peak_lr,
                cfg,
                0,
                &mut log,
            )?,
            None,
        ),
        Regime::SelfSupervised => (
            run_phase(
                &mut store,
                &model,
                train_set,
                val_set,
                LabelSource::Pseudo,
                cfg.peak_lr,
                cfg,
                0,
                &mut log,
            )?,
            None,
        ),
        Regime::Transfer => {
            let pre = run_phase(
                &mut store,
                &model,
                train_set,
                val_set,
                LabelSource::Pseudo,
                cfg.peak_lr,
                cfg,
                0,
                &mut log,
            )?;
            let after_pretrain = store.checksum();
            let at_fine_tune_start = store.checksum();
            let fine = run_phase(
                &mut store,
                &model,
                train_set,
                val_set,
                LabelSource::Annotated,
                cfg.fine_tune_lr.expect("validated above"),
                cfg,
                pre.epochs_run,
                &mut log,
            )?;
            (
                PhaseResult {
                    best_val_ap: fine.best_val_ap,
                    epochs_run: pre.epochs_run + fine.epochs_run,
                },
                Some((after_pretrain, at_fine_tune_start)),
            )
        }
    };

    Ok(TrainOutput {
        store,
        model,
        log,
        best_val_ap: result.best_val_ap,
        epochs_run: result.epochs_run,
        phase_checksums,
    })
}
