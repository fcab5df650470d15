//! Scratch sweep for training hyperparameters. Not part of the suite; run
//! with `--ignored --nocapture`. Delete before release.

use masrc_core::data::ShotSequence;
use masrc_core::mcd::{Modality, ModalityConfig};
use masrc_core::metrics::MiouMode;
use masrc_core::synth::{synth_generate, SynthConfig};
use masrc_core::train::{train, Regime, TrainConfig};

fn ablation_dataset(cfg: &SynthConfig) -> (Vec<ShotSequence>, Vec<ShotSequence>) {
    let mut videos = synth_generate(cfg, 626262).unwrap();
    let val = videos.split_off(12);
    (videos, val)
}

fn relational(noise: f64, pool: usize, eps: usize, angles: usize, spread: f64) -> SynthConfig {
    SynthConfig {
        num_videos: 16,
        scenes_per_video: 6,
        shots_per_scene_min: 3,
        shots_per_scene_max: 7,
        dim_entity: 12,
        dim_place: 12,
        noise,
        entity_pool: pool,
        entity_recurrence: 0.7,
        pseudo_flip: None,
        noise_burst: None,
        common_offset: None,
        entities_per_shot: eps,
        place_angles: angles,
        angle_spread: spread,
        generic_rate: 0.0,
        generic_rate_entity: None,
        generic_weight: 1.5,
        generic_pool: 2,
    }
}

fn generic_cfg(noise: f64, rate_place: f64, rate_entity: f64, weight: f64) -> SynthConfig {
    let mut cfg = relational(noise, 3, 1, 1, 1.0);
    cfg.generic_rate = rate_place;
    cfg.generic_rate_entity = Some(rate_entity);
    cfg.generic_weight = weight;
    cfg
}

#[allow(clippy::too_many_arguments)]
fn grid(
    tag: &str,
    synth: &SynthConfig,
    peak_lr: f64,
    batch: usize,
    t: usize,
    k: usize,
    epochs: usize,
    seeds: std::ops::RangeInclusive<u64>,
) {
    let (train_set, val_set) = ablation_dataset(synth);
    let n_seeds = seeds.clone().count() as f64;
    let mean_ap = |modality: Modality, eld: bool, psd: bool| -> f64 {
        let mut sum = 0.0;
        for seed in seeds.clone() {
            let cfg = TrainConfig {
                regime: Regime::Supervised,
                t,
                k,
                batch_size: batch,
                peak_lr,
                epochs,
                seed,
                modality: ModalityConfig { modality, eld, psd },
                fine_tune_lr: None,
                patience: epochs,
                threshold: 0.5,
                miou_mode: MiouMode::Symmetric,
            };
            sum += train(&train_set, &val_set, &cfg).unwrap().best_val_ap;
        }
        sum / n_seeds
    };
    let start = std::time::Instant::now();
    let full = mean_ap(Modality::Both, true, true);
    let entity = mean_ap(Modality::Entity, true, false);
    let place = mean_ap(Modality::Place, false, true);
    let nograph = mean_ap(Modality::Both, false, false);
    let ent_raw = mean_ap(Modality::Entity, false, false);
    let plc_raw = mean_ap(Modality::Place, false, false);
    println!(
        "| {tag:20} full {full:.3} ent {entity:.3} plc {place:.3} raw {nograph:.3} entraw {ent_raw:.3} plcraw {plc_raw:.3} ({:.0}s)",
        start.elapsed().as_secs_f64()
    );
}

#[test]
#[ignore]
fn sweep() {
    grid("R40 sym .45 w2 e40", &generic_cfg(0.2, 0.45, 0.45, 2.0), 5e-3, 32, 8, 3, 40, 102..=103);
}
