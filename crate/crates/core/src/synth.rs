//! Synthetic dataset generator with planted scene structure.
//!
//! Each scene draws one unit-norm place centroid and a small pool of
//! unit-norm entity centroids. Every shot's place feature is the scene
//! centroid plus Gaussian noise; its entity feature is one of the pool
//! centroids plus noise, with earlier choices re-used at a configurable rate
//! so the same entity recurs intermittently. The last shot of each scene is
//! labeled a boundary, except the video's final shot: a boundary label marks
//! the transition that follows a shot, and nothing follows the final shot
//! (scene reconstruction closes the last scene implicitly). Generation is a
//! pure function of `(config, seed)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ShotSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn default_entity_pool() -> usize {
    3
}

fn default_one() -> usize {
    1
}

fn default_angle_spread() -> f64 {
    1.0
}

fn default_generic_weight() -> f64 {
    1.5
}

fn default_generic_pool() -> usize {
    2
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub scenes_per_video: usize,
    pub shots_per_scene_min: usize,
    pub shots_per_scene_max: usize,
    pub dim_entity: usize,
    pub dim_place: usize,
    /// Standard deviation of the per-coordinate Gaussian noise added to
    /// every feature.
    pub noise: f64,
    /// Number of entity centroids available per scene.
    #[serde(default = "default_entity_pool")]
    pub entity_pool: usize,
    /// Probability that a shot re-uses an entity already seen in its scene
    /// instead of drawing a fresh pool member.
    pub entity_recurrence: f64,
    /// Optional heteroscedastic degradation `(prob, mult)`: with probability
    /// `prob` a shot is "degraded" and its noise deviation is multiplied by
    /// `mult` in BOTH modalities at once, the way blur or darkness corrupts
    /// every stream of a real shot. Degraded shots are exactly what
    /// relation-graph smoothing can repair from clean neighbors while raw
    /// per-shot features cannot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_burst: Option<(f64, f64)>,
    /// Optional common-mode bias: per video and per modality, one fixed
    /// random vector of this norm added to every shot (a video-level "style"
    /// component, like color grading). It inflates every pairwise cosine and
    /// so flattens similarity contrast in raw features; learned feature
    /// refinement can re-amplify the informative directions, a plain cosine
    /// on raw features cannot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub common_offset: Option<f64>,
    /// Entities visible per shot (distinct pool members, averaged then
    /// renormalized before noise). With more than one, same-scene shots may
    /// share no entity yet connect through chains of co-occurrence — pairwise
    /// similarity misses the link, multi-hop aggregation closes it.
    #[serde(default = "default_one")]
    pub entities_per_shot: usize,
    /// Camera angles per scene: sub-centroids the shots cycle through, the
    /// shot/reverse-shot alternation of film grammar. With more than one,
    /// raw place similarity of a scene is patchy (same-angle pairs high,
    /// cross-angle moderate) until smoothing consolidates the angles.
    #[serde(default = "default_one")]
    pub place_angles: usize,
    /// How far each angle strays from the scene centroid: the angle is
    /// `normalize(centroid + spread · random_unit)`. Larger values weaken
    /// the raw cross-angle similarity. Ignored when `place_angles` is 1.
    #[serde(default = "default_angle_spread")]
    pub angle_spread: f64,
    /// Probability that a shot is "generic" in a modality — an insert or
    /// close-up whose feature is dominated by one of a few global style
    /// vectors shared across scenes and videos, leaving only a weak trace
    /// of the true scene content. Generic shots make raw pairwise
    /// similarity lie (two inserts from different scenes look alike), while
    /// the learned relation stages can restore their identity from context.
    /// Applies to the place view; the entity view uses
    /// [`Self::generic_rate_entity`] when set, else this same rate.
    #[serde(default)]
    pub generic_rate: f64,
    /// Entity-view override of [`Self::generic_rate`]. Letting the two views
    /// fail at different rates keeps them complementary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generic_rate_entity: Option<f64>,
    /// Strength of the generic style relative to the unit scene content:
    /// the base becomes `normalize(content + weight · style)`.
    #[serde(default = "default_generic_weight")]
    pub generic_weight: f64,
    /// Number of global generic style vectors per modality.
    #[serde(default = "default_generic_pool")]
    pub generic_pool: usize,
    /// When set, also emit `pseudo_labels`: the true labels with each entry
    /// flipped independently at this rate (stand-in for an external pseudo
    /// label source).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_flip: Option<f64>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos == 0 {
            return Err(Error::Config("num_videos must be positive".into()));
        }
        if self.scenes_per_video == 0 {
            return Err(Error::Config("scenes_per_video must be positive".into()));
        }
        if self.shots_per_scene_min == 0 || self.shots_per_scene_min > self.shots_per_scene_max {
            return Err(Error::Config(format!(
                "invalid shots-per-scene range [{}, {}]",
                self.shots_per_scene_min, self.shots_per_scene_max
            )));
        }
        if self.dim_entity < 2 || self.dim_place < 2 {
            return Err(Error::Config("feature dimensions must be at least 2".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config("noise must be finite and non-negative".into()));
        }
        if self.entity_pool == 0 {
            return Err(Error::Config("entity_pool must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.entity_recurrence) {
            return Err(Error::Config("entity_recurrence must lie in [0, 1]".into()));
        }
        if let Some(p) = self.pseudo_flip {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config("pseudo_flip must lie in [0, 1]".into()));
            }
        }
        if let Some((p, m)) = self.noise_burst {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config("noise_burst probability must lie in [0, 1]".into()));
            }
            if !(m >= 1.0) || !m.is_finite() {
                return Err(Error::Config("noise_burst multiplier must be finite and >= 1".into()));
            }
        }
        if let Some(rho) = self.common_offset {
            if !(rho >= 0.0) || !rho.is_finite() {
                return Err(Error::Config("common_offset must be finite and non-negative".into()));
            }
        }
        if self.entities_per_shot == 0 || self.entities_per_shot > self.entity_pool {
            return Err(Error::Config(format!(
                "entities_per_shot must lie in [1, entity_pool = {}]",
                self.entity_pool
            )));
        }
        if self.place_angles == 0 {
            return Err(Error::Config("place_angles must be positive".into()));
        }
        if !(self.angle_spread > 0.0) || !self.angle_spread.is_finite() {
            return Err(Error::Config("angle_spread must be finite and positive".into()));
        }
        if !(0.0..=1.0).contains(&self.generic_rate) {
            return Err(Error::Config("generic_rate must lie in [0, 1]".into()));
        }
        if let Some(r) = self.generic_rate_entity {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(
                    "generic_rate_entity must lie in [0, 1]".into(),
                ));
            }
        }
        if !(self.generic_weight >= 0.0) || !self.generic_weight.is_finite() {
            return Err(Error::Config(
                "generic_weight must be finite and non-negative".into(),
            ));
        }
        if self.generic_pool == 0 {
            return Err(Error::Config("generic_pool must be positive".into()));
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

/// Generates `num_videos` sequences with planted scenes. Identical
/// `(config, seed)` pairs produce identical data.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Vec<ShotSequence>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let rate_entity = cfg.generic_rate_entity.unwrap_or(cfg.generic_rate);
    let rate_place = cfg.generic_rate;
    // Global generic styles, shared by every scene and video, drawn only when
    // some shot can use them so configs without generics keep their streams.
    let styles: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = (rate_entity > 0.0 || rate_place > 0.0)
        .then(|| {
            (
                (0..cfg.generic_pool)
                    .map(|_| unit_vector(&mut rng, cfg.dim_entity))
                    .collect(),
                (0..cfg.generic_pool)
                    .map(|_| unit_vector(&mut rng, cfg.dim_place))
                    .collect(),
            )
        });
    let mut videos = Vec::with_capacity(cfg.num_videos);
    for v in 0..cfg.num_videos {
        let mut entity_rows: Vec<Vec<f64>> = Vec::new();
        let mut place_rows: Vec<Vec<f64>> = Vec::new();
        let mut labels: Vec<u8> = Vec::new();
        let style: Option<(Vec<f64>, Vec<f64>)> = cfg.common_offset.map(|rho| {
            let scale = |u: Vec<f64>| u.into_iter().map(|x| x * rho).collect::<Vec<f64>>();
            (
                scale(unit_vector(&mut rng, cfg.dim_entity)),
                scale(unit_vector(&mut rng, cfg.dim_place)),
            )
        });
        for _scene in 0..cfg.scenes_per_video {
            let place_centroid = unit_vector(&mut rng, cfg.dim_place);
            let pool: Vec<Vec<f64>> = (0..cfg.entity_pool)
                .map(|_| unit_vector(&mut rng, cfg.dim_entity))
                .collect();
            let angles: Vec<Vec<f64>> = if cfg.place_angles == 1 {
                vec![place_centroid.clone()]
            } else {
                (0..cfg.place_angles)
                    .map(|_| {
                        let stray = unit_vector(&mut rng, cfg.dim_place);
                        normalized(
                            place_centroid
                                .iter()
                                .zip(&stray)
                                .map(|(c, u)| c + cfg.angle_spread * u)
                                .collect(),
                        )
                    })
                    .collect()
            };
            let shots = rng.gen_range(cfg.shots_per_scene_min..=cfg.shots_per_scene_max);
            let mut used: Vec<usize> = Vec::new();
            for s in 0..shots {
                let first = if s > 0 && rng.gen_bool(cfg.entity_recurrence) {
                    used[rng.gen_range(0..used.len())]
                } else {
                    rng.gen_range(0..cfg.entity_pool)
                };
                let mut picks = vec![first];
                while picks.len() < cfg.entities_per_shot {
                    let extra = rng.gen_range(0..cfg.entity_pool);
                    if !picks.contains(&extra) {
                        picks.push(extra);
                    }
                }
                used.extend_from_slice(&picks);
                let mut sigma = cfg.noise;
                if let Some((p, mult)) = cfg.noise_burst {
                    if rng.gen_bool(p) {
                        sigma *= mult;
                    }
                }
                let mut base = vec![0.0f64; cfg.dim_entity];
                for &p in &picks {
                    base.iter_mut().zip(&pool[p]).for_each(|(b, c)| *b += c);
                }
                let mut ebase = normalized(base);
                let mut pbase = angles[s % angles.len()].clone();
                if let Some((estyles, pstyles)) = &styles {
                    let degrade =
                        |base: &mut Vec<f64>, pool: &[Vec<f64>], rate: f64, rng: &mut ChaCha8Rng| {
                            if rate > 0.0 && rng.gen_bool(rate) {
                                let style = &pool[rng.gen_range(0..pool.len())];
                                *base = normalized(
                                    base.iter()
                                        .zip(style)
                                        .map(|(c, g)| c + cfg.generic_weight * g)
                                        .collect(),
                                );
                            }
                        };
                    degrade(&mut ebase, estyles, rate_entity, &mut rng);
                    degrade(&mut pbase, pstyles, rate_place, &mut rng);
                }
                let mut entity: Vec<f64> = ebase
                    .into_iter()
                    .map(|c| c + sigma * noise.sample(&mut rng))
                    .collect();
                let mut place: Vec<f64> = pbase
                    .into_iter()
                    .map(|c| c + sigma * noise.sample(&mut rng))
                    .collect();
                if let Some((ge, gp)) = &style {
                    entity.iter_mut().zip(ge).for_each(|(x, g)| *x += g);
                    place.iter_mut().zip(gp).for_each(|(x, g)| *x += g);
                }
                entity_rows.push(entity);
                place_rows.push(place);
                labels.push(if s + 1 == shots { 1 } else { 0 });
            }
        }
        // No transition follows the final shot, so it is never a positive.
        if let Some(last) = labels.last_mut() {
            *last = 0;
        }
        let n = labels.len();
        let mut entity = Tensor::zeros(&[n, cfg.dim_entity]);
        let mut place = Tensor::zeros(&[n, cfg.dim_place]);
        for i in 0..n {
            for (dst, &src) in entity.row_mut(i).iter_mut().zip(entity_rows[i].iter()) {
                *dst = src as f32;
            }
            for (dst, &src) in place.row_mut(i).iter_mut().zip(place_rows[i].iter()) {
                *dst = src as f32;
            }
        }
        let pseudo_labels = cfg.pseudo_flip.map(|p| {
            labels
                .iter()
                .map(|&l| if rng.gen_bool(p) { 1 - l } else { l })
                .collect()
        });
        videos.push(ShotSequence {
            video_id: format!("synth-{v:04}"),
            entity,
            place,
            labels: Some(labels),
            pseudo_labels,
        });
    }
    Ok(videos)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> SynthConfig {
        SynthConfig {
            num_videos: 2,
            scenes_per_video: 3,
            shots_per_scene_min: 4,
            shots_per_scene_max: 4,
            dim_entity: 8,
            dim_place: 8,
            noise: 0.1,
            entity_pool: 3,
            entity_recurrence: 0.5,
            pseudo_flip: None,
            noise_burst: None,
            common_offset: None,
            entities_per_shot: 1,
            place_angles: 1,
            angle_spread: 1.0,
            generic_rate: 0.0,
            generic_rate_entity: None,
            generic_weight: 1.5,
            generic_pool: 2,
        }
    }

    #[test]
    fn fixed_scene_length_yields_periodic_labels() {
        let videos = synth_generate(&base_config(), 7).unwrap();
        for v in &videos {
            assert_eq!(v.num_shots(), 12);
            assert_eq!(
                v.labels.as_deref().unwrap(),
                &[0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0],
                "scene ends are positives except the terminal shot"
            );
        }
    }

    #[test]
    fn generation_is_deterministic_in_config_and_seed() {
        let a = synth_generate(&base_config(), 42).unwrap();
        let b = synth_generate(&base_config(), 42).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.entity, y.entity);
            assert_eq!(x.place, y.place);
            assert_eq!(x.labels, y.labels);
        }
        let c = synth_generate(&base_config(), 43).unwrap();
        assert_ne!(a[0].entity, c[0].entity, "different seeds must differ");
    }

    #[test]
    fn zero_noise_collapses_within_scene_place_similarity_to_one() {
        let mut cfg = base_config();
        cfg.noise = 0.0;
        let videos = synth_generate(&cfg, 3).unwrap();
        let v = &videos[0];
        // Shots 0..4 share a scene; with zero noise their place rows are the
        // centroid itself, so cosine similarity is exactly 1.
        let sims = crate::ejg::cosine_matrix(&v.place).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(sims.at(i, j), 1.0);
            }
        }
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        let mut cfg = base_config();
        cfg.scenes_per_video = 0;
        assert!(synth_generate(&cfg, 0).is_err());
        let mut cfg = base_config();
        cfg.dim_place = 1;
        assert!(synth_generate(&cfg, 0).is_err());
        let mut cfg = base_config();
        cfg.shots_per_scene_min = 5;
        cfg.shots_per_scene_max = 4;
        assert!(synth_generate(&cfg, 0).is_err());
    }

    #[test]
    fn pseudo_labels_are_emitted_when_requested() {
        let mut cfg = base_config();
        cfg.pseudo_flip = Some(0.3);
        cfg.num_videos = 8;
        let videos = synth_generate(&cfg, 11).unwrap();
        let mut flips = 0;
        let mut total = 0;
        for v in &videos {
            let labels = v.labels.as_deref().unwrap();
            let pseudo = v.pseudo_labels.as_deref().unwrap();
            assert_eq!(labels.len(), pseudo.len());
            flips += labels
                .iter()
                .zip(pseudo.iter())
                .filter(|(a, b)| a != b)
                .count();
            total += labels.len();
        }
        let rate = flips as f64 / total as f64;
        assert!((rate - 0.3).abs() < 0.12, "flip rate {rate} far from 0.3");
    }
}
