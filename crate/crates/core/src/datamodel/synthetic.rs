//! Deterministic synthetic fixtures.
//!
//! Each pair is drawn from a latent scene (subject, action, object, place,
//! attribute). Frames are a compositional prototype (a fixed random vector per
//! scene component, summed) plus per-frame noise. Detections carry the
//! scene's subject and object tokens with the scene attribute; distractor
//! detections fall below the confidence threshold. Texts and captions
//! verbalize the scene with two different templates.

use std::collections::{BTreeMap, HashSet};

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::records::{DatasetSplit, EntityDetection, RecordLimits, RoleEntity, TextRecord, VideoRecord};
use crate::error::{Error, Result};

/// End-of-sequence marker appended by the text encoder.
pub const EOS: u32 = 0;
pub const TOKEN_A: u32 = 1;
pub const TOKEN_THE: u32 = 2;
pub const TOKEN_IN: u32 = 3;
/// Ids below this are reserved for the tokens above.
pub const FIRST_CONTENT_TOKEN: u32 = 4;

pub const ROLE_AGENT: u32 = 0;
pub const ROLE_PATIENT: u32 = 1;
pub const ROLE_LOCATION: u32 = 2;

/// A vocabulary category given either as a size (ids allocated
/// consecutively) or as explicit token ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VocabSpec {
    Count(u32),
    Ids(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    pub subjects: VocabSpec,
    pub actions: VocabSpec,
    pub objects: VocabSpec,
    pub places: VocabSpec,
    pub attributes: VocabSpec,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            subjects: VocabSpec::Count(8),
            actions: VocabSpec::Count(8),
            objects: VocabSpec::Count(8),
            places: VocabSpec::Count(6),
            attributes: VocabSpec::Count(6),
        }
    }
}

/// Resolved, disjoint token ids per category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pub subjects: Vec<u32>,
    pub actions: Vec<u32>,
    pub objects: Vec<u32>,
    pub places: Vec<u32>,
    pub attributes: Vec<u32>,
    pub size: usize,
}

impl Vocab {
    pub fn from_config(cfg: &VocabConfig) -> Result<Vocab> {
        let specs: [(&'static str, &VocabSpec); 5] = [
            ("subjects", &cfg.subjects),
            ("actions", &cfg.actions),
            ("objects", &cfg.objects),
            ("places", &cfg.places),
            ("attributes", &cfg.attributes),
        ];
        let mut next = FIRST_CONTENT_TOKEN;
        let mut owner: BTreeMap<u32, &'static str> = (0..FIRST_CONTENT_TOKEN).map(|t| (t, "reserved")).collect();
        let mut lists = Vec::with_capacity(5);
        for (name, spec) in specs {
            let ids: Vec<u32> = match spec {
                VocabSpec::Count(n) => {
                    let end = next.checked_add(*n).ok_or_else(|| Error::Config {
                        field: format!("vocab.{name}"),
                        reason: "token ids overflow".into(),
                    })?;
                    let ids = (next..end).collect();
                    next = end;
                    ids
                }
                VocabSpec::Ids(ids) => ids.clone(),
            };
            if ids.is_empty() {
                return Err(Error::Config {
                    field: format!("vocab.{name}"),
                    reason: "must contain at least one token".into(),
                });
            }
            for &t in &ids {
                if let Some(first) = owner.insert(t, name) {
                    return Err(Error::VocabOverlap {
                        token: t,
                        first,
                        second: name,
                    });
                }
            }
            lists.push(ids);
        }
        let size = *owner.keys().next_back().expect("reserved ids present") as usize + 1;
        let mut it = lists.into_iter();
        let mut take = || it.next().expect("five categories");
        Ok(Vocab {
            subjects: take(),
            actions: take(),
            objects: take(),
            places: take(),
            attributes: take(),
            size,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub d_frame: usize,
    pub d_roi: usize,
    pub d_model: usize,
    pub vocab: VocabConfig,
    pub pairs: usize,
    pub frames_per_video: usize,
    pub noise_sigma: f64,
    pub distractors_per_frame: usize,
    pub conf_threshold: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            d_frame: 16,
            d_roi: 8,
            d_model: 32,
            vocab: VocabConfig::default(),
            pairs: 64,
            frames_per_video: 4,
            noise_sigma: 0.1,
            distractors_per_frame: 2,
            conf_threshold: 0.5,
            seed: 0,
        }
    }
}

fn bad(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<Vocab> {
        for (field, v) in [
            ("d_frame", self.d_frame),
            ("d_roi", self.d_roi),
            ("d_model", self.d_model),
            ("pairs", self.pairs),
            ("frames_per_video", self.frames_per_video),
        ] {
            if v == 0 {
                return Err(bad(field, "must be >= 1"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(bad("noise_sigma", "must be a finite value >= 0"));
        }
        if !(self.conf_threshold > 0.0 && self.conf_threshold <= 1.0) {
            return Err(bad("conf_threshold", "must lie in (0, 1]"));
        }
        Vocab::from_config(&self.vocab)
    }

    /// The limits generated records satisfy (with three roles).
    pub fn limits(&self, vocab: &Vocab) -> RecordLimits {
        RecordLimits {
            vocab_size: vocab.size,
            num_roles: 3,
            d_frame: self.d_frame,
            d_roi: self.d_roi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Scene {
    pub subject: u32,
    pub action: u32,
    pub object: u32,
    pub place: u32,
    pub attribute: u32,
}

impl Scene {
    /// Template: subject action object place.
    pub fn sentence(&self) -> Vec<u32> {
        vec![self.subject, self.action, self.object, self.place]
    }

    /// Second template: a subject action the object in place.
    pub fn caption(&self) -> Vec<u32> {
        vec![
            TOKEN_A,
            self.subject,
            self.action,
            TOKEN_THE,
            self.object,
            TOKEN_IN,
            self.place,
        ]
    }
}

/// Fixed random vectors for every content token.
pub struct SceneWorld {
    frame_component: BTreeMap<u32, Array1<f64>>,
    roi_component: BTreeMap<u32, Array1<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

impl SceneWorld {
    pub fn new(vocab: &Vocab, d_frame: usize, d_roi: usize, rng: &mut ChaCha8Rng) -> Self {
        // Five summed components with variance 1/5 each give unit variance.
        let scale = (1.0f64 / 5.0).sqrt();
        let mut frame_component = BTreeMap::new();
        for list in [&vocab.subjects, &vocab.actions, &vocab.objects, &vocab.places, &vocab.attributes] {
            for &t in list {
                frame_component.insert(t, gaussian(rng, d_frame, scale));
            }
        }
        let mut roi_component = BTreeMap::new();
        for list in [&vocab.subjects, &vocab.objects] {
            for &t in list {
                roi_component.entry(t).or_insert_with(|| gaussian(rng, d_roi, 1.0));
            }
        }
        SceneWorld {
            frame_component,
            roi_component,
        }
    }

    pub fn prototype(&self, scene: &Scene) -> Array1<f64> {
        [scene.subject, scene.action, scene.object, scene.place, scene.attribute]
            .iter()
            .map(|t| &self.frame_component[t])
            .fold(None::<Array1<f64>>, |acc, v| Some(acc.map_or_else(|| v.clone(), |a| a + v)))
            .expect("five components")
    }

    pub fn roi(&self, token: u32) -> &Array1<f64> {
        &self.roi_component[&token]
    }
}

fn pick(rng: &mut ChaCha8Rng, ids: &[u32]) -> u32 {
    ids[rng.gen_range(0..ids.len())]
}

fn sample_scenes(vocab: &Vocab, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Scene>> {
    let capacity = [&vocab.subjects, &vocab.actions, &vocab.objects, &vocab.places]
        .iter()
        .map(|l| l.len() as u128)
        .product::<u128>();
    if count as u128 > capacity {
        return Err(bad(
            "pairs",
            format!("{count} pairs requested but the vocabulary only allows {capacity} distinct sentences"),
        ));
    }
    // Scenes are unique in their verbalized part so no two texts coincide.
    let mut seen = HashSet::with_capacity(count);
    let mut scenes = Vec::with_capacity(count);
    while scenes.len() < count {
        let s = Scene {
            subject: pick(rng, &vocab.subjects),
            action: pick(rng, &vocab.actions),
            object: pick(rng, &vocab.objects),
            place: pick(rng, &vocab.places),
            attribute: pick(rng, &vocab.attributes),
        };
        if seen.insert((s.subject, s.action, s.object, s.place)) {
            scenes.push(s);
        }
    }
    Ok(scenes)
}

fn bbox(rng: &mut ChaCha8Rng) -> [f64; 4] {
    [
        rng.gen_range(0.0..0.5),
        rng.gen_range(0.0..0.5),
        rng.gen_range(0.1..0.5),
        rng.gen_range(0.1..0.5),
    ]
}

/// Builds a split whose records are a pure function of `(config, seed)`.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<DatasetSplit> {
    let vocab = config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = SceneWorld::new(&vocab, config.d_frame, config.d_roi, &mut rng);
    let scenes = sample_scenes(&vocab, config.pairs, &mut rng)?;
    let sigma = config.noise_sigma;
    let real_conf_floor = config.conf_threshold.max(0.5);
    let distractor_tokens: Vec<u32> = vocab.subjects.iter().chain(&vocab.objects).copied().collect();

    let mut videos = Vec::with_capacity(scenes.len());
    let mut texts = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let video_id = format!("video{i:04}");
        let proto = world.prototype(scene);
        let mut frames = Vec::with_capacity(config.frames_per_video);
        let mut entities = Vec::with_capacity(config.frames_per_video);
        for _ in 0..config.frames_per_video {
            let noise = gaussian(&mut rng, config.d_frame, sigma);
            frames.push((&proto + &noise).to_vec());

            let mut dets = Vec::with_capacity(2 + config.distractors_per_frame);
            for token in [scene.subject, scene.object] {
                dets.push(EntityDetection {
                    object_token: token,
                    attribute_token: scene.attribute,
                    roi: (world.roi(token) + &gaussian(&mut rng, config.d_roi, sigma)).to_vec(),
                    bbox: bbox(&mut rng),
                    confidence: rng.gen_range(real_conf_floor..=1.0),
                });
            }
            for _ in 0..config.distractors_per_frame {
                let token = pick(&mut rng, &distractor_tokens);
                dets.push(EntityDetection {
                    object_token: token,
                    attribute_token: pick(&mut rng, &vocab.attributes),
                    roi: (world.roi(token) + &gaussian(&mut rng, config.d_roi, sigma)).to_vec(),
                    bbox: bbox(&mut rng),
                    confidence: rng.gen_range(0.0..config.conf_threshold),
                });
            }
            dets.shuffle(&mut rng);
            entities.push(dets);
        }
        videos.push(VideoRecord {
            video_id: video_id.clone(),
            frames,
            entities,
            caption_tokens: scene.caption(),
        });
        texts.push(TextRecord {
            text_id: format!("text{i:04}"),
            video_id,
            tokens: scene.sentence(),
            actions: vec![vec![scene.action]],
            entities: vec![
                RoleEntity {
                    tokens: vec![scene.subject],
                    role_id: ROLE_AGENT,
                    action_index: 0,
                },
                RoleEntity {
                    tokens: vec![scene.object],
                    role_id: ROLE_PATIENT,
                    action_index: 0,
                },
                RoleEntity {
                    tokens: vec![scene.place],
                    role_id: ROLE_LOCATION,
                    action_index: 0,
                },
            ],
        });
    }
    DatasetSplit::new(videos, texts, &config.limits(&vocab))
}
