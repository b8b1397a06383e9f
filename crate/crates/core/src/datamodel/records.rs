use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One detected region in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityDetection {
    #[serde(rename = "object")]
    pub object_token: u32,
    #[serde(rename = "attribute")]
    pub attribute_token: u32,
    pub roi: Vec<f64>,
    /// x, y, w, h in [0, 1]
    pub bbox: [f64; 4],
    #[serde(rename = "conf")]
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub video_id: String,
    pub frames: Vec<Vec<f64>>,
    /// Detections per frame, parallel to `frames`.
    pub entities: Vec<Vec<EntityDetection>>,
    pub caption_tokens: Vec<u32>,
}

impl VideoRecord {
    pub fn frames_matrix(&self) -> Array2<f64> {
        let cols = self.frames.first().map_or(0, Vec::len);
        Array2::from_shape_fn((self.frames.len(), cols), |(i, j)| self.frames[i][j])
    }

    pub fn detections(&self) -> impl Iterator<Item = &EntityDetection> {
        self.entities.iter().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleEntity {
    pub tokens: Vec<u32>,
    pub role_id: u32,
    pub action_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextRecord {
    pub text_id: String,
    pub video_id: String,
    pub tokens: Vec<u32>,
    /// Verb spans, one per action node.
    pub actions: Vec<Vec<u32>>,
    pub entities: Vec<RoleEntity>,
}

impl TextRecord {
    /// Input of the occurrence node: the whole sentence.
    pub fn occurrence_tokens(&self) -> &[u32] {
        &self.tokens
    }
}

/// Bounds that every record must respect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordLimits {
    pub vocab_size: usize,
    pub num_roles: usize,
    pub d_frame: usize,
    pub d_roi: usize,
}

fn invalid(id: &str, reason: impl Into<String>) -> Error {
    Error::InvalidRecord {
        id: id.to_string(),
        reason: reason.into(),
    }
}

fn check_tokens(id: &str, what: &str, tokens: &[u32], vocab: usize) -> Result<()> {
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(invalid(id, format!("{what}: token {t} >= vocab size {vocab}")));
    }
    Ok(())
}

impl EntityDetection {
    pub fn validate(&self, id: &str, limits: &RecordLimits) -> Result<()> {
        check_tokens(id, "detection", &[self.object_token, self.attribute_token], limits.vocab_size)?;
        if self.roi.len() != limits.d_roi {
            return Err(invalid(id, format!("roi has {} values, expected {}", self.roi.len(), limits.d_roi)));
        }
        if self.roi.iter().any(|x| !x.is_finite()) {
            return Err(invalid(id, "roi is not finite"));
        }
        if self.bbox.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(invalid(id, format!("bbox {:?} outside [0,1]", self.bbox)));
        }
        if self.bbox[2] <= 0.0 || self.bbox[3] <= 0.0 {
            return Err(invalid(id, "bbox width and height must be positive"));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(invalid(id, format!("confidence {} outside [0,1]", self.confidence)));
        }
        Ok(())
    }
}

impl VideoRecord {
    pub fn validate(&self, limits: &RecordLimits) -> Result<()> {
        let id = self.video_id.as_str();
        if self.frames.is_empty() {
            return Err(invalid(id, "no frames"));
        }
        for (i, row) in self.frames.iter().enumerate() {
            if row.len() != limits.d_frame {
                return Err(invalid(id, format!("frame {i} has {} values, expected {}", row.len(), limits.d_frame)));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(invalid(id, format!("frame {i} is not finite")));
            }
        }
        if self.entities.len() != self.frames.len() {
            return Err(invalid(
                id,
                format!("{} detection lists for {} frames", self.entities.len(), self.frames.len()),
            ));
        }
        for det in self.detections() {
            det.validate(id, limits)?;
        }
        if self.caption_tokens.is_empty() {
            return Err(invalid(id, "caption_tokens is empty"));
        }
        check_tokens(id, "caption_tokens", &self.caption_tokens, limits.vocab_size)
    }
}

impl TextRecord {
    pub fn validate(&self, limits: &RecordLimits) -> Result<()> {
        let id = self.text_id.as_str();
        if self.tokens.is_empty() {
            return Err(invalid(id, "tokens is empty"));
        }
        check_tokens(id, "tokens", &self.tokens, limits.vocab_size)?;
        for (a, span) in self.actions.iter().enumerate() {
            check_tokens(id, &format!("action {a}"), span, limits.vocab_size)?;
        }
        for (e, ent) in self.entities.iter().enumerate() {
            check_tokens(id, &format!("entity {e}"), &ent.tokens, limits.vocab_size)?;
            if ent.action_index as usize >= self.actions.len() {
                return Err(invalid(
                    id,
                    format!("entity {e}: action_index {} but only {} actions", ent.action_index, self.actions.len()),
                ));
            }
            if ent.role_id as usize >= limits.num_roles {
                return Err(invalid(
                    id,
                    format!("entity {e}: role_id {} >= relation count {}", ent.role_id, limits.num_roles),
                ));
            }
        }
        Ok(())
    }
}

/// Videos and texts with every text resolving to one video.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub videos: Vec<VideoRecord>,
    pub texts: Vec<TextRecord>,
    /// For each text, the index of its video.
    text_to_video: Vec<usize>,
}

impl DatasetSplit {
    /// Validates every record and resolves cross-references.
    pub fn new(videos: Vec<VideoRecord>, texts: Vec<TextRecord>, limits: &RecordLimits) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::NoVideos);
        }
        if texts.is_empty() {
            return Err(Error::NoTexts);
        }
        let mut index = HashMap::with_capacity(videos.len());
        for (i, v) in videos.iter().enumerate() {
            v.validate(limits)?;
            if index.insert(v.video_id.as_str(), i).is_some() {
                return Err(invalid(&v.video_id, "duplicate video_id"));
            }
        }
        let mut text_to_video = Vec::with_capacity(texts.len());
        let mut seen = vec![false; videos.len()];
        for t in &texts {
            t.validate(limits)?;
            let &vi = index.get(t.video_id.as_str()).ok_or_else(|| Error::DanglingVideo {
                text_id: t.text_id.clone(),
                video_id: t.video_id.clone(),
            })?;
            seen[vi] = true;
            text_to_video.push(vi);
        }
        if let Some(orphan) = seen.iter().position(|s| !s) {
            return Err(invalid(&videos[orphan].video_id, "no paired text"));
        }
        Ok(DatasetSplit {
            videos,
            texts,
            text_to_video,
        })
    }

    pub fn text_to_video(&self) -> &[usize] {
        &self.text_to_video
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// For bijective splits, the text index of each video.
    pub fn video_to_text(&self) -> Result<Vec<usize>> {
        let mut out = vec![usize::MAX; self.videos.len()];
        for (t, &v) in self.text_to_video.iter().enumerate() {
            if out[v] != usize::MAX {
                return Err(invalid(&self.videos[v].video_id, "has more than one paired text"));
            }
            out[v] = t;
        }
        Ok(out)
    }
}
