//! Full forward pass: base encoders, semantic branches and fusion.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{DatasetSplit, TextRecord};
use crate::error::Result;
use crate::numcore::{Tape, Var};
use crate::objective::fuse;
use crate::params::{ModelParams, ModelVars};
use crate::tse::{build_role_graph, textual_semantics, RoleGraph};
use crate::vse::{discrete_semantics, select_topk_entities, EntityGroup, VseOptions};
use crate::encoders::{encode_text_global, encode_video_global};

/// Which semantic vectors contribute to each modality's semantic branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Components {
    pub vds: bool,
    pub vhs: bool,
    pub tds: bool,
    pub ths: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components::ALL
    }
}

impl Components {
    pub const NONE: Components = Components {
        vds: false,
        vhs: false,
        tds: false,
        ths: false,
    };
    pub const ALL: Components = Components {
        vds: true,
        vhs: true,
        tds: true,
        ths: true,
    };

    /// Parses labels like `none`, `all` or `VDS+TDS+THS` (case-insensitive).
    pub fn parse(label: &str) -> Option<Components> {
        let label = label.trim().to_ascii_lowercase();
        match label.as_str() {
            "none" | "" | "∅" => return Some(Components::NONE),
            "all" => return Some(Components::ALL),
            _ => {}
        }
        let mut c = Components::NONE;
        for part in label.split('+') {
            let flag = match part.trim() {
                "vds" => &mut c.vds,
                "vhs" => &mut c.vhs,
                "tds" => &mut c.tds,
                "ths" => &mut c.ths,
                _ => return None,
            };
            *flag = true;
        }
        Some(c)
    }

    pub fn label(&self) -> String {
        if *self == Components::NONE {
            return "none".into();
        }
        if *self == Components::ALL {
            return "all".into();
        }
        let parts: Vec<&str> = [(self.vds, "VDS"), (self.vhs, "VHS"), (self.tds, "TDS"), (self.ths, "THS")]
            .into_iter()
            .filter_map(|(on, name)| on.then_some(name))
            .collect();
        parts.join("+")
    }

    pub fn video_enabled(&self) -> bool {
        self.vds || self.vhs
    }

    pub fn text_enabled(&self) -> bool {
        self.tds || self.ths
    }
}

/// Forward-pass switches shared by training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOptions {
    pub components: Components,
    /// Entity-graph reasoning; mean pooling of initialized nodes when off.
    pub visual_graph: bool,
    /// Role-graph reasoning; mean pooling of initialized nodes when off.
    pub textual_graph: bool,
    pub raw_affinity: bool,
    pub top_k: usize,
    pub conf_threshold: f64,
    pub num_roles: usize,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            components: Components::ALL,
            visual_graph: true,
            textual_graph: true,
            raw_affinity: false,
            top_k: 8,
            conf_threshold: 0.5,
            num_roles: 3,
        }
    }
}

impl ModelOptions {
    fn vse(&self) -> VseOptions {
        VseOptions {
            mean_pool: !self.visual_graph,
            raw_affinity: self.raw_affinity,
        }
    }
}

/// Per-video inputs that do not depend on parameters.
#[derive(Debug, Clone)]
pub struct PreparedVideo {
    pub frames: Array2<f64>,
    pub groups: Vec<EntityGroup>,
    pub caption: Vec<u32>,
}

/// Per-text inputs that do not depend on parameters.
#[derive(Debug, Clone)]
pub struct PreparedText {
    pub record: TextRecord,
    pub graph: RoleGraph,
}

/// A split with entity selection and role graphs computed once.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub videos: Vec<PreparedVideo>,
    pub texts: Vec<PreparedText>,
    /// Ground-truth video index of each text.
    pub text_to_video: Vec<usize>,
}

impl PreparedSplit {
    pub fn new(split: &DatasetSplit, opts: &ModelOptions) -> Result<Self> {
        let videos = split
            .videos
            .iter()
            .map(|v| {
                let groups = if opts.components.vds {
                    select_topk_entities(v, opts.top_k, opts.conf_threshold)?
                } else {
                    Vec::new()
                };
                Ok(PreparedVideo {
                    frames: v.frames_matrix(),
                    groups,
                    caption: v.caption_tokens.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let texts = split
            .texts
            .iter()
            .map(|t| {
                Ok(PreparedText {
                    graph: build_role_graph(t, opts.num_roles)?,
                    record: t.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedSplit {
            videos,
            texts,
            text_to_video: split.text_to_video().to_vec(),
        })
    }
}

/// Base and fused embeddings of one item, both 1 x d with unit rows.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub base: Var,
    pub fused: Var,
}

fn fuse_or_normalize(tape: &mut Tape, base: Var, semantic: Option<Var>, alpha: f64) -> Result<Var> {
    match semantic {
        Some(s) => fuse(tape, base, s, alpha),
        None => tape.l2_normalize_rows(base),
    }
}

pub fn embed_video(
    tape: &mut Tape,
    video: &PreparedVideo,
    params: &ModelVars,
    opts: &ModelOptions,
    alpha: f64,
) -> Result<Embedding> {
    let base = encode_video_global(tape, &video.frames, &params.video)?;
    let c = opts.components;
    let vds = if c.vds {
        let table = params.tse.occurrence.token_embedding;
        Some(discrete_semantics(tape, &video.groups, &params.vse, table, opts.vse())?)
    } else {
        None
    };
    let vhs = if c.vhs {
        Some(encode_text_global(tape, &video.caption, &params.text)?)
    } else {
        None
    };
    let semantic = mean_of_present(tape, vds, vhs)?;
    let fused = fuse_or_normalize(tape, base, semantic, alpha)?;
    Ok(Embedding { base, fused })
}

pub fn embed_text(
    tape: &mut Tape,
    text: &PreparedText,
    params: &ModelVars,
    opts: &ModelOptions,
    alpha: f64,
) -> Result<Embedding> {
    let base = encode_text_global(tape, &text.record.tokens, &params.text)?;
    let c = opts.components;
    let semantic = if c.text_enabled() {
        let sem = textual_semantics(tape, &text.record, &text.graph, &params.tse, !opts.textual_graph)?;
        let tds = c.tds.then_some(sem.tds);
        let ths = c.ths.then_some(sem.ths);
        mean_of_present(tape, tds, ths)?
    } else {
        None
    };
    let fused = fuse_or_normalize(tape, base, semantic, alpha)?;
    Ok(Embedding { base, fused })
}

fn mean_of_present(tape: &mut Tape, a: Option<Var>, b: Option<Var>) -> Result<Option<Var>> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(crate::tse::mean_of_two(tape, a, b)?),
        (one, other) => one.or(other),
    })
}

/// Stacked embeddings for a batch of items.
#[derive(Debug, Clone, Copy)]
pub struct StackedEmbedding {
    pub base: Var,
    pub fused: Var,
}

pub fn stack(tape: &mut Tape, items: &[Embedding]) -> Result<StackedEmbedding> {
    let base: Vec<Var> = items.iter().map(|e| e.base).collect();
    let fused: Vec<Var> = items.iter().map(|e| e.fused).collect();
    Ok(StackedEmbedding {
        base: tape.stack_rows(&base)?,
        fused: tape.stack_rows(&fused)?,
    })
}

/// Concrete embeddings of every item in a split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitEmbeddings {
    pub video_base: Array2<f64>,
    pub video_fused: Array2<f64>,
    pub text_base: Array2<f64>,
    pub text_fused: Array2<f64>,
}

fn rows_to_matrix(rows: Vec<(Array2<f64>, Array2<f64>)>, d: usize) -> (Array2<f64>, Array2<f64>) {
    let n = rows.len();
    let mut base = Array2::zeros((n, d));
    let mut fused = Array2::zeros((n, d));
    for (i, (b, f)) in rows.into_iter().enumerate() {
        base.row_mut(i).assign(&b.row(0));
        fused.row_mut(i).assign(&f.row(0));
    }
    (base, fused)
}

/// Encodes every video and text under `params`. Items are independent, so
/// each runs on its own tape in parallel; results do not depend on the
/// thread count.
pub fn embed_split(params: &ModelParams, split: &PreparedSplit, opts: &ModelOptions, alpha: f64) -> Result<SplitEmbeddings> {
    let d = params.text.output.ncols();
    let videos = split
        .videos
        .par_iter()
        .map(|v| {
            let mut tape = Tape::new();
            let vars = params.record_constant(&mut tape);
            let e = embed_video(&mut tape, v, &vars, opts, alpha)?;
            Ok((tape.value(e.base).clone(), tape.value(e.fused).clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let texts = split
        .texts
        .par_iter()
        .map(|t| {
            let mut tape = Tape::new();
            let vars = params.record_constant(&mut tape);
            let e = embed_text(&mut tape, t, &vars, opts, alpha)?;
            Ok((tape.value(e.base).clone(), tape.value(e.fused).clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (video_base, video_fused) = rows_to_matrix(videos, d);
    let (text_base, text_fused) = rows_to_matrix(texts, d);
    Ok(SplitEmbeddings {
        video_base,
        video_fused,
        text_base,
        text_fused,
    })
}

/// Base embeddings only, for the momentum encoder.
pub fn embed_base(
    params: &ModelParams,
    videos: &[&PreparedVideo],
    texts: &[&PreparedText],
) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut tape = Tape::new();
    let vars = params.record_constant(&mut tape);
    let d = params.text.output.ncols();
    let mut v = Array2::zeros((videos.len(), d));
    for (i, video) in videos.iter().enumerate() {
        let e = encode_video_global(&mut tape, &video.frames, &vars.video)?;
        v.row_mut(i).assign(&tape.value(e).row(0));
    }
    let mut t = Array2::zeros((texts.len(), d));
    for (i, text) in texts.iter().enumerate() {
        let e = encode_text_global(&mut tape, &text.record.tokens, &vars.text)?;
        t.row_mut(i).assign(&tape.value(e).row(0));
    }
    Ok((v, t))
}
