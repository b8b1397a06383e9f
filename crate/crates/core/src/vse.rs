//! Visual semantics: frequency-ranked entity selection, entity node
//! initialization from concept, appearance and position, a scaled
//! dot-product affinity graph, one GCN layer with residual, and the caption
//! (holistic) branch.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::Array2;

use crate::datamodel::{EntityDetection, VideoRecord};
use crate::encoders::encode_text_global;
use crate::error::{Error, Result};
use crate::numcore::{Tape, Var};
use crate::params::{TextEncoderParams, VseParams};
use crate::tse::mean_of_two;

/// Detections sharing one (object, attribute) identity.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityGroup {
    pub object_token: u32,
    pub attribute_token: u32,
    pub count: usize,
    pub total_confidence: f64,
    pub mean_roi: Vec<f64>,
    pub mean_bbox: [f64; 4],
}

fn canonical(a: &&EntityDetection, b: &&EntityDetection) -> Ordering {
    let key = |d: &EntityDetection| {
        let mut k = vec![d.confidence.to_bits()];
        k.extend(d.bbox.iter().map(|x| x.to_bits()));
        k.extend(d.roi.iter().map(|x| x.to_bits()));
        k
    };
    key(a).cmp(&key(b))
}

/// Keeps detections at or above `conf_threshold`, groups them by
/// (object, attribute), and returns the `k` most frequent groups. Ties go to
/// the larger confidence sum, then the smaller object token.
pub fn select_topk_entities(video: &VideoRecord, k: usize, conf_threshold: f64) -> Result<Vec<EntityGroup>> {
    if k == 0 {
        return Err(Error::Config {
            field: "top_k".into(),
            reason: "must be >= 1".into(),
        });
    }
    let mut by_identity: BTreeMap<(u32, u32), Vec<&EntityDetection>> = BTreeMap::new();
    for det in video.detections().filter(|d| d.confidence >= conf_threshold) {
        by_identity.entry((det.object_token, det.attribute_token)).or_default().push(det);
    }
    if by_identity.is_empty() {
        return Err(Error::NoEntities);
    }
    let mut groups: Vec<EntityGroup> = by_identity
        .into_iter()
        .map(|((object_token, attribute_token), mut members)| {
            // fixed summation order makes the means independent of input order
            members.sort_by(canonical);
            let n = members.len() as f64;
            let d_roi = members[0].roi.len();
            let mut roi = vec![0.0; d_roi];
            let mut bbox = [0.0; 4];
            let mut conf = 0.0;
            for m in &members {
                roi.iter_mut().zip(&m.roi).for_each(|(a, x)| *a += x);
                bbox.iter_mut().zip(&m.bbox).for_each(|(a, x)| *a += x);
                conf += m.confidence;
            }
            roi.iter_mut().for_each(|x| *x /= n);
            bbox.iter_mut().for_each(|x| *x /= n);
            EntityGroup {
                object_token,
                attribute_token,
                count: members.len(),
                total_confidence: conf,
                mean_roi: roi,
                mean_bbox: bbox,
            }
        })
        .collect();
    groups.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then(b.total_confidence.total_cmp(&a.total_confidence))
            .then(a.object_token.cmp(&b.object_token))
            .then(a.attribute_token.cmp(&b.attribute_token))
    });
    groups.truncate(k);
    Ok(groups)
}

/// Per-node representations, each K x d_model.
#[derive(Debug, Clone, Copy)]
pub struct EntityNodes {
    pub concept: Var,
    pub appearance: Var,
    pub position: Var,
    /// Initial graph node embeddings.
    pub init: Var,
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// concept = ReLU((emb(object) + emb(attribute)) Wc + bc)
/// appearance = roi Wa + ba, position = bbox Wp + bp
/// init = ReLU([concept, appearance + position] Wn + bn)
pub fn entity_nodes(
    tape: &mut Tape,
    groups: &[EntityGroup],
    params: &VseParams<Var>,
    token_table: Var,
) -> Result<EntityNodes> {
    if groups.is_empty() {
        return Err(Error::NoEntities);
    }
    let k = groups.len();
    let objects: Vec<usize> = groups.iter().map(|g| g.object_token as usize).collect();
    let attributes: Vec<usize> = groups.iter().map(|g| g.attribute_token as usize).collect();
    let o = tape.gather_rows(token_table, &objects)?;
    let a = tape.gather_rows(token_table, &attributes)?;
    let words = tape.add(o, a)?;
    let concept = affine(tape, words, params.concept_weight, params.concept_bias)?;
    let concept = tape.relu(concept)?;

    let d_roi = groups[0].mean_roi.len();
    if let Some(g) = groups.iter().find(|g| g.mean_roi.len() != d_roi) {
        return Err(Error::shape("entity-nodes", format!("roi width {} vs {}", g.mean_roi.len(), d_roi)));
    }
    let roi = tape.constant(Array2::from_shape_fn((k, d_roi), |(i, j)| groups[i].mean_roi[j]));
    let bbox = tape.constant(Array2::from_shape_fn((k, 4), |(i, j)| groups[i].mean_bbox[j]));
    let appearance = affine(tape, roi, params.appearance_weight, params.appearance_bias)?;
    let position = affine(tape, bbox, params.position_weight, params.position_bias)?;
    let local = tape.add(appearance, position)?;
    let joined = tape.concat_columns(&[concept, local])?;
    let init = affine(tape, joined, params.node_weight, params.node_bias)?;
    let init = tape.relu(init)?;
    Ok(EntityNodes {
        concept,
        appearance,
        position,
        init,
    })
}

/// `(E Wq)(E Wk)^T / sqrt(d)`, row-softmaxed unless `raw`.
pub fn affinity_matrix(tape: &mut Tape, nodes: Var, query: Var, key: Var, raw: bool) -> Result<Var> {
    let d = tape.shape(nodes).1;
    let q = tape.matmul(nodes, query)?;
    let k = tape.matmul(nodes, key)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    if raw {
        Ok(logits)
    } else {
        tape.row_softmax(logits)
    }
}

/// `ReLU(H E W + E)`
pub fn gcn_layer(tape: &mut Tape, nodes: Var, affinity: Var, weight: Var) -> Result<Var> {
    let mixed = tape.matmul(affinity, nodes)?;
    let mixed = tape.matmul(mixed, weight)?;
    let out = tape.add(mixed, nodes)?;
    tape.relu(out)
}

#[derive(Debug, Clone, Copy)]
pub struct VisualSemantics {
    /// Discrete: mean of post-reasoning entity rows.
    pub vds: Var,
    /// Holistic: the encoded caption.
    pub vhs: Var,
    pub vs: Var,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VseOptions {
    /// Bypass the GCN and average the initialized nodes.
    pub mean_pool: bool,
    /// Feed unnormalized affinity logits to the GCN.
    pub raw_affinity: bool,
}

/// Discrete vector from pre-selected entity groups.
pub fn discrete_semantics(
    tape: &mut Tape,
    groups: &[EntityGroup],
    params: &VseParams<Var>,
    token_table: Var,
    opts: VseOptions,
) -> Result<Var> {
    let nodes = entity_nodes(tape, groups, params, token_table)?;
    let reasoned = if opts.mean_pool {
        nodes.init
    } else {
        let h = affinity_matrix(tape, nodes.init, params.affinity_query, params.affinity_key, opts.raw_affinity)?;
        gcn_layer(tape, nodes.init, h, params.gcn_weight)?
    };
    tape.mean_rows(reasoned)
}

/// `caption_encoder` is the base text encoder (shared weights).
pub fn visual_semantics(
    tape: &mut Tape,
    groups: &[EntityGroup],
    caption_tokens: &[u32],
    params: &VseParams<Var>,
    token_table: Var,
    caption_encoder: &TextEncoderParams<Var>,
    opts: VseOptions,
) -> Result<VisualSemantics> {
    let vds = discrete_semantics(tape, groups, params, token_table, opts)?;
    let vhs = encode_text_global(tape, caption_tokens, caption_encoder)?;
    let vs = mean_of_two(tape, vds, vhs)?;
    Ok(VisualSemantics { vds, vhs, vs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ModelDims, ModelParams};
    use ndarray::{array, s};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det(object: u32, attribute: u32, conf: f64) -> EntityDetection {
        EntityDetection {
            object_token: object,
            attribute_token: attribute,
            roi: vec![conf, 1.0 - conf],
            bbox: [0.1, 0.2, 0.3, 0.4],
            confidence: conf,
        }
    }

    fn video(frames: Vec<Vec<EntityDetection>>) -> VideoRecord {
        VideoRecord {
            video_id: "v".into(),
            frames: vec![vec![0.0; 3]; frames.len()],
            entities: frames,
            caption_tokens: vec![1, 4],
        }
    }

    fn params() -> ModelParams {
        let dims = ModelDims {
            vocab_size: 12,
            d_model: 4,
            d_frame: 3,
            d_roi: 2,
            max_text_len: 8,
            max_frames: 4,
            num_roles: 3,
        };
        ModelParams::init(&dims, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn frequency_then_confidence_tie_break() {
        let v = video(vec![
            vec![det(7, 1, 0.9), det(3, 1, 0.8), det(9, 1, 0.95)],
            vec![det(7, 1, 0.9), det(3, 1, 0.7)],
        ]);
        let top = select_topk_entities(&v, 1, 0.5).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].object_token, 7);
        assert_eq!(top[0].count, 2);
        assert!((top[0].total_confidence - 1.8).abs() < 1e-12);
        let all = select_topk_entities(&v, 10, 0.5).unwrap();
        assert_eq!(all.iter().map(|g| g.object_token).collect::<Vec<_>>(), vec![7, 3, 9]);
    }

    #[test]
    fn confidence_filter_and_means() {
        let v = video(vec![vec![det(5, 2, 0.6), det(6, 2, 0.3)], vec![det(5, 2, 0.8)]]);
        let top = select_topk_entities(&v, 8, 0.5).unwrap();
        assert_eq!(top.len(), 1);
        assert!((top[0].mean_roi[0] - 0.7).abs() < 1e-12);
        assert_eq!(top[0].mean_bbox, [0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn nothing_above_threshold() {
        let v = video(vec![vec![det(5, 2, 0.1)]]);
        assert!(matches!(select_topk_entities(&v, 3, 0.5), Err(Error::NoEntities)));
        assert_eq!(Error::NoEntities.to_string(), "no entities above threshold");
    }

    #[test]
    fn zero_inputs_leave_biases() {
        let mut p = params();
        p.vse.appearance_bias = array![[0.1, 0.0, -0.2, 0.0]];
        let group = EntityGroup {
            object_token: 4,
            attribute_token: 5,
            count: 1,
            total_confidence: 1.0,
            mean_roi: vec![0.0, 0.0],
            mean_bbox: [0.0; 4],
        };
        let mut t = Tape::new();
        let vars = p.record_constant(&mut t);
        let n = entity_nodes(&mut t, &[group], &vars.vse, vars.tse.occurrence.token_embedding).unwrap();
        let local = t.value(n.appearance) + t.value(n.position);
        assert_eq!(local, array![[0.1, 0.0, -0.2, 0.0]]);
    }

    #[test]
    fn identity_block_node_weights_pass_concept_through() {
        let mut p = params();
        let mut w = Array2::zeros((8, 4));
        w.slice_mut(s![0..4, ..]).assign(&Array2::eye(4));
        p.vse.node_weight = w;
        let group = EntityGroup {
            object_token: 4,
            attribute_token: 5,
            count: 1,
            total_confidence: 1.0,
            mean_roi: vec![0.3, -0.4],
            mean_bbox: [0.1, 0.1, 0.2, 0.2],
        };
        let mut t = Tape::new();
        let vars = p.record_constant(&mut t);
        let n = entity_nodes(&mut t, &[group.clone(), group], &vars.vse, vars.tse.occurrence.token_embedding).unwrap();
        // concept is already ReLU'd, so ReLU(concept) == concept
        assert_eq!(t.value(n.init), t.value(n.concept));
        assert_eq!(t.value(n.init).row(0), t.value(n.init).row(1));
    }

    fn affinity(nodes: Array2<f64>, q: Array2<f64>, k: Array2<f64>, raw: bool) -> Array2<f64> {
        let mut t = Tape::new();
        let (n, q, k) = (t.constant(nodes), t.constant(q), t.constant(k));
        let h = affinity_matrix(&mut t, n, q, k, raw).unwrap();
        t.value(h).clone()
    }

    #[test]
    fn affinity_hand_values() {
        let e = array![[2.0, 0.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0]];
        let logits = affinity(e.clone(), Array2::eye(4), Array2::eye(4), true);
        assert_eq!(logits[[0, 1]], 1.0);
        let h = affinity(e, Array2::eye(4), Array2::eye(4), false);
        for row in h.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(affinity(array![[0.3, 0.1, 0.0, 2.0]], Array2::eye(4), Array2::eye(4), false), array![[1.0]]);
        let same = Array2::from_elem((3, 4), 0.7);
        let h = affinity(same, Array2::eye(4), Array2::eye(4), false);
        assert!(h.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    fn gcn(e: Array2<f64>, h: Array2<f64>, w: Array2<f64>) -> Array2<f64> {
        let mut t = Tape::new();
        let (e, h, w) = (t.constant(e), t.constant(h), t.constant(w));
        let o = gcn_layer(&mut t, e, h, w).unwrap();
        t.value(o).clone()
    }

    #[test]
    fn gcn_residual_identity_and_no_mixing() {
        let e = array![[0.2, 0.0], [1.0, 0.5]];
        let h = array![[0.5, 0.5], [0.1, 0.9]];
        assert_eq!(gcn(e.clone(), h, Array2::zeros((2, 2))), e);
        let w = array![[1.0, -2.0], [0.5, 0.3]];
        let e = array![[0.2, 0.1], [-1.0, 0.5]];
        let expected = (e.dot(&w) + &e).mapv(|x: f64| x.max(0.0));
        assert_eq!(gcn(e, Array2::eye(2), w), expected);
    }

    #[test]
    fn visual_semantics_means() {
        let p = params();
        let v = video(vec![vec![det(4, 5, 0.9)]]);
        let groups = select_topk_entities(&v, 8, 0.5).unwrap();
        let mut t = Tape::new();
        let vars = p.record_constant(&mut t);
        let s = visual_semantics(
            &mut t,
            &groups,
            &v.caption_tokens,
            &vars.vse,
            vars.tse.occurrence.token_embedding,
            &vars.text,
            VseOptions::default(),
        )
        .unwrap();
        let expected = (t.value(s.vds) + t.value(s.vhs)) * 0.5;
        assert_eq!(t.value(s.vs), &expected);
        // K = 1: the discrete vector is the single post-GCN row
        let nodes = entity_nodes(&mut t, &groups, &vars.vse, vars.tse.occurrence.token_embedding).unwrap();
        let h = affinity_matrix(&mut t, nodes.init, vars.vse.affinity_query, vars.vse.affinity_key, false).unwrap();
        let row = gcn_layer(&mut t, nodes.init, h, vars.vse.gcn_weight).unwrap();
        assert_eq!(t.value(row), t.value(s.vds));
    }
}
