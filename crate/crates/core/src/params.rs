//! Learnable tensors of the whole model.
//!
//! Every container is generic over its leaf type so the same layout holds
//! matrices ([`ModelParams`]), tape handles ([`ModelVars`]), or anything else
//! that mirrors the parameter set.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numcore::{Tape, Var};

macro_rules! tensor_container {
    (
        $name:ident {
            leaves: [$($leaf:ident),* $(,)?],
            nested: [$($sub:ident),* $(,)?],
            lists: [$($list:ident),* $(,)?] $(,)?
        }
    ) => {
        impl<T> $name<T> {
            /// Applies `f` to every leaf, in a fixed order.
            pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> $name<U> {
                $name {
                    $($leaf: f(&self.$leaf),)*
                    $($sub: self.$sub.map(f),)*
                    $($list: self.$list.iter().map(|x| f(x)).collect(),)*
                }
            }

            pub fn collect_refs<'a>(&'a self, out: &mut Vec<&'a T>) {
                $(out.push(&self.$leaf);)*
                $(self.$sub.collect_refs(out);)*
                $(out.extend(self.$list.iter());)*
            }

            pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
                $(out.push(&mut self.$leaf);)*
                $(self.$sub.collect_mut(out);)*
                $(out.extend(self.$list.iter_mut());)*
            }

            pub fn collect_names(&self, prefix: &str, out: &mut Vec<String>) {
                $(out.push(format!("{prefix}{}", stringify!($leaf)));)*
                $(self.$sub.collect_names(&format!("{prefix}{}.", stringify!($sub)), out);)*
                $(out.extend((0..self.$list.len()).map(|i| format!("{prefix}{}[{i}]", stringify!($list))));)*
            }

            pub fn refs(&self) -> Vec<&T> {
                let mut out = Vec::new();
                self.collect_refs(&mut out);
                out
            }

            pub fn refs_mut(&mut self) -> Vec<&mut T> {
                let mut out = Vec::new();
                self.collect_mut(&mut out);
                out
            }

            pub fn names(&self) -> Vec<String> {
                let mut out = Vec::new();
                self.collect_names("", &mut out);
                out
            }
        }
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights<T> {
    pub query: T,
    pub key: T,
    pub value: T,
}

tensor_container!(AttentionWeights { leaves: [query, key, value], nested: [], lists: [] });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderParams<T> {
    /// vocab x d_model
    pub token_embedding: T,
    /// max_len x d_model
    pub position: T,
    pub output: T,
    pub attention: AttentionWeights<T>,
}

tensor_container!(TextEncoderParams {
    leaves: [token_embedding, position, output],
    nested: [attention],
    lists: [],
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEncoderParams<T> {
    /// d_frame x d_model
    pub frame_projection: T,
    /// max_frames x d_model
    pub position: T,
    pub output: T,
    pub attention: AttentionWeights<T>,
}

tensor_container!(VideoEncoderParams {
    leaves: [frame_projection, position, output],
    nested: [attention],
    lists: [],
});

/// Textual semantics branch: a separate occurrence encoder (its token table
/// also initializes action and entity nodes) and one weight per relation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgcnParams<T> {
    pub occurrence: TextEncoderParams<T>,
    /// num_roles + 1 matrices; the last is the action-occurrence relation.
    pub relation_weights: Vec<T>,
}

tensor_container!(RgcnParams { leaves: [], nested: [occurrence], lists: [relation_weights] });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VseParams<T> {
    pub concept_weight: T,
    pub concept_bias: T,
    pub appearance_weight: T,
    pub appearance_bias: T,
    pub position_weight: T,
    pub position_bias: T,
    /// 2*d_model x d_model
    pub node_weight: T,
    pub node_bias: T,
    pub affinity_query: T,
    pub affinity_key: T,
    pub gcn_weight: T,
}

tensor_container!(VseParams {
    leaves: [
        concept_weight,
        concept_bias,
        appearance_weight,
        appearance_bias,
        position_weight,
        position_bias,
        node_weight,
        node_bias,
        affinity_query,
        affinity_key,
        gcn_weight,
    ],
    nested: [],
    lists: [],
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTensors<T> {
    pub text: TextEncoderParams<T>,
    pub video: VideoEncoderParams<T>,
    pub tse: RgcnParams<T>,
    pub vse: VseParams<T>,
}

tensor_container!(ModelTensors { leaves: [], nested: [text, video, tse, vse], lists: [] });

pub type ModelParams = ModelTensors<Array2<f64>>;
pub type ModelVars = ModelTensors<Var>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_frame: usize,
    pub d_roi: usize,
    pub max_text_len: usize,
    pub max_frames: usize,
    pub num_roles: usize,
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| std * rng.sample::<f64, _>(StandardNormal))
}

fn attention(rng: &mut ChaCha8Rng, d: usize) -> AttentionWeights<Array2<f64>> {
    let s = 1.0 / (d as f64).sqrt();
    AttentionWeights {
        query: normal(rng, d, d, s),
        key: normal(rng, d, d, s),
        value: normal(rng, d, d, s),
    }
}

fn text_encoder(rng: &mut ChaCha8Rng, dims: &ModelDims) -> TextEncoderParams<Array2<f64>> {
    let d = dims.d_model;
    let s = 1.0 / (d as f64).sqrt();
    TextEncoderParams {
        token_embedding: normal(rng, dims.vocab_size, d, s),
        position: normal(rng, dims.max_text_len, d, 0.1 * s),
        output: normal(rng, d, d, s),
        attention: attention(rng, d),
    }
}

impl ModelParams {
    /// Gaussian initialization scaled by fan-in; biases start at zero.
    pub fn init(dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        let d = dims.d_model;
        let s = 1.0 / (d as f64).sqrt();
        let text = text_encoder(rng, dims);
        let video = VideoEncoderParams {
            frame_projection: normal(rng, dims.d_frame, d, 1.0 / (dims.d_frame as f64).sqrt()),
            position: normal(rng, dims.max_frames, d, 0.1 * s),
            output: normal(rng, d, d, s),
            attention: attention(rng, d),
        };
        let tse = RgcnParams {
            occurrence: text_encoder(rng, dims),
            relation_weights: (0..=dims.num_roles).map(|_| normal(rng, d, d, s)).collect(),
        };
        let vse = VseParams {
            concept_weight: normal(rng, d, d, s),
            concept_bias: Array2::zeros((1, d)),
            appearance_weight: normal(rng, dims.d_roi, d, 1.0 / (dims.d_roi as f64).sqrt()),
            appearance_bias: Array2::zeros((1, d)),
            position_weight: normal(rng, 4, d, 0.5),
            position_bias: Array2::zeros((1, d)),
            node_weight: normal(rng, 2 * d, d, 1.0 / (2.0 * d as f64).sqrt()),
            node_bias: Array2::zeros((1, d)),
            affinity_query: normal(rng, d, d, s),
            affinity_key: normal(rng, d, d, s),
            gcn_weight: normal(rng, d, d, s),
        };
        ModelTensors { text, video, tse, vse }
    }

    /// Records every matrix on `tape` as a trainable leaf.
    pub fn record(&self, tape: &mut Tape) -> ModelVars {
        self.map(&mut |m| tape.param(m.clone()))
    }

    /// Records every matrix on `tape` as a constant.
    pub fn record_constant(&self, tape: &mut Tape) -> ModelVars {
        self.map(&mut |m| tape.constant(m.clone()))
    }

    pub fn is_finite(&self) -> bool {
        self.refs().iter().all(|m| m.iter().all(|x| x.is_finite()))
    }

    pub fn same_shapes(&self, other: &ModelParams) -> bool {
        let a = self.refs();
        let b = other.refs();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.dim() == y.dim())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn dims() -> ModelDims {
        ModelDims {
            vocab_size: 10,
            d_model: 4,
            d_frame: 3,
            d_roi: 2,
            max_text_len: 6,
            max_frames: 5,
            num_roles: 3,
        }
    }

    #[test]
    fn layout_is_consistent() {
        let p = ModelParams::init(&dims(), &mut ChaCha8Rng::seed_from_u64(0));
        let names = p.names();
        let refs = p.refs();
        assert_eq!(names.len(), refs.len());
        assert_eq!(names.len(), 6 + 6 + 6 + 4 + 11);
        assert!(names.contains(&"tse.relation_weights[3]".to_string()));
        assert!(names.contains(&"text.attention.query".to_string()));
        assert_eq!(p.tse.relation_weights.len(), 4);
        assert_eq!(p.vse.node_weight.dim(), (8, 4));
        assert!(p.is_finite());
    }

    #[test]
    fn map_preserves_order() {
        let p = ModelParams::init(&dims(), &mut ChaCha8Rng::seed_from_u64(0));
        let mut i = 0;
        let idx = p.map(&mut |_| {
            i += 1;
            i
        });
        assert_eq!(idx.refs().into_iter().copied().collect::<Vec<_>>(), (1..=i).collect::<Vec<_>>());
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(&dims(), &mut ChaCha8Rng::seed_from_u64(5));
        let b = ModelParams::init(&dims(), &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }
}
