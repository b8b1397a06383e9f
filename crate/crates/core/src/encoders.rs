//! Base modality encoders: one single-head attention layer with residual over
//! embedded tokens or projected frames, then pooling and an output projection.

use ndarray::{Array1, Array2};

use crate::datamodel::EOS;
use crate::error::{Error, Result};
use crate::numcore::{Tape, Var};
use crate::params::{AttentionWeights, TextEncoderParams, VideoEncoderParams};

/// `row-softmax((X Wq)(X Wk)^T / sqrt(d)) (X Wv) + X`
pub fn attention_layer(tape: &mut Tape, x: Var, w: &AttentionWeights<Var>) -> Result<Var> {
    let d = tape.shape(x).1;
    let q = tape.matmul(x, w.query)?;
    let k = tape.matmul(x, w.key)?;
    let v = tape.matmul(x, w.value)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    let attn = tape.row_softmax(logits)?;
    let mixed = tape.matmul(attn, v)?;
    tape.add(mixed, x)
}

/// Global text vector taken at an appended EOS position; 1 x d_model, unit norm.
pub fn encode_text_global(tape: &mut Tape, tokens: &[u32], params: &TextEncoderParams<Var>) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::EmptyTokens);
    }
    let max_len = tape.shape(params.position).0;
    let len = tokens.len() + 1;
    if len > max_len {
        return Err(Error::TooLong {
            len: tokens.len(),
            max: max_len - 1,
        });
    }
    let ids: Vec<usize> = tokens.iter().chain(std::iter::once(&EOS)).map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..len).collect();
    let embedded = tape.gather_rows(params.token_embedding, &ids)?;
    let pos = tape.gather_rows(params.position, &positions)?;
    let x = tape.add(embedded, pos)?;
    let h = attention_layer(tape, x, &params.attention)?;
    let eos = tape.select_row(h, len - 1)?;
    let out = tape.matmul(eos, params.output)?;
    tape.l2_normalize_rows(out)
}

/// Global video vector: mean over post-attention frame rows; 1 x d_model, unit norm.
pub fn encode_video_global(tape: &mut Tape, frames: &Array2<f64>, params: &VideoEncoderParams<Var>) -> Result<Var> {
    let n = frames.nrows();
    if n == 0 {
        return Err(Error::InvalidRecord {
            id: "video".into(),
            reason: "no frames".into(),
        });
    }
    let max_frames = tape.shape(params.position).0;
    if n > max_frames {
        return Err(Error::TooLong { len: n, max: max_frames });
    }
    let frames = tape.constant(frames.clone());
    let projected = tape.matmul(frames, params.frame_projection)?;
    let positions: Vec<usize> = (0..n).collect();
    let pos = tape.gather_rows(params.position, &positions)?;
    let x = tape.add(projected, pos)?;
    let h = attention_layer(tape, x, &params.attention)?;
    let pooled = tape.mean_rows(h)?;
    let out = tape.matmul(pooled, params.output)?;
    tape.l2_normalize_rows(out)
}

fn row_vector(m: &Array2<f64>) -> Array1<f64> {
    m.row(0).to_owned()
}

/// Tape-free convenience: encodes `tokens` under concrete parameters.
pub fn encode_text(tokens: &[u32], params: &TextEncoderParams<Array2<f64>>) -> Result<Array1<f64>> {
    let mut tape = Tape::new();
    let vars = params.map(&mut |m| tape.constant(m.clone()));
    let v = encode_text_global(&mut tape, tokens, &vars)?;
    Ok(row_vector(tape.value(v)))
}

/// Tape-free convenience: encodes `frames` under concrete parameters.
pub fn encode_video(frames: &Array2<f64>, params: &VideoEncoderParams<Array2<f64>>) -> Result<Array1<f64>> {
    let mut tape = Tape::new();
    let vars = params.map(&mut |m| tape.constant(m.clone()));
    let v = encode_video_global(&mut tape, frames, &vars)?;
    Ok(row_vector(tape.value(v)))
}
