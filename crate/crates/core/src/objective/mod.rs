//! Representation fusion, contrastive objectives, momentum parameters and
//! FIFO memory banks.

mod hal;

use std::collections::VecDeque;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub use hal::{bank_hal_loss, hal_loss, infonce_loss, Positives};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Var};
use crate::params::ModelParams;

/// `normalize(alpha * base + (1 - alpha) * semantic)`
pub fn fuse(tape: &mut Tape, base: Var, semantic: Var, alpha: f64) -> Result<Var> {
    let a = tape.scale(base, alpha)?;
    let b = tape.scale(semantic, 1.0 - alpha)?;
    let mixed = tape.add(a, b)?;
    tape.l2_normalize_rows(mixed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Hal,
    #[serde(rename = "b-infonce")]
    BInfoNce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub mu: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub kind: LossKind,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.9,
            gamma: 0.3,
            mu: 0.1,
            lambda1: 10.0,
            lambda2: 0.1,
            kind: LossKind::Hal,
            temperature: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::Config {
                field: format!("loss.{field}"),
                reason: reason.into(),
            })
        };
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha", "must lie in [0, 1]");
        }
        if !(self.mu > 0.0) {
            return bad("mu", "must be > 0");
        }
        if !self.gamma.is_finite() {
            return bad("gamma", "must be finite");
        }
        if !(self.lambda1 >= 0.0) {
            return bad("lambda1", "must be >= 0");
        }
        if !(self.lambda2 >= 0.0) {
            return bad("lambda2", "must be >= 0");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature", "must be > 0");
        }
        Ok(())
    }
}

/// Fixed-capacity FIFO queue of unit-norm rows, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    capacity: usize,
    rows: VecDeque<Array1<f64>>,
}

pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        MemoryBank {
            capacity,
            rows: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends every row of `batch`, evicting the oldest rows beyond capacity.
    /// Nothing is enqueued if any row is not unit-norm.
    pub fn push(&mut self, batch: &Array2<f64>) -> Result<()> {
        for (i, row) in batch.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE || !norm.is_finite() {
                return Err(Error::NotUnitNorm { row: i, norm });
            }
        }
        for row in batch.rows() {
            self.rows.push_back(row.to_owned());
            if self.rows.len() > self.capacity {
                self.rows.pop_front();
            }
        }
        Ok(())
    }

    /// Contents as an n x d matrix (oldest first); 0 x `width` when empty.
    pub fn matrix(&self, width: usize) -> Array2<f64> {
        let d = self.rows.front().map_or(width, |r| r.len());
        Array2::from_shape_fn((self.rows.len(), d), |(i, j)| self.rows[i][j])
    }
}

/// `momentum <- m * momentum + (1 - m) * live`, leaf by leaf.
pub fn momentum_update(live: &ModelParams, momentum: &mut ModelParams, m: f64) -> Result<()> {
    if !live.same_shapes(momentum) {
        return Err(Error::shape("momentum-update", "momentum model does not mirror the live model"));
    }
    for (mom, cur) in momentum.refs_mut().into_iter().zip(live.refs()) {
        mom.zip_mut_with(cur, |a, &b| *a = m * *a + (1.0 - m) * b);
    }
    Ok(())
}

/// Batch embeddings recorded on the tape, all B x d with unit rows.
#[derive(Debug, Clone, Copy)]
pub struct BatchEmbeddings {
    pub fused_video: Var,
    pub fused_text: Var,
    pub base_video: Var,
    pub base_text: Var,
}

/// Momentum-encoded base embeddings of the same batch (B x d, unit rows).
#[derive(Debug, Clone)]
pub struct MomentumEmbeddings {
    pub video: Array2<f64>,
    pub text: Array2<f64>,
}

/// Breakdown of the objective (values, for logging).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub batch: f64,
    pub video_bank: f64,
    pub text_bank: f64,
}

/// `lambda1 * HAL(VF, TF) + lambda2 * HAL(V, B_T) + lambda2 * HAL(T, B_V)`.
/// With B-InfoNCE the first term is replaced and the bank terms dropped.
pub fn total_objective(
    tape: &mut Tape,
    batch: &BatchEmbeddings,
    momentum: &MomentumEmbeddings,
    video_bank: &MemoryBank,
    text_bank: &MemoryBank,
    cfg: &LossConfig,
) -> Result<(Var, LossTerms)> {
    let b = tape.shape(batch.fused_video).0;
    if b == 0 {
        return Err(Error::shape("objective", "empty batch"));
    }
    let d = tape.shape(batch.fused_video).1;
    let tf_t = tape.transpose(batch.fused_text)?;
    let s = tape.matmul(batch.fused_video, tf_t)?;
    let positives = Positives::diagonal(b);
    let mut terms = LossTerms::default();
    match cfg.kind {
        LossKind::BInfoNce => {
            let l = infonce_loss(tape, s, &positives, cfg.temperature)?;
            terms.batch = tape.value(l)[[0, 0]];
            let total = tape.scale(l, cfg.lambda1)?;
            terms.total = tape.value(total)[[0, 0]];
            Ok((total, terms))
        }
        LossKind::Hal => {
            let l = hal_loss(tape, s, &positives, cfg.gamma, cfg.mu)?;
            terms.batch = tape.value(l)[[0, 0]];
            let mut total = tape.scale(l, cfg.lambda1)?;
            // video anchors against the text bank, text anchors against the video bank
            let lv = bank_hal_loss(tape, batch.base_video, &momentum.text, &text_bank.matrix(d), cfg.gamma, cfg.mu)?;
            let lt = bank_hal_loss(tape, batch.base_text, &momentum.video, &video_bank.matrix(d), cfg.gamma, cfg.mu)?;
            terms.text_bank = tape.value(lv)[[0, 0]];
            terms.video_bank = tape.value(lt)[[0, 0]];
            let banks = tape.add(lv, lt)?;
            let banks = tape.scale(banks, cfg.lambda2)?;
            total = tape.add(total, banks)?;
            terms.total = tape.value(total)[[0, 0]];
            Ok((total, terms))
        }
    }
}
