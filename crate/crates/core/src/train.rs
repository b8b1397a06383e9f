//! Training loop, evaluation and checkpoints.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{from_json, RunConfig};
use crate::datamodel::DatasetSplit;
use crate::error::{Error, Result};
use crate::evalretrieval::{similarity_matrix, MetricsReport};
use crate::model::{embed_base, embed_split, embed_text, embed_video, stack, ModelOptions, PreparedSplit};
use crate::numcore::{AdamState, Tape, Var};
use crate::objective::{momentum_update, total_objective, BatchEmbeddings, LossTerms, MemoryBank, MomentumEmbeddings};
use crate::params::{ModelParams, ModelVars};

/// Fused-embedding retrieval metrics of `params` on a prepared split.
pub fn evaluate(params: &ModelParams, split: &PreparedSplit, opts: &ModelOptions, alpha: f64) -> Result<MetricsReport> {
    if split.texts.is_empty() {
        return Err(Error::NoTexts);
    }
    let e = embed_split(params, split, opts, alpha)?;
    let s = similarity_matrix(&e.video_fused, &e.text_fused)?;
    MetricsReport::from_similarity(&s, &split.text_to_video)
}

/// Momentum-encoder base embeddings for the pairs of texts `texts`.
pub fn momentum_embeddings(momentum: &ModelParams, split: &PreparedSplit, texts: &[usize]) -> Result<MomentumEmbeddings> {
    let v_refs: Vec<_> = texts.iter().map(|&t| &split.videos[split.text_to_video[t]]).collect();
    let t_refs: Vec<_> = texts.iter().map(|&t| &split.texts[t]).collect();
    let (video, text) = embed_base(momentum, &v_refs, &t_refs)?;
    Ok(MomentumEmbeddings { video, text })
}

/// Records the forward pass for the pairs of texts `texts` and the full
/// objective on `tape`.
pub fn batch_objective(
    tape: &mut Tape,
    vars: &ModelVars,
    split: &PreparedSplit,
    texts: &[usize],
    momentum: &MomentumEmbeddings,
    (video_bank, text_bank): (&MemoryBank, &MemoryBank),
    config: &RunConfig,
) -> Result<(Var, LossTerms)> {
    let opts = config.model_options();
    let alpha = config.loss.alpha;
    let mut v_items = Vec::with_capacity(texts.len());
    for &t in texts {
        let video = &split.videos[split.text_to_video[t]];
        v_items.push(embed_video(tape, video, vars, &opts, alpha)?);
    }
    let mut t_items = Vec::with_capacity(texts.len());
    for &t in texts {
        t_items.push(embed_text(tape, &split.texts[t], vars, &opts, alpha)?);
    }
    let v = stack(tape, &v_items)?;
    let t = stack(tape, &t_items)?;
    let batch = BatchEmbeddings {
        fused_video: v.fused,
        fused_text: t.fused,
        base_video: v.base,
        base_text: t.base,
    };
    total_objective(tape, &batch, momentum, video_bank, text_bank, &config.loss)
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: ModelParams,
    pub momentum: ModelParams,
    pub adam: AdamState,
    pub video_bank: MemoryBank,
    pub text_bank: MemoryBank,
    pub step: u64,
}

impl TrainState {
    pub fn init(config: &RunConfig) -> Result<Self> {
        let dims = config.dims()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ModelParams::init(&dims, &mut rng);
        Ok(TrainState {
            adam: AdamState::new(config.optim.adam(), params.refs()),
            momentum: params.clone(),
            params,
            video_bank: MemoryBank::new(config.train.bank_capacity),
            text_bank: MemoryBank::new(config.train.bank_capacity),
            step: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub config_hash: String,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(source: &str) -> Result<Self> {
        let ckpt: Checkpoint = from_json(source).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        if self.config.hash() != self.config_hash {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        let fresh = TrainState::init(&self.config)?;
        let s = &self.state;
        if !fresh.params.same_shapes(&s.params) || !fresh.params.same_shapes(&s.momentum) {
            return Err(Error::Checkpoint("parameter shapes do not match the config".into()));
        }
        if s.adam.len() != fresh.adam.len() {
            return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
        }
        if !s.params.is_finite() || !s.momentum.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub last: LossTerms,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<MetricsReport>,
}

pub struct Trainer {
    pub config: RunConfig,
    pub options: ModelOptions,
    pub split: PreparedSplit,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(config: RunConfig, split: &DatasetSplit) -> Result<Self> {
        let state = TrainState::init(&config)?;
        Self::resume(config, split, state)
    }

    pub fn resume(config: RunConfig, split: &DatasetSplit, state: TrainState) -> Result<Self> {
        config.validate()?;
        if split.is_empty() {
            return Err(Error::NoTexts);
        }
        split.video_to_text()?;
        let options = config.model_options();
        let split = PreparedSplit::new(split, &options)?;
        Ok(Trainer {
            config,
            options,
            split,
            state,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, split: &DatasetSplit) -> Result<Self> {
        Self::resume(ckpt.config, split, ckpt.state)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.config.hash(),
            config: self.config.clone(),
            state: self.state.clone(),
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.split.texts.len().div_ceil(self.config.train.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.steps_per_epoch() * self.config.train.epochs) as u64
    }

    /// Text order for `epoch`, a pure function of the seed and epoch.
    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch + 1);
        let mut order: Vec<usize> = (0..self.split.texts.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    fn learning_rate(&self) -> f64 {
        let lr = self.config.optim.lr;
        let total = self.total_steps();
        if !self.config.optim.cosine_schedule || total == 0 {
            return lr;
        }
        let progress = self.state.step as f64 / total as f64;
        0.5 * lr * (1.0 + (PI * progress.min(1.0)).cos())
    }

    /// Text indices of the batch at the current step.
    fn current_batch(&self) -> Vec<usize> {
        let spe = self.steps_per_epoch() as u64;
        let epoch = self.state.step / spe;
        let offset = (self.state.step % spe) as usize * self.config.train.batch_size;
        let order = self.epoch_order(epoch);
        let end = (offset + self.config.train.batch_size).min(order.len());
        order[offset..end].to_vec()
    }

    /// One optimization step followed by the momentum update and bank pushes.
    pub fn step(&mut self) -> Result<LossTerms> {
        let texts = self.current_batch();
        let mut tape = Tape::new();
        let vars = self.state.params.record(&mut tape);
        let momentum = momentum_embeddings(&self.state.momentum, &self.split, &texts)?;
        let banks = (&self.state.video_bank, &self.state.text_bank);
        let (loss, terms) = batch_objective(&mut tape, &vars, &self.split, &texts, &momentum, banks, &self.config)?;
        if !terms.total.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.state.step });
        }
        tape.backward(loss)?;
        let grads: Vec<_> = vars.refs().into_iter().map(|&p| tape.grad(p)).collect();
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFiniteLoss { step: self.state.step });
        }
        let lr = self.learning_rate();
        self.state
            .adam
            .step_with_lr(&mut self.state.params.refs_mut(), &grads, lr)?;
        momentum_update(&self.state.params, &mut self.state.momentum, self.config.train.momentum)?;
        self.state.video_bank.push(&momentum.video)?;
        self.state.text_bank.push(&momentum.text)?;
        self.state.step += 1;
        Ok(terms)
    }

    pub fn evaluate(&self) -> Result<MetricsReport> {
        evaluate(&self.state.params, &self.split, &self.options, self.config.loss.alpha)
    }

    /// Trains until the configured epoch count, calling `on_epoch` after
    /// each completed epoch. Returns the per-epoch log; the last entry always
    /// carries metrics.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
        let spe = self.steps_per_epoch() as u64;
        let mut history = Vec::new();
        while self.state.step < self.total_steps() {
            let mut sum = 0.0;
            let mut count = 0;
            let mut last;
            loop {
                last = self.step()?;
                sum += last.total;
                count += 1;
                if self.state.step % spe == 0 {
                    break;
                }
            }
            let epoch = (self.state.step / spe) as usize;
            let every = self.config.train.eval_every;
            let metrics = if every > 0 && epoch % every == 0 {
                Some(self.evaluate()?)
            } else {
                None
            };
            let log = EpochLog {
                epoch,
                mean_loss: sum / count as f64,
                last,
                metrics,
            };
            on_epoch(&log);
            history.push(log);
        }
        match history.last_mut() {
            Some(log) if log.metrics.is_some() => {}
            Some(log) => log.metrics = Some(self.evaluate()?),
            None => {
                let epoch = (self.state.step / spe) as usize;
                history.push(EpochLog {
                    epoch,
                    mean_loss: f64::NAN,
                    last: LossTerms::default(),
                    metrics: Some(self.evaluate()?),
                })
            }
        }
        Ok(history)
    }
}

/// The final metrics of a history produced by [`Trainer::run`].
pub fn final_metrics(history: &[EpochLog]) -> Option<MetricsReport> {
    history.last().and_then(|l| l.metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::generate_synthetic;

    fn tiny() -> (RunConfig, DatasetSplit) {
        let mut cfg = RunConfig::default();
        cfg.data.pairs = 8;
        cfg.data.d_model = 8;
        cfg.train.batch_size = 4;
        cfg.train.epochs = 2;
        cfg.train.bank_capacity = 6;
        cfg.optim.lr = 1e-3;
        let split = generate_synthetic(&cfg.data, cfg.data.seed).unwrap();
        (cfg, split)
    }

    #[test]
    fn zero_epochs_evaluates_initial_params() {
        let (mut cfg, split) = tiny();
        cfg.train.epochs = 0;
        let mut trainer = Trainer::new(cfg.clone(), &split).unwrap();
        let history = trainer.run(|_| {}).unwrap();
        assert_eq!(history.len(), 1);
        assert!(final_metrics(&history).is_some());
        assert_eq!(trainer.state, TrainState::init(&cfg).unwrap());
    }

    #[test]
    fn banks_fill_to_capacity() {
        let (cfg, split) = tiny();
        let mut trainer = Trainer::new(cfg, &split).unwrap();
        trainer.step().unwrap();
        assert_eq!(trainer.state.video_bank.len(), 4);
        trainer.step().unwrap();
        assert_eq!(trainer.state.text_bank.len(), 6);
        assert_eq!(trainer.state.step, 2);
    }

    #[test]
    fn batches_cover_each_text_once_per_epoch() {
        let (mut cfg, _) = tiny();
        cfg.data.pairs = 7;
        let split7 = generate_synthetic(&cfg.data, 0).unwrap();
        let mut trainer = Trainer::new(cfg, &split7).unwrap();
        let mut seen = Vec::new();
        for _ in 0..trainer.steps_per_epoch() {
            seen.extend(trainer.current_batch());
            trainer.state.step += 1;
        }
        seen.sort();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn checkpoint_resume_is_bit_identical() {
        let (cfg, split) = tiny();
        let mut a = Trainer::new(cfg, &split).unwrap();
        a.step().unwrap();
        let ckpt = Checkpoint::from_json(&a.checkpoint().to_json().unwrap()).unwrap();
        assert_eq!(ckpt, a.checkpoint());
        let mut b = Trainer::from_checkpoint(ckpt, &split).unwrap();
        for _ in 0..2 {
            assert_eq!(a.step().unwrap(), b.step().unwrap());
        }
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let (cfg, split) = tiny();
        let trainer = Trainer::new(cfg, &split).unwrap();
        let json = trainer.checkpoint().to_json().unwrap();
        assert!(Checkpoint::from_json(&json[..json.len() / 2]).is_err());
        let mut ckpt = trainer.checkpoint();
        ckpt.config.train.epochs += 1;
        assert!(Checkpoint::from_json(&ckpt.to_json().unwrap()).is_err());
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        let (mut cfg, split) = tiny();
        cfg.optim.cosine_schedule = true;
        let mut trainer = Trainer::new(cfg, &split).unwrap();
        assert_eq!(trainer.learning_rate(), 1e-3);
        trainer.state.step = trainer.total_steps();
        assert!(trainer.learning_rate().abs() < 1e-18);
    }
}
