//! Teacher-forced training with Adam and validation-based model selection.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{mix_seed, Episode};
use crate::eval::exact_match_rate;
use crate::model::{action_ids, Model, ModelConfig, ModelError, ModelInput, Forward};
use crate::tensor::{Adam, Real};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at step {step}")]
    DivergedLoss { step: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Optimizer steps between validation passes; 0 validates once per epoch.
    pub eval_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Train in 64-bit floats instead of 32-bit.
    pub f64_mode: bool,
    /// Stop as soon as validation exact match reaches this percentage.
    pub stop_at_exact_match: Option<f64>,
    /// Validate on at most this many episodes.
    pub val_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            eval_every: 0,
            checkpoint_dir: None,
            f64_mode: false,
            stop_at_exact_match: None,
            val_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::InvalidConfig("lr, batch_size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// One line of `history.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub val_exact_match: Option<f64>,
}

pub struct TrainOutcome<T> {
    /// Parameters at the step with the highest validation exact match.
    pub best: Model<T>,
    pub best_step: usize,
    pub best_val_exact_match: f64,
    pub last: Model<T>,
    pub history: Vec<HistoryRecord>,
}

/// Prepared training example.
pub struct Example {
    pub input: ModelInput,
    pub actions: Vec<usize>,
}

pub fn prepare(episodes: &[Episode], cfg: &ModelConfig) -> Result<Vec<Example>, ModelError> {
    episodes
        .iter()
        .map(|ep| Ok(Example { input: ModelInput::from_episode(ep, cfg.mask_source)?, actions: action_ids(&ep.actions.actions) }))
        .collect()
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    batch: &[&Example],
    dropout_seed: u64,
) -> Result<f64, ModelError> {
    let mut fwd = Forward::new(model, true, dropout_seed);
    let pairs: Vec<(&ModelInput, &[usize])> = batch.iter().map(|e| (&e.input, e.actions.as_slice())).collect();
    let loss = fwd.batch_loss(&pairs)?;
    let value = fwd.graph.value(loss).data()[0].as_f64();
    fwd.graph.backward(loss).map_err(ModelError::from)?;
    let grads = fwd.grads();
    drop(fwd);
    adam.step(model.params_mut(), &grads);
    Ok(value)
}

pub fn train<T: Real>(
    train_set: &[Episode],
    val_set: &[Episode],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut model = Model::<T>::new(model_cfg.clone(), cfg.seed)?;
    let examples = prepare(train_set, model_cfg)?;
    let val = &val_set[..cfg.val_limit.map_or(val_set.len(), |l| l.min(val_set.len()))];
    let mut adam = Adam::new(cfg.lr);
    let mut history = Vec::new();
    let mut best = (model.clone(), 0, -1.0);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let eval_every = if cfg.eval_every == 0 { steps_per_epoch } else { cfg.eval_every };
    let mut writer = match &cfg.checkpoint_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(fs::File::create(dir.join("history.jsonl"))?))
        }
        None => None,
    };

    let mut step = 0;
    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1, epoch as u64)));
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let loss = train_step(&mut model, &mut adam, &batch, mix_seed(cfg.seed, 2, step as u64))?;
            step += 1;
            if !loss.is_finite() {
                return Err(TrainError::DivergedLoss { step });
            }
            let last_step = epoch + 1 == cfg.epochs && bi + 1 == steps_per_epoch;
            let val_em = if (step % eval_every == 0 || last_step) && !val.is_empty() {
                let em = exact_match_rate(&model, val)?;
                if em > best.2 {
                    best = (model.clone(), step, em);
                }
                Some(em)
            } else {
                None
            };
            let rec = HistoryRecord { step, epoch, loss, val_exact_match: val_em };
            if let Some(w) = writer.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&rec)?)?;
            }
            history.push(rec);
            if let (Some(target), Some(em)) = (cfg.stop_at_exact_match, val_em) {
                if em >= target {
                    break 'outer;
                }
            }
        }
    }
    if val.is_empty() {
        best = (model.clone(), step, 0.0);
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        best.0.save(&dir.join("best.ckpt"))?;
        model.save(&dir.join("last.ckpt"))?;
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    Ok(TrainOutcome { best: best.0, best_step: best.1, best_val_exact_match: best.2, last: model, history })
}
