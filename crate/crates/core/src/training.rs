//! Teacher-forced training: pretraining the plain network, transplanting it
//! into the fused one, and fine-tuning everything.
//!
//! All randomness is a function of the seed, the step counter and dataset
//! indices, so a run resumed from a checkpoint continues exactly.

use punchline_autograd::{Matrix, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{Example, ForwardOptions, ModelKind, Seq2Seq};
use crate::nn::{Ctx, ParamStore, Partition};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps, on top of `max_epochs`.
    pub max_steps: Option<u64>,
    /// Validate every this many steps.
    pub eval_every: u64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Global-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Keep knowledge-only parameters fixed during fine-tuning.
    pub freeze_knowledge: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 100,
            max_steps: None,
            eval_every: 50,
            patience: 5,
            clip_norm: Some(1.0),
            freeze_knowledge: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("train.learning_rate must be non-negative".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("train.eval_every must be positive".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("train.clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }
}

/// Progress that a checkpoint must carry to resume a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub best_valid_loss: Option<f64>,
    pub best_step: u64,
    pub evals_without_improvement: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
}

/// One JSON-lines metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub ppl: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grad_norm: Option<f64>,
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub clipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Token-averaged cross-entropy of the batch.
    pub loss: f64,
    pub tokens: usize,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// splitmix64 over a sequence of words.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const DROPOUT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Seq2Seq,
    pub optimizer: Adam,
    pub config: TrainConfig,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(model: Seq2Seq, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(config.adam(), &model.store);
        Ok(Self { model, optimizer, config, state: TrainState::default() })
    }

    /// Dataset indices of the batch taken at `step`: each epoch is a fresh
    /// seeded permutation cut into consecutive batches.
    pub fn batch_indices(&self, step: u64, dataset_len: usize) -> Vec<usize> {
        let per_epoch = dataset_len.div_ceil(self.config.batch_size) as u64;
        let (epoch, within) = (step / per_epoch, (step % per_epoch) as usize);
        let mut order: Vec<usize> = (0..dataset_len).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[self.config.seed, SHUFFLE_STREAM, epoch])));
        let start = within * self.config.batch_size;
        order[start..(start + self.config.batch_size).min(dataset_len)].to_vec()
    }

    fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        dataset_len.div_ceil(self.config.batch_size) as u64
    }

    /// Summed loss, token count and gradients of each example, in order.
    fn example_gradients(&self, examples: &[Example], indices: &[usize]) -> Result<Vec<(f64, usize, Vec<Option<Matrix>>)>> {
        let step = self.state.step;
        let dropout = self.model.config.dropout;
        indices
            .par_iter()
            .map(|&i| {
                let tape = Tape::new();
                let rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.config.seed, DROPOUT_STREAM, step, i as u64]));
                let ctx = Ctx::new(&tape, &self.model.store).with_dropout(dropout, rng);
                let (loss, tokens) = self.model.loss(&ctx, &examples[i], ForwardOptions::default())?;
                let value = tape.item(loss);
                let mut grads = tape.backward(loss);
                Ok((value, tokens, ctx.param_grads(&mut grads)))
            })
            .collect()
    }

    /// One optimizer step on the batch scheduled for the current step.
    pub fn train_step(&mut self, examples: &[Example]) -> Result<StepReport> {
        if examples.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let indices = self.batch_indices(self.state.step, examples.len());
        let per_example = self.example_gradients(examples, &indices)?;
        let tokens: usize = per_example.iter().map(|e| e.1).sum();
        let total: f64 = per_example.iter().map(|e| e.0).sum();
        let loss = total / tokens as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step: self.state.step, loss });
        }
        // Fixed summation order keeps the update independent of thread count.
        let mut grads: Vec<Option<Matrix>> = vec![None; self.model.store.len()];
        for (_, _, g) in per_example {
            for (acc, g) in grads.iter_mut().zip(g) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.add_assign(&g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        let scale = 1.0 / tokens as f64;
        for g in grads.iter_mut().flatten() {
            g.scale_in_place(scale);
        }
        let (grad_norm, clipped) = match self.config.clip_norm {
            Some(max) => {
                let norm = clip_global_norm(&mut grads, max);
                (norm, norm > max)
            }
            None => (crate::optim::global_norm(&grads), false),
        };
        let freeze = self.config.freeze_knowledge;
        self.optimizer.update(&mut self.model.store, &grads, |p| freeze && p.partition == Partition::KnowledgeOnly);
        self.state.step += 1;
        Ok(StepReport { loss, tokens, grad_norm, clipped })
    }

    /// Token-averaged loss without dropout.
    pub fn evaluate(&self, examples: &[Example]) -> Result<f64> {
        evaluate_loss(&self.model, examples)
    }

    fn total_steps(&self, dataset_len: usize) -> u64 {
        let by_epochs = self.steps_per_epoch(dataset_len) * self.config.max_epochs as u64;
        self.config.max_steps.map_or(by_epochs, |m| m.min(by_epochs))
    }

    /// Trains until the step budget is spent or validation stops improving.
    /// An empty validation set falls back to the training set. Returns the
    /// parameters of the best validation evaluation.
    pub fn fit(&mut self, train: &[Example], valid: &[Example], log: &mut dyn FnMut(&Metric)) -> Result<ParamStore> {
        let valid = if valid.is_empty() { train } else { valid };
        let total = self.total_steps(train.len());
        let mut best = self.model.store.clone();
        while self.state.step < total {
            let report = self.train_step(train)?;
            let step = self.state.step;
            log(&Metric {
                step,
                split: Split::Train,
                loss: report.loss,
                ppl: report.loss.exp(),
                grad_norm: Some(report.grad_norm),
                clipped: report.clipped,
            });
            if step % self.config.eval_every == 0 || step == total {
                let loss = self.evaluate(valid)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence { step, loss });
                }
                log(&Metric { step, split: Split::Valid, loss, ppl: loss.exp(), grad_norm: None, clipped: false });
                if self.state.best_valid_loss.is_none_or(|b| loss < b) {
                    self.state.best_valid_loss = Some(loss);
                    self.state.best_step = step;
                    self.state.evals_without_improvement = 0;
                    best = self.model.store.clone();
                } else {
                    self.state.evals_without_improvement += 1;
                    if self.state.evals_without_improvement >= self.config.patience {
                        break;
                    }
                }
            }
        }
        Ok(best)
    }
}

pub fn evaluate_loss(model: &Seq2Seq, examples: &[Example]) -> Result<f64> {
    let per: Vec<(f64, usize)> = examples
        .par_iter()
        .map(|ex| {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &model.store);
            let (loss, tokens) = model.loss(&ctx, ex, ForwardOptions::default())?;
            Ok((tape.item(loss), tokens))
        })
        .collect::<Result<_>>()?;
    let tokens: usize = per.iter().map(|p| p.1).sum();
    if tokens == 0 {
        return Ok(0.0);
    }
    Ok(per.iter().map(|p| p.0).sum::<f64>() / tokens as f64)
}

/// Fresh fused model carrying the pretrainable tensors of `pretrained`;
/// knowledge-only tensors are initialised from `seed`.
pub fn transplant(pretrained: &Seq2Seq, seed: u64) -> Result<Seq2Seq> {
    if pretrained.kind != ModelKind::Plain {
        return Err(Error::ConfigMismatch("transplant source must be a plain model".into()));
    }
    let mut fused = Seq2Seq::new(pretrained.config.clone(), ModelKind::Fused, seed)?;
    fused.transplant_from(pretrained)?;
    Ok(fused)
}

/// Result of a training stage.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// State at the last step, for resumption.
    pub last: Trainer,
    /// Model with the best validation parameters.
    pub best: Seq2Seq,
}

fn run(mut trainer: Trainer, train: &[Example], valid: &[Example], log: &mut dyn FnMut(&Metric)) -> Result<TrainOutcome> {
    let store = trainer.fit(train, valid, log)?;
    let mut best = trainer.model.clone();
    best.store = store;
    Ok(TrainOutcome { last: trainer, best })
}

/// Trains the plain encoder-decoder on (set-up, punchline) pairs.
pub fn pretrain(model: Seq2Seq, train: &[Example], valid: &[Example], config: TrainConfig, log: &mut dyn FnMut(&Metric)) -> Result<TrainOutcome> {
    if model.kind != ModelKind::Plain {
        return Err(Error::Config("pretraining expects a plain model".into()));
    }
    run(Trainer::new(model, config)?, train, valid, log)
}

/// Trains every parameter of a fused model, with fresh optimizer moments.
pub fn finetune(model: Seq2Seq, train: &[Example], valid: &[Example], config: TrainConfig, log: &mut dyn FnMut(&Metric)) -> Result<TrainOutcome> {
    if model.kind != ModelKind::Fused {
        return Err(Error::Config("fine-tuning expects a fused model".into()));
    }
    run(Trainer::new(model, config)?, train, valid, log)
}

/// Runs `f` on a pool of `workers` threads, or the global pool for 0.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
