//! Base fine-tuning, prompt initialization, prompt tuning and the
//! whole-model ablation, all minimizing token cross-entropy with Adam and a
//! linearly decaying learning rate.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, Pair, PromptParams, Trainable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    PromptInit,
    PromptTune,
    WholeModelAblation,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::PromptInit => "prompt_init",
            Stage::PromptTune => "prompt_tune",
            Stage::WholeModelAblation => "whole_model_ablation",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// `lr0 * (1 - t / T)` over the `T` optimizer steps of the run.
    #[default]
    LinearDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
}

fn default_batch_size() -> usize {
    10
}

impl TrainConfig {
    pub fn defaults(stage: Stage) -> Self {
        let (learning_rate, epochs) = match stage {
            Stage::Base => (2e-3, 20),
            Stage::PromptInit => (0.01, 20),
            Stage::PromptTune => (0.005, 5),
            Stage::WholeModelAblation => (5e-3, 10),
        };
        TrainConfig {
            stage,
            learning_rate,
            epochs,
            batch_size: default_batch_size(),
            seed: 0,
            lr_schedule: LrSchedule::LinearDecay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let name = self.stage.name();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "{name}.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config(format!("{name}.epochs must be at least 1")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{name}.batch_size must be at least 1")));
        }
        Ok(())
    }

    fn expect(&self, stages: &[Stage]) -> Result<()> {
        self.validate()?;
        if stages.contains(&self.stage) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "training stage {} cannot run here",
                self.stage.name()
            )))
        }
    }

    /// Learning rate at optimizer step `t` of `total`.
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::LinearDecay => {
                self.learning_rate * (1.0 - t as f64 / total.max(1) as f64).max(0.0)
            }
        }
    }
}

/// An encoded training pair; `tgt` excludes BOS and EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainPair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

impl TrainPair {
    pub fn as_pair(&self) -> Pair<'_> {
        Pair {
            src: &self.src,
            tgt: &self.tgt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept.
    pub selected_epoch: usize,
}

impl TrainReport {
    pub fn write_log(&self, path: &Path) -> Result<()> {
        crate::io::write_jsonl(path, &self.log)
    }
}

/// Adam with the customary decay constants.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i] as f64;
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let update = lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
            params[i] -= update as f32;
        }
    }
}

/// Mean loss over a set, evaluated in batches without dropout.
pub fn mean_loss(
    model: &Model<f32>,
    prompts: Option<&PromptParams<f32>>,
    data: &[TrainPair],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let pairs: Vec<Pair> = chunk.iter().map(TrainPair::as_pair).collect();
        let n: usize = chunk.iter().map(|p| p.tgt.len() + 1).sum();
        total += model.loss(prompts, &pairs)? * n as f64;
        tokens += n;
    }
    Ok(total / tokens.max(1) as f64)
}

/// Holds out the last tenth of `train` when no validation set is given.
fn split_validation<'a>(train: &'a [TrainPair], val: &'a [TrainPair]) -> (&'a [TrainPair], &'a [TrainPair]) {
    if !val.is_empty() || train.len() < 10 {
        return (train, val);
    }
    let cut = train.len() - train.len() / 10;
    (&train[..cut], &train[cut..])
}

enum Target<'a> {
    Base(&'a mut Model<f32>),
    Prompt(&'a Model<f32>, &'a mut PromptParams<f32>),
}

impl Target<'_> {
    fn params(&self) -> &[f32] {
        match self {
            Target::Base(m) => m.params(),
            Target::Prompt(_, p) => p.data(),
        }
    }

    fn params_mut(&mut self) -> &mut [f32] {
        match self {
            Target::Base(m) => m.params_mut(),
            Target::Prompt(_, p) => p.data_mut(),
        }
    }

    fn loss_and_grad(&self, batch: &[Pair], rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f32>)> {
        match self {
            Target::Base(m) => {
                let want = Trainable { base: true, prompt: false };
                let (loss, g) = m.loss_and_grad(None, batch, want, Some(rng))?;
                Ok((loss, g.base.expect("base gradients requested")))
            }
            Target::Prompt(m, p) => {
                let want = Trainable { base: false, prompt: true };
                let (loss, g) = m.loss_and_grad(Some(p), batch, want, Some(rng))?;
                Ok((loss, g.prompt.expect("prompt gradients requested")))
            }
        }
    }

    fn val_loss(&self, data: &[TrainPair], batch: usize) -> Result<f64> {
        match self {
            Target::Base(m) => mean_loss(m, None, data, batch),
            Target::Prompt(m, p) => mean_loss(m, Some(p), data, batch),
        }
    }
}

fn train_loop(
    mut target: Target,
    train: &[TrainPair],
    val: &[TrainPair],
    cfg: &TrainConfig,
    select_best: bool,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::EmptyInput(format!("{} stage has no training pairs", cfg.stage.name())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(target.params().len());
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<f32>)> = None;
    let mut t = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut lr = cfg.learning_rate;
        for idx in order.chunks(cfg.batch_size) {
            let pairs: Vec<Pair> = idx.iter().map(|&i| train[i].as_pair()).collect();
            let (loss, grads) = target.loss_and_grad(&pairs, &mut rng)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, loss });
            }
            lr = cfg.lr_at(t, total);
            adam.step(target.params_mut(), &grads, lr);
            sum += loss;
            t += 1;
        }
        let train_loss = sum / per_epoch as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            let v = target.val_loss(val, cfg.batch_size)?;
            if !v.is_finite() {
                return Err(Error::Divergence { epoch, loss: v });
            }
            Some(v)
        };
        if select_best {
            if let Some(v) = val_loss {
                if best.as_ref().is_none_or(|b| v < b.0) {
                    best = Some((v, epoch, target.params().to_vec()));
                }
            }
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
    }
    let selected_epoch = match best {
        Some((_, epoch, params)) => {
            target.params_mut().copy_from_slice(&params);
            epoch
        }
        None => cfg.epochs,
    };
    Ok(TrainReport {
        log,
        selected_epoch,
    })
}

/// Trains every base parameter and keeps the epoch with the lowest
/// validation loss. Without a validation set the last tenth of `train` is
/// held out.
pub fn fine_tune(
    model: &mut Model<f32>,
    train: &[TrainPair],
    val: &[TrainPair],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.expect(&[Stage::Base])?;
    let (train, val) = split_validation(train, val);
    train_loop(Target::Base(model), train, val, cfg, true)
}

/// Full fine-tuning on prompt data with the prompt tokens stripped.
pub fn whole_model_finetune_ablation(
    model: &mut Model<f32>,
    train: &[TrainPair],
    val: &[TrainPair],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.expect(&[Stage::WholeModelAblation])?;
    let (train, val) = split_validation(train, val);
    train_loop(Target::Base(model), train, val, cfg, true)
}

fn prompt_stage(
    model: &Model<f32>,
    prompts: &mut PromptParams<f32>,
    train: &[TrainPair],
    val: &[TrainPair],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let before = model.checksum();
    let report = train_loop(Target::Prompt(model, prompts), train, val, cfg, false)?;
    let after = model.checksum();
    if before != after {
        return Err(Error::FrozenViolation {
            stage: cfg.stage.name().to_string(),
            before,
            after,
        });
    }
    Ok(report)
}

/// Teaches the prompts to leave the frozen model's output unchanged: targets
/// are the model's own unprompted predictions.
pub fn prompt_init_train(
    model: &Model<f32>,
    prompts: &mut PromptParams<f32>,
    train: &[TrainPair],
    val: &[TrainPair],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.expect(&[Stage::PromptInit])?;
    prompt_stage(model, prompts, train, val, cfg)
}

/// Trains only the prompt parameters toward error-free targets.
pub fn prompt_tune(
    model: &Model<f32>,
    prompts: &mut PromptParams<f32>,
    train: &[TrainPair],
    val: &[TrainPair],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.expect(&[Stage::PromptTune])?;
    prompt_stage(model, prompts, train, val, cfg)
}
