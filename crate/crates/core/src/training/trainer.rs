use std::fmt::Write as _;

use super::loss::{captioning_loss, clamp_log_tau, contrastive_loss, total_loss, LossWeights};
use super::optim::{ema_update, Optimizer, OptimizerConfig};
use super::tuning::{freeze_mask, TuningMode};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{FrameTokenEmbeddings, TextBatch, VideoBatch, VideoCoCa};
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

/// Visual side of a training batch.
#[derive(Debug, Clone, Copy)]
pub enum VisualInput<'a, F> {
    Video(&'a VideoBatch<F>),
    /// Precomputed encoder tokens; only valid while the encoder is frozen.
    Cached(&'a FrameTokenEmbeddings<F>),
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub contrastive: Var,
    pub captioning: Var,
}

/// Builds the joint objective for one batch on `g`.
pub fn joint_loss<F: Real>(
    model: &VideoCoCa,
    g: &mut Graph<F>,
    store: &ParameterStore<F>,
    input: VisualInput<'_, F>,
    text: &TextBatch,
    weights: LossWeights,
) -> Result<LossVars> {
    let pooled = match input {
        VisualInput::Video(v) => model.video_forward(g, store, v)?,
        VisualInput::Cached(c) => model.adapt_cached(g, store, c)?,
    };
    if g.shape(pooled.contrastive)[0] != text.batch() {
        return Err(Error::shape("joint_loss", g.shape(pooled.contrastive), &[text.batch()]));
    }
    let (states, cls) = model.decode_unimodal(g, store, text)?;
    let log_tau = store.bind(g, "loss.log_tau")?;
    let contrastive = contrastive_loss(g, pooled.contrastive, cls, log_tau)?;
    let logits = model.decode_multimodal(g, store, states, pooled.generative)?;
    let captioning = captioning_loss(g, logits, &text.caption_targets())?;
    let total = total_loss(g, contrastive, captioning, weights)?;
    Ok(LossVars {
        total,
        contrastive,
        captioning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub tuning: TuningMode,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tuning: TuningMode::FT,
            optimizer: OptimizerConfig::finetune(),
            loss: LossWeights::default(),
        }
    }
}

/// One line of the step log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub contrastive: f64,
    pub captioning: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tau: f64,
}

pub const STEP_LOG_HEADER: &str = "step\ttotal\tcon\tcap\tlr\tgrad_norm\ttau";

impl StepRecord {
    /// Tab-separated fields in header order; floats use shortest round-trip form.
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.total, self.contrastive, self.captioning, self.lr, self.grad_norm, self.tau
        )
    }
}

/// Header plus one line per record.
pub fn step_log(records: &[StepRecord]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{STEP_LOG_HEADER}");
    for r in records {
        let _ = writeln!(out, "{}", r.to_tsv());
    }
    out
}

/// Owns the parameters and optimizer state for one run.
#[derive(Debug, Clone)]
pub struct Trainer<'m, F> {
    pub model: &'m VideoCoCa,
    pub store: ParameterStore<F>,
    pub config: TrainConfig,
    optimizer: Optimizer<F>,
    step: usize,
}

impl<'m, F: Real> Trainer<'m, F> {
    pub fn new(model: &'m VideoCoCa, store: ParameterStore<F>, config: TrainConfig) -> Result<Self> {
        config.loss.validate()?;
        Ok(Trainer {
            model,
            store,
            config,
            optimizer: Optimizer::new(config.optimizer)?,
            step: 0,
        })
    }

    /// Steps taken so far.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn tau(&self) -> Result<f64> {
        Ok(self.store.value("loss.log_tau")?.data()[0].as_f64().exp())
    }

    /// Forward, backward, clip, update, clamp temperature, EMA.
    pub fn train_step(&mut self, input: VisualInput<'_, F>, text: &TextBatch) -> Result<StepRecord> {
        if matches!(input, VisualInput::Cached(_)) && self.config.tuning != TuningMode::LiT {
            return Err(Error::invalid(format!(
                "cached encoder tokens require LiT tuning; {} would update the encoder",
                self.config.tuning
            )));
        }
        self.store.apply_trainable(&freeze_mask(self.config.tuning, self.step));
        let mut g = Graph::new();
        let l = joint_loss(self.model, &mut g, &self.store, input, text, self.config.loss)?;
        let values = [l.total, l.contrastive, l.captioning].map(|v| g.value(v).data()[0].as_f64());
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("loss at step {}", self.step + 1)));
        }
        let grads = g.backward(l.total)?.into_named();
        drop(g);
        let stats = self.optimizer.step(&mut self.store, grads, self.step + 1)?;
        let log_tau = self.store.get_mut("loss.log_tau")?;
        if !log_tau.frozen {
            let v = log_tau.value.data()[0].as_f64();
            log_tau.value = Tensor::scalar(F::of(clamp_log_tau(v)));
        }
        ema_update(&mut self.store, self.config.optimizer.ema_decay);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            total: values[0],
            contrastive: values[1],
            captioning: values[2],
            lr: stats.lr,
            grad_norm: stats.grad_norm,
            tau: self.tau()?,
        })
    }

    pub fn into_store(self) -> ParameterStore<F> {
        self.store
    }
}
