//! Mini-batch AdamW training of the scorer.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{rater_stats, Aspect, UtteranceRecord};
use crate::objectives::{loss_and_gradient, model_loss, LossValue, ObjectiveError};
use crate::scorer::{init_params, ScorerError, ScorerParams, Strategy};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d: usize,
    pub h: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 1,
            epochs: 10,
            seed: 0,
            shuffle: true,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Learning rate used for LoRA fine-tuning of a 7B speech LLM. Far too
    /// small for the scorer here, kept for comparison runs.
    pub const LLM_FINETUNE_LEARNING_RATE: f64 = 2e-5;

    /// The LLM fine-tuning setup: AdamW, lr 2e-5, weight decay 0.01,
    /// batch size 1, constant schedule.
    pub fn llm_finetune_preset() -> Self {
        TrainConfig {
            learning_rate: Self::LLM_FINETUNE_LEARNING_RATE,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be >= 0", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay applied only where `decay_mask` is set.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(n_params: usize, cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], decay_mask: &[bool]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            if decay_mask[i] {
                params[i] -= self.lr * self.weight_decay * params[i];
            }
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub per_aspect: BTreeMap<Aspect, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub strategy: Strategy,
    pub epochs: Vec<EpochLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl TrainLog {
    /// One JSON object per epoch. Wall times are dropped unless requested so
    /// that identical runs produce identical files.
    pub fn write_jsonl(&self, path: &Path, include_wall_time: bool) -> Result<(), TrainError> {
        let io = |source| TrainError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        for e in &self.epochs {
            let mut e = e.clone();
            if !include_wall_time {
                e.wall_time_secs = None;
            }
            let line = serde_json::to_string(&e).expect("epoch log serializes");
            writeln!(out, "{line}").map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

fn validate_dataset(
    dataset: &[UtteranceRecord],
    strategy: Strategy,
    dims: ModelDims,
) -> Result<(), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for r in dataset {
        if r.features.len() != dims.d {
            return Err(ScorerError::DimMismatch {
                expected: dims.d,
                found: r.features.len(),
            }
            .into());
        }
        for a in strategy.aspects() {
            rater_stats(r, a).map_err(ObjectiveError::from)?;
        }
    }
    Ok(())
}

/// Trains a freshly initialised scorer (init seed = `cfg.seed`).
pub fn train(
    dataset: &[UtteranceRecord],
    strategy: Strategy,
    dims: ModelDims,
    cfg: &TrainConfig,
) -> Result<(ScorerParams, TrainLog), TrainError> {
    let params = init_params(dims.d, dims.h, strategy, cfg.seed)?;
    train_from(dataset, params, cfg)
}

/// Continues training from existing parameters.
pub fn train_from(
    dataset: &[UtteranceRecord],
    mut params: ScorerParams,
    cfg: &TrainConfig,
) -> Result<(ScorerParams, TrainLog), TrainError> {
    cfg.validate()?;
    let strategy = params.strategy;
    validate_dataset(
        dataset,
        strategy,
        ModelDims {
            d: params.d,
            h: params.h,
        },
    )?;

    let decay_mask = params.layout().weight_mask();
    let mut opt = AdamW::new(params.values.len(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut batch: Vec<UtteranceRecord> = Vec::with_capacity(cfg.batch_size);
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut aspect_sums: BTreeMap<Aspect, f64> = BTreeMap::new();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| dataset[i].clone()));
            let (loss, grad) = loss_and_gradient(&params, &batch)?;
            if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite { epoch, step });
            }
            let w = chunk.len() as f64;
            loss_sum += loss.total * w;
            for (a, v) in &loss.per_aspect {
                *aspect_sums.entry(*a).or_default() += v * w;
            }
            opt.step(&mut params.values, &grad, &decay_mask);
        }
        let n = dataset.len() as f64;
        epochs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / n,
            per_aspect: aspect_sums.into_iter().map(|(a, v)| (a, v / n)).collect(),
            wall_time_secs: Some(started.elapsed().as_secs_f64()),
        });
    }
    Ok((
        params,
        TrainLog {
            strategy,
            epochs,
            checkpoint: None,
        },
    ))
}

/// Strategy loss on `dataset` without touching the parameters.
pub fn evaluate_loss(
    params: &ScorerParams,
    dataset: &[UtteranceRecord],
    strategy: Strategy,
) -> Result<LossValue, TrainError> {
    if params.strategy != strategy {
        return Err(ObjectiveError::StrategyMismatch {
            params: params.strategy,
            requested: strategy,
        }
        .into());
    }
    Ok(model_loss(params, dataset)?)
}
