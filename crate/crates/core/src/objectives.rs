//! Training objectives and their analytic gradients.
//!
//! Losses use natural logarithms. The Gaussian terms omit the constant
//! `½·ln(2π)`, so a perfect fit with unit variance scores exactly 0:
//!
//! ```text
//! dicl   : (1/N) Σ −ln p̂_{i,gold}
//! srr_m  : (1/N) Σ (y − ŷ)²
//! mrr_m  : (1/3) Σ_aspect (1/N) Σ (y − ŷ)²
//! mrr_g  : (1/3) Σ_aspect (1/N) Σ [(ȳ − μ)²/(2σ²) + ½ ln σ²]
//! mrr_gc : (1/3N) Σ_aspect Σ [((ȳ − μ)² + s²)/(2σ²) + ½ ln σ²]
//! ```
//!
//! Per-utterance sums run in index order so results are bit-reproducible.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{discretize, rater_stats, Aspect, AspectStats, DataError, RubricLevel, UtteranceRecord};
use crate::scorer::{sigmoid, PredictionSet, ScorerError, ScorerParams, Strategy};

/// Probability floor applied before taking `ln` in cross-entropy.
pub const LOG_PROB_FLOOR: f64 = 1e-12;

/// Above this many parameters `grad_check` samples coordinates.
const GRAD_CHECK_FULL_LIMIT: usize = 5000;
const GRAD_CHECK_SAMPLE: usize = 400;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("empty batch")]
    Empty,
    #[error("aspect {0} missing")]
    MissingAspect(Aspect),
    #[error("{aspect} utterance {index}: non-positive variance {value}")]
    NonPositiveVariance {
        aspect: Aspect,
        index: usize,
        value: f64,
    },
    #[error("prediction lacks the outputs required by {0}")]
    MissingOutput(Strategy),
    #[error("params were built for {params}, not {requested}")]
    StrategyMismatch { params: Strategy, requested: Strategy },
    #[error("finite-difference step {0} outside (0, 1e-2]")]
    BadEpsilon(f64),
    #[error("non-finite loss")]
    NonFinite,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub per_aspect: BTreeMap<Aspect, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_utterance: Option<Vec<f64>>,
    /// Cross-entropy terms whose gold probability hit `LOG_PROB_FLOOR`.
    #[serde(default)]
    pub clamped: usize,
}

impl LossValue {
    fn ensure_finite(self) -> Result<Self, ObjectiveError> {
        if self.total.is_finite() && self.per_aspect.values().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(ObjectiveError::NonFinite)
        }
    }
}

fn check_lengths(a: usize, b: usize) -> Result<(), ObjectiveError> {
    if a != b {
        return Err(ObjectiveError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(ObjectiveError::Empty);
    }
    Ok(())
}

pub fn loss_dicl(
    class_probs: &[[f64; 5]],
    gold_levels: &[RubricLevel],
) -> Result<LossValue, ObjectiveError> {
    check_lengths(class_probs.len(), gold_levels.len())?;
    let mut clamped = 0;
    let terms: Vec<f64> = class_probs
        .iter()
        .zip(gold_levels)
        .map(|(p, &g)| {
            let q = p[g.ordinal()];
            if q < LOG_PROB_FLOOR {
                clamped += 1;
            }
            -q.max(LOG_PROB_FLOOR).ln()
        })
        .collect();
    let total = terms.iter().sum::<f64>() / terms.len() as f64;
    LossValue {
        total,
        per_aspect: BTreeMap::new(),
        per_utterance: Some(terms),
        clamped,
    }
    .ensure_finite()
}

/// `∂L_dicl/∂logits = (softmax − onehot) / N`.
pub fn dicl_logit_gradient(class_probs: &[[f64; 5]], gold_levels: &[RubricLevel]) -> Vec<[f64; 5]> {
    let n = class_probs.len() as f64;
    class_probs
        .iter()
        .zip(gold_levels)
        .map(|(p, g)| {
            let mut out = *p;
            out[g.ordinal()] -= 1.0;
            out.map(|v| v / n)
        })
        .collect()
}

pub fn loss_srr_m(pred_means: &[f64], gold_means: &[f64]) -> Result<LossValue, ObjectiveError> {
    check_lengths(pred_means.len(), gold_means.len())?;
    let terms: Vec<f64> = pred_means
        .iter()
        .zip(gold_means)
        .map(|(p, y)| (y - p).powi(2))
        .collect();
    let total = terms.iter().sum::<f64>() / terms.len() as f64;
    LossValue {
        total,
        per_aspect: BTreeMap::new(),
        per_utterance: Some(terms),
        clamped: 0,
    }
    .ensure_finite()
}

/// `∂L_srr_m/∂ŷ_i = 2(ŷ_i − y_i)/N`.
pub fn srr_m_gradient(pred_means: &[f64], gold_means: &[f64]) -> Vec<f64> {
    let n = pred_means.len() as f64;
    pred_means
        .iter()
        .zip(gold_means)
        .map(|(p, y)| 2.0 * (p - y) / n)
        .collect()
}

fn aspect_lists<'a, P, G>(
    pred: &'a BTreeMap<Aspect, Vec<P>>,
    gold: &'a BTreeMap<Aspect, Vec<G>>,
) -> Result<Vec<(Aspect, &'a [P], &'a [G])>, ObjectiveError> {
    let mut out = Vec::with_capacity(3);
    let mut n = None;
    for aspect in Aspect::ALL {
        let p = pred.get(&aspect).ok_or(ObjectiveError::MissingAspect(aspect))?;
        let g = gold.get(&aspect).ok_or(ObjectiveError::MissingAspect(aspect))?;
        check_lengths(p.len(), g.len())?;
        match n {
            Some(n) if n != p.len() => return Err(ObjectiveError::LengthMismatch(n, p.len())),
            _ => n = Some(p.len()),
        }
        out.push((aspect, p.as_slice(), g.as_slice()));
    }
    Ok(out)
}

/// Averages per-aspect term lists into a multi-rubric `LossValue`.
fn combine_aspects(per_aspect_terms: Vec<(Aspect, Vec<f64>)>) -> Result<LossValue, ObjectiveError> {
    let n = per_aspect_terms[0].1.len();
    let k = per_aspect_terms.len() as f64;
    let mut per_utterance = vec![0.0; n];
    let mut per_aspect = BTreeMap::new();
    for (aspect, terms) in &per_aspect_terms {
        per_aspect.insert(*aspect, terms.iter().sum::<f64>() / n as f64);
        for (u, t) in per_utterance.iter_mut().zip(terms) {
            *u += t / k;
        }
    }
    let total = per_aspect.values().sum::<f64>() / k;
    LossValue {
        total,
        per_aspect,
        per_utterance: Some(per_utterance),
        clamped: 0,
    }
    .ensure_finite()
}

pub fn loss_mrr_m(
    pred: &BTreeMap<Aspect, Vec<f64>>,
    gold: &BTreeMap<Aspect, Vec<f64>>,
) -> Result<LossValue, ObjectiveError> {
    let lists = aspect_lists(pred, gold)?;
    combine_aspects(
        lists
            .into_iter()
            .map(|(a, p, g)| (a, p.iter().zip(g).map(|(p, y)| (y - p).powi(2)).collect()))
            .collect(),
    )
}

/// One Gaussian term `((ȳ − μ)² + s²)/(2σ²) + ½ ln σ²` and its partials
/// `(value, ∂/∂μ, ∂/∂σ²)`.
pub fn gnll_term(mean: f64, variance: f64, target: f64, rater_variance: f64) -> (f64, f64, f64) {
    let r2 = (target - mean).powi(2) + rater_variance;
    let value = r2 / (2.0 * variance) + 0.5 * variance.ln();
    let d_mean = (mean - target) / variance;
    let d_var = 0.5 / variance - r2 / (2.0 * variance * variance);
    (value, d_mean, d_var)
}

fn gaussian_terms(
    aspect: Aspect,
    pred: &[(f64, f64)],
    targets: impl Iterator<Item = (f64, f64)>,
) -> Result<Vec<f64>, ObjectiveError> {
    pred.iter()
        .zip(targets)
        .enumerate()
        .map(|(index, (&(mu, var), (y, s2)))| {
            if !(var > 0.0) {
                return Err(ObjectiveError::NonPositiveVariance {
                    aspect,
                    index,
                    value: var,
                });
            }
            Ok(gnll_term(mu, var, y, s2).0)
        })
        .collect()
}

pub fn loss_mrr_g(
    pred: &BTreeMap<Aspect, Vec<(f64, f64)>>,
    gold_means: &BTreeMap<Aspect, Vec<f64>>,
) -> Result<LossValue, ObjectiveError> {
    let lists = aspect_lists(pred, gold_means)?;
    let mut terms = Vec::with_capacity(3);
    for (a, p, g) in lists {
        terms.push((a, gaussian_terms(a, p, g.iter().map(|&y| (y, 0.0)))?));
    }
    combine_aspects(terms)
}

pub fn loss_mrr_gc(
    pred: &BTreeMap<Aspect, Vec<(f64, f64)>>,
    gold: &BTreeMap<Aspect, Vec<AspectStats>>,
) -> Result<LossValue, ObjectiveError> {
    let lists = aspect_lists(pred, gold)?;
    let mut terms = Vec::with_capacity(3);
    for (a, p, g) in lists {
        terms.push((a, gaussian_terms(a, p, g.iter().map(|s| (s.mean, s.variance)))?));
    }
    combine_aspects(terms)
}

/// Gold statistics for every aspect a strategy scores, in record order.
fn gold_stats(
    strategy: Strategy,
    records: &[UtteranceRecord],
) -> Result<BTreeMap<Aspect, Vec<AspectStats>>, ObjectiveError> {
    let mut out = BTreeMap::new();
    for aspect in strategy.aspects() {
        let stats = records
            .iter()
            .map(|r| rater_stats(r, aspect))
            .collect::<Result<Vec<_>, _>>()?;
        out.insert(aspect, stats);
    }
    Ok(out)
}

fn missing(strategy: Strategy) -> ObjectiveError {
    ObjectiveError::MissingOutput(strategy)
}

/// Evaluates a strategy's objective on scorer outputs against record targets.
pub fn loss_for_predictions(
    strategy: Strategy,
    predictions: &[PredictionSet],
    records: &[UtteranceRecord],
) -> Result<LossValue, ObjectiveError> {
    check_lengths(predictions.len(), records.len())?;
    let gold = gold_stats(strategy, records)?;
    let column = |aspect: Aspect| -> Result<Vec<&crate::scorer::AspectPrediction>, ObjectiveError> {
        predictions
            .iter()
            .map(|p| p.get(aspect).ok_or(ObjectiveError::MissingAspect(aspect)))
            .collect()
    };
    match strategy {
        Strategy::DiCl(aspect) => {
            let probs = column(aspect)?
                .into_iter()
                .map(|p| p.class_probs.ok_or_else(|| missing(strategy)))
                .collect::<Result<Vec<_>, _>>()?;
            let levels = gold[&aspect]
                .iter()
                .map(|s| discretize(s.mean))
                .collect::<Result<Vec<_>, _>>()?;
            let mut loss = loss_dicl(&probs, &levels)?;
            loss.per_aspect.insert(aspect, loss.total);
            Ok(loss)
        }
        Strategy::SrrM(aspect) => {
            let pred: Vec<f64> = column(aspect)?.into_iter().map(|p| p.mean).collect();
            let y: Vec<f64> = gold[&aspect].iter().map(|s| s.mean).collect();
            let mut loss = loss_srr_m(&pred, &y)?;
            loss.per_aspect.insert(aspect, loss.total);
            Ok(loss)
        }
        Strategy::MrrM => {
            let mut pred = BTreeMap::new();
            for a in Aspect::ALL {
                pred.insert(a, column(a)?.into_iter().map(|p| p.mean).collect());
            }
            let y = gold
                .iter()
                .map(|(a, s)| (*a, s.iter().map(|s| s.mean).collect()))
                .collect();
            loss_mrr_m(&pred, &y)
        }
        Strategy::MrrG | Strategy::MrrGc => {
            let mut pred = BTreeMap::new();
            for a in Aspect::ALL {
                let pairs = column(a)?
                    .into_iter()
                    .map(|p| p.variance.map(|v| (p.mean, v)).ok_or_else(|| missing(strategy)))
                    .collect::<Result<Vec<_>, _>>()?;
                pred.insert(a, pairs);
            }
            if strategy == Strategy::MrrG {
                let y = gold
                    .iter()
                    .map(|(a, s)| (*a, s.iter().map(|s| s.mean).collect()))
                    .collect();
                loss_mrr_g(&pred, &y)
            } else {
                loss_mrr_gc(&pred, &gold)
            }
        }
    }
}

/// Strategy loss of the scorer on `batch` (forward + objective).
pub fn model_loss(params: &ScorerParams, batch: &[UtteranceRecord]) -> Result<LossValue, ObjectiveError> {
    let preds = batch
        .iter()
        .map(|r| crate::scorer::forward(params, &r.features))
        .collect::<Result<Vec<_>, _>>()?;
    loss_for_predictions(params.strategy, &preds, batch)
}

/// Loss on `batch` and its gradient with respect to every parameter, by
/// closed-form backpropagation through the scorer.
pub fn loss_and_gradient(
    params: &ScorerParams,
    batch: &[UtteranceRecord],
) -> Result<(LossValue, Vec<f64>), ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::Empty);
    }
    let strategy = params.strategy;
    let gold = gold_stats(strategy, batch)?;
    let aspects = strategy.aspects();
    let n = batch.len() as f64;
    let aspect_scale = 1.0 / aspects.len() as f64;
    let mut grad = vec![0.0; params.values.len()];
    let mut preds = Vec::with_capacity(batch.len());

    for (i, record) in batch.iter().enumerate() {
        let cache = params.forward_raw(&record.features)?;
        let pred = params.decode(&cache);
        let mut grad_out: Vec<Vec<f64>> = Vec::with_capacity(aspects.len());
        for (k, aspect) in aspects.iter().enumerate() {
            let target = gold[aspect][i];
            let p = &pred.aspects[aspect];
            let raw = &cache.outputs[k];
            let g = match strategy {
                Strategy::DiCl(_) => {
                    let probs = p.class_probs.expect("classifier head");
                    let level = discretize(target.mean)?;
                    dicl_logit_gradient(&[probs], &[level])[0]
                        .iter()
                        .map(|v| v / n)
                        .collect()
                }
                Strategy::SrrM(_) | Strategy::MrrM => {
                    vec![2.0 * (p.mean - target.mean) / n * aspect_scale]
                }
                Strategy::MrrG | Strategy::MrrGc => {
                    let s2 = if strategy == Strategy::MrrGc {
                        target.variance
                    } else {
                        0.0
                    };
                    let var = p.variance.expect("gaussian head");
                    let (_, d_mean, d_var) = gnll_term(p.mean, var, target.mean, s2);
                    let scale = aspect_scale / n;
                    vec![d_mean * scale, d_var * sigmoid(raw[1]) * scale]
                }
            };
            grad_out.push(g);
        }
        params.backward(&record.features, &cache, &grad_out, &mut grad);
        preds.push(pred);
    }
    let loss = loss_for_predictions(strategy, &preds, batch)?;
    Ok((loss, grad))
}

/// Maximum relative error between the analytic parameter gradient and
/// central finite differences, with denominator `max(|g_a|, |g_n|, 1e-8)`.
///
/// Every coordinate is checked up to 5000 parameters; larger models check a
/// seeded sample of 400.
pub fn grad_check(
    strategy: Strategy,
    params: &ScorerParams,
    batch: &[UtteranceRecord],
    epsilon: f64,
) -> Result<f64, ObjectiveError> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(ObjectiveError::BadEpsilon(epsilon));
    }
    if params.strategy != strategy {
        return Err(ObjectiveError::StrategyMismatch {
            params: params.strategy,
            requested: strategy,
        });
    }
    let (_, analytic) = loss_and_gradient(params, batch)?;
    let n_params = params.values.len();
    let coords: Vec<usize> = if n_params <= GRAD_CHECK_FULL_LIMIT {
        (0..n_params).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut c = index::sample(&mut rng, n_params, GRAD_CHECK_SAMPLE).into_vec();
        c.sort_unstable();
        c
    };

    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for j in coords {
        let orig = probe.values[j];
        probe.values[j] = orig + epsilon;
        let plus = model_loss(&probe, batch)?.total;
        probe.values[j] = orig - epsilon;
        let minus = model_loss(&probe, batch)?.total;
        probe.values[j] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
