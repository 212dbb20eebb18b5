//! Aspect-wise split-conformal calibration of Gaussian-head predictions.
//!
//! Nonconformity scores are normalized residuals `|ȳ − μ| / σ`. The
//! utterances are split into `k` folds; each fold is evaluated with the
//! quantile computed on the other `k − 1` folds (cross-conformal), so every
//! utterance gets an out-of-fold interval `[μ − q·σ, μ + q·σ]`. The mean of
//! the `k` fold quantiles is reported as the headline `q` for the aspect.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Aspect, UtteranceRecord};
use crate::scorer::PredictionSet;

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_FOLDS: usize = 5;

/// Slack subtracted before the ceiling in the order-statistic rank, so that
/// e.g. `10 × 0.9` lands on 9 despite rounding in `1 − α`.
const RANK_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("no residuals")]
    Empty,
    #[error("invalid residual {0} (must be finite and >= 0)")]
    BadResidual(f64),
    #[error("alpha {0} outside (0, 1)")]
    BadAlpha(f64),
    #[error("need k >= 2 folds and at least k utterances (k={k}, n={n})")]
    BadFolds { k: usize, n: usize },
    #[error("{aspect} fold {fold}: insufficient calibration data ({n} residuals, rank {rank} needed)")]
    InsufficientData {
        aspect: Aspect,
        fold: usize,
        n: usize,
        rank: usize,
    },
    #[error("utterance {index}: no {aspect} mean/variance prediction")]
    MissingPrediction { index: usize, aspect: Aspect },
    #[error("{0} predictions but {1} targets")]
    LengthMismatch(usize, usize),
    #[error("utterance {id}: {found} raters, expected {expected}")]
    RaterCount {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("utterance {id}: aspect {aspect} not scored")]
    MissingScores { id: String, aspect: Aspect },
    #[error("no quantile for aspect {0}")]
    MissingQuantile(Aspect),
}

/// Outcome of a conformal quantile computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Quantile {
    Value { q: f64 },
    /// `⌈(n+1)(1−α)⌉ > n`: the calibration set is too small for the level.
    InsufficientData { n: usize, rank: usize },
}

impl Quantile {
    /// The quantile, or `+∞` when calibration data is insufficient.
    pub fn value(self) -> f64 {
        match self {
            Quantile::Value { q } => q,
            Quantile::InsufficientData { .. } => f64::INFINITY,
        }
    }

    pub fn is_sufficient(self) -> bool {
        matches!(self, Quantile::Value { .. })
    }
}

fn check_alpha(alpha: f64) -> Result<(), ConformalError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(ConformalError::BadAlpha(alpha))
    }
}

/// The `⌈(n+1)(1−α)⌉`-th smallest residual.
pub fn conformal_quantile(residuals: &[f64], alpha: f64) -> Result<Quantile, ConformalError> {
    check_alpha(alpha)?;
    if residuals.is_empty() {
        return Err(ConformalError::Empty);
    }
    if let Some(&bad) = residuals.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(ConformalError::BadResidual(bad));
    }
    let n = residuals.len();
    let rank = (((n + 1) as f64) * (1.0 - alpha) - RANK_SLACK).ceil().max(1.0) as usize;
    if rank > n {
        return Ok(Quantile::InsufficientData { n, rank });
    }
    let mut sorted = residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Quantile::Value { q: sorted[rank - 1] })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldQuantile {
    pub fold: usize,
    pub calibration_size: usize,
    pub evaluation_size: usize,
    pub quantile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectCalibration {
    /// Mean of the fold quantiles.
    pub q: f64,
    pub folds: Vec<FoldQuantile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub alpha: f64,
    pub target_coverage: f64,
    pub k: usize,
    pub seed: u64,
    /// Evaluation fold of every utterance.
    pub fold_of: Vec<usize>,
    pub aspects: BTreeMap<Aspect, AspectCalibration>,
}

impl CalibrationResult {
    pub fn headline_quantiles(&self) -> BTreeMap<Aspect, f64> {
        self.aspects.iter().map(|(a, c)| (*a, c.q)).collect()
    }

    /// `aspect,fold,calibration_size,evaluation_size,quantile`, one row per
    /// fold followed by a `mean` row carrying the headline quantile.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("aspect,fold,calibration_size,evaluation_size,quantile\n");
        for (aspect, cal) in &self.aspects {
            for f in &cal.folds {
                let _ = writeln!(
                    out,
                    "{aspect},{},{},{},{}",
                    f.fold, f.calibration_size, f.evaluation_size, f.quantile
                );
            }
            let _ = writeln!(out, "{aspect},mean,,,{}", cal.q);
        }
        out
    }
}

/// Deterministic balanced fold assignment: a seeded permutation dealt
/// round-robin into `k` folds.
pub fn assign_folds(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    fold_of
}

fn mean_sigma(p: &PredictionSet, aspect: Aspect, index: usize) -> Result<(f64, f64), ConformalError> {
    p.get(aspect)
        .and_then(|a| a.sigma().map(|s| (a.mean, s)))
        .ok_or(ConformalError::MissingPrediction { index, aspect })
}

/// Normalized residuals `|ȳ − μ| / σ` for one aspect.
pub fn normalized_residuals(
    predictions: &[PredictionSet],
    gold: &[f64],
    aspect: Aspect,
) -> Result<Vec<f64>, ConformalError> {
    if predictions.len() != gold.len() {
        return Err(ConformalError::LengthMismatch(predictions.len(), gold.len()));
    }
    predictions
        .iter()
        .zip(gold)
        .enumerate()
        .map(|(i, (p, &y))| mean_sigma(p, aspect, i).map(|(mu, s)| (y - mu).abs() / s))
        .collect()
}

pub fn calibrate_kfold(
    predictions: &[PredictionSet],
    gold_means: &BTreeMap<Aspect, Vec<f64>>,
    k: usize,
    alpha: f64,
    seed: u64,
) -> Result<CalibrationResult, ConformalError> {
    check_alpha(alpha)?;
    let n = predictions.len();
    if k < 2 || n < k {
        return Err(ConformalError::BadFolds { k, n });
    }
    let fold_of = assign_folds(n, k, seed);
    let mut aspects = BTreeMap::new();
    for (&aspect, gold) in gold_means {
        let residuals = normalized_residuals(predictions, gold, aspect)?;
        let mut folds = Vec::with_capacity(k);
        for fold in 0..k {
            let calibration: Vec<f64> = residuals
                .iter()
                .zip(&fold_of)
                .filter(|(_, &f)| f != fold)
                .map(|(r, _)| *r)
                .collect();
            let q = match conformal_quantile(&calibration, alpha)? {
                Quantile::Value { q } => q,
                Quantile::InsufficientData { n, rank } => {
                    return Err(ConformalError::InsufficientData {
                        aspect,
                        fold,
                        n,
                        rank,
                    })
                }
            };
            folds.push(FoldQuantile {
                fold,
                calibration_size: calibration.len(),
                evaluation_size: n - calibration.len(),
                quantile: q,
            });
        }
        let q = folds.iter().map(|f| f.quantile).sum::<f64>() / k as f64;
        aspects.insert(aspect, AspectCalibration { q, folds });
    }
    Ok(CalibrationResult {
        alpha,
        target_coverage: 1.0 - alpha,
        k,
        seed,
        fold_of,
        aspects,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub low: f64,
    pub high: f64,
    pub center: f64,
    pub sigma: f64,
    pub q: f64,
}

impl PredictionInterval {
    pub fn new(center: f64, sigma: f64, q: f64) -> Self {
        PredictionInterval {
            low: center - q * sigma,
            high: center + q * sigma,
            center,
            sigma,
            q,
        }
    }

    /// Inclusive membership test.
    pub fn contains(&self, y: f64) -> bool {
        self.low <= y && y <= self.high
    }

    pub fn width(&self) -> f64 {
        self.high - self.low
    }

    /// Endpoints clipped to `[lo, hi]`, for reporting.
    pub fn clipped(&self, lo: f64, hi: f64) -> Self {
        PredictionInterval {
            low: self.low.clamp(lo, hi),
            high: self.high.clamp(lo, hi),
            ..*self
        }
    }
}

pub type IntervalRow = BTreeMap<Aspect, PredictionInterval>;

/// Out-of-fold intervals: each utterance uses its own fold's quantile.
pub fn build_intervals(
    predictions: &[PredictionSet],
    result: &CalibrationResult,
) -> Result<Vec<IntervalRow>, ConformalError> {
    if predictions.len() != result.fold_of.len() {
        return Err(ConformalError::LengthMismatch(
            predictions.len(),
            result.fold_of.len(),
        ));
    }
    predictions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            result
                .aspects
                .iter()
                .map(|(&aspect, cal)| {
                    let q = cal.folds[result.fold_of[i]].quantile;
                    let (mu, s) = mean_sigma(p, aspect, i)?;
                    Ok((aspect, PredictionInterval::new(mu, s, q)))
                })
                .collect()
        })
        .collect()
}

/// Intervals from fixed per-aspect quantiles (e.g. the headline `q` applied
/// to new data).
pub fn build_intervals_with(
    predictions: &[PredictionSet],
    quantiles: &BTreeMap<Aspect, f64>,
) -> Result<Vec<IntervalRow>, ConformalError> {
    predictions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            quantiles
                .iter()
                .map(|(&aspect, &q)| {
                    let (mu, s) = mean_sigma(p, aspect, i)?;
                    Ok((aspect, PredictionInterval::new(mu, s, q)))
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectCoverage {
    /// `exact[n]`: percentage of utterances with exactly `n` raters inside.
    pub exact: Vec<f64>,
    /// `at_least[n]`: percentage with `n` or more raters inside.
    pub at_least: Vec<f64>,
    /// `at_most[n]`: percentage with `n` or fewer raters inside.
    pub at_most: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageTable {
    pub n_raters: usize,
    pub n_utterances: usize,
    pub aspects: BTreeMap<Aspect, AspectCoverage>,
}

impl CoverageTable {
    /// `aspect,raters,exact_pct,at_least_pct,at_most_pct`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("aspect,raters,exact_pct,at_least_pct,at_most_pct\n");
        for (aspect, c) in &self.aspects {
            for n in 0..=self.n_raters {
                let _ = writeln!(
                    out,
                    "{aspect},{n},{:.4},{:.4},{:.4}",
                    c.exact[n], c.at_least[n], c.at_most[n]
                );
            }
        }
        out
    }
}

/// How many of each utterance's raters fall inside its interval, per aspect.
pub fn coverage_analysis(
    intervals: &[IntervalRow],
    records: &[UtteranceRecord],
) -> Result<CoverageTable, ConformalError> {
    if intervals.len() != records.len() {
        return Err(ConformalError::LengthMismatch(intervals.len(), records.len()));
    }
    let Some(first) = intervals.first() else {
        return Err(ConformalError::Empty);
    };
    let r = records[0].rater_count();
    let n = records.len();
    let mut aspects = BTreeMap::new();
    for &aspect in first.keys() {
        let mut counts = vec![0usize; r + 1];
        for (row, rec) in intervals.iter().zip(records) {
            let scores = rec
                .scores
                .get(&aspect)
                .ok_or_else(|| ConformalError::MissingScores {
                    id: rec.id.clone(),
                    aspect,
                })?;
            if scores.len() != r {
                return Err(ConformalError::RaterCount {
                    id: rec.id.clone(),
                    expected: r,
                    found: scores.len(),
                });
            }
            let iv = row.get(&aspect).ok_or(ConformalError::MissingQuantile(aspect))?;
            let inside = scores.iter().filter(|&&s| iv.contains(f64::from(s))).count();
            counts[inside] += 1;
        }
        let exact: Vec<f64> = counts
            .iter()
            .map(|&c| 100.0 * c as f64 / n as f64)
            .collect();
        let at_least = (0..=r)
            .map(|k| 100.0 * counts[k..].iter().sum::<usize>() as f64 / n as f64)
            .collect();
        let at_most = (0..=r)
            .map(|k| 100.0 * counts[..=k].iter().sum::<usize>() as f64 / n as f64)
            .collect();
        aspects.insert(
            aspect,
            AspectCoverage {
                exact,
                at_least,
                at_most,
            },
        );
    }
    Ok(CoverageTable {
        n_raters: r,
        n_utterances: n,
        aspects,
    })
}

/// Fraction of utterances whose gold mean lies inside the interval.
pub fn mean_coverage(
    intervals: &[IntervalRow],
    gold_means: &BTreeMap<Aspect, Vec<f64>>,
) -> Result<BTreeMap<Aspect, f64>, ConformalError> {
    let mut out = BTreeMap::new();
    for (&aspect, gold) in gold_means {
        if gold.len() != intervals.len() {
            return Err(ConformalError::LengthMismatch(intervals.len(), gold.len()));
        }
        if gold.is_empty() {
            return Err(ConformalError::Empty);
        }
        let mut hits = 0usize;
        for (row, &y) in intervals.iter().zip(gold) {
            let iv = row.get(&aspect).ok_or(ConformalError::MissingQuantile(aspect))?;
            if iv.contains(y) {
                hits += 1;
            }
        }
        out.insert(aspect, hits as f64 / gold.len() as f64);
    }
    Ok(out)
}
