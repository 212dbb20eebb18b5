//! Ordinal evaluation metrics: weighted F1, multiclass MCC, PCC, RMSE and
//! quadratic weighted kappa, plus the lenient evaluation modes.
//!
//! Degenerate denominators do not error. MCC and PCC fall back to 0 and QWK
//! with two identical constant raters to 1; the returned [`Scored`] carries a
//! `degenerate` flag so reports can show it.

mod report;

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::PredictionInterval;
use crate::dataio::{round_half_up, Aspect, DataError, UtteranceRecord, SCORE_MAX, SCORE_MIN};

pub use report::{full_report, AspectReport, EvaluationReport, ModeMetrics};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label {0} outside the label set")]
    UnknownLabel(i32),
    #[error("need at least {0} values")]
    TooShort(usize),
    #[error("rating {value} outside scale {lo}..={hi}")]
    OutOfScale { value: i32, lo: i32, hi: i32 },
    #[error("mode {0} needs prediction intervals")]
    MissingIntervals(EvalMode),
    #[error("mode {mode} is not defined for {what}")]
    UnsupportedMode { mode: EvalMode, what: String },
    #[error("need at least 2 raters, found {0}")]
    TooFewRaters(usize),
    #[error("utterance {id}: {message}")]
    Record { id: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// A metric value with a flag for degenerate denominators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub value: f64,
    pub degenerate: bool,
}

impl Scored {
    fn ok(value: f64) -> Self {
        Scored {
            value,
            degenerate: false,
        }
    }

    fn fallback(value: f64) -> Self {
        Scored {
            value,
            degenerate: true,
        }
    }
}

fn check_pair<T, U>(a: &[T], b: &[U]) -> Result<(), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

fn label_index(label_set: &[i32], label: i32) -> Result<usize, MetricError> {
    label_set
        .iter()
        .position(|&l| l == label)
        .ok_or(MetricError::UnknownLabel(label))
}

/// The full 1..=10 score scale as a label set.
pub fn score_labels() -> Vec<i32> {
    (SCORE_MIN..=SCORE_MAX).collect()
}

/// Confusion matrix over an ordered label set; rows are gold, columns are
/// predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<i32>,
    pub label_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    /// Percentage within the gold row.
    pub row_percent: Vec<Vec<f64>>,
    /// Percentage of all samples.
    pub total_percent: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Samples whose predicted label is within `tolerance` positions of gold.
    pub fn band_count(&self, tolerance: usize) -> u64 {
        let mut n = 0;
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if i.abs_diff(j) <= tolerance {
                    n += c;
                }
            }
        }
        n
    }

    pub fn with_names(mut self, names: Vec<String>) -> Self {
        debug_assert_eq!(names.len(), self.labels.len());
        self.label_names = names;
        self
    }

    /// CSV with `count;row_pct;total_pct` in every cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gold\\pred");
        for name in &self.label_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, name) in self.label_names.iter().enumerate() {
            out.push_str(name);
            for j in 0..self.labels.len() {
                out.push_str(&format!(
                    ",{};{:.2};{:.2}",
                    self.counts[i][j], self.row_percent[i][j], self.total_percent[i][j]
                ));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(gold: &[i32], pred: &[i32], label_set: &[i32]) -> Result<ConfusionMatrix, MetricError> {
    if gold.len() != pred.len() {
        return Err(MetricError::LengthMismatch(gold.len(), pred.len()));
    }
    let k = label_set.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (&g, &p) in gold.iter().zip(pred) {
        counts[label_index(label_set, g)?][label_index(label_set, p)?] += 1;
    }
    let total: u64 = counts.iter().flatten().sum();
    let pct = |c: u64, d: u64| if d == 0 { 0.0 } else { 100.0 * c as f64 / d as f64 };
    let row_percent = counts
        .iter()
        .map(|row| {
            let s: u64 = row.iter().sum();
            row.iter().map(|&c| pct(c, s)).collect()
        })
        .collect();
    let total_percent = counts
        .iter()
        .map(|row| row.iter().map(|&c| pct(c, total)).collect())
        .collect();
    Ok(ConfusionMatrix {
        labels: label_set.to_vec(),
        label_names: label_set.iter().map(i32::to_string).collect(),
        counts,
        row_percent,
        total_percent,
    })
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(gold: &[i32], pred: &[i32], label_set: &[i32]) -> Result<f64, MetricError> {
    check_pair(gold, pred)?;
    let cm = confusion(gold, pred, label_set)?;
    let n = gold.len() as f64;
    let k = label_set.len();
    let mut score = 0.0;
    for c in 0..k {
        let tp = cm.counts[c][c] as f64;
        let support: f64 = cm.counts[c].iter().sum::<u64>() as f64;
        let predicted: f64 = cm.counts.iter().map(|row| row[c]).sum::<u64>() as f64;
        if support == 0.0 {
            continue;
        }
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = tp / support;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        score += support / n * f1;
    }
    Ok(score)
}

/// Multiclass Matthews correlation (the `R_K` statistic).
pub fn mcc(gold: &[i32], pred: &[i32], label_set: &[i32]) -> Result<Scored, MetricError> {
    check_pair(gold, pred)?;
    let cm = confusion(gold, pred, label_set)?;
    let k = label_set.len();
    let s = gold.len() as f64;
    let c: f64 = (0..k).map(|i| cm.counts[i][i] as f64).sum();
    let t: Vec<f64> = cm.counts.iter().map(|row| row.iter().sum::<u64>() as f64).collect();
    let p: Vec<f64> = (0..k)
        .map(|j| cm.counts.iter().map(|row| row[j]).sum::<u64>() as f64)
        .collect();
    let pt: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|v| v * v).sum();
    let tt: f64 = t.iter().map(|v| v * v).sum();
    let denom = ((s * s - pp) * (s * s - tt)).sqrt();
    if denom == 0.0 {
        return Ok(Scored::fallback(0.0));
    }
    Ok(Scored::ok((c * s - pt) / denom))
}

pub fn pcc(x: &[f64], y: &[f64]) -> Result<Scored, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricError::TooShort(2));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Scored::fallback(0.0));
    }
    Ok(Scored::ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

pub fn rmse(gold: &[f64], pred: &[f64]) -> Result<f64, MetricError> {
    check_pair(gold, pred)?;
    let mse = gold
        .iter()
        .zip(pred)
        .map(|(g, p)| (g - p).powi(2))
        .sum::<f64>()
        / gold.len() as f64;
    Ok(mse.sqrt())
}

/// Quadratic weighted kappa over the fixed scale `scale`, whether or not
/// every category is observed.
pub fn qwk(a: &[i32], b: &[i32], scale: RangeInclusive<i32>) -> Result<Scored, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricError::TooShort(2));
    }
    let (lo, hi) = (*scale.start(), *scale.end());
    let k = (hi - lo + 1) as usize;
    let idx = |v: i32| -> Result<usize, MetricError> {
        if v < lo || v > hi {
            Err(MetricError::OutOfScale { value: v, lo, hi })
        } else {
            Ok((v - lo) as usize)
        }
    };
    let n = a.len() as f64;
    let mut observed = vec![vec![0.0; k]; k];
    let mut hist_a = vec![0.0; k];
    let mut hist_b = vec![0.0; k];
    for (&x, &y) in a.iter().zip(b) {
        let (i, j) = (idx(x)?, idx(y)?);
        observed[i][j] += 1.0 / n;
        hist_a[i] += 1.0 / n;
        hist_b[j] += 1.0 / n;
    }
    let span = ((k.max(2) - 1) * (k.max(2) - 1)) as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64) - (j as f64)).powi(2) / span;
            num += w * observed[i][j];
            den += w * hist_a[i] * hist_b[j];
        }
    }
    if den == 0.0 {
        return Ok(Scored::fallback(1.0));
    }
    Ok(Scored::ok(1.0 - num / den))
}

/// Mean and population SD of a set of agreement values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub mean: f64,
    pub sd: f64,
    pub values: Vec<f64>,
    /// Rater indices per value: `[r]` for model–rater, `[r1, r2]` for pairs.
    pub pairs: Vec<Vec<usize>>,
    pub degenerate: usize,
}

impl Agreement {
    fn from_values(values: Vec<f64>, pairs: Vec<Vec<usize>>, degenerate: usize) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Agreement {
            mean,
            sd,
            values,
            pairs,
            degenerate,
        }
    }
}

fn rater_columns(records: &[UtteranceRecord], aspect: Aspect) -> Result<Vec<Vec<i32>>, MetricError> {
    let r = records.first().ok_or(MetricError::Empty)?.rater_count();
    let mut cols = vec![Vec::with_capacity(records.len()); r];
    for rec in records {
        let scores = rec.scores.get(&aspect).ok_or_else(|| MetricError::Record {
            id: rec.id.clone(),
            message: format!("aspect {aspect} not scored"),
        })?;
        if scores.len() != r {
            return Err(MetricError::Record {
                id: rec.id.clone(),
                message: format!("{} raters, expected {r}", scores.len()),
            });
        }
        for (col, &s) in cols.iter_mut().zip(scores) {
            col.push(i32::from(s));
        }
    }
    Ok(cols)
}

/// QWK between the model's rounded predictions and each rater separately.
pub fn qwk_model_rater(
    pred_rounded: &[i32],
    records: &[UtteranceRecord],
    aspect: Aspect,
) -> Result<Agreement, MetricError> {
    let cols = rater_columns(records, aspect)?;
    let mut values = Vec::with_capacity(cols.len());
    let mut degenerate = 0;
    for col in &cols {
        let s = qwk(pred_rounded, col, SCORE_MIN..=SCORE_MAX)?;
        degenerate += usize::from(s.degenerate);
        values.push(s.value);
    }
    let pairs = (0..cols.len()).map(|r| vec![r]).collect();
    Ok(Agreement::from_values(values, pairs, degenerate))
}

/// QWK for every unordered rater pair.
pub fn qwk_rater_rater(records: &[UtteranceRecord], aspect: Aspect) -> Result<Agreement, MetricError> {
    let cols = rater_columns(records, aspect)?;
    if cols.len() < 2 {
        return Err(MetricError::TooFewRaters(cols.len()));
    }
    let mut values = Vec::new();
    let mut pairs = Vec::new();
    let mut degenerate = 0;
    for i in 0..cols.len() {
        for j in i + 1..cols.len() {
            let s = qwk(&cols[i], &cols[j], SCORE_MIN..=SCORE_MAX)?;
            degenerate += usize::from(s.degenerate);
            values.push(s.value);
            pairs.push(vec![i, j]);
        }
    }
    Ok(Agreement::from_values(values, pairs, degenerate))
}

/// Evaluation setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Exact match after clamping to the scale.
    Strict,
    /// Predictions within ±1 of gold (after clamping to the scale) count as
    /// hits; others are moved to the nearest edge of the band.
    Tolerance1,
    /// Gold inside the calibrated interval counts as predicted exactly;
    /// otherwise the nearer interval endpoint is the prediction.
    HighLowCal,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [EvalMode::Strict, EvalMode::Tolerance1, EvalMode::HighLowCal];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Strict => "strict",
            EvalMode::Tolerance1 => "tolerance1",
            EvalMode::HighLowCal => "high_low_cal",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "strict" => Ok(EvalMode::Strict),
            "tolerance1" | "tol1" | "pm1" => Ok(EvalMode::Tolerance1),
            "high_low_cal" | "highlowcal" | "calibrated" => Ok(EvalMode::HighLowCal),
            other => Err(format!("unknown eval mode `{other}`")),
        }
    }
}

/// Gold/prediction pairs after a mode's adjustment, with rounded labels.
///
/// Continuous values feed PCC and RMSE; labels feed F1, MCC and the
/// confusion matrix. In the lenient modes an accepted prediction (within ±1
/// of gold, or an interval covering gold) takes the gold label, and a
/// rejected one keeps its strict label.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjusted {
    pub gold: Vec<f64>,
    pub pred: Vec<f64>,
    pub gold_labels: Vec<i32>,
    pub pred_labels: Vec<i32>,
    pub accepted: Vec<bool>,
}

fn clamp_scale(x: f64) -> f64 {
    x.clamp(f64::from(SCORE_MIN), f64::from(SCORE_MAX))
}

fn label(x: f64) -> i32 {
    round_half_up(clamp_scale(x)) as i32
}

pub fn apply_mode(
    gold: &[f64],
    pred: &[f64],
    mode: EvalMode,
    intervals: Option<&[PredictionInterval]>,
) -> Result<Adjusted, MetricError> {
    check_pair(gold, pred)?;
    let (adjusted, accepted): (Vec<f64>, Vec<bool>) = match mode {
        EvalMode::Strict => pred
            .iter()
            .zip(gold)
            .map(|(&p, &g)| (clamp_scale(p), label(p) == label(g)))
            .unzip(),
        EvalMode::Tolerance1 => gold
            .iter()
            .zip(pred)
            .map(|(&g, &p)| (clamp_scale(p.clamp(g - 1.0, g + 1.0)), (clamp_scale(p) - g).abs() <= 1.0))
            .unzip(),
        EvalMode::HighLowCal => {
            let iv = intervals.ok_or(MetricError::MissingIntervals(mode))?;
            if iv.len() != gold.len() {
                return Err(MetricError::LengthMismatch(gold.len(), iv.len()));
            }
            gold.iter()
                .zip(iv)
                .map(|(&g, iv)| (clamp_scale(g.clamp(iv.low, iv.high)), iv.contains(g)))
                .unzip()
        }
    };
    let gold_labels: Vec<i32> = gold.iter().map(|&g| label(g)).collect();
    let pred_labels = pred
        .iter()
        .zip(&gold_labels)
        .zip(&accepted)
        .map(|((&p, &g), &ok)| if ok { g } else { label(p) })
        .collect();
    Ok(Adjusted {
        gold_labels,
        pred_labels,
        accepted,
        gold: gold.to_vec(),
        pred: adjusted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: i32 = 1;
    const B: i32 = 2;

    #[test]
    fn f1_examples() {
        assert_eq!(weighted_f1(&[1, 2, 3], &[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        let f = weighted_f1(&[A, A, B], &[A, B, B], &[A, B]).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        for n in 1..6 {
            let gold: Vec<i32> = (0..2 * n).map(|i| if i < n { A } else { B }).collect();
            let pred = vec![A; 2 * n];
            let f = weighted_f1(&gold, &pred, &[A, B]).unwrap();
            assert!((f - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(weighted_f1(&[], &[], &[A]), Err(MetricError::Empty)));
        assert!(matches!(
            weighted_f1(&[A], &[7], &[A, B]),
            Err(MetricError::UnknownLabel(7))
        ));
    }

    #[test]
    fn mcc_examples() {
        assert_eq!(mcc(&[A, B, A], &[A, B, A], &[A, B]).unwrap().value, 1.0);
        assert_eq!(mcc(&[A, B, A, B], &[B, A, B, A], &[A, B]).unwrap().value, -1.0);
        assert_eq!(mcc(&[A, A, B, B], &[A, B, A, B], &[A, B]).unwrap().value, 0.0);
        let d = mcc(&[A, A], &[A, A], &[A, B]).unwrap();
        assert!(d.degenerate && d.value == 0.0);
    }

    #[test]
    fn pcc_examples() {
        let x = [1.0, 2.0, 3.0, 4.5];
        assert!((pcc(&x, &x).unwrap().value - 1.0).abs() < 1e-15);
        let y: Vec<f64> = x.iter().map(|v| -2.0 * v + 3.0).collect();
        assert!((pcc(&x, &y).unwrap().value + 1.0).abs() < 1e-15);
        let r = pcc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap().value;
        // 3 / sqrt(2 · 14/3)
        assert!((r - 3.0 / (2.0f64 * 14.0 / 3.0).sqrt()).abs() < 1e-15);
        assert!((r - 0.98198).abs() < 5e-6);
        assert!(pcc(&[1.0, 1.0], &[1.0, 2.0]).unwrap().degenerate);
        assert!(matches!(pcc(&[1.0], &[1.0]), Err(MetricError::TooShort(2))));
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[8.0], &[7.0]).unwrap(), 1.0);
        assert!((rmse(&[1.0, 10.0], &[2.0, 8.0]).unwrap() - 2.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn qwk_examples() {
        let a = [1, 4, 7, 10, 3];
        assert!((qwk(&a, &a, 1..=10).unwrap().value - 1.0).abs() < 1e-15);
        let k = qwk(&[1, 3], &[3, 1], 1..=3).unwrap();
        assert!((k.value + 1.0).abs() < 1e-15);
        let d = qwk(&[5, 5], &[5, 5], 1..=10).unwrap();
        assert!(d.degenerate && d.value == 1.0);
        assert!(matches!(
            qwk(&[0, 5], &[5, 5], 1..=10),
            Err(MetricError::OutOfScale { value: 0, .. })
        ));
        let ab = qwk(&[1, 2, 5, 9], &[2, 2, 6, 7], 1..=10).unwrap().value;
        let ba = qwk(&[2, 2, 6, 7], &[1, 2, 5, 9], 1..=10).unwrap().value;
        assert!((ab - ba).abs() < 1e-15);
    }

    fn rec(id: usize, scores: Vec<i64>) -> UtteranceRecord {
        UtteranceRecord::new(
            id.to_string(),
            vec![],
            [(Aspect::Fluency, scores)].into_iter().collect(),
        )
        .unwrap()
    }

    #[test]
    fn rater_agreement() {
        let recs: Vec<_> = (0..6)
            .map(|i| {
                let base = (i % 5) as i64 + 3;
                rec(i, vec![base, base + 1, base - 1, base, base + 2])
            })
            .collect();
        let rr = qwk_rater_rater(&recs, Aspect::Fluency).unwrap();
        assert_eq!(rr.values.len(), 10);

        let same: Vec<_> = (0..6).map(|i| rec(i, vec![(i % 4 + 2) as i64; 5])).collect();
        let rr = qwk_rater_rater(&same, Aspect::Fluency).unwrap();
        assert_eq!(rr.mean, 1.0);
        assert_eq!(rr.sd, 0.0);

        let two: Vec<_> = (0..6).map(|i| rec(i, vec![(i % 4 + 2) as i64, 5])).collect();
        let rr = qwk_rater_rater(&two, Aspect::Fluency).unwrap();
        assert_eq!(rr.values.len(), 1);
        assert_eq!(rr.sd, 0.0);

        let one: Vec<_> = (0..3).map(|i| rec(i, vec![5])).collect();
        assert!(matches!(
            qwk_rater_rater(&one, Aspect::Fluency),
            Err(MetricError::TooFewRaters(1))
        ));

        let first_rater: Vec<i32> = recs.iter().map(|r| i32::from(r.scores[&Aspect::Fluency][0])).collect();
        let mr = qwk_model_rater(&first_rater, &recs, Aspect::Fluency).unwrap();
        assert_eq!(mr.values.len(), 5);
        assert!((mr.values[0] - 1.0).abs() < 1e-15);
        let mean = mr.values.iter().sum::<f64>() / 5.0;
        assert!((mr.mean - mean).abs() < 1e-15);
    }

    #[test]
    fn tolerance_mode_examples() {
        let adj = apply_mode(&[8.0], &[7.5], EvalMode::Tolerance1, None).unwrap();
        assert_eq!(adj.pred, vec![7.5]);
        assert_eq!(adj.pred_labels, vec![8]);
        let adj = apply_mode(&[8.0], &[7.4], EvalMode::Strict, None).unwrap();
        assert_eq!(adj.pred_labels, vec![7]);
        assert!(!adj.accepted[0]);
        let adj = apply_mode(&[8.0], &[5.0], EvalMode::Tolerance1, None).unwrap();
        assert_eq!(adj.pred, vec![7.0]);
        assert_eq!(adj.pred_labels, vec![5]);
        let adj = apply_mode(&[9.8], &[12.0], EvalMode::Strict, None).unwrap();
        assert_eq!(adj.pred, vec![10.0]);
        assert_eq!(adj.pred_labels, vec![10]);
        let adj = apply_mode(&[6.5], &[6.5], EvalMode::Strict, None).unwrap();
        assert_eq!(adj.gold_labels, vec![7]);
    }

    #[test]
    fn calibrated_mode_projects_gold_onto_interval() {
        let iv = [
            PredictionInterval::new(7.0, 0.5, 1.8),
            PredictionInterval::new(4.0, 0.5, 1.0),
        ];
        let adj = apply_mode(&[7.0, 6.0], &[7.3, 4.0], EvalMode::HighLowCal, Some(&iv)).unwrap();
        assert_eq!(adj.pred[0], 7.0);
        assert!((adj.pred[1] - 4.5).abs() < 1e-15);
        assert!(matches!(
            apply_mode(&[7.0], &[7.0], EvalMode::HighLowCal, None),
            Err(MetricError::MissingIntervals(EvalMode::HighLowCal))
        ));
    }

    #[test]
    fn confusion_hand_tally() {
        let cm = confusion(&[1, 1, 2, 3], &[1, 2, 2, 1], &[1, 2, 3]).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1, 0], vec![0, 1, 0], vec![1, 0, 0]]);
        assert_eq!(cm.total(), 4);
        assert_eq!(cm.row_percent[0], vec![50.0, 50.0, 0.0]);
        assert_eq!(cm.total_percent[2][0], 25.0);
        assert_eq!(cm.band_count(0), 2);
        assert_eq!(cm.band_count(1), 3);

        let cm = confusion(&[1, 2, 3], &[1, 2, 3], &[1, 2, 3]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(cm.counts[i][j], u64::from(i == j));
            }
            assert!((cm.row_percent[i].iter().sum::<f64>() - 100.0).abs() < 1e-12);
        }
        let csv = cm.to_csv();
        assert!(csv.starts_with("gold\\pred,1,2,3\n1,1;100.00;33.33,"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn sets() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            (2usize..60).prop_flat_map(|n| {
                (
                    prop::collection::vec(1.0f64..=10.0, n),
                    prop::collection::vec(-1.0f64..12.0, n),
                )
            })
        }

        proptest! {
            #[test]
            fn tolerance_never_worsens(pair in sets()) {
                let (gold, pred) = pair;
                let strict = apply_mode(&gold, &pred, EvalMode::Strict, None).unwrap();
                let tol = apply_mode(&gold, &pred, EvalMode::Tolerance1, None).unwrap();
                let labels = score_labels();
                let cm_strict = confusion(&strict.gold_labels, &strict.pred_labels, &labels).unwrap();
                let cm_tol = confusion(&tol.gold_labels, &tol.pred_labels, &labels).unwrap();
                for i in 0..gold.len() {
                    let moved = tol.pred[i] != strict.pred[i];
                    prop_assert_eq!(tol.accepted[i], (strict.pred[i] - gold[i]).abs() <= 1.0);
                    if tol.accepted[i] {
                        prop_assert!(!moved);
                        // accepted samples sit in the ±1 band of the strict matrix
                        prop_assert!((strict.gold_labels[i] - strict.pred_labels[i]).abs() <= 1);
                        prop_assert_eq!(tol.pred_labels[i], tol.gold_labels[i]);
                    } else {
                        prop_assert_eq!(tol.pred_labels[i], strict.pred_labels[i]);
                    }
                    if strict.accepted[i] {
                        prop_assert!(tol.accepted[i]);
                    }
                    prop_assert!((tol.pred[i] - gold[i]).abs() <= (strict.pred[i] - gold[i]).abs() + 1e-12);
                }
                prop_assert_eq!(cm_tol.total(), gold.len() as u64);
                prop_assert!(cm_tol.band_count(0) >= cm_strict.band_count(0));
                let f1 = |a: &Adjusted| weighted_f1(&a.gold_labels, &a.pred_labels, &labels).unwrap();
                prop_assert!(f1(&tol) >= f1(&strict) - 1e-12);
                let m = |a: &Adjusted| mcc(&a.gold_labels, &a.pred_labels, &labels).unwrap().value;
                prop_assert!(m(&tol) >= m(&strict) - 1e-12);
                prop_assert!(rmse(&tol.gold, &tol.pred).unwrap() <= rmse(&strict.gold, &strict.pred).unwrap() + 1e-12);
            }

            #[test]
            fn qwk_symmetric_and_self_one(a in prop::collection::vec(1i32..=10, 2..40), b in prop::collection::vec(1i32..=10, 2..40)) {
                let n = a.len().min(b.len());
                let (a, b) = (&a[..n], &b[..n]);
                let ab = qwk(a, b, 1..=10).unwrap().value;
                let ba = qwk(b, a, 1..=10).unwrap().value;
                prop_assert!((ab - ba).abs() < 1e-12);
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
                if a.iter().any(|&v| v != a[0]) {
                    prop_assert!((qwk(a, a, 1..=10).unwrap().value - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
