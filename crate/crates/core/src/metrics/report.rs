use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    apply_mode, confusion, mcc, pcc, qwk_model_rater, rmse, score_labels, weighted_f1, Agreement,
    ConfusionMatrix, EvalMode, MetricError,
};
use crate::conformal::{CoverageTable, IntervalRow, PredictionInterval};
use crate::dataio::{discretize, gold_means, Aspect, RubricLevel, UtteranceRecord};
use crate::scorer::{PredictionSet, Strategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeMetrics {
    pub weighted_f1: f64,
    pub mcc: f64,
    /// Absent for the classifier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pcc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    /// Names of metrics that hit a degenerate denominator.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectReport {
    pub metrics: BTreeMap<EvalMode, ModeMetrics>,
    /// Strict-mode QWK against each rater.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qwk_model_rater: Option<Agreement>,
    pub confusion: BTreeMap<EvalMode, ConfusionMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_interval_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub strategy: Strategy,
    pub n_utterances: usize,
    pub modes: Vec<EvalMode>,
    pub aspects: BTreeMap<Aspect, AspectReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageTable>,
    /// Fraction of gold means inside their interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval_coverage: Option<BTreeMap<Aspect, f64>>,
}

fn rubric_names() -> Vec<String> {
    RubricLevel::ALL.iter().map(|l| format!("{l:?}")).collect()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

fn predicted(predictions: &[PredictionSet], records: &[UtteranceRecord], aspect: Aspect) -> Result<Vec<f64>, MetricError> {
    predictions
        .iter()
        .zip(records)
        .map(|(p, r)| {
            p.get(aspect).map(|a| a.mean).ok_or_else(|| MetricError::Record {
                id: r.id.clone(),
                message: format!("no prediction for {aspect}"),
            })
        })
        .collect()
}

fn classifier_report(
    predictions: &[PredictionSet],
    records: &[UtteranceRecord],
    aspect: Aspect,
) -> Result<AspectReport, MetricError> {
    let gold: Vec<i32> = gold_means(records, aspect)?
        .into_iter()
        .map(|g| discretize(g).map(|l| l.ordinal() as i32))
        .collect::<Result<_, _>>()?;
    let pred: Vec<i32> = predictions
        .iter()
        .zip(records)
        .map(|(p, r)| {
            p.get(aspect)
                .and_then(|a| a.predicted_level())
                .map(|l| l.ordinal() as i32)
                .ok_or_else(|| MetricError::Record {
                    id: r.id.clone(),
                    message: format!("no class probabilities for {aspect}"),
                })
        })
        .collect::<Result<_, _>>()?;
    let labels: Vec<i32> = (0..RubricLevel::COUNT as i32).collect();
    let f1 = weighted_f1(&gold, &pred, &labels)?;
    let m = mcc(&gold, &pred, &labels)?;
    let cm = confusion(&gold, &pred, &labels)?.with_names(rubric_names());
    let metrics = ModeMetrics {
        weighted_f1: f1,
        mcc: m.value,
        pcc: None,
        rmse: None,
        degenerate: if m.degenerate { vec!["mcc".into()] } else { vec![] },
    };
    Ok(AspectReport {
        metrics: [(EvalMode::Strict, metrics)].into_iter().collect(),
        qwk_model_rater: None,
        confusion: [(EvalMode::Strict, cm)].into_iter().collect(),
        median_interval_width: None,
    })
}

fn regression_report(
    predictions: &[PredictionSet],
    records: &[UtteranceRecord],
    aspect: Aspect,
    modes: &[EvalMode],
    intervals: Option<&[PredictionInterval]>,
) -> Result<AspectReport, MetricError> {
    let gold = gold_means(records, aspect)?;
    let pred = predicted(predictions, records, aspect)?;
    let labels = score_labels();
    let mut report = AspectReport {
        metrics: BTreeMap::new(),
        qwk_model_rater: None,
        confusion: BTreeMap::new(),
        median_interval_width: intervals.and_then(|iv| median(iv.iter().map(|i| i.width()).collect())),
    };
    for &mode in modes {
        let adj = apply_mode(&gold, &pred, mode, intervals)?;
        let mut degenerate = Vec::new();
        let m = mcc(&adj.gold_labels, &adj.pred_labels, &labels)?;
        if m.degenerate {
            degenerate.push("mcc".to_string());
        }
        let r = pcc(&adj.gold, &adj.pred)?;
        if r.degenerate {
            degenerate.push("pcc".to_string());
        }
        if mode == EvalMode::Strict {
            let agreement = qwk_model_rater(&adj.pred_labels, records, aspect)?;
            if agreement.degenerate > 0 {
                degenerate.push("qwk".to_string());
            }
            report.qwk_model_rater = Some(agreement);
        }
        report.metrics.insert(
            mode,
            ModeMetrics {
                weighted_f1: weighted_f1(&adj.gold_labels, &adj.pred_labels, &labels)?,
                mcc: m.value,
                pcc: Some(r.value),
                rmse: Some(rmse(&adj.gold, &adj.pred)?),
                degenerate,
            },
        );
        report
            .confusion
            .insert(mode, confusion(&adj.gold_labels, &adj.pred_labels, &labels)?);
    }
    Ok(report)
}

/// Assembles every metric for every aspect the strategy predicts, under
/// each requested mode. The classifier supports only [`EvalMode::Strict`].
pub fn full_report(
    predictions: &[PredictionSet],
    records: &[UtteranceRecord],
    strategy: Strategy,
    modes: &[EvalMode],
    intervals: Option<&[IntervalRow]>,
) -> Result<EvaluationReport, MetricError> {
    if predictions.len() != records.len() {
        return Err(MetricError::LengthMismatch(predictions.len(), records.len()));
    }
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(iv) = intervals {
        if iv.len() != records.len() {
            return Err(MetricError::LengthMismatch(records.len(), iv.len()));
        }
    }
    let mut modes = modes.to_vec();
    modes.sort();
    modes.dedup();
    if modes.is_empty() {
        return Err(MetricError::Empty);
    }
    if strategy.is_classifier() {
        if let Some(&mode) = modes.iter().find(|&&m| m != EvalMode::Strict) {
            return Err(MetricError::UnsupportedMode {
                mode,
                what: "the classifier".into(),
            });
        }
    } else if modes.contains(&EvalMode::HighLowCal) && intervals.is_none() {
        return Err(MetricError::MissingIntervals(EvalMode::HighLowCal));
    }

    let mut aspects = BTreeMap::new();
    for aspect in strategy.aspects() {
        let report = if strategy.is_classifier() {
            classifier_report(predictions, records, aspect)?
        } else {
            let iv: Option<Vec<PredictionInterval>> = intervals
                .map(|rows| {
                    rows.iter()
                        .zip(records)
                        .map(|(row, r)| {
                            row.get(&aspect).copied().ok_or_else(|| MetricError::Record {
                                id: r.id.clone(),
                                message: format!("no interval for {aspect}"),
                            })
                        })
                        .collect::<Result<_, _>>()
                })
                .transpose()?;
            regression_report(predictions, records, aspect, &modes, iv.as_deref())?
        };
        aspects.insert(aspect, report);
    }
    Ok(EvaluationReport {
        strategy,
        n_utterances: records.len(),
        modes,
        aspects,
        coverage: None,
        interval_coverage: None,
    })
}

impl EvaluationReport {
    pub fn with_coverage(mut self, table: CoverageTable, interval_coverage: BTreeMap<Aspect, f64>) -> Self {
        self.coverage = Some(table);
        self.interval_coverage = Some(interval_coverage);
        self
    }

    /// Aligned text table, one row per aspect and mode.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "strategy: {}   utterances: {}", self.strategy, self.n_utterances);
        out.push('\n');
        let classifier = self.strategy.is_classifier();
        if classifier {
            let _ = writeln!(out, "{:<10} {:<13} {:>7} {:>7}", "aspect", "mode", "F1", "MCC");
        } else {
            let _ = writeln!(
                out,
                "{:<10} {:<13} {:>7} {:>7} {:>7} {:>7}   QWK (M-R)",
                "aspect", "mode", "F1", "MCC", "PCC", "RMSE"
            );
        }
        for (aspect, rep) in &self.aspects {
            for (i, (mode, m)) in rep.metrics.iter().enumerate() {
                let name = if i == 0 { aspect.name() } else { "" };
                let _ = write!(out, "{:<10} {:<13} {:>7.4} {:>7.4}", name, mode.name(), m.weighted_f1, m.mcc);
                if !classifier {
                    let _ = write!(
                        out,
                        " {:>7.4} {:>7.4}",
                        m.pcc.unwrap_or(f64::NAN),
                        m.rmse.unwrap_or(f64::NAN)
                    );
                    match (&rep.qwk_model_rater, mode) {
                        (Some(q), EvalMode::Strict) => {
                            let _ = write!(out, "   {:.4} ± {:.4}", q.mean, q.sd);
                        }
                        _ => out.push_str("   -"),
                    }
                }
                if !m.degenerate.is_empty() {
                    let _ = write!(out, "   [degenerate: {}]", m.degenerate.join(","));
                }
                out.push('\n');
            }
            if let Some(w) = rep.median_interval_width {
                let _ = writeln!(out, "           median calibrated range: {w:.4}");
            }
        }
        if let Some(cov) = &self.interval_coverage {
            out.push('\n');
            for (aspect, c) in cov {
                let _ = writeln!(out, "interval coverage {:<10} {:.4}", aspect.name(), c);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::AspectPrediction;

    fn dataset(n: usize) -> Vec<UtteranceRecord> {
        (0..n)
            .map(|i| {
                let scores = Aspect::ALL
                    .iter()
                    .map(|&a| {
                        let base = ((i * 7 + a.index() * 3) % 8) as i64 + 2;
                        (a, vec![base, base + 1, base - 1, base, base])
                    })
                    .collect();
                UtteranceRecord::new(format!("u{i}"), vec![], scores).unwrap()
            })
            .collect()
    }

    fn oracle(records: &[UtteranceRecord]) -> Vec<PredictionSet> {
        records
            .iter()
            .map(|r| PredictionSet {
                aspects: Aspect::ALL
                    .iter()
                    .map(|&a| {
                        let mean = gold_means(std::slice::from_ref(r), a).unwrap()[0];
                        (a, AspectPrediction { mean, variance: Some(0.25), class_probs: None })
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn perfect_predictions() {
        let recs = dataset(40);
        let preds = oracle(&recs);
        let rep = full_report(&preds, &recs, Strategy::MrrGc, &[EvalMode::Strict, EvalMode::Tolerance1], None).unwrap();
        for a in Aspect::ALL {
            let ar = &rep.aspects[&a];
            for m in ar.metrics.values() {
                assert!((m.weighted_f1 - 1.0).abs() < 1e-12);
                assert!((m.mcc - 1.0).abs() < 1e-12);
                assert!((m.pcc.unwrap() - 1.0).abs() < 1e-12);
                assert_eq!(m.rmse, Some(0.0));
            }
            assert_eq!(ar.confusion[&EvalMode::Strict].total(), 40);
        }
        assert!(rep.to_text().contains("QWK (M-R)"));
    }

    #[test]
    fn qwk_only_under_strict_and_modes_exact() {
        let recs = dataset(30);
        let preds = oracle(&recs);
        let rep = full_report(&preds, &recs, Strategy::MrrM, &[EvalMode::Tolerance1], None).unwrap();
        let ar = &rep.aspects[&Aspect::Accuracy];
        assert!(ar.qwk_model_rater.is_none());
        assert_eq!(ar.metrics.keys().copied().collect::<Vec<_>>(), vec![EvalMode::Tolerance1]);
        let json = serde_json::to_string(&rep).unwrap();
        assert!(!json.contains("qwk"));
    }

    #[test]
    fn classifier_report_has_only_f1_and_mcc() {
        let recs = dataset(25);
        let preds: Vec<PredictionSet> = recs
            .iter()
            .map(|r| {
                let g = gold_means(std::slice::from_ref(r), Aspect::Fluency).unwrap()[0];
                let mut probs = [0.05; 5];
                probs[discretize(g).unwrap().ordinal()] = 0.8;
                PredictionSet {
                    aspects: [(Aspect::Fluency, AspectPrediction { mean: 0.0, variance: None, class_probs: Some(probs) })]
                        .into_iter()
                        .collect(),
                }
            })
            .collect();
        let strategy = Strategy::DiCl(Aspect::Fluency);
        let rep = full_report(&preds, &recs, strategy, &[EvalMode::Strict], None).unwrap();
        let m = &rep.aspects[&Aspect::Fluency].metrics[&EvalMode::Strict];
        assert!((m.weighted_f1 - 1.0).abs() < 1e-12);
        assert!(m.pcc.is_none() && m.rmse.is_none());
        let json = serde_json::to_value(&rep).unwrap();
        let keys: Vec<_> = json["aspects"]["fluency"]["metrics"]["strict"]
            .as_object()
            .unwrap()
            .keys()
            .cloned()
            .collect();
        assert_eq!(keys, vec!["mcc", "weighted_f1"]);
        assert!(matches!(
            full_report(&preds, &recs, strategy, &[EvalMode::Tolerance1], None),
            Err(MetricError::UnsupportedMode { .. })
        ));
    }

    #[test]
    fn calibrated_mode_needs_intervals() {
        let recs = dataset(10);
        let preds = oracle(&recs);
        assert!(matches!(
            full_report(&preds, &recs, Strategy::MrrG, &[EvalMode::HighLowCal], None),
            Err(MetricError::MissingIntervals(_))
        ));
        let rows: Vec<IntervalRow> = preds
            .iter()
            .map(|p| {
                p.aspects
                    .iter()
                    .map(|(&a, ap)| (a, PredictionInterval::new(ap.mean + 0.3, 0.5, 1.0)))
                    .collect()
            })
            .collect();
        let rep = full_report(&preds, &recs, Strategy::MrrG, &[EvalMode::HighLowCal, EvalMode::Strict], Some(&rows)).unwrap();
        let ar = &rep.aspects[&Aspect::Prosody];
        assert_eq!(ar.metrics[&EvalMode::HighLowCal].rmse, Some(0.0));
        assert!((ar.median_interval_width.unwrap() - 1.0).abs() < 1e-12);
    }
}
