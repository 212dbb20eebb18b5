//! Dataset model for multi-rater, multi-aspect utterance scoring.
//!
//! An utterance carries a feature vector (any precomputed embedding) and, for
//! each scored aspect, the integer scores of `R` independent raters on the
//! 1..=10 scale. Gold targets are derived from those scores: the rater mean
//! `ȳ`, the population inter-rater variance `s²`, and the five-level rubric
//! category of the mean.

mod format;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use format::{
    load_dataset, read_feature_matrix, write_annotations, write_feature_matrix, DatasetFormat,
    FEATURE_MAGIC,
};
pub use synthetic::{generate_synthetic, SyntheticCorpus, SyntheticSpec, TruthRow};

/// Lowest score on the rating scale.
pub const SCORE_MIN: i32 = 1;
/// Highest score on the rating scale.
pub const SCORE_MAX: i32 = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("utterance {id}: {aspect} score {score} outside [1,10]")]
    ScoreOutOfRange { id: String, aspect: Aspect, score: i64 },
    #[error("utterance {id}: feature length {found}, expected {expected}")]
    FeatureDim {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("utterance {id}: {message}")]
    Invalid { id: String, message: String },
    #[error("utterance {id}: aspect {aspect} not scored")]
    MissingAspect { id: String, aspect: Aspect },
    #[error("score {0} outside [1,10]")]
    ScoreRange(f64),
    #[error("features sidecar: {0}")]
    Sidecar(String),
    #[error("synthetic spec: {0}")]
    Spec(String),
}

/// One of the three scored dimensions of read speech.
///
/// Ordering is fixed (`Accuracy < Fluency < Prosody`) and is the order in
/// which per-aspect terms are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aspect {
    Accuracy,
    Fluency,
    Prosody,
}

impl Aspect {
    pub const ALL: [Aspect; 3] = [Aspect::Accuracy, Aspect::Fluency, Aspect::Prosody];

    pub fn name(self) -> &'static str {
        match self {
            Aspect::Accuracy => "accuracy",
            Aspect::Fluency => "fluency",
            Aspect::Prosody => "prosody",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Aspect> {
        Aspect::ALL.get(i).copied()
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aspect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "accuracy" | "acc" => Ok(Aspect::Accuracy),
            "fluency" | "flu" => Ok(Aspect::Fluency),
            "prosody" | "pro" | "prosodic" => Ok(Aspect::Prosody),
            other => Err(format!("unknown aspect `{other}`")),
        }
    }
}

/// Five ordered rubric categories with ordinal values 0..=4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RubricLevel {
    VeryPoor = 0,
    Poor = 1,
    Fair = 2,
    Good = 3,
    VeryGood = 4,
}

impl RubricLevel {
    pub const COUNT: usize = 5;
    pub const ALL: [RubricLevel; 5] = [
        RubricLevel::VeryPoor,
        RubricLevel::Poor,
        RubricLevel::Fair,
        RubricLevel::Good,
        RubricLevel::VeryGood,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(i: usize) -> Option<RubricLevel> {
        RubricLevel::ALL.get(i).copied()
    }
}

/// Mean and population variance of one utterance's rater scores for an aspect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AspectStats {
    pub mean: f64,
    pub variance: f64,
}

impl AspectStats {
    /// Computes `ȳ = (1/R) Σ y_r` and `s² = (1/R) Σ (y_r − ȳ)²`.
    pub fn from_scores(scores: &[u8]) -> Option<AspectStats> {
        if scores.is_empty() {
            return None;
        }
        let r = scores.len() as f64;
        let mean = scores.iter().map(|&s| f64::from(s)).sum::<f64>() / r;
        let variance = scores
            .iter()
            .map(|&s| (f64::from(s) - mean).powi(2))
            .sum::<f64>()
            / r;
        Some(AspectStats { mean, variance })
    }
}

/// One utterance with its features and per-aspect rater scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub scores: BTreeMap<Aspect, Vec<u8>>,
}

impl UtteranceRecord {
    /// Builds a record, checking score range and per-record rater count.
    pub fn new(
        id: impl Into<String>,
        features: Vec<f64>,
        scores: BTreeMap<Aspect, Vec<i64>>,
    ) -> Result<Self, DataError> {
        let id = id.into();
        let mut checked = BTreeMap::new();
        let mut raters: Option<usize> = None;
        for (aspect, list) in scores {
            if list.is_empty() {
                return Err(DataError::Invalid {
                    id,
                    message: format!("aspect {aspect} has no rater scores"),
                });
            }
            match raters {
                Some(r) if r != list.len() => {
                    return Err(DataError::Invalid {
                        id,
                        message: format!(
                            "aspect {aspect} has {} raters, other aspects have {r}",
                            list.len()
                        ),
                    })
                }
                _ => raters = Some(list.len()),
            }
            let mut row = Vec::with_capacity(list.len());
            for score in list {
                if !(i64::from(SCORE_MIN)..=i64::from(SCORE_MAX)).contains(&score) {
                    return Err(DataError::ScoreOutOfRange { id, aspect, score });
                }
                row.push(score as u8);
            }
            checked.insert(aspect, row);
        }
        if let Some(bad) = features.iter().find(|v| !v.is_finite()) {
            return Err(DataError::Invalid {
                id,
                message: format!("non-finite feature value {bad}"),
            });
        }
        Ok(UtteranceRecord {
            id,
            features,
            scores: checked,
        })
    }

    /// Rater count `R` (0 when no aspect is scored).
    pub fn rater_count(&self) -> usize {
        self.scores.values().next().map_or(0, Vec::len)
    }

    pub fn aspect_scores(&self, aspect: Aspect) -> Result<&[u8], DataError> {
        self.scores
            .get(&aspect)
            .map(Vec::as_slice)
            .ok_or_else(|| DataError::MissingAspect {
                id: self.id.clone(),
                aspect,
            })
    }
}

/// Mean and population variance of the rater scores for `aspect`.
pub fn rater_stats(record: &UtteranceRecord, aspect: Aspect) -> Result<AspectStats, DataError> {
    let scores = record.aspect_scores(aspect)?;
    AspectStats::from_scores(scores).ok_or_else(|| DataError::MissingAspect {
        id: record.id.clone(),
        aspect,
    })
}

/// Rounds to the nearest integer with halves going up (6.5 → 7).
pub fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Maps a 1..=10 score to its rubric category: the score is rounded half-up
/// and then bucketed in pairs (1–2, 3–4, 5–6, 7–8, 9–10).
pub fn discretize(score: f64) -> Result<RubricLevel, DataError> {
    if !(f64::from(SCORE_MIN)..=f64::from(SCORE_MAX)).contains(&score) {
        return Err(DataError::ScoreRange(score));
    }
    let rounded = round_half_up(score) as usize;
    Ok(RubricLevel::ALL[(rounded - 1) / 2])
}

/// Checks dataset-level invariants: a single feature length across records.
pub fn validate_dataset(records: &[UtteranceRecord]) -> Result<(), DataError> {
    let Some(first) = records.first() else {
        return Ok(());
    };
    let d = first.features.len();
    for r in records {
        if r.features.len() != d {
            return Err(DataError::FeatureDim {
                id: r.id.clone(),
                expected: d,
                found: r.features.len(),
            });
        }
    }
    Ok(())
}

/// Gold rater means for `aspect`, in record order.
pub fn gold_means(records: &[UtteranceRecord], aspect: Aspect) -> Result<Vec<f64>, DataError> {
    records
        .iter()
        .map(|r| rater_stats(r, aspect).map(|s| s.mean))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(scores: &[(Aspect, Vec<i64>)]) -> Result<UtteranceRecord, DataError> {
        UtteranceRecord::new("u1", vec![0.0; 3], scores.iter().cloned().collect())
    }

    #[test]
    fn stats_of_constant_raters() {
        let r = record(&[(Aspect::Accuracy, vec![7, 7, 7, 7, 7])]).unwrap();
        let s = rater_stats(&r, Aspect::Accuracy).unwrap();
        assert_eq!(s.mean, 7.0);
        assert_eq!(s.variance, 0.0);
    }

    #[test]
    fn stats_use_population_variance() {
        let r = record(&[(Aspect::Fluency, vec![6, 7, 7, 7, 8])]).unwrap();
        let s = rater_stats(&r, Aspect::Fluency).unwrap();
        assert!((s.mean - 7.0).abs() < 1e-15);
        assert!((s.variance - 0.4).abs() < 1e-15);

        let r = record(&[(Aspect::Prosody, vec![1, 10])]).unwrap();
        let s = rater_stats(&r, Aspect::Prosody).unwrap();
        assert_eq!(s.mean, 5.5);
        assert_eq!(s.variance, 20.25);
    }

    #[test]
    fn stats_missing_aspect() {
        let r = record(&[(Aspect::Accuracy, vec![5])]).unwrap();
        assert!(matches!(
            rater_stats(&r, Aspect::Prosody),
            Err(DataError::MissingAspect { .. })
        ));
    }

    #[test]
    fn out_of_range_score_names_utterance() {
        let err = record(&[(Aspect::Accuracy, vec![8, 11])]).unwrap_err();
        match err {
            DataError::ScoreOutOfRange { id, score, .. } => {
                assert_eq!(id, "u1");
                assert_eq!(score, 11);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(record(&[(Aspect::Accuracy, vec![0])]).is_err());
    }

    #[test]
    fn rater_count_must_agree_across_aspects() {
        let err = record(&[
            (Aspect::Accuracy, vec![8, 8, 8]),
            (Aspect::Fluency, vec![8, 8]),
        ])
        .unwrap_err();
        assert!(matches!(err, DataError::Invalid { .. }));
    }

    #[test]
    fn discretize_rubric_buckets() {
        let expected = [
            (1.0, RubricLevel::VeryPoor),
            (2.0, RubricLevel::VeryPoor),
            (3.0, RubricLevel::Poor),
            (4.0, RubricLevel::Poor),
            (5.0, RubricLevel::Fair),
            (6.0, RubricLevel::Fair),
            (7.0, RubricLevel::Good),
            (8.0, RubricLevel::Good),
            (9.0, RubricLevel::VeryGood),
            (10.0, RubricLevel::VeryGood),
        ];
        for (score, level) in expected {
            assert_eq!(discretize(score).unwrap(), level, "score {score}");
        }
        assert_eq!(discretize(6.5).unwrap(), RubricLevel::Good);
        assert_eq!(discretize(6.49).unwrap(), RubricLevel::Fair);
        assert_eq!(discretize(2.5).unwrap(), RubricLevel::Poor);
        assert!(discretize(0.99).is_err());
        assert!(discretize(10.01).is_err());
        assert!(discretize(f64::NAN).is_err());
    }

    #[test]
    fn aspect_parsing() {
        assert_eq!("Accuracy".parse::<Aspect>().unwrap(), Aspect::Accuracy);
        assert_eq!("prosody".parse::<Aspect>().unwrap(), Aspect::Prosody);
        assert!("completeness".parse::<Aspect>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn variance_is_permutation_invariant(mut scores in prop::collection::vec(1u8..=10, 1..8), seed in any::<u64>()) {
                let a = AspectStats::from_scores(&scores).unwrap();
                // deterministic shuffle from the seed
                let n = scores.len();
                let mut s = seed;
                for i in (1..n).rev() {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    let j = (s >> 33) as usize % (i + 1);
                    scores.swap(i, j);
                }
                let b = AspectStats::from_scores(&scores).unwrap();
                prop_assert!((a.mean - b.mean).abs() < 1e-12);
                prop_assert!((a.variance - b.variance).abs() < 1e-12);
                prop_assert!(a.mean >= 1.0 && a.mean <= 10.0);
                prop_assert!(discretize(a.mean).is_ok());
            }

            #[test]
            fn discretize_is_monotone(x in 1.0f64..=10.0, y in 1.0f64..=10.0) {
                let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
                prop_assert!(discretize(lo).unwrap() <= discretize(hi).unwrap());
            }
        }
    }
}
