//! Seeded synthetic multi-rater corpora with a known ground truth.
//!
//! All randomness comes from one `ChaCha8Rng` stream seeded with
//! `SyntheticSpec::seed`; normal draws use the ziggurat sampler from
//! `rand_distr`. Both are portable, so a seed reproduces the same corpus on
//! every platform.
//!
//! Generative model, per utterance `i` with features `x_i ~ N(0, I_d)`:
//!
//! ```text
//! latent_a(i) = 1 + 9 · sigmoid(w_a · x_i + b_a)
//! sd(i)       = noise_low + (noise_high − noise_low) · sigmoid(2 · v · x_i)
//! y_{i,r,a}   = round_half_up(clamp(latent_a(i) + sd(i) · z, 1, 10)),  z ~ N(0, 1)
//! ```
//!
//! The rater-noise SD depends on the features, so a scorer can learn it.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{round_half_up, Aspect, DataError, UtteranceRecord};

const ASPECT_OFFSET: [f64; 3] = [0.35, 0.2, 0.25];
const SHARED_WEIGHT: f64 = 0.6;
const SPECIFIC_WEIGHT: f64 = 0.8;
const NOISE_GAIN: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_utterances: usize,
    pub feature_dim: usize,
    pub n_raters: usize,
    pub noise_low: f64,
    pub noise_high: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_utterances: 2500,
            feature_dim: 32,
            n_raters: 5,
            noise_low: 0.3,
            noise_high: 2.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_utterances == 0 {
            return Err(DataError::Spec("n_utterances must be at least 1".into()));
        }
        if self.feature_dim == 0 {
            return Err(DataError::Spec("feature_dim must be at least 1".into()));
        }
        if self.n_raters == 0 {
            return Err(DataError::Spec("n_raters must be at least 1".into()));
        }
        if !(self.noise_low > 0.0) || !self.noise_high.is_finite() {
            return Err(DataError::Spec("noise_low must be positive".into()));
        }
        if self.noise_low > self.noise_high {
            return Err(DataError::Spec(format!(
                "noise_low {} exceeds noise_high {}",
                self.noise_low, self.noise_high
            )));
        }
        Ok(())
    }
}

/// Hidden generator state for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub id: String,
    pub latent: BTreeMap<Aspect, f64>,
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub records: Vec<UtteranceRecord>,
    pub truth: Vec<TruthRow>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus, DataError> {
    spec.validate()?;
    let d = spec.feature_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let shared: Vec<f64> = (0..d).map(|_| normal(&mut rng) * scale).collect();
    let aspect_weights: Vec<Vec<f64>> = Aspect::ALL
        .iter()
        .map(|_| {
            shared
                .iter()
                .map(|&s| SHARED_WEIGHT * s + SPECIFIC_WEIGHT * normal(&mut rng) * scale)
                .collect()
        })
        .collect();
    let noise_dir: Vec<f64> = (0..d).map(|_| normal(&mut rng) * scale).collect();

    let mut records = Vec::with_capacity(spec.n_utterances);
    let mut truth = Vec::with_capacity(spec.n_utterances);
    for i in 0..spec.n_utterances {
        // stored as f32 in the sidecar, so quantize before anything reads it
        let x: Vec<f64> = (0..d)
            .map(|_| f64::from(normal(&mut rng) as f32))
            .collect();
        let dot = |w: &[f64]| w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
        let noise_sd = spec.noise_low
            + (spec.noise_high - spec.noise_low) * sigmoid(NOISE_GAIN * dot(&noise_dir));

        let id = format!("syn{i:06}");
        let mut latent = BTreeMap::new();
        let mut scores = BTreeMap::new();
        for (a, aspect) in Aspect::ALL.into_iter().enumerate() {
            let mu = 1.0 + 9.0 * sigmoid(dot(&aspect_weights[a]) + ASPECT_OFFSET[a]);
            let raters: Vec<i64> = (0..spec.n_raters)
                .map(|_| {
                    let y = (mu + noise_sd * normal(&mut rng)).clamp(1.0, 10.0);
                    round_half_up(y) as i64
                })
                .collect();
            latent.insert(aspect, mu);
            scores.insert(aspect, raters);
        }
        records.push(UtteranceRecord::new(id.clone(), x, scores)?);
        truth.push(TruthRow {
            id,
            latent,
            noise_sd,
        });
    }
    Ok(SyntheticCorpus { records, truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::rater_stats;

    fn spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_utterances: 50,
            feature_dim: 8,
            n_raters: 5,
            noise_low: 0.5,
            noise_high: 1.5,
            seed,
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate_synthetic(&spec(3)).unwrap();
        let b = generate_synthetic(&spec(3)).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        let c = generate_synthetic(&spec(4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_noise_range_gives_constant_sd() {
        let mut s = spec(1);
        s.noise_low = 0.8;
        s.noise_high = 0.8;
        let c = generate_synthetic(&s).unwrap();
        assert!(c.truth.iter().all(|t| t.noise_sd == 0.8));
    }

    #[test]
    fn records_satisfy_invariants() {
        let c = generate_synthetic(&spec(9)).unwrap();
        assert_eq!(c.records.len(), 50);
        for (r, t) in c.records.iter().zip(&c.truth) {
            assert_eq!(r.features.len(), 8);
            assert_eq!(r.rater_count(), 5);
            assert_eq!(r.id, t.id);
            assert!(t.noise_sd >= 0.5 && t.noise_sd <= 1.5);
            for a in Aspect::ALL {
                assert!(r.scores[&a].iter().all(|&s| (1..=10).contains(&s)));
                let l = t.latent[&a];
                assert!((1.0..=10.0).contains(&l));
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(0);
        s.noise_low = 2.0;
        assert!(generate_synthetic(&s).is_err());
        let mut s = spec(0);
        s.noise_low = 0.0;
        assert!(generate_synthetic(&s).is_err());
        let mut s = spec(0);
        s.n_utterances = 0;
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn rater_variance_grows_with_noise_range() {
        // Monte-Carlo over 5 seeds, n=2000, R=5
        let ranges = [(0.2, 0.6), (0.6, 1.2), (1.2, 2.0)];
        let mut means = Vec::new();
        for &(lo, hi) in &ranges {
            let mut total = 0.0;
            let mut count = 0.0;
            for seed in 0..5 {
                let c = generate_synthetic(&SyntheticSpec {
                    n_utterances: 2000,
                    feature_dim: 16,
                    n_raters: 5,
                    noise_low: lo,
                    noise_high: hi,
                    seed,
                })
                .unwrap();
                for r in &c.records {
                    for a in Aspect::ALL {
                        total += rater_stats(r, a).unwrap().variance;
                        count += 1.0;
                    }
                }
            }
            means.push(total / count);
        }
        assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
    }
}
