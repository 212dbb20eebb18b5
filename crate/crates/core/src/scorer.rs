//! A small feed-forward scorer with strategy-dependent heads.
//!
//! One shared `tanh` hidden layer feeds one head per scored aspect:
//!
//! | strategy          | heads                 | head width | output                         |
//! |-------------------|-----------------------|------------|--------------------------------|
//! | `dicl`            | 1 (its aspect)        | 5          | softmax class probabilities    |
//! | `srr_m`           | 1 (its aspect)        | 1          | mean                           |
//! | `mrr_m`           | 3                     | 1          | mean                           |
//! | `mrr_g`, `mrr_gc` | 3                     | 2          | mean, softplus variance        |
//!
//! Regression means are `MEAN_OFFSET + z` (raw, unclamped). Variances are
//! `softplus(z) + VARIANCE_FLOOR`.
//!
//! All parameters live in one flat `Vec<f64>`, laid out as trunk weights
//! (`h × d`, row-major), trunk biases (`h`), then for each head in aspect
//! order its weights (`width × h`) and biases (`width`).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Aspect, RubricLevel};

/// Lower bound added to every predicted variance.
pub const VARIANCE_FLOOR: f64 = 1e-4;
/// Constant added to every regression head output (scale midpoint).
pub const MEAN_OFFSET: f64 = 5.5;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RSCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_HEADER_LEN: usize = 48;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("feature length {found} does not match model input dimension {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("model dimensions must be positive (d={d}, h={h})")]
    BadDims { d: usize, h: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[serde(rename = "dicl")]
    DiCl,
    SrrM,
    MrrM,
    MrrG,
    MrrGc,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::DiCl => "dicl",
            StrategyKind::SrrM => "srr_m",
            StrategyKind::MrrM => "mrr_m",
            StrategyKind::MrrG => "mrr_g",
            StrategyKind::MrrGc => "mrr_gc",
        }
    }

    fn code(self) -> u8 {
        match self {
            StrategyKind::DiCl => 0,
            StrategyKind::SrrM => 1,
            StrategyKind::MrrM => 2,
            StrategyKind::MrrG => 3,
            StrategyKind::MrrGc => 4,
        }
    }

    fn from_code(c: u8) -> Option<StrategyKind> {
        Some(match c {
            0 => StrategyKind::DiCl,
            1 => StrategyKind::SrrM,
            2 => StrategyKind::MrrM,
            3 => StrategyKind::MrrG,
            4 => StrategyKind::MrrGc,
            _ => return None,
        })
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['.', '-'], "_").as_str() {
            "dicl" => Ok(StrategyKind::DiCl),
            "srr_m" => Ok(StrategyKind::SrrM),
            "mrr_m" => Ok(StrategyKind::MrrM),
            "mrr_g" => Ok(StrategyKind::MrrG),
            "mrr_gc" => Ok(StrategyKind::MrrGc),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

/// Training/scoring strategy. Single-rubric strategies carry their aspect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Strategy {
    DiCl(Aspect),
    SrrM(Aspect),
    MrrM,
    MrrG,
    MrrGc,
}

impl Strategy {
    pub fn new(kind: StrategyKind, aspect: Option<Aspect>) -> Result<Strategy, String> {
        match (kind, aspect) {
            (StrategyKind::DiCl, Some(a)) => Ok(Strategy::DiCl(a)),
            (StrategyKind::SrrM, Some(a)) => Ok(Strategy::SrrM(a)),
            (StrategyKind::DiCl | StrategyKind::SrrM, None) => {
                Err(format!("strategy {} needs an aspect", kind.name()))
            }
            (StrategyKind::MrrM, None) => Ok(Strategy::MrrM),
            (StrategyKind::MrrG, None) => Ok(Strategy::MrrG),
            (StrategyKind::MrrGc, None) => Ok(Strategy::MrrGc),
            (_, Some(_)) => Err(format!(
                "strategy {} scores all aspects and takes no aspect",
                kind.name()
            )),
        }
    }

    pub fn kind(self) -> StrategyKind {
        match self {
            Strategy::DiCl(_) => StrategyKind::DiCl,
            Strategy::SrrM(_) => StrategyKind::SrrM,
            Strategy::MrrM => StrategyKind::MrrM,
            Strategy::MrrG => StrategyKind::MrrG,
            Strategy::MrrGc => StrategyKind::MrrGc,
        }
    }

    pub fn aspects(self) -> Vec<Aspect> {
        match self {
            Strategy::DiCl(a) | Strategy::SrrM(a) => vec![a],
            _ => Aspect::ALL.to_vec(),
        }
    }

    pub fn single_aspect(self) -> Option<Aspect> {
        match self {
            Strategy::DiCl(a) | Strategy::SrrM(a) => Some(a),
            _ => None,
        }
    }

    pub fn head_width(self) -> usize {
        match self {
            Strategy::DiCl(_) => RubricLevel::COUNT,
            Strategy::SrrM(_) | Strategy::MrrM => 1,
            Strategy::MrrG | Strategy::MrrGc => 2,
        }
    }

    pub fn is_gaussian(self) -> bool {
        matches!(self, Strategy::MrrG | Strategy::MrrGc)
    }

    pub fn is_classifier(self) -> bool {
        matches!(self, Strategy::DiCl(_))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.single_aspect() {
            Some(a) => write!(f, "{}:{}", self.kind().name(), a),
            None => f.write_str(self.kind().name()),
        }
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, aspect) = match s.split_once(':') {
            Some((k, a)) => (k.parse()?, Some(a.parse()?)),
            None => (s.parse()?, None),
        };
        Strategy::new(kind, aspect)
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Strategy {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub d: usize,
    pub h: usize,
    pub heads: usize,
    pub width: usize,
}

impl Layout {
    pub fn new(d: usize, h: usize, strategy: Strategy) -> Layout {
        Layout {
            d,
            h,
            heads: strategy.aspects().len(),
            width: strategy.head_width(),
        }
    }

    pub fn trunk_bias_offset(&self) -> usize {
        self.h * self.d
    }

    fn trunk_len(&self) -> usize {
        self.h * self.d + self.h
    }

    fn head_len(&self) -> usize {
        self.width * self.h + self.width
    }

    pub fn head_offset(&self, k: usize) -> usize {
        self.trunk_len() + k * self.head_len()
    }

    pub fn head_bias_offset(&self, k: usize) -> usize {
        self.head_offset(k) + self.width * self.h
    }

    pub fn len(&self) -> usize {
        self.trunk_len() + self.heads * self.head_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `true` for weight entries, `false` for biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        mask[..self.h * self.d].fill(true);
        for k in 0..self.heads {
            let start = self.head_offset(k);
            mask[start..start + self.width * self.h].fill(true);
        }
        mask
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    pub strategy: Strategy,
    pub d: usize,
    pub h: usize,
    pub seed: u64,
    pub values: Vec<f64>,
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inverse of `softplus` for positive targets.
fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Bias that makes the variance head output exactly `target` when its
/// pre-activation weights are zero.
pub fn variance_bias_for(target: f64) -> f64 {
    softplus_inverse(target - VARIANCE_FLOOR)
}

pub fn init_params(
    d: usize,
    h: usize,
    strategy: Strategy,
    seed: u64,
) -> Result<ScorerParams, ScorerError> {
    if d == 0 || h == 0 {
        return Err(ScorerError::BadDims { d, h });
    }
    let layout = Layout::new(d, h, strategy);
    let mut values = vec![0.0; layout.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let trunk_bound = (6.0 / (d + h) as f64).sqrt();
    for w in &mut values[..h * d] {
        *w = rng.random_range(-trunk_bound..trunk_bound);
    }
    let width = strategy.head_width();
    let head_bound = (6.0 / (h + width) as f64).sqrt();
    for k in 0..layout.heads {
        let start = layout.head_offset(k);
        for w in &mut values[start..start + width * h] {
            *w = rng.random_range(-head_bound..head_bound);
        }
        if strategy.is_gaussian() {
            values[layout.head_bias_offset(k) + 1] = variance_bias_for(1.0);
        }
    }
    Ok(ScorerParams {
        strategy,
        d,
        h,
        seed,
        values,
    })
}

/// Per-aspect output of the scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectPrediction {
    /// Predicted score. For `dicl` this is the expected rubric ordinal (0..=4).
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_probs: Option<[f64; 5]>,
}

impl AspectPrediction {
    pub fn sigma(&self) -> Option<f64> {
        self.variance.map(f64::sqrt)
    }

    /// Most probable rubric level, for classifier outputs.
    pub fn predicted_level(&self) -> Option<RubricLevel> {
        let probs = self.class_probs?;
        let mut best = 0;
        for (c, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = c;
            }
        }
        RubricLevel::from_ordinal(best)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub aspects: BTreeMap<Aspect, AspectPrediction>,
}

impl PredictionSet {
    pub fn get(&self, aspect: Aspect) -> Option<&AspectPrediction> {
        self.aspects.get(&aspect)
    }
}

/// Hidden activations and raw head outputs of one forward pass.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub hidden: Vec<f64>,
    pub outputs: Vec<Vec<f64>>,
}

impl ScorerParams {
    pub fn layout(&self) -> Layout {
        Layout::new(self.d, self.h, self.strategy)
    }

    fn check_dim(&self, features: &[f64]) -> Result<(), ScorerError> {
        if features.len() != self.d {
            return Err(ScorerError::DimMismatch {
                expected: self.d,
                found: features.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn forward_raw(&self, x: &[f64]) -> Result<ForwardCache, ScorerError> {
        self.check_dim(x)?;
        let layout = self.layout();
        let (d, h, width) = (self.d, self.h, layout.width);
        let v = &self.values;
        let bias = layout.trunk_bias_offset();
        let hidden: Vec<f64> = (0..h)
            .map(|j| {
                let row = &v[j * d..(j + 1) * d];
                let pre = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + v[bias + j];
                pre.tanh()
            })
            .collect();
        let outputs = (0..layout.heads)
            .map(|k| {
                let w0 = layout.head_offset(k);
                let b0 = layout.head_bias_offset(k);
                (0..width)
                    .map(|o| {
                        let row = &v[w0 + o * h..w0 + (o + 1) * h];
                        row.iter().zip(&hidden).map(|(w, a)| w * a).sum::<f64>() + v[b0 + o]
                    })
                    .collect()
            })
            .collect();
        Ok(ForwardCache { hidden, outputs })
    }

    /// Accumulates the parameter gradient given gradients w.r.t. raw head
    /// outputs (`grad_outputs[k][o]`).
    pub(crate) fn backward(
        &self,
        x: &[f64],
        cache: &ForwardCache,
        grad_outputs: &[Vec<f64>],
        grad: &mut [f64],
    ) {
        let layout = self.layout();
        let (d, h, width) = (self.d, self.h, layout.width);
        let v = &self.values;
        let mut grad_hidden = vec![0.0; h];
        for (k, g_out) in grad_outputs.iter().enumerate() {
            let w0 = layout.head_offset(k);
            let b0 = layout.head_bias_offset(k);
            for o in 0..width {
                let g = g_out[o];
                if g == 0.0 {
                    continue;
                }
                for j in 0..h {
                    grad[w0 + o * h + j] += g * cache.hidden[j];
                    grad_hidden[j] += g * v[w0 + o * h + j];
                }
                grad[b0 + o] += g;
            }
        }
        let bias = layout.trunk_bias_offset();
        for j in 0..h {
            let g_pre = grad_hidden[j] * (1.0 - cache.hidden[j] * cache.hidden[j]);
            if g_pre == 0.0 {
                continue;
            }
            for i in 0..d {
                grad[j * d + i] += g_pre * x[i];
            }
            grad[bias + j] += g_pre;
        }
    }

    pub(crate) fn decode(&self, cache: &ForwardCache) -> PredictionSet {
        let aspects = self
            .strategy
            .aspects()
            .into_iter()
            .zip(&cache.outputs)
            .map(|(aspect, out)| {
                let pred = match self.strategy {
                    Strategy::DiCl(_) => {
                        let p = softmax(out);
                        let probs: [f64; 5] = [p[0], p[1], p[2], p[3], p[4]];
                        AspectPrediction {
                            mean: probs.iter().enumerate().map(|(c, p)| c as f64 * p).sum(),
                            variance: None,
                            class_probs: Some(probs),
                        }
                    }
                    Strategy::SrrM(_) | Strategy::MrrM => AspectPrediction {
                        mean: MEAN_OFFSET + out[0],
                        variance: None,
                        class_probs: None,
                    },
                    Strategy::MrrG | Strategy::MrrGc => AspectPrediction {
                        mean: MEAN_OFFSET + out[0],
                        variance: Some(softplus(out[1]) + VARIANCE_FLOOR),
                        class_probs: None,
                    },
                };
                (aspect, pred)
            })
            .collect();
        PredictionSet { aspects }
    }

    /// Serializes to the checkpoint layout:
    ///
    /// ```text
    /// offset  0 : b"RSCK"
    /// offset  4 : version u32 LE (1)
    /// offset  8 : strategy code u8 (0 dicl, 1 srr_m, 2 mrr_m, 3 mrr_g, 4 mrr_gc)
    /// offset  9 : aspect code u8 (0 accuracy, 1 fluency, 2 prosody, 255 all)
    /// offset 10 : 6 zero bytes
    /// offset 16 : d u64 LE
    /// offset 24 : h u64 LE
    /// offset 32 : seed u64 LE
    /// offset 40 : parameter count u64 LE
    /// offset 48 : parameters, f64 LE, flat layout order
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CHECKPOINT_HEADER_LEN + self.values.len() * 8);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.strategy.kind().code());
        out.push(self.strategy.single_aspect().map_or(255, |a| a.index() as u8));
        out.extend_from_slice(&[0u8; 6]);
        for n in [self.d as u64, self.h as u64, self.seed, self.values.len() as u64] {
            out.extend_from_slice(&n.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ScorerParams, ScorerError> {
        let bad = |m: &str| ScorerError::Checkpoint(m.to_string());
        if bytes.len() < CHECKPOINT_HEADER_LEN || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing RSCK header"));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(ScorerError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let kind = StrategyKind::from_code(bytes[8]).ok_or_else(|| bad("unknown strategy code"))?;
        let aspect = match bytes[9] {
            255 => None,
            c => Some(Aspect::from_index(c as usize).ok_or_else(|| bad("unknown aspect code"))?),
        };
        let strategy = Strategy::new(kind, aspect).map_err(ScorerError::Checkpoint)?;
        let (d, h, seed, n) = (
            u64_at(16) as usize,
            u64_at(24) as usize,
            u64_at(32),
            u64_at(40) as usize,
        );
        if d == 0 || h == 0 {
            return Err(ScorerError::BadDims { d, h });
        }
        let layout = Layout::new(d, h, strategy);
        if n != layout.len() || bytes.len() != CHECKPOINT_HEADER_LEN + 8 * n {
            return Err(bad("parameter count does not match header dimensions"));
        }
        let values: Vec<f64> = bytes[CHECKPOINT_HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        Ok(ScorerParams {
            strategy,
            d,
            h,
            seed,
            values,
        })
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<(), ScorerError> {
        fs::write(path, self.to_bytes()).map_err(|source| ScorerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read_checkpoint(path: &Path) -> Result<ScorerParams, ScorerError> {
        let bytes = fs::read(path).map_err(|source| ScorerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        ScorerParams::from_bytes(&bytes)
    }
}

pub fn forward(params: &ScorerParams, features: &[f64]) -> Result<PredictionSet, ScorerError> {
    let cache = params.forward_raw(features)?;
    Ok(params.decode(&cache))
}

pub fn forward_batch<F: AsRef<[f64]>>(
    params: &ScorerParams,
    features: &[F],
) -> Result<Vec<PredictionSet>, ScorerError> {
    features.iter().map(|x| forward(params, x.as_ref())).collect()
}
