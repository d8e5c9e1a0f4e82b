//! Patch classifiers: ground-truth oracles and trainable networks, all
//! producing a binary verdict with a confidence score.

mod model;
pub mod nn;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::{balanced_batch, train, LogEntry, ModelKind, ModelSpec, TrainedDetector, CHECKPOINT_VERSION};
pub use nn::LayerSpec;
#[doc(hidden)]
pub use model::testing;

use crate::diagram::{assign_category, Category, DatasetProfile, Rect, StabilityDiagram};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("model output {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("bayesian confidence needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("shape mismatch: expected {expected} values, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("single-class training set")]
    SingleClass,
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("training diverged: non-finite loss at update {update}")]
    Divergence { update: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("bcnn inference requires a sampling seed")]
    MissingSamplingSeed,
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One detector verdict.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Raw output in `[0, 1]`; `y ≥ 0.5` means line.
    pub y: f64,
    pub category: Category,
    pub confidence: f64,
}

impl Detection {
    pub fn new(y: f64, confidence: f64) -> Self {
        Self {
            y,
            category: category_of(y),
            confidence,
        }
    }
}

pub fn category_of(y: f64) -> Category {
    if y >= 0.5 {
        Category::Line
    } else {
        Category::NoLine
    }
}

/// `|0.5 − y| · 2`.
pub fn heuristic_confidence(y: f64) -> Result<f64, DetectorError> {
    if !(0.0..=1.0).contains(&y) {
        return Err(DetectorError::OutOfRange(y));
    }
    Ok((0.5 - y).abs() * 2.0)
}

/// `1 − 2·std(samples)` with the population standard deviation, clamped to
/// `[0, 1]`.
pub fn bayes_confidence(samples: &[f64]) -> Result<f64, DetectorError> {
    if samples.len() < 2 {
        return Err(DetectorError::TooFewSamples(samples.len()));
    }
    if let Some(&bad) = samples.iter().find(|y| !(0.0..=1.0).contains(*y)) {
        return Err(DetectorError::OutOfRange(bad));
    }
    // shifted by the first sample so identical samples give exactly zero
    let n = samples.len() as f64;
    let shift = samples[0];
    let mean = samples.iter().map(|y| y - shift).sum::<f64>() / n;
    let var = samples
        .iter()
        .map(|y| (y - shift - mean) * (y - shift - mean))
        .sum::<f64>()
        / n;
    Ok((1.0 - 2.0 * var.sqrt()).clamp(0.0, 1.0))
}

/// Anything that can classify a patch of a diagram. Implementations must be
/// shareable across concurrent episodes; per-call randomness comes from the
/// caller's stream.
pub trait PatchDetector: Sync {
    fn detect(&self, d: &StabilityDiagram, rect: Rect, rng: &mut ChaCha8Rng) -> Detection;
}

/// Ground-truth verdict with maximal confidence.
pub fn oracle_infer(d: &StabilityDiagram, rect: Rect, profile: &DatasetProfile) -> Detection {
    oracle_detection(d, rect, profile.detection_offset_px)
}

fn oracle_detection(d: &StabilityDiagram, rect: Rect, offset: usize) -> Detection {
    let y = assign_category(d, rect, offset).as_target();
    Detection::new(y, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleDetector {
    pub detection_offset_px: usize,
}

impl OracleDetector {
    pub fn new(profile: &DatasetProfile) -> Self {
        Self {
            detection_offset_px: profile.detection_offset_px,
        }
    }
}

impl PatchDetector for OracleDetector {
    fn detect(&self, d: &StabilityDiagram, rect: Rect, _rng: &mut ChaCha8Rng) -> Detection {
        oracle_detection(d, rect, self.detection_offset_px)
    }
}

/// Confidence boundary the noisy oracle's error model is expressed against.
pub const NOISY_REFERENCE_THRESHOLD: f64 = 0.6;
/// Smallest confidence a noisy verdict can carry, keeping `y ≠ 0.5`.
const MIN_NOISY_CONFIDENCE: f64 = 1e-6;

/// Oracle with planted mistakes. A verdict is flipped with probability
/// `error_rate`; flipped verdicts get a confidence below
/// [`NOISY_REFERENCE_THRESHOLD`] with probability `low_conf_given_error`,
/// correct verdicts get one at or above it with that same probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoisyOracle {
    pub detection_offset_px: usize,
    pub error_rate: f64,
    pub low_conf_given_error: f64,
}

impl NoisyOracle {
    pub fn new(profile: &DatasetProfile, error_rate: f64, low_conf_given_error: f64) -> Self {
        Self {
            detection_offset_px: profile.detection_offset_px,
            error_rate: error_rate.clamp(0.0, 1.0),
            low_conf_given_error: low_conf_given_error.clamp(0.0, 1.0),
        }
    }
}

impl PatchDetector for NoisyOracle {
    fn detect(&self, d: &StabilityDiagram, rect: Rect, rng: &mut ChaCha8Rng) -> Detection {
        if self.error_rate == 0.0 {
            return oracle_detection(d, rect, self.detection_offset_px);
        }
        let truth = assign_category(d, rect, self.detection_offset_px);
        let wrong = rng.random_bool(self.error_rate);
        let category = if wrong { truth.flipped() } else { truth };
        let low = if wrong {
            rng.random_bool(self.low_conf_given_error)
        } else {
            !rng.random_bool(self.low_conf_given_error)
        };
        let confidence = if low {
            rng.random_range(MIN_NOISY_CONFIDENCE..NOISY_REFERENCE_THRESHOLD)
        } else {
            rng.random_range(NOISY_REFERENCE_THRESHOLD..=1.0)
        };
        let half = confidence / 2.0;
        let y = match category {
            Category::Line => 0.5 + half,
            Category::NoLine => 0.5 - half,
        };
        Detection {
            y,
            category,
            confidence,
        }
    }
}

/// Free-function form of [`NoisyOracle`].
pub fn noisy_oracle_infer(
    d: &StabilityDiagram,
    rect: Rect,
    profile: &DatasetProfile,
    error_rate: f64,
    low_conf_given_error: f64,
    rng: &mut ChaCha8Rng,
) -> Detection {
    NoisyOracle::new(profile, error_rate, low_conf_given_error).detect(d, rect, rng)
}

/// A trained network reading normalized patches from the diagram.
#[derive(Clone, Copy, Debug)]
pub struct ModelDetector<'a> {
    model: &'a TrainedDetector,
}

impl<'a> ModelDetector<'a> {
    /// Fails when the model was trained on a different patch size.
    pub fn new(model: &'a TrainedDetector, patch_size: usize) -> Result<Self, DetectorError> {
        if model.spec.patch_size != patch_size {
            return Err(DetectorError::ShapeMismatch {
                expected: model.spec.patch_size * model.spec.patch_size,
                found: patch_size * patch_size,
            });
        }
        Ok(Self { model })
    }
}

impl PatchDetector for ModelDetector<'_> {
    fn detect(&self, d: &StabilityDiagram, rect: Rect, rng: &mut ChaCha8Rng) -> Detection {
        let patch = d.patch_normalized(rect);
        let seed = (self.model.spec.kind == ModelKind::Bcnn).then(|| rng.next_u64());
        self.model
            .infer(&patch, seed)
            .expect("patch size checked at construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heuristic_examples() {
        assert_eq!(heuristic_confidence(0.5).unwrap(), 0.0);
        assert_eq!(heuristic_confidence(1.0).unwrap(), 1.0);
        assert!((heuristic_confidence(0.8).unwrap() - 0.6).abs() < 1e-12);
        assert!(heuristic_confidence(1.5).is_err());
        assert!(heuristic_confidence(f64::NAN).is_err());
    }

    #[test]
    fn bayes_examples() {
        assert_eq!(bayes_confidence(&[0.7, 0.7, 0.7]).unwrap(), 1.0);
        assert!((bayes_confidence(&[0.0, 1.0]).unwrap() - 0.0).abs() < 1e-12);
        assert!((bayes_confidence(&[0.4, 0.6]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(bayes_confidence(&[0.3]), Err(DetectorError::TooFewSamples(1))));
    }

    #[test]
    fn detection_category_follows_y() {
        assert_eq!(Detection::new(0.5, 0.0).category, Category::Line);
        assert_eq!(Detection::new(0.4999, 0.0).category, Category::NoLine);
    }
}
