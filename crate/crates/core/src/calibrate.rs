//! Per-class confidence thresholds and three-class verdicts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::Detection;
use crate::diagram::Category;

pub const DEFAULT_TAU: f64 = 0.2;
pub const DEFAULT_GRID_STEP: f64 = 0.001;
/// Calibrated thresholds never drop below this.
pub const MIN_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum CalibrateError {
    #[error("no detections to calibrate on")]
    Empty,
    #[error("invalid argument `{name}` = {value}")]
    InvalidArgument { name: &'static str, value: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub t_line: f64,
    pub t_noline: f64,
    pub tau: f64,
}

impl ThresholdSet {
    /// Thresholds are clamped into `[0.5, 1]`.
    pub fn new(t_line: f64, t_noline: f64, tau: f64) -> Self {
        Self {
            t_line: t_line.clamp(MIN_THRESHOLD, 1.0),
            t_noline: t_noline.clamp(MIN_THRESHOLD, 1.0),
            tau,
        }
    }

    /// Both thresholds at the floor.
    pub fn floor() -> Self {
        Self::new(MIN_THRESHOLD, MIN_THRESHOLD, DEFAULT_TAU)
    }

    pub fn for_class(&self, c: Category) -> f64 {
        match c {
            Category::Line => self.t_line,
            Category::NoLine => self.t_noline,
        }
    }
}

/// Thresholded verdict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Line,
    NoLine,
    Unknown,
}

impl Verdict {
    pub fn category(self) -> Option<Category> {
        match self {
            Verdict::Line => Some(Category::Line),
            Verdict::NoLine => Some(Category::NoLine),
            Verdict::Unknown => None,
        }
    }
}

impl From<Category> for Verdict {
    fn from(c: Category) -> Self {
        match c {
            Category::Line => Verdict::Line,
            Category::NoLine => Verdict::NoLine,
        }
    }
}

/// `err_above + under_total · tau`.
pub fn threshold_score(err_above: f64, under_total: f64, tau: f64) -> Result<f64, CalibrateError> {
    for (name, value) in [("err_above", err_above), ("under_total", under_total), ("tau", tau)] {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(CalibrateError::InvalidArgument { name, value });
        }
    }
    Ok(err_above + under_total * tau)
}

/// Unknown iff the confidence is below the threshold of the predicted class.
pub fn apply_threshold(det: &Detection, t: &ThresholdSet) -> Verdict {
    if det.confidence >= t.for_class(det.category) {
        det.category.into()
    } else {
        Verdict::Unknown
    }
}

/// Grid search minimizing the threshold score independently for each
/// predicted class. `Err` counts misclassified items of that class at or
/// above the candidate; `UT` counts items of that class below it. Ties go to
/// the smaller candidate; the result is clamped to at least 0.5.
pub fn calibrate(
    detections: &[(Detection, Category)],
    tau: f64,
    grid_step: f64,
) -> Result<ThresholdSet, CalibrateError> {
    if detections.is_empty() {
        return Err(CalibrateError::Empty);
    }
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(CalibrateError::InvalidArgument { name: "tau", value: tau });
    }
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(CalibrateError::InvalidArgument {
            name: "grid_step",
            value: grid_step,
        });
    }
    let best = |class: Category| {
        let mut items: Vec<(f64, bool)> = detections
            .iter()
            .filter(|(d, _)| d.category == class)
            .map(|(d, truth)| (d.confidence, d.category != *truth))
            .collect();
        items.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total_err = items.iter().filter(|i| i.1).count();
        // k / steps is exact at grid points like 0.7, k · step is not
        let per_unit = 1.0 / grid_step;
        let divides = (per_unit - per_unit.round()).abs() < 1e-9;
        let steps = if divides { per_unit.round() } else { per_unit.floor() } as usize;
        let candidate = |k: usize| {
            if divides {
                k as f64 / steps as f64
            } else {
                k as f64 * grid_step
            }
        };
        // sweep candidates upward; `below` items have confidence < t
        let (mut below, mut err_below) = (0usize, 0usize);
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=steps {
            let t = candidate(k);
            while below < items.len() && items[below].0 < t {
                err_below += items[below].1 as usize;
                below += 1;
            }
            let score = (total_err - err_below) as f64 + below as f64 * tau;
            if score < best.0 {
                best = (score, t);
            }
        }
        best.1
    };
    Ok(ThresholdSet::new(best(Category::Line), best(Category::NoLine), tau))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(cat: Category, conf: f64) -> Detection {
        Detection {
            y: match cat {
                Category::Line => 0.5 + conf / 2.0,
                Category::NoLine => 0.5 - conf / 2.0,
            },
            category: cat,
            confidence: conf,
        }
    }

    #[test]
    fn score_examples() {
        assert_eq!(threshold_score(3.0, 10.0, 0.2).unwrap(), 5.0);
        assert_eq!(threshold_score(0.0, 0.0, 0.2).unwrap(), 0.0);
        assert!(threshold_score(-1.0, 0.0, 0.2).is_err());
    }

    #[test]
    fn all_correct_clamps_to_floor() {
        let set: Vec<_> = (0..20)
            .map(|i| (det(Category::Line, i as f64 / 20.0), Category::Line))
            .collect();
        let t = calibrate(&set, DEFAULT_TAU, DEFAULT_GRID_STEP).unwrap();
        assert_eq!((t.t_line, t.t_noline), (0.5, 0.5));
        assert_eq!(calibrate(&[], 0.2, 0.001), Err(CalibrateError::Empty));
    }

    #[test]
    fn grid_points_are_exact() {
        // an error at exactly 0.7 must be excluded by the candidate 0.701
        let mut set = vec![(det(Category::Line, 0.7), Category::NoLine); 5];
        set.extend((0..50).map(|i| (det(Category::Line, 0.75 + i as f64 / 250.0), Category::Line)));
        let t = calibrate(&set, DEFAULT_TAU, DEFAULT_GRID_STEP).unwrap();
        assert_eq!(t.t_line, 0.701);
    }

    #[test]
    fn apply_boundaries() {
        let t = ThresholdSet::new(0.8, 0.8, 0.2);
        assert_eq!(apply_threshold(&det(Category::Line, 0.95), &t), Verdict::Line);
        assert_eq!(apply_threshold(&det(Category::Line, 0.7), &t), Verdict::Unknown);
        assert_eq!(apply_threshold(&det(Category::NoLine, 0.81), &t), Verdict::NoLine);
        assert_eq!(apply_threshold(&det(Category::NoLine, 0.8), &t), Verdict::NoLine);
        let top = ThresholdSet::new(1.0, 1.0, 0.2);
        assert_eq!(apply_threshold(&det(Category::NoLine, 1.0), &top), Verdict::NoLine);
    }
}
