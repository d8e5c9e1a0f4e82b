//! Evaluation protocol: dataset splits, repeated seeded runs, baselines,
//! line-detection and tuning metrics, and report output.

mod render;

pub use render::render_trace;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::{self, apply_threshold, CalibrateError, ThresholdSet, Verdict};
use crate::detector::{
    self, Detection, DetectorError, ModelDetector, ModelKind, ModelSpec, NoisyOracle, OracleDetector,
    PatchDetector, NOISY_REFERENCE_THRESHOLD,
};
use crate::diagram::{
    extract_patches, region_at, Category, ChargeLabel, DatasetProfile, DiagramError, PatchSample,
    StabilityDiagram,
};
use crate::exec::{map_indexed, Execution};
use crate::explorer::{tune, ExplorerOptions, FailureReason, TuningOutcome, TuningPriors};
use crate::geometry::Point;
use crate::rng::{child_rng, derive};

const TAG_SPLIT: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_EPISODE: u64 = 3;
const TAG_SAMPLING: u64 = 4;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cross-validation needs at least 2 diagrams, got {0}")]
    TooFewDiagrams(usize),
    #[error("pooled split needs at least 10 patches, got {0}")]
    TooFewPatches(usize),
    #[error("no detections to score")]
    Empty,
    #[error("cannot render an empty trace")]
    EmptyTrace,
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("fold {fold}, seed {seed}: {source}")]
    Training {
        fold: usize,
        seed: usize,
        #[source]
        source: DetectorError,
    },
    #[error("fold {fold}, seed {seed}: {source}")]
    Calibration {
        fold: usize,
        seed: usize,
        #[source]
        source: CalibrateError,
    },
    #[error(transparent)]
    Diagram(#[from] DiagramError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

/// Train / validation / test patches with the diagrams used for tuning.
#[derive(Clone, Debug)]
pub struct Fold {
    pub test_diagrams: Vec<usize>,
    pub train: Vec<PatchSample>,
    pub val: Vec<PatchSample>,
    pub test: Vec<PatchSample>,
}

/// Leave-one-diagram-out folds; the remaining patches are shuffled and split
/// 90 % train, 10 % validation.
pub fn split_cross_validation(
    diagrams: &[StabilityDiagram],
    profile: &DatasetProfile,
    seed: u64,
) -> Result<Vec<Fold>, HarnessError> {
    if diagrams.len() < 2 {
        return Err(HarnessError::TooFewDiagrams(diagrams.len()));
    }
    let patches = diagrams
        .iter()
        .map(|d| extract_patches(d, profile))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(cross_validation_from(&patches, seed))
}

fn cross_validation_from(patches: &[Vec<PatchSample>], seed: u64) -> Vec<Fold> {
    (0..patches.len()).map(|k| cross_validation_fold(patches, k, seed)).collect()
}

fn cross_validation_fold(patches: &[Vec<PatchSample>], k: usize, seed: u64) -> Fold {
    let mut rest: Vec<PatchSample> = patches
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != k)
        .flat_map(|(_, p)| p.iter().cloned())
        .collect();
    rest.shuffle(&mut child_rng(seed, &[TAG_SPLIT, k as u64]));
    let n_val = ((rest.len() as f64 * 0.1).round() as usize).clamp(1, rest.len().saturating_sub(1).max(1));
    let val = rest.split_off(rest.len() - n_val);
    Fold {
        test_diagrams: vec![k],
        train: rest,
        val,
        test: patches[k].clone(),
    }
}

/// One fold holding a 70 / 10 / 20 random partition of all patches; every
/// diagram is used for tuning.
pub fn split_pooled(
    diagrams: &[StabilityDiagram],
    profile: &DatasetProfile,
    seed: u64,
) -> Result<Fold, HarnessError> {
    let patches = diagrams
        .iter()
        .map(|d| extract_patches(d, profile))
        .collect::<Result<Vec<_>, _>>()?;
    pooled_from(patches.into_iter().flatten().collect(), diagrams.len(), seed)
}

/// Shuffled 90 % train, 10 % validation split of a patch list.
pub fn split_train_val(
    mut patches: Vec<PatchSample>,
    seed: u64,
) -> Result<(Vec<PatchSample>, Vec<PatchSample>), HarnessError> {
    if patches.len() < 10 {
        return Err(HarnessError::TooFewPatches(patches.len()));
    }
    patches.shuffle(&mut child_rng(seed, &[TAG_SPLIT, u64::MAX - 1]));
    let n_val = (patches.len() as f64 * 0.1).round() as usize;
    let val = patches.split_off(patches.len() - n_val);
    Ok((patches, val))
}

/// Pooled 70 / 10 / 20 partition of an explicit patch list.
pub fn split_pooled_patches(patches: Vec<PatchSample>, seed: u64) -> Result<Fold, HarnessError> {
    pooled_from(patches, 0, seed)
}

fn pooled_from(mut all: Vec<PatchSample>, n_diagrams: usize, seed: u64) -> Result<Fold, HarnessError> {
    if all.len() < 10 {
        return Err(HarnessError::TooFewPatches(all.len()));
    }
    all.shuffle(&mut child_rng(seed, &[TAG_SPLIT, u64::MAX]));
    let n = all.len();
    let n_train = (n as f64 * 0.7).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let test = all.split_off(n_train + n_val);
    let val = all.split_off(n_train);
    Ok(Fold {
        test_diagrams: (0..n_diagrams).collect(),
        train: all,
        val,
        test,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LineMetrics {
    pub total: usize,
    pub errors: usize,
    pub unknowns: usize,
    pub accuracy: f64,
    /// Accuracy over confident verdicts; 1 when none is confident.
    pub accuracy_above_threshold: f64,
    /// Fraction of errors turned into unknowns; 1 when there are no errors.
    pub error_reduction_using_threshold: f64,
    pub error_reduction_undefined: bool,
    pub rate_below_threshold: f64,
}

pub fn compute_line_metrics(
    items: &[(Detection, Category)],
    thresholds: &ThresholdSet,
) -> Result<LineMetrics, HarnessError> {
    if items.is_empty() {
        return Err(HarnessError::Empty);
    }
    let total = items.len();
    let (mut errors, mut errors_above, mut unknowns, mut correct_above) = (0, 0, 0, 0);
    for (det, truth) in items {
        let wrong = det.category != *truth;
        errors += wrong as usize;
        match apply_threshold(det, thresholds) {
            Verdict::Unknown => unknowns += 1,
            _ if wrong => errors_above += 1,
            _ => correct_above += 1,
        }
    }
    let confident = total - unknowns;
    Ok(LineMetrics {
        total,
        errors,
        unknowns,
        accuracy: (total - errors) as f64 / total as f64,
        accuracy_above_threshold: if confident == 0 {
            1.0
        } else {
            correct_above as f64 / confident as f64
        },
        error_reduction_using_threshold: if errors == 0 {
            1.0
        } else {
            1.0 - errors_above as f64 / errors as f64
        },
        error_reduction_undefined: errors == 0,
        rate_below_threshold: unknowns as f64 / total as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldMode {
    CrossValidation,
    Pooled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Oracle,
    Random,
    NoisyOracle {
        error_rate: f64,
        low_conf_given_error: f64,
    },
}

/// Either a model kind with the standard settings or a full spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelChoice {
    // tried first: a bare kind lacks ModelSpec's required fields
    Spec(ModelSpec),
    Kind {
        kind: ModelKind,
        #[serde(default)]
        desk_scale: bool,
    },
}

impl ModelChoice {
    pub fn spec(&self) -> ModelSpec {
        match self {
            ModelChoice::Kind { kind, desk_scale } => {
                let s = ModelSpec::full_scale(*kind);
                if *desk_scale {
                    s.desk_scale()
                } else {
                    s
                }
            }
            ModelChoice::Spec(s) => s.clone(),
        }
    }
}

fn default_seeds() -> usize {
    10
}
fn default_starts() -> usize {
    50
}
fn default_tau() -> f64 {
    calibrate::DEFAULT_TAU
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Manifest paths; relative paths are resolved by the caller.
    #[serde(default)]
    pub diagrams: Vec<PathBuf>,
    pub profile: String,
    #[serde(default)]
    pub model: Option<ModelChoice>,
    pub folds: FoldMode,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default = "default_starts")]
    pub starts_per_diagram: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_true")]
    pub uncertainty_based: bool,
    #[serde(default)]
    pub baseline: Option<Baseline>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Overrides the profile's missed-line check setting.
    #[serde(default)]
    pub use_last_line_validation: Option<bool>,
}

impl ExperimentConfig {
    pub fn new(profile: &str, folds: FoldMode) -> Self {
        Self {
            diagrams: Vec::new(),
            profile: profile.to_string(),
            model: None,
            folds,
            seeds: default_seeds(),
            starts_per_diagram: default_starts(),
            tau: default_tau(),
            uncertainty_based: true,
            baseline: None,
            master_seed: 0,
            max_steps: None,
            use_last_line_validation: None,
        }
    }

    pub fn validate(&self) -> Result<DatasetProfile, HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let Some(profile) = DatasetProfile::named(&self.profile) else {
            return bad(format!("unknown profile `{}`", self.profile));
        };
        if self.seeds == 0 || self.starts_per_diagram == 0 {
            return bad("seeds and starts_per_diagram must be at least 1".into());
        }
        if !(self.tau >= 0.0) {
            return bad("tau must be non-negative".into());
        }
        if self.baseline.is_none() && self.model.is_none() {
            return bad("either a model or a baseline is required".into());
        }
        if let Some(Baseline::NoisyOracle { error_rate, low_conf_given_error }) = self.baseline {
            if !(0.0..=1.0).contains(&error_rate) || !(0.0..=1.0).contains(&low_conf_given_error) {
                return bad("noisy oracle rates must lie in [0, 1]".into());
            }
        }
        Ok(profile)
    }

    pub fn priors(&self, profile: &DatasetProfile) -> TuningPriors {
        let mut p = TuningPriors::from_profile(profile);
        if let Some(v) = self.use_last_line_validation {
            p.use_last_line_validation = v;
        }
        if let Some(m) = self.max_steps {
            p.max_steps = m;
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub seed: usize,
    pub fold: usize,
    pub diagram_id: String,
    pub start_index: usize,
    pub start_g1: f64,
    pub start_g2: f64,
    pub final_g1: f64,
    pub final_g2: f64,
    pub region: ChargeLabel,
    pub success: bool,
    pub steps: usize,
    pub failure_reason: Option<FailureReason>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub fold: usize,
    pub seed: usize,
    pub test_diagrams: Vec<String>,
    pub thresholds: Option<ThresholdSet>,
    pub line_metrics: Option<LineMetrics>,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_steps: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// Mean ± std across seeds; each seed's value pools all of its folds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub episodes: usize,
    pub success_rate: MeanStd,
    pub mean_steps: MeanStd,
    pub accuracy: Option<MeanStd>,
    pub accuracy_above_threshold: Option<MeanStd>,
    pub error_reduction_using_threshold: Option<MeanStd>,
    pub rate_below_threshold: Option<MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub runs: Vec<RunReport>,
    pub aggregate: Aggregate,
    pub episodes: Vec<EpisodeRow>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per episode.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "seed",
            "fold",
            "diagram_id",
            "start_index",
            "start_g1",
            "start_g2",
            "final_g1",
            "final_g2",
            "region",
            "success",
            "steps",
            "failure_reason",
        ])
        .expect("in-memory write");
        for e in &self.episodes {
            let reason = match e.failure_reason {
                None => "",
                Some(FailureReason::BudgetExhausted) => "budget_exhausted",
                Some(FailureReason::NoLineFound) => "no_line_found",
                Some(FailureReason::Stuck) => "stuck",
            };
            w.write_record([
                e.seed.to_string(),
                e.fold.to_string(),
                e.diagram_id.clone(),
                e.start_index.to_string(),
                e.start_g1.to_string(),
                e.start_g2.to_string(),
                e.final_g1.to_string(),
                e.final_g2.to_string(),
                e.region.as_str().to_string(),
                e.success.to_string(),
                e.steps.to_string(),
                reason.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Recomputes the aggregate from runs and episode rows.
pub fn aggregate(runs: &[RunReport], episodes: &[EpisodeRow], seeds: usize) -> Aggregate {
    let mut success = Vec::with_capacity(seeds);
    let mut steps = Vec::with_capacity(seeds);
    for s in 0..seeds {
        let rows: Vec<&EpisodeRow> = episodes.iter().filter(|e| e.seed == s).collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        success.push(rows.iter().filter(|e| e.success).count() as f64 / n);
        steps.push(rows.iter().map(|e| e.steps as f64).sum::<f64>() / n);
    }
    let line = |f: fn(&LineMetrics) -> f64| -> Option<MeanStd> {
        let per_seed: Vec<f64> = (0..seeds)
            .filter_map(|s| {
                let vals: Vec<f64> = runs
                    .iter()
                    .filter(|r| r.seed == s)
                    .filter_map(|r| r.line_metrics.as_ref().map(f))
                    .collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        (!per_seed.is_empty()).then(|| MeanStd::of(&per_seed))
    };
    Aggregate {
        episodes: episodes.len(),
        success_rate: MeanStd::of(&success),
        mean_steps: MeanStd::of(&steps),
        accuracy: line(|m| m.accuracy),
        accuracy_above_threshold: line(|m| m.accuracy_above_threshold),
        error_reduction_using_threshold: line(|m| m.error_reduction_using_threshold),
        rate_below_threshold: line(|m| m.rate_below_threshold),
    }
}

/// Uniform start inside the diagram's voltage box.
pub fn random_start(d: &StabilityDiagram, rng: &mut impl Rng) -> Point {
    let b = d.bounds_v();
    Point::new(rng.random_range(b.min.x..=b.max.x), rng.random_range(b.min.y..=b.max.y))
}

/// What drives the explorer in one run.
pub enum DetectorChoice<'a> {
    Detector(&'a dyn PatchDetector),
    /// Score a uniformly random point, no exploration.
    Random,
}

/// Everything needed to run the episodes of one (fold, seed) pair.
pub struct EpisodeBatch<'a> {
    pub diagrams: &'a [StabilityDiagram],
    pub diagram_indices: &'a [usize],
    pub detector: DetectorChoice<'a>,
    pub thresholds: ThresholdSet,
    pub priors: TuningPriors,
    pub options: ExplorerOptions,
    pub starts_per_diagram: usize,
    pub master_seed: u64,
    pub seed: usize,
    pub fold: usize,
}

/// Runs `starts_per_diagram` episodes on each listed diagram. Each episode
/// owns a stream derived from (master seed, seed, diagram index, start index),
/// so results do not depend on execution order.
pub fn run_episodes(batch: &EpisodeBatch<'_>, exec: Execution) -> Vec<(EpisodeRow, Option<TuningOutcome>)> {
    let per = batch.starts_per_diagram;
    map_indexed(batch.diagram_indices.len() * per, exec, |k| {
        let di = batch.diagram_indices[k / per];
        let start_index = k % per;
        let d = &batch.diagrams[di];
        let mut rng = child_rng(
            batch.master_seed,
            &[TAG_EPISODE, batch.seed as u64, di as u64, start_index as u64],
        );
        let start = random_start(d, &mut rng);
        let outcome = match batch.detector {
            DetectorChoice::Detector(det) => Some(tune(
                d,
                det,
                &batch.thresholds,
                &batch.priors,
                &batch.options,
                start,
                &mut rng,
            )),
            DetectorChoice::Random => None,
        };
        let (final_v, region, success, steps, failure_reason) = match &outcome {
            Some(o) => (o.final_v, o.region, o.success, o.steps, o.failure_reason),
            None => {
                let region = region_at(d, start).unwrap_or(ChargeLabel::Unknown);
                (start, region, region == ChargeLabel::One, 0, None)
            }
        };
        let row = EpisodeRow {
            seed: batch.seed,
            fold: batch.fold,
            diagram_id: d.id.clone(),
            start_index,
            start_g1: start.x,
            start_g2: start.y,
            final_g1: final_v.x,
            final_g2: final_v.y,
            region,
            success,
            steps,
            failure_reason,
        };
        (row, outcome)
    })
}

fn detections_with_truth<'a>(
    dets: impl IntoIterator<Item = Detection>,
    samples: &'a [PatchSample],
) -> Vec<(Detection, Category)> {
    dets.into_iter().zip(samples.iter().map(|s| s.category)).collect()
}

/// Loads the configured manifests and runs the experiment.
pub fn run_experiment(cfg: &ExperimentConfig, exec: Execution) -> Result<Report, HarnessError> {
    let diagrams = cfg
        .diagrams
        .iter()
        .map(crate::diagram::load_diagram)
        .collect::<Result<Vec<_>, _>>()?;
    run_experiment_on(cfg, &diagrams, exec)
}

/// Runs the experiment on in-memory diagrams: for each seed and fold, train
/// and calibrate (unless a baseline replaces the detector), score the test
/// patches, then run the tuning episodes on the fold's test diagrams.
pub fn run_experiment_on(
    cfg: &ExperimentConfig,
    diagrams: &[StabilityDiagram],
    exec: Execution,
) -> Result<Report, HarnessError> {
    let profile = cfg.validate()?;
    if diagrams.is_empty() {
        return Err(HarnessError::Config("no diagrams".into()));
    }
    let needs_patches = matches!(cfg.baseline, None | Some(Baseline::Oracle | Baseline::NoisyOracle { .. }));
    let patches: Vec<Vec<PatchSample>> = if needs_patches {
        diagrams
            .iter()
            .map(|d| extract_patches(d, &profile))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    if cfg.folds == FoldMode::CrossValidation && diagrams.len() < 2 {
        return Err(HarnessError::TooFewDiagrams(diagrams.len()));
    }
    let n_folds = match cfg.folds {
        FoldMode::CrossValidation => diagrams.len(),
        FoldMode::Pooled => 1,
    };
    let priors = cfg.priors(&profile);
    let options = ExplorerOptions::from_profile(&profile, cfg.uncertainty_based);

    let jobs: Vec<(usize, usize)> = (0..cfg.seeds)
        .flat_map(|s| (0..n_folds).map(move |f| (s, f)))
        .collect();
    let results = map_indexed(jobs.len(), exec, |j| {
        let (seed, fold) = jobs[j];
        run_one(cfg, diagrams, &patches, &profile, &priors, &options, seed, fold, exec)
    });
    let mut runs = Vec::with_capacity(jobs.len());
    let mut episodes = Vec::new();
    for r in results {
        let (run, rows) = r?;
        runs.push(run);
        episodes.extend(rows);
    }
    let aggregate = aggregate(&runs, &episodes, cfg.seeds);
    Ok(Report {
        config: cfg.clone(),
        runs,
        aggregate,
        episodes,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    cfg: &ExperimentConfig,
    diagrams: &[StabilityDiagram],
    patches: &[Vec<PatchSample>],
    profile: &DatasetProfile,
    priors: &TuningPriors,
    options: &ExplorerOptions,
    seed: usize,
    fold: usize,
    exec: Execution,
) -> Result<(RunReport, Vec<EpisodeRow>), HarnessError> {
    let split_seed = derive(cfg.master_seed, &[TAG_SPLIT, seed as u64]);
    let test_diagrams: Vec<usize> = match cfg.folds {
        FoldMode::CrossValidation => vec![fold],
        FoldMode::Pooled => (0..diagrams.len()).collect(),
    };
    let batch = |detector, thresholds| EpisodeBatch {
        diagrams,
        diagram_indices: &test_diagrams,
        detector,
        thresholds,
        priors: priors.clone(),
        options: *options,
        starts_per_diagram: cfg.starts_per_diagram,
        master_seed: cfg.master_seed,
        seed,
        fold,
    };
    let test_patches = |split: Option<&Fold>| -> Vec<PatchSample> {
        match (split, cfg.folds) {
            (Some(f), _) => f.test.clone(),
            (None, FoldMode::CrossValidation) => patches[fold].clone(),
            (None, FoldMode::Pooled) => patches.iter().flatten().cloned().collect(),
        }
    };

    let (line_metrics, thresholds, rows) = match cfg.baseline {
        Some(Baseline::Random) => {
            let rows = run_episodes(&batch(DetectorChoice::Random, ThresholdSet::floor()), exec);
            (None, None, rows)
        }
        Some(Baseline::Oracle) => {
            let det = OracleDetector::new(profile);
            let t = ThresholdSet::floor();
            let test = test_patches(None);
            let dets = test.iter().map(|s| detector::oracle_infer(&diagrams[diagram_of(diagrams, s)], s.rect, profile));
            let m = compute_line_metrics(&detections_with_truth(dets, &test), &t)?;
            let rows = run_episodes(&batch(DetectorChoice::Detector(&det), t), exec);
            (Some(m), Some(t), rows)
        }
        Some(Baseline::NoisyOracle { error_rate, low_conf_given_error }) => {
            let det = NoisyOracle::new(profile, error_rate, low_conf_given_error);
            let t = ThresholdSet::new(NOISY_REFERENCE_THRESHOLD, NOISY_REFERENCE_THRESHOLD, cfg.tau);
            let test = test_patches(None);
            let mut rng = child_rng(cfg.master_seed, &[TAG_SAMPLING, seed as u64, fold as u64]);
            let dets: Vec<Detection> = test
                .iter()
                .map(|s| det.detect(&diagrams[diagram_of(diagrams, s)], s.rect, &mut rng))
                .collect();
            let m = compute_line_metrics(&detections_with_truth(dets, &test), &t)?;
            let rows = run_episodes(&batch(DetectorChoice::Detector(&det), t), exec);
            (Some(m), Some(t), rows)
        }
        None => {
            let choice = cfg.model.as_ref().expect("validated");
            let split = match cfg.folds {
                FoldMode::CrossValidation => cross_validation_fold(patches, fold, split_seed),
                FoldMode::Pooled => pooled_from(patches.iter().flatten().cloned().collect(), diagrams.len(), split_seed)?,
            };
            let spec = choice
                .spec()
                .with_seed(derive(cfg.master_seed, &[TAG_TRAIN, seed as u64, fold as u64]));
            let mut model = detector::train(&spec, &split.train, &split.val)
                .map_err(|source| HarnessError::Training { fold, seed, source })?;
            let sampling = (spec.kind == ModelKind::Bcnn)
                .then(|| derive(cfg.master_seed, &[TAG_SAMPLING, seed as u64, fold as u64]));
            let val_values: Vec<&[f64]> = split.val.iter().map(|s| s.values.as_slice()).collect();
            let val_dets = model.infer_batch(&val_values, sampling)?;
            let t = calibrate::calibrate(
                &detections_with_truth(val_dets, &split.val),
                cfg.tau,
                calibrate::DEFAULT_GRID_STEP,
            )
            .map_err(|source| HarnessError::Calibration { fold, seed, source })?;
            model.thresholds = Some(t);
            let test = test_patches(Some(&split));
            let test_values: Vec<&[f64]> = test.iter().map(|s| s.values.as_slice()).collect();
            let test_dets = model.infer_batch(&test_values, sampling)?;
            let m = compute_line_metrics(&detections_with_truth(test_dets, &test), &t)?;
            let det = ModelDetector::new(&model, profile.patch_size_px)?;
            let rows = run_episodes(&batch(DetectorChoice::Detector(&det), t), exec);
            (Some(m), Some(t), rows)
        }
    };
    let rows: Vec<EpisodeRow> = rows.into_iter().map(|(r, _)| r).collect();
    let n = rows.len().max(1) as f64;
    let run = RunReport {
        fold,
        seed,
        test_diagrams: test_diagrams.iter().map(|&i| diagrams[i].id.clone()).collect(),
        thresholds,
        line_metrics,
        episodes: rows.len(),
        success_rate: rows.iter().filter(|r| r.success).count() as f64 / n,
        mean_steps: rows.iter().map(|r| r.steps as f64).sum::<f64>() / n,
    };
    Ok((run, rows))
}

fn diagram_of(diagrams: &[StabilityDiagram], s: &PatchSample) -> usize {
    diagrams
        .iter()
        .position(|d| d.id == s.diagram_id)
        .expect("patch comes from a listed diagram")
}

/// Resolves relative manifest paths against `base`.
pub fn resolve_paths(cfg: &mut ExperimentConfig, base: &Path) {
    for p in cfg.diagrams.iter_mut() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}
