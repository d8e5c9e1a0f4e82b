//! Autotuning state machine. From a start point the explorer finds a
//! transition line, estimates its slope, marches across lines to measure their
//! spacing and locate the lowest one, optionally looks for faded lines below
//! it, and finally steps into the one-electron band.
//!
//! All geometry is handled in pixel coordinates with `d` the estimated line
//! direction and `n` the unit normal pointing toward more electrons.
//! Measurements are grid-aligned patches; a patch is identified by its
//! rectangle, and repeated measurements of one rectangle are served from a
//! per-episode cache and counted once.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibrate::{apply_threshold, ThresholdSet, Verdict};
use crate::detector::{Detection, PatchDetector};
use crate::diagram::{region_at, Category, ChargeLabel, DatasetProfile, Rect, StabilityDiagram};
use crate::geometry::{Aabb, Point};
use crate::synthgen::line_frame;

pub const DEFAULT_MAX_STEPS: usize = 600;
pub const DEFAULT_EMPTY_CONFIRMATION_FACTOR: f64 = 3.0;
/// Slope sections sit this many patch sides from the anchor along the line.
pub const SLOPE_SECTION_OFFSET_PATCHES: f64 = 1.5;
/// Each slope section probes this many half-detection-widths to either side.
pub const SLOPE_SCAN_HALF_RANGE: i32 = 4;
/// Extra probes spent on each side to localize a crossing inside a section.
pub const SLOPE_RUN_EXTENSION: i32 = 3;
/// Slope estimates further than this from the prior are discarded.
pub const MAX_SLOPE_DEVIATION_DEG: f64 = 30.0;
/// Validation probes, alternating along the line, half a patch apart.
pub const VALIDATION_PROBES: usize = 6;
pub const MISSED_LINE_SECTIONS: usize = 3;
pub const MISSED_LINE_ROUNDS: usize = 4;
pub const UPWARD_CROSSINGS: usize = 4;
/// Target displacement past the lowest line, in average spacings.
pub const TARGET_SPACING_FRACTION: f64 = 0.5;
/// Consecutive cache hits after which an episode is declared stuck.
pub const STUCK_LIMIT: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningPriors {
    pub prior_distance_v: f64,
    /// 0° = horizontal, 90° = vertical.
    pub prior_slope_deg: f64,
    pub use_last_line_validation: bool,
    pub empty_confirmation_factor: f64,
    pub max_steps: usize,
}

impl TuningPriors {
    pub fn from_profile(p: &DatasetProfile) -> Self {
        Self {
            prior_distance_v: p.prior_line_distance_v,
            prior_slope_deg: p.prior_slope_deg,
            use_last_line_validation: p.use_last_line_validation,
            empty_confirmation_factor: DEFAULT_EMPTY_CONFIRMATION_FACTOR,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }
}

/// Patch geometry and the uncertainty switch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorerOptions {
    pub patch_size_px: usize,
    pub detection_offset_px: usize,
    /// When false, thresholds are ignored and every verdict is trusted.
    pub uncertainty_based: bool,
}

impl ExplorerOptions {
    pub fn from_profile(p: &DatasetProfile, uncertainty_based: bool) -> Self {
        Self {
            patch_size_px: p.patch_size_px,
            detection_offset_px: p.detection_offset_px,
            uncertainty_based,
        }
    }

    /// Side of the detection square in pixels.
    pub fn detection_width_px(&self) -> usize {
        self.patch_size_px
            .saturating_sub(2 * self.detection_offset_px)
            .max(1)
    }

    /// March stride that keeps consecutive detection squares overlapping
    /// along any direction.
    pub fn march_stride_px(&self) -> f64 {
        (self.detection_width_px() as f64 - 1.0).max(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    FindFirst,
    SlopeEstimate,
    SpacingScan,
    MissedLineCheck,
    TargetInference,
    Done,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::FindFirst => "find-first",
            Stage::SlopeEstimate => "slope-estimate",
            Stage::SpacingScan => "spacing-scan",
            Stage::MissedLineCheck => "missed-line-check",
            Stage::TargetInference => "target-inference",
            Stage::Done => "done",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    BudgetExhausted,
    NoLineFound,
    Stuck,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub rect: Rect,
    pub detection: Detection,
    pub verdict: Verdict,
    pub stage: Stage,
    /// Measured while validating a low-confidence verdict.
    pub validation: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validation {
    Confirmed,
    Refuted,
    /// No probe was confident; the suspect's raw category stands.
    LowTrust(Category),
}

/// Evolving beliefs of one episode. Coordinates are in volts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorerState {
    pub stage: Stage,
    pub line_anchors: Vec<Point>,
    pub slope_estimate_deg: f64,
    pub spacing_samples_v: Vec<f64>,
    pub leftmost_line: Option<Point>,
    pub step_ledger: Vec<StepRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningOutcome {
    pub final_v: Point,
    pub region: ChargeLabel,
    pub success: bool,
    pub steps: usize,
    pub failure_reason: Option<FailureReason>,
    pub slope_estimate_deg: f64,
    pub avg_spacing_v: f64,
    pub leftmost_v: Option<Point>,
    pub trace: Vec<StepRecord>,
}

/// Runs one full episode.
#[allow(clippy::too_many_arguments)]
pub fn tune(
    diagram: &StabilityDiagram,
    detector: &dyn PatchDetector,
    thresholds: &ThresholdSet,
    priors: &TuningPriors,
    options: &ExplorerOptions,
    start_v: Point,
    rng: &mut ChaCha8Rng,
) -> TuningOutcome {
    let mut ep = Episode::new(diagram, detector, *thresholds, priors.clone(), *options, start_v, rng);
    let result = ep.run();
    ep.finish(result)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Reading {
    Line { trusted: bool },
    NoLine,
    OutOfBounds,
}

impl Reading {
    fn is_line(self) -> bool {
        matches!(self, Reading::Line { .. })
    }

    fn is_trusted_line(self) -> bool {
        matches!(self, Reading::Line { trusted: true })
    }
}

#[derive(Clone, Copy, Debug)]
struct Crossing {
    point: Point,
    trusted: bool,
}

#[derive(Clone, Copy, Debug)]
struct Probe {
    center: Point,
    detection: Detection,
}

/// Pixel-space patch placement.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    patch: usize,
    half: f64,
    width: usize,
    height: usize,
    centers: Aabb,
}

impl Geometry {
    fn new(d: &StabilityDiagram, patch: usize) -> Self {
        let half = (patch as f64 - 1.0) / 2.0;
        Self {
            patch,
            half,
            width: d.width,
            height: d.height,
            centers: Aabb::new(
                Point::new(half, half),
                Point::new(d.width as f64 - 1.0 - half, d.height as f64 - 1.0 - half),
            ),
        }
    }

    /// Grid-aligned patch whose centre is nearest to `c`, if it fits.
    fn rect_at(&self, c: Point) -> Option<Rect> {
        let x = (c.x - self.half).round();
        let y = (c.y - self.half).round();
        if !(x.is_finite() && y.is_finite()) || x < 0.0 || y < 0.0 {
            return None;
        }
        let (x, y) = (x as usize, y as usize);
        (x + self.patch <= self.width && y + self.patch <= self.height).then(|| Rect::new(x, y, self.patch))
    }

    /// `c` itself when it fits, otherwise the nearest fitting point on the
    /// line through `c` along `along`.
    fn slide(&self, c: Point, along: Point) -> Option<Point> {
        if self.rect_at(c).is_some() {
            return Some(c);
        }
        let (lo, hi) = self.centers.line_interval(c, along)?;
        let p = c + along.scale(0.0f64.clamp(lo, hi));
        self.rect_at(p).is_some().then_some(p)
    }
}

enum Abort {
    Budget,
    Stuck,
}

type Step<T> = Result<T, Abort>;

/// One tuning episode. Stage methods may be driven individually; [`tune`]
/// runs them in order.
pub struct Episode<'a> {
    diagram: &'a StabilityDiagram,
    detector: &'a dyn PatchDetector,
    thresholds: ThresholdSet,
    priors: TuningPriors,
    options: ExplorerOptions,
    geom: Geometry,
    rng: &'a mut ChaCha8Rng,
    cache: HashMap<Rect, Detection>,
    cache_streak: usize,
    validating: bool,
    start_px: Point,
    anchor_trusted: bool,
    dir: Point,
    normal: Point,
    crossings: Vec<Crossing>,
    state: ExplorerState,
}

impl<'a> Episode<'a> {
    pub fn new(
        diagram: &'a StabilityDiagram,
        detector: &'a dyn PatchDetector,
        thresholds: ThresholdSet,
        priors: TuningPriors,
        options: ExplorerOptions,
        start_v: Point,
        rng: &'a mut ChaCha8Rng,
    ) -> Self {
        let geom = Geometry::new(diagram, options.patch_size_px);
        let start_px = geom.centers.clamp(diagram.pixel_at(start_v));
        let (dir, normal) = line_frame(priors.prior_slope_deg);
        let slope = priors.prior_slope_deg;
        Self {
            diagram,
            detector,
            thresholds,
            priors,
            options,
            geom,
            rng,
            cache: HashMap::new(),
            cache_streak: 0,
            validating: false,
            start_px,
            anchor_trusted: true,
            dir,
            normal,
            crossings: Vec::new(),
            state: ExplorerState {
                stage: Stage::FindFirst,
                line_anchors: Vec::new(),
                slope_estimate_deg: slope,
                spacing_samples_v: Vec::new(),
                leftmost_line: None,
                step_ledger: Vec::new(),
            },
        }
    }

    pub fn state(&self) -> &ExplorerState {
        &self.state
    }

    fn px_to_v(&self, p: Point) -> Point {
        self.diagram.voltage_at(p)
    }

    fn prior_spacing_px(&self) -> f64 {
        self.priors.prior_distance_v / self.diagram.pixel_size_v
    }

    fn stride(&self) -> f64 {
        self.options.march_stride_px()
    }

    fn measure(&mut self, center: Point) -> Step<Option<Probe>> {
        let Some(rect) = self.geom.rect_at(center) else {
            return Ok(None);
        };
        let center = rect.center_px();
        if let Some(&detection) = self.cache.get(&rect) {
            self.cache_streak += 1;
            if self.cache_streak > STUCK_LIMIT {
                return Err(Abort::Stuck);
            }
            return Ok(Some(Probe { center, detection }));
        }
        if self.state.step_ledger.len() >= self.priors.max_steps {
            return Err(Abort::Budget);
        }
        let detection = self.detector.detect(self.diagram, rect, self.rng);
        self.cache.insert(rect, detection);
        self.cache_streak = 0;
        self.state.step_ledger.push(StepRecord {
            rect,
            detection,
            verdict: self.verdict(&detection),
            stage: self.state.stage,
            validation: self.validating,
        });
        Ok(Some(Probe { center, detection }))
    }

    fn verdict(&self, det: &Detection) -> Verdict {
        if self.options.uncertainty_based {
            apply_threshold(det, &self.thresholds)
        } else {
            det.category.into()
        }
    }

    /// Measures at `center` and resolves low-confidence verdicts by
    /// validation along `along`.
    fn read(&mut self, center: Point, along: Point) -> Step<Reading> {
        let Some(probe) = self.measure(center)? else {
            return Ok(Reading::OutOfBounds);
        };
        Ok(match self.verdict(&probe.detection) {
            Verdict::Line => Reading::Line { trusted: true },
            Verdict::NoLine => Reading::NoLine,
            Verdict::Unknown => match self.validate_at(probe, along)? {
                Validation::Confirmed => Reading::Line { trusted: true },
                Validation::Refuted => Reading::NoLine,
                Validation::LowTrust(Category::Line) => Reading::Line { trusted: false },
                Validation::LowTrust(Category::NoLine) => Reading::NoLine,
            },
        })
    }

    /// Probes up to [`VALIDATION_PROBES`] patches along the current line
    /// direction from a suspect location; the first confident verdict decides.
    pub fn validate_line(&mut self, suspect_px: Point) -> Validation {
        let Ok(Some(probe)) = self.measure(suspect_px) else {
            return Validation::LowTrust(Category::NoLine);
        };
        let along = self.dir;
        self.validate_at(probe, along).unwrap_or(Validation::LowTrust(probe.detection.category))
    }

    fn validate_at(&mut self, suspect: Probe, along: Point) -> Step<Validation> {
        let half = self.geom.patch as f64 / 2.0;
        let was = std::mem::replace(&mut self.validating, true);
        let mut outcome = Validation::LowTrust(suspect.detection.category);
        for k in 0..VALIDATION_PROBES {
            let j = (k / 2 + 1) as f64 * if k % 2 == 0 { 1.0 } else { -1.0 };
            let p = suspect.center + along.scale(j * half);
            let probe = match self.measure(p) {
                Ok(Some(probe)) => probe,
                Ok(None) => continue,
                Err(e) => {
                    self.validating = was;
                    return Err(e);
                }
            };
            match apply_threshold(&probe.detection, &self.thresholds) {
                Verdict::Line => {
                    outcome = Validation::Confirmed;
                    break;
                }
                Verdict::NoLine => {
                    outcome = Validation::Refuted;
                    break;
                }
                Verdict::Unknown => {}
            }
        }
        self.validating = was;
        Ok(outcome)
    }

    fn run(&mut self) -> Result<Point, FailureReason> {
        let abort = |a: Abort| match a {
            Abort::Budget => FailureReason::BudgetExhausted,
            Abort::Stuck => FailureReason::Stuck,
        };
        let anchor = self
            .stage1_find_first_line()
            .map_err(abort)?
            .ok_or(FailureReason::NoLineFound)?;
        self.stage2_estimate_slope(anchor).map_err(abort)?;
        self.stage3_spacing_scan(anchor).map_err(abort)?;
        if self.priors.use_last_line_validation {
            self.stage4_missed_line_check().map_err(abort)?;
        }
        Ok(self.stage5_infer_target())
    }

    /// Probes the start, then rings at growing distance in the order right,
    /// up, left, down, one patch side apart, until a line is found. A
    /// direction is abandoned once it leaves the diagram.
    fn stage1_find_first_line(&mut self) -> Step<Option<Point>> {
        self.state.stage = Stage::FindFirst;
        let along = self.dir;
        let start = self.start_px;
        let first = self.read(start, along)?;
        if first.is_line() {
            return Ok(Some(self.record_anchor(start, first.is_trusted_line())));
        }
        let dirs = [
            Point::new(1.0, 0.0),
            Point::new(0.0, 1.0),
            Point::new(-1.0, 0.0),
            Point::new(0.0, -1.0),
        ];
        let mut open = [true; 4];
        let side = self.geom.patch as f64;
        let mut k = 1.0;
        while open.iter().any(|&o| o) {
            for (i, dv) in dirs.iter().enumerate() {
                if !open[i] {
                    continue;
                }
                let p = start + dv.scale(k * side);
                match self.read(p, along)? {
                    Reading::OutOfBounds => open[i] = false,
                    Reading::Line { trusted } => return Ok(Some(self.record_anchor(p, trusted))),
                    Reading::NoLine => {}
                }
            }
            k += 1.0;
        }
        Ok(None)
    }

    fn record_anchor(&mut self, p: Point, trusted: bool) -> Point {
        let p = self.snapped(p);
        self.anchor_trusted = trusted;
        self.state.line_anchors.push(self.px_to_v(p));
        p
    }

    /// Locates the line in two sections on either side of the anchor and
    /// takes the angle of the segment joining them; keeps the prior when
    /// either section fails or the estimate strays too far.
    fn stage2_estimate_slope(&mut self, anchor: Point) -> Step<f64> {
        self.state.stage = Stage::SlopeEstimate;
        let (d, n) = line_frame(self.priors.prior_slope_deg);
        let offset = SLOPE_SECTION_OFFSET_PATCHES * self.geom.patch as f64;
        let mut slope = self.priors.prior_slope_deg;
        // sections pulled back inside the borders; too short a baseline keeps the prior
        let Some((lo, hi)) = self.geom.centers.line_interval(anchor, d) else {
            return Ok(slope);
        };
        let (ta, tb) = (offset.min(hi), (-offset).max(lo));
        if ta - tb < self.geom.patch as f64 {
            return Ok(slope);
        }
        let a = self.locate_in_section(anchor + d.scale(ta), n, d)?;
        let b = match a {
            Some(_) => self.locate_in_section(anchor + d.scale(tb), n, d)?,
            None => None,
        };
        if let (Some(a), Some(b)) = (a, b) {
            let v = a - b;
            if v.norm() > 0.0 {
                let est = normalize_slope(v.y.atan2(-v.x).to_degrees());
                if slope_distance(est, slope) <= MAX_SLOPE_DEVIATION_DEG {
                    slope = est;
                }
            }
        }
        self.state.slope_estimate_deg = slope;
        (self.dir, self.normal) = line_frame(slope);
        Ok(slope)
    }

    /// Scans along `n` around `base` (nearest offsets first) and returns the
    /// centre of the contiguous run of trusted line verdicts.
    fn locate_in_section(&mut self, base: Point, n: Point, along: Point) -> Step<Option<Point>> {
        let step = (self.options.detection_width_px() as f64 / 2.0).max(1.0);
        let at = |k: i32| base + n.scale(k as f64 * step);
        let mut order = vec![0];
        for k in 1..=SLOPE_SCAN_HALF_RANGE {
            order.push(-k);
            order.push(k);
        }
        for k0 in order {
            if !self.read(at(k0), along)?.is_trusted_line() {
                continue;
            }
            let mut run = vec![self.snapped(at(k0))];
            for sign in [-1, 1] {
                for j in 1..=SLOPE_RUN_EXTENSION {
                    let p = at(k0 + sign * j);
                    if !self.read(p, along)?.is_trusted_line() {
                        break;
                    }
                    run.push(self.snapped(p));
                }
            }
            return Ok(Some(mean_point(&run)));
        }
        Ok(None)
    }

    fn snapped(&self, p: Point) -> Point {
        self.geom.rect_at(p).map_or(p, |r| r.center_px())
    }

    /// Marches across lines, first toward fewer electrons until the empty
    /// confirmation distance passes without a new line, then a bounded number
    /// of crossings toward more electrons.
    fn stage3_spacing_scan(&mut self, anchor: Point) -> Step<()> {
        self.state.stage = Stage::SpacingScan;
        self.crossings.push(Crossing {
            point: anchor,
            trusted: self.anchor_trusted,
        });
        self.march(anchor, -1.0, None)?;
        self.march(anchor, 1.0, Some(UPWARD_CROSSINGS))?;
        self.refresh_estimates();
        Ok(())
    }

    /// Walks from `from` along `sign · n`, recording each run of line
    /// verdicts as one crossing. Positions that leave the diagram slide along
    /// the line direction; the march ends when no sliding position fits.
    fn march(&mut self, from: Point, sign: f64, max_new: Option<usize>) -> Step<()> {
        let (d, n) = (self.dir, self.normal);
        let stride = self.stride();
        let factor = self.priors.empty_confirmation_factor;
        let mut last_line_s = n.dot(from);
        let mut run: Vec<Point> = Vec::new();
        let mut run_trusted = true;
        let mut initial = true;
        let mut found = 0usize;
        let mut k = 1.0;
        loop {
            let Some(p) = self.geom.slide(from + n.scale(sign * k * stride), d) else {
                break;
            };
            let p = self.snapped(p);
            if run.is_empty() && (n.dot(p) - last_line_s).abs() > factor * self.avg_spacing_px() {
                break;
            }
            match self.read(p, d)? {
                Reading::Line { trusted } => {
                    run.push(p);
                    run_trusted &= trusted;
                }
                Reading::NoLine | Reading::OutOfBounds => {
                    if !run.is_empty() && !initial {
                        let c = mean_point(&run);
                        last_line_s = n.dot(c);
                        self.add_crossing(c, run_trusted);
                        found += 1;
                    }
                    initial = false;
                    run.clear();
                    run_trusted = true;
                    if max_new.is_some_and(|m| found >= m) {
                        return Ok(());
                    }
                }
            }
            k += 1.0;
        }
        if !run.is_empty() && !initial {
            self.add_crossing(mean_point(&run), run_trusted);
        }
        Ok(())
    }

    fn add_crossing(&mut self, point: Point, trusted: bool) {
        self.crossings.push(Crossing { point, trusted });
        self.state.line_anchors.push(self.px_to_v(point));
        self.refresh_estimates();
    }

    /// Crossings merged per line, sorted by normal coordinate.
    fn lines(&self) -> Vec<(f64, Crossing)> {
        let n = self.normal;
        let mut all: Vec<(f64, Crossing)> = self.crossings.iter().map(|c| (n.dot(c.point), *c)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0));
        let merge = 0.5 * self.prior_spacing_px().min(self.avg_spacing_px());
        let mut out: Vec<(f64, Crossing)> = Vec::new();
        for (s, c) in all {
            match out.last_mut() {
                Some((ls, lc)) if s - *ls < merge => {
                    lc.trusted |= c.trusted;
                }
                _ => out.push((s, c)),
            }
        }
        out
    }

    fn spacing_samples_px(&self) -> Vec<f64> {
        let trusted: Vec<f64> = self
            .lines()
            .into_iter()
            .filter(|(_, c)| c.trusted)
            .map(|(s, _)| s)
            .collect();
        trusted.windows(2).map(|w| w[1] - w[0]).collect()
    }

    fn avg_spacing_px(&self) -> f64 {
        let real = spacing_samples_from(&self.crossings, self.normal, 0.5 * self.prior_spacing_px());
        average_spacing(self.prior_spacing_px(), &real)
    }

    fn leftmost(&self) -> Option<Crossing> {
        self.lines().first().map(|&(_, c)| c)
    }

    fn refresh_estimates(&mut self) {
        let ps = self.diagram.pixel_size_v;
        self.state.spacing_samples_v = self.spacing_samples_px().iter().map(|g| g * ps).collect();
        self.state.leftmost_line = self.leftmost().map(|c| self.px_to_v(c.point));
    }

    /// Probes sections along where a line below the current lowest one would
    /// be; a confident find becomes the new lowest line and the downward
    /// march resumes from it.
    fn stage4_missed_line_check(&mut self) -> Step<()> {
        for _ in 0..MISSED_LINE_ROUNDS {
            self.state.stage = Stage::MissedLineCheck;
            let Some(left) = self.leftmost() else {
                return Ok(());
            };
            let (d, n) = (self.dir, self.normal);
            let avg = self.avg_spacing_px();
            let s_left = n.dot(left.point);
            // hypothetical line one spacing below, parameterized along d
            let origin = left.point - n.scale(avg);
            let Some((lo, hi)) = self.geom.centers.line_interval(origin, d) else {
                return Ok(());
            };
            let mut found = None;
            'sections: for i in 0..MISSED_LINE_SECTIONS {
                let t = lo + (hi - lo) * (i as f64 + 0.5) / MISSED_LINE_SECTIONS as f64;
                let q = origin + d.scale(t);
                let stride = self.stride();
                let mut run: Vec<Point> = Vec::new();
                let mut delta = 0.5 * avg;
                while delta >= -0.5 * avg - 1e-9 || !run.is_empty() {
                    let p = q + n.scale(delta);
                    delta -= stride;
                    match self.read(p, d)? {
                        Reading::Line { trusted: true } => run.push(self.snapped(p)),
                        _ if !run.is_empty() => break,
                        _ => {}
                    }
                }
                if !run.is_empty() {
                    found = Some(mean_point(&run));
                    break 'sections;
                }
            }
            let Some(point) = found else {
                return Ok(());
            };
            if n.dot(point) >= s_left - 0.5 * self.prior_spacing_px().min(avg) {
                return Ok(());
            }
            self.add_crossing(point, true);
            self.state.stage = Stage::SpacingScan;
            self.march(point, -1.0, None)?;
        }
        Ok(())
    }

    /// Half an average spacing past the lowest line, toward more electrons.
    fn stage5_infer_target(&mut self) -> Point {
        self.state.stage = Stage::TargetInference;
        self.refresh_estimates();
        let left = self.leftmost().map_or(self.start_px, |c| c.point);
        let target = left + self.normal.scale(TARGET_SPACING_FRACTION * self.avg_spacing_px());
        self.diagram.bounds_px().clamp(target)
    }

    fn finish(mut self, result: Result<Point, FailureReason>) -> TuningOutcome {
        self.refresh_estimates();
        self.state.stage = Stage::Done;
        let (final_px, failure) = match result {
            Ok(p) => (p, None),
            Err(reason) => (self.start_px, Some(reason)),
        };
        let final_v = self.px_to_v(final_px);
        let region = region_at(self.diagram, final_v).unwrap_or(ChargeLabel::Unknown);
        TuningOutcome {
            final_v,
            region,
            success: failure.is_none() && region == ChargeLabel::One,
            steps: self.state.step_ledger.len(),
            failure_reason: failure,
            slope_estimate_deg: self.state.slope_estimate_deg,
            avg_spacing_v: self.avg_spacing_px() * self.diagram.pixel_size_v,
            leftmost_v: self.state.leftmost_line,
            trace: self.state.step_ledger,
        }
    }
}

fn spacing_samples_from(crossings: &[Crossing], n: Point, merge: f64) -> Vec<f64> {
    let mut s: Vec<f64> = crossings.iter().filter(|c| c.trusted).map(|c| n.dot(c.point)).collect();
    s.sort_by(|a, b| a.total_cmp(b));
    let mut lines: Vec<f64> = Vec::new();
    for v in s {
        if lines.last().is_none_or(|&l| v - l >= merge) {
            lines.push(v);
        }
    }
    lines.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Mean of the measured gaps once two exist; before that the prior counts as
/// one extra sample.
pub fn average_spacing(prior: f64, samples: &[f64]) -> f64 {
    if samples.len() >= 2 {
        samples.iter().sum::<f64>() / samples.len() as f64
    } else {
        (prior + samples.iter().sum::<f64>()) / (1 + samples.len()) as f64
    }
}

fn mean_point(ps: &[Point]) -> Point {
    let sum = ps.iter().fold(Point::new(0.0, 0.0), |a, &b| a + b);
    sum.scale(1.0 / ps.len() as f64)
}

/// Maps an angle into `(−90°, 90°]`.
pub fn normalize_slope(deg: f64) -> f64 {
    let mut a = deg % 180.0;
    if a <= -90.0 {
        a += 180.0;
    } else if a > 90.0 {
        a -= 180.0;
    }
    a
}

/// Angular distance between two undirected line slopes, in `[0°, 90°]`.
pub fn slope_distance(a: f64, b: f64) -> f64 {
    let d = normalize_slope(a - b).abs();
    d.min(180.0 - d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_helpers() {
        assert_eq!(normalize_slope(255.0), 75.0);
        assert_eq!(normalize_slope(-105.0), 75.0);
        assert_eq!(normalize_slope(90.0), 90.0);
        assert_eq!(normalize_slope(-90.0), 90.0);
        assert!((slope_distance(89.0, -89.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn spacing_average_seeding() {
        assert_eq!(average_spacing(30.0, &[]), 30.0);
        assert_eq!(average_spacing(30.0, &[20.0]), 25.0);
        assert_eq!(average_spacing(30.0, &[20.0, 22.0]), 21.0);
    }

    #[test]
    fn stride_and_width() {
        let p = DatasetProfile::named("si-sg").unwrap();
        let o = ExplorerOptions::from_profile(&p, true);
        assert_eq!(o.detection_width_px(), 6);
        assert_eq!(o.march_stride_px(), 5.0);
    }
}
