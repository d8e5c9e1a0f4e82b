//! Synthetic stability diagrams with exact ground truth.
//!
//! Transition lines are a family of nearly parallel curves. In pixel space,
//! with `d` the line direction and `n` the unit normal pointing toward more
//! electrons, a point `p = c + t·d + s·n` (with `c` the grid centre) lies on
//! line `k` when `s = offset_k − bend_k · t² / diag`. Ridges, labels and
//! charge regions are all derived from those curves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagram::{
    ChargeLabel, ChargeRegion, DiagramError, LineLabel, StabilityDiagram, DEFAULT_PATCH_SIZE,
};
use crate::geometry::{self, Aabb, Point};

/// Amplitude fraction below which a faded line is no longer labeled.
pub const FADE_LABEL_CUTOFF: f64 = 0.25;
/// Width (as a fraction of line length) of the fading transition.
const FADE_SOFTNESS: f64 = 0.03;
/// Bound on relative spacing jitter.
const JITTER_TRUNCATION: f64 = 0.4;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic configuration: {0}")]
    InvalidConfig(String),
    #[error("only {0} transition lines fit in the diagram, at least 3 are required")]
    TooFewLines(usize),
    #[error("unknown profile `{0}` (expected si-sg, gaas or si-og)")]
    UnknownProfile(String),
    #[error(transparent)]
    Diagram(#[from] DiagramError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FadeConfig {
    /// Probability that any given line fades.
    pub probability: f64,
    /// Fraction of the visible line length, from the faded end, that falls
    /// below the labeling cutoff.
    pub extent: f64,
    /// Always fade the first line.
    pub force_first: bool,
}

impl FadeConfig {
    pub const NONE: FadeConfig = FadeConfig {
        probability: 0.0,
        extent: 0.0,
        force_first: false,
    };

    fn enabled(&self) -> bool {
        self.extent > 0.0 && (self.probability > 0.0 || self.force_first)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Oscillation {
    pub amplitude: f64,
    pub period_px: f64,
    pub angle_deg: f64,
}

/// Rows randomly displaced along G1, a crude hysteresis stand-in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowShift {
    pub probability: f64,
    pub max_shift_px: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub pixel_size_v: f64,
    /// 0° = horizontal, 90° = vertical.
    pub slope_deg: f64,
    /// Mean distance between consecutive lines, measured along the normal.
    pub spacing_v: f64,
    /// Relative standard deviation of each gap.
    pub spacing_jitter: f64,
    pub line_amplitude: f64,
    pub line_width_px: f64,
    /// Bend coefficient; the sagitta over the full diagonal is about `curvature · diag / 4`.
    pub curvature: f64,
    pub fade: FadeConfig,
    pub background_osc: Oscillation,
    /// Smooth background ramp across the diagram, in current units.
    pub background_ramp: f64,
    pub noise_std: f64,
    pub empty_margin_v: f64,
    pub row_shift: Option<RowShift>,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        let min_extent = 3 * DEFAULT_PATCH_SIZE;
        if self.width < min_extent || self.height < min_extent {
            return bad("width and height must be at least 3 patch sides");
        }
        if !(self.pixel_size_v > 0.0) {
            return bad("pixel_size_v must be positive");
        }
        if !(self.spacing_v > 0.0) {
            return bad("spacing_v must be positive");
        }
        if self.empty_margin_v < 2.0 * self.spacing_v {
            return bad("empty_margin_v must be at least twice spacing_v");
        }
        if !(0.0..=1.0).contains(&self.fade.probability) || !(0.0..1.0).contains(&self.fade.extent) {
            return bad("fade probability must lie in [0, 1] and extent in [0, 1)");
        }
        if !(self.spacing_jitter >= 0.0 && self.noise_std >= 0.0 && self.line_width_px > 0.0) {
            return bad("jitter and noise must be non-negative, line width positive");
        }
        if !self.slope_deg.is_finite() || !self.curvature.is_finite() {
            return bad("slope and curvature must be finite");
        }
        if let Some(rs) = &self.row_shift {
            if !(0.0..=1.0).contains(&rs.probability) {
                return bad("row shift probability must lie in [0, 1]");
            }
        }
        Ok(())
    }

    fn spacing_px(&self) -> f64 {
        self.spacing_v / self.pixel_size_v
    }
}

/// Preset configuration mimicking one of the three device families.
pub fn make_profile(name: &str) -> Result<SynthConfig, SynthError> {
    let cfg = match name {
        "si-sg" => SynthConfig {
            name: name.into(),
            width: 160,
            height: 160,
            pixel_size_v: 0.001,
            slope_deg: 75.0,
            spacing_v: 0.030,
            spacing_jitter: 0.05,
            line_amplitude: 1.0,
            line_width_px: 1.5,
            curvature: 0.0,
            fade: FadeConfig::NONE,
            background_osc: Oscillation {
                amplitude: 0.6,
                period_px: 22.0,
                angle_deg: 30.0,
            },
            background_ramp: 0.3,
            noise_std: 0.1,
            empty_margin_v: 0.060,
            row_shift: None,
            seed: 0,
        },
        "gaas" => SynthConfig {
            name: name.into(),
            width: 100,
            height: 100,
            pixel_size_v: 0.0025,
            slope_deg: 45.0,
            spacing_v: 0.016,
            spacing_jitter: 0.15,
            line_amplitude: 1.0,
            line_width_px: 0.9,
            curvature: 0.05,
            fade: FadeConfig {
                probability: 0.3,
                extent: 0.4,
                force_first: false,
            },
            background_osc: Oscillation {
                amplitude: 0.1,
                period_px: 30.0,
                angle_deg: -20.0,
            },
            background_ramp: 0.5,
            noise_std: 0.08,
            empty_margin_v: 0.032,
            row_shift: None,
            seed: 0,
        },
        "si-og" => SynthConfig {
            name: name.into(),
            width: 120,
            height: 120,
            pixel_size_v: 0.002,
            slope_deg: -10.0,
            spacing_v: 0.030,
            spacing_jitter: 0.15,
            line_amplitude: 1.0,
            line_width_px: 1.2,
            curvature: 0.03,
            fade: FadeConfig {
                probability: 0.25,
                extent: 0.35,
                force_first: false,
            },
            background_osc: Oscillation {
                amplitude: 0.2,
                period_px: 40.0,
                angle_deg: 60.0,
            },
            background_ramp: 0.4,
            noise_std: 0.15,
            empty_margin_v: 0.060,
            row_shift: Some(RowShift {
                probability: 0.05,
                max_shift_px: 2.0,
            }),
            seed: 0,
        },
        other => return Err(SynthError::UnknownProfile(other.to_string())),
    };
    Ok(cfg)
}

/// Line direction and electron-increasing normal for a slope angle.
pub fn line_frame(slope_deg: f64) -> (Point, Point) {
    let th = slope_deg.to_radians();
    (Point::new(-th.cos(), th.sin()), Point::new(th.sin(), th.cos()))
}

struct Curve {
    offset: f64,
    bend: f64,
    /// Faded `t` interval (unlabeled), if any.
    faded: Option<(f64, f64)>,
    /// Fade envelope: (start of visible span, span length, faded end is low-t).
    envelope: Option<(f64, f64, bool)>,
    runs: Vec<(f64, f64)>,
}

struct Frame {
    center: Point,
    dir: Point,
    normal: Point,
    diag: f64,
    bounds: Aabb,
}

impl Frame {
    fn point(&self, t: f64, s: f64) -> Point {
        self.center + self.dir.scale(t) + self.normal.scale(s)
    }

    fn coords(&self, p: Point) -> (f64, f64) {
        let r = p - self.center;
        (r.dot(self.dir), r.dot(self.normal))
    }
}

impl Curve {
    fn s_at(&self, t: f64, diag: f64) -> f64 {
        self.offset - self.bend * t * t / diag
    }

    fn amplitude(&self, t: f64) -> f64 {
        match self.envelope {
            None => 1.0,
            Some((t0, span, low_end_faded)) => {
                let u = if low_end_faded {
                    (t - t0) / span
                } else {
                    (t0 + span - t) / span
                };
                let extent = self.faded_extent_fraction();
                1.0 / (1.0 + 3.0 * (-(u - extent) / FADE_SOFTNESS).exp())
            }
        }
    }

    fn faded_extent_fraction(&self) -> f64 {
        match (self.envelope, self.faded) {
            (Some((_, span, _)), Some((a, b))) => {
                // the faded interval is open-ended beyond the box; recover
                // the in-box extent from whichever end is finite
                let (t0, _, low) = self.envelope.unwrap();
                if low {
                    (b - t0) / span
                } else {
                    (t0 + span - a) / span
                }
            }
            _ => 0.0,
        }
    }
}

/// In-box `t` runs of a curve, endpoints refined by bisection.
fn in_box_runs(frame: &Frame, curve: &Curve) -> Vec<(f64, f64)> {
    let inside = |t: f64| frame.bounds.contains(frame.point(t, curve.s_at(t, frame.diag)));
    let limit = frame.diag;
    let step = 0.25;
    let n = (2.0 * limit / step).ceil() as usize;
    let refine = |mut a: f64, mut b: f64| {
        // a inside, b outside (or vice versa); return the inside end
        let a_in = inside(a);
        for _ in 0..60 {
            let m = 0.5 * (a + b);
            if inside(m) == a_in {
                a = m;
            } else {
                b = m;
            }
        }
        if a_in {
            a
        } else {
            b
        }
    };
    let mut runs = Vec::new();
    let mut start: Option<f64> = None;
    let mut prev_t = -limit;
    let mut prev_in = inside(prev_t);
    if prev_in {
        start = Some(prev_t);
    }
    for k in 1..=n {
        let t = -limit + k as f64 * step;
        let now = inside(t);
        if now && !prev_in {
            start = Some(refine(t, prev_t));
        } else if !now && prev_in {
            let end = refine(prev_t, t);
            if let Some(s) = start.take() {
                runs.push((s, end));
            }
        }
        prev_in = now;
        prev_t = t;
    }
    if let Some(s) = start {
        runs.push((s, prev_t));
    }
    runs.retain(|(a, b)| b - a > 1e-6);
    runs
}

fn sample_ts(a: f64, b: f64, curved: bool) -> Vec<f64> {
    if !curved {
        return vec![a, b];
    }
    let n = ((b - a) / 2.0).ceil().max(1.0) as usize;
    (0..=n).map(|k| a + (b - a) * k as f64 / n as f64).collect()
}

/// Generates one diagram from a configuration.
pub fn generate(cfg: &SynthConfig) -> Result<StabilityDiagram, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (dir, normal) = line_frame(cfg.slope_deg);
    let bounds = Aabb::new(
        Point::new(0.0, 0.0),
        Point::new((cfg.width - 1) as f64, (cfg.height - 1) as f64),
    );
    let frame = Frame {
        center: Point::new(bounds.max.x / 2.0, bounds.max.y / 2.0),
        dir,
        normal,
        diag: bounds.max.norm().max(1.0),
        bounds,
    };
    let corner_s: Vec<f64> = bounds.corners().iter().map(|&p| frame.coords(p).1).collect();
    let s_low = corner_s.iter().cloned().fold(f64::INFINITY, f64::min);
    let s_high = corner_s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let spacing = cfg.spacing_px();
    let margin = cfg.empty_margin_v / cfg.pixel_size_v;
    let half_t = frame.diag / 2.0;
    let max_sag = cfg.curvature.abs() * 1.5 * half_t * half_t / frame.diag;

    // line offsets
    let jitter = Normal::new(0.0, cfg.spacing_jitter.max(1e-12)).expect("valid normal");
    let mut curves: Vec<Curve> = Vec::new();
    let bend_of = |rng: &mut ChaCha8Rng| cfg.curvature * (1.0 + 0.5 * rng.random_range(-1.0..=1.0));
    let first_bend = bend_of(&mut rng);
    let mut offset = s_low + margin + rng.random_range(0.0..0.5) * spacing + first_bend.max(0.0) * half_t * half_t / frame.diag;
    let mut bend = first_bend;
    while offset - max_sag <= s_high {
        curves.push(Curve {
            offset,
            bend,
            faded: None,
            envelope: None,
            runs: Vec::new(),
        });
        let mut j: f64 = jitter.sample(&mut rng);
        if cfg.spacing_jitter == 0.0 {
            j = 0.0;
        }
        offset += spacing * (1.0 + j.clamp(-JITTER_TRUNCATION, JITTER_TRUNCATION));
        bend = bend_of(&mut rng);
    }
    for c in curves.iter_mut() {
        c.runs = in_box_runs(&frame, c);
    }
    // keep the prefix of lines that actually cross the diagram
    let visible = curves.iter().take_while(|c| !c.runs.is_empty()).count();
    curves.truncate(visible);
    if curves.len() < 3 {
        return Err(SynthError::TooFewLines(curves.len()));
    }

    // fading
    if cfg.fade.enabled() {
        for (k, c) in curves.iter_mut().enumerate() {
            let fades = (k == 0 && cfg.fade.force_first) || rng.random_bool(cfg.fade.probability);
            let low_end = rng.random_bool(0.5);
            if !fades {
                continue;
            }
            let t0 = c.runs.first().expect("non-empty").0;
            let t1 = c.runs.last().expect("non-empty").1;
            let span = t1 - t0;
            c.envelope = Some((t0, span, low_end));
            let cut = cfg.fade.extent * span;
            c.faded = Some(if low_end {
                (-2.0 * frame.diag, t0 + cut)
            } else {
                (t1 - cut, 2.0 * frame.diag)
            });
        }
    }

    // grid
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let osc_dir = {
        let a = cfg.background_osc.angle_deg.to_radians();
        Point::new(a.cos(), a.sin())
    };
    let sigma = cfg.line_width_px;
    let value_at = |p: Point| -> f64 {
        let (t, s) = frame.coords(p);
        let mut v = cfg.background_ramp * (s - s_low) / (s_high - s_low).max(1e-9);
        if cfg.background_osc.amplitude != 0.0 && cfg.background_osc.period_px > 0.0 {
            v += cfg.background_osc.amplitude
                * (std::f64::consts::TAU * p.dot(osc_dir) / cfg.background_osc.period_px + phase).sin();
        }
        for c in &curves {
            let dist = s - c.s_at(t, frame.diag);
            if dist.abs() > 6.0 * sigma {
                continue;
            }
            v += cfg.line_amplitude * c.amplitude(t) * (-dist * dist / (2.0 * sigma * sigma)).exp();
        }
        v
    };
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-300)).expect("valid normal");
    let mut grid = Vec::with_capacity(cfg.width * cfg.height);
    for j in 0..cfg.height {
        let shift = match &cfg.row_shift {
            Some(rs) if rng.random_bool(rs.probability) => {
                rng.random_range(-rs.max_shift_px..=rs.max_shift_px)
            }
            _ => 0.0,
        };
        for i in 0..cfg.width {
            let mut v = value_at(Point::new(i as f64 + shift, j as f64));
            if cfg.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            grid.push(v as f32);
        }
    }

    // labels
    let to_v = |p: Point| {
        let p = bounds.clamp(p);
        Point::new(p.x * cfg.pixel_size_v, p.y * cfg.pixel_size_v)
    };
    let mut lines = Vec::new();
    for (k, c) in curves.iter().enumerate() {
        for &(a, b) in &c.runs {
            let (a, b) = match c.faded {
                None => (a, b),
                Some((fa, fb)) => {
                    // keep the part of [a, b] outside the faded interval
                    if fb <= a || fa >= b {
                        (a, b)
                    } else if fa <= a {
                        (fb.max(a), b)
                    } else {
                        (a, fa.min(b))
                    }
                }
            };
            if b - a < 0.5 {
                continue;
            }
            let polyline = sample_ts(a, b, c.bend != 0.0)
                .into_iter()
                .map(|t| to_v(frame.point(t, c.s_at(t, frame.diag))))
                .collect();
            lines.push(LineLabel {
                index: (k + 1) as u32,
                polyline,
            });
        }
    }

    // regions: band j lies between line j and line j + 1 (band 0 below line 1)
    let big = 2.0 * frame.diag;
    let mut regions = Vec::new();
    for band in 0..=curves.len() {
        let lower = band.checked_sub(1).map(|k| &curves[k]);
        let upper = curves.get(band);
        let mut cuts = vec![-big, big];
        let mut faded = Vec::new();
        for c in [lower, upper].into_iter().flatten() {
            if let Some((a, b)) = c.faded {
                let (a, b) = (a.max(-big), b.min(big));
                cuts.push(a);
                cuts.push(b);
                faded.push((a, b));
            }
        }
        cuts.sort_by(|a, b| a.total_cmp(b));
        cuts.dedup();
        let curved = lower.is_some_and(|c| c.bend != 0.0) || upper.is_some_and(|c| c.bend != 0.0);
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b - a < 1e-9 {
                continue;
            }
            let mid = 0.5 * (a + b);
            let label = if faded.iter().any(|&(fa, fb)| mid > fa && mid < fb) {
                ChargeLabel::Unknown
            } else {
                ChargeLabel::from_electrons(band)
            };
            let ts = sample_ts(a, b, curved);
            let s_lo = |t: f64| lower.map_or(-big, |c| c.s_at(t, frame.diag));
            let s_hi = |t: f64| upper.map_or(big, |c| c.s_at(t, frame.diag));
            let mut ring: Vec<Point> = ts.iter().map(|&t| frame.point(t, s_lo(t))).collect();
            ring.extend(ts.iter().rev().map(|&t| frame.point(t, s_hi(t))));
            let clipped = geometry::clip_to_box(&ring, &bounds);
            if clipped.len() < 3 || geometry::signed_area(&clipped).abs() < 1e-6 {
                continue;
            }
            regions.push(ChargeRegion {
                label,
                polygon: clipped.into_iter().map(to_v).collect(),
            });
        }
    }

    Ok(StabilityDiagram::new(
        format!("{}-{}", cfg.name, cfg.seed),
        cfg.width,
        cfg.height,
        cfg.pixel_size_v,
        Point::new(0.0, 0.0),
        grid,
        lines,
        regions,
    )?)
}

/// Area fraction of the diagram covered by the given charge label, computed
/// from the region polygons.
pub fn label_area_fraction(d: &StabilityDiagram, label: ChargeLabel) -> f64 {
    let total: f64 = d
        .regions
        .iter()
        .filter(|r| r.label == label)
        .map(|r| geometry::signed_area(&r.polygon).abs())
        .sum();
    total / d.bounds_v().area()
}
