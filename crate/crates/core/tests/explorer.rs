use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qdtune::calibrate::ThresholdSet;
use qdtune::detector::{Detection, OracleDetector, PatchDetector};
use qdtune::diagram::{Category, DatasetProfile, LineLabel, Rect, StabilityDiagram};
use qdtune::explorer::{
    tune, Episode, ExplorerOptions, FailureReason, Stage, TuningOutcome, TuningPriors, Validation,
    VALIDATION_PROBES,
};
use qdtune::geometry::Point;
use qdtune::harness::random_start;
use qdtune::synthgen::{self, line_frame, FadeConfig};

fn si_sg() -> DatasetProfile {
    DatasetProfile::named("si-sg").unwrap()
}

fn clean(seed: u64, slope: f64) -> StabilityDiagram {
    let mut cfg = synthgen::make_profile("si-sg").unwrap();
    cfg.seed = seed;
    cfg.slope_deg = slope;
    cfg.fade = FadeConfig::NONE;
    cfg.noise_std = 0.0;
    synthgen::generate(&cfg).unwrap()
}

/// 160 × 160 pixels at 1 mV with the given polylines in volts.
fn manual(lines: Vec<Vec<Point>>) -> StabilityDiagram {
    let lines = lines
        .into_iter()
        .enumerate()
        .map(|(i, polyline)| LineLabel {
            index: i as u32 + 1,
            polyline,
        })
        .collect();
    StabilityDiagram::new("manual", 160, 160, 0.001, Point::new(0.0, 0.0), vec![0.0; 160 * 160], lines, vec![])
        .unwrap()
}

fn run(
    d: &StabilityDiagram,
    det: &dyn PatchDetector,
    priors: &TuningPriors,
    start: Point,
    seed: u64,
) -> TuningOutcome {
    let options = ExplorerOptions::from_profile(&si_sg(), true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tune(d, det, &ThresholdSet::floor(), priors, &options, start, &mut rng)
}

fn starts(d: &StabilityDiagram, n: usize, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_start(d, &mut rng)).collect()
}

#[test]
fn oracle_succeeds_on_clean_diagrams() {
    let d = clean(1, 75.0);
    let oracle = OracleDetector::new(&si_sg());
    let priors = TuningPriors::from_profile(&si_sg());
    for (i, s) in starts(&d, 50, 2).into_iter().enumerate() {
        let o = run(&d, &oracle, &priors, s, i as u64);
        assert!(o.success, "start {s:?}: {:?} in region {:?}", o.failure_reason, o.region);
        assert!(o.steps <= 400, "{}", o.steps);
    }
}

#[test]
fn line_free_diagram_finds_nothing() {
    let d = manual(vec![]);
    let oracle = OracleDetector::new(&si_sg());
    let o = run(&d, &oracle, &TuningPriors::from_profile(&si_sg()), Point::new(0.08, 0.08), 0);
    assert_eq!(o.failure_reason, Some(FailureReason::NoLineFound));
    assert!(!o.success);
    assert!(o.trace.iter().all(|s| s.stage == Stage::FindFirst));
}

#[test]
fn budget_of_one_step() {
    let d = clean(3, 75.0);
    let oracle = OracleDetector::new(&si_sg());
    let mut priors = TuningPriors::from_profile(&si_sg());
    priors.max_steps = 1;
    let o = run(&d, &oracle, &priors, Point::new(0.02, 0.02), 0);
    assert_eq!(o.failure_reason, Some(FailureReason::BudgetExhausted));
    assert_eq!(o.steps, 1);
}

#[test]
fn first_line_two_patches_to_the_right() {
    let d = manual(vec![vec![Point::new(0.1, 0.0), Point::new(0.1, 0.159)]]);
    let oracle = OracleDetector::new(&si_sg());
    let start = Point::new(0.1 - 0.036, 0.08);
    let o = run(&d, &oracle, &TuningPriors::from_profile(&si_sg()), start, 0);
    let stage1: Vec<_> = o.trace.iter().filter(|s| s.stage == Stage::FindFirst).collect();
    assert!(stage1.len() <= 8, "{} stage-1 steps", stage1.len());
    let hit = stage1.last().unwrap();
    assert_eq!(hit.detection.category, Category::Line);
    let c = hit.rect.center_px();
    assert!(c.x > 64.0 && (c.y - 80.0).abs() < 1.0, "anchor at {c:?}");
}

#[test]
fn start_on_a_line_anchors_at_step_one() {
    let d = clean(4, 75.0);
    let line = &d.lines[1].polyline;
    let mid = line[line.len() / 2];
    let o = run(&d, &OracleDetector::new(&si_sg()), &TuningPriors::from_profile(&si_sg()), mid, 0);
    assert_eq!(o.trace[0].detection.category, Category::Line);
    assert_ne!(o.trace[1].stage, Stage::FindFirst);
}

fn slope_errors(slope: f64, prior_offset: f64) -> Vec<f64> {
    let oracle = OracleDetector::new(&si_sg());
    let mut priors = TuningPriors::from_profile(&si_sg());
    priors.prior_slope_deg = slope + prior_offset;
    let mut errors = Vec::new();
    for seed in 0..4 {
        let d = clean(100 + seed, slope);
        for (i, s) in starts(&d, 25, seed).into_iter().enumerate() {
            let o = run(&d, &oracle, &priors, s, i as u64);
            if o.trace.iter().any(|r| r.stage == Stage::SlopeEstimate) {
                errors.push((o.slope_estimate_deg - slope).abs());
            }
        }
    }
    errors
}

#[test]
fn slope_estimate_within_eight_degrees() {
    for slope in [45.0, 75.0, 90.0] {
        let errors = slope_errors(slope, 0.0);
        assert!(errors.len() >= 50, "{slope}: only {} episodes reached stage 2", errors.len());
        let worst = errors.iter().cloned().fold(0.0, f64::max);
        assert!(worst <= 8.0, "{slope}: worst error {worst}");
    }
}

#[test]
fn slope_estimate_corrects_a_wrong_prior() {
    for slope in [45.0, 75.0] {
        let errors = slope_errors(slope, 6.0);
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        let worst = errors.iter().cloned().fold(0.0, f64::max);
        assert!(mean < 3.0 && worst <= 8.0, "{slope}: mean {mean}, worst {worst}");
    }
}

#[test]
fn spacing_matches_the_generated_pitch() {
    let d = clean(7, 75.0);
    let oracle = OracleDetector::new(&si_sg());
    let priors = TuningPriors::from_profile(&si_sg());
    for (i, s) in starts(&d, 20, 7).into_iter().enumerate() {
        let o = run(&d, &oracle, &priors, s, i as u64);
        assert!((o.avg_spacing_v - 0.030).abs() <= 0.018, "{}", o.avg_spacing_v);
    }
}

#[test]
fn target_is_half_a_spacing_past_the_lowest_line() {
    let d = clean(8, 75.0);
    let oracle = OracleDetector::new(&si_sg());
    let priors = TuningPriors::from_profile(&si_sg());
    for (i, s) in starts(&d, 20, 8).into_iter().enumerate() {
        let o = run(&d, &oracle, &priors, s, i as u64);
        let (Some(left), None) = (o.leftmost_v, o.failure_reason) else {
            continue;
        };
        let (_, n) = line_frame(o.slope_estimate_deg);
        let want = d.bounds_v().clamp(left + n.scale(0.5 * o.avg_spacing_v));
        assert!((want - o.final_v).norm() < 1e-9, "{want:?} vs {:?}", o.final_v);
    }
}

#[test]
fn disabled_missed_line_check_never_runs() {
    let d = clean(9, 75.0);
    let oracle = OracleDetector::new(&si_sg());
    let mut priors = TuningPriors::from_profile(&si_sg());
    priors.use_last_line_validation = false;
    for (i, s) in starts(&d, 20, 9).into_iter().enumerate() {
        let o = run(&d, &oracle, &priors, s, i as u64);
        assert!(o.trace.iter().all(|r| r.stage != Stage::MissedLineCheck));
    }
}

/// Always below any threshold.
struct Hesitant;

impl PatchDetector for Hesitant {
    fn detect(&self, _d: &StabilityDiagram, _r: Rect, _rng: &mut ChaCha8Rng) -> Detection {
        Detection::new(0.55, 0.1)
    }
}

#[test]
fn hesitant_validation_uses_every_probe() {
    let d = clean(10, 75.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let profile = si_sg();
    let mut ep = Episode::new(
        &d,
        &Hesitant,
        ThresholdSet::new(0.8, 0.8, 0.2),
        TuningPriors::from_profile(&profile),
        ExplorerOptions::from_profile(&profile, true),
        Point::new(0.08, 0.08),
        &mut rng,
    );
    let v = ep.validate_line(Point::new(80.0, 80.0));
    assert_eq!(v, Validation::LowTrust(Category::Line));
    let ledger = &ep.state().step_ledger;
    assert_eq!(ledger.len(), 1 + VALIDATION_PROBES);
    assert!(ledger[1..].iter().all(|s| s.validation));
}

#[test]
fn validation_confirms_a_real_line() {
    // oracle that hesitates only at the suspect patch
    struct Shy(OracleDetector, Rect);
    impl PatchDetector for Shy {
        fn detect(&self, d: &StabilityDiagram, r: Rect, rng: &mut ChaCha8Rng) -> Detection {
            let det = self.0.detect(d, r, rng);
            if r == self.1 {
                Detection::new(if det.category == Category::Line { 0.6 } else { 0.4 }, 0.2)
            } else {
                det
            }
        }
    }
    let d = manual(vec![vec![Point::new(0.1, 0.0), Point::new(0.1, 0.159)]]);
    let profile = si_sg();
    let mut priors = TuningPriors::from_profile(&profile);
    priors.prior_slope_deg = 90.0;
    let det = Shy(OracleDetector::new(&profile), Rect::new(91, 71, 18));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ep = Episode::new(
        &d,
        &det,
        ThresholdSet::new(0.8, 0.8, 0.2),
        priors,
        ExplorerOptions::from_profile(&profile, true),
        Point::new(0.05, 0.05),
        &mut rng,
    );
    assert_eq!(ep.validate_line(Point::new(100.0, 80.0)), Validation::Confirmed);
    assert_eq!(ep.state().step_ledger.len(), 2);
}

#[test]
fn every_measurement_is_a_distinct_rect() {
    let d = clean(11, 75.0);
    let oracle = OracleDetector::new(&si_sg());
    let priors = TuningPriors::from_profile(&si_sg());
    for (i, s) in starts(&d, 20, 11).into_iter().enumerate() {
        let o = run(&d, &oracle, &priors, s, i as u64);
        let distinct: HashSet<Rect> = o.trace.iter().map(|r| r.rect).collect();
        assert_eq!(distinct.len(), o.trace.len());
        assert_eq!(o.steps, o.trace.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn border_safe_and_deterministic(
        seed in 0u64..1000,
        g1 in 0.0f64..1.0,
        g2 in 0.0f64..1.0,
        slope in -20.0f64..20.0,
        max_steps in 1usize..400,
        unc: bool,
    ) {
        let profile = DatasetProfile::named("si-og").unwrap();
        let mut cfg = synthgen::make_profile("si-og").unwrap();
        cfg.seed = seed;
        let d = synthgen::generate(&cfg).unwrap();
        let b = d.bounds_v();
        let start = Point::new(b.min.x + g1 * (b.max.x - b.min.x), b.min.y + g2 * (b.max.y - b.min.y));
        let mut priors = TuningPriors::from_profile(&profile);
        priors.prior_slope_deg += slope;
        priors.max_steps = max_steps;
        let options = ExplorerOptions::from_profile(&profile, unc);
        let noisy = qdtune::detector::NoisyOracle::new(&profile, 0.1, 0.7);
        let t = ThresholdSet::new(0.6, 0.6, 0.2);
        let a = tune(&d, &noisy, &t, &priors, &options, start, &mut ChaCha8Rng::seed_from_u64(seed));
        let b2 = tune(&d, &noisy, &t, &priors, &options, start, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(&a, &b2);
        prop_assert!(a.steps <= max_steps);
        for s in &a.trace {
            prop_assert!(d.contains_rect(s.rect), "{:?}", s.rect);
        }
        prop_assert!(d.bounds_v().contains(a.final_v));
    }
}
