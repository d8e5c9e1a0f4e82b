use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qdtune::calibrate::{apply_threshold, calibrate, ThresholdSet, Verdict};
use qdtune::detector::{
    balanced_batch, bayes_confidence, heuristic_confidence, oracle_infer, Detection, NoisyOracle, PatchDetector,
    NOISY_REFERENCE_THRESHOLD,
};
use qdtune::diagram::{
    assign_category, extract_patches, load_diagram, normalize_patch, region_at, save_diagram, windows_along, Category,
    ChargeLabel, DatasetProfile, Rect,
};
use qdtune::synthgen;

fn det(cat: Category, conf: f64) -> Detection {
    let half = conf / 2.0;
    Detection {
        y: if cat == Category::Line { 0.5 + half } else { 0.5 - half },
        category: cat,
        confidence: conf,
    }
}

fn detections() -> impl Strategy<Value = Vec<(Detection, Category)>> {
    prop::collection::vec((any::<bool>(), 0.0f64..=1.0, any::<bool>()), 1..120).prop_map(|v| {
        v.into_iter()
            .map(|(line, conf, wrong)| {
                let cat = if line { Category::Line } else { Category::NoLine };
                let truth = if wrong { cat.flipped() } else { cat };
                (det(cat, conf), truth)
            })
            .collect()
    })
}

fn score(items: &[(Detection, Category)], class: Category, t: f64, tau: f64) -> f64 {
    let mine = items.iter().filter(|(d, _)| d.category == class);
    let err = mine.clone().filter(|(d, truth)| d.confidence >= t && d.category != *truth).count();
    let under = mine.filter(|(d, _)| d.confidence < t).count();
    err as f64 + tau * under as f64
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn normalized_patches_span_the_unit_interval(raw in prop::collection::vec(-1e3f64..1e3, 1..400)) {
        let out = normalize_patch(&raw).unwrap();
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        let constant = raw.iter().all(|&v| v == raw[0]);
        if constant {
            prop_assert!(out.iter().all(|&v| v == 0.0));
        } else {
            prop_assert!(out.contains(&0.0) && out.contains(&1.0));
        }
    }

    #[test]
    fn window_count_formula(extent in 1usize..500, patch in 1usize..40, stride in 1usize..30) {
        prop_assume!(extent >= patch);
        // every window start k·stride with k·stride + patch ≤ extent
        let brute = (0..).take_while(|k| k * stride + patch <= extent).count();
        prop_assert_eq!(windows_along(extent, patch, stride), brute);
    }

    #[test]
    fn growing_the_detection_square_keeps_lines(seed in 0u64..200, x in 0usize..142, y in 0usize..142) {
        let mut cfg = synthgen::make_profile("si-sg").unwrap();
        cfg.seed = seed;
        let d = synthgen::generate(&cfg).unwrap();
        let rect = Rect::new(x, y, 18);
        let mut was_line = false;
        for offset in (0..=8).rev() {
            let line = assign_category(&d, rect, offset) == Category::Line;
            prop_assert!(line || !was_line, "offset {} flipped a line back", offset);
            was_line = line;
        }
    }

    #[test]
    fn heuristic_is_symmetric(y in 0.0f64..=1.0) {
        let a = heuristic_confidence(y).unwrap();
        let b = heuristic_confidence(1.0 - y).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn bayes_is_permutation_invariant(
        samples in prop::collection::vec(0.0f64..=1.0, 2..20),
        rot in 0usize..20,
    ) {
        let mut shuffled = samples.clone();
        shuffled.rotate_left(rot % samples.len());
        shuffled.reverse();
        let a = bayes_confidence(&samples).unwrap();
        let b = bayes_confidence(&shuffled).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let all_equal = samples.iter().all(|&s| s == samples[0]);
        prop_assert_eq!(a == 1.0, all_equal);
    }

    #[test]
    fn calibration_is_a_global_minimum(items in detections(), tau in 0.0f64..1.0) {
        let t = calibrate(&items, tau, 0.001).unwrap();
        for class in [Category::Line, Category::NoLine] {
            let got = t.for_class(class);
            let mut best = (f64::INFINITY, 0.0);
            for k in 0..=1000 {
                let cand = k as f64 / 1000.0;
                let s = score(&items, class, cand, tau);
                if s < best.0 - 1e-9 {
                    best = (s, cand);
                }
            }
            prop_assert_eq!(got, best.1.max(0.5));
        }
    }

    #[test]
    fn larger_tau_never_raises_thresholds(items in detections(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let t_lo = calibrate(&items, lo, 0.001).unwrap();
        let t_hi = calibrate(&items, hi, 0.001).unwrap();
        prop_assert!(t_hi.t_line <= t_lo.t_line && t_hi.t_noline <= t_lo.t_noline);
    }

    #[test]
    fn raising_a_threshold_rejects_more(items in detections(), a in 0.5f64..=1.0, b in 0.5f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let unknown = |t: f64| {
            let set = ThresholdSet::new(t, t, 0.2);
            items.iter().filter(|(d, _)| apply_threshold(d, &set) == Verdict::Unknown).count()
        };
        prop_assert!(unknown(hi) >= unknown(lo));
    }

    #[test]
    fn full_confidence_is_never_unknown(line: bool, t_line in 0.0f64..=1.0, t_noline in 0.0f64..=1.0) {
        let cat = if line { Category::Line } else { Category::NoLine };
        let v = apply_threshold(&det(cat, 1.0), &ThresholdSet::new(t_line, t_noline, 0.2));
        prop_assert_ne!(v, Verdict::Unknown);
    }
}

#[test]
fn patch_count_and_round_trip() {
    let profile = DatasetProfile::named("si-sg").unwrap();
    let mut cfg = synthgen::make_profile("si-sg").unwrap();
    cfg.seed = 5;
    let d = synthgen::generate(&cfg).unwrap();
    let (p, s) = (profile.patch_size_px, profile.patch_size_px - profile.patch_overlap_px);
    let expected = windows_along(d.width, p, s) * windows_along(d.height, p, s);
    assert_eq!(extract_patches(&d, &profile).unwrap().len(), expected);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.json");
    save_diagram(&d, &path).unwrap();
    let back = load_diagram(&path).unwrap();
    assert_eq!(back, d);
    assert!(back.grid.iter().zip(&d.grid).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn region_lookup_is_single_valued() {
    let mut cfg = synthgen::make_profile("si-og").unwrap();
    cfg.seed = 12;
    let d = synthgen::generate(&cfg).unwrap();
    let b = d.bounds_v();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..2000 {
        let p = qdtune::geometry::Point::new(rng.random_range(b.min.x..=b.max.x), rng.random_range(b.min.y..=b.max.y));
        let first = region_at(&d, p).unwrap();
        assert_eq!(region_at(&d, p).unwrap(), first);
        let owners = d
            .regions
            .iter()
            .filter(|r| qdtune::geometry::contains_closed(&r.polygon, p))
            .map(|r| r.label)
            .collect::<std::collections::BTreeSet<_>>();
        assert!(owners.len() <= 1 || first == ChargeLabel::Unknown || owners.contains(&first));
    }
}

#[test]
fn oracle_agrees_with_labels() {
    let profile = DatasetProfile::named("si-sg").unwrap();
    let mut cfg = synthgen::make_profile("si-sg").unwrap();
    cfg.seed = 2;
    let d = synthgen::generate(&cfg).unwrap();
    for p in extract_patches(&d, &profile).unwrap() {
        let o = oracle_infer(&d, p.rect, &profile);
        assert_eq!((o.category, o.confidence), (p.category, 1.0));
    }
}

#[test]
fn noisy_oracle_flip_rate() {
    let profile = DatasetProfile::named("si-sg").unwrap();
    let mut cfg = synthgen::make_profile("si-sg").unwrap();
    cfg.seed = 3;
    let d = synthgen::generate(&cfg).unwrap();
    let patches = extract_patches(&d, &profile).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let noisy = NoisyOracle::new(&profile, 0.05, 0.8);
    let n = 10_000;
    let flips = (0..n)
        .filter(|i| {
            let p = &patches[i % patches.len()];
            noisy.detect(&d, p.rect, &mut rng).category != p.category
        })
        .count();
    let rate = flips as f64 / n as f64;
    assert!((rate - 0.05).abs() <= 0.01, "{rate}");

    let always = NoisyOracle::new(&profile, 1.0, 1.0);
    for p in &patches {
        let r = always.detect(&d, p.rect, &mut rng);
        assert_ne!(r.category, p.category);
        assert!(r.confidence < NOISY_REFERENCE_THRESHOLD);
    }
    let exact = NoisyOracle::new(&profile, 0.0, 0.8);
    for p in &patches {
        assert_eq!(exact.detect(&d, p.rect, &mut rng), oracle_infer(&d, p.rect, &profile));
    }
}

#[test]
fn batches_are_balanced_under_heavy_imbalance() {
    // 33.6 : 1
    let empties: Vec<usize> = (0..3360).collect();
    let lines: Vec<usize> = (3360..3460).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut line_count = 0;
    let draws = 200 * 128;
    for _ in 0..200 {
        line_count += balanced_batch(&lines, &empties, 128, &mut rng).iter().filter(|&&i| i >= 3360).count();
    }
    let frac = line_count as f64 / draws as f64;
    // four standard deviations of a fair coin over the draws
    assert!((frac - 0.5).abs() < 4.0 * (0.25 / draws as f64).sqrt(), "{frac}");
}

#[test]
fn calibration_examples() {
    // 10 errors at ≤ 0.6, 90 correct at ≥ 0.9
    let mut items = Vec::new();
    for i in 0..10 {
        items.push((det(Category::Line, 0.51 + i as f64 * 0.01), Category::NoLine));
    }
    for i in 0..90 {
        items.push((det(Category::Line, 0.9 + i as f64 / 900.0), Category::Line));
    }
    let fine = calibrate(&items, 0.2, 0.001).unwrap();
    assert!(fine.t_line > 0.6 && fine.t_line <= 0.9, "{}", fine.t_line);
    let coarse = calibrate(&items, 0.2, 0.01).unwrap();
    assert!((coarse.t_line - fine.t_line).abs() <= 0.01);
}
