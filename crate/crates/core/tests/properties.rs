use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tad_core::eval::{chance_baseline, score_raw, temporal_miou, FramePolicy};
use tad_core::geom::Quaternion;
use tad_core::motion::{classify_motion, to_local_frame, Thresholds};
use tad_core::qa::{generate_qa, RecognitionMode, SceneAnnotations, SceneContext, Target, Task};
use tad_core::segment::{filter_vehicles, partition_scene, window_starts, SegmentationParams};
use tad_core::synth::{generate_maneuver, mirror, rigid_transform, synthetic_suite, time_shift};
use tad_core::ActionLabel;

fn unit_quaternion() -> impl Strategy<Value = Quaternion> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
        .prop_map(|(w, x, y, z)| Quaternion::new(w, x, y, z).normalized())
}

fn label() -> impl Strategy<Value = ActionLabel> {
    prop::sample::select(ActionLabel::ALL.to_vec())
}

fn brute_iou(a: &[u32], b: &[u32]) -> f64 {
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let mut union: Vec<u32> = a.iter().chain(b).copied().collect();
    union.sort_unstable();
    union.dedup();
    inter as f64 / union.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn local_frame_round_trip(q in unit_quaternion(), v in prop::array::uniform3(-100.0f64..100.0)) {
        let local = to_local_frame(v, &q).unwrap();
        let back = q.rotate(local);
        for k in 0..3 {
            prop_assert!((back[k] - v[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn classifier_invariances(l in label(), seed in any::<u64>(), n in 5usize..20,
                              yaw in -3.2f64..3.2, dx in -1e3f64..1e3, dy in -1e3f64..1e3, dt in -1e5f64..1e5) {
        let thr = Thresholds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poses = generate_maneuver(l, n, &mut rng);
        prop_assert_eq!(classify_motion(&poses, &thr).unwrap(), l);
        prop_assert_eq!(classify_motion(&mirror(&poses), &thr).unwrap(), l.mirrored());
        prop_assert_eq!(classify_motion(&time_shift(&poses, dt), &thr).unwrap(), l);
        prop_assert_eq!(classify_motion(&rigid_transform(&poses, yaw, [dx, dy, 0.0]), &thr).unwrap(), l);
    }

    #[test]
    fn miou_matches_brute_force(a in prop::collection::btree_set(0u32..40, 0..40),
                                b in prop::collection::btree_set(0u32..40, 1..40)) {
        let av: Vec<u32> = a.iter().copied().collect();
        let bv: Vec<u32> = b.iter().copied().collect();
        let m = temporal_miou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert!((m - brute_iou(&av, &bv)).abs() < 1e-15);
        if !a.is_empty() {
            prop_assert_eq!(m, temporal_miou(&b, &a).unwrap());
        }
        prop_assert_eq!(m == 1.0, a == b);
    }

    #[test]
    fn window_starts_are_monotone_and_cover(n in 1usize..200, w in 1usize..50, l in 1usize..20) {
        prop_assume!(w <= n);
        let s = window_starts(n, w, l);
        prop_assert_eq!(s.len(), l);
        prop_assert!(s.windows(2).all(|p| p[0] <= p[1]));
        prop_assert_eq!(s[0], 0);
        if l > 1 {
            prop_assert_eq!(s[l - 1] + w, n);
        }
    }

    #[test]
    fn filter_is_monotone_in_range(r1 in 1.0f64..100.0, extra in 0.0f64..100.0, which in 0usize..3) {
        let bundle = &synthetic_suite()[which];
        let segs = partition_scene(bundle, &SegmentationParams::default()).unwrap();
        for seg in &segs {
            let small: BTreeSet<String> = filter_vehicles(bundle, seg, r1).into_iter().collect();
            let large: BTreeSet<String> = filter_vehicles(bundle, seg, r1 + extra).into_iter().collect();
            prop_assert!(small.is_subset(&large));
        }
    }
}

#[test]
fn scoring_is_pure() {
    let suite: Vec<_> = synthetic_suite()
        .into_iter()
        .map(|b| {
            let segs = partition_scene(&b, &SegmentationParams::default()).unwrap();
            let ann = SceneAnnotations::from_classifier(&b, &segs, &Thresholds::default()).unwrap();
            (b, ann)
        })
        .collect();
    let items = generate_qa(&suite, &SegmentationParams::default(), 2, &Task::ALL).unwrap();
    for item in &items {
        let a = score_raw(item, "Answer: B [1, 2, 3] Turn left").unwrap();
        let b = score_raw(item, "Answer: B [1, 2, 3] Turn left").unwrap();
        assert_eq!(a, b);
    }
    let r1 = chance_baseline(&items, 9, 50, FramePolicy::Interval).unwrap();
    let r2 = chance_baseline(&items, 9, 50, FramePolicy::Interval).unwrap();
    assert_eq!(r1, r2);
}

/// Correct-letter position over many seeded mc generations is uniform within 3 sigma.
#[test]
fn mc_answer_letter_is_uniform() {
    let bundle = synthetic_suite().remove(0);
    let params = SegmentationParams::default();
    let segs = partition_scene(&bundle, &params).unwrap();
    let ann = SceneAnnotations::from_classifier(&bundle, &segs, &Thresholds::default()).unwrap();
    let ctx = SceneContext::new(&bundle, &ann, params).unwrap();
    let trials = 4000u64;
    let mut counts = [0usize; 4];
    for seed in 0..trials {
        let item = tad_core::qa::generate_segment_action_qa(&ctx, (seed % 10) as usize, &Target::Ego, RecognitionMode::MultipleChoice, seed)
            .expect("ego labeled in every segment");
        let letter = item.ground_truth.as_text().unwrap().chars().next().unwrap();
        counts[(letter as u8 - b'A') as usize] += 1;
    }
    let p = 0.25;
    let mean = trials as f64 * p;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - mean).abs() <= 3.0 * sigma, "{counts:?}");
    }
}
