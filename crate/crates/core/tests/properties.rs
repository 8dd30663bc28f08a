use cpfs3d::backbone::{canonical_order, farthest_point_sample};
use cpfs3d::config::RunConfig;
use cpfs3d::contrast::{primitive_loss_from, semantic_loss, PclDenominator};
use cpfs3d::detector::nms;
use cpfs3d::eval3d::{average_precision, iou3d, iou_center_size, Detection};
use cpfs3d::graph::Graph;
use cpfs3d::protobank::{assign_features, momentum_update, GeometricPrototypeBank};
use cpfs3d::synthdata::{catalog, generate_scene, parse_scene, scene_to_string, Box3D, Vec3};
use ndarray::Array2;
use proptest::prelude::*;

fn vec3(lo: f64, hi: f64) -> impl Strategy<Value = Vec3> {
    [lo..hi, lo..hi, lo..hi]
}

fn boxes() -> impl Strategy<Value = Box3D> {
    (vec3(-3.0, 3.0), vec3(0.05, 2.0), 0usize..3).prop_map(|(c, s, k)| Box3D::new(c, s, k, 0))
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).expect("shape"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in boxes(), b in boxes()) {
        let ab = iou3d(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, iou3d(&b, &a));
        prop_assert!((iou3d(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_translation_invariant(a in boxes(), b in boxes(), t in vec3(-5.0, 5.0)) {
        let shift = |c: Vec3| [c[0] + t[0], c[1] + t[1], c[2] + t[2]];
        let moved = iou_center_size(&shift(a.center), &a.size, &shift(b.center), &b.size);
        prop_assert!((moved - iou3d(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn ap_is_a_probability_and_perfect_detections_score_one(gts in proptest::collection::vec(boxes(), 1..6)) {
        let exact: Vec<Detection> = gts
            .iter()
            .enumerate()
            .map(|(i, b)| Detection { center: b.center, size: b.size, class_id: b.class_id, score: 1.0 - 0.01 * i as f64 })
            .collect();
        for class in 0..3 {
            match average_precision(&exact, &gts, class, 0.5) {
                Some(ap) => {
                    // Overlapping ground truths of one class can take each other's match.
                    prop_assert!((0.0..=1.0).contains(&ap));
                }
                None => prop_assert!(gts.iter().all(|b| b.class_id != class)),
            }
        }
        let lone = &gts[..1];
        prop_assert_eq!(average_precision(&exact[..1], lone, lone[0].class_id, 0.5), Some(1.0));
    }

    #[test]
    fn nms_keeps_a_score_sorted_subset(dets in proptest::collection::vec((boxes(), 0.0f64..1.0), 0..12)) {
        let dets: Vec<Detection> = dets
            .into_iter()
            .map(|(b, score)| Detection { center: b.center, size: b.size, class_id: b.class_id, score })
            .collect();
        let kept = nms(&dets, 0.25);
        prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
        prop_assert!(kept.iter().all(|k| dets.contains(k)));
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.class_id != b.class_id || iou3d(&a.to_box(), &b.to_box()) <= 0.25);
            }
        }
    }

    #[test]
    fn semantic_loss_is_nonnegative_and_task_order_free(grid in matrix(6, 3)) {
        let value = |m: &Array2<f64>| {
            let mut g = Graph::new();
            let v = g.constant(m.clone());
            let n = g.l2_normalize_rows(v);
            let l = semantic_loss(&mut g, n, 3, 2, 0.2);
            g.scalar_value(l)
        };
        let mut swapped = grid.clone();
        for r in 0..2 {
            swapped.row_mut(r).assign(&grid.row(4 + r));
            swapped.row_mut(4 + r).assign(&grid.row(r));
        }
        let l = value(&grid);
        prop_assert!(l >= 0.0);
        prop_assert!((l - value(&swapped)).abs() < 1e-9);
    }

    #[test]
    fn primitive_loss_is_nonnegative(means in matrix(4, 3), protos in matrix(4, 3)) {
        for d in [PclDenominator::Feature, PclDenominator::Proto] {
            let mut g = Graph::new();
            let m = g.constant(means.clone());
            let p = g.constant(protos.clone());
            let l = primitive_loss_from(&mut g, m, p, 0.2, d).expect("four prototypes");
            prop_assert!(g.scalar_value(l) >= 0.0);
        }
    }

    #[test]
    fn assignment_picks_the_most_similar_prototype(
        features in matrix(10, 3),
        protos in matrix(4, 3),
        fg in proptest::collection::vec(any::<bool>(), 10),
    ) {
        let bank = GeometricPrototypeBank { prototypes: protos.clone(), gamma: 0.9, usage_count: vec![0; 4] };
        let a = assign_features(&features, &fg, &bank);
        let cos = |i: usize, w: usize| {
            let (f, g) = (features.row(i), protos.row(w));
            let den = f.dot(&f).sqrt() * g.dot(&g).sqrt();
            if den == 0.0 { 0.0 } else { f.dot(&g) / den }
        };
        for i in 0..10 {
            if fg[i] {
                let w = usize::try_from(a.labels[i]).expect("foreground is assigned");
                prop_assert!((0..4).all(|v| cos(i, v) <= cos(i, w) + 1e-12));
                prop_assert!(a.groups[w].contains(&i));
            } else {
                prop_assert_eq!(a.labels[i], -1);
            }
        }
        prop_assert_eq!(a.num_assigned(), fg.iter().filter(|&&f| f).count());
    }

    #[test]
    fn momentum_update_stays_between_old_and_mean(
        features in matrix(8, 3),
        protos in matrix(3, 3),
        gamma in 0.0f64..=1.0,
    ) {
        let mut bank = GeometricPrototypeBank { prototypes: protos.clone(), gamma, usage_count: vec![0; 3] };
        let a = assign_features(&features, &[true; 8], &bank);
        momentum_update(&mut bank, &a);
        for w in 0..3 {
            for j in 0..3 {
                let (old, mean, new) = (protos[[w, j]], a.means[[w, j]], bank.prototypes[[w, j]]);
                if a.groups[w].is_empty() {
                    prop_assert_eq!(new, old);
                } else {
                    prop_assert!(new >= old.min(mean) - 1e-12 && new <= old.max(mean) + 1e-12);
                }
            }
        }
        prop_assert_eq!(bank.usage_count.iter().sum::<u64>(), 8);
    }

    #[test]
    fn canonical_order_ignores_input_order(points in proptest::collection::vec(vec3(-1.0, 1.0), 1..40), rot in 0usize..40) {
        let mut rotated = points.clone();
        rotated.rotate_left(rot % points.len());
        prop_assert_eq!(canonical_order(&points), canonical_order(&rotated));
    }

    #[test]
    fn fps_returns_distinct_indices(points in proptest::collection::vec(vec3(-1.0, 1.0), 1..60), n in 1usize..60) {
        let n = n.min(points.len());
        let idx = farthest_point_sample(&points, n);
        prop_assert_eq!(idx.len(), n);
        prop_assert_eq!(idx[0], 0);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), n);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn scene_text_round_trip(seed in any::<u64>()) {
        let scene = generate_scene(&catalog(6, (40, 80)), (1, 3), seed).expect("scene");
        let text = scene_to_string(&scene);
        let back = parse_scene(&text, "mem").expect("parse");
        prop_assert_eq!(scene_to_string(&back), text);
        prop_assert_eq!(back.boxes.len(), scene.boxes.len());
    }

    #[test]
    fn config_text_round_trip(seed in any::<u64>(), lr in 1e-5f64..1e-1, k in 1usize..6, l1 in 0.0f64..1.0) {
        let config = RunConfig { seed, lr, k_shot: k, lambda1: l1, ..RunConfig::desk() };
        let back = RunConfig::from_text(&config.to_text()).expect("parse");
        prop_assert_eq!(back.hash(), config.hash());
        prop_assert_eq!(back, config);
    }
}
