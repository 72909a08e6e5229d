use proptest::prelude::*;
use stripdet_core::eval::*;
use stripdet_core::geometry::RotatedBox;

fn scene() -> impl Strategy<Value = (Vec<GroundTruthRecord>, Vec<DetectionRecord>)> {
    let gt = (0..4usize, 0.0..60.0f64, 0.0..60.0f64, 2.0..20.0f64, 1.0..6.0f64, -1.5..1.5f64, any::<bool>(), 0..2usize);
    let det = (0..4usize, 0.0..60.0f64, 0.0..60.0f64, 2.0..20.0f64, 1.0..6.0f64, -1.5..1.5f64, 0.0..1.0f64, 0..2usize);
    (prop::collection::vec(gt, 0..8), prop::collection::vec(det, 0..12), prop::collection::vec((0..8usize, 0.0..1.0f64), 0..6))
        .prop_map(|(g, d, copies)| {
            let cls = |c: usize| ["car", "ship"][c].to_string();
            let gts: Vec<GroundTruthRecord> = g
                .into_iter()
                .map(|(img, x, y, w, h, t, diff, c)| GroundTruthRecord {
                    image_id: format!("im{}", img % 2),
                    class: cls(c),
                    rbox: RotatedBox::new(x, y, w, h, t).unwrap(),
                    difficult: diff && img == 0,
                })
                .collect();
            let mut dets: Vec<DetectionRecord> = d
                .into_iter()
                .map(|(img, x, y, w, h, t, s, c)| DetectionRecord {
                    image_id: format!("im{}", img % 2),
                    class: cls(c),
                    rbox: RotatedBox::new(x, y, w, h, t).unwrap(),
                    score: s,
                })
                .collect();
            // Near-copies of ground truths so that some detections are TPs.
            for (i, s) in copies {
                if let Some(g) = gts.get(i) {
                    dets.push(DetectionRecord {
                        image_id: g.image_id.clone(),
                        class: g.class.clone(),
                        rbox: RotatedBox { cx: g.rbox.cx + 0.3, ..g.rbox },
                        score: s,
                    });
                }
            }
            (gts, dets)
        })
}

fn all_aps(r: &EvalReport) -> Vec<Option<f64>> {
    r.classes.iter().map(|c| c.ap).chain(r.bins.iter().map(|b| b.ap)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ap_in_unit_interval((gts, dets) in scene()) {
        for m in [ApMetric::Voc07, ApMetric::Voc12] {
            let r = evaluate(&dets, &gts, &ArBins::default(), 0.5, m).unwrap();
            for ap in all_aps(&r).into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&ap));
            }
        }
    }

    #[test]
    fn monotone_score_transform_invariance((gts, dets) in scene()) {
        let moved: Vec<DetectionRecord> = dets
            .iter()
            .map(|d| DetectionRecord { score: (3.0 * d.score).exp() / 100.0, ..d.clone() })
            .collect();
        let a = evaluate(&dets, &gts, &ArBins::default(), 0.5, ApMetric::Voc12).unwrap();
        let b = evaluate(&moved, &gts, &ArBins::default(), 0.5, ApMetric::Voc12).unwrap();
        prop_assert_eq!(all_aps(&a), all_aps(&b));
    }

    #[test]
    fn duplicated_disjoint_images_keep_ap((gts, dets) in scene()) {
        let rename = |id: &str| format!("{id}-copy");
        let mut g2 = gts.clone();
        g2.extend(gts.iter().map(|g| GroundTruthRecord { image_id: rename(&g.image_id), ..g.clone() }));
        let mut d2 = dets.clone();
        d2.extend(dets.iter().map(|d| DetectionRecord { image_id: rename(&d.image_id), ..d.clone() }));
        let a = evaluate(&dets, &gts, &ArBins::default(), 0.5, ApMetric::Voc12).unwrap();
        let b = evaluate(&d2, &g2, &ArBins::default(), 0.5, ApMetric::Voc12).unwrap();
        for (x, y) in all_aps(&a).into_iter().zip(all_aps(&b)) {
            match (x, y) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12, "{x} vs {y}"),
                (x, y) => prop_assert_eq!(x, y),
            }
        }
    }

    #[test]
    fn perfect_detector_scores_one((gts, _) in scene()) {
        let dets: Vec<DetectionRecord> = gts
            .iter()
            .enumerate()
            .map(|(i, g)| DetectionRecord {
                image_id: g.image_id.clone(),
                class: g.class.clone(),
                rbox: g.rbox,
                score: 1.0 - i as f64 * 0.01,
            })
            .collect();
        let keep: Vec<DetectionRecord> = dets.into_iter().zip(&gts).filter(|(_, g)| !g.difficult).map(|(d, _)| d).collect();
        for m in [ApMetric::Voc07, ApMetric::Voc12] {
            let r = evaluate(&keep, &gts, &ArBins::default(), 0.5, m).unwrap();
            for ap in all_aps(&r).into_iter().flatten() {
                prop_assert_eq!(ap, 1.0);
            }
        }
    }

    #[test]
    fn matching_is_deterministic((gts, dets) in scene()) {
        let a = evaluate(&dets, &gts, &ArBins::default(), 0.5, ApMetric::Voc07).unwrap();
        let b = evaluate(&dets, &gts, &ArBins::default(), 0.5, ApMetric::Voc07).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn report_serializes_and_tabulates() {
    let g = GroundTruthRecord {
        image_id: "a".into(),
        class: "ship".into(),
        rbox: RotatedBox::new(0.0, 0.0, 10.0, 2.0, 0.0).unwrap(),
        difficult: false,
    };
    let d = DetectionRecord { image_id: "a".into(), class: "ship".into(), rbox: g.rbox, score: 0.7 };
    let r = evaluate(&[d], &[g], &ArBins::default(), 0.5, ApMetric::Voc07).unwrap();
    let json = serde_json::to_string(&r).unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    let table = format_report_table(&r);
    assert!(table.contains("ship") && table.contains("1.0000") && table.contains("[8, inf)"));
}
