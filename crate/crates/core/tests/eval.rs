use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sttran_core::config::Mode;
use sttran_core::data::{GroundTruthGraph, ObjectAnnotation, RelationAnnotation};
use sttran_core::eval::{gt_triplets, iou, match_triplets, nms_per_class, recall_at_k, triplet_matches, GtTriplet};
use sttran_core::features::BoundingBox;
use sttran_core::graphgen::{Triplet, TripletEnd};
use sttran_core::vocab::{PredicateRef, PredicateType};

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
    BoundingBox { x1, y1, x2, y2 }
}

fn gt(pred: usize) -> GtTriplet {
    GtTriplet {
        subject: 0,
        object: 1,
        subject_class: 0,
        object_class: 3,
        subject_box: bx(0.0, 0.0, 10.0, 10.0),
        object_box: bx(20.0, 0.0, 30.0, 10.0),
        predicate_index: pred,
    }
}

fn end(index: usize, class: usize, bbox: BoundingBox) -> TripletEnd {
    TripletEnd {
        index,
        class,
        bbox,
        score: 1.0,
        gt_index: Some(index),
    }
}

fn pred(subject_box: BoundingBox, object_box: BoundingBox, object_class: usize, predicate_index: usize) -> Triplet {
    Triplet {
        pair: 0,
        subject: end(0, 0, subject_box),
        object: end(1, object_class, object_box),
        predicate: PredicateRef {
            kind: PredicateType::Contact,
            id: predicate_index,
        },
        predicate_index,
        s_p: 1.0,
        s_rel: 1.0,
    }
}

#[test]
fn detection_match_at_partial_overlap() {
    // IoU 0.6 for the subject (shift 2.5 px), 0.7 for the object (3/17 px)
    let s = bx(2.5, 0.0, 12.5, 10.0);
    let o = bx(20.0 + 30.0 / 17.0, 0.0, 30.0 + 30.0 / 17.0, 10.0);
    assert!((iou(&s, &gt(4).subject_box) - 0.6).abs() < 1e-12);
    assert!((iou(&o, &gt(4).object_box) - 0.7).abs() < 1e-12);
    assert!(triplet_matches(&pred(s, o, 3, 4), &gt(4), Mode::SgDet));
    // just under the inclusive 0.5 boundary
    let far = bx(20.0 + 10.0 / 3.0 + 1e-6, 0.0, 30.0 + 10.0 / 3.0 + 1e-6, 10.0);
    assert!(!triplet_matches(&pred(s, far, 3, 4), &gt(4), Mode::SgDet));
}

#[test]
fn wrong_object_class_does_not_match() {
    let g = gt(2);
    for mode in Mode::ALL {
        assert!(!triplet_matches(&pred(g.subject_box, g.object_box, 1, 2), &g, mode));
        assert!(triplet_matches(&pred(g.subject_box, g.object_box, 3, 2), &g, mode));
    }
}

#[test]
fn annotation_is_consumed_once() {
    let g = gt(2);
    let p = pred(g.subject_box, g.object_box, 3, 2);
    assert_eq!(match_triplets(&[p.clone(), p], &[g], Mode::PredCls), vec![Some(0), None]);
}

#[test]
fn recall_definition_examples() {
    let g = vec![gt(1), gt(2)];
    let hit = pred(g[0].subject_box, g[0].object_box, 3, 1);
    let miss = pred(g[0].subject_box, g[0].object_box, 3, 5);
    let frames = vec![(vec![hit.clone(), miss], g.clone())];
    assert_eq!(recall_at_k(&frames, 10, Mode::PredCls), Some(0.5));
    let both = vec![(vec![hit, pred(g[1].subject_box, g[1].object_box, 3, 2)], g)];
    assert_eq!(recall_at_k(&both, 10, Mode::PredCls), Some(1.0));
    assert_eq!(recall_at_k(&[(Vec::new(), Vec::new())], 10, Mode::PredCls), None);
}

#[test]
fn frames_without_annotations_are_left_out() {
    let g = vec![gt(1)];
    let hit = pred(g[0].subject_box, g[0].object_box, 3, 1);
    let frames = vec![(vec![hit.clone()], g), (vec![hit], Vec::new())];
    assert_eq!(recall_at_k(&frames, 10, Mode::PredCls), Some(1.0));
}

#[test]
fn recall_ignores_frame_order_and_never_overcounts() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let mut frames: Vec<(Vec<Triplet>, Vec<GtTriplet>)> = (0..6)
            .map(|_| {
                let gts: Vec<GtTriplet> = (0..rng.random_range(1..4)).map(|_| gt(rng.random_range(0..4))).collect();
                let preds = (0..rng.random_range(0..8))
                    .map(|_| pred(gts[0].subject_box, gts[0].object_box, 3, rng.random_range(0..4)))
                    .collect();
                (preds, gts)
            })
            .collect();
        for (p, g) in &frames {
            assert!(match_triplets(p, g, Mode::PredCls).iter().flatten().count() <= g.len());
        }
        let r = recall_at_k(&frames, 5, Mode::PredCls).unwrap();
        frames.shuffle(&mut rng);
        // the mean is a float sum, so order may move the last bit
        assert!((recall_at_k(&frames, 5, Mode::PredCls).unwrap() - r).abs() < 1e-12);
    }
}

#[test]
fn nms_boundaries() {
    let a = bx(0.0, 0.0, 10.0, 10.0);
    let b = bx(2.5, 0.0, 12.5, 10.0);
    assert_eq!(nms_per_class(&[a, b], &[1, 1], &[0.9, 0.8], 0.4), vec![0]);
    assert_eq!(nms_per_class(&[a, b], &[1, 2], &[0.9, 0.8], 0.4), vec![0, 1]);
    // IoU exactly 0.4: 10x10 boxes offset by 30/7 px
    let c = bx(30.0 / 7.0, 0.0, 10.0 + 30.0 / 7.0, 10.0);
    let o = iou(&a, &c);
    assert!((o - 0.4).abs() < 1e-12);
    let kept = nms_per_class(&[a, c], &[1, 1], &[0.9, 0.8], o);
    assert_eq!(kept, vec![0, 1]);
}

#[test]
fn multi_label_spatial_annotations_give_one_triplet_each() {
    let g = GroundTruthGraph {
        objects: vec![
            ObjectAnnotation {
                class: 0,
                bbox: bx(0.0, 0.0, 10.0, 10.0),
            },
            ObjectAnnotation {
                class: 2,
                bbox: bx(20.0, 0.0, 30.0, 10.0),
            },
        ],
        relations: vec![RelationAnnotation {
            subject: 0,
            object: 1,
            predicates: [vec![1], vec![0, 2], vec![]],
        }],
    };
    let t = gt_triplets(&g, [3, 6, 17]);
    let idx: Vec<usize> = t.iter().map(|t| t.predicate_index).collect();
    assert_eq!(idx, vec![1, 3, 5]);
    assert_eq!(g.triplet_count(), 3);
}
