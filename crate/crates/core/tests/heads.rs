use proptest::prelude::*;
use sttran_core::config::ModelConfig;
use sttran_core::heads::{margin_loss, predicate_confidences, predicate_loss, total_loss, ObjectClassifier, PairTargets, PredicateHeads};
use sttran_core::numerics::{Graph, ParamStore, Precision, Tensor};

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn margin_loss_examples() {
    assert!((margin_loss(&[0.5, 0.2, 0.1], &[0], &[1, 2]) - 1.3).abs() < 1e-12);
    assert_eq!(margin_loss(&[1.0, 0.0, 0.0], &[0], &[1, 2]), 0.0);
    assert_eq!(margin_loss(&[0.3, 0.9, 0.1], &[0, 1, 2], &[]), 0.0);
}

#[test]
fn paper_vocabulary_head_sizes() {
    let cfg = ModelConfig::paper();
    let mut store = ParamStore::new(0, Precision::F64);
    let heads = PredicateHeads::new(&mut store, 16, cfg.predicate_sizes).unwrap();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::zeros(&[2, 16]));
    let out = heads.forward(&mut g, x).unwrap();
    let lens: Vec<usize> = out.iter().map(|&v| g.cols(v)).collect();
    assert_eq!(lens, [3, 6, 17]);
}

#[test]
fn zero_input_gives_half_confidence_for_multilabel_types() {
    let conf = predicate_confidences(&[vec![0.0; 3], vec![0.0; 6], vec![0.0; 17]]);
    assert!(conf[1].iter().chain(&conf[2]).all(|&c| c == 0.5));
    assert!(conf[0].iter().all(|&c| (c - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn raising_a_logit_raises_its_confidence() {
    let base = [vec![0.1, -0.3], vec![0.2, 0.0, -1.0], vec![0.5; 4]];
    let before = predicate_confidences(&base);
    for t in 0..3 {
        for i in 0..base[t].len() {
            let mut up = base.clone();
            up[t][i] += 0.25;
            assert!(predicate_confidences(&up)[t][i] > before[t][i]);
        }
    }
}

#[test]
fn paper_object_classifier_input_and_output_dims() {
    let cfg = ModelConfig::paper();
    assert_eq!(cfg.visual_dim + cfg.semantic_dim + cfg.pos_dim, 2376);
    let mut store = ParamStore::new(0, Precision::F64);
    let oc = ObjectClassifier::new(&mut store, &cfg).unwrap();
    assert_eq!(store.value(oc.fc1_w).shape()[0], 2376);
    assert_eq!(store.value(oc.fc2_w).shape()[1], 37);
}

#[test]
fn single_pair_single_object_loss_by_hand() {
    let sizes = [2, 2, 3];
    let store = ParamStore::new(0, Precision::F64);
    let mut g = Graph::new(&store);
    let raw = [vec![0.4, -0.2], vec![1.0, 0.5], vec![-0.5, 0.3, 2.0]];
    let logits: [_; 3] = std::array::from_fn(|t| g.matrix(1, sizes[t], raw[t].clone()).unwrap());
    let targets = PairTargets {
        positives: [vec![0], vec![0, 1], vec![2]],
    };
    let lp = predicate_loss(&mut g, &logits, &[0], &[targets], sizes).unwrap().unwrap();
    let obj = [0.2, 1.5, -0.7];
    let ol = g.matrix(1, 3, obj.to_vec()).unwrap();
    let lo = g.cross_entropy(ol, &[1]).unwrap();
    let total = total_loss(&mut g, Some(lp), Some(lo)).unwrap();

    let s = |t: usize, i: usize| sig(raw[t][i]);
    let want_p = (1.0 - s(0, 0) + s(0, 1)) + 0.0 + (1.0 - s(2, 2) + s(2, 0)) + (1.0 - s(2, 2) + s(2, 1));
    let z: f64 = obj.iter().map(|x| x.exp()).sum();
    let want_o = -(obj[1].exp() / z).ln();
    assert!((g.scalar(lp) - want_p).abs() < 1e-12);
    assert!((g.scalar(total) - want_p - want_o).abs() < 1e-12);
}

#[test]
fn classification_term_vanishes_with_confident_labels() {
    let store = ParamStore::new(0, Precision::F64);
    let mut g = Graph::new(&store);
    let mut prev = f64::INFINITY;
    for scale in [1.0, 5.0, 20.0] {
        let l = g.matrix(1, 3, vec![0.0, scale, 0.0]).unwrap();
        let ce = g.cross_entropy(l, &[1]).unwrap();
        let v = g.scalar(ce);
        assert!(v < prev);
        prev = v;
    }
    assert!(prev < 1e-8);
}

#[test]
fn loss_without_samples_is_a_contract_error() {
    let store = ParamStore::new(0, Precision::F64);
    let mut g = Graph::new(&store);
    assert!(total_loss(&mut g, None, None).is_err());
}

proptest! {
    #[test]
    fn margin_loss_non_negative_and_shift_invariant(
        scores in prop::collection::vec(-3f64..3.0, 2..8),
        split in 1usize..7,
        shift in -5f64..5.0,
    ) {
        let n = scores.len();
        let k = split.min(n - 1);
        let pos: Vec<usize> = (0..k).collect();
        let neg: Vec<usize> = (k..n).collect();
        let l = margin_loss(&scores, &pos, &neg);
        prop_assert!(l >= 0.0);
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        prop_assert!((margin_loss(&shifted, &pos, &neg) - l).abs() < 1e-9);
        let min_pos = pos.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        let max_neg = neg.iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(l == 0.0, min_pos >= max_neg + 1.0);
    }
}
