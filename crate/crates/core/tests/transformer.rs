#![allow(clippy::single_range_in_vec_init)]

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sttran_core::config::{FrameEncodingKind, ModelConfig};
use sttran_core::numerics::{Graph, ParamStore, Precision, Tensor};
use sttran_core::transformer::{
    att_layer, attention, build_frame_encoding, make_windows, multi_head, select_final, spatial_encoder,
    temporal_decoder, AttentionParams, FrameEncoding, TransformerParams,
};

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn layer(store: &mut ParamStore, name: &str, d: usize, heads: usize) -> AttentionParams {
    AttentionParams::new(store, name, d, heads, 2 * d).unwrap()
}

fn set(store: &mut ParamStore, id: sttran_core::numerics::ParamId, t: Tensor) {
    store.get_mut(id).value = t;
}

fn identity(d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[d, d]);
    for i in 0..d {
        t.data_mut()[i * d + i] = 1.0;
    }
    t
}

#[test]
fn attention_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (q, k, v) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4), random(&mut rng, 3, 5));
    let out = attention(&q, &k, &v).unwrap();
    for i in 0..3 {
        let logits: Vec<f64> = (0..3)
            .map(|j| (0..4).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() / 2.0)
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for c in 0..5 {
            let want: f64 = (0..3).map(|j| logits[j].exp() / z * v.at(j, c)).sum();
            assert!((out.at(i, c) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn orthogonal_query_averages_values() {
    let q = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
    let k = Tensor::matrix(3, 2, vec![0.0, 1.0, 0.0, -2.0, 0.0, 5.0]).unwrap();
    let v = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
    let out = attention(&q, &k, &v).unwrap();
    assert!((out.at(0, 0) - 3.0).abs() < 1e-12);
    assert!((out.at(0, 1) - 5.0).abs() < 1e-12);
}

#[test]
fn single_head_identity_projections_reduce_to_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 4;
    let mut store = ParamStore::new(0, Precision::F64);
    let p = layer(&mut store, "l", d, 1);
    for id in [p.w_q, p.w_k, p.w_v, p.w_o] {
        set(&mut store, id, identity(d));
    }
    let x = random(&mut rng, 5, d);
    let want = attention(&x, &x, &x).unwrap();
    let mut g = Graph::new(&store);
    let xv = g.input(x);
    let y = multi_head(&mut g, &p, xv, xv, xv, &[0..5]).unwrap();
    assert!(g.value(y).max_abs_diff(&want) < 1e-12);
}

#[test]
fn zero_output_projection_gives_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new(0, Precision::F64);
    let p = layer(&mut store, "l", 8, 2);
    set(&mut store, p.w_o, Tensor::zeros(&[8, 8]));
    let mut g = Graph::new(&store);
    let x = g.input(random(&mut rng, 6, 8));
    let y = multi_head(&mut g, &p, x, x, x, &[0..6]).unwrap();
    assert!(g.data(y).iter().all(|&v| v == 0.0));
}

fn ln(row: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    row.iter().map(|x| (x - mean) / (var + 1e-5).sqrt()).collect()
}

#[test]
fn zeroed_layer_is_double_layer_norm_of_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 6;
    let mut store = ParamStore::new(0, Precision::F64);
    let p = layer(&mut store, "l", d, 2);
    for id in [p.w_q, p.w_k, p.w_v, p.w_o] {
        set(&mut store, id, Tensor::zeros(&[d, d]));
    }
    set(&mut store, p.ff1_w, Tensor::zeros(&[d, 2 * d]));
    set(&mut store, p.ff2_w, Tensor::zeros(&[2 * d, d]));
    let res = random(&mut rng, 3, d);
    let mut g = Graph::new(&store);
    let x = g.input(random(&mut rng, 3, d));
    let r = g.input(res.clone());
    let y = att_layer(&mut g, &p, x, x, x, r, &[0..3]).unwrap();
    for i in 0..3 {
        let want = ln(&ln(res.row(i)));
        for (a, b) in g.value(y).row(i).iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn layers_preserve_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new(0, Precision::F64);
    let p = layer(&mut store, "l", 8, 4);
    for n in [1, 2, 7] {
        let mut g = Graph::new(&store);
        let x = g.input(random(&mut rng, n, 8));
        let y = att_layer(&mut g, &p, x, x, x, x, &[0..n]).unwrap();
        assert_eq!(g.shape(y), [n, 8]);
    }
}

#[test]
fn single_entry_attends_to_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new(0, Precision::F64);
    let p = layer(&mut store, "l", 4, 1);
    set(&mut store, p.w_o, identity(4));
    let xt = random(&mut rng, 1, 4);
    let mut g = Graph::new(&store);
    let x = g.input(xt.clone());
    let y = multi_head(&mut g, &p, x, x, x, &[0..1]).unwrap();
    // softmax over one key is 1, so the head returns x W_V
    let wv = store.value(p.w_v);
    for c in 0..4 {
        let want: f64 = (0..4).map(|i| xt.at(0, i) * wv.at(i, c)).sum();
        assert!((g.value(y).at(0, c) - want).abs() < 1e-12);
    }
}

#[test]
fn encoder_permutation_within_frame() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new(0, Precision::F64);
    let layers = vec![layer(&mut store, "e", 8, 2)];
    let x = random(&mut rng, 5, 8);
    let frames: Vec<Range<usize>> = vec![0..3, 3..5];
    let perm = [2, 0, 1, 4, 3];
    let permuted = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let run = |t: Tensor| {
        let mut g = Graph::new(&store);
        let xv = g.input(t);
        let y = spatial_encoder(&mut g, &layers, xv, &frames).unwrap();
        g.value(y)
    };
    let (a, b) = (run(x), run(permuted));
    for (new, &old) in perm.iter().enumerate() {
        for c in 0..8 {
            assert!((b.at(new, c) - a.at(old, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn frames_do_not_mix_in_the_encoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new(0, Precision::F64);
    let layers = vec![layer(&mut store, "e", 8, 2)];
    let mut x = random(&mut rng, 4, 8);
    let run = |t: &Tensor| {
        let mut g = Graph::new(&store);
        let xv = g.input(t.clone());
        let y = spatial_encoder(&mut g, &layers, xv, &[0..2, 2..4]).unwrap();
        g.value(y)
    };
    let before = run(&x);
    for c in 0..8 {
        x.data_mut()[3 * 8 + c] += 1.0;
    }
    let after = run(&x);
    assert_eq!(before.row(0), after.row(0));
    assert_eq!(before.row(1), after.row(1));
    assert_ne!(before.row(2), after.row(2));
}

#[test]
fn window_examples() {
    let frames = |t, eta| make_windows(t, eta, 1).into_iter().map(|w| w.frames).collect::<Vec<_>>();
    assert_eq!(frames(4, 2), vec![vec![0, 1], vec![1, 2], vec![2, 3]]);
    assert_eq!(frames(1, 2), vec![vec![0]]);
    assert_eq!(frames(5, 5), vec![vec![0, 1, 2, 3, 4]]);
}

#[test]
fn select_final_examples() {
    let w = make_windows(4, 2, 1);
    let pick = select_final(&w, 4);
    assert_eq!(pick[0], (0, 0));
    assert_eq!(pick[2], (1, 1));
    assert!(select_final(&make_windows(3, 3, 1), 3).iter().all(|&(w, _)| w == 0));
    assert_eq!(select_final(&make_windows(3, 1, 1), 3), vec![(0, 0), (1, 0), (2, 0)]);
}

#[test]
fn frame_encoding_shapes() {
    let mut store = ParamStore::new(0, Precision::F64);
    let e = build_frame_encoding(&mut store, FrameEncodingKind::Learned, 2, 1936, 0.02).unwrap();
    assert_eq!(e.vectors(&store, 2, 1936).shape(), [2, 1936]);
    let none = build_frame_encoding(&mut store, FrameEncodingKind::None, 2, 16, 0.02).unwrap();
    let mut g = Graph::new(&store);
    assert!(none.rows(&mut g, &[0, 1, 0]).unwrap().is_none());
}

#[test]
fn decoder_without_encoding_swaps_with_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new(0, Precision::F64);
    let layers = vec![layer(&mut store, "d0", 8, 2), layer(&mut store, "d1", 8, 2)];
    let learned = build_frame_encoding(&mut store, FrameEncodingKind::Learned, 2, 8, 1.0).unwrap();
    let (a, b) = (random(&mut rng, 2, 8), random(&mut rng, 3, 8));
    let stack = |first: &Tensor, second: &Tensor| {
        let rows: Vec<Vec<f64>> = (0..first.rows())
            .map(|i| first.row(i).to_vec())
            .chain((0..second.rows()).map(|i| second.row(i).to_vec()))
            .collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let run = |x: Tensor, frames: &[Range<usize>], enc: &FrameEncoding| {
        let mut g = Graph::new(&store);
        let xv = g.input(x);
        let y = temporal_decoder(&mut g, &layers, enc, xv, frames, 2, 1, true).unwrap();
        g.value(y)
    };
    let ab = run(stack(&a, &b), &[0..2, 2..5], &FrameEncoding::None);
    let ba = run(stack(&b, &a), &[0..3, 3..5], &FrameEncoding::None);
    for i in 0..2 {
        for c in 0..8 {
            assert!((ab.at(i, c) - ba.at(3 + i, c)).abs() < 1e-12);
        }
    }
    // learned encodings tell the slots apart
    let ab = run(stack(&a, &b), &[0..2, 2..5], &learned);
    let ba = run(stack(&b, &a), &[0..3, 3..5], &learned);
    let diff = (0..2)
        .flat_map(|i| (0..8).map(move |c| (i, c)))
        .map(|(i, c)| (ab.at(i, c) - ba.at(3 + i, c)).abs())
        .fold(0.0, f64::max);
    assert!(diff > 1e-6);
}

#[test]
fn paper_stack_sizes() {
    let cfg = ModelConfig::paper();
    let mut store = ParamStore::new(0, Precision::F64);
    let t = TransformerParams::new(&mut store, &cfg).unwrap();
    assert_eq!((t.encoder.len(), t.decoder.len()), (1, 3));
    assert_eq!(t.encoder[0].n_heads, 8);
    assert_eq!(store.value(t.encoder[0].ff1_w).shape(), [1936, 2048]);
    assert_eq!(store.value(t.encoder[0].ff2_w).shape(), [2048, 1936]);
}

#[test]
fn transformer_forward_is_deterministic() {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::desk()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&mut rng, 7, cfg.d_model);
    let run = || {
        let mut store = ParamStore::new(cfg.seed, cfg.precision);
        let t = TransformerParams::new(&mut store, &cfg).unwrap();
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let y = t.forward(&mut g, xv, &[0..2, 2..4, 4..7]).unwrap();
        g.value(y)
    };
    assert_eq!(run(), run());
}
