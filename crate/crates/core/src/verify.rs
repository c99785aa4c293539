//! Self-checks behind `sttran verify` and `sttran gradcheck`: gradient checks
//! per op and end to end, equivariance of the transformer stages, strategy and
//! metric invariants, training determinism and checkpoint round-trips.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::config::{FrameEncodingKind, Mode, ModelConfig};
use crate::data::{synth_generate, FeatureDims, SynthSpec, VideoSample};
use crate::error::{Error, Result};
use crate::eval::recall_at_k;
use crate::features::BoundingBox;
use crate::graphgen::{apply_strategy, score_triplets, PairCandidate, Strategy, StrategyConfig, TripletEnd};
use crate::model::{prepare_video, Sttran};
use crate::numerics::params::{fnv1a, mix_seed};
use crate::numerics::{grad_check, ConvGeom, GradCheckOptions, GradCheckReport, Graph, ParamStore, Precision, Tensor, Var};
use crate::train::Trainer;
use crate::transformer::{build_frame_encoding, frame_ranges, spatial_encoder, temporal_decoder, AttentionParams};

/// Largest relative error a gradient check may report in 64-bit.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &str, r: Result<Check>) -> Check {
        r.unwrap_or_else(|e| Check::new(name, false, format!("error: {e}")))
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s += &format!("{} {:<40} {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        let failed = self.failures().count();
        s += &format!(
            "{} checks, {} failed, seed {}, {:.1}s\n",
            self.checks.len(),
            failed,
            self.seed,
            self.seconds
        );
        s
    }
}

fn reduce(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    if g.data(out).len() == 1 {
        return Ok(out);
    }
    // a fixed random projection so every output element matters
    let (m, n) = (g.rows(out), g.cols(out));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..m * n).map(|_| rng.sample(StandardNormal)).collect();
    let w = g.matrix(m, n, w)?;
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn op_case<F>(name: &str, seed: u64, shapes: &[&[usize]], corrupt: bool, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let case_seed = mix_seed(&[seed, fnv1a(name.as_bytes())]);
    let mut store = ParamStore::new(case_seed, Precision::F64);
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.normal(&format!("{name}.{i}"), s, 1.0))
        .collect::<Result<Vec<_>>>()?;
    let opts = GradCheckOptions {
        corrupt_backward: corrupt,
        ..GradCheckOptions::default()
    };
    grad_check(
        &mut store,
        |g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let out = f(g, &vars)?;
            reduce(g, out, case_seed)
        },
        opts,
    )
}

/// Gradient check of every differentiable graph op on small random inputs.
pub fn op_gradchecks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let conv = ConvGeom {
        in_channels: 2,
        out_channels: 3,
        height: 5,
        width: 5,
        kernel: 3,
        stride: 2,
        padding: 1,
    };
    let mut bn_store = ParamStore::new(seed, Precision::F64);
    let bn_mean = bn_store.buffer("bn.mean", Tensor::zeros(&[4]))?;
    let bn_var = bn_store.buffer("bn.var", Tensor::new(vec![4], vec![1.0; 4])?)?;
    let pos = vec![vec![0], vec![1, 3], vec![2]];
    let neg = vec![vec![1, 2, 3], vec![0, 2], vec![0, 1, 3]];
    let mut out = Vec::new();
    macro_rules! case {
        ($name:expr, $shapes:expr, $f:expr) => {
            out.push(($name, op_case($name, seed, $shapes, false, $f)?));
        };
    }
    case!("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]));
    case!("transpose", &[&[3, 4]], |g, v| Ok(g.transpose(v[0])));
    case!("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
    case!("sub", &[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]));
    case!("mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
    case!("add_row", &[&[3, 4], &[1, 4]], |g, v| g.add_row(v[0], v[1]));
    case!("scale", &[&[3, 4]], |g, v| Ok(g.scale(v[0], -1.7)));
    case!("relu", &[&[3, 4]], |g, v| Ok(g.relu(v[0])));
    case!("sigmoid", &[&[3, 4]], |g, v| Ok(g.sigmoid(v[0])));
    case!("softmax_rows", &[&[3, 4]], |g, v| g.softmax_rows(v[0]));
    case!("linear", &[&[3, 4], &[4, 5], &[1, 5]], |g, v| g.linear(v[0], v[1], Some(v[2])));
    case!("layer_norm", &[&[3, 4], &[1, 4], &[1, 4]], |g, v| g.layer_norm(v[0], v[1], v[2]));
    out.push((
        "batch_norm",
        op_case_with_store(&mut bn_store, "batch_norm", seed, &[&[5, 4], &[1, 4], &[1, 4]], |g, v| {
            g.batch_norm(v[0], v[1], v[2], bn_mean, bn_var, 0.1, true)
        })?,
    ));
    case!("gather_rows", &[&[3, 4]], |g, v| g.gather_rows(v[0], &[2, 0, 2, 1]));
    case!("concat_cols", &[&[3, 2], &[3, 4]], |g, v| g.concat_cols(&[v[0], v[1]]));
    case!("slice_cols", &[&[3, 5]], |g, v| g.slice_cols(v[0], 1, 3));
    case!("concat_rows", &[&[2, 4], &[3, 4]], |g, v| g.concat_rows(&[v[0], v[1]]));
    case!("sum", &[&[3, 4]], |g, v| Ok(g.sum(v[0])));
    case!("mean", &[&[3, 4]], |g, v| Ok(g.mean(v[0])));
    case!("cross_entropy", &[&[3, 5]], |g, v| g.cross_entropy(v[0], &[4, 0, 2]));
    case!("multilabel_margin", &[&[3, 4]], |g, v| {
        let s = g.sigmoid(v[0]);
        g.multilabel_margin(s, &pos, &neg)
    });
    case!("conv2d", &[&[2, conv.in_len()], &[3, conv.patch_len()], &[1, 3]], |g, v| {
        g.conv2d(v[0], v[1], v[2], conv)
    });
    case!("attention", &[&[3, 4], &[5, 4], &[5, 2]], |g, v| {
        crate::transformer::attention_var(g, v[0], v[1], v[2])
    });
    Ok(out)
}

fn op_case_with_store<F>(
    store: &mut ParamStore,
    name: &str,
    seed: u64,
    shapes: &[&[usize]],
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let case_seed = mix_seed(&[seed, fnv1a(name.as_bytes())]);
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.normal(&format!("{name}.{i}"), s, 1.0))
        .collect::<Result<Vec<_>>>()?;
    grad_check(
        store,
        |g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let out = f(g, &vars)?;
            reduce(g, out, case_seed)
        },
        GradCheckOptions::default(),
    )
}

/// Tiny model dimensions for end-to-end gradient checks: `d_model = 16`,
/// two heads, window 2.
pub fn tiny_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        visual_dim: 6,
        semantic_dim: 2,
        union_channels: 2,
        union_size: 2,
        compress_dim: 4,
        mask_size: 6,
        fbox_hidden: 2,
        num_object_classes: 4,
        predicate_sizes: [2, 3, 4],
        d_model: 16,
        n_heads: 2,
        ffn_dim: 8,
        dropout: 0.0,
        window: 2,
        pos_hidden: 4,
        pos_dim: 4,
        obj_hidden: 6,
        precision: Precision::F64,
        mode,
        ..ModelConfig::desk()
    }
}

/// Synthetic spec whose feature dimensions match `cfg`.
pub fn synth_spec_for(cfg: &ModelConfig, n_videos: usize, frames: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        n_videos,
        frames,
        min_objects: 1,
        max_objects: (cfg.num_object_classes - 1).min(3),
        seed,
        dims: FeatureDims::of(cfg),
        predicate_sizes: cfg.predicate_sizes,
        ..SynthSpec::default()
    }
}

/// Finite-difference step for whole-model checks, used with Richardson
/// extrapolation. The loss sums thousands of terms, so a 1e-5 step leaves
/// roundoff near 1e-10 per entry.
pub const E2E_STEP: f64 = 1e-4;

/// Adds small noise to every trainable parameter. Zero-initialized biases
/// otherwise put ReLU inputs exactly on the kink, where finite differences
/// disagree with any one-sided derivative.
pub fn jitter(store: &mut ParamStore, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, fnv1a(b"jitter")]));
    for p in store.iter_mut().filter(|p| p.trainable) {
        for v in p.value.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += std * z;
        }
    }
}

/// Gradient check of the full training loss on one `frames`-frame video.
pub fn end_to_end_gradcheck(mode: Mode, frames: usize, seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        seed,
        ..tiny_config(mode)
    };
    let spec = SynthSpec {
        min_objects: 2,
        max_objects: 2,
        ..synth_spec_for(&cfg, 1, frames, seed)
    };
    let video = synth_generate(&spec)?.remove(0);
    let prepared = prepare_video(&video, mode, &cfg);
    let Sttran { net, mut store } = Sttran::new(cfg)?;
    jitter(&mut store, 0.05, seed);
    let opts = GradCheckOptions {
        step: E2E_STEP,
        corrupt_backward: corrupt,
        richardson: true,
        ..GradCheckOptions::default()
    };
    grad_check(
        &mut store,
        |g| {
            net.loss(g, &video, &prepared)?
                .ok_or_else(|| Error::Contract("fixture video has no loss".into()))
        },
        opts,
    )
}

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation between `encoder(P x)` and `P encoder(x)` for a
/// permutation `P` of the pairs within each frame.
pub fn encoder_permutation_error(cfg: &ModelConfig, seed: u64) -> Result<f64> {
    let mut store = ParamStore::new(seed, Precision::F64);
    let layers = (0..cfg.enc_layers.max(1))
        .map(|i| AttentionParams::new(&mut store, &format!("encoder.{i}"), cfg.d_model, cfg.n_heads, cfg.ffn_dim))
        .collect::<Result<Vec<_>>>()?;
    let counts = [4, 3];
    let frames = frame_ranges(&counts);
    let rows = counts.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_rows(&mut rng, rows, cfg.d_model);
    let perm = [2, 0, 3, 1, 6, 4, 5];
    let run = |x: Tensor| -> Result<Vec<f64>> {
        let mut g = Graph::new(&store);
        let xv = g.input(x);
        let y = spatial_encoder(&mut g, &layers, xv, &frames)?;
        Ok(g.data(y).to_vec())
    };
    let d = cfg.d_model;
    let base = run(x.clone())?;
    let mut px = vec![0.0; rows * d];
    for (i, &p) in perm.iter().enumerate() {
        px[i * d..(i + 1) * d].copy_from_slice(&x.data()[p * d..(p + 1) * d]);
    }
    let permuted = run(Tensor::new(vec![rows, d], px)?)?;
    let mut expected = vec![0.0; rows * d];
    for (i, &p) in perm.iter().enumerate() {
        expected[i * d..(i + 1) * d].copy_from_slice(&base[p * d..(p + 1) * d]);
    }
    Ok(max_abs_diff(&permuted, &expected))
}

/// Largest deviation after swapping the two frames of a single window,
/// mapped back to the original row order.
pub fn decoder_frame_swap_difference(cfg: &ModelConfig, kind: FrameEncodingKind, seed: u64) -> Result<f64> {
    let mut store = ParamStore::new(seed, Precision::F64);
    let layers = (0..cfg.dec_layers.max(1))
        .map(|i| AttentionParams::new(&mut store, &format!("decoder.{i}"), cfg.d_model, cfg.n_heads, cfg.ffn_dim))
        .collect::<Result<Vec<_>>>()?;
    // a unit-scale encoding so the effect is not hidden by the small init
    let encoding = build_frame_encoding(&mut store, kind, 2, cfg.d_model, 1.0)?;
    let d = cfg.d_model;
    let (a, b) = (3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_rows(&mut rng, a + b, d);
    let run = |x: Tensor, counts: [usize; 2]| -> Result<Vec<f64>> {
        let mut g = Graph::new(&store);
        let xv = g.input(x);
        let y = temporal_decoder(&mut g, &layers, &encoding, xv, &frame_ranges(&counts), 2, 1, true)?;
        Ok(g.data(y).to_vec())
    };
    let base = run(x.clone(), [a, b])?;
    let mut swapped = x.data()[a * d..].to_vec();
    swapped.extend_from_slice(&x.data()[..a * d]);
    let out = run(Tensor::new(vec![a + b, d], swapped)?, [b, a])?;
    let mut back = out[b * d..].to_vec();
    back.extend_from_slice(&out[..b * d]);
    Ok(max_abs_diff(&base, &back))
}

fn random_candidates(rng: &mut ChaCha8Rng, sizes: [usize; 3]) -> Vec<PairCandidate> {
    let n = rng.random_range(1..=4);
    let bbox = BoundingBox {
        x1: 0.0,
        y1: 0.0,
        x2: 10.0,
        y2: 10.0,
    };
    let end = |i: usize, score: f64| TripletEnd {
        index: i,
        class: i,
        bbox,
        score,
        gt_index: Some(i),
    };
    (0..n)
        .map(|k| PairCandidate {
            subject: end(0, 1.0),
            object: end(k + 1, rng.random_range(0.5..1.0)),
            // coarse values so ties occur
            confidences: std::array::from_fn(|t| {
                (0..sizes[t]).map(|_| rng.random_range(0..=10) as f64 / 10.0).collect()
            }),
        })
        .collect()
}

fn strategy_invariants(seed: u64, instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = [2, 3, 4];
    let key = |t: &crate::graphgen::Triplet| (t.pair, t.predicate_index);
    for it in 0..instances {
        let cands = random_candidates(&mut rng, sizes);
        let scored = score_triplets(&cands);
        let with = apply_strategy(&scored, StrategyConfig { kind: Strategy::With, threshold: 0.9 });
        let no = apply_strategy(&scored, StrategyConfig { kind: Strategy::No, threshold: 0.9 });
        for p in 0..cands.len() {
            if with.iter().filter(|t| t.pair == p).count() > 3 {
                return Check::new("strategy/invariants", false, format!("instance {it}: >3 triplets per pair"));
            }
        }
        if !with.iter().all(|t| no.iter().any(|u| key(u) == key(t))) {
            return Check::new("strategy/invariants", false, format!("instance {it}: With not within No"));
        }
        let mut prev: Option<Vec<(usize, usize)>> = None;
        for theta in [0.05, 0.2, 0.45, 0.7, 0.9, 0.95] {
            let semi: Vec<_> = apply_strategy(&scored, StrategyConfig { kind: Strategy::Semi, threshold: theta })
                .iter()
                .map(key)
                .collect();
            if let Some(p) = &prev {
                if !semi.iter().all(|k| p.contains(k)) {
                    return Check::new(
                        "strategy/invariants",
                        false,
                        format!("instance {it}: Semi grew when theta rose to {theta}"),
                    );
                }
            }
            prev = Some(semi);
        }
        // recall monotone in K
        let gts = crate::eval::gt_triplets(
            &crate::data::GroundTruthGraph {
                objects: (0..=cands.len())
                    .map(|i| crate::data::ObjectAnnotation { class: i, bbox: cands[0].subject.bbox })
                    .collect(),
                relations: (0..cands.len())
                    .map(|k| crate::data::RelationAnnotation {
                        subject: 0,
                        object: k + 1,
                        predicates: [vec![rng.random_range(0..2)], vec![rng.random_range(0..3)], vec![rng.random_range(0..4)]],
                    })
                    .collect(),
            },
            sizes,
        );
        let frames = vec![(no.clone(), gts)];
        let r: Vec<f64> = [10, 20, 50]
            .iter()
            .map(|&k| recall_at_k(&frames, k, Mode::PredCls).unwrap_or(0.0))
            .collect();
        if !(r[0] <= r[1] && r[1] <= r[2]) {
            return Check::new("strategy/invariants", false, format!("instance {it}: recall not monotone in K {r:?}"));
        }
    }
    Check::new("strategy/invariants", true, format!("{instances} random instances"))
}

fn training_checks(cfg: &ModelConfig, seed: u64) -> Result<Vec<Check>> {
    let cfg = ModelConfig {
        seed,
        mode: Mode::PredCls,
        ..cfg.clone()
    };
    let videos = synth_generate(&SynthSpec {
        seed,
        ..synth_spec_for(&cfg, 20, 5, seed)
    })?;
    let run = || -> Result<Vec<f64>> {
        let mut t = Trainer::new(Sttran::new(cfg.clone())?);
        Ok(t.run(&videos, 50, None)?.losses())
    };
    let a = run()?;
    let b = run()?;
    let mut out = vec![Check::new(
        "train/deterministic",
        a == b,
        format!("two 50-step runs, {} losses", a.len()),
    )];
    let avg = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (first, last) = (avg(&a[..10]), avg(&a[40..]));
    out.push(Check::new(
        "train/loss-decreases",
        last < first,
        format!("mean loss steps 1-10 {first:.4}, steps 41-50 {last:.4}"),
    ));
    Ok(out)
}

fn checkpoint_round_trip(cfg: &ModelConfig, seed: u64) -> Result<Check> {
    let cfg = ModelConfig { seed, ..cfg.clone() };
    let vocab = crate::vocab::Vocabulary::desk(cfg.num_object_classes, cfg.predicate_sizes);
    let model = Sttran::new(cfg)?;
    let mut opt = crate::numerics::OptimizerState::new(crate::train::adamw_config(model.config()), &model.store);
    opt.step = 7;
    let mut first = Vec::new();
    write_checkpoint(&mut first, &model, Some(&opt), &vocab)?;
    let back = read_checkpoint(first.as_slice())?;
    let mut second = Vec::new();
    write_checkpoint(&mut second, &back.model, back.optimizer.as_ref(), &vocab)?;
    Ok(Check::new(
        "checkpoint/round-trip",
        first == second,
        format!("{} bytes", first.len()),
    ))
}

/// Runs every check; `cfg` supplies desk-scale dims for the model-level ones.
pub fn run_verify(cfg: &ModelConfig, seed: u64) -> VerifyReport {
    let start = Instant::now();
    let mut checks = Vec::new();
    match op_gradchecks(seed) {
        Ok(reports) => checks.extend(reports.into_iter().map(|(name, r)| grad_check_result(&format!("gradcheck/op/{name}"), &r))),
        Err(e) => checks.push(Check::new("gradcheck/op", false, format!("error: {e}"))),
    }
    for mode in Mode::ALL {
        let name = format!("gradcheck/end-to-end/{}", mode.name());
        checks.push(Check::from_result(
            &name,
            end_to_end_gradcheck(mode, 3, seed, false).map(|r| grad_check_result(&name, &r)),
        ));
    }
    let name = "gradcheck/negative-control";
    checks.push(Check::from_result(
        name,
        op_case("matmul", seed, &[&[3, 4], &[4, 2]], true, |g, v| g.matmul(v[0], v[1])).map(|r| {
            Check::new(
                name,
                r.max_rel_error > GRAD_TOLERANCE,
                format!("corrupted backward max rel error {:.3e}", r.max_rel_error),
            )
        }),
    ));
    let f64_cfg = ModelConfig {
        precision: Precision::F64,
        ..cfg.clone()
    };
    let name = "encoder/permutation-equivariance";
    checks.push(Check::from_result(
        name,
        encoder_permutation_error(&f64_cfg, seed).map(|e| Check::new(name, e <= 1e-5, format!("max deviation {e:.3e}"))),
    ));
    let name = "decoder/learned-breaks-frame-swap";
    checks.push(Check::from_result(
        name,
        decoder_frame_swap_difference(&f64_cfg, FrameEncodingKind::Learned, seed)
            .map(|e| Check::new(name, e > 1e-6, format!("difference {e:.3e}"))),
    ));
    let name = "decoder/none-restores-frame-swap";
    checks.push(Check::from_result(
        name,
        decoder_frame_swap_difference(&f64_cfg, FrameEncodingKind::None, seed)
            .map(|e| Check::new(name, e <= 1e-5, format!("difference {e:.3e}"))),
    ));
    checks.push(strategy_invariants(seed, 200));
    match training_checks(cfg, seed) {
        Ok(c) => checks.extend(c),
        Err(e) => checks.push(Check::new("train", false, format!("error: {e}"))),
    }
    checks.push(Check::from_result("checkpoint/round-trip", checkpoint_round_trip(cfg, seed)));
    VerifyReport {
        seed,
        checks,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn grad_check_result(name: &str, r: &GradCheckReport) -> Check {
    Check::new(
        name,
        r.max_rel_error <= GRAD_TOLERANCE,
        format!(
            "max rel error {:.3e} over {} entries (worst {}[{}])",
            r.max_rel_error, r.checked, r.worst_param, r.worst_index
        ),
    )
}

/// One synthetic video of `frames` frames with a person and `objects` other
/// objects in each, without duplicate or spurious detections.
pub fn shape_fixture(cfg: &ModelConfig, frames: usize, objects: usize, seed: u64) -> Result<VideoSample> {
    let spec = SynthSpec {
        min_objects: objects,
        max_objects: objects,
        duplicate_rate: 0.0,
        spurious_rate: 0.0,
        ..synth_spec_for(cfg, 1, frames, seed)
    };
    Ok(synth_generate(&spec)?.remove(0))
}
