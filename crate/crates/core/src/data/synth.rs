//! Synthetic videos with controllable temporal structure.
//!
//! Every video has one person and `m` objects of distinct classes, all
//! visible in every frame. The person relates to each object with one
//! attention, one or two spatial and one contact predicate.
//!
//! Attention and spatial labels are frame-local: the union feature map of the
//! pair at frame `t` carries their prototypes. Contact is driven by a latent
//! state that alternates between two pair-specific values (switching with
//! probability `switch_prob` per frame); the union map at `t` carries the
//! latent state `s_t`. The annotated contact at `t` is `s_{t-1}` with
//! probability `coupling` and `s_t` otherwise, so with high coupling the
//! label can only be read off the previous frame.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::featio::{save_features, FeatureDims, FeatureFrame};
use super::manifest::Manifest;
use super::{save_annotations, FrameRecord, GroundTruthGraph, ObjectAnnotation, RelationAnnotation, VideoSample};
use crate::error::{Error, Result};
use crate::features::{BoundingBox, DetectedObject, FrameDetections, PairFeatures};
use crate::numerics::params::{fnv1a, mix_seed};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_videos: usize,
    pub frames: usize,
    /// Inclusive range of non-person objects per video.
    pub min_objects: usize,
    pub max_objects: usize,
    pub coupling: f64,
    pub switch_prob: f64,
    /// Per-frame probability that attention or spatial labels change.
    pub label_drift: f64,
    pub multi_label_rate: f64,
    pub noise: f64,
    /// Probability of an extra overlapping detection per object.
    pub duplicate_rate: f64,
    /// Probability of a tiny spurious detection per frame.
    pub spurious_rate: f64,
    pub width: f64,
    pub height: f64,
    pub seed: u64,
    /// Seed of the feature prototypes; shared by the train and test splits.
    pub world_seed: u64,
    pub dims: FeatureDims,
    pub predicate_sizes: [usize; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_videos: 20,
            frames: 5,
            min_objects: 2,
            max_objects: 3,
            coupling: 0.0,
            switch_prob: 0.9,
            label_drift: 0.2,
            multi_label_rate: 0.0,
            noise: 0.3,
            duplicate_rate: 0.3,
            spurious_rate: 0.3,
            width: 480.0,
            height: 270.0,
            seed: 0,
            world_seed: 0,
            dims: FeatureDims {
                visual_dim: 64,
                union_channels: 8,
                union_size: 3,
                num_classes: 6,
            },
            predicate_sizes: [2, 3, 4],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("synth: {m}")));
        for (name, p) in [
            ("coupling", self.coupling),
            ("switch_prob", self.switch_prob),
            ("label_drift", self.label_drift),
            ("multi_label_rate", self.multi_label_rate),
            ("duplicate_rate", self.duplicate_rate),
            ("spurious_rate", self.spurious_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(&format!("{name} {p} not in [0,1]"));
            }
        }
        if self.frames == 0 {
            return err("frames must be >= 1");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return err("need 1 <= min_objects <= max_objects");
        }
        if self.max_objects + 1 > self.dims.num_classes {
            return err("max_objects must leave room for distinct classes besides person");
        }
        if self.predicate_sizes[2] < 2 {
            return err("contact vocabulary needs at least two predicates");
        }
        if self.predicate_sizes.contains(&0) {
            return err("predicate vocabularies must be non-empty");
        }
        if self.noise < 0.0 || !(self.width > 64.0 && self.height > 64.0) {
            return err("noise must be >= 0 and the frame larger than 64x64");
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::desk(self.dims.num_classes, self.predicate_sizes)
    }

    /// Best accuracy on the contact label of any predictor that sees only the
    /// current frame, from the generator's conditional distribution.
    ///
    /// Given the observed state `a`, the label is `a` with probability
    /// `(1-p) + p(1-q)` and each of the other `K-1` states with probability
    /// `p q / (K-1)`, because the partner state is uniform over them.
    pub fn frame_local_contact_bound(&self) -> f64 {
        let (p, q) = (self.coupling, self.switch_prob);
        let k = self.predicate_sizes[2] as f64;
        ((1.0 - p) + p * (1.0 - q)).max(p * q / (k - 1.0))
    }
}

struct World {
    class_proto: Vec<Vec<f64>>,
    proto: [Vec<Vec<f64>>; 3],
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

impl World {
    fn new(spec: &SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.world_seed, fnv1a(b"world")]));
        let u = spec.dims.union_len();
        let class_proto = (0..spec.dims.num_classes)
            .map(|_| normal_vec(&mut rng, spec.dims.visual_dim, 1.0))
            .collect();
        let proto = std::array::from_fn(|t| {
            (0..spec.predicate_sizes[t])
                .map(|_| normal_vec(&mut rng, u, 1.0))
                .collect()
        });
        World { class_proto, proto }
    }
}

/// Deterministic stand-in union map for a pair that has none on file.
pub fn fallback_union(video: &str, frame: usize, subject: usize, object: usize, len: usize) -> Vec<f64> {
    let seed = mix_seed(&[fnv1a(video.as_bytes()), frame as u64, subject as u64, object as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normal_vec(&mut rng, len, 1.0)
}

fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64, min: f64, max: f64) -> BoundingBox {
    let bw = rng.random_range(min..max).min(w - 2.0);
    let bh = rng.random_range(min..max).min(h - 2.0);
    let x1 = rng.random_range(0.0..(w - bw));
    let y1 = rng.random_range(0.0..(h - bh));
    BoundingBox {
        x1,
        y1,
        x2: x1 + bw,
        y2: y1 + bh,
    }
}

fn jitter(rng: &mut ChaCha8Rng, b: &BoundingBox, amount: f64, w: f64, h: f64) -> BoundingBox {
    let mut d = || rng.random_range(-amount..=amount);
    let (dx, dy, dw, dh) = (d(), d(), d(), d());
    let x1 = (b.x1 + dx).clamp(0.0, w - 20.0);
    let y1 = (b.y1 + dy).clamp(0.0, h - 20.0);
    let x2 = (b.x2 + dx + dw).clamp(x1 + 18.0, w);
    let y2 = (b.y2 + dy + dh).clamp(y1 + 18.0, h);
    BoundingBox { x1, y1, x2, y2 }
}

fn detector_distribution(rng: &mut ChaCha8Rng, class: usize, c: usize) -> Vec<f64> {
    let mut logits = normal_vec(rng, c, 0.5);
    logits[class] += 3.0;
    crate::numerics::graph::softmax_in_place(&mut logits);
    logits
}

fn pick_other(rng: &mut ChaCha8Rng, n: usize, not: usize) -> usize {
    let r = rng.random_range(0..n - 1);
    if r >= not {
        r + 1
    } else {
        r
    }
}

/// Generates `spec.n_videos` videos with features attached.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<VideoSample>> {
    spec.validate()?;
    let world = World::new(spec);
    Ok((0..spec.n_videos).map(|v| generate_video(spec, &world, v)).collect())
}

fn generate_video(spec: &SynthSpec, world: &World, vi: usize) -> VideoSample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, fnv1a(b"video"), vi as u64]));
    let id = format!("synth{:08x}_{vi:04}", spec.seed as u32);
    let (w, h) = (spec.width, spec.height);
    let [n_att, n_spa, n_con] = spec.predicate_sizes;
    let dims = spec.dims;
    let u = dims.union_len();

    let m = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut classes: Vec<usize> = (1..dims.num_classes).collect();
    classes.shuffle(&mut rng);
    let mut obj_classes = vec![0];
    obj_classes.extend_from_slice(&classes[..m]);

    let identity: Vec<Vec<f64>> = obj_classes
        .iter()
        .map(|_| normal_vec(&mut rng, dims.visual_dim, 1.0))
        .collect();
    let mut boxes: Vec<BoundingBox> = obj_classes
        .iter()
        .enumerate()
        .map(|(i, _)| {
            if i == 0 {
                random_box(&mut rng, w, h, 100.0, 200.0)
            } else {
                random_box(&mut rng, w, h, 30.0, 120.0)
            }
        })
        .collect();

    // per relation: attention label, spatial set, latent contact states
    struct Pair {
        attention: usize,
        spatial: Vec<usize>,
        states: [usize; 2],
        current: usize,
    }
    let mut pairs: Vec<Pair> = (1..=m)
        .map(|_| {
            let a = rng.random_range(0..n_con);
            let b = pick_other(&mut rng, n_con, a);
            Pair {
                attention: rng.random_range(0..n_att),
                spatial: vec![rng.random_range(0..n_spa)],
                states: [a, b],
                current: rng.random_range(0..2),
            }
        })
        .collect();

    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        for b in boxes.iter_mut() {
            *b = jitter(&mut rng, b, 4.0, w, h);
        }
        let mut gt = GroundTruthGraph {
            objects: obj_classes
                .iter()
                .zip(&boxes)
                .map(|(&class, &bbox)| ObjectAnnotation { class, bbox })
                .collect(),
            relations: Vec::new(),
        };
        let mut union_of = Vec::with_capacity(m);
        for (k, p) in pairs.iter_mut().enumerate() {
            if t > 0 && rng.random_bool(spec.label_drift) {
                p.attention = rng.random_range(0..n_att);
            }
            if t > 0 && rng.random_bool(spec.label_drift) {
                p.spatial = vec![rng.random_range(0..n_spa)];
            }
            if p.spatial.len() == 1 && n_spa > 1 && rng.random_bool(spec.multi_label_rate) {
                let extra = pick_other(&mut rng, n_spa, p.spatial[0]);
                p.spatial.push(extra);
                p.spatial.sort_unstable();
            } else if p.spatial.len() > 1 {
                p.spatial.truncate(1);
            }
            let previous = p.states[p.current];
            if rng.random_bool(spec.switch_prob) {
                p.current = 1 - p.current;
            }
            let now = p.states[p.current];
            let contact = if rng.random_bool(spec.coupling) { previous } else { now };
            gt.relations.push(RelationAnnotation {
                subject: 0,
                object: k + 1,
                predicates: [vec![p.attention], p.spatial.clone(), vec![contact]],
            });

            let mut map = normal_vec(&mut rng, u, spec.noise);
            let mut add = |v: &[f64]| map.iter_mut().zip(v).for_each(|(x, y)| *x += y);
            add(&world.proto[0][p.attention]);
            for &s in &p.spatial {
                add(&world.proto[1][s]);
            }
            add(&world.proto[2][now]);
            union_of.push(map);
        }

        // detections: one per annotated object, optional duplicates and tiny
        // spurious boxes
        let mut objects = Vec::new();
        let mut link = Vec::new();
        for (i, (&class, b)) in obj_classes.iter().zip(&boxes).enumerate() {
            let mut visual = normal_vec(&mut rng, dims.visual_dim, spec.noise);
            for ((x, p), id) in visual.iter_mut().zip(&world.class_proto[class]).zip(&identity[i]) {
                *x += p + id;
            }
            let score = rng.random_range(0.7..0.99);
            objects.push(DetectedObject {
                visual: visual.clone(),
                bbox: jitter(&mut rng, b, 2.0, w, h),
                class_distribution: detector_distribution(&mut rng, class, dims.num_classes),
                score,
                gt_index: Some(i),
            });
            link.push(Some(i));
            if rng.random_bool(spec.duplicate_rate) {
                objects.push(DetectedObject {
                    visual: visual.iter().map(|x| x + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect(),
                    bbox: jitter(&mut rng, b, 6.0, w, h),
                    class_distribution: detector_distribution(&mut rng, class, dims.num_classes),
                    score: score * 0.5,
                    gt_index: Some(i),
                });
                link.push(Some(i));
            }
        }
        if rng.random_bool(spec.spurious_rate) {
            let class = rng.random_range(1..dims.num_classes);
            objects.push(DetectedObject {
                visual: normal_vec(&mut rng, dims.visual_dim, 1.0),
                bbox: random_box(&mut rng, w, h, 6.0, 14.0),
                class_distribution: detector_distribution(&mut rng, class, dims.num_classes),
                score: rng.random_range(0.3..0.6),
                gt_index: None,
            });
            link.push(None);
        }
        let mut stored = Vec::new();
        for (s, ls) in link.iter().enumerate() {
            if *ls != Some(0) {
                continue;
            }
            for (o, lo) in link.iter().enumerate() {
                let union_map = match lo {
                    Some(0) => continue,
                    Some(j) => union_of[j - 1].clone(),
                    None => fallback_union(&id, t, s, o, u),
                };
                stored.push(PairFeatures {
                    subject: s,
                    object: o,
                    union_map,
                });
            }
        }
        frames.push(FrameRecord {
            index: t,
            gt,
            detections: FrameDetections {
                width: w,
                height: h,
                objects,
                pairs: stored,
            },
        });
    }
    VideoSample { id, frames }
}

/// Writes a train/test dataset with its vocabulary and manifest into `dir`.
pub fn write_dataset(dir: &Path, vocab: &Vocabulary, dims: FeatureDims, train: &[VideoSample], test: &[VideoSample]) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    vocab.save(&dir.join("vocab.txt"))?;
    for (name, videos) in [("train", train), ("test", test)] {
        save_annotations(&dir.join(format!("{name}.jsonl")), videos, vocab)?;
        let frames: Vec<FeatureFrame> = videos
            .iter()
            .flat_map(|v| {
                v.frames.iter().map(|f| FeatureFrame {
                    video: v.id.clone(),
                    index: f.index,
                    detections: f.detections.clone(),
                })
            })
            .collect();
        save_features(&dir.join(format!("{name}.sttd")), dims, &frames)?;
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        vocabulary: dir.join("vocab.txt"),
        train_annotations: dir.join("train.jsonl"),
        train_features: dir.join("train.sttd"),
        test_annotations: dir.join("test.jsonl"),
        test_features: dir.join("test.sttd"),
        dims,
    };
    fs::write(dir.join("manifest.txt"), manifest.to_text())?;
    Ok(manifest)
}
