//! The full model: relationship representations, spatial encoder, temporal
//! decoder, predicate heads and the object classifier, applied per video.

use std::ops::Range;

use crate::config::{Mode, ModelConfig};
use crate::data::{box_is_large_enough, VideoSample};
use crate::error::{Error, Result};
use crate::eval::{iou, nms_per_class};
use crate::features::{
    argmax, assemble_batch, candidate_pairs, spatial_masks, BoundingBox, PairBatch, RepresentationParams,
};
use crate::heads::{predicate_loss, total_loss, ObjectClassifier, PairTargets, PredicateHeads};
use crate::numerics::graph::softmax_in_place;
use crate::numerics::{DropoutCtx, Graph, ParamStore, Tensor, Var};
use crate::par::{self, Exec};
use crate::transformer::{frame_ranges, TransformerParams};

/// Parameter handles of every component; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub representation: RepresentationParams,
    pub transformer: TransformerParams,
    pub heads: PredicateHeads,
    pub objects: ObjectClassifier,
    pub person_class: usize,
}

pub struct Sttran {
    pub net: Network,
    pub store: ParamStore,
}

impl Sttran {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed, config.precision);
        let net = Network::new(&mut store, config)?;
        Ok(Sttran { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn predict(&self, video: &VideoSample) -> Result<VideoOutput> {
        self.net.predict(&self.store, video)
    }

    /// Predicts several videos; `exec` selects parallel or sequential work.
    pub fn predict_many(&self, videos: &[VideoSample], exec: Exec) -> Vec<Result<VideoOutput>> {
        par::map(exec, videos, |v| self.predict(v))
    }
}

/// An object the model reasons about in one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedObject {
    /// Index into the frame's detections.
    pub detection: usize,
    pub bbox: BoundingBox,
    pub gt_index: Option<usize>,
    pub gt_class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedFrame {
    pub objects: Vec<PreparedObject>,
}

/// Selects the objects of each frame for a task.
///
/// With labels given or boxes given, each annotated object uses the
/// highest-scoring detection linked to it and takes the annotated box. For
/// detection, detections pass the small-box filter and per-class NMS and are
/// linked to the annotated object of highest IoU, if at least 0.5. The
/// small-box filter applies whenever labels are not given.
pub fn prepare_video(video: &VideoSample, mode: Mode, cfg: &ModelConfig) -> Vec<PreparedFrame> {
    video
        .frames
        .iter()
        .map(|f| {
            let dets = &f.detections.objects;
            let mut objects = Vec::new();
            if mode.boxes_given() {
                for (i, o) in f.gt.objects.iter().enumerate() {
                    if !mode.labels_given() && !box_is_large_enough(&o.bbox, cfg.min_box_edge) {
                        continue;
                    }
                    let best = dets
                        .iter()
                        .enumerate()
                        .filter(|(_, d)| d.gt_index == Some(i))
                        .max_by(|a, b| a.1.score.total_cmp(&b.1.score).then(b.0.cmp(&a.0)));
                    match best {
                        Some((d, _)) => objects.push(PreparedObject {
                            detection: d,
                            bbox: o.bbox,
                            gt_index: Some(i),
                            gt_class: Some(o.class),
                        }),
                        None => log::warn!(
                            "video {} frame {}: annotated object {i} has no linked features, skipped",
                            video.id,
                            f.index
                        ),
                    }
                }
            } else {
                let candidates: Vec<usize> = (0..dets.len())
                    .filter(|&d| box_is_large_enough(&dets[d].bbox, cfg.min_box_edge))
                    .collect();
                let boxes: Vec<BoundingBox> = candidates.iter().map(|&d| dets[d].bbox).collect();
                let classes: Vec<usize> = candidates.iter().map(|&d| dets[d].argmax_class()).collect();
                let scores: Vec<f64> = candidates.iter().map(|&d| dets[d].score).collect();
                for k in nms_per_class(&boxes, &classes, &scores, cfg.nms_iou) {
                    let d = candidates[k];
                    let mut link: Option<(usize, f64)> = None;
                    for (i, o) in f.gt.objects.iter().enumerate() {
                        let v = iou(&dets[d].bbox, &o.bbox);
                        if v >= 0.5 && link.is_none_or(|(_, b)| v > b) {
                            link = Some((i, v));
                        }
                    }
                    objects.push(PreparedObject {
                        detection: d,
                        bbox: dets[d].bbox,
                        gt_index: link.map(|l| l.0),
                        gt_class: link.map(|l| f.gt.objects[l.0].class),
                    });
                }
            }
            PreparedFrame { objects }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectPrediction {
    pub label: usize,
    pub score: f64,
    pub bbox: BoundingBox,
    pub gt_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairPrediction {
    /// Indices into the frame's predicted objects.
    pub subject: usize,
    pub object: usize,
    pub logits: [Vec<f64>; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput {
    pub index: usize,
    pub objects: Vec<ObjectPrediction>,
    pub pairs: Vec<PairPrediction>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoOutput {
    pub video: String,
    pub frames: Vec<FrameOutput>,
}

/// Shapes of every stage of one forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageShapes {
    pub representation: Vec<usize>,
    pub encoder: Vec<usize>,
    pub decoder: Vec<usize>,
    pub predicate_logits: [Vec<usize>; 3],
    pub object_logits: Option<Vec<usize>>,
}

struct Built {
    object_logits: Option<Var>,
    labels: Vec<usize>,
    scores: Vec<f64>,
    /// Object row ranges per frame.
    object_rows: Vec<Range<usize>>,
    /// `(frame, subject row, object row)` per pair, frames in order.
    pairs: Vec<(usize, usize, usize)>,
    stages: Option<(Var, Var, Var)>,
    logits: Option<[Var; 3]>,
}

impl Network {
    pub fn new(store: &mut ParamStore, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let representation = RepresentationParams::new(store, &config)?;
        let transformer = TransformerParams::new(store, &config)?;
        let heads = PredicateHeads::new(store, config.d_model, config.predicate_sizes)?;
        let objects = ObjectClassifier::new(store, &config)?;
        Ok(Network {
            person_class: 0,
            representation,
            transformer,
            heads,
            objects,
            config,
        })
    }

    fn build(
        &self,
        g: &mut Graph,
        video: &VideoSample,
        prepared: &[PreparedFrame],
        train: bool,
    ) -> Result<Built> {
        let cfg = &self.config;
        let mode = cfg.mode;
        let mut visual = Vec::new();
        let mut dist = Vec::new();
        let mut boxes = Vec::new();
        let mut object_rows = Vec::with_capacity(prepared.len());
        let mut gt_labels = Vec::new();
        for (f, pf) in video.frames.iter().zip(prepared) {
            let start = gt_labels.len();
            let d = &f.detections;
            for o in &pf.objects {
                let det = &d.objects[o.detection];
                if det.visual.len() != cfg.visual_dim || det.class_distribution.len() != cfg.num_object_classes {
                    return Err(Error::shape(
                        "detection features",
                        &[det.visual.len(), det.class_distribution.len()],
                        &[cfg.visual_dim, cfg.num_object_classes],
                    ));
                }
                visual.extend_from_slice(&det.visual);
                dist.extend_from_slice(&det.class_distribution);
                boxes.extend_from_slice(&o.bbox.normalized(d.width, d.height));
                gt_labels.push(o.gt_class);
            }
            object_rows.push(start..gt_labels.len());
        }
        let n = gt_labels.len();
        let visual = g.input(Tensor::new(vec![n, cfg.visual_dim], visual)?);

        let (object_logits, labels, scores) = if mode.labels_given() {
            let labels = gt_labels
                .iter()
                .map(|l| l.ok_or_else(|| Error::Contract("labels-given task with an unlabeled object".into())))
                .collect::<Result<Vec<_>>>()?;
            (None, labels, vec![1.0; n])
        } else if n == 0 {
            (None, Vec::new(), Vec::new())
        } else {
            let dist = g.input(Tensor::new(vec![n, cfg.num_object_classes], dist)?);
            let bx = g.input(Tensor::new(vec![n, 4], boxes)?);
            let logits = self.objects.forward(g, visual, dist, bx, train)?;
            let c = cfg.num_object_classes;
            let mut labels = Vec::with_capacity(n);
            let mut scores = Vec::with_capacity(n);
            for (r, gt) in g.data(logits).chunks(c + 1).zip(&gt_labels) {
                let mut p = r.to_vec();
                softmax_in_place(&mut p);
                let pred = argmax(&p[..c]);
                // pairs follow the annotation while training
                let label = if train { gt.unwrap_or(pred) } else { pred };
                labels.push(label);
                scores.push(p[label]);
            }
            (Some(logits), labels, scores)
        };

        let mut pairs = Vec::new();
        for (fi, rows) in object_rows.iter().enumerate() {
            let local = candidate_pairs(&labels[rows.clone()], self.person_class, cfg.pair_policy);
            if local.is_empty() && !rows.is_empty() {
                log::debug!("video {} frame {}: no candidate pairs", video.id, video.frames[fi].index);
            }
            pairs.extend(local.into_iter().map(|(s, o)| (fi, rows.start + s, rows.start + o)));
        }
        let mut built = Built {
            object_logits,
            labels,
            scores,
            object_rows,
            pairs,
            stages: None,
            logits: None,
        };
        if built.pairs.is_empty() {
            return Ok(built);
        }

        let u = cfg.union_len();
        let mut unions = Vec::with_capacity(built.pairs.len() * u);
        let mut masks = Vec::with_capacity(built.pairs.len() * 2 * cfg.mask_size * cfg.mask_size);
        let mut counts = vec![0usize; prepared.len()];
        let mut index_pairs = Vec::with_capacity(built.pairs.len());
        for &(fi, s, o) in &built.pairs {
            counts[fi] += 1;
            let frame = &video.frames[fi];
            let base = built.object_rows[fi].start;
            let (ps, po) = (&prepared[fi].objects[s - base], &prepared[fi].objects[o - base]);
            match frame.detections.union_map(ps.detection, po.detection) {
                Some(m) if m.len() == u => unions.extend_from_slice(m),
                Some(m) => return Err(Error::shape("union map", &[m.len()], &[u])),
                None => unions.extend(crate::data::synth::fallback_union(
                    &video.id,
                    frame.index,
                    ps.detection,
                    po.detection,
                    u,
                )),
            }
            let (w, h) = (frame.detections.width, frame.detections.height);
            masks.extend(spatial_masks(&ps.bbox, &po.bbox, w, h, cfg.mask_size));
            index_pairs.push((s, o));
        }
        let p = built.pairs.len();
        let union_maps = g.matrix(p, u, unions)?;
        let mask_var = g.matrix(p, 2 * cfg.mask_size * cfg.mask_size, masks)?;
        let batch = PairBatch {
            visual,
            pairs: &index_pairs,
            union_maps,
            masks: mask_var,
            labels: &built.labels,
        };
        let rep = assemble_batch(g, &self.representation, &batch)?;
        let ranges = frame_ranges(&counts);
        let enc = crate::transformer::spatial_encoder(g, &self.transformer.encoder, rep, &ranges)?;
        let t = &self.transformer;
        let dec = crate::transformer::temporal_decoder(
            g,
            &t.decoder,
            &t.encoding,
            enc,
            &ranges,
            t.window,
            t.stride,
            t.reencode_every_layer,
        )?;
        built.logits = Some(self.heads.forward(g, dec)?);
        built.stages = Some((rep, enc, dec));
        Ok(built)
    }

    /// Training objective of one video on `g`: predicate margin loss over
    /// annotated pairs plus object cross-entropy when labels are predicted.
    /// `Ok(None)` when the video offers nothing to learn from.
    pub fn loss(&self, g: &mut Graph, video: &VideoSample, prepared: &[PreparedFrame]) -> Result<Option<Var>> {
        let built = self.build(g, video, prepared, true)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (k, &(fi, s, o)) in built.pairs.iter().enumerate() {
            let base = built.object_rows[fi].start;
            let objs = &prepared[fi].objects;
            let (Some(gs), Some(go)) = (objs[s - base].gt_index, objs[o - base].gt_index) else {
                continue;
            };
            if let Some(rel) = video.frames[fi].gt.relation(gs, go) {
                rows.push(k);
                targets.push(PairTargets {
                    positives: rel.predicates.clone(),
                });
            }
        }
        let lp = match &built.logits {
            Some(l) => predicate_loss(g, l, &rows, &targets, self.config.predicate_sizes)?,
            None => None,
        };
        let lo = match built.object_logits {
            Some(logits) => {
                let bg = self.objects.background();
                let t: Vec<usize> = prepared
                    .iter()
                    .flat_map(|f| f.objects.iter().map(|o| o.gt_class.unwrap_or(bg)))
                    .collect();
                Some(g.cross_entropy(logits, &t)?)
            }
            None => None,
        };
        if lp.is_none() && lo.is_none() {
            return Ok(None);
        }
        total_loss(g, lp, lo).map(Some)
    }

    pub fn predict(&self, store: &ParamStore, video: &VideoSample) -> Result<VideoOutput> {
        let prepared = prepare_video(video, self.config.mode, &self.config);
        let mut g = Graph::new(store);
        let built = self.build(&mut g, video, &prepared, false)?;
        let mut frames: Vec<FrameOutput> = video
            .frames
            .iter()
            .zip(&prepared)
            .zip(&built.object_rows)
            .map(|((f, pf), rows)| FrameOutput {
                index: f.index,
                objects: pf
                    .objects
                    .iter()
                    .zip(rows.clone())
                    .map(|(o, r)| ObjectPrediction {
                        label: built.labels[r],
                        score: built.scores[r],
                        bbox: o.bbox,
                        gt_index: o.gt_index,
                    })
                    .collect(),
                pairs: Vec::new(),
            })
            .collect();
        if let Some(logits) = built.logits {
            let sizes = self.config.predicate_sizes;
            for (k, &(fi, s, o)) in built.pairs.iter().enumerate() {
                let base = built.object_rows[fi].start;
                let row = |t: usize| g.data(logits[t])[k * sizes[t]..(k + 1) * sizes[t]].to_vec();
                frames[fi].pairs.push(PairPrediction {
                    subject: s - base,
                    object: o - base,
                    logits: [row(0), row(1), row(2)],
                });
            }
        }
        Ok(VideoOutput {
            video: video.id.clone(),
            frames,
        })
    }

    /// Runs inference and reports the shape after each stage.
    pub fn stage_shapes(&self, store: &ParamStore, video: &VideoSample) -> Result<StageShapes> {
        let prepared = prepare_video(video, self.config.mode, &self.config);
        let mut g = Graph::new(store);
        let built = self.build(&mut g, video, &prepared, false)?;
        let (rep, enc, dec) = built
            .stages
            .ok_or_else(|| Error::Contract("video has no candidate pairs".into()))?;
        let logits = built.logits.expect("logits accompany stages");
        Ok(StageShapes {
            representation: g.shape(rep).to_vec(),
            encoder: g.shape(enc).to_vec(),
            decoder: g.shape(dec).to_vec(),
            predicate_logits: std::array::from_fn(|t| g.shape(logits[t]).to_vec()),
            object_logits: built.object_logits.map(|l| g.shape(l).to_vec()),
        })
    }
}

/// Dropout context for training step `step`, or `None` when dropout is off.
pub fn dropout_for(cfg: &ModelConfig, step: u64) -> Option<DropoutCtx> {
    (cfg.dropout > 0.0).then_some(DropoutCtx {
        rate: cfg.dropout,
        seed: cfg.seed,
        step,
    })
}
