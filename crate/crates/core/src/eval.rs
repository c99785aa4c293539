//! Recall@K under the three tasks and strategies, predicate AP, box IoU and
//! per-class NMS.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::Mode;
use crate::data::{GroundTruthGraph, VideoSample};
use crate::features::BoundingBox;
use crate::graphgen::{apply_strategy, frame_candidates, score_triplets, topk, Strategy, StrategyConfig, Triplet};
use crate::error::Result;
use crate::model::{FrameOutput, Sttran, VideoOutput};
use crate::par::{self, Exec};
use crate::vocab::Vocabulary;

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy per-class NMS. Returns kept indices in descending score order
/// (ties by index); a box is suppressed when its IoU with a kept box of the
/// same class is strictly above `iou_threshold`.
pub fn nms_per_class(boxes: &[BoundingBox], classes: &[usize], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| classes[k] != classes[i] || iou(&boxes[k], &boxes[i]) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

/// One annotated `<subject, predicate, object>`.
#[derive(Clone, Debug, PartialEq)]
pub struct GtTriplet {
    pub subject: usize,
    pub object: usize,
    pub subject_class: usize,
    pub object_class: usize,
    pub subject_box: BoundingBox,
    pub object_box: BoundingBox,
    pub predicate_index: usize,
}

pub fn gt_triplets(gt: &GroundTruthGraph, sizes: [usize; 3]) -> Vec<GtTriplet> {
    let mut out = Vec::new();
    for r in &gt.relations {
        let (s, o) = (&gt.objects[r.subject], &gt.objects[r.object]);
        let mut offset = 0;
        for t in 0..3 {
            for &p in &r.predicates[t] {
                out.push(GtTriplet {
                    subject: r.subject,
                    object: r.object,
                    subject_class: s.class,
                    object_class: o.class,
                    subject_box: s.bbox,
                    object_box: o.bbox,
                    predicate_index: offset + p,
                });
            }
            offset += sizes[t];
        }
    }
    out
}

/// Whether `pred` matches `gt`: same predicate and classes, and the same
/// annotated objects when boxes are given, or IoU of at least 0.5 for both
/// boxes otherwise.
pub fn triplet_matches(pred: &Triplet, gt: &GtTriplet, mode: Mode) -> bool {
    if pred.predicate_index != gt.predicate_index
        || pred.subject.class != gt.subject_class
        || pred.object.class != gt.object_class
    {
        return false;
    }
    if mode.boxes_given() {
        pred.subject.gt_index == Some(gt.subject) && pred.object.gt_index == Some(gt.object)
    } else {
        iou(&pred.subject.bbox, &gt.subject_box) >= 0.5 && iou(&pred.object.bbox, &gt.object_box) >= 0.5
    }
}

/// Greedy matching in rank order; each annotation is consumed at most once.
/// Returns the matched annotation index per prediction.
pub fn match_triplets(ranked: &[Triplet], gts: &[GtTriplet], mode: Mode) -> Vec<Option<usize>> {
    let mut used = vec![false; gts.len()];
    ranked
        .iter()
        .map(|p| {
            let hit = (0..gts.len()).find(|&i| !used[i] && triplet_matches(p, &gts[i], mode));
            if let Some(i) = hit {
                used[i] = true;
            }
            hit
        })
        .collect()
}

/// Matched annotations among the top `k` of one frame.
pub fn frame_hits(ranked: &[Triplet], gts: &[GtTriplet], k: usize, mode: Mode) -> usize {
    match_triplets(topk(ranked, k), gts, mode).iter().flatten().count()
}

/// Mean per-frame recall over frames with at least one annotation, or `None`
/// when no frame has any.
pub fn recall_at_k(frames: &[(Vec<Triplet>, Vec<GtTriplet>)], k: usize, mode: Mode) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (ranked, gts) in frames {
        if gts.is_empty() {
            continue;
        }
        sum += frame_hits(ranked, gts, k, mode) as f64 / gts.len() as f64;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Mean precision at the rank of each positive, ranking by score descending
/// and sample index on ties. `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Per-predicate AP over annotated pairs. Each pair whose two objects are
/// linked to annotations is one sample per predicate.
pub fn ap_pred(outputs: &[(FrameOutput, GroundTruthGraph)], sizes: [usize; 3]) -> Vec<Option<f64>> {
    let total: usize = sizes.iter().sum();
    let mut scores = vec![Vec::new(); total];
    let mut labels = vec![Vec::new(); total];
    for (frame, gt) in outputs {
        for p in frame_candidates(frame) {
            let (Some(s), Some(o)) = (p.subject.gt_index, p.object.gt_index) else {
                continue;
            };
            let rel = gt.relation(s, o);
            let mut offset = 0;
            for t in 0..3 {
                for (id, &c) in p.confidences[t].iter().enumerate() {
                    scores[offset + id].push(c);
                    labels[offset + id].push(rel.is_some_and(|r| r.predicates[t].contains(&id)));
                }
                offset += sizes[t];
            }
        }
    }
    scores
        .iter()
        .zip(&labels)
        .map(|(s, l)| average_precision(s, l))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecallCell {
    pub mode: Mode,
    pub strategy: Strategy,
    pub k: usize,
    pub recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub recalls: Vec<RecallCell>,
    pub ap: Vec<(String, Option<f64>)>,
    pub threshold: f64,
    pub frames_evaluated: usize,
    pub frames_skipped: usize,
    /// `(threshold, recall)` per mode at the sweep K.
    pub sweep: Vec<(Mode, usize, Vec<(f64, Option<f64>)>)>,
}

impl EvalReport {
    pub fn recall(&self, mode: Mode, strategy: Strategy, k: usize) -> Option<f64> {
        self.recalls
            .iter()
            .find(|c| c.mode == mode && c.strategy == strategy && c.k == k)
            .and_then(|c| c.recall)
    }

    /// Table with one row per (mode, strategy) and one column per K.
    pub fn to_text(&self) -> String {
        let mut ks: Vec<usize> = self.recalls.iter().map(|c| c.k).collect();
        ks.sort_unstable();
        ks.dedup();
        let mut out = String::new();
        let _ = write!(out, "{:<8} {:<9}", "task", "strategy");
        for k in &ks {
            let _ = write!(out, " {:>7}", format!("R@{k}"));
        }
        out.push('\n');
        let mut rows: Vec<(Mode, Strategy)> = Vec::new();
        for c in &self.recalls {
            if !rows.contains(&(c.mode, c.strategy)) {
                rows.push((c.mode, c.strategy));
            }
        }
        for (m, s) in rows {
            let _ = write!(out, "{:<8} {:<9}", m.name(), s.name());
            for &k in &ks {
                let cell = match self.recall(m, s, k) {
                    Some(r) => format!("{:.2}", 100.0 * r),
                    None => "-".into(),
                };
                let _ = write!(out, " {cell:>7}");
            }
            out.push('\n');
        }
        if !self.ap.is_empty() {
            out.push_str("\npredicate AP\n");
            for (name, ap) in &self.ap {
                let v = ap.map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a));
                let _ = writeln!(out, "  {name:<24} {v:>7}");
            }
        }
        for (m, k, curve) in &self.sweep {
            let _ = writeln!(out, "\n{} semi R@{k} by threshold", m.name());
            for (t, r) in curve {
                let v = r.map_or("-".to_string(), |r| format!("{:.2}", 100.0 * r));
                let _ = writeln!(out, "  {t:.2} {v:>7}");
            }
        }
        let _ = writeln!(
            out,
            "\nthreshold {}  frames evaluated {}  frames without annotations {}",
            self.threshold, self.frames_evaluated, self.frames_skipped
        );
        out
    }
}

/// Candidates and annotations of every frame, ready for ranking.
pub struct FrameEval {
    pub candidates: Vec<Triplet>,
    pub gts: Vec<GtTriplet>,
}

pub fn frame_evals(outputs: &[VideoOutput], videos: &[VideoSample], sizes: [usize; 3], exec: Exec) -> Vec<FrameEval> {
    let pairs: Vec<(&FrameOutput, &GroundTruthGraph)> = outputs
        .iter()
        .zip(videos)
        .flat_map(|(o, v)| o.frames.iter().zip(v.frames.iter().map(|f| &f.gt)))
        .collect();
    par::map(exec, &pairs, |(f, gt)| FrameEval {
        candidates: score_triplets(&frame_candidates(f)),
        gts: gt_triplets(gt, sizes),
    })
}

/// Recall for one strategy over precomputed frame candidates.
pub fn strategy_recall(frames: &[FrameEval], cfg: StrategyConfig, k: usize, mode: Mode, exec: Exec) -> Option<f64> {
    let per_frame: Vec<Option<f64>> = par::map(exec, frames, |f| {
        if f.gts.is_empty() {
            return None;
        }
        let ranked = apply_strategy(&f.candidates, cfg);
        Some(frame_hits(&ranked, &f.gts, k, mode) as f64 / f.gts.len() as f64)
    });
    let vals: Vec<f64> = per_frame.into_iter().flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Semi-constraint recall at each threshold without rerunning the model.
pub fn threshold_sweep(frames: &[FrameEval], thresholds: &[f64], k: usize, mode: Mode, exec: Exec) -> Vec<(f64, Option<f64>)> {
    thresholds
        .iter()
        .map(|&t| {
            let cfg = StrategyConfig {
                kind: Strategy::Semi,
                threshold: t,
            };
            (t, strategy_recall(frames, cfg, k, mode, exec))
        })
        .collect()
}

/// The 0.70..=0.95 grid in steps of 0.05.
pub fn default_sweep() -> Vec<f64> {
    (0..6).map(|i| 0.70 + 0.05 * i as f64).collect()
}

/// Recall table for one task plus AP when boxes are given.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_mode(
    report: &mut EvalReport,
    mode: Mode,
    outputs: &[VideoOutput],
    videos: &[VideoSample],
    vocab: &Vocabulary,
    strategies: &[Strategy],
    ks: &[usize],
    sweep: Option<&[f64]>,
    exec: Exec,
) {
    let sizes = vocab.sizes();
    let frames = frame_evals(outputs, videos, sizes, exec);
    let with_gt = frames.iter().filter(|f| !f.gts.is_empty()).count();
    report.frames_evaluated = report.frames_evaluated.max(with_gt);
    report.frames_skipped = report.frames_skipped.max(frames.len() - with_gt);
    for &s in strategies {
        let cfg = StrategyConfig {
            kind: s,
            threshold: report.threshold,
        };
        for &k in ks {
            report.recalls.push(RecallCell {
                mode,
                strategy: s,
                k,
                recall: strategy_recall(&frames, cfg, k, mode, exec),
            });
        }
    }
    if mode == Mode::PredCls {
        let paired: Vec<(FrameOutput, GroundTruthGraph)> = outputs
            .iter()
            .zip(videos)
            .flat_map(|(o, v)| o.frames.iter().cloned().zip(v.frames.iter().map(|f| f.gt.clone())))
            .collect();
        let ap = ap_pred(&paired, sizes);
        report.ap = vocab
            .all_predicates()
            .zip(ap)
            .map(|(p, a)| (format!("{}/{}", p.kind.name(), vocab.predicate_name(p)), a))
            .collect();
    }
    if let Some(grid) = sweep {
        let k = ks.iter().copied().find(|&k| k == 20).unwrap_or(ks[0]);
        report.sweep.push((mode, k, threshold_sweep(&frames, grid, k, mode, exec)));
    }
}

/// Full evaluation: runs `model` under each task and fills the recall table.
/// The model's configured task is restored afterwards.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &mut Sttran,
    videos: &[VideoSample],
    vocab: &Vocabulary,
    modes: &[Mode],
    strategies: &[Strategy],
    ks: &[usize],
    threshold: f64,
    sweep: Option<&[f64]>,
    exec: Exec,
) -> Result<EvalReport> {
    let trained = model.net.config.mode;
    let mut report = empty_report(threshold);
    let mut outcome = Ok(());
    for &mode in modes {
        model.net.config.mode = mode;
        let outputs: Result<Vec<VideoOutput>> = model.predict_many(videos, exec).into_iter().collect();
        match outputs {
            Ok(outputs) => evaluate_mode(&mut report, mode, &outputs, videos, vocab, strategies, ks, sweep, exec),
            Err(e) => {
                outcome = Err(e);
                break;
            }
        }
    }
    model.net.config.mode = trained;
    outcome.map(|_| report)
}

pub fn empty_report(threshold: f64) -> EvalReport {
    EvalReport {
        recalls: Vec::new(),
        ap: Vec::new(),
        threshold,
        frames_evaluated: 0,
        frames_skipped: 0,
        sweep: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox { x1, y1, x2, y2 }
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((iou(&a, &bx(5.0, 5.0, 15.0, 15.0)) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn nms_examples() {
        // IoU 0.6: 10x10 boxes offset by 2.5 px horizontally -> 75/125
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(2.5, 0.0, 12.5, 10.0);
        assert!((iou(&a, &b) - 0.6).abs() < 1e-12);
        assert_eq!(nms_per_class(&[a, b], &[1, 1], &[0.9, 0.8], 0.4), vec![0]);
        assert_eq!(nms_per_class(&[a, b], &[1, 2], &[0.9, 0.8], 0.4).len(), 2);
        // IoU exactly 0.4: 10x10 boxes sharing 4/7 of their width
        let c = bx(0.0, 0.0, 10.0, 10.0);
        let d = bx(10.0 - 40.0 / 7.0, 0.0, 20.0 - 40.0 / 7.0, 10.0);
        assert!((iou(&c, &d) - 0.4).abs() < 1e-12);
        let v = iou(&c, &d);
        assert_eq!(nms_per_class(&[c, d], &[1, 1], &[0.9, 0.8], v).len(), 2);
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0 + 0.75) / 3.0).abs() < 1e-12);
        assert_eq!(average_precision(&[0.9, 0.1], &[true, false]), Some(1.0));
        assert_eq!(average_precision(&[0.9, 0.5, 0.1], &[false, false, true]), Some(1.0 / 3.0));
        assert_eq!(average_precision(&[0.9], &[false]), None);
    }
}
