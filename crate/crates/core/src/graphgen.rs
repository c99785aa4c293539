//! Scene-graph triplets from per-pair predicate confidences.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::BoundingBox;
use crate::heads::predicate_confidences;
use crate::model::FrameOutput;
use crate::vocab::{PredicateRef, PredicateType};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    With,
    Semi,
    No,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::With, Strategy::Semi, Strategy::No];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::With => "with",
            Strategy::Semi => "semi",
            Strategy::No => "no",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with" => Ok(Strategy::With),
            "semi" => Ok(Strategy::Semi),
            "no" => Ok(Strategy::No),
            _ => Err(Error::Config(format!("unknown strategy `{s}` (with|semi|no)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrategyConfig {
    pub kind: Strategy,
    /// Spatial and contact predicates above this confidence survive under
    /// [`Strategy::Semi`].
    pub threshold: f64,
}

impl StrategyConfig {
    pub fn new(kind: Strategy, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!("threshold {threshold} not in (0,1)")));
        }
        Ok(StrategyConfig { kind, threshold })
    }
}

/// One end of a triplet.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletEnd {
    /// Object index within the frame.
    pub index: usize,
    pub class: usize,
    pub bbox: BoundingBox,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gt_index: Option<usize>,
}

/// Predicate confidences of one subject–object pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairCandidate {
    pub subject: TripletEnd,
    pub object: TripletEnd,
    pub confidences: [Vec<f64>; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub pair: usize,
    pub subject: TripletEnd,
    pub object: TripletEnd,
    pub predicate: PredicateRef,
    /// Position of the predicate in the concatenated vocabulary.
    pub predicate_index: usize,
    pub s_p: f64,
    pub s_rel: f64,
}

/// Pair candidates of one predicted frame.
pub fn frame_candidates(frame: &FrameOutput) -> Vec<PairCandidate> {
    let end = |i: usize| {
        let o = &frame.objects[i];
        TripletEnd {
            index: i,
            class: o.label,
            bbox: o.bbox,
            score: o.score,
            gt_index: o.gt_index,
        }
    };
    frame
        .pairs
        .iter()
        .map(|p| PairCandidate {
            subject: end(p.subject),
            object: end(p.object),
            confidences: predicate_confidences(&p.logits),
        })
        .collect()
}

/// One triplet per (pair, predicate) with `s_rel = s_sub * s_p * s_obj`.
pub fn score_triplets(pairs: &[PairCandidate]) -> Vec<Triplet> {
    let mut out = Vec::new();
    for (k, p) in pairs.iter().enumerate() {
        let mut offset = 0;
        for kind in PredicateType::ALL {
            let conf = &p.confidences[kind.index()];
            for (id, &s_p) in conf.iter().enumerate() {
                out.push(Triplet {
                    pair: k,
                    subject: p.subject,
                    object: p.object,
                    predicate: PredicateRef { kind, id },
                    predicate_index: offset + id,
                    s_p,
                    s_rel: p.subject.score * s_p * p.object.score,
                });
            }
            offset += conf.len();
        }
    }
    out
}

/// Score descending, then pair index, then predicate index.
pub fn rank_order(a: &Triplet, b: &Triplet) -> Ordering {
    b.s_rel
        .total_cmp(&a.s_rel)
        .then(a.pair.cmp(&b.pair))
        .then(a.predicate_index.cmp(&b.predicate_index))
}

/// Filters candidates per strategy and ranks them.
pub fn apply_strategy(candidates: &[Triplet], cfg: StrategyConfig) -> Vec<Triplet> {
    // best predicate per (pair, type): highest s_p, lowest id on ties
    let mut best: std::collections::HashMap<(usize, PredicateType), (f64, usize)> = Default::default();
    for t in candidates {
        let e = best.entry((t.pair, t.predicate.kind)).or_insert((t.s_p, t.predicate.id));
        if t.s_p > e.0 || (t.s_p == e.0 && t.predicate.id < e.1) {
            *e = (t.s_p, t.predicate.id);
        }
    }
    let is_best = |t: &Triplet| best[&(t.pair, t.predicate.kind)].1 == t.predicate.id;
    let mut out: Vec<Triplet> = candidates
        .iter()
        .filter(|t| match cfg.kind {
            Strategy::No => true,
            Strategy::With => is_best(t),
            Strategy::Semi => match t.predicate.kind {
                PredicateType::Attention => is_best(t),
                _ => t.s_p > cfg.threshold,
            },
        })
        .cloned()
        .collect();
    out.sort_by(rank_order);
    out
}

pub fn topk(ranked: &[Triplet], k: usize) -> &[Triplet] {
    &ranked[..k.min(ranked.len())]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn end(i: usize, score: f64) -> TripletEnd {
        TripletEnd {
            index: i,
            class: i,
            bbox: BoundingBox {
                x1: 0.0,
                y1: 0.0,
                x2: 10.0,
                y2: 10.0,
            },
            score,
            gt_index: Some(i),
        }
    }

    #[test]
    fn triplet_score_is_product() {
        let p = PairCandidate {
            subject: end(0, 0.9),
            object: end(1, 0.7),
            confidences: [vec![0.8], vec![0.0], vec![1.0]],
        };
        let t = score_triplets(&[p]);
        assert!((t[0].s_rel - 0.504).abs() < 1e-12);
        assert_eq!(t[1].s_rel, 0.0);
    }

    #[test]
    fn semi_keeps_multi_label_spatial() {
        let p = PairCandidate {
            subject: end(0, 1.0),
            object: end(1, 1.0),
            confidences: [vec![0.6, 0.4], vec![0.95, 0.91, 0.4], vec![0.1, 0.2]],
        };
        let c = score_triplets(&[p]);
        let semi = apply_strategy(&c, StrategyConfig::new(Strategy::Semi, 0.9).unwrap());
        let spatial: Vec<usize> = semi
            .iter()
            .filter(|t| t.predicate.kind == PredicateType::Spatial)
            .map(|t| t.predicate.id)
            .collect();
        assert_eq!(spatial, vec![0, 1]);
        assert!(semi.iter().all(|t| t.predicate.kind != PredicateType::Contact));
        let with = apply_strategy(&c, StrategyConfig::new(Strategy::With, 0.9).unwrap());
        assert_eq!(with.len(), 3);
        let strict = apply_strategy(&c, StrategyConfig::new(Strategy::Semi, 0.99).unwrap());
        assert_eq!(strict.len(), 1);
        assert_eq!(strict[0].predicate.kind, PredicateType::Attention);
    }

    #[test]
    fn threshold_is_strict() {
        let p = PairCandidate {
            subject: end(0, 1.0),
            object: end(1, 1.0),
            confidences: [vec![1.0], vec![0.5], vec![0.25]],
        };
        let c = score_triplets(&[p]);
        let semi = apply_strategy(&c, StrategyConfig::new(Strategy::Semi, 0.5).unwrap());
        assert_eq!(semi.len(), 1);
    }

    #[test]
    fn ties_break_by_pair_then_predicate() {
        let mk = |i| PairCandidate {
            subject: end(0, 1.0),
            object: end(i, 1.0),
            confidences: [vec![0.5, 0.5], vec![0.5], vec![0.5]],
        };
        let ranked = apply_strategy(&score_triplets(&[mk(1), mk(2)]), StrategyConfig::new(Strategy::No, 0.9).unwrap());
        let order: Vec<(usize, usize)> = ranked.iter().map(|t| (t.pair, t.predicate_index)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (0, 2), (0, 3), (1, 0), (1, 1), (1, 2), (1, 3)]);
        assert_eq!(topk(&ranked, 10).len(), 8);
        assert_eq!(topk(&ranked, 3).len(), 3);
    }

    #[test]
    fn zero_threshold_rejected() {
        assert!(StrategyConfig::new(Strategy::Semi, 0.0).is_err());
    }
}
