//! Datasets: annotations, detection features, manifests, synthetic videos and
//! order perturbations.

pub mod annotations;
pub mod featio;
pub mod manifest;
pub mod perturb;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::features::{BoundingBox, FrameDetections};

pub use annotations::{load_annotations, save_annotations};
pub use featio::{read_features, write_features, FeatureDims};
pub use manifest::{check_compatible, Manifest, Split};
pub use perturb::{perturb_videos, Perturbation};
pub use synth::{synth_generate, SynthSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub class: usize,
    pub bbox: BoundingBox,
}

/// Annotated predicates of one subject–object pair, per type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationAnnotation {
    pub subject: usize,
    pub object: usize,
    pub predicates: [Vec<usize>; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthGraph {
    pub objects: Vec<ObjectAnnotation>,
    pub relations: Vec<RelationAnnotation>,
}

impl GroundTruthGraph {
    pub fn triplet_count(&self) -> usize {
        self.relations
            .iter()
            .map(|r| r.predicates.iter().map(Vec::len).sum::<usize>())
            .sum()
    }

    pub fn relation(&self, subject: usize, object: usize) -> Option<&RelationAnnotation> {
        self.relations
            .iter()
            .find(|r| r.subject == subject && r.object == object)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    /// Frame number within the source video.
    pub index: usize,
    pub gt: GroundTruthGraph,
    pub detections: FrameDetections,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub frames: Vec<FrameRecord>,
}

impl VideoSample {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

/// Drops detections whose short edge is at most `min_short_edge` pixels.
pub fn filter_small_boxes(detections: &FrameDetections, min_short_edge: f64) -> FrameDetections {
    let keep: Vec<bool> = detections
        .objects
        .iter()
        .map(|o| o.bbox.short_edge() > min_short_edge)
        .collect();
    detections.retain(&keep)
}

/// Whether the GT box survives the small-box filter.
pub fn box_is_large_enough(b: &BoundingBox, min_short_edge: f64) -> bool {
    b.short_edge() > min_short_edge
}
